//! Simulation and planning core for robotic pipette-tip pickup with
//! vision-guided alignment correction.

pub mod collision;
pub mod correction;
pub mod geometry;
pub mod kinematics;
pub mod labware;
pub mod planning;
pub mod sim;
pub mod spiral;
