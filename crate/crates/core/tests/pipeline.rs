use pipetbench_core::labware::Slot;
use pipetbench_core::planning::validate_trajectory;
use pipetbench_core::sim::*;

fn few_tips(n: usize) -> String {
    (0..96).map(|i| if i < n { '1' } else { '0' }).collect()
}

#[test]
fn full_motion_run_plans_every_tip() {
    let mut s = Scenario::default();
    s.planner.motion = MotionMode::Full;
    s.rack.occupancy = Some(few_tips(6));
    let m = run_scenario(&s).unwrap();
    assert_eq!(m.summary.skipped, 90);
    assert_eq!(m.summary.unreachable, 0);
    for t in m.tips.iter().filter(|t| t.outcome != TipOutcome::SkippedEmpty) {
        let d = t.cycle_duration.expect("planned tips carry a cycle duration");
        assert!(d > 0.0 && d.is_finite());
        assert!(t.bounces.is_some());
    }
}

#[test]
fn planned_cycle_is_valid_for_corner_slots() {
    let s = Scenario::default();
    let cell = Workcell::build(&s).unwrap();
    for slot in [Slot::new(0, 0), Slot::new(0, 11), Slot::new(7, 0), Slot::new(7, 11)] {
        let plan = plan_cycle(&s, &cell, slot, 1).unwrap();
        assert_eq!(plan.trajectories.len(), 4);
        for t in &plan.trajectories {
            validate_trajectory(t, &cell.arm, &cell.scene, 1e-3).unwrap();
        }
        // consecutive segments meet at the shared goal
        for w in plan.trajectories.windows(2) {
            assert!(w[0].end().max_abs_diff(w[1].start()) < 1e-12);
        }
    }
}

#[test]
fn blocked_waste_box_fails_goal_search() {
    let mut s = Scenario::default();
    s.scene.boxes.push(BoxSpec {
        name: "lid".into(),
        center: Placement::new(-0.15, -0.10, 0.35, 0.0),
        size: [0.10, 0.10, 0.58],
    });
    let cell = Workcell::build(&s).unwrap();
    let err = plan_cycle(&s, &cell, Slot::new(0, 0), 1).unwrap_err();
    assert!(matches!(err, SimError::Cycle(pipetbench_core::planning::CycleFailure::GoalSearch { segment: 3 })), "{err}");
}

#[test]
fn metrics_json_round_trip_through_a_batch() {
    let runs = run_trials(&Scenario::default(), 3).unwrap();
    for r in &runs {
        let back: RunMetrics = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(&back, r);
        assert_eq!(Summary::from_tips(&back.tips), back.summary);
    }
    let again = run_trials(&Scenario::default(), 3).unwrap();
    assert_eq!(runs, again);
}
