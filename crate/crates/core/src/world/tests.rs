use rand::SeedableRng;

use super::*;

fn simple_task() -> TaskSpec {
    TaskSpec {
        name: "t".into(),
        family: Family::Goal,
        objects: vec![ObjectSpec {
            type_id: 0,
            pos: [0.5, 0.5],
        }],
        stages: vec![Stage {
            object: 0,
            region: 15,
            goal: [0.875, 0.875],
        }],
        start: [0.3, 0.3],
        goal_radius: GOAL_RADIUS,
        instruction: vec!["put".into(), "bowl".into(), "in".into(), "region33".into()],
        seed: 1,
        horizon: 120,
    }
}

fn state_at(p: [f64; 2], objects: Vec<[f64; 2]>) -> WorldState {
    WorldState {
        effector: p,
        velocity: [0.0; 2],
        grip: false,
        attached: None,
        objects,
        stages_done: 0,
        order_violated: false,
    }
}

#[test]
fn step_examples() {
    let task = simple_task();
    let mut s = state_at([0.0, 0.0], vec![[0.9, 0.1]]);
    s.step(&task, [1.0, 0.0, -1.0]).unwrap();
    assert!((s.velocity[0] - 0.1).abs() < 1e-15 && s.velocity[1] == 0.0);
    assert!((s.effector[0] - 0.01).abs() < 1e-15 && s.effector[1] == 0.0);

    let mut s = state_at([0.4, 0.4], vec![[0.9, 0.1]]);
    s.step(&task, [0.0, 0.0, -1.0]).unwrap();
    assert_eq!(s.effector, [0.4, 0.4]);

    let mut s = state_at([0.5, 0.5], vec![[0.52, 0.5]]);
    s.step(&task, [0.0, 0.0, 1.0]).unwrap();
    assert_eq!(s.attached, Some(0));
    for _ in 0..10 {
        s.step(&task, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.objects[0], s.effector);
        assert!(s.velocity.iter().all(|v| v.abs() <= V_MAX));
    }
    s.step(&task, [0.0, 0.0, -1.0]).unwrap();
    assert_eq!(s.attached, None);
    assert!(s.step(&task, [f32::NAN, 0.0, 0.0]).is_err());
}

#[test]
fn success_examples() {
    let task = simple_task();
    let mut s = state_at([0.1, 0.1], vec![[0.875, 0.875]]);
    s.update_stages(&task);
    assert!(s.success(&task));
    let mut s = state_at([0.1, 0.1], vec![[0.875 - 2.0 * GOAL_RADIUS, 0.875]]);
    s.update_stages(&task);
    assert!(!s.success(&task));
}

fn long_task() -> TaskSpec {
    let mut t = simple_task();
    t.family = Family::Long;
    t.objects.push(ObjectSpec {
        type_id: 1,
        pos: [0.2, 0.8],
    });
    t.stages.push(Stage {
        object: 1,
        region: 0,
        goal: [0.125, 0.125],
    });
    t
}

#[test]
fn long_family_enforces_order_and_latches() {
    let task = long_task();
    let mut s = state_at([0.1, 0.1], vec![[0.5, 0.5], [0.125, 0.125]]);
    s.update_stages(&task);
    s.objects[0] = [0.875, 0.875];
    s.update_stages(&task);
    assert!(s.order_violated && !s.success(&task));

    let mut s = state_at([0.1, 0.1], vec![[0.875, 0.875], [0.2, 0.8]]);
    s.update_stages(&task);
    assert_eq!(s.stages_done, 1);
    s.objects[0] = [0.5, 0.5];
    s.objects[1] = [0.125, 0.125];
    s.update_stages(&task);
    assert!(s.success(&task));
}

#[test]
fn scripted_controller_phases() {
    let task = simple_task();
    let mut s = state_at([0.875, 0.875], vec![[0.875, 0.875]]);
    s.attached = Some(0);
    s.grip = true;
    s.update_stages(&task);
    assert_eq!(scripted_action(&s, &task)[2], -1.0);

    let s = state_at([0.1, 0.1], vec![[0.5, 0.5]]);
    let a = scripted_action(&s, &task);
    assert!(a[0] > 0.0 && a[1] > 0.0 && (a[0] - a[1]).abs() < 1e-6);
    assert_eq!(a[2], -1.0);
}

#[test]
fn suites_are_deterministic_and_well_formed() {
    for family in Family::ALL {
        let a = generate_suite(7, family, 10).unwrap();
        let b = generate_suite(7, family, 10).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.len(), 10);
        for (i, t) in a.iter().enumerate() {
            assert!(a[..i].iter().all(|o| o.instruction != t.instruction));
            t.tokens().unwrap();
            let stages = if family == Family::Long { 2 } else { 1 };
            assert_eq!(t.stages.len(), stages);
        }
    }
    let goal = generate_suite(3, Family::Goal, 10).unwrap();
    for (i, t) in goal.iter().enumerate() {
        for o in &goal[..i] {
            let (p, q) = (t.stages[0].goal, o.stages[0].goal);
            assert!(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() > 1e-9);
        }
    }
    assert!(generate_suite(1, Family::Goal, 0).is_err());
}

#[test]
fn pretrain_suite_avoids_excluded_instructions() {
    let lifelong: Vec<TaskSpec> = Family::ALL
        .iter()
        .flat_map(|&f| generate_suite(5, f, 10).unwrap())
        .collect();
    let pre = generate_pretrain_suite(11, 30, &lifelong).unwrap();
    assert_eq!(pre.len(), 30);
    for t in &pre {
        assert!(lifelong.iter().all(|l| l.instruction != t.instruction));
    }
}

#[test]
fn scripted_expert_solves_generated_tasks() {
    for family in Family::ALL {
        for t in generate_suite(21, family, 4).unwrap() {
            let rate = scripted_success_rate(&t, 40, 3);
            assert!(rate >= 0.95, "{} {rate}", t.name);
        }
    }
}

#[test]
fn demos_round_trip_and_replay() {
    let task = &generate_suite(2, Family::Long, 1).unwrap()[0];
    let demos = collect_demonstrations(task, 3, 9, 12).unwrap();
    assert_eq!(demos.len(), 3);
    assert!(demos.iter().all(|d| d.success && d.actions.len() + 1 == d.observations.len()));
    for d in &demos {
        assert!(replay_success(task, d, 12).unwrap());
    }
    let bytes = encode_demos(&demos);
    assert_eq!(bytes, encode_demos(&collect_demonstrations(task, 3, 9, 12).unwrap()));
    assert_eq!(decode_demos(&bytes).unwrap(), demos);
    let err = decode_demos(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, crate::Error::Parse { .. }));
    assert!(decode_demos(b"PEELDEMX\x01\0\0\0").is_err());
}

#[test]
fn observations_have_expected_layout() {
    let task = simple_task();
    let mut rng = crate::rng::StreamRng::seed_from_u64(0);
    let s = WorldState::reset(&task, &mut rng);
    let o = s.observe(&task, 12);
    assert_eq!(o.len(), observation_dim(12));
    assert!(o[..288].iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(o[..144].iter().any(|v| *v > 0.0));
}


#[test]
fn demos_contain_repeated_grip_closures() {
    let task = &generate_suite(3, Family::Goal, 1).unwrap()[0];
    let demos = collect_demonstrations(task, 10, 4, 8).unwrap();
    let closures: usize = demos
        .iter()
        .map(|d| {
            d.actions
                .iter()
                .zip(&d.observations)
                .filter(|(a, o)| a[2] > 0.0 && o[o.len() - 2] == 0.0)
                .count()
        })
        .sum();
    // one closure per demonstration without grip hesitation
    assert!(closures > demos.len(), "{closures}");
}
