//! Scripted waypoint controller that supplies demonstrations.

use super::{TaskSpec, WorldState, PICK_RADIUS};
use crate::rng::SeedTree;

pub const KP: f64 = 4.0;
pub const KD: f64 = 2.0;
/// Grip closes once the effector is this close to the target object. The
/// world only attaches within the pick radius, so closing early is harmless
/// and gives demonstrations a run of grip steps instead of a single one.
const GRIP_DISTANCE: f64 = 3.0 * PICK_RADIUS;

fn pd(state: &WorldState, target: [f64; 2]) -> [f64; 2] {
    let mut a = [0.0; 2];
    for i in 0..2 {
        a[i] = (KP * (target[i] - state.effector[i]) - KD * state.velocity[i]).clamp(-1.0, 1.0);
    }
    a
}

/// Approach the current stage's object, grip, carry it to the goal and
/// release once the stage holds or a wrong object is held.
pub fn scripted_action(state: &WorldState, task: &TaskSpec) -> [f32; 3] {
    let Some(st) = task.stages.get(state.stages_done) else {
        let a = pd(state, state.effector);
        return [a[0] as f32, a[1] as f32, -1.0];
    };
    let obj = state.objects[st.object];
    let (target, grip) = match state.attached {
        Some(i) if i == st.object => {
            let d = ((obj[0] - st.goal[0]).powi(2) + (obj[1] - st.goal[1]).powi(2)).sqrt();
            if d <= task.goal_radius {
                (state.effector, -1.0)
            } else {
                (st.goal, 1.0)
            }
        }
        Some(_) => (obj, -1.0),
        None => {
            let d = ((obj[0] - state.effector[0]).powi(2) + (obj[1] - state.effector[1]).powi(2)).sqrt();
            (obj, if d < GRIP_DISTANCE { 1.0 } else { -1.0 })
        }
    };
    let a = pd(state, target);
    [a[0] as f32, a[1] as f32, grip]
}

/// Fraction of `episodes` seeded scripted rollouts that succeed.
pub fn scripted_success_rate(task: &TaskSpec, episodes: usize, seed: u64) -> f64 {
    let tree = SeedTree::new(seed);
    let ok = (0..episodes)
        .filter(|&e| {
            let mut rng = tree.stream_index("episode", e as u64);
            let mut s = WorldState::reset(task, &mut rng);
            for _ in 0..task.horizon {
                if s.success(task) {
                    break;
                }
                let a = scripted_action(&s, task);
                if s.step(task, a).is_err() {
                    return false;
                }
            }
            s.success(task)
        })
        .count();
    ok as f64 / episodes as f64
}
