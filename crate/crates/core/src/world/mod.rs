//! Deterministic 2D point-mass pick-and-place world.
//!
//! An effector moves under bounded acceleration, can attach the nearest
//! object within the pick radius while gripping, and carries it until the
//! grip opens. Tasks ask for one or two objects to be delivered into goal
//! zones; observations are two occupancy grids plus proprioception.

mod demos;
mod expert;
mod suite;

pub use demos::{collect_demonstrations, decode_demos, encode_demos, read_demos, replay_success, write_demos, Trajectory};
pub use expert::{scripted_action, scripted_success_rate};
pub use suite::{
    generate_pretrain_suite, generate_suite, read_suite, write_suite, Family, ObjectSpec, Stage, TaskSpec, Vocabulary,
    NUM_REGIONS, NUM_TYPES,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const DT: f64 = 0.1;
pub const V_MAX: f64 = 0.1;
pub const PICK_RADIUS: f64 = 0.05;
pub const GOAL_RADIUS: f64 = 0.06;
/// Per-episode uniform perturbation of object and start positions.
pub const RESET_JITTER: f64 = 0.02;
pub const ACTION_DIM: usize = 3;
pub const PROPRIO_DIM: usize = 6;
/// Half-width of the square window rendered into the ego view.
pub const EGO_HALF_WIDTH: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub effector: [f64; 2],
    pub velocity: [f64; 2],
    pub grip: bool,
    pub attached: Option<usize>,
    pub objects: Vec<[f64; 2]>,
    /// Number of task stages satisfied so far, in order.
    pub stages_done: usize,
    /// Set when a later stage held before an earlier one was latched.
    pub order_violated: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl WorldState {
    pub fn reset(task: &TaskSpec, rng: &mut StreamRng) -> WorldState {
        let mut jitter = |p: [f64; 2]| {
            [
                p[0] + rng.random_range(-RESET_JITTER..=RESET_JITTER),
                p[1] + rng.random_range(-RESET_JITTER..=RESET_JITTER),
            ]
        };
        let objects = task.objects.iter().map(|o| jitter(o.pos)).collect();
        let effector = jitter(task.start);
        let mut s = WorldState {
            effector,
            velocity: [0.0; 2],
            grip: false,
            attached: None,
            objects,
            stages_done: 0,
            order_violated: false,
        };
        s.update_stages(task);
        s
    }

    /// Advances one control step with `action = (accel_x, accel_y, grip)`.
    pub fn step(&mut self, task: &TaskSpec, action: [f32; 3]) -> Result<()> {
        if let Some(i) = action.iter().position(|a| !a.is_finite()) {
            return Err(Error::contract(format!("non-finite action component {i}: {}", action[i])));
        }
        for i in 0..2 {
            let a = f64::from(action[i]).clamp(-1.0, 1.0);
            self.velocity[i] = (self.velocity[i] + a * DT).clamp(-V_MAX, V_MAX);
            self.effector[i] = (self.effector[i] + self.velocity[i] * DT).clamp(0.0, 1.0);
        }
        self.grip = action[2] > 0.0;
        if !self.grip {
            self.attached = None;
        } else if self.attached.is_none() {
            self.attached = self
                .objects
                .iter()
                .enumerate()
                .map(|(i, &p)| (i, dist(p, self.effector)))
                .filter(|(_, d)| *d <= PICK_RADIUS)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
        }
        if let Some(i) = self.attached {
            self.objects[i] = self.effector;
        }
        self.update_stages(task);
        Ok(())
    }

    fn stage_holds(&self, task: &TaskSpec, i: usize) -> bool {
        let st = &task.stages[i];
        dist(self.objects[st.object], st.goal) <= task.goal_radius
    }

    fn update_stages(&mut self, task: &TaskSpec) {
        if self.stages_done < task.stages.len() && self.stage_holds(task, self.stages_done) {
            self.stages_done += 1;
        }
        if (self.stages_done + 1..task.stages.len()).any(|i| self.stage_holds(task, i)) {
            self.order_violated = true;
        }
    }

    pub fn success(&self, task: &TaskSpec) -> bool {
        self.stages_done == task.stages.len() && !self.order_violated
    }

    pub fn proprio(&self) -> [f64; PROPRIO_DIM] {
        [
            self.effector[0],
            self.effector[1],
            self.velocity[0] / V_MAX,
            self.velocity[1] / V_MAX,
            if self.grip { 1.0 } else { 0.0 },
            if self.attached.is_some() { 1.0 } else { 0.0 },
        ]
    }

    /// `[global grid; ego grid; proprio]`, each grid `g×g` row-major.
    pub fn observe(&self, task: &TaskSpec, g: usize) -> Vec<f32> {
        let mut obs = vec![0.0f64; 2 * g * g];
        let (global, ego) = obs.split_at_mut(g * g);
        let cell = 1.0 / g as f64;
        let ego_cell = 2.0 * EGO_HALF_WIDTH / g as f64;
        let origin = [self.effector[0] - EGO_HALF_WIDTH, self.effector[1] - EGO_HALF_WIDTH];
        let mut mark = |p: [f64; 2], v: f64| {
            splat(global, g, p[0] / cell - 0.5, p[1] / cell - 0.5, v);
            splat(ego, g, (p[0] - origin[0]) / ego_cell - 0.5, (p[1] - origin[1]) / ego_cell - 0.5, v);
        };
        for st in &task.stages {
            mark(st.goal, 0.5);
        }
        for (o, &p) in task.objects.iter().zip(&self.objects) {
            mark(p, (o.type_id + 1) as f64 / NUM_TYPES as f64);
        }
        let mut out: Vec<f32> = obs.iter().map(|v| v.min(1.0) as f32).collect();
        out.extend(self.proprio().iter().map(|&v| v as f32));
        out
    }
}

/// Bilinear deposit of `v` at fractional cell coordinates `(x, y)`.
fn splat(grid: &mut [f64], g: usize, x: f64, y: f64, v: f64) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let (cx, cy) = (x0 as i64 + dx, y0 as i64 + dy);
            if cx >= 0 && cy >= 0 && (cx as usize) < g && (cy as usize) < g {
                grid[cy as usize * g + cx as usize] += v * wx * wy;
            }
        }
    }
}

pub fn observation_dim(g: usize) -> usize {
    2 * g * g + PROPRIO_DIM
}

#[cfg(test)]
mod tests;
