//! Demonstration windows, batches and precomputed router contexts.

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::policy::{Policy, WindowBatch};
use crate::router::build_context;
use crate::world::{TaskSpec, Trajectory, ACTION_DIM, PROPRIO_DIM};

/// One task's demonstrations.
#[derive(Clone, Debug)]
pub struct TaskDemos {
    pub task: TaskSpec,
    pub tokens: Vec<usize>,
    pub demos: Vec<Trajectory>,
}

impl TaskDemos {
    pub fn new(task: TaskSpec, demos: Vec<Trajectory>) -> Result<Self> {
        let tokens = task.tokens()?;
        Ok(TaskDemos { task, tokens, demos })
    }

    pub fn steps(&self) -> usize {
        self.demos.iter().map(|d| d.steps()).sum()
    }

    /// Floats stored per demonstration step (observation plus action).
    pub fn bytes(&self) -> usize {
        self.demos
            .iter()
            .map(|d| 4 * d.steps() * (d.observations.first().map_or(0, |o| o.len()) + ACTION_DIM))
            .sum()
    }
}

/// A full-length window `[start, start + T)` of one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub set: usize,
    pub traj: usize,
    pub start: usize,
}

/// Every full-length window of every trajectory in `demos`.
pub fn windows(set: usize, demos: &TaskDemos, t: usize) -> Result<Vec<WindowRef>> {
    let mut out = Vec::new();
    for (i, d) in demos.demos.iter().enumerate() {
        if d.steps() < t {
            return Err(Error::contract(format!(
                "task {}: demonstration {i} has {} steps, shorter than the context of {t}",
                demos.task.name,
                d.steps()
            )));
        }
        out.extend((0..=d.steps() - t).map(|start| WindowRef { set, traj: i, start }));
    }
    Ok(out)
}

/// Observations `[B,T,obs]`, instructions and target actions `[B,T,3]`.
pub fn assemble(sets: &[&TaskDemos], refs: &[WindowRef], t: usize) -> Result<(WindowBatch<f32>, Tensor<f32>)> {
    let obs_dim = sets
        .first()
        .and_then(|s| s.demos.first())
        .and_then(|d| d.observations.first())
        .map_or(0, |o| o.len());
    let mut obs = Vec::with_capacity(refs.len() * t * obs_dim);
    let mut act = Vec::with_capacity(refs.len() * t * ACTION_DIM);
    let mut tokens = Vec::with_capacity(refs.len());
    for w in refs {
        let set = sets[w.set];
        let d = &set.demos[w.traj];
        for s in w.start..w.start + t {
            obs.extend_from_slice(&d.observations[s]);
            act.extend_from_slice(&d.actions[s]);
        }
        tokens.push(set.tokens.clone());
    }
    let b = refs.len();
    Ok((
        WindowBatch {
            obs: Tensor::new([b, t, obs_dim], obs)?,
            tokens,
        },
        Tensor::new([b, t, ACTION_DIM], act)?,
    ))
}

/// Loss weights `[B, T]`. Position `p` of a window that starts a
/// demonstration weighs `T - p`, which under causal attention equals also
/// training on the shorter prefix windows a rollout sees in its first
/// steps; every other position weighs 1.
pub fn window_weights(refs: &[WindowRef], t: usize) -> Result<Tensor<f32>> {
    let mut w = Vec::with_capacity(refs.len() * t);
    for r in refs {
        w.extend((0..t).map(|p| if r.start == 0 { (t - p) as f32 } else { 1.0 }));
    }
    Ok(Tensor::new([refs.len(), t], w)?)
}

/// Base-encoder features of every observation of a task's demonstrations.
#[derive(Clone, Debug)]
pub struct TaskFeatures {
    /// `[traj][step]` visual feature rows.
    pub visual: Vec<Vec<Vec<f32>>>,
    pub instruction: Vec<f32>,
}

impl TaskFeatures {
    pub fn compute(policy: &Policy, store: &ParamStore<f32>, demos: &TaskDemos) -> Result<Self> {
        let d = policy.config.d_model;
        let obs_dim = policy.config.obs_dim();
        let mut visual = Vec::with_capacity(demos.demos.len());
        let mut instruction = Vec::new();
        for traj in &demos.demos {
            let n = traj.observations.len();
            let batch = WindowBatch {
                obs: Tensor::new([1, n, obs_dim], traj.observations.concat())?,
                tokens: vec![demos.tokens.clone()],
            };
            let (f_v, f_l) = policy.base_features(store, &batch)?;
            visual.push(f_v.data().chunks(d).map(|c| c.to_vec()).collect());
            instruction = f_l.into_data();
        }
        Ok(TaskFeatures { visual, instruction })
    }

    /// Router context of observations `[start, end)` of one trajectory.
    pub fn context(&self, demos: &TaskDemos, traj: usize, start: usize, end: usize) -> Result<Vec<f32>> {
        let obs = &demos.demos[traj].observations;
        let v: Vec<&[f32]> = self.visual[traj][start..end].iter().map(|r| r.as_slice()).collect();
        let p: Vec<&[f32]> = obs[start..end].iter().map(|o| &o[o.len() - PROPRIO_DIM..]).collect();
        build_context(&v, &self.instruction, &p)
    }

    /// Context the router sees when acting at step `t`: the window of at
    /// most `context` observations ending at `t`.
    pub fn step_context(&self, demos: &TaskDemos, traj: usize, t: usize, context: usize) -> Result<Vec<f32>> {
        self.context(demos, traj, (t + 1).saturating_sub(context), t + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{collect_demonstrations, generate_suite, Family};

    #[test]
    fn windows_cover_every_full_span() {
        let task = generate_suite(1, Family::Goal, 1).unwrap().remove(0);
        let demos = collect_demonstrations(&task, 3, 2, 4).unwrap();
        let lens: Vec<usize> = demos.iter().map(|d| d.steps()).collect();
        let set = TaskDemos::new(task, demos).unwrap();
        let w = windows(0, &set, 6).unwrap();
        assert_eq!(w.len(), lens.iter().map(|l| l - 5).sum::<usize>());
        let (batch, act) = assemble(&[&set], &w[..2], 6).unwrap();
        assert_eq!(batch.obs.shape(), &[2, 6, 38]);
        assert_eq!(act.shape(), &[2, 6, 3]);
        assert_eq!(&batch.obs.data()[38..76], set.demos[0].observations[1].as_slice());
        assert!(windows(0, &set, 1000).is_err());
    }

    #[test]
    fn first_windows_carry_prefix_weight() {
        let refs = [WindowRef { set: 0, traj: 0, start: 0 }, WindowRef { set: 0, traj: 0, start: 3 }];
        let w = window_weights(&refs, 4).unwrap();
        assert_eq!(w.shape(), &[2, 4]);
        assert_eq!(w.data(), &[4.0, 3.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
