//! Scripted demonstration collection and the demo file format.
//!
//! Layout: `"PEELDEMO"`, u32 version, u32 trajectory count, then per
//! trajectory a header (u64 reset seed, u32 observation count, u32
//! observation width, u32 action width, u8 success) followed by the
//! flattened observations and actions as little-endian f32.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use super::{observation_dim, scripted_action, TaskSpec, WorldState, ACTION_DIM};
use crate::bytes::{put_f32s, put_u32, put_u64, ByteReader};
use crate::error::{Error, Result};
use crate::rng::{SeedTree, StreamRng};

const MAGIC: &[u8; 8] = b"PEELDEMO";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Seed of the episode's reset stream.
    pub seed: u64,
    pub observations: Vec<Vec<f32>>,
    pub actions: Vec<[f32; ACTION_DIM]>,
    pub success: bool,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

/// Stationary std of the exploration noise on the executed accelerations.
pub const DEMO_NOISE_STD: f64 = 0.25;
/// Step-to-step correlation of that noise.
pub const DEMO_NOISE_CORR: f64 = 0.7;
/// Chance of holding the grip open on a step where the expert would close
/// it around a free object, so demonstrations contain many open-to-closed
/// transitions rather than one per stage.
pub const DEMO_GRIP_DROP: f64 = 0.3;

/// One scripted episode executed with correlated acceleration noise and
/// occasional grip hesitation, so the demonstrations also show the
/// controller recovering. The stored actions are the executed ones.
fn scripted_episode(task: &TaskSpec, seed: u64, grid: usize) -> Result<Trajectory> {
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut s = WorldState::reset(task, &mut rng);
    let mut observations = vec![s.observe(task, grid)];
    let mut actions = Vec::new();
    let innovation = DEMO_NOISE_STD * (1.0 - DEMO_NOISE_CORR * DEMO_NOISE_CORR).sqrt();
    let mut noise = [0.0f64; 2];
    while !s.success(task) && actions.len() < task.horizon {
        let mut a = scripted_action(&s, task);
        for i in 0..2 {
            let z: f64 = rng.sample(StandardNormal);
            noise[i] = DEMO_NOISE_CORR * noise[i] + innovation * z;
            a[i] = (f64::from(a[i]) + noise[i]).clamp(-1.0, 1.0) as f32;
        }
        if a[2] > 0.0 && s.attached.is_none() && rng.random_bool(DEMO_GRIP_DROP) {
            a[2] = -1.0;
        }
        s.step(task, a)?;
        actions.push(a);
        observations.push(s.observe(task, grid));
    }
    Ok(Trajectory {
        seed,
        observations,
        actions,
        success: s.success(task),
    })
}

/// Exactly `n` successful scripted trajectories; failed episodes are
/// replaced by fresh ones, up to `10n` attempts.
pub fn collect_demonstrations(task: &TaskSpec, n: usize, seed: u64, grid: usize) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::contract("zero demonstrations requested"));
    }
    let tree = SeedTree::new(seed).child(&task.name);
    let mut out = Vec::with_capacity(n);
    for attempt in 0..10 * n {
        let t = scripted_episode(task, tree.child_index("episode", attempt as u64).seed, grid)?;
        if t.success {
            out.push(t);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(Error::Generation(format!(
        "task {}: only {} of {n} scripted episodes succeeded in {} attempts",
        task.name,
        out.len(),
        10 * n
    )))
}

/// Re-runs the stored actions from the stored reset seed and checks that
/// the observations match and the task ends solved.
pub fn replay_success(task: &TaskSpec, traj: &Trajectory, grid: usize) -> Result<bool> {
    let mut rng = StreamRng::seed_from_u64(traj.seed);
    let mut s = WorldState::reset(task, &mut rng);
    if traj.observations.first() != Some(&s.observe(task, grid)) {
        return Ok(false);
    }
    for (a, o) in traj.actions.iter().zip(&traj.observations[1..]) {
        s.step(task, *a)?;
        if s.observe(task, grid) != *o {
            return Ok(false);
        }
    }
    Ok(s.success(task))
}

pub fn encode_demos(trajs: &[Trajectory]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, trajs.len() as u32);
    for t in trajs {
        put_u64(&mut out, t.seed);
        put_u32(&mut out, t.observations.len() as u32);
        put_u32(&mut out, t.observations.first().map_or(0, |o| o.len()) as u32);
        put_u32(&mut out, ACTION_DIM as u32);
        out.push(u8::from(t.success));
        for o in &t.observations {
            put_f32s(&mut out, o);
        }
        for a in &t.actions {
            put_f32s(&mut out, a);
        }
    }
    out
}

pub fn decode_demos(bytes: &[u8]) -> Result<Vec<Trajectory>> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 8,
            message: format!("unsupported demo version {version}"),
        });
    }
    let count = r.u32("trajectory count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let seed = r.u64("trajectory seed")?;
        let n_obs = r.u32("observation count")? as usize;
        let width = r.u32("observation width")? as usize;
        let adim = r.u32("action width")? as usize;
        if n_obs == 0 || adim != ACTION_DIM {
            return Err(r.error(format!("trajectory {i}: {n_obs} observations, action width {adim}")));
        }
        let success = r.u8("success flag")? != 0;
        let flat = r.f32s(n_obs * width, "observations")?;
        let observations = flat.chunks(width.max(1)).map(|c| c.to_vec()).collect();
        let flat = r.f32s((n_obs - 1) * ACTION_DIM, "actions")?;
        let actions = flat.chunks(ACTION_DIM).map(|c| [c[0], c[1], c[2]]).collect();
        out.push(Trajectory {
            seed,
            observations,
            actions,
            success,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_demos(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    std::fs::write(path, encode_demos(trajs)).map_err(|e| Error::io(path, e))
}

pub fn read_demos(path: &Path, grid: usize) -> Result<Vec<Trajectory>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let trajs = decode_demos(&bytes)?;
    if let Some(t) = trajs.iter().find(|t| t.observations[0].len() != observation_dim(grid)) {
        return Err(Error::contract(format!(
            "demo observation width {} does not match grid size {grid}",
            t.observations[0].len()
        )));
    }
    Ok(trajs)
}
