//! Closed-loop rollouts of the policy in an environment.

use std::sync::OnceLock;

use rand::SeedableRng;
use rayon::prelude::*;

use super::{gmm_at, select_action, Mixing, Policy, WindowBatch};
use crate::autodiff::{Binding, Graph, ParamStore, Tensor};
use crate::error::{ensure, Result};
use crate::library::SynthesisCache;
use crate::nn::Fwd;
use crate::router::{build_context, CoefficientSet, Router};
use crate::rng::StreamRng;
use crate::world::{TaskSpec, WorldState, ACTION_DIM, PROPRIO_DIM};

/// Where a rollout's expert coefficients come from.
#[derive(Clone, Debug)]
pub enum Routing<'a> {
    /// No experts: the pretrained policy.
    Base,
    /// The same coefficients at every step.
    Fixed(CoefficientSet<f32>),
    /// Routed from the current context window, top-`delta` per submodule.
    Router { router: &'a Router, delta: usize },
}

/// Anything the policy can act in.
pub trait Environment {
    fn observe(&self) -> Vec<f32>;
    fn step(&mut self, action: [f32; ACTION_DIM]) -> Result<()>;
    fn success(&self) -> bool;
}

pub struct WorldEnv<'a> {
    pub task: &'a TaskSpec,
    pub state: WorldState,
    pub grid: usize,
}

impl<'a> WorldEnv<'a> {
    pub fn new(task: &'a TaskSpec, seed: u64, grid: usize) -> Self {
        let mut rng = StreamRng::seed_from_u64(seed);
        WorldEnv {
            task,
            state: WorldState::reset(task, &mut rng),
            grid,
        }
    }
}

impl Environment for WorldEnv<'_> {
    fn observe(&self) -> Vec<f32> {
        self.state.observe(self.task, self.grid)
    }

    fn step(&mut self, action: [f32; ACTION_DIM]) -> Result<()> {
        self.state.step(self.task, action)
    }

    fn success(&self) -> bool {
        self.state.success(self.task)
    }
}

/// Running summary of every routed coefficient vector.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RouteAudit {
    pub vectors: usize,
    /// Largest count of nonzero coefficients in any one submodule.
    pub max_active: usize,
    pub min: f32,
    pub max: f32,
}

impl RouteAudit {
    pub fn record(&mut self, c: &CoefficientSet<f32>) {
        let values = c.vectors.iter().flatten().copied();
        let (lo, hi) = values.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let active = c.vectors.iter().map(|v| v.iter().filter(|&&x| x != 0.0).count()).max().unwrap_or(0);
        self.merge(&RouteAudit {
            vectors: 1,
            max_active: active,
            min: lo,
            max: hi,
        });
    }

    pub fn merge(&mut self, other: &RouteAudit) {
        if other.vectors == 0 {
            return;
        }
        if self.vectors == 0 {
            *self = *other;
            return;
        }
        self.vectors += other.vectors;
        self.max_active = self.max_active.max(other.max_active);
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Episode {
    pub success: bool,
    pub steps: usize,
    pub actions: Vec<[f32; ACTION_DIM]>,
    /// Router invocations, each followed by re-synthesis.
    pub route_calls: usize,
    /// Per-layer weight syntheses performed by the cache.
    pub layer_syntheses: usize,
    /// Sum over steps of the coefficients in use, raw layout.
    pub coeff_sum: Vec<f64>,
    pub routes: RouteAudit,
    pub fault: Option<String>,
}

/// Runs until success or `max_steps`, re-routing every `synth_interval`
/// steps and reusing the synthesised weights in between.
pub fn rollout_episode(
    policy: &Policy,
    store: &ParamStore<f32>,
    env: &mut dyn Environment,
    tokens: &[usize],
    routing: &Routing<'_>,
    synth_interval: usize,
    max_steps: usize,
) -> Result<Episode> {
    ensure!(synth_interval >= 1, "synthesis interval must be at least 1");
    let t_max = policy.config.context;
    let obs_dim = policy.config.obs_dim();
    let mut cache = SynthesisCache::new(policy.library.layers.len());
    let mut history: Vec<Vec<f32>> = vec![env.observe()];
    let mut visual: Vec<Vec<f32>> = Vec::new();
    let mut instruction: Vec<f32> = Vec::new();
    let mut coeffs = match routing {
        Routing::Fixed(c) => Some(c.clone()),
        _ => None,
    };
    let mut ep = Episode::default();
    for step in 0..max_steps {
        if env.success() {
            break;
        }
        let start = history.len().saturating_sub(t_max);
        let window = &history[start..];
        if let Routing::Router { router, delta } = routing {
            let obs = history.last().expect("nonempty").clone();
            let batch = WindowBatch {
                obs: Tensor::new([1, 1, obs_dim], obs)?,
                tokens: vec![tokens.to_vec()],
            };
            let (f_v, f_l) = policy.base_features(store, &batch)?;
            visual.push(f_v.into_data());
            if instruction.is_empty() {
                instruction = f_l.into_data();
            }
            if step % synth_interval == 0 {
                let v: Vec<&[f32]> = visual[start..].iter().map(|v| v.as_slice()).collect();
                let p: Vec<&[f32]> = window.iter().map(|o| &o[obs_dim - PROPRIO_DIM..]).collect();
                let r = build_context(&v, &instruction, &p)?;
                let c = router.route(store, &r)?.sparsify(*delta);
                ep.routes.record(&c);
                coeffs = Some(c);
                ep.route_calls += 1;
            }
        }
        let batch = WindowBatch {
            obs: Tensor::new([1, window.len(), obs_dim], window.concat())?,
            tokens: vec![tokens.to_vec()],
        };
        let mut g = Graph::inference();
        let mut bind = Binding::new();
        let mut cx = Fwd::new(&mut g, store, &mut bind);
        let gmm = match &coeffs {
            Some(c) => {
                let mut mix = Mixing::Materialized { coeffs: c, cache: &mut cache };
                policy.forward(&mut cx, &batch, &mut mix)?
            }
            None => policy.forward(&mut cx, &batch, &mut Mixing::Base)?,
        };
        let params = gmm_at(&g, &gmm, 0, window.len() - 1);
        let action = select_action(&params, policy.config.mode_selection);
        if let Some(c) = &coeffs {
            let raw = c.to_raw();
            if ep.coeff_sum.len() != raw.len() {
                ep.coeff_sum = vec![0.0; raw.len()];
            }
            ep.coeff_sum.iter_mut().zip(raw).for_each(|(s, v)| *s += f64::from(v));
        }
        ep.actions.push(action);
        ep.steps += 1;
        if let Err(e) = env.step(action) {
            ep.fault = Some(e.to_string());
            break;
        }
        history.push(env.observe());
    }
    ep.success = ep.fault.is_none() && env.success();
    ep.layer_syntheses = cache.synth_count;
    Ok(ep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub success_rate: f64,
    pub episodes: Vec<Episode>,
}

fn eval_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("PEEL_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("evaluation thread pool")
    })
}

/// Success rate over one seeded episode per entry of `seeds`, run in
/// parallel and merged in seed order.
pub fn evaluate(
    policy: &Policy,
    store: &ParamStore<f32>,
    task: &TaskSpec,
    routing: &Routing<'_>,
    seeds: &[u64],
    synth_interval: usize,
) -> Result<EvalResult> {
    ensure!(!seeds.is_empty(), "evaluation with zero episodes");
    let tokens = task.tokens()?;
    let grid = policy.config.grid;
    let episodes: Vec<Episode> = eval_pool().install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let mut env = WorldEnv::new(task, seed, grid);
                rollout_episode(policy, store, &mut env, &tokens, routing, synth_interval, task.horizon)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let ok = episodes.iter().filter(|e| e.success).count();
    if let Some(e) = episodes.iter().find_map(|e| e.fault.as_ref()) {
        log::warn!("task {}: episode fault: {e}", task.name);
    }
    Ok(EvalResult {
        success_rate: ok as f64 / seeds.len() as f64,
        episodes,
    })
}
