//! Self-checks run by the `verify` command: gradients, identity synthesis,
//! orthogonal growth, sparsity, metric arithmetic and a forgetting-free
//! micro run.

use rand::{Rng, SeedableRng};

use crate::autodiff::{grad_check, grad_check_store, Binding, Graph, ParamStore, Tensor, Var};
use crate::config::{Method, PretrainConfig, RunConfig};
use crate::error::Result;
use crate::harness::run::{collect_suite, pretrain_suite, run_lifelong};
use crate::harness::{compute_metrics, pretrain, select_best_checkpoint, SuccessMatrix};
use crate::library::{columns_of, ExpertLibrary, Submodule};
use crate::nn::{normal_vec, Fwd};
use crate::policy::{bc_nll_loss, Mixing, Policy, PolicyConfig, WindowBatch};
use crate::rng::StreamRng;
use crate::router::{sparse_coefficients, CoefficientSet};
use crate::world::{generate_suite, Family};

/// Finite-difference step and tolerance of every gradient check.
pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Check {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }

    fn from(name: &str, r: Result<(bool, String)>) -> Check {
        match r {
            Ok((passed, detail)) => Check::new(name, passed, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

fn uniform(r: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &v).expect("shape")
}

fn weighted(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = g.constant(Tensor::from_f64(shape, &w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

type Prim = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Worst relative error over every differentiable primitive.
pub fn primitive_grad_checks() -> Result<Vec<(String, f64)>> {
    let mut r = rng(2);
    let x = uniform(&mut r, &[2, 3, 4], -1.5, 1.5);
    let y = uniform(&mut r, &[2, 3, 4], -1.5, 1.5);
    let pos = uniform(&mut r, &[2, 3, 4], 0.5, 2.0);
    let v2 = uniform(&mut r, &[2, 4], -1.0, 1.0);
    let bias = uniform(&mut r, &[4], -1.0, 1.0);
    let gamma = uniform(&mut r, &[4], 0.5, 1.5);
    let w = uniform(&mut r, &[4, 3], -1.0, 1.0);
    let bm = uniform(&mut r, &[2, 4, 2], -1.0, 1.0);
    let table = uniform(&mut r, &[5, 3], -1.0, 1.0);
    let cases: Vec<(&str, Prim, Vec<Tensor<f64>>)> = vec![
        ("matmul", Box::new(|g, v| g.matmul(v[0], v[1])), vec![x.clone(), w]),
        ("bmm", Box::new(|g, v| g.bmm(v[0], v[1])), vec![x.clone(), bm]),
        ("add", Box::new(|g, v| g.add(v[0], v[1])), vec![x.clone(), y.clone()]),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1])), vec![x.clone(), y.clone()]),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![x.clone(), y.clone()]),
        ("div", Box::new(|g, v| g.div(v[0], v[1])), vec![x.clone(), pos.clone()]),
        ("add_trailing", Box::new(|g, v| g.add_trailing(v[0], v[1])), vec![x.clone(), bias.clone()]),
        ("add_mid", Box::new(|g, v| g.add_mid(v[0], v[1])), vec![x.clone(), v2.clone()]),
        ("mul_mid", Box::new(|g, v| g.mul_mid(v[0], v[1])), vec![x.clone(), v2]),
        ("scale", Box::new(|g, v| Ok(g.scale(v[0], -1.7))), vec![x.clone()]),
        ("add_scalar", Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3))), vec![x.clone()]),
        ("gelu", Box::new(|g, v| Ok(g.gelu(v[0]))), vec![x.clone()]),
        ("softplus", Box::new(|g, v| Ok(g.softplus(v[0]))), vec![x.clone()]),
        ("sigmoid", Box::new(|g, v| Ok(g.sigmoid(v[0]))), vec![x.clone()]),
        ("log", Box::new(|g, v| Ok(g.log(v[0]))), vec![pos.clone()]),
        ("square", Box::new(|g, v| Ok(g.square(v[0]))), vec![x.clone()]),
        ("softmax", Box::new(|g, v| Ok(g.softmax(v[0]))), vec![x.clone()]),
        ("log_softmax", Box::new(|g, v| Ok(g.log_softmax(v[0]))), vec![x.clone()]),
        ("logsumexp", Box::new(|g, v| Ok(g.logsumexp(v[0]))), vec![x.clone()]),
        ("sum_last", Box::new(|g, v| Ok(g.sum_last(v[0]))), vec![x.clone()]),
        ("mean_axis", Box::new(|g, v| g.mean_axis(v[0], 1)), vec![x.clone()]),
        ("mean_all", Box::new(|g, v| Ok(g.mean_all(v[0]))), vec![x.clone()]),
        ("reshape", Box::new(|g, v| g.reshape(v[0], &[6, 4])), vec![x.clone()]),
        ("concat", Box::new(|g, v| g.concat(&[v[0], v[1]])), vec![x.clone(), y.clone()]),
        ("slice_last", Box::new(|g, v| g.slice_last(v[0], 1, 2)), vec![x.clone()]),
        ("gather_last", Box::new(|g, v| g.gather_last(v[0], &[2, 0, 2])), vec![x.clone()]),
        ("stack", Box::new(|g, v| g.stack(&[v[0], v[1]])), vec![x.clone(), y.clone()]),
        (
            "causal_attention",
            Box::new(|g, v| g.causal_attention(v[0], v[1], v[2], 2)),
            vec![x.clone(), y, pos],
        ),
        ("layer_norm", Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])), vec![x, gamma, bias]),
        (
            "embedding_mean",
            Box::new(|g, v| g.embedding_mean(v[0], &[vec![0, 2, 2], vec![4]])),
            vec![table],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, f, inputs)| {
            let rep = grad_check(
                |g, v| {
                    let y = f(g, v)?;
                    weighted(g, y)
                },
                &inputs,
                GRAD_STEP,
            )?;
            Ok((name.to_string(), rep.max_rel_error))
        })
        .collect()
}

/// Small dimensions for checks that need a whole policy.
pub fn micro_policy_config() -> PolicyConfig {
    PolicyConfig {
        grid: 4,
        context: 3,
        d_model: 8,
        layers: 1,
        heads: 2,
        mlp_hidden: 12,
        film_hidden: 10,
        head_hidden: 12,
        modes: 2,
        encoder_rank: 2,
        rank: 2,
        router_hidden: 8,
        tune_bias: true,
        ..PolicyConfig::default()
    }
}

fn randomize(store: &mut ParamStore<f64>, ids: &[crate::autodiff::ParamId], scale: f64, r: &mut StreamRng) {
    for &id in ids {
        let shape = store.get(id).shape().to_vec();
        let n = shape.iter().product();
        let v: Vec<f64> = normal_vec(r, n).into_iter().map(|x| scale * x).collect();
        store.set(id, Tensor::from_f64(shape, &v).expect("shape"));
    }
}

/// Worst relative error of the routed behaviour-cloning loss with respect
/// to three coordinates of every parameter (base, experts and router).
pub fn bc_loss_grad_check() -> Result<f64> {
    let mut r = rng(14);
    let mut store = ParamStore::<f64>::new();
    let mut policy = Policy::new(micro_policy_config(), &mut store, &mut r)?;
    for t in 1..=3 {
        policy.library.add_task(&mut store, t, &mut r)?;
        let ids = policy.library.expert_params(t);
        randomize(&mut store, &ids, 0.3, &mut r);
        if t < 3 {
            policy.library.freeze_task(&mut store, t)?;
        }
    }
    policy.attach_router(&mut store, &mut r);
    let mut router = policy.router.take().expect("attached");
    for j in 1..=3 {
        router.grow(&mut store, j)?;
    }
    randomize(&mut store, &router.params(), 0.5, &mut r);
    for id in store.ids().collect::<Vec<_>>() {
        store.set_trainable(id, true);
    }
    let obs_dim = policy.config.obs_dim();
    let obs: Vec<f64> = normal_vec(&mut r, 2 * 3 * obs_dim).into_iter().map(|x| x.abs().min(1.0)).collect();
    let batch = WindowBatch {
        obs: Tensor::from_f64([2, 3, obs_dim], &obs)?,
        tokens: vec![vec![0, 7, 3, 14], vec![1, 9]],
    };
    let actions = Tensor::from_f64([2, 3, 3], &normal_vec(&mut r, 18))?;
    let d_r = policy.config.context_dim();
    let ctx = Tensor::from_f64([2, d_r], &normal_vec(&mut r, 2 * d_r))?;
    let f = |g: &mut Graph<f64>, st: &ParamStore<f64>, bind: &mut Binding| {
        let mut cx = Fwd::new(g, st, bind);
        let rv = cx.input(ctx.clone());
        let raw = router.forward(&mut cx, rv)?;
        let c = sparse_coefficients(&mut cx, raw, 3, 3, 0.0, None)?;
        let out = policy.forward(&mut cx, &batch, &mut Mixing::Factored(c))?;
        bc_nll_loss(&mut cx, &out, &actions, policy.config.modes)
    };
    let mut coords = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        coords.extend([0, n / 2, n - 1].map(|i| (id, i)));
    }
    Ok(grad_check_store(f, &store, &coords, GRAD_STEP)?.max_rel_error)
}

/// Policy with `k` random frozen experts at the given dimensions.
fn policy_with_experts(config: PolicyConfig, k: usize, seed: u64) -> Result<(Policy, ParamStore<f32>)> {
    let mut r = rng(seed);
    let mut store = ParamStore::<f32>::new();
    let mut policy = Policy::new(config, &mut store, &mut r)?;
    policy.freeze_base(&mut store);
    for t in 1..=k {
        policy.library.add_task(&mut store, t, &mut r)?;
        for id in policy.library.expert_params(t) {
            let shape = store.get(id).shape().to_vec();
            let n = shape.iter().product();
            let v: Vec<f64> = normal_vec(&mut r, n).into_iter().map(|x| 0.3 * x).collect();
            store.set(id, Tensor::from_f64(shape, &v)?);
        }
        policy.library.freeze_task(&mut store, t)?;
    }
    Ok((policy, store))
}

/// Number of random inputs on which the zero-coefficient policy is bitwise
/// identical to the base policy, in both mixing paths.
pub fn identity_synthesis(inputs: usize) -> Result<usize> {
    let (policy, store) = policy_with_experts(PolicyConfig::default(), 3, 31)?;
    let mut r = rng(32);
    let obs_dim = policy.config.obs_dim();
    let t = policy.config.context;
    let zeros = CoefficientSet::<f32>::zeros(3);
    let mut same = 0;
    for i in 0..inputs {
        let obs: Vec<f64> = (0..t * obs_dim).map(|_| r.random_range(0.0..1.0)).collect();
        let batch = WindowBatch {
            obs: Tensor::from_f64([1, t, obs_dim], &obs)?,
            tokens: vec![vec![i % 6, 6 + i % 6, 3, 12 + i % 16]],
        };
        let run = |mix: &mut Mixing<'_, f32>| -> Result<Vec<f32>> {
            let mut g = Graph::inference();
            let mut b = Binding::new();
            let mut cx = Fwd::new(&mut g, &store, &mut b);
            let out = policy.forward(&mut cx, &batch, mix)?;
            Ok([out.logits, out.means, out.stds].iter().flat_map(|&v| g.value(v).data().to_vec()).collect())
        };
        let base = run(&mut Mixing::Base)?;
        let mut cache = crate::library::SynthesisCache::new(policy.library.layers.len());
        let mat = run(&mut Mixing::Materialized {
            coeffs: &zeros,
            cache: &mut cache,
        })?;
        let fac = {
            let mut g = Graph::inference();
            let mut b = Binding::new();
            let mut cx = Fwd::new(&mut g, &store, &mut b);
            let c: Vec<Var> = (0..6).map(|_| cx.input(Tensor::zeros([1, 3]))).collect();
            let out = policy.forward(&mut cx, &batch, &mut Mixing::Factored(c))?;
            [out.logits, out.means, out.stds]
                .iter()
                .flat_map(|&v| g.value(v).data().to_vec())
                .collect::<Vec<f32>>()
        };
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&base) == bits(&mat) && bits(&base) == bits(&fac) {
            same += 1;
        }
    }
    Ok(same)
}

/// Worst relative deviation of a single expert's output change from
/// `c² ·` its change at `c = 1`, over the given coefficients.
pub fn quadratic_law(coefficients: &[f64]) -> Result<f64> {
    let mut r = rng(41);
    let mut store = ParamStore::<f64>::new();
    let mut lib = ExpertLibrary::new(false);
    let id = lib.add_layer(&mut store, "layer", Submodule::Head, 16, 12, 4, &mut r)?;
    lib.freeze_base(&mut store);
    lib.add_task(&mut store, 1, &mut r)?;
    let ids = lib.expert_params(1);
    let b_ids: Vec<_> = ids.into_iter().filter(|&p| store.name(p).ends_with(".b")).collect();
    randomize(&mut store, &b_ids, 1.0, &mut r);
    let x = Tensor::from_f64([5, 16], &normal_vec(&mut r, 80))?;
    let layer = lib.layer(id).clone();
    let out = |c: f64| -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let mut b = Binding::new();
        let mut cx = Fwd::new(&mut g, &store, &mut b);
        let xv = cx.input(x.clone());
        let cv = cx.input(Tensor::from_f64([5, 1], &[c; 5])?);
        let y = layer.forward_factored(&mut cx, xv, Some(cv))?;
        Ok(g.value(y).data().to_vec())
    };
    let y0 = out(0.0)?;
    let d1: Vec<f64> = out(1.0)?.iter().zip(&y0).map(|(a, b)| a - b).collect();
    let mut worst = 0.0f64;
    for &c in coefficients {
        let dc: Vec<f64> = out(c)?.iter().zip(&y0).map(|(a, b)| a - b).collect();
        let num: f64 = dc.iter().zip(&d1).map(|(a, b)| (a - c * c * b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = d1.iter().map(|b| (c * c * b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    Ok(worst)
}

/// Result of growing the default-size library task by task.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalityReport {
    /// Worst `|<a_i, a_j>|` between a new column and any earlier column of
    /// the same layer, over layers whose span was not exhausted.
    pub max_overlap: f64,
    /// Layers whose span ran out, with the task at which it happened.
    pub exhausted: Vec<(String, usize)>,
    /// Every exhausted layer reported a fallback while growing.
    pub fallbacks_reported: bool,
}

pub fn orthogonal_growth(tasks: usize) -> Result<OrthogonalityReport> {
    let mut r = rng(51);
    let mut store = ParamStore::<f32>::new();
    let mut policy = Policy::new(PolicyConfig::default(), &mut store, &mut r)?;
    policy.freeze_base(&mut store);
    let mut rep = OrthogonalityReport {
        max_overlap: 0.0,
        exhausted: Vec::new(),
        fallbacks_reported: true,
    };
    for t in 1..=tasks {
        let growth = policy.library.add_task(&mut store, t, &mut r)?;
        for layer in &policy.library.layers {
            let cols: Vec<Vec<f64>> = layer.experts.iter().flat_map(|e| columns_of(store.get(e.a))).collect();
            let new = layer.experts.last().map_or(0, |e| store.get(e.a).cols());
            let old = cols.len() - new;
            if cols.len() > layer.d_in {
                if !rep.exhausted.iter().any(|(n, _)| *n == layer.name) {
                    rep.exhausted.push((layer.name.clone(), t));
                    rep.fallbacks_reported &= growth.fallback_layers.contains(&layer.name);
                }
                continue;
            }
            for i in old..cols.len() {
                for j in 0..i {
                    let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                    rep.max_overlap = rep.max_overlap.max(dot.abs());
                }
            }
        }
        policy.library.freeze_task(&mut store, t)?;
    }
    Ok(rep)
}

/// Random raw router outputs stay within `[0, 2]` and keep at most
/// `delta` nonzeros per submodule after sparsification.
pub fn topk_sparsity(trials: usize, delta: usize) -> bool {
    let mut r = rng(61);
    (0..trials).all(|i| {
        let k = 1 + i % 8;
        let raw: Vec<f32> = (0..6 * k).map(|_| 2.0 * r.random::<f32>()).collect();
        let set = CoefficientSet::from_raw(&raw, k).expect("width").sparsify(delta);
        set.vectors
            .iter()
            .all(|v| v.iter().filter(|x| **x != 0.0).count() <= delta.min(k) && v.iter().all(|x| (0.0..=2.0).contains(x)))
    })
}

/// Deviation from the hand-evaluated metric example and clamping examples.
pub fn metric_oracle() -> Result<f64> {
    let mut m = SuccessMatrix::new(2, vec![2, 4]);
    m.record_checkpoints(0, &[0.5, 0.7])?;
    m.record_checkpoints(1, &[0.4, 0.8])?;
    m.record_final(1, 0, 0.6)?;
    let r = compute_metrics(&m)?;
    let a = select_best_checkpoint(&[0.5, 0.7])?;
    let b = select_best_checkpoint(&[0.8, 0.6])?;
    let errs = [
        r.fwt - 0.6,
        r.nbt - 0.1,
        r.auc - 0.6,
        a.rate - 0.7,
        a.mean() - 0.6,
        (a.index as f64) - 1.0,
        b.mean() - 0.8,
        b.clamped[1] - 0.8,
        b.index as f64,
    ];
    Ok(errs.iter().fold(0.0f64, |m, e| m.max(e.abs())))
}

/// NBT and frozen-expert integrity of a two-task, two-epoch TAIL run at
/// micro scale.
pub fn tail_micro_run() -> Result<(f64, bool)> {
    let config = RunConfig {
        method: Method::TailOracle,
        epochs_per_task: 2,
        eval_every: 1,
        batch: 8,
        lr: 3e-3,
        eval_episodes: 4,
        demos_per_task: 2,
        pretrain: PretrainConfig {
            tasks: 2,
            demos_per_task: 2,
            epochs: 1,
            batch: 8,
            ..Default::default()
        },
        policy: micro_policy_config(),
        ..RunConfig::default()
    };
    let specs = generate_suite(config.suite_seed, Family::Goal, 2)?;
    let grid = config.policy.grid;
    let suite = collect_suite(&specs, config.demos_per_task, config.suite_seed, grid)?;
    let pre = collect_suite(&pretrain_suite(&config, &specs)?, 2, config.suite_seed, grid)?;
    let base = pretrain(&config, &pre, config.suite_seed)?;
    let r = run_lifelong(config, (base.0, base.1), &suite, None)?;
    Ok((r.metrics.nbt, r.frozen_intact))
}

/// Every check, in order.
pub fn run_all() -> Vec<Check> {
    let mut out = Vec::new();
    match primitive_grad_checks() {
        Ok(rs) => {
            for (name, e) in rs {
                out.push(Check::new(
                    &format!("grad_check/{name}"),
                    e < GRAD_TOL,
                    format!("max rel error {e:.2e}"),
                ));
            }
        }
        Err(e) => out.push(Check::new("grad_check/primitives", false, format!("error: {e}"))),
    }
    out.push(Check::from(
        "grad_check/bc_loss",
        bc_loss_grad_check().map(|e| (e < GRAD_TOL, format!("max rel error {e:.2e}"))),
    ));
    out.push(Check::from(
        "identity_synthesis",
        identity_synthesis(100).map(|n| (n == 100, format!("{n}/100 inputs bitwise equal"))),
    ));
    out.push(Check::from(
        "quadratic_coefficient_law",
        quadratic_law(&[0.25, 0.5, 1.0, 2.0]).map(|e| (e < 1e-6, format!("max rel deviation {e:.2e}"))),
    ));
    out.push(Check::from(
        "orthogonal_growth",
        orthogonal_growth(10).map(|r| {
            (
                r.max_overlap < 1e-6 && r.fallbacks_reported,
                format!("max overlap {:.2e}, exhausted {:?}", r.max_overlap, r.exhausted),
            )
        }),
    ));
    out.push(Check::new("topk_sparsity", topk_sparsity(500, 3), "500 random routings".into()));
    out.push(Check::from(
        "metric_oracle",
        metric_oracle().map(|e| (e < 1e-12, format!("max deviation {e:.2e}"))),
    ));
    out.push(Check::from(
        "tail_oracle_no_forgetting",
        tail_micro_run().map(|(nbt, intact)| (nbt == 0.0 && intact, format!("NBT {nbt}, frozen experts intact {intact}"))),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_checks_pass() {
        assert!(metric_oracle().unwrap() < 1e-12);
        assert!(topk_sparsity(200, 3));
        assert!(quadratic_law(&[0.25, 0.5, 1.0, 2.0]).unwrap() < 1e-6);
        for (name, e) in primitive_grad_checks().unwrap() {
            assert!(e < GRAD_TOL, "{name}: {e}");
        }
    }
}
