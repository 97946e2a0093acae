use rand::SeedableRng;

use super::*;
use crate::autodiff::{grad_check_store, Binding, Graph};
use crate::nn::normal_vec;
use crate::router::sparse_coefficients;
use crate::world::{generate_suite, Family};

fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

pub(crate) fn tiny_config() -> PolicyConfig {
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

/// Tiny policy with `k` frozen experts whose `B` and bias are random.
pub(crate) fn tiny_policy<S: Scalar>(k: usize, seed: u64) -> (ParamStore<S>, Policy) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut policy = Policy::new(tiny_config(), &mut store, &mut r).unwrap();
    policy.freeze_base(&mut store);
    for t in 1..=k {
        policy.library.add_task(&mut store, t, &mut r).unwrap();
        for p in policy.library.expert_params(t) {
            if store.name(p).ends_with(".a") {
                continue;
            }
            let shape = store.get(p).shape().to_vec();
            let n = shape.iter().product();
            let v: Vec<f64> = normal_vec(&mut r, n).into_iter().map(|x| 0.3 * x).collect();
            store.set(p, Tensor::from_f64(shape, &v).unwrap());
        }
        policy.library.freeze_task(&mut store, t).unwrap();
    }
    (store, policy)
}

fn random_batch<S: Scalar>(policy: &Policy, b: usize, t: usize, seed: u64) -> WindowBatch<S> {
    let mut r = rng(seed);
    let n = b * t * policy.config.obs_dim();
    let v: Vec<f64> = normal_vec(&mut r, n).into_iter().map(|x| x.abs().min(1.0)).collect();
    WindowBatch {
        obs: Tensor::from_f64([b, t, policy.config.obs_dim()], &v).unwrap(),
        tokens: (0..b).map(|i| vec![0, 6 + i % 6, 3, 12 + i]).collect(),
    }
}

fn run<S: Scalar>(policy: &Policy, store: &ParamStore<S>, batch: &WindowBatch<S>, mix: &mut Mixing<'_, S>) -> Vec<S> {
    let mut g = Graph::inference();
    let mut bind = Binding::new();
    let mut cx = Fwd::new(&mut g, store, &mut bind);
    let out = policy.forward(&mut cx, batch, mix).unwrap();
    [out.logits, out.means, out.stds]
        .iter()
        .flat_map(|&v| g.value(v).data().to_vec())
        .collect()
}

#[test]
fn film_examples() {
    let mut g = Graph::<f64>::inference();
    let store = ParamStore::new();
    let mut bind = Binding::new();
    let mut cx = Fwd::new(&mut g, &store, &mut bind);
    let x = cx.input(Tensor::from_f64([1, 1, 2], &[1.0, 2.0]).unwrap());
    let gamma = cx.input(Tensor::from_f64([1, 2], &[2.0, 0.5]).unwrap());
    let beta = cx.input(Tensor::from_f64([1, 2], &[1.0, -1.0]).unwrap());
    let y = film(&mut cx, x, gamma, beta).unwrap();
    let ones = cx.input(Tensor::from_f64([1, 2], &[1.0, 1.0]).unwrap());
    let zeros = cx.input(Tensor::zeros([1, 2]));
    let id = film(&mut cx, x, ones, zeros).unwrap();
    let x0 = cx.input(Tensor::zeros([1, 1, 2]));
    let b = film(&mut cx, x0, gamma, beta).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 0.0]);
    assert_eq!(g.value(id).data(), &[1.0, 2.0]);
    assert_eq!(g.value(b).data(), &[1.0, -1.0]);
}

fn gmm_vars(cx: &mut Fwd<'_, f64>, b: usize, t: usize, logits: &[f64], means: &[f64], stds: &[f64]) -> GmmVars {
    let m = logits.len() / (b * t);
    let w = means.len() / (b * t);
    GmmVars {
        logits: cx.input(Tensor::from_f64([b, t, m], logits).unwrap()),
        means: cx.input(Tensor::from_f64([b, t, w], means).unwrap()),
        stds: cx.input(Tensor::from_f64([b, t, w], stds).unwrap()),
    }
}

fn nll(logits: &[f64], means: &[f64], stds: &[f64], actions: &[f64], b: usize, t: usize) -> f64 {
    let mut g = Graph::<f64>::inference();
    let store = ParamStore::new();
    let mut bind = Binding::new();
    let mut cx = Fwd::new(&mut g, &store, &mut bind);
    let m = logits.len() / (b * t);
    let da = actions.len() / (b * t);
    let gmm = gmm_vars(&mut cx, b, t, logits, means, stds);
    let a = Tensor::from_f64([b, t, da], actions).unwrap();
    let l = bc_nll_loss(&mut cx, &gmm, &a, m).unwrap();
    g.value(l).item()
}

#[test]
fn weighted_nll_matches_repeated_rows() {
    let mut r = rng(6);
    let (t, m, da) = (2, 2, 3);
    let logits = normal_vec(&mut r, t * m);
    let means = normal_vec(&mut r, t * m * da);
    let stds: Vec<f64> = normal_vec(&mut r, t * m * da).iter().map(|x| 0.5 + x.abs()).collect();
    let actions = normal_vec(&mut r, t * da);
    let mut g = Graph::<f64>::inference();
    let store = ParamStore::new();
    let mut bind = Binding::new();
    let mut cx = Fwd::new(&mut g, &store, &mut bind);
    let gmm = gmm_vars(&mut cx, 1, t, &logits, &means, &stds);
    let a = Tensor::from_f64([1, t, da], &actions).unwrap();
    let w = Tensor::from_f64([1, t], &[3.0, 1.0]).unwrap();
    let l = bc_nll_loss_weighted(&mut cx, &gmm, &a, m, &w).unwrap();
    let got = g.value(l).item();
    // position 0 counted three times, position 1 once
    let p0 = nll(&logits[..m], &means[..m * da], &stds[..m * da], &actions[..da], 1, 1);
    let p1 = nll(&logits[m..], &means[m * da..], &stds[m * da..], &actions[da..], 1, 1);
    assert!((got - (3.0 * p0 + p1) / 4.0).abs() < 1e-12);
}

#[test]
fn nll_closed_forms() {
    let v = nll(&[0.3], &[0.0], &[1.0], &[0.0], 1, 1);
    assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
    let one = nll(&[0.0], &[0.2, -0.1], &[0.5, 2.0], &[0.4, 0.3], 1, 1);
    let two = nll(&[1.3, 1.3], &[0.2, -0.1, 0.2, -0.1], &[0.5, 2.0, 0.5, 2.0], &[0.4, 0.3], 1, 1);
    assert!((one - two).abs() < 1e-12);
}

#[test]
fn nll_matches_direct_density_sum() {
    let mut r = rng(5);
    let (b, t, m, da) = (2, 3, 3, 2);
    let logits = normal_vec(&mut r, b * t * m);
    let means = normal_vec(&mut r, b * t * m * da);
    let stds: Vec<f64> = normal_vec(&mut r, b * t * m * da).iter().map(|x| 0.5 + x.abs()).collect();
    let actions = normal_vec(&mut r, b * t * da);
    let got = nll(&logits, &means, &stds, &actions, b, t);
    let mut total = 0.0;
    for row in 0..b * t {
        let l = &logits[row * m..(row + 1) * m];
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        let mut density = 0.0;
        for k in 0..m {
            let mut p = l[k].exp() / z;
            for i in 0..da {
                let (mu, s) = (means[(row * m + k) * da + i], stds[(row * m + k) * da + i]);
                let x = actions[row * da + i];
                p *= (-(x - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            }
            density += p;
        }
        total -= density.ln();
    }
    assert!((got - total / (b * t) as f64).abs() < 1e-9);
}

#[test]
fn select_action_examples() {
    let one = GmmParams {
        logits: vec![0.0],
        means: vec![[0.1, 0.2, 0.3]],
        stds: vec![[1.0; 3]],
    };
    assert_eq!(select_action(&one, ModeSelection::WeightedDensity), [0.1, 0.2, 0.3]);
    let two = GmmParams {
        logits: vec![0.0, 0.0],
        means: vec![[1.0; 3], [2.0; 3]],
        stds: vec![[0.1; 3], [1.0; 3]],
    };
    assert_eq!(select_action(&two, ModeSelection::WeightedDensity), [1.0; 3]);
    let tie = GmmParams {
        logits: vec![0.5, 0.5],
        means: vec![[1.0; 3], [2.0; 3]],
        stds: vec![[1.0; 3], [1.0; 3]],
    };
    assert_eq!(select_action(&tie, ModeSelection::WeightedDensity), [1.0; 3]);
    let weight = GmmParams {
        logits: vec![0.0, 0.1],
        means: vec![[1.0; 3], [2.0; 3]],
        stds: vec![[0.1; 3], [1.0; 3]],
    };
    assert_eq!(select_action(&weight, ModeSelection::HighestWeight), [2.0; 3]);
    let shifted = GmmParams {
        logits: weight.logits.iter().map(|l| l + 3.7).collect(),
        ..weight.clone()
    };
    assert_eq!(
        select_action(&shifted, ModeSelection::WeightedDensity),
        select_action(&weight, ModeSelection::WeightedDensity)
    );
}

#[test]
fn gmm_outputs_are_valid() {
    let (store, policy) = tiny_policy::<f64>(0, 1);
    let batch = random_batch(&policy, 2, 3, 2);
    let mut g = Graph::inference();
    let mut bind = Binding::new();
    let mut cx = Fwd::new(&mut g, &store, &mut bind);
    let out = policy.forward(&mut cx, &batch, &mut Mixing::Base).unwrap();
    let w = g.softmax(out.logits);
    for row in g.value(w).data().chunks(2) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(g.value(out.stds).data().iter().all(|&s| s >= 1e-4));
    assert!(g.value(out.means).is_finite());
}

#[test]
fn zero_coefficients_reproduce_the_base_policy_bitwise() {
    let (store, policy) = tiny_policy::<f32>(3, 3);
    let batch = random_batch(&policy, 2, 3, 4);
    let base = run(&policy, &store, &batch, &mut Mixing::Base);
    let zeros = CoefficientSet::zeros(3);
    let mut cache = SynthesisCache::new(policy.library.layers.len());
    let mat = run(
        &policy,
        &store,
        &WindowBatch {
            obs: Tensor::new([1, 3, policy.config.obs_dim()], batch.obs.data()[..3 * policy.config.obs_dim()].to_vec()).unwrap(),
            tokens: vec![batch.tokens[0].clone()],
        },
        &mut Mixing::Materialized {
            coeffs: &zeros,
            cache: &mut cache,
        },
    );
    let base0 = run(
        &policy,
        &store,
        &WindowBatch {
            obs: Tensor::new([1, 3, policy.config.obs_dim()], batch.obs.data()[..3 * policy.config.obs_dim()].to_vec()).unwrap(),
            tokens: vec![batch.tokens[0].clone()],
        },
        &mut Mixing::Base,
    );
    assert_eq!(mat, base0);
    let mut g = Graph::inference();
    let mut bind = Binding::new();
    let mut cx = Fwd::new(&mut g, &store, &mut bind);
    let c: Vec<Var> = (0..6).map(|_| cx.input(Tensor::zeros([2, 3]))).collect();
    let out = policy.forward(&mut cx, &batch, &mut Mixing::Factored(c)).unwrap();
    let fac: Vec<f32> = [out.logits, out.means, out.stds]
        .iter()
        .flat_map(|&v| g.value(v).data().to_vec())
        .collect();
    assert_eq!(fac, base);
}

#[test]
fn factored_and_materialized_policies_agree() {
    let (store, policy) = tiny_policy::<f64>(3, 6);
    let batch = random_batch(&policy, 1, 3, 7);
    let coeffs = CoefficientSet {
        k: 3,
        vectors: (0..6).map(|s| vec![0.5 + 0.1 * s as f64, 0.0, 1.7]).collect(),
    };
    let mut cache = SynthesisCache::new(policy.library.layers.len());
    let mat = run(&policy, &store, &batch, &mut Mixing::Materialized { coeffs: &coeffs, cache: &mut cache });
    let mut g = Graph::inference();
    let mut bind = Binding::new();
    let mut cx = Fwd::new(&mut g, &store, &mut bind);
    let c: Vec<Var> = coeffs
        .vectors
        .iter()
        .map(|v| cx.input(Tensor::new([1, 3], v.clone()).unwrap()))
        .collect();
    let out = policy.forward(&mut cx, &batch, &mut Mixing::Factored(c)).unwrap();
    let fac: Vec<f64> = [out.logits, out.means, out.stds]
        .iter()
        .flat_map(|&v| g.value(v).data().to_vec())
        .collect();
    for (a, b) in mat.iter().zip(&fac) {
        assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn future_steps_never_change_past_outputs() {
    let (store, policy) = tiny_policy::<f32>(2, 8);
    let batch = random_batch::<f32>(&policy, 1, 3, 9);
    let coeffs = CoefficientSet::uniform(vec![0.7f32, 1.2]);
    let mut cache = SynthesisCache::new(policy.library.layers.len());
    let mut mix = Mixing::Materialized { coeffs: &coeffs, cache: &mut cache };
    let outputs = |b: &WindowBatch<f32>, mix: &mut Mixing<'_, f32>| {
        let mut g = Graph::inference();
        let mut bind = Binding::new();
        let mut cx = Fwd::new(&mut g, &store, &mut bind);
        let out = policy.forward(&mut cx, b, mix).unwrap();
        (0..3).map(|t| gmm_at(&g, &out, 0, t)).collect::<Vec<_>>()
    };
    let before = outputs(&batch, &mut mix);
    let mut perturbed = batch.clone();
    let d = policy.config.obs_dim();
    for v in &mut perturbed.obs.data_mut()[2 * d..] {
        *v += 0.37;
    }
    let after = outputs(&perturbed, &mut mix);
    assert_eq!(before[..2], after[..2]);
    assert_ne!(before[2], after[2]);
}

#[test]
fn sequence_limits() {
    let (store, policy) = tiny_policy::<f64>(0, 10);
    let one = random_batch::<f64>(&policy, 1, 1, 11);
    run(&policy, &store, &one, &mut Mixing::Base);
    let long = random_batch::<f64>(&policy, 1, 4, 11);
    let mut g = Graph::inference();
    let mut bind = Binding::new();
    let mut cx = Fwd::new(&mut g, &store, &mut bind);
    assert!(policy.forward(&mut cx, &long, &mut Mixing::Base).is_err());
    let mut bad = one.clone();
    bad.tokens[0].push(10_000);
    assert!(policy.forward(&mut cx, &bad, &mut Mixing::Base).is_err());
}

#[test]
fn distinct_instructions_give_distinct_text_features() {
    let mut store = ParamStore::<f32>::new();
    let policy = Policy::new(PolicyConfig::default(), &mut store, &mut rng(12)).unwrap();
    let tasks: Vec<_> = Family::ALL.iter().flat_map(|&f| generate_suite(4, f, 8).unwrap()).collect();
    let obs = Tensor::zeros([1, 1, policy.config.obs_dim()]);
    let feats: Vec<Vec<f32>> = tasks
        .iter()
        .map(|t| {
            let b = WindowBatch {
                obs: obs.clone(),
                tokens: vec![t.tokens().unwrap()],
            };
            policy.base_features(&store, &b).unwrap().1.into_data()
        })
        .collect();
    for i in 0..feats.len() {
        for j in 0..i {
            assert_ne!(feats[i], feats[j], "{} / {}", tasks[i].name, tasks[j].name);
        }
    }
}

#[test]
fn full_policy_loss_passes_grad_check() {
    let (mut store, mut policy) = tiny_policy::<f64>(2, 13);
    let mut r = rng(14);
    policy.library.add_task(&mut store, 3, &mut r).unwrap();
    for p in policy.library.expert_params(3) {
        let shape = store.get(p).shape().to_vec();
        let n = shape.iter().product();
        let v: Vec<f64> = normal_vec(&mut r, n).into_iter().map(|x| 0.3 * x).collect();
        store.set(p, Tensor::from_f64(shape, &v).unwrap());
    }
    policy.attach_router(&mut store, &mut r);
    let mut router = policy.router.clone().unwrap();
    for j in 1..=3 {
        router.grow(&mut store, j).unwrap();
    }
    for id in router.params() {
        let shape = store.get(id).shape().to_vec();
        let n = shape.iter().product();
        let v: Vec<f64> = normal_vec(&mut r, n).into_iter().map(|x| 0.5 * x).collect();
        store.set(id, Tensor::from_f64(shape, &v).unwrap());
    }
    // unfreeze everything so base, expert and router gradients are all checked
    for id in store.ids().collect::<Vec<_>>() {
        store.set_trainable(id, true);
    }
    let batch = random_batch::<f64>(&policy, 2, 3, 15);
    let actions = Tensor::from_f64([2, 3, 3], &normal_vec(&mut r, 18)).unwrap();
    let ctx = Tensor::from_f64([2, policy.config.context_dim()], &normal_vec(&mut r, 2 * policy.config.context_dim())).unwrap();
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
        for i in [0, n / 2, n - 1] {
            coords.push((id, i));
        }
    }
    let report = grad_check_store(f, &store, &coords, 1e-4).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
struct ConstantEnv(Vec<f32>);

impl Environment for ConstantEnv {
    fn observe(&self) -> Vec<f32> {
        self.0.clone()
    }

    fn step(&mut self, _: [f32; ACTION_DIM]) -> Result<()> {
        Ok(())
    }

    fn success(&self) -> bool {
        false
    }
}

fn routed_policy(seed: u64) -> (ParamStore<f32>, Policy) {
    let (mut store, mut policy) = tiny_policy::<f32>(3, seed);
    let mut r = rng(seed + 1);
    policy.attach_router(&mut store, &mut r);
    let mut router = policy.router.take().unwrap();
    for j in 1..=3 {
        router.grow(&mut store, j).unwrap();
    }
    for id in router.params() {
        let shape = store.get(id).shape().to_vec();
        let n = shape.iter().product();
        store.set(id, Tensor::from_f64(shape, &normal_vec(&mut r, n)).unwrap());
    }
    policy.router = Some(router);
    (store, policy)
}

#[test]
fn synthesis_interval_controls_routing_frequency() {
    let (store, policy) = routed_policy(20);
    let router = policy.router.as_ref().unwrap();
    let routing = Routing::Router { router, delta: 2 };
    let obs: Vec<f32> = (0..policy.config.obs_dim()).map(|i| (i % 7) as f32 / 7.0).collect();
    let tokens = [0, 7, 3, 14];
    let mut counts = Vec::new();
    let mut actions = Vec::new();
    for interval in [1, 5, 12] {
        let mut env = ConstantEnv(obs.clone());
        let ep = rollout_episode(&policy, &store, &mut env, &tokens, &routing, interval, 12).unwrap();
        assert_eq!(ep.steps, 12);
        counts.push(ep.route_calls);
        actions.push(ep.actions);
    }
    assert_eq!(counts, vec![12, 3, 1]);
    assert_eq!(actions[0], actions[1]);
    let mut env = ConstantEnv(obs);
    let base = rollout_episode(&policy, &store, &mut env, &tokens, &Routing::Base, 1, 4).unwrap();
    assert_eq!(base.route_calls, 0);
    assert!(base.coeff_sum.is_empty());
}

#[test]
fn routed_coefficients_are_sparse_and_bounded() {
    let (store, policy) = routed_policy(21);
    let router = policy.router.as_ref().unwrap();
    let task = &generate_suite(3, Family::Goal, 1).unwrap()[0];
    let mut env = WorldEnv::new(task, 5, policy.config.grid);
    let routing = Routing::Router { router, delta: 2 };
    let ep = rollout_episode(&policy, &store, &mut env, &task.tokens().unwrap(), &routing, 1, 10).unwrap();
    assert_eq!(ep.coeff_sum.len(), 18);
    let r: Vec<f32> = (0..policy.config.context_dim()).map(|i| i as f32 * 0.01).collect();
    let c = router.route(&store, &r).unwrap().sparsify(2);
    for v in &c.vectors {
        assert!(v.iter().filter(|x| **x != 0.0).count() <= 2);
        assert!(v.iter().all(|x| (0.0..=2.0).contains(x)));
    }
}
