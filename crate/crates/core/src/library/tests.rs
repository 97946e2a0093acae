use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;

use super::*;
use crate::autodiff::{Binding, Graph};

fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

#[test]
fn gram_schmidt_examples() {
    let mut r = rng(0);
    let out = gram_schmidt_orthogonalize(&[vec![1.0, 1.0, 0.0]], &[vec![1.0, 0.0, 0.0]], &mut r).unwrap();
    assert_eq!(out.fallbacks, 0);
    for (a, b) in out.columns[0].iter().zip([0.0, 1.0, 0.0]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
    let out = gram_schmidt_orthogonalize(&[vec![3.0, 4.0]], &[], &mut r).unwrap();
    assert_abs_diff_eq!(out.columns[0][0], 0.6, epsilon = 1e-12);
    assert_abs_diff_eq!(out.columns[0][1], 0.8, epsilon = 1e-12);
}

#[test]
fn gram_schmidt_exhausted_span_falls_back() {
    let mut r = rng(1);
    let basis = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let out = gram_schmidt_orthogonalize(&[vec![1.0, 1.0]], &basis, &mut r).unwrap();
    assert_eq!(out.fallbacks, 1);
    assert_abs_diff_eq!(norm(&out.columns[0]), 1.0, epsilon = 1e-12);
}

#[test]
fn gram_schmidt_redraws_a_dependent_candidate() {
    let mut r = rng(2);
    let out = gram_schmidt_orthogonalize(&[vec![2.0, 0.0, 0.0]], &[vec![1.0, 0.0, 0.0]], &mut r).unwrap();
    assert_eq!(out.fallbacks, 0);
    assert!(dot(&out.columns[0], &[1.0, 0.0, 0.0]).abs() < 1e-12);
}

fn identity_layer() -> (ParamStore<f64>, AdaptedLinear) {
    let mut store = ParamStore::new();
    let w0 = store.add("w0", Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap(), false);
    let b0 = store.add("b0", Tensor::zeros([2]), false);
    let a = store.add("a", Tensor::from_f64([2, 1], &[1.0, 0.0]).unwrap(), true);
    let b = store.add("b", Tensor::from_f64([1, 2], &[0.0, 1.0]).unwrap(), true);
    let layer = AdaptedLinear {
        name: "l".into(),
        submodule: Submodule::Head,
        d_in: 2,
        d_out: 2,
        rank: 1,
        w0,
        b0,
        experts: vec![LowRankExpert {
            a,
            b,
            bias: None,
            task_id: 1,
            frozen: false,
        }],
    };
    (store, layer)
}

#[test]
fn synthesis_examples() {
    let (store, layer) = identity_layer();
    let s = layer.synthesize(&store, &[1.0]).unwrap();
    assert_eq!(s.w.data(), &[1.0, 1.0, 0.0, 1.0]);
    let s = layer.synthesize(&store, &[0.5]).unwrap();
    assert_eq!(s.w.data(), &[1.0, 0.25, 0.0, 1.0]);
    let s = layer.synthesize(&store, &[0.0]).unwrap();
    assert_eq!(s.w.data(), store.get(layer.w0).data());
    assert!(layer.synthesize(&store, &[1.0, 1.0]).is_err());
}

#[test]
fn flops_examples() {
    let layer = AdaptedLinear {
        name: "l".into(),
        submodule: Submodule::Head,
        d_in: 64,
        d_out: 64,
        rank: 16,
        w0: ParamId(0),
        b0: ParamId(1),
        experts: vec![],
    };
    let f = layer.flops_estimate(3);
    assert_eq!(f.synthesis, 12288);
    assert_eq!(f.forward, 8192);
}

fn library(d_in: usize, d_out: usize, rank: usize, tasks: usize, seed: u64) -> (ParamStore<f64>, ExpertLibrary) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut lib = ExpertLibrary::new(true);
    lib.add_layer(&mut store, "l", Submodule::Vision, d_in, d_out, rank, &mut r).unwrap();
    lib.freeze_base(&mut store);
    for t in 1..=tasks {
        lib.add_task(&mut store, t, &mut r).unwrap();
        for p in lib.expert_params(t) {
            let shape = store.get(p).shape().to_vec();
            if store.name(p).ends_with(".a") {
                continue;
            }
            let n: usize = shape.iter().product();
            let vals = crate::nn::normal_vec(&mut r, n);
            store.set(p, Tensor::from_f64(shape, &vals).unwrap());
        }
        lib.freeze_task(&mut store, t).unwrap();
    }
    (store, lib)
}

#[test]
fn new_experts_start_as_identity_and_are_orthogonal() {
    let (store, lib) = library(12, 5, 3, 4, 3);
    let layer = &lib.layers[0];
    let cols: Vec<Vec<f64>> = layer.experts.iter().flat_map(|e| columns_of(store.get(e.a))).collect();
    assert_eq!(cols.len(), 12);
    for i in 0..cols.len() {
        assert_abs_diff_eq!(norm(&cols[i]), 1.0, epsilon = 1e-10);
        for j in 0..i {
            assert!(dot(&cols[i], &cols[j]).abs() < 1e-6);
        }
    }
    let mut r = rng(4);
    let mut store = store;
    let mut lib = lib;
    lib.add_task(&mut store, 5, &mut r).unwrap();
    let e = lib.layers[0].experts.last().unwrap();
    assert!(store.get(e.b).data().iter().all(|v| *v == 0.0));
    assert!(store.get(e.bias.unwrap()).data().iter().all(|v| *v == 0.0));
}

#[test]
fn freeze_is_idempotent_and_checks_ids() {
    let (mut store, mut lib) = library(6, 4, 2, 1, 5);
    let before = lib.frozen_checksums(&store);
    lib.freeze_task(&mut store, 1).unwrap();
    assert_eq!(before, lib.frozen_checksums(&store));
    assert!(lib.freeze_task(&mut store, 2).is_err());
    let mut empty = ExpertLibrary::new(false);
    assert!(empty.freeze_task(&mut store, 1).is_err());
}

#[test]
fn task_ids_must_follow_library_size() {
    let (mut store, mut lib) = library(6, 4, 2, 1, 6);
    let mut r = rng(0);
    assert!(lib.add_task(&mut store, 3, &mut r).is_err());
}

#[test]
fn zero_coefficients_leave_factored_forward_bitwise_unchanged() {
    let (store, lib) = library(6, 4, 2, 3, 7);
    let layer = &lib.layers[0];
    let x = Tensor::from_f64([2, 6], &(0..12).map(|i| i as f64 * 0.1 - 0.5).collect::<Vec<_>>()).unwrap();
    let mut g = Graph::<f64>::inference();
    let mut bind = Binding::default();
    let mut cx = Fwd::new(&mut g, &store, &mut bind);
    let xv = cx.input(x.clone());
    let c = cx.input(Tensor::zeros([2, 3]));
    let y = layer.forward_factored(&mut cx, xv, Some(c)).unwrap();
    let base = crate::autodiff::matmul(&x, store.get(layer.w0)).unwrap();
    let expect: Vec<f64> = base
        .data()
        .chunks(4)
        .flat_map(|row| row.iter().zip(store.get(layer.b0).data()).map(|(a, b)| a + b).collect::<Vec<_>>())
        .collect();
    assert_eq!(g.value(y).data(), expect.as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn factored_and_materialized_agree(seed in 0u64..1000, c in proptest::collection::vec(-2.0f64..2.0, 3), steps in 1usize..4) {
        let (store, lib) = library(7, 5, 2, 3, seed);
        let layer = &lib.layers[0];
        let mut r = rng(seed + 1);
        let xs = crate::nn::normal_vec(&mut r, steps * 7);
        let x = Tensor::from_f64([1, steps, 7], &xs).unwrap();
        let mut g = Graph::<f64>::inference();
        let mut bind = Binding::default();
        let mut cx = Fwd::new(&mut g, &store, &mut bind);
        let xv = cx.input(x);
        let cv = cx.input(Tensor::from_f64([1, 3], &c).unwrap());
        let yf = layer.forward_factored(&mut cx, xv, Some(cv)).unwrap();
        let syn = layer.synthesize(&store, &c).unwrap();
        let ym = layer.forward_materialized(&mut cx, xv, &syn).unwrap();
        prop_assert_eq!(g.shape(yf), &[1, steps, 5]);
        for (a, b) in g.value(yf).data().iter().zip(g.value(ym).data()) {
            prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn expert_delta_has_rank_at_most_r(seed in 0u64..1000, c in proptest::collection::vec(-2.0f64..2.0, 3)) {
        let (store, lib) = library(8, 6, 2, 3, seed);
        let layer = &lib.layers[0];
        let syn = layer.synthesize(&store, &c).unwrap();
        let delta: Vec<f64> = syn.w.data().iter().zip(store.get(layer.w0).data()).map(|(a, b)| a - b).collect();
        prop_assert!(numeric_rank(&delta, 8, 6) <= 2);
    }
}

/// Rank by Gaussian elimination with partial pivoting.
fn numeric_rank(m: &[f64], rows: usize, cols: usize) -> usize {
    let mut a = m.to_vec();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    let mut rank = 0;
    for col in 0..cols {
        let piv = (rank..rows).max_by(|&i, &j| a[i * cols + col].abs().total_cmp(&a[j * cols + col].abs()));
        let Some(p) = piv else { break };
        if a[p * cols + col].abs() < 1e-9 * scale {
            continue;
        }
        for c in 0..cols {
            a.swap(rank * cols + c, p * cols + c);
        }
        for i in rank + 1..rows {
            let f = a[i * cols + col] / a[rank * cols + col];
            for c in 0..cols {
                a[i * cols + c] -= f * a[rank * cols + c];
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn synthesis_cache_only_resynthesises_on_new_keys() {
    let (store, lib) = library(6, 4, 2, 2, 8);
    let mut cache = SynthesisCache::new(1);
    let layer = &lib.layers[0];
    cache.get(&store, LayerId(0), layer, &[0.5, 0.0]).unwrap();
    cache.get(&store, LayerId(0), layer, &[0.5, 0.0]).unwrap();
    assert_eq!(cache.synth_count, 1);
    cache.get(&store, LayerId(0), layer, &[0.5, 0.25]).unwrap();
    assert_eq!(cache.synth_count, 2);
}
