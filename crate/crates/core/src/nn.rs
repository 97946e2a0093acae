//! Forward-pass context and the small plain layers shared by the policy
//! and the router.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::Result;
use crate::rng::StreamRng;

/// Borrowed graph, parameter store and binding for one forward pass.
pub struct Fwd<'a, S: Scalar> {
    pub graph: &'a mut Graph<S>,
    pub store: &'a ParamStore<S>,
    pub binding: &'a mut Binding,
}

impl<'a, S: Scalar> Fwd<'a, S> {
    pub fn new(graph: &'a mut Graph<S>, store: &'a ParamStore<S>, binding: &'a mut Binding) -> Self {
        Fwd { graph, store, binding }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.binding.bind(self.graph, self.store, id)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.graph.constant(t)
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
pub fn uniform_init<S: Scalar>(rng: &mut StreamRng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize, rng: &mut StreamRng) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[d_in, d_out], d_in), true);
        let b = store.add(format!("{name}.b"), uniform_init(rng, &[d_out], d_in), true);
        Linear { w, b, d_in, d_out }
    }

    pub fn zeros<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([d_in, d_out]), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros([d_out]), true);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Fwd<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        let y = cx.graph.matmul(x, w)?;
        cx.graph.add_trailing(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([d], S::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([d]), true),
        }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Fwd<'_, S>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        cx.graph.layer_norm(x, g, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Standard normal draws.
pub fn normal_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}
