//! Progressive low-rank expert library over frozen base linear layers.
//!
//! Each adapted layer keeps its pretrained `(W0, b0)` and an ordered list
//! of per-task experts `(A_j, B_j, b_j)`. Given a coefficient vector `c`
//! the effective weights are
//!
//! ```text
//! W̃ = W0 + (Σ_j c_j A_j)(Σ_j c_j B_j)      b̃ = b0 + Σ_j c_j b_j
//! ```
//!
//! so the low-rank delta is quadratic in a single coefficient and always
//! factors through an `r`-dimensional space.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{normal_vec, uniform_init, Fwd};
use crate::rng::StreamRng;

/// The six policy submodules, in routing order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodule {
    Vision,
    Text,
    State,
    Fusion,
    Transformer,
    Head,
}

impl Submodule {
    pub const ALL: [Submodule; 6] = [
        Submodule::Vision,
        Submodule::Text,
        Submodule::State,
        Submodule::Fusion,
        Submodule::Transformer,
        Submodule::Head,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Submodule::Vision => "vision",
            Submodule::Text => "text",
            Submodule::State => "state",
            Submodule::Fusion => "fusion",
            Submodule::Transformer => "transformer",
            Submodule::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankExpert {
    /// `[d_in, r]`
    pub a: ParamId,
    /// `[r, d_out]`
    pub b: ParamId,
    /// `[d_out]`, present when biases are tuned.
    pub bias: Option<ParamId>,
    pub task_id: usize,
    pub frozen: bool,
}

impl LowRankExpert {
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.a, self.b];
        v.extend(self.bias);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedLinear {
    pub name: String,
    pub submodule: Submodule,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub w0: ParamId,
    pub b0: ParamId,
    pub experts: Vec<LowRankExpert>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerId(pub usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flops {
    pub synthesis: u64,
    pub forward: u64,
}

impl std::ops::Add for Flops {
    type Output = Flops;
    fn add(self, o: Flops) -> Flops {
        Flops {
            synthesis: self.synthesis + o.synthesis,
            forward: self.forward + o.forward,
        }
    }
}

/// Per-call choice between synthesising `W̃` once and applying the mixture
/// in factored form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Materialized,
    Factored,
}

/// Threshold below which a projected candidate counts as lying in the span.
pub const SPAN_EXHAUSTED_NORM: f64 = 1e-8;
pub const GRAM_SCHMIDT_REDRAWS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Orthonormalized {
    pub columns: Vec<Vec<f64>>,
    /// Columns accepted through the fallback path (span exhausted).
    pub fallbacks: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    // two passes keep the result orthogonal to working precision
    for _ in 0..2 {
        for u in basis {
            let c = dot(v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
        }
    }
}

/// Orthonormalises each candidate against `existing` and the columns
/// already returned. A candidate whose residual norm falls below
/// [`SPAN_EXHAUSTED_NORM`] is redrawn from `rng` up to
/// [`GRAM_SCHMIDT_REDRAWS`] times; after that a random unit vector is
/// accepted and a warning logged.
pub fn gram_schmidt_orthogonalize(
    candidates: &[Vec<f64>],
    existing: &[Vec<f64>],
    rng: &mut StreamRng,
) -> Result<Orthonormalized> {
    let dim = candidates
        .first()
        .or(existing.first())
        .map_or(0, |c| c.len());
    ensure!(dim >= 1, "Gram-Schmidt in a space of dimension {dim}");
    ensure!(
        candidates.iter().chain(existing).all(|c| c.len() == dim),
        "Gram-Schmidt columns of differing dimension"
    );
    let mut basis: Vec<Vec<f64>> = existing.to_vec();
    let mut out = Vec::with_capacity(candidates.len());
    let mut fallbacks = 0;
    for cand in candidates {
        let mut v = cand.clone();
        let mut accepted = None;
        for attempt in 0..=GRAM_SCHMIDT_REDRAWS {
            if attempt > 0 {
                v = normal_vec(rng, dim);
            }
            let n0 = norm(&v);
            if n0 > 0.0 {
                v.iter_mut().for_each(|x| *x /= n0);
                project_out(&mut v, &basis);
                let n = norm(&v);
                if n >= SPAN_EXHAUSTED_NORM {
                    v.iter_mut().for_each(|x| *x /= n);
                    accepted = Some(v.clone());
                    break;
                }
            }
        }
        let col = match accepted {
            Some(c) => c,
            None => {
                warn!("Gram-Schmidt: span of dimension {dim} exhausted, accepting a random unit column");
                fallbacks += 1;
                let mut r = normal_vec(rng, dim);
                let n = norm(&r).max(f64::MIN_POSITIVE);
                r.iter_mut().for_each(|x| *x /= n);
                r
            }
        };
        basis.push(col.clone());
        out.push(col);
    }
    Ok(Orthonormalized { columns: out, fallbacks })
}

/// Columns of a row-major `[rows, cols]` matrix.
pub fn columns_of<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<f64>> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..cols)
        .map(|j| (0..rows).map(|i| t.data()[i * cols + j].f64()).collect())
        .collect()
}

/// Effective weights of one layer for one coefficient vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized<S> {
    pub key: Vec<S>,
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl AdaptedLinear {
    pub fn k(&self) -> usize {
        self.experts.len()
    }

    fn check_coeffs<S: Scalar>(&self, coeffs: &[S]) -> Result<()> {
        if coeffs.len() != self.k() {
            return Err(Error::contract(format!(
                "layer {} has {} experts but got {} coefficients",
                self.name,
                self.k(),
                coeffs.len()
            )));
        }
        Ok(())
    }

    /// `W̃ = W0 + (Σ c A)(Σ c B)`, `b̃ = b0 + Σ c b`. Experts with a zero
    /// coefficient are skipped, so all-zero coefficients return `(W0, b0)`
    /// exactly.
    pub fn synthesize<S: Scalar>(&self, store: &ParamStore<S>, coeffs: &[S]) -> Result<Synthesized<S>> {
        self.check_coeffs(coeffs)?;
        let mut w = store.get(self.w0).clone();
        let mut b = store.get(self.b0).clone();
        let active: Vec<(S, &LowRankExpert)> = coeffs
            .iter()
            .zip(&self.experts)
            .filter(|(c, _)| **c != S::zero())
            .map(|(&c, e)| (c, e))
            .collect();
        if !active.is_empty() {
            let r = self.rank;
            let mut abar = vec![S::zero(); self.d_in * r];
            let mut bbar = vec![S::zero(); r * self.d_out];
            for (c, e) in &active {
                for (o, &v) in abar.iter_mut().zip(store.get(e.a).data()) {
                    *o += *c * v;
                }
                for (o, &v) in bbar.iter_mut().zip(store.get(e.b).data()) {
                    *o += *c * v;
                }
                if let Some(bias) = e.bias {
                    for (o, &v) in b.data_mut().iter_mut().zip(store.get(bias).data()) {
                        *o += *c * v;
                    }
                }
            }
            let mut delta = vec![S::zero(); self.d_in * self.d_out];
            crate::autodiff::gemm(&abar, &bbar, &mut delta, self.d_in, r, self.d_out);
            for (o, d) in w.data_mut().iter_mut().zip(delta) {
                *o += d;
            }
        }
        Ok(Synthesized {
            key: coeffs.to_vec(),
            w,
            b,
        })
    }

    /// Differentiable mixture applied in factored form:
    /// `y = x W0 + b0 + ((x Ā) B̄) + C·bias`, with `Ā = Σ c_j A_j` formed per
    /// batch row from `coeffs: [B, k]`. `x` is `[B, d_in]` or `[B, T, d_in]`.
    pub fn forward_factored<S: Scalar>(&self, cx: &mut Fwd<'_, S>, x: Var, coeffs: Option<Var>) -> Result<Var> {
        let (w0, b0) = (cx.p(self.w0), cx.p(self.b0));
        let base = cx.graph.matmul(x, w0)?;
        let base = cx.graph.add_trailing(base, b0)?;
        let c = match coeffs {
            Some(c) if self.k() > 0 => c,
            _ => return Ok(base),
        };
        let cs = cx.graph.shape(c).to_vec();
        let xs = cx.graph.shape(x).to_vec();
        if cs.len() != 2 || cs[1] != self.k() || cs[0] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "adapted_forward",
                lhs: xs,
                rhs: cs,
            });
        }
        if cx.graph.value(c).data().iter().all(|v| *v == S::zero()) {
            return Ok(base);
        }
        let (bsz, r) = (xs[0], self.rank);
        let a_parts: Vec<Var> = self.experts.iter().map(|e| cx.p(e.a)).collect();
        let b_parts: Vec<Var> = self.experts.iter().map(|e| cx.p(e.b)).collect();
        let g = &mut *cx.graph;
        let a_stack = g.stack(&a_parts)?;
        let a_stack = g.reshape(a_stack, &[self.k(), self.d_in * r])?;
        let abar = g.matmul(c, a_stack)?;
        let abar = g.reshape(abar, &[bsz, self.d_in, r])?;
        let b_stack = g.stack(&b_parts)?;
        let b_stack = g.reshape(b_stack, &[self.k(), r * self.d_out])?;
        let bbar = g.matmul(c, b_stack)?;
        let bbar = g.reshape(bbar, &[bsz, r, self.d_out])?;
        let steps = if xs.len() == 3 { xs[1] } else { 1 };
        let x3 = g.reshape(x, &[bsz, steps, self.d_in])?;
        let h = g.bmm(x3, abar)?;
        let delta = g.bmm(h, bbar)?;
        let mut y = g.reshape(base, &[bsz, steps, self.d_out])?;
        y = g.add(y, delta)?;
        if self.experts.iter().any(|e| e.bias.is_some()) {
            let mut parts = Vec::with_capacity(self.k());
            for e in &self.experts {
                let v = match e.bias {
                    Some(id) => cx.p(id),
                    None => cx.graph.constant(Tensor::zeros([self.d_out])),
                };
                parts.push(v);
            }
            let g = &mut *cx.graph;
            let bias_stack = g.stack(&parts)?;
            let bbias = g.matmul(c, bias_stack)?;
            y = g.add_mid(y, bbias)?;
        }
        cx.graph.reshape(y, &xs[..xs.len() - 1].iter().copied().chain([self.d_out]).collect::<Vec<_>>())
    }

    /// `y = x W̃ + b̃` with pre-synthesised weights.
    pub fn forward_materialized<S: Scalar>(&self, cx: &mut Fwd<'_, S>, x: Var, syn: &Synthesized<S>) -> Result<Var> {
        let w = cx.graph.constant(syn.w.clone());
        let b = cx.graph.constant(syn.b.clone());
        let y = cx.graph.matmul(x, w)?;
        cx.graph.add_trailing(y, b)
    }

    /// FLOPs of mixing `delta` experts into `W̃` and of one forward product.
    pub fn flops_estimate(&self, delta: usize) -> Flops {
        Flops {
            synthesis: 2 * (delta * self.rank * (self.d_in + self.d_out)) as u64,
            forward: 2 * (self.d_in * self.d_out) as u64,
        }
    }
}

/// Per-layer cache of synthesised weights keyed by the exact coefficient
/// vector that produced them.
#[derive(Clone, Debug)]
pub struct SynthesisCache<S> {
    entries: Vec<Option<Synthesized<S>>>,
    pub synth_count: usize,
}

impl<S: Scalar> SynthesisCache<S> {
    pub fn new(layers: usize) -> Self {
        SynthesisCache {
            entries: vec![None; layers],
            synth_count: 0,
        }
    }

    /// Cached weights for `coeffs`, resynthesising when the key differs.
    pub fn get(&mut self, store: &ParamStore<S>, id: LayerId, layer: &AdaptedLinear, coeffs: &[S]) -> Result<&Synthesized<S>> {
        if self.entries.len() <= id.0 {
            self.entries.resize(id.0 + 1, None);
        }
        let stale = match &self.entries[id.0] {
            Some(s) => s.key.as_slice() != coeffs,
            None => true,
        };
        if stale {
            self.entries[id.0] = Some(layer.synthesize(store, coeffs)?);
            self.synth_count += 1;
        }
        Ok(self.entries[id.0].as_ref().expect("just filled"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertLibrary {
    pub layers: Vec<AdaptedLinear>,
    k: usize,
    pub tune_bias: bool,
}

/// Outcome of growing the library by one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Growth {
    pub fallbacks: usize,
    pub fallback_layers: Vec<String>,
}

impl ExpertLibrary {
    pub fn new(tune_bias: bool) -> Self {
        ExpertLibrary {
            layers: Vec::new(),
            k: 0,
            tune_bias,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layer(&self, id: LayerId) -> &AdaptedLinear {
        &self.layers[id.0]
    }

    /// Registers a base layer with freshly initialised `(W0, b0)`.
    #[allow(clippy::too_many_arguments)]
    pub fn add_layer<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        name: &str,
        submodule: Submodule,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut StreamRng,
    ) -> Result<LayerId> {
        ensure!(self.k == 0, "layers must be registered before experts are added");
        ensure!(rank >= 1 && rank <= d_in.min(d_out), "rank {rank} for a {d_in}x{d_out} layer");
        let w0 = store.add(format!("{name}.w0"), uniform_init(rng, &[d_in, d_out], d_in), true);
        let b0 = store.add(format!("{name}.b0"), uniform_init(rng, &[d_out], d_in), true);
        self.layers.push(AdaptedLinear {
            name: name.to_string(),
            submodule,
            d_in,
            d_out,
            rank,
            w0,
            b0,
            experts: Vec::new(),
        });
        Ok(LayerId(self.layers.len() - 1))
    }

    /// Freezes every base `(W0, b0)`.
    pub fn freeze_base<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for l in &self.layers {
            store.set_trainable(l.w0, false);
            store.set_trainable(l.b0, false);
        }
    }

    /// Appends one expert for `task_id` to a single layer: `A` is
    /// Gram-Schmidt orthonormalised against all earlier `A` columns of the
    /// layer, `B` and `b` start at zero.
    pub fn add_task_expert<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        layer: LayerId,
        task_id: usize,
        rng: &mut StreamRng,
    ) -> Result<usize> {
        let tune_bias = self.tune_bias;
        let l = &mut self.layers[layer.0];
        ensure!(
            l.experts.iter().all(|e| e.frozen),
            "layer {} still has unfrozen experts",
            l.name
        );
        ensure!(
            task_id == l.experts.len() + 1,
            "task id {task_id} collides with a library of size {}",
            l.experts.len()
        );
        let existing: Vec<Vec<f64>> = l.experts.iter().flat_map(|e| columns_of(store.get(e.a))).collect();
        let candidates: Vec<Vec<f64>> = (0..l.rank).map(|_| normal_vec(rng, l.d_in)).collect();
        let ortho = gram_schmidt_orthogonalize(&candidates, &existing, rng)?;
        let mut a = vec![S::zero(); l.d_in * l.rank];
        for (j, col) in ortho.columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                a[i * l.rank + j] = S::of(*v);
            }
        }
        let name = format!("{}.expert{task_id}", l.name);
        let a = store.add(format!("{name}.a"), Tensor::new([l.d_in, l.rank], a)?, true);
        let b = store.add(format!("{name}.b"), Tensor::zeros([l.rank, l.d_out]), true);
        let bias = tune_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([l.d_out]), true));
        l.experts.push(LowRankExpert {
            a,
            b,
            bias,
            task_id,
            frozen: false,
        });
        Ok(ortho.fallbacks)
    }

    /// Grows every layer by one expert for task `k + 1`.
    pub fn add_task<S: Scalar>(&mut self, store: &mut ParamStore<S>, task_id: usize, rng: &mut StreamRng) -> Result<Growth> {
        ensure!(task_id == self.k + 1, "task id {task_id} with library size {}", self.k);
        let mut growth = Growth::default();
        for i in 0..self.layers.len() {
            let f = self.add_task_expert(store, LayerId(i), task_id, rng)?;
            if f > 0 {
                growth.fallbacks += f;
                growth.fallback_layers.push(self.layers[i].name.clone());
            }
        }
        self.k += 1;
        Ok(growth)
    }

    /// Marks the experts of `task_id` frozen in every layer.
    pub fn freeze_task<S: Scalar>(&mut self, store: &mut ParamStore<S>, task_id: usize) -> Result<()> {
        ensure!(self.k > 0, "freeze on an empty library");
        ensure!(
            (1..=self.k).contains(&task_id),
            "unknown task id {task_id} (library size {})",
            self.k
        );
        for l in &mut self.layers {
            for e in l.experts.iter_mut().filter(|e| e.task_id == task_id) {
                e.frozen = true;
                for p in e.params() {
                    store.set_trainable(p, false);
                }
            }
        }
        Ok(())
    }

    pub fn expert_params(&self, task_id: usize) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| l.experts.iter().filter(|e| e.task_id == task_id).flat_map(|e| e.params()))
            .collect()
    }

    /// Checksums of every frozen expert parameter.
    pub fn frozen_checksums<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<(ParamId, u64)> {
        self.layers
            .iter()
            .flat_map(|l| l.experts.iter().filter(|e| e.frozen).flat_map(|e| e.params()))
            .map(|p| (p, store.checksum(p)))
            .collect()
    }

    pub fn flops_estimate(&self, delta: usize) -> Flops {
        self.layers
            .iter()
            .map(|l| l.flops_estimate(delta))
            .fold(Flops::default(), |a, b| a + b)
    }

    pub fn layers_of(&self, sub: Submodule) -> impl Iterator<Item = (LayerId, &AdaptedLinear)> {
        self.layers
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.submodule == sub)
            .map(|(i, l)| (LayerId(i), l))
    }
}

#[cfg(test)]
mod tests;
