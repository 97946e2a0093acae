//! Context-conditioned router: pooled context in, six per-submodule
//! coefficient vectors out.
//!
//! Raw router outputs are laid out expert-major, column `j * 6 + s` for
//! expert `j` and submodule `s`, so the outputs that existed before a
//! `grow` are always a prefix of the current ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::library::Submodule;
use crate::nn::{Fwd, Linear};
use crate::rng::StreamRng;

pub const SUBMODULES: usize = 6;

/// Raw column of expert `j` for submodule `sub`.
pub fn raw_index(sub: Submodule, j: usize) -> usize {
    j * SUBMODULES + sub.index()
}

/// Raw columns of one submodule's coefficient vector, in expert order.
pub fn submodule_columns(sub: Submodule, k: usize) -> Vec<usize> {
    (0..k).map(|j| raw_index(sub, j)).collect()
}

/// Arithmetic mean of equally sized rows, computed as `x0 + Σ(x_i − x0)/n`
/// so that a window of identical rows pools to that row exactly.
pub fn pool_mean<S: Scalar>(rows: &[&[S]]) -> Result<Vec<S>> {
    let first = rows.first().ok_or_else(|| Error::contract("pooling over an empty window"))?;
    ensure!(rows.iter().all(|r| r.len() == first.len()), "pooled rows differ in width");
    let n = S::of(rows.len() as f64);
    let mut acc = vec![S::zero(); first.len()];
    for r in &rows[1..] {
        for ((a, &x), &x0) in acc.iter_mut().zip(*r).zip(*first) {
            *a += x - x0;
        }
    }
    Ok(first.iter().zip(acc).map(|(&x0, a)| x0 + a / n).collect())
}

/// `r_t = [mean visual; instruction; mean proprio]` over the valid window.
pub fn build_context<S: Scalar>(visual: &[&[S]], instruction: &[S], proprio: &[&[S]]) -> Result<Vec<S>> {
    ensure!(
        !visual.is_empty() && visual.len() == proprio.len(),
        "context window of {} visual and {} proprio steps",
        visual.len(),
        proprio.len()
    );
    let mut r = pool_mean(visual)?;
    r.extend_from_slice(instruction);
    r.extend(pool_mean(proprio)?);
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterHead {
    /// `[hidden, 6]`
    pub w: ParamId,
    /// `[6]`
    pub b: ParamId,
}

/// Two GELU hidden layers and a growable `2·sigmoid` output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Router {
    pub d_r: usize,
    pub hidden: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: Vec<RouterHead>,
}

impl Router {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, d_r: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        Router {
            d_r,
            hidden,
            fc1: Linear::new(store, "router.fc1", d_r, hidden, rng),
            fc2: Linear::new(store, "router.fc2", hidden, hidden, rng),
            heads: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    /// Adds output columns for expert `new_k`; zero weights and bias make
    /// its coefficient exactly 1.0 everywhere until trained.
    pub fn grow<S: Scalar>(&mut self, store: &mut ParamStore<S>, new_k: usize) -> Result<()> {
        ensure!(
            new_k == self.k() + 1,
            "router grow from {} to {new_k} experts",
            self.k()
        );
        let name = format!("router.out{new_k}");
        let w = store.add(format!("{name}.w"), Tensor::zeros([self.hidden, SUBMODULES]), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros([SUBMODULES]), true);
        self.heads.push(RouterHead { w, b });
        Ok(())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::from(self.fc1.params());
        v.extend(self.fc2.params());
        v.extend(self.heads.iter().flat_map(|h| [h.w, h.b]));
        v
    }

    /// Raw coefficients `[B, 6k]` in `(0, 2)` for contexts `r: [B, d_r]`.
    pub fn forward<S: Scalar>(&self, cx: &mut Fwd<'_, S>, r: Var) -> Result<Var> {
        ensure!(self.k() > 0, "routing with an empty library");
        let shape = cx.graph.shape(r).to_vec();
        if shape.len() != 2 || shape[1] != self.d_r {
            return Err(Error::ShapeMismatch {
                op: "route",
                lhs: shape,
                rhs: vec![self.d_r],
            });
        }
        let h = self.fc1.forward(cx, r)?;
        let h = cx.graph.gelu(h);
        let h = self.fc2.forward(cx, h)?;
        let h = cx.graph.gelu(h);
        let mut outs = Vec::with_capacity(self.k());
        for head in &self.heads {
            let (w, b) = (cx.p(head.w), cx.p(head.b));
            let o = cx.graph.matmul(h, w)?;
            outs.push(cx.graph.add_trailing(o, b)?);
        }
        let logits = if outs.len() == 1 { outs[0] } else { cx.graph.concat(&outs)? };
        let s = cx.graph.sigmoid(logits);
        Ok(cx.graph.scale(s, 2.0))
    }

    /// Raw coefficients for one context, evaluated without gradients.
    pub fn route<S: Scalar>(&self, store: &ParamStore<S>, r: &[S]) -> Result<CoefficientSet<S>> {
        let mut g = crate::autodiff::Graph::inference();
        let mut bind = crate::autodiff::Binding::new();
        let mut cx = Fwd::new(&mut g, store, &mut bind);
        let rv = cx.input(Tensor::new([1, r.len()], r.to_vec())?);
        let out = self.forward(&mut cx, rv)?;
        CoefficientSet::from_raw(g.value(out).data(), self.k())
    }
}

/// Six coefficient vectors of length `k`, one per submodule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet<S> {
    pub k: usize,
    pub vectors: Vec<Vec<S>>,
}

impl<S: Scalar> CoefficientSet<S> {
    pub fn from_raw(raw: &[S], k: usize) -> Result<Self> {
        ensure!(raw.len() == SUBMODULES * k, "raw coefficients of length {} for k={k}", raw.len());
        let vectors = Submodule::ALL
            .iter()
            .map(|&s| (0..k).map(|j| raw[raw_index(s, j)]).collect())
            .collect();
        Ok(CoefficientSet { k, vectors })
    }

    pub fn to_raw(&self) -> Vec<S> {
        let mut raw = vec![S::zero(); SUBMODULES * self.k];
        for s in Submodule::ALL {
            for j in 0..self.k {
                raw[raw_index(s, j)] = self.vectors[s.index()][j];
            }
        }
        raw
    }

    /// The same coefficient for every submodule.
    pub fn uniform(values: Vec<S>) -> Self {
        CoefficientSet {
            k: values.len(),
            vectors: vec![values; SUBMODULES],
        }
    }

    pub fn zeros(k: usize) -> Self {
        Self::uniform(vec![S::zero(); k])
    }

    pub fn get(&self, sub: Submodule) -> &[S] {
        &self.vectors[sub.index()]
    }

    pub fn sparsify(&self, delta: usize) -> Self {
        CoefficientSet {
            k: self.k,
            vectors: self.vectors.iter().map(|v| sparsify_topk(v, delta)).collect(),
        }
    }
}

/// Indices of the `delta` largest entries; ties go to the lower index.
pub fn topk_indices<S: Scalar>(v: &[S], delta: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(delta);
    idx.sort_unstable();
    idx
}

/// Keeps the top `delta` entries and sets the rest to exactly zero.
pub fn sparsify_topk<S: Scalar>(v: &[S], delta: usize) -> Vec<S> {
    if delta >= v.len() {
        return v.to_vec();
    }
    let mut out = vec![S::zero(); v.len()];
    for i in topk_indices(v, delta) {
        out[i] = v[i];
    }
    out
}

/// Zeroes each nonzero coefficient with probability `p` and rescales the
/// survivors by `1/(1−p)`. Identity outside training.
pub fn coefficient_dropout<S: Scalar>(coeffs: &mut CoefficientSet<S>, p: f64, training: bool, rng: &mut StreamRng) {
    if !training || p == 0.0 {
        return;
    }
    let keep = S::of(1.0 / (1.0 - p));
    for v in &mut coeffs.vectors {
        for c in v.iter_mut().filter(|c| **c != S::zero()) {
            *c = if rng.random::<f64>() < p { S::zero() } else { *c * keep };
        }
    }
}

/// Per-submodule differentiable coefficients `[B, k]` from raw router
/// outputs: top-δ selection and coefficient dropout enter as constant
/// masks, so gradients flow into the surviving entries only.
pub fn sparse_coefficients<S: Scalar>(
    cx: &mut Fwd<'_, S>,
    raw: Var,
    k: usize,
    delta: usize,
    dropout: f64,
    mut rng: Option<&mut StreamRng>,
) -> Result<Vec<Var>> {
    let batch = cx.graph.shape(raw)[0];
    let values = cx.graph.value(raw).data().to_vec();
    let mut out = Vec::with_capacity(SUBMODULES);
    for sub in Submodule::ALL {
        let cols = submodule_columns(sub, k);
        let mut mask = vec![S::zero(); batch * k];
        for b in 0..batch {
            let row: Vec<S> = cols.iter().map(|&c| values[b * SUBMODULES * k + c]).collect();
            for i in topk_indices(&row, delta) {
                mask[b * k + i] = S::one();
            }
        }
        if let Some(rng) = rng.as_deref_mut() {
            if dropout > 0.0 {
                let keep = S::of(1.0 / (1.0 - dropout));
                for m in mask.iter_mut().filter(|m| **m != S::zero()) {
                    *m = if rng.random::<f64>() < dropout { S::zero() } else { keep };
                }
            }
        }
        let sel = cx.graph.gather_last(raw, &cols)?;
        let m = cx.input(Tensor::new([batch, k], mask)?);
        out.push(cx.graph.mul(sel, m)?);
    }
    Ok(out)
}

/// One archived router input/output pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrEntry {
    pub task: usize,
    pub context: Vec<f32>,
    /// Raw pre-sparsification outputs, expert-major, length `6k` at archive time.
    pub coeffs: Vec<f32>,
}

/// `mean_i ½‖R(r_i) − c_i‖²` over the stored prefix of each entry. With
/// `pad_new_experts` the columns of experts added after archiving are
/// compared against zero instead of being excluded.
pub fn cr_loss<S: Scalar>(cx: &mut Fwd<'_, S>, router: &Router, entries: &[&CrEntry], pad_new_experts: bool) -> Result<Var> {
    ensure!(!entries.is_empty(), "coefficient replay over an empty batch");
    let (n, width) = (entries.len(), SUBMODULES * router.k());
    let mut ctx = Vec::with_capacity(n * router.d_r);
    let mut target = vec![S::zero(); n * width];
    let mut mask = vec![S::zero(); n * width];
    for (i, e) in entries.iter().enumerate() {
        ensure!(e.context.len() == router.d_r, "archived context of width {}", e.context.len());
        ensure!(e.coeffs.len() <= width, "archived coefficients wider than the router");
        ctx.extend(e.context.iter().map(|&v| S::of(v as f64)));
        for (j, &c) in e.coeffs.iter().enumerate() {
            target[i * width + j] = S::of(c as f64);
            mask[i * width + j] = S::one();
        }
        if pad_new_experts {
            mask[i * width + e.coeffs.len()..(i + 1) * width].fill(S::one());
        }
    }
    let r = cx.input(Tensor::new([n, router.d_r], ctx)?);
    let out = router.forward(cx, r)?;
    let t = cx.input(Tensor::new([n, width], target)?);
    let m = cx.input(Tensor::new([n, width], mask)?);
    let d = cx.graph.sub(out, t)?;
    let d = cx.graph.mul(d, m)?;
    let sq = cx.graph.square(d);
    let total = cx.graph.sum_all(sq);
    Ok(cx.graph.scale(total, 0.5 / n as f64))
}

/// [`cr_loss`] evaluated without gradients.
pub fn cr_loss_value<S: Scalar>(store: &ParamStore<S>, router: &Router, entries: &[&CrEntry], pad_new_experts: bool) -> Result<f64> {
    let mut g = crate::autodiff::Graph::inference();
    let mut bind = crate::autodiff::Binding::new();
    let mut cx = Fwd::new(&mut g, store, &mut bind);
    let l = cr_loss(&mut cx, router, entries, pad_new_experts)?;
    Ok(g.value(l).item().f64())
}
