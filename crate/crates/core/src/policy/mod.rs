//! Six-submodule behaviour-cloning policy: grid encoder, instruction
//! encoder, proprio encoder, FiLM fusion, causal temporal transformer and a
//! Gaussian-mixture action head. Every adapted linear layer lives in the
//! policy's [`ExpertLibrary`].

mod rollout;

pub use rollout::{evaluate, rollout_episode, Environment, Episode, EvalResult, RouteAudit, Routing, WorldEnv};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::library::{ExpertLibrary, LayerId, Submodule, SynthesisCache};
use crate::nn::{uniform_init, Fwd, LayerNorm, Linear};
use crate::router::{CoefficientSet, Router};
use crate::rng::StreamRng;
use crate::world::{observation_dim, Vocabulary, ACTION_DIM, PROPRIO_DIM};

/// How the GMM mode used for acting is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSelection {
    /// Largest `w_m · N(μ_m; μ_m, σ_m)`.
    WeightedDensity,
    /// Largest `w_m`.
    HighestWeight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub grid: usize,
    pub context: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub film_hidden: usize,
    pub head_hidden: usize,
    pub modes: usize,
    pub min_std: f64,
    pub dropout: f64,
    /// Expert rank for the vision and text encoders.
    pub encoder_rank: usize,
    /// Expert rank everywhere else.
    pub rank: usize,
    pub tune_bias: bool,
    pub mode_selection: ModeSelection,
    pub router_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            grid: 12,
            context: 6,
            d_model: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            film_hidden: 128,
            head_hidden: 128,
            modes: 5,
            min_std: 1e-4,
            dropout: 0.15,
            encoder_rank: 4,
            rank: 4,
            tune_bias: false,
            mode_selection: ModeSelection::WeightedDensity,
            router_hidden: 128,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid", self.grid),
            ("context", self.context),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("film_hidden", self.film_hidden),
            ("head_hidden", self.head_hidden),
            ("modes", self.modes),
            ("encoder_rank", self.encoder_rank),
            ("rank", self.rank),
            ("router_hidden", self.router_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: format!("policy.{key}"),
                    message: "must be positive".into(),
                });
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config {
                key: "policy.heads".into(),
                message: format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            });
        }
        if !(self.min_std > 0.0) {
            return Err(Error::Config {
                key: "policy.min_std".into(),
                message: "must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config {
                key: "policy.dropout".into(),
                message: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        observation_dim(self.grid)
    }

    /// Router input width: visual, instruction and proprio features.
    pub fn context_dim(&self) -> usize {
        2 * self.d_model + PROPRIO_DIM
    }

    pub fn head_out(&self) -> usize {
        self.modes * (1 + 2 * ACTION_DIM)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: LayerId,
    pub k: Linear,
    pub v: LayerId,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Policy {
    pub config: PolicyConfig,
    pub library: ExpertLibrary,
    pub vision1: LayerId,
    pub vision2: LayerId,
    pub embed: ParamId,
    pub text: LayerId,
    pub state: LayerId,
    pub film1: LayerId,
    pub film2: LayerId,
    pub fuse: LayerId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: [LayerId; 3],
    pub router: Option<Router>,
}

/// Per-layer coefficient source for one forward pass.
pub enum Mixing<'a, S: Scalar> {
    /// Base weights only.
    Base,
    /// Six differentiable `[B, k]` coefficient tensors, submodule order.
    Factored(Vec<Var>),
    /// One coefficient set applied through synthesised weights.
    Materialized {
        coeffs: &'a CoefficientSet<S>,
        cache: &'a mut SynthesisCache<S>,
    },
}

/// A batch of observation windows.
#[derive(Clone, Debug)]
pub struct WindowBatch<S> {
    /// `[B, T, obs_dim]`
    pub obs: Tensor<S>,
    pub tokens: Vec<Vec<usize>>,
}

/// Mixture parameters per window position.
#[derive(Clone, Copy, Debug)]
pub struct GmmVars {
    /// `[B, T, M]`
    pub logits: Var,
    /// `[B, T, M·d_a]`, mode-major.
    pub means: Var,
    /// `[B, T, M·d_a]`, each ≥ `min_std`.
    pub stds: Var,
}

/// Concrete mixture parameters of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams<S> {
    pub logits: Vec<S>,
    pub means: Vec<[S; ACTION_DIM]>,
    pub stds: Vec<[S; ACTION_DIM]>,
}

impl Policy {
    pub fn new<S: Scalar>(config: PolicyConfig, store: &mut ParamStore<S>, rng: &mut StreamRng) -> Result<Policy> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let grids = 2 * c.grid * c.grid;
        let mut lib = ExpertLibrary::new(c.tune_bias);
        let mut layer = |lib: &mut ExpertLibrary, store: &mut ParamStore<S>, name: &str, sub: Submodule, i: usize, o: usize| {
            let r = match sub {
                Submodule::Vision | Submodule::Text => c.encoder_rank,
                _ => c.rank,
            };
            lib.add_layer(store, name, sub, i, o, r.min(i).min(o), rng)
        };
        let vision1 = layer(&mut lib, store, "vision.fc1", Submodule::Vision, grids, d)?;
        let vision2 = layer(&mut lib, store, "vision.fc2", Submodule::Vision, d, d)?;
        let text = layer(&mut lib, store, "text.proj", Submodule::Text, d, d)?;
        let state = layer(&mut lib, store, "state.proj", Submodule::State, PROPRIO_DIM, d)?;
        let film1 = layer(&mut lib, store, "fusion.film1", Submodule::Fusion, d, c.film_hidden)?;
        let film2 = layer(&mut lib, store, "fusion.film2", Submodule::Fusion, c.film_hidden, 4 * d)?;
        let fuse = layer(&mut lib, store, "fusion.proj", Submodule::Fusion, 2 * d, d)?;
        let mut qv = Vec::new();
        for l in 0..c.layers {
            let q = layer(&mut lib, store, &format!("transformer{l}.q"), Submodule::Transformer, d, d)?;
            let v = layer(&mut lib, store, &format!("transformer{l}.v"), Submodule::Transformer, d, d)?;
            qv.push((q, v));
        }
        let head = [
            layer(&mut lib, store, "head.fc1", Submodule::Head, d, c.head_hidden)?,
            layer(&mut lib, store, "head.fc2", Submodule::Head, c.head_hidden, c.head_hidden)?,
            layer(&mut lib, store, "head.fc3", Submodule::Head, c.head_hidden, c.head_out())?,
        ];
        let embed = store.add("text.embed", uniform_init(rng, &[Vocabulary::size(), d], 1), true);
        let pos = store.add("transformer.pos", uniform_init(rng, &[c.context, d], d), true);
        let blocks = qv
            .into_iter()
            .enumerate()
            .map(|(l, (q, v))| Block {
                ln1: LayerNorm::new(store, &format!("transformer{l}.ln1"), d),
                q,
                k: Linear::new(store, &format!("transformer{l}.k"), d, d, rng),
                v,
                o: Linear::new(store, &format!("transformer{l}.o"), d, d, rng),
                ln2: LayerNorm::new(store, &format!("transformer{l}.ln2"), d),
                mlp1: Linear::new(store, &format!("transformer{l}.mlp1"), d, c.mlp_hidden, rng),
                mlp2: Linear::new(store, &format!("transformer{l}.mlp2"), c.mlp_hidden, d, rng),
            })
            .collect();
        let ln_f = LayerNorm::new(store, "transformer.ln_f", d);
        Ok(Policy {
            config,
            library: lib,
            vision1,
            vision2,
            embed,
            text,
            state,
            film1,
            film2,
            fuse,
            pos,
            blocks,
            ln_f,
            head,
            router: None,
        })
    }

    /// Every parameter outside the expert library and router.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.library.layers.iter().flat_map(|l| [l.w0, l.b0]).collect();
        v.extend([self.embed, self.pos]);
        for b in &self.blocks {
            v.extend(b.ln1.params());
            v.extend(b.k.params());
            v.extend(b.o.params());
            v.extend(b.ln2.params());
            v.extend(b.mlp1.params());
            v.extend(b.mlp2.params());
        }
        v.extend(self.ln_f.params());
        v
    }

    pub fn freeze_base<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for id in self.base_params() {
            store.set_trainable(id, false);
        }
    }

    fn lin<S: Scalar>(&self, cx: &mut Fwd<'_, S>, id: LayerId, x: Var, mix: &mut Mixing<'_, S>) -> Result<Var> {
        let layer = self.library.layer(id);
        match mix {
            Mixing::Base => layer.forward_factored(cx, x, None),
            Mixing::Factored(c) => layer.forward_factored(cx, x, Some(c[layer.submodule.index()])),
            Mixing::Materialized { coeffs, cache } => {
                let syn = cache.get(cx.store, id, layer, coeffs.get(layer.submodule))?;
                layer.forward_materialized(cx, x, syn)
            }
        }
    }

    fn check_tokens(tokens: &[Vec<usize>]) -> Result<()> {
        let v = Vocabulary::size();
        for (b, seq) in tokens.iter().enumerate() {
            ensure!(!seq.is_empty(), "empty instruction at batch index {b}");
            if let Some(t) = seq.iter().find(|&&t| t >= v) {
                return Err(Error::contract(format!("token id {t} outside vocabulary of {v}")));
            }
        }
        Ok(())
    }

    /// `(f_v [B,T,d], f_l [B,d], f_s [B,T,d])` for a window batch.
    pub fn encode_observation<S: Scalar>(
        &self,
        cx: &mut Fwd<'_, S>,
        batch: &WindowBatch<S>,
        mix: &mut Mixing<'_, S>,
    ) -> Result<(Var, Var, Var)> {
        let c = &self.config;
        let shape = batch.obs.shape();
        if shape.len() != 3 || shape[2] != c.obs_dim() || shape[0] != batch.tokens.len() {
            return Err(Error::ShapeMismatch {
                op: "encode_observation",
                lhs: shape.to_vec(),
                rhs: vec![batch.tokens.len(), c.context, c.obs_dim()],
            });
        }
        Self::check_tokens(&batch.tokens)?;
        let obs = cx.input(batch.obs.clone());
        let grids = 2 * c.grid * c.grid;
        let g = cx.graph.slice_last(obs, 0, grids)?;
        let p = cx.graph.slice_last(obs, grids, PROPRIO_DIM)?;
        let h = self.lin(cx, self.vision1, g, mix)?;
        let h = cx.graph.gelu(h);
        let f_v = self.lin(cx, self.vision2, h, mix)?;
        let table = cx.p(self.embed);
        let e = cx.graph.embedding_mean(table, &batch.tokens)?;
        let f_l = self.lin(cx, self.text, e, mix)?;
        let f_s = self.lin(cx, self.state, p, mix)?;
        Ok((f_v, f_l, f_s))
    }

    /// `x' = γ ⊙ x + β` with `(γ − 1, β)` predicted from the instruction.
    pub fn film_modulate<S: Scalar>(&self, cx: &mut Fwd<'_, S>, x: Var, z: Var, mix: &mut Mixing<'_, S>) -> Result<Var> {
        let width = *cx.graph.shape(x).last().unwrap_or(&0);
        ensure!(width == 2 * self.config.d_model, "FiLM input width {width}");
        let h = self.lin(cx, self.film1, z, mix)?;
        let h = cx.graph.gelu(h);
        let gb = self.lin(cx, self.film2, h, mix)?;
        let gamma = cx.graph.slice_last(gb, 0, width)?;
        let gamma = cx.graph.add_scalar(gamma, 1.0);
        let beta = cx.graph.slice_last(gb, width, width)?;
        film(cx, x, gamma, beta)
    }

    /// Causal transformer over fused tokens `[B, T, d]`.
    pub fn transformer_forward<S: Scalar>(&self, cx: &mut Fwd<'_, S>, x: Var, mix: &mut Mixing<'_, S>) -> Result<Var> {
        let shape = cx.graph.shape(x).to_vec();
        let (t, d) = (shape[1], self.config.d_model);
        if t > self.config.context {
            return Err(Error::contract(format!(
                "sequence of {t} steps exceeds the context of {}",
                self.config.context
            )));
        }
        let pos = cx.p(self.pos);
        let pos = cx.graph.reshape(pos, &[self.config.context * d])?;
        let pos = cx.graph.slice_last(pos, 0, t * d)?;
        let pos = cx.graph.reshape(pos, &[t, d])?;
        let mut x = cx.graph.add_trailing(x, pos)?;
        let p = self.config.dropout;
        for b in &self.blocks {
            let h = b.ln1.forward(cx, x)?;
            let q = self.lin(cx, b.q, h, mix)?;
            let k = b.k.forward(cx, h)?;
            let v = self.lin(cx, b.v, h, mix)?;
            let a = cx.graph.causal_attention(q, k, v, self.config.heads)?;
            let a = b.o.forward(cx, a)?;
            let a = cx.graph.dropout(a, p)?;
            x = cx.graph.add(x, a)?;
            let h = b.ln2.forward(cx, x)?;
            let h = b.mlp1.forward(cx, h)?;
            let h = cx.graph.gelu(h);
            let h = b.mlp2.forward(cx, h)?;
            let h = cx.graph.dropout(h, p)?;
            x = cx.graph.add(x, h)?;
        }
        self.ln_f.forward(cx, x)
    }

    pub fn gmm_forward<S: Scalar>(&self, cx: &mut Fwd<'_, S>, g: Var, mix: &mut Mixing<'_, S>) -> Result<GmmVars> {
        let c = &self.config;
        let h = self.lin(cx, self.head[0], g, mix)?;
        let h = cx.graph.gelu(h);
        let h = self.lin(cx, self.head[1], h, mix)?;
        let h = cx.graph.gelu(h);
        let out = self.lin(cx, self.head[2], h, mix)?;
        let md = c.modes * ACTION_DIM;
        let logits = cx.graph.slice_last(out, 0, c.modes)?;
        let means = cx.graph.slice_last(out, c.modes, md)?;
        let raw = cx.graph.slice_last(out, c.modes + md, md)?;
        let sp = cx.graph.softplus(raw);
        let stds = cx.graph.add_scalar(sp, c.min_std);
        Ok(GmmVars { logits, means, stds })
    }

    /// Full forward pass to per-position mixture parameters.
    pub fn forward<S: Scalar>(&self, cx: &mut Fwd<'_, S>, batch: &WindowBatch<S>, mix: &mut Mixing<'_, S>) -> Result<GmmVars> {
        let (f_v, f_l, f_s) = self.encode_observation(cx, batch, mix)?;
        let x = cx.graph.concat(&[f_v, f_s])?;
        let x = self.film_modulate(cx, x, f_l, mix)?;
        let x = self.lin(cx, self.fuse, x, mix)?;
        let g = self.transformer_forward(cx, x, mix)?;
        self.gmm_forward(cx, g, mix)
    }

    /// Base-encoder features used as the router's view of a window:
    /// per-step visual features `[T, d]`, the instruction feature `[d]`.
    pub fn base_features<S: Scalar>(&self, store: &ParamStore<S>, batch: &WindowBatch<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut g = crate::autodiff::Graph::inference();
        let mut bind = crate::autodiff::Binding::new();
        let mut cx = Fwd::new(&mut g, store, &mut bind);
        let (f_v, f_l, _) = self.encode_observation(&mut cx, batch, &mut Mixing::Base)?;
        Ok((g.value(f_v).clone(), g.value(f_l).clone()))
    }

    pub fn attach_router<S: Scalar>(&mut self, store: &mut ParamStore<S>, rng: &mut StreamRng) {
        self.router = Some(Router::new(store, self.config.context_dim(), self.config.router_hidden, rng));
    }
}

/// `x' = γ ⊙ x + β`; `x: [B, T, n]`, `γ, β: [B, n]`.
pub fn film<S: Scalar>(cx: &mut Fwd<'_, S>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let y = cx.graph.mul_mid(x, gamma)?;
    cx.graph.add_mid(y, beta)
}

/// Mean negative log-likelihood of `actions: [B, T, d_a]` over every
/// window position, via log-sum-exp over modes.
pub fn bc_nll_loss<S: Scalar>(cx: &mut Fwd<'_, S>, gmm: &GmmVars, actions: &Tensor<S>, modes: usize) -> Result<Var> {
    let ll = position_log_likelihood(cx, gmm, actions, modes)?;
    let g = &mut *cx.graph;
    let mean = g.mean_all(ll);
    Ok(g.scale(mean, -1.0))
}

/// Negative log-likelihood averaged with per-position `weights: [B, T]`.
pub fn bc_nll_loss_weighted<S: Scalar>(
    cx: &mut Fwd<'_, S>,
    gmm: &GmmVars,
    actions: &Tensor<S>,
    modes: usize,
    weights: &Tensor<S>,
) -> Result<Var> {
    let ll = position_log_likelihood(cx, gmm, actions, modes)?;
    let total: f64 = weights.data().iter().map(|w| w.f64()).sum();
    if cx.graph.shape(ll) != weights.shape() || !(total > 0.0) {
        return Err(Error::ShapeMismatch {
            op: "bc_nll_loss_weighted",
            lhs: weights.shape().to_vec(),
            rhs: cx.graph.shape(ll).to_vec(),
        });
    }
    let w = cx.input(weights.clone());
    let g = &mut *cx.graph;
    let wl = g.mul(ll, w)?;
    let sum = g.sum_all(wl);
    Ok(g.scale(sum, -1.0 / total))
}

/// Log-likelihood `[B, T]` of each target action under the mixture.
fn position_log_likelihood<S: Scalar>(cx: &mut Fwd<'_, S>, gmm: &GmmVars, actions: &Tensor<S>, modes: usize) -> Result<Var> {
    let shape = actions.shape().to_vec();
    let lshape = cx.graph.shape(gmm.logits).to_vec();
    let mshape = cx.graph.shape(gmm.means).to_vec();
    if shape.len() != 3 || shape[..2] != lshape[..2] || lshape[2] != modes || mshape[2] != modes * shape[2] {
        return Err(Error::ShapeMismatch {
            op: "bc_nll_loss",
            lhs: shape,
            rhs: mshape,
        });
    }
    let (b, t, da) = (shape[0], shape[1], shape[2]);
    let mut rep = Vec::with_capacity(b * t * modes * da);
    for row in actions.data().chunks(da) {
        for _ in 0..modes {
            rep.extend_from_slice(row);
        }
    }
    let a = cx.input(Tensor::new([b, t, modes * da], rep)?);
    let g = &mut *cx.graph;
    let diff = g.sub(a, gmm.means)?;
    let z = g.div(diff, gmm.stds)?;
    let sq = g.square(z);
    let sq = g.scale(sq, -0.5);
    let ls = g.log(gmm.stds);
    let comp = g.sub(sq, ls)?;
    let comp = g.add_scalar(comp, -0.5 * (2.0 * std::f64::consts::PI).ln());
    let comp = g.reshape(comp, &[b, t, modes, da])?;
    let per_mode = g.sum_last(comp);
    let lw = g.log_softmax(gmm.logits);
    let joint = g.add(per_mode, lw)?;
    let ll = g.logsumexp(joint);
    if let Some(bad) = g.value(ll).data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "behaviour-cloning loss".into(),
            index: bad / t,
        });
    }
    Ok(ll)
}

/// Mixture parameters at window position `t` of batch row `b`.
pub fn gmm_at<S: Scalar>(graph: &crate::autodiff::Graph<S>, gmm: &GmmVars, b: usize, t: usize) -> GmmParams<S> {
    let m = graph.shape(gmm.logits)[2];
    let steps = graph.shape(gmm.logits)[1];
    let row = b * steps + t;
    let logits = graph.value(gmm.logits).data()[row * m..(row + 1) * m].to_vec();
    let md = m * ACTION_DIM;
    let get = |v: Var| -> Vec<[S; ACTION_DIM]> {
        graph.value(v).data()[row * md..(row + 1) * md]
            .chunks(ACTION_DIM)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    };
    GmmParams {
        logits,
        means: get(gmm.means),
        stds: get(gmm.stds),
    }
}

/// Mean of the chosen mode; ties go to the lower index.
pub fn select_action<S: Scalar>(gmm: &GmmParams<S>, selection: ModeSelection) -> [S; ACTION_DIM] {
    let mut best = (0, f64::NEG_INFINITY);
    for (m, &l) in gmm.logits.iter().enumerate() {
        // log-softmax normaliser is shared by every mode, so raw logits suffice
        let mut score = l.f64();
        if selection == ModeSelection::WeightedDensity {
            score -= gmm.stds[m].iter().map(|s| s.f64().ln()).sum::<f64>();
        }
        if score > best.1 {
            best = (m, score);
        }
    }
    gmm.means[best.0]
}

#[cfg(test)]
pub(crate) mod tests;
