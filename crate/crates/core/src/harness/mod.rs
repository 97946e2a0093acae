//! Pretraining and sequential task adaptation for every lifelong method.

pub mod buffers;
pub mod data;
pub mod metrics;
pub mod run;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, Binding, Graph, ParamStore, Snapshot, Tensor};
use crate::config::{Method, RunConfig};
use crate::error::{ensure, Error, Result};
use crate::nn::Fwd;
use crate::policy::{bc_nll_loss_weighted, evaluate, EvalResult, Mixing, Policy, Routing};
use crate::rng::SeedTree;
use crate::router::{cr_loss, cr_loss_value, sparse_coefficients, CoefficientSet, CrEntry, SUBMODULES};

pub use buffers::{er_sample_batch, stratified_sample, CrBuffer, DemoReplayBuffer};
pub use data::{assemble, window_weights, windows, TaskDemos, TaskFeatures, WindowRef};
pub use metrics::{compute_metrics, select_best_checkpoint, BestCheckpoint, Metrics, SuccessMatrix};

/// Seeds of the `episodes` evaluation rollouts of task `k` at checkpoint `c`.
pub fn eval_seeds(run_seed: u64, k: usize, c: usize, episodes: usize) -> Vec<u64> {
    let mut rng = SeedTree::new(run_seed)
        .child("eval")
        .child_index("task", k as u64)
        .stream_index("checkpoint", c as u64);
    (0..episodes).map(|_| rng.random()).collect()
}

fn adamw(config: &RunConfig, lr: f64, weight_decay: f64) -> AdamW<f32> {
    AdamW::new(AdamWConfig {
        lr,
        beta1: config.betas[0],
        beta2: config.betas[1],
        eps: 1e-8,
        weight_decay,
    })
}

fn optimizer_step(
    store: &mut ParamStore<f32>,
    bind: &Binding,
    graph: &Graph<f32>,
    loss: crate::autodiff::Var,
    opt: &mut AdamW<f32>,
    clip: f64,
    lr: f64,
) -> Result<()> {
    let grads = graph.backward(loss)?;
    let mut g = bind.trainable_grads(store, &grads);
    clip_grad_norm(&mut g, clip);
    opt.step(store, &g, lr)
}

/// Loss trace of one training call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Trains every parameter of a fresh policy on the pretraining suite by
/// behaviour cloning, then freezes the base.
pub fn pretrain(config: &RunConfig, suite: &[TaskDemos], seed: u64) -> Result<(Policy, ParamStore<f32>, TrainLog)> {
    ensure!(!suite.is_empty(), "empty pretraining suite");
    let tree = SeedTree::new(seed).child("pretrain");
    let mut store = ParamStore::new();
    let policy = Policy::new(config.policy.clone(), &mut store, &mut tree.stream("init"))?;
    let p = &config.pretrain;
    let t = policy.config.context;
    let mut all = Vec::new();
    for (i, d) in suite.iter().enumerate() {
        all.extend(windows(i, d, t)?);
    }
    let sets: Vec<&TaskDemos> = suite.iter().collect();
    let per_epoch = all.len().div_ceil(p.batch);
    let total = (p.epochs * per_epoch).max(1) as u64;
    let mut opt = adamw(config, p.lr, p.weight_decay);
    let mut log = TrainLog::default();
    for epoch in 0..p.epochs {
        let mut order = all.clone();
        order.shuffle(&mut tree.stream_index("shuffle", epoch as u64));
        let mut sum = 0.0;
        for (i, chunk) in order.chunks(p.batch).enumerate() {
            let (batch, actions) = assemble(&sets, chunk, t)?;
            let rng = tree.child_index("epoch", epoch as u64).stream_index("dropout", i as u64);
            let mut g = Graph::training(rng);
            let mut bind = Binding::new();
            let loss = {
                let mut cx = Fwd::new(&mut g, &store, &mut bind);
                let gmm = policy.forward(&mut cx, &batch, &mut Mixing::Base)?;
                bc_nll_loss_weighted(&mut cx, &gmm, &actions, policy.config.modes, &window_weights(chunk, t)?)?
            };
            sum += g.value(loss).item() as f64;
            let lr = cosine_lr(log.steps as u64, total, p.lr)?;
            optimizer_step(&mut store, &bind, &g, loss, &mut opt, config.grad_clip, lr)?;
            log.steps += 1;
        }
        log.epoch_loss.push(sum / per_epoch as f64);
        log::info!("pretrain epoch {}: loss {:.4}", epoch + 1, sum / per_epoch as f64);
    }
    policy.freeze_base(&mut store);
    policy.library.freeze_base(&mut store);
    Ok((policy, store, log))
}

/// Result of training on one task: snapshots at checkpoint epochs.
#[derive(Clone, Debug)]
pub struct TaskTraining {
    pub checkpoints: Vec<(usize, Snapshot<f32>)>,
    pub log: TrainLog,
}

/// What finalizing a task did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Finalization {
    pub archived: usize,
    /// Full-buffer replay loss before and after consolidation.
    pub cr_before: Option<f64>,
    pub cr_after: Option<f64>,
}

/// Lifelong learner state shared by all methods.
pub struct Learner {
    pub config: RunConfig,
    pub policy: Policy,
    pub store: ParamStore<f32>,
    pub cr: CrBuffer,
    pub replay: DemoReplayBuffer,
    /// Tasks begun so far.
    pub tasks: usize,
    tree: SeedTree,
}

impl Learner {
    /// Starts from a pretrained policy; its base must already be frozen.
    pub fn new(config: RunConfig, policy: Policy, mut store: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        if policy.library.k() != 0 || policy.router.is_some() {
            return Err(Error::contract("lifelong learning must start from a policy without experts"));
        }
        if config.method == Method::Er && config.replay_fraction == 0.0 {
            return Err(Error::Config {
                key: "replay_fraction".into(),
                message: "experience replay needs a positive replay fraction".into(),
            });
        }
        if policy.config != config.policy {
            return Err(Error::Config {
                key: "policy".into(),
                message: "pretrained policy dimensions differ from the run configuration".into(),
            });
        }
        policy.freeze_base(&mut store);
        policy.library.freeze_base(&mut store);
        let tree = SeedTree::new(config.seed).child(config.method.name());
        Ok(Learner {
            cr: CrBuffer::new(config.cr_ratio),
            replay: DemoReplayBuffer::new(config.replay_fraction),
            config,
            policy,
            store,
            tasks: 0,
            tree,
        })
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    /// Grows the library (and router) for task `k` (zero-based).
    pub fn begin_task(&mut self, k: usize) -> Result<()> {
        ensure!(k == self.tasks, "task {k} begun out of order, expected {}", self.tasks);
        let mut rng = self.tree.stream_index("grow", k as u64);
        let grow = match self.method() {
            Method::Dmpel | Method::TailOracle => true,
            Method::SeqftLora | Method::Er => k == 0,
        };
        if grow {
            let id = self.policy.library.k() + 1;
            let g = self.policy.library.add_task(&mut self.store, id, &mut rng)?;
            if g.fallbacks > 0 {
                log::warn!(
                    "task {}: {} expert columns fell back to random directions (span exhausted in {:?})",
                    k + 1,
                    g.fallbacks,
                    g.fallback_layers
                );
            }
        }
        if self.method() == Method::Dmpel {
            if self.policy.router.is_none() {
                self.policy.attach_router(&mut self.store, &mut self.tree.stream("router"));
            }
            let k_new = self.policy.library.k();
            self.policy.router.as_mut().expect("attached").grow(&mut self.store, k_new)?;
        }
        self.tasks += 1;
        Ok(())
    }

    /// Coefficients used for task `j` under fixed routing.
    fn fixed_coefficients(&self, j: usize) -> CoefficientSet<f32> {
        let k = self.policy.library.k();
        match self.method() {
            Method::TailOracle => {
                let mut v = vec![0.0; k];
                v[j] = 1.0;
                CoefficientSet::uniform(v)
            }
            _ => CoefficientSet::uniform(vec![1.0; k]),
        }
    }

    /// How task `j` (zero-based) is routed at evaluation.
    pub fn routing(&self, j: usize) -> Routing<'_> {
        match (self.method(), &self.policy.router) {
            (Method::Dmpel, Some(router)) => Routing::Router {
                router,
                delta: self.config.delta,
            },
            _ => Routing::Fixed(self.fixed_coefficients(j)),
        }
    }

    pub fn evaluate_task(&self, demos: &TaskDemos, j: usize, seeds: &[u64]) -> Result<EvalResult> {
        evaluate(
            &self.policy,
            &self.store,
            &demos.task,
            &self.routing(j),
            seeds,
            self.config.synth_interval,
        )
    }

    /// Router contexts of full-length training windows.
    fn window_contexts(&self, demos: &TaskDemos, refs: &[WindowRef]) -> Result<Vec<Vec<f32>>> {
        let feats = TaskFeatures::compute(&self.policy, &self.store, demos)?;
        let t = self.policy.config.context;
        refs.iter().map(|w| feats.context(demos, w.traj, w.start, w.start + t)).collect()
    }

    /// Trains on task `k`; snapshots trainable parameters every
    /// `eval_every` epochs. Zero epochs leaves everything untouched.
    pub fn train_on_task(&mut self, k: usize, demos: &TaskDemos) -> Result<TaskTraining> {
        ensure!(k + 1 == self.tasks, "train_on_task({k}) before begin_task");
        let c = self.config.clone();
        let t = self.policy.config.context;
        let fresh = windows(0, demos, t)?;
        let contexts = match self.method() {
            Method::Dmpel => self.window_contexts(demos, &fresh)?,
            _ => Vec::new(),
        };
        let replay_slots = match self.method() {
            Method::Er => self.replay.replay_slots(c.batch),
            _ => 0,
        };
        let per_batch = c.batch - replay_slots;
        let per_epoch = fresh.len().div_ceil(per_batch);
        let total = (c.epochs_per_task * per_epoch).max(1) as u64;
        let mut opt = adamw(&c, c.lr, c.weight_decay);
        let tree = self.tree.child_index("task", k as u64);
        let mut out = TaskTraining {
            checkpoints: Vec::new(),
            log: TrainLog::default(),
        };
        let mut order: Vec<usize> = (0..fresh.len()).collect();
        for epoch in 1..=c.epochs_per_task {
            order.shuffle(&mut tree.stream_index("shuffle", epoch as u64));
            let mut sum = 0.0;
            for (i, chunk) in order.chunks(per_batch).enumerate() {
                let mut rng = tree.child_index("epoch", epoch as u64).stream_index("batch", i as u64);
                let refs: Vec<WindowRef> = chunk.iter().map(|&w| fresh[w]).collect();
                let refs = if replay_slots > 0 {
                    er_sample_batch(&self.replay, &refs, refs.len() + replay_slots, &mut rng)
                } else {
                    refs
                };
                let mut sets = vec![demos];
                sets.extend(self.replay.tasks.iter());
                let (batch, actions) = assemble(&sets, &refs, t)?;
                let mut g = Graph::training(tree.child_index("epoch", epoch as u64).stream_index("dropout", i as u64));
                let mut bind = Binding::new();
                let loss = {
                    let mut cx = Fwd::new(&mut g, &self.store, &mut bind);
                    let b = refs.len();
                    let k_lib = self.policy.library.k();
                    let coeffs = match self.method() {
                        Method::Dmpel => {
                            let router = self.policy.router.as_ref().expect("router attached");
                            let ctx: Vec<f32> = chunk.iter().flat_map(|&w| contexts[w].iter().copied()).collect();
                            let r = cx.input(Tensor::new([b, router.d_r], ctx)?);
                            let raw = router.forward(&mut cx, r)?;
                            sparse_coefficients(&mut cx, raw, k_lib, c.delta, c.coefficient_dropout, Some(&mut rng))?
                        }
                        _ => {
                            let set = self.fixed_coefficients(k);
                            (0..SUBMODULES)
                                .map(|s| {
                                    let row = &set.vectors[s];
                                    let data = (0..b).flat_map(|_| row.iter().copied()).collect();
                                    Ok(cx.input(Tensor::new([b, k_lib], data)?))
                                })
                                .collect::<Result<Vec<_>>>()?
                        }
                    };
                    let gmm = self.policy.forward(&mut cx, &batch, &mut Mixing::Factored(coeffs))?;
                    let weights = window_weights(&refs, t)?;
                    let mut loss = bc_nll_loss_weighted(&mut cx, &gmm, &actions, self.policy.config.modes, &weights)?;
                    if self.method() == Method::Dmpel && c.cr_joint && !self.cr.is_empty() {
                        let router = self.policy.router.as_ref().expect("router attached");
                        let entries = self.cr.sample(c.batch, &mut rng);
                        let l = cr_loss(&mut cx, router, &entries, c.cr_pad_new_experts)?;
                        let l = cx.graph.scale(l, c.cr_lambda);
                        loss = cx.graph.add(loss, l)?;
                    }
                    loss
                };
                sum += g.value(loss).item() as f64;
                let lr = cosine_lr(out.log.steps as u64, total, c.lr)?;
                optimizer_step(&mut self.store, &bind, &g, loss, &mut opt, c.grad_clip, lr)?;
                out.log.steps += 1;
            }
            out.log.epoch_loss.push(sum / per_epoch as f64);
            if epoch % c.eval_every == 0 {
                let ids = self.store.trainable_ids();
                out.checkpoints.push((epoch, self.store.snapshot(&ids)));
            }
        }
        Ok(out)
    }

    /// Freezes, archives and consolidates after task `k`'s best checkpoint
    /// has been restored.
    pub fn finalize_task(&mut self, k: usize, demos: &TaskDemos) -> Result<Finalization> {
        let mut fin = Finalization::default();
        match self.method() {
            Method::Dmpel => {
                self.policy.library.freeze_task(&mut self.store, k + 1)?;
                fin.archived = self.archive(k, demos)?;
                if self.config.cr_consolidate && self.config.consolidation_epochs > 0 {
                    let (before, after) = self.consolidate(k)?;
                    fin.cr_before = Some(before);
                    fin.cr_after = Some(after);
                }
            }
            Method::TailOracle => self.policy.library.freeze_task(&mut self.store, k + 1)?,
            Method::Er => self.replay.push(demos.clone(), self.policy.config.context)?,
            Method::SeqftLora => {}
        }
        Ok(fin)
    }

    /// Stores `ceil(ρ · steps)` router input/raw-output pairs of task `k`.
    fn archive(&mut self, k: usize, demos: &TaskDemos) -> Result<usize> {
        let router = self.policy.router.as_ref().expect("router attached");
        let feats = TaskFeatures::compute(&self.policy, &self.store, demos)?;
        let lengths: Vec<usize> = demos.demos.iter().map(|d| d.steps()).collect();
        let n = self.cr.archive_count(lengths.iter().sum());
        let picks = stratified_sample(&lengths, n, &mut self.tree.stream_index("archive", k as u64));
        let t = self.policy.config.context;
        let mut entries = Vec::with_capacity(picks.len());
        for (traj, step) in picks {
            let context = feats.step_context(demos, traj, step, t)?;
            let coeffs = router.route(&self.store, &context)?.to_raw();
            entries.push(CrEntry {
                task: k + 1,
                context,
                coeffs,
            });
        }
        let count = entries.len();
        self.cr.push(entries);
        Ok(count)
    }

    fn buffer_loss(&self) -> Result<f64> {
        let router = self.policy.router.as_ref().expect("router attached");
        let all: Vec<&CrEntry> = self.cr.entries().iter().collect();
        cr_loss_value(&self.store, router, &all, self.config.cr_pad_new_experts)
    }

    /// Router-only replay over the whole buffer; keeps the parameters with
    /// the lowest full-buffer loss seen, the starting point included.
    fn consolidate(&mut self, k: usize) -> Result<(f64, f64)> {
        let c = self.config.clone();
        let ids = self.policy.router.as_ref().expect("router attached").params();
        let before = self.buffer_loss()?;
        let mut best = (before, self.store.snapshot(&ids));
        let n = self.cr.len();
        let per_epoch = n.div_ceil(c.batch);
        let total = (c.consolidation_epochs * per_epoch) as u64;
        let mut opt = adamw(&c, c.lr, c.weight_decay);
        let tree = self.tree.child_index("consolidate", k as u64);
        let mut steps = 0u64;
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..c.consolidation_epochs {
            order.shuffle(&mut tree.stream_index("shuffle", epoch as u64));
            for chunk in order.chunks(c.batch) {
                let router = self.policy.router.as_ref().expect("router attached");
                let entries: Vec<&CrEntry> = chunk.iter().map(|&i| &self.cr.entries()[i]).collect();
                let mut g = Graph::new();
                let mut bind = Binding::new();
                let loss = {
                    let mut cx = Fwd::new(&mut g, &self.store, &mut bind);
                    cr_loss(&mut cx, router, &entries, c.cr_pad_new_experts)?
                };
                let lr = cosine_lr(steps, total, c.lr)?;
                optimizer_step(&mut self.store, &bind, &g, loss, &mut opt, c.grad_clip, lr)?;
                steps += 1;
            }
            let l = self.buffer_loss()?;
            if l < best.0 {
                best = (l, self.store.snapshot(&ids));
            }
        }
        self.store.restore(&best.1);
        Ok((before, best.0))
    }

    /// Total scalars trained during the lifelong phase.
    pub fn lifelong_parameter_count(&self) -> usize {
        let mut ids: Vec<_> = (1..=self.policy.library.k())
            .flat_map(|t| self.policy.library.expert_params(t))
            .collect();
        if let Some(r) = &self.policy.router {
            ids.extend(r.params());
        }
        ids.iter().map(|&id| self.store.get(id).len()).sum()
    }
}

#[cfg(test)]
mod tests;
