//! Run configuration: strict JSON with defaults for every omitted key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::world::Family;

/// Lifelong learning method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dmpel,
    SeqftLora,
    Er,
    TailOracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dmpel, Method::SeqftLora, Method::Er, Method::TailOracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dmpel => "dmpel",
            Method::SeqftLora => "seqft_lora",
            Method::Er => "er",
            Method::TailOracle => "tail_oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config {
                key: "method".into(),
                message: format!("unknown method {s:?}"),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub tasks: usize,
    pub demos_per_task: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_episodes: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            tasks: 30,
            demos_per_task: 20,
            epochs: 20,
            batch: 32,
            lr: 1e-3,
            weight_decay: 0.1,
            eval_episodes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Lifelong suite file; generated from `family`/`num_tasks` when absent.
    pub suite: Option<PathBuf>,
    pub family: Family,
    pub num_tasks: usize,
    /// Seed of the suite and of the pretraining run, shared across run seeds.
    pub suite_seed: u64,
    pub method: Method,
    pub epochs_per_task: usize,
    pub eval_every: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub delta: usize,
    pub coefficient_dropout: f64,
    pub cr_ratio: f64,
    pub cr_lambda: f64,
    /// Coefficient replay inside new-task training.
    pub cr_joint: bool,
    /// Router-only replay phase after each task.
    pub cr_consolidate: bool,
    /// Compare experts added after archiving against zero.
    pub cr_pad_new_experts: bool,
    pub consolidation_epochs: usize,
    pub synth_interval: usize,
    pub eval_episodes: usize,
    pub demos_per_task: usize,
    pub replay_fraction: f64,
    pub pretrain: PretrainConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            suite: None,
            family: Family::Goal,
            num_tasks: 5,
            suite_seed: 0,
            method: Method::Dmpel,
            epochs_per_task: 10,
            eval_every: 2,
            batch: 32,
            lr: 1e-4,
            betas: [0.9, 0.999],
            weight_decay: 0.1,
            grad_clip: 100.0,
            delta: 3,
            coefficient_dropout: 0.15,
            cr_ratio: 0.05,
            cr_lambda: 1.0,
            cr_joint: true,
            cr_consolidate: true,
            cr_pad_new_experts: true,
            consolidation_epochs: 10,
            synth_interval: 1,
            eval_episodes: 20,
            demos_per_task: 20,
            replay_fraction: 0.2,
            pretrain: PretrainConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

fn bad(key: &str, message: &str) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tasks", self.num_tasks),
            ("eval_every", self.eval_every),
            ("batch", self.batch),
            ("delta", self.delta),
            ("synth_interval", self.synth_interval),
            ("eval_episodes", self.eval_episodes),
            ("demos_per_task", self.demos_per_task),
            ("pretrain.tasks", self.pretrain.tasks),
            ("pretrain.demos_per_task", self.pretrain.demos_per_task),
            ("pretrain.batch", self.pretrain.batch),
            ("pretrain.eval_episodes", self.pretrain.eval_episodes),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(bad(key, "must be positive"));
        }
        let positive_f = [("lr", self.lr), ("grad_clip", self.grad_clip), ("pretrain.lr", self.pretrain.lr)];
        if let Some((key, _)) = positive_f.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(bad(key, "must be positive and finite"));
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("cr_lambda", self.cr_lambda),
            ("pretrain.weight_decay", self.pretrain.weight_decay),
        ];
        if let Some((key, _)) = non_negative.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(bad(key, "must be non-negative and finite"));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(bad(&format!("betas[{i}]"), "must lie in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.coefficient_dropout) {
            return Err(bad("coefficient_dropout", "must lie in [0, 1)"));
        }
        if !(self.cr_ratio > 0.0 && self.cr_ratio <= 1.0) {
            return Err(bad("cr_ratio", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.replay_fraction) {
            return Err(bad("replay_fraction", "must lie in [0, 1)"));
        }
        self.policy.validate()
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            // serde names the offending field inside backticks
            let key = msg.split('`').nth(1).unwrap_or("<document>").to_string();
            Error::Config { key, message: msg }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checkpoint epochs, e.g. `[2, 4, 6, 8, 10]`.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        (1..=self.epochs_per_task).filter(|e| e % self.eval_every == 0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(r: Result<RunConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().checkpoint_epochs(), vec![2, 4, 6, 8, 10]);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(RunConfig::from_json(r#"{"delta": 0}"#)), "delta");
        assert_eq!(key_of(RunConfig::from_json(r#"{"foo": 1}"#)), "foo");
        assert_eq!(key_of(RunConfig::from_json(r#"{"policy": {"bar": 1}}"#)), "bar");
        assert_eq!(key_of(RunConfig::from_json(r#"{"policy": {"heads": 0}}"#)), "policy.heads");
        assert_eq!(key_of(RunConfig::from_json(r#"{"cr_ratio": 1.5}"#)), "cr_ratio");
        assert_eq!(key_of(RunConfig::from_json(r#"{"lr": -1}"#)), "lr");
        assert!(RunConfig::from_json("{").is_err());
    }

    #[test]
    fn methods_parse_by_name() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!(Method::parse("ewc").is_err());
    }
}
