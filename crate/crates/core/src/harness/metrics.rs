//! Success matrix, earliest-best checkpoint rule and FWT/NBT/AUC.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Earliest best checkpoint of one task and its clamped rate series.
#[derive(Clone, Debug, PartialEq)]
pub struct BestCheckpoint {
    /// Zero-based index into the checkpoint list.
    pub index: usize,
    pub rate: f64,
    pub clamped: Vec<f64>,
}

impl BestCheckpoint {
    pub fn mean(&self) -> f64 {
        self.clamped.iter().sum::<f64>() / self.clamped.len() as f64
    }
}

/// Earliest argmax; entries from it onwards are clamped to the maximum.
pub fn select_best_checkpoint(rates: &[f64]) -> Result<BestCheckpoint> {
    if rates.is_empty() {
        return Err(Error::contract("no checkpoint rates to select from"));
    }
    let mut index = 0;
    for (i, &r) in rates.iter().enumerate() {
        if r > rates[index] {
            index = i;
        }
    }
    let rate = rates[index];
    let clamped = rates.iter().enumerate().map(|(i, &r)| if i >= index { rate } else { r }).collect();
    Ok(BestCheckpoint { index, rate, clamped })
}

/// `s[k][j][c]` success rates of a lifelong run.
///
/// Tasks are zero-based here. Per-checkpoint rates are recorded for the
/// task being trained only; `final_rates[l][k]` is task `k` after training
/// (and finalizing) task `l ≥ k`, with `final_rates[k][k]` the best
/// checkpoint's rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessMatrix {
    pub tasks: usize,
    pub checkpoint_epochs: Vec<usize>,
    /// Raw on-task rates `[k][c]`.
    pub raw_diagonal: Vec<Option<Vec<f64>>>,
    /// On-task rates with the clamping rule applied `[k][c]`.
    pub diagonal: Vec<Option<Vec<f64>>>,
    pub best_checkpoint: Vec<Option<usize>>,
    /// Lower triangle `[l][k]`, `k ≤ l`.
    pub final_rates: Vec<Vec<Option<f64>>>,
}

impl SuccessMatrix {
    pub fn new(tasks: usize, checkpoint_epochs: Vec<usize>) -> Self {
        SuccessMatrix {
            tasks,
            checkpoint_epochs,
            raw_diagonal: vec![None; tasks],
            diagonal: vec![None; tasks],
            best_checkpoint: vec![None; tasks],
            final_rates: (0..tasks).map(|l| vec![None; l + 1]).collect(),
        }
    }

    /// Records task `k`'s checkpoint rates; returns the selected checkpoint.
    pub fn record_checkpoints(&mut self, k: usize, rates: &[f64]) -> Result<BestCheckpoint> {
        if rates.len() != self.checkpoint_epochs.len() {
            return Err(Error::contract(format!(
                "{} checkpoint rates for {} checkpoints",
                rates.len(),
                self.checkpoint_epochs.len()
            )));
        }
        check_rates(rates)?;
        let best = select_best_checkpoint(rates)?;
        self.raw_diagonal[k] = Some(rates.to_vec());
        self.diagonal[k] = Some(best.clamped.clone());
        self.best_checkpoint[k] = Some(best.index);
        self.final_rates[k][k] = Some(best.rate);
        Ok(best)
    }

    pub fn record_final(&mut self, l: usize, k: usize, rate: f64) -> Result<()> {
        if k >= l || l >= self.tasks {
            return Err(Error::contract(format!("no off-diagonal entry ({l}, {k})")));
        }
        check_rates(&[rate])?;
        self.final_rates[l][k] = Some(rate);
        Ok(())
    }

    /// Unfilled entries as `(k, j, checkpoint)`, one-based, with `final`
    /// for end-of-task evaluations.
    pub fn missing(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in 0..self.tasks {
            if self.diagonal[k].is_none() {
                out.extend(self.checkpoint_epochs.iter().map(|c| format!("({}, {}, epoch {c})", k + 1, k + 1)));
            }
            for j in 0..=k {
                if self.final_rates[k][j].is_none() {
                    out.push(format!("({}, {}, final)", k + 1, j + 1));
                }
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn check_rates(rates: &[f64]) -> Result<()> {
    match rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        Some(r) => Err(Error::contract(format!("success rate {r} outside [0, 1]"))),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
}

/// Forward transfer, negative backward transfer (averaged over the first
/// `K − 1` tasks; zero for a single task) and area under the success curve.
pub fn compute_metrics(m: &SuccessMatrix) -> Result<Metrics> {
    let missing = m.missing();
    if !missing.is_empty() {
        return Err(Error::IncompleteMatrix(missing.join(", ")));
    }
    let kk = m.tasks;
    if kk == 0 {
        return Err(Error::IncompleteMatrix("matrix has no tasks".into()));
    }
    let s = |l: usize, k: usize| m.final_rates[l][k].expect("complete");
    let diag_mean = |k: usize| {
        let d = m.diagonal[k].as_ref().expect("complete");
        d.iter().sum::<f64>() / d.len() as f64
    };
    let fwt = (0..kk).map(diag_mean).sum::<f64>() / kk as f64;
    let nbt = if kk == 1 {
        0.0
    } else {
        (0..kk - 1)
            .map(|k| (k + 1..kk).map(|l| s(k, k) - s(l, k)).sum::<f64>() / (kk - 1 - k) as f64)
            .sum::<f64>()
            / (kk - 1) as f64
    };
    let auc = (0..kk)
        .map(|k| (diag_mean(k) + (k + 1..kk).map(|l| s(l, k)).sum::<f64>()) / (kk - k) as f64)
        .sum::<f64>()
        / kk as f64;
    Ok(Metrics { fwt, nbt, auc })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn two_task() -> SuccessMatrix {
        let mut m = SuccessMatrix::new(2, vec![2, 4]);
        m.record_checkpoints(0, &[0.5, 0.7]).unwrap();
        m.record_checkpoints(1, &[0.4, 0.8]).unwrap();
        m.record_final(1, 0, 0.6).unwrap();
        m
    }

    #[test]
    fn checkpoint_rule_examples() {
        let b = select_best_checkpoint(&[0.5, 0.7]).unwrap();
        assert_eq!((b.index, b.rate), (1, 0.7));
        assert!((b.mean() - 0.6).abs() < 1e-12);
        let b = select_best_checkpoint(&[0.8, 0.6]).unwrap();
        assert_eq!((b.index, b.clamped.clone()), (0, vec![0.8, 0.8]));
        assert!((b.mean() - 0.8).abs() < 1e-12);
        assert_eq!(select_best_checkpoint(&[0.3; 4]).unwrap().index, 0);
        assert!(select_best_checkpoint(&[]).is_err());
    }

    #[test]
    fn hand_evaluated_metrics() {
        let r = compute_metrics(&two_task()).unwrap();
        assert!((r.fwt - 0.6).abs() < 1e-12);
        assert!((r.nbt - 0.1).abs() < 1e-12);
        assert!((r.auc - 0.6).abs() < 1e-12);
    }

    #[test]
    fn incomplete_matrix_lists_entries() {
        let mut m = SuccessMatrix::new(2, vec![2, 4]);
        m.record_checkpoints(0, &[0.5, 0.7]).unwrap();
        match compute_metrics(&m) {
            Err(Error::IncompleteMatrix(s)) => {
                assert!(s.contains("(2, 2, epoch 4)") && s.contains("(2, 1, final)"), "{s}");
            }
            other => panic!("{other:?}"),
        }
        assert!(m.record_checkpoints(1, &[1.5, 0.0]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = two_task();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.write(&p).unwrap();
        assert_eq!(SuccessMatrix::read(&p).unwrap(), m);
    }

    fn random_matrix(k: usize, c: usize, vals: &[f64], forget: bool) -> SuccessMatrix {
        let mut m = SuccessMatrix::new(k, (1..=c).collect());
        let mut it = vals.iter().cycle();
        for t in 0..k {
            let rates: Vec<f64> = (0..c).map(|_| *it.next().unwrap()).collect();
            m.record_checkpoints(t, &rates).unwrap();
        }
        for l in 0..k {
            for t in 0..l {
                let v = if forget { *it.next().unwrap() } else { m.final_rates[t][t].unwrap() };
                m.record_final(l, t, v).unwrap();
            }
        }
        m
    }

    proptest! {
        #[test]
        fn metrics_stay_in_range(k in 1usize..6, c in 1usize..5, vals in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let r = compute_metrics(&random_matrix(k, c, &vals, true)).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.fwt));
            prop_assert!((0.0..=1.0).contains(&r.auc));
            prop_assert!((-1.0..=1.0).contains(&r.nbt));
        }

        #[test]
        fn no_forgetting_gives_zero_nbt(k in 1usize..6, c in 1usize..5, vals in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let r = compute_metrics(&random_matrix(k, c, &vals, false)).unwrap();
            prop_assert_eq!(r.nbt, 0.0);
        }
    }

    #[test]
    fn all_ones_matrix() {
        let r = compute_metrics(&random_matrix(4, 3, &[1.0], false)).unwrap();
        assert_eq!((r.fwt, r.nbt, r.auc), (1.0, 0.0, 1.0));
    }
}
