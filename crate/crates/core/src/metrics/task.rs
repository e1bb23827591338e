//! Perplexity, token accuracy and sequence exact-match over non-pad targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PAD;
use crate::numerics::{Real, Tensor};

/// Running sums behind [`TaskMetrics`]; merge per batch, finish once.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TaskTally {
    pub nll: f64,
    pub tokens: u64,
    pub correct: u64,
    pub sequences: u64,
    pub exact: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub perplexity: f64,
    pub accuracy: f64,
    pub exact_match: f64,
    pub tokens: u64,
}

impl TaskTally {
    /// Adds `[rows, V]` logits whose rows are `seq_len` consecutive positions
    /// per sequence.
    pub fn add<T: Real>(&mut self, logits: &Tensor<T>, targets: &[usize], seq_len: usize) -> Result<()> {
        if logits.rank() != 2 || logits.shape()[0] != targets.len() {
            return Err(Error::shape("task_metrics", logits.shape(), &[targets.len()]));
        }
        if seq_len == 0 || targets.len() % seq_len != 0 {
            return Err(Error::contract(format!("{} targets do not split into sequences of {seq_len}", targets.len())));
        }
        let v = logits.shape()[1];
        for (seq_rows, seq_targets) in targets.chunks(seq_len).enumerate() {
            let mut all_right = true;
            let mut counted = false;
            for (j, &t) in seq_targets.iter().enumerate() {
                if t == PAD {
                    continue;
                }
                if t >= v {
                    return Err(Error::Index { op: "task_metrics", index: t, extent: v });
                }
                let row: Vec<f64> =
                    logits.row(seq_rows * seq_len + j).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                self.nll += lse - row[t];
                let mut arg = 0;
                for (c, &x) in row.iter().enumerate() {
                    if x > row[arg] {
                        arg = c;
                    }
                }
                self.tokens += 1;
                counted = true;
                if arg == t {
                    self.correct += 1;
                } else {
                    all_right = false;
                }
            }
            if counted {
                self.sequences += 1;
                if all_right {
                    self.exact += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &TaskTally) {
        self.nll += other.nll;
        self.tokens += other.tokens;
        self.correct += other.correct;
        self.sequences += other.sequences;
        self.exact += other.exact;
    }

    pub fn finish(&self) -> TaskMetrics {
        let t = self.tokens.max(1) as f64;
        TaskMetrics {
            perplexity: (self.nll / t).exp(),
            accuracy: self.correct as f64 / t,
            exact_match: self.exact as f64 / self.sequences.max(1) as f64,
            tokens: self.tokens,
        }
    }
}

pub fn task_metrics<T: Real>(logits: &Tensor<T>, targets: &[usize], seq_len: usize) -> Result<TaskMetrics> {
    let mut tally = TaskTally::default();
    tally.add(logits, targets, seq_len)?;
    Ok(tally.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_perplexity_is_vocab() {
        let logits = Tensor::<f64>::zeros(&[6, 9]);
        let m = task_metrics(&logits, &[3, 4, 5, 6, 7, 8], 3).unwrap();
        assert!((m.perplexity - 9.0).abs() < 1e-9);
    }

    fn confident(targets: &[usize], vocab: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[targets.len(), vocab]);
        for (i, &c) in targets.iter().enumerate() {
            t.data_mut()[i * vocab + c] = 50.0;
        }
        t
    }

    #[test]
    fn perfect_predictions() {
        let targets = [3, 4, 2, 5, 3, 2];
        let m = task_metrics(&confident(&targets, 6), &targets, 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.exact_match, 1.0);
    }

    #[test]
    fn half_right_and_pads_ignored() {
        let targets = [3, 4, 5, 0, 3, 4, 5, 0];
        let predicted = [3, 4, 5, 3, 4, 3, 3, 3];
        let m = task_metrics(&confident(&predicted, 6), &targets, 4).unwrap();
        assert_eq!(m.tokens, 6);
        assert!((m.accuracy - 0.5).abs() < 1e-12);
        assert!((m.exact_match - 0.5).abs() < 1e-12);
    }
}
