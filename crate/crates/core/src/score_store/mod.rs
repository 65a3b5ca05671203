//! Score matrices, their on-disk formats, and the transforms every other
//! module builds on (softmax at a temperature, per-row sorting, seeded
//! splits).

mod io;
mod sorted;

pub use io::{
    load_scores, read_binary, read_csv, save_scores, write_binary, write_csv, FileFormat,
};
pub use sorted::{sort_scores, SortedRow, SortedScores};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, stream};

/// Rows whose sum is this close to one are accepted unchanged.
pub const SUM_TOLERANCE: f64 = 1e-6;
/// Rows within this distance of one are renormalized; beyond it they are rejected.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Logits,
    Probabilities,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Logits => "logits",
            ScoreKind::Probabilities => "probabilities",
        }
    }
}

/// `n × K` class scores (row-major) with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    classes: usize,
    scores: Vec<f64>,
    labels: Vec<usize>,
    kind: ScoreKind,
}

impl ScoreMatrix {
    /// Validates and builds a matrix. Probability rows off by more than
    /// [`SUM_TOLERANCE`] but within [`RENORMALIZE_TOLERANCE`] are divided by
    /// their sum.
    pub fn new(
        classes: usize,
        mut scores: Vec<f64>,
        labels: Vec<usize>,
        kind: ScoreKind,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        let n = labels.len();
        if scores.len() != n * classes {
            return Err(Error::RowLength {
                row: scores.len() / classes,
                expected: classes,
                found: scores.len() % classes,
            });
        }
        for (row, (chunk, &label)) in scores.chunks_exact_mut(classes).zip(&labels).enumerate() {
            if let Some(col) = chunk.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: label as i64,
                    classes,
                });
            }
            if kind == ScoreKind::Probabilities {
                normalize_probability_row(row, chunk)?;
            }
        }
        Ok(Self {
            classes,
            scores,
            labels,
            kind,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.scores.chunks_exact(self.classes)
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> ScoreMatrix {
        let mut scores = Vec::with_capacity(indices.len() * self.classes);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            scores.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        ScoreMatrix {
            classes: self.classes,
            scores,
            labels,
            kind: self.kind,
        }
    }

    /// Fraction of rows whose label is among the `k` highest scores
    /// (ties counted in the label's favor).
    pub fn top_k_accuracy(&self, k: usize) -> f64 {
        let hits = self
            .rows()
            .zip(&self.labels)
            .filter(|(row, &label)| {
                let target = row[label];
                row.iter().filter(|&&v| v > target).count() < k
            })
            .count();
        hits as f64 / self.n() as f64
    }
}

fn normalize_probability_row(row: usize, values: &mut [f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidProbabilities {
            row,
            reason: format!("entry {v} outside [0, 1]"),
        });
    }
    let sum: f64 = values.iter().sum();
    let gap = (sum - 1.0).abs();
    if gap <= SUM_TOLERANCE {
        return Ok(());
    }
    if gap <= RENORMALIZE_TOLERANCE {
        values.iter_mut().for_each(|v| *v /= sum);
        return Ok(());
    }
    Err(Error::InvalidProbabilities {
        row,
        reason: format!("row sums to {sum}"),
    })
}

/// Softmax of every row at `temperature`, stabilized by subtracting the row max.
pub fn softmax(m: &ScoreMatrix, temperature: f64) -> Result<ScoreMatrix> {
    if m.kind != ScoreKind::Logits {
        return Err(Error::WrongKind { expected: "logit" });
    }
    check_temperature(temperature)?;
    let mut scores = Vec::with_capacity(m.scores.len());
    for row in m.rows() {
        let start = scores.len();
        softmax_row_into(row, temperature, &mut scores);
        debug_assert_eq!(scores.len() - start, m.classes);
    }
    Ok(ScoreMatrix {
        classes: m.classes,
        scores,
        labels: m.labels.clone(),
        kind: ScoreKind::Probabilities,
    })
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(())
}

pub(crate) fn softmax_row_into(row: &[f64], temperature: f64, out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &v in row {
        let e = ((v - max) / temperature).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= total);
}

/// Partition sizes for the tuning, calibration and evaluation splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub tune: usize,
    pub calibration: usize,
    pub evaluation: usize,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.tune + self.calibration + self.evaluation
    }

    /// Row indices of the three partitions, from one seeded Fisher-Yates shuffle.
    pub fn indices(&self, n: usize) -> Result<[Vec<usize>; 3]> {
        if self.total() > n {
            return Err(Error::InfeasibleSplit {
                requested: self.total(),
                available: n,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeding::rng(self.seed, &[stream::SPLIT]));
        let tune = order[..self.tune].to_vec();
        let cal = order[self.tune..self.tune + self.calibration].to_vec();
        let eval = order[self.tune + self.calibration..self.total()].to_vec();
        Ok([tune, cal, eval])
    }
}

/// Splits `m` into disjoint tuning, calibration and evaluation matrices.
/// A zero-sized partition is returned as `None`, since a matrix needs at
/// least one row.
pub fn split(m: &ScoreMatrix, spec: &SplitSpec) -> Result<[Option<ScoreMatrix>; 3]> {
    let parts = spec.indices(m.n())?;
    Ok(parts.map(|idx| (!idx.is_empty()).then(|| m.select(&idx))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]], labels: &[usize]) -> ScoreMatrix {
        let k = rows[0].len();
        ScoreMatrix::new(k, rows.concat(), labels.to_vec(), ScoreKind::Probabilities).unwrap()
    }

    #[test]
    fn rejects_label_out_of_range() {
        let err = ScoreMatrix::new(
            2,
            vec![0.5, 0.5, 0.1, 0.9],
            vec![0, 2],
            ScoreKind::Probabilities,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                row: 1,
                label: 2,
                ..
            }
        ));
        assert!(err.to_string().contains("label out of range at row 1"));
    }

    #[test]
    fn renormalizes_small_drift_and_rejects_large() {
        let m = probs(&[&[0.5004, 0.5]], &[0]);
        let sum: f64 = m.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        assert!(m.row(0)[0] > m.row(0)[1]);

        let exact = probs(&[&[0.6, 0.4000001]], &[0]);
        assert_eq!(exact.row(0), &[0.6, 0.4000001]);

        let err =
            ScoreMatrix::new(2, vec![0.6, 0.6], vec![0], ScoreKind::Probabilities).unwrap_err();
        assert!(matches!(err, Error::InvalidProbabilities { row: 0, .. }));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let err = ScoreMatrix::new(2, vec![0.0, f64::NAN], vec![1], ScoreKind::Logits).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 1 }));
        assert!(matches!(
            ScoreMatrix::new(2, vec![], vec![], ScoreKind::Logits),
            Err(Error::EmptyMatrix)
        ));
    }

    #[test]
    fn softmax_hand_values() {
        let logits = |row: Vec<f64>| ScoreMatrix::new(2, row, vec![0], ScoreKind::Logits).unwrap();
        let p = softmax(&logits(vec![0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);

        let p = softmax(&logits(vec![2.0, 0.0]), 1e6).unwrap();
        assert!(p.row(0).iter().all(|v| (v - 0.5).abs() < 1e-5));

        let p = softmax(&logits(vec![3f64.ln(), 0.0]), 1.0).unwrap();
        assert!((p.row(0)[0] - 0.75).abs() < 1e-12);
        assert!((p.row(0)[1] - 0.25).abs() < 1e-12);
        assert_eq!(p.kind(), ScoreKind::Probabilities);
    }

    #[test]
    fn softmax_rejects_bad_temperature_and_kind() {
        let m = ScoreMatrix::new(2, vec![1.0, 0.0], vec![0], ScoreKind::Logits).unwrap();
        assert!(softmax(&m, 0.0).is_err());
        assert!(softmax(&m, -1.0).is_err());
        let p = softmax(&m, 1.0).unwrap();
        assert!(matches!(softmax(&p, 1.0), Err(Error::WrongKind { .. })));
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let m =
            ScoreMatrix::new(3, vec![1000.0, 999.0, -1000.0], vec![0], ScoreKind::Logits).unwrap();
        let p = softmax(&m, 1.0).unwrap();
        assert!(p.row(0).iter().all(|v| v.is_finite()));
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_and_is_deterministic() {
        let spec = SplitSpec {
            seed: 7,
            tune: 2,
            calibration: 4,
            evaluation: 4,
        };
        let [a, b, c] = spec.indices(10).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(spec.indices(10).unwrap(), [a, b, c]);
    }

    #[test]
    fn split_rejects_infeasible_sizes() {
        let spec = SplitSpec {
            seed: 0,
            tune: 5,
            calibration: 5,
            evaluation: 5,
        };
        assert!(matches!(
            spec.indices(10),
            Err(Error::InfeasibleSplit {
                requested: 15,
                available: 10
            })
        ));
    }

    #[test]
    fn split_seeds_differ() {
        let a = SplitSpec {
            seed: 1,
            tune: 0,
            calibration: 50,
            evaluation: 50,
        };
        let b = SplitSpec { seed: 2, ..a };
        assert_ne!(a.indices(100).unwrap(), b.indices(100).unwrap());
    }

    #[test]
    fn split_matrices_follow_indices() {
        let rows: Vec<f64> = (0..10).flat_map(|i| [i as f64, 0.0]).collect();
        let m = ScoreMatrix::new(2, rows, vec![0; 10], ScoreKind::Logits).unwrap();
        let spec = SplitSpec {
            seed: 3,
            tune: 0,
            calibration: 3,
            evaluation: 7,
        };
        let [t, c, e] = split(&m, &spec).unwrap();
        assert!(t.is_none());
        let [_, ci, ei] = spec.indices(10).unwrap();
        let c = c.unwrap();
        let e = e.unwrap();
        for (j, &i) in ci.iter().enumerate() {
            assert_eq!(c.row(j)[0], i as f64);
        }
        assert_eq!(e.n(), ei.len());
    }

    #[test]
    fn top_k_accuracy_counts() {
        let m = probs(
            &[&[0.6, 0.3, 0.1], &[0.2, 0.5, 0.3], &[0.1, 0.1, 0.8]],
            &[0, 2, 0],
        );
        assert!((m.top_k_accuracy(1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.top_k_accuracy(2), 1.0);
        assert_eq!(m.top_k_accuracy(3), 1.0);
    }
}
