//! Evaluation metrics: marginal coverage and size, size-stratified coverage
//! violation (SSCV), size-stratified and difficulty-stratified tables,
//! set-size histograms, and multi-trial aggregation.

mod trials;

pub use trials::{
    median, run_trial, run_trials, sweep, MethodAggregate, MethodPlan, Platt, Protocol, RapsPolicy,
    SweepGrid, TrialAggregate, TrialMetrics, TrialOutput, SWEEP_K_REGS, SWEEP_LAMBDAS,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalModel, PredictionSet};
use crate::error::{Error, Result};
use crate::score_store::SortedScores;
use crate::seeding::UStream;

/// Inclusive integer range `lo..=hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRange {
    pub lo: usize,
    pub hi: usize,
}

impl SizeRange {
    pub fn contains(&self, v: usize) -> bool {
        self.lo <= v && v <= self.hi
    }
}

impl fmt::Display for SizeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{} to {}", self.lo, self.hi)
        }
    }
}

/// Disjoint inclusive ranges used both for set-size strata and for
/// difficulty bins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strata(Vec<SizeRange>);

impl Strata {
    pub fn new(mut ranges: Vec<SizeRange>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidParameter("strata list is empty".into()));
        }
        ranges.sort_by_key(|r| r.lo);
        for r in &ranges {
            if r.lo > r.hi {
                return Err(Error::InvalidParameter(format!(
                    "empty range {}-{}",
                    r.lo, r.hi
                )));
            }
        }
        for w in ranges.windows(2) {
            if w[1].lo <= w[0].hi {
                return Err(Error::InvalidParameter(format!(
                    "overlapping ranges {} and {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self(ranges))
    }

    /// Set-size strata 0-1, 2-3, 4-10, 11-100, 101-1000.
    pub fn default_sizes() -> Self {
        "0-1,2-3,4-10,11-100,101-1000"
            .parse()
            .expect("valid literal")
    }

    /// Difficulty bins 1, 2-3, 4-6, 7-10, 11-100, 101-1000.
    pub fn default_difficulty() -> Self {
        "1,2-3,4-6,7-10,11-100,101-1000"
            .parse()
            .expect("valid literal")
    }

    /// Strata widened so the last range reaches at least `classes`.
    pub fn covering(&self, classes: usize) -> Self {
        let mut ranges = self.0.clone();
        if let Some(last) = ranges.last_mut() {
            last.hi = last.hi.max(classes);
        }
        Self(ranges)
    }

    pub fn ranges(&self) -> &[SizeRange] {
        &self.0
    }

    pub fn locate(&self, v: usize) -> Option<usize> {
        self.0.iter().position(|r| r.contains(v))
    }
}

impl FromStr for Strata {
    type Err = Error;

    /// Parses `"0-1,2-3,4-10"`; a bare number is a one-element range.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |part: &str| Error::InvalidParameter(format!("bad range {part:?}"));
        let ranges = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|part| {
                let (lo, hi) = part.split_once('-').unwrap_or((part, part));
                let lo = lo.trim().parse().map_err(|_| bad(part))?;
                let hi = hi.trim().parse().map_err(|_| bad(part))?;
                Ok(SizeRange { lo, hi })
            })
            .collect::<Result<Vec<_>>>()?;
        Strata::new(ranges)
    }
}

impl fmt::Display for Strata {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|r| {
                if r.lo == r.hi {
                    r.lo.to_string()
                } else {
                    format!("{}-{}", r.lo, r.hi)
                }
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Size of one prediction set and whether it contains the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetOutcome {
    pub size: usize,
    pub covered: bool,
}

pub fn outcomes_from_sets(sets: &[PredictionSet], labels: &[usize]) -> Result<Vec<SetOutcome>> {
    if sets.len() != labels.len() {
        return Err(Error::LengthMismatch {
            sets: sets.len(),
            labels: labels.len(),
        });
    }
    Ok(sets
        .iter()
        .zip(labels)
        .map(|(set, &label)| SetOutcome {
            size: set.len(),
            covered: set.contains(label),
        })
        .collect())
}

/// Outcomes of `model` on every row of `ss`. All sets are prefixes of the
/// ranking, so a row is covered iff its label rank is within the set size.
pub fn outcomes(model: &ConformalModel, ss: &SortedScores, us: UStream) -> Result<Vec<SetOutcome>> {
    let sizes = model.sizes_all(ss, us)?;
    Ok(sizes
        .into_iter()
        .zip(ss.label_ranks())
        .map(|(size, &rank)| SetOutcome {
            size,
            covered: rank <= size,
        })
        .collect())
}

fn marginal(outcomes: &[SetOutcome]) -> (f64, f64) {
    let n = outcomes.len() as f64;
    let covered = outcomes.iter().filter(|o| o.covered).count() as f64;
    let total: usize = outcomes.iter().map(|o| o.size).sum();
    (covered / n, total as f64 / n)
}

/// Fraction of sets containing their label and mean set size.
pub fn coverage_and_size(sets: &[PredictionSet], labels: &[usize]) -> Result<(f64, f64)> {
    let outcomes = outcomes_from_sets(sets, labels)?;
    if outcomes.is_empty() {
        return Ok((0.0, 0.0));
    }
    Ok(marginal(&outcomes))
}

/// Coverage tally for one stratum; `coverage` is `None` when it is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StratumRow {
    pub range: SizeRange,
    pub count: usize,
    pub covered: usize,
}

impl StratumRow {
    pub fn coverage(&self) -> Option<f64> {
        (self.count > 0).then(|| self.covered as f64 / self.count as f64)
    }
}

pub fn stratify_by_size(outcomes: &[SetOutcome], strata: &Strata) -> Result<Vec<StratumRow>> {
    let mut rows: Vec<StratumRow> = strata
        .ranges()
        .iter()
        .map(|&range| StratumRow {
            range,
            count: 0,
            covered: 0,
        })
        .collect();
    for o in outcomes {
        let j = strata
            .locate(o.size)
            .ok_or(Error::UncoveredSize { size: o.size })?;
        rows[j].count += 1;
        rows[j].covered += usize::from(o.covered);
    }
    Ok(rows)
}

/// Worst absolute deviation from `1 - alpha` of coverage within nonempty strata.
pub fn sscv_from_rows(rows: &[StratumRow], alpha: f64) -> f64 {
    rows.iter()
        .filter_map(StratumRow::coverage)
        .map(|c| (c - (1.0 - alpha)).abs())
        .fold(0.0, f64::max)
}

pub fn sscv_from_outcomes(outcomes: &[SetOutcome], strata: &Strata, alpha: f64) -> Result<f64> {
    Ok(sscv_from_rows(&stratify_by_size(outcomes, strata)?, alpha))
}

/// Size-stratified coverage violation of `sets`.
pub fn sscv(sets: &[PredictionSet], labels: &[usize], strata: &Strata, alpha: f64) -> Result<f64> {
    sscv_from_outcomes(&outcomes_from_sets(sets, labels)?, strata, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DifficultyRow {
    pub range: SizeRange,
    pub count: usize,
    pub covered: usize,
    pub total_size: usize,
}

impl DifficultyRow {
    pub fn coverage(&self) -> Option<f64> {
        (self.count > 0).then(|| self.covered as f64 / self.count as f64)
    }

    pub fn avg_size(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total_size as f64 / self.count as f64)
    }
}

/// Groups examples by the rank of their true label. Ranks outside every
/// bin are dropped.
pub fn difficulty_rows(
    outcomes: &[SetOutcome],
    label_ranks: &[usize],
    bins: &Strata,
) -> Vec<DifficultyRow> {
    let mut rows: Vec<DifficultyRow> = bins
        .ranges()
        .iter()
        .map(|&range| DifficultyRow {
            range,
            count: 0,
            covered: 0,
            total_size: 0,
        })
        .collect();
    for (o, &rank) in outcomes.iter().zip(label_ranks) {
        if let Some(j) = bins.locate(rank) {
            rows[j].count += 1;
            rows[j].covered += usize::from(o.covered);
            rows[j].total_size += o.size;
        }
    }
    rows
}

/// Coverage and mean size per difficulty bin, where difficulty is the rank
/// of the true label in `ss`.
pub fn difficulty_table(
    sets: &[PredictionSet],
    labels: &[usize],
    ss: &SortedScores,
    bins: &Strata,
) -> Result<Vec<DifficultyRow>> {
    let outcomes = outcomes_from_sets(sets, labels)?;
    if ss.n() != outcomes.len() {
        return Err(Error::LengthMismatch {
            sets: outcomes.len(),
            labels: ss.n(),
        });
    }
    Ok(difficulty_rows(&outcomes, ss.label_ranks(), bins))
}

pub fn size_histogram(outcomes: &[SetOutcome]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for o in outcomes {
        *hist.entry(o.size).or_insert(0) += 1;
    }
    hist
}

/// All metrics for one method on one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_eval: usize,
    pub coverage: f64,
    pub avg_size: f64,
    pub sscv: f64,
    pub size_hist: BTreeMap<usize, usize>,
    pub per_stratum: Vec<StratumRow>,
    pub per_difficulty: Vec<DifficultyRow>,
}

impl EvalReport {
    pub fn from_outcomes(
        outcomes: &[SetOutcome],
        label_ranks: &[usize],
        strata: &Strata,
        bins: &Strata,
        alpha: f64,
    ) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::InvalidParameter(
                "cannot evaluate an empty split".into(),
            ));
        }
        let (coverage, avg_size) = marginal(outcomes);
        let per_stratum = stratify_by_size(outcomes, strata)?;
        Ok(Self {
            n_eval: outcomes.len(),
            coverage,
            avg_size,
            sscv: sscv_from_rows(&per_stratum, alpha),
            size_hist: size_histogram(outcomes),
            per_stratum,
            per_difficulty: difficulty_rows(outcomes, label_ranks, bins),
        })
    }
}
