//! Data-driven choice of `k_reg` and `lambda`, and the fixed-k baseline.
//!
//! `lambda` candidates are scored on a seeded 50/50 split of the tuning
//! rows: the first half calibrates, the second half is evaluated. All
//! candidates share the split and the uniform variates, so differences
//! between them are not sampling noise.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    calibrate, check_alpha, quantile_index, ConformalModel, Method, MethodSpec,
};
use crate::error::{Error, Result};
use crate::eval::{self, Strata};
use crate::score_store::SortedScores;
use crate::seeding::{self, stream, UStream};

/// Smallest tuning split that can be halved for `lambda` scoring.
pub const MIN_TUNING_ROWS: usize = 20;

pub const SIZE_GRID: [f64; 5] = [0.001, 0.01, 0.1, 0.2, 0.5];
pub const ADAPTIVENESS_GRID: [f64; 6] = [0.00001, 0.0001, 0.0008, 0.001, 0.0015, 0.002];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Size,
    Adaptiveness,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Size => "size",
            Objective::Adaptiveness => "adaptiveness",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Objective::Size => SIZE_GRID.to_vec(),
            Objective::Adaptiveness => ADAPTIVENESS_GRID.to_vec(),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "size" => Ok(Objective::Size),
            "adaptiveness" => Ok(Objective::Adaptiveness),
            _ => Err(Error::InvalidParameter(format!(
                "unknown tuning objective {s:?} (expected size or adaptiveness)"
            ))),
        }
    }
}

/// Outcome of a `lambda` search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub k_star: usize,
    pub k_reg: usize,
    pub lambda: f64,
    pub objective: Objective,
    /// Every candidate with its objective value (mean size or SSCV).
    pub grid: Vec<(f64, f64)>,
}

impl TuneResult {
    pub fn spec(&self, base: &MethodSpec) -> MethodSpec {
        MethodSpec {
            method: Method::Raps,
            lambda: self.lambda,
            k_reg: self.k_reg,
            ..*base
        }
    }
}

/// Fraction of rows whose label is among the `k` most likely classes.
fn top_k_coverage(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Smallest `k` whose top-`k` sets cover `ceil((n + 1)(1 - alpha))` of the
/// rows, i.e. that order statistic of the label ranks; `K` if it exceeds `n`.
pub fn fixed_k_star(tune: &SortedScores, alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    let n = tune.n();
    if n == 0 {
        return Err(Error::EmptyCalibration);
    }
    let q = quantile_index(n, alpha);
    if q > n {
        return Ok(tune.classes());
    }
    let mut ranks = tune.label_ranks().to_vec();
    let (_, nth, _) = ranks.select_nth_unstable(q - 1);
    Ok(*nth)
}

/// Probability of using the smaller set so that mixing top-`(k - 1)` (coverage
/// `c_small`) and top-`k` (coverage `c_large`) hits `1 - alpha`.
pub fn mix_probability(c_small: f64, c_large: f64, alpha: f64) -> f64 {
    if c_large == c_small {
        return 0.0;
    }
    ((c_large - (1.0 - alpha)) / (c_large - c_small)).clamp(0.0, 1.0)
}

/// Randomized top-`k*` / top-`(k* - 1)` predictor calibrated on `cal`.
pub fn make_fixed_k_model(
    cal: &SortedScores,
    spec: &MethodSpec,
    seed: u64,
) -> Result<ConformalModel> {
    spec.validate()?;
    let k_star = fixed_k_star(cal, spec.alpha)?;
    let ranks = cal.label_ranks();
    let mix_prob = mix_probability(
        top_k_coverage(ranks, k_star - 1),
        top_k_coverage(ranks, k_star),
        spec.alpha,
    );
    Ok(ConformalModel {
        spec: MethodSpec {
            method: Method::FixedK,
            ..*spec
        },
        tau_hat: k_star as f64,
        n_cal: cal.n(),
        seed,
        classes: cal.classes(),
        k_star: Some(k_star),
        mix_prob: Some(mix_prob),
        temperature: None,
    })
}

struct NestedSplit {
    cal: SortedScores,
    eval: SortedScores,
    cal_seed: u64,
    eval_u: UStream,
}

fn nested_split(tune: &SortedScores, seed: u64) -> Result<NestedSplit> {
    let n = tune.n();
    if n < MIN_TUNING_ROWS {
        return Err(Error::TuningTooSmall {
            rows: n,
            min: MIN_TUNING_ROWS,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng(seed, &[stream::TUNING, 0]));
    let (a, b) = order.split_at(n / 2);
    Ok(NestedSplit {
        cal: tune.select(a),
        eval: tune.select(b),
        cal_seed: seeding::derive(seed, &[stream::TUNING, 1]),
        eval_u: UStream::new(
            seeding::derive(seed, &[stream::TUNING, 2]),
            stream::EVALUATION_U,
        ),
    })
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("lambda grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "lambda grid value {bad} is not a finite nonnegative number"
        )));
    }
    Ok(())
}

/// Scores each `lambda` and returns `(k_star, k_reg, [(lambda, value)])`.
/// `(k*, k_reg, [(lambda, objective)])`.
type ScoredGrid = (usize, usize, Vec<(f64, f64)>);

fn score_grid(
    tune: &SortedScores,
    base: &MethodSpec,
    grid: &[f64],
    seed: u64,
    k_reg: Option<usize>,
    objective: impl Fn(&[eval::SetOutcome]) -> Result<f64>,
) -> Result<ScoredGrid> {
    base.validate()?;
    check_grid(grid)?;
    let k_star = fixed_k_star(tune, base.alpha)?;
    let k_reg = k_reg.unwrap_or(k_star);
    let split = nested_split(tune, seed)?;
    let scored = grid
        .iter()
        .map(|&lambda| {
            let spec = MethodSpec {
                method: Method::Raps,
                lambda,
                k_reg,
                ..*base
            };
            spec.validate()?;
            let model = calibrate(&split.cal, &spec, split.cal_seed)?;
            let outcomes = eval::outcomes(&model, &split.eval, split.eval_u)?;
            Ok((lambda, objective(&outcomes)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((k_star, k_reg, scored))
}

/// Picks the `lambda` with the smallest mean set size; ties go to the larger
/// `lambda`. `k_reg` defaults to `k*` of the tuning rows.
pub fn tune_for_size(
    tune: &SortedScores,
    base: &MethodSpec,
    grid: &[f64],
    seed: u64,
    k_reg: Option<usize>,
) -> Result<TuneResult> {
    let (k_star, k_reg, grid) = score_grid(tune, base, grid, seed, k_reg, |outcomes| {
        Ok(outcomes.iter().map(|o| o.size).sum::<usize>() as f64 / outcomes.len() as f64)
    })?;
    let &(lambda, _) = grid
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)))
        .expect("grid is nonempty");
    Ok(TuneResult {
        k_star,
        k_reg,
        lambda,
        objective: Objective::Size,
        grid,
    })
}

/// Picks the `lambda` with the smallest SSCV over `strata`; ties go to the
/// smaller `lambda`.
pub fn tune_for_adaptiveness(
    tune: &SortedScores,
    base: &MethodSpec,
    grid: &[f64],
    strata: &Strata,
    seed: u64,
    k_reg: Option<usize>,
) -> Result<TuneResult> {
    let (k_star, k_reg, grid) = score_grid(tune, base, grid, seed, k_reg, |outcomes| {
        eval::sscv_from_outcomes(outcomes, strata, base.alpha)
    })?;
    let &(lambda, _) = grid
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .expect("grid is nonempty");
    Ok(TuneResult {
        k_star,
        k_reg,
        lambda,
        objective: Objective::Adaptiveness,
        grid,
    })
}

/// Dispatches on `objective`.
pub fn tune(
    tune_split: &SortedScores,
    base: &MethodSpec,
    objective: Objective,
    grid: &[f64],
    strata: &Strata,
    seed: u64,
    k_reg: Option<usize>,
) -> Result<TuneResult> {
    match objective {
        Objective::Size => tune_for_size(tune_split, base, grid, seed, k_reg),
        Objective::Adaptiveness => {
            tune_for_adaptiveness(tune_split, base, grid, strata, seed, k_reg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_store::sort_scores;
    use crate::score_store::{ScoreKind, ScoreMatrix};

    /// Rows over `classes` classes where the label sits at the given rank.
    fn with_ranks(classes: usize, ranks: &[usize]) -> SortedScores {
        let weights: Vec<f64> = (0..classes).map(|j| (classes - j) as f64).collect();
        let total: f64 = weights.iter().sum();
        let row: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let scores = ranks.iter().flat_map(|_| row.iter().copied()).collect();
        let labels = ranks.iter().map(|r| r - 1).collect();
        let m = ScoreMatrix::new(classes, scores, labels, ScoreKind::Probabilities).unwrap();
        sort_scores(&m, 0).unwrap()
    }

    fn noisy(n: usize, classes: usize, seed: u64) -> SortedScores {
        let mut scores = Vec::with_capacity(n * classes);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let w: Vec<f64> = (0..classes)
                .map(|j| seeding::uniform(seed, &[i as u64, j as u64]).powi(6) + 1e-3)
                .collect();
            let total: f64 = w.iter().sum();
            let row: Vec<f64> = w.iter().map(|x| x / total).collect();
            let u = seeding::uniform(seed, &[i as u64, 999]);
            let mut acc = 0.0;
            let label = row
                .iter()
                .position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(classes - 1);
            scores.extend(row);
            labels.push(label);
        }
        let m = ScoreMatrix::new(classes, scores, labels, ScoreKind::Probabilities).unwrap();
        sort_scores(&m, seed).unwrap()
    }

    #[test]
    fn k_star_hand_examples() {
        assert_eq!(
            fixed_k_star(&with_ranks(4, &[1, 1, 2, 3, 1]), 0.4).unwrap(),
            2
        );
        assert_eq!(fixed_k_star(&with_ranks(4, &[1; 12]), 0.2).unwrap(), 1);
        assert_eq!(fixed_k_star(&with_ranks(7, &[1, 1, 1, 1]), 0.1).unwrap(), 7);
        let empty = with_ranks(3, &[1]).select(&[]);
        assert!(matches!(
            fixed_k_star(&empty, 0.1),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn k_star_is_monotone_in_alpha() {
        let ss = noisy(300, 10, 3);
        let alphas = [0.4, 0.3, 0.2, 0.1, 0.05, 0.01];
        let ks: Vec<usize> = alphas
            .iter()
            .map(|&a| fixed_k_star(&ss, a).unwrap())
            .collect();
        assert!(ks.windows(2).all(|w| w[0] <= w[1]), "{ks:?}");
    }

    #[test]
    fn mix_probability_hand_examples() {
        assert!((mix_probability(0.85, 0.95, 0.1) - 0.5).abs() < 1e-9);
        assert_eq!(mix_probability(0.9, 0.95, 0.1), 1.0);
        assert_eq!(mix_probability(0.9, 0.9, 0.1), 0.0);
    }

    #[test]
    fn fixed_k_mixed_calibration_coverage_is_exact() {
        let ss = noisy(500, 10, 5);
        let spec = MethodSpec::new(Method::FixedK, 0.1).unwrap();
        let model = make_fixed_k_model(&ss, &spec, 1).unwrap();
        let k = model.k_star.unwrap();
        let p = model.mix_prob.unwrap();
        let ranks = ss.label_ranks();
        let (small, large) = (top_k_coverage(ranks, k - 1), top_k_coverage(ranks, k));
        let mixed = p * small + (1.0 - p) * large;
        assert!((mixed - 0.9).abs() <= 1.0 / 500.0, "mixed {mixed}");
        assert_eq!(model.tau_hat, k as f64);
    }

    #[test]
    fn single_element_grid_and_determinism() {
        let ss = noisy(200, 8, 9);
        let base = MethodSpec::new(Method::Raps, 0.1).unwrap();
        let r = tune_for_size(&ss, &base, &[0.3], 4, None).unwrap();
        assert_eq!(r.lambda, 0.3);
        assert_eq!(r.k_reg, r.k_star);
        let strata = Strata::default_sizes();
        let a = tune_for_adaptiveness(&ss, &base, &ADAPTIVENESS_GRID, &strata, 4, None).unwrap();
        let b = tune_for_adaptiveness(&ss, &base, &ADAPTIVENESS_GRID, &strata, 4, None).unwrap();
        assert_eq!(a, b);
        let best = a.grid.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
        assert_eq!(a.grid.iter().find(|g| g.0 == a.lambda).unwrap().1, best);
        assert_eq!(
            tune_for_size(&ss, &base, &[0.5], 4, Some(3)).unwrap().k_reg,
            3
        );
    }

    #[test]
    fn size_tuning_prefers_regularization_on_noisy_tails() {
        let ss = noisy(2000, 50, 11);
        let base = MethodSpec::new(Method::Raps, 0.1).unwrap();
        let r = tune_for_size(&ss, &base, &SIZE_GRID, 2, None).unwrap();
        let weakest = r.grid[0].1;
        let chosen = r.grid.iter().find(|g| g.0 == r.lambda).unwrap().1;
        assert!(r.lambda > 0.0);
        assert!(chosen < weakest, "{:?}", r.grid);
    }

    #[test]
    fn ties_break_by_objective() {
        // Perfect classifier: every lambda yields the same sets.
        let ss = with_ranks(5, &[1; 40]);
        let base = MethodSpec::new(Method::Raps, 0.1).unwrap();
        assert_eq!(
            tune_for_size(&ss, &base, &[0.1, 0.5, 0.2], 0, None)
                .unwrap()
                .lambda,
            0.5
        );
        let strata = Strata::default_sizes();
        assert_eq!(
            tune_for_adaptiveness(&ss, &base, &[0.1, 0.5, 0.2], &strata, 0, None)
                .unwrap()
                .lambda,
            0.1
        );
    }

    #[test]
    fn rejects_small_splits_and_bad_grids() {
        let base = MethodSpec::new(Method::Raps, 0.1).unwrap();
        let small = with_ranks(4, &[1; 19]);
        assert!(matches!(
            tune_for_size(&small, &base, &SIZE_GRID, 0, None),
            Err(Error::TuningTooSmall { rows: 19, min: 20 })
        ));
        let ok = with_ranks(4, &[1; 20]);
        assert!(tune_for_size(&ok, &base, &[], 0, None).is_err());
        assert!(tune_for_size(&ok, &base, &[-1.0], 0, None).is_err());
    }
}
