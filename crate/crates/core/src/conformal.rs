//! Conformity scores, conformal calibration and prediction-set construction.
//!
//! For a row sorted in descending order with scores `s_1 >= s_2 >= ...`,
//! cumulative mass `rho(o) = s_1 + ... + s_{o-1}` and a uniform variate `u`,
//! the RAPS score of the class at 1-based rank `o` is
//!
//! ```text
//! E(o, u) = rho(o) + u * s_o + lambda * (o - k_reg)^+
//! ```
//!
//! `aps` is the `lambda = 0` case. `E` is nondecreasing in `o` for every
//! fixed `u`, so `{o : E(o, u) <= tau}` is always a prefix of the ranking
//! and can be found in one pass. `lac` uses `1 - s_o`, which is also
//! nondecreasing in `o`.
//!
//! Calibration picks `tau` as the `ceil((n + 1)(1 - alpha))`-th smallest
//! calibration score, or `+inf` when that index exceeds `n`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_store::{SortedRow, SortedScores};
use crate::seeding::{stream, UStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Aps,
    Raps,
    Lac,
    FixedK,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Naive,
        Method::Aps,
        Method::Raps,
        Method::Lac,
        Method::FixedK,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Aps => "aps",
            Method::Raps => "raps",
            Method::Lac => "lac",
            Method::FixedK => "fixed_k",
        }
    }

    /// Column heading used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            Method::Naive => "Naive",
            Method::Aps => "APS",
            Method::Raps => "RAPS",
            Method::Lac => "LAC",
            Method::FixedK => "Top K",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "naive" => Ok(Method::Naive),
            "aps" => Ok(Method::Aps),
            "raps" => Ok(Method::Raps),
            "lac" => Ok(Method::Lac),
            "fixed_k" | "fixedk" | "topk" | "top_k" => Ok(Method::FixedK),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

/// A set family with its hyperparameters and target level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub alpha: f64,
    /// Rank penalty weight; only `raps` uses it.
    pub lambda: f64,
    /// Rank from which the penalty applies; only `raps` uses it.
    pub k_reg: usize,
    pub randomized: bool,
    /// Deterministic mode only: add one class past the `u = 1` set, as the
    /// non-randomized branch of the reference pseudocode does.
    #[serde(default)]
    pub inclusive_boundary: bool,
}

impl MethodSpec {
    pub fn new(method: Method, alpha: f64) -> Result<Self> {
        let spec = Self {
            method,
            alpha,
            lambda: 0.0,
            k_reg: 1,
            randomized: true,
            inclusive_boundary: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn raps(alpha: f64, lambda: f64, k_reg: usize) -> Result<Self> {
        let spec = Self {
            lambda,
            k_reg,
            ..Self::new(Method::Raps, alpha)?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn deterministic(mut self) -> Self {
        self.randomized = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if self.k_reg == 0 {
            return Err(Error::InvalidParameter("k_reg must be at least 1".into()));
        }
        Ok(())
    }

    /// Penalty weight actually applied: zero for everything but `raps`.
    fn effective_lambda(&self) -> f64 {
        match self.method {
            Method::Raps => self.lambda,
            _ => 0.0,
        }
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// `ceil((n + 1)(1 - alpha))`, guarded against `0.9 * 10 = 9.000000000000002`.
pub fn quantile_index(n: usize, alpha: f64) -> usize {
    let raw = (n as f64 + 1.0) * (1.0 - alpha);
    (raw - raw * 1e-12).ceil().max(1.0) as usize
}

/// Conformity score of the class at 1-based `rank`.
///
/// `naive` is scored like `aps`. `fixed_k` scores by rank alone.
pub fn conformity_score(
    row: &SortedRow<'_>,
    rank: usize,
    u: f64,
    spec: &MethodSpec,
) -> Result<f64> {
    let k = row.classes();
    if rank == 0 || rank > k {
        return Err(Error::RankOutOfRange { rank, classes: k });
    }
    Ok(score_unchecked(row, rank, u, spec))
}

fn score_unchecked(row: &SortedRow<'_>, rank: usize, u: f64, spec: &MethodSpec) -> f64 {
    match spec.method {
        Method::Lac => 1.0 - row.score_at(rank),
        Method::FixedK => rank as f64,
        Method::Naive | Method::Aps | Method::Raps => {
            let base = row.mass_before(rank) + row.score_at(rank) * u;
            let lambda = spec.effective_lambda();
            let over = rank.saturating_sub(spec.k_reg);
            if lambda > 0.0 && over > 0 {
                base + lambda * over as f64
            } else {
                base
            }
        }
    }
}

/// A calibrated set predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalModel {
    pub spec: MethodSpec,
    /// Threshold on the conformity score; `+inf` predicts every class.
    pub tau_hat: f64,
    pub n_cal: usize,
    #[serde(with = "seed_repr")]
    pub seed: u64,
    /// Class count of the calibration scores.
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_star: Option<usize>,
    /// Probability of predicting the `k* - 1` set (fixed-k only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_prob: Option<f64>,
    /// Softmax temperature to apply when predicting from logits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

/// One example's prediction set, most likely class first.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub classes: Vec<usize>,
    pub u: Option<f64>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }
}

/// Sizes of the set at the two extremes of the randomization.
///
/// `size_at_u0 - size_at_u1` is 0 or 1 and `v` is the probability, over a
/// uniform `u`, that the boundary class (rank `size_at_u1 + 1`) is included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundarySizes {
    pub size_at_u0: usize,
    pub size_at_u1: usize,
    pub v: f64,
}

impl BoundarySizes {
    /// Set size realized at `u`.
    pub fn size_at(&self, u: f64) -> usize {
        if self.size_at_u0 > self.size_at_u1 && u < self.v {
            self.size_at_u0
        } else {
            self.size_at_u1
        }
    }
}

/// Conformity score of each calibration row at its true label.
pub fn calibration_scores(cal: &SortedScores, spec: &MethodSpec, us: UStream) -> Vec<f64> {
    cal.label_ranks()
        .iter()
        .enumerate()
        .map(|(i, &rank)| {
            let u = if spec.randomized { us.at(i) } else { 1.0 };
            score_unchecked(&cal.row(i), rank, u, spec)
        })
        .collect()
}

/// The `ceil((n + 1)(1 - alpha))`-th smallest score, or `+inf`.
pub fn conformal_quantile(mut scores: Vec<f64>, alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let n = scores.len();
    let q = quantile_index(n, alpha);
    if q > n {
        return Ok(f64::INFINITY);
    }
    let (_, nth, _) = scores.select_nth_unstable_by(q - 1, f64::total_cmp);
    Ok(*nth)
}

/// Calibrates `aps`, `raps` or `lac` on `cal`; calibration variates come
/// from the `(seed, calibration stream, row)` counter.
pub fn calibrate(cal: &SortedScores, spec: &MethodSpec, seed: u64) -> Result<ConformalModel> {
    spec.validate()?;
    match spec.method {
        Method::Naive => {
            return Err(Error::InvalidParameter(
                "naive sets need no calibration; use ConformalModel::naive".into(),
            ))
        }
        Method::FixedK => {
            return Err(Error::InvalidParameter(
                "fixed_k models are built by tuning::make_fixed_k_model".into(),
            ))
        }
        _ => {}
    }
    if cal.n() == 0 {
        return Err(Error::EmptyCalibration);
    }
    let scores = calibration_scores(cal, spec, UStream::new(seed, stream::CALIBRATION_U));
    let tau_hat = conformal_quantile(scores, spec.alpha)?;
    Ok(ConformalModel {
        spec: *spec,
        tau_hat,
        n_cal: cal.n(),
        seed,
        classes: cal.classes(),
        k_star: None,
        mix_prob: None,
        temperature: None,
    })
}

impl ConformalModel {
    /// The uncalibrated naive predictor: threshold `1 - alpha` on cumulative mass.
    pub fn naive(spec: MethodSpec, classes: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: MethodSpec {
                method: Method::Naive,
                ..spec
            },
            tau_hat: 1.0 - spec.alpha,
            n_cal: 0,
            seed: 0,
            classes,
            k_star: None,
            mix_prob: None,
            temperature: None,
        })
    }

    pub fn method(&self) -> Method {
        self.spec.method
    }

    /// Boundary sizes of the set for `row` as a function of `u`.
    pub fn boundary_sizes(&self, row: &SortedRow<'_>) -> BoundarySizes {
        let k = row.classes();
        match self.spec.method {
            Method::Naive => self.naive_boundary(row),
            Method::FixedK => {
                let k_star = self.k_star.unwrap_or(k).min(k);
                let mix = self.mix_prob.unwrap_or(0.0);
                if k_star == 0 || mix <= 0.0 {
                    BoundarySizes {
                        size_at_u0: k_star,
                        size_at_u1: k_star,
                        v: 1.0,
                    }
                } else {
                    BoundarySizes {
                        size_at_u0: k_star,
                        size_at_u1: k_star - 1,
                        v: 1.0 - mix,
                    }
                }
            }
            Method::Lac => {
                let size = self.count_within(row, 1.0);
                BoundarySizes {
                    size_at_u0: size,
                    size_at_u1: size,
                    v: 0.0,
                }
            }
            Method::Aps | Method::Raps => {
                let size_at_u1 = self.count_within(row, 1.0);
                if size_at_u1 == k {
                    return BoundarySizes {
                        size_at_u0: k,
                        size_at_u1: k,
                        v: 0.0,
                    };
                }
                let size_at_u0 = self.count_within(row, 0.0);
                let v = if size_at_u0 > size_at_u1 {
                    // Boundary class at rank b enters iff base + s_b * u <= tau.
                    let b = size_at_u1 + 1;
                    let at_zero = score_unchecked(row, b, 0.0, &self.spec);
                    ((self.tau_hat - at_zero) / row.score_at(b)).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                BoundarySizes {
                    size_at_u0,
                    size_at_u1,
                    v,
                }
            }
        }
    }

    // Naive sets use the randomization of the reference procedure with the
    // variate flipped (U = 1 - u) so that, like every other family, small u
    // means the larger set.
    fn naive_boundary(&self, row: &SortedRow<'_>) -> BoundarySizes {
        let k = row.classes();
        let level = 1.0 - self.spec.alpha;
        let full = row
            .cumsum
            .iter()
            .position(|&c| c >= level)
            .map_or(k, |p| p + 1);
        if !self.spec.randomized {
            return BoundarySizes {
                size_at_u0: full,
                size_at_u1: full,
                v: 1.0,
            };
        }
        let removal = ((row.cumsum[full - 1] - level) / row.score_at(full)).clamp(0.0, 1.0);
        BoundarySizes {
            size_at_u0: full,
            size_at_u1: full - 1,
            v: 1.0 - removal,
        }
    }

    /// Number of leading ranks whose score at `u` is within `tau_hat`.
    fn count_within(&self, row: &SortedRow<'_>, u: f64) -> usize {
        let k = row.classes();
        if self.tau_hat == f64::INFINITY {
            return k;
        }
        (1..=k)
            .find(|&o| score_unchecked(row, o, u, &self.spec) > self.tau_hat)
            .map_or(k, |o| o - 1)
    }

    /// Size of the prediction set for `row` at variate `u`.
    pub fn set_size(&self, row: &SortedRow<'_>, u: f64) -> usize {
        let k = row.classes();
        if !self.spec.randomized {
            let base = match self.spec.method {
                Method::Naive | Method::FixedK => self.boundary_sizes(row).size_at_u0,
                _ => self.count_within(row, 1.0),
            };
            return if self.spec.inclusive_boundary
                && matches!(self.spec.method, Method::Aps | Method::Raps)
            {
                (base + 1).min(k)
            } else {
                base
            };
        }
        match self.spec.method {
            Method::Aps | Method::Raps | Method::Lac => self.count_within(row, u),
            Method::Naive | Method::FixedK => self.boundary_sizes(row).size_at(u),
        }
    }

    /// Prediction set for `row`. `u` is ignored in deterministic mode.
    pub fn predict(&self, row: &SortedRow<'_>, u: f64) -> PredictionSet {
        let size = self.set_size(row, u);
        PredictionSet {
            classes: row.top(size),
            u: self.spec.randomized.then_some(u),
        }
    }

    /// Predicts every row of `ss` with variates from `us`.
    pub fn predict_all(&self, ss: &SortedScores, us: UStream) -> Result<Vec<PredictionSet>> {
        self.check_classes(ss.classes())?;
        Ok((0..ss.n())
            .map(|i| self.predict(&ss.row(i), us.at(i)))
            .collect())
    }

    /// Set sizes for every row of `ss`; cheaper than [`predict_all`](Self::predict_all).
    pub fn sizes_all(&self, ss: &SortedScores, us: UStream) -> Result<Vec<usize>> {
        self.check_classes(ss.classes())?;
        Ok((0..ss.n())
            .map(|i| self.set_size(&ss.row(i), us.at(i)))
            .collect())
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if classes != self.classes {
            return Err(Error::ClassCountMismatch {
                model: self.classes,
                scores: classes,
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model fields are always representable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let model: ConformalModel =
            toml::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        model.spec.validate()?;
        if model.tau_hat.is_nan() {
            return Err(Error::Model("tau_hat is NaN".into()));
        }
        Ok(model)
    }
}

// TOML integers are signed 64-bit, so seeds are stored as decimal strings.
pub(crate) mod seed_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&seed.to_string())
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => u64::try_from(v).map_err(serde::de::Error::custom),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}
