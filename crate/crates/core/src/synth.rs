//! Synthetic classification problems with known conditional probabilities.
//!
//! Each row draws `p ~ Dirichlet(concentration / K)`, samples the label from
//! `p`, and reports `p` (the oracle) next to a possibly corrupted copy (what
//! a classifier would output). Rows are seeded by `(seed, row)` so any row
//! range can be regenerated independently.
//!
//! Optionally a fraction of rows is "hard": drawn with a different (usually
//! much larger) concentration, giving flat conditionals. Mixing sharp and
//! flat rows is what makes set sizes vary from example to example.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, ConformalModel, Method, MethodSpec};
use crate::error::{Error, Result};
use crate::score_store::{sort_scores, ScoreKind, ScoreMatrix, SortedScores};
use crate::seeding::{self, stream, UStream};
use crate::tuning::make_fixed_k_model;

/// How observed scores differ from the true conditionals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    None,
    /// `softmax(log p / t)`: `t > 1` flattens, `t < 1` sharpens.
    Temperature {
        t: f64,
    },
    /// Values beyond the `top_m` largest are shuffled among their classes.
    TailPermute {
        top_m: usize,
    },
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Corruption::None => f.write_str("none"),
            Corruption::Temperature { t } => write!(f, "temperature:{t}"),
            Corruption::TailPermute { top_m } => write!(f, "tail_permute:{top_m}"),
        }
    }
}

impl FromStr for Corruption {
    type Err = Error;

    /// Parses `none`, `temperature:<t>` or `tail_permute:<top_m>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidParameter(format!(
                "bad corruption {s:?}; use none, temperature:<t> or tail_permute:<m>"
            ))
        };
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        match name {
            "none" if arg.is_empty() => Ok(Corruption::None),
            "temperature" => Ok(Corruption::Temperature {
                t: arg.parse().map_err(|_| bad())?,
            }),
            "tail_permute" => Ok(Corruption::TailPermute {
                top_m: arg.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    /// Total Dirichlet concentration; the per-class parameter is this over `K`.
    pub concentration: f64,
    pub corruption: Corruption,
    #[serde(with = "crate::conformal::seed_repr")]
    pub seed: u64,
    /// Fraction of rows drawn with `hard_concentration` instead.
    #[serde(default)]
    pub hard_fraction: f64,
    /// Defaults to `K` (a flat Dirichlet).
    #[serde(default)]
    pub hard_concentration: Option<f64>,
}

impl SynthSpec {
    /// Spec with the default concentration `0.05 K` and no hard rows.
    pub fn new(n: usize, classes: usize, corruption: Corruption, seed: u64) -> Self {
        Self {
            n,
            classes,
            concentration: 0.05 * classes as f64,
            corruption,
            seed,
            hard_fraction: 0.0,
            hard_concentration: None,
        }
    }

    pub fn with_hard_rows(mut self, fraction: f64, concentration: Option<f64>) -> Self {
        self.hard_fraction = fraction;
        self.hard_concentration = concentration;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n == 0 {
            return fail("synthetic problem needs at least one row".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return fail(format!(
                "concentration must be positive, got {}",
                self.concentration
            ));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return fail(format!(
                "hard_fraction must lie in [0, 1], got {}",
                self.hard_fraction
            ));
        }
        if let Some(c) = self.hard_concentration {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("hard_concentration must be positive, got {c}"));
            }
        }
        match self.corruption {
            Corruption::Temperature { t } if !(t > 0.0 && t.is_finite()) => {
                fail(format!("corruption temperature must be positive, got {t}"))
            }
            Corruption::TailPermute { top_m } if top_m > self.classes => fail(format!(
                "tail_permute top_m {top_m} exceeds K = {}",
                self.classes
            )),
            _ => Ok(()),
        }
    }

    fn hard_concentration(&self) -> f64 {
        self.hard_concentration.unwrap_or(self.classes as f64)
    }
}

/// Symmetric Dirichlet draw computed in log space so that tiny parameters
/// do not underflow: `log G(a) = log G(a + 1) + ln(U) / a`.
fn log_dirichlet(rng: &mut ChaCha8Rng, a: f64, classes: usize) -> Vec<f64> {
    let gamma = Gamma::new(a + 1.0, 1.0).expect("shape is positive");
    (0..classes)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / a
        })
        .collect()
}

fn normalize_exp(log_w: &[f64], scale: f64) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = log_w.iter().map(|&l| ((l - max) / scale).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

fn tail_permute(p: &[f64], top_m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let tail = &order[top_m.min(p.len())..];
    if tail.len() < 2 {
        return p.to_vec();
    }
    let mut values: Vec<f64> = tail.iter().map(|&c| p[c]).collect();
    values.shuffle(rng);
    let mut out = p.to_vec();
    for (&class, v) in tail.iter().zip(values) {
        out[class] = v;
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// One row: `(true probabilities, observed scores, label)`.
fn generate_row(spec: &SynthSpec, row: u64) -> (Vec<f64>, Vec<f64>, usize) {
    let mut rng = seeding::rng(spec.seed, &[stream::SYNTH_ROW, row]);
    let hard = rng.random::<f64>() < spec.hard_fraction;
    let total = if hard {
        spec.hard_concentration()
    } else {
        spec.concentration
    };
    let log_w = log_dirichlet(&mut rng, total / spec.classes as f64, spec.classes);
    let p = normalize_exp(&log_w, 1.0);

    let u: f64 = rng.random();
    let mut acc = 0.0;
    let label = p
        .iter()
        .position(|&x| {
            acc += x;
            u < acc
        })
        .unwrap_or_else(|| p.iter().rposition(|&x| x > 0.0).unwrap_or(0));

    let observed = match spec.corruption {
        Corruption::None => p.clone(),
        Corruption::Temperature { t } => normalize_exp(&log_w, t),
        Corruption::TailPermute { top_m } => tail_permute(&p, top_m, &mut rng),
    };
    (p, observed, label)
}

/// Rows `start..start + n` of the problem described by `spec`.
pub fn generate_range(
    spec: &SynthSpec,
    start: usize,
    n: usize,
) -> Result<(ScoreMatrix, ScoreMatrix)> {
    spec.validate()?;
    let k = spec.classes;
    let mut truth = Vec::with_capacity(n * k);
    let mut observed = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n);
    for row in start..start + n {
        let (p, o, y) = generate_row(spec, row as u64);
        truth.extend(p);
        observed.extend(o);
        labels.push(y);
    }
    Ok((
        ScoreMatrix::new(k, truth, labels.clone(), ScoreKind::Probabilities)?,
        ScoreMatrix::new(k, observed, labels, ScoreKind::Probabilities)?,
    ))
}

/// `(true_probs, observed_scores)` for all `spec.n` rows.
pub fn generate(spec: &SynthSpec) -> Result<(ScoreMatrix, ScoreMatrix)> {
    generate_range(spec, 0, spec.n)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleEstimate {
    pub coverage: f64,
    pub se: f64,
    pub trials: usize,
}

/// Mean true probability mass captured by `model`'s sets on `observed`,
/// i.e. the coverage probability given each row's features and variate.
pub fn true_mass_coverage(
    model: &ConformalModel,
    truth: &ScoreMatrix,
    observed: &SortedScores,
    us: UStream,
) -> Result<f64> {
    let sets = model.predict_all(observed, us)?;
    let total: f64 = sets
        .iter()
        .enumerate()
        .map(|(i, set)| set.classes.iter().map(|&c| truth.row(i)[c]).sum::<f64>())
        .sum();
    Ok(total / sets.len() as f64)
}

/// Brute-force coverage of `method`: each trial draws a fresh calibration
/// set of `n_cal` rows (unused for `naive`), fits the method on the observed
/// scores, and measures true coverage on `spec.n` fresh rows.
pub fn oracle_coverage(
    spec: &SynthSpec,
    method: &MethodSpec,
    n_cal: usize,
    n_trials: usize,
) -> Result<OracleEstimate> {
    spec.validate()?;
    method.validate()?;
    if n_trials == 0 {
        return Err(Error::InvalidParameter(
            "oracle needs at least one trial".into(),
        ));
    }
    let per_trial = (0..n_trials)
        .map(|t| {
            let seed = seeding::derive(spec.seed, &[stream::SYNTH_ORACLE, t as u64]);
            let fresh = |n: usize, part: u64| {
                let s = SynthSpec {
                    n,
                    seed: seeding::derive(seed, &[part]),
                    ..*spec
                };
                generate(&s)
            };
            let model = match method.method {
                Method::Naive => ConformalModel::naive(*method, spec.classes)?,
                _ => {
                    let (_, cal) = fresh(n_cal, 0)?;
                    let cal = sort_scores(&cal, seeding::derive(seed, &[stream::TIES, 0]))?;
                    match method.method {
                        Method::FixedK => make_fixed_k_model(&cal, method, seed)?,
                        _ => calibrate(&cal, method, seed)?,
                    }
                }
            };
            let (truth, observed) = fresh(spec.n, 1)?;
            let observed = sort_scores(&observed, seeding::derive(seed, &[stream::TIES, 1]))?;
            true_mass_coverage(
                &model,
                &truth,
                &observed,
                UStream::new(seed, stream::EVALUATION_U),
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = per_trial.len() as f64;
    let mean = per_trial.iter().sum::<f64>() / n;
    let se = if per_trial.len() > 1 {
        let var = per_trial.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(OracleEstimate {
        coverage: mean,
        se,
        trials: per_trial.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_corruption_is_identity_and_rows_sum_to_one() {
        let spec = SynthSpec::new(200, 20, Corruption::None, 3);
        let (truth, observed) = generate(&spec).unwrap();
        assert_eq!(truth, observed);
        for row in truth.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic_and_range_consistent() {
        let spec = SynthSpec::new(50, 10, Corruption::TailPermute { top_m: 3 }, 8)
            .with_hard_rows(0.3, None);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let (full, _) = generate(&spec).unwrap();
        let (part, _) = generate_range(&spec, 20, 5).unwrap();
        assert_eq!(part.row(0), full.row(20));
        assert_eq!(part.labels(), &full.labels()[20..25]);
    }

    #[test]
    fn tail_permute_keeps_top_entries_and_the_multiset() {
        let spec = SynthSpec::new(300, 30, Corruption::TailPermute { top_m: 5 }, 4);
        let (truth, observed) = generate(&spec).unwrap();
        let mut changed = 0;
        for (p, o) in truth.rows().zip(observed.rows()) {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            for &c in &order[..5] {
                assert!((p[c] - o[c]).abs() <= 1e-15 * p[c].max(1e-300));
            }
            let mut ps = p.to_vec();
            let mut os = o.to_vec();
            ps.sort_by(f64::total_cmp);
            os.sort_by(f64::total_cmp);
            assert!(ps
                .iter()
                .zip(&os)
                .all(|(a, b)| (a - b).abs() <= 1e-15 * a.max(1e-300)));
            changed += usize::from(p != o);
        }
        assert!(changed > 250);
    }

    #[test]
    fn tail_permute_of_all_classes_is_identity() {
        let spec = SynthSpec::new(40, 8, Corruption::TailPermute { top_m: 8 }, 6);
        let (truth, observed) = generate(&spec).unwrap();
        assert_eq!(truth, observed);
    }

    #[test]
    fn temperature_corruption_preserves_order() {
        let spec = SynthSpec::new(40, 8, Corruption::Temperature { t: 3.0 }, 6);
        let (truth, observed) = generate(&spec).unwrap();
        for (p, o) in truth.rows().zip(observed.rows()) {
            let argmax = |r: &[f64]| (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
            assert_eq!(argmax(p), argmax(o));
            assert!(
                o.iter().copied().fold(0.0, f64::max)
                    <= p.iter().copied().fold(0.0, f64::max) + 1e-12
            );
        }
    }

    #[test]
    fn argmax_label_frequency_matches_its_probability() {
        let spec = SynthSpec::new(100_000, 10, Corruption::None, 12);
        let (truth, _) = generate(&spec).unwrap();
        let (mut hits, mut mass, mut var) = (0.0, 0.0, 0.0);
        for (row, &y) in truth.rows().zip(truth.labels()) {
            let top = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            hits += f64::from(u8::from(y == top));
            mass += row[top];
            var += row[top] * (1.0 - row[top]);
        }
        let se = var.sqrt() / 100_000.0;
        let diff = (hits - mass) / 100_000.0;
        assert!(diff.abs() < 3.0 * se, "diff {diff}, se {se}");
    }

    #[test]
    fn validation() {
        assert!(SynthSpec::new(10, 1, Corruption::None, 0)
            .validate()
            .is_err());
        assert!(
            SynthSpec::new(10, 4, Corruption::TailPermute { top_m: 5 }, 0)
                .validate()
                .is_err()
        );
        assert!(SynthSpec::new(10, 4, Corruption::Temperature { t: 0.0 }, 0)
            .validate()
            .is_err());
        assert!(SynthSpec::new(10, 4, Corruption::None, 0)
            .with_hard_rows(1.5, None)
            .validate()
            .is_err());
        assert_eq!(
            "tail_permute:10".parse::<Corruption>().unwrap(),
            Corruption::TailPermute { top_m: 10 }
        );
        assert_eq!(
            "temperature:2".parse::<Corruption>().unwrap(),
            Corruption::Temperature { t: 2.0 }
        );
        assert!("tail_permute".parse::<Corruption>().is_err());
        assert_eq!(
            Corruption::TailPermute { top_m: 3 }.to_string(),
            "tail_permute:3"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let spec = SynthSpec::new(10, 4, Corruption::TailPermute { top_m: 2 }, u64::MAX)
            .with_hard_rows(0.1, Some(4.0));
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(toml::from_str::<SynthSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn naive_oracle_directions() {
        let alpha = 0.1;
        let naive = MethodSpec::new(Method::Naive, alpha)
            .unwrap()
            .deterministic();
        let clean = SynthSpec::new(4000, 50, Corruption::None, 21);
        assert!(oracle_coverage(&clean, &naive, 0, 2).unwrap().coverage >= 0.9);
        let noisy = SynthSpec::new(4000, 50, Corruption::TailPermute { top_m: 3 }, 21)
            .with_hard_rows(0.2, None);
        let randomized = MethodSpec::new(Method::Naive, alpha).unwrap();
        assert!(oracle_coverage(&noisy, &randomized, 0, 2).unwrap().coverage < 0.9);
    }
}
