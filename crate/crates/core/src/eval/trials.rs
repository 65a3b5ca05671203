//! Repeated random-split experiments.
//!
//! Trial `t` draws everything from `derive(master_seed, [TRIAL, t])`, so a
//! trial's result does not depend on which other trials ran or in what
//! order. All methods within a trial share the split and the evaluation
//! variates.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{outcomes, DifficultyRow, EvalReport, Strata, StratumRow};
use crate::conformal::{calibrate, ConformalModel, Method, MethodSpec};
use crate::error::{Error, Result};
use crate::platt::{fit_temperature, Bracket};
use crate::score_store::{softmax, sort_scores, ScoreKind, ScoreMatrix, SortedScores, SplitSpec};
use crate::seeding::{self, stream, UStream};
use crate::tuning::{self, make_fixed_k_model, Objective};

/// Temperature-scaling step applied to logit input before set construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Platt {
    /// Plain softmax (`T = 1`) for logits; probabilities pass through.
    Off,
    /// Fit `T` on the calibration split.
    FitCalibration(Bracket),
    /// Fit `T` on the tuning split, keeping calibration data untouched.
    FitTuning(Bracket),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Protocol {
    pub n_trials: usize,
    pub tune: usize,
    pub calibration: usize,
    pub evaluation: usize,
    pub seed: u64,
    pub platt: Platt,
    pub strata: Strata,
    pub bins: Strata,
    /// Worker threads; results do not depend on this.
    pub threads: usize,
}

impl Protocol {
    pub fn new(
        n_trials: usize,
        tune: usize,
        calibration: usize,
        evaluation: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_trials,
            tune,
            calibration,
            evaluation,
            seed,
            platt: Platt::Off,
            strata: Strata::default_sizes(),
            bins: Strata::default_difficulty(),
            threads: 1,
        }
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        seeding::derive(self.seed, &[stream::TRIAL, trial as u64])
    }
}

/// How `raps` hyperparameters are chosen in each trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RapsPolicy {
    /// Use `lambda` and `k_reg` from the spec as given.
    Fixed,
    /// Tune `lambda` on the tuning split; `k_reg` defaults to its `k*`.
    Tuned {
        objective: Objective,
        grid: Vec<f64>,
        k_reg: Option<usize>,
    },
}

/// One column group of the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodPlan {
    pub name: String,
    pub spec: MethodSpec,
    pub policy: RapsPolicy,
}

impl MethodPlan {
    pub fn new(spec: MethodSpec) -> Self {
        Self {
            name: spec.method.title().to_string(),
            spec,
            policy: RapsPolicy::Fixed,
        }
    }

    pub fn tuned(
        spec: MethodSpec,
        objective: Objective,
        grid: Vec<f64>,
        k_reg: Option<usize>,
    ) -> Self {
        Self {
            policy: RapsPolicy::Tuned {
                objective,
                grid,
                k_reg,
            },
            ..Self::new(spec)
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Hyperparameters a method ended up with in one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialMetrics {
    pub coverage: f64,
    pub avg_size: f64,
    pub sscv: f64,
    pub tau_hat: f64,
    pub lambda: f64,
    pub k_reg: usize,
    pub k_star: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutput {
    pub trial: usize,
    pub seed: u64,
    pub temperature: Option<f64>,
    pub top1: f64,
    pub top5: f64,
    pub methods: Vec<(TrialMetrics, EvalReport)>,
}

fn to_probabilities(m: ScoreMatrix, temperature: f64) -> Result<ScoreMatrix> {
    match m.kind() {
        ScoreKind::Probabilities => Ok(m),
        ScoreKind::Logits => softmax(&m, temperature),
    }
}

fn fit_on(m: Option<&ScoreMatrix>, bracket: Bracket, what: &str) -> Result<f64> {
    let m = m.ok_or_else(|| {
        Error::InvalidParameter(format!("temperature fitting needs a nonempty {what} split"))
    })?;
    if m.kind() != ScoreKind::Logits {
        return Err(Error::WrongKind { expected: "logit" });
    }
    Ok(fit_temperature(m, bracket)?.temperature)
}

fn build_model(
    plan: &MethodPlan,
    tune: Option<&SortedScores>,
    cal: &SortedScores,
    protocol: &Protocol,
    seed: u64,
) -> Result<ConformalModel> {
    let spec = plan.spec;
    match spec.method {
        Method::Naive => ConformalModel::naive(spec, cal.classes()),
        Method::FixedK => make_fixed_k_model(cal, &spec, seed),
        Method::Raps => match &plan.policy {
            RapsPolicy::Fixed => calibrate(cal, &spec, seed),
            RapsPolicy::Tuned {
                objective,
                grid,
                k_reg,
            } => {
                let tune = tune.ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "{} tunes lambda and needs a nonempty tuning split",
                        plan.name
                    ))
                })?;
                let tuned = tuning::tune(
                    tune,
                    &spec,
                    *objective,
                    grid,
                    &protocol.strata,
                    seeding::derive(seed, &[stream::TUNING]),
                    *k_reg,
                )?;
                calibrate(cal, &tuned.spec(&spec), seed)
            }
        },
        Method::Aps | Method::Lac => calibrate(cal, &spec, seed),
    }
}

/// Runs trial `trial` of `protocol` for every plan.
pub fn run_trial(
    m: &ScoreMatrix,
    protocol: &Protocol,
    plans: &[MethodPlan],
    trial: usize,
) -> Result<TrialOutput> {
    let seed = protocol.trial_seed(trial);
    let split = SplitSpec {
        seed,
        tune: protocol.tune,
        calibration: protocol.calibration,
        evaluation: protocol.evaluation,
    };
    let [tune_idx, cal_idx, eval_idx] = split.indices(m.n())?;
    if cal_idx.is_empty() || eval_idx.is_empty() {
        return Err(Error::InvalidParameter(
            "calibration and evaluation splits must be nonempty".into(),
        ));
    }
    let tune = (!tune_idx.is_empty()).then(|| m.select(&tune_idx));
    let cal = m.select(&cal_idx);
    let eval = m.select(&eval_idx);

    let temperature = match (m.kind(), protocol.platt) {
        (ScoreKind::Probabilities, Platt::Off) => None,
        (ScoreKind::Probabilities, _) => return Err(Error::WrongKind { expected: "logit" }),
        (ScoreKind::Logits, Platt::Off) => Some(1.0),
        (ScoreKind::Logits, Platt::Fixed(t)) => Some(t),
        (ScoreKind::Logits, Platt::FitCalibration(b)) => {
            Some(fit_on(Some(&cal), b, "calibration")?)
        }
        (ScoreKind::Logits, Platt::FitTuning(b)) => Some(fit_on(tune.as_ref(), b, "tuning")?),
    };
    let t = temperature.unwrap_or(1.0);
    let tune = tune.map(|x| to_probabilities(x, t)).transpose()?;
    let cal = to_probabilities(cal, t)?;
    let eval = to_probabilities(eval, t)?;

    let top1 = eval.top_k_accuracy(1);
    let top5 = eval.top_k_accuracy(5);
    let tie_seed = seeding::derive(seed, &[stream::TIES]);
    let tune = tune
        .map(|x| sort_scores(&x, seeding::derive(tie_seed, &[0])))
        .transpose()?;
    let cal = sort_scores(&cal, seeding::derive(tie_seed, &[1]))?;
    let eval = sort_scores(&eval, seeding::derive(tie_seed, &[2]))?;
    let eval_u = UStream::new(seed, stream::EVALUATION_U);
    let strata = protocol.strata.covering(m.classes());

    let methods = plans
        .iter()
        .map(|plan| {
            let model = build_model(plan, tune.as_ref(), &cal, protocol, seed)?;
            let outs = outcomes(&model, &eval, eval_u)?;
            let report = EvalReport::from_outcomes(
                &outs,
                eval.label_ranks(),
                &strata,
                &protocol.bins,
                plan.spec.alpha,
            )?;
            let metrics = TrialMetrics {
                coverage: report.coverage,
                avg_size: report.avg_size,
                sscv: report.sscv,
                tau_hat: model.tau_hat,
                lambda: model.spec.lambda,
                k_reg: model.spec.k_reg,
                k_star: model.k_star,
            };
            Ok((metrics, report))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialOutput {
        trial,
        seed,
        temperature,
        top1,
        top5,
        methods,
    })
}

/// Runs all trials, in parallel when `protocol.threads > 1`, and aggregates.
pub fn run_trials(
    m: &ScoreMatrix,
    protocol: &Protocol,
    plans: &[MethodPlan],
) -> Result<TrialAggregate> {
    if protocol.n_trials == 0 {
        return Err(Error::InvalidParameter(
            "at least one trial is required".into(),
        ));
    }
    if plans.is_empty() {
        return Err(Error::InvalidParameter("no methods requested".into()));
    }
    for plan in plans {
        plan.spec.validate()?;
    }
    let threads = protocol.threads.clamp(1, protocol.n_trials);
    let outputs = if threads == 1 {
        (0..protocol.n_trials)
            .map(|t| run_trial(m, protocol, plans, t))
            .collect::<Result<Vec<_>>>()?
    } else {
        let per_worker: Vec<Result<Vec<TrialOutput>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    s.spawn(move || {
                        (w..protocol.n_trials)
                            .step_by(threads)
                            .map(|t| run_trial(m, protocol, plans, t))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("trial worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(protocol.n_trials);
        for chunk in per_worker {
            all.extend(chunk?);
        }
        all
    };
    Ok(TrialAggregate::new(plans, outputs))
}

/// Median of `values`; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// One method's results across trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodAggregate {
    pub name: String,
    pub spec: MethodSpec,
    pub trials: Vec<TrialMetrics>,
    pub coverage: f64,
    pub avg_size: f64,
    pub sscv: f64,
    /// Histograms, strata and difficulty rows pooled over all trials.
    pub size_hist: BTreeMap<usize, usize>,
    pub per_stratum: Vec<StratumRow>,
    pub per_difficulty: Vec<DifficultyRow>,
}

impl MethodAggregate {
    pub fn coverages(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.coverage).collect()
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.avg_size).collect()
    }

    pub fn sscvs(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.sscv).collect()
    }
}

/// Median-of-means summary of a multi-trial run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialAggregate {
    pub n_trials: usize,
    pub top1: f64,
    pub top5: f64,
    pub temperatures: Vec<Option<f64>>,
    pub methods: Vec<MethodAggregate>,
}

impl TrialAggregate {
    /// Aggregates `outputs` (in any order) for `plans`.
    pub fn new(plans: &[MethodPlan], mut outputs: Vec<TrialOutput>) -> Self {
        outputs.sort_by_key(|o| o.trial);
        let top1: Vec<f64> = outputs.iter().map(|o| o.top1).collect();
        let top5: Vec<f64> = outputs.iter().map(|o| o.top5).collect();
        let methods = plans
            .iter()
            .enumerate()
            .map(|(j, plan)| {
                let reports: Vec<&(TrialMetrics, EvalReport)> =
                    outputs.iter().map(|o| &o.methods[j]).collect();
                let trials: Vec<TrialMetrics> = reports.iter().map(|r| r.0).collect();
                let mut size_hist = BTreeMap::new();
                let mut per_stratum = reports[0].1.per_stratum.clone();
                let mut per_difficulty = reports[0].1.per_difficulty.clone();
                per_stratum
                    .iter_mut()
                    .for_each(|r| (r.count, r.covered) = (0, 0));
                per_difficulty
                    .iter_mut()
                    .for_each(|r| (r.count, r.covered, r.total_size) = (0, 0, 0));
                for (_, report) in &reports {
                    for (size, count) in &report.size_hist {
                        *size_hist.entry(*size).or_insert(0) += count;
                    }
                    for (acc, row) in per_stratum.iter_mut().zip(&report.per_stratum) {
                        acc.count += row.count;
                        acc.covered += row.covered;
                    }
                    for (acc, row) in per_difficulty.iter_mut().zip(&report.per_difficulty) {
                        acc.count += row.count;
                        acc.covered += row.covered;
                        acc.total_size += row.total_size;
                    }
                }
                let pick =
                    |f: fn(&TrialMetrics) -> f64| median(&trials.iter().map(f).collect::<Vec<_>>());
                MethodAggregate {
                    name: plan.name.clone(),
                    spec: plan.spec,
                    coverage: pick(|t| t.coverage),
                    avg_size: pick(|t| t.avg_size),
                    sscv: pick(|t| t.sscv),
                    trials,
                    size_hist,
                    per_stratum,
                    per_difficulty,
                }
            })
            .collect();
        Self {
            n_trials: outputs.len(),
            top1: median(&top1),
            top5: median(&top5),
            temperatures: outputs.iter().map(|o| o.temperature).collect(),
            methods,
        }
    }
}

/// `lambda` values of the reference parameter sweep.
pub const SWEEP_LAMBDAS: [f64; 10] = [0.0, 1e-4, 1e-3, 0.01, 0.02, 0.05, 0.2, 0.5, 0.7, 1.0];
/// `k_reg` values of the reference parameter sweep.
pub const SWEEP_K_REGS: [usize; 5] = [1, 2, 5, 10, 50];

/// Median set size and coverage of fixed-parameter `raps` over a
/// `k_reg` × `lambda` grid; `sizes[i][j]` belongs to `k_regs[i]`, `lambdas[j]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepGrid {
    pub alpha: f64,
    pub lambdas: Vec<f64>,
    pub k_regs: Vec<usize>,
    pub sizes: Vec<Vec<f64>>,
    pub coverages: Vec<Vec<f64>>,
}

pub fn sweep(
    m: &ScoreMatrix,
    protocol: &Protocol,
    base: &MethodSpec,
    lambdas: &[f64],
    k_regs: &[usize],
) -> Result<SweepGrid> {
    if lambdas.is_empty() || k_regs.is_empty() {
        return Err(Error::InvalidParameter("sweep grid is empty".into()));
    }
    let mut plans = Vec::with_capacity(lambdas.len() * k_regs.len());
    for &k_reg in k_regs {
        for &lambda in lambdas {
            let spec = MethodSpec {
                method: Method::Raps,
                lambda,
                k_reg,
                ..*base
            };
            plans.push(MethodPlan::new(spec).named(format!("k_reg={k_reg} lambda={lambda}")));
        }
    }
    let agg = run_trials(m, protocol, &plans)?;
    let grid = |f: fn(&MethodAggregate) -> f64| {
        agg.methods
            .chunks(lambdas.len())
            .map(|row| row.iter().map(f).collect())
            .collect()
    };
    Ok(SweepGrid {
        alpha: base.alpha,
        lambdas: lambdas.to_vec(),
        k_regs: k_regs.to_vec(),
        sizes: grid(|a| a.avg_size),
        coverages: grid(|a| a.coverage),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(n: usize, classes: usize, seed: u64) -> ScoreMatrix {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let row: Vec<f64> = (0..classes)
                .map(|j| 3.0 * seeding::uniform(seed, &[i as u64, j as u64]))
                .collect();
            let label = (0..classes)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .filter(|_| seeding::uniform(seed, &[i as u64, 777]) < 0.6)
                .unwrap_or(i % classes);
            scores.extend(row);
            labels.push(label);
        }
        ScoreMatrix::new(classes, scores, labels, ScoreKind::Logits).unwrap()
    }

    fn plans() -> Vec<MethodPlan> {
        Method::ALL
            .iter()
            .map(|&m| MethodPlan::new(MethodSpec::new(m, 0.1).unwrap()))
            .collect()
    }

    #[test]
    fn median_of_means() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn single_trial_aggregate_equals_trial() {
        let m = problem(600, 8, 1);
        let mut protocol = Protocol::new(1, 0, 200, 400, 5);
        protocol.platt = Platt::FitCalibration(Bracket::default());
        let agg = run_trials(&m, &protocol, &plans()).unwrap();
        let single = run_trial(&m, &protocol, &plans(), 0).unwrap();
        for (a, (metrics, report)) in agg.methods.iter().zip(&single.methods) {
            assert_eq!(a.coverage, metrics.coverage);
            assert_eq!(a.avg_size, metrics.avg_size);
            assert_eq!(a.size_hist, report.size_hist);
        }
        assert_eq!(agg.top1, single.top1);
    }

    #[test]
    fn trial_order_and_threads_do_not_matter() {
        let m = problem(500, 6, 2);
        let mut protocol = Protocol::new(6, 100, 150, 200, 9);
        let mut p = plans();
        p.push(
            MethodPlan::tuned(
                MethodSpec::new(Method::Raps, 0.1).unwrap(),
                Objective::Size,
                vec![0.01, 0.1],
                None,
            )
            .named("RAPS tuned"),
        );
        let forward = run_trials(&m, &protocol, &p).unwrap();
        let reversed: Vec<_> = (0..6)
            .rev()
            .map(|t| run_trial(&m, &protocol, &p, t).unwrap())
            .collect();
        assert_eq!(TrialAggregate::new(&p, reversed), forward);
        protocol.threads = 4;
        assert_eq!(run_trials(&m, &protocol, &p).unwrap(), forward);
    }

    #[test]
    fn sweep_has_grid_shape_and_lambda_zero_matches_aps() {
        let m = problem(400, 6, 4);
        let protocol = Protocol::new(2, 0, 150, 200, 3);
        let base = MethodSpec::new(Method::Raps, 0.1).unwrap();
        let grid = sweep(&m, &protocol, &base, &SWEEP_LAMBDAS, &SWEEP_K_REGS).unwrap();
        assert_eq!(grid.sizes.len(), 5);
        assert!(grid.sizes.iter().all(|r| r.len() == 10));
        let aps = run_trials(
            &m,
            &protocol,
            &[MethodPlan::new(MethodSpec::new(Method::Aps, 0.1).unwrap())],
        )
        .unwrap();
        assert!(grid.sizes.iter().all(|r| r[0] == aps.methods[0].avg_size));
    }

    #[test]
    fn infeasible_and_inconsistent_setups_fail() {
        let m = problem(100, 4, 3);
        let protocol = Protocol::new(2, 0, 80, 80, 1);
        assert!(matches!(
            run_trials(&m, &protocol, &plans()),
            Err(Error::InfeasibleSplit { .. })
        ));
        let protocol = Protocol::new(2, 0, 40, 40, 1);
        let tuned = vec![MethodPlan::tuned(
            MethodSpec::new(Method::Raps, 0.1).unwrap(),
            Objective::Size,
            vec![0.1],
            None,
        )];
        assert!(run_trials(&m, &protocol, &tuned).is_err());
    }
}
