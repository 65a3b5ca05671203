use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use cpsets::conformal::{calibrate, check_alpha};
use cpsets::eval::{
    self, outcomes, run_trials, sweep, EvalReport, MethodPlan, Platt, Protocol, Strata,
    SWEEP_K_REGS, SWEEP_LAMBDAS,
};
use cpsets::platt::{fit_temperature, Bracket};
use cpsets::report;
use cpsets::score_store::{load_scores, save_scores, softmax, sort_scores, FileFormat};
use cpsets::seeding::{self, stream, UStream};
use cpsets::synth::{self, Corruption, SynthSpec};
use cpsets::tuning::{self, make_fixed_k_model, Objective};
use cpsets::{ConformalModel, Method, MethodSpec, ScoreKind, ScoreMatrix};

use crate::error::{usage, CliError};
use crate::settings::Settings;

type CliResult<T = ()> = Result<T, CliError>;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_K_REG: usize = 5;
pub const DEFAULT_TRIALS: usize = 100;
pub const DEFAULT_TUNE_SIZE: usize = 1000;
pub const DEFAULT_CAL_SIZE: usize = 1000;

/// Settings parsed and checked before any file is touched.
struct Params {
    alpha: f64,
    seed: u64,
    format: Option<FileFormat>,
    strata: Strata,
    bins: Strata,
    bracket: Bracket,
    objective: Option<Objective>,
    grid: Option<Vec<f64>>,
    platt: PlattMode,
}

#[derive(Clone, Copy, PartialEq)]
enum PlattMode {
    Auto,
    Off,
    Calibration,
    Tuning,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| CliError::Usage(format!("bad {what} value {p:?}")))
        })
        .collect()
}

impl Params {
    fn new(s: &Settings) -> CliResult<Self> {
        let alpha = s.alpha.unwrap_or(DEFAULT_ALPHA);
        check_alpha(alpha).map_err(usage)?;
        let format = s
            .format
            .as_deref()
            .map(str::parse)
            .transpose()
            .map_err(usage)?;
        let strata = match &s.strata {
            Some(text) => text.parse().map_err(usage)?,
            None => Strata::default_sizes(),
        };
        let bins = match &s.bins {
            Some(text) => text.parse().map_err(usage)?,
            None => Strata::default_difficulty(),
        };
        let bracket = Bracket {
            t_lo: s.t_lo.unwrap_or(cpsets::platt::DEFAULT_T_LO),
            t_hi: s.t_hi.unwrap_or(cpsets::platt::DEFAULT_T_HI),
            tol: s.t_tol.unwrap_or(cpsets::platt::DEFAULT_TOL),
        };
        bracket.validate().map_err(usage)?;
        if let Some(t) = s.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Usage(format!(
                    "temperature must be positive, got {t}"
                )));
            }
        }
        let objective = match s.tune_objective.as_deref() {
            None => Some(Objective::Size),
            Some("none") => None,
            Some(o) => Some(o.parse().map_err(usage)?),
        };
        let grid = s
            .lambda_grid
            .as_deref()
            .map(|g| parse_list(g, "lambda"))
            .transpose()?;
        if let Some(g) = &grid {
            if g.is_empty() || g.iter().any(|l: &f64| !(l.is_finite() && *l >= 0.0)) {
                return Err(CliError::Usage(
                    "lambda grid must be nonempty and nonnegative".into(),
                ));
            }
        }
        if let Some(l) = s.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(CliError::Usage(format!(
                    "lambda must be nonnegative, got {l}"
                )));
            }
        }
        if s.k_reg == Some(0) {
            return Err(CliError::Usage("k_reg must be at least 1".into()));
        }
        let platt = match s.platt.as_deref().unwrap_or("auto") {
            "auto" => PlattMode::Auto,
            "off" => PlattMode::Off,
            "calibration" => PlattMode::Calibration,
            "tuning" => PlattMode::Tuning,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown --platt {other:?} (expected auto, off, calibration or tuning)"
                )))
            }
        };
        Ok(Self {
            alpha,
            seed: s.seed.unwrap_or(0),
            format,
            strata,
            bins,
            bracket,
            objective,
            grid,
            platt,
        })
    }

    fn method_spec(&self, s: &Settings, method: Method) -> CliResult<MethodSpec> {
        let mut spec = MethodSpec::new(method, self.alpha).map_err(usage)?;
        if method == Method::Raps {
            spec.lambda = s.lambda.unwrap_or(DEFAULT_LAMBDA);
            spec.k_reg = s.k_reg.unwrap_or(DEFAULT_K_REG);
        }
        if s.deterministic {
            spec = spec.deterministic();
        }
        Ok(spec)
    }

    fn load(&self, path: &Path) -> CliResult<ScoreMatrix> {
        let format = self.format.unwrap_or_else(|| FileFormat::from_path(path));
        Ok(load_scores(path, format)?)
    }
}

fn parse_method(s: &Settings) -> CliResult<Method> {
    s.method.as_deref().unwrap_or("raps").parse().map_err(usage)
}

fn require_out(s: &Settings) -> CliResult<&Path> {
    s.out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required".into()))
}

/// Creates `dir` and records the settings used there.
fn prepare_out(dir: &Path, command: &str, s: &Settings) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let text = format!("# cpsets {command}\n{}", s.to_toml());
    write_file(&dir.join("config.toml"), &text)
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Converts logits to probabilities: a given `--temperature` wins, otherwise
/// `T` is fitted on `m` itself unless temperature scaling is off.
fn to_probabilities(
    m: ScoreMatrix,
    s: &Settings,
    p: &Params,
) -> CliResult<(ScoreMatrix, Option<f64>)> {
    match m.kind() {
        ScoreKind::Probabilities => {
            if s.temperature.is_some() {
                return Err(CliError::Data(cpsets::Error::WrongKind {
                    expected: "logit",
                }));
            }
            Ok((m, None))
        }
        ScoreKind::Logits => {
            let t = match (s.temperature, p.platt) {
                (Some(t), _) => t,
                (None, PlattMode::Off) => 1.0,
                (None, _) => fit_temperature(&m, p.bracket)?.temperature,
            };
            Ok((softmax(&m, t)?, Some(t)))
        }
    }
}

pub fn ingest(s: &Settings) -> CliResult {
    let p = Params::new(s)?;
    let input = s.require_input()?;
    let out = require_out(s)?;
    let m = p.load(input)?;
    prepare_out(out, "ingest", s)?;
    save_scores(&m, &out.join("scores.bin"), FileFormat::Binary)?;
    println!(
        "rows={} classes={} kind={} top1={:.4} top5={:.4}",
        m.n(),
        m.classes(),
        m.kind().as_str(),
        m.top_k_accuracy(1),
        m.top_k_accuracy(5)
    );
    Ok(())
}

pub fn synth(s: &Settings) -> CliResult {
    Params::new(s)?;
    let out = require_out(s)?;
    let classes = s.classes.unwrap_or(100);
    let corruption: Corruption = s
        .corruption
        .as_deref()
        .unwrap_or("none")
        .parse()
        .map_err(usage)?;
    let mut spec = SynthSpec::new(
        s.n.unwrap_or(10_000),
        classes,
        corruption,
        s.seed.unwrap_or(0),
    )
    .with_hard_rows(s.hard_fraction.unwrap_or(0.0), s.hard_concentration);
    if let Some(c) = s.concentration {
        spec.concentration = c;
    }
    spec.validate().map_err(usage)?;
    let (truth, observed) = synth::generate(&spec)?;
    prepare_out(out, "synth", s)?;
    save_scores(&truth, &out.join("truth.bin"), FileFormat::Binary)?;
    save_scores(&observed, &out.join("scores.bin"), FileFormat::Binary)?;
    let manifest = toml::to_string(&spec).expect("synth spec serializes");
    write_file(&out.join("manifest.toml"), &manifest)?;
    println!(
        "rows={} classes={} corruption={}",
        spec.n, spec.classes, spec.corruption
    );
    Ok(())
}

pub fn fit_temp(s: &Settings) -> CliResult {
    let p = Params::new(s)?;
    let input = s.require_input()?;
    let m = p.load(input)?;
    let fit = fit_temperature(&m, p.bracket)?;
    let line = format!(
        "temperature={} nll_before={} nll_after={} iterations={}",
        fit.temperature, fit.nll_before, fit.nll_after, fit.iterations
    );
    if let Some(out) = &s.out {
        prepare_out(out, "fit-temp", s)?;
        let text = toml::to_string(&fit).expect("fit serializes");
        write_file(&out.join("temperature.toml"), &text)?;
    }
    println!("{line}");
    Ok(())
}

pub fn tune(s: &Settings) -> CliResult {
    let p = Params::new(s)?;
    let objective = p.objective.ok_or_else(|| {
        CliError::Usage("tune needs --tune-objective size or adaptiveness".into())
    })?;
    let input = s.require_input()?;
    let base = p.method_spec(s, Method::Raps)?;
    let grid = p.grid.clone().unwrap_or_else(|| objective.default_grid());
    let (m, _) = to_probabilities(p.load(input)?, s, &p)?;
    let sorted = sort_scores(&m, seeding::derive(p.seed, &[stream::TIES]))?;
    let strata = p.strata.covering(m.classes());
    let result = tuning::tune(&sorted, &base, objective, &grid, &strata, p.seed, s.k_reg)?;
    if let Some(out) = &s.out {
        prepare_out(out, "tune", s)?;
        let text = toml::to_string(&result).expect("tune result serializes");
        write_file(&out.join("tune.toml"), &text)?;
    }
    println!(
        "objective={} k_star={} k_reg={} lambda={}",
        result.objective, result.k_star, result.k_reg, result.lambda
    );
    Ok(())
}

pub fn calibrate_cmd(s: &Settings) -> CliResult {
    let p = Params::new(s)?;
    let method = parse_method(s)?;
    let spec = p.method_spec(s, method)?;
    let input = s.require_input()?;
    let out = require_out(s)?;
    let (m, temperature) = to_probabilities(p.load(input)?, s, &p)?;
    let sorted = sort_scores(&m, seeding::derive(p.seed, &[stream::TIES]))?;
    let mut model = match method {
        Method::Naive => ConformalModel::naive(spec, m.classes())?,
        Method::FixedK => make_fixed_k_model(&sorted, &spec, p.seed)?,
        _ => calibrate(&sorted, &spec, p.seed)?,
    };
    model.seed = p.seed;
    model.temperature = temperature;
    prepare_out(out, "calibrate", s)?;
    write_file(&out.join("model.toml"), &model.to_toml())?;
    println!(
        "method={} tau_hat={} n_cal={}",
        model.method(),
        model.tau_hat,
        model.n_cal
    );
    Ok(())
}

fn load_model(path: &Path) -> CliResult<ConformalModel> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(ConformalModel::from_toml(&text)?)
}

/// Scores in `input` prepared the way `model` was calibrated.
fn model_inputs(
    s: &Settings,
    p: &Params,
    input: &Path,
    model: &mut ConformalModel,
) -> CliResult<cpsets::SortedScores> {
    let m = p.load(input)?;
    model.check_classes(m.classes())?;
    let m = match m.kind() {
        ScoreKind::Probabilities => m,
        ScoreKind::Logits => softmax(&m, s.temperature.or(model.temperature).unwrap_or(1.0))?,
    };
    if s.deterministic {
        model.spec.randomized = false;
    }
    // Ties are ordered by the model's own seed so --seed only moves the variates.
    Ok(sort_scores(
        &m,
        seeding::derive(model.seed, &[stream::TIES]),
    )?)
}

pub fn predict(s: &Settings) -> CliResult {
    let p = Params::new(s)?;
    let model_path = s.require_model()?;
    let input = s.require_input()?;
    let mut model = load_model(model_path)?;
    let sorted = model_inputs(s, &p, input, &mut model)?;
    let us = UStream::new(s.seed.unwrap_or(model.seed), stream::EVALUATION_U);
    let sets = model.predict_all(&sorted, us)?;

    let (mut sink, path): (Box<dyn Write>, PathBuf) = match &s.out {
        Some(out) => {
            prepare_out(out, "predict", s)?;
            let path = out.join("predictions.csv");
            let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            (Box::new(BufWriter::new(file)), path)
        }
        None => (
            Box::new(BufWriter::new(io::stdout().lock())),
            PathBuf::from("<stdout>"),
        ),
    };
    let mut write = || -> io::Result<()> {
        for (i, set) in sets.iter().enumerate() {
            write!(sink, "{},{}", i, set.len())?;
            for c in &set.classes {
                write!(sink, ",{c}")?;
            }
            writeln!(sink)?;
        }
        sink.flush()
    };
    match write() {
        // A closed downstream pipe (e.g. `| head`) is not a failure.
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => r.map_err(|e| CliError::io(&path, e)),
    }
}

pub fn evaluate(s: &Settings) -> CliResult {
    let p = Params::new(s)?;
    let model_path = s.require_model()?;
    let input = s.require_input()?;
    let mut model = load_model(model_path)?;
    let sorted = model_inputs(s, &p, input, &mut model)?;
    let us = UStream::new(s.seed.unwrap_or(model.seed), stream::EVALUATION_U);
    let outs = outcomes(&model, &sorted, us)?;
    let strata = p.strata.covering(sorted.classes());
    let r = EvalReport::from_outcomes(
        &outs,
        sorted.label_ranks(),
        &strata,
        &p.bins,
        model.spec.alpha,
    )?;
    if let Some(out) = &s.out {
        prepare_out(out, "evaluate", s)?;
        let metrics = format!(
            "method,n,coverage,size,sscv\n{},{},{},{},{}\n",
            model.method(),
            r.n_eval,
            r.coverage,
            r.avg_size,
            r.sscv
        );
        write_file(&out.join("metrics.csv"), &metrics)?;
        let mut strata_csv = String::from("lo,hi,count,coverage\n");
        for row in &r.per_stratum {
            let cov = row.coverage().map_or_else(String::new, |c| c.to_string());
            strata_csv.push_str(&format!(
                "{},{},{},{}\n",
                row.range.lo, row.range.hi, row.count, cov
            ));
        }
        write_file(&out.join("strata.csv"), &strata_csv)?;
        let mut diff_csv = String::from("lo,hi,count,coverage,size\n");
        for row in &r.per_difficulty {
            let cov = row.coverage().map_or_else(String::new, |c| c.to_string());
            let size = row.avg_size().map_or_else(String::new, |c| c.to_string());
            diff_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                row.range.lo, row.range.hi, row.count, cov, size
            ));
        }
        write_file(&out.join("difficulty.csv"), &diff_csv)?;
        let mut hist = String::from("size,count\n");
        for (size, count) in &r.size_hist {
            hist.push_str(&format!("{size},{count}\n"));
        }
        write_file(&out.join("histogram.csv"), &hist)?;
    }
    println!(
        "method={} n={} coverage={:.4} size={:.3} sscv={:.4}",
        model.method(),
        r.n_eval,
        r.coverage,
        r.avg_size,
        r.sscv
    );
    Ok(())
}

fn experiment_plans(s: &Settings, p: &Params) -> CliResult<Vec<MethodPlan>> {
    let methods: Vec<Method> = match &s.methods {
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|m| !m.is_empty())
            .map(|m| m.parse().map_err(usage))
            .collect::<CliResult<_>>()?,
        None => Method::ALL.to_vec(),
    };
    if methods.is_empty() {
        return Err(CliError::Usage("--methods lists no methods".into()));
    }
    methods
        .into_iter()
        .map(|method| {
            let spec = p.method_spec(s, method)?;
            Ok(match (method, p.objective, s.lambda) {
                (Method::Raps, Some(objective), None) => {
                    let grid = p.grid.clone().unwrap_or_else(|| objective.default_grid());
                    MethodPlan::tuned(spec, objective, grid, s.k_reg)
                }
                _ => MethodPlan::new(spec),
            })
        })
        .collect()
}

fn hist_name(plan_name: &str) -> String {
    let slug: String = plan_name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("hist_{slug}.csv")
}

pub fn experiment(s: &Settings) -> CliResult {
    let p = Params::new(s)?;
    let plans = experiment_plans(s, &p)?;
    let input = s.require_input()?;
    let out = require_out(s)?;
    let trials = s.trials.unwrap_or(DEFAULT_TRIALS);
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let needs_tuning = plans
        .iter()
        .any(|pl| matches!(pl.policy, eval::RapsPolicy::Tuned { .. }));
    let tune_size = s
        .tune_size
        .unwrap_or(if needs_tuning || p.platt == PlattMode::Tuning {
            DEFAULT_TUNE_SIZE
        } else {
            0
        });
    let cal_size = s.cal_size.unwrap_or(DEFAULT_CAL_SIZE);

    let m = p.load(input)?;
    let eval_size = match s.eval_size {
        Some(e) => e,
        None => m
            .n()
            .checked_sub(tune_size + cal_size)
            .filter(|&e| e > 0)
            .ok_or_else(|| {
                CliError::Data(cpsets::Error::InfeasibleSplit {
                    requested: tune_size + cal_size + 1,
                    available: m.n(),
                })
            })?,
    };
    let mut protocol = Protocol::new(trials, tune_size, cal_size, eval_size, p.seed);
    protocol.strata = p.strata.clone();
    protocol.bins = p.bins.clone();
    protocol.threads = s
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
    protocol.platt = match (m.kind(), s.temperature, p.platt) {
        (ScoreKind::Probabilities, None, PlattMode::Auto) => Platt::Off,
        (_, Some(t), _) => Platt::Fixed(t),
        (_, None, PlattMode::Off) => Platt::Off,
        (_, None, PlattMode::Auto | PlattMode::Calibration) => Platt::FitCalibration(p.bracket),
        (_, None, PlattMode::Tuning) => Platt::FitTuning(p.bracket),
    };

    let agg = run_trials(&m, &protocol, &plans)?;
    let name = s.model_name.clone().unwrap_or_else(|| {
        input.file_stem().map_or_else(
            || "scores".to_string(),
            |x| x.to_string_lossy().into_owned(),
        )
    });
    let mut text = report::summary_table(&agg, &name);
    text.push_str("\nCoverage by set size\n");
    text.push_str(&report::stratified_table(&agg));
    text.push_str("\nCoverage and size by difficulty\n");
    text.push_str(&report::difficulty_table(&agg));

    prepare_out(out, "experiment", s)?;
    write_file(&out.join("summary.csv"), &report::summary_csv(&agg, &name))?;
    write_file(&out.join("trials.csv"), &report::trials_csv(&agg))?;
    write_file(&out.join("strata.csv"), &report::stratified_csv(&agg))?;
    write_file(&out.join("difficulty.csv"), &report::difficulty_csv(&agg))?;
    for method in &agg.methods {
        write_file(
            &out.join(hist_name(&method.name)),
            &report::histogram_csv(method),
        )?;
    }
    if s.sweep {
        let base = p.method_spec(s, Method::Raps)?;
        let grid = sweep(&m, &protocol, &base, &SWEEP_LAMBDAS, &SWEEP_K_REGS)?;
        text.push_str("\nRAPS set size by k_reg and lambda\n");
        text.push_str(&report::sweep_table(&grid));
        write_file(&out.join("sweep.csv"), &report::sweep_csv(&grid))?;
    }
    write_file(&out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}
