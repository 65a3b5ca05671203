//! Run settings: command-line flags layered over an optional TOML config
//! file, layered over built-in defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every setting any subcommand reads. Keys in a config file are the long
/// flag names with `-` replaced by `_`.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// TOML file providing defaults for any flag below
    #[arg(long, help_heading = "Input/output")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Score file (CSV or binary)
    #[arg(long, short, help_heading = "Input/output")]
    pub input: Option<PathBuf>,
    /// Score file format: csv or binary (default: from extension)
    #[arg(long, help_heading = "Input/output")]
    pub format: Option<String>,
    /// Output directory
    #[arg(long, short, help_heading = "Input/output")]
    pub out: Option<PathBuf>,
    /// Model file written by `calibrate`
    #[arg(long, help_heading = "Input/output")]
    pub model: Option<PathBuf>,
    /// Row label used in the summary table
    #[arg(long, help_heading = "Input/output")]
    pub model_name: Option<String>,

    /// Miscoverage level; sets target coverage 1 - alpha
    #[arg(long, help_heading = "Method")]
    pub alpha: Option<f64>,
    /// Set family: naive, aps, raps, lac or fixed_k
    #[arg(long, help_heading = "Method")]
    pub method: Option<String>,
    /// Comma-separated set families for `experiment`
    #[arg(long, help_heading = "Method")]
    pub methods: Option<String>,
    /// RAPS rank penalty; giving it disables lambda tuning
    #[arg(long, help_heading = "Method")]
    pub lambda: Option<f64>,
    /// RAPS rank from which the penalty applies (overrides k* when tuning)
    #[arg(long, help_heading = "Method")]
    pub k_reg: Option<usize>,
    /// Use non-randomized sets
    #[arg(long, help_heading = "Method")]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub deterministic: bool,

    /// Lambda selection objective: size, adaptiveness or none
    #[arg(long, help_heading = "Tuning")]
    pub tune_objective: Option<String>,
    /// Comma-separated lambda candidates (default depends on the objective)
    #[arg(long, help_heading = "Tuning")]
    pub lambda_grid: Option<String>,
    /// Set-size strata, e.g. 0-1,2-3,4-10,11-100,101-1000
    #[arg(long, help_heading = "Tuning")]
    pub strata: Option<String>,
    /// Difficulty bins, e.g. 1,2-3,4-6,7-10,11-100,101-1000
    #[arg(long, help_heading = "Tuning")]
    pub bins: Option<String>,

    /// Master seed; every random draw derives from it
    #[arg(long, help_heading = "Experiment")]
    #[serde(default, with = "opt_seed", skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of random-split trials
    #[arg(long, help_heading = "Experiment")]
    pub trials: Option<usize>,
    /// Rows per trial used for lambda tuning and k*
    #[arg(long, help_heading = "Experiment")]
    pub tune_size: Option<usize>,
    /// Rows per trial used for calibration
    #[arg(long, help_heading = "Experiment")]
    pub cal_size: Option<usize>,
    /// Rows per trial used for evaluation (default: all remaining)
    #[arg(long, help_heading = "Experiment")]
    pub eval_size: Option<usize>,
    /// Worker threads (results do not depend on this)
    #[arg(long, help_heading = "Experiment")]
    pub threads: Option<usize>,
    /// Also run the k_reg x lambda sweep
    #[arg(long, help_heading = "Experiment")]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub sweep: bool,

    /// Temperature scaling: auto, off, calibration or tuning
    #[arg(long, help_heading = "Temperature")]
    pub platt: Option<String>,
    /// Fixed softmax temperature for logit input (skips fitting)
    #[arg(long, help_heading = "Temperature")]
    pub temperature: Option<f64>,
    /// Lower end of the temperature search bracket
    #[arg(long, help_heading = "Temperature")]
    pub t_lo: Option<f64>,
    /// Upper end of the temperature search bracket
    #[arg(long, help_heading = "Temperature")]
    pub t_hi: Option<f64>,
    /// Bracket width at which the search stops
    #[arg(long, help_heading = "Temperature")]
    pub t_tol: Option<f64>,

    /// Rows to generate
    #[arg(long, help_heading = "Synthetic data")]
    pub n: Option<usize>,
    /// Number of classes
    #[arg(long, help_heading = "Synthetic data")]
    pub classes: Option<usize>,
    /// Dirichlet concentration (default 0.05 * classes)
    #[arg(long, help_heading = "Synthetic data")]
    pub concentration: Option<f64>,
    /// none, temperature:<t> or tail_permute:<top_m>
    #[arg(long, help_heading = "Synthetic data")]
    pub corruption: Option<String>,
    /// Fraction of rows drawn with the hard concentration
    #[arg(long, help_heading = "Synthetic data")]
    pub hard_fraction: Option<f64>,
    /// Concentration of hard rows (default: classes)
    #[arg(long, help_heading = "Synthetic data")]
    pub hard_concentration: Option<f64>,
}

/// Seeds are written as integers when they fit TOML's signed range and as
/// strings otherwise.
mod opt_seed {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match seed {
            Some(v) if *v <= i64::MAX as u64 => s.serialize_i64(*v as i64),
            Some(v) => s.serialize_str(&v.to_string()),
            None => s.serialize_none(),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => u64::try_from(v)
                .map(Some)
                .map_err(|_| serde::de::Error::custom("seed must be nonnegative")),
            Repr::Str(s) => s.parse().map(Some).map_err(serde::de::Error::custom),
        }
    }
}

impl Settings {
    /// Overlays `self` (flags) on the config file named by `--config`, if any.
    pub fn resolve(self) -> Result<Settings, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let file: Settings = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config file {}: {e}", path.display())))?;
        Ok(self.over(file))
    }

    fn over(self, base: Settings) -> Settings {
        let flags = toml::Table::try_from(&self).expect("settings serialize");
        let mut merged = toml::Table::try_from(&base).expect("settings serialize");
        merged.extend(flags);
        let mut out: Settings = merged.try_into().expect("merged settings deserialize");
        out.config = self.config;
        out
    }

    /// The resolved settings as TOML, for provenance.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }

    pub fn require_input(&self) -> Result<&Path, CliError> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Usage("--input is required".into()))
    }

    pub fn require_model(&self) -> Result<&Path, CliError> {
        self.model
            .as_deref()
            .ok_or_else(|| CliError::Usage("--model is required".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file = Settings {
            alpha: Some(0.2),
            trials: Some(7),
            deterministic: true,
            seed: Some(u64::MAX),
            ..Default::default()
        };
        let flags = Settings {
            alpha: Some(0.05),
            ..Default::default()
        };
        let merged = flags.over(file);
        assert_eq!(merged.alpha, Some(0.05));
        assert_eq!(merged.trials, Some(7));
        assert!(merged.deterministic);
        assert_eq!(merged.seed, Some(u64::MAX));
    }

    #[test]
    fn toml_round_trip_keeps_large_seeds() {
        let s = Settings {
            seed: Some(u64::MAX),
            lambda_grid: Some("0.1,0.2".into()),
            ..Default::default()
        };
        let back: Settings = toml::from_str(&s.to_toml()).unwrap();
        assert_eq!(back, s);
        let small: Settings = toml::from_str("seed = 42\nalpha = 0.1\n").unwrap();
        assert_eq!(small.seed, Some(42));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Settings>("alpah = 0.1\n").is_err());
    }
}
