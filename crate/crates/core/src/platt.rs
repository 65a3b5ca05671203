//! Temperature scaling: fit a single scalar `T` dividing every logit by
//! minimizing the mean negative log-likelihood on labelled data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_store::{check_temperature, ScoreKind, ScoreMatrix};

pub const DEFAULT_T_LO: f64 = 0.05;
pub const DEFAULT_T_HI: f64 = 20.0;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    /// NLL at `T = 1`.
    pub nll_before: f64,
    pub nll_after: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub t_lo: f64,
    pub t_hi: f64,
    pub tol: f64,
}

impl Default for Bracket {
    fn default() -> Self {
        Self {
            t_lo: DEFAULT_T_LO,
            t_hi: DEFAULT_T_HI,
            tol: DEFAULT_TOL,
        }
    }
}

impl Bracket {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.t_lo > 0.0 && self.t_lo < self.t_hi && self.t_hi.is_finite() && self.tol > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "invalid temperature bracket [{}, {}] with tolerance {}",
                self.t_lo, self.t_hi, self.tol
            )));
        }
        Ok(())
    }
}

/// Neumaier-compensated running sum; the result depends only on input order.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

fn row_nll(row: &[f64], label: usize, temperature: f64) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = row
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    log_norm - (row[label] - max) / temperature
}

/// Mean negative log-likelihood of the labels under `softmax(logits / T)`.
pub fn nll(m: &ScoreMatrix, temperature: f64) -> Result<f64> {
    if m.kind() != ScoreKind::Logits {
        return Err(Error::WrongKind { expected: "logit" });
    }
    check_temperature(temperature)?;
    Ok(nll_unchecked(m, temperature))
}

fn nll_unchecked(m: &ScoreMatrix, temperature: f64) -> f64 {
    let mut acc = CompensatedSum::default();
    for (row, &label) in m.rows().zip(m.labels()) {
        acc.add(row_nll(row, label, temperature));
    }
    acc.total() / m.n() as f64
}

/// Golden-section minimization of [`nll`] over `[t_lo, t_hi]`.
///
/// Stops once the bracket is narrower than `tol`. If `T = 1` lies in the
/// bracket and scores at least as well as the search result, `T = 1` is
/// returned, so the fit never increases the objective.
pub fn fit_temperature(m: &ScoreMatrix, bracket: Bracket) -> Result<TemperatureFit> {
    if m.kind() != ScoreKind::Logits {
        return Err(Error::WrongKind { expected: "logit" });
    }
    bracket.validate()?;
    let f = |t: f64| nll_unchecked(m, t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;

    let (mut a, mut b) = (bracket.t_lo, bracket.t_hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iterations = 0;
    while b - a > bracket.tol {
        iterations += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let (mut temperature, mut nll_after) = if fc <= fd { (c, fc) } else { (d, fd) };

    let nll_before = f(1.0);
    if (bracket.t_lo..=bracket.t_hi).contains(&1.0) && nll_before <= nll_after {
        temperature = 1.0;
        nll_after = nll_before;
    }
    Ok(TemperatureFit {
        temperature,
        nll_before,
        nll_after,
        iterations,
    })
}
