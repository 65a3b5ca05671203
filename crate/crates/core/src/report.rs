//! Text and CSV renderings of multi-trial results.
//!
//! Aligned tables are for reading; CSV files carry the same numbers at full
//! precision for downstream tools. All output is a pure function of its
//! input, so identical runs produce identical bytes.

use std::fmt::Write as _;

use crate::eval::{MethodAggregate, SweepGrid, TrialAggregate};

/// Right-aligns every column except the first.
fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(fields: &[String]) -> String {
    let mut line = fields
        .iter()
        .map(|f| csv_field(f))
        .collect::<Vec<_>>()
        .join(",");
    line.push('\n');
    line
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |x| format!("{x:.digits$}"))
}

fn opt_csv(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Accuracy, then one Coverage and one Size column per method.
pub fn summary_table(agg: &TrialAggregate, model: &str) -> String {
    let mut group = vec![String::new(), "Accuracy".into(), String::new()];
    let mut header = vec!["Model".to_string(), "Top-1".into(), "Top-5".into()];
    let mut row = vec![
        model.to_string(),
        format!("{:.3}", agg.top1),
        format!("{:.3}", agg.top5),
    ];
    for (i, m) in agg.methods.iter().enumerate() {
        group.push(if i == 0 {
            "Coverage".into()
        } else {
            String::new()
        });
        header.push(m.name.clone());
        row.push(format!("{:.3}", m.coverage));
    }
    for (i, m) in agg.methods.iter().enumerate() {
        group.push(if i == 0 { "Size".into() } else { String::new() });
        header.push(m.name.clone());
        row.push(format!("{:.2}", m.avg_size));
    }
    let mut out = aligned(&[group, header, row]);
    let _ = writeln!(out, "median-of-means over {} trials", agg.n_trials);
    out
}

pub fn summary_csv(agg: &TrialAggregate, model: &str) -> String {
    let mut out = csv_line(&[
        "model".into(),
        "method".into(),
        "top1".into(),
        "top5".into(),
        "coverage".into(),
        "size".into(),
        "sscv".into(),
        "trials".into(),
    ]);
    for m in &agg.methods {
        out.push_str(&csv_line(&[
            model.to_string(),
            m.name.clone(),
            agg.top1.to_string(),
            agg.top5.to_string(),
            m.coverage.to_string(),
            m.avg_size.to_string(),
            m.sscv.to_string(),
            agg.n_trials.to_string(),
        ]));
    }
    out
}

/// Per-trial metrics and the hyperparameters each trial ended up with.
pub fn trials_csv(agg: &TrialAggregate) -> String {
    let mut out = csv_line(
        &[
            "trial",
            "method",
            "coverage",
            "size",
            "sscv",
            "tau_hat",
            "lambda",
            "k_reg",
            "k_star",
            "temperature",
        ]
        .map(String::from),
    );
    for m in &agg.methods {
        for (t, trial) in m.trials.iter().enumerate() {
            out.push_str(&csv_line(&[
                t.to_string(),
                m.name.clone(),
                trial.coverage.to_string(),
                trial.avg_size.to_string(),
                trial.sscv.to_string(),
                trial.tau_hat.to_string(),
                trial.lambda.to_string(),
                trial.k_reg.to_string(),
                trial.k_star.map_or_else(String::new, |k| k.to_string()),
                opt_csv(agg.temperatures[t]),
            ]));
        }
    }
    out
}

/// `size,count` pooled over trials.
pub fn histogram_csv(m: &MethodAggregate) -> String {
    let mut out = String::from("size,count\n");
    for (size, count) in &m.size_hist {
        let _ = writeln!(out, "{size},{count}");
    }
    out
}

/// Coverage by set-size stratum, one `cnt`/`cvg` pair per method. Empty
/// strata are left blank.
pub fn stratified_table(agg: &TrialAggregate) -> String {
    let mut group = vec![String::new()];
    let mut header = vec!["size".to_string()];
    for m in &agg.methods {
        group.extend([m.name.clone(), String::new()]);
        header.extend(["cnt".into(), "cvg".into()]);
    }
    let mut rows = vec![group, header];
    let Some(first) = agg.methods.first() else {
        return String::new();
    };
    for (i, stratum) in first.per_stratum.iter().enumerate() {
        let mut row = vec![stratum.range.to_string()];
        for m in &agg.methods {
            let s = &m.per_stratum[i];
            row.push(s.count.to_string());
            row.push(opt(s.coverage(), 3));
        }
        rows.push(row);
    }
    aligned(&rows)
}

pub fn stratified_csv(agg: &TrialAggregate) -> String {
    let mut out = csv_line(&["method", "lo", "hi", "count", "coverage"].map(String::from));
    for m in &agg.methods {
        for s in &m.per_stratum {
            out.push_str(&csv_line(&[
                m.name.clone(),
                s.range.lo.to_string(),
                s.range.hi.to_string(),
                s.count.to_string(),
                opt_csv(s.coverage()),
            ]));
        }
    }
    out
}

/// Coverage and mean size by rank of the true label.
pub fn difficulty_table(agg: &TrialAggregate) -> String {
    let Some(first) = agg.methods.first() else {
        return String::new();
    };
    let mut group = vec![String::new(), String::new()];
    let mut header = vec!["difficulty".to_string(), "count".into()];
    for m in &agg.methods {
        group.extend([m.name.clone(), String::new()]);
        header.extend(["cvg".into(), "sz".into()]);
    }
    let mut rows = vec![group, header];
    for (i, bin) in first.per_difficulty.iter().enumerate() {
        let mut row = vec![bin.range.to_string(), bin.count.to_string()];
        for m in &agg.methods {
            let d = &m.per_difficulty[i];
            row.push(opt(d.coverage(), 3));
            row.push(opt(d.avg_size(), 1));
        }
        rows.push(row);
    }
    aligned(&rows)
}

pub fn difficulty_csv(agg: &TrialAggregate) -> String {
    let mut out = csv_line(&["method", "lo", "hi", "count", "coverage", "size"].map(String::from));
    for m in &agg.methods {
        for d in &m.per_difficulty {
            out.push_str(&csv_line(&[
                m.name.clone(),
                d.range.lo.to_string(),
                d.range.hi.to_string(),
                d.count.to_string(),
                opt_csv(d.coverage()),
                opt_csv(d.avg_size()),
            ]));
        }
    }
    out
}

/// Median set size with `k_reg` down the rows and `lambda` across.
pub fn sweep_table(grid: &SweepGrid) -> String {
    let mut header = vec!["k_reg | lambda".to_string()];
    header.extend(grid.lambdas.iter().map(|l| l.to_string()));
    let mut rows = vec![header];
    for (k_reg, sizes) in grid.k_regs.iter().zip(&grid.sizes) {
        let mut row = vec![k_reg.to_string()];
        row.extend(sizes.iter().map(|s| format!("{s:.1}")));
        rows.push(row);
    }
    aligned(&rows)
}

pub fn sweep_csv(grid: &SweepGrid) -> String {
    let mut out = csv_line(&["k_reg", "lambda", "size", "coverage"].map(String::from));
    for (i, k_reg) in grid.k_regs.iter().enumerate() {
        for (j, lambda) in grid.lambdas.iter().enumerate() {
            out.push_str(&csv_line(&[
                k_reg.to_string(),
                lambda.to_string(),
                grid.sizes[i][j].to_string(),
                grid.coverages[i][j].to_string(),
            ]));
        }
    }
    out
}
