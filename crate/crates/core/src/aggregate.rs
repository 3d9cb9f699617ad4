//! Harmonic-mean composition of raw metrics into the three headline
//! scores: model utility (MU), answer forget efficacy (AFE), and
//! reasoning forget efficacy (CFE).
//!
//! The harmonic mean penalizes any single weak component, so a model
//! cannot buy a good aggregate by excelling elsewhere. Forget-side scores
//! measure *similarity to the forgotten content*, so they are inverted as
//! (1 − score) before combining: higher always means better.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

pub const HM_EPSILON: f64 = 1e-6;

/// n / Σ(1/vᵢ) over values clamped to [epsilon, 1]. The clamp keeps exact
/// zeros from dividing by zero while still collapsing the mean toward 0.
pub fn harmonic_mean(values: &[f64], epsilon: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("harmonic mean of an empty list"));
    }
    let denom: f64 = values.iter().map(|v| 1.0 / v.clamp(epsilon, 1.0)).sum();
    Ok(values.len() as f64 / denom)
}

/// 1 − score, defined only on [0, 1].
pub fn invert(score: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::validation(format!(
            "cannot invert {score}: score must lie in [0, 1]"
        )));
    }
    Ok(1.0 - score)
}

/// The 12 MU constituents: four answer metrics on each knowledge-retention
/// set (real authors, world facts, retain).
const MU_SETS: [&str; 3] = ["real_authors", "world_facts", "retain"];
const MU_METRICS: [&str; 4] = ["rouge", "te", "cs", "es"];

fn require(report: &MetricReport, set: &str, metric: &str) -> Result<f64> {
    report
        .set_mean(set, metric)
        .ok_or_else(|| Error::validation(format!("missing component {set}.{metric}")))
}

/// Model utility: harmonic mean of the 12 retention-side set means.
pub fn compute_mu(report: &MetricReport) -> Result<f64> {
    let mut values = Vec::with_capacity(12);
    for set in MU_SETS {
        for metric in MU_METRICS {
            values.push(require(report, set, metric)?);
        }
    }
    harmonic_mean(&values, HM_EPSILON)
}

/// Answer forget efficacy: harmonic mean of inverted forget-set
/// {rouge, cs, es}.
pub fn compute_afe(report: &MetricReport) -> Result<f64> {
    let forget = Split::Forget.as_str();
    let values = [
        invert(require(report, forget, "rouge")?)?,
        invert(require(report, forget, "cs")?)?,
        invert(require(report, forget, "es")?)?,
    ];
    harmonic_mean(&values, HM_EPSILON)
}

/// Reasoning forget efficacy: harmonic mean of inverted forget-set
/// {sw_rouge, sw_cs, judge}.
pub fn compute_cfe(report: &MetricReport) -> Result<f64> {
    let forget = Split::Forget.as_str();
    let values = [
        invert(require(report, forget, "sw_rouge")?)?,
        invert(require(report, forget, "sw_cs")?)?,
        invert(require(report, forget, "judge")?)?,
    ];
    harmonic_mean(&values, HM_EPSILON)
}

/// The three aggregates plus every constituent, pre- and post-inversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateScores {
    pub mu: f64,
    pub afe: f64,
    pub cfe: f64,
    pub avg: f64,
    pub components: BTreeMap<String, f64>,
    pub epsilon: f64,
}

pub fn aggregate(report: &MetricReport) -> Result<AggregateScores> {
    let mu = compute_mu(report)?;
    let afe = compute_afe(report)?;
    let cfe = compute_cfe(report)?;
    let mut components = BTreeMap::new();
    for set in MU_SETS {
        for metric in MU_METRICS {
            components.insert(format!("{set}.{metric}"), require(report, set, metric)?);
        }
    }
    let forget = Split::Forget.as_str();
    for metric in ["rouge", "cs", "es", "sw_rouge", "sw_cs", "judge"] {
        let raw = require(report, forget, metric)?;
        components.insert(format!("{forget}.{metric}"), raw);
        components.insert(format!("{forget}.{metric}_inverted"), invert(raw)?);
    }
    Ok(AggregateScores {
        mu,
        afe,
        cfe,
        avg: (mu + afe + cfe) / 3.0,
        components,
        epsilon: HM_EPSILON,
    })
}

/// One row of the summary grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub method: String,
    pub strategy: String,
    pub scale: String,
    pub mu: f64,
    pub afe: f64,
    pub cfe: f64,
    pub avg: f64,
}

/// Render the method × strategy × scale grid as CSV.
pub fn render_grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("method,strategy,scale,mu,afe,cfe,avg\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            r.method, r.strategy, r.scale, r.mu, r.afe, r.cfe, r.avg
        );
    }
    out
}

/// Render the grid as an aligned text table.
pub fn render_grid_text(rows: &[GridRow]) -> String {
    let headers = ["method", "strategy", "scale", "MU", "AFE", "CFE", "Avg."];
    let mut cells: Vec<[String; 7]> = Vec::with_capacity(rows.len());
    for r in rows {
        cells.push([
            r.method.clone(),
            r.strategy.clone(),
            r.scale.clone(),
            format!("{:.4}", r.mu),
            format!("{:.4}", r.afe),
            format!("{:.4}", r.cfe),
            format!("{:.4}", r.avg),
        ]);
    }
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (i, c) in row.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, row: &[String]| {
        let line = row
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:<width$}", c, width = widths[i]))
            .collect::<Vec<_>>()
            .join("  ");
        let _ = writeln!(out, "{}", line.trim_end());
    };
    emit(
        &mut out,
        &headers.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
    );
    let _ = writeln!(
        out,
        "{}",
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("  ")
    );
    for row in &cells {
        emit(&mut out, row);
    }
    out
}
