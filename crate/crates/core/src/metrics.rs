//! Uplift ranking metrics.
//!
//! All metrics consume [`ScoredRecord`]s and depend only on the descending
//! score order (ties keep input order), so they are invariant under strictly
//! monotone transformations of the scores.
//!
//! Normalized QINI and AUUC are `(A_model - A_random) / (A_perfect - A_random)`
//! where areas use the trapezoid rule over the prefix fraction, the random
//! curve is the straight line to the curve's end point, and the perfect curve
//! ranks treated responders first and control responders last.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no records")]
    Empty,
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub score: f64,
    pub treated: bool,
    pub response: f64,
}

impl ScoredRecord {
    pub fn new(score: f64, treated: bool, response: f64) -> Self {
        ScoredRecord { score, treated, response }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurvePoints {
    pub fractions: Vec<f64>,
    pub values: Vec<f64>,
}

impl CurvePoints {
    /// Trapezoidal area over the fraction axis.
    pub fn area(&self) -> f64 {
        self.fractions
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(f, v)| (f[1] - f[0]) * (v[0] + v[1]) / 2.0)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "fraction,value")?;
        for (f, v) in self.fractions.iter().zip(&self.values) {
            writeln!(w, "{f},{v}")?;
        }
        Ok(())
    }
}

/// Indices in descending score order; equal scores keep input order.
pub fn ranking(records: &[ScoredRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].score.total_cmp(&records[a].score));
    order
}

fn check_finite(records: &[ScoredRecord]) -> Result<(), MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(MetricError::InvalidArgument(format!("non-finite score {}", r.score)));
    }
    Ok(())
}

fn check_both_arms(records: &[ScoredRecord]) -> Result<(), MetricError> {
    check_finite(records)?;
    let treated = records.iter().filter(|r| r.treated).count();
    if treated == 0 || treated == records.len() {
        return Err(MetricError::Undefined("both treated and control records are required".into()));
    }
    Ok(())
}

/// Running sums along an ordering.
#[derive(Clone, Copy, Default)]
struct Prefix {
    n_t: f64,
    n_c: f64,
    y_t: f64,
    y_c: f64,
}

impl Prefix {
    fn push(&mut self, r: &ScoredRecord) {
        if r.treated {
            self.n_t += 1.0;
            self.y_t += r.response;
        } else {
            self.n_c += 1.0;
            self.y_c += r.response;
        }
    }

    fn qini(&self) -> f64 {
        let scaled_control = if self.n_c > 0.0 { self.y_c * self.n_t / self.n_c } else { 0.0 };
        self.y_t - scaled_control
    }

    fn uplift(&self, k: f64) -> f64 {
        let rt = if self.n_t > 0.0 { self.y_t / self.n_t } else { 0.0 };
        let rc = if self.n_c > 0.0 { self.y_c / self.n_c } else { 0.0 };
        (rt - rc) * k
    }
}

fn curve_along(records: &[ScoredRecord], order: &[usize], value: fn(&Prefix, f64) -> f64) -> CurvePoints {
    let n = order.len() as f64;
    let mut fractions = Vec::with_capacity(order.len() + 1);
    let mut values = Vec::with_capacity(order.len() + 1);
    fractions.push(0.0);
    values.push(0.0);
    let mut acc = Prefix::default();
    for (k, &i) in order.iter().enumerate() {
        acc.push(&records[i]);
        let k = (k + 1) as f64;
        fractions.push(k / n);
        values.push(value(&acc, k));
    }
    CurvePoints { fractions, values }
}

fn perfect_order(records: &[ScoredRecord]) -> Vec<usize> {
    let oracle: Vec<ScoredRecord> = records
        .iter()
        .map(|r| {
            let t = if r.treated { 1.0 } else { 0.0 };
            ScoredRecord { score: r.response * t - r.response * (1.0 - t), ..*r }
        })
        .collect();
    ranking(&oracle)
}

fn normalized(records: &[ScoredRecord], value: fn(&Prefix, f64) -> f64) -> Result<(CurvePoints, f64), MetricError> {
    check_both_arms(records)?;
    let curve = curve_along(records, &ranking(records), value);
    let perfect = curve_along(records, &perfect_order(records), value);
    let end = *curve.values.last().expect("curve has points");
    let random_area = end / 2.0;
    let span = perfect.area() - random_area;
    if span.abs() < 1e-12 {
        return Err(MetricError::Undefined("perfect curve coincides with the random baseline".into()));
    }
    Ok((curve.clone(), (curve.area() - random_area) / span))
}

/// Qini curve `Y_T(k) - Y_C(k) * N_T(k) / N_C(k)` and normalized QINI.
pub fn qini(records: &[ScoredRecord]) -> Result<(CurvePoints, f64), MetricError> {
    normalized(records, |p, _| p.qini())
}

/// Uplift curve `(Y_T/N_T - Y_C/N_C) * k` and normalized AUUC.
pub fn auuc(records: &[ScoredRecord]) -> Result<(CurvePoints, f64), MetricError> {
    normalized(records, |p, k| p.uplift(k))
}

/// Treated-minus-control mean response among the top `ceil(h% * n)` records.
pub fn lift_at_h(records: &[ScoredRecord], h: f64) -> Result<f64, MetricError> {
    check_finite(records)?;
    if !(h > 0.0 && h <= 100.0) {
        return Err(MetricError::InvalidArgument(format!("h must lie in (0, 100], got {h}")));
    }
    let top = ((h / 100.0) * records.len() as f64).ceil() as usize;
    let mut acc = Prefix::default();
    for &i in ranking(records).iter().take(top.max(1)) {
        acc.push(&records[i]);
    }
    if acc.n_t == 0.0 || acc.n_c == 0.0 {
        return Err(MetricError::Undefined(format!("top {h}% segment lacks a treated or control record")));
    }
    Ok(acc.y_t / acc.n_t - acc.y_c / acc.n_c)
}

/// Weighted average uplift over `bins` equal-size bins of the ranking, each
/// bin weighted by its share of treated records.
pub fn wau(records: &[ScoredRecord], bins: usize) -> Result<f64, MetricError> {
    check_finite(records)?;
    if bins == 0 {
        return Err(MetricError::InvalidArgument("bins must be at least 1".into()));
    }
    let treated_total = records.iter().filter(|r| r.treated).count() as f64;
    if treated_total == 0.0 {
        return Err(MetricError::Undefined("no treated records".into()));
    }
    let order = ranking(records);
    let n = order.len();
    let mut total = 0.0;
    for b in 0..bins {
        let mut acc = Prefix::default();
        for &i in &order[b * n / bins..(b + 1) * n / bins] {
            acc.push(&records[i]);
        }
        if acc.n_t == 0.0 {
            continue;
        }
        total += acc.uplift(1.0) * (acc.n_t / treated_total);
    }
    Ok(total)
}

/// Unweighted mean of per-treatment metric values.
pub fn multi_treatment_average(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Binary reduction for treatment `k`: keeps control and group-`k` rows.
pub fn binary_records(groups: &[usize], responses: &[f64], scores: &[f64], k: usize) -> Vec<ScoredRecord> {
    groups
        .iter()
        .zip(responses)
        .zip(scores)
        .filter(|((g, _), _)| **g == 0 || **g == k)
        .map(|((g, y), s)| ScoredRecord::new(*s, *g == k, *y))
        .collect()
}

/// The four headline metrics for one scored set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub lift: f64,
    pub qini: f64,
    pub auuc: f64,
    pub wau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Percentile for LIFT@h.
    pub lift_h: f64,
    pub wau_bins: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { lift_h: 30.0, wau_bins: 10 }
    }
}

pub fn summarize(records: &[ScoredRecord], opts: &MetricOptions) -> Result<MetricSummary, MetricError> {
    Ok(MetricSummary {
        lift: lift_at_h(records, opts.lift_h)?,
        qini: qini(records)?.1,
        auuc: auuc(records)?.1,
        wau: wau(records, opts.wau_bins)?,
    })
}

/// Per-treatment summaries averaged over treatments `1..=K`.
pub fn summarize_multi(per_treatment: &[MetricSummary]) -> Result<MetricSummary, MetricError> {
    let avg = |f: fn(&MetricSummary) -> f64| multi_treatment_average(&per_treatment.iter().map(f).collect::<Vec<_>>());
    Ok(MetricSummary { lift: avg(|m| m.lift)?, qini: avg(|m| m.qini)?, auuc: avg(|m| m.auuc)?, wau: avg(|m| m.wau)? })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricError::InvalidArgument("spearman needs two equal-length series of length >= 2".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(MetricError::Undefined("constant series has no rank correlation".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Reads `score,treated,response` CSV.
pub fn read_scored_csv<R: Read>(reader: R) -> Result<Vec<ScoredRecord>, MetricError> {
    let mut out = Vec::new();
    let mut lines = BufReader::new(reader).lines();
    let header = lines.next().ok_or(MetricError::Empty)??;
    if header.trim() != "score,treated,response" {
        return Err(MetricError::Parse { line: 1, reason: format!("expected header `score,treated,response`, got `{}`", header.trim()) });
    }
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| MetricError::Parse { line: i + 2, reason };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(format!("cannot parse `{s}`")));
        let score = num(fields[0])?;
        let treated = match num(fields[1])? {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            v => return Err(parse_err(format!("treated must be 0 or 1, got {v}"))),
        };
        out.push(ScoredRecord { score, treated, response: num(fields[2])? });
    }
    Ok(out)
}

pub fn write_scored_csv<W: Write>(records: &[ScoredRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "score,treated,response")?;
    for r in records {
        writeln!(w, "{},{},{}", r.score, u8::from(r.treated), r.response)?;
    }
    Ok(())
}
