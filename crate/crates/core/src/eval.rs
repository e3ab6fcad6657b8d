//! Evaluation protocol: threshold decision, AUC, partial AUC over the
//! low-false-positive range `[0, p]`, per-(machine, section, domain) cells
//! and the harmonic-mean official score.
//!
//! Pairs are compared with a strict step function: an anomalous clip only
//! counts when its score is strictly greater than the normal clip's, so ties
//! contribute nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{format_clip_path, ClipMeta, Condition, DatasetIndex, Domain, Split};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("score validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Anomaly,
    Normal,
}

/// Anomaly iff `score > threshold`.
pub fn decide(score: f64, threshold: f64) -> Decision {
    if score > threshold {
        Decision::Anomaly
    } else {
        Decision::Normal
    }
}

fn check_finite(scores: &[f64]) -> Result<(), EvalError> {
    match scores.iter().find(|s| !s.is_finite()) {
        Some(&s) => Err(EvalError::NonFinite(s)),
        None => Ok(()),
    }
}

/// Number of normals entering the partial AUC, `floor(p * n_neg)`.
pub fn pauc_normal_count(p: f64, n_neg: usize) -> usize {
    // The small epsilon keeps products such as 0.29 * 100 from flooring to 28.
    (p * n_neg as f64 + 1e-9).floor() as usize
}

/// Pairs `(normal, anomaly)` with anomaly strictly above normal, counted
/// by binary search over the sorted anomalies.
fn count_exceeding(normals: &[f64], sorted_anomalies: &[f64]) -> u64 {
    normals
        .iter()
        .map(|&n| (sorted_anomalies.len() - sorted_anomalies.partition_point(|&a| a <= n)) as u64)
        .sum()
}

fn sorted_ascending(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn auc(normal_scores: &[f64], anomaly_scores: &[f64]) -> Result<f64, EvalError> {
    if normal_scores.is_empty() || anomaly_scores.is_empty() {
        return Err(EvalError::Undefined(format!(
            "AUC needs both classes ({} normal, {} anomalous)",
            normal_scores.len(),
            anomaly_scores.len()
        )));
    }
    check_finite(normal_scores)?;
    check_finite(anomaly_scores)?;
    let hits = count_exceeding(normal_scores, &sorted_ascending(anomaly_scores));
    Ok(hits as f64 / (normal_scores.len() * anomaly_scores.len()) as f64)
}

/// Partial AUC: only the `floor(p * N-)` highest-scoring normals enter.
/// Normals are sorted in descending score order with a stable sort, so ties
/// keep their input order.
pub fn pauc(normal_scores: &[f64], anomaly_scores: &[f64], p: f64) -> Result<f64, EvalError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(EvalError::Undefined(format!("p = {p} outside (0, 1]")));
    }
    if anomaly_scores.is_empty() {
        return Err(EvalError::Undefined("pAUC needs anomalous clips".into()));
    }
    check_finite(normal_scores)?;
    check_finite(anomaly_scores)?;
    let k = pauc_normal_count(p, normal_scores.len());
    if k == 0 {
        return Err(EvalError::Undefined(format!(
            "floor({p} * {}) = 0 normals for pAUC",
            normal_scores.len()
        )));
    }
    let mut desc = normal_scores.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let hits = count_exceeding(&desc[..k], &sorted_ascending(anomaly_scores));
    Ok(hits as f64 / (k * anomaly_scores.len()) as f64)
}

/// Direct double-loop evaluation of the AUC (`p = None`) or pAUC.
/// Kept deliberately naive as a reference for tests and audits.
pub fn brute_force_auc(
    normal_scores: &[f64],
    anomaly_scores: &[f64],
    p: Option<f64>,
) -> Result<f64, EvalError> {
    if normal_scores.is_empty() || anomaly_scores.is_empty() {
        return Err(EvalError::Undefined("empty class".into()));
    }
    let mut normals = normal_scores.to_vec();
    let n_used = match p {
        None => normals.len(),
        Some(p) => {
            normals.sort_by(|a, b| b.total_cmp(a));
            let k = pauc_normal_count(p, normals.len());
            if k == 0 {
                return Err(EvalError::Undefined("floor(p * N-) = 0".into()));
            }
            k
        }
    };
    let mut hits = 0u64;
    for &neg in &normals[..n_used] {
        for &pos in anomaly_scores {
            if pos - neg > 0.0 {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (n_used * anomaly_scores.len()) as f64)
}

/// Harmonic mean; 0 when any value is 0. Values are summed in sorted order
/// so the result does not depend on input order.
pub fn harmonic_mean(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Undefined("harmonic mean of nothing".into()));
    }
    check_finite(values)?;
    if let Some(&v) = values.iter().find(|&&v| v < 0.0) {
        return Err(EvalError::Undefined(format!("negative value {v}")));
    }
    let sorted = sorted_ascending(values);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if min == 0.0 {
        return Ok(0.0);
    }
    if min == max {
        return Ok(min);
    }
    let reciprocal_sum: f64 = sorted.iter().map(|v| 1.0 / v).sum();
    Ok((sorted.len() as f64 / reciprocal_sum).clamp(min, max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub meta: ClipMeta,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub machine_type: String,
    pub section: u8,
    pub domain: Domain,
    pub auc: f64,
    pub pauc: f64,
    pub n_neg: usize,
    pub n_pos: usize,
}

/// Harmonic mean of every cell's AUC and pAUC.
pub fn official_score(cells: &[MetricCell]) -> Result<f64, EvalError> {
    let values: Vec<f64> = cells.iter().flat_map(|c| [c.auc, c.pauc]).collect();
    harmonic_mean(&values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cells: Vec<MetricCell>,
    pub official_score: f64,
    pub p: f64,
}

/// Computes one cell per (machine, section, domain) of the index's test
/// clips. Every labelled test clip needs exactly one score.
pub fn evaluate(
    index: &DatasetIndex,
    scores: &[ScoreRecord],
    p: f64,
) -> Result<MetricsReport, EvalError> {
    let test: BTreeSet<&ClipMeta> = index
        .entries()
        .iter()
        .filter(|e| e.meta.split == Split::Test)
        .map(|e| &e.meta)
        .collect();

    let mut problems = Vec::new();
    let mut by_meta: BTreeMap<&ClipMeta, f64> = BTreeMap::new();
    for r in scores {
        if !test.contains(&r.meta) {
            problems.push(format!(
                "score for clip not in test set: {}",
                format_clip_path(&r.meta)
            ));
        } else if by_meta.insert(&r.meta, r.score).is_some() {
            problems.push(format!("duplicate score: {}", format_clip_path(&r.meta)));
        }
        if !r.score.is_finite() {
            problems.push(format!(
                "non-finite score {} for {}",
                r.score,
                format_clip_path(&r.meta)
            ));
        }
    }
    for meta in &test {
        if !by_meta.contains_key(meta) {
            problems.push(format!("missing score: {}", format_clip_path(meta)));
        }
        if meta.condition == Condition::Unknown {
            problems.push(format!("no condition label: {}", format_clip_path(meta)));
        }
    }
    if !problems.is_empty() {
        return Err(EvalError::Validation(problems));
    }

    // BTreeMap iteration orders metas by clip id within a cell.
    type Cell = (String, u8, Domain);
    let mut groups: BTreeMap<Cell, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (meta, &score) in &by_meta {
        let key = (meta.machine_type.clone(), meta.section, meta.domain);
        let entry = groups.entry(key).or_default();
        match meta.condition {
            Condition::Normal => entry.0.push(score),
            Condition::Anomaly => entry.1.push(score),
            Condition::Unknown => unreachable!("rejected above"),
        }
    }

    let mut cells = Vec::with_capacity(groups.len());
    for ((machine_type, section, domain), (neg, pos)) in groups {
        let label = format!("{machine_type} section {section:02} {domain}");
        let wrap = |e: EvalError| EvalError::Undefined(format!("{label}: {e}"));
        cells.push(MetricCell {
            auc: auc(&neg, &pos).map_err(wrap)?,
            pauc: pauc(&neg, &pos, p).map_err(wrap)?,
            n_neg: neg.len(),
            n_pos: pos.len(),
            machine_type,
            section,
            domain,
        });
    }
    let official_score = official_score(&cells)?;
    Ok(MetricsReport {
        cells,
        official_score,
        p,
    })
}

impl MetricsReport {
    /// `machine,section,domain,auc,pauc,n_neg,n_pos` rows plus a final
    /// `official_score,<value>` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("machine,section,domain,auc,pauc,n_neg,n_pos\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{:02},{},{},{},{},{}",
                c.machine_type, c.section, c.domain, c.auc, c.pauc, c.n_neg, c.n_pos
            );
        }
        let _ = writeln!(out, "official_score,{}", self.official_score);
        out
    }

    pub fn to_markdown(&self) -> String {
        let rows = self
            .cells
            .iter()
            .map(|c| {
                (
                    (c.machine_type.clone(), c.section, c.domain),
                    (c.auc, 0.0, c.pauc, 0.0),
                )
            })
            .collect();
        render_table(&rows, false, self.official_score, None)
    }
}

/// Mean and sample standard deviation of metrics over repeated trials.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub trials: usize,
    cells: BTreeMap<(String, u8, Domain), (f64, f64, f64, f64)>,
    pub official_mean: f64,
    pub official_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl TrialSummary {
    pub fn from_reports(reports: &[MetricsReport]) -> Result<Self, EvalError> {
        if reports.is_empty() {
            return Err(EvalError::Undefined("no trials".into()));
        }
        let mut acc: BTreeMap<(String, u8, Domain), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in reports {
            for c in &r.cells {
                let e = acc
                    .entry((c.machine_type.clone(), c.section, c.domain))
                    .or_default();
                e.0.push(c.auc);
                e.1.push(c.pauc);
            }
        }
        let cells = acc
            .into_iter()
            .map(|(k, (a, p))| {
                let (am, asd) = mean_std(&a);
                let (pm, psd) = mean_std(&p);
                (k, (am, asd, pm, psd))
            })
            .collect();
        let omegas: Vec<f64> = reports.iter().map(|r| r.official_score).collect();
        let (official_mean, official_std) = mean_std(&omegas);
        Ok(Self {
            trials: reports.len(),
            cells,
            official_mean,
            official_std,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("machine,section,domain,auc_mean,auc_std,pauc_mean,pauc_std\n");
        for ((m, s, d), (am, asd, pm, psd)) in &self.cells {
            let _ = writeln!(out, "{m},{s:02},{d},{am},{asd},{pm},{psd}");
        }
        let _ = writeln!(
            out,
            "official_score,{},{}",
            self.official_mean, self.official_std
        );
        out
    }

    pub fn to_markdown(&self) -> String {
        render_table(
            &self.cells,
            true,
            self.official_mean,
            Some(self.official_std),
        )
    }
}

/// Per-section rows, Source/Target columns for AUC and pAUC, in percent.
fn render_table(
    cells: &BTreeMap<(String, u8, Domain), (f64, f64, f64, f64)>,
    with_std: bool,
    omega: f64,
    omega_std: Option<f64>,
) -> String {
    let fmt = |mean: f64, std: f64| {
        if with_std {
            format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
        } else {
            format!("{:.2}", 100.0 * mean)
        }
    };
    let mut out = String::from(
        "| Machine | Section | AUC Source [%] | AUC Target [%] | pAUC Source [%] | pAUC Target [%] |\n\
         |---|---|---|---|---|---|\n",
    );
    let sections: BTreeSet<(&String, u8)> = cells.keys().map(|(m, s, _)| (m, *s)).collect();
    let mut last_machine: Option<&String> = None;
    for (machine, section) in sections {
        let get = |d: Domain| cells.get(&(machine.clone(), section, d));
        let col = |d: Domain, pauc: bool| match get(d) {
            Some(&(am, asd, pm, psd)) => {
                if pauc {
                    fmt(pm, psd)
                } else {
                    fmt(am, asd)
                }
            }
            None => "-".into(),
        };
        let name = if last_machine == Some(machine) {
            ""
        } else {
            machine.as_str()
        };
        last_machine = Some(machine);
        let _ = writeln!(
            out,
            "| {name} | {section:02} | {} | {} | {} | {} |",
            col(Domain::Source, false),
            col(Domain::Target, false),
            col(Domain::Source, true),
            col(Domain::Target, true)
        );
    }
    match omega_std {
        Some(sd) => {
            let _ = writeln!(out, "\nOfficial score: {}", fmt_pct(omega, Some(sd)));
        }
        None => {
            let _ = writeln!(out, "\nOfficial score: {}", fmt_pct(omega, None));
        }
    }
    out
}

fn fmt_pct(v: f64, sd: Option<f64>) -> String {
    match sd {
        Some(sd) => format!("{:.2} ± {:.2} %", 100.0 * v, 100.0 * sd),
        None => format!("{:.2} %", 100.0 * v),
    }
}
