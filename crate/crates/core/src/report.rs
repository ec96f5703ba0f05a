// SPDX-License-Identifier: MIT OR Apache-2.0

//! Statistics, evaluation records and report emission.
//!
//! A JSON report is a [`ReportDocument`]: a schema version, the records in
//! input order, and correlations between judge-on and judge-off scores. The
//! CSV layout has one row per (record, N, metric) with the columns listed in
//! [`CSV_HEADER`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_file, write_file_atomic};
use crate::error::{Error, Result};
use crate::sae::{SaeKind, SaeModel, SparsityMetrics};
use crate::scr::ScrReport;
use crate::tpp::TppReport;

/// Version of the JSON report layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Column names of the CSV layout.
pub const CSV_HEADER: [&str; 13] = [
    "sae_id",
    "kind",
    "k",
    "l1_coefficient",
    "expansion_factor",
    "seed",
    "checkpoint_fraction",
    "mean_l0",
    "fvu",
    "n",
    "metric",
    "value",
    "config",
];

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::contract(format!(
            "pearson_r needs two equal-length lists of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with a constant list".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Cohen's kappa between two raters over the same items.
pub fn cohen_kappa<T: Ord>(rater_a: &[T], rater_b: &[T]) -> Result<f64> {
    if rater_a.len() != rater_b.len() || rater_a.is_empty() {
        return Err(Error::contract(format!(
            "cohen_kappa needs two equal-length non-empty label lists, got {} and {}",
            rater_a.len(),
            rater_b.len()
        )));
    }
    let n = rater_a.len() as f64;
    let mut marg_a: BTreeMap<&T, f64> = BTreeMap::new();
    let mut marg_b: BTreeMap<&T, f64> = BTreeMap::new();
    let mut agree = 0.0;
    for (a, b) in rater_a.iter().zip(rater_b) {
        *marg_a.entry(a).or_default() += 1.0;
        *marg_b.entry(b).or_default() += 1.0;
        if a == b {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = marg_a
        .iter()
        .map(|(l, ca)| ca * marg_b.get(l).copied().unwrap_or(0.0))
        .sum::<f64>()
        / (n * n);
    if p_e >= 1.0 {
        return Err(Error::Undefined("chance agreement is 1; kappa is undefined".into()));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Where a record's inputs came from; digests are SHA-256 of file bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub store: String,
    pub store_sha256: String,
    pub sae: String,
    pub sae_sha256: String,
    pub config_sha256: String,
}

/// One scalar score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub n: usize,
    pub metric: String,
    /// `None` when undefined (every SCR pair degenerate).
    pub value: Option<f64>,
}

/// Results for one SAE checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sae_id: String,
    pub kind: String,
    pub k: Option<usize>,
    pub l1_coefficient: Option<f64>,
    pub expansion_factor: usize,
    pub seed: u64,
    pub checkpoint_fraction: f64,
    pub mean_l0: f64,
    pub fvu: f64,
    pub provenance: Provenance,
    /// Flat per-N scores; see [`EvalRecord::build`] for metric names.
    pub scores: Vec<Score>,
    pub scr_spurious: Option<ScrReport>,
    pub scr_judge: Option<ScrReport>,
    pub tpp: Option<TppReport>,
    pub tpp_judge: Option<TppReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

/// Detailed results feeding one record.
#[derive(Debug, Clone, Default)]
pub struct Evaluations {
    pub scr_spurious: Option<ScrReport>,
    pub scr_judge: Option<ScrReport>,
    pub tpp: Option<TppReport>,
    pub tpp_judge: Option<TppReport>,
}

impl EvalRecord {
    /// Assemble a record. Metric names: `scr_spurious`, `scr_spurious_clipped`,
    /// `scr_judge`, `scr_judge_clipped`, `tpp`, `tpp_literal`, `tpp_judge`,
    /// `tpp_judge_literal`.
    pub fn build(sae: &SaeModel, metrics: SparsityMetrics, provenance: Provenance, evals: Evaluations) -> Self {
        let mut scores = Vec::new();
        for (name, report) in [("scr_spurious", &evals.scr_spurious), ("scr_judge", &evals.scr_judge)] {
            for m in report.iter().flat_map(|r| &r.means) {
                scores.push(Score {
                    n: m.n,
                    metric: name.to_owned(),
                    value: m.s_shift,
                });
                scores.push(Score {
                    n: m.n,
                    metric: format!("{name}_clipped"),
                    value: m.s_shift_clipped,
                });
            }
        }
        for (name, report) in [("tpp", &evals.tpp), ("tpp_judge", &evals.tpp_judge)] {
            for r in report.iter().flat_map(|r| &r.per_n) {
                scores.push(Score {
                    n: r.matrix.n,
                    metric: name.to_owned(),
                    value: Some(r.s_tpp),
                });
                scores.push(Score {
                    n: r.matrix.n,
                    metric: format!("{name}_literal"),
                    value: Some(r.s_tpp_literal),
                });
            }
        }
        let k = match sae.kind() {
            SaeKind::TopK { k } => Some(*k),
            _ => None,
        };
        Self {
            sae_id: sae.id(),
            kind: sae.kind().tag().to_owned(),
            k,
            l1_coefficient: sae.info.l1_coefficient,
            expansion_factor: sae.dict_size() / sae.dim(),
            seed: sae.info.seed,
            checkpoint_fraction: sae.info.fraction,
            mean_l0: metrics.mean_l0,
            fvu: metrics.fvu,
            provenance,
            scores,
            scr_spurious: evals.scr_spurious,
            scr_judge: evals.scr_judge,
            tpp: evals.tpp,
            tpp_judge: evals.tpp_judge,
            started_at: None,
            finished_at: None,
        }
    }

    pub fn score(&self, metric: &str, n: usize) -> Option<f64> {
        self.scores
            .iter()
            .find(|s| s.metric == metric && s.n == n)
            .and_then(|s| s.value)
    }
}

/// Pearson correlation between two metrics over all (record, N) points
/// where both are defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub metric_a: String,
    pub metric_b: String,
    pub points: usize,
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undefined: Option<String>,
}

/// Correlate `metric_a` with `metric_b` across records.
pub fn correlate(records: &[EvalRecord], metric_a: &str, metric_b: &str) -> Correlation {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for rec in records {
        for s in rec.scores.iter().filter(|s| s.metric == metric_a) {
            if let (Some(x), Some(y)) = (s.value, rec.score(metric_b, s.n)) {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    let (r, undefined) = match pearson_r(&xs, &ys) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Correlation {
        metric_a: metric_a.to_owned(),
        metric_b: metric_b.to_owned(),
        points: xs.len(),
        r,
        undefined,
    }
}

/// The JSON report layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub records: Vec<EvalRecord>,
    /// Judge-on against judge-off correlations, for pairs with data.
    pub correlations: Vec<Correlation>,
}

impl ReportDocument {
    pub fn new(records: Vec<EvalRecord>) -> Self {
        let correlations = [("scr_spurious", "scr_judge"), ("tpp", "tpp_judge")]
            .iter()
            .filter(|(a, b)| records.iter().any(|r| has(r, a)) && records.iter().any(|r| has(r, b)))
            .map(|(a, b)| correlate(&records, a, b))
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            records,
            correlations,
        }
    }
}

fn has(record: &EvalRecord, metric: &str) -> bool {
    record.scores.iter().any(|s| s.metric == metric)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Serialize records in the given format.
pub fn render_report(records: &[EvalRecord], format: ReportFormat) -> Result<Vec<u8>> {
    if records.is_empty() {
        return Err(Error::contract("a report needs at least one record"));
    }
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(&ReportDocument::new(records.to_vec()))?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::data(format!("csv: {e}"));
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for r in records {
                for s in &r.scores {
                    w.write_record([
                        r.sae_id.clone(),
                        r.kind.clone(),
                        fmt_opt(r.k),
                        fmt_opt(r.l1_coefficient),
                        r.expansion_factor.to_string(),
                        r.seed.to_string(),
                        r.checkpoint_fraction.to_string(),
                        r.mean_l0.to_string(),
                        r.fvu.to_string(),
                        s.n.to_string(),
                        s.metric.clone(),
                        fmt_opt(s.value),
                        r.provenance.config_sha256.clone(),
                    ])
                    .map_err(csv_err)?;
                }
            }
            w.into_inner().map_err(|e| Error::data(format!("csv: {e}")))
        }
    }
}

/// Write records to `path` atomically.
pub fn emit_report(records: &[EvalRecord], format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    write_file_atomic(path.as_ref(), &render_report(records, format)?)
}

/// Parse a JSON report.
pub fn read_report(path: impl AsRef<Path>) -> Result<ReportDocument> {
    let path = path.as_ref();
    let doc: ReportDocument = serde_json::from_slice(&read_file(path)?)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::data(format!(
            "{} has schema version {}, expected {SCHEMA_VERSION}",
            path.display(),
            doc.schema_version
        )));
    }
    Ok(doc)
}

/// Records from every `*.json` report directly inside `dir`, by file name.
pub fn read_runs(dir: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_report(&p)?.records);
    }
    if records.is_empty() {
        return Err(Error::data(format!("no report records under {}", dir.display())));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pearson_trivial_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson_r(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson_r(&[2.0; 4], &x), Err(Error::Undefined(_))));
        assert!(matches!(pearson_r(&[1.0], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn kappa_trivial_cases() {
        let a = ["x", "y", "x", "z"];
        assert!((cohen_kappa(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cohen_kappa(&["x"; 3], &["x"; 3]), Err(Error::Undefined(_))));
        assert!(cohen_kappa::<u8>(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_symmetric(pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 2..40)) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            match (pearson_r(&x, &y), pearson_r(&y, &x)) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a - b).abs() < 1e-12);
                    prop_assert!((-1.0..=1.0).contains(&a));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric definedness"),
            }
        }

        #[test]
        fn kappa_symmetric(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..40)) {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            match (cohen_kappa(&a, &b), cohen_kappa(&b, &a)) {
                (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric definedness"),
            }
        }
    }
}
