use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use super::erle::{erle, pooled_erle_db};
use super::nlms::{nlms_cancel, NlmsConfig};
use super::pesq::{delta_pesq, PesqOutcome, PesqScorer};
use crate::datagen::{write_wav, ManifestRecord};
use crate::error::{Error, Result};
use crate::model::{forward_full, ModelConfig, ModelParams};
use crate::parallel::Executor;
use crate::tensor::Tensor;
use crate::SAMPLE_RATE;

/// What produces the near-end estimate.
#[derive(Clone, Debug)]
pub enum Method {
    /// The unprocessed mixture.
    Identity,
    Nlms(NlmsConfig),
    Model {
        config: ModelConfig,
        params: Box<ModelParams<Tensor>>,
    },
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Identity => "identity",
            Method::Nlms(_) => "nlms",
            Method::Model { .. } => "model",
        }
    }

    /// Estimate for one utterance; may be shorter than the input.
    pub fn process(&self, far: &[f64], mixture: &[f64]) -> Result<Vec<f64>> {
        match self {
            Method::Identity => Ok(mixture.to_vec()),
            Method::Nlms(cfg) => nlms_cancel(far, mixture, cfg),
            Method::Model { config, params } => {
                Ok(forward_full(params, config, mixture, far)?.estimate)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub method: String,
    pub ser_db: f64,
    /// `None` when the item has no single-talk region.
    pub erle_db: Option<f64>,
    pub pesq: Option<f64>,
    pub delta_pesq: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub method: String,
    pub ser_db: f64,
    pub items: usize,
    pub erle_items: usize,
    /// Mean of per-item ERLE in dB.
    pub mean_erle_db: Option<f64>,
    /// ERLE of the mean per-item power ratio.
    pub pooled_erle_db: Option<f64>,
    pub mean_delta_pesq: Option<f64>,
    pub failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl EvalReport {
    /// Per method and SER condition, recomputed from the rows.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<(String, i64), Vec<&EvalRow>> = BTreeMap::new();
        for row in &self.rows {
            // millidecibel key keeps conditions like 3.5 dB apart while sorting numerically
            let key = (row.method.clone(), (row.ser_db * 1000.0).round() as i64);
            groups.entry(key).or_default().push(row);
        }
        groups
            .into_values()
            .map(|rows| {
                let erles: Vec<f64> = rows.iter().filter_map(|r| r.erle_db).collect();
                let deltas: Vec<f64> = rows.iter().filter_map(|r| r.delta_pesq).collect();
                Aggregate {
                    method: rows[0].method.clone(),
                    ser_db: rows[0].ser_db,
                    items: rows.len(),
                    erle_items: erles.len(),
                    mean_erle_db: mean(&erles),
                    pooled_erle_db: pooled_erle_db(&erles),
                    mean_delta_pesq: mean(&deltas),
                    failures: rows.iter().filter(|r| r.error.is_some()).count(),
                }
            })
            .collect()
    }

    /// Method × SER table of ERLE and ΔPESQ.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>, digits: usize| {
            v.map_or("n/a".to_string(), |x| format!("{x:.digits$}"))
        };
        let header = [
            "method",
            "SER (dB)",
            "items",
            "ERLE (dB)",
            "ERLE pooled (dB)",
            "dPESQ",
            "failed",
        ];
        let body: Vec<[String; 7]> = self
            .aggregates()
            .iter()
            .map(|a| {
                [
                    a.method.clone(),
                    format!("{:.1}", a.ser_db),
                    a.items.to_string(),
                    fmt(a.mean_erle_db, 2),
                    fmt(a.pooled_erle_db, 2),
                    fmt(a.mean_delta_pesq, 2),
                    a.failures.to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            writeln!(out, "{}", parts.join("  ").trim_end()).expect("string write");
        };
        line(&mut out, &header.map(String::from));
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&mut out, &rule);
        for row in &body {
            line(&mut out, row);
        }
        out
    }

    /// One delimited record per item.
    pub fn rows_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| Error::Contract(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Contract(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn aggregates_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for a in self.aggregates() {
            w.serialize(a)
                .map_err(|e| Error::Contract(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Contract(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn gather(x: &[f64], regions: &[Range<usize>]) -> Vec<f64> {
    regions
        .iter()
        .flat_map(|r| x[r.clone()].iter().copied())
        .collect()
}

fn clip_regions(regions: &[Range<usize>], len: usize) -> Vec<Range<usize>> {
    regions
        .iter()
        .map(|r| r.start.min(len)..r.end.min(len))
        .filter(|r| !r.is_empty())
        .collect()
}

fn evaluate_item(
    record: &ManifestRecord,
    base: &Path,
    method: &Method,
    scorer: Option<&PesqScorer>,
) -> Result<EvalRow> {
    let (far, mixture, near) = record.read_signals(base)?;
    let estimate = method.process(&far, &mixture)?;
    let n = estimate.len().min(mixture.len());
    let single = clip_regions(&record.single_talk, n);
    let erle_db = if single.is_empty() {
        None
    } else {
        Some(erle(&mixture[..n], &estimate[..n], &single)?)
    };
    let double = clip_regions(&record.double_talk(), n);
    let (pesq, delta) = if double.is_empty() || scorer.is_none() {
        (None, None)
    } else {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let clean_path = dir.path().join("clean.wav");
        let est_path = dir.path().join("estimate.wav");
        let mix_path = dir.path().join("mixture.wav");
        write_wav(&clean_path, &gather(&near, &double), SAMPLE_RATE)?;
        write_wav(&est_path, &gather(&estimate, &double), SAMPLE_RATE)?;
        write_wav(&mix_path, &gather(&mixture, &double), SAMPLE_RATE)?;
        match delta_pesq(scorer, &clean_path, &est_path, &mix_path)? {
            PesqOutcome::Scored { pesq, delta } => (Some(pesq), Some(delta)),
            PesqOutcome::Unavailable => (None, None),
        }
    };
    Ok(EvalRow {
        id: record.id.clone(),
        method: method.tag().to_string(),
        ser_db: record.spec.ser_db,
        erle_db,
        pesq,
        delta_pesq: delta,
        error: None,
    })
}

/// Scores every item with every method. Per-item failures become rows with
/// `error` set; evaluation carries on with the remaining items.
pub fn evaluate_dataset(
    records: &[ManifestRecord],
    base: &Path,
    methods: &[Method],
    scorer: Option<&PesqScorer>,
    exec: &Executor,
) -> EvalReport {
    let mut rows = Vec::with_capacity(records.len() * methods.len());
    for method in methods {
        rows.extend(exec.map(records, |r| {
            evaluate_item(r, base, method, scorer).unwrap_or_else(|e| EvalRow {
                id: r.id.clone(),
                method: method.tag().to_string(),
                ser_db: r.spec.ser_db,
                erle_db: None,
                pesq: None,
                delta_pesq: None,
                error: Some(e.to_string()),
            })
        }));
    }
    EvalReport { rows }
}
