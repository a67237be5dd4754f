//! Evaluation modes, reports and the command-line surface.

mod cli;
pub mod config;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cli::{exit_code, run_cli};
pub use config::RunConfig;
pub use metrics::{confusion, f1_from, metrics, ConfusionCounts, Metrics, Rate};

use crate::arbitration::{score_batch, Prediction, VoteConfig};
use crate::backbone::{Backbone, Prompt};
use crate::dataset::SmfExample;
use crate::error::{Error, Result};
use crate::fs_blocks::FsHeads;
use crate::training::PatchCache;

/// Which verdict a report scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    /// The backbone's own verdict token (the LoRA-only baseline).
    VlmOnly,
    /// Head `k`, 1-based.
    FsOnly(usize),
    Ensemble,
}

impl Mode {
    /// `vlm_only`, `fs_only_1..fs_only_K`, `ensemble`.
    pub fn all(k: usize) -> Vec<Mode> {
        let mut v = vec![Mode::VlmOnly];
        v.extend((1..=k).map(Mode::FsOnly));
        v.push(Mode::Ensemble);
        v
    }

    fn pick(self, p: &Prediction) -> Result<u8> {
        match self {
            Mode::VlmOnly => Ok(p.y_vlm),
            Mode::Ensemble => Ok(p.y_hat),
            Mode::FsOnly(k) => p
                .y
                .get(k.wrapping_sub(1))
                .copied()
                .ok_or_else(|| Error::Config(format!("mode fs_only_{k} but only {} heads", p.y.len()))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::VlmOnly => f.write_str("vlm_only"),
            Mode::FsOnly(k) => write!(f, "fs_only_{k}"),
            Mode::Ensemble => f.write_str("ensemble"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vlm_only" => Ok(Mode::VlmOnly),
            "ensemble" => Ok(Mode::Ensemble),
            _ => s
                .strip_prefix("fs_only_")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(Mode::FsOnly)
                .ok_or_else(|| Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBreakdown {
    pub n: u64,
    pub confusion: ConfusionCounts,
    pub accuracy: Rate,
    pub detection_rate: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub n: u64,
    pub confusion: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Fraction of correct votes per head (ensemble mode only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_head_accuracy: Vec<f64>,
    pub per_category: BTreeMap<String, CategoryBreakdown>,
}

/// Scores every example with one backbone pass per batch.
pub fn predict_examples(
    model: &Backbone<f32>,
    heads: &FsHeads<f32>,
    examples: &[&SmfExample],
    vote: &VoteConfig,
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    vote.validate()?;
    if vote.k != heads.len() {
        return Err(Error::Config(format!(
            "vote config has K={} but the checkpoint holds {} heads",
            vote.k,
            heads.len()
        )));
    }
    let cache = PatchCache::build(model, examples)?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let prompts = chunk
            .iter()
            .map(|e| cache.prompt(model, e))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Prompt<f32>> = prompts.iter().collect();
        for (e, s) in chunk.iter().zip(score_batch(model, heads, &refs)?) {
            out.push(Prediction::assemble(&e.id, s.y_vlm, &s.probs, e.label, vote)?);
        }
    }
    Ok(out)
}

/// One report per mode over already-scored examples.
pub fn report_modes(examples: &[&SmfExample], preds: &[Prediction], modes: &[Mode]) -> Result<Vec<MetricsReport>> {
    if examples.len() != preds.len() {
        return Err(Error::Shape(format!("{} examples, {} predictions", examples.len(), preds.len())));
    }
    modes
        .iter()
        .map(|&mode| {
            let mut all = ConfusionCounts::default();
            let mut cats: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
            for (e, p) in examples.iter().zip(preds) {
                let y = mode.pick(p)?;
                all.add(y, e.label);
                cats.entry(e.category.clone()).or_default().add(y, e.label);
            }
            let per_head_accuracy = if mode == Mode::Ensemble && !preds.is_empty() {
                (0..preds[0].y.len())
                    .map(|k| {
                        let hits = preds.iter().filter(|p| p.y[k] == p.label).count();
                        hits as f64 / preds.len() as f64
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let per_category = cats
                .into_iter()
                .map(|(name, c)| {
                    let m = metrics(&c);
                    let accuracy = Rate {
                        value: Some((c.tp + c.tn) as f64 / c.n() as f64),
                        reason: None,
                    };
                    let b = CategoryBreakdown {
                        n: c.n(),
                        confusion: c,
                        accuracy,
                        detection_rate: m.detection_rate,
                    };
                    (name, b)
                })
                .collect();
            Ok(MetricsReport {
                mode: mode.to_string(),
                n: all.n(),
                confusion: all,
                metrics: metrics(&all),
                per_head_accuracy,
                per_category,
            })
        })
        .collect()
}

/// Scores `examples` and builds the per-mode reports.
pub fn evaluate(
    model: &Backbone<f32>,
    heads: &FsHeads<f32>,
    examples: &[&SmfExample],
    vote: &VoteConfig,
    modes: &[Mode],
    batch_size: usize,
) -> Result<(Vec<Prediction>, Vec<MetricsReport>)> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation set".into()));
    }
    let preds = predict_examples(model, heads, examples, vote, batch_size)?;
    let reports = report_modes(examples, &preds, modes)?;
    Ok((preds, reports))
}

/// Everything an `eval` run writes, minus the wall-clock stamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub set: String,
    pub split: String,
    pub manifest_checksum: String,
    pub backbone_sha256: String,
    pub fs_sha256: String,
    pub config: serde_json::Value,
    pub reports: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportStamp {
    pub report_sha256: String,
    pub generated_at_unix: u64,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `<out>` (deterministic JSON), `<stem>.stamp.json` (hash and time),
/// `<stem>.heads.csv` and `<stem>.categories.csv`. Returns the report hash.
pub fn write_report(report: &EvalReport, out: &Path) -> Result<String> {
    let mut body = serde_json::to_vec_pretty(report)?;
    body.push(b'\n');
    write(out, &body)?;
    let hash = hex::encode(Sha256::digest(&body));
    let stamp = ReportStamp {
        report_sha256: hash.clone(),
        generated_at_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    write(&with_suffix(out, ".stamp.json"), &serde_json::to_vec_pretty(&stamp)?)?;

    let mut heads = Vec::new();
    let mut cats = Vec::new();
    for r in &report.reports {
        for (k, a) in r.per_head_accuracy.iter().enumerate() {
            heads.push(vec![r.mode.clone(), (k + 1).to_string(), a.to_string()]);
        }
        for (name, c) in &r.per_category {
            cats.push(vec![
                r.mode.clone(),
                name.clone(),
                c.n.to_string(),
                c.confusion.tp.to_string(),
                c.confusion.fp.to_string(),
                c.confusion.fn_.to_string(),
                c.confusion.tn.to_string(),
                opt(c.accuracy.value),
                opt(c.detection_rate.value),
            ]);
        }
    }
    write(&with_suffix(out, ".heads.csv"), &csv_bytes(&["mode", "head", "accuracy"], &heads)?)?;
    write(
        &with_suffix(out, ".categories.csv"),
        &csv_bytes(
            &["mode", "category", "n", "tp", "fp", "fn", "tn", "accuracy", "detection_rate"],
            &cats,
        )?,
    )?;
    Ok(hash)
}

/// Prediction dump, one JSON object per line.
pub fn write_predictions(preds: &[Prediction], out: &Path) -> Result<()> {
    let mut s = String::new();
    for p in preds {
        s.push_str(&p.to_json_line());
        s.push('\n');
    }
    write(out, s.as_bytes())
}
