//! Scoring and evaluation.
//!
//! `scores.tsv`: a `#` header line, then one line per record:
//! `path<TAB>score<TAB>label<TAB>attack_type`.
//! `metrics.toml`: `apcer`, `bpcer`, `acer`, `hter`, `auc`, `threshold`
//! and `threshold_source` (`dev-eer` or `fixed`).

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::{read_image, ManifestRecord};
use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{eer_threshold, spoof_score, summarize, MetricsSummary, ScoredSample};
use crate::model::Model;

pub const SCORES_FILE: &str = "scores.tsv";
pub const METRICS_FILE: &str = "metrics.toml";
pub const SCORES_HEADER: &str = "# path\tscore\tlabel\tattack_type";
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord {
    pub record: ManifestRecord,
    pub score: f64,
}

impl ScoredRecord {
    pub fn sample(&self) -> ScoredSample {
        ScoredSample {
            score: self.score,
            label: self.record.label,
            attack_type: self.record.attack_type,
        }
    }
}

/// Eval-mode spoof score (mean of C_F) for every record, no augmentation.
pub fn score_records<T: Element>(
    model: &Model<T>,
    root: &Path,
    records: &[ManifestRecord],
) -> Result<Vec<ScoredRecord>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let xs = chunk
            .iter()
            .map(|r| Ok(read_image(&root.join(&r.path))?.to_tensor::<T>()))
            .collect::<Result<Vec<_>>>()?;
        let maps = model.score_maps(&Tensor::stack(&xs)?)?;
        for (i, r) in chunk.iter().enumerate() {
            let map = maps.select(&[i])?;
            let score = spoof_score(&map)?;
            if !score.is_finite() {
                return Err(Error::NonFinite(format!("score of {}", r.path)));
            }
            out.push(ScoredRecord {
                record: r.clone(),
                score,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdSource {
    DevEer,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<ScoredRecord>,
    pub summary: MetricsSummary,
    pub threshold_source: ThresholdSource,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    #[serde(flatten)]
    summary: &'a MetricsSummary,
    threshold_source: ThresholdSource,
}

impl EvalReport {
    pub fn scores_text(&self) -> String {
        let mut out = String::from(SCORES_HEADER);
        out.push('\n');
        for s in &self.scores {
            let r = &s.record;
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.path, s.score, r.label, r.attack_type
            )
            .unwrap();
        }
        out
    }

    pub fn metrics_text(&self) -> String {
        toml::to_string(&MetricsFile {
            summary: &self.summary,
            threshold_source: self.threshold_source,
        })
        .expect("metrics serialize")
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        for (name, text) in [
            (SCORES_FILE, self.scores_text()),
            (METRICS_FILE, self.metrics_text()),
        ] {
            let p = out_dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Score `test`, pick the threshold (dev EER, or the explicit one) and
/// compute the summary metrics.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    root: &Path,
    test: &[ManifestRecord],
    dev: Option<&[ManifestRecord]>,
    threshold: Option<f64>,
) -> Result<EvalReport> {
    let (threshold, source) = match (threshold, dev) {
        (Some(t), _) => (t, ThresholdSource::Fixed),
        (None, Some(dev)) => {
            let scored = score_records(model, root, dev)?;
            let samples: Vec<_> = scored.iter().map(ScoredRecord::sample).collect();
            (eer_threshold(&samples)?, ThresholdSource::DevEer)
        }
        (None, None) => {
            return Err(Error::Metrics(
                "ACER needs a threshold: pass a dev manifest or an explicit threshold".into(),
            ))
        }
    };
    let scores = score_records(model, root, test)?;
    let samples: Vec<_> = scores.iter().map(ScoredRecord::sample).collect();
    Ok(EvalReport {
        summary: summarize(&samples, threshold)?,
        scores,
        threshold_source: source,
    })
}
