//! Pseudo-label dumps (JSON lines) and per-round statistics tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{RoundStats, WindowLabels};
use crate::boxes::GroundTruthBox;
use crate::error::{Error, Result};
use crate::event::Micros;

/// One sub-window of pseudo-labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelRecord {
    pub sequence_id: String,
    pub window: [Micros; 2],
    pub labels: Vec<GroundTruthBox>,
}

/// Records for every pseudo-labelled sub-window, i.e. all but the last of
/// each labeled window. `sequence_ids` names the scenes in order.
pub fn pseudo_label_records(sequence_ids: &[String], labels: &[Vec<WindowLabels>]) -> Result<Vec<PseudoLabelRecord>> {
    if sequence_ids.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} sequence ids for {} scenes",
            sequence_ids.len(),
            labels.len()
        )));
    }
    let mut out = Vec::new();
    for (id, per_window) in sequence_ids.iter().zip(labels) {
        for wl in per_window {
            let last = wl.windows.len() - 1;
            for (w, l) in wl.windows.iter().zip(&wl.labels.windows).take(last) {
                out.push(PseudoLabelRecord {
                    sequence_id: id.clone(),
                    window: [w.t1, w.t2],
                    labels: l.clone(),
                });
            }
        }
    }
    Ok(out)
}

pub fn records_to_jsonl(records: &[PseudoLabelRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::json("pseudo-label record", e))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse a dump; errors name the 1-based line.
pub fn records_from_jsonl(text: &str) -> Result<Vec<PseudoLabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: PseudoLabelRecord =
            serde_json::from_str(line).map_err(|e| Error::data(format!("pseudo-labels line {}: {e}", i + 1)))?;
        if r.window[0] >= r.window[1] {
            return Err(Error::data(format!("pseudo-labels line {}: window must satisfy t1 < t2", i + 1)));
        }
        out.push(r);
    }
    Ok(out)
}

pub const ROUNDS_HEADER: &str = "round,raw,after_nms,after_filter,tracklets,kept_tracklets,labels,pseudo_labels,\
mean_score,gt_samples,pseudo_samples,mean_loss";

pub fn rounds_csv(history: &[RoundStats]) -> String {
    let mut out = format!("{ROUNDS_HEADER}\n");
    for r in history {
        let c = &r.calibration;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{:.6}",
            r.round,
            c.raw,
            c.after_nms,
            c.after_filter,
            c.tracklets,
            c.kept_tracklets,
            c.labels,
            r.pseudo_labels,
            r.mean_score.map_or_else(|| crate::eval::UNDEFINED.to_string(), |s| format!("{s:.6}")),
            r.gt_samples,
            r.pseudo_samples,
            r.mean_loss
        );
    }
    out
}
