//! Ground-truth label files: box lists keyed by timestamp.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruthBox};
use crate::error::{Error, Result};
use crate::event::Micros;

pub const LABELS_FORMAT_VERSION: u32 = 1;

pub type LabelSet = BTreeMap<Micros, Vec<GroundTruthBox>>;

#[derive(Serialize)]
struct LabelFile<'a> {
    format_version: u32,
    records: Vec<Record<'a>>,
}

#[derive(Serialize)]
struct Record<'a> {
    t: Micros,
    boxes: &'a [GroundTruthBox],
}

// Unvalidated mirror used while loading so that errors can name the record.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    format_version: u32,
    records: Vec<RawRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    t: Micros,
    boxes: Vec<RawBox>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class_id: u32,
    track_id: u64,
}

pub fn labels_to_json(labels: &LabelSet) -> Result<String> {
    let file = LabelFile {
        format_version: LABELS_FORMAT_VERSION,
        records: labels.iter().map(|(&t, b)| Record { t, boxes: b }).collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).map_err(|e| Error::json("labels", e))?;
    s.push('\n');
    Ok(s)
}

/// Parse and validate a label document. Whitespace-only input is an empty set.
pub fn labels_from_json(text: &str) -> Result<LabelSet> {
    if text.trim().is_empty() {
        return Ok(LabelSet::new());
    }
    let raw: RawFile = serde_json::from_str(text).map_err(|e| Error::data(format!("labels: {e}")))?;
    if raw.format_version != LABELS_FORMAT_VERSION {
        return Err(Error::data(format!(
            "labels: unsupported format_version {} (expected {LABELS_FORMAT_VERSION})",
            raw.format_version
        )));
    }
    let mut out = LabelSet::new();
    for (ri, rec) in raw.records.into_iter().enumerate() {
        if let Some((&last, _)) = out.last_key_value() {
            if rec.t <= last {
                return Err(Error::data(format!(
                    "labels: record {ri}: field t = {} must be greater than the previous record's t = {last}",
                    rec.t
                )));
            }
        }
        let mut boxes = Vec::with_capacity(rec.boxes.len());
        for (bi, b) in rec.boxes.into_iter().enumerate() {
            let [x0, y0, x1, y1] = b.bbox;
            let bbox = BBox::new(x0, y0, x1, y1)
                .map_err(|e| Error::data(format!("labels: record {ri}, box {bi}: {}", inner(&e))))?;
            boxes.push(GroundTruthBox {
                bbox,
                class_id: b.class_id,
                track_id: b.track_id,
            });
        }
        out.insert(rec.t, boxes);
    }
    Ok(out)
}

fn inner(e: &Error) -> String {
    match e {
        Error::Argument(m) | Error::Data(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn save_labels(path: &Path, labels: &LabelSet) -> Result<()> {
    crate::io::write_atomic(path, labels_to_json(labels)?.as_bytes())
}

pub fn load_labels(path: &Path) -> Result<LabelSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    labels_from_json(&text).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}
