//! COCO-style scoring and the multi-frequency evaluation harness.

pub mod coco;
pub mod sweep;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use coco::{average_precision, coco_map, interpolated_ap, iou_thresholds, AreaRange, EvalBundle, EvalImage};
pub use sweep::{
    evaluate_points, frequency_points, frequency_sweep, offset_points, EvalOptions, EvalPoint, FrequencySweep, GtMode,
    SweepPoints, SweepResult,
};

/// Written in place of metrics that have no ground truth to score against.
pub const UNDEFINED: &str = "undefined";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:.6}"))
}

/// Metrics table: one row per sweep point, one AP column per class seen.
pub fn metrics_csv(sweep: &FrequencySweep) -> String {
    let classes: BTreeSet<u32> = sweep
        .results
        .iter()
        .flat_map(|r| r.bundle.per_class.keys().copied())
        .collect();
    let mut out = String::from("frequency_hz,offset,map,ap50,ap75,ap_s,ap_m,ap_l");
    for c in &classes {
        let _ = write!(out, ",ap_class_{c}");
    }
    out.push('\n');
    for r in &sweep.results {
        let b = &r.bundle;
        let _ = write!(
            out,
            "{:.3},{},{},{},{},{},{},{}",
            r.frequency_hz,
            r.offset.map_or_else(String::new, |o| format!("{o:.4}")),
            cell(b.map),
            cell(b.ap50),
            cell(b.ap75),
            cell(b.ap_s),
            cell(b.ap_m),
            cell(b.ap_l)
        );
        for c in &classes {
            let _ = write!(out, ",{}", cell(b.per_class.get(c).copied()));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub y: Vec<Option<f64>>,
}

/// Metric-versus-frequency series for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_label: String,
    pub convention: String,
    pub gt_mode: GtMode,
    pub x: Vec<f64>,
    pub series: Vec<PlotSeries>,
}

pub fn plot_data(sweep: &FrequencySweep) -> PlotData {
    let pick = |name: &str, f: fn(&EvalBundle) -> Option<f64>| PlotSeries {
        name: name.to_string(),
        y: sweep.results.iter().map(|r| f(&r.bundle)).collect(),
    };
    PlotData {
        x_label: "frequency_hz".into(),
        convention: sweep.convention.clone(),
        gt_mode: sweep.gt_mode,
        x: sweep.results.iter().map(|r| r.frequency_hz).collect(),
        series: vec![
            pick("map", |b| b.map),
            pick("ap50", |b| b.ap50),
            pick("ap75", |b| b.ap75),
        ],
    }
}
