use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_unchecked, Detection, GroundTruthBox};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

/// Half-open range of box areas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub min: f64,
    pub max: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        min: 0.0,
        max: f64::INFINITY,
    };
    pub const SMALL: AreaRange = AreaRange {
        min: 0.0,
        max: SMALL_AREA,
    };
    pub const MEDIUM: AreaRange = AreaRange {
        min: SMALL_AREA,
        max: LARGE_AREA,
    };
    pub const LARGE: AreaRange = AreaRange {
        min: LARGE_AREA,
        max: f64::INFINITY,
    };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.min && area < self.max
    }
}

/// Detections and ground truth of one evaluated instant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruthBox>,
}

/// Average precision of one class over all images jointly.
///
/// Detections are matched greedily in descending score order (ties keep
/// image then input order) to the unmatched ground truth of highest IoU,
/// lowest index on ties. Ground truth outside `area` is ignored: a
/// detection matched to it, or unmatched and itself outside `area`, counts
/// as neither true nor false positive. Returns `None` when no ground truth
/// falls in `area`.
pub fn average_precision(images: &[EvalImage], class_id: u32, iou_threshold: f64, area: AreaRange) -> Result<Option<f64>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::arg(format!("IoU threshold {iou_threshold} outside [0, 1]")));
    }
    let mut npos = 0usize;
    // (score, image, det index)
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (ii, img) in images.iter().enumerate() {
        npos += img
            .gts
            .iter()
            .filter(|g| g.class_id == class_id && area.contains(g.bbox.area()))
            .count();
        for (di, d) in img.detections.iter().enumerate() {
            if d.class_id == class_id {
                order.push((d.score, ii, di));
            }
        }
    }
    if npos == 0 {
        return Ok(None);
    }
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut matched: Vec<Vec<bool>> = images.iter().map(|i| vec![false; i.gts.len()]).collect();
    let mut flags: Vec<bool> = Vec::with_capacity(order.len());
    for &(_, ii, di) in &order {
        let img = &images[ii];
        let d = &img.detections[di];
        let mut best: Option<(bool, f64, usize)> = None;
        for (gi, g) in img.gts.iter().enumerate() {
            if g.class_id != class_id || matched[ii][gi] {
                continue;
            }
            let v = iou_unchecked(&d.bbox, &g.bbox);
            if v < iou_threshold {
                continue;
            }
            let ignored = !area.contains(g.bbox.area());
            // non-ignored ground truth is preferred, then IoU, then index
            let better = match best {
                None => true,
                Some((bi, bv, _)) => (!ignored && bi) || (ignored == bi && v > bv),
            };
            if better {
                best = Some((ignored, v, gi));
            }
        }
        match best {
            Some((ignored, _, gi)) => {
                matched[ii][gi] = true;
                if !ignored {
                    flags.push(true);
                }
            }
            None => {
                if area.contains(d.bbox.area()) {
                    flags.push(false);
                }
            }
        }
    }
    Ok(Some(interpolated_ap(&flags, npos)))
}

/// 101-point interpolated AP from ranked true/false positive flags.
pub fn interpolated_ap(flags: &[bool], npos: usize) -> f64 {
    let mut prec = Vec::with_capacity(flags.len());
    let mut rec = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        prec.push(tp as f64 / (tp + fp) as f64);
        rec.push(tp as f64 / npos as f64);
    }
    // precision envelope from the right
    for i in (0..prec.len().saturating_sub(1)).rev() {
        if prec[i + 1] > prec[i] {
            prec[i] = prec[i + 1];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let i = rec.partition_point(|&x| x < r);
        if i < prec.len() {
            sum += prec[i];
        }
    }
    sum / 101.0
}

/// COCO summary metrics; `None` marks a stratum without ground truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    /// Class id to AP averaged over IoU thresholds.
    pub per_class: BTreeMap<u32, f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean AP over IoU thresholds and classes with ground truth, plus the
/// usual breakdowns.
pub fn coco_map(images: &[EvalImage]) -> Result<EvalBundle> {
    let classes: BTreeSet<u32> = images.iter().flat_map(|i| i.gts.iter().map(|g| g.class_id)).collect();
    let thresholds = iou_thresholds();
    let strat = |area: AreaRange, only: Option<usize>| -> Result<Option<f64>> {
        let mut vals = Vec::new();
        for &c in &classes {
            for (ti, &t) in thresholds.iter().enumerate() {
                if only.is_some_and(|o| o != ti) {
                    continue;
                }
                if let Some(ap) = average_precision(images, c, t, area)? {
                    vals.push(ap);
                }
            }
        }
        Ok(mean(&vals))
    };
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let mut vals = Vec::new();
        for &t in &thresholds {
            vals.extend(average_precision(images, c, t, AreaRange::ALL)?);
        }
        if let Some(m) = mean(&vals) {
            per_class.insert(c, m);
        }
    }
    Ok(EvalBundle {
        map: strat(AreaRange::ALL, None)?,
        ap50: strat(AreaRange::ALL, Some(0))?,
        ap75: strat(AreaRange::ALL, Some(5))?,
        ap_s: strat(AreaRange::SMALL, None)?,
        ap_m: strat(AreaRange::MEDIUM, None)?,
        ap_l: strat(AreaRange::LARGE, None)?,
        per_class,
    })
}
