//! Axis-aligned boxes, detections and ground-truth labels.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::Micros;

/// Corner-form box `(x_min, y_min, x_max, y_max)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::arg("box coordinates must be finite"));
        }
        if self.x_min >= self.x_max {
            return Err(Error::arg(format!(
                "x_min {} must be < x_max {}",
                self.x_min, self.x_max
            )));
        }
        if self.y_min >= self.y_max {
            return Err(Error::arg(format!(
                "y_min {} must be < y_max {}",
                self.y_min, self.y_max
            )));
        }
        Ok(())
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Clip to `[0, w] x [0, h]`; `None` if nothing with positive area remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.clamp(0.0, w),
            y_min: self.y_min.clamp(0.0, h),
            x_max: self.x_max.clamp(0.0, w),
            y_max: self.y_max.clamp(0.0, h),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn lerp(&self, other: &BBox, fraction: f64) -> BBox {
        let l = |a: f64, b: f64| a + (b - a) * fraction;
        BBox {
            x_min: l(self.x_min, other.x_min),
            y_min: l(self.y_min, other.y_min),
            x_max: l(self.x_max, other.x_max),
            y_max: l(self.y_max, other.y_max),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let ih = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

/// Intersection over union; errors on zero-area boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::arg("iou of a degenerate (zero-area) box"));
    }
    Ok(iou_unchecked(a, b))
}

/// IoU for boxes already known to have positive area.
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
    pub t: Micros,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: u32, score: f64, t: Micros) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::arg(format!("score {score} outside [0, 1]")));
        }
        Ok(Detection {
            bbox,
            class_id,
            score,
            t,
        })
    }

    /// Deterministic ordering: score descending, then box coordinates and class ascending.
    pub fn rank_cmp(&self, other: &Detection) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.tie_break_cmp(other))
    }

    pub(crate) fn tie_break_cmp(&self, other: &Detection) -> Ordering {
        self.bbox
            .x_min
            .total_cmp(&other.bbox.x_min)
            .then(self.bbox.y_min.total_cmp(&other.bbox.y_min))
            .then(self.bbox.x_max.total_cmp(&other.bbox.x_max))
            .then(self.bbox.y_max.total_cmp(&other.bbox.y_max))
            .then(self.class_id.cmp(&other.class_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: u32,
    pub track_id: u64,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, class_id: u32, track_id: u64) -> Result<Self> {
        bbox.validate()?;
        Ok(GroundTruthBox {
            bbox,
            class_id,
            track_id,
        })
    }
}
