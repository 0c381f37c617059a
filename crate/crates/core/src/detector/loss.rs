//! Grid head decoding and the three-part detection loss.
//!
//! Head channels per cell: objectness logit, one logit per class, then box
//! offsets `(tx, ty, tw, th)`. A cell `(gx, gy)` with stride `s` decodes to
//! center `((gx + 0.5 + tx) s, (gy + 0.5 + ty) s)` and size `(e^tw s, e^th s)`.

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruthBox};
use crate::fusion::FeatureMap;

/// Log-size offsets are clamped to this magnitude when decoding.
pub const MAX_LOG_SIZE: f64 = 10.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iou_loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub fuse_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(iou_loss: f64, cls_loss: f64, reg_loss: f64, fuse_reg: f64) -> Self {
        LossBreakdown {
            iou_loss,
            cls_loss,
            reg_loss,
            fuse_reg,
            total: iou_loss + cls_loss + reg_loss + fuse_reg,
        }
    }

    pub fn with_fuse_reg(self, fuse_reg: f64) -> Self {
        Self::new(self.iou_loss, self.cls_loss, self.reg_loss, fuse_reg)
    }

    pub fn scaled(self, k: f64) -> Self {
        Self::new(self.iou_loss * k, self.cls_loss * k, self.reg_loss * k, self.fuse_reg * k)
    }

    pub fn add(self, o: LossBreakdown) -> Self {
        Self::new(
            self.iou_loss + o.iou_loss,
            self.cls_loss + o.cls_loss,
            self.reg_loss + o.reg_loss,
            self.fuse_reg + o.fuse_reg,
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.iou_loss, self.cls_loss, self.reg_loss, self.fuse_reg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Raw head activations on a `(1 + K + 4, gh, gw)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub num_classes: usize,
    pub stride: f64,
    pub map: FeatureMap,
}

impl HeadOutput {
    pub fn channels_for(num_classes: usize) -> usize {
        1 + num_classes + 4
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.map.height, self.map.width)
    }

    pub fn cells(&self) -> usize {
        self.map.plane()
    }

    pub fn at(&self, ch: usize, cell: usize) -> f64 {
        self.map.data[ch * self.cells() + cell]
    }

    pub fn obj_channel(&self) -> usize {
        0
    }

    pub fn cls_channel(&self, k: usize) -> usize {
        1 + k
    }

    pub fn box_channel(&self, j: usize) -> usize {
        1 + self.num_classes + j
    }

    /// Decoded box of `cell` (unclipped).
    pub fn decode_box(&self, cell: usize) -> BBox {
        let (_, gw) = self.grid();
        let (gx, gy) = ((cell % gw) as f64, (cell / gw) as f64);
        let t: [f64; 4] = std::array::from_fn(|j| self.at(self.box_channel(j), cell));
        let s = self.stride;
        let cx = (gx + 0.5 + t[0]) * s;
        let cy = (gy + 0.5 + t[1]) * s;
        let w = t[2].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * s;
        let h = t[3].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * s;
        BBox::from_center(cx, cy, w, h)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, numerically stable form.
pub fn bce_with_logits(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

/// A ground-truth box assigned to the grid cell containing its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub cell: usize,
    pub gt: GroundTruthBox,
    pub target: [f64; 4],
}

/// Center-in-cell assignment; when two boxes share a cell the larger wins
/// (ties by input order).
pub fn assign(gts: &[GroundTruthBox], grid: (usize, usize), stride: f64) -> Vec<Assignment> {
    let (gh, gw) = grid;
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| gts[b].bbox.area().total_cmp(&gts[a].bbox.area()).then(a.cmp(&b)));
    let mut taken = vec![false; gh * gw];
    let mut out = Vec::new();
    for i in order {
        let g = gts[i];
        let (cx, cy) = g.bbox.center();
        let gx = ((cx / stride).floor().max(0.0) as usize).min(gw - 1);
        let gy = ((cy / stride).floor().max(0.0) as usize).min(gh - 1);
        let cell = gy * gw + gx;
        if taken[cell] {
            continue;
        }
        taken[cell] = true;
        out.push(Assignment {
            cell,
            gt: g,
            target: [
                cx / stride - gx as f64 - 0.5,
                cy / stride - gy as f64 - 0.5,
                (g.bbox.width() / stride).ln(),
                (g.bbox.height() / stride).ln(),
            ],
        });
    }
    out.sort_by_key(|a| a.cell);
    out
}

/// IoU of two boxes and its gradient w.r.t. the first box's corners.
fn iou_with_grad(p: &BBox, g: &BBox) -> (f64, [f64; 4]) {
    let ix1 = p.x_min.max(g.x_min);
    let iy1 = p.y_min.max(g.y_min);
    let ix2 = p.x_max.min(g.x_max);
    let iy2 = p.y_max.min(g.y_max);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let ap = p.width() * p.height();
    let ag = g.width() * g.height();
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = ap + ag - inter;
    let iou = inter / union;
    // d inter / d corner
    let di = [
        if p.x_min > g.x_min { -ih } else { 0.0 },
        if p.y_min > g.y_min { -iw } else { 0.0 },
        if p.x_max < g.x_max { ih } else { 0.0 },
        if p.y_max < g.y_max { iw } else { 0.0 },
    ];
    let (pw, ph) = (p.width(), p.height());
    let dap = [-ph, -pw, ph, pw];
    let k_inter = 1.0 / union + inter / (union * union);
    let k_area = -inter / (union * union);
    (iou, std::array::from_fn(|j| k_inter * di[j] + k_area * dap[j]))
}

/// Detection loss and its gradient with respect to every head activation.
///
/// Each term is a sum over cells normalized by `max(1, #positives)`:
/// `1 - IoU` and L1 offset error on positives, class BCE on positives and
/// objectness BCE on every cell. `fuse_reg` is left at zero.
pub fn detection_loss(head: &HeadOutput, gts: &[GroundTruthBox]) -> (LossBreakdown, FeatureMap) {
    let cells = head.cells();
    let k = head.num_classes;
    let s = head.stride;
    let assigned = assign(gts, head.grid(), s);
    let norm = (assigned.len().max(1)) as f64;
    let mut grad = FeatureMap::zeros(head.map.channels, head.map.height, head.map.width, head.map.scale_index);
    let obj_ch = head.obj_channel();

    let mut obj_target = vec![0.0; cells];
    for a in &assigned {
        obj_target[a.cell] = 1.0;
    }
    let mut cls_sum = 0.0;
    for cell in 0..cells {
        let z = head.at(obj_ch, cell);
        cls_sum += bce_with_logits(z, obj_target[cell]);
        grad.data[obj_ch * cells + cell] = (sigmoid(z) - obj_target[cell]) / norm;
    }

    let mut iou_sum = 0.0;
    let mut reg_sum = 0.0;
    for a in &assigned {
        let cell = a.cell;
        for c in 0..k {
            let ch = head.cls_channel(c);
            let y = if a.gt.class_id as usize == c { 1.0 } else { 0.0 };
            let z = head.at(ch, cell);
            cls_sum += bce_with_logits(z, y);
            grad.data[ch * cells + cell] = (sigmoid(z) - y) / norm;
        }
        let t: [f64; 4] = std::array::from_fn(|j| head.at(head.box_channel(j), cell));
        for j in 0..4 {
            let r = t[j] - a.target[j];
            reg_sum += r.abs();
            grad.data[head.box_channel(j) * cells + cell] += r.signum() * f64::from(u8::from(r != 0.0)) / norm;
        }
        let pred = head.decode_box(cell);
        let (iou, d_corner) = iou_with_grad(&pred, &a.gt.bbox);
        iou_sum += 1.0 - iou;
        // corners = (cx -+ w/2, cy -+ h/2); cx = (gx + .5 + tx) s; w = e^tw s
        let w = pred.width();
        let h = pred.height();
        let d_cx = d_corner[0] + d_corner[2];
        let d_cy = d_corner[1] + d_corner[3];
        let d_w = 0.5 * (d_corner[2] - d_corner[0]);
        let d_h = 0.5 * (d_corner[3] - d_corner[1]);
        let in_range = |v: f64| f64::from(u8::from(v.abs() < MAX_LOG_SIZE));
        let d_t = [
            d_cx * s,
            d_cy * s,
            d_w * w * in_range(t[2]),
            d_h * h * in_range(t[3]),
        ];
        for j in 0..4 {
            // loss term is 1 - IoU
            grad.data[head.box_channel(j) * cells + cell] -= d_t[j] / norm;
        }
    }

    (
        LossBreakdown::new(iou_sum / norm, cls_sum / norm, reg_sum / norm, 0.0),
        grad,
    )
}

/// Distance of the current head state from the loss's non-differentiable
/// points (L1 zero crossings, IoU corner ties and overlap boundaries).
pub fn loss_kink_margin(head: &HeadOutput, gts: &[GroundTruthBox]) -> f64 {
    let mut m = f64::INFINITY;
    for a in assign(gts, head.grid(), head.stride) {
        for j in 0..4 {
            let t = head.at(head.box_channel(j), a.cell);
            m = m.min((t - a.target[j]).abs());
        }
        for j in 2..4 {
            m = m.min(MAX_LOG_SIZE - head.at(head.box_channel(j), a.cell).abs());
        }
        let p = head.decode_box(a.cell);
        let g = a.gt.bbox;
        let pairs = [
            (p.x_min, g.x_min),
            (p.y_min, g.y_min),
            (p.x_max, g.x_max),
            (p.y_max, g.y_max),
            (p.x_min, g.x_max),
            (p.x_max, g.x_min),
            (p.y_min, g.y_max),
            (p.y_max, g.y_min),
        ];
        for (u, v) in pairs {
            m = m.min((u - v).abs());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;

    fn gt(x0: f64, y0: f64, x1: f64, y1: f64, class_id: u32) -> GroundTruthBox {
        GroundTruthBox::new(BBox::new(x0, y0, x1, y1).unwrap(), class_id, 0).unwrap()
    }

    fn head(k: usize, gh: usize, gw: usize, data: Vec<f64>) -> HeadOutput {
        HeadOutput {
            num_classes: k,
            stride: 4.0,
            map: FeatureMap::from_vec(HeadOutput::channels_for(k), gh, gw, data, 0).unwrap(),
        }
    }

    #[test]
    fn no_gt_only_objectness_term() {
        let h = head(2, 2, 2, vec![0.0; 7 * 4]);
        let (l, _) = detection_loss(&h, &[]);
        assert_eq!(l.iou_loss, 0.0);
        assert_eq!(l.reg_loss, 0.0);
        assert!((l.cls_loss - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.total, l.cls_loss);
    }

    #[test]
    fn saturated_perfect_prediction_has_near_zero_loss() {
        let gts = [gt(2.0, 3.0, 9.0, 7.0, 1), gt(9.0, 9.0, 15.0, 16.0, 0)];
        let mut h = head(2, 4, 4, vec![0.0; 7 * 16]);
        let cells = 16;
        for c in 0..cells {
            h.map.data[c] = -30.0;
        }
        for a in assign(&gts, (4, 4), 4.0) {
            h.map.data[a.cell] = 30.0;
            for c in 0..2 {
                h.map.data[(1 + c) * cells + a.cell] = if a.gt.class_id as usize == c { 30.0 } else { -30.0 };
            }
            for j in 0..4 {
                h.map.data[(3 + j) * cells + a.cell] = a.target[j];
            }
        }
        let (l, _) = detection_loss(&h, &gts);
        assert!(l.iou_loss <= 1e-3 && l.cls_loss <= 1e-3 && l.reg_loss <= 1e-3, "{l:?}");
        assert!(l.total <= 1e-3);
    }

    #[test]
    fn larger_box_wins_shared_cell() {
        let gts = [gt(1.0, 1.0, 3.0, 3.0, 0), gt(0.0, 0.0, 4.0, 4.0, 1)];
        let a = assign(&gts, (2, 2), 4.0);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].gt.class_id, 1);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_on_4x4_grid() {
        let mut rng = seed::stream(21, "loss-fd");
        let gts = [gt(1.5, 2.5, 10.2, 8.1, 0), gt(8.3, 9.1, 14.7, 15.2, 1)];
        let mut checked = 0;
        while checked < 20 {
            let data: Vec<f64> = (0..7 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = head(2, 4, 4, data);
            if loss_kink_margin(&h, &gts) < 1e-3 {
                continue;
            }
            checked += 1;
            let (_, g) = detection_loss(&h, &gts);
            for i in 0..h.map.data.len() {
                let step = 1e-5;
                let mut hp = h.clone();
                hp.map.data[i] += step;
                let mut hm = h.clone();
                hm.map.data[i] -= step;
                let fd = (detection_loss(&hp, &gts).0.total - detection_loss(&hm, &gts).0.total) / (2.0 * step);
                let a = g.data[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err <= 1e-4, "param {i}: analytic {a} vs fd {fd}");
            }
        }
    }
}
