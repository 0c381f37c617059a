use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::TuneConfig;
use crate::boxes::{iou_unchecked, Detection, GroundTruthBox};
use crate::error::{Error, Result};
use crate::event::Window;

/// Classwise greedy non-maximum suppression.
///
/// Output is in rank order (score descending, then box coordinates and
/// class), which makes the operation idempotent.
pub fn nms(dets: &[Detection], nms_iou: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| a.rank_cmp(b));
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou_unchecked(&k.bbox, &d.bbox) >= nms_iou);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Keep detections scoring at least the threshold of their class.
pub fn confidence_filter(dets: &[Detection], config: &TuneConfig) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.score >= config.threshold_for(d.class_id))
        .cloned()
        .collect()
}

/// Union forward detections with index-reversed backward detections.
///
/// Backward list `j` belongs to forward window `n - 1 - j`; its timestamps
/// are rewritten to the end of that window.
pub fn bidirectional_merge(
    forward: &[Vec<Detection>],
    backward: &[Vec<Detection>],
    windows: &[Window],
) -> Result<Vec<Vec<Detection>>> {
    let n = windows.len();
    if forward.len() != n || (!backward.is_empty() && backward.len() != n) {
        return Err(Error::arg(format!(
            "{} windows but forward pass has {} lists and backward pass {}",
            n,
            forward.len(),
            backward.len()
        )));
    }
    Ok(forward
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut merged = f.clone();
            if let Some(b) = backward.get(n - 1 - i) {
                merged.extend(b.iter().map(|d| Detection {
                    t: windows[i].t2,
                    ..*d
                }));
            }
            merged
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub track_id: u64,
    /// `(sub-window index, detection)` with strictly increasing indices.
    pub entries: Vec<(usize, Detection)>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn last(&self) -> &(usize, Detection) {
        self.entries.last().expect("tracklets are created non-empty")
    }

    pub fn mean_score(&self) -> f64 {
        self.entries.iter().map(|(_, d)| d.score).sum::<f64>() / self.len() as f64
    }
}

/// Greedy IoU tracking across consecutive windows.
///
/// A tracklet stays matchable while it has been missing for at most
/// `max_gap` windows. Within a window, candidate pairs are taken in IoU
/// order (ties by detection rank, then track id) and each side is used
/// at most once.
pub fn link_tracklets(per_window: &[Vec<Detection>], tau_iou: f64, max_gap: usize) -> Vec<Tracklet> {
    let mut tracks: Vec<Tracklet> = Vec::new();
    for (w, dets) in per_window.iter().enumerate() {
        let mut dets = dets.clone();
        dets.sort_by(|a, b| a.rank_cmp(b));
        let active: Vec<usize> = (0..tracks.len())
            .filter(|&i| tracks[i].last().0 + max_gap + 1 >= w)
            .collect();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for &ti in &active {
            let last = &tracks[ti].last().1;
            for (di, d) in dets.iter().enumerate() {
                if d.class_id != last.class_id {
                    continue;
                }
                let v = iou_unchecked(&last.bbox, &d.bbox);
                if v >= tau_iou {
                    pairs.push((v, ti, di));
                }
            }
        }
        // dets are already in rank order, so a smaller index breaks ties first
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.2.cmp(&b.2))
                .then(tracks[a.1].track_id.cmp(&tracks[b.1].track_id))
        });
        let mut track_used = vec![false; tracks.len()];
        let mut det_used = vec![false; dets.len()];
        for (_, ti, di) in pairs {
            if track_used[ti] || det_used[di] {
                continue;
            }
            track_used[ti] = true;
            det_used[di] = true;
            tracks[ti].entries.push((w, dets[di]));
        }
        for (di, d) in dets.into_iter().enumerate() {
            if !det_used[di] {
                let id = tracks.len() as u64;
                tracks.push(Tracklet {
                    track_id: id,
                    entries: vec![(w, d)],
                });
            }
        }
    }
    tracks
}

/// Refined labels per sub-window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub windows: Vec<Vec<GroundTruthBox>>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.windows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Drop tracklets shorter than `min_track_len` and turn the rest into labels.
pub fn prune_and_emit(tracklets: &[Tracklet], num_windows: usize, config: &TuneConfig) -> PseudoLabelSet {
    let mut windows = vec![Vec::new(); num_windows];
    for t in tracklets.iter().filter(|t| t.len() >= config.min_track_len) {
        for (w, d) in &t.entries {
            if let Some(slot) = windows.get_mut(*w) {
                slot.push(GroundTruthBox {
                    bbox: d.bbox,
                    class_id: d.class_id,
                    track_id: t.track_id,
                });
            }
        }
    }
    PseudoLabelSet { windows }
}

/// Counts from one calibration pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub raw: usize,
    pub after_nms: usize,
    pub after_filter: usize,
    pub tracklets: usize,
    pub kept_tracklets: usize,
    pub labels: usize,
    /// Sum of detection scores behind the emitted labels.
    pub score_sum: f64,
}

impl CalibrationStats {
    pub fn add(&mut self, o: &CalibrationStats) {
        self.raw += o.raw;
        self.after_nms += o.after_nms;
        self.after_filter += o.after_filter;
        self.tracklets += o.tracklets;
        self.kept_tracklets += o.kept_tracklets;
        self.labels += o.labels;
        self.score_sum += o.score_sum;
    }

    pub fn mean_score(&self) -> Option<f64> {
        (self.labels > 0).then(|| self.score_sum / self.labels as f64)
    }
}

/// Merge, suppress, filter, link and prune one labeled window's detections.
pub fn calibrate(
    forward: &[Vec<Detection>],
    backward: &[Vec<Detection>],
    windows: &[Window],
    config: &TuneConfig,
) -> Result<(PseudoLabelSet, CalibrationStats)> {
    let merged = bidirectional_merge(forward, backward, windows)?;
    let mut stats = CalibrationStats {
        raw: merged.iter().map(Vec::len).sum(),
        ..Default::default()
    };
    let filtered: Vec<Vec<Detection>> = merged
        .iter()
        .map(|d| {
            let kept = nms(d, config.nms_iou);
            stats.after_nms += kept.len();
            let kept = confidence_filter(&kept, config);
            stats.after_filter += kept.len();
            kept
        })
        .collect();
    let tracks = link_tracklets(&filtered, config.tau_iou, config.max_gap);
    stats.tracklets = tracks.len();
    let long: Vec<&Tracklet> = tracks.iter().filter(|t| t.len() >= config.min_track_len).collect();
    stats.kept_tracklets = long.len();
    stats.score_sum = long.iter().flat_map(|t| &t.entries).map(|(_, d)| d.score).sum();
    let labels = prune_and_emit(&tracks, filtered.len(), config);
    stats.labels = labels.len();
    Ok((labels, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, w: f64, h: f64, class_id: u32, score: f64) -> Detection {
        Detection::new(BBox::new(x, y, x + w, y + h).unwrap(), class_id, score, 0).unwrap()
    }

    fn cfg() -> TuneConfig {
        TuneConfig::default()
    }

    #[test]
    fn nms_examples() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0, 0.9);
        assert_eq!(nms(std::slice::from_ref(&a), 0.5), vec![a]);
        let b = Detection { score: 0.8, ..a };
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
        // other class is never suppressed
        let c = Detection { class_id: 1, ..b };
        assert_eq!(nms(&[c, a], 0.5).len(), 2);
    }

    #[test]
    fn confidence_boundary_is_inclusive() {
        let c = TuneConfig {
            tau_car: 0.6,
            tau_ped: 0.3,
            ..cfg()
        };
        let out = confidence_filter(
            &[
                det(0.0, 0.0, 4.0, 4.0, 0, 0.59),
                det(0.0, 0.0, 4.0, 4.0, 0, 0.60),
                det(0.0, 0.0, 4.0, 4.0, 1, 0.3),
                det(0.0, 0.0, 4.0, 4.0, 7, 0.29),
            ],
            &c,
        );
        assert_eq!(out.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.60, 0.3]);
    }

    #[test]
    fn merge_realigns_and_dedups() {
        let f = vec![vec![det(0.0, 0.0, 8.0, 8.0, 0, 0.9)], vec![]];
        let b = vec![vec![], vec![det(0.5, 0.0, 8.0, 8.0, 0, 0.85)]];
        let w = [Window::new(0, 10).unwrap(), Window::new(10, 20).unwrap()];
        let m = bidirectional_merge(&f, &b, &w).unwrap();
        assert_eq!(m[0].len(), 2);
        assert_eq!(m[0][1].t, 10);
        assert!(m[1].is_empty());
        assert_eq!(nms(&m[0], 0.5).len(), 1);
        assert_eq!(bidirectional_merge(&f, &[], &w).unwrap(), f);
        assert!(bidirectional_merge(&f, &b[..1], &w).is_err());
        assert!(bidirectional_merge(&f, &b, &w[..1]).is_err());
    }

    #[test]
    fn stationary_object_forms_one_tracklet() {
        let per: Vec<_> = (0..9).map(|_| vec![det(5.0, 5.0, 8.0, 8.0, 0, 0.9)]).collect();
        let t = link_tracklets(&per, 0.6, 0);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 9);
    }

    #[test]
    fn gap_splits_tracklet() {
        let per: Vec<_> = (0..9)
            .map(|i| if i == 4 { vec![] } else { vec![det(5.0, 5.0, 8.0, 8.0, 0, 0.9)] })
            .collect();
        let t = link_tracklets(&per, 0.6, 0);
        assert_eq!(t.iter().map(Tracklet::len).collect::<Vec<_>>(), vec![4, 4]);
        let t = link_tracklets(&per, 0.6, 1);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn gap_in_five_windows_splits_four_and_five() {
        let per: Vec<_> = (0..10)
            .map(|i| if i == 4 { vec![] } else { vec![det(5.0, 5.0, 8.0, 8.0, 0, 0.9)] })
            .collect();
        let t = link_tracklets(&per, 0.6, 0);
        assert_eq!(t.iter().map(Tracklet::len).collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn crossing_objects_keep_identity() {
        // paths cross at window 4 with cross-object IoU below the link threshold
        let per: Vec<_> = (0..9)
            .map(|i| {
                let s = i as f64;
                vec![det(16.0 + s, 10.0, 8.0, 8.0, 0, 0.9), det(24.0 - s, 14.0, 8.0, 8.0, 0, 0.8)]
            })
            .collect();
        let t = link_tracklets(&per, 0.6, 0);
        assert_eq!(t.len(), 2);
        for tr in &t {
            assert_eq!(tr.len(), 9);
            let xs: Vec<f64> = tr.entries.iter().map(|(_, d)| d.bbox.x_min).collect();
            assert!(xs.windows(2).all(|w| w[0] < w[1]) || xs.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn pruning() {
        let per: Vec<_> = (0..5).map(|_| vec![det(5.0, 5.0, 8.0, 8.0, 0, 0.9)]).collect();
        let t = link_tracklets(&per, 0.6, 0);
        let c6 = TuneConfig {
            min_track_len: 6,
            ..cfg()
        };
        assert!(prune_and_emit(&t, 5, &c6).is_empty());
        let c1 = TuneConfig {
            min_track_len: 1,
            ..cfg()
        };
        let all = prune_and_emit(&t, 5, &c1);
        assert_eq!(all.len(), 5);
        assert!(all.windows.iter().all(|w| w.len() == 1 && w[0].track_id == 0));
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0.0..50.0f64, 0.0..50.0f64, 1.0..20.0f64, 1.0..20.0f64, 0u32..2, 0.0..1.0f64),
            0..25,
        )
        .prop_map(|v| v.into_iter().map(|(x, y, w, h, c, s)| det(x, y, w, h, c, s)).collect())
    }

    proptest! {
        #[test]
        fn nms_is_idempotent_and_shrinking(d in arb_dets(), thr in 0.1..0.9f64) {
            let once = nms(&d, thr);
            prop_assert!(once.len() <= d.len());
            prop_assert_eq!(nms(&once, thr), once);
        }

        #[test]
        fn stages_only_remove(d in arb_dets(), tau in 0.05..1.0f64) {
            let c = TuneConfig { tau_car: tau, tau_ped: tau, ..cfg() };
            prop_assert!(confidence_filter(&d, &c).len() <= d.len());
        }

        #[test]
        fn every_detection_in_exactly_one_tracklet(
            per in prop::collection::vec(arb_dets(), 1..8),
            min_len in 1usize..5,
        ) {
            let t = link_tracklets(&per, 0.5, 0);
            let total: usize = t.iter().map(Tracklet::len).sum();
            prop_assert_eq!(total, per.iter().map(Vec::len).sum::<usize>());
            for tr in &t {
                prop_assert!(tr.entries.windows(2).all(|w| w[0].0 < w[1].0));
            }
            let c = TuneConfig { min_track_len: min_len, ..cfg() };
            let set = prune_and_emit(&t, per.len(), &c);
            prop_assert!(set.len() <= total);
            for labels in &set.windows {
                for l in labels {
                    prop_assert!(t[l.track_id as usize].len() >= min_len);
                }
            }
        }
    }
}
