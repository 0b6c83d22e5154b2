//! Task-aware soft pseudo labels.
//!
//! Unselected detections still carry signal: discarding them teaches the
//! detector that real objects are background. Instead each kept detection
//! becomes a pseudo label with *separate* weights for the two detection
//! tasks, because classification and localization quality are not the
//! same thing (a box can name the right class and still sit badly, or
//! fit tightly with an uncertain class):
//!
//! * the classification weight is gated by the box's confidence,
//! * the regression weight by its cross-view localization stability.
//!
//! Both weights follow the same ramp: 1 at or above the high threshold,
//! the raw evidence value strictly between the thresholds, 0 at or below
//! the low threshold. Ground-truth labels always carry weight 1 on both
//! branches. Collapsing a ramp (`lo == hi`) recovers hard pseudo
//! labelling as a step function.

use serde::{Deserialize, Serialize};

use crate::acquisition::Candidate;
use crate::scoring::{iou, BBox, MATCH_IOU};
use crate::{Error, Result};

/// Ramp thresholds for the two task weights. Invariant:
/// `0 <= lo <= hi <= 1` per task; `lo == hi` degenerates the ramp into a
/// hard step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_cls_hi: f64,
    pub tau_cls_lo: f64,
    pub tau_box_hi: f64,
    pub tau_box_lo: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau_cls_hi: 0.8,
            tau_cls_lo: 0.1,
            tau_box_hi: 0.7,
            tau_box_lo: 0.3,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, lo, hi) in [
            ("cls", self.tau_cls_lo, self.tau_cls_hi),
            ("box", self.tau_box_lo, self.tau_box_hi),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Config(format!(
                    "tau_{name} thresholds must satisfy 0 <= lo <= hi <= 1, got lo={lo} hi={hi}"
                )));
            }
        }
        Ok(())
    }

    /// Same thresholds with the classification ramp collapsed to a step
    /// at the high threshold.
    fn hard_cls(&self) -> Thresholds {
        Thresholds {
            tau_cls_lo: self.tau_cls_hi,
            ..*self
        }
    }

    /// Same thresholds with the regression ramp collapsed to a step at
    /// the high threshold.
    fn hard_box(&self) -> Thresholds {
        Thresholds {
            tau_box_lo: self.tau_box_hi,
            ..*self
        }
    }
}

/// Where a supervision label comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    Pseudo,
}

/// How detections are turned into pseudo labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    /// No pseudo labels; unlabelled objects are implicit background.
    None,
    /// Confidence step at tau_cls_hi; the box branch reuses the
    /// classification weight.
    Hard,
    /// Independent hard steps: confidence at tau_cls_hi, stability at
    /// tau_box_hi.
    TaskHard,
    /// Full soft ramps on both tasks.
    TaskSoft,
}

/// One oracle-confirmed box. `label` indexes the dense class set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtLabel {
    pub bbox: BBox,
    pub label: usize,
}

/// One supervision entry: a ground-truth box (both weights 1) or a kept
/// detection with task-specific soft weights. Invariants: weights in
/// [0, 1], not both 0 (such detections are dropped as background), and
/// ground-truth entries always carry (1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub label: usize,
    /// Max-class score of the underlying detection; 1 for ground truth.
    pub confidence: f64,
    /// Cross-view localization stability; 1 for ground truth.
    pub box_consistency: f64,
    pub w_cls: f64,
    pub w_box: f64,
    pub source: LabelSource,
}

/// Classification-branch weight: confidence gated by the cls ramp.
/// Ground truth is always fully trusted.
pub fn cls_weight(confidence: f64, source: LabelSource, t: &Thresholds) -> f64 {
    ramp(confidence, source, t.tau_cls_lo, t.tau_cls_hi)
}

/// Regression-branch weight: localization stability gated by the box
/// ramp. Ground truth is always fully trusted.
pub fn box_weight(box_consistency: f64, source: LabelSource, t: &Thresholds) -> f64 {
    ramp(box_consistency, source, t.tau_box_lo, t.tau_box_hi)
}

fn ramp(evidence: f64, source: LabelSource, lo: f64, hi: f64) -> f64 {
    if source == LabelSource::GroundTruth || evidence >= hi {
        1.0
    } else if evidence <= lo {
        0.0
    } else {
        evidence
    }
}

/// Builds the supervision set for one image: every ground-truth label
/// (weights 1) plus pseudo labels from the remaining detections.
///
/// Detections are considered in descending confidence (ties: input
/// order). A detection overlapping a ground-truth box or an
/// already-kept pseudo label with IoU >= 0.5 is dropped as a duplicate;
/// one whose weights are both 0 is dropped as background. Dropped
/// detections do not block later ones.
pub fn build_supervision(
    candidates: &[Candidate],
    gt: &[GtLabel],
    t: &Thresholds,
    mode: PseudoMode,
) -> Vec<PseudoLabel> {
    let mut out: Vec<PseudoLabel> = gt
        .iter()
        .map(|g| PseudoLabel {
            bbox: g.bbox,
            label: g.label,
            confidence: 1.0,
            box_consistency: 1.0,
            w_cls: 1.0,
            w_box: 1.0,
            source: LabelSource::GroundTruth,
        })
        .collect();
    if mode == PseudoMode::None {
        return out;
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .detection()
            .confidence()
            .total_cmp(&candidates[a].detection().confidence())
            .then(a.cmp(&b))
    });

    let n_gt = out.len();
    for i in order {
        let c = &candidates[i];
        let d = c.detection();
        let occupied = out[..n_gt]
            .iter()
            .map(|g| g.bbox)
            .chain(out[n_gt..].iter().map(|p| p.bbox));
        if occupied
            .into_iter()
            .any(|b| iou(d.bbox(), &b) >= MATCH_IOU)
        {
            continue;
        }

        let conf = d.confidence();
        let cons = c.box_consistency();
        let (w_cls, w_box) = match mode {
            PseudoMode::None => unreachable!("handled above"),
            PseudoMode::Hard => {
                let w = cls_weight(conf, LabelSource::Pseudo, &t.hard_cls());
                (w, w)
            }
            PseudoMode::TaskHard => (
                cls_weight(conf, LabelSource::Pseudo, &t.hard_cls()),
                box_weight(cons, LabelSource::Pseudo, &t.hard_box()),
            ),
            PseudoMode::TaskSoft => (
                cls_weight(conf, LabelSource::Pseudo, t),
                box_weight(cons, LabelSource::Pseudo, t),
            ),
        };
        if w_cls == 0.0 && w_box == 0.0 {
            continue;
        }
        out.push(PseudoLabel {
            bbox: *d.bbox(),
            label: d.predicted_label(),
            confidence: conf,
            box_consistency: cons,
            w_cls,
            w_box,
            source: LabelSource::Pseudo,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{AugmentedViews, ClassDistribution, Detection};
    use proptest::prelude::*;

    const TOL: f64 = 1e-9;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Candidate whose origin confidence is `conf` and whose single view
    /// is either an identical copy (box_consistency 1) or absent
    /// (box_consistency 0).
    fn cand(x: f64, conf: f64, stable: bool) -> Candidate {
        let d = Detection::new(
            0,
            bb(x, 0.0, x + 10.0, 10.0),
            ClassDistribution::peaked(0, conf, 2).unwrap(),
        );
        let view = if stable { Some(d.clone()) } else { None };
        let views = AugmentedViews::new(d, vec![view]).unwrap();
        Candidate {
            uncertainty: 0.0,
            acquisition: 0.0,
            views,
        }
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::default().validate().is_ok());
        let collapsed = Thresholds {
            tau_cls_lo: 0.8,
            ..Thresholds::default()
        };
        assert!(collapsed.validate().is_ok());
        let inverted = Thresholds {
            tau_cls_lo: 0.9,
            ..Thresholds::default()
        };
        assert!(inverted.validate().is_err());
        let out_of_range = Thresholds {
            tau_box_hi: 1.2,
            ..Thresholds::default()
        };
        assert!(out_of_range.validate().is_err());
    }

    #[test]
    fn cls_weight_branches_at_default_thresholds() {
        let t = Thresholds::default();
        let w = |c| cls_weight(c, LabelSource::Pseudo, &t);
        assert_eq!(w(0.95), 1.0);
        assert_eq!(w(0.8), 1.0); // high boundary is inclusive
        assert!((w(0.5) - 0.5).abs() < TOL);
        assert_eq!(w(0.1), 0.0); // low boundary is inclusive
        assert_eq!(w(0.05), 0.0);
    }

    #[test]
    fn box_weight_branches_at_default_thresholds() {
        let t = Thresholds::default();
        let w = |c| box_weight(c, LabelSource::Pseudo, &t);
        assert_eq!(w(0.75), 1.0);
        assert_eq!(w(0.7), 1.0);
        assert!((w(0.5) - 0.5).abs() < TOL);
        assert_eq!(w(0.3), 0.0);
        assert_eq!(w(0.25), 0.0);
    }

    #[test]
    fn ground_truth_is_fully_weighted_regardless_of_evidence() {
        let t = Thresholds::default();
        assert_eq!(cls_weight(0.01, LabelSource::GroundTruth, &t), 1.0);
        assert_eq!(box_weight(0.01, LabelSource::GroundTruth, &t), 1.0);
    }

    #[test]
    fn collapsed_ramp_recovers_hard_labelling() {
        let t = Thresholds {
            tau_cls_lo: 0.8,
            tau_cls_hi: 0.8,
            ..Thresholds::default()
        };
        assert_eq!(cls_weight(0.81, LabelSource::Pseudo, &t), 1.0);
        assert_eq!(cls_weight(0.8, LabelSource::Pseudo, &t), 1.0);
        assert_eq!(cls_weight(0.79, LabelSource::Pseudo, &t), 0.0);
    }

    #[test]
    fn supervision_lists_ground_truth_first_with_full_weights() {
        let gt = vec![GtLabel {
            bbox: bb(0.0, 0.0, 10.0, 10.0),
            label: 1,
        }];
        let dets = vec![cand(50.0, 0.9, true)];
        let sup = build_supervision(&dets, &gt, &Thresholds::default(), PseudoMode::TaskSoft);
        assert_eq!(sup.len(), 2);
        assert_eq!(sup[0].source, LabelSource::GroundTruth);
        assert_eq!(sup[0].label, 1);
        assert_eq!((sup[0].w_cls, sup[0].w_box), (1.0, 1.0));
        assert_eq!(sup[1].source, LabelSource::Pseudo);
        assert_eq!((sup[1].w_cls, sup[1].w_box), (1.0, 1.0));
    }

    #[test]
    fn supervision_drops_detections_overlapping_ground_truth() {
        let gt = vec![GtLabel {
            bbox: bb(0.0, 0.0, 10.0, 10.0),
            label: 0,
        }];
        let dets = vec![cand(1.0, 0.99, true)]; // IoU with GT well above 0.5
        let sup = build_supervision(&dets, &gt, &Thresholds::default(), PseudoMode::TaskSoft);
        assert_eq!(sup.len(), 1);
        assert_eq!(sup[0].source, LabelSource::GroundTruth);
    }

    #[test]
    fn supervision_dedups_overlapping_pseudo_labels_keeping_higher_confidence() {
        let dets = vec![cand(0.0, 0.6, true), cand(1.0, 0.9, true)];
        let sup = build_supervision(&dets, &[], &Thresholds::default(), PseudoMode::TaskSoft);
        assert_eq!(sup.len(), 1);
        assert!((sup[0].confidence - 0.9).abs() < TOL);
        assert_eq!(sup[0].bbox.x1(), 1.0);
    }

    #[test]
    fn supervision_drops_zero_zero_weight_detections() {
        // conf 0.05 (below cls low; needs K large enough that 0.05 is
        // still the argmax) and unstable views (cons 0).
        let d = Detection::new(
            0,
            bb(0.0, 0.0, 10.0, 10.0),
            ClassDistribution::peaked(0, 0.05, 32).unwrap(),
        );
        assert!((d.confidence() - 0.05).abs() < TOL);
        let views = AugmentedViews::new(d, vec![None]).unwrap();
        let dets = vec![Candidate {
            uncertainty: 0.0,
            acquisition: 0.0,
            views,
        }];
        let sup = build_supervision(&dets, &[], &Thresholds::default(), PseudoMode::TaskSoft);
        assert!(sup.is_empty());
    }

    #[test]
    fn one_sided_weights_survive() {
        // Confident but unstable: cls branch only.
        let dets = vec![cand(0.0, 0.9, false)];
        let sup = build_supervision(&dets, &[], &Thresholds::default(), PseudoMode::TaskSoft);
        assert_eq!(sup.len(), 1);
        assert_eq!(sup[0].w_cls, 1.0);
        assert_eq!(sup[0].w_box, 0.0);
    }

    #[test]
    fn mode_none_produces_ground_truth_only() {
        let gt = vec![GtLabel {
            bbox: bb(0.0, 0.0, 10.0, 10.0),
            label: 0,
        }];
        let dets = vec![cand(50.0, 0.99, true)];
        let sup = build_supervision(&dets, &gt, &Thresholds::default(), PseudoMode::None);
        assert_eq!(sup.len(), 1);
        assert_eq!(sup[0].source, LabelSource::GroundTruth);
    }

    #[test]
    fn hard_mode_ties_box_weight_to_cls_weight() {
        let dets = vec![cand(0.0, 0.9, false), cand(50.0, 0.5, true)];
        let sup = build_supervision(&dets, &[], &Thresholds::default(), PseudoMode::Hard);
        // conf 0.9 >= 0.8: kept with (1, 1) even though views are unstable.
        // conf 0.5 < 0.8: (0, 0), dropped.
        assert_eq!(sup.len(), 1);
        assert_eq!((sup[0].w_cls, sup[0].w_box), (1.0, 1.0));
        assert!((sup[0].confidence - 0.9).abs() < TOL);
    }

    #[test]
    fn task_hard_mode_gates_each_branch_independently() {
        let dets = vec![cand(0.0, 0.9, false), cand(50.0, 0.9, true)];
        let sup = build_supervision(&dets, &[], &Thresholds::default(), PseudoMode::TaskHard);
        assert_eq!(sup.len(), 2);
        // Unstable views: box branch gated off, cls branch kept.
        let unstable = sup.iter().find(|p| p.bbox.x1() == 0.0).unwrap();
        assert_eq!((unstable.w_cls, unstable.w_box), (1.0, 0.0));
        let stable = sup.iter().find(|p| p.bbox.x1() == 50.0).unwrap();
        assert_eq!((stable.w_cls, stable.w_box), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn weights_are_piecewise_ramps(evidence in 0.0..=1.0f64) {
            let t = Thresholds::default();
            let wc = cls_weight(evidence, LabelSource::Pseudo, &t);
            let expected_c = if evidence >= 0.8 {
                1.0
            } else if evidence <= 0.1 {
                0.0
            } else {
                evidence
            };
            prop_assert_eq!(wc, expected_c);

            let wb = box_weight(evidence, LabelSource::Pseudo, &t);
            let expected_b = if evidence >= 0.7 {
                1.0
            } else if evidence <= 0.3 {
                0.0
            } else {
                evidence
            };
            prop_assert_eq!(wb, expected_b);
            prop_assert!((0.0..=1.0).contains(&wc));
            prop_assert!((0.0..=1.0).contains(&wb));
        }

        #[test]
        fn supervision_invariants_hold(
            specs in proptest::collection::vec((0.0..100.0f64, 0.5..1.0f64, any::<bool>()), 0..12)
        ) {
            let dets: Vec<Candidate> = specs
                .iter()
                .map(|&(x, conf, stable)| cand(x * 3.0, conf, stable))
                .collect();
            let gt = vec![GtLabel { bbox: bb(400.0, 0.0, 410.0, 10.0), label: 1 }];
            let sup = build_supervision(&dets, &gt, &Thresholds::default(), PseudoMode::TaskSoft);

            // GT first, full weights; pseudo labels never both-zero and
            // pairwise IoU below the dedup threshold.
            prop_assert_eq!(sup[0].source, LabelSource::GroundTruth);
            for p in &sup {
                prop_assert!((0.0..=1.0).contains(&p.w_cls));
                prop_assert!((0.0..=1.0).contains(&p.w_box));
                prop_assert!(p.w_cls > 0.0 || p.w_box > 0.0);
                if p.source == LabelSource::GroundTruth {
                    prop_assert_eq!((p.w_cls, p.w_box), (1.0, 1.0));
                }
            }
            for i in 0..sup.len() {
                for j in (i + 1)..sup.len() {
                    if sup[i].source == LabelSource::Pseudo || sup[j].source == LabelSource::Pseudo {
                        prop_assert!(iou(&sup[i].bbox, &sup[j].bbox) < MATCH_IOU);
                    }
                }
            }
        }
    }
}
