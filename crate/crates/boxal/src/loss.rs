//! Weighted two-branch detection loss.
//!
//! Training samples (candidate boxes with class logits and box
//! regression outputs) are matched to supervision labels by IoU:
//! at or above `pos_iou` a sample is positive, below `neg_iou` it is
//! background, in between it is ignored. The loss is
//!
//! ```text
//! L = 1/|P_cls| sum_{P_cls} w_cls * CE(logits, t_cls)
//!   + 1/|N_cls| sum_{N_cls} CE(logits, background)
//!   + 1/|P_reg| sum_{P_reg} w_box * SmoothL1(reg_pred, t_reg)
//! ```
//!
//! where the pseudo-label weights scale each contribution. Normalizers
//! count samples, not weight mass: a zero-weight positive contributes
//! nothing to the numerator but still counts in `|P_cls|`. The
//! regression set is the positives whose matched label has `w_box > 0`,
//! so fully untrusted boxes neither contribute nor dilute. Classification
//! is softmax cross-entropy over K+1 classes (background last), box
//! regression is SmoothL1 (transition 1.0) summed over the four deltas.

use crate::pseudolabel::PseudoLabel;
use crate::scoring::{iou, BBox};
use crate::{Error, Result};

/// One detector output at a candidate box location: class logits over
/// K+1 classes (background last) and the four box-regression outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub sample_box: BBox,
    pub cls_logits: Vec<f64>,
    pub reg_pred: [f64; 4],
}

/// Outcome of matching one training sample against the supervision set.
#[derive(Debug, Clone, PartialEq)]
pub enum Assignment {
    /// Matched a label with IoU >= pos_iou. Carries the label's class
    /// target, encoded box target, and task weights. The sample belongs
    /// to the regression set only if `w_box > 0`.
    Positive {
        label_index: usize,
        t_cls: usize,
        t_reg: [f64; 4],
        w_cls: f64,
        w_box: f64,
    },
    /// Best IoU below neg_iou: background classification target.
    Negative,
    /// Between the thresholds: excluded from both branches.
    Ignored,
}

/// Loss terms plus the set sizes used as normalizers.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub pos_cls: f64,
    pub neg_cls: f64,
    pub reg: f64,
    pub total: f64,
    pub n_pos_cls: usize,
    pub n_neg_cls: usize,
    pub n_pos_reg: usize,
}

/// Loss configuration. The default normalizes by sample counts; the
/// weight-mass variant divides the positive-cls and regression terms by
/// the summed weights instead.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossOptions {
    pub weight_mass_normalizer: bool,
}

/// Per-sample gradients of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradient {
    pub d_cls_logits: Vec<f64>,
    pub d_reg_pred: [f64; 4],
}

/// Matches each sample to its best-IoU label. Ties between labels break
/// toward the lower label index; an empty label list makes every sample
/// negative. Thresholds must satisfy `0 <= neg_iou <= pos_iou <= 1`.
pub fn assign(
    samples: &[TrainingSample],
    labels: &[PseudoLabel],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<Vec<Assignment>> {
    if !(0.0..=1.0).contains(&neg_iou) || !(0.0..=1.0).contains(&pos_iou) || neg_iou > pos_iou {
        return Err(Error::Config(format!(
            "matcher thresholds must satisfy 0 <= neg <= pos <= 1, got neg={neg_iou} pos={pos_iou}"
        )));
    }
    Ok(samples
        .iter()
        .map(|s| {
            let mut best: Option<(usize, f64)> = None;
            for (j, l) in labels.iter().enumerate() {
                let v = iou(&s.sample_box, &l.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= pos_iou => Assignment::Positive {
                    label_index: j,
                    t_cls: labels[j].label,
                    t_reg: regression_deltas(&s.sample_box, &labels[j].bbox),
                    w_cls: labels[j].w_cls,
                    w_box: labels[j].w_box,
                },
                Some((_, v)) if v >= neg_iou => Assignment::Ignored,
                _ => Assignment::Negative,
            }
        })
        .collect())
}

/// Encodes `target` relative to `anchor` in the standard detection
/// parameterization: center offsets scaled by the anchor extent, log
/// extent ratios.
pub fn regression_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - acx) / anchor.width(),
        (tcy - acy) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

/// Inverse of [`regression_deltas`]: applies the deltas to the anchor.
pub fn decode_deltas(anchor: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    let (acx, acy) = anchor.center();
    let cx = acx + deltas[0] * anchor.width();
    let cy = acy + deltas[1] * anchor.height();
    let w = anchor.width() * deltas[2].exp();
    let h = anchor.height() * deltas[3].exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Numerically stable softmax cross-entropy: `logsumexp(z) - z[target]`.
fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    m + sum.ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// SmoothL1 with transition 1.0, summed over coordinates.
fn smooth_l1(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let r = (p - t).abs();
            if r < 1.0 {
                0.5 * r * r
            } else {
                r - 0.5
            }
        })
        .sum()
}

fn validate_inputs(samples: &[TrainingSample], assignments: &[Assignment]) -> Result<usize> {
    if samples.len() != assignments.len() {
        return Err(Error::InvalidInput(format!(
            "{} samples but {} assignments",
            samples.len(),
            assignments.len()
        )));
    }
    let n_cls = samples
        .first()
        .map(|s| s.cls_logits.len())
        .unwrap_or_default();
    for (i, s) in samples.iter().enumerate() {
        if s.cls_logits.len() != n_cls {
            return Err(Error::DimensionMismatch {
                left: n_cls,
                right: s.cls_logits.len(),
            });
        }
        if s.cls_logits.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "sample {i} has {} logits; need at least foreground + background",
                s.cls_logits.len()
            )));
        }
        if s.cls_logits.iter().any(|z| !z.is_finite())
            || s.reg_pred.iter().any(|z| !z.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "sample {i} has non-finite outputs"
            )));
        }
        if let Assignment::Positive { t_cls, .. } = assignments[i] {
            if t_cls >= n_cls {
                return Err(Error::InvalidInput(format!(
                    "sample {i} targets class {t_cls} with only {n_cls} logits"
                )));
            }
        }
    }
    Ok(n_cls)
}

/// Evaluates the weighted two-branch loss. Empty branches contribute 0.
pub fn weighted_loss(
    samples: &[TrainingSample],
    assignments: &[Assignment],
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let n_cls = validate_inputs(samples, assignments)?;
    let background = n_cls.saturating_sub(1);

    let mut pos_sum = 0.0;
    let mut pos_weight_mass = 0.0;
    let mut n_pos_cls = 0usize;
    let mut neg_sum = 0.0;
    let mut n_neg_cls = 0usize;
    let mut reg_sum = 0.0;
    let mut reg_weight_mass = 0.0;
    let mut n_pos_reg = 0usize;

    for (s, a) in samples.iter().zip(assignments) {
        match a {
            Assignment::Positive {
                t_cls,
                t_reg,
                w_cls,
                w_box,
                ..
            } => {
                pos_sum += w_cls * cross_entropy(&s.cls_logits, *t_cls);
                pos_weight_mass += w_cls;
                n_pos_cls += 1;
                if *w_box > 0.0 {
                    reg_sum += w_box * smooth_l1(&s.reg_pred, t_reg);
                    reg_weight_mass += w_box;
                    n_pos_reg += 1;
                }
            }
            Assignment::Negative => {
                neg_sum += cross_entropy(&s.cls_logits, background);
                n_neg_cls += 1;
            }
            Assignment::Ignored => {}
        }
    }

    let normalize = |sum: f64, count: usize, mass: f64| -> f64 {
        let denom = if opts.weight_mass_normalizer {
            mass
        } else {
            count as f64
        };
        if denom > 0.0 {
            sum / denom
        } else {
            0.0
        }
    };
    let pos_cls = normalize(pos_sum, n_pos_cls, pos_weight_mass);
    let neg_cls = if n_neg_cls > 0 {
        neg_sum / n_neg_cls as f64
    } else {
        0.0
    };
    let reg = normalize(reg_sum, n_pos_reg, reg_weight_mass);

    Ok(LossBreakdown {
        pos_cls,
        neg_cls,
        reg,
        total: pos_cls + neg_cls + reg,
        n_pos_cls,
        n_neg_cls,
        n_pos_reg,
    })
}

/// Analytic gradients of [`weighted_loss`] with respect to each sample's
/// logits and regression outputs. Zero-weight and ignored samples get
/// exactly zero gradients.
pub fn loss_gradients(
    samples: &[TrainingSample],
    assignments: &[Assignment],
    opts: &LossOptions,
) -> Result<Vec<SampleGradient>> {
    let n_cls = validate_inputs(samples, assignments)?;
    let background = n_cls.saturating_sub(1);

    let mut n_pos_cls = 0usize;
    let mut pos_weight_mass = 0.0;
    let mut n_neg_cls = 0usize;
    let mut n_pos_reg = 0usize;
    let mut reg_weight_mass = 0.0;
    for a in assignments {
        match a {
            Assignment::Positive { w_cls, w_box, .. } => {
                n_pos_cls += 1;
                pos_weight_mass += w_cls;
                if *w_box > 0.0 {
                    n_pos_reg += 1;
                    reg_weight_mass += w_box;
                }
            }
            Assignment::Negative => n_neg_cls += 1,
            Assignment::Ignored => {}
        }
    }
    let denom = |count: usize, mass: f64| -> f64 {
        if opts.weight_mass_normalizer {
            mass
        } else {
            count as f64
        }
    };
    let pos_denom = denom(n_pos_cls, pos_weight_mass);
    let reg_denom = denom(n_pos_reg, reg_weight_mass);

    Ok(samples
        .iter()
        .zip(assignments)
        .map(|(s, a)| {
            let mut d_cls = vec![0.0; n_cls];
            let mut d_reg = [0.0; 4];
            match a {
                Assignment::Positive {
                    t_cls,
                    t_reg,
                    w_cls,
                    w_box,
                    ..
                } => {
                    if *w_cls > 0.0 && pos_denom > 0.0 {
                        let p = softmax(&s.cls_logits);
                        let scale = w_cls / pos_denom;
                        for (g, pi) in d_cls.iter_mut().zip(&p) {
                            *g = scale * pi;
                        }
                        d_cls[*t_cls] -= scale;
                    }
                    if *w_box > 0.0 && reg_denom > 0.0 {
                        let scale = w_box / reg_denom;
                        for c in 0..4 {
                            let r = s.reg_pred[c] - t_reg[c];
                            d_reg[c] = scale * r.clamp(-1.0, 1.0);
                        }
                    }
                }
                Assignment::Negative => {
                    let p = softmax(&s.cls_logits);
                    let scale = 1.0 / n_neg_cls as f64;
                    for (g, pi) in d_cls.iter_mut().zip(&p) {
                        *g = scale * pi;
                    }
                    d_cls[background] -= scale;
                }
                Assignment::Ignored => {}
            }
            SampleGradient {
                d_cls_logits: d_cls,
                d_reg_pred: d_reg,
            }
        })
        .collect())
}

/// Central-difference gradient of `f` at `x`:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per coordinate.
pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        grad.push((hi - lo) / (2.0 * eps));
    }
    grad
}
