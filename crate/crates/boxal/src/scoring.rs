//! Box-level uncertainty from augmented-view consistency.
//!
//! A detection is re-predicted under M augmented views of its image. For
//! each view the box either reappears (matched by IoU) or vanishes. The
//! agreement between the original box `b` and its view counterpart `b_m`
//! is summarized by
//!
//! ```text
//! g(b, b_m) = 1/2 (s_b + s_bm) (1 - JS(b, b_m)) + IoU(b, b_m)
//! ```
//!
//! which lives in [0, 2]: confident, class-stable, well-overlapping pairs
//! push it near 2, vanished or contradictory pairs push it toward 0. The
//! per-box consistency `c(b)` is the mean absolute deviation `|g - beta|`
//! over views (a vanished view contributes the full `beta`), and the
//! uncertainty is `u(b) = max(beta, 2 - beta) - c(b)`. With `beta` in
//! (1, 2) this peaks for boxes whose agreement hovers *around* `beta`:
//! stable boxes score moderately, boxes that vanish under augmentation
//! (annotation noise, not information) score zero.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// IoU threshold shared by view matching, candidate/GT exclusion, and
/// detection/GT matching in evaluation.
pub const MATCH_IOU: f64 = 0.5;

/// Axis-aligned box in corner form. Invariant: `x1 < x2`, `y1 < y2`, all
/// coordinates finite. The invariant is established at construction and
/// preserved through serde (deserialization re-validates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBox {
                x1,
                y1,
                x2,
                y2,
                reason: "non-finite coordinate",
            });
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox {
                x1,
                y1,
                x2,
                y2,
                reason: "empty or inverted extent",
            });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Intersection-over-union of two boxes. Disjoint boxes give exactly 0,
/// identical boxes exactly 1.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Discrete distribution over K >= 2 classes. Invariant: every entry in
/// [0, 1] and the entries sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

/// Absolute slack allowed on the probability-sum invariant.
pub const DIST_SUM_TOL: f64 = 1e-9;

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::InvalidDistribution(
                "entries must be finite and in [0, 1]".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(ClassDistribution { probs })
    }

    /// Uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 classes, got {k}"
            )));
        }
        Ok(ClassDistribution {
            probs: vec![1.0 / k as f64; k],
        })
    }

    /// All mass on `label`.
    pub fn one_hot(label: usize, k: usize) -> Result<Self> {
        Self::peaked(label, 1.0, k)
    }

    /// Mass `peak` on `label`, the remainder spread uniformly over the
    /// other classes.
    pub fn peaked(label: usize, peak: f64, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 classes, got {k}"
            )));
        }
        if label >= k {
            return Err(Error::InvalidDistribution(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        if !(0.0..=1.0).contains(&peak) || !peak.is_finite() {
            return Err(Error::InvalidDistribution(format!("peak {peak} not in [0, 1]")));
        }
        let rest = (1.0 - peak) / (k - 1) as f64;
        let mut probs = vec![rest; k];
        probs[label] = peak;
        Ok(ClassDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Probability of class `label`. Panics if out of range.
    pub fn prob(&self, label: usize) -> f64 {
        self.probs[label]
    }

    /// Shannon entropy in bits, with the 0 log 0 = 0 convention.
    /// Bounded by log2(K); 0 exactly for a one-hot distribution.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .sum()
    }
}

impl TryFrom<Vec<f64>> for ClassDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ClassDistribution::new(v)
    }
}

impl From<ClassDistribution> for Vec<f64> {
    fn from(d: ClassDistribution) -> Self {
        d.probs
    }
}

/// Jensen-Shannon divergence in bits (base-2 logs), so the value lives in
/// [0, 1]: 0 for identical distributions, 1 for distributions with
/// disjoint support. Errors if the distributions have different K.
pub fn js_divergence(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64> {
    if p.k() != q.k() {
        return Err(Error::DimensionMismatch {
            left: p.k(),
            right: q.k(),
        });
    }
    let mut js = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        let mi = 0.5 * (pi + qi);
        // Both halves of the coordinate are combined with one addition so
        // the result is bitwise symmetric in (p, q).
        let p_part = if pi > 0.0 { pi * (pi / mi).log2() } else { 0.0 };
        let q_part = if qi > 0.0 { qi * (qi / mi).log2() } else { 0.0 };
        js += 0.5 * (p_part + q_part);
    }
    // Rounding can leave a tiny negative or a hair above 1.
    Ok(js.clamp(0.0, 1.0))
}

/// One detection: a box, a class distribution, and the score/label derived
/// from it. Invariants: `confidence` equals the max entry of `dist` and
/// `predicted_label` is its argmax (ties resolved to the lowest index);
/// both are fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    image_id: u64,
    bbox: BBox,
    dist: ClassDistribution,
    confidence: f64,
    predicted_label: usize,
}

impl Detection {
    pub fn new(image_id: u64, bbox: BBox, dist: ClassDistribution) -> Self {
        let (predicted_label, confidence) = argmax(dist.probs());
        Detection {
            image_id,
            bbox,
            dist,
            confidence,
            predicted_label,
        }
    }

    pub fn image_id(&self) -> u64 {
        self.image_id
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn dist(&self) -> &ClassDistribution {
        &self.dist
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn predicted_label(&self) -> usize {
        self.predicted_label
    }
}

/// Argmax with ties resolved to the lowest index. `values` must be
/// non-empty (guaranteed by ClassDistribution's K >= 2).
fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// A detection plus its counterpart in each of M >= 1 augmented views.
/// `None` means the box vanished in that view (no match above the IoU
/// threshold). Invariants: at least one view slot, and every present view
/// shares the origin's image id and class count.
#[derive(Debug, Clone)]
pub struct AugmentedViews {
    origin: Detection,
    views: Vec<Option<Detection>>,
}

impl AugmentedViews {
    pub fn new(origin: Detection, views: Vec<Option<Detection>>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidInput(
                "need at least one augmented view slot".into(),
            ));
        }
        for v in views.iter().flatten() {
            if v.image_id() != origin.image_id() {
                return Err(Error::InvalidInput(format!(
                    "view from image {} paired with origin from image {}",
                    v.image_id(),
                    origin.image_id()
                )));
            }
            if v.dist().k() != origin.dist().k() {
                return Err(Error::DimensionMismatch {
                    left: origin.dist().k(),
                    right: v.dist().k(),
                });
            }
        }
        Ok(AugmentedViews { origin, views })
    }

    pub fn origin(&self) -> &Detection {
        &self.origin
    }

    pub fn views(&self) -> &[Option<Detection>] {
        &self.views
    }

    pub fn m_size(&self) -> usize {
        self.views.len()
    }
}

/// Scalar core of the per-view agreement residual:
/// `|1/2 (s_b + s_bm) (1 - js) + iou - beta|`.
///
/// Exposed separately so the arithmetic can be checked against direct
/// substitution; [`pairwise_term`] feeds it from real detections.
pub fn agreement_residual(s_b: f64, s_bm: f64, js: f64, iou: f64, beta: f64) -> f64 {
    (0.5 * (s_b + s_bm) * (1.0 - js) + iou - beta).abs()
}

/// Agreement residual between a detection and its (possibly vanished)
/// counterpart in one augmented view. A vanished counterpart is total
/// disagreement and contributes the full `beta`.
///
/// Panics if the two class distributions differ in K; `AugmentedViews`
/// construction rules that out for pipeline callers.
pub fn pairwise_term(origin: &Detection, view: Option<&Detection>, beta: f64) -> f64 {
    match view {
        None => beta,
        Some(v) => {
            let js = js_divergence(origin.dist(), v.dist())
                .expect("origin and view must share the class count");
            agreement_residual(
                origin.confidence(),
                v.confidence(),
                js,
                iou(origin.bbox(), v.bbox()),
                beta,
            )
        }
    }
}

/// Upper bound of the consistency score: `max(beta, 2 - beta)`.
pub fn max_consistency(beta: f64) -> f64 {
    beta.max(2.0 - beta)
}

/// Mean agreement residual over all views. Lives in [0, max_consistency]:
/// 0 when every view's agreement sits exactly at `beta`, the maximum when
/// every view vanished.
pub fn consistency(av: &AugmentedViews, beta: f64) -> f64 {
    let sum: f64 = av
        .views
        .iter()
        .map(|v| pairwise_term(&av.origin, v.as_ref(), beta))
        .sum();
    sum / av.views.len() as f64
}

/// Box uncertainty `max_consistency(beta) - consistency`. High for boxes
/// whose view agreement hovers around `beta` (informative), zero for boxes
/// that vanish under every augmentation (noise).
pub fn uncertainty(av: &AugmentedViews, beta: f64) -> f64 {
    max_consistency(beta) - consistency(av, beta)
}

/// Pure localization stability: mean IoU between the origin box and its
/// view counterparts, with vanished views contributing 0. Lives in [0, 1];
/// this is the `cons(b)` input to the regression-branch pseudo-label
/// weight.
pub fn box_consistency(av: &AugmentedViews) -> f64 {
    let sum: f64 = av
        .views
        .iter()
        .map(|v| v.as_ref().map_or(0.0, |d| iou(av.origin.bbox(), d.bbox())))
        .sum();
    sum / av.views.len() as f64
}

/// Pairs each origin detection with its counterpart in every augmented
/// view by greedy IoU matching.
///
/// Per augmentation, candidate pairs with IoU >= `min_iou` are taken in
/// descending IoU order (ties: lowest origin index, then lowest augmented
/// index), each detection used at most once. Origins left unpaired get
/// `None` for that view.
///
/// All detections must come from one image and share a class count;
/// `augmented` must contain at least one view.
pub fn match_views(
    origins: &[Detection],
    augmented: &[Vec<Detection>],
    min_iou: f64,
) -> Result<Vec<AugmentedViews>> {
    if augmented.is_empty() {
        return Err(Error::InvalidInput(
            "need at least one augmented view".into(),
        ));
    }
    if origins.is_empty() {
        return Ok(Vec::new());
    }
    let image_id = origins[0].image_id();
    let k = origins[0].dist().k();
    for d in origins.iter().chain(augmented.iter().flatten()) {
        if d.image_id() != image_id {
            return Err(Error::InvalidInput(format!(
                "detections from images {} and {} in one matching pool",
                image_id,
                d.image_id()
            )));
        }
        if d.dist().k() != k {
            return Err(Error::DimensionMismatch {
                left: k,
                right: d.dist().k(),
            });
        }
    }

    let mut views: Vec<Vec<Option<Detection>>> = vec![vec![None; augmented.len()]; origins.len()];
    for (m, dets) in augmented.iter().enumerate() {
        let mut pairs = Vec::new();
        for (i, o) in origins.iter().enumerate() {
            for (j, d) in dets.iter().enumerate() {
                let v = iou(o.bbox(), d.bbox());
                if v >= min_iou {
                    pairs.push((v, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut origin_used = vec![false; origins.len()];
        let mut aug_used = vec![false; dets.len()];
        for (_, i, j) in pairs {
            if !origin_used[i] && !aug_used[j] {
                origin_used[i] = true;
                aug_used[j] = true;
                views[i][m] = Some(dets[j].clone());
            }
        }
    }

    origins
        .iter()
        .zip(views)
        .map(|(o, vs)| AugmentedViews::new(o.clone(), vs))
        .collect()
}
