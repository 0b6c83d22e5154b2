//! Deterministic desk-scale testbed for box-level active learning.
//!
//! Instead of training a detector, the testbed models one with a
//! per-class *skill* value driven by how much supervision each class has
//! received. Skill controls how often objects of a class are detected,
//! how tight the predicted boxes are, and how confident the class
//! distributions look. Because rare classes accumulate supervision
//! slowly, the surrogate reproduces the qualitative dynamics of
//! long-tailed detection datasets: early detectors that only work on
//! majority classes, pseudo-label pools even more skewed than the
//! ground truth, and acquisition strategies that can either amplify or
//! counteract that skew.
//!
//! Everything is driven by keyed random streams (see [`crate::rng`]):
//! each object, image, and purpose gets its own stream, so changing one
//! draw never shifts any other and per-image work is order-independent.

use serde::{Deserialize, Serialize};

use crate::acquisition::{
    estimate_class_distribution, filter_candidates, score_candidates, select_top_k,
    strategy_coreset, strategy_entropy, strategy_random, BalanceConfig, Candidate,
    SelectionResult, Strategy,
};
use crate::pseudolabel::{
    box_weight, build_supervision, cls_weight, GtLabel, LabelSource, PseudoLabel, PseudoMode,
    Thresholds,
};
use crate::rng;
use crate::scoring::{
    box_consistency, iou, AugmentedViews, BBox, ClassDistribution, Detection, MATCH_IOU,
};
use crate::{Error, Result};

/// Stream tag for dataset generation draws.
const TAG_DATASET: u64 = 0x01;
/// Stream tag for per-object detection draws.
const TAG_DETECT: u64 = 0x02;
/// Stream tag for per-image false-positive draws.
const TAG_FALSE_POSITIVE: u64 = 0x03;

/// Detection context used for held-out evaluation. Evaluation streams
/// are keyed by this constant instead of the cycle index, so a class's
/// evaluation draws are identical across cycles and its measured quality
/// moves only through skill.
pub const EVAL_CONTEXT: u64 = u64::MAX;

/// A pseudo box must overlap its object at least this much for the box
/// itself (not just the class) to count as correct supervision.
const BOX_GOOD_IOU: f64 = 0.7;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Geometry and class-balance parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Number of object classes (K >= 2).
    pub classes: usize,
    /// Number of images in the selectable pool.
    pub num_images: usize,
    /// Mean objects per image (Poisson).
    pub objects_per_image: f64,
    /// Ratio of the most- to least-frequent class under the geometric
    /// long-tail (>= 1).
    pub imbalance_factor: f64,
    /// Image extent in pixels, (width, height).
    pub image_size: (f64, f64),
    /// Characteristic object size as a fraction of the smaller image
    /// dimension; per-class size priors spread around it.
    pub object_scale: f64,
    /// Fraction of objects that are intrinsically hard to localize:
    /// their predicted boxes stay systematically offset no matter how
    /// skilled the detector is, though never badly enough to miss an
    /// IoU-0.5 match.
    pub hard_fraction: f64,
    /// Number of extra held-out images generated for quality evaluation.
    pub eval_images: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 10,
            num_images: 2000,
            objects_per_image: 4.0,
            imbalance_factor: 10.0,
            image_size: (640.0, 480.0),
            object_scale: 0.15,
            hard_fraction: 0.1,
            eval_images: 200,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.num_images == 0 {
            return Err(Error::Config("num_images must be at least 1".into()));
        }
        if self.eval_images == 0 {
            return Err(Error::Config(
                "eval_images must be at least 1 (quality is measured on held-out images)".into(),
            ));
        }
        if !self.objects_per_image.is_finite()
            || self.objects_per_image <= 0.0
            || self.objects_per_image > 50.0
        {
            return Err(Error::Config(format!(
                "objects_per_image must be in (0, 50], got {}",
                self.objects_per_image
            )));
        }
        if !self.imbalance_factor.is_finite() || self.imbalance_factor < 1.0 {
            return Err(Error::Config(format!(
                "imbalance_factor must be a finite value >= 1, got {}",
                self.imbalance_factor
            )));
        }
        let (w, h) = self.image_size;
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(Error::Config(format!(
                "image_size must be positive and finite, got ({w}, {h})"
            )));
        }
        if !self.object_scale.is_finite() || self.object_scale <= 0.0 {
            return Err(Error::Config(format!(
                "object_scale must be positive, got {}",
                self.object_scale
            )));
        }
        // Largest possible object: scale spread 1.4 times size jitter 1.25.
        if self.object_scale * 1.4 * 1.25 > 1.0 {
            return Err(Error::Config(format!(
                "object_scale {} lets objects grow larger than the image",
                self.object_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::Config(format!(
                "hard_fraction must be in [0, 1], got {}",
                self.hard_fraction
            )));
        }
        Ok(())
    }
}

/// One ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObject {
    pub label: usize,
    pub bbox: BBox,
    /// Intrinsically hard to localize (see [`DatasetConfig::hard_fraction`]).
    pub loc_hard: bool,
}

/// One image: an id (pool images use their index; held-out images are
/// offset by the pool size) and its objects.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: u64,
    pub objects: Vec<SyntheticObject>,
}

/// A generated dataset: the selectable pool plus a held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub k: usize,
    pub image_size: (f64, f64),
    pub images: Vec<SyntheticImage>,
    pub holdout: Vec<SyntheticImage>,
}

/// Normalized geometric class frequencies: class c gets weight r^c with
/// r chosen so the first/last ratio equals `imbalance_factor`.
pub fn geometric_class_weights(k: usize, imbalance_factor: f64) -> Vec<f64> {
    let r = if k == 1 {
        1.0
    } else {
        imbalance_factor.powf(-1.0 / (k as f64 - 1.0))
    };
    let weights: Vec<f64> = (0..k).map(|c| r.powi(c as i32)).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Per-class histogram of ground-truth labels.
pub fn class_histogram(images: &[SyntheticImage], k: usize) -> Vec<u64> {
    let mut counts = vec![0u64; k];
    for img in images {
        for obj in &img.objects {
            counts[obj.label] += 1;
        }
    }
    counts
}

/// Characteristic size of class `c` as a fraction of the smaller image
/// dimension: the base scale spread across [0.6, 1.4] of itself by a
/// low-discrepancy per-class offset.
fn class_scale(c: usize, object_scale: f64) -> f64 {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    object_scale * (0.6 + 0.8 * ((c as f64 * GOLDEN) % 1.0))
}

/// Samples an index proportionally to the (non-negative, not all zero)
/// weights, using one uniform draw.
fn sample_weighted(stream: &mut rng::Stream, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng::uniform_in(stream, 0.0, total);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn generate_image(cfg: &DatasetConfig, id: u64, weights: &[f64]) -> SyntheticImage {
    let mut stream = rng::stream(cfg.seed, &[TAG_DATASET, id]);
    let (width, height) = cfg.image_size;
    let min_dim = width.min(height);
    let n = rng::poisson(&mut stream, cfg.objects_per_image);
    let mut objects = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let label = sample_weighted(&mut stream, weights);
        let scale = class_scale(label, cfg.object_scale) * min_dim;
        let w = scale * rng::uniform_in(&mut stream, 0.75, 1.25);
        let h = scale * rng::uniform_in(&mut stream, 0.75, 1.25);
        let cx = rng::uniform_in(&mut stream, w / 2.0, width - w / 2.0);
        let cy = rng::uniform_in(&mut stream, h / 2.0, height - h / 2.0);
        let loc_hard = rng::uniform_in(&mut stream, 0.0, 1.0) < cfg.hard_fraction;
        let bbox = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            .expect("generated extents are positive and finite");
        objects.push(SyntheticObject {
            label,
            bbox,
            loc_hard,
        });
    }
    SyntheticImage { id, objects }
}

/// Generates a long-tailed synthetic dataset, deterministic per config.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let weights = geometric_class_weights(cfg.classes, cfg.imbalance_factor);
    let images = (0..cfg.num_images)
        .map(|i| generate_image(cfg, i as u64, &weights))
        .collect();
    let holdout = (0..cfg.eval_images)
        .map(|i| generate_image(cfg, (cfg.num_images + i) as u64, &weights))
        .collect();
    Ok(SyntheticDataset {
        k: cfg.classes,
        image_size: cfg.image_size,
        images,
        holdout,
    })
}

// ---------------------------------------------------------------------------
// Detector surrogate
// ---------------------------------------------------------------------------

/// Behavioural constants of the detector surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateParams {
    /// Supervision mass at which a class reaches ~63% skill.
    pub kappa: f64,
    /// Conversion rate from pseudo-label mass to effective supervision.
    pub gamma: f64,
    /// Penalty weight applied to wrong pseudo labels when tallying their
    /// supervision mass.
    pub rho: f64,
    /// Box jitter (fraction of object extent) that remains at full skill.
    pub noise_floor: f64,
    /// Additional box jitter at zero skill.
    pub noise_scale: f64,
    /// Systematic box offset (fraction of extent) for hard-to-localize
    /// objects, independent of skill.
    pub hard_noise: f64,
    /// Mean false positives per image (Poisson).
    pub fp_rate: f64,
    /// Probability that a detected object also spawns a ghost: a second,
    /// equally confident detection displaced too far off the object to
    /// be a valid match, and rarely reproduced by the augmented passes.
    pub ghost_rate: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        SurrogateParams {
            kappa: 50.0,
            gamma: 0.5,
            rho: 0.5,
            noise_floor: 0.01,
            noise_scale: 0.06,
            hard_noise: 0.14,
            fp_rate: 0.4,
            ghost_rate: 0.12,
        }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("kappa", self.kappa, self.kappa > 0.0),
            ("gamma", self.gamma, self.gamma >= 0.0),
            ("rho", self.rho, self.rho >= 0.0),
            ("noise_floor", self.noise_floor, self.noise_floor >= 0.0),
            ("noise_scale", self.noise_scale, self.noise_scale >= 0.0),
            ("hard_noise", self.hard_noise, self.hard_noise >= 0.0),
            ("fp_rate", self.fp_rate, (0.0..=20.0).contains(&self.fp_rate)),
            (
                "ghost_rate",
                self.ghost_rate,
                (0.0..=1.0).contains(&self.ghost_rate),
            ),
        ];
        for (name, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(Error::Config(format!("invalid surrogate {name}: {value}")));
            }
        }
        // The jitter bound keeps every emitted normal detection above an
        // IoU-0.5 match with its object; beyond it detection quality is
        // no longer monotone in skill.
        if self.noise_floor + self.noise_scale > 0.15 || self.hard_noise > 0.15 {
            return Err(Error::Config(
                "box jitter above 0.15 of the object extent breaks the match guarantee".into(),
            ));
        }
        Ok(())
    }
}

/// Per-class competence of the surrogate, in [0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSkill {
    per_class_skill: Vec<f64>,
}

impl DetectorSkill {
    /// skill_c = 1 - exp(-n_c / kappa) for per-class supervision mass
    /// n_c: strictly increasing and saturating in the supervision, zero
    /// at zero.
    pub fn from_supervision(supervision: &[f64], kappa: f64) -> Result<Self> {
        if !kappa.is_finite() || kappa <= 0.0 {
            return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
        }
        let per_class_skill = supervision
            .iter()
            .map(|&n| {
                if !n.is_finite() || n < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "supervision mass must be non-negative, got {n}"
                    )));
                }
                Ok(1.0 - (-n / kappa).exp())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(DetectorSkill { per_class_skill })
    }

    pub fn skill(&self, class: usize) -> f64 {
        self.per_class_skill[class]
    }

    pub fn k(&self) -> usize {
        self.per_class_skill.len()
    }
}

/// Per-class effective supervision: labelled boxes plus discounted
/// (never negative) pseudo-label mass.
pub fn effective_supervision(labelled: &[u64], pseudo_mass: &[f64], gamma: f64) -> Vec<f64> {
    labelled
        .iter()
        .zip(pseudo_mass)
        .map(|(&n, &m)| n as f64 + gamma * m.max(0.0))
        .collect()
}

/// The detector surrogate bound to one skill snapshot and detection
/// context. Streams are keyed by (seed, context, image, object), so
/// detections for different objects and images never share draws; the
/// `context` is the cycle index for pool inference and [`EVAL_CONTEXT`]
/// for held-out evaluation.
pub struct Surrogate<'a> {
    skill: &'a DetectorSkill,
    params: &'a SurrogateParams,
    image_size: (f64, f64),
    seed: u64,
    context: u64,
    /// Class weights for hallucinated labels; see [`Surrogate::new`].
    fp_label_weights: Vec<f64>,
}

/// A detection optionally paired with its re-detections under `m_size`
/// augmented inputs (a view missing means the augmented pass lost it).
struct SimulatedObject {
    origin: Detection,
    views: Vec<Option<Detection>>,
}

impl<'a> Surrogate<'a> {
    pub fn new(
        skill: &'a DetectorSkill,
        params: &'a SurrogateParams,
        image_size: (f64, f64),
        seed: u64,
        context: u64,
    ) -> Self {
        // Hallucinated labels follow the detector's training exposure:
        // classes seen more are hallucinated more. The skill curve
        // encodes that exposure, and inverting it recovers the
        // supervision mass up to a constant factor that the weighted
        // sampling cancels.
        let mut fp_label_weights: Vec<f64> = (0..skill.k())
            .map(|c| -(1.0 - skill.skill(c)).max(f64::MIN_POSITIVE).ln())
            .collect();
        if fp_label_weights.iter().sum::<f64>() <= 0.0 {
            fp_label_weights = vec![1.0; skill.k()];
        }
        Surrogate {
            skill,
            params,
            image_size,
            seed,
            context,
            fp_label_weights,
        }
    }

    /// Jittered copy of `bbox`. Normal objects (`hard_dir` None) wobble
    /// around the truth with amplitude `noise` on position and extent.
    /// Hard objects keep their true extent but sit off-center by close to
    /// `hard_noise` of it, displaced along the per-axis signs in
    /// `hard_dir`; the caller flips those signs for augmented views so
    /// the views straddle the truth from the opposite side.
    fn jitter(
        &self,
        stream: &mut rng::Stream,
        bbox: &BBox,
        noise: f64,
        hard_dir: Option<(f64, f64)>,
    ) -> BBox {
        let (cx, cy) = bbox.center();
        let (w, h) = (bbox.width(), bbox.height());
        if let Some((sx, sy)) = hard_dir {
            let d = self.params.hard_noise * (0.8 + 0.2 * rng::triangular(stream).abs());
            let (cx, cy) = (cx + sx * d * w, cy + sy * d * h);
            BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
                .expect("offset preserves extent")
        } else {
            let cx = cx + rng::triangular(stream) * noise * w;
            let cy = cy + rng::triangular(stream) * noise * h;
            let w = w * (1.0 + rng::triangular(stream) * noise);
            let h = h * (1.0 + rng::triangular(stream) * noise);
            BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
                .expect("jitter keeps extents positive")
        }
    }

    /// Class distribution for a true-object detection: mass
    /// 0.45 + 0.55 * skill (plus a small wobble) on the true class, the
    /// rest uniform.
    fn object_distribution(&self, stream: &mut rng::Stream, label: usize) -> ClassDistribution {
        let k = self.skill.k();
        let skill = self.skill.skill(label);
        let peak = (0.45 + 0.55 * skill + 0.05 * rng::triangular(stream))
            .clamp(1.0 / k as f64 + 0.01, 0.995);
        ClassDistribution::peaked(label, peak, k).expect("peak is clamped into range")
    }

    fn simulate_object(
        &self,
        image_id: u64,
        obj_idx: usize,
        obj: &SyntheticObject,
        m_size: usize,
    ) -> Vec<SimulatedObject> {
        let mut stream = rng::stream(
            self.seed,
            &[TAG_DETECT, self.context, image_id, obj_idx as u64],
        );
        let skill = self.skill.skill(obj.label);
        if rng::uniform_in(&mut stream, 0.0, 1.0) >= skill {
            return Vec::new();
        }
        let noise = self.params.noise_floor + self.params.noise_scale * (1.0 - skill);
        // Hard objects carry a localization ambiguity: the detector snaps
        // the box to one side of the truth, and under augmentation it
        // snaps to the opposite side, so origin and views disagree by
        // roughly twice the offset while each stays a valid match.
        let hard_dir = if obj.loc_hard {
            let sx = rng::triangular(&mut stream).signum();
            let sy = rng::triangular(&mut stream).signum();
            Some((sx, sy))
        } else {
            None
        };
        let bbox = self.jitter(&mut stream, &obj.bbox, noise, hard_dir);
        let dist = self.object_distribution(&mut stream, obj.label);
        let origin = Detection::new(image_id, bbox, dist);
        let flipped = hard_dir.map(|(sx, sy)| (-sx, -sy));
        let views = (0..m_size)
            .map(|_| {
                if rng::uniform_in(&mut stream, 0.0, 1.0) < (1.0 - skill) / 8.0 {
                    return None;
                }
                let bbox = self.jitter(&mut stream, &obj.bbox, noise, flipped);
                let dist = self.object_distribution(&mut stream, obj.label);
                Some(Detection::new(image_id, bbox, dist))
            })
            .collect();
        let mut out = vec![SimulatedObject { origin, views }];
        if rng::uniform_in(&mut stream, 0.0, 1.0) < self.params.ghost_rate {
            out.push(self.simulate_ghost(&mut stream, image_id, obj, noise, m_size));
        }
        out
    }

    /// A ghost: the detector fires a second time on an object it already
    /// found, with the same confident class posterior but the box
    /// displaced past the duplicate threshold, so it supervises the box
    /// branch wrongly. Confidence alone cannot tell a ghost from a good
    /// detection; its cross-view instability can -- the augmented passes
    /// reproduce it only occasionally.
    fn simulate_ghost(
        &self,
        stream: &mut rng::Stream,
        image_id: u64,
        obj: &SyntheticObject,
        noise: f64,
        m_size: usize,
    ) -> SimulatedObject {
        let (cx, cy) = obj.bbox.center();
        let (w, h) = (obj.bbox.width(), obj.bbox.height());
        // An axis shift of 0.38..0.54 extents keeps the overlap with the
        // object inside [0.30, 0.45]: clearly the same neighbourhood,
        // never a valid match.
        let along_x = rng::uniform_in(stream, 0.0, 1.0) < 0.5;
        let sign = rng::triangular(stream).signum();
        let shift = rng::uniform_in(stream, 0.38, 0.54);
        let (cx, cy) = if along_x {
            (cx + sign * shift * w, cy)
        } else {
            (cx, cy + sign * shift * h)
        };
        let bbox = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            .expect("shift preserves extent");
        let dist = self.object_distribution(stream, obj.label);
        let origin = Detection::new(image_id, bbox, dist);
        let views = (0..m_size)
            .map(|_| {
                if rng::uniform_in(stream, 0.0, 1.0) >= 0.25 {
                    return None;
                }
                let vbox = self.jitter(stream, &bbox, noise, None);
                let dist = self.object_distribution(stream, obj.label);
                Some(Detection::new(image_id, vbox, dist))
            })
            .collect();
        SimulatedObject { origin, views }
    }

    /// Hallucinated detections: a class drawn from the detector's
    /// training exposure, low confidence, size drawn from the class
    /// prior, placed uniformly. A hallucination has no underlying
    /// structure to re-detect, so each augmented view is lost with
    /// probability 1/2 and otherwise lands somewhere unrelated.
    fn simulate_false_positives(&self, image_id: u64, m_size: usize) -> Vec<SimulatedObject> {
        let mut stream = rng::stream(self.seed, &[TAG_FALSE_POSITIVE, self.context, image_id]);
        let k = self.skill.k();
        let (width, height) = self.image_size;
        let min_dim = width.min(height);
        let n = rng::poisson(&mut stream, self.params.fp_rate);
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let label = sample_weighted(&mut stream, &self.fp_label_weights);
            let scale = class_scale(label, 0.15) * min_dim;
            let place_box = |stream: &mut rng::Stream| {
                let w = scale * rng::uniform_in(stream, 0.75, 1.25);
                let h = scale * rng::uniform_in(stream, 0.75, 1.25);
                let cx = rng::uniform_in(stream, w / 2.0, width - w / 2.0);
                let cy = rng::uniform_in(stream, h / 2.0, height - h / 2.0);
                BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
                    .expect("extents positive")
            };
            let fp_distribution = |stream: &mut rng::Stream| {
                let peak = rng::uniform_in(stream, 0.15, 0.40).max(1.0 / k as f64 + 0.05);
                ClassDistribution::peaked(label, peak, k).expect("peak above uniform")
            };
            let bbox = place_box(&mut stream);
            let dist = fp_distribution(&mut stream);
            let origin = Detection::new(image_id, bbox, dist);
            let views = (0..m_size)
                .map(|_| {
                    if rng::uniform_in(&mut stream, 0.0, 1.0) < 0.5 {
                        return None;
                    }
                    let vbox = place_box(&mut stream);
                    let dist = fp_distribution(&mut stream);
                    Some(Detection::new(image_id, vbox, dist))
                })
                .collect();
            out.push(SimulatedObject { origin, views });
        }
        out
    }

    fn simulate_image(&self, image: &SyntheticImage, m_size: usize) -> Vec<SimulatedObject> {
        let mut out: Vec<SimulatedObject> = image
            .objects
            .iter()
            .enumerate()
            .flat_map(|(i, obj)| self.simulate_object(image.id, i, obj, m_size))
            .collect();
        out.extend(self.simulate_false_positives(image.id, m_size));
        out
    }

    /// Runs the surrogate on one image, producing view-matched
    /// detections ready for scoring. `m_size` must be at least 1.
    pub fn detect(&self, image: &SyntheticImage, m_size: usize) -> Result<Vec<AugmentedViews>> {
        if m_size == 0 {
            return Err(Error::InvalidInput(
                "need at least one augmented view".into(),
            ));
        }
        Ok(self
            .simulate_image(image, m_size)
            .into_iter()
            .map(|sim| {
                AugmentedViews::new(sim.origin, sim.views)
                    .expect("views share the origin's image and class count")
            })
            .collect())
    }

    /// Runs the surrogate without augmented views (used for held-out
    /// quality evaluation, where only the primary detections matter).
    pub fn detect_plain(&self, image: &SyntheticImage) -> Vec<Detection> {
        self.simulate_image(image, 0)
            .into_iter()
            .map(|sim| sim.origin)
            .collect()
    }
}

/// Mean per-class F1 of the surrogate on the held-out split.
///
/// Predictions are matched per class, greedily by descending confidence,
/// against unclaimed objects at IoU >= 0.5. Classes absent from the
/// held-out ground truth get NaN and are excluded from the mean.
pub fn evaluate_detection_quality(
    dataset: &SyntheticDataset,
    skill: &DetectorSkill,
    params: &SurrogateParams,
    seed: u64,
) -> (Vec<f64>, f64) {
    let k = dataset.k;
    let surrogate = Surrogate::new(skill, params, dataset.image_size, seed, EVAL_CONTEXT);
    let mut tp = vec![0u64; k];
    let mut fp = vec![0u64; k];
    let mut fn_ = vec![0u64; k];
    for image in &dataset.holdout {
        let mut detections = surrogate.detect_plain(image);
        detections.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()));
        let mut claimed = vec![false; image.objects.len()];
        for det in &detections {
            let mut best: Option<(f64, usize)> = None;
            for (i, obj) in image.objects.iter().enumerate() {
                if claimed[i] || obj.label != det.predicted_label() {
                    continue;
                }
                let overlap = iou(det.bbox(), &obj.bbox);
                if overlap >= MATCH_IOU && best.is_none_or(|(b, _)| overlap > b) {
                    best = Some((overlap, i));
                }
            }
            match best {
                Some((_, i)) => {
                    claimed[i] = true;
                    tp[det.predicted_label()] += 1;
                }
                None => fp[det.predicted_label()] += 1,
            }
        }
        for (i, obj) in image.objects.iter().enumerate() {
            if !claimed[i] {
                fn_[obj.label] += 1;
            }
        }
    }
    let mut per_class = vec![f64::NAN; k];
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        if tp[c] + fn_[c] == 0 {
            continue; // class absent from the held-out ground truth
        }
        let f1 = 2.0 * tp[c] as f64 / (2.0 * tp[c] as f64 + fp[c] as f64 + fn_[c] as f64);
        per_class[c] = f1;
        total += f1;
        present += 1;
    }
    let mean = if present > 0 {
        total / present as f64
    } else {
        f64::NAN
    };
    (per_class, mean)
}

// ---------------------------------------------------------------------------
// Active-learning state
// ---------------------------------------------------------------------------

/// Boxes spent in one cycle (cycle 0 records the freely labelled seed
/// pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub cycle: usize,
    pub boxes_spent: u64,
}

/// The mutable state of an experiment: which objects are labelled, which
/// are still in the pool, and the per-class supervision tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALState {
    /// Completed cycles.
    pub cycle: usize,
    /// Seed material for every random stream of the run.
    pub seed: u64,
    /// Per pool image: sorted indices of labelled objects.
    pub labelled: Vec<Vec<usize>>,
    /// Per pool image: sorted indices of still-unlabelled objects.
    pub pool: Vec<Vec<usize>>,
    /// Labelled box count per class.
    pub per_class_labelled: Vec<u64>,
    /// Net pseudo-label supervision mass per class from the most recent
    /// supervision build (may be negative where wrong labels dominate).
    pub per_class_pseudo_mass: Vec<f64>,
    pub budget_ledger: Vec<BudgetEntry>,
}

impl ALState {
    /// Fresh state with the first `initial_images` images fully
    /// labelled; their box count is ledgered as cycle 0.
    pub fn initial(dataset: &SyntheticDataset, initial_images: usize, seed: u64) -> Result<Self> {
        if initial_images > dataset.images.len() {
            return Err(Error::Config(format!(
                "initial pool of {} images exceeds the dataset's {}",
                initial_images,
                dataset.images.len()
            )));
        }
        let mut labelled = Vec::with_capacity(dataset.images.len());
        let mut pool = Vec::with_capacity(dataset.images.len());
        let mut per_class_labelled = vec![0u64; dataset.k];
        let mut initial_boxes = 0u64;
        for (i, image) in dataset.images.iter().enumerate() {
            let all: Vec<usize> = (0..image.objects.len()).collect();
            if i < initial_images {
                for obj in &image.objects {
                    per_class_labelled[obj.label] += 1;
                }
                initial_boxes += image.objects.len() as u64;
                labelled.push(all);
                pool.push(Vec::new());
            } else {
                labelled.push(Vec::new());
                pool.push(all);
            }
        }
        Ok(ALState {
            cycle: 0,
            seed,
            labelled,
            pool,
            per_class_labelled,
            per_class_pseudo_mass: vec![0.0; dataset.k],
            budget_ledger: vec![BudgetEntry {
                cycle: 0,
                boxes_spent: initial_boxes,
            }],
        })
    }

    /// The labelled objects of one image as supervision labels.
    pub fn labelled_gt(&self, dataset: &SyntheticDataset, image_idx: usize) -> Vec<GtLabel> {
        self.labelled[image_idx]
            .iter()
            .map(|&oi| {
                let obj = &dataset.images[image_idx].objects[oi];
                GtLabel {
                    bbox: obj.bbox,
                    label: obj.label,
                }
            })
            .collect()
    }

    pub fn labelled_boxes(&self) -> u64 {
        self.per_class_labelled.iter().sum()
    }

    pub fn pool_boxes(&self) -> u64 {
        self.pool.iter().map(|p| p.len() as u64).sum()
    }

    /// Structural integrity against the dataset: per image, labelled and
    /// pool indices are sorted, disjoint, and together cover every
    /// object; the per-class tallies match a recount.
    pub fn validate_against(&self, dataset: &SyntheticDataset) -> Result<()> {
        if self.labelled.len() != dataset.images.len() || self.pool.len() != dataset.images.len() {
            return Err(Error::Internal(format!(
                "state tracks {} images, dataset has {}",
                self.labelled.len(),
                dataset.images.len()
            )));
        }
        if self.per_class_labelled.len() != dataset.k || self.per_class_pseudo_mass.len() != dataset.k
        {
            return Err(Error::Internal("per-class tallies have wrong length".into()));
        }
        let mut recount = vec![0u64; dataset.k];
        for (i, image) in dataset.images.iter().enumerate() {
            let mut seen = vec![false; image.objects.len()];
            for part in [&self.labelled[i], &self.pool[i]] {
                if !part.is_sorted() {
                    return Err(Error::Internal(format!("image {i}: unsorted index list")));
                }
                for &oi in part {
                    if oi >= image.objects.len() || seen[oi] {
                        return Err(Error::Internal(format!(
                            "image {i}: object {oi} out of range or duplicated"
                        )));
                    }
                    seen[oi] = true;
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Internal(format!(
                    "image {i}: labelled and pool sets do not cover all objects"
                )));
            }
            for &oi in &self.labelled[i] {
                recount[image.objects[oi].label] += 1;
            }
        }
        if recount != self.per_class_labelled {
            return Err(Error::Internal(
                "per_class_labelled does not match a recount".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Annotation oracle
// ---------------------------------------------------------------------------

/// Spends one cycle's budget on the selected candidates.
///
/// Each selected box is matched (IoU >= 0.5) against the still-unlabelled
/// objects of its image; a match moves that object to the labelled set.
/// An unmatched selection is a false positive: it labels nothing but
/// still consumes a budget unit when `fp_costs_budget` is set (a human
/// still inspected the region). A selection matching a box labelled
/// earlier in this same cycle is a duplicate and wastes its unit; one
/// matching a box labelled in a *previous* cycle is an internal error,
/// because candidate filtering must remove those. Budget left over after
/// the selections (a pool smaller than the budget, or free false
/// positives) is spent sweeping the remaining pool in registry order, so
/// the ledger entry always equals the budget while unlabelled objects
/// remain.
pub fn annotate(
    dataset: &SyntheticDataset,
    candidates: &[Candidate],
    selection: &SelectionResult,
    state: &ALState,
    budget: u64,
    fp_costs_budget: bool,
    cycle: usize,
) -> Result<ALState> {
    let mut st = state.clone();
    let mut spent = 0u64;
    for &idx in &selection.selected {
        if spent >= budget {
            break;
        }
        let candidate = candidates.get(idx).ok_or_else(|| {
            Error::InvalidInput(format!(
                "selected index {idx} out of range for {} candidates",
                candidates.len()
            ))
        })?;
        let det = candidate.detection();
        let img = det.image_id() as usize;
        if img >= dataset.images.len() {
            return Err(Error::InvalidInput(format!(
                "candidate references image {img} outside the pool"
            )));
        }
        let objects = &dataset.images[img].objects;
        let mut best: Option<(f64, usize)> = None;
        for &oi in &st.pool[img] {
            let overlap = iou(det.bbox(), &objects[oi].bbox);
            if overlap >= MATCH_IOU && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, oi));
            }
        }
        match best {
            Some((_, oi)) => {
                st.pool[img].retain(|&x| x != oi);
                let at = st.labelled[img].partition_point(|&x| x < oi);
                st.labelled[img].insert(at, oi);
                st.per_class_labelled[objects[oi].label] += 1;
                spent += 1;
            }
            None => {
                let matches_labelled = |set: &[usize]| {
                    set.iter()
                        .any(|&oi| iou(det.bbox(), &objects[oi].bbox) >= MATCH_IOU)
                };
                if matches_labelled(&st.labelled[img]) {
                    if matches_labelled(&state.labelled[img]) {
                        return Err(Error::Internal(format!(
                            "selected a candidate over an object of image {img} that was \
                             already labelled before this cycle; filtering should remove those"
                        )));
                    }
                    // Duplicate of a box labelled earlier this cycle:
                    // the inspection still costs a unit.
                    spent += 1;
                } else if fp_costs_budget {
                    spent += 1;
                }
            }
        }
    }
    // Sweep leftover budget through the remaining pool in registry order.
    'sweep: for img in 0..dataset.images.len() {
        while let Some(&oi) = st.pool[img].first() {
            if spent >= budget {
                break 'sweep;
            }
            st.pool[img].remove(0);
            let at = st.labelled[img].partition_point(|&x| x < oi);
            st.labelled[img].insert(at, oi);
            st.per_class_labelled[dataset.images[img].objects[oi].label] += 1;
            spent += 1;
        }
    }
    st.budget_ledger.push(BudgetEntry {
        cycle,
        boxes_spent: spent,
    });
    Ok(st)
}

// ---------------------------------------------------------------------------
// Imbalance metrics
// ---------------------------------------------------------------------------

/// Ratio of the largest to the smallest nonzero count. Zero-count
/// classes are excluded (report them via [`zero_class_count`]); an
/// all-zero histogram is an error.
pub fn imbalance_factor(counts: &[u64]) -> Result<f64> {
    let nonzero = counts.iter().copied().filter(|&c| c > 0);
    let (mut min, mut max) = (u64::MAX, 0u64);
    for c in nonzero {
        min = min.min(c);
        max = max.max(c);
    }
    if max == 0 {
        return Err(Error::InvalidInput(
            "imbalance factor of an all-zero histogram".into(),
        ));
    }
    Ok(max as f64 / min as f64)
}

/// Number of classes with a zero count.
pub fn zero_class_count(counts: &[u64]) -> u64 {
    counts.iter().filter(|&&c| c == 0).count() as u64
}

fn imbalance_or_nan(counts: &[u64]) -> f64 {
    imbalance_factor(counts).unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// Cycle loop
// ---------------------------------------------------------------------------

/// Per-cycle behaviour of the loop: how to score, select, pseudo-label,
/// and simulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub strategy: Strategy,
    pub balance: BalanceConfig,
    pub thresholds: Thresholds,
    pub pseudo_mode: PseudoMode,
    pub beta: f64,
    /// Detections at or below this confidence are not candidate boxes.
    pub tau_cand: f64,
    /// Augmented views simulated per detection.
    pub m_size: usize,
    pub surrogate: SurrogateParams,
    /// Count labelled boxes alongside pseudo labels when estimating the
    /// class prior used for balancing.
    pub include_gt_in_frequency: bool,
    /// Whether selected false positives consume budget.
    pub fp_budget_cost: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            strategy: Strategy::Balanced,
            balance: BalanceConfig::default(),
            thresholds: Thresholds::default(),
            pseudo_mode: PseudoMode::TaskSoft,
            beta: 1.3,
            tau_cand: 0.05,
            m_size: 2,
            surrogate: SurrogateParams::default(),
            include_gt_in_frequency: false,
            fp_budget_cost: true,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        self.balance.validate()?;
        self.thresholds.validate()?;
        self.surrogate.validate()?;
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(0.0..1.0).contains(&self.tau_cand) {
            return Err(Error::Config(format!(
                "tau_cand must be in [0, 1), got {}",
                self.tau_cand
            )));
        }
        if self.m_size == 0 {
            return Err(Error::Config("m_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything measured about one completed cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    /// 1-based index of the completed cycle.
    pub cycle: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub budget_spent: u64,
    /// Predicted classes of the selected boxes.
    pub selected_hist: Vec<u64>,
    /// Classes of the pseudo labels in the post-annotation supervision.
    pub pseudo_hist: Vec<u64>,
    /// Classes of all labelled boxes after the cycle.
    pub labelled_hist: Vec<u64>,
    pub imbalance_selected: f64,
    pub imbalance_pseudo: f64,
    pub imbalance_labelled: f64,
    /// Fraction of pseudo labels per class that sit on a matching
    /// unlabelled object (NaN where the class has no pseudo labels).
    pub pseudo_precision: Vec<f64>,
    /// Fraction of unlabelled objects per class (in images that build
    /// supervision) covered by a correct pseudo label (NaN where absent).
    pub pseudo_recall: Vec<f64>,
    /// Held-out F1 per class (NaN where the class is absent).
    pub per_class_f1: Vec<f64>,
    /// Mean of `per_class_f1` over present classes.
    pub detection_quality: f64,
    /// Classes with zero pseudo labels.
    pub zero_classes: u64,
}

/// Normalized geometry plus class probabilities, the feature space for
/// coverage-based selection.
fn coreset_features(image_size: (f64, f64), bbox: &BBox, probs: &[f64]) -> Vec<f64> {
    let (w, h) = image_size;
    let (cx, cy) = bbox.center();
    let mut f = vec![cx / w, cy / h, bbox.width() / w, bbox.height() / h];
    f.extend_from_slice(probs);
    f
}

/// Tallies pseudo-label quality for one image's supervision set against
/// the objects still unlabelled there.
struct PseudoTally {
    hist: Vec<u64>,
    correct: Vec<u64>,
    unlabelled_gt: Vec<u64>,
    mass: Vec<f64>,
}

impl PseudoTally {
    fn new(k: usize) -> Self {
        PseudoTally {
            hist: vec![0; k],
            correct: vec![0; k],
            unlabelled_gt: vec![0; k],
            mass: vec![0.0; k],
        }
    }

    fn add_image(
        &mut self,
        supervision: &[PseudoLabel],
        image: &SyntheticImage,
        pool: &[usize],
        rho: f64,
    ) {
        for &oi in pool {
            self.unlabelled_gt[image.objects[oi].label] += 1;
        }
        let mut claimed = vec![false; pool.len()];
        for p in supervision {
            if p.source != LabelSource::Pseudo {
                continue;
            }
            self.hist[p.label] += 1;
            let mut best: Option<(f64, usize)> = None;
            for (slot, &oi) in pool.iter().enumerate() {
                if claimed[slot] {
                    continue;
                }
                let overlap = iou(&p.bbox, &image.objects[oi].bbox);
                if overlap >= MATCH_IOU && best.is_none_or(|(b, _)| overlap > b) {
                    best = Some((overlap, slot));
                }
            }
            let (cls_good, box_good) = match best {
                Some((overlap, slot)) => {
                    claimed[slot] = true;
                    let same_class = image.objects[pool[slot]].label == p.label;
                    (same_class, same_class && overlap >= BOX_GOOD_IOU)
                }
                None => (false, false),
            };
            if cls_good {
                self.correct[p.label] += 1;
            }
            let sign = |good: bool| if good { 1.0 } else { -rho };
            self.mass[p.label] += 0.5 * p.w_cls * sign(cls_good) + 0.5 * p.w_box * sign(box_good);
        }
    }

    fn precision(&self) -> Vec<f64> {
        self.correct
            .iter()
            .zip(&self.hist)
            .map(|(&c, &n)| if n > 0 { c as f64 / n as f64 } else { f64::NAN })
            .collect()
    }

    fn recall(&self) -> Vec<f64> {
        self.correct
            .iter()
            .zip(&self.unlabelled_gt)
            .map(|(&c, &n)| if n > 0 { c as f64 / n as f64 } else { f64::NAN })
            .collect()
    }
}

/// Runs one acquisition cycle and reports what happened.
///
/// Order of operations: recompute skill from the current supervision,
/// run the surrogate on every image that still has unlabelled objects,
/// drop filtered candidates, estimate the pseudo-label class prior,
/// score, select per the configured strategy, annotate (spending
/// `budget`), rebuild the supervision sets, tally pseudo-label mass, and
/// finally measure held-out quality with the post-cycle skill.
/// Deterministic in (dataset, state, config, budget).
pub fn run_cycle(
    dataset: &SyntheticDataset,
    state: &ALState,
    cfg: &LoopConfig,
    budget: u64,
) -> Result<(ALState, CycleReport)> {
    cfg.validate()?;
    state.validate_against(dataset)?;
    let k = dataset.k;
    let seed = state.seed;
    let report_cycle = state.cycle + 1;

    let skill = DetectorSkill::from_supervision(
        &effective_supervision(
            &state.per_class_labelled,
            &state.per_class_pseudo_mass,
            cfg.surrogate.gamma,
        ),
        cfg.surrogate.kappa,
    )?;
    let surrogate = Surrogate::new(
        &skill,
        &cfg.surrogate,
        dataset.image_size,
        seed,
        state.cycle as u64,
    );

    // Candidate detections per image with unlabelled objects.
    let mut kept: Vec<(usize, Vec<AugmentedViews>)> = Vec::new();
    for (i, image) in dataset.images.iter().enumerate() {
        if state.pool[i].is_empty() {
            continue;
        }
        let views = surrogate.detect(image, cfg.m_size)?;
        let views = filter_candidates(views, &state.labelled_gt(dataset, i), cfg.tau_cand);
        if !views.is_empty() {
            kept.push((i, views));
        }
    }

    // Class prior over the soft-kept candidates (weight gates only, no
    // deduplication): this is the frequency the balancing factor sees,
    // independent of the configured pseudo-label mode.
    let mut prior_labels: Vec<usize> = Vec::new();
    for (_, views) in &kept {
        for av in views {
            let w_cls = cls_weight(av.origin().confidence(), LabelSource::Pseudo, &cfg.thresholds);
            let w_box = box_weight(box_consistency(av), LabelSource::Pseudo, &cfg.thresholds);
            if w_cls > 0.0 || w_box > 0.0 {
                prior_labels.push(av.origin().predicted_label());
            }
        }
    }
    if cfg.include_gt_in_frequency {
        for (c, &n) in state.per_class_labelled.iter().enumerate() {
            prior_labels.extend(std::iter::repeat_n(c, n as usize));
        }
    }
    let prior = estimate_class_distribution(&prior_labels, k)?;

    // Score. Only the class-balanced strategy applies the prior factor.
    let balance = if cfg.strategy == Strategy::Balanced {
        cfg.balance.clone()
    } else {
        BalanceConfig {
            enabled: false,
            ..cfg.balance.clone()
        }
    };
    let mut image_of: Vec<usize> = Vec::new();
    let mut all_views: Vec<AugmentedViews> = Vec::new();
    for (i, views) in kept {
        image_of.extend(std::iter::repeat_n(i, views.len()));
        all_views.extend(views);
    }
    let pool = score_candidates(all_views, cfg.beta, &prior, &balance);

    let budget_picks = usize::try_from(budget).unwrap_or(usize::MAX);
    let selection = match cfg.strategy {
        Strategy::Uncertainty | Strategy::Balanced => select_top_k(&pool, budget_picks),
        Strategy::Entropy => strategy_entropy(&pool, budget_picks),
        Strategy::Random => strategy_random(
            &pool,
            budget_picks,
            seed ^ (report_cycle as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ),
        Strategy::Coreset => {
            let features: Vec<Vec<f64>> = pool
                .iter()
                .map(|c| {
                    coreset_features(
                        dataset.image_size,
                        c.detection().bbox(),
                        c.detection().dist().probs(),
                    )
                })
                .collect();
            let mut labelled_features: Vec<Vec<f64>> = Vec::new();
            for (i, image) in dataset.images.iter().enumerate() {
                for &oi in &state.labelled[i] {
                    let obj = &image.objects[oi];
                    let mut probs = vec![0.0; k];
                    probs[obj.label] = 1.0;
                    labelled_features.push(coreset_features(
                        dataset.image_size,
                        &obj.bbox,
                        &probs,
                    ));
                }
            }
            strategy_coreset(&pool, &features, &labelled_features, budget_picks)?
        }
    };
    let mut selected_hist = selection.per_class_counts.clone();
    selected_hist.resize(k, 0);

    let mut new_state = annotate(
        dataset,
        &pool,
        &selection,
        state,
        budget,
        cfg.fp_budget_cost,
        report_cycle,
    )?;
    new_state.cycle = report_cycle;
    let budget_spent = new_state
        .budget_ledger
        .last()
        .map(|e| e.boxes_spent)
        .unwrap_or(0);

    // Rebuild supervision across the whole pool -- labelled boxes plus
    // pseudo labels on everything still unlabelled, including images
    // without any labels -- and tally pseudo-label quality against the
    // objects that remain unlabelled. Candidates were filtered against
    // the pre-cycle labels; boxes labelled this cycle are excluded by
    // the duplicate check inside the supervision builder.
    let mut by_image: Vec<Vec<&Candidate>> = vec![Vec::new(); dataset.images.len()];
    for (c, &i) in pool.iter().zip(&image_of) {
        by_image[i].push(c);
    }
    let mut tally = PseudoTally::new(k);
    for (i, image) in dataset.images.iter().enumerate() {
        if new_state.labelled[i].is_empty() && by_image[i].is_empty() {
            continue;
        }
        let gt = new_state.labelled_gt(dataset, i);
        let candidates: Vec<Candidate> = by_image[i].iter().map(|&c| c.clone()).collect();
        let supervision = build_supervision(&candidates, &gt, &cfg.thresholds, cfg.pseudo_mode);
        tally.add_image(&supervision, image, &new_state.pool[i], cfg.surrogate.rho);
    }
    new_state.per_class_pseudo_mass = tally.mass.clone();

    let post_skill = DetectorSkill::from_supervision(
        &effective_supervision(
            &new_state.per_class_labelled,
            &new_state.per_class_pseudo_mass,
            cfg.surrogate.gamma,
        ),
        cfg.surrogate.kappa,
    )?;
    let (per_class_f1, detection_quality) =
        evaluate_detection_quality(dataset, &post_skill, &cfg.surrogate, seed);

    let labelled_hist = new_state.per_class_labelled.clone();
    let report = CycleReport {
        cycle: report_cycle,
        strategy: cfg.strategy,
        seed,
        budget_spent,
        imbalance_selected: imbalance_or_nan(&selected_hist),
        imbalance_pseudo: imbalance_or_nan(&tally.hist),
        imbalance_labelled: imbalance_or_nan(&labelled_hist),
        zero_classes: zero_class_count(&tally.hist),
        pseudo_precision: tally.precision(),
        pseudo_recall: tally.recall(),
        selected_hist,
        pseudo_hist: tally.hist,
        labelled_hist,
        per_class_f1,
        detection_quality,
    };
    Ok((new_state, report))
}
