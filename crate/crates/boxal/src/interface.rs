//! Configuration, persistence, reporting, and the command-line surface.
//!
//! Everything durable lives here: experiment configs and checkpoints as
//! JSON, datasets in COCO-style JSON, and per-cycle reports as CSV. All
//! serialization is deterministic — rerunning the same config and seed
//! reproduces every output byte for byte — and every load path rejects
//! malformed or mismatched input with a path-annotated error instead of
//! proceeding on partial state.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{
    estimate_class_distribution, score_candidates, BalanceConfig, Strategy,
};
use crate::pseudolabel::{GtLabel, PseudoMode, Thresholds};
use crate::scoring::{iou, AugmentedViews, BBox, ClassDistribution, Detection, MATCH_IOU};
use crate::simulator::{
    generate_dataset, run_cycle, ALState, CycleReport, DatasetConfig, LoopConfig,
    SurrogateParams, SyntheticDataset,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// IoU thresholds for assigning training samples to supervision targets
/// (used by the loss stage; the annotation oracle has its own fixed
/// match threshold).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            pos_iou: 0.5,
            neg_iou: 0.4,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.neg_iou)
            || !(0.0..=1.0).contains(&self.pos_iou)
            || self.neg_iou > self.pos_iou
        {
            return Err(Error::Config(format!(
                "matcher thresholds must satisfy 0 <= neg_iou <= pos_iou <= 1, got neg {} pos {}",
                self.neg_iou, self.pos_iou
            )));
        }
        Ok(())
    }
}

/// A complete experiment: dataset, loop behaviour, budget schedule, and
/// the seeds to repeat it under. Every field has a default, so a config
/// file only needs the values it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Images fully labelled before the first cycle.
    pub initial_images: usize,
    pub strategy: Strategy,
    pub balance: BalanceConfig,
    pub thresholds: Thresholds,
    pub pseudo_mode: PseudoMode,
    pub beta: f64,
    pub tau_cand: f64,
    pub matcher: MatcherConfig,
    pub m_size: usize,
    pub surrogate: SurrogateParams,
    pub include_gt_in_frequency: bool,
    pub fp_budget_cost: bool,
    /// Boxes to spend per cycle; the schedule length is the cycle count.
    pub budgets: Vec<u64>,
    /// Seeds to repeat the experiment under. Each seed drives dataset
    /// generation and every random stream of its run.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let lc = LoopConfig::default();
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            initial_images: 200,
            strategy: lc.strategy,
            balance: lc.balance,
            thresholds: lc.thresholds,
            pseudo_mode: lc.pseudo_mode,
            beta: lc.beta,
            tau_cand: lc.tau_cand,
            matcher: MatcherConfig::default(),
            m_size: lc.m_size,
            surrogate: lc.surrogate,
            include_gt_in_frequency: lc.include_gt_in_frequency,
            fp_budget_cost: lc.fp_budget_cost,
            budgets: vec![500, 1000],
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// The per-cycle slice of this config.
    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            strategy: self.strategy,
            balance: self.balance.clone(),
            thresholds: self.thresholds,
            pseudo_mode: self.pseudo_mode,
            beta: self.beta,
            tau_cand: self.tau_cand,
            m_size: self.m_size,
            surrogate: self.surrogate.clone(),
            include_gt_in_frequency: self.include_gt_in_frequency,
            fp_budget_cost: self.fp_budget_cost,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.loop_config().validate()?;
        self.matcher.validate()?;
        if self.budgets.is_empty() {
            return Err(Error::Config("budgets must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.initial_images > self.dataset.num_images {
            return Err(Error::Config(format!(
                "initial_images {} exceeds the dataset's {} images",
                self.initial_images, self.dataset.num_images
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; checkpoints embed it so a
    /// resume under a different config is rejected.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Reads and validates an experiment config from a JSON file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Format version of the checkpoint JSON.
pub const CHECKPOINT_VERSION: u32 = 1;

/// A resumable snapshot: the full loop state plus the digest of the
/// config it was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub state: ALState,
}

/// Writes a checkpoint for `state` under `cfg`.
pub fn save_checkpoint(state: &ALState, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: cfg.config_hash(),
        state: state.clone(),
    };
    let json = serde_json::to_string_pretty(&checkpoint).expect("state serializes");
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a checkpoint, rejecting version or config mismatches outright
/// (no partial state escapes a failed load).
pub fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<ALState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found: checkpoint.version,
        });
    }
    let expected = cfg.config_hash();
    if checkpoint.config_hash != expected {
        return Err(Error::ConfigHashMismatch {
            expected,
            found: checkpoint.config_hash,
        });
    }
    Ok(checkpoint.state)
}

// ---------------------------------------------------------------------------
// COCO-style dataset files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: i64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: i64,
    pub name: String,
}

/// The subset of COCO detection JSON this crate reads and writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One image after loading: corner-form boxes with dense class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<GtLabel>,
}

/// A loaded COCO file: dense labels in `[0, k)`, plus how many
/// degenerate annotations were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub k: usize,
    pub images: Vec<LoadedImage>,
    /// Annotations skipped for non-positive or non-finite extent.
    pub skipped_degenerate: usize,
}

/// Loads a COCO-style JSON file.
///
/// Category ids are remapped densely to `[0, k)` in the order of the
/// `categories` array. Boxes convert from `[x, y, w, h]` to corners.
/// Annotations with non-positive or non-finite extent are skipped and
/// counted, not errors; anything structurally wrong (bad JSON, unknown
/// category or image references, duplicate category ids) is a parse
/// error carrying the path and location.
pub fn load_coco(path: &Path) -> Result<LoadedDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parse_err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let file: CocoFile =
        serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    if file.categories.is_empty() {
        return Err(parse_err("no categories defined".into()));
    }
    let mut remap = std::collections::BTreeMap::new();
    for (dense, cat) in file.categories.iter().enumerate() {
        if remap.insert(cat.id, dense).is_some() {
            return Err(parse_err(format!("duplicate category id {}", cat.id)));
        }
    }
    let mut images: Vec<LoadedImage> = file
        .images
        .iter()
        .map(|img| LoadedImage {
            id: img.id,
            width: img.width,
            height: img.height,
            objects: Vec::new(),
        })
        .collect();
    let mut index_of_image = std::collections::BTreeMap::new();
    for (i, img) in file.images.iter().enumerate() {
        if index_of_image.insert(img.id, i).is_some() {
            return Err(parse_err(format!("duplicate image id {}", img.id)));
        }
    }
    let mut skipped = 0usize;
    for ann in &file.annotations {
        let &slot = index_of_image.get(&ann.image_id).ok_or_else(|| {
            parse_err(format!(
                "annotation {} references unknown image {}",
                ann.id, ann.image_id
            ))
        })?;
        let &label = remap.get(&ann.category_id).ok_or_else(|| {
            parse_err(format!(
                "annotation {} references unknown category {}",
                ann.id, ann.category_id
            ))
        })?;
        let [x, y, w, h] = ann.bbox;
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() {
            skipped += 1;
            continue;
        }
        let bbox = match BBox::new(x, y, x + w, y + h) {
            Ok(b) => b,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        images[slot].objects.push(GtLabel { bbox, label });
    }
    Ok(LoadedDataset {
        k: file.categories.len(),
        images,
        skipped_degenerate: skipped,
    })
}

/// Renders the selectable pool of a synthetic dataset as COCO-style
/// JSON (1-based category ids, `[x, y, w, h]` boxes).
pub fn export_coco(dataset: &SyntheticDataset) -> CocoFile {
    let (width, height) = dataset.image_size;
    let categories = (0..dataset.k)
        .map(|c| CocoCategory {
            id: c as i64 + 1,
            name: format!("class_{c}"),
        })
        .collect();
    let images = dataset
        .images
        .iter()
        .map(|img| CocoImage {
            id: img.id,
            width,
            height,
            file_name: format!("synthetic_{:06}.png", img.id),
        })
        .collect();
    let mut annotations = Vec::new();
    for img in &dataset.images {
        for obj in &img.objects {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: img.id,
                category_id: obj.label as i64 + 1,
                bbox: [
                    obj.bbox.x1(),
                    obj.bbox.y1(),
                    obj.bbox.width(),
                    obj.bbox.height(),
                ],
            });
        }
    }
    CocoFile {
        images,
        annotations,
        categories,
    }
}

// ---------------------------------------------------------------------------
// CSV reports
// ---------------------------------------------------------------------------

/// Column schema of the summary report.
pub const SUMMARY_HEADER: &str = "cycle,strategy,seed,budget_spent,imbalance_selected,imbalance_pseudo,imbalance_labelled,detection_f1,zero_classes";

/// Renders cycle reports as the summary CSV (LF line endings, `NaN` for
/// undefined ratios, shortest-round-trip floats).
pub fn format_summary_csv(reports: &[CycleReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.cycle,
            r.strategy.id(),
            r.seed,
            r.budget_spent,
            r.imbalance_selected,
            r.imbalance_pseudo,
            r.imbalance_labelled,
            r.detection_quality,
            r.zero_classes
        );
    }
    out
}

/// Renders the per-class histograms and quality vectors, one row per
/// (report, kind). Columns `c0..c{K-1}` follow the class indexing.
pub fn format_per_class_csv(reports: &[CycleReport]) -> String {
    let k = reports.first().map_or(0, |r| r.selected_hist.len());
    let mut out = String::from("cycle,strategy,seed,kind");
    for c in 0..k {
        let _ = write!(out, ",c{c}");
    }
    out.push('\n');
    for r in reports {
        let mut row = |kind: &str, values: &dyn Fn(usize) -> String| {
            let _ = write!(out, "{},{},{},{kind}", r.cycle, r.strategy.id(), r.seed);
            for c in 0..k {
                let _ = write!(out, ",{}", values(c));
            }
            out.push('\n');
        };
        row("selected", &|c| r.selected_hist[c].to_string());
        row("pseudo", &|c| r.pseudo_hist[c].to_string());
        row("labelled", &|c| r.labelled_hist[c].to_string());
        row("pseudo_precision", &|c| r.pseudo_precision[c].to_string());
        row("pseudo_recall", &|c| r.pseudo_recall[c].to_string());
        row("f1", &|c| r.per_class_f1[c].to_string());
    }
    out
}

/// Writes both report CSVs into `dir` as `summary.csv` and
/// `per_class.csv`, returning their paths.
pub fn write_report(reports: &[CycleReport], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let summary = dir.join("summary.csv");
    fs::write(&summary, format_summary_csv(reports))
        .map_err(|e| Error::io(summary.display().to_string(), e))?;
    let per_class = dir.join("per_class.csv");
    fs::write(&per_class, format_per_class_csv(reports))
        .map_err(|e| Error::io(per_class.display().to_string(), e))?;
    Ok((summary, per_class))
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

/// The dataset one experiment seed runs on: the config's dataset shape
/// with the run seed substituted, so paired runs under different
/// strategies see identical data.
pub fn experiment_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<SyntheticDataset> {
    generate_dataset(&DatasetConfig {
        seed,
        ..cfg.dataset.clone()
    })
}

/// Runs all cycles the budget schedule still holds for `state`.
pub fn run_remaining(
    cfg: &ExperimentConfig,
    dataset: &SyntheticDataset,
    mut state: ALState,
) -> Result<(Vec<CycleReport>, ALState)> {
    let lc = cfg.loop_config();
    let mut reports = Vec::new();
    while state.cycle < cfg.budgets.len() {
        let budget = cfg.budgets[state.cycle];
        let (next, report) = run_cycle(dataset, &state, &lc, budget)?;
        state = next;
        reports.push(report);
    }
    Ok((reports, state))
}

/// Runs one full seed: dataset generation, initial pool, every budgeted
/// cycle.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<CycleReport>, ALState)> {
    let dataset = experiment_dataset(cfg, seed)?;
    let state = ALState::initial(&dataset, cfg.initial_images, seed)?;
    run_remaining(cfg, &dataset, state)
}

/// Runs the whole experiment (every seed), writing the report CSVs and a
/// per-seed checkpoint (refreshed after each cycle) into the output
/// directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<CycleReport>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::io(cfg.output_dir.display().to_string(), e))?;
    let lc = cfg.loop_config();
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let dataset = experiment_dataset(cfg, seed)?;
        let mut state = ALState::initial(&dataset, cfg.initial_images, seed)?;
        let ck_path = cfg
            .output_dir
            .join(format!("checkpoint_{}_{}.json", cfg.strategy.id(), seed));
        while state.cycle < cfg.budgets.len() {
            let (next, report) = run_cycle(&dataset, &state, &lc, cfg.budgets[state.cycle])?;
            state = next;
            all.push(report);
            save_checkpoint(&state, cfg, &ck_path)?;
        }
    }
    write_report(&all, &cfg.output_dir)?;
    Ok(all)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// One parsed summary row.
#[derive(Debug, Clone, PartialEq)]
struct SummaryRow {
    cycle: usize,
    strategy: String,
    seed: u64,
    budget_spent: u64,
    imbalance_selected: f64,
    imbalance_pseudo: f64,
    imbalance_labelled: f64,
    detection_f1: f64,
    zero_classes: u64,
}

fn parse_summary_csv(name: &str, text: &str) -> Result<Vec<SummaryRow>> {
    let parse_err = |message: String| Error::Parse {
        path: name.to_string(),
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SUMMARY_HEADER => {}
        other => {
            return Err(parse_err(format!(
                "line 1: expected summary header, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(parse_err(format!(
                "line {}: expected 9 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("line {}: field {}: {e}", i + 2, j + 1)))
        };
        let int = |j: usize| -> Result<u64> {
            fields[j]
                .parse::<u64>()
                .map_err(|e| parse_err(format!("line {}: field {}: {e}", i + 2, j + 1)))
        };
        rows.push(SummaryRow {
            cycle: int(0)? as usize,
            strategy: fields[1].to_string(),
            seed: int(2)?,
            budget_spent: int(3)?,
            imbalance_selected: num(4)?,
            imbalance_pseudo: num(5)?,
            imbalance_labelled: num(6)?,
            detection_f1: num(7)?,
            zero_classes: int(8)?,
        });
    }
    Ok(rows)
}

/// Linear-interpolation quantile of an already-sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n => {
            let h = p * (n as f64 - 1.0);
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Median and interquartile range over the finite entries.
fn median_iqr(values: &[f64]) -> (f64, f64) {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    finite.sort_by(f64::total_cmp);
    (
        quantile(&finite, 0.5),
        quantile(&finite, 0.75) - quantile(&finite, 0.25),
    )
}

/// Column schema of the aggregated report.
pub const AGGREGATE_HEADER: &str = "strategy,cycle,seeds,detection_f1_median,detection_f1_iqr,imbalance_selected_median,imbalance_selected_iqr,imbalance_pseudo_median,imbalance_pseudo_iqr,imbalance_labelled_median,imbalance_labelled_iqr";

/// Aggregates one or more summary CSVs (as `(name, text)` pairs) into
/// per-(strategy, cycle) medians and interquartile ranges across seeds.
/// Statistics skip NaN entries; `seeds` counts the rows in the group.
pub fn aggregate_summaries(inputs: &[(String, String)]) -> Result<String> {
    let mut rows = Vec::new();
    for (name, text) in inputs {
        rows.extend(parse_summary_csv(name, text)?);
    }
    let mut keys: Vec<(String, usize)> = rows
        .iter()
        .map(|r| (r.strategy.clone(), r.cycle))
        .collect();
    keys.sort();
    keys.dedup();
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for (strategy, cycle) in keys {
        let group: Vec<&SummaryRow> = rows
            .iter()
            .filter(|r| r.strategy == strategy && r.cycle == cycle)
            .collect();
        let stat = |f: &dyn Fn(&SummaryRow) -> f64| {
            let values: Vec<f64> = group.iter().map(|r| f(r)).collect();
            median_iqr(&values)
        };
        let f1 = stat(&|r| r.detection_f1);
        let sel = stat(&|r| r.imbalance_selected);
        let pse = stat(&|r| r.imbalance_pseudo);
        let lab = stat(&|r| r.imbalance_labelled);
        let _ = writeln!(
            out,
            "{strategy},{cycle},{},{},{},{},{},{},{},{},{}",
            group.len(),
            f1.0,
            f1.1,
            sel.0,
            sel.1,
            pse.0,
            pse.1,
            lab.0,
            lab.1
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Detection-file scoring
// ---------------------------------------------------------------------------

fn default_beta() -> f64 {
    1.3
}
fn default_sigma() -> f64 {
    1.0
}
fn default_tau_cand() -> f64 {
    0.05
}

/// One detection to score: its box, class probabilities, and optional
/// augmented-view re-detections (`null` marks a lost view).
#[derive(Debug, Clone, Deserialize)]
pub struct ScoreDetection {
    pub image_id: u64,
    pub bbox: BBox,
    pub probs: Vec<f64>,
    #[serde(default)]
    pub views: Vec<Option<ScoreView>>,
}

/// A re-detection of the same object under an augmented input.
#[derive(Debug, Clone, Deserialize)]
pub struct ScoreView {
    pub bbox: BBox,
    pub probs: Vec<f64>,
}

/// Input schema of the `score` command: detections plus the labelled
/// boxes they are filtered against.
#[derive(Debug, Clone, Deserialize)]
pub struct ScoreFile {
    pub k: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_tau_cand")]
    pub tau_cand: f64,
    #[serde(default)]
    pub labelled: Vec<GtLabel>,
    pub detections: Vec<ScoreDetection>,
}

/// Column schema of the `score` output.
pub const SCORE_HEADER: &str =
    "image_id,predicted_label,confidence,uncertainty,box_consistency,acquisition,kept";

/// Scores every detection in the file: one CSV row per input detection,
/// in input order. `kept` flags whether the detection would survive
/// candidate filtering (confidence above `tau_cand`, no overlap with a
/// labelled box); the class prior behind the acquisition score is
/// estimated from the kept detections only. Detections without views
/// score against a single lost view (maximal disagreement).
pub fn score_detections(file: &ScoreFile) -> Result<String> {
    if file.k < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            file.k
        )));
    }
    let mut views = Vec::with_capacity(file.detections.len());
    for det in &file.detections {
        let make = |probs: &[f64]| -> Result<ClassDistribution> {
            if probs.len() != file.k {
                return Err(Error::DimensionMismatch {
                    left: probs.len(),
                    right: file.k,
                });
            }
            ClassDistribution::new(probs.to_vec())
        };
        let origin = Detection::new(det.image_id, det.bbox, make(&det.probs)?);
        let mut v: Vec<Option<Detection>> = Vec::new();
        for view in &det.views {
            v.push(match view {
                Some(view) => Some(Detection::new(det.image_id, view.bbox, make(&view.probs)?)),
                None => None,
            });
        }
        if v.is_empty() {
            v.push(None);
        }
        views.push(AugmentedViews::new(origin, v)?);
    }
    let kept: Vec<bool> = views
        .iter()
        .map(|av| {
            av.origin().confidence() > file.tau_cand
                && !file
                    .labelled
                    .iter()
                    .any(|g| iou(av.origin().bbox(), &g.bbox) >= MATCH_IOU)
        })
        .collect();
    let kept_labels: Vec<usize> = views
        .iter()
        .zip(&kept)
        .filter(|(_, &keep)| keep)
        .map(|(av, _)| av.origin().predicted_label())
        .collect();
    let prior = estimate_class_distribution(&kept_labels, file.k)?;
    let balance = BalanceConfig {
        sigma: file.sigma,
        enabled: true,
    };
    let candidates = score_candidates(views, file.beta, &prior, &balance);
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for (c, keep) in candidates.iter().zip(&kept) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.detection().image_id(),
            c.detection().predicted_label(),
            c.detection().confidence(),
            c.uncertainty,
            c.box_consistency(),
            c.acquisition,
            *keep as u8
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "boxal",
    version,
    about = "Box-level active learning for object detection, with a deterministic desk-scale testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as COCO-style JSON.
    Gen {
        /// Experiment config JSON (its `dataset` section is used).
        #[arg(long)]
        config: PathBuf,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Override the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full experiment: every seed, every budgeted cycle.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the acquisition strategy.
        #[arg(long)]
        strategy: Option<String>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resume one cycle from a checkpoint, print its summary row, and
    /// update the checkpoint in place.
    Cycle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a detections file: per-box uncertainty and acquisition CSV.
    Score {
        /// Detections JSON (see the score schema in the README).
        #[arg(long)]
        input: PathBuf,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate summary CSVs into per-strategy medians and IQRs.
    Report {
        /// Summary CSV files to aggregate.
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out, seed } => {
            let cfg = load_config(&config)?;
            let mut dataset_cfg = cfg.dataset;
            if let Some(seed) = seed {
                dataset_cfg.seed = seed;
            }
            let dataset = generate_dataset(&dataset_cfg)?;
            let json = serde_json::to_string(&export_coco(&dataset)).expect("dataset serializes");
            fs::write(&out, json).map_err(|e| Error::io(out.display().to_string(), e))?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Run {
            config,
            seed,
            strategy,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
            }
            if let Some(strategy) = strategy {
                cfg.strategy = Strategy::from_str(&strategy)?;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            cfg.validate()?;
            run_experiment(&cfg)?;
            eprintln!("wrote reports to {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Cycle { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let state = load_checkpoint(&checkpoint, &cfg)?;
            if state.cycle >= cfg.budgets.len() {
                return Err(Error::InvalidInput(format!(
                    "checkpoint has completed all {} budgeted cycles",
                    cfg.budgets.len()
                )));
            }
            let dataset = experiment_dataset(&cfg, state.seed)?;
            let (next, report) =
                run_cycle(&dataset, &state, &cfg.loop_config(), cfg.budgets[state.cycle])?;
            save_checkpoint(&next, &cfg, &checkpoint)?;
            print!("{}", format_summary_csv(&[report]));
            Ok(())
        }
        Command::Score { input, out } => {
            let text = fs::read_to_string(&input)
                .map_err(|e| Error::io(input.display().to_string(), e))?;
            let file: ScoreFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: input.display().to_string(),
                message: e.to_string(),
            })?;
            let csv = score_detections(&file)?;
            write_or_print(&csv, out.as_deref())
        }
        Command::Report { inputs, out } => {
            let mut pairs = Vec::new();
            for path in &inputs {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                pairs.push((path.display().to_string(), text));
            }
            let csv = aggregate_summaries(&pairs)?;
            write_or_print(&csv, out.as_deref())
        }
    }
}

/// Entry point behind the binary: parses `argv` (including the program
/// name), runs the command, and maps the outcome to an exit code —
/// 0 success, 1 usage error, 2 data/config error.
pub fn cli(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::imbalance_factor;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig {
                classes: 4,
                num_images: 50,
                objects_per_image: 3.0,
                imbalance_factor: 4.0,
                image_size: (320.0, 240.0),
                eval_images: 20,
                seed: 5,
                ..DatasetConfig::default()
            },
            initial_images: 8,
            budgets: vec![15, 20],
            seeds: vec![1, 2],
            output_dir: dir.to_path_buf(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn empty_json_config_is_the_default_config() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_validation_rejects_empty_schedules() {
        let mut cfg = ExperimentConfig::default();
        cfg.budgets.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.initial_images = cfg.dataset.num_images + 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = ExperimentConfig::default();
        let h1 = cfg.config_hash();
        let h2 = cfg.config_hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
        let mut other = cfg.clone();
        other.beta = 1.4;
        assert_ne!(h1, other.config_hash());
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let dataset = experiment_dataset(&cfg, 1).unwrap();
        let state = ALState::initial(&dataset, cfg.initial_images, 1).unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&state, &cfg, &path).unwrap();
        let back = load_checkpoint(&path, &cfg).unwrap();
        assert_eq!(state, back);

        // A different config is rejected by hash.
        let mut other = cfg.clone();
        other.beta = 1.7;
        assert!(matches!(
            load_checkpoint(&path, &other),
            Err(Error::ConfigHashMismatch { .. })
        ));

        // A tampered version is rejected outright.
        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replace("\"version\": 1", "\"version\": 99");
        fs::write(&path, tampered).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &cfg),
            Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                found: 99
            })
        ));
    }

    #[test]
    fn coco_boxes_convert_to_corner_form() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        fs::write(
            &path,
            r#"{
                "images": [{"id": 1, "width": 100, "height": 100, "file_name": "a.png"}],
                "annotations": [
                    {"id": 1, "image_id": 1, "category_id": 7, "bbox": [10, 10, 20, 30]},
                    {"id": 2, "image_id": 1, "category_id": 3, "bbox": [5, 5, 0, 10]}
                ],
                "categories": [
                    {"id": 3, "name": "a"}, {"id": 7, "name": "b"}, {"id": 9, "name": "c"}
                ]
            }"#,
        )
        .unwrap();
        let loaded = load_coco(&path).unwrap();
        assert_eq!(loaded.k, 3);
        assert_eq!(loaded.skipped_degenerate, 1);
        let obj = &loaded.images[0].objects[0];
        assert_eq!(
            obj.bbox,
            BBox::new(10.0, 10.0, 30.0, 40.0).unwrap(),
            "xywh [10,10,20,30] is corners (10,10,30,40)"
        );
        // Categories {3, 7, 9} remap densely in array order.
        assert_eq!(obj.label, 1);
    }

    #[test]
    fn coco_files_with_no_annotations_are_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        fs::write(
            &path,
            r#"{"images": [{"id": 4, "width": 10, "height": 10}],
                "annotations": [], "categories": [{"id": 1, "name": "x"}, {"id": 2, "name": "y"}]}"#,
        )
        .unwrap();
        let loaded = load_coco(&path).unwrap();
        assert_eq!(loaded.images.len(), 1);
        assert!(loaded.images[0].objects.is_empty());
    }

    #[test]
    fn malformed_coco_json_is_a_parse_error_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\n  \"images\": [,]\n}").unwrap();
        match load_coco(&path) {
            Err(Error::Parse { path: p, message }) => {
                assert!(p.ends_with("bad.json"));
                assert!(message.contains("line 2"), "no location in: {message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn coco_rejects_dangling_references() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        fs::write(
            &path,
            r#"{"images": [{"id": 1, "width": 10, "height": 10}],
                "annotations": [{"id": 1, "image_id": 2, "category_id": 1, "bbox": [1,1,2,2]}],
                "categories": [{"id": 1, "name": "x"}]}"#,
        )
        .unwrap();
        assert!(matches!(load_coco(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn exported_datasets_reload_with_identical_objects() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let dataset = experiment_dataset(&cfg, 3).unwrap();
        let path = dir.path().join("export.json");
        let coco = export_coco(&dataset);
        fs::write(&path, serde_json::to_string(&coco).unwrap()).unwrap();
        let loaded = load_coco(&path).unwrap();
        assert_eq!(loaded.k, dataset.k);
        assert_eq!(loaded.skipped_degenerate, 0);
        let exported_count: usize = dataset.images.iter().map(|i| i.objects.len()).sum();
        let loaded_count: usize = loaded.images.iter().map(|i| i.objects.len()).sum();
        assert_eq!(exported_count, loaded_count);
        let exported_area: f64 = dataset
            .images
            .iter()
            .flat_map(|i| &i.objects)
            .map(|o| o.bbox.area())
            .sum();
        let loaded_area: f64 = loaded
            .images
            .iter()
            .flat_map(|i| &i.objects)
            .map(|o| o.bbox.area())
            .sum();
        assert!(
            (exported_area - loaded_area).abs() <= 1e-9 * exported_area,
            "area drifted: {exported_area} vs {loaded_area}"
        );
    }

    #[test]
    fn summary_csv_has_the_stable_header_and_lf_endings() {
        let csv = format_summary_csv(&[]);
        assert_eq!(
            csv,
            "cycle,strategy,seed,budget_spent,imbalance_selected,imbalance_pseudo,\
             imbalance_labelled,detection_f1,zero_classes\n"
        );
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn experiment_outputs_are_byte_identical_across_reruns() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir1.path());
        cfg.seeds = vec![1];
        let r1 = run_experiment(&cfg).unwrap();
        cfg.output_dir = dir2.path().to_path_buf();
        let r2 = run_experiment(&cfg).unwrap();
        // NaN fields (undefined ratios) defeat struct equality; the
        // rendered form is the byte-level contract anyway.
        assert_eq!(format_summary_csv(&r1), format_summary_csv(&r2));
        assert_eq!(format_per_class_csv(&r1), format_per_class_csv(&r2));
        for name in ["summary.csv", "per_class.csv"] {
            let a = fs::read(dir1.path().join(name)).unwrap();
            let b = fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs across reruns");
        }
    }

    #[test]
    fn resuming_from_a_checkpoint_reproduces_the_straight_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let seed = 2;
        let (full_reports, full_state) = run_seed(&cfg, seed).unwrap();

        // Run the first cycle, persist, reload, finish.
        let dataset = experiment_dataset(&cfg, seed).unwrap();
        let state = ALState::initial(&dataset, cfg.initial_images, seed).unwrap();
        let (first, mid) = {
            let lc = cfg.loop_config();
            run_cycle(&dataset, &state, &lc, cfg.budgets[0])
                .map(|(s, r)| (r, s))
                .unwrap()
        };
        let path = dir.path().join("mid.json");
        save_checkpoint(&mid, &cfg, &path).unwrap();
        let resumed = load_checkpoint(&path, &cfg).unwrap();
        let (rest, final_state) = run_remaining(&cfg, &dataset, resumed).unwrap();

        let mut stitched = vec![first];
        stitched.extend(rest);
        assert_eq!(final_state, full_state);
        assert_eq!(
            format_summary_csv(&stitched),
            format_summary_csv(&full_reports)
        );
        assert_eq!(
            format_per_class_csv(&stitched),
            format_per_class_csv(&full_reports)
        );
    }

    #[test]
    fn aggregation_reports_medians_and_iqrs_per_strategy() {
        let text = format!(
            "{SUMMARY_HEADER}\n\
             1,balanced,1,10,2,3,4,0.2,0\n\
             1,balanced,2,10,4,5,6,0.4,0\n\
             1,balanced,3,10,6,7,8,0.9,0\n\
             1,random,1,10,1,1,1,0.5,0\n"
        );
        let out = aggregate_summaries(&[("t.csv".into(), text)]).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], AGGREGATE_HEADER);
        // Sorted by (strategy, cycle): balanced first.
        assert_eq!(lines[1], "balanced,1,3,0.4,0.35,4,2,5,2,6,2");
        assert_eq!(lines[2], "random,1,1,0.5,0,1,0,1,0,1,0");
    }

    #[test]
    fn aggregation_skips_nan_entries() {
        let text = format!(
            "{SUMMARY_HEADER}\n\
             1,random,1,10,NaN,2,2,0.5,0\n\
             1,random,2,10,4,2,2,0.7,0\n"
        );
        let out = aggregate_summaries(&[("t.csv".into(), text)]).unwrap();
        let line = out.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[5], "4", "median over the single finite value");
    }

    #[test]
    fn aggregation_rejects_foreign_headers() {
        let err = aggregate_summaries(&[("x.csv".into(), "a,b,c\n1,2,3\n".into())]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn score_files_produce_one_row_per_detection() {
        let file: ScoreFile = serde_json::from_str(
            r#"{
                "k": 3,
                "labelled": [{"bbox": [0, 0, 10, 10], "label": 0}],
                "detections": [
                    {"image_id": 1, "bbox": [0, 0, 10, 10], "probs": [0.8, 0.1, 0.1],
                     "views": [{"bbox": [0, 0, 10, 10], "probs": [0.8, 0.1, 0.1]}, null]},
                    {"image_id": 1, "bbox": [20, 20, 30, 30], "probs": [0.2, 0.5, 0.3]}
                ]
            }"#,
        )
        .unwrap();
        let csv = score_detections(&file).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3, "header plus one row per detection");
        assert_eq!(lines[0], SCORE_HEADER);
        // The first detection overlaps a labelled box, so it is not kept.
        assert!(lines[1].ends_with(",0"));
        assert!(lines[2].ends_with(",1"));
        // Defaults applied.
        assert_eq!(file.beta, 1.3);
        assert_eq!(file.sigma, 1.0);
    }

    #[test]
    fn cli_maps_outcomes_to_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let arg = |s: &str| s.to_string();

        // Usage errors.
        assert_eq!(cli(&[arg("boxal")]), 1, "missing subcommand");
        assert_eq!(cli(&[arg("boxal"), arg("run")]), 1, "missing --config");
        assert_eq!(cli(&[arg("boxal"), arg("--help")]), 0);

        // Data errors: missing config file.
        let missing = dir.path().join("nope.json");
        assert_eq!(
            cli(&[
                arg("boxal"),
                arg("run"),
                arg("--config"),
                missing.display().to_string(),
            ]),
            2
        );

        // Success: a tiny run end to end.
        let cfg = tiny_config(&dir.path().join("out"));
        let cfg_path = dir.path().join("cfg.json");
        fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(
            cli(&[
                arg("boxal"),
                arg("run"),
                arg("--config"),
                cfg_path.display().to_string(),
                arg("--seed"),
                arg("1"),
            ]),
            0
        );
        assert!(dir.path().join("out/summary.csv").exists());

        // Unknown strategy identifiers are config errors, not panics.
        assert_eq!(
            cli(&[
                arg("boxal"),
                arg("run"),
                arg("--config"),
                cfg_path.display().to_string(),
                arg("--strategy"),
                arg("mystery"),
            ]),
            2
        );
    }

    #[test]
    fn fully_labelled_runs_report_the_dataset_imbalance() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.strategy = Strategy::Random;
        cfg.budgets = vec![10_000];
        cfg.seeds = vec![4];
        let (reports, state) = run_seed(&cfg, 4).unwrap();
        assert_eq!(state.pool_boxes(), 0);
        let dataset = experiment_dataset(&cfg, 4).unwrap();
        let gt = crate::simulator::class_histogram(&dataset.images, dataset.k);
        assert_eq!(
            reports[0].imbalance_labelled,
            imbalance_factor(&gt).unwrap()
        );
    }
}
