//! Experiment configuration: a TOML file fully describing one run, plus
//! sweep expansion over the tuning grids.
//!
//! Parsing is strict (unknown keys rejected with the parser's line/column
//! diagnostics) and validation names the offending key and value. A
//! validated config can be echoed back to TOML; re-parsing the echo gives
//! an identical config, and runs store that snapshot next to their outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, CropBox, NormMode, Task};
use crate::error::{Error, Result};
use crate::losses::{combined_grid, focal_grid, wce_grid, LossKind};
use crate::models::Arch;
use crate::optim::{OptimKind, PlateauSchedule, LR_GRID};
use crate::sampler::PatchSpec;
use crate::stats::SEQUENCE_ORDER;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "one")]
    pub width_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimKind,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub reduce_patience: usize,
    pub stop_patience: usize,
    pub min_delta: f64,
    pub factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { reduce_patience: 5, stop_patience: 10, min_delta: 1e-4, factor: 5.0 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> PlateauSchedule {
        PlateauSchedule::new(self.reduce_patience, self.stop_patience, self.min_delta, self.factor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub patch: PatchSpec,
    /// patches per step for the patch network
    pub batch_size: usize,
    /// whole volumes per step for the volumetric network
    pub volume_batch: usize,
    pub fg_fraction: f64,
    pub max_subjects: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch: PatchSpec::default(),
            batch_size: 60,
            volume_batch: 2,
            fg_fraction: 0.5,
            max_subjects: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub folds: usize,
    pub holdout_fraction: f64,
    /// Kept apart from [`TrainConfig::seed`] so robustness reruns can vary
    /// initialization and sampling while every run sees the same partition.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { folds: 5, holdout_fraction: 0.2, seed: 7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub seed: u64,
    /// upper bound on optimizer steps per epoch; the nominal count is
    /// ceil(brain voxels / patches covered per step)
    pub batches_per_epoch_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { max_epochs: 30, seed: 17, batches_per_epoch_cap: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub source_checkpoint: PathBuf,
}

fn default_loss() -> LossKind {
    LossKind::Combined { alpha: 0.5 }
}

fn default_sequences() -> Vec<String> {
    SEQUENCE_ORDER.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub manifest: PathBuf,
    /// Fixed brain bounding box applied before normalization; omitted for
    /// corpora already tight around the head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropBox>,
    pub model: ModelConfig,
    #[serde(default = "default_sequences")]
    pub sequences: Vec<String>,
    /// off by default: tumor-core runs are limited to t1w/t1ce subsets
    #[serde(default)]
    pub allow_any_sequences: bool,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// filled per architecture when absent (adam@1e-3 for unet,
    /// sgd_nesterov@1e-3 for deepmedic)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub normalization: NormMode,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferConfig>,
}

impl ExperimentConfig {
    /// A minimal config around one manifest; everything else at defaults.
    pub fn new(task: Task, arch: Arch, manifest: impl Into<PathBuf>) -> Self {
        let mut cfg = ExperimentConfig {
            task,
            manifest: manifest.into(),
            crop: None,
            model: ModelConfig { arch, width_scale: 1.0 },
            sequences: default_sequences(),
            allow_any_sequences: false,
            loss: default_loss(),
            optimizer: None,
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            normalization: NormMode::default(),
            augment: AugmentConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            transfer: None,
        };
        if task == Task::TumorCore {
            cfg.sequences = vec!["t1w".into(), "t1ce".into()];
        }
        cfg.validate().expect("default config validates");
        cfg
    }

    pub fn resolved_optimizer(&self) -> OptimizerConfig {
        self.optimizer.unwrap_or(OptimizerConfig {
            kind: match self.model.arch {
                Arch::Unet => OptimKind::Adam,
                Arch::Deepmedic => OptimKind::SgdNesterov,
            },
            lr: 1e-3,
        })
    }

    /// Check ranges and cross-field rules, and pin the optimizer choice so
    /// the echoed snapshot is complete.
    pub fn validate(&mut self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::invalid("config", format!("{key}: {msg}")));

        if self.sequences.is_empty() {
            return fail("sequences", "empty".into());
        }
        for s in &self.sequences {
            if !SEQUENCE_ORDER.contains(&s.as_str()) {
                return fail("sequences", format!("unknown token {s:?} (t1w, t1ce, t2w, flair)"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sequences {
            if !seen.insert(s.clone()) {
                return fail("sequences", format!("{s:?} listed twice"));
            }
        }
        self.sequences
            .sort_by_key(|s| SEQUENCE_ORDER.iter().position(|o| o == s).unwrap());
        if self.task == Task::TumorCore && !self.allow_any_sequences {
            for s in &self.sequences {
                if s != "t1w" && s != "t1ce" {
                    return fail(
                        "sequences",
                        format!("{s:?} not used for tumor_core (set allow_any_sequences to override)"),
                    );
                }
            }
        }

        let w = self.model.width_scale;
        if !(w.is_finite() && w > 0.0) {
            return fail("model.width_scale", format!("{w} not a positive number"));
        }

        match self.loss {
            LossKind::CrossEntropy => {}
            LossKind::WeightedCrossEntropy { omega } => {
                if !(omega > 0.0 && omega <= 1.0) {
                    return fail("loss.omega", format!("{omega} outside (0, 1]"));
                }
            }
            LossKind::Focal { omega, gamma } => {
                if !(omega > 0.0 && omega <= 1.0) {
                    return fail("loss.omega", format!("{omega} outside (0, 1]"));
                }
                if !(gamma.is_finite() && gamma >= 0.0) {
                    return fail("loss.gamma", format!("{gamma} negative"));
                }
            }
            LossKind::SoftDice { .. } => {}
            LossKind::Combined { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return fail("loss.alpha", format!("{alpha} outside [0, 1]"));
                }
            }
        }

        let opt = self.resolved_optimizer();
        if !(opt.lr.is_finite() && opt.lr > 0.0) {
            return fail("optimizer.lr", format!("{} not a positive number", opt.lr));
        }
        self.optimizer = Some(opt);

        let sc = &self.schedule;
        if sc.reduce_patience == 0 || sc.stop_patience == 0 {
            return fail("schedule", "patience values must be at least 1".into());
        }
        if !(sc.min_delta.is_finite() && sc.min_delta >= 0.0) {
            return fail("schedule.min_delta", format!("{} negative", sc.min_delta));
        }
        if !(sc.factor.is_finite() && sc.factor > 1.0) {
            return fail("schedule.factor", format!("{} must exceed 1", sc.factor));
        }

        self.sampler.patch.validate()?;
        let sp = &self.sampler;
        if sp.batch_size == 0 || sp.volume_batch == 0 || sp.max_subjects == 0 {
            return fail("sampler", "batch sizes and max_subjects must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&sp.fg_fraction) {
            return fail("sampler.fg_fraction", format!("{} outside [0, 1]", sp.fg_fraction));
        }

        let aug = &self.augment;
        if !(aug.intensity_shift_std >= 0.0 && aug.intensity_scale_std >= 0.0) {
            return fail("augment", "intensity stds must not be negative".into());
        }
        if !(aug.scale_min > 0.0 && aug.scale_min <= aug.scale_max) {
            return fail(
                "augment.scale_min",
                format!("range [{}, {}] invalid", aug.scale_min, aug.scale_max),
            );
        }
        if !(aug.rotation_deg >= 0.0 && aug.translate_vox >= 0.0) {
            return fail("augment", "rotation and translation must not be negative".into());
        }

        if self.split.folds < 2 {
            return fail("split.folds", format!("{} too few; need at least 2", self.split.folds));
        }
        if !(self.split.holdout_fraction > 0.0 && self.split.holdout_fraction < 1.0) {
            return fail(
                "split.holdout_fraction",
                format!("{} outside (0, 1)", self.split.holdout_fraction),
            );
        }
        if self.train.batches_per_epoch_cap == 0 {
            return fail("train.batches_per_epoch_cap", "zero".into());
        }
        Ok(())
    }
}

/// Parse and validate a config file. Parser errors keep the toml
/// diagnostics (line and column); validation errors name the key.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Invalid { msg, .. } => Error::Config { path: path.display().to_string(), msg },
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Serialize a validated config; `parse_config_str(echo(cfg))` equals
/// `cfg`.
pub fn echo(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Width,
    Loss,
    Lr,
    Sequences,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "width" => Ok(SweepAxis::Width),
            "loss" => Ok(SweepAxis::Loss),
            "lr" => Ok(SweepAxis::Lr),
            "sequences" => Ok(SweepAxis::Sequences),
            other => Err(Error::invalid(
                "sweep",
                format!("unknown axis {other:?} (width, loss, lr, sequences)"),
            )),
        }
    }
}

/// Width multipliers used for the model-size sweep.
pub const WIDTH_GRID: [f64; 4] = [0.25, 0.5, 1.0, 1.5];

/// Expand a base config along one sweep axis. Every expanded point is
/// validated; the sequences axis yields the per-task table rows (7 for
/// whole tumor, 3 for tumor core).
pub fn expand_grid(base: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<ExperimentConfig>> {
    let mut out = Vec::new();
    match axis {
        SweepAxis::Width => {
            for &w in &WIDTH_GRID {
                let mut cfg = base.clone();
                cfg.model.width_scale = w;
                out.push(cfg);
            }
        }
        SweepAxis::Loss => {
            let mut kinds = wce_grid();
            kinds.extend(focal_grid());
            kinds.push(LossKind::SoftDice { doubled: false });
            kinds.extend(combined_grid());
            for kind in kinds {
                let mut cfg = base.clone();
                cfg.loss = kind;
                out.push(cfg);
            }
        }
        SweepAxis::Lr => {
            for &lr in &LR_GRID {
                let mut cfg = base.clone();
                let mut opt = cfg.resolved_optimizer();
                opt.lr = lr;
                cfg.optimizer = Some(opt);
                out.push(cfg);
            }
        }
        SweepAxis::Sequences => {
            for seqs in crate::stats::sequence_rows(base.task) {
                let mut cfg = base.clone();
                cfg.sequences = seqs.iter().map(|s| s.to_string()).collect();
                out.push(cfg);
            }
        }
    }
    for (i, cfg) in out.iter_mut().enumerate() {
        cfg.validate().map_err(|e| {
            Error::invalid("sweep", format!("grid point {i} ({axis:?}): {e}"))
        })?;
    }
    Ok(out)
}
