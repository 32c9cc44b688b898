//! Run configuration: stage schedule, loss weights, optimizer settings,
//! and the flat key-value config file that drives the CLI.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::angle::SsaConfig;
use crate::mil::BagConfig;
use crate::netcore::ModelConfig;
use crate::ssc::{GroupingMode, SscConfig};
use crate::ssff::FusionMode;
use crate::synthdata::SceneConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config key '{0}': {1}")]
    BadValue(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Epoch boundaries of the progressive view-switching schedule.
#[derive(Debug, Clone, Copy)]
pub struct StageSchedule {
    pub burn_in1: usize,
    pub burn_in2: usize,
    pub total_epochs: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { burn_in1: 6, burn_in2: 8, total_epochs: 12 }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.burn_in1 > self.burn_in2 || self.burn_in2 > self.total_epochs {
            return Err(ConfigError::BadValue(
                "schedule".into(),
                format!(
                    "need burn_in1 <= burn_in2 <= total_epochs, got {} / {} / {}",
                    self.burn_in1, self.burn_in2, self.total_epochs
                ),
            ));
        }
        Ok(())
    }
}

/// Which augmented view a stage trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveView {
    Resized,
    RotFlip,
}

/// Resolved stage state for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageInfo {
    pub stage: u8,
    pub alpha: f64,
    pub beta: f64,
    pub view: ActiveView,
    /// Dense-to-sparse matched angles feed the proposal bags.
    pub ds_matching: bool,
}

/// Stage rule: stage 1 before `burn_in1` (resized view, alpha 0, beta 1);
/// stage 2 from `burn_in1` (rotate/flip view, alpha 1, beta 0); stage 3
/// from `burn_in2` additionally turns on DS matching.
pub fn stage_of(epoch: usize, sched: &StageSchedule) -> Result<StageInfo, ConfigError> {
    if epoch >= sched.total_epochs {
        return Err(ConfigError::BadValue(
            "epoch".into(),
            format!("{epoch} out of range (total {})", sched.total_epochs),
        ));
    }
    Ok(if epoch < sched.burn_in1 {
        StageInfo { stage: 1, alpha: 0.0, beta: 1.0, view: ActiveView::Resized, ds_matching: false }
    } else if epoch < sched.burn_in2 {
        StageInfo { stage: 2, alpha: 1.0, beta: 0.0, view: ActiveView::RotFlip, ds_matching: false }
    } else {
        StageInfo { stage: 3, alpha: 1.0, beta: 0.0, view: ActiveView::RotFlip, ds_matching: true }
    })
}

/// Weights of the loss composition.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    pub batch_size: usize,
    /// Global L2 gradient-norm clip applied before each optimizer step
    /// (0 disables). Keeps the angle-consistency term from destabilizing
    /// late-stage training.
    pub grad_clip_norm: f64,
    /// Learning-rate multiplier for the dense angle head. The MIL heads
    /// need a conservative base rate, while the consistency signal that
    /// trains the angle branch is weak per step; a higher branch rate
    /// lets both converge on the same schedule.
    pub angle_lr_mult: f64,
    pub seed: u64,
    pub train_images: usize,
    pub holdout_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.0,
            weight_decay: 1e-4,
            warmup_iters: 500,
            warmup_factor: 0.001,
            batch_size: 2,
            grad_clip_norm: 35.0,
            angle_lr_mult: 10.0,
            seed: 0,
            train_images: 500,
            holdout_images: 50,
        }
    }
}

/// Everything a run needs, assembled from one flat config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub bag: BagConfig,
    pub ssa: SsaConfig,
    pub ssc: SscConfig,
    pub schedule: StageSchedule,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub fusion: FusionMode,
    /// Feed the e2e detection loss during training (e2e mode).
    pub e2e: bool,
    /// Apply instance-aware weights (vs. uniform 1.0) in the e2e loss.
    pub iaw: bool,
    /// Enable the SSC term in stage 1.
    pub use_ssc: bool,
    /// Enable DS matching in stage 3.
    pub use_ds: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            bag: BagConfig::default(),
            ssa: SsaConfig::default(),
            ssc: SscConfig::default(),
            schedule: StageSchedule::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            fusion: FusionMode::Gated,
            e2e: false,
            iaw: true,
            use_ssc: true,
            use_ds: true,
        }
    }
}

/// Parse a flat `key = value` file (`#` comments, blank lines ignored).
pub fn parse_kv(text: &str) -> Result<HashMap<String, String>, ConfigError> {
    let mut map = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Parse {
            line: idx + 1,
            msg: "expected 'key = value'".into(),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn get<T: std::str::FromStr>(
    map: &HashMap<String, String>,
    key: &str,
    out: &mut T,
) -> Result<(), ConfigError> {
    if let Some(v) = map.get(key) {
        *out = v
            .parse()
            .map_err(|_| ConfigError::BadValue(key.into(), format!("cannot parse '{v}'")))?;
    }
    Ok(())
}

fn get_bool(
    map: &HashMap<String, String>,
    key: &str,
    out: &mut bool,
) -> Result<(), ConfigError> {
    if let Some(v) = map.get(key) {
        *out = match v.as_str() {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            other => {
                return Err(ConfigError::BadValue(key.into(), format!("not a bool: '{other}'")))
            }
        };
    }
    Ok(())
}

impl RunConfig {
    /// Apply a key-value map over the defaults.
    pub fn from_map(map: &HashMap<String, String>) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        get(map, "image_size", &mut c.scene.image_size)?;
        get(map, "objects_min", &mut c.scene.objects_min)?;
        get(map, "objects_max", &mut c.scene.objects_max)?;
        get(map, "size_min", &mut c.scene.size_range.0)?;
        get(map, "size_max", &mut c.scene.size_range.1)?;
        get(map, "class_count", &mut c.scene.class_count)?;
        get(map, "data_seed", &mut c.scene.seed)?;
        get(map, "noise_sigma", &mut c.scene.noise_sigma)?;
        get(map, "point_range_frac", &mut c.scene.point_range_frac)?;
        get(map, "channels", &mut c.model.channels)?;
        get(map, "mil_hidden", &mut c.model.mil_hidden)?;
        c.model.classes = c.scene.class_count;
        get(map, "central_radius", &mut c.ssa.central_radius)?;
        get(map, "rotate_prob", &mut c.ssa.rotate_prob)?;
        get(map, "omega_ins", &mut c.ssc.omega_ins)?;
        get(map, "omega_cls", &mut c.ssc.omega_cls)?;
        if let Some(v) = map.get("ssc_grouping") {
            c.ssc.grouping = match v.as_str() {
                "scale" => GroupingMode::Scale,
                "ratio" => GroupingMode::Ratio,
                "proposal" => GroupingMode::Proposal,
                other => {
                    return Err(ConfigError::BadValue(
                        "ssc_grouping".into(),
                        format!("unknown mode '{other}'"),
                    ))
                }
            };
        }
        get(map, "burn_in1", &mut c.schedule.burn_in1)?;
        get(map, "burn_in2", &mut c.schedule.burn_in2)?;
        get(map, "epochs", &mut c.schedule.total_epochs)?;
        get(map, "lr", &mut c.train.lr)?;
        get(map, "momentum", &mut c.train.momentum)?;
        get(map, "weight_decay", &mut c.train.weight_decay)?;
        get(map, "warmup_iters", &mut c.train.warmup_iters)?;
        get(map, "warmup_factor", &mut c.train.warmup_factor)?;
        get(map, "grad_clip_norm", &mut c.train.grad_clip_norm)?;
        get(map, "angle_lr_mult", &mut c.train.angle_lr_mult)?;
        get(map, "batch_size", &mut c.train.batch_size)?;
        get(map, "seed", &mut c.train.seed)?;
        get(map, "train_images", &mut c.train.train_images)?;
        get(map, "holdout_images", &mut c.train.holdout_images)?;
        get(map, "gamma", &mut c.weights.gamma)?;
        if let Some(v) = map.get("fusion") {
            c.fusion = match v.as_str() {
                "gated" => FusionMode::Gated,
                "per-level" | "per_level" => FusionMode::PerLevel,
                other => {
                    return Err(ConfigError::BadValue(
                        "fusion".into(),
                        format!("unknown mode '{other}'"),
                    ))
                }
            };
        }
        get_bool(map, "e2e", &mut c.e2e)?;
        get_bool(map, "iaw", &mut c.iaw)?;
        get_bool(map, "use_ssc", &mut c.use_ssc)?;
        get_bool(map, "use_ds", &mut c.use_ds)?;
        c.schedule.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        Self::from_map(&parse_kv(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_table() {
        let s = StageSchedule::default();
        for e in 0..12 {
            let info = stage_of(e, &s).unwrap();
            if e < 6 {
                assert_eq!((info.stage, info.alpha, info.beta), (1, 0.0, 1.0));
                assert_eq!(info.view, ActiveView::Resized);
                assert!(!info.ds_matching);
            } else if e < 8 {
                assert_eq!((info.stage, info.alpha, info.beta), (2, 1.0, 0.0));
                assert_eq!(info.view, ActiveView::RotFlip);
                assert!(!info.ds_matching);
            } else {
                assert_eq!((info.stage, info.alpha, info.beta), (3, 1.0, 0.0));
                assert!(info.ds_matching);
            }
        }
        assert!(stage_of(12, &s).is_err());
    }

    #[test]
    fn config_parse_and_defaults() {
        let text = "\n# comment\nimage_size = 128\nlr=0.01\ne2e = true\nfusion = per-level\n";
        let cfg = RunConfig::from_map(&parse_kv(text).unwrap()).unwrap();
        assert_eq!(cfg.scene.image_size, 128);
        assert_eq!(cfg.train.lr, 0.01);
        assert!(cfg.e2e);
        assert_eq!(cfg.fusion, FusionMode::PerLevel);
        // Untouched fields keep their defaults.
        assert_eq!(cfg.train.momentum, 0.0);
        assert_eq!(cfg.schedule.burn_in1, 6);
        // Malformed lines carry positions.
        let err = parse_kv("a = 1\nnot a kv line\n").unwrap_err();
        assert!(format!("{err}").contains("line 2"));
        // Bad schedule rejected.
        let bad = RunConfig::from_map(&parse_kv("burn_in1 = 9\nburn_in2 = 3").unwrap());
        assert!(bad.is_err());
    }
}
