//! The flat run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use sapl_core::config::KvConfig;
use sapl_core::dataset::{body_zones, Rect, ToySpec};
use sapl_core::error::{Error, Result};
use sapl_core::model::{LrSchedule, ModelConfig, StageConfig, TrainOptions};

const KNOWN_KEYS: &[&str] = &[
    // model
    "input_channels",
    "input_height",
    "input_width",
    "stage_channels",
    "stage_kernel",
    "stage_stride",
    "stage_pad",
    "stage_downsample",
    "num_classes",
    "parts",
    "reduced_dim",
    "lambda",
    "sa_on_ds",
    "sa_on_backbone",
    // toy generator
    "num_identities",
    "images_per_identity_per_camera",
    "num_cameras",
    "noise_std",
    "occlusion_top",
    "occlusion_left",
    "occlusion_height",
    "occlusion_width",
    // training
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "augment",
    "lr_drop_epoch",
    // paths
    "data_dir",
    "checkpoint",
    "out_dir",
    // shared
    "seed",
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input_shape: [usize; 3],
    pub stage_channels: Vec<usize>,
    pub stage_kernel: Vec<usize>,
    pub stage_stride: Vec<usize>,
    pub stage_pad: Vec<usize>,
    pub stage_downsample: Vec<bool>,
    /// 0 means "derive from the training split".
    pub num_classes: usize,
    pub parts: usize,
    pub reduced_dim: usize,
    pub lambda: f64,
    pub sa_on_ds: bool,
    pub sa_on_backbone: bool,

    pub num_identities: usize,
    pub images_per_identity_per_camera: usize,
    pub num_cameras: usize,
    pub noise_std: f64,
    pub occlusion: Option<Rect>,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub augment: bool,
    pub lr_drop_epoch: Option<usize>,

    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
}

/// Reads one value or a comma list broadcast against the stage count.
fn per_stage_usize(
    cfg: &KvConfig,
    key: &str,
    default: usize,
    stages: usize,
) -> Result<Vec<usize>> {
    let values = cfg.get_usize_list(key, &[default])?;
    broadcast(cfg, key, values, stages)
}

fn per_stage_bool(cfg: &KvConfig, key: &str, default: bool, stages: usize) -> Result<Vec<bool>> {
    let values = match cfg.get(key) {
        None => vec![default],
        Some(raw) => raw
            .split(',')
            .map(|tok| match tok.trim() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(Error::parse(
                    cfg.path(),
                    format!("key '{key}': expected true or false, got '{other}'"),
                )),
            })
            .collect::<Result<Vec<bool>>>()?,
    };
    broadcast(cfg, key, values, stages)
}

fn broadcast<T: Clone>(cfg: &KvConfig, key: &str, values: Vec<T>, stages: usize) -> Result<Vec<T>> {
    if values.len() == 1 {
        Ok(vec![values[0].clone(); stages])
    } else if values.len() == stages {
        Ok(values)
    } else {
        Err(Error::parse(
            cfg.path(),
            format!(
                "key '{key}': expected 1 or {stages} values, got {}",
                values.len()
            ),
        ))
    }
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
        let kv = KvConfig::parse_file(path)?;
        kv.reject_unknown_keys(KNOWN_KEYS)?;

        let input_shape = [
            kv.get_usize("input_channels", 3)?,
            kv.get_usize("input_height", 64)?,
            kv.get_usize("input_width", 32)?,
        ];
        let stage_channels = kv.get_usize_list("stage_channels", &[16, 32, 64, 128])?;
        let n = stage_channels.len();
        if n == 0 {
            return Err(Error::parse(kv.path(), "stage_channels must not be empty"));
        }

        let occlusion = match (
            kv.get("occlusion_top"),
            kv.get("occlusion_left"),
            kv.get("occlusion_height"),
            kv.get("occlusion_width"),
        ) {
            (None, None, None, None) => None,
            _ => Some(Rect {
                top: kv.get_usize("occlusion_top", 0)?,
                left: kv.get_usize("occlusion_left", 0)?,
                height: kv.get_usize("occlusion_height", 0)?,
                width: kv.get_usize("occlusion_width", 0)?,
            }),
        };

        let epochs = kv.get_usize("epochs", 20)?;
        Ok(RunConfig {
            stage_kernel: per_stage_usize(&kv, "stage_kernel", 3, n)?,
            stage_stride: per_stage_usize(&kv, "stage_stride", 1, n)?,
            stage_pad: per_stage_usize(&kv, "stage_pad", 1, n)?,
            stage_downsample: per_stage_bool(&kv, "stage_downsample", true, n)?,
            stage_channels,
            input_shape,
            num_classes: kv.get_usize("num_classes", 0)?,
            parts: kv.get_usize("parts", 2)?,
            reduced_dim: kv.get_usize("reduced_dim", 32)?,
            lambda: kv.get_f64("lambda", 0.2)?,
            sa_on_ds: kv.get_bool("sa_on_ds", true)?,
            sa_on_backbone: kv.get_bool("sa_on_backbone", false)?,
            num_identities: kv.get_usize("num_identities", 24)?,
            images_per_identity_per_camera: kv.get_usize("images_per_identity_per_camera", 4)?,
            num_cameras: kv.get_usize("num_cameras", 2)?,
            noise_std: kv.get_f64("noise_std", 0.05)?,
            occlusion,
            epochs,
            batch_size: kv.get_usize("batch_size", 8)?,
            lr: kv.get_f64("lr", 0.1)?,
            momentum: kv.get_f64("momentum", 0.9)?,
            augment: kv.get_bool("augment", true)?,
            lr_drop_epoch: kv.get_opt_usize("lr_drop_epoch")?,
            data_dir: PathBuf::from(kv.get_string("data_dir", "data")),
            checkpoint: PathBuf::from(kv.get_string("checkpoint", "model.ckpt")),
            out_dir: PathBuf::from(kv.get_string("out_dir", "out")),
            seed: seed_override.unwrap_or(kv.get_u64("seed", 0)?),
        })
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let stages = self
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &ch)| StageConfig {
                out_channels: ch,
                kernel: self.stage_kernel[i],
                stride: self.stage_stride[i],
                pad: self.stage_pad[i],
                downsample: self.stage_downsample[i],
            })
            .collect();
        ModelConfig {
            input_shape: self.input_shape,
            stages,
            num_classes,
            parts: self.parts,
            reduced_dim: self.reduced_dim,
            lambda: self.lambda,
            sa_on_ds: self.sa_on_ds,
            sa_on_backbone: self.sa_on_backbone,
            seed: self.seed,
        }
    }

    pub fn toy_spec(&self) -> ToySpec {
        let [_, h, w] = self.input_shape;
        ToySpec {
            num_identities: self.num_identities,
            images_per_identity_per_camera: self.images_per_identity_per_camera,
            num_cameras: self.num_cameras,
            height: h,
            width: w,
            noise_std: self.noise_std,
            occlusion: self.occlusion.unwrap_or_else(|| body_zones(h, w)[1]),
            seed: self.seed,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        let schedule = match self.lr_drop_epoch {
            Some(drop_epoch) => LrSchedule {
                base_lr: self.lr,
                drop_factor: 0.1,
                drop_epoch,
            },
            None => LrSchedule::two_phase(self.lr, self.epochs),
        };
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule,
            momentum: self.momentum,
            augment: self.augment,
        }
    }
}
