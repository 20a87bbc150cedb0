//! Subcommand implementations, kept as library functions so tests can call
//! them directly; `main` only maps results to exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sapl_core::cam::{cam_gap, cam_sa, heatmap_export, Cam, CamProvenance, HeatmapFormat};
use sapl_core::checkpoint;
use sapl_core::dataset::{export_dir, generate_toy, load_dir, read_ppm, Sample, Split};
use sapl_core::error::{Error, Result};
use sapl_core::gradcheck::{run_full_suite, GradcheckOptions, LayerReport};
use sapl_core::model::{accuracy, init_params, stage_features, train, EpochStats, Params};
use sapl_core::retrieval::{evaluate_model, RankingResult};
use sapl_core::attention::sa_forward;
use sapl_core::Tensor;

use crate::run_config::RunConfig;

#[derive(Debug)]
pub struct GenSummary {
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
    pub data_dir: PathBuf,
}

impl GenSummary {
    pub fn report(&self) -> String {
        format!(
            "data_dir = {}\ntrain = {}\nquery = {}\ngallery = {}\n",
            self.data_dir.display(),
            self.train,
            self.query,
            self.gallery
        )
    }
}

pub fn cmd_gen(run: &RunConfig) -> Result<GenSummary> {
    let spec = run.toy_spec();
    let samples = generate_toy(&spec)?;
    export_dir(&samples, &run.data_dir)?;
    let count = |split: Split| samples.iter().filter(|s| s.split == split).count();
    Ok(GenSummary {
        train: count(Split::Train),
        query: count(Split::Query),
        gallery: count(Split::Gallery),
        data_dir: run.data_dir.clone(),
    })
}

fn training_pairs(samples: &[Sample]) -> Vec<(Tensor, usize)> {
    samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| (s.image.clone(), s.identity))
        .collect()
}

fn derive_num_classes(run: &RunConfig, pairs: &[(Tensor, usize)]) -> Result<usize> {
    if run.num_classes > 0 {
        return Ok(run.num_classes);
    }
    pairs
        .iter()
        .map(|(_, id)| id + 1)
        .max()
        .ok_or_else(|| Error::Config("training split is empty".into()))
}

#[derive(Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub train_samples: usize,
    pub final_total_loss: f64,
    pub train_accuracy: f64,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

impl TrainSummary {
    pub fn report(&self) -> String {
        format!(
            "epochs = {}\ntrain_samples = {}\nfinal_total_loss = {:.6}\ntrain_accuracy = {:.4}\ncheckpoint = {}\nloss_log = {}\n",
            self.epochs,
            self.train_samples,
            self.final_total_loss,
            self.train_accuracy,
            self.checkpoint.display(),
            self.loss_log.display()
        )
    }
}

fn write_loss_log(log: &[EpochStats], path: &Path) -> Result<()> {
    let mut csv = String::from("epoch,total_loss,part_loss,ds_loss\n");
    for e in log {
        writeln!(csv, "{},{},{},{}", e.epoch, e.mean_total, e.mean_part, e.mean_ds).unwrap();
    }
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(run: &RunConfig) -> Result<TrainSummary> {
    let samples = load_dir(&run.data_dir)?;
    let pairs = training_pairs(&samples);
    let num_classes = derive_num_classes(run, &pairs)?;
    let cfg = run.model_config(num_classes);
    let opts = run.train_options();

    let (params, log) = if opts.epochs == 0 {
        (init_params(&cfg)?, Vec::new())
    } else {
        train(&cfg, &pairs, &opts)?
    };

    std::fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(&run.out_dir, e))?;
    if let Some(parent) = run.checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    checkpoint::save(&params, &run.checkpoint)?;
    let loss_log = run.out_dir.join("loss_log.csv");
    write_loss_log(&log, &loss_log)?;

    Ok(TrainSummary {
        epochs: opts.epochs,
        train_samples: pairs.len(),
        final_total_loss: log.last().map_or(f64::NAN, |e| e.mean_total),
        train_accuracy: accuracy(&params, &cfg, &pairs)?,
        checkpoint: run.checkpoint.clone(),
        loss_log,
    })
}

pub fn cmd_eval(run: &RunConfig) -> Result<RankingResult> {
    let params = checkpoint::load(&run.checkpoint)?;
    let samples = load_dir(&run.data_dir)?;
    let pairs = training_pairs(&samples);
    let num_classes = derive_num_classes(run, &pairs)?;
    let cfg = run.model_config(num_classes);
    let result = evaluate_model(&params, &cfg, &samples, 10)?;
    std::fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(&run.out_dir, e))?;
    result.write_per_query_csv(&run.out_dir.join("per_query_ap.csv"))?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamMode {
    Gap,
    Sa,
}

impl std::str::FromStr for CamMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<CamMode, String> {
        match s {
            "gap" => Ok(CamMode::Gap),
            "sa" => Ok(CamMode::Sa),
            other => Err(format!("unknown cam mode '{other}' (expected gap or sa)")),
        }
    }
}

#[derive(Debug)]
pub struct CamOutputs {
    pub csv: PathBuf,
    pub pgm: PathBuf,
    pub attention_csv: Option<PathBuf>,
}

fn weight_row(params: &Params, name: &str, row: usize) -> Result<Tensor> {
    let w = params.get(name)?;
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if row >= rows {
        return Err(Error::Config(format!(
            "class {row} out of range for {rows} classes"
        )));
    }
    Tensor::from_vec(&[cols], (0..cols).map(|c| w.at2(row, c)).collect())
}

pub fn cmd_cam(
    run: &RunConfig,
    image_path: &Path,
    stage: usize,
    class_id: usize,
    mode: CamMode,
) -> Result<CamOutputs> {
    let params = checkpoint::load(&run.checkpoint)?;
    let image = read_ppm(image_path)?;

    let head = format!("ds{stage}.weight");
    if stage == 0 || params.get(&head).is_err() {
        return Err(Error::Config(format!(
            "stage {stage} has no supervision head to take classifier weights from"
        )));
    }
    let w = params.get(&head)?;
    let num_classes = w.shape()[0];
    let w_c = weight_row(&params, &head, class_id)?;

    let cfg = run.model_config(num_classes);
    let features = stage_features(&params, &cfg, &image)?;
    let f = &features[stage - 1];

    let cam = match mode {
        CamMode::Gap => cam_gap(f, &w_c, class_id)?,
        CamMode::Sa => cam_sa(f, &w_c, class_id)?,
    };
    std::fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(&run.out_dir, e))?;
    let mode_tag = match mode {
        CamMode::Gap => "gap",
        CamMode::Sa => "sa",
    };
    let base = format!("cam_stage{stage}_class{class_id}_{mode_tag}");
    let csv = run.out_dir.join(format!("{base}.csv"));
    let pgm = run.out_dir.join(format!("{base}.pgm"));
    heatmap_export(&cam, &csv, HeatmapFormat::Csv)?;
    heatmap_export(&cam, &pgm, HeatmapFormat::Pgm)?;

    let attention_csv = if mode == CamMode::Sa {
        let (_, att, _) = sa_forward(f)?;
        let p_map = Cam {
            values: att.p,
            class_id,
            provenance: CamProvenance::Sa,
        };
        let path = run.out_dir.join(format!("attention_stage{stage}.csv"));
        heatmap_export(&p_map, &path, HeatmapFormat::Csv)?;
        Some(path)
    } else {
        None
    };
    Ok(CamOutputs {
        csv,
        pgm,
        attention_csv,
    })
}

pub fn cmd_gradcheck(run: &RunConfig) -> Result<Vec<LayerReport>> {
    run_full_suite(&GradcheckOptions {
        seed: run.seed,
        corrupt_sa: false,
    })
}

pub fn gradcheck_report(reports: &[LayerReport]) -> String {
    let mut out = String::new();
    for r in reports {
        writeln!(
            out,
            "{} = {:.3e} (threshold {:.0e}) {}",
            r.name,
            r.max_rel_err,
            r.threshold,
            if r.passed() { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    out
}
