//! Experiment commands behind the command-line verbs.
//!
//! Each `cmd_*` function is an ordinary library call returning a typed result;
//! the binary only parses arguments and maps [`CliError`] to an exit code.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_generator, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{
    generate_synthetic_inpaint, generate_synthetic_shadow_sized, inpaint_samples_from_images, load_image,
    load_image_folder, load_mask, load_triplet_dataset_sized, write_triplet_dataset, DataError, InpaintSample,
    ShadowTriplet,
};
use crate::evaluation::{
    evaluate_dataset, heatmap, lab_ab_difference, weight_maps, EvalError, EvalOptions, EvalReport,
    IdentityRestorer, MaskSource, Region, Restorer,
};
use crate::networks::{make_ablation_variant, Generator, NetworkError, Variant};
use crate::nn::Parameters;
use crate::rng::{derive_seed, Stream};
use crate::training::{
    finetune, finetune_fraction, pretrain, run_pretrain_cadence_study, CadenceData, CadenceReport, RunManifest,
    Stage, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NumericalAbort { .. } => CliError::Numerical(e.to_string()),
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::EmptyRequest | DataError::InvalidFraction(_) | DataError::InfeasibleCoverage { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Unknown { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::UnknownVariant(_) | NetworkError::VariantNotApplicable { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Every split an experiment touches.
pub struct Datasets {
    pub inpaint_train: Vec<InpaintSample>,
    pub inpaint_val: Vec<InpaintSample>,
    pub shadow_train: Vec<ShadowTriplet>,
    pub shadow_test: Vec<ShadowTriplet>,
}

/// Loads the configured corpora, or generates the synthetic stand-ins.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets, CliError> {
    let d = &cfg.data;
    let size = d.image_size;
    let coverage = (d.mask_coverage[0], d.mask_coverage[1]);
    let split_seed = |k| derive_seed(cfg.seed, Stream::Split, k);
    let (shadow_train, shadow_test) = match &d.shadow_root {
        Some(root) => (
            load_triplet_dataset_sized(root, "train", size)?,
            load_triplet_dataset_sized(root, "test", size)?,
        ),
        None => (
            generate_synthetic_shadow_sized(split_seed(0), d.shadow_train_count, size)?,
            generate_synthetic_shadow_sized(split_seed(1), d.shadow_test_count, size)?,
        ),
    };
    let (inpaint_train, inpaint_val) = match &d.inpaint_dir {
        Some(dir) => {
            let mut samples = inpaint_samples_from_images(load_image_folder(dir, size)?, split_seed(2), coverage)?;
            let val = samples.split_off(samples.len().saturating_sub(d.inpaint_val_count));
            (samples, val)
        }
        None => (
            generate_synthetic_inpaint(split_seed(2), d.inpaint_count, size, coverage)?,
            generate_synthetic_inpaint(split_seed(3), d.inpaint_val_count.max(1), size, coverage)?,
        ),
    };
    if shadow_train.is_empty() || shadow_test.is_empty() || inpaint_train.is_empty() {
        return Err(CliError::Usage("configured datasets must not be empty".into()));
    }
    Ok(Datasets { inpaint_train, inpaint_val, shadow_train, shadow_test })
}

/// Writes `count` synthetic triplets to `out_dir/split`.
pub fn cmd_synth(count: usize, seed: u64, size: usize, out_dir: &Path, split: &str) -> Result<Vec<PathBuf>, CliError> {
    if count == 0 {
        return Err(CliError::Usage("count must be at least 1".into()));
    }
    if size == 0 || !size.is_multiple_of(4) {
        return Err(CliError::Usage(format!("size {size} must be a positive multiple of 4")));
    }
    let triplets = generate_synthetic_shadow_sized(seed, count, size)?;
    Ok(write_triplet_dataset(out_dir, split, &triplets)?)
}

fn init_generator(cfg: &ExperimentConfig, init: Option<&Path>) -> Result<Generator, CliError> {
    match init {
        Some(path) => Ok(load_generator(path)?),
        None => Ok(Generator::build(&cfg.model.generator_config(), cfg.seed)?),
    }
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let data = load_datasets(cfg)?;
    let model = init_generator(cfg, None)?;
    let out = pretrain(model, &data.inpaint_train, &cfg.train_config(Stage::Pretrain), &cfg.out_dir.join("pretrain"))?;
    Ok(out.manifest)
}

/// Fine-tunes from `init` (a checkpoint) or from random weights when `None`.
///
/// A non-`full` variant in the config fine-tunes that ablation instead.
pub fn cmd_finetune(cfg: &ExperimentConfig, init: Option<&Path>) -> Result<RunManifest, CliError> {
    let data = load_datasets(cfg)?;
    let mut model = init_generator(cfg, init)?;
    if cfg.variant != "full" {
        let v: Variant = cfg.variant.parse()?;
        model = make_ablation_variant(&model, v, cfg.seed)?;
    }
    let tc = cfg.train_config(Stage::Finetune);
    let out_dir = cfg.out_dir.join("finetune");
    let out = if cfg.fraction < 1.0 {
        finetune_fraction(model, &data.shadow_train, cfg.fraction, &tc, &out_dir)?
    } else {
        finetune(model, &data.shadow_train, &tc, &out_dir)?
    };
    Ok(out.manifest)
}

fn eval_options(cfg: &ExperimentConfig, mask_source: MaskSource) -> EvalOptions<'static> {
    EvalOptions { mask_source, rmse_kind: cfg.eval.rmse_kind, provider: None }
}

/// Evaluates a checkpoint (or the identity restorer when `None`) on the test split.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    mask_source: MaskSource,
) -> Result<EvalReport, CliError> {
    let data = load_datasets(cfg)?;
    let generator;
    let model: &dyn Restorer = match checkpoint {
        Some(p) => {
            generator = load_generator(p)?;
            &generator
        }
        None => &IdentityRestorer,
    };
    let report = evaluate_dataset(model, &data.shadow_test, eval_options(cfg, mask_source))?;
    report.write(&cfg.out_dir.join("eval"), "eval")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub region: Region,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: String,
    pub trained: bool,
    pub iterations: u64,
    /// Whether any weight differs from the model the variant was derived from.
    pub parameters_changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<VariantRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// `variant,region,rmse,psnr,ssim`, one row per region per variant.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Trains the full model and each requested ablation, then evaluates all of them.
///
/// Trainable variants are fine-tuned from `init` like the full model.
/// `zero_*` variants are derived from the fine-tuned full model and never trained.
pub fn cmd_ablate(cfg: &ExperimentConfig, variants: &[Variant], init: Option<&Path>) -> Result<AblationReport, CliError> {
    let data = load_datasets(cfg)?;
    let base = init_generator(cfg, init)?;
    if !matches!(base, Generator::Fusion(_)) {
        return Err(CliError::Usage("ablations require a fusion model".into()));
    }
    let out_dir = cfg.out_dir.join("ablate");
    let tc = cfg.train_config(Stage::Finetune);
    let opts = eval_options(cfg, cfg.eval.mask_source);
    let full = finetune(base.clone(), &data.shadow_train, &tc, &out_dir.join("full"))?;
    let mut runs = vec![VariantRun {
        variant: "full".into(),
        trained: true,
        iterations: full.manifest.final_iteration,
        parameters_changed: true,
    }];
    let mut rows = Vec::new();
    let record = |name: &str, model: &Generator, rows: &mut Vec<AblationRow>| -> Result<(), CliError> {
        let report = evaluate_dataset(model, &data.shadow_test, opts)?;
        report.write(&out_dir.join(name), "eval")?;
        rows.extend(report.regions.iter().map(|r| AblationRow {
            variant: name.to_string(),
            region: r.region,
            rmse: r.rmse,
            psnr: r.psnr,
            ssim: r.ssim,
        }));
        Ok(())
    };
    record("full", &full.generator, &mut rows)?;
    for &v in variants {
        let name = v.as_str();
        if v.requires_training() {
            let model = make_ablation_variant(&base, v, cfg.seed)?;
            let before = model.flatten();
            let out = finetune(model, &data.shadow_train, &tc, &out_dir.join(name))?;
            runs.push(VariantRun {
                variant: name.into(),
                trained: true,
                iterations: out.manifest.final_iteration,
                parameters_changed: out.generator.flatten() != before,
            });
            record(name, &out.generator, &mut rows)?;
        } else {
            let model = make_ablation_variant(&full.generator, v, cfg.seed)?;
            let changed = model.flatten() != full.generator.flatten();
            if changed {
                return Err(CliError::Runtime(format!("{name} altered the trained weights")));
            }
            runs.push(VariantRun { variant: name.into(), trained: false, iterations: 0, parameters_changed: false });
            record(name, &model, &mut rows)?;
        }
    }
    let report = AblationReport { runs, rows };
    let csv_path = out_dir.join("ablation.csv");
    fs::write(&csv_path, report.to_csv()).map_err(|e| io(&csv_path, e))?;
    let json_path = out_dir.join("ablation.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| io(&json_path, e))?;
    fs::write(&json_path, json).map_err(|e| io(&json_path, e))?;
    Ok(report)
}

pub fn cmd_cadence_study(cfg: &ExperimentConfig, cadence: u64) -> Result<CadenceReport, CliError> {
    let data = load_datasets(cfg)?;
    let model = init_generator(cfg, None)?;
    Ok(run_pretrain_cadence_study(
        model,
        CadenceData {
            inpaint_train: &data.inpaint_train,
            inpaint_val: &data.inpaint_val,
            shadow_train: &data.shadow_train,
            shadow_val: &data.shadow_test,
        },
        cadence,
        &cfg.train_config(Stage::Pretrain),
        &cfg.train_config(Stage::Finetune),
        &cfg.out_dir.join("cadence"),
    )?)
}

/// Inputs of [`cmd_visualize`].
pub struct VisualizeRequest<'a> {
    pub checkpoint: &'a Path,
    pub image: &'a Path,
    pub mask: &'a Path,
    pub ground_truth: Option<&'a Path>,
    /// Write the LAB a*/b* difference maps (requires a ground truth).
    pub difference_maps: bool,
    pub size: usize,
    pub out_dir: &'a Path,
}

/// Writes the restored image, W1/W2 maps and, when requested, LAB a*/b* difference maps.
pub fn cmd_visualize(req: &VisualizeRequest<'_>) -> Result<Vec<PathBuf>, CliError> {
    if req.difference_maps && req.ground_truth.is_none() {
        return Err(CliError::Usage("difference maps need --gt".into()));
    }
    let model = load_generator(req.checkpoint)?;
    let image = load_image(req.image, req.size)?;
    let mask = load_mask(req.mask, req.size)?;
    let out = model.forward(&image, &mask)?;
    let Some(fusion) = out.fusion else {
        return Err(CliError::Usage("weight maps need a fusion model".into()));
    };
    let restored = crate::data::ImageTensor::from_clamped(out.image);
    let (w1, w2) = weight_maps(&fusion.fusion.w1, &fusion.fusion.w2, image.dims())?;
    fs::create_dir_all(req.out_dir).map_err(|e| io(req.out_dir, e))?;
    let mut images = vec![("restored.png", restored.clone()), ("w1.png", w1), ("w2.png", w2)];
    if req.difference_maps {
        let gt = load_image(req.ground_truth.expect("checked"), req.size)?;
        let (a, b) = lab_ab_difference(&restored, &gt)?;
        images.push(("lab_a_diff.png", heatmap(&a)));
        images.push(("lab_b_diff.png", heatmap(&b)));
    }
    let mut written = Vec::new();
    for (name, img) in images {
        let path = req.out_dir.join(name);
        img.to_rgb8().save(&path).map_err(|e| io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
