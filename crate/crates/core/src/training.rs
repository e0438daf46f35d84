//! Two-stage training: inpainting pretraining, then shadow-removal fine-tuning.
//!
//! Batches are drawn from per-epoch permutations derived from the run seed, so
//! the sample order depends only on `(seed, iteration)`. Per-sample gradients
//! are computed independently (in parallel when enabled) and summed in batch
//! order, which makes runs and resumed runs bit-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array3;
use rand::seq::SliceRandom;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, OptimizerRecord};
use crate::data::{subset_indices, BinaryMask, DataError, ImageTensor, InpaintSample, ShadowTriplet};
use crate::evaluation::{self, EvalError, EvalOptions, Region};
use crate::losses::{
    disc_loss_grad, gen_loss_grad, masked_l1_grad, perceptual_loss_grad, style_loss_grad, total_inpaint_loss,
    Discriminator, FeatureExtractor, GanMode, LossComponents, LossError, LossWeights,
};
use crate::networks::{Generator, NetworkError};
use crate::nn::{accumulate, Adam, Parameters};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {what} at iteration {iteration}; last good checkpoint: {last_good:?}")]
    NumericalAbort { iteration: u64, what: String, last_good: Option<PathBuf> },
    #[error("io error at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

fn default_log_every() -> u64 {
    1
}

fn default_disc_channels() -> usize {
    16
}

fn default_extractor_channels() -> [usize; 5] {
    [8, 16, 16, 32, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Periodic checkpoint interval; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub gan_mode: GanMode,
    /// Base width of the pretraining discriminator.
    #[serde(default = "default_disc_channels")]
    pub discriminator_channels: usize,
    /// Stage widths of the fixed feature extractor.
    #[serde(default = "default_extractor_channels")]
    pub extractor_channels: [usize; 5],
    /// Extractor weight file; when absent a fixed random extractor is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor_weights: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(stage: Stage, iterations: u64, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            stage,
            iterations,
            batch_size,
            learning_rate,
            seed,
            checkpoint_every: 0,
            loss_weights: LossWeights::default(),
            log_every: 1,
            gan_mode: GanMode::default(),
            discriminator_channels: default_disc_channels(),
            extractor_channels: default_extractor_channels(),
            extractor_weights: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        if self.discriminator_channels == 0 || self.extractor_channels.contains(&0) {
            return bad("discriminator and extractor widths must be positive");
        }
        self.loss_weights.validate().map_err(TrainError::InvalidConfig)
    }
}

/// One row of the loss curve; finetuning reports only `loss_l1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iter: u64,
    pub loss_total: f64,
    pub loss_l1: f64,
    pub loss_gan: f64,
    pub loss_perc: f64,
    pub loss_style: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub iteration: u64,
    pub path: PathBuf,
    pub is_final: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { iteration: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_s: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub generator: crate::networks::GeneratorConfig,
    pub dataset_size: usize,
    /// Indices of the full dataset used, when training on a subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_indices: Option<Vec<usize>>,
    pub start_iteration: u64,
    pub final_iteration: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<PathBuf>,
    pub checkpoints: Vec<CheckpointEntry>,
    pub loss_curve: Vec<LossRow>,
    pub loss_csv: PathBuf,
    pub status: RunStatus,
    pub wall_clock: WallClock,
}

impl RunManifest {
    pub fn final_checkpoint(&self) -> Option<&Path> {
        self.checkpoints.iter().rev().find(|c| c.is_final).map(|c| c.path.as_path())
    }

    pub fn manifest_path(out_dir: &Path, stage: Stage) -> PathBuf {
        out_dir.join(format!("{}_manifest.json", stage.as_str()))
    }

    /// The manifest without wall-clock data, for reproducibility comparisons.
    pub fn without_wall_clock(&self) -> Self {
        Self { wall_clock: WallClock { started_unix_s: 0.0, elapsed_s: 0.0 }, ..self.clone() }
    }
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    if rows.is_empty() {
        w.write_record(["iter", "loss_total", "loss_l1", "loss_gan", "loss_perc", "loss_style"])
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Input, mask and target of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ImageTensor,
    pub mask: BinaryMask,
    pub target: ImageTensor,
}

impl From<&InpaintSample> for Example {
    fn from(s: &InpaintSample) -> Self {
        Self { input: s.corrupted.clone(), mask: s.mask.clone(), target: s.clean.clone() }
    }
}

impl From<&ShadowTriplet> for Example {
    fn from(s: &ShadowTriplet) -> Self {
        Self { input: s.shadow.clone(), mask: s.mask.clone(), target: s.shadow_free.clone() }
    }
}

/// Sample indices of batch `iteration` (0-based).
pub fn batch_indices(seed: u64, dataset_len: usize, batch_size: usize, iteration: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|j| {
            let pos = iteration * batch_size as u64 + j;
            let epoch = pos / dataset_len as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..dataset_len).collect();
                perm.shuffle(&mut stream_rng(seed, Stream::DataOrder, epoch));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("just set").1[(pos % dataset_len as u64) as usize]
        })
        .collect()
}

struct SampleOut {
    components: LossComponents,
    gen_grad: Generator,
    disc_grad: Option<Discriminator>,
}

/// Mutable training state: weights, optimizers and the iteration counter.
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub gen_opt: Adam,
    pub discriminator: Option<(Discriminator, Adam)>,
    extractor: FeatureExtractor,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(generator: Generator, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let gen_opt = Adam::new(config.learning_rate, generator.param_count());
        let (discriminator, extractor) = match config.stage {
            Stage::Pretrain => {
                let d = Discriminator::new(config.seed, config.discriminator_channels);
                let opt = Adam::new(config.learning_rate, d.param_count());
                let extractor = match &config.extractor_weights {
                    Some(path) => crate::checkpoint::load_extractor(path)?,
                    None => FeatureExtractor::random(config.seed, config.extractor_channels),
                };
                (Some((d, opt)), extractor)
            }
            Stage::Finetune => (None, FeatureExtractor::uninitialized()),
        };
        Ok(Self { config, generator, gen_opt, discriminator, extractor, iteration: 0 })
    }

    /// Restores weights, optimizer moments and the iteration counter from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        let mut t = Self::new(ckpt.generator()?, config)?;
        if let Some(rec) = &ckpt.optimizer {
            t.gen_opt.state = rec.to_state()?;
        }
        if let (Some((d, opt)), Some(rec)) = (t.discriminator.as_mut(), ckpt.discriminator.as_ref()) {
            *d = ckpt.discriminator()?.expect("record present");
            if let Some(o) = &rec.optimizer {
                opt.state = o.to_state()?;
            }
        }
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_generator(&self.generator, self.config.stage.as_str(), self.iteration);
        ck.optimizer = Some(OptimizerRecord::from_state(&self.gen_opt.state));
        if let Some((d, opt)) = &self.discriminator {
            ck = ck.with_discriminator(d, self.config.discriminator_channels, Some(&opt.state));
        }
        ck.train_config = serde_json::to_value(&self.config).ok();
        ck
    }

    fn sample_step(&self, ex: &Example, inv_b: f64) -> Result<SampleOut, TrainError> {
        let out = self.generator.forward(&ex.input, &ex.mask)?;
        let pred = &out.image;
        let target = ex.target.as_array();
        let (l1, d_l1) = masked_l1_grad(pred, target, &ex.mask)?;
        let Some((disc, _)) = &self.discriminator else {
            let gen_grad = self.generator.backward(&out.trace, &(d_l1 * inv_b));
            let components = LossComponents { l1, ..Default::default() };
            return Ok(SampleOut { components, gen_grad, disc_grad: None });
        };
        let w = &self.config.loss_weights;
        let mode = self.config.gan_mode;
        let mut d_pred = d_l1 * w.lambda1;

        let (fake_p, fake_cache) = disc.forward(pred.view())?;
        let fake: Vec<f64> = fake_p.iter().copied().collect();
        let (gan, d_fake_gen) = gen_loss_grad(&fake, mode);
        if w.lambda2 != 0.0 {
            let d = Array3::from_shape_vec(fake_p.dim(), d_fake_gen).expect("shape");
            d_pred.scaled_add(w.lambda2, &disc.backward(&fake_cache, &d, None));
        }
        let mut perc = 0.0;
        if w.lambda3 != 0.0 {
            let (v, d) = perceptual_loss_grad(&self.extractor, pred, target)?;
            perc = v;
            d_pred.scaled_add(w.lambda3, &d);
        }
        let mut style = 0.0;
        if w.lambda4 != 0.0 {
            let (v, d) = style_loss_grad(&self.extractor, pred, target, &ex.mask)?;
            style = v;
            d_pred.scaled_add(w.lambda4, &d);
        }
        let gen_grad = self.generator.backward(&out.trace, &(d_pred * inv_b));

        let (real_p, real_cache) = disc.forward(target.view())?;
        let real: Vec<f64> = real_p.iter().copied().collect();
        let (_, d_real, d_fake) = disc_loss_grad(&real, &fake, mode);
        let mut disc_grad = disc.zeros_like();
        let scaled = |v: Vec<f64>, shape| Array3::from_shape_vec(shape, v).expect("shape") * inv_b;
        disc.backward(&real_cache, &scaled(d_real, real_p.dim()), Some(&mut disc_grad));
        disc.backward(&fake_cache, &scaled(d_fake, fake_p.dim()), Some(&mut disc_grad));

        let components = LossComponents { l1, gan, perc, style };
        Ok(SampleOut { components, gen_grad, disc_grad: Some(disc_grad) })
    }

    /// One optimizer update; returns batch-mean loss components and the weighted total.
    pub fn step(&mut self, data: &[Example]) -> Result<(LossComponents, f64), TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let idx = batch_indices(self.config.seed, data.len(), self.config.batch_size, self.iteration);
        let inv_b = 1.0 / idx.len() as f64;
        #[cfg(feature = "parallel")]
        let outs: Vec<_> = idx.par_iter().map(|&i| self.sample_step(&data[i], inv_b)).collect();
        #[cfg(not(feature = "parallel"))]
        let outs: Vec<_> = idx.iter().map(|&i| self.sample_step(&data[i], inv_b)).collect();

        let mut comps = LossComponents::default();
        let mut gen_grad = self.generator.zeros_like();
        let mut disc_grad = self.discriminator.as_ref().map(|(d, _)| d.zeros_like());
        for out in outs {
            let out = out?;
            comps.l1 += out.components.l1 * inv_b;
            comps.gan += out.components.gan * inv_b;
            comps.perc += out.components.perc * inv_b;
            comps.style += out.components.style * inv_b;
            accumulate(&mut gen_grad, &out.gen_grad);
            if let (Some(acc), Some(g)) = (disc_grad.as_mut(), out.disc_grad.as_ref()) {
                accumulate(acc, g);
            }
        }
        let total = match self.config.stage {
            Stage::Pretrain => total_inpaint_loss(&self.config.loss_weights, &comps),
            Stage::Finetune => total_inpaint_loss(&LossWeights { lambda1: 1.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0 }, &comps),
        }
        .map_err(|e| self.abort(e.to_string()))?;

        self.gen_opt.step(&mut self.generator, &gen_grad);
        if let (Some((d, opt)), Some(g)) = (self.discriminator.as_mut(), disc_grad.as_ref()) {
            opt.step(d, g);
        }
        if self.generator.flatten().iter().any(|v| !v.is_finite()) {
            return Err(self.abort("generator parameters".into()));
        }
        self.iteration += 1;
        Ok((comps, total))
    }

    fn abort(&self, what: String) -> TrainError {
        TrainError::NumericalAbort { iteration: self.iteration + 1, what, last_good: None }
    }

    /// Trains up to `config.iterations`, writing checkpoints, the loss CSV and the manifest.
    pub fn run(&mut self, data: &[Example], out_dir: &Path) -> Result<RunManifest, TrainError> {
        let stage = self.config.stage;
        let ckpt_dir = out_dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let clock = Instant::now();
        let start_iteration = self.iteration;
        let mut rows = Vec::new();
        let mut checkpoints = Vec::new();
        let mut status = RunStatus::Completed;
        let mut failure = None;

        while self.iteration < self.config.iterations {
            match self.step(data) {
                Ok((c, total)) => {
                    if self.iteration.is_multiple_of(self.config.log_every) {
                        rows.push(LossRow {
                            iter: self.iteration,
                            loss_total: total,
                            loss_l1: c.l1,
                            loss_gan: c.gan,
                            loss_perc: c.perc,
                            loss_style: c.style,
                        });
                    }
                    if self.config.checkpoint_every > 0 && self.iteration.is_multiple_of(self.config.checkpoint_every) {
                        let path = ckpt_dir.join(format!("{}_{:08}.json", stage.as_str(), self.iteration));
                        self.checkpoint().save(&path)?;
                        checkpoints.push(CheckpointEntry { iteration: self.iteration, path, is_final: false });
                    }
                }
                Err(TrainError::NumericalAbort { iteration, what, .. }) => {
                    let last_good = checkpoints.last().map(|c: &CheckpointEntry| c.path.clone());
                    log::error!("numerical abort at iteration {iteration}: {what}");
                    status = RunStatus::Aborted { iteration, reason: format!("non-finite {what}") };
                    failure = Some(TrainError::NumericalAbort { iteration, what, last_good });
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failure.is_none() {
            let path = ckpt_dir.join(format!("{}_final.json", stage.as_str()));
            self.checkpoint().save(&path)?;
            checkpoints.push(CheckpointEntry { iteration: self.iteration, path, is_final: true });
        }
        let loss_csv = out_dir.join(format!("{}_loss.csv", stage.as_str()));
        write_loss_csv(&loss_csv, &rows)?;
        let manifest = RunManifest {
            config: self.config.clone(),
            generator: self.generator.config(),
            dataset_size: data.len(),
            subset_indices: None,
            start_iteration,
            final_iteration: self.iteration,
            resumed_from: None,
            checkpoints,
            loss_curve: rows,
            loss_csv,
            status,
            wall_clock: WallClock { started_unix_s: started, elapsed_s: clock.elapsed().as_secs_f64() },
        };
        write_manifest(out_dir, &manifest)?;
        match failure {
            Some(e) => Err(e),
            None => Ok(manifest),
        }
    }
}

pub fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<PathBuf, TrainError> {
    let path = RunManifest::manifest_path(out_dir, manifest.config.stage);
    let json = serde_json::to_string_pretty(manifest).map_err(|e| io_err(&path, e))?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Result of a training run.
pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub generator: Generator,
}

fn require_stage(config: &TrainConfig, stage: Stage) -> Result<(), TrainError> {
    if config.stage != stage {
        return Err(TrainError::InvalidConfig(format!(
            "expected stage {}, got {}",
            stage.as_str(),
            config.stage.as_str()
        )));
    }
    Ok(())
}

fn train(model: Generator, data: Vec<Example>, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let manifest = trainer.run(&data, out_dir)?;
    Ok(TrainOutcome { manifest, generator: trainer.generator })
}

/// Inpainting pretraining with the full loss suite and a 1:1 discriminator schedule.
///
/// The corrupted image is fed as the network input; for fusion networks it
/// also plays the role of the shadow image.
pub fn pretrain(
    model: Generator,
    data: &[InpaintSample],
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    require_stage(config, Stage::Pretrain)?;
    train(model, data.iter().map(Example::from).collect(), config, out_dir)
}

/// Shadow-removal fine-tuning with masked ℓ1 only.
pub fn finetune(
    model: Generator,
    data: &[ShadowTriplet],
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    require_stage(config, Stage::Finetune)?;
    train(model, data.iter().map(Example::from).collect(), config, out_dir)
}

/// Fine-tuning on the `subset_fraction` subset of `data`; the manifest records the indices.
pub fn finetune_fraction(
    model: Generator,
    data: &[ShadowTriplet],
    fraction: f64,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let idx = subset_indices(data.len(), fraction, config.seed)?;
    let subset: Vec<ShadowTriplet> = idx.iter().map(|&i| data[i].clone()).collect();
    let mut out = finetune(model, &subset, config, out_dir)?;
    out.manifest.subset_indices = Some(idx);
    write_manifest(out_dir, &out.manifest)?;
    Ok(out)
}

fn resume(checkpoint: &Path, data: Vec<Example>, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.stage != config.stage.as_str() {
        return Err(TrainError::InvalidConfig(format!(
            "checkpoint stage {} does not match config stage {}",
            ckpt.stage,
            config.stage.as_str()
        )));
    }
    let mut trainer = Trainer::from_checkpoint(&ckpt, config.clone())?;
    let mut manifest = trainer.run(&data, out_dir)?;
    manifest.resumed_from = Some(checkpoint.to_path_buf());
    write_manifest(out_dir, &manifest)?;
    Ok(TrainOutcome { manifest, generator: trainer.generator })
}

/// Continues a pretraining run from one of its checkpoints up to `config.iterations`.
pub fn resume_pretrain(
    checkpoint: &Path,
    data: &[InpaintSample],
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    resume(checkpoint, data.iter().map(Example::from).collect(), config, out_dir)
}

pub fn resume_finetune(
    checkpoint: &Path,
    data: &[ShadowTriplet],
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    resume(checkpoint, data.iter().map(Example::from).collect(), config, out_dir)
}

/// Shadow and non-shadow LAB error of `model` on `data` (provided masks).
pub fn shadow_rmse(model: &dyn evaluation::Restorer, data: &[ShadowTriplet]) -> Result<(f64, f64), TrainError> {
    let r = evaluation::evaluate_dataset(model, data, EvalOptions::default())?;
    Ok((r.region(Region::Shadow).rmse, r.region(Region::NonShadow).rmse))
}

/// Mean PSNR of inpainting `data` with `model`.
pub fn inpaint_psnr(model: &Generator, data: &[InpaintSample]) -> Result<f64, TrainError> {
    let mut v = Vec::with_capacity(data.len());
    for s in data {
        let out = model.restore(&s.corrupted, &s.mask)?;
        v.push(evaluation::psnr(&out, &s.clean)?);
    }
    Ok(evaluation::pairwise_sum(&v) / v.len().max(1) as f64)
}

/// Datasets of the checkpoint-cadence study.
pub struct CadenceData<'a> {
    pub inpaint_train: &'a [InpaintSample],
    pub inpaint_val: &'a [InpaintSample],
    pub shadow_train: &'a [ShadowTriplet],
    pub shadow_val: &'a [ShadowTriplet],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CadenceRow {
    pub iter: u64,
    pub inpaint_psnr: f64,
    pub rmse_shadow: f64,
    pub rmse_nonshadow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadenceReport {
    pub rows: Vec<CadenceRow>,
}

impl CadenceReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        if self.rows.is_empty() {
            w.write_record(["iter", "inpaint_psnr", "rmse_shadow", "rmse_nonshadow"]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Pretrains with periodic checkpoints every `cadence` iterations, then fine-tunes
/// a copy of each checkpoint and measures it.
pub fn run_pretrain_cadence_study(
    model: Generator,
    data: CadenceData<'_>,
    cadence: u64,
    pretrain_config: &TrainConfig,
    finetune_config: &TrainConfig,
    out_dir: &Path,
) -> Result<CadenceReport, TrainError> {
    if cadence == 0 || !pretrain_config.iterations.is_multiple_of(cadence) {
        return Err(TrainError::InvalidConfig(format!(
            "cadence {cadence} must divide pretrain iterations {}",
            pretrain_config.iterations
        )));
    }
    let cfg = TrainConfig { checkpoint_every: cadence, ..pretrain_config.clone() };
    let pre = pretrain(model, data.inpaint_train, &cfg, &out_dir.join("pretrain"))?;
    let mut rows = Vec::new();
    for entry in pre.manifest.checkpoints.iter().filter(|c| !c.is_final) {
        let g = Checkpoint::load(&entry.path)?.generator()?;
        let psnr = inpaint_psnr(&g, data.inpaint_val)?;
        let ft_dir = out_dir.join(format!("finetune_{:08}", entry.iteration));
        let ft = finetune(g, data.shadow_train, finetune_config, &ft_dir)?;
        let (s, ns) = shadow_rmse(&ft.generator, data.shadow_val)?;
        rows.push(CadenceRow { iter: entry.iteration, inpaint_psnr: psnr, rmse_shadow: s, rmse_nonshadow: ns });
    }
    rows.sort_by_key(|r| r.iter);
    let report = CadenceReport { rows };
    let path = out_dir.join("cadence.csv");
    fs::write(&path, report.to_csv()).map_err(|e| io_err(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_inpaint, generate_synthetic_shadow_sized};
    use crate::networks::{FusionNetConfig, GeneratorConfig};

    fn tiny() -> Generator {
        Generator::build(&GeneratorConfig::Fusion(FusionNetConfig::scaled(2, 1)), 0).unwrap()
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|t| batch_indices(3, 10, 2, t)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 10, 4, 7), batch_indices(3, 10, 4, 7));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(Stage::Finetune, 1, 1, 1e-3, 0);
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c = TrainConfig::new(Stage::Finetune, 0, 1, 1e-3, 0);
        assert!(c.validate().is_err());
        c = TrainConfig::new(Stage::Finetune, 1, 1, 0.0, 0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn checkpoint_cadence_count() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic_shadow_sized(1, 4, 8).unwrap();
        let mut cfg = TrainConfig::new(Stage::Finetune, 30, 1, 1e-3, 0);
        cfg.checkpoint_every = 10;
        let out = finetune(tiny(), &data, &cfg, dir.path()).unwrap();
        let periodic = out.manifest.checkpoints.iter().filter(|c| !c.is_final).count();
        assert_eq!(periodic, 3);
        assert_eq!(out.manifest.checkpoints.len(), 4);
        assert!(out.manifest.checkpoints.iter().all(|c| c.path.exists()));
        assert_eq!(out.manifest.loss_curve.len(), 30);
    }

    #[test]
    fn pretrain_runs_all_losses_and_disc_updates() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic_inpaint(1, 3, 16, (0.1, 0.3)).unwrap();
        let mut cfg = TrainConfig::new(Stage::Pretrain, 2, 2, 1e-3, 0);
        cfg.discriminator_channels = 2;
        cfg.extractor_channels = [2; 5];
        let mut t = Trainer::new(tiny(), cfg).unwrap();
        let d0 = t.discriminator.as_ref().unwrap().0.clone();
        let ex: Vec<Example> = data.iter().map(Example::from).collect();
        let (c, total) = t.step(&ex).unwrap();
        assert!(c.l1 > 0.0 && c.gan > 0.0 && c.perc > 0.0 && c.style >= 0.0);
        assert!(total.is_finite());
        assert_ne!(t.discriminator.as_ref().unwrap().0, d0);
        let m = t.run(&ex, dir.path()).unwrap();
        assert_eq!(m.final_iteration, 2);
    }

    #[test]
    fn finetune_never_touches_a_discriminator() {
        let t = Trainer::new(tiny(), TrainConfig::new(Stage::Finetune, 1, 1, 1e-3, 0)).unwrap();
        assert!(t.discriminator.is_none());
        assert!(t.checkpoint().discriminator.is_none());
    }

    #[test]
    fn numerical_abort_keeps_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic_shadow_sized(2, 2, 8).unwrap();
        let mut cfg = TrainConfig::new(Stage::Finetune, 10, 1, 1e308, 0);
        cfg.checkpoint_every = 1;
        match finetune(tiny(), &data, &cfg, dir.path()) {
            Err(TrainError::NumericalAbort { iteration, last_good, .. }) => {
                let good = last_good.expect("a checkpoint precedes the abort");
                assert!(good.exists());
                assert!(Checkpoint::load(&good).unwrap().iteration < iteration);
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("training at lr=1e308 should overflow"),
        }
    }
}
