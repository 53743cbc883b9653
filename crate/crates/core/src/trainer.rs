//! Two-stage adversarial training: paired-only epochs up to `stage1_end`,
//! then epochs alternating paired and unpaired batches one to one, with a
//! linear learning-rate decay over the second stage.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::colorspace::rgb_to_hsv_tensor;
use crate::data::{
    augment, augment_image, derive_seed, epoch_batches, paired_batch, unpaired_batch, AugmentSpec, Batch, Dataset,
    IndexStream, SampleMode,
};
use crate::error::{Error, Result};
use crate::losses::{
    cycle_loss, discriminator_loss, edge_loss, generator_gan_loss, hsv_loss, pair_loss, total_loss, weighted_total,
    LossBreakdown, LossParts, LossWeights,
};
use crate::model::{Mcfnet, ModelConfig};
use crate::nn::ops::scalar;
use crate::nn::{group_of, Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrDecay {
    /// Linear from `base_lr` after `stage1_end` down to
    /// `floor_factor * base_lr` at the last epoch.
    Linear { floor_factor: f64 },
    Constant,
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay::Linear { floor_factor: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub stage1_end: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: LrDecay,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub use_augmentation: bool,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 1000,
            stage1_end: 250,
            batch_size: 1,
            base_lr: 2e-4,
            lr_decay: LrDecay::default(),
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            use_augmentation: true,
            augment: AugmentSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// CPU-sized preset: narrow networks, 64x64 crops.
    pub fn desk() -> Self {
        Self {
            total_epochs: 200,
            stage1_end: 150,
            batch_size: 8,
            model: ModelConfig::desk(),
            augment: AugmentSpec::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.stage1_end && self.stage1_end < self.total_epochs) {
            return Err(Error::Config(format!(
                "need 0 < stage1_end < total_epochs, got stage1_end={} total_epochs={}",
                self.stage1_end, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if let LrDecay::Linear { floor_factor } = self.lr_decay {
            if !(floor_factor > 0.0 && floor_factor <= 1.0) {
                return Err(Error::Config(format!(
                    "lr_decay.floor_factor must be in (0, 1], got {floor_factor}"
                )));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid adam settings {a:?}")));
        }
        self.weights.validate()?;
        self.model.validate()?;
        if self.use_augmentation {
            self.augment.validate()?;
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > config.total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside 1..={}",
            config.total_epochs
        )));
    }
    let base = config.base_lr;
    match config.lr_decay {
        LrDecay::Constant => Ok(base),
        LrDecay::Linear { .. } if epoch <= config.stage1_end => Ok(base),
        LrDecay::Linear { floor_factor } => {
            let progress = (epoch - config.stage1_end) as f64 / (config.total_epochs - config.stage1_end) as f64;
            Ok(base * (1.0 - (1.0 - floor_factor) * progress))
        }
    }
}

/// Losses and gradient norms of one optimization step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub mode: SampleMode,
    pub generator: LossBreakdown,
    pub disc_a: f64,
    pub disc_b: f64,
    /// L2 norm of the gradient per parameter group, for both updates.
    pub grad_norms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub step: u64,
    pub kind: SampleMode,
    pub nir_ids: Vec<String>,
    pub rgb_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    /// Mean generator losses over the epoch's batches.
    pub generator: LossBreakdown,
    pub disc_a: f64,
    pub disc_b: f64,
    pub paired_batches: usize,
    pub unpaired_batches: usize,
    pub seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,stage,lr,g_gan,g_pair,g_cyc,g_edge,g_total,d_a,d_b,d_total,paired_batches,unpaired_batches,seconds";

    pub fn csv_row(&self) -> String {
        let g = &self.generator;
        format!(
            "{},{},{:.8e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{:.3}",
            self.epoch,
            self.stage,
            self.lr,
            g.gan,
            g.pair,
            g.cyc,
            g.edge,
            g.total,
            self.disc_a,
            self.disc_b,
            self.disc_a + self.disc_b,
            self.paired_batches,
            self.unpaired_batches,
            self.seconds
        )
    }
}

/// Appends `train_log.csv`, `train_log.jsonl` and `batches.csv` in a run
/// directory.
pub struct TrainLogWriter {
    dir: PathBuf,
}

impl TrainLogWriter {
    pub const EPOCH_CSV: &'static str = "train_log.csv";
    pub const EPOCH_JSONL: &'static str = "train_log.jsonl";
    pub const BATCH_CSV: &'static str = "batches.csv";

    /// Creates (truncating) the three log files.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let w = Self { dir: dir.to_path_buf() };
        w.write_new(Self::EPOCH_CSV, &format!("{}\n", EpochLog::CSV_HEADER))?;
        w.write_new(Self::EPOCH_JSONL, "")?;
        w.write_new(Self::BATCH_CSV, "epoch,step,kind,nir_ids,rgb_ids\n")?;
        Ok(w)
    }

    /// Continues existing logs (used when resuming).
    pub fn append_to(dir: &Path) -> Result<Self> {
        if !dir.join(Self::EPOCH_CSV).exists() {
            return Self::create(dir);
        }
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn write_new(&self, name: &str, content: &str) -> Result<()> {
        let p = self.dir.join(name);
        fs::write(&p, content).map_err(|e| Error::io(&p, e))
    }

    fn append(&self, name: &str, content: &str) -> Result<()> {
        let p = self.dir.join(name);
        let mut f: File = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        f.write_all(content.as_bytes()).map_err(|e| Error::io(&p, e))
    }

    pub fn record(&self, epoch: &EpochLog, batches: &[BatchRecord]) -> Result<()> {
        self.append(Self::EPOCH_CSV, &format!("{}\n", epoch.csv_row()))?;
        self.append(Self::EPOCH_JSONL, &format!("{}\n", serde_json::to_string(epoch)?))?;
        let kind = |k: SampleMode| match k {
            SampleMode::Paired => "paired",
            SampleMode::Unpaired => "unpaired",
        };
        let rows: String = batches
            .iter()
            .map(|b| {
                format!(
                    "{},{},{},{},{}\n",
                    b.epoch,
                    b.step,
                    kind(b.kind),
                    b.nir_ids.join(";"),
                    b.rgb_ids.join(";")
                )
            })
            .collect();
        self.append(Self::BATCH_CSV, &rows)
    }
}

pub struct Trainer {
    config: TrainConfig,
    model: Mcfnet,
    generator_opt: Adam,
    discriminator_opt: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
}

fn trainable(model: &Mcfnet, groups: &[&str]) -> Vec<(String, Var)> {
    groups
        .iter()
        .flat_map(|g| model.store().group_vars(g))
        .collect()
}

fn group_grad_norms(params: &[(String, Var)], grads: &GradStore, out: &mut BTreeMap<String, f64>) -> Result<()> {
    for (name, var) in params {
        let sq = match grads.get(var.as_tensor()) {
            Some(g) => scalar(&g.sqr()?.sum_all()?)?,
            None => 0.0,
        };
        *out.entry(group_of(name).to_string()).or_insert(0.0) += sq;
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Mcfnet::new(&config.model, config.seed, DType::F32, &Device::Cpu)?;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0, "sampler"));
        Ok(Self::assemble(config, model, rng))
    }

    fn assemble(config: TrainConfig, model: Mcfnet, rng: ChaCha8Rng) -> Self {
        let generator_opt = Adam::new(trainable(&model, &model.generator_groups()), config.adam);
        let discriminator_opt = Adam::new(trainable(&model, &model.discriminator_groups()), config.adam);
        Self {
            config,
            model,
            generator_opt,
            discriminator_opt,
            rng,
            epoch: 0,
            step: 0,
        }
    }

    /// Restores model, optimizer moments, sampler RNG and epoch counter.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ckpt.build_model(DType::F32, &Device::Cpu)?;
        let rng = ckpt.rng.restore();
        let mut trainer = Self::assemble(ckpt.config, model, rng);
        trainer.generator_opt.import(ckpt.generator_opt)?;
        trainer.discriminator_opt.import(ckpt.discriminator_opt)?;
        trainer.epoch = ckpt.epoch;
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Mcfnet {
        &self.model
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Parameter groups each optimizer updates.
    pub fn trainable_groups(&self) -> (Vec<&'static str>, Vec<&'static str>) {
        (self.model.generator_groups(), self.model.discriminator_groups())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(
            &self.config,
            &self.model,
            self.generator_opt.export(),
            self.discriminator_opt.export(),
            RngState::capture(&self.rng),
            self.epoch,
            self.step,
        )
    }

    fn non_finite(&self, what: &str, batch: &Batch, err: Error) -> Error {
        match err {
            Error::NonFinite { what: inner } => Error::NonFinite {
                what: format!(
                    "{what} at epoch {} step {} ({inner}); batch nir ids [{}], rgb ids [{}]",
                    self.epoch + 1,
                    self.step,
                    batch.nir_ids.join(", "),
                    batch.rgb_ids.join(", ")
                ),
            },
            other => other,
        }
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<StepReport> {
        self.step += 1;
        let (dtype, device) = (self.model.dtype(), self.model.device().clone());
        let a = batch.nir_tensor(dtype, &device)?;
        let b = batch.rgb_tensor(dtype, &device)?;
        let paired = batch.mode == SampleMode::Paired;
        let model = &self.model;
        let w = self.config.weights;

        let out = model.colorize(&a)?;
        let fake_b = &out.y_rgb;
        let fake_a = model.reverse(&b)?;
        let rec_a = model.reverse(fake_b)?;
        let rec_b = model.colorize(&fake_a)?.y_rgb;

        let gan = (generator_gan_loss(&model.discriminate_rgb(fake_b)?)?
            + generator_gan_loss(&model.discriminate_nir(&fake_a)?)?)?;
        let cyc = cycle_loss(&rec_a, &a, &rec_b, &b)?;
        let (pair, edge) = if paired {
            let mut pair = pair_loss(fake_b, &b, &fake_a, &a)?;
            if model.cfem().is_some() {
                pair = (pair + hsv_loss(&out.y_hsv, &rgb_to_hsv_tensor(&b)?)?)?;
            }
            (Some(pair), Some(edge_loss(fake_b, &b, &fake_a, &a)?))
        } else {
            (None, None)
        };
        let total = weighted_total(&gan, pair.as_ref(), Some(&cyc), edge.as_ref(), &w)?;
        let parts = LossParts {
            gan: scalar(&gan)?,
            pair: pair.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            cyc: scalar(&cyc)?,
            edge: edge.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
        };
        let generator = total_loss(parts, &w).map_err(|e| self.non_finite("generator loss", batch, e))?;

        let mut grad_norms = BTreeMap::new();
        let grads = total.backward()?;
        group_grad_norms(self.generator_opt.params(), &grads, &mut grad_norms)?;
        self.generator_opt.step(&grads, lr)?;

        let d_a = discriminator_loss(
            &self.model.discriminate_rgb(&b)?,
            &self.model.discriminate_rgb(&fake_b.detach())?,
        )?;
        let d_b = discriminator_loss(
            &self.model.discriminate_nir(&a)?,
            &self.model.discriminate_nir(&fake_a.detach())?,
        )?;
        let (disc_a, disc_b) = (scalar(&d_a)?, scalar(&d_b)?);
        if !(disc_a.is_finite() && disc_b.is_finite()) {
            return Err(self.non_finite(
                "discriminator loss",
                batch,
                Error::NonFinite {
                    what: format!("d_a={disc_a}, d_b={disc_b}"),
                },
            ));
        }
        let grads = (d_a + d_b)?.backward()?;
        group_grad_norms(self.discriminator_opt.params(), &grads, &mut grad_norms)?;
        self.discriminator_opt.step(&grads, lr)?;

        grad_norms.values_mut().for_each(|v| *v = v.sqrt());
        Ok(StepReport {
            mode: batch.mode,
            generator,
            disc_a,
            disc_b,
            grad_norms,
        })
    }

    fn prepare(&self, dataset: &Dataset, plan: &BatchPlan, epoch: usize) -> Result<Batch> {
        let mut batch = match plan {
            BatchPlan::Paired(idx) => paired_batch(dataset, idx)?,
            BatchPlan::Unpaired(nir, rgb) => unpaired_batch(dataset, nir, rgb),
        };
        if !self.config.use_augmentation {
            return Ok(batch);
        }
        let (seed, spec) = (self.config.seed, &self.config.augment);
        match batch.mode {
            SampleMode::Paired => {
                let pairs = batch
                    .nir_ids
                    .par_iter()
                    .zip(batch.nir.par_iter().zip(batch.rgb.par_iter()))
                    .map(|(id, (nir, rgb))| {
                        let pair = crate::data::SamplePair::new(id.clone(), nir.clone(), Some(rgb.clone()))?;
                        augment(&pair, &spec.for_sample(seed, epoch, id))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (i, p) in pairs.into_iter().enumerate() {
                    batch.nir[i] = p.nir;
                    batch.rgb[i] = p.rgb.expect("paired sample keeps its RGB image");
                }
            }
            SampleMode::Unpaired => {
                let side = |ids: &[String], imgs: &[crate::colorspace::ImagePlane]| {
                    ids.par_iter()
                        .zip(imgs.par_iter())
                        .map(|(id, img)| augment_image(id, img, &spec.for_sample(seed, epoch, id)))
                        .collect::<Result<Vec<_>>>()
                };
                batch.nir = side(&batch.nir_ids, &batch.nir)?;
                batch.rgb = side(&batch.rgb_ids, &batch.rgb)?;
            }
        }
        Ok(batch)
    }

    fn plan_epoch(&mut self, dataset: &Dataset, epoch: usize) -> Result<Vec<BatchPlan>> {
        let paired = dataset.paired_indices();
        if paired.is_empty() {
            return Err(Error::Data("training needs at least one paired sample".into()));
        }
        let bs = self.config.batch_size;
        let paired_plans: Vec<BatchPlan> = epoch_batches(paired.len(), bs, &mut self.rng)
            .into_iter()
            .map(|b| BatchPlan::Paired(b.into_iter().map(|i| paired[i]).collect()))
            .collect();
        if epoch <= self.config.stage1_end {
            return Ok(paired_plans);
        }
        let mut nir_stream = IndexStream::new(dataset.nir_pool().len());
        let mut rgb_stream = IndexStream::new(dataset.rgb_pool().len());
        let mut plans = Vec::with_capacity(2 * paired_plans.len());
        for p in paired_plans {
            let n = match &p {
                BatchPlan::Paired(idx) => idx.len(),
                BatchPlan::Unpaired(..) => unreachable!(),
            };
            plans.push(p);
            let nir = nir_stream.take(n, &mut self.rng);
            let rgb = rgb_stream.take(n, &mut self.rng);
            plans.push(BatchPlan::Unpaired(nir, rgb));
        }
        Ok(plans)
    }

    /// Runs the next epoch; returns its log and the batches it consumed.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<(EpochLog, Vec<BatchRecord>)> {
        let epoch = self.epoch + 1;
        let lr = lr_at_epoch(epoch, &self.config)?;
        let started = Instant::now();
        let plans = self.plan_epoch(dataset, epoch)?;
        let mut records = Vec::with_capacity(plans.len());
        let mut sum = LossBreakdown::default();
        let (mut disc_a, mut disc_b) = (0.0, 0.0);
        let (mut paired, mut unpaired) = (0, 0);
        for plan in &plans {
            let batch = self.prepare(dataset, plan, epoch)?;
            let report = self.train_step(&batch, lr)?;
            match batch.mode {
                SampleMode::Paired => paired += 1,
                SampleMode::Unpaired => unpaired += 1,
            }
            let g = report.generator;
            sum.gan += g.gan;
            sum.pair += g.pair;
            sum.cyc += g.cyc;
            sum.edge += g.edge;
            sum.total += g.total;
            disc_a += report.disc_a;
            disc_b += report.disc_b;
            records.push(BatchRecord {
                epoch,
                step: self.step,
                kind: batch.mode,
                nir_ids: batch.nir_ids,
                rgb_ids: batch.rgb_ids,
            });
        }
        let n = plans.len() as f64;
        let log = EpochLog {
            epoch,
            stage: if epoch <= self.config.stage1_end { 1 } else { 2 },
            lr,
            generator: LossBreakdown {
                gan: sum.gan / n,
                pair: sum.pair / n,
                cyc: sum.cyc / n,
                edge: sum.edge / n,
                total: sum.total / n,
            },
            disc_a: disc_a / n,
            disc_b: disc_b / n,
            paired_batches: paired,
            unpaired_batches: unpaired,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.epoch = epoch;
        Ok((log, records))
    }

    /// Runs all remaining epochs, logging to `logs` when given.
    pub fn fit(&mut self, dataset: &Dataset, logs: Option<&TrainLogWriter>) -> Result<Vec<EpochLog>> {
        let mut out = Vec::new();
        while self.epoch < self.config.total_epochs {
            let (log, batches) = self.run_epoch(dataset)?;
            log::info!(
                "epoch {}/{} stage {} lr {:.3e} g_total {:.4} d {:.4} ({:.1}s)",
                log.epoch,
                self.config.total_epochs,
                log.stage,
                log.lr,
                log.generator.total,
                log.disc_a + log.disc_b,
                log.seconds
            );
            if let Some(w) = logs {
                w.record(&log, &batches)?;
            }
            out.push(log);
        }
        Ok(out)
    }

    /// Colorizes `nir` planes in batches, returning `y_rgb` per image.
    pub fn colorize_planes(&self, planes: &[crate::colorspace::ImagePlane]) -> Result<Vec<Tensor>> {
        colorize_planes(&self.model, planes, self.config.batch_size)
    }
}

/// Runs the colorization network over planes in chunks of `batch_size`
/// (images within a chunk must share a size).
pub fn colorize_planes(
    model: &Mcfnet,
    planes: &[crate::colorspace::ImagePlane],
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(planes.len());
    for chunk in planes.chunks(batch_size.max(1)) {
        let x = crate::data::stack_planes(chunk, model.dtype(), model.device())?;
        let y = model.colorize(&x)?.y_rgb;
        for i in 0..chunk.len() {
            out.push(y.get(i)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum BatchPlan {
    Paired(Vec<usize>),
    Unpaired(Vec<usize>, Vec<usize>),
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Trains from scratch. With `out_dir`, writes the logs and the final
/// checkpoint (`model.ckpt` plus its JSON sidecar) there.
pub fn train(config: TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    let logs = out_dir.map(TrainLogWriter::create).transpose()?;
    let epochs = trainer.fit(dataset, logs.as_ref())?;
    let checkpoint = trainer.checkpoint()?;
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { epochs, checkpoint })
}
