//! Adversarial training loop, checkpoints and resumption.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{NamedTensors, RngState, TensorArchive};
use crate::config::Config;
use crate::data::{augment, DatasetItem};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::losses::{
    feature_matching_from_outputs, hinge_d_loss, hinge_g_loss, kld_loss, perceptual_loss, total_generator_loss,
    LossParts, LossReport,
};
use crate::maskgen::derive_seed;
use crate::metrics::{embed_set, fid, ssim_signed};
use crate::network::{array_batch_to_tensor, reparameterize, tensor_to_arrays, BatchConditions, SianModel};
use crate::nn::{scalar, Adam, ParamStore};

pub const CHECKPOINT_FILE: &str = "checkpoint.sian";
pub const LOG_FILE: &str = "train_log.jsonl";

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_4700;
const NOISE_STREAM: u64 = 0x4e4f_4953;
const SPLIT_STREAM: u64 = 0x5350_4c54;

/// Real images with their conditioning, ready for a forward pass.
pub struct Batch {
    pub images: Tensor,
    pub conditions: BatchConditions,
}

impl Batch {
    pub fn from_items(items: &[DatasetItem], model: &SianModel) -> Result<Self> {
        let size = model.config.image_size;
        for it in items {
            let (_, h, w) = it.image.dim();
            if (h, w) != (size, size) {
                return Err(Error::shape(format!("{size}x{size} patches"), format!("{h}x{w} ({})", it.source)));
            }
        }
        let images: Vec<&Array3<f32>> = items.iter().map(|i| &i.image).collect();
        let maps: Vec<_> = items.iter().map(DatasetItem::maps).collect();
        Ok(Self {
            images: array_batch_to_tensor(&images, model.dtype())?,
            conditions: BatchConditions::from_maps(&maps, &model.config.level_sizes(), model.dtype())?,
        })
    }
}

/// Position in the epoch/batch schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    /// Index of the next batch within `epoch`.
    pub batch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: String,
    progress: Progress,
    adam_g: AdamMeta,
    adam_d: AdamMeta,
    noise_rng: RngState,
}

const CHECKPOINT_KIND: &str = "sian-train-state";

/// Model, optimizers and every piece of state a resumed run needs.
pub struct Trainer {
    pub config: Config,
    pub model: SianModel,
    pub extractor: FeatureExtractor,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Source of the reparameterization noise.
    pub noise_rng: ChaCha8Rng,
    pub progress: Progress,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let model = SianModel::new(config.network.clone(), DType::F32, t.seed)?;
        let extractor = FeatureExtractor::from_config(&config.extractor, DType::F32)?;
        Ok(Self {
            opt_g: Adam::new(t.lr_g, t.beta1, t.beta2),
            opt_d: Adam::new(t.lr_d, t.beta1, t.beta2),
            noise_rng: ChaCha8Rng::seed_from_u64(derive_seed(t.seed, NOISE_STREAM)),
            progress: Progress::default(),
            model,
            extractor,
            config,
        })
    }

    /// One discriminator update followed by one generator+encoder update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        check_parameters(&self.model.store)?;
        let m = &self.model;
        let real = &batch.images;
        let cond = &batch.conditions;
        let posterior = m.encoder.forward(real)?;
        let style = reparameterize(&posterior, &mut self.noise_rng)?;
        let fake = m.generator.forward(&style.sample, &cond.levels)?;

        let d_real = m.discriminator.forward(real, &cond.full)?;
        let d_fake = m.discriminator.forward(&fake.detach(), &cond.full)?;
        let d_loss = hinge_d_loss(&logits(&d_real), &logits(&d_fake))?;
        let d_value = scalar(&d_loss)?;
        if !d_value.is_finite() {
            return Err(Error::NonFinite("discriminator loss".into()));
        }
        let grads = d_loss.backward()?;
        check_gradients(&m.store, &grads, &SianModel::DISCRIMINATOR_PREFIXES, "discriminator loss")?;
        self.opt_d.step(&m.store, &grads, &SianModel::DISCRIMINATOR_PREFIXES)?;

        let d_real = m.discriminator.forward(real, &cond.full)?;
        let d_fake = m.discriminator.forward(&fake, &cond.full)?;
        let parts = LossParts {
            gan: hinge_g_loss(&logits(&d_fake))?,
            feature_match: feature_matching_from_outputs(&d_real, &d_fake)?,
            perceptual: perceptual_loss(real, &fake, &self.extractor)?,
            kld: kld_loss(&style)?,
            reg: self
                .config
                .train
                .regularizer
                .penalty(&m.store, &SianModel::GENERATOR_PREFIXES)?,
        };
        let (total, mut report) = total_generator_loss(&parts, &self.config.loss)?;
        let grads = total.backward()?;
        check_gradients(&m.store, &grads, &SianModel::GENERATOR_PREFIXES, "generator loss")?;
        self.opt_g.step(&m.store, &grads, &SianModel::GENERATOR_PREFIXES)?;
        report.discriminator = d_value;
        self.progress.step += 1;
        Ok(report)
    }

    /// Reconstructions of `items` with their own encoded style (posterior
    /// mean), generated in batches of the training batch size.
    pub fn reconstruct(&self, items: &[DatasetItem]) -> Result<Vec<Array3<f32>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(self.config.train.batch_size) {
            let batch = Batch::from_items(chunk, &self.model)?;
            let style = self.model.encoder.forward(&batch.images)?;
            let fake = self.model.generator.forward(&style.mu, &batch.conditions.levels)?;
            out.extend(tensor_to_arrays(&fake.detach())?);
        }
        Ok(out)
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut tensors = NamedTensors::new();
        for (k, v) in self.model.store.snapshot()? {
            tensors.insert(format!("param.{k}"), v);
        }
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            for (moment, map) in [("m", &opt.first_moment), ("v", &opt.second_moment)] {
                for (name, t) in map {
                    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                    tensors.insert(format!("{tag}.{moment}.{name}"), (t.dims().to_vec(), data));
                }
            }
        }
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.to_toml(),
            progress: self.progress,
            adam_g: adam_meta(&self.opt_g),
            adam_d: adam_meta(&self.opt_d),
            noise_rng: RngState::capture(&self.noise_rng),
        };
        Ok(TensorArchive {
            meta: serde_json::to_value(meta).expect("metadata serializes"),
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn from_archive(archive: &TensorArchive, origin: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone()).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            reason: format!("checkpoint metadata: {e}"),
        })?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Format {
                path: origin.to_path_buf(),
                reason: format!("unexpected checkpoint kind {:?}", meta.kind),
            });
        }
        let config = Config::from_toml_str(&meta.config)?;
        let mut trainer = Self::new(config)?;
        let params = strip_prefix(&archive.tensors, "param.");
        trainer.model.store.load_snapshot(&params)?;
        for (tag, opt, m) in [("adam_g", &mut trainer.opt_g, meta.adam_g), ("adam_d", &mut trainer.opt_d, meta.adam_d)] {
            opt.lr = m.lr;
            opt.beta1 = m.beta1;
            opt.beta2 = m.beta2;
            opt.eps = m.eps;
            opt.step = m.step;
            opt.first_moment = to_tensors(&strip_prefix(&archive.tensors, &format!("{tag}.m.")), &trainer.model.store)?;
            opt.second_moment = to_tensors(&strip_prefix(&archive.tensors, &format!("{tag}.v.")), &trainer.model.store)?;
        }
        trainer.noise_rng = meta.noise_rng.restore()?;
        trainer.progress = meta.progress;
        Ok(trainer)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?, path)
    }
}

fn adam_meta(opt: &Adam) -> AdamMeta {
    AdamMeta {
        lr: opt.lr,
        beta1: opt.beta1,
        beta2: opt.beta2,
        eps: opt.eps,
        step: opt.step,
    }
}

fn strip_prefix(tensors: &NamedTensors, prefix: &str) -> NamedTensors {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

fn to_tensors(values: &NamedTensors, store: &ParamStore) -> Result<std::collections::BTreeMap<String, Tensor>> {
    values
        .iter()
        .map(|(name, (dims, data))| {
            let var = store
                .get(name)
                .ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter {name}")))?;
            if var.dims() != dims.as_slice() {
                return Err(Error::shape(format!("{name} {:?}", var.dims()), format!("{dims:?}")));
            }
            let t = Tensor::from_slice(data, dims.as_slice(), store.device())?.to_dtype(store.dtype())?;
            Ok((name.clone(), t))
        })
        .collect()
}

fn logits(outputs: &[crate::network::DiscriminatorOutput]) -> Vec<Tensor> {
    outputs.iter().map(|o| o.logits.clone()).collect()
}

/// Fails on the first parameter whose gradient holds a NaN or infinity.
fn check_parameters(store: &ParamStore) -> Result<()> {
    for (name, var) in store.iter() {
        if !scalar(&var.as_tensor().abs()?.sum_all()?)?.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
    }
    Ok(())
}

fn check_gradients(store: &ParamStore, grads: &GradStore, prefixes: &[&str], objective: &str) -> Result<()> {
    for (name, var) in store.iter() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        if let Some(g) = grads.get(var) {
            if !scalar(&g.abs()?.sum_all()?)?.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name} under the {objective}")));
            }
        }
    }
    Ok(())
}

/// Splits items by source id so no source contributes to both sides.
/// Returns `(train, holdout)` index lists.
pub fn holdout_split(items: &[DatasetItem], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let sources: BTreeSet<&str> = items.iter().map(|i| i.source.as_str()).collect();
    let mut sources: Vec<&str> = sources.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_STREAM));
    sources.shuffle(&mut rng);
    let mut held = (fraction * sources.len() as f64).round() as usize;
    if fraction > 0.0 && sources.len() >= 2 {
        held = held.clamp(1, sources.len() - 1);
    } else {
        held = 0;
    }
    let held: BTreeSet<&str> = sources[..held].iter().copied().collect();
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for (i, it) in items.iter().enumerate() {
        if held.contains(it.source.as_str()) {
            hold.push(i);
        } else {
            train.push(i);
        }
    }
    (train, hold)
}

/// Visiting order of the training items in `epoch`.
pub fn epoch_order(count: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, SHUFFLE_STREAM), epoch));
    order.shuffle(&mut rng);
    order
}

/// Seed of the augmentation applied to the item at `position` of `epoch`.
pub fn augment_seed(seed: u64, epoch: u64, position: u64) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, AUGMENT_STREAM), epoch), position)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: u64,
        loss: LossReport,
    },
    Eval {
        step: u64,
        epoch: u64,
        count: usize,
        ssim: f64,
        fid: Option<f64>,
        extractor: String,
    },
}

pub struct TrainOptions<'a> {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
    /// Polled between steps; when set the run checkpoints and stops.
    pub interrupt: Option<&'a AtomicBool>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub records: Vec<LogRecord>,
    pub progress: Progress,
}

/// Runs the epoch loop until `train.epochs` or `train.max_steps` is reached.
/// When resuming, everything but those two limits comes from the checkpoint.
pub fn train(items: &[DatasetItem], config: &Config, options: &TrainOptions<'_>) -> Result<TrainOutcome> {
    let mut trainer = match &options.resume {
        Some(p) => {
            let mut t = Trainer::load(p)?;
            t.config.train.epochs = config.train.epochs;
            t.config.train.max_steps = config.train.max_steps;
            t
        }
        None => Trainer::new(config.clone())?,
    };
    run(&mut trainer, items, options)
}

pub fn run(trainer: &mut Trainer, items: &[DatasetItem], options: &TrainOptions<'_>) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let t = trainer.config.train.clone();
    let (train_idx, hold_idx) = holdout_split(items, t.holdout_fraction, t.seed);
    let holdout: Vec<DatasetItem> = hold_idx.iter().map(|&i| items[i].clone()).collect();
    fs::create_dir_all(&options.out_dir).map_err(|e| Error::io(&options.out_dir, e))?;
    let ckpt = options.out_dir.join(CHECKPOINT_FILE);
    let log_path = options.out_dir.join(LOG_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut records = Vec::new();
    let mut emit = |rec: LogRecord, records: &mut Vec<LogRecord>| -> Result<()> {
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        records.push(rec);
        Ok(())
    };
    let batches_per_epoch = train_idx.len().div_ceil(t.batch_size) as u64;
    let step_limit = t.max_steps.unwrap_or(u64::MAX);
    'epochs: while trainer.progress.epoch < t.epochs {
        let epoch = trainer.progress.epoch;
        let order = epoch_order(train_idx.len(), t.seed, epoch);
        while trainer.progress.batch < batches_per_epoch {
            if trainer.progress.step >= step_limit {
                break 'epochs;
            }
            if options.interrupt.is_some_and(|f| f.load(Ordering::SeqCst)) {
                trainer.save(&ckpt)?;
                return Err(Error::Interrupted {
                    step: trainer.progress.step,
                    checkpoint: ckpt,
                });
            }
            let start = trainer.progress.batch as usize * t.batch_size;
            let end = (start + t.batch_size).min(order.len());
            let batch_items: Vec<DatasetItem> = (start..end)
                .map(|pos| {
                    let mut rng = ChaCha8Rng::seed_from_u64(augment_seed(t.seed, epoch, pos as u64));
                    augment(&items[train_idx[order[pos]]], &mut rng, &trainer.config.augment)
                })
                .collect();
            let batch = Batch::from_items(&batch_items, &trainer.model)?;
            let loss = trainer.train_step(&batch)?;
            trainer.progress.batch += 1;
            emit(
                LogRecord::Step {
                    step: trainer.progress.step,
                    epoch,
                    loss,
                },
                &mut records,
            )?;
            if t.checkpoint_every > 0 && trainer.progress.step.is_multiple_of(t.checkpoint_every) {
                trainer.save(&ckpt)?;
            }
        }
        trainer.progress.epoch += 1;
        trainer.progress.batch = 0;
        if t.eval_every > 0 && trainer.progress.epoch.is_multiple_of(t.eval_every) && !holdout.is_empty() {
            let rec = evaluate_holdout(trainer, &holdout)?;
            emit(rec, &mut records)?;
        }
    }
    trainer.save(&ckpt)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        records,
        progress: trainer.progress,
    })
}

/// Reconstruction SSIM and FID on held-out items.
pub fn evaluate_holdout(trainer: &Trainer, holdout: &[DatasetItem]) -> Result<LogRecord> {
    let fakes = trainer.reconstruct(holdout)?;
    let reals: Vec<Array3<f32>> = holdout.iter().map(|i| i.image.clone()).collect();
    let ssim = reals
        .iter()
        .zip(&fakes)
        .map(|(r, f)| ssim_signed(r.view(), f.view()))
        .sum::<Result<f64>>()?
        / reals.len() as f64;
    let fid_value = if reals.len() >= 2 {
        Some(fid(&embed_set(&reals, &trainer.extractor)?, &embed_set(&fakes, &trainer.extractor)?)?)
    } else {
        None
    };
    Ok(LogRecord::Eval {
        step: trainer.progress.step,
        epoch: trainer.progress.epoch,
        count: reals.len(),
        ssim,
        fid: fid_value,
        extractor: trainer.extractor.identity.clone(),
    })
}
