//! `sian` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sian_core::config::Config;
use sian_core::data::{self, read_rgb_png, write_rgb_png};
use sian_core::downstream::{run_augmentation_experiment, synthesize_set};
use sian_core::extractor::FeatureExtractor;
use sian_core::featurize::featurize;
use sian_core::mask::InstanceMask;
use sian_core::maskgen::generate_mask_dataset;
use sian_core::metrics::{evaluate_sets, EvalSets};
use sian_core::synthesize::{StoredStyle, StyleSource, Synthesizer};
use sian_core::train::{train, TrainOptions};
use sian_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sian", version, about = "Mask-conditioned histopathology image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a configuration value by dotted path, e.g. `train.lr_g=2e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed; sets train.seed, maskgen.layout.seed and segmenter.seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut overrides = Vec::new();
        if let Some(s) = self.seed {
            for key in ["train.seed", "maskgen.layout.seed", "segmenter.seed"] {
                overrides.push(format!("{key}={s}"));
            }
        }
        overrides.extend(self.set.iter().cloned());
        Config::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute the semantic, direction and distance maps of a mask.
    Featurize {
        #[command(flatten)]
        common: Common,
        /// 16-bit instance mask PNG.
        #[arg(long)]
        mask: PathBuf,
        /// Output condition-map container.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic instance masks.
    Maskgen {
        #[command(flatten)]
        common: Common,
        /// Number of masks to write.
        #[arg(long)]
        count: usize,
        /// Output directory for mask PNGs and manifest.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator, encoder and discriminator.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory with image/mask pairs.
        #[arg(long)]
        data: PathBuf,
        /// Directory for the checkpoint and log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint. Only train.epochs and train.max_steps
        /// are taken from the current config; the rest comes from the checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Skip unreadable items instead of failing.
        #[arg(long)]
        partial: bool,
    },
    /// Generate images from instance masks.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask PNG, or a directory whose PNGs are all synthesized.
        #[arg(long)]
        mask: PathBuf,
        /// Reference image whose style is encoded.
        #[arg(long, conflicts_with = "style", required_unless_present = "style")]
        style_image: Option<PathBuf>,
        /// Stored style vector (JSON with `mu` and `logvar`).
        #[arg(long)]
        style: Option<PathBuf>,
        /// Write the encoded style of `--style-image` here.
        #[arg(long)]
        save_style: Option<PathBuf>,
        /// Draw the style code instead of using the posterior mean.
        #[arg(long)]
        sample: bool,
        /// Output PNG, or a directory when `--mask` is a directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated images against real ones.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of real images; an optional dataset.jsonl supplies organ tags.
        #[arg(long)]
        real: PathBuf,
        /// Directory of generated images, paired with `--real` in name order.
        #[arg(long)]
        fake: PathBuf,
        /// Ground-truth instance masks, in name order.
        #[arg(long, requires = "pred_masks")]
        gt_masks: Option<PathBuf>,
        /// Predicted instance masks, in name order.
        #[arg(long, requires = "gt_masks")]
        pred_masks: Option<PathBuf>,
        /// JSON report path; a CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare segmenters trained with and without synthetic data.
    AugmentExperiment {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Real training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Test dataset directory.
        #[arg(long)]
        test: PathBuf,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Featurize { common, mask, out } => {
            common.load()?;
            let m = InstanceMask::read_png(&mask)?;
            featurize(&m).save(&out)?;
            log::info!("wrote condition maps of {} to {}", mask.display(), out.display());
        }
        Command::Maskgen { common, count, out } => {
            let cfg = common.load()?;
            let entries = generate_mask_dataset(count, &cfg.maskgen.layout, &cfg.maskgen.nucleus, &out)?;
            log::info!("wrote {} masks to {}", entries.len(), out.display());
        }
        Command::Train {
            common,
            data: dir,
            out,
            resume,
            partial,
        } => {
            let cfg = common.load()?;
            let report = data::ingest(&dir, cfg.network.image_size, partial)?;
            if report.items.is_empty() {
                return Err(Error::Invalid(format!("no training items in {}", dir.display())));
            }
            let flag = Arc::new(AtomicBool::new(false));
            let handler_flag = flag.clone();
            if let Err(e) = ctrlc::set_handler(move || handler_flag.store(true, Ordering::SeqCst)) {
                log::warn!("cannot install interrupt handler: {e}");
            }
            let outcome = train(
                &report.items,
                &cfg,
                &TrainOptions {
                    out_dir: out,
                    resume,
                    interrupt: Some(&flag),
                },
            )?;
            log::info!(
                "finished at step {} (epoch {}); checkpoint {}",
                outcome.progress.step,
                outcome.progress.epoch,
                outcome.checkpoint.display()
            );
        }
        Command::Synthesize {
            common,
            checkpoint,
            mask,
            style_image,
            style,
            save_style,
            sample,
            out,
        } => {
            let cfg = common.load()?;
            let synth = Synthesizer::load(&checkpoint)?;
            let stored = match (&style_image, &style) {
                (Some(p), _) => synth.encode(&read_rgb_png(p)?)?,
                (None, Some(p)) => StoredStyle::load(p)?,
                (None, None) => return Err(Error::Config("one of --style-image or --style is required".into())),
            };
            if let Some(p) = &save_style {
                stored.save(p)?;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let jobs: Vec<(PathBuf, PathBuf)> = if mask.is_dir() {
                std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
                png_files(&mask)?
                    .into_iter()
                    .map(|m| {
                        let name = m.file_name().expect("listed file has a name").to_owned();
                        (m, out.join(name))
                    })
                    .collect()
            } else {
                vec![(mask.clone(), out.clone())]
            };
            for (m, o) in &jobs {
                let inst = InstanceMask::read_png(m)?;
                let img = synth.synthesize(StyleSource::Stored(&stored), &inst, sample.then_some(&mut rng))?;
                write_rgb_png(o, &img)?;
            }
            log::info!("synthesized {} image(s)", jobs.len());
        }
        Command::Evaluate {
            common,
            real,
            fake,
            gt_masks,
            pred_masks,
            out,
        } => {
            let cfg = common.load()?;
            let real_files = png_files(&real)?;
            let fake_files = png_files(&fake)?;
            if real_files.len() != fake_files.len() {
                return Err(Error::Invalid(format!(
                    "{} real images in {} but {} generated images in {}",
                    real_files.len(),
                    real.display(),
                    fake_files.len(),
                    fake.display()
                )));
            }
            let read_all = |files: &[PathBuf]| files.iter().map(|p| read_rgb_png(p)).collect::<Result<Vec<_>>>();
            let reals = read_all(&real_files)?;
            let fakes = read_all(&fake_files)?;
            let read_masks = |dir: &Path| {
                png_files(dir)?
                    .iter()
                    .map(InstanceMask::read_png)
                    .collect::<Result<Vec<_>>>()
            };
            let (gt, pred) = match (&gt_masks, &pred_masks) {
                (Some(g), Some(p)) => (read_masks(g)?, Some(read_masks(p)?)),
                _ => (Vec::new(), None),
            };
            let organs = organ_tags(&real, &real_files)?;
            let extractor = FeatureExtractor::from_config(&cfg.extractor, sian_core::DType::F32)?;
            let report = evaluate_sets(
                &EvalSets {
                    real: &reals,
                    fake: &fakes,
                    gt_masks: &gt,
                    pred_masks: pred.as_deref(),
                    organs: organs.as_deref(),
                },
                &extractor,
            )?;
            report.check_invariants()?;
            write_text(&out, &report.to_json())?;
            write_text(&out.with_extension("csv"), &report.to_csv())?;
            log::info!("wrote {}", out.display());
        }
        Command::AugmentExperiment {
            common,
            checkpoint,
            data: dir,
            test,
            out,
        } => {
            let cfg = common.load()?;
            let synth = Synthesizer::load(&checkpoint)?;
            let size = synth.image_size();
            let train_items = data::ingest(&dir, size, false)?.items;
            let test_items = data::ingest(&test, size, false)?.items;
            if train_items.is_empty() || test_items.is_empty() {
                return Err(Error::Invalid("training and test sets must both be non-empty".into()));
            }
            let s = &cfg.segmenter;
            let synthetic = synthesize_set(&synth, &train_items, s.synthetic_per_organ, s.styles_per_organ, &cfg.maskgen, s.seed)?;
            let report = run_augmentation_experiment(&train_items, &synthetic, &test_items, s, &cfg.augment)?;
            std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            write_text(&out.join("report.json"), &report.to_json())?;
            write_text(&out.join("report.csv"), &report.to_csv())?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// PNG files of `dir` in name order, skipping `*_mask.png`.
fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("directory {} does not exist", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".png") && !n.ends_with("_mask.png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Organ tags of `files` from the directory's dataset manifest, if any.
fn organ_tags(dir: &Path, files: &[PathBuf]) -> Result<Option<Vec<String>>> {
    if !dir.join(data::DATASET_MANIFEST).exists() {
        return Ok(None);
    }
    let (entries, _) = data::list_pairs(dir)?;
    let tags = files
        .iter()
        .map(|f| {
            let name = f.file_name().map(PathBuf::from);
            entries
                .iter()
                .find(|e| Some(&e.image) == name.as_ref())
                .and_then(|e| e.organ.clone())
                .unwrap_or_else(|| data::UNKNOWN_ORGAN.to_string())
        })
        .collect();
    Ok(Some(tags))
}
