use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Parser, Subcommand, ValueEnum};
use geoinpaint::adapters::{train_stub_classifier, AdapterConfig, TaskAdapter};
use geoinpaint::checkpoint;
use geoinpaint::config::RunConfig;
use geoinpaint::data::{images_to_tensor, load_manifest, load_rgb, save_rgb, Dataset, LabelRef, Split};
use geoinpaint::mask::{load_seed_pool, synthesize_mask, OcclusionMask, OcclusionSpec};
use geoinpaint::train::{self, EvalMode, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "geoinpaint", version, about = "Occlusion-robust inpainting for remote-sensing tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate occlusion masks from a directory of seed masks.
    SynthesizeMasks {
        #[arg(long)]
        seeds: PathBuf,
        /// Allowed occluded-area fraction as `lo,hi`.
        #[arg(long, default_value = "0.15,0.60", value_parser = parse_spec)]
        spec: (f64, f64),
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side of the square output masks.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Train the generator and discriminators.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Generator)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Report path (JSON); a CSV is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Inpaint one image.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the small test classifier on the clean train split of a manifest.
    TrainStub {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Generator,
    Occluded,
    Clean,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn parse_spec(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if train::init_deterministic_mode() {
        log::info!("deterministic mode");
    }
    let cli = Cli::parse();
    let device = Device::Cpu;
    match cli.command {
        Command::SynthesizeMasks {
            seeds,
            spec,
            count,
            out,
            seed,
            size,
        } => synthesize(&seeds, OcclusionSpec::new(spec.0, spec.1), count, &out, seed, size),
        Command::Train { config, resume } => run_training(&config, resume.as_deref(), &device),
        Command::Evaluate {
            checkpoint,
            manifest,
            mode,
            split,
            out,
            batch_size,
        } => run_evaluation(&checkpoint, &manifest, mode, split, out, batch_size, &device),
        Command::Inpaint {
            checkpoint,
            image,
            mask,
            out,
        } => {
            let (generator, _, cfg) = checkpoint::load_generator(&checkpoint, &device)?;
            let img = load_rgb(&image)?;
            let m = OcclusionMask::load_png(&mask)?;
            if m.dims() != (img.dim().0, img.dim().1) {
                bail!("mask is {:?} but the image is {:?}", m.dims(), (img.dim().0, img.dim().1));
            }
            let result = train::inpaint(&generator, &img, &m, &device, cfg.precision.dtype())?;
            save_rgb(&out, &result)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Command::TrainStub {
            manifest,
            out,
            steps,
            lr,
            seed,
        } => {
            let manifest = load_manifest(&manifest)?;
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for r in manifest.split(Split::Train) {
                let LabelRef::Class(c) = r.label else {
                    bail!("the stub classifier needs class labels");
                };
                let img = load_rgb(&r.image)?;
                let s = manifest.image_size;
                images.push(geoinpaint::data::resize_bilinear(&img, s, s));
                labels.push(c);
            }
            if images.is_empty() {
                bail!("no training records in the manifest");
            }
            let classes = *labels.iter().max().unwrap_or(&0) as usize + 1;
            let cfg = AdapterConfig {
                seed,
                ..AdapterConfig::stub(classes)
            };
            let refs: Vec<_> = images.iter().collect();
            let x = images_to_tensor(&refs, &device, candle_core::DType::F32)?;
            let loss = train_stub_classifier(&cfg, &x, &labels, steps, lr, &out)?;
            log::info!("{classes}-class stub trained, final loss {loss:.4}; weights in {}", out.display());
            Ok(())
        }
    }
}

fn synthesize(seeds: &Path, spec: OcclusionSpec, count: usize, out: &Path, seed: u64, size: usize) -> Result<()> {
    spec.validate()?;
    let pool = load_seed_pool(seeds)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let mask = synthesize_mask(size, size, &pool, &spec, &mut rng)?;
        mask.save_png(out.join(format!("mask_{i:05}.png")))?;
    }
    log::info!("wrote {count} masks to {}", out.display());
    Ok(())
}

fn run_training(config: &Path, resume: Option<&Path>, device: &Device) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let manifest_path = cfg
        .paths
        .train_manifest
        .as_ref()
        .context("paths.train_manifest is not set")?;
    let manifest = load_manifest(manifest_path)?;
    if manifest.task != cfg.task || manifest.image_size != cfg.image_size() {
        bail!(
            "manifest is {:?} at {}px but the config is {:?} at {}px",
            manifest.task,
            manifest.image_size,
            cfg.task,
            cfg.image_size()
        );
    }
    let dataset = Dataset::from_manifest(&manifest, Split::Train)?;
    let ckpt_dir = cfg.paths.checkpoint_dir.clone().unwrap_or_else(|| PathBuf::from("checkpoints"));
    let mut trainer = match resume {
        Some(dir) => {
            let state = checkpoint::load(dir, &cfg, device)?;
            log::info!("resuming from step {}", state.step);
            Trainer::with_state(&cfg, dataset, state, device)?
        }
        None => Trainer::new(&cfg, dataset, device)?,
    };
    std::fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let log_path = cfg.paths.loss_log.clone().unwrap_or_else(|| ckpt_dir.join("losses.jsonl"));
    let file = File::options()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log_file = BufWriter::new(file);
    let save = |t: &Trainer| {
        let dir = ckpt_dir.join(format!("step-{:07}", t.state.step));
        checkpoint::save(&dir, &t.state, &t.cfg)?;
        log::info!("checkpoint {}", dir.display());
        Ok(())
    };
    let outcome = trainer.run(Some(&mut log_file), save);
    log_file.flush()?;
    let last = match outcome {
        Err(e @ geoinpaint::Error::NonFiniteLoss { .. }) => {
            // The check runs before any optimiser step, so this is the last good state.
            let dump = ckpt_dir.join(format!("nonfinite-step-{:07}", trainer.state.step + 1));
            checkpoint::save(&dump, &trainer.state, &cfg)?;
            return Err(anyhow::Error::new(e).context(format!("state before the failing step saved to {}", dump.display())));
        }
        other => other?,
    };
    let final_dir = ckpt_dir.join("final");
    checkpoint::save(&final_dir, &trainer.state, &cfg)?;
    match last {
        Some(b) => log::info!("finished at step {} (total loss {:.4}); saved {}", b.step, b.total, final_dir.display()),
        None => log::info!("nothing to do: already at step {}", trainer.state.step),
    }
    Ok(())
}

fn run_evaluation(
    ckpt: &Path,
    manifest: &Path,
    mode: ModeArg,
    split: SplitArg,
    out: Option<PathBuf>,
    batch_size: usize,
    device: &Device,
) -> Result<()> {
    let mode = match mode {
        ModeArg::Generator => EvalMode::Generator,
        ModeArg::Occluded => EvalMode::Occluded,
        ModeArg::Clean => EvalMode::Clean,
    };
    let (generator, _, cfg) = checkpoint::load_generator(ckpt, device)?;
    let manifest = load_manifest(manifest)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let dataset = Dataset::from_manifest(&manifest, split)?;
    let dtype = cfg.precision.dtype();
    let adapter = TaskAdapter::new(&cfg.adapter, device, dtype)?;
    let report = train::evaluate(Some(&generator), &dataset, &adapter, mode, batch_size, device, dtype)?;
    let out = out.unwrap_or_else(|| {
        cfg.paths
            .report_dir
            .clone()
            .unwrap_or_else(|| ckpt.to_path_buf())
            .join(format!("report-{}.json", mode.name()))
    });
    report.write(&out)?;
    println!("{}", report.to_json()?);
    log::info!("report written to {}", out.display());
    Ok(())
}
