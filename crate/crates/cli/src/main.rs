//! `segcn`: synthetic data, training, normalization and evaluation.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use walkdir::WalkDir;

use segcn_core::baselines::{
    lab_stats, macenko_fit_with, macenko_normalize_with_basis, reinhard_normalize,
};
use segcn_core::checkpoint::{self, MANIFEST};
use segcn_core::config::RunConfig;
use segcn_core::data::{
    generate_synthetic, load_patches, semantic_training_set, write_synthetic, DOMAIN_DIRS,
};
use segcn_core::guidance::pretrain_semantic_net;
use segcn_core::imaging::{ColorImage, Mask};
use segcn_core::metrics::{cwssim_with, nmi, ssim, structure_dice, ImageMetrics, MetricReport};
use segcn_core::networks::GuidanceMode;
use segcn_core::trainer::{
    fit, normalize_image, parameter_summary, predict_structure, FitOptions, TrainState,
    TrainingConfig, CHECKPOINT_DIR, LOSS_LOG,
};
use segcn_core::Error;

#[derive(Parser)]
#[command(name = "segcn", version, about = "Semantic-guided stain normalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-domain synthetic dataset.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the semantic net and train the generators.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding `domain_a/` and `domain_b/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Normalize every PNG under `--input` into a mirrored tree.
    Normalize {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference image for reinhard and macenko.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare normalized images with their originals.
    Evaluate {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        normalized: PathBuf,
        /// Ground-truth masks, mirrored like `--original`; needs `--checkpoint`.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// JSON report path; the CSV goes next to it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Segcn,
    Cyclegan,
    Reinhard,
    Macenko,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter(_) => Failure::Usage(e.to_string()),
            e => Failure::Run(e),
        }
    }
}

type CmdResult = Result<(), Failure>;
type Transform = Box<dyn Fn(&ColorImage) -> Result<ColorImage, Failure>>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::SynthData { config, out } => synth_data(config.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(config.as_deref(), &data, &out, resume),
        Command::Normalize {
            method,
            input,
            output,
            checkpoint,
            target,
            config,
        } => normalize(
            method,
            &input,
            &output,
            checkpoint.as_deref(),
            target.as_deref(),
            config.as_deref(),
        ),
        Command::Evaluate {
            original,
            normalized,
            masks,
            report,
            checkpoint,
            config,
        } => evaluate(
            &original,
            &normalized,
            masks.as_deref(),
            &report,
            checkpoint.as_deref(),
            config.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Failure::Usage(e.to_string()),
            e => e.into(),
        }),
    }
}

fn synth_data(config: Option<&Path>, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let ds = generate_synthetic(&cfg.data.synth)?;
    write_synthetic(&ds, out)?;
    for (name, samples) in DOMAIN_DIRS.iter().zip([&ds.domain_a, &ds.domain_b]) {
        let fg: usize = samples.iter().map(|s| s.mask.count()).sum();
        let px: usize = samples.iter().map(|s| s.mask.data.len()).sum();
        println!(
            "{name}: {} images, {} masks, foreground {:.3}",
            samples.len(),
            samples.len(),
            fg as f64 / px.max(1) as f64
        );
    }
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, resume: bool) -> CmdResult {
    let cfg = load_config(config)?;
    let p = cfg.training.patch_size;
    let a = load_patches(&data.join(DOMAIN_DIRS[0]), p)?;
    let b = load_patches(&data.join(DOMAIN_DIRS[1]), p)?;
    info!("loaded {} + {} patches of {p}×{p}", a.len(), b.len());
    let ckpt = out.join(CHECKPOINT_DIR);

    let mut state = if resume {
        if !ckpt.join(MANIFEST).exists() {
            return Err(Failure::Usage(format!(
                "--resume: no checkpoint in {}",
                ckpt.display()
            )));
        }
        let mut state = checkpoint::load(&ckpt)?;
        // Only the epoch budget may change between a run and its continuation.
        let same_training = TrainingConfig {
            epochs: cfg.training.epochs,
            ..state.training.clone()
        } == cfg.training;
        if state.model != cfg.model || !same_training {
            return Err(Failure::Usage(
                "--resume: the checkpoint was trained with a different configuration".into(),
            ));
        }
        state.training.epochs = cfg.training.epochs;
        info!("resuming from step {}", state.step);
        state
    } else {
        let (images01, masks) = semantic_training_set::<f32>(&[&a, &b])?;
        let (seg, report) = pretrain_semantic_net(
            &images01,
            &masks,
            cfg.model.semantic.clone(),
            &cfg.training.semantic_pretraining,
        )?;
        info!(
            "semantic net pretrained on {} images: final BCE {:.4}, held-out Dice {:.3} ({} images)",
            images01.batch(),
            report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            report.holdout_dice,
            report.holdout_count
        );
        TrainState::new(cfg.model.clone(), cfg.training.clone(), seg)?
    };
    for (name, count) in parameter_summary(&state) {
        info!("{name}: {count} parameters");
    }
    std::fs::create_dir_all(out).map_err(|e| {
        Failure::Run(Error::Io {
            path: out.to_path_buf(),
            source: e,
        })
    })?;
    let resolved = serde_json::to_string_pretty(&cfg).map_err(|e| Failure::Run(e.into()))?;
    std::fs::write(out.join("config.json"), resolved).map_err(|e| {
        Failure::Run(Error::Io {
            path: out.join("config.json"),
            source: e,
        })
    })?;

    let options = FitOptions {
        out_dir: Some(out.to_path_buf()),
        stop_at_step: None,
    };
    let log = fit(&mut state, &a.to_symmetric()?, &b.to_symmetric()?, &options)?;
    match log.last() {
        Some(last) => println!(
            "trained to step {}: total {:.4}, l_seg2 {:.4}; wrote {} and {}",
            last.step,
            last.total,
            last.l_seg2,
            out.join(LOSS_LOG).display(),
            ckpt.display()
        ),
        None => println!("already at step {}; wrote {}", state.step, ckpt.display()),
    }
    Ok(())
}

/// Accepts either a checkpoint directory or a training output directory.
fn load_checkpoint(path: &Path) -> Result<TrainState, Failure> {
    let dir = if path.join(MANIFEST).exists() {
        path.to_path_buf()
    } else {
        path.join(CHECKPOINT_DIR)
    };
    if !dir.join(MANIFEST).exists() {
        return Err(Failure::Usage(format!(
            "no checkpoint at {}",
            path.display()
        )));
    }
    Ok(checkpoint::load(&dir)?)
}

/// PNG files under `root`, as sorted paths relative to it.
fn png_tree(root: &Path) -> Result<Vec<PathBuf>, Failure> {
    if !root.is_dir() {
        return Err(Error::InvalidInput(format!("{} is not a directory", root.display())).into());
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry =
            entry.map_err(|e| Error::InvalidInput(format!("walking {}: {e}", root.display())))?;
        let path = entry.path();
        if entry.file_type().is_file()
            && path
                .extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        {
            out.push(
                path.strip_prefix(root)
                    .expect("walk stays under root")
                    .to_path_buf(),
            );
        }
    }
    Ok(out)
}

fn normalize(
    method: Method,
    input: &Path,
    output: &Path,
    checkpoint: Option<&Path>,
    target: Option<&Path>,
    config: Option<&Path>,
) -> CmdResult {
    let cfg = load_config(config)?;
    let files = png_tree(input)?;
    let apply: Transform = match method {
        Method::Segcn | Method::Cyclegan => {
            let path = checkpoint.ok_or_else(|| {
                Failure::Usage(format!("--method {method:?} needs --checkpoint").to_lowercase())
            })?;
            let state = load_checkpoint(path)?;
            let unguided = state.model.generator.guidance_mode == GuidanceMode::None;
            if unguided != (method == Method::Cyclegan) {
                warn!(
                    "checkpoint guidance mode {:?} does not match --method",
                    state.model.generator.guidance_mode
                );
            }
            let direction = cfg.eval.direction;
            Box::new(move |img| Ok(normalize_image(img, &state, direction)?))
        }
        Method::Reinhard => {
            let t = ColorImage::load(
                target.ok_or_else(|| Failure::Usage("--method reinhard needs --target".into()))?,
            )?;
            let stats = lab_stats(&t);
            Box::new(move |img| Ok(reinhard_normalize(img, &stats)))
        }
        Method::Macenko => {
            let t = ColorImage::load(
                target.ok_or_else(|| Failure::Usage("--method macenko needs --target".into()))?,
            )?;
            let mcfg = cfg.eval.macenko;
            let basis = macenko_fit_with(&t, &mcfg)?;
            Box::new(move |img| match macenko_fit_with(img, &mcfg) {
                Ok(src) => Ok(macenko_normalize_with_basis(img, &src, &basis)?),
                Err(e @ (Error::NoTissue(_) | Error::DegenerateStains(_))) => {
                    warn!("copying unchanged: {e}");
                    Ok(img.clone())
                }
                Err(e) => Err(e.into()),
            })
        }
    };
    for rel in &files {
        let img = ColorImage::load(&input.join(rel))?;
        apply(&img)?.save(&output.join(rel))?;
    }
    println!(
        "normalized {} images into {}",
        files.len(),
        output.display()
    );
    Ok(())
}

fn evaluate(
    original: &Path,
    normalized: &Path,
    masks: Option<&Path>,
    report: &Path,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
) -> CmdResult {
    if report
        .extension()
        .is_some_and(|x| x.eq_ignore_ascii_case("csv"))
    {
        return Err(Failure::Usage(
            "--report names the JSON file; the CSV is written beside it".into(),
        ));
    }
    let cfg = load_config(config)?;
    let seg = match (masks, checkpoint) {
        (Some(_), None) => {
            return Err(Failure::Usage(
                "--masks needs --checkpoint for the semantic net".into(),
            ))
        }
        (Some(_), Some(c)) => Some(load_checkpoint(c)?.seg),
        (None, _) => None,
    };
    let files = png_tree(normalized)?;
    if files.is_empty() {
        return Err(
            Error::InvalidInput(format!("no PNG images under {}", normalized.display())).into(),
        );
    }
    let mut per_image = Vec::with_capacity(files.len());
    for rel in &files {
        let norm = ColorImage::load(&normalized.join(rel))?;
        let orig = ColorImage::load(&original.join(rel))?;
        let nmi = match nmi(&norm) {
            Ok(v) => Some(v),
            Err(Error::NoTissue(_)) => {
                warn!("{}: no tissue, NMI skipped", rel.display());
                None
            }
            Err(e) => return Err(e.into()),
        };
        let dice = match (&seg, masks) {
            (Some(seg), Some(dir)) => {
                let truth = Mask::load(&dir.join(rel))?;
                Some(structure_dice(&truth, &predict_structure(&norm, seg)?)?)
            }
            _ => None,
        };
        per_image.push(ImageMetrics {
            name: rel.to_string_lossy().into_owned(),
            nmi,
            cwssim: Some(cwssim_with(&orig, &norm, &cfg.eval.cwssim)?),
            ssim: Some(ssim(&orig, &norm)?),
            dice,
        });
    }
    let label = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let rep = MetricReport::new(
        &label(normalized),
        &label(original),
        cfg.training.seed,
        per_image,
    )?;
    let json = serde_json::to_string_pretty(&rep).map_err(|e| Failure::Run(e.into()))?;
    let csv_path = report.with_extension("csv");
    for (path, text) in [(report, json), (csv_path.as_path(), rep.to_csv())] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| {
                Failure::Run(Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })
            })?;
        }
        std::fs::write(path, text).map_err(|e| {
            Failure::Run(Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })?;
    }
    for (name, a) in &rep.aggregates {
        println!("{name}: mean {:.4}, sd {:.4}, cv {:.4}", a.mean, a.sd, a.cv);
    }
    println!("wrote {} and {}", report.display(), csv_path.display());
    Ok(())
}
