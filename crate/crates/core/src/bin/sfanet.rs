use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sfanet::checkpoint::load_checkpoint;
use sfanet::config::{Config, Preset};
use sfanet::data::{load_dataset, render_targets, Entry};
use sfanet::eval::{self, evaluate, export_maps, predict_image, EvalResult, ImageResult, RawMap};
use sfanet::gradcheck::{self, GradCheckConfig};
use sfanet::groundtruth::{render_attention, render_density};
use sfanet::imaging::{Image, Mask};
use sfanet::model::Model;
use sfanet::training::Trainer;
use sfanet::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "sfanet", version, about = "Crowd counting with dual-path attention")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base settings: desk, parta, partb, qnrf or ucsd.
    #[arg(long, global = true)]
    preset: Option<Preset>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render density and attention targets for every image of a manifest.
    GenGt {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write half-resolution targets.
        #[arg(long)]
        half: bool,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// Continue from a checkpoint written by `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint, or precomputed density sidecars, on a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required_unless_present = "pred_dir")]
        checkpoint: Option<PathBuf>,
        /// Read `<image_id>_density.sfdm` predictions from here instead of
        /// running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        roi: Option<PathBuf>,
    },
    /// Count one image and export its maps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        roi: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    GradCheck,
    /// Write the synthetic blob dataset.
    Synth,
}

fn load_config(common: &Common, beside: Option<&Path>) -> Result<Config> {
    let base = Config::preset(common.preset.unwrap_or(Preset::PartB));
    let mut cfg = match (&common.config, beside) {
        (Some(path), _) => Config::load(path, &base)?,
        (None, Some(dir)) if dir.join("config.toml").is_file() => {
            let path = dir.join("config.toml");
            log::info!("using {}", path.display());
            Config::load(path, &base)?
        }
        _ => {
            let mut c = base;
            c.finish()?;
            c
        }
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.augment.seed = seed;
        cfg.model.init_seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn load_roi(path: Option<&PathBuf>) -> Result<Option<Mask>> {
    path.map(Mask::load).transpose()
}

fn load_model(cfg: &Config, checkpoint: &Path) -> Result<Model<f32>> {
    let mut model = Model::new(cfg.model.clone())?;
    load_checkpoint(checkpoint, &mut model, true)?;
    Ok(model)
}

fn gen_gt(cfg: &Config, common: &Common, manifest: &Path, half: bool) -> Result<()> {
    let dir = out_dir(common, "gt")?;
    let entries = load_dataset(manifest, &cfg.groundtruth, &cfg.data.ingest)?;
    for e in &entries {
        let density = render_density(&e.annotation, &e.kernel);
        let attention = render_attention(
            &density,
            &cfg.groundtruth.attention_kernel,
            cfg.groundtruth.attention_threshold,
        )?;
        let stem = dir.join(e.id());
        let raw = RawMap {
            width: density.width,
            height: density.height,
            values: density.values.iter().map(|&v| v as f32).collect(),
        };
        raw.write(with_suffix(&stem, "_density.sfdm"))?;
        save_gray(&raw.to_gray_normalized(), &with_suffix(&stem, "_density.pgm"))?;
        let att = RawMap {
            width: attention.width,
            height: attention.height,
            values: attention.values.iter().map(|&v| v as f32).collect(),
        };
        save_gray(&att.to_gray_unit(), &with_suffix(&stem, "_attention.pgm"))?;
        if half {
            let (d, a) = render_targets(
                e.id(),
                e.image.width,
                e.image.height,
                &e.annotation.points,
                &e.kernel,
                &cfg.groundtruth,
            )?;
            let (h, w) = (d.shape()[1], d.shape()[2]);
            RawMap::from_tensor(&d, w, h).write(with_suffix(&stem, "_density_half.sfdm"))?;
            save_gray(
                &RawMap::from_tensor(&a, w, h).to_gray_unit(),
                &with_suffix(&stem, "_attention_half.pgm"),
            )?;
        }
        println!("{} {} heads, density sum {:.6}", e.id(), e.annotation.count(), density.sum());
    }
    Ok(())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn save_gray(img: &image::GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn train(
    mut cfg: Config,
    common: &Common,
    train_manifest: Option<PathBuf>,
    val_manifest: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let absolute = |p: PathBuf| std::path::absolute(&p).unwrap_or(p);
    if let Some(m) = train_manifest {
        cfg.data.train_manifest = Some(absolute(m));
    }
    if let Some(m) = val_manifest {
        cfg.data.val_manifest = Some(absolute(m));
    }
    let manifest = cfg.data.train_manifest.clone().ok_or_else(|| {
        Error::InvalidArgument("no training manifest (set data.train_manifest or --train-manifest)".into())
    })?;
    let dir = out_dir(common, "run")?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::Io {
        path: config_path,
        source: e,
    })?;
    let mut train_set = load_dataset(&manifest, &cfg.groundtruth, &cfg.data.ingest)?;
    let mut val_set: Vec<Entry> = match &cfg.data.val_manifest {
        Some(m) => load_dataset(m, &cfg.groundtruth, &cfg.data.ingest)?,
        None => Vec::new(),
    };
    if let Some(roi) = load_roi(cfg.data.roi.as_ref())? {
        for e in train_set.iter_mut().chain(val_set.iter_mut()) {
            e.roi.get_or_insert_with(|| roi.resize_nearest(e.image.width, e.image.height));
        }
    }
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    log::info!(
        "{} parameters, {} training images, {} validation images",
        model.parameter_count(),
        train_set.len(),
        val_set.len()
    );
    let mut trainer = Trainer::new(
        cfg.train.clone(),
        cfg.augment.clone(),
        cfg.groundtruth.clone(),
        cfg.normalization,
        &model,
    )?;
    trainer.out_dir = Some(dir.clone());
    if let Some(ck) = resume {
        trainer.resume(&mut model, &ck)?;
        log::info!("resumed at step {}", trainer.state.step);
    }
    let report = trainer.run(&mut model, &train_set, &val_set)?;
    if let Some(last) = report.steps.last() {
        println!(
            "step {} L={:.6} L_den={:.6} L_att={:.6}",
            last.step, last.loss, last.loss_den, last.loss_att
        );
    }
    if let Some(b) = report.best_mae {
        println!("best validation MAE {b:.4}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval_cmd(
    cfg: &Config,
    common: &Common,
    manifest: &Path,
    checkpoint: Option<&Path>,
    pred_dir: Option<&Path>,
    roi: Option<&PathBuf>,
) -> Result<()> {
    let roi = load_roi(roi.or(cfg.data.roi.as_ref()))?;
    let entries = load_dataset(manifest, &cfg.groundtruth, &cfg.data.ingest)?;
    let result = match (checkpoint, pred_dir) {
        (Some(ck), _) => {
            let mut model = load_model(cfg, ck)?;
            let with_roi: Vec<Entry> = entries
                .into_iter()
                .map(|mut e| {
                    if e.roi.is_none() {
                        e.roi = roi.as_ref().map(|m| m.resize_nearest(e.image.width, e.image.height));
                    }
                    e
                })
                .collect();
            evaluate(&mut model, &with_roi, None, &cfg.normalization)?
        }
        (None, Some(dir)) => {
            let mut per_image = Vec::with_capacity(entries.len());
            for e in &entries {
                let map = RawMap::read(dir.join(format!("{}_density.sfdm", e.id())))?;
                let mask = e
                    .roi
                    .as_ref()
                    .or(roi.as_ref())
                    .map(|m| m.resize_nearest(map.width, map.height));
                let t = sfanet::Tensor::new([map.height, map.width], map.values)?;
                let count = eval::count_from_density(&t, map.width, map.height, mask.as_ref())?;
                per_image.push(ImageResult::new(e.id(), count, e.annotation.count()));
            }
            EvalResult::from_images(per_image)?
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    let dir = out_dir(common, ".")?;
    result.write(dir.join("eval"))?;
    println!("n={} MAE={:.4} MSE={:.4}", result.n, result.mae, result.mse);
    Ok(())
}

fn infer(cfg: &Config, common: &Common, checkpoint: &Path, image: &Path, roi: Option<&PathBuf>) -> Result<()> {
    let mut model = load_model(cfg, checkpoint)?;
    let img = Image::load(image)?;
    let roi = load_roi(roi.or(cfg.data.roi.as_ref()))?
        .map(|m| m.resize_nearest(img.width, img.height));
    let (out, prep, count) = predict_image(&mut model, &img, roi.as_ref(), &cfg.normalization)?;
    let dir = out_dir(common, ".")?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let paths = export_maps(&out, &img, prep.out_width, prep.out_height, dir.join(&stem))?;
    println!("{stem}: count {count:.4}");
    println!("maps: {}", paths.composite.display());
    Ok(())
}

fn grad_check(common: &Common) -> Result<bool> {
    let cfg = GradCheckConfig {
        seed: common.seed.unwrap_or(0),
        ..Default::default()
    };
    let mut ok = true;
    for r in gradcheck::run_suite(&cfg)? {
        println!("{r}");
        ok &= r.passed;
    }
    println!("{}", if ok { "all checks passed" } else { "gradient check FAILED" });
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let beside = match &cli.command {
        Command::Eval { checkpoint: Some(ck), .. } | Command::Infer { checkpoint: ck, .. } => {
            ck.parent().map(Path::to_path_buf)
        }
        _ => None,
    };
    if matches!(cli.command, Command::GradCheck) {
        return grad_check(&cli.common);
    }
    let cfg = load_config(&cli.common, beside.as_deref())?;
    match cli.command {
        Command::GenGt { manifest, half } => gen_gt(&cfg, &cli.common, &manifest, half)?,
        Command::Train {
            train_manifest,
            val_manifest,
            resume,
        } => train(cfg, &cli.common, train_manifest, val_manifest, resume)?,
        Command::Eval {
            manifest,
            checkpoint,
            pred_dir,
            roi,
        } => eval_cmd(
            &cfg,
            &cli.common,
            &manifest,
            checkpoint.as_deref(),
            pred_dir.as_deref(),
            roi.as_ref(),
        )?,
        Command::Infer {
            checkpoint,
            image,
            roi,
        } => infer(&cfg, &cli.common, &checkpoint, &image, roi.as_ref())?,
        Command::Synth => {
            let dir = out_dir(&cli.common, "synth")?;
            let manifest = sfanet::synth::write_dataset(&dir, &cfg.synth)?;
            println!("wrote {}", manifest.display());
        }
        Command::GradCheck => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
