use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use candle_core::{DType, Device, Tensor};
use mcfnet::checkpoint::Checkpoint;
use mcfnet::colorspace::{hsv_to_rgb, ColorSpace, ImagePlane};
use mcfnet::data::{list_pngs, load_dataset, load_image, make_synthetic_pairs, save_image, write_dataset};
use mcfnet::metrics::evaluate;
use mcfnet::trainer::{TrainConfig, TrainLogWriter, Trainer, CHECKPOINT_FILE};
use mcfnet::Mcfnet;

use crate::manifest::RunManifest;

pub const SEED_ENV: &str = "MCFNET_SEED";
pub const BRANCH_DIR: &str = "branches";

#[derive(Debug, Parser)]
#[command(name = "mcfnet", version, about = "NIR to RGB colorization: training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train from a dataset directory holding `nir/` and `rgb/`.
    Train(TrainArgs),
    /// Train one ablation variant (same options as `train`).
    Ablate {
        #[arg(long, value_enum)]
        variant: Variant,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Colorize every PNG in a directory with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        nir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write y'_rgb | y_hsv (as RGB) | y_tex grids under `branches/`.
        #[arg(long)]
        dump_branches: bool,
        #[arg(long)]
        overwrite: bool,
    },
    /// Score predictions against ground truth matched by file stem.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Write a synthetic paired dataset (`nir/`, `rgb/`).
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        /// Falls back to MCFNET_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    NoTexture,
    NoMultiscale,
    NoCfem,
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML or JSON training config; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint instead of starting fresh; the checkpoint
    /// carries its own config.
    #[arg(
        long,
        conflicts_with_all = ["config", "total_epochs", "stage1_end", "batch_size", "base_lr", "seed", "no_augment"]
    )]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub allow_unpaired: bool,
    #[arg(long)]
    pub total_epochs: Option<usize>,
    #[arg(long)]
    pub stage1_end: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// Falls back to the config file, then MCFNET_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl From<mcfnet::Error> for CliError {
    fn from(e: mcfnet::Error) -> Self {
        match e {
            mcfnet::Error::NonFinite { .. } | mcfnet::Error::Tensor(_) => CliError::Numeric(e.to_string()),
            mcfnet::Error::Config(_) | mcfnet::Error::Json(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        mcfnet::Error::from(e).into()
    }
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{what} {}: {e}", path.display()))
}

type CliResult<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Cmd::Train(args) => train(args, None),
        Cmd::Ablate { variant, train: args } => train(args, Some(variant)),
        Cmd::Infer {
            ckpt,
            nir,
            out,
            dump_branches,
            overwrite,
        } => infer(&ckpt, &nir, &out, dump_branches, overwrite),
        Cmd::Eval { pred, gt, out, overwrite } => eval(&pred, &gt, &out, overwrite),
        Cmd::Synth {
            n,
            size,
            seed,
            out,
            overwrite,
        } => synth(n, size, seed, &out, overwrite),
    }
}

fn require_exists(what: &str, path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} {} does not exist", path.display())))
    }
}

/// Creates `out`, refusing to reuse a non-empty directory unless
/// `overwrite` is set.
fn prepare_out(out: &Path, overwrite: bool) -> CliResult<()> {
    if out.is_file() {
        return Err(CliError::Usage(format!("--out {} is a file, expected a directory", out.display())));
    }
    let non_empty = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !overwrite {
        return Err(CliError::Usage(format!(
            "output directory {} is not empty; pass --overwrite to replace its contents",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| io_err("cannot create", out, e))
}

fn write_manifest(manifest: &RunManifest, out: &Path) -> CliResult<()> {
    let path = manifest.write(out).map_err(|e| io_err("cannot write manifest in", out, e))?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Reads a TOML or JSON config (by extension; JSON otherwise) into a
/// generic value so that the presence of individual keys can be checked.
fn read_config_value(path: &Path) -> CliResult<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| io_err("cannot read config", path, e))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let bad = |msg: String| CliError::Usage(format!("config {}: {msg}", path.display()));
    if is_toml {
        let v: toml::Value = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        serde_json::to_value(v).map_err(|e| bad(e.to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

/// File values, then flags; the seed falls back to MCFNET_SEED when
/// neither the flag nor the file sets it.
pub fn resolve_config(args: &TrainArgs, variant: Option<Variant>) -> CliResult<TrainConfig> {
    let (mut cfg, file_seed) = match &args.config {
        Some(path) => {
            require_exists("config file", path)?;
            let value = read_config_value(path)?;
            let has_seed = value.get("seed").is_some();
            let cfg: TrainConfig = serde_json::from_value(value)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            (cfg, has_seed)
        }
        None => (TrainConfig::default(), false),
    };
    if let Some(v) = args.total_epochs {
        cfg.total_epochs = v;
    }
    if let Some(v) = args.stage1_end {
        cfg.stage1_end = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.base_lr {
        cfg.base_lr = v;
    }
    if args.no_augment {
        cfg.use_augmentation = false;
    }
    match (args.seed, file_seed) {
        (Some(s), _) => cfg.seed = s,
        (None, false) => {
            if let Some(s) = env_seed()? {
                cfg.seed = s;
            }
        }
        (None, true) => {}
    }
    if let Some(variant) = variant {
        let m = &mut cfg.model;
        m.use_texture = variant != Variant::NoTexture;
        m.use_multiscale = variant != Variant::NoMultiscale;
        m.use_hsv_cfem = variant != Variant::NoCfem;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs, variant: Option<Variant>) -> CliResult<()> {
    require_exists("--data", &args.data)?;
    let command = if variant.is_some() { "ablate" } else { "train" };
    let mut trainer = match &args.resume {
        Some(path) => {
            require_exists("--resume", path)?;
            Trainer::from_checkpoint(Checkpoint::load(path)?)?
        }
        None => Trainer::new(resolve_config(&args, variant)?)?,
    };
    prepare_out(&args.out, args.overwrite)?;
    let mut manifest = RunManifest::new(command);
    manifest.config_path = args.config.clone().or_else(|| args.resume.clone());
    manifest.config = Some(trainer.config().clone());
    manifest.seed = Some(trainer.config().seed);
    let (gen, disc) = trainer.trainable_groups();
    manifest.generator_groups = gen.iter().map(|s| s.to_string()).collect();
    manifest.discriminator_groups = disc.iter().map(|s| s.to_string()).collect();
    write_manifest(&manifest, &args.out)?;

    let dataset = load_dataset(&args.data, args.allow_unpaired)?;
    log::info!(
        "{} samples ({} paired) from {}",
        dataset.len(),
        dataset.paired_count(),
        args.data.display()
    );
    let logs = if args.resume.is_some() {
        TrainLogWriter::append_to(&args.out)?
    } else {
        TrainLogWriter::create(&args.out)?
    };
    trainer.fit(&dataset, Some(&logs))?;
    let path = args.out.join(CHECKPOINT_FILE);
    trainer.checkpoint()?.save(&path)?;
    log::info!("checkpoint written to {}", path.display());
    Ok(())
}

fn infer(ckpt: &Path, nir: &Path, out: &Path, dump_branches: bool, overwrite: bool) -> CliResult<()> {
    require_exists("--ckpt", ckpt)?;
    require_exists("--nir", nir)?;
    let checkpoint = Checkpoint::load(ckpt)?;
    prepare_out(out, overwrite)?;
    let mut manifest = RunManifest::new("infer");
    manifest.config_path = Some(ckpt.to_path_buf());
    manifest.seed = Some(checkpoint.config.seed);
    manifest.config = Some(checkpoint.config.clone());
    write_manifest(&manifest, out)?;

    let model = checkpoint.build_model(DType::F32, &Device::Cpu)?;
    let inputs = list_pngs(nir)?;
    if dump_branches {
        let dir = out.join(BRANCH_DIR);
        fs::create_dir_all(&dir).map_err(|e| io_err("cannot create", &dir, e))?;
    }
    for (stem, path) in &inputs {
        let x = load_image(path, ColorSpace::Nir)?;
        colorize_one(&model, stem, &x, out, dump_branches)?;
    }
    log::info!("colorized {} image(s) into {}", inputs.len(), out.display());
    Ok(())
}

fn colorize_one(model: &Mcfnet, stem: &str, x: &ImagePlane, out: &Path, dump_branches: bool) -> CliResult<()> {
    let t = x.to_tensor(model.dtype(), model.device())?;
    let y = model.colorize(&t)?;
    let y_rgb = ImagePlane::from_tensor(&y.y_rgb, ColorSpace::Rgb)?;
    save_image(&y_rgb, &out.join(format!("{stem}.png")))?;
    if dump_branches {
        let prime = ImagePlane::from_tensor(&y.y_prime_rgb.clamp(0.0, 1.0)?, ColorSpace::Rgb)?;
        let hsv = hsv_to_rgb(&ImagePlane::from_tensor(&y.y_hsv.clamp(0.0, 1.0)?, ColorSpace::Hsv)?)?;
        // The Laplacian of a [0, 1] image lies in [-4, 4].
        let tex = ((&y.y_tex / 8.0)? + 0.5)?.clamp(0.0, 1.0)?;
        let tex = ImagePlane::from_tensor(&Tensor::cat(&[&tex, &tex, &tex], 1)?, ColorSpace::Rgb)?;
        let grid = side_by_side(&[&prime, &hsv, &tex])?;
        save_image(&grid, &out.join(BRANCH_DIR).join(format!("{stem}.png")))?;
    }
    Ok(())
}

/// Concatenates equally sized RGB planes left to right.
fn side_by_side(panels: &[&ImagePlane]) -> CliResult<ImagePlane> {
    let (_, h, w) = panels[0].dims();
    let total = w * panels.len();
    Ok(ImagePlane::from_fn(ColorSpace::Rgb, h, total, |c, y, x| panels[x / w].get(c, y, x % w))?)
}

fn eval(pred: &Path, gt: &Path, out: &Path, overwrite: bool) -> CliResult<()> {
    require_exists("--pred", pred)?;
    require_exists("--gt", gt)?;
    prepare_out(out, overwrite)?;
    let mut manifest = RunManifest::new("eval");
    manifest.config_path = None;
    write_manifest(&manifest, out)?;

    let report = evaluate(pred, gt, None)?;
    report.write(out)?;
    let a = &report.aggregate;
    println!(
        "{} image(s): psnr {:.4} ssim {:.4} ae {:.4}",
        a.count, a.psnr, a.ssim, a.ae
    );
    Ok(())
}

fn synth(n: usize, size: usize, seed: Option<u64>, out: &Path, overwrite: bool) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    prepare_out(out, overwrite)?;
    let mut manifest = RunManifest::new("synth");
    manifest.seed = Some(seed);
    write_manifest(&manifest, out)?;

    let samples = make_synthetic_pairs(n, size, seed)?;
    write_dataset(&samples, out)?;
    log::info!("wrote {n} synthetic pair(s) of {size}x{size} to {}", out.display());
    Ok(())
}
