use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;

use mitunet::config::{load_model_config, RunConfig};
use mitunet::data::AugmentConfig;
use mitunet::decoder::{MiTUNet, ModelConfig};
use mitunet::error::{Error, Result};
use mitunet::geometry::{aop_from_labels, AopConvention};
use mitunet::io::{list_pngs, read_image, read_mask, write_atomic, write_image, write_mask};
use mitunet::metrics::{aggregate, evaluate_pair};
use mitunet::phantom::{generate_one, PhantomConfig};
use mitunet::tensor::Checkpoint;
use mitunet::train::{infer, load_dataset, train, RunPaths};
use mitunet::verify::selftest;

#[derive(Parser)]
#[command(name = "mitu", version, about = "MiT-U-Net segmentation and angle-of-progression tools")]
struct Cli {
    /// Accept images and masks that are not 256×256.
    #[arg(long, global = true)]
    allow_any_size: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Standard,
    Flip,
}

impl From<Convention> for AopConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Standard => AopConvention::Standard,
            Convention::Flip => AopConvention::Flip,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Start from the weights in this checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Predict a label mask for one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration describing the model (default architecture otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predicted masks against ground truth; writes JSON and CSV.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        aop_convention: Convention,
    },
    /// Angle of progression of a label mask.
    Aop {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        aop_convention: Convention,
    },
    /// Generate synthetic phantoms with known angle of progression.
    Phantom {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Range of sampled angles in degrees, as LO:HI.
        #[arg(long, default_value = "30:120")]
        aop_range: String,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Run the gradient and oracle self-checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("--aop-range expects LO:HI, got {s:?}"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))
}

fn cmd_train(config: &Path, init_from: Option<&Path>, allow_any_size: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let init = init_from.map(Checkpoint::load).transpose()?;
    let dataset = load_dataset(&cfg.data.root, allow_any_size || cfg.data.allow_any_size)?;
    info!("{} samples from {}", dataset.len(), cfg.data.root.display());
    mkdir(&cfg.data.out_dir)?;
    write_atomic(&cfg.data.out_dir.join("run.toml"), cfg.to_toml()?.as_bytes())?;
    let paths = RunPaths {
        dir: cfg.data.out_dir.clone(),
    };
    let out = train(&dataset, &cfg.model, &cfg.train, &cfg.augment, init.as_ref(), Some(&paths))?;
    let best = &out.logs[out.best_epoch - 1];
    println!(
        "best epoch {} val dice all {:.4}; checkpoints in {}",
        out.best_epoch,
        best.val_dice.all,
        paths.dir.display()
    );
    Ok(())
}

/// Model and normalization settings for inference. A full run config
/// supplies both; a file with only a `[model]` section keeps the default
/// normalization.
fn infer_settings(config: Option<&Path>) -> Result<(ModelConfig, AugmentConfig)> {
    let Some(path) = config else {
        return Ok(Default::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match RunConfig::from_toml(&text) {
        Ok(full) => Ok((full.model, full.augment)),
        Err(_) => Ok((load_model_config(path)?, AugmentConfig::default())),
    }
}

fn cmd_infer(ckpt: &Path, image: &Path, out: &Path, config: Option<&Path>, allow_any_size: bool) -> Result<()> {
    let (model_cfg, augment) = infer_settings(config)?;
    let model = MiTUNet::<f32>::new(&model_cfg, 0)?;
    model.vars.load_checkpoint(&Checkpoint::load(ckpt)?)?;
    let img = read_image(image, allow_any_size)?;
    let mask = infer(&model, &augment, &img)?;
    write_mask(out, &mask)?;
    let counts: Vec<usize> = (0..3u8).map(|c| mask.data.iter().filter(|&&v| v == c).count()).collect();
    println!("wrote {} (pixels bg {} ps {} fh {})", out.display(), counts[0], counts[1], counts[2]);
    Ok(())
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path, out: &Path, conv: AopConvention, allow_any_size: bool) -> Result<()> {
    let gts = list_pngs(gt_dir)?;
    if gts.is_empty() {
        return Err(Error::Data(format!("no PNG masks in {}", gt_dir.display())));
    }
    let reports = gts
        .par_iter()
        .map(|(name, gt_path)| {
            let pred_path = pred_dir.join(format!("{name}.png"));
            let pred = read_mask(&pred_path, allow_any_size)?;
            let gt = read_mask(gt_path, allow_any_size)?;
            let r = evaluate_pair(name, &pred, &gt, conv)?;
            for e in &r.errors {
                warn!("{name}: {e}");
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(reports);
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(out, json.as_bytes())?;
    let csv = out.with_extension("csv");
    write_atomic(&csv, report.to_csv().as_bytes())?;
    let a = &report.aggregate;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} images ({} complete): dice all {:.4}, mean ΔAoP {}, score {}",
        a.images,
        a.complete,
        a.mean_dice.all,
        fmt(a.mean_delta_aop),
        fmt(a.score_of_means)
    );
    println!("wrote {} and {}", out.display(), csv.display());
    Ok(())
}

fn cmd_aop(mask: &Path, conv: AopConvention, allow_any_size: bool) -> Result<()> {
    let m = read_mask(mask, allow_any_size)?;
    let r = aop_from_labels(&m, conv)?;
    println!("{:.4}", r.angle_deg);
    Ok(())
}

fn cmd_phantom(count: usize, out: &Path, seed: u64, aop_range: &str, size: usize) -> Result<()> {
    let cfg = PhantomConfig {
        size,
        aop_range: parse_range(aop_range)?,
        ..PhantomConfig::default()
    };
    cfg.validate()?;
    let (images, masks) = (out.join("images"), out.join("masks"));
    mkdir(&images)?;
    mkdir(&masks)?;
    let truth = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let p = generate_one(&cfg, seed, i)?;
            let name = format!("{i:05}");
            write_image(&images.join(format!("{name}.png")), &p.image)?;
            write_mask(&masks.join(format!("{name}.png")), &p.mask)?;
            Ok((name, p.true_aop, p.spec.fh.is_circle()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("name,true_aop_deg,circular_head\n");
    for (name, aop, circle) in &truth {
        writeln!(csv, "{name},{aop:.6},{circle}").unwrap();
    }
    write_atomic(&out.join("truth.csv"), csv.as_bytes())?;
    println!("wrote {count} phantoms to {}", out.display());
    Ok(())
}

fn cmd_selftest(seed: u64) -> Result<bool> {
    let results = selftest(seed)?;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} suites, {failed} failed", results.len());
    Ok(failed == 0)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MITU_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MITU_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    let any = cli.allow_any_size;
    match cli.command {
        Command::Train { config, init_from } => cmd_train(&config, init_from.as_deref(), any)?,
        Command::Infer { ckpt, image, out, config } => cmd_infer(&ckpt, &image, &out, config.as_deref(), any)?,
        Command::Eval {
            pred_dir,
            gt_dir,
            out,
            aop_convention,
        } => cmd_eval(&pred_dir, &gt_dir, &out, aop_convention.into(), any)?,
        Command::Aop { mask, aop_convention } => cmd_aop(&mask, aop_convention.into(), any)?,
        Command::Phantom {
            count,
            out,
            seed,
            aop_range,
            size,
        } => cmd_phantom(count, &out, seed, &aop_range, size)?,
        Command::Selftest { seed } => return cmd_selftest(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
