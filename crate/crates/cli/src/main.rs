use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use udn::checkpoint::{load_checkpoint, save_checkpoint};
use udn::dataset::{load_split, make_dataset, ManifestConfig, Split, MANIFEST_FILE};
use udn::network::{network_forward, Architecture, InitConfig, NetworkParams, Variant};
use udn::pnm::{read_image, write_image};
use udn::training::{eval_csv, evaluate, train, TrainConfig, FEASIBILITY_TOL_F32};
use udn::verify;
use udn::PlanarImage;

#[derive(Parser)]
#[command(name = "udn", version, about = "Universal denoising network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy then joint training; writes a checkpoint and a loss log next to it.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long, value_enum)]
        channels: ChannelsArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoises one PGM/PPM image at a known noise level.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        sigma: f64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average PSNR over the validation split, one CSV row per noise level.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25,30,35,40,45,50,55")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference, adjoint and oracle checks; nonzero exit on any failure.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Dataset preparation.
    Dataset {
        #[command(subcommand)]
        action: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Seeded crops of every source image plus a train/val manifest.
    Make {
        #[arg(long)]
        src: PathBuf,
        #[arg(long, default_value_t = 180)]
        crop: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sources assigned to training (default: 80%).
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Local,
    Nonlocal,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelsArg {
    Gray,
    Color,
}

/// Training configuration file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    /// Dataset manifest; relative paths resolve against the config file.
    manifest: PathBuf,
    #[serde(default)]
    init_seed: u64,
    #[serde(default)]
    architecture: ArchOverrides,
    train: Option<TrainConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchOverrides {
    stages: Option<usize>,
    filters: Option<usize>,
    kernel: Option<usize>,
    group: Option<usize>,
    window: Option<usize>,
    rbf_kernels: Option<usize>,
    train_precision: Option<bool>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            variant,
            channels,
            out,
        } => cmd_train(&config, variant, channels, &out),
        Command::Denoise {
            model,
            sigma,
            input,
            out,
        } => cmd_denoise(&model, sigma, &input, &out),
        Command::Eval {
            model,
            manifest,
            sigmas,
            seed,
        } => cmd_eval(&model, &manifest, &sigmas, seed),
        Command::Gradcheck { module } => cmd_gradcheck(module.as_deref()),
        Command::Dataset {
            action:
                DatasetCommand::Make {
                    src,
                    crop,
                    seed,
                    train,
                    out,
                },
        } => {
            let cfg = ManifestConfig {
                crop,
                seed,
                train_count: train,
            };
            let m = make_dataset(&src, &out, &cfg)?;
            println!(
                "wrote {} ({} train, {} val)",
                out.join(MANIFEST_FILE).display(),
                m.count(Split::Train),
                m.count(Split::Val)
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_train(config: &Path, variant: VariantArg, channels: ChannelsArg, out: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let file: TrainFile = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let variant = match variant {
        VariantArg::Local => Variant::Local,
        VariantArg::Nonlocal => Variant::NonLocal,
    };
    let (mut arch, default_cfg) = match channels {
        ChannelsArg::Gray => (Architecture::grayscale(variant), TrainConfig::grayscale()),
        ChannelsArg::Color => (Architecture::color(variant), TrainConfig::color()),
    };
    let o = &file.architecture;
    if let Some(v) = o.stages {
        arch.stages = v;
    }
    if let Some(v) = o.filters {
        arch.filters = v;
    }
    if let Some(v) = o.kernel {
        arch.kernel = (v, v);
    }
    if let Some(v) = o.group {
        arch.group = v;
    }
    if let Some(v) = o.window {
        arch.window = (v, v);
    }
    if let Some(v) = o.rbf_kernels {
        arch.rbf_kernels = v;
    }
    if let Some(v) = o.train_precision {
        arch.train_precision = v;
    }
    arch.validate()?;
    let cfg = file.train.unwrap_or(default_cfg);

    let manifest = match config.parent() {
        Some(dir) if file.manifest.is_relative() => dir.join(&file.manifest),
        _ => file.manifest.clone(),
    };
    let data: Vec<PlanarImage<f32>> = load_split(&manifest, Split::Train)
        .with_context(|| format!("loading training split of {}", manifest.display()))?;
    if let Some(bad) = data.iter().find(|d| d.planes != arch.channels) {
        bail!("{}-channel training image for a {}-channel network", bad.planes, arch.channels);
    }

    let mut init = InitConfig::for_architecture(&arch);
    init.seed = file.init_seed;
    let params = NetworkParams::<f32>::init(arch, &init)?;
    let (trained, log) = train(params, &data, &cfg)?;
    save_checkpoint(out, &trained)?;
    let log_path = out.with_extension("loss.csv");
    fs::write(&log_path, log.to_csv())?;
    println!("wrote {} and {}", out.display(), log_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_denoise(model: &Path, sigma: f64, input: &Path, out: &Path) -> Result<ExitCode> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        bail!("sigma must be a positive number, got {sigma}");
    }
    let params = load_checkpoint::<f32>(model, None)?;
    let noisy: PlanarImage<f32> = read_image(input)?;
    let (clean, _) = network_forward(&noisy, sigma, &params)?;
    write_image(out, &clean)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(model: &Path, manifest: &Path, sigmas: &[f64], seed: u64) -> Result<ExitCode> {
    if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0)) {
        bail!("sigmas must be positive");
    }
    let params = load_checkpoint::<f32>(model, None)?;
    let images: Vec<PlanarImage<f32>> = load_split(manifest, Split::Val)?;
    let rows = evaluate(&params, &images, sigmas, seed)?;
    print!("{}", eval_csv(&rows));
    let worst = rows.iter().map(|r| r.max_feasibility_ratio).fold(0.0, f64::max);
    if worst > 1.0 + FEASIBILITY_TOL_F32 {
        eprintln!("stage feasibility violated: max ‖x_t − y‖/ε_t = {worst}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(module: Option<&str>) -> Result<ExitCode> {
    let reports = match module {
        None => verify::run_all(),
        Some(m) => match verify::run_module(m) {
            Some(r) => r,
            None => {
                eprintln!("unknown module {m}; expected one of: {}", verify::MODULES.join(", "));
                return Ok(ExitCode::from(2));
            }
        },
    };
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
