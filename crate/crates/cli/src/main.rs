use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uwsplat::ablation::ablate_command;
use uwsplat::checkpoint::Checkpoint;
use uwsplat::config::TrainConfig;
use uwsplat::gaussian::ParamGroup;
use uwsplat::gradcheck::{grad_check, GradCheckScene, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
use uwsplat::scene::{load_scene, save_scene};
use uwsplat::semantics::EmbeddingProjector;
use uwsplat::synth::{synth_scene, SynthConfig};
use uwsplat::train::{evaluate_scene, render_pair, train_command};
use uwsplat::Error;

/// Environment variable holding the worker thread count.
const THREADS_VAR: &str = "UWSPLAT_THREADS";

#[derive(Parser)]
#[command(name = "uwsplat", version, about = "Underwater Gaussian splatting trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render one checkpoint camera to a PNG.
    Render(RenderArgs),
    /// Held-out PSNR and SSIM of a checkpoint on a scene.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Parameter group, or `all`.
        #[arg(long, default_value = "all")]
        group: String,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Write a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Train the M1/M2/M3/full grid and tabulate the results.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    camera: usize,
    #[arg(long)]
    out: PathBuf,
    /// Render the restored scene without the water medium.
    #[arg(long, conflicts_with = "observed")]
    clean: bool,
    /// Render through the medium (the default).
    #[arg(long)]
    observed: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Generator settings as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(message) = configure_threads() {
        eprintln!("error: {message}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_VAR} must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(value).expect("value serializes"));
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Train { config } => {
            let config = TrainConfig::load(&config)?;
            let summary = train_command(&config, print_json)?;
            print_json(&summary);
        }
        Command::Render(args) => render(&args)?,
        Command::Eval { checkpoint, scene } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = snapshot(&ckpt, &checkpoint)?;
            let scene = load_scene(&scene, &EmbeddingProjector::new(ckpt.projector_seed))?;
            let report = evaluate_scene(&ckpt.cloud, &ckpt.medium, &scene, &config.objective.raster)?;
            print_json(&report);
        }
        Command::Gradcheck {
            group,
            epsilon,
            tolerance,
        } => return gradcheck(&group, epsilon, tolerance),
        Command::Synth(args) => synth(&args)?,
        Command::Ablate { config } => {
            let config = TrainConfig::load(&config)?;
            let (_, path) = ablate_command(&config, print_json)?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn snapshot(ckpt: &Checkpoint, path: &Path) -> Result<TrainConfig, Error> {
    TrainConfig::from_json(&ckpt.config_json)
        .map_err(|e| Error::Checkpoint(format!("{}: config snapshot: {e}", path.display())))
}

fn render(args: &RenderArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let config = snapshot(&ckpt, &args.checkpoint)?;
    let camera = ckpt.cameras.get(args.camera).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "camera {} out of range, the checkpoint has {}",
            args.camera,
            ckpt.cameras.len()
        ))
    })?;
    let (clean, observed) = render_pair(&ckpt.cloud, &ckpt.medium, camera, &config.objective.raster)?;
    if args.clean { clean } else { observed }.save_png(&args.out)
}

fn gradcheck(group: &str, epsilon: f64, tolerance: f64) -> Result<ExitCode, Error> {
    let groups: Vec<String> = if group == "all" {
        ParamGroup::ALL.iter().map(|g| g.name().to_string()).collect()
    } else {
        vec![group.to_string()]
    };
    let scene = GradCheckScene::standard();
    let mut ok = true;
    for g in &groups {
        let report = grad_check(&scene, g, epsilon)?;
        let passed = report.passed(tolerance);
        ok &= passed;
        println!(
            "{} {:<9} max_rel_error={:.3e} over {} entries",
            if passed { "PASS" } else { "FAIL" },
            report.group.name(),
            report.max_rel_error,
            report.checked
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn synth(args: &SynthArgs) -> Result<(), Error> {
    let mut config = match &args.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    config.seed = args.seed;
    if let Some(n) = args.gaussians {
        config.n_gaussians = n;
    }
    if let Some(n) = args.views {
        config.n_views = n;
    }
    let scene = synth_scene(&config)?;
    save_scene(&scene, &args.out)?;
    eprintln!("wrote {} views to {}", scene.len(), args.out.display());
    Ok(())
}
