use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use controlface::diffusion::{GuidanceMode, GuidanceSpec};
use controlface::{Error, Result};
use controlface_cli::commands::{self, Reference, SampleRequest, Target};
use controlface_cli::config::RunConfig;
use controlface_cli::exit_code;

#[derive(Parser)]
#[command(name = "controlface", version, about = "Reference-conditioned diffusion face rigging")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, env = "CONTROLFACE_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true, env = "CONTROLFACE_SEED")]
    seed: Option<u64>,
    /// Worker threads; 1 gives byte-reproducible outputs.
    #[arg(long, global = true, env = "CONTROLFACE_WORKERS")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training container and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a container.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the loss every this many steps; 0 disables.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Sample one image from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate a checkpoint and write the report and plots.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Container holding the reference record.
    #[arg(long, requires = "index", conflicts_with = "reference_image")]
    data: Option<PathBuf>,
    /// Reference record index in `--data`.
    #[arg(long)]
    index: Option<usize>,
    /// Reference image without a control map.
    #[arg(long)]
    reference_image: Option<PathBuf>,
    /// Face parameters (JSON) for the target control.
    #[arg(long, conflicts_with = "target_index")]
    target_params: Option<PathBuf>,
    /// Use the target control of this record of `--data`.
    #[arg(long)]
    target_index: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<GuidanceMode>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-step guidance deltas and predicted clean images.
    #[arg(long)]
    record_trajectory: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<GuidanceMode, String> {
    GuidanceMode::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = GuidanceMode::ALL.iter().map(|m| m.name()).collect();
            format!("unknown mode '{s}', expected one of {}", names.join(", "))
        })
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_workers(workers: Option<usize>) -> Result<()> {
    let Some(n) = workers else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--workers must be positive".into()));
    }
    // The tensor backend reads the same variable for its own pool.
    std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    set_workers(cli.common.workers)?;
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { out } => {
            let m = commands::gen_data(&cfg, &out)?;
            println!("wrote {} records to {}", m.records, out.display());
        }
        Command::Train {
            data,
            out,
            resume,
            log_every,
        } => {
            let t = commands::train(&cfg, &data, &out, resume.as_deref(), log_every)?;
            println!("trained to step {} in {}", t.step, out.display());
        }
        Command::Sample(a) => {
            let reference = match (a.data, a.index, a.reference_image) {
                (Some(data), Some(index), None) => Reference::Record { data, index },
                (None, None, Some(p)) => Reference::Image(p),
                _ => return Err(Error::Config("give either --data with --index, or --reference-image".into())),
            };
            let target = match (a.target_params, a.target_index) {
                (Some(p), _) => Target::Params(p),
                (None, Some(i)) => Target::Record(i),
                (None, None) => Target::OwnRecord,
            };
            let req = SampleRequest {
                checkpoint: a.checkpoint,
                reference,
                target,
                spec: GuidanceSpec::new(a.mode.unwrap_or(cfg.sample.mode), a.w.unwrap_or(cfg.sample.w))?,
                steps: a.steps.unwrap_or(cfg.sample.steps),
                seed: cfg.sampling().seed,
                out: a.out,
                record: a.record_trajectory,
            };
            let recorded = commands::sample(&req)?;
            println!("wrote {}", req.out.display());
            if let (Some(n), Some(p)) = (recorded, &req.record) {
                println!("wrote {n}-step trajectory to {}", p.display());
            }
        }
        Command::Report { checkpoint, out } => {
            let r = commands::report(&cfg, &checkpoint, &out)?;
            println!(
                "report over {} samples in {} (average re-inference error {})",
                r.main.sample_count,
                out.display(),
                r.main.reinference.average.map_or("n/a".to_string(), |v| format!("{v:.4}"))
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
