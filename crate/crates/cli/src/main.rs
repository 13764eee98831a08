mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsinet::data::SyntheticSpec;

use commands::NumericFailure;
use config::RunConfig;

/// Train and evaluate multi-stream hyperspectral pixel classifiers.
#[derive(Parser)]
#[command(name = "hsinet", version)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=50`.
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> anyhow::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        overrides.extend_from_slice(extra);
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cube with labels and a stratified split.
    Synth {
        #[arg(long, default_value_t = 32)]
        m: usize,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        b: usize,
        #[arg(long, default_value_t = 4)]
        p: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        blobs_per_class: usize,
        #[arg(long, default_value_t = 3.0)]
        radius_min: f64,
        #[arg(long, default_value_t = 7.0)]
        radius_max: f64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint and the loss curves.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for `--set train.epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Score a checkpoint on the test and training masks and draw the map.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Classify every pixel of a cube.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the full model and each leave-one-stream-out variant.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Retrain for each neighbor count K.
    Ksweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated K values or ranges; defaults to the config's `k_list`.
        #[arg(long)]
        k: Option<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Convert an ENVI band-sequential raster to hsc1.
    Convert {
        /// ENVI `.hdr` file.
        #[arg(long)]
        header: PathBuf,
        /// Payload file; found next to the header when omitted.
        #[arg(long)]
        payload: Option<PathBuf>,
        /// 1-based bands to drop, e.g. `104-108,150-163,220`.
        #[arg(long)]
        remove_bands: Option<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { m, n, b, p, sigma, seed, blobs_per_class, radius_min, radius_max, out } => {
            let spec = SyntheticSpec {
                rows: m,
                cols: n,
                bands: b,
                classes: p,
                noise_sigma: sigma,
                seed,
                blobs_per_class,
                radius_min,
                radius_max,
                ..SyntheticSpec::default()
            };
            commands::synth(commands::SynthArgs { spec, out })
        }
        Command::Train { cfg, epochs, resume, max_steps } => {
            let extra: Vec<String> = epochs.map(|e| format!("train.epochs={e}")).into_iter().collect();
            commands::train(&cfg.load(&extra)?, cfg.out.as_deref(), resume.as_deref(), max_steps)
        }
        Command::Eval { cfg, checkpoint } => commands::eval(&cfg.load(&[])?, &checkpoint, cfg.out.as_deref()),
        Command::Predict { cfg, checkpoint } => commands::predict(&cfg.load(&[])?, &checkpoint, cfg.out.as_deref()),
        Command::Ablate { cfg } => commands::ablate(&cfg.load(&[])?, cfg.out.as_deref()),
        Command::Ksweep { cfg, k } => commands::ksweep(&cfg.load(&[])?, k.as_deref(), cfg.out.as_deref()),
        Command::Gradcheck { out } => commands::gradcheck(out.as_deref()),
        Command::Convert { header, payload, remove_bands, out } => {
            commands::convert(&header, payload.as_deref(), remove_bands.as_deref(), &out)
        }
    }
}

/// 2 for usage, configuration and input problems, 3 for numeric failures,
/// 4 for artifacts that do not match the configuration or data, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hsinet::Error>() {
            return match e {
                hsinet::Error::NonFinite { .. } => 3,
                hsinet::Error::Mismatch(_) => 4,
                _ => 2,
            };
        }
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if cause.is::<serde_json::Error>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
