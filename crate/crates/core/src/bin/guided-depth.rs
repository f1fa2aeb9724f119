use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use guided_depth::commands::{cmd_estimate, cmd_eval, cmd_synth, cmd_train_prior, load_config, Overrides};
use guided_depth::io::{Mode, RunConfig};
use guided_depth::Error;

/// Metric depth from a calibrated image pair by stereo-guided diffusion sampling.
#[derive(Parser)]
#[command(name = "guided-depth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene (or a suite of scenes) with ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Write this many standard-suite scenes instead of the `[synth]` scene.
        #[arg(long, default_value_t = 0)]
        suite: usize,
    },
    /// Train the toy denoiser and write its checkpoint.
    TrainPrior {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate metric depth for a scene directory.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Scene directory with left.png, right.png and rig.txt.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Compare a predicted depth PFM against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Use this global scale instead of searching for one.
    #[arg(long)]
    global_scale: Option<f64>,
    /// DDIM sampling steps.
    #[arg(long)]
    steps: Option<usize>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn config(&self, scene: Option<PathBuf>) -> guided_depth::Result<RunConfig> {
        let ov = Overrides {
            seed: self.seed,
            mode: self.mode,
            out: self.out.clone(),
            ensemble: self.ensemble,
            lambda: self.lambda,
            global_scale: self.global_scale,
            steps: self.steps,
            scene,
        };
        load_config(self.config.as_deref(), &ov)
    }
}

fn run(cli: Cli) -> guided_depth::Result<()> {
    match cli.command {
        Command::Synth { common, suite } => {
            let cfg = common.config(None)?;
            let scenes = cmd_synth(&cfg, suite)?;
            println!("wrote {} scene(s) to {}", scenes.len(), cfg.paths.out.display());
        }
        Command::TrainPrior { common } => {
            let cfg = common.config(None)?;
            let r = cmd_train_prior(&cfg)?;
            println!(
                "validation loss {:.5} -> {:.5}; checkpoint {}",
                r.initial_validation,
                r.final_validation,
                cfg.paths.out.join("prior.ckpt").display()
            );
        }
        Command::Estimate { common, scene } => {
            let cfg = common.config(scene)?;
            let est = cmd_estimate(&cfg)?;
            println!(
                "global scale {}; {} trajectories; depth written to {}",
                est.global_scale,
                est.members.len(),
                cfg.paths.out.join("depth.pfm").display()
            );
        }
        Command::Eval { pred, gt, out } => {
            let ev = cmd_eval(&pred, &gt, &out)?;
            print!("{}{}", ev.raw.to_key_values(), ev.aligned.to_key_values());
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {}", e.category(), msg);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
