//! Command-line front end of the `spikelm` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use spikelm::pipeline::config::PipelineConfig;
use spikelm::pipeline::{self, describe};
use spikelm::quantizer::QuantMode;
use spikelm::Result;

/// Quantized spiking encoder: training, distillation, simulation and energy.
#[derive(Debug, Parser)]
#[command(name = "spikelm", version)]
pub struct Cli {
    /// TOML pipeline configuration (defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the model seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the student quantization mode: fp, 1bit or 1.58bit.
    #[arg(long, global = true)]
    quant: Option<QuantMode>,
    /// Overrides the simulation length of simulate, energy and eval.
    #[arg(long, global = true)]
    timesteps: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the full-precision teacher.
    TrainTeacher,
    /// Distill a fresh quantized student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Cross-entropy fine-tuning of a distilled student.
    Finetune {
        /// Student checkpoint; a fresh student when omitted.
        #[arg(long)]
        student: Option<PathBuf>,
        /// Accept a student that was never distilled.
        #[arg(long)]
        allow_skip_kd: bool,
    },
    /// Convergence trace of the spiking simulation against the equilibrium.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Norm#OPS and energy of a quantized versus a full-precision student.
    Energy {
        #[arg(long)]
        quant_checkpoint: PathBuf,
        #[arg(long)]
        fp_checkpoint: PathBuf,
    },
    /// Dev accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(q) = cli.quant {
        cfg.student.quant = q;
    }
    if let Some(t) = cli.timesteps {
        cfg.simulate.timesteps = t;
        cfg.energy.timesteps = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli)?;
    Ok(match &cli.command {
        Command::TrainTeacher => describe(&pipeline::cmd_train_teacher(&cfg)?),
        Command::Distill { teacher } => describe(&pipeline::cmd_distill(&cfg, teacher)?),
        Command::Finetune { student, allow_skip_kd } => {
            describe(&pipeline::cmd_finetune(&cfg, student.as_deref(), *allow_skip_kd)?)
        }
        Command::Simulate { checkpoint } => {
            let s = pipeline::cmd_simulate(&cfg, checkpoint, cfg.simulate.timesteps)?;
            describe(&s)
        }
        Command::Energy {
            quant_checkpoint,
            fp_checkpoint,
        } => {
            let (_, table) = pipeline::cmd_energy(&cfg, quant_checkpoint, fp_checkpoint, cfg.energy.timesteps)?;
            table.trim_end().to_string()
        }
        Command::Eval { checkpoint } => describe(&pipeline::cmd_eval(&cfg, checkpoint, cfg.simulate.timesteps)?),
    })
}

/// Parses `args` (program name first) and runs the command. Returns the
/// one-line summary, or the exit code and message on failure.
pub fn execute<I, T>(args: I) -> std::result::Result<String, (u8, String)>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => return Err((e.exit_code() as u8, e.render().to_string())),
    };
    run(&cli).map_err(|e| (e.exit_code() as u8, format!("error: {e}")))
}

/// `execute` with the summary on stdout and errors on stderr.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match execute(args) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err((0, message)) => {
            print!("{message}");
            0
        }
        Err((code, message)) => {
            eprintln!("{}", message.trim_end());
            code
        }
    }
}
