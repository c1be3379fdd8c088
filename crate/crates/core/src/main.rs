use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use raysdf::config::{Ablation, PipelineConfig};
use raysdf::pipeline::{self, InferOptions, SplitSelection, Workspace};
use raysdf::Result;

#[derive(Debug, Parser)]
#[command(name = "raysdf", version, about = "Ray-bundle diffusion for sparse-view poses and triplane SDF surfaces")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workspace directory.
    #[arg(long, global = true, default_value = "work")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    ablation: Option<AblationArg>,
    /// Dataset directory; defaults to <out>/dataset.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoSdf,
    NoRayDiffuser,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoSdf => Ablation::NoSdf,
            AblationArg::NoRayDiffuser => Ablation::NoRayDiffuser,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Fit one triplane SDF per scene.
    FitSdf {
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
    },
    /// Train the ray denoiser.
    Train,
    /// Run the joint loop on the evaluation scenes.
    Infer {
        /// Use the exact-noise oracle instead of the trained denoiser.
        #[arg(long)]
        oracle: bool,
        /// Denoiser checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run name under <out>/runs.
        #[arg(long)]
        label: Option<String>,
    },
    /// Score a run against ground truth.
    Eval {
        /// Run name under <out>/runs; defaults to the ablation name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Check every analytic gradient against central differences.
    Gradcheck,
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), &PipelineConfig::env_overrides())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(a) = cli.ablation {
        cfg.ablation = a.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    let mut ws = Workspace::new(&cli.out);
    if let Some(d) = &cli.dataset {
        ws = ws.with_dataset(d);
    }
    if let Command::Gradcheck = cli.command {
        let rep = pipeline::cmd_gradcheck(cli.seed.unwrap_or(0))?;
        for s in &rep.suites {
            println!(
                "{:<24} {} max_rel_err={:.3e} tol={:.0e} worst={} analytic={:.6e} numeric={:.6e}",
                s.name,
                if s.passed { "PASS" } else { "FAIL" },
                s.max_rel_error,
                s.tolerance,
                s.worst_index,
                s.analytic_at_worst,
                s.numeric_at_worst
            );
        }
        return Ok(rep.passed());
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth => {
            let m = pipeline::cmd_synth(&ws, &cfg)?;
            println!("wrote {} scenes to {}", m.scenes.len(), ws.dataset.display());
        }
        Command::FitSdf { split } => {
            let which = match split {
                SplitArg::Train => SplitSelection::Train,
                SplitArg::Eval => SplitSelection::Eval,
                SplitArg::All => SplitSelection::All,
            };
            let s = pipeline::cmd_fit_sdf(&ws, &cfg, which)?;
            let mean = s.final_losses.iter().sum::<f64>() / s.final_losses.len().max(1) as f64;
            println!("fitted {} triplanes, mean final loss {mean:.3e}", s.fitted.len());
            for (scene, why) in &s.failed {
                eprintln!("{scene}: {why}");
            }
        }
        Command::Train => {
            let every = (cfg.diffusion.train_steps / 20).max(1);
            let rep = pipeline::cmd_train(&ws, &cfg, |step, loss| {
                if step % every == 0 {
                    eprintln!("step {step} loss {loss:.5}");
                }
            })?;
            println!("final loss {:.5}", rep.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Infer {
            oracle,
            checkpoint,
            label,
        } => {
            let opts = InferOptions {
                oracle: *oracle,
                checkpoint: checkpoint.clone(),
                label: label.clone(),
            };
            let s = pipeline::cmd_infer(&ws, &cfg, &opts)?;
            for st in &s.scenes {
                if let Some(why) = &st.degenerate {
                    eprintln!("{}: degenerate bundles: {why}", st.scene);
                }
                if st.empty_surface {
                    eprintln!("{}: empty surface", st.scene);
                }
            }
            for (scene, why) in &s.skipped {
                eprintln!("{scene}: skipped: {why}");
            }
            println!("{} scenes written to {}", s.scenes.len(), ws.run(&s.label).display());
        }
        Command::Eval { label } => {
            let label = label.clone().unwrap_or_else(|| cfg.ablation.name().to_string());
            let out = pipeline::cmd_eval(&ws, &cfg, &label)?;
            for m in &out.missing {
                eprintln!("missing: {m}");
            }
            print!("{}", out.report.to_csv());
        }
        Command::Gradcheck => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
