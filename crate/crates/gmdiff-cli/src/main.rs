//! `gmdiff`: train, sample, evaluate, sweep, encode, and interpolate with
//! the Gaussian-mixture guided-diffusion engine.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 training
//! divergence, 1 anything else.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use gmdiff::checkpoint::Checkpoint;
use gmdiff::config::ExperimentConfig;
use gmdiff::error::Error;
use gmdiff::harness;
use gmdiff::samplers::{
    SamplerConfig, SamplerKind, Temperature, TemperatureMode, VarianceMode,
};
use gmdiff::schedules::{RespacingSpec, SegmentSchedule};

#[derive(Parser)]
#[command(name = "gmdiff", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the models requested by the config's [train] section.
    Train {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints, loss logs, and the manifest.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Draw samples from a trained checkpoint.
    Sample(SampleArgs),
    /// Evaluate a samples CSV against the config's dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Samples CSV produced by `gmdiff sample`.
        #[arg(long)]
        samples: PathBuf,
        /// Optional reference point set; defaults to a fresh seeded draw.
        #[arg(long)]
        ref_csv: Option<PathBuf>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Sweep the guidance scale and plot every metric against it.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated guidance scales, e.g. `0,1,2,5,10`.
        #[arg(long, value_delimiter = ',')]
        scales: Vec<f64>,
        /// Samples per scale.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Use the exact analytic denoiser/classifier for the config mixture.
        #[arg(long, conflicts_with_all = ["checkpoint", "classifier"])]
        analytic: bool,
        #[arg(long, requires = "classifier")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Encode points into DDIM latents by running the reverse ODE forward.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Points CSV (header `x0,..`).
        #[arg(long)]
        points: PathBuf,
        /// How many steps of the chain to reverse.
        #[arg(long)]
        reverse_steps: usize,
        /// Target class for conditional models.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value = "runs/encode")]
        out: PathBuf,
    },
    /// Interpolate between two points through DDIM latent space.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with exactly two endpoint rows.
        #[arg(long)]
        points: PathBuf,
        /// Number of angles on the 0..pi/2 sweep (>= 2; endpoints included).
        #[arg(long, default_value_t = 9)]
        theta_count: usize,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value = "runs/interpolate")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SampleArgs {
    /// Denoiser checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Classifier checkpoint (required for guidance).
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Number of chains.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep this many uniformly respaced steps.
    #[arg(long, conflicts_with = "segments")]
    steps: Option<usize>,
    /// Per-fifth step allocation `a,b,c,d,e`.
    #[arg(long)]
    segments: Option<String>,
    /// Use the deterministic DDIM sampler.
    #[arg(long)]
    ddim: bool,
    #[arg(long, default_value_t = 0.0)]
    guidance_scale: f64,
    /// Target class for guided or class-conditional sampling.
    #[arg(long)]
    class: Option<usize>,
    /// `none`, `noise-scale`, or `eps-scale`.
    #[arg(long, default_value = "none")]
    temperature_mode: String,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// `fixed-beta`, `fixed-beta-tilde`, or `learned-v`.
    #[arg(long, default_value = "fixed-beta")]
    variance_mode: String,
    /// Permit guidance and temperature in the same run.
    #[arg(long)]
    allow_experimental: bool,
    /// Also dump every chain's states.
    #[arg(long)]
    trajectories: bool,
    /// Report model evaluations per chain on stdout.
    #[arg(long)]
    count_evals: bool,
    #[arg(long, default_value = "runs/sample")]
    out: PathBuf,
}

fn parse_temperature_mode(s: &str) -> Result<TemperatureMode, Error> {
    match s {
        "none" => Ok(TemperatureMode::None),
        "noise-scale" => Ok(TemperatureMode::NoiseScale),
        "eps-scale" => Ok(TemperatureMode::EpsScale),
        other => Err(Error::invalid(format!(
            "unknown temperature mode {other:?} (expected none, noise-scale, or eps-scale)"
        ))),
    }
}

fn parse_variance_mode(s: &str) -> Result<VarianceMode, Error> {
    match s {
        "fixed-beta" => Ok(VarianceMode::FixedBeta),
        "fixed-beta-tilde" => Ok(VarianceMode::FixedBetaTilde),
        "learned-v" => Ok(VarianceMode::LearnedV),
        other => Err(Error::invalid(format!(
            "unknown variance mode {other:?} (expected fixed-beta, fixed-beta-tilde, or learned-v)"
        ))),
    }
}

fn sampler_config(args: &SampleArgs) -> Result<SamplerConfig, Error> {
    let respacing = match (&args.steps, &args.segments) {
        (Some(count), None) => RespacingSpec::Uniform { count: *count },
        (None, Some(text)) => {
            let seg: SegmentSchedule = text.parse()?;
            RespacingSpec::Segments { counts: seg.counts }
        }
        (None, None) => RespacingSpec::Full,
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    let cfg = SamplerConfig {
        kind: if args.ddim { SamplerKind::Ddim } else { SamplerKind::Ancestral },
        guidance_scale: args.guidance_scale,
        temperature: Temperature {
            mode: parse_temperature_mode(&args.temperature_mode)?,
            tau: args.tau,
        },
        respacing,
        seed: args.seed,
        variance_mode: parse_variance_mode(&args.variance_mode)?,
        allow_experimental: args.allow_experimental,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Train { config, out } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = ExperimentConfig::from_toml_str(&text)?;
            let files = harness::run_train(&cfg, &text, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sample(args) => {
            let sampler = sampler_config(&args)?;
            let denoiser = Checkpoint::read(&args.checkpoint)?;
            let classifier = match &args.classifier {
                Some(p) => Some(Checkpoint::read(p)?),
                None => None,
            };
            let run = harness::SampleRun {
                denoiser: &denoiser,
                classifier: classifier.as_ref(),
                sampler,
                n: args.n,
                class: args.class,
                trajectories: args.trajectories,
                count_evals: args.count_evals,
            };
            let outcome = harness::run_sample(&run, &args.out)?;
            if args.count_evals {
                println!(
                    "denoiser evals per chain: {}",
                    outcome.denoiser_evals_per_chain
                );
                println!(
                    "classifier evals per chain: {}",
                    outcome.classifier_evals_per_chain
                );
            }
            for f in outcome.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Eval { config, samples, ref_csv, out } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = ExperimentConfig::from_toml_str(&text)?;
            let samples_bytes = std::fs::read(&samples)?;
            let ref_bytes = match &ref_csv {
                Some(p) => Some(std::fs::read(p)?),
                None => None,
            };
            let report =
                harness::run_eval(&cfg, &text, &samples_bytes, ref_bytes.as_deref(), &out)?;
            println!(
                "frechet {:.6}  precision {:.4}  recall {:.4}  class_fidelity {:.4}",
                report.frechet, report.precision, report.recall, report.class_fidelity
            );
        }
        Command::Sweep { config, scales, n, analytic, checkpoint, classifier, out } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = ExperimentConfig::from_toml_str(&text)?;
            if scales.is_empty() {
                return Err(Error::invalid("--scales needs at least one value"));
            }
            let loaded: Option<(Checkpoint, Checkpoint)> = match (&checkpoint, &classifier) {
                (Some(d), Some(c)) => Some((Checkpoint::read(d)?, Checkpoint::read(c)?)),
                (None, None) if analytic => None,
                _ => {
                    return Err(Error::invalid(
                        "sweep needs either --analytic or both --checkpoint and --classifier",
                    ))
                }
            };
            let models = match &loaded {
                Some((d, c)) => harness::SweepModels::Checkpoints { denoiser: d, classifier: c },
                None => harness::SweepModels::Analytic,
            };
            let rows = harness::run_sweep(&cfg, &text, models, &scales, n, &out)?;
            for row in &rows {
                println!(
                    "scale {:>5}: frechet {:.6} precision {:.4} recall {:.4} fidelity {:.4}",
                    row.scale,
                    row.report.frechet,
                    row.report.precision,
                    row.report.recall,
                    row.report.class_fidelity
                );
            }
        }
        Command::Encode { checkpoint, points, reverse_steps, class, out } => {
            let ckpt = Checkpoint::read(&checkpoint)?;
            let bytes = std::fs::read(&points)?;
            let path = harness::run_encode(&ckpt, &bytes, reverse_steps, class, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Interpolate { checkpoint, points, theta_count, class, out } => {
            let ckpt = Checkpoint::read(&checkpoint)?;
            let bytes = std::fs::read(&points)?;
            let path = harness::run_interpolate(&ckpt, &bytes, theta_count, class, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Checkpoint(_)
        | Error::Csv(_) => 2,
        Error::Diverged { .. } => 3,
        Error::Io(_) => 1,
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
