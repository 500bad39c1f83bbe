//! Experiment orchestration: the operations behind the CLI subcommands,
//! each writing its artifacts plus a run manifest sufficient to reproduce
//! the run byte-for-byte.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::ExperimentConfig;
use crate::csvio;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, SweepRow};
use crate::models::Denoiser;
use crate::samplers::{self, SamplerConfig};
use crate::svg;
use crate::training;

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// SHA-256 of the governing config file, when one was used.
    pub config_sha256: Option<String>,
    /// Flat key/value record of every input that shaped the run.
    pub inputs: Vec<(String, String)>,
    /// Files this run wrote, relative to the manifest.
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config_sha256: Option<String>,
    inputs: Vec<(String, String)>,
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let manifest = RunManifest {
        tool: "gmdiff",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        config_sha256,
        inputs,
        outputs: outputs
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
    };
    let path = dir.join("run-manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest json"))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Train the models requested by the config's `[train]` section.
/// Checkpoints hold the EMA weights.
pub fn run_train(cfg: &ExperimentConfig, config_text: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let sched = cfg.schedule.build()?;
    let mut outputs = Vec::new();
    let mut inputs = vec![("dataset.seed".to_string(), cfg.dataset.seed.to_string())];

    if cfg.train.diffusion.is_none() && cfg.train.classifier.is_none() {
        return Err(Error::Config(
            "config has no [train.diffusion] or [train.classifier] section".into(),
        ));
    }

    if let Some(tc) = &cfg.train.diffusion {
        let trained = training::train_diffusion(&cfg.dataset.mixture, &cfg.model, &sched, tc)?;
        let ckpt =
            Checkpoint::from_denoiser(&trained.ema, cfg.schedule, tc.iterations, true);
        let path = out_dir.join("denoiser.ckpt");
        ckpt.write(&path)?;
        outputs.push(path);
        let log = out_dir.join("denoiser-loss.csv");
        std::fs::write(&log, csvio::loss_log_to_csv(&trained.loss_log))?;
        outputs.push(log);
        inputs.push(("train.diffusion.seed".into(), tc.seed.to_string()));
    }

    if let Some(tc) = &cfg.train.classifier {
        let trained =
            training::train_classifier(&cfg.dataset.mixture, &cfg.classifier_model, &sched, tc)?;
        let ckpt =
            Checkpoint::from_classifier(&trained.ema, cfg.schedule, tc.iterations, true);
        let path = out_dir.join("classifier.ckpt");
        ckpt.write(&path)?;
        outputs.push(path);
        let log = out_dir.join("classifier-loss.csv");
        std::fs::write(&log, csvio::loss_log_to_csv(&trained.loss_log))?;
        outputs.push(log);
        inputs.push(("train.classifier.seed".into(), tc.seed.to_string()));
    }

    let manifest = write_manifest(
        out_dir,
        "train",
        Some(sha256_hex(config_text.as_bytes())),
        inputs,
        &outputs,
    )?;
    outputs.push(manifest);
    Ok(outputs)
}

/// Inputs of a sampling run, mirroring the CLI flags.
pub struct SampleRun<'a> {
    pub denoiser: &'a Checkpoint,
    pub classifier: Option<&'a Checkpoint>,
    pub sampler: SamplerConfig,
    pub n: usize,
    /// Fixed target class for guided or class-conditional sampling.
    pub class: Option<usize>,
    pub trajectories: bool,
    /// Print/record evaluation counts.
    pub count_evals: bool,
}

pub struct SampleOutcome {
    pub files: Vec<PathBuf>,
    pub denoiser_evals_per_chain: usize,
    pub classifier_evals_per_chain: usize,
}

/// Sample and write `samples.csv` (plus optional `trajectories.csv`).
pub fn run_sample(run: &SampleRun, out_dir: &Path) -> Result<SampleOutcome> {
    ensure_dir(out_dir)?;
    if run.denoiser.kind != CheckpointKind::Denoiser {
        return Err(Error::invalid("--checkpoint must be a denoiser checkpoint"));
    }
    let model = run.denoiser.into_denoiser()?;
    let sched = run.denoiser.build_schedule()?;
    let classifier = match run.classifier {
        Some(c) => Some(c.into_classifier()?),
        None => None,
    };
    if run.sampler.guidance_scale > 0.0 && classifier.is_none() {
        return Err(Error::invalid("guidance requires --classifier"));
    }
    let needs_class = run.sampler.guidance_scale > 0.0 || model.is_conditional();
    let classes: Option<Vec<usize>> = match (needs_class, run.class) {
        (true, Some(y)) => Some(vec![y; run.n]),
        (true, None) => {
            return Err(Error::invalid(
                "guided or class-conditional sampling requires --class",
            ))
        }
        (false, Some(y)) => Some(vec![y; run.n]), // recorded in the CSV even if unused
        (false, None) => None,
    };
    let class_arg = if needs_class { classes.as_deref() } else { None };

    let result = samplers::sample(
        &model,
        &sched,
        &run.sampler,
        run.n,
        classifier.as_ref().map(|c| c as &dyn crate::classifiers::NoisyClassifier),
        class_arg,
        run.trajectories,
    )?;

    let mut outputs = Vec::new();
    let samples_path = out_dir.join("samples.csv");
    std::fs::write(
        &samples_path,
        csvio::samples_to_csv(&result.samples, classes.as_deref(), run.sampler.seed),
    )?;
    outputs.push(samples_path);

    if let Some(trajs) = &result.trajectories {
        let mut text = String::from("chain,step,");
        let d = model.data_dim();
        text.push_str(
            &(0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(","),
        );
        text.push('\n');
        for (chain, t) in trajs.iter().enumerate() {
            for (step, state) in t.states.iter().enumerate() {
                let coords: Vec<String> = state.iter().map(|v| format!("{v:?}")).collect();
                text.push_str(&format!("{chain},{step},{}\n", coords.join(",")));
            }
        }
        let path = out_dir.join("trajectories.csv");
        std::fs::write(&path, text)?;
        outputs.push(path);
    }

    let mut inputs = vec![
        ("n".to_string(), run.n.to_string()),
        ("seed".to_string(), run.sampler.seed.to_string()),
        ("sampler".to_string(), format!("{:?}", run.sampler.kind)),
        ("guidance_scale".to_string(), run.sampler.guidance_scale.to_string()),
        ("respacing".to_string(), format!("{:?}", run.sampler.respacing)),
        ("variance_mode".to_string(), format!("{:?}", run.sampler.variance_mode)),
        ("temperature".to_string(), format!("{:?}", run.sampler.temperature)),
    ];
    if run.count_evals {
        inputs.push((
            "denoiser_evals_per_chain".to_string(),
            result.denoiser_evals_per_chain.to_string(),
        ));
        inputs.push((
            "classifier_evals_per_chain".to_string(),
            result.classifier_evals_per_chain.to_string(),
        ));
    }
    let manifest = write_manifest(out_dir, "sample", None, inputs, &outputs)?;
    outputs.push(manifest);
    Ok(SampleOutcome {
        files: outputs,
        denoiser_evals_per_chain: result.denoiser_evals_per_chain,
        classifier_evals_per_chain: result.classifier_evals_per_chain,
    })
}

/// Evaluate a samples CSV against the config's dataset (or an explicit
/// reference CSV), writing `metrics.csv` and `metrics.json`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    config_text: &str,
    samples_csv: &[u8],
    reference_csv: Option<&[u8]>,
    out_dir: &Path,
) -> Result<MetricsReport> {
    ensure_dir(out_dir)?;
    let samples = csvio::samples_from_csv(samples_csv)?;
    let reference: Array2<f64> = match reference_csv {
        Some(bytes) => csvio::samples_from_csv(bytes)?.points,
        None => {
            let mut rng = rand::SeedableRng::seed_from_u64(cfg.metrics.ref_seed);
            let (pts, _) = cfg
                .dataset
                .mixture
                .sample_batch(&mut rng as &mut rand_chacha::ChaCha8Rng, cfg.metrics.ref_count);
            pts
        }
    };
    let report = metrics::evaluate(
        &cfg.dataset.mixture,
        &reference.view(),
        &samples.points.view(),
        &cfg.metrics,
    )?;

    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(&csv_path, metrics_report_csv(&report))?;
    let json_path = out_dir.join("metrics.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report).expect("report json"))?;
    write_manifest(
        out_dir,
        "eval",
        Some(sha256_hex(config_text.as_bytes())),
        vec![("samples_sha256".into(), sha256_hex(samples_csv))],
        &[csv_path, json_path],
    )?;
    Ok(report)
}

fn metrics_report_csv(r: &MetricsReport) -> String {
    format!(
        "frechet,precision,recall,class_fidelity,samples,references,degenerate_covariance\n{:?},{:?},{:?},{:?},{},{},{}\n",
        r.frechet, r.precision, r.recall, r.class_fidelity,
        r.sample_count, r.reference_count, r.degenerate_covariance,
    )
}

/// Model source for sweep runs: trained checkpoints or the exact oracles.
pub enum SweepModels<'a> {
    Checkpoints { denoiser: &'a Checkpoint, classifier: &'a Checkpoint },
    Analytic,
}

/// Guidance-scale sweep: `sweep.csv`, one SVG per metric, and a JSON table.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    config_text: &str,
    models: SweepModels,
    scales: &[f64],
    n: usize,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    ensure_dir(out_dir)?;
    let mixture = &cfg.dataset.mixture;
    let rows = match models {
        SweepModels::Checkpoints { denoiser, classifier } => {
            let model = denoiser.into_denoiser()?;
            let clf = classifier.into_classifier()?;
            let sched = denoiser.build_schedule()?;
            metrics::sweep_guidance_scale(
                &model, &clf, mixture, &sched, &cfg.sampler, scales, n, &cfg.metrics,
            )?
        }
        SweepModels::Analytic => {
            let model = crate::models::AnalyticDenoiser::new(mixture.clone());
            let clf = crate::classifiers::AnalyticClassifier::new(mixture.clone());
            let sched = cfg.schedule.build()?;
            metrics::sweep_guidance_scale(
                &model, &clf, mixture, &sched, &cfg.sampler, scales, n, &cfg.metrics,
            )?
        }
    };

    let mut outputs = Vec::new();
    let table = out_dir.join("sweep.csv");
    std::fs::write(&table, csvio::sweep_to_csv(&rows))?;
    outputs.push(table);
    let json = out_dir.join("sweep.json");
    std::fs::write(&json, serde_json::to_string_pretty(&rows).expect("sweep json"))?;
    outputs.push(json);

    let series = |f: &dyn Fn(&SweepRow) -> f64| -> Vec<(f64, f64)> {
        rows.iter().map(|r| (r.scale, f(r))).collect()
    };
    for (name, values) in [
        ("frechet", series(&|r| r.report.frechet)),
        ("precision", series(&|r| r.report.precision)),
        ("recall", series(&|r| r.report.recall)),
        ("class_fidelity", series(&|r| r.report.class_fidelity)),
    ] {
        let path = out_dir.join(format!("{name}.svg"));
        std::fs::write(
            &path,
            svg::line_plot(&format!("{name} vs guidance scale"), "guidance scale", name, &values),
        )?;
        outputs.push(path);
    }
    write_manifest(
        out_dir,
        "sweep",
        Some(sha256_hex(config_text.as_bytes())),
        vec![
            ("scales".into(), format!("{scales:?}")),
            ("n".into(), n.to_string()),
            ("seed".into(), cfg.sampler.seed.to_string()),
        ],
        &outputs,
    )?;
    Ok(rows)
}

/// Encode points into DDIM latents; writes `latents.csv`.
pub fn run_encode(
    denoiser: &Checkpoint,
    points_csv: &[u8],
    reverse_steps: usize,
    class: Option<usize>,
    out_dir: &Path,
) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    let model = denoiser.into_denoiser()?;
    let sched = denoiser.build_schedule()?;
    let points = csvio::points_from_csv(points_csv)?;
    let classes = encode_classes(&model, class, points.nrows())?;
    let latents = samplers::ddim_encode(
        &model,
        &points.view(),
        &sched,
        Some(reverse_steps),
        classes.as_deref(),
    )?;
    let path = out_dir.join("latents.csv");
    std::fs::write(&path, csvio::points_to_csv(&latents))?;
    write_manifest(
        out_dir,
        "encode",
        None,
        vec![
            ("reverse_steps".into(), reverse_steps.to_string()),
            ("points_sha256".into(), sha256_hex(points_csv)),
        ],
        std::slice::from_ref(&path),
    )?;
    Ok(path)
}

fn encode_classes(
    model: &crate::models::MlpDenoiser,
    class: Option<usize>,
    n: usize,
) -> Result<Option<Vec<usize>>> {
    match (model.is_conditional(), class) {
        (true, Some(y)) => Ok(Some(vec![y; n])),
        (true, None) => Err(Error::invalid("a conditional model needs --class")),
        (false, _) => Ok(None),
    }
}

/// Encode two endpoints, interpolate their latents over `theta_count` angles
/// in [0, pi/2], and decode each; writes `interpolation.csv`.
pub fn run_interpolate(
    denoiser: &Checkpoint,
    points_csv: &[u8],
    theta_count: usize,
    class: Option<usize>,
    out_dir: &Path,
) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    if theta_count < 2 {
        return Err(Error::invalid("--theta-count must be at least 2"));
    }
    let model = denoiser.into_denoiser()?;
    let sched = denoiser.build_schedule()?;
    let points = csvio::points_from_csv(points_csv)?;
    if points.nrows() != 2 {
        return Err(Error::invalid("interpolation needs exactly two endpoint rows"));
    }
    let classes = encode_classes(&model, class, 2)?;
    let reverse_steps = sched.num_steps() - 1;
    let latents =
        samplers::ddim_encode(&model, &points.view(), &sched, Some(reverse_steps), classes.as_deref())?;

    let d = points.ncols();
    let mut text = String::from("theta,");
    text.push_str(&(0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(","));
    text.push('\n');
    let decode_classes = classes.as_ref().map(|c| vec![c[0]; 1]);
    for i in 0..theta_count {
        let theta =
            std::f64::consts::FRAC_PI_2 * i as f64 / (theta_count - 1) as f64;
        let z = samplers::latent_interpolate(
            &latents.row(0),
            &latents.row(1),
            theta,
        )?;
        let z2 = z.into_shape_with_order((1, d)).expect("row reshape");
        let decoded = samplers::ddim_decode(
            &model,
            &z2.view(),
            &sched,
            Some(reverse_steps),
            decode_classes.as_deref(),
        )?;
        let coords: Vec<String> = decoded.row(0).iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&format!("{theta:?},{}\n", coords.join(",")));
    }
    let path = out_dir.join("interpolation.csv");
    std::fs::write(&path, text)?;
    write_manifest(
        out_dir,
        "interpolate",
        None,
        vec![
            ("theta_count".into(), theta_count.to_string()),
            ("points_sha256".into(), sha256_hex(points_csv)),
        ],
        std::slice::from_ref(&path),
    )?;
    Ok(path)
}

/// Decode latents with the DDIM sampler (shared by encode round-trip tools).
pub fn decode_latents(
    denoiser: &Checkpoint,
    latents: &Array2<f64>,
    class: Option<usize>,
) -> Result<Array2<f64>> {
    let model = denoiser.into_denoiser()?;
    let sched = denoiser.build_schedule()?;
    let classes = encode_classes(&model, class, latents.nrows())?;
    samplers::ddim_decode(
        &model,
        &latents.view(),
        &sched,
        Some(sched.num_steps() - 1),
        classes.as_deref(),
    )
}
