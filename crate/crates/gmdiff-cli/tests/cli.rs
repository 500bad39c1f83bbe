//! End-to-end tests driving the `gmdiff` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gmdiff"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_CONFIG: &str = r#"
[dataset]
seed = 7

[[dataset.mixture.component]]
weight = 0.25
mean = [2.0, 2.0]
variance = [0.3, 0.3]

[[dataset.mixture.component]]
weight = 0.25
mean = [2.0, -2.0]
variance = [0.3, 0.3]

[[dataset.mixture.component]]
weight = 0.25
mean = [-2.0, 2.0]
variance = [0.3, 0.3]

[[dataset.mixture.component]]
weight = 0.25
mean = [-2.0, -2.0]
variance = [0.3, 0.3]

[schedule]
family = "linear"
steps = 50

[model]
hidden = [16, 16]
embedding_dim = 16
group_size = 8
conditional = false
learned_variance = true

[classifier_model]
hidden = [16, 16]
embedding_dim = 16
group_size = 8

[metrics]
ref_count = 300

[train.diffusion]
batch_size = 32
iterations = 60
seed = 5

[train.classifier]
batch_size = 32
iterations = 60
weight_decay = 0.05
seed = 6
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    (dir, cfg)
}

fn train(dir: &Path) {
    let out = run_in(dir, &["train", "--config", "config.toml", "--out", "train"]);
    assert_ok(&out);
    assert!(dir.join("train/denoiser.ckpt").exists());
    assert!(dir.join("train/classifier.ckpt").exists());
    assert!(dir.join("train/run-manifest.json").exists());
}

#[test]
fn full_pipeline_train_sample_eval_sweep() {
    let (dir, _) = setup();
    train(dir.path());

    // Guided sampling.
    let out = run_in(
        dir.path(),
        &[
            "sample",
            "--checkpoint",
            "train/denoiser.ckpt",
            "--classifier",
            "train/classifier.ckpt",
            "--guidance-scale",
            "1.0",
            "--class",
            "0",
            "--n",
            "50",
            "--seed",
            "9",
            "--out",
            "samples",
        ],
    );
    assert_ok(&out);
    let csv = std::fs::read_to_string(dir.path().join("samples/samples.csv")).unwrap();
    assert!(csv.starts_with("x0,x1,class,seed,chain\n"));
    assert!(csv.lines().count() == 51);

    // Evaluate against the config's fresh reference draw.
    let out = run_in(
        dir.path(),
        &[
            "eval",
            "--config",
            "config.toml",
            "--samples",
            "samples/samples.csv",
            "--out",
            "eval",
        ],
    );
    assert_ok(&out);
    assert!(dir.path().join("eval/metrics.json").exists());

    // Analytic sweep over two scales.
    let out = run_in(
        dir.path(),
        &[
            "sweep",
            "--config",
            "config.toml",
            "--scales",
            "0,1",
            "--n",
            "60",
            "--analytic",
            "--out",
            "sweep",
        ],
    );
    assert_ok(&out);
    for f in ["sweep.csv", "frechet.svg", "precision.svg", "recall.svg", "class_fidelity.svg"] {
        assert!(dir.path().join("sweep").join(f).exists(), "missing {f}");
    }
}

#[test]
fn retraining_is_byte_identical() {
    let (dir, _) = setup();
    let out = run_in(dir.path(), &["train", "--config", "config.toml", "--out", "a"]);
    assert_ok(&out);
    let out = run_in(dir.path(), &["train", "--config", "config.toml", "--out", "b"]);
    assert_ok(&out);
    let a = std::fs::read(dir.path().join("a/denoiser.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("b/denoiser.ckpt")).unwrap();
    assert_eq!(a, b, "same config and seed must give identical checkpoints");
}

#[test]
fn missing_config_field_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.toml"), "[dataset]\nseed = 7\n").unwrap();
    let out = run_in(dir.path(), &["train", "--config", "broken.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mixture"), "stderr should name the field: {stderr}");
}

#[test]
fn guidance_without_classifier_exits_2() {
    let (dir, _) = setup();
    train(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "sample",
            "--checkpoint",
            "train/denoiser.ckpt",
            "--guidance-scale",
            "1.0",
            "--class",
            "0",
            "--n",
            "4",
            "--out",
            "s",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn guidance_scale_zero_matches_omitted_guidance_byte_for_byte() {
    let (dir, _) = setup();
    train(dir.path());
    let base = [
        "sample",
        "--checkpoint",
        "train/denoiser.ckpt",
        "--n",
        "20",
        "--seed",
        "21",
    ];
    let mut with_zero: Vec<&str> = base.to_vec();
    with_zero.extend(["--classifier", "train/classifier.ckpt", "--guidance-scale", "0", "--class", "1", "--out", "zero"]);
    // The class column differs when a class is recorded, so record it in
    // both runs to compare the full files.
    let mut plain: Vec<&str> = base.to_vec();
    plain.extend(["--class", "1", "--out", "plain"]);
    assert_ok(&run_in(dir.path(), &with_zero));
    assert_ok(&run_in(dir.path(), &plain));
    let a = std::fs::read(dir.path().join("zero/samples.csv")).unwrap();
    let b = std::fs::read(dir.path().join("plain/samples.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ddim_respacing_reports_eval_count() {
    let (dir, _) = setup();
    train(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "sample",
            "--checkpoint",
            "train/denoiser.ckpt",
            "--ddim",
            "--steps",
            "25",
            "--n",
            "3",
            "--count-evals",
            "--out",
            "ddim",
        ],
    );
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("denoiser evals per chain: 25"),
        "stdout: {stdout}"
    );
}

#[test]
fn segment_schedule_flag_is_accepted_and_logged() {
    let (dir, _) = setup();
    train(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "sample",
            "--checkpoint",
            "train/denoiser.ckpt",
            "--segments",
            "4,2,2,1,1",
            "--n",
            "3",
            "--out",
            "seg",
        ],
    );
    assert_ok(&out);
    let manifest = std::fs::read_to_string(dir.path().join("seg/run-manifest.json")).unwrap();
    assert!(manifest.contains("Segments"), "manifest: {manifest}");
    assert!(manifest.contains("4, 2, 2, 1, 1"), "manifest: {manifest}");

    // Malformed segment strings are usage errors.
    let out = run_in(
        dir.path(),
        &[
            "sample",
            "--checkpoint",
            "train/denoiser.ckpt",
            "--segments",
            "1,2,3",
            "--n",
            "3",
            "--out",
            "seg2",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_a_set_against_itself_is_perfect() {
    let (dir, _) = setup();
    train(dir.path());
    assert_ok(&run_in(
        dir.path(),
        &[
            "sample",
            "--checkpoint",
            "train/denoiser.ckpt",
            "--n",
            "80",
            "--seed",
            "2",
            "--out",
            "s",
        ],
    ));
    let out = run_in(
        dir.path(),
        &[
            "eval",
            "--config",
            "config.toml",
            "--samples",
            "s/samples.csv",
            "--ref-csv",
            "s/samples.csv",
            "--out",
            "self-eval",
        ],
    );
    assert_ok(&out);
    let json = std::fs::read_to_string(dir.path().join("self-eval/metrics.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["precision"], 1.0);
    assert_eq!(report["recall"], 1.0);
    assert!(report["frechet"].as_f64().unwrap().abs() < 1e-9);
}

#[test]
fn unknown_flags_exit_2() {
    let out = bin().arg("sample").arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn encode_and_interpolate_produce_csvs() {
    let (dir, _) = setup();
    train(dir.path());
    std::fs::write(
        dir.path().join("points.csv"),
        "x0,x1\n2.0,2.0\n-2.0,-2.0\n",
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &[
            "encode",
            "--checkpoint",
            "train/denoiser.ckpt",
            "--points",
            "points.csv",
            "--reverse-steps",
            "49",
            "--out",
            "enc",
        ],
    );
    assert_ok(&out);
    let latents = std::fs::read_to_string(dir.path().join("enc/latents.csv")).unwrap();
    assert_eq!(latents.lines().count(), 3);

    let out = run_in(
        dir.path(),
        &[
            "interpolate",
            "--checkpoint",
            "train/denoiser.ckpt",
            "--points",
            "points.csv",
            "--theta-count",
            "5",
            "--out",
            "interp",
        ],
    );
    assert_ok(&out);
    let interp = std::fs::read_to_string(dir.path().join("interp/interpolation.csv")).unwrap();
    assert_eq!(interp.lines().count(), 6);
    assert!(interp.starts_with("theta,x0,x1\n0.0,"));
}

#[test]
fn toy_training_config_completes_quickly() {
    // T = 100, 2k iterations, default architecture: the bound has 2x margin
    // on one core.
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[dataset]
seed = 7

[[dataset.mixture.component]]
weight = 0.5
mean = [-1.0]
variance = [0.25]

[[dataset.mixture.component]]
weight = 0.5
mean = [1.0]
variance = [0.25]

[schedule]
family = "linear"
steps = 100

[train.diffusion]
batch_size = 256
iterations = 2000
seed = 11
"#;
    std::fs::write(dir.path().join("toy.toml"), cfg).unwrap();
    let start = std::time::Instant::now();
    let out = run_in(dir.path(), &["train", "--config", "toy.toml", "--out", "toy"]);
    assert_ok(&out);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "toy training took {elapsed:.1}s, budget 60s");
    assert!(dir.path().join("toy/denoiser.ckpt").exists());
}
