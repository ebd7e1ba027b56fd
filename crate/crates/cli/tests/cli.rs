use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
preset = "toy"
datasets = ["data.toml"]

[model]
d_model = 16
d_ff = 16
n_layers = 1
n_heads = 2
n_tome = 16
tome_reference_context = 32

[train]
minibatch = 2
context_points = 32
target_points = 32
validation_every = 0
checkpoint_every = 2
schedule = { phases = [{ iterations = 3, warmup = 1, peak = 1e-3, floor = 1e-5 }] }

[eval]
horizons = [12, 24]
context_size = 32
sigma = 64.0
seeds = [1]
max_windows = 3

[tune]
contexts = [16, 32]
sigmas = [32.0, 64.0]

[sweep]
context_sizes = [16, 32]
minibatch = 2
runs = 2
horizon = 12
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("tick,a,b\n");
    for i in 0..600 {
        let t = i as f64 / 24.0;
        let a = (2.0 * std::f64::consts::PI * t).sin();
        let b = 0.5 * (2.0 * std::f64::consts::PI * t / 7.0).cos() + 0.01 * t;
        csv.push_str(&format!("{i},{a},{b}\n"));
    }
    fs::write(dir.path().join("data.csv"), csv).unwrap();
    fs::write(
        dir.path().join("data.toml"),
        "name = \"synth\"\npath = \"data.csv\"\nresolution_seconds = 3600\n",
    )
    .unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn dam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dam"))
        .current_dir(dir)
        .env("DAM_THREADS", "1")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn train(dir: &Path, out: &str, seed: &str) -> PathBuf {
    ok(&dam(dir, &["train", "--config", "run.toml", "--seed", seed, "--out", out]));
    dir.join(out)
}

#[test]
fn help_lists_every_flag() {
    let out = dam(Path::new("."), &["forecast", "--help"]);
    let text = ok(&out);
    for flag in [
        "--config",
        "--dataset",
        "--checkpoint",
        "--context-size",
        "--sigma",
        "--tome",
        "--horizons",
        "--at",
        "--seed",
        "--out",
        "--ablate",
        "--rates",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn usage_errors_exit_one_with_a_single_line() {
    let out = dam(Path::new("."), &["forecast", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[user]:"));
}

#[test]
fn missing_checkpoint_is_a_user_error() {
    let dir = setup();
    let out = dam(dir.path(), &["eval", "--config", "run.toml", "--checkpoint", "nope", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(dir.path().join("o/FAILED").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[train]\nbatchsize = 3\n").unwrap();
    let out = dam(dir.path(), &["impute", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_ablation_component_is_rejected() {
    let dir = setup();
    let run = train(dir.path(), "t", "42");
    let ckpt = run.join("final");
    let out = dam(
        dir.path(),
        &["ablate", "--config", "run.toml", "--checkpoint", ckpt.to_str().unwrap(), "--ablate", "ff_x"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_is_reproducible_and_writes_resolved_config() {
    let dir = setup();
    let a = train(dir.path(), "a", "42");
    let b = train(dir.path(), "b", "42");
    let c = train(dir.path(), "c", "7");
    let log = |p: &Path| fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(log(&a), log(&b));
    assert_ne!(log(&a), log(&c));
    assert!(a.join("final").join("manifest.toml").exists());
    assert!(a.join("ckpt-0000002").exists());
    let resolved = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(resolved.contains("seed = 42"));
}

#[test]
fn every_command_produces_its_artifacts() {
    let dir = setup();
    let run = train(dir.path(), "t", "42");
    let ckpt = run.join("final");
    let ckpt = ckpt.to_str().unwrap();
    let base = ["--config", "run.toml", "--checkpoint", ckpt];
    let go = |cmd: &str, out: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&base);
        args.extend_from_slice(&["--out", out]);
        args.extend_from_slice(extra);
        ok(&dam(dir.path(), &args));
        dir.path().join(out)
    };

    let f = go("forecast", "f", &["--at", "0.5,1.0,30.0"]);
    let text = fs::read_to_string(f.join("forecast.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for ch in ["a", "b"] {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some(ch)).count(), 3);
    }
    assert!(rows.iter().all(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap().is_finite()));
    let again = go("forecast", "f2", &["--at", "0.5,1.0,30.0"]);
    assert_eq!(text, fs::read_to_string(again.join("forecast.csv")).unwrap());

    let i = go("impute", "i", &["--rates", "12.5,25,37.5,50"]);
    let table = fs::read_to_string(i.join("imputation-synth.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "rate,basis_mse,basis_mae,linear_mse,linear_mae");
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("avg"));

    let e = go("eval", "e", &["--horizons", "12,24"]);
    let metrics = fs::read_to_string(e.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);

    let t = go("tune", "tu", &[]);
    assert!(t.join("hsr-grid-synth.csv").exists());
    assert!(t.join("hsr-grid-synth.svg").exists());

    let a = go("ablate", "ab", &["--ablate", "tome,ff_b_cross"]);
    let abl = fs::read_to_string(a.join("ablation-synth.csv")).unwrap();
    assert_eq!(abl.lines().count(), 4);

    let s = go("sweep", "s", &[]);
    assert_eq!(fs::read_to_string(s.join("cost.csv")).unwrap().lines().count(), 3);

    let n = go("inspect", "n", &[]);
    let coeffs = fs::read_to_string(n.join("coefficients.csv")).unwrap();
    assert_eq!(coeffs.lines().count(), 1 + 2 * 437);
    assert!(n.join("attention.csv").exists());
    assert!(n.join("coefficients.svg").exists());
}
