use std::path::Path;
use std::process::{Command, Output};

fn unfoldse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unfoldse"))
        .current_dir(dir)
        .env_remove("UNFOLDSE_DEVICE")
        .args(args)
        .output()
        .expect("spawn unfoldse")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit status")
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
        .trim()
        .to_string()
}

const RUN_TOML: &str = "q = 1\nseed = 3\n[train]\nbatch_size = 2\nepochs = 1\n[data]\nsegment_seconds = 0.5\ntrain_manifest = \"toy/manifest.tsv\"\n";

fn toy(dir: &Path) {
    let o = unfoldse(dir, &["toygen", "--pairs", "3", "--seconds", "1", "--seed", "2", "--out", "toy"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(dir.join("run.toml"), RUN_TOML).unwrap();
}

#[test]
fn help_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&unfoldse(dir.path(), &["--help"])), 0);
    assert_eq!(code(&unfoldse(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&unfoldse(dir.path(), &["inspect", "--fusion", "X"])), 1);
    assert_eq!(code(&unfoldse(dir.path(), &["enhance", "a.wav"])), 1, "missing --checkpoint");
    assert_eq!(code(&unfoldse(dir.path(), &["train"])), 1, "missing manifest");
}

#[test]
fn unsupported_device_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_unfoldse"))
        .current_dir(dir.path())
        .env("UNFOLDSE_DEVICE", "cuda")
        .arg("inspect")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cpu"));
}

#[test]
fn inspect_reports_parameter_structure() {
    let dir = tempfile::tempdir().unwrap();
    let q3 = stdout(&unfoldse(dir.path(), &["inspect"]));
    assert_eq!(field(&q3, "q "), "3");
    assert_eq!(field(&q3, "fusion "), "R");
    assert!(field(&q3, "total ").starts_with("8279422"));
    assert!(field(&q3, "per step ").starts_with("1794918"));
    let q0 = stdout(&unfoldse(dir.path(), &["inspect", "--q", "0"]));
    assert!(field(&q0, "total ").starts_with("2894668"));
    assert!(field(&q0, "per step ").starts_with("1794918"));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[model]\nq = 2\n").unwrap();
    let o = unfoldse(dir.path(), &["--config", "bad.toml", "inspect"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("top level"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "q = 2\nfusion = \"G\"\n").unwrap();
    let o = stdout(&unfoldse(dir.path(), &["--config", "c.toml", "--q", "1", "inspect"]));
    assert_eq!(field(&o, "q "), "1");
    assert_eq!(field(&o, "fusion "), "G");
}

#[test]
fn toygen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = unfoldse(dir.path(), &["toygen", "--pairs", "2", "--seconds", "0.5", "--seed", "9", "--out", out]);
        assert_eq!(code(&o), 0);
    }
    for f in ["manifest.tsv", "clean/clean_0001.wav", "noise/noise_0000.wav"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.tsv"), "clean\tnoise\tsnr_db\tseed\nnone.wav\tnone.wav\t0\t1\n").unwrap();
    let o = unfoldse(dir.path(), &["train", "--train-manifest", "m.tsv", "--out", "run"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&unfoldse(dir.path(), &["--checkpoint", "nope.safetensors", "inspect"])), 2);
}

#[test]
fn train_enhance_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d);
    let o = unfoldse(d, &["--config", "run.toml", "train", "--max-steps", "2", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.safetensors", "last.safetensors", "history.tsv", "run_config.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(d.join("run/history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let o = unfoldse(d, &["--checkpoint", "run/best.safetensors", "enhance", "toy/clean/clean_0000.wav", "--out", "enh"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let enhanced = hound::WavReader::open(d.join("enh/clean_0000_enhanced.wav")).unwrap();
    let input = hound::WavReader::open(d.join("toy/clean/clean_0000.wav")).unwrap();
    assert_eq!(enhanced.spec().sample_rate, 16_000);
    assert_eq!(enhanced.len(), input.len());

    let o = unfoldse(d, &["--checkpoint", "run/best.safetensors", "--config", "run.toml", "evaluate", "toy/manifest.tsv", "--out", "ev"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mean"));
    let kv = std::fs::read_to_string(d.join("ev/metrics.kv")).unwrap();
    assert_eq!(field(&kv, "items="), "3");
    assert!(field(&kv, "mean_enhanced_sisnr=").parse::<f64>().unwrap().is_finite());

    let o = unfoldse(d, &["--checkpoint", "run/best.safetensors", "--q", "2", "inspect"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("q: stored 1, requested 2"));
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d);
    for out in ["r1", "r2"] {
        let o = unfoldse(d, &["--config", "run.toml", "train", "--max-steps", "2", "--out", out]);
        assert_eq!(code(&o), 0);
    }
    let load = |p: &str| unfoldse::Checkpoint::load(d.join(p)).unwrap();
    let (a, b) = (load("r1/last.safetensors"), load("r2/last.safetensors"));
    assert_eq!(a.progress, b.progress);
    assert_eq!(a.weights.len(), b.weights.len());
    for (name, t) in &a.weights {
        let x: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        let y: Vec<f32> = b.weights[name].flatten_all().unwrap().to_vec1().unwrap();
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()), "{name}");
    }
}

#[test]
fn ablate_params_only_lists_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = unfoldse(dir.path(), &["ablate", "--params-only", "--q-values", "0,2", "--modes", "R,A", "--out", "ab"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("ab/ablation.txt")).unwrap();
    assert_eq!(table, stdout(&o));
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("0    R") && rows[0].contains("2.89"));
    assert!(rows[1].starts_with("2    R") && rows[1].contains("6.48"));
}
