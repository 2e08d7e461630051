use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dccrn_vae::spectral::read_wav;

const TINY: [&str; 10] = [
    "corpus.speakers=6",
    "corpus.test_speakers=2",
    "corpus.noise_sources=6",
    "corpus.test_noise_sources=2",
    "corpus.utterances_per_speaker=3",
    "corpus.utterances_per_noise=3",
    "corpus.max_secs=1.0",
    "training.max_epochs=1",
    "training.batch.batch_size=4",
    "training.batch.segment_secs=0.5",
];

fn run(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dccrn-vae"));
    cmd.arg("--profile").arg("desk").arg("--out").arg(out);
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn help_lists_config_keys_and_exit_codes() {
    let o = Command::new(env!("CARGO_BIN_EXE_dccrn-vae")).arg("--help").output().unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    for key in ["training.weights.beta", "training.lr", "network.latent_dim", "stft.hop"] {
        assert!(text.contains(key), "help lacks {key}");
    }
    assert!(text.contains("Exit codes"));
}

#[test]
fn synth_data_is_deterministic_under_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    ok(a.path(), &["--seed", "5", "synth-data"]);
    ok(b.path(), &["--seed", "5", "synth-data"]);
    ok(c.path(), &["--seed", "6", "synth-data"]);
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert!(ta.iter().any(|(p, _)| p.ends_with(".wav")));
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn invalid_configuration_exits_with_code_2() {
    let d = tempfile::tempdir().unwrap();
    for bad in ["training.lr=-1", "no.such_key=3", "stft.hop=0"] {
        let o = run(d.path(), &["--set", bad, "show-config"]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.starts_with("error[config]"), "{err}");
        assert_eq!(err.trim_end().lines().count(), 1);
    }
}

#[test]
fn missing_checkpoint_exits_with_code_3() {
    let d = tempfile::tempdir().unwrap();
    let wav = d.path().join("in.wav");
    fs::write(&wav, b"").unwrap();
    let o = run(d.path(), &["enhance", wav.to_str().unwrap(), "out.wav"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[missing-checkpoint]"));
    let o = run(d.path(), &["train-nsvae"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn show_config_reflects_overrides() {
    let d = tempfile::tempdir().unwrap();
    let text = ok(d.path(), &["--set", "training.weights.beta=0.1", "show-config"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["training"]["weights"]["beta"], 0.1);
    assert_eq!(v["training"]["batch"]["batch_size"], 4);
}

#[test]
fn pipeline_runs_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    let s = ok(root, &["pretrain", "--kind", "speech"]);
    assert!(s.starts_with("kll "), "{s}");
    ok(root, &["pretrain", "--kind", "noise"]);
    ok(root, &["train-nsvae"]);
    ok(root, &["finetune", "--mode", "cf"]);
    for stage in ["pretrain_cvae", "pretrain_nvae", "train_nsvae", "finetune_cf"] {
        assert!(root.join(stage).join("config.json").is_file(), "{stage}");
        assert!(root.join(stage).join("best").is_dir(), "{stage}");
    }

    let entry = fs::read_dir(root.join("corpus").join("speech")).unwrap().next().unwrap().unwrap().path();
    let out = root.join("enhanced").join("x.wav");
    ok(root, &["enhance", entry.to_str().unwrap(), out.to_str().unwrap()]);
    assert_eq!(read_wav(&out).unwrap().len(), read_wav(&entry).unwrap().len());

    let text = ok(root, &["evaluate"]);
    assert!(text.contains("improvement_db"));
    let eval_dir = root.join("evaluate").join("finetune_cf");
    for f in ["input.csv", "output.csv", "summary.json"] {
        assert!(eval_dir.join(f).is_file(), "{f}");
    }
    ok(root, &["evaluate", "--pre-finetune"]);
    assert!(root.join("evaluate").join("pre_finetune").join("summary.json").is_file());

    let diag = ok(root, &["diagnose", "--kind", "noise"]);
    let v: serde_json::Value = serde_json::from_str(&diag).unwrap();
    assert!(v["kll"].as_f64().unwrap() >= 0.0);
}

#[test]
fn beta_sweep_reports_one_row_per_beta_in_order() {
    let d = tempfile::tempdir().unwrap();
    let text = ok(d.path(), &["sweep", "--grid", "beta"]);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let betas: Vec<f64> = rows.iter().map(|r| r.split_whitespace().next().unwrap().parse().unwrap()).collect();
    assert_eq!(betas, vec![1.0, 0.1, 0.01, 0.001]);
    let json: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(d.path().join("sweep").join("table.json")).unwrap()).unwrap();
    assert_eq!(json.len(), 4);
    assert!(json.iter().all(|r| r["kll"].as_f64().unwrap().is_finite()));
}
