use std::path::Path;
use std::process::{Command, Output};

fn omni(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omni")).args(args).env_remove("RUST_LOG").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = omni(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32, prefix: &str) {
    let out = omni(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with(prefix), "{args:?}: {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_ae(dir: &Path, data: &Path, name: &str, seed: u64) -> std::path::PathBuf {
    let cfg = dir.join(format!("{name}.cfg"));
    std::fs::write(&cfg, format!("ae.hidden = 8\nae.latent = 4\nae.layers = 1\nae_train.steps = 5\nae_train.seed = {seed}\n"))
        .unwrap();
    let out = dir.join(format!("{name}.ck"));
    ok(&["train-ae", "--data", s(data), "--out", s(&out), "--config", s(&cfg)]);
    out
}

#[test]
fn usage_errors_exit_with_code_two() {
    fails_with(&["frobnicate"], 2, "error[usage]");
    fails_with(&["generate", "--model", "m.ck"], 2, "error[usage]");
}

#[test]
fn missing_inputs_are_reported_by_kind() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    fails_with(&["eval", "--real", s(&nowhere), "--gen", s(&nowhere)], 1, "error[missing-file]");
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    fails_with(&["synth-data", "--out", s(&nowhere), "--config", s(&cfg)], 1, "error[config]");
}

#[test]
fn corpus_scored_against_itself_has_zero_fid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(ok(&["synth-data", "--out", s(&data)]).starts_with("wrote 8 sequences"));
    let line = ok(&["eval", "--real", s(&data), "--gen", s(&data)]);
    let fid: f64 = line.split_whitespace().next().unwrap().strip_prefix("fid=").unwrap().parse().unwrap();
    assert!(fid.abs() < 1e-6, "{line}");
}

#[test]
fn schedule_dump_lists_every_step() {
    let out = ok(&["schedule-dump", "--steps", "7", "--schedule", "linear"]);
    assert_eq!(out.lines().filter(|l| !l.starts_with('#') && !l.starts_with('t')).count(), 7, "{out}");
}

#[test]
fn generation_with_a_different_autoencoder_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--out", s(&data)]);
    let ae_a = tiny_ae(dir.path(), &data, "a", 1);
    let ae_b = tiny_ae(dir.path(), &data, "b", 2);
    let cfg = dir.path().join("t2m.cfg");
    std::fs::write(&cfg, "train.steps = 3\ntrain.warmup = 1\ntrain.max_len = 16\n").unwrap();
    let model = dir.path().join("t2m.ck");
    ok(&["train-t2m", "--data", s(&data), "--ae", s(&ae_a), "--out", s(&model), "--config", s(&cfg)]);
    let out = dir.path().join("g.omni");
    ok(&["generate", "--model", s(&model), "--ae", s(&ae_a), "--prompt", "walk", "--out", s(&out)]);
    assert!(out.with_extension("json").exists());
    fails_with(&["generate", "--model", s(&model), "--ae", s(&ae_b), "--out", s(&out)], 1, "error[hash-mismatch]");
}

#[test]
fn ablation_rows_append_to_one_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ablate.cfg");
    std::fs::write(&cfg, "ae_train.steps = 20\ntrain.steps = 5\ntrain.warmup = 1\nfinetune.steps = 3\nfinetune.warmup = 1\n")
        .unwrap();
    let csv = dir.path().join("rows.csv");
    for v in ["baseline", "causal"] {
        ok(&["ablate", "--variant", v, "--seed", "3", "--out", s(&csv), "--config", s(&cfg)]);
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert_eq!(lines[0], "variant,fid,diversity,loss_final,seed");
    assert!(lines[1].starts_with("baseline,") && lines[2].starts_with("causal,"));
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5 && l.ends_with(",3")));
    fails_with(&["ablate", "--variant", "nonsense", "--config", s(&cfg)], 1, "error[config]");
}
