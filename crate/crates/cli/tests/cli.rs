use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn summary(&self) -> Value {
        let last = self.stdout.lines().last().expect("stdout has a final line");
        serde_json::from_str(last).expect("final line is JSON")
    }
}

fn hmt(args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hmt"));
    cmd.args(args).env_remove("HMT_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn hmt");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "d = 8\nh = 2\nl_max = 1\nn_max = 3\nm_max = 1\nr = 4\nclasses = 2\nwindows = 1, full\n";

#[test]
fn missing_data_is_a_usage_error() {
    let run = hmt(&["eval", "--model", "m", "--report", "r"], &[]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("--data"));
    assert!(run.stderr.contains("Usage"));
    let err_line: Value = serde_json::from_str(run.stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err_line["error"], "usage");
    assert_eq!(run.summary()["exit_code"], 1);
}

#[test]
fn unknown_flags_and_subcommands_are_rejected() {
    assert_eq!(hmt(&["train", "--bogus"], &[]).code, 1);
    assert_eq!(hmt(&["frobnicate"], &[]).code, 1);
    assert_eq!(hmt(&[], &[]).code, 1);
}

#[test]
fn help_exits_cleanly() {
    let run = hmt(&["--help"], &[]);
    assert_eq!(run.code, 0);
    assert!(run.stdout.contains("gen-fixtures"));
}

#[test]
fn fixtures_train_eval_on_xor() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = hmt(
        &["gen-fixtures", "--out", p(&data), "--docs", "300", "--classes", "2", "--mode", "xor", "--seed", "7", "--sigma", "0.3"],
        &[],
    );
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert_eq!(run.summary()["docs"]["val"], 60);
    for f in ["train.hmtb", "val.hmtb", "test.hmtb"] {
        assert!(data.join(f).exists());
    }

    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "lr = 0.001\nepochs = 4\npatience = 2\nseed = 7\n").unwrap();
    let model = dir.path().join("model.hmtp");
    let log = dir.path().join("log.jsonl");
    let run = hmt(
        &["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&model), "--log", p(&log)],
        &[],
    );
    assert_eq!(run.code, 0, "{}", run.stderr);
    let records: Vec<Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!records.is_empty());
    for key in ["epoch", "train_loss", "val_accuracy", "val_macro_f1", "seconds"] {
        assert!(records[0].get(key).is_some(), "{key}");
    }

    let report = dir.path().join("report.json");
    let run = hmt(&["eval", "--data", p(&data), "--model", p(&model), "--report", p(&report)], &[]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let acc = run.summary()["accuracy"].as_f64().unwrap();
    assert!(acc >= 0.90, "accuracy {acc}");
    let full: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(full["confusion"].as_array().unwrap().len(), 2);
    assert_eq!(full["accuracy"].as_f64().unwrap(), acc);
}

fn train_once(root: &Path, tag: &str, env: &[(&str, &str)]) -> (Vec<u8>, Vec<Value>) {
    let data = root.join("data");
    let cfg = root.join("cfg.txt");
    let model = root.join(format!("{tag}.hmtp"));
    let log = root.join(format!("{tag}.jsonl"));
    let run = hmt(
        &["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&model), "--log", p(&log)],
        env,
    );
    assert_eq!(run.code, 0, "{}", run.stderr);
    let records = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("seconds");
            v
        })
        .collect();
    (fs::read(&model).unwrap(), records)
}

#[test]
fn training_is_reproducible_and_seed_env_wins() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = hmt(&["gen-fixtures", "--out", p(&data), "--docs", "30", "--mode", "planted"], &[]);
    assert_eq!(run.code, 0);
    fs::write(dir.path().join("cfg.txt"), "lr = 0.001\nepochs = 2\nseed = 1\n").unwrap();

    let a = train_once(dir.path(), "a", &[]);
    let b = train_once(dir.path(), "b", &[]);
    assert_eq!(a, b);
    let c = train_once(dir.path(), "c", &[("HMT_SEED", "2")]);
    assert_ne!(a.0, c.0);
    let sidecar = fs::read_to_string(dir.path().join("c.hmtp.config")).unwrap();
    assert!(sidecar.contains("seed = 2"));
}

#[test]
fn seed_env_overrides_fixture_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(hmt(&["gen-fixtures", "--out", p(&a), "--docs", "10", "--seed", "5"], &[]).code, 0);
    let run = hmt(&["gen-fixtures", "--out", p(&b), "--docs", "10", "--seed", "9"], &[("HMT_SEED", "5")]);
    assert_eq!(run.summary()["seed"], 5);
    assert_eq!(fs::read(a.join("train.hmtb")).unwrap(), fs::read(b.join("train.hmtb")).unwrap());
    let bad = hmt(&["gen-fixtures", "--out", p(&b), "--docs", "10"], &[("HMT_SEED", "x")]);
    assert_eq!(bad.code, 1);
}

#[test]
fn gradcheck_reports_and_enforces_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let run = hmt(&["gradcheck", "--config", p(&cfg), "--seed", "3"], &[]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let x = run.summary()["max_rel_err"].as_f64().unwrap();
    assert!(x < 1e-4, "{x}");

    let strict = hmt(&["gradcheck", "--config", p(&cfg), "--seed", "3", "--tolerance", "0"], &[]);
    assert_eq!(strict.code, 3);
    assert!(strict.summary().get("max_rel_err").is_some());
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "colour = blue\n").unwrap();
    let run = hmt(&["gradcheck", "--config", p(&cfg)], &[]);
    assert_eq!(run.code, 2);
    let err: Value = serde_json::from_str(run.stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "config");

    let data = dir.path().join("data");
    assert_eq!(hmt(&["gen-fixtures", "--out", p(&data), "--docs", "10"], &[]).code, 0);
    let model = dir.path().join("m.hmtp");
    fs::write(&model, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
    fs::write(dir.path().join("m.hmtp.config"), "").unwrap();
    let report = dir.path().join("r.json");
    let run = hmt(&["eval", "--data", p(&data), "--model", p(&model), "--report", p(&report)], &[]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("\"format\""));

    let truncated = data.join("val.hmtb");
    let bytes = fs::read(&truncated).unwrap();
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let cfgfile = dir.path().join("ok.txt");
    fs::write(&cfgfile, "epochs = 1\n").unwrap();
    let run = hmt(
        &[
            "train", "--data", p(&data), "--config", p(&cfgfile),
            "--out", p(&dir.path().join("x.hmtp")), "--log", p(&dir.path().join("x.jsonl")),
        ],
        &[],
    );
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("truncated"));
}

#[test]
fn inspect_masks_writes_binary_head_major_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(hmt(&["gen-fixtures", "--out", p(&data), "--docs", "10", "--seed", "4"], &[]).code, 0);
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "epochs = 1\n").unwrap();
    let model = dir.path().join("m.hmtp");
    let log = dir.path().join("l.jsonl");
    let run = hmt(
        &["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&model), "--log", p(&log)],
        &[],
    );
    assert_eq!(run.code, 0, "{}", run.stderr);

    let out = dir.path().join("masks.json");
    let run = hmt(
        &["inspect-masks", "--data", p(&data), "--model", p(&model), "--doc", "synth-4-1-00001", "--out", p(&out)],
        &[],
    );
    assert_eq!(run.code, 0, "{}", run.stderr);
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let (n, m, l) = (v["n"].as_u64().unwrap() as usize, v["m"].as_u64().unwrap() as usize, v["l"].as_u64().unwrap() as usize);
    let masks = &v["masks"];
    let d_mask = masks["d_mask"].as_array().unwrap();
    assert_eq!(d_mask.len(), 4);
    assert_eq!(d_mask[0].as_array().unwrap().len(), n + m + 1);
    assert_eq!(masks["d_pv"][0].as_array().unwrap().len(), l);
    assert_eq!(masks["d_sv"][0][0].as_array().unwrap().len(), m);
    for head in d_mask {
        for row in head.as_array().unwrap() {
            assert!(row.as_array().unwrap().iter().all(|x| x == 0 || x == 1));
        }
    }

    let run = hmt(
        &["inspect-masks", "--data", p(&data), "--model", p(&model), "--doc", "missing", "--out", p(&out)],
        &[],
    );
    assert_eq!(run.code, 2);
}
