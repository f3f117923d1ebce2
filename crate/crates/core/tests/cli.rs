mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use cacon::cli::cli_dispatch;
use cacon::io::config::RunConfig;
use cacon::io::manifest::{parse_manifest, Split};
use cacon::io::report::read_report;

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn dispatch(args: &[&str]) -> i32 {
    cli_dispatch(std::iter::once("cacon").chain(args.iter().copied()))
}

fn run_ok(args: &[&str]) {
    assert_eq!(dispatch(args), 0, "cacon {}", args.join(" "));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root` except the timestamped log, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "run.log" {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dispatch(&[]), 1);
    assert_eq!(dispatch(&["pretrain", "--bogus"]), 1);
    assert_eq!(dispatch(&["no-such-command"]), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"pipeline": {"pretrain_epochs": 1, "unknown_key": 3}}"#).unwrap();
    let out = dir.path().join("out");
    assert_eq!(dispatch(&["gen-data", "--config", s(&bad), "--out", s(&out)]), 1);

    let missing = dir.path().join("missing.json");
    assert_eq!(dispatch(&["gen-data", "--config", s(&missing), "--out", s(&out)]), 1);

    // pretraining without a manifest is a config problem, not a crash
    let cfg = write_config(dir.path(), "c.json", &common::tiny_config());
    assert_eq!(dispatch(&["pretrain", "--config", s(&cfg), "--out", s(&out)]), 1);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_cacon");
    let status = Command::new(bin).arg("--help").status().unwrap();
    assert_eq!(status.code(), Some(0));
    let status = Command::new(bin).arg("frobnicate").output().unwrap().status;
    assert_eq!(status.code(), Some(1));
}

#[test]
fn gen_data_writes_the_configured_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config();
    let cfg_path = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("data");
    run_ok(&["gen-data", "--config", s(&cfg_path), "--out", s(&out)]);

    let text = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    let records = parse_manifest(&text, None).unwrap();
    let spec = &cfg.data.synth;
    assert_eq!(records.len(), spec.n_subjects * spec.images_per_subject);
    for r in &records {
        assert!(out.join(&r.path).is_file(), "{}", r.path);
    }
    assert!(records.iter().any(|r| r.split == Split::Finetune));
    assert!(out.join("synth.json").is_file());
}

#[test]
fn full_flow_is_deterministic_and_verifiable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let mut cfg = common::tiny_config();
    let gen_cfg = write_config(root, "gen.json", &cfg);
    run_ok(&["gen-data", "--config", s(&gen_cfg), "--out", s(&root.join("source"))]);

    let mut target = cfg.clone();
    target.data.synth.subject_id_offset = 10_000;
    target.data.synth.n_subjects = 6;
    let tgt_cfg = write_config(root, "target.json", &target);
    run_ok(&["gen-data", "--config", s(&tgt_cfg), "--seed", "99", "--out", s(&root.join("target"))]);

    cfg.data.manifest = Some("source/manifest.csv".into());
    cfg.data.target_manifest = Some("target/manifest.csv".into());
    cfg.pipeline.checkpoint = Some("shared/checkpoint".into());
    cfg.pipeline.classifier = Some("shared/classifier".into());
    let cfg_path = write_config(root, "run.json", &cfg);
    let c = s(&cfg_path);

    let flow = |out: &Path| {
        let o = s(out);
        run_ok(&["pretrain", "--config", c, "--out", o]);
        let ck = out.join("checkpoint");
        let k = s(&ck);
        run_ok(&["finetune", "--config", c, "--checkpoint", k, "--out", o]);
        let cl = out.join("classifier");
        for (cmd, sub) in [("eval-id", "id"), ("eval-verify", "verify"), ("loio", "loio"), ("cross-eval", "cross")] {
            let target_dir = out.join(sub);
            let mut args = vec![cmd, "--config", c, "--checkpoint", k, "--out", s(&target_dir)];
            if cmd == "eval-id" {
                args.extend(["--classifier", s(&cl)]);
            }
            run_ok(&args);
        }
        run_ok(&["verify", "--config", c, "--out", o]);
    };

    let a = root.join("a");
    let b = root.join("b");
    flow(&a);
    flow(&b);

    let sa = snapshot(&a);
    assert!(sa.len() > 8);
    assert_eq!(sa, snapshot(&b));

    let cross = read_report(a.join("cross/report.json")).unwrap();
    assert!(cross.protocol.starts_with("source⇒target"), "{}", cross.protocol);
    let loio = read_report(a.join("loio/report.json")).unwrap();
    let spec = &cfg.data.synth;
    assert_eq!(loio.n, spec.n_subjects * spec.images_per_subject);
    for r in ["id", "verify", "loio", "cross"] {
        let rep = read_report(a.join(r).join("report.json")).unwrap();
        assert!((0.0..=100.0).contains(&rep.accuracy), "{r}: {}", rep.accuracy);
        assert_eq!(rep.seed, cfg.seed);
    }

    // a different seed stamps differently and fails verification
    assert_eq!(dispatch(&["verify", "--config", c, "--seed", "12345", "--out", s(&a)]), 2);
}

#[test]
fn seed_flag_changes_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = common::tiny_config();
    let gen_cfg = write_config(root, "gen.json", &cfg);
    run_ok(&["gen-data", "--config", s(&gen_cfg), "--out", s(&root.join("data"))]);
    cfg.data.manifest = Some("data/manifest.csv".into());
    cfg.pipeline.pretrain_epochs = 1;
    let c = write_config(root, "run.json", &cfg);
    run_ok(&["pretrain", "--config", s(&c), "--seed", "1", "--out", s(&root.join("s1"))]);
    run_ok(&["pretrain", "--config", s(&c), "--seed", "2", "--out", s(&root.join("s2"))]);
    assert_ne!(snapshot(&root.join("s1")), snapshot(&root.join("s2")));
}

#[test]
fn corrupted_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = common::tiny_config();
    let gen_cfg = write_config(root, "gen.json", &cfg);
    run_ok(&["gen-data", "--config", s(&gen_cfg), "--out", s(&root.join("data"))]);
    cfg.data.manifest = Some("data/manifest.csv".into());
    cfg.pipeline.pretrain_epochs = 1;
    let c = write_config(root, "run.json", &cfg);
    let out = root.join("run");
    run_ok(&["pretrain", "--config", s(&c), "--out", s(&out)]);

    let ck = out.join("checkpoint");
    let victim = std::fs::read_dir(&ck)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "ctns"))
        .unwrap();
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&victim, bytes).unwrap();
    assert_eq!(dispatch(&["verify", "--config", s(&c), "--out", s(&out)]), 2);
    assert_eq!(dispatch(&["loio", "--config", s(&c), "--checkpoint", s(&ck), "--out", s(&root.join("x"))]), 2);
}
