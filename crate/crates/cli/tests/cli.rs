use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lslu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lslu")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A short synthetic training run into `dir`.
fn train(dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("cfg.json");
    fs::write(
        &cfg,
        r#"{"width": 8, "epochs": 2, "batch": 16, "lr": 5e-3, "synthetic_noise": 0.3}"#,
    )
    .unwrap();
    let out = dir.join("run");
    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    lslu(&args)
}

#[test]
fn train_eval_fuse_bench_selectivity() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--dropout", "0.2", "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in ["checkpoint.lslu", "metrics.csv", "trajectories.csv", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let stored = fs::read_to_string(run.join("config.json")).unwrap();
    assert!(
        stored.contains("\"dropout\": 0.2") && stored.contains("\"seed\": 5"),
        "{stored}"
    );
    let ckpt = run.join("checkpoint.lslu");
    let ckpt = ckpt.to_str().unwrap();

    let final_acc = stdout(&o).trim().strip_prefix("final_val_acc,").unwrap().to_string();
    let e = lslu(&["eval", ckpt]);
    assert!(e.status.success());
    assert_eq!(stdout(&e).lines().next().unwrap(), format!("top1,{final_acc}"));

    let fused = run.join("fused.lslu");
    let f = lslu(&["fuse", ckpt, fused.to_str().unwrap(), "--probes", "20"]);
    assert!(f.status.success(), "{}", String::from_utf8_lossy(&f.stderr));
    assert!(stdout(&f).lines().last().unwrap().starts_with("logits,"));

    let b = lslu(&["bench", ckpt, "--fused", "--unfused", "--iters", "3", "--warmup", "1"]);
    assert!(b.status.success());
    let labels: Vec<String> = stdout(&b)
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(labels, ["unfused", "fused"]);

    let sel = run.join("sel");
    let s = lslu(&["selectivity", ckpt, "--layer", "all", "--out", sel.to_str().unwrap()]);
    assert!(s.status.success());
    assert_eq!(stdout(&s).lines().count(), 1 + 4);
    assert!(sel.join("selectivity.csv").exists());
    let bad = lslu(&["selectivity", ckpt, "--layer", "nope", "--out", sel.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_groups_and_succeeds() {
    let o = lslu(&[
        "gradcheck",
        "--arch",
        "mini-resnet",
        "--insertion",
        "full",
        "--base",
        "silu",
        "--samples",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("group,tensors,checked,skipped,max_rel_err,pass"));
    assert!(text.contains("Series(Theta)") && text.contains("BnGamma"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn ablate_writes_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let o = lslu(&["ablate", "--epochs", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(stdout(&o), csv);
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let missing = lslu(&["eval", dir.path().join("none.lslu").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    assert!(missing.stdout.is_empty());

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"epochz": 1}"#).unwrap();
    assert_eq!(
        lslu(&["train", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );
    assert_eq!(lslu(&["train", "--dropout", "1.5"]).status.code(), Some(2));
    assert_eq!(lslu(&["train", "--dataset", "mnist"]).status.code(), Some(2));
    assert!(!lslu(&["train", "--dtype", "f16"]).status.success());
}

#[test]
fn rerun_gives_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(train(a.path(), &["--dropout", "0.2"]).status.success());
    assert!(train(b.path(), &["--dropout", "0.2"]).status.success());
    for f in ["metrics.csv", "trajectories.csv"] {
        assert_eq!(
            fs::read(a.path().join("run").join(f)).unwrap(),
            fs::read(b.path().join("run").join(f)).unwrap()
        );
    }
}
