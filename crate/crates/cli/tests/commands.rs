use std::path::Path;
use std::process::{Command, Output};

fn acan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gradcheck_all_exits_zero() {
    let o = acan(&["gradcheck", "all"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn gradcheck_unknown_op_fails() {
    let o = acan(&["gradcheck", "conv3d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown op"));
}

#[test]
fn config_prints_resolved_json() {
    let o = acan(&["config", "--seed", "5", "--no-image-pooling"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["image_pooling"], false);
    assert_eq!(v["optimizer"]["base_lr"], 2e-4);
}

#[test]
fn invalid_flag_combination_rejected() {
    let o = acan(&["params", "--inference", "ce-soft"]);
    assert_eq!(o.status.code(), Some(2));
    let o = acan(&["params", "--inference", "ce-soft", "--loss", "ce"]);
    assert!(o.status.success());
}

#[test]
fn pipeline_gen_train_eval_infer_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("exp.json");
    std::fs::write(
        &config,
        r#"{"dataset": {"synthetic": {"train": 16, "val": 4, "test": 4}}, "epochs": 1}"#,
    )
    .unwrap();
    let c = p(&config);

    let data = root.join("data");
    let o = acan(&["gen", "--config", c, "--out", p(&data)]);
    assert!(o.status.success(), "{o:?}");
    assert!(data.join("manifest.json").exists());
    assert!(data.join("00000.pgm.json").exists());

    let run = root.join("run");
    let o = acan(&[
        "train",
        "--config",
        c,
        "--out",
        p(&run),
        "--quiet",
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("parameters: "));
    for f in [
        "final.ckpt",
        "best.ckpt",
        "steps.csv",
        "validation.csv",
        "config.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("final.ckpt");
    let eval = root.join("eval");
    let args = [
        "eval",
        "--config",
        c,
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&eval),
        "--curves",
        "0,5",
        "--visualize",
        "1",
    ];
    let o = acan(&args);
    assert!(o.status.success(), "{o:?}");
    let first = std::fs::read(eval.join("metrics.csv")).unwrap();
    for f in [
        "report.json",
        "confusion.csv",
        "curves.csv",
        "00000_pred.pgm",
    ] {
        assert!(eval.join(f).exists(), "{f}");
    }
    assert!(acan(&args).status.success());
    assert_eq!(std::fs::read(eval.join("metrics.csv")).unwrap(), first);

    let o = acan(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&eval),
        "--loss",
        "ce",
    ]);
    assert_eq!(o.status.code(), Some(2), "head mismatch must fail");

    let out = root.join("infer");
    let o = acan(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&data.join("00000.ppm")),
        "--out",
        p(&out),
        "--query",
        "0,7",
    ]);
    assert!(o.status.success(), "{o:?}");
    for f in [
        "depth.pgm",
        "depth.pgm.json",
        "attention_0.pgm",
        "attention_7.pgm",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }

    let md = root.join("table.md");
    let csv = eval.join("metrics.csv");
    let o = acan(&["report", p(&csv), p(&csv), "--out", p(&md)]);
    assert!(o.status.success(), "{o:?}");
    let table = std::fs::read_to_string(&md).unwrap();
    assert!(table.contains("| OR(soft) | 2 |"), "{table}");
    assert!(table.contains("| OR(hard) | 2 |"), "{table}");
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, params) in [("default.json", "69264"), ("cross_entropy.json", "67712")] {
        let o = acan(&["params", "--config", p(&dir.join(name))]);
        assert!(o.status.success(), "{name}: {o:?}");
        assert_eq!(stdout(&o).trim(), params);
    }
}
