use std::path::Path;
use std::process::{Command, Output};

use dynamixer::train::Checkpoint;
use dynamixer::{Ablation, MixGenKind, Model, ModelConfig};

fn dynamixer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynamixer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn save_model(dir: &Path, name: &str, kind: MixGenKind) -> String {
    let cfg = ModelConfig {
        ablation: Ablation {
            gen_kind: kind,
            ..Default::default()
        },
        ..ModelConfig::preset("tiny").unwrap()
    };
    let path = dir.join(name);
    Checkpoint::from_model(Model::new(cfg, 3).unwrap()).save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

fn parse_matrix(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn analyze_prints_csv_and_json() {
    let o = dynamixer(&["analyze", "--preset", "dynamixer-s"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("component,params,macs\n"));
    assert!(text.contains("total,26223464,"));

    let o = dynamixer(&["analyze", "--preset", "tiny", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["total_params"], 6274);
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"model": {"image_size": 32, "stages": [], "bogus": 1}}"#).unwrap();
    let o = dynamixer(&["analyze", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
    assert!(stderr(&o).contains("config error"), "{}", stderr(&o));

    let o = dynamixer(&["analyze", "--preset", "no-such-model"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dynamixer(&["analyze", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_rejects_eps_below_noise_floor() {
    let o = dynamixer(&["gradcheck", "--preset", "tiny", "--eps", "1e-12"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rounding"), "{}", stderr(&o));
}

#[test]
fn gradcheck_is_reproducible() {
    let args = ["gradcheck", "--preset", "tiny", "--seed", "2", "--samples", "60"];
    let (a, b) = (dynamixer(&args), dynamixer(&args));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("over 60 coordinates"));
    assert!(matches!(a.status.code(), Some(0) | Some(1)));
}

#[test]
fn train_then_eval_reproduces_logged_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dynamixer(&[
        "train",
        "--preset",
        "tiny",
        "--data",
        "synthetic",
        "--out",
        out,
        "--max-steps",
        "12",
        "--deterministic",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["metrics.csv", "final.ckpt", "last.ckpt", "config.json"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let text = stdout(&o);
    let logged = text.lines().next().unwrap().rsplit(' ').next().unwrap().to_string();

    let ckpt = dir.path().join("final.ckpt");
    let e = dynamixer(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", out]);
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
    assert_eq!(stdout(&e).trim(), format!("val top-1 {logged}"));
    assert!(dir.path().join("eval.json").exists());

    // same run through the config file it wrote
    let cfg = dir.path().join("config.json");
    let e = dynamixer(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(stdout(&e).trim(), format!("val top-1 {logged}"));
}

#[test]
fn missing_cifar_directory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = dynamixer(&[
        "train",
        "--preset",
        "tiny",
        "--data",
        "cifar10",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn eval_with_mismatched_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_model(dir.path(), "m.ckpt", MixGenKind::Dynamic);
    let o = dynamixer(&["eval", "--checkpoint", &ckpt, "--preset", "dynamixer-s"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dynamixer(&["eval", "--checkpoint", "/nonexistent/m.ckpt"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn bench_reports_positive_throughput() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynamixer(&[
        "bench",
        "--preset",
        "tiny",
        "--batch",
        "4",
        "--seconds",
        "0.3",
        "--windows",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let rate: f64 = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(rate > 0.0, "{text}");
    assert!(text.contains("over 3 windows"));
    assert!(dir.path().join("bench.json").exists());
}

#[test]
fn export_mixing_rows_are_stochastic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_model(dir.path(), "dyn.ckpt", MixGenKind::Dynamic);
    for (layer, direction, n) in [("0", "row", 4), ("1", "col", 2)] {
        let o = dynamixer(&[
            "export-mixing",
            "--checkpoint",
            &ckpt,
            "--input",
            "random:1",
            "--layer",
            layer,
            "--direction",
            direction,
            "--segment",
            "1",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let m = parse_matrix(&stdout(&o));
        assert_eq!(m.len(), n);
        for row in &m {
            assert_eq!(row.len(), n);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn export_mixing_static_vs_dynamic_input_dependence() {
    let dir = tempfile::tempdir().unwrap();
    let export = |ckpt: &str, input: &str| {
        let o = dynamixer(&[
            "export-mixing",
            "--checkpoint",
            ckpt,
            "--input",
            input,
            "--layer",
            "0",
            "--direction",
            "row",
            "--segment",
            "0",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let fixed = save_model(dir.path(), "static.ckpt", MixGenKind::StaticRandom);
    assert_eq!(export(&fixed, "random:1"), export(&fixed, "random:2"));
    let dynamic = save_model(dir.path(), "dyn.ckpt", MixGenKind::Dynamic);
    assert_ne!(export(&dynamic, "random:1"), export(&dynamic, "random:2"));

    // a text input file is accepted too
    let input = dir.path().join("image.txt");
    let values: Vec<String> = (0..3 * 32 * 32).map(|i| format!("{}", (i % 7) as f64 * 0.1)).collect();
    std::fs::write(&input, values.join(" ")).unwrap();
    let csv = export(&dynamic, input.to_str().unwrap());
    assert_eq!(parse_matrix(&csv).len(), 4);
}

#[test]
fn export_mixing_out_of_range_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_model(dir.path(), "dyn.ckpt", MixGenKind::Dynamic);
    for (layer, segment) in [("2", "0"), ("0", "2")] {
        let o = dynamixer(&[
            "export-mixing",
            "--checkpoint",
            &ckpt,
            "--input",
            "random:0",
            "--layer",
            layer,
            "--direction",
            "row",
            "--segment",
            segment,
        ]);
        assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
        assert!(stderr(&o).contains("out of range"));
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = save_model(dir.path(), "m.ckpt", MixGenKind::Dynamic);
    let run = |threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_dynamixer"))
            .args(["eval", "--checkpoint", &ckpt])
            .env("DYNAMIXER_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    assert_eq!(run("1"), run("3"));
    let o = Command::new(env!("CARGO_BIN_EXE_dynamixer"))
        .args(["eval", "--checkpoint", &ckpt])
        .env("DYNAMIXER_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
