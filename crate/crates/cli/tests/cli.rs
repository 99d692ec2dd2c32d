use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aprop")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = aprop(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn trained(dir: &Path, samples: &str) {
    ok(&["train", "--dataset", "synthetic", "--synthetic-samples", samples, "--epochs", "1", "--out", dir.to_str().unwrap()]);
}

#[test]
fn synthetic_training_separates_the_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["train", "--dataset", "synthetic", "--out", dir.path().to_str().unwrap()]);
    let acc: f64 = out
        .split_whitespace()
        .find_map(|w| w.strip_prefix("test_accuracy="))
        .expect("accuracy on stdout")
        .parse()
        .unwrap();
    assert!(acc >= 0.99, "test accuracy {acc}");
    assert!(dir.path().join("model.apck").is_file());
    let losses = fs::read_to_string(dir.path().join("train_loss.csv")).unwrap();
    assert!(losses.starts_with("epoch,step,loss\n"));
}

#[test]
fn missing_inputs_give_one_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let cases: [&[&str]; 3] = [
        &["train", "--data-dir", "/nonexistent/mnist", "--out", out_dir],
        &["attribute", "--dataset", "synthetic", "--checkpoint", "/nonexistent.apck", "--out", out_dir],
        &["render", "--attr", "/nonexistent.attr", "--out", out_dir],
    ];
    for args in cases {
        let out = aprop(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("aprop: ") && err.contains("nonexistent"), "{err}");
    }
    assert!(!aprop(&["train", "--no-such-flag", "1"]).status.success());
    assert!(!aprop(&["evaluate", "--dataset", "synthetic", "--samples", "many", "--out", out_dir]).status.success());
}

#[test]
fn config_file_is_overridden_by_flags_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "dataset = synthetic\nsynthetic_samples = 300 # small\nepochs = 5\n").unwrap();
    let out_dir = dir.path().join("out");
    ok(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--out", out_dir.to_str().unwrap()]);
    let echo = fs::read_to_string(out_dir.join("train_config.txt")).unwrap();
    assert!(echo.contains("epochs = 1\n"), "{echo}");
    assert!(echo.contains("synthetic_samples = 300\n"), "{echo}");
}

#[test]
fn rendered_images_parse_as_netpbm() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    trained(dir.path(), "300");
    let data = ["--dataset", "synthetic", "--synthetic-samples", "300"];
    ok(&[&["attribute", "--method", "saliency", "--indices", "1", "--out", d][..], &data].concat());

    let pgm = image::open(dir.path().join("saliency_1.pgm")).unwrap().to_luma8();
    assert_eq!(pgm.dimensions(), (28, 28));
    // saliency is non-negative and min-max scaled, so both ends are used
    assert_eq!(pgm.pixels().map(|p| p.0[0]).min(), Some(0));
    assert_eq!(pgm.pixels().map(|p| p.0[0]).max(), Some(255));

    let attr = dir.path().join("saliency_1.attr");
    let attr = attr.to_str().unwrap();
    ok(&[&["render", "--attr", attr, "--mode", "overlay", "--index", "1"][..], &data].concat());
    let ppm = image::open(dir.path().join("saliency_1_overlay.ppm")).unwrap().to_rgb8();
    assert_eq!(ppm.dimensions(), (28, 28));
    ok(&["render", "--attr", attr, "--mode", "mask"]);
    let masks = image::open(dir.path().join("saliency_1_mask.pgm")).unwrap().to_luma8();
    assert_eq!(masks.dimensions(), (56, 28));
}

#[test]
fn evaluate_writes_curves_for_each_method() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    trained(dir.path(), "300");
    ok(&[
        "evaluate", "--dataset", "synthetic", "--synthetic-samples", "300", "--methods", "saliency,random", "--samples",
        "5", "--steps", "4", "--out", d,
    ]);
    let mut morf = csv::Reader::from_path(dir.path().join("morf.csv")).unwrap();
    assert_eq!(morf.headers().unwrap(), vec!["method", "fraction", "mean_retained_ratio", "n"]);
    let rows: Vec<csv::StringRecord> = morf.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 5);
    // nothing removed at fraction 0
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 1.0);
    let auc = fs::read_to_string(dir.path().join("auc.csv")).unwrap();
    assert_eq!(auc.lines().count(), 3);
}
