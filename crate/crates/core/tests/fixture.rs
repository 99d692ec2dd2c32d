//! The committed mnist_cnn2 checkpoint (3 epochs of Adam, seed 0).

use std::path::PathBuf;

use aprop_core::checkpoint::{from_bytes, load_checkpoint, to_bytes};
use aprop_core::data::load_mnist;
use aprop_core::model::ModelSpec;
use aprop_core::train::accuracy;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mnist_cnn2.apck")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("APROP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[test]
fn fixture_round_trips() {
    let bytes = std::fs::read(fixture()).unwrap();
    let model = from_bytes(&bytes).unwrap();
    assert_eq!(model.spec, ModelSpec::mnist_cnn2());
    assert_eq!(to_bytes(&model), bytes);
    // MNIST pixel statistics
    assert!((model.norm.mean[0] - 0.1307).abs() < 1e-3);
    assert!((model.norm.std[0] - 0.3081).abs() < 1e-3);
}

#[test]
fn fixture_accuracy_on_mnist() {
    let dir = mnist_dir();
    if !dir.join("t10k-images-idx3-ubyte").exists() {
        eprintln!("skipping: no MNIST files in {}", dir.display());
        return;
    }
    let model = load_checkpoint(fixture()).unwrap();
    let (_, test) = load_mnist(&dir).unwrap();
    let acc = accuracy(&model, &test.take(2000)).unwrap();
    assert!(acc >= 0.97, "accuracy {acc}");
}
