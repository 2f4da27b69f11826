use std::path::Path;

use retrospect::data::{load_idx, load_idx_subset, Dataset};

fn fashion() -> Option<std::path::PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion");
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

#[test]
fn fashion_train_and_test_headers() {
    let Some(dir) = fashion() else {
        eprintln!("data/fashion not present; see scripts/fmnist_npm_to_idx.py");
        return;
    };
    let train: Dataset<f32> = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!((train.len(), train.width(), train.class_count()), (60_000, 784, 10));
    assert!(train.inputs().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let test: Dataset<f32> = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!((test.len(), test.width(), test.class_count()), (10_000, 784, 10));

    let sub: Dataset<f32> =
        load_idx_subset(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"), 10_000, 0).unwrap();
    assert_eq!(sub, train.shuffled_subset(10_000, 0).unwrap());

    // labels file passed as images
    let err = load_idx::<f64>(&dir.join("train-labels-idx1-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap_err();
    assert!(err.to_string().contains("bad magic"));
}
