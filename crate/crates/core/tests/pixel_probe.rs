//! The synthetic corpus must be linearly separable from raw pixels when
//! noise is off; otherwise downstream accuracy targets are meaningless.

use harmony::data::{DataConfig, Dataset};
use harmony::evaluation::linear_probe;
use harmony::tensor::Tensor;

fn pixels(ds: &Dataset, range: std::ops::Range<usize>) -> Tensor {
    let d = ds.images[0].data.len();
    let data: Vec<f64> = ds.images[range.clone()]
        .iter()
        .flat_map(|im| im.data.iter().copied())
        .collect();
    Tensor::from_vec(range.len(), d, data).unwrap()
}

#[test]
fn raw_pixel_probe_separates_noiseless_classes() {
    let cfg = DataConfig {
        n_samples: 2000,
        noise_level: 0.0,
        mismatch_fraction: 0.0,
        ..DataConfig::default()
    };
    let ds = Dataset::in_memory(&cfg).unwrap();
    let (tx, vx) = (pixels(&ds, 0..1500), pixels(&ds, 1500..2000));
    let r = linear_probe(
        &tx,
        &ds.class_ids[..1500],
        &vx,
        &ds.class_ids[1500..],
        &[0.1],
        200,
        1e-4,
    )
    .unwrap();
    println!("raw pixel probe {:.3} at lr {}", r.best_accuracy, r.best_lr);
    assert!(r.best_accuracy >= 0.95, "raw pixel probe {}", r.best_accuracy);
}
