use harmony::config::{LossWeights, Mode, RunConfig};
use harmony::data::Dataset;
use harmony::trainer::{LossBundle, Trainer};

fn run(cfg: &RunConfig, steps: u64) -> Vec<LossBundle> {
    let data = Dataset::in_memory(&cfg.data).unwrap();
    let mut trainer = Trainer::new(cfg.clone(), data).unwrap();
    let mut history = Vec::new();
    trainer
        .run_until(steps, |b, _| {
            history.push(b.clone());
            Ok(())
        })
        .unwrap();
    history
}

#[test]
fn total_is_the_weighted_sum_of_components() {
    let mut cfg = RunConfig::tiny();
    cfg.deterministic = true;
    cfg.weights = LossWeights {
        alpha: 0.5,
        beta: 2.0,
        gamma: 0.7,
        delta: 1.3,
    };
    for b in run(&cfg, 2) {
        let w = &b.weights;
        let expected = b.contrastive
            + w.alpha * b.distill.unwrap()
            + w.beta * b.reconstruction.unwrap()
            + w.gamma * b.mlm.unwrap()
            + w.delta * b.text_distill.unwrap();
        assert!(
            (b.total - expected).abs() < 1e-10 * expected.abs(),
            "{} vs {expected}",
            b.total
        );
        assert!(b.grad_norm.is_finite() && b.grad_norm > 0.0);
    }
}

#[test]
fn zero_weight_components_are_not_evaluated() {
    let mut cfg = RunConfig::tiny();
    cfg.deterministic = true;
    cfg.weights.gamma = 0.0;
    cfg.weights.beta = 0.0;
    let b = &run(&cfg, 1)[0];
    assert!(b.mlm.is_none());
    assert!(b.reconstruction.is_none());
    assert!(b.distill.is_some());
    assert!(b.text_distill.is_some());
}

#[test]
fn maskclip_baseline_trains() {
    let mut cfg = RunConfig::tiny();
    cfg.deterministic = true;
    cfg.mode = Mode::MaskClip;
    let history = run(&cfg, 3);
    assert_eq!(history.len(), 3);
    for b in &history {
        assert!(b.mask_distill.is_some_and(f64::is_finite));
        assert!(b.total.is_finite());
        assert!((0.0..=1.0).contains(&b.momentum));
    }
}
