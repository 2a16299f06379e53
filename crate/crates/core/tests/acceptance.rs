//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion straight to stdout (bypassing capture) before asserting.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use harmony::autograd::Tape;
use harmony::baselines::{ablation_csv, run_ablation, standard_plan, ABLATION_CSV_HEADER};
use harmony::checkpoint;
use harmony::config::{LossWeights, Mode, RunConfig};
use harmony::contrastive::{hard_infonce, soft_infonce, SoftTargets};
use harmony::data::Dataset;
use harmony::evaluation::{evaluate, recall_at_k, EvalConfig};
use harmony::feature_distill::{blockwise_mask_with_blocks, cls_loss, mim_loss, MaskedNormalization};
use harmony::gradcheck::{gradcheck_all, GradcheckConfig};
use harmony::mask::{MaskPlan, MaskStyle};
use harmony::params::ParamStore;
use harmony::reconstruction::mae_mask;
use harmony::rng::stream;
use harmony::schedule::{ScheduleConfig, Scheduler};
use harmony::teacher::ema_update;
use harmony::tensor::Tensor;
use harmony::text::{mask_caption, mlm_loss, text_distill_loss};
use harmony::trainer::{LossBundle, Trainer};
use rand::Rng;

/// Criteria run one at a time so their time budgets are not shared.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

const TOY_CONFIG: &str = include_str!("../../../configs/toy.json");

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n} {name}: {verdict} ({detail})");
}

/// Collects named checks; the criterion passes when all of them do.
#[derive(Default)]
struct Checks(Vec<(String, bool)>);

impl Checks {
    fn check(&mut self, what: impl Into<String>, ok: bool) {
        self.0.push((what.into(), ok));
    }

    fn finish(self, n: usize, name: &str, started: Instant, budget_s: f64) {
        let secs = started.elapsed().as_secs_f64();
        let failed: Vec<&str> = self.0.iter().filter(|(_, ok)| !ok).map(|(w, _)| w.as_str()).collect();
        let in_time = secs < budget_s;
        let pass = failed.is_empty() && in_time;
        let detail = if failed.is_empty() {
            format!("{} checks, {secs:.2}s of {budget_s}s", self.0.len())
        } else {
            format!("failed: {}; {secs:.2}s", failed.join(", "))
        };
        report(n, name, pass, &detail);
        assert!(failed.is_empty(), "criterion {n} failed: {failed:?}");
        assert!(in_time, "criterion {n} took {secs:.2}s, budget {budget_s}s");
    }
}

fn scalar(tape: &Tape, v: harmony::autograd::Var) -> f64 {
    tape.value(v).item()
}

#[test]
fn criterion_1_loss_oracles() {
    let _serial = serial();
    let started = Instant::now();
    let mut c = Checks::default();

    // N = 2, orthogonal unit embeddings, τ = 1: each direction is
    // ln(1 + e^-1).
    let expected_hard = 2.0 * (1.0 + (-1f64).exp()).ln();
    let expected_soft = expected_hard + 1.0;
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::identity(2));
    let t = tape.leaf(Tensor::identity(2));
    let one = tape.constant(Tensor::scalar(1.0));
    let hard = hard_infonce(&mut tape, v, t, one).unwrap();
    let hard = scalar(&tape, hard);
    c.check(
        "hard_infonce 0.62652",
        (hard - 0.62652).abs() < 1e-4 && (hard - expected_hard).abs() < 1e-12,
    );

    let uniform = Tensor::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
    let targets = SoftTargets {
        image_to_text: uniform.clone(),
        text_to_image: uniform,
    };
    let soft = soft_infonce(&mut tape, v, t, &targets, one).unwrap();
    let soft = scalar(&tape, soft);
    c.check(
        "soft_infonce 1.62652",
        (soft - 1.62652).abs() < 1e-4 && (soft - expected_soft).abs() < 1e-12,
    );

    let logits = tape.leaf(Tensor::zeros(4, 16));
    let plan = [MaskPlan::from_mask(
        vec![false, true, true, false],
        0.2,
        MaskStyle::Bernoulli,
    )];
    let mlm = mlm_loss(&mut tape, logits, &[vec![1, 7, 12, 2]], &plan).unwrap();
    let mlm = scalar(&tape, mlm);
    c.check("mlm ln 16", (mlm - 16f64.ln()).abs() < 1e-4);

    let ln2 = 2f64.ln();
    let one_hot = Tensor::from_rows(&[&[1.0, 0.0]]);
    let s0 = tape.leaf(Tensor::zeros(1, 2));
    let s1 = tape.leaf(Tensor::zeros(1, 2));
    let cls = cls_loss(&mut tape, &[one_hot.clone(), one_hot.clone()], &[s0, s1], 0.1).unwrap();
    let cls = scalar(&tape, cls);
    c.check("cls ln 2", (cls - ln2).abs() < 1e-5);
    let masked = [MaskPlan::from_mask(vec![true], 0.5, MaskStyle::Blockwise)];
    let mim = mim_loss(&mut tape, &one_hot, s0, &masked, 0.1, MaskedNormalization::MaskedCount).unwrap();
    let mim = scalar(&tape, mim);
    c.check("mim ln 2", (mim - ln2).abs() < 1e-5);
    let td = text_distill_loss(&mut tape, &one_hot, s0, &masked, 0.1).unwrap();
    let td = scalar(&tape, td);
    c.check("text distill ln 2", (td - ln2).abs() < 1e-5);

    c.finish(1, "loss oracles", started, 1.0);
}

#[test]
fn criterion_2_gradient_suite() {
    let _serial = serial();
    let started = Instant::now();
    let mut c = Checks::default();
    let report = gradcheck_all(&GradcheckConfig::default()).unwrap();
    for name in [
        "hard",
        "soft",
        "cls",
        "mim",
        "reconstruction",
        "mlm",
        "text_distill",
        "mask_distill",
    ] {
        match report.get(name) {
            Some(l) => c.check(
                format!("{name} {:.1e} < 1e-4", l.max_relative_error),
                l.max_relative_error < 1e-4,
            ),
            None => c.check(format!("{name} missing"), false),
        }
    }
    match report.get("total") {
        Some(l) => c.check(
            format!("total {:.1e} < 1e-3", l.max_relative_error),
            l.max_relative_error < 1e-3,
        ),
        None => c.check("total missing", false),
    }
    c.check("every check within tolerance", report.passed());
    c.finish(2, "gradient suite", started, 120.0);
}

#[test]
fn criterion_3_schedule_and_mask_invariants() {
    let _serial = serial();
    let started = Instant::now();
    let mut c = Checks::default();

    let s = Scheduler::new(ScheduleConfig::default(), 7, 30, 64).unwrap();
    c.check("alpha_c(0) = 1", s.state(0).alpha_c == 1.0);
    let floor = (70..=s.total_steps()).all(|t| (s.state(t).alpha_c - 0.2).abs() < 1e-12);
    c.check("alpha_c = 0.2 from epoch 10", floor);
    c.check(
        "teacher temp starts at 0.04",
        (s.state(0).teacher_temp - 0.04).abs() < 1e-12,
    );
    c.check(
        "teacher temp ends at 0.07",
        (s.state(s.total_steps()).teacher_temp - 0.07).abs() < 1e-12,
    );

    let exact = (0..200).all(|seed| {
        let mut rng = stream(seed, &[4]);
        mae_mask(16, 0.75, &mut rng).unwrap().count() == 12
    });
    c.check("L = 16, r = 0.75 masks 12", exact);

    let mut contiguous = true;
    let mut block_counts = true;
    for seed in 0..200 {
        let mut rng = stream(seed, &[3]);
        let ratio = rng.random_range(0.1..0.5);
        let (plan, blocks) = blockwise_mask_with_blocks((8, 8), ratio, &mut rng).unwrap();
        block_counts &= plan.count() == (ratio * 64.0).floor() as usize;
        let mut union = vec![false; 64];
        for b in &blocks {
            contiguous &= b.top + b.height <= 8 && b.left + b.width <= 8;
            for y in b.top..b.top + b.height {
                for x in b.left..b.left + b.width {
                    union[y * 8 + x] = true;
                }
            }
        }
        contiguous &= union == plan.mask;
    }
    c.check("block masks are unions of rectangles", contiguous);
    c.check("block mask counts exact", block_counts);

    let tokens: Vec<u32> = (0..20_000).map(|i| 4 + (i % 40) as u32).collect();
    let mut rng = stream(11, &[5]);
    let (_, plan) = mask_caption(&tokens, 0.2, &mut rng).unwrap();
    let rate = plan.count() as f64 / tokens.len() as f64;
    c.check(format!("mlm rate {rate:.4} = 0.2 ± 0.01"), (rate - 0.2).abs() <= 0.01);

    // k updates toward a fixed student: θ̄_k = m^k θ̄_0 + (1 − m^k) θ.
    let (m, k) = (0.996, 250);
    let mut student = ParamStore::new();
    student.add("w", Tensor::from_rows(&[&[1.5, -2.0, 0.25]]), true);
    let mut teacher = ParamStore::new();
    let id = teacher.add("w", Tensor::from_rows(&[&[-0.5, 3.0, 0.0]]), true);
    let t0 = teacher.get(id).clone();
    for _ in 0..k {
        ema_update(&mut teacher, &student, m).unwrap();
    }
    let mk = m.powi(k);
    let closed = t0
        .data()
        .iter()
        .zip(student.get(id).data())
        .zip(teacher.get(id).data())
        .all(|((a, b), got)| (mk * a + (1.0 - mk) * b - got).abs() < 1e-10);
    c.check("EMA closed form", closed);

    c.finish(3, "schedule and mask invariants", started, 30.0);
}

fn run_steps(cfg: &RunConfig, data: &Dataset, steps: u64) -> (Vec<LossBundle>, Trainer) {
    let mut trainer = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let mut history = Vec::new();
    trainer
        .run_until(steps, |b, _| {
            history.push(b.clone());
            Ok(())
        })
        .unwrap();
    (history, trainer)
}

fn same_params(a: &ParamStore, b: &ParamStore) -> bool {
    a.ids().all(|id| {
        let (x, y) = (a.get(id).data(), b.get(id).data());
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
    })
}

#[test]
fn criterion_4_degeneracy_equivalences() {
    let _serial = serial();
    let started = Instant::now();
    let mut c = Checks::default();

    let mut harmony = RunConfig::tiny();
    harmony.deterministic = true;
    harmony.weights = LossWeights::zeros();
    harmony.schedule.alpha_c_start = 1.0;
    harmony.schedule.alpha_c_end = 1.0;
    let mut clip = harmony.clone();
    clip.mode = Mode::ClipOnly;
    let data = Dataset::in_memory(&harmony.data).unwrap();
    let steps = 6;
    let (ha, ta) = run_steps(&harmony, &data, steps);
    let (hb, tb) = run_steps(&clip, &data, steps);
    let same_losses = ha.len() == hb.len() && ha.iter().zip(&hb).all(|(a, b)| a.total.to_bits() == b.total.to_bits());
    c.check("per-step totals identical", same_losses);
    c.check(
        "student weights identical",
        same_params(&ta.state.bundle.student, &tb.state.bundle.student),
    );

    let mut rng = stream(5, &[9]);
    let mut worst = 0.0f64;
    for n in 2..10 {
        let rand = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data = (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(n, 6, data).unwrap().l2_normalize_rows()
        };
        let (v, t) = (rand(&mut rng), rand(&mut rng));
        let mut tape = Tape::new();
        let (v, t) = (tape.leaf(v), tape.leaf(t));
        let inv = tape.constant(Tensor::scalar(rng.random_range(1.0..50.0)));
        let hard = hard_infonce(&mut tape, v, t, inv).unwrap();
        let one_hot = SoftTargets {
            image_to_text: Tensor::identity(n),
            text_to_image: Tensor::identity(n),
        };
        let soft = soft_infonce(&mut tape, v, t, &one_hot, inv).unwrap();
        worst = worst.max((scalar(&tape, hard) - scalar(&tape, soft)).abs());
    }
    c.check(format!("one-hot soft = hard ({worst:.1e} < 1e-10)"), worst < 1e-10);

    c.finish(4, "degeneracy equivalences", started, 120.0);
}

#[test]
fn criterion_5_toy_training() {
    let _serial = serial();
    let started = Instant::now();
    let mut harmony = RunConfig::from_json(TOY_CONFIG).unwrap();
    harmony.deterministic = true;
    let mut clip = harmony.clone();
    clip.mode = Mode::ClipOnly;
    let data = Dataset::in_memory(&harmony.data).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut results = Vec::new();
    for (label, cfg) in [("harmony", &harmony), ("clip", &clip)] {
        let t = Instant::now();
        let mut trainer = Trainer::new(cfg.clone(), data.clone()).unwrap();
        trainer.train(&dir.path().join(label)).unwrap();
        let r = evaluate(&trainer.state.bundle, &data, &cfg.data, &cfg.eval, trainer.state.step).unwrap();
        let mut out = std::io::stdout().lock();
        let _ = writeln!(
            out,
            "  {label:<8} zero-shot {:.3}  linear probe {:.3}  R@1 i2t {:.3}  {:.0}s",
            r.zero_shot,
            r.linear_probe.best_accuracy,
            r.retrieval.image_to_text[0],
            t.elapsed().as_secs_f64()
        );
        results.push((r.zero_shot, r.linear_probe.best_accuracy));
    }
    let (zs, probe) = results[0];
    let secs = started.elapsed().as_secs_f64();
    let pass = zs >= 0.60 && probe >= 0.80 && secs <= 1800.0;
    report(
        5,
        "toy training",
        pass,
        &format!(
            "harmony zero-shot {zs:.3} (>= 0.60), probe {probe:.3} (>= 0.80); clip {:.3}/{:.3}; {secs:.0}s",
            results[1].0, results[1].1
        ),
    );
    assert!(pass, "harmony zero-shot {zs}, probe {probe}, {secs}s");
}

/// Rank of the paired item by full descending sort, ties broken toward the
/// lower index.
fn full_sort_recall(sims: &Tensor, ks: &[usize]) -> Vec<f64> {
    let n = sims.rows();
    let mut hits = vec![0usize; ks.len()];
    for q in 0..n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| sims.get(q, b).partial_cmp(&sims.get(q, a)).unwrap().then(a.cmp(&b)));
        let rank = order.iter().position(|&i| i == q).unwrap();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    hits.into_iter().map(|h| h as f64 / n as f64).collect()
}

#[test]
fn criterion_6_retrieval_correctness() {
    let _serial = serial();
    let started = Instant::now();
    let mut c = Checks::default();
    let mut rng = stream(6, &[1]);
    let mut mismatches = 0;
    for trial in 0..1000 {
        let n = rng.random_range(10..40);
        // coarse values so ties are common
        let coarse = trial % 3 == 0;
        let data = (0..n * n)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                if coarse {
                    (x * 4.0).round() / 4.0
                } else {
                    x
                }
            })
            .collect();
        let sims = Tensor::from_vec(n, n, data).unwrap();
        let ks = [1, 5, 10];
        if recall_at_k(&sims, &ks).unwrap() != full_sort_recall(&sims, &ks) {
            mismatches += 1;
        }
    }
    c.check(format!("{mismatches} of 1000 matrices disagree"), mismatches == 0);
    c.finish(6, "retrieval correctness", started, 60.0);
}

#[test]
fn criterion_7_resume_is_bit_exact() {
    let _serial = serial();
    let started = Instant::now();
    let mut c = Checks::default();
    let mut cfg = RunConfig::tiny();
    cfg.deterministic = true;
    cfg.train.epochs = 13;
    let data = Dataset::in_memory(&cfg.data).unwrap();
    let total = 50;

    let (straight, a) = run_steps(&cfg, &data, total);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.bin");
    let (mut resumed, first) = run_steps(&cfg, &data, total / 2);
    checkpoint::save(&path, &cfg, &first.state).unwrap();
    drop(first);
    let mut b = Trainer::resume(cfg.clone(), data, checkpoint::load(&path).unwrap()).unwrap();
    b.run_until(total, |l, _| {
        resumed.push(l.clone());
        Ok(())
    })
    .unwrap();

    c.check("50 steps each", straight.len() == 50 && resumed.len() == 50);
    let same_history = straight.iter().zip(&resumed).all(|(x, y)| {
        x.components()
            .iter()
            .zip(y.components())
            .all(|((_, p), (_, q))| p.map(f64::to_bits) == q.map(f64::to_bits))
    });
    if let Some((x, y)) = straight
        .iter()
        .zip(&resumed)
        .find(|(x, y)| x.total.to_bits() != y.total.to_bits())
    {
        eprintln!(
            "first divergence at step {}: {:?}\n vs {:?}",
            x.step,
            x.components(),
            y.components()
        );
    }
    c.check("loss histories bit-identical", same_history);
    c.check(
        "student bit-identical",
        same_params(&a.state.bundle.student, &b.state.bundle.student),
    );
    c.check(
        "teacher bit-identical",
        same_params(&a.state.bundle.teacher, &b.state.bundle.teacher),
    );
    c.finish(7, "deterministic resume", started, 300.0);
}

#[test]
fn criterion_8_ablation_harness() {
    let _serial = serial();
    let started = Instant::now();
    let mut c = Checks::default();
    let mut base = RunConfig::tiny();
    base.deterministic = true;
    base.data.n_samples = 96;
    base.eval = EvalConfig {
        samples: 64,
        probe_train_samples: 64,
        probe_epochs: 20,
        ..EvalConfig::default()
    };
    let data = Dataset::in_memory(&base.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let results = run_ablation(&standard_plan(), &base, &data, dir.path()).unwrap();

    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    c.check("csv written as returned", csv == ablation_csv(&results));
    c.check(
        "header plus seven rows",
        lines.len() == 8 && lines[0] == ABLATION_CSV_HEADER,
    );
    let columns = ABLATION_CSV_HEADER.split(',').count();
    for (r, line) in results.iter().zip(&lines[1..]) {
        let cells: Vec<&str> = line.split(',').collect();
        let complete = cells.len() == columns && cells[..columns - 1].iter().all(|c| !c.is_empty());
        c.check(format!("{} complete", r.label), complete && r.failure.is_none());
        c.check(
            format!("{} finite", r.label),
            r.final_loss.is_some_and(f64::is_finite) && r.seconds > 0.0 && r.peak_tape_bytes > 0,
        );
    }
    c.finish(8, "ablation harness", started, 600.0);
}
