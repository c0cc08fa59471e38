//! End-to-end behaviour of the training loop, evaluation, baselines and
//! replay buffer on small synthetic problems.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use sparc_core::engine::{
    argmax_row, evaluate, generate_blobs, reservoir_insert, run_baseline, run_sparc, split_dataset, train_task,
    BaselineKind, BlobSpec, Dataset, TaskStream, TrainConfig,
};
use sparc_core::model::{model_to_bytes, ArchConfig, RenormOutcome, SparcModel};
use sparc_core::rng::substream;
use sparc_core::tensor::{Graph, Sgd, Tensor};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn tiny_arch() -> ArchConfig {
    ArchConfig::from_width(0.125, 1, 1).unwrap()
}

/// Two classes: brightness on the left half vs the right half.
fn halves_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = substream(seed, "halves", 0);
    let (s, mut images, mut labels) = (6, Vec::new(), Vec::new());
    for i in 0..n {
        let label = (i % 2) as u16;
        for _r in 0..s {
            for c in 0..s {
                let lit = (c < s / 2) == (label == 0);
                let base = if lit { 0.8 } else { 0.2 };
                images.push((base + rng.random_range(-0.15f32..0.15)).clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    Dataset::new(1, s, s, 2, images, labels).unwrap()
}

fn blob_stream(classes: usize, tasks: usize) -> TaskStream {
    let (train, test) = generate_blobs(&BlobSpec::new(classes, 30, 8), 5).unwrap();
    split_dataset(&train, &test, tasks, 5).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        batch_size: 16,
        epochs: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_toy_task_is_learned() {
    let data = halves_dataset(96, 1);
    let stream = split_dataset(&data, &halves_dataset(32, 2), 1, 0).unwrap();
    let mut model = SparcModel::new(tiny_arch(), 0.99, 0).unwrap();
    model.allocate_working_memory(2, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        ..quick_config()
    };
    let report = train_task(&mut model, 0, &stream.tasks[0], &cfg).unwrap();
    assert!(report.losses.last().unwrap() < &report.losses[0], "{:?}", report.losses);
    assert!(
        *report.train_accuracy.last().unwrap() >= 0.95,
        "{:?}",
        report.train_accuracy
    );
    let e = evaluate(&model, &stream, 0).unwrap();
    assert!(e.task_il[0] >= 95.0, "{:?}", e.task_il);
}

/// Linear-interpolation quantile at position `(n - 1) q`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[test]
fn finished_task_is_frozen_and_rescaled() {
    for stream in [
        blob_stream(4, 2),
        split_dataset(&halves_dataset(64, 3), &halves_dataset(16, 4), 1, 0).unwrap(),
    ] {
        let mut model = SparcModel::new(tiny_arch(), 0.99, 0).unwrap();
        model.allocate_working_memory(2, 0).unwrap();
        let cfg = quick_config();
        let mut report = sparc_core::engine::fit_task(&mut model, 0, &stream.tasks[0], &cfg).unwrap();
        let fitted = model.task(0).unwrap().head.clone();
        report.renorm = sparc_core::engine::finalize_task(&mut model, 0, &report.activations, &cfg).unwrap();
        assert!(model.task(0).unwrap().is_frozen());
        assert!(model.semantic().is_frozen());

        let mut acts: Vec<f64> = report.activations.values().iter().map(|v| f64::from(*v)).collect();
        assert_eq!(acts.len(), stream.tasks[0].train.len());
        acts.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&acts, 0.25), quantile(&acts, 0.75));
        let eta = acts
            .iter()
            .copied()
            .filter(|a| *a <= q3 + (q3 - q1))
            .fold(f64::NEG_INFINITY, f64::max);
        let head = &model.task(0).unwrap().head;
        match report.renorm.unwrap() {
            RenormOutcome::Applied { eta: got, scale, .. } => {
                assert!((f64::from(got) - eta).abs() < 1e-6);
                assert!((f64::from(scale) - f64::from(cfg.kappa) / eta).abs() <= 1e-5 * f64::from(scale));
                for (w, w0) in head.weight.data().iter().zip(fitted.weight.data()) {
                    assert!((w - w0 * scale).abs() <= 1e-6 * w.abs().max(1.0));
                }
            }
            RenormOutcome::Skipped { .. } => {
                assert!(eta <= 0.0);
                assert_eq!(head.weight.data(), fitted.weight.data());
            }
        }
        // Training a frozen task again is refused.
        assert!(train_task(&mut model, 0, &stream.tasks[0], &cfg).is_err());
    }
}

#[test]
fn class_il_never_exceeds_task_il() {
    let stream = blob_stream(6, 3);
    let run = run_sparc(&tiny_arch(), 0.99, &stream, &quick_config()).unwrap();
    for (c_row, t_row) in run.class_il.rows().iter().zip(run.task_il.rows()) {
        for (c, t) in c_row.iter().zip(t_row) {
            assert!(c <= t, "Class-IL {c} above Task-IL {t}");
        }
    }
    assert_eq!(
        run.last.predicted_tasks.len(),
        stream.tasks.iter().map(|t| t.test.len()).sum::<usize>()
    );
}

#[test]
fn single_task_class_il_equals_task_il() {
    let stream = blob_stream(4, 1);
    let run = run_sparc(&tiny_arch(), 0.99, &stream, &quick_config()).unwrap();
    assert_eq!(run.class_il.rows(), run.task_il.rows());
    assert!(run.last.predicted_tasks.iter().all(|t| *t == 0));
}

#[test]
fn uniform_head_scaling_keeps_predictions() {
    let stream = blob_stream(6, 3);
    let run = run_sparc(&tiny_arch(), 0.99, &stream, &quick_config()).unwrap();
    let mut model = run.model.clone();
    for t in 0..3 {
        model.scale_task_head(t, 4.0).unwrap();
    }
    assert!(model.scale_task_head(0, 0.0).is_err());
    let scaled = evaluate(&model, &stream, 2).unwrap();
    assert_eq!(scaled.predicted_tasks, run.last.predicted_tasks);
    assert_eq!(scaled.class_il, run.last.class_il);
}

#[test]
fn evaluation_has_no_side_effects() {
    let stream = blob_stream(4, 2);
    let run = run_sparc(&tiny_arch(), 0.99, &stream, &quick_config()).unwrap();
    let before = model_to_bytes(&run.model);
    let a = evaluate(&run.model, &stream, 1).unwrap();
    let b = evaluate(&run.model, &stream, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(model_to_bytes(&run.model), before);
}

#[test]
fn evaluation_rejects_untrained_stages() {
    let stream = blob_stream(4, 2);
    let mut model = SparcModel::new(tiny_arch(), 0.99, 0).unwrap();
    model.allocate_working_memory(2, 0).unwrap();
    assert!(evaluate(&model, &stream, 1).is_err());
    assert!(evaluate(&model, &stream, 5).is_err());
}

/// With α = 1 the shared filters never move after the first task, and each
/// task's own parameters are frozen, so its Task-IL accuracy is constant.
#[test]
fn full_retention_gives_zero_task_il_forgetting() {
    let stream = blob_stream(6, 3);
    let run = run_sparc(&tiny_arch(), 1.0, &stream, &quick_config()).unwrap();
    for t in 0..3 {
        let col: Vec<f64> = (t..3).map(|s| run.task_il.get(s, t).unwrap()).collect();
        assert!(col.iter().all(|v| *v == col[0]), "task {t}: {col:?}");
    }
}

#[test]
fn runs_are_deterministic_per_seed() {
    let stream = blob_stream(4, 2);
    let a = run_sparc(&tiny_arch(), 0.9, &stream, &quick_config()).unwrap();
    let b = run_sparc(&tiny_arch(), 0.9, &stream, &quick_config()).unwrap();
    assert_eq!(a.class_il, b.class_il);
    assert_eq!(model_to_bytes(&a.model), model_to_bytes(&b.model));
    let c = run_sparc(
        &tiny_arch(),
        0.9,
        &stream,
        &TrainConfig {
            seed: 1,
            ..quick_config()
        },
    )
    .unwrap();
    assert_ne!(model_to_bytes(&a.model), model_to_bytes(&c.model));
}

#[test]
fn baselines_produce_well_formed_matrices() {
    let stream = blob_stream(4, 2);
    let cfg = quick_config();
    let sgd = run_baseline(BaselineKind::Sgd, &tiny_arch(), &stream, &cfg, 0).unwrap();
    assert_eq!(sgd.class_il.rows().len(), 2);
    assert_eq!(sgd.losses.len(), 2);
    let joint = run_baseline(BaselineKind::Joint, &tiny_arch(), &stream, &cfg, 0).unwrap();
    assert_eq!(joint.class_il.rows().len(), 1);
    assert_eq!(joint.class_il.rows()[0].len(), 2);
    let er = run_baseline(BaselineKind::Er, &tiny_arch(), &stream, &cfg, 16).unwrap();
    assert_eq!(er.class_il.rows().len(), 2);
    let again = run_baseline(BaselineKind::Er, &tiny_arch(), &stream, &cfg, 16).unwrap();
    assert_eq!(er.class_il, again.class_il);
    assert!("er".parse::<BaselineKind>().is_ok());
    assert!("lwf".parse::<BaselineKind>().is_err());
}

/// Every item of a stream of `N` ends up in a capacity-`k` reservoir with
/// probability `k / N`; a chi-square test over per-item inclusion counts.
#[test]
fn reservoir_inclusion_is_uniform() {
    let (n, k, trials) = (200usize, 10usize, 4000usize);
    let mut counts = vec![0u64; n];
    let mut rng = substream(9, "reservoir-test", 0);
    for _ in 0..trials {
        let mut items = Vec::with_capacity(k);
        for (seen, item) in (0..n).enumerate() {
            reservoir_insert(&mut items, k, item, seen, &mut rng);
        }
        assert_eq!(items.len(), k);
        assert_eq!(items.iter().collect::<HashSet<_>>().len(), k);
        for i in items {
            counts[i] += 1;
        }
    }
    let expected = (trials * k) as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((n - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "chi-square {chi2} above {critical}");
}

/// The synthetic classes are separable by a nearest-class-mean rule (a
/// linear classifier) on raw pixels.
#[test]
fn synthetic_classes_are_linearly_separable() {
    let (train, test) = generate_blobs(&BlobSpec::new(10, 100, 16), 0).unwrap();
    let d = train.sample_len();
    let mut means = vec![vec![0.0f64; d]; 10];
    let mut counts = [0usize; 10];
    for i in 0..train.len() {
        let c = usize::from(train.label(i));
        counts[c] += 1;
        for (m, v) in means[c].iter_mut().zip(train.image(i)) {
            *m += f64::from(*v);
        }
    }
    for (m, n) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = (0..test.len())
        .filter(|i| {
            let x = test.image(*i);
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - f64::from(*b)).powi(2)).sum::<f64>();
            let best = (0..10)
                .min_by(|a, b| dist(&means[*a]).total_cmp(&dist(&means[*b])))
                .unwrap();
            best == usize::from(test.label(*i))
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "nearest-mean accuracy {acc}");
}

#[test]
fn trained_linear_probe_separates_synthetic_classes() {
    let (train, test) = generate_blobs(&BlobSpec::new(10, 100, 16), 0).unwrap();
    let d = train.sample_len();
    let flat = |data: &Dataset, idx: &[usize]| {
        let x = data.batch(idx);
        Tensor::new(vec![idx.len(), d], x.data().to_vec()).unwrap()
    };
    let mut w = Tensor::parameter(vec![d, 10], vec![0.0; d * 10]).unwrap();
    let mut b = Tensor::parameter(vec![10], vec![0.0; 10]).unwrap();
    let sgd = Sgd::new(0.5).unwrap();
    let mut rng = substream(0, "probe", 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..30 {
        order.shuffle(&mut rng);
        for idx in order.chunks(32) {
            let labels: Vec<usize> = idx.iter().map(|i| usize::from(train.label(*i))).collect();
            let mut g = Graph::new();
            let (x, wv, bv) = (g.input(&flat(&train, idx)), g.param(&w), g.param(&b));
            let z = g.linear(x, wv, bv).unwrap();
            let loss = g.softmax_cross_entropy(z, &labels).unwrap();
            g.backward(loss).unwrap();
            w.zero_grad();
            b.zero_grad();
            g.accumulate_grads([&mut w, &mut b]);
            sgd.step(&mut [&mut w, &mut b]).unwrap();
        }
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let mut g = Graph::new();
    let (x, wv, bv) = (g.input(&flat(&test, &all)), g.input(&w), g.input(&b));
    let z = g.linear(x, wv, bv).unwrap();
    let correct = g
        .value(z)
        .chunks(10)
        .enumerate()
        .filter(|(i, row)| argmax_row(row) == usize::from(test.label(*i)))
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "linear probe test accuracy {acc}");
}
