use proptest::prelude::*;

use vnd::data::{two_moons, Split};
use vnd::exec::{stream_rng, Parallelism};
use vnd::layers::EvalMode;
use vnd::metrics::{accuracy, bn_recollect, predict};
use vnd::model::{Grouping, Model, ModelSpec, Targets, Tensor};
use vnd::trainer::{anneal_tau, TauSchedule, TrainConfig, Trainer, INIT_STREAM};

fn moons(n: usize, noise: f64, seed: u64) -> (Tensor, Targets) {
    two_moons(n, noise, seed, 0, Split::Train).unwrap().split(Split::Train)
}

fn fit(spec: ModelSpec, x: &Tensor, y: &Targets, cfg: TrainConfig) -> Trainer {
    let model = Model::new(spec, &mut stream_rng(cfg.seed, INIT_STREAM)).unwrap();
    let mut t = Trainer::new(model, cfg, x.rows()).unwrap();
    t.fit(x, y).unwrap();
    t
}

fn mean_accuracy(model: &Model, x: &Tensor, y: &Targets) -> f64 {
    let Targets::Classes(labels) = y else { unreachable!() };
    let out = predict(model, x, None, 1, EvalMode::Mean, 0, Parallelism::Sequential).unwrap();
    accuracy(&out.probs, labels).unwrap()
}

fn expected_tail(beta: &[f64]) -> f64 {
    beta.iter().enumerate().map(|(j, b)| (j + 1) as f64 * b).sum()
}

#[test]
fn heavy_kl_weight_shrinks_the_kept_prefix() {
    let (x, y) = moons(300, 0.1, 1);
    let spec = ModelSpec::mlp(2, &[32, 32], 2, Some(Grouping { groups: 8, n_base: 2 }), false);
    let run = |kappa: f64| {
        let cfg = TrainConfig {
            kappa,
            epochs: 20,
            batch_size: 50,
            seed: 1,
            ..TrainConfig::default()
        };
        let t = fit(spec.clone(), &x, &y, cfg);
        t.model
            .betas()
            .iter()
            .map(|(_, b)| expected_tail(b))
            .collect::<Vec<_>>()
    };
    let light = run(1e-5);
    let heavy = run(1e3);
    for (l, h) in light.iter().zip(&heavy) {
        assert!(h < l, "expected tail {h} under heavy KL vs {l}");
    }
}

#[test]
fn noiseless_moons_need_a_nonlinear_boundary() {
    let (x, y) = moons(1000, 0.0, 2);
    let cfg = TrainConfig {
        kappa: 0.0,
        epochs: 100,
        seed: 2,
        ..TrainConfig::default()
    };
    let linear = fit(ModelSpec::mlp(2, &[], 2, None, false), &x, &y, cfg.clone());
    let mlp = fit(
        ModelSpec::mlp(2, &[64, 64], 2, Some(Grouping { groups: 8, n_base: 2 }), false),
        &x,
        &y,
        cfg,
    );
    let lin_acc = mean_accuracy(&linear.model, &x, &y);
    let mlp_acc = mean_accuracy(&mlp.model, &x, &y);
    assert!(lin_acc < 0.9, "linear accuracy {lin_acc}");
    assert!(mlp_acc >= 0.99, "mlp accuracy {mlp_acc}");
}

fn buffers(m: &Model) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit_buffers(&mut |_, _, d| out.extend_from_slice(d));
    out
}

#[test]
fn recollected_statistics_match_training_statistics() {
    let (x, y) = moons(1000, 0.1, 3);
    let spec = ModelSpec::mlp(2, &[16], 2, Some(Grouping { groups: 4, n_base: 1 }), true);
    // full-batch passes with a negligible step: the running averages settle on
    // the statistics of the (fixed) network over the whole training set
    let cfg = TrainConfig {
        lr: 1e-300,
        batch_size: 1000,
        epochs: 150,
        seed: 3,
        ..TrainConfig::default()
    };
    let t = fit(spec, &x, &y, cfg);
    let plan = t.model.width_plan(1.0).unwrap();
    let re = bn_recollect(&t.model, std::slice::from_ref(&x), Some(&plan)).unwrap();
    let (a, b) = (buffers(&t.model), buffers(&re));
    assert_eq!(a.len(), 32);
    // training batches carry weight noise, recollection runs the mean network,
    // so variances differ by the small noise term; compare on the stat's scale
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() <= 1e-3 * q.abs().max(1.0), "{p} vs {q}");
    }
    let again = bn_recollect(&t.model, std::slice::from_ref(&x), Some(&plan)).unwrap();
    assert_eq!(buffers(&again), b);
}

#[test]
fn recollected_statistics_depend_on_width() {
    let (x, y) = moons(400, 0.1, 4);
    let spec = ModelSpec::mlp(2, &[32, 32], 2, Some(Grouping { groups: 8, n_base: 2 }), true);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 100,
        seed: 4,
        ..TrainConfig::default()
    };
    let t = fit(spec, &x, &y, cfg);
    let half = t.model.width_plan(0.5).unwrap();
    let full = t.model.width_plan(1.0).unwrap();
    let a = buffers(&bn_recollect(&t.model, std::slice::from_ref(&x), Some(&half)).unwrap());
    let b = buffers(&bn_recollect(&t.model, std::slice::from_ref(&x), Some(&full)).unwrap());
    assert_ne!(a, b);
}

#[test]
fn training_is_reproducible() {
    let (x, y) = moons(200, 0.1, 5);
    let spec = ModelSpec::mlp(2, &[16, 16], 2, Some(Grouping { groups: 4, n_base: 1 }), true);
    let cfg = TrainConfig {
        kappa: 0.1,
        epochs: 5,
        batch_size: 40,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = fit(spec.clone(), &x, &y, cfg.clone());
    let b = fit(spec, &x, &y, cfg);
    assert_eq!(a.checkpoint().encode(), b.checkpoint().encode());
}

proptest! {
    #[test]
    fn anneal_tau_is_monotone(start in 0.1f64..5.0, ratio in 0.001f64..1.0, span in 0u64..500) {
        let s = TauSchedule { start, end: start * ratio, span };
        prop_assert_eq!(anneal_tau(0, &s), if span == 0 { s.end } else { start });
        prop_assert_eq!(anneal_tau(span, &s), s.end);
        prop_assert_eq!(anneal_tau(span + 17, &s), s.end);
        let mut prev = f64::INFINITY;
        for step in 0..=span + 5 {
            let t = anneal_tau(step, &s);
            prop_assert!(t <= prev && t >= s.end);
            prev = t;
        }
    }
}
