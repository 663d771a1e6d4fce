use ndarray::Array2;
use proptest::prelude::*;

use vnd::config::ExperimentConfig;
use vnd::data::{two_moons, DatasetHandle, Split};
use vnd::error::VndError;
use vnd::exec::{stream_rng, Parallelism};
use vnd::layers::EvalMode;
use vnd::metrics::{auroc, ece, ged, predict};
use vnd::model::{Grouping, Model, ModelSpec};
use vnd::ordering::LayerWidth;
use vnd::trainer::{Checkpoint, TrainConfig, Trainer, INIT_STREAM};

fn simplex_rows(rows: usize, classes: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.01f64..1.0, rows * classes).prop_map(move |raw| {
        let mut a = Array2::from_shape_vec((rows, classes), raw).unwrap();
        for mut r in a.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        a
    })
}

fn scored_labels() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
    (1usize..40, 2usize..5).prop_flat_map(|(n, c)| (simplex_rows(n, c), prop::collection::vec(0..c, n)))
}

fn mask_sets() -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<Vec<bool>>)> {
    (1usize..6).prop_flat_map(|n| {
        let set = prop::collection::vec(prop::collection::vec(any::<bool>(), n), 1..5);
        (set.clone(), set)
    })
}

proptest! {
    #[test]
    fn ece_is_bounded_and_order_free((p, y) in scored_labels(), bins in 1usize..20) {
        let e = ece(&p, &y, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let n = y.len();
        let rev: Vec<usize> = (0..n).rev().collect();
        let p2 = p.select(ndarray::Axis(0), &rev);
        let y2: Vec<usize> = rev.iter().map(|&i| y[i]).collect();
        prop_assert!((ece(&p2, &y2, bins).unwrap() - e).abs() <= 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(
        pos in prop::collection::vec(-3.0f64..3.0, 1..30),
        neg in prop::collection::vec(-3.0f64..3.0, 1..30),
    ) {
        let a = auroc(&pos, &neg).unwrap();
        let f = |v: &[f64]| v.iter().map(|x| (2.0 * x).exp() + 1.0).collect::<Vec<_>>();
        prop_assert!((auroc(&f(&pos), &f(&neg)).unwrap() - a).abs() <= 1e-12);
        prop_assert!((auroc(&neg, &pos).unwrap() - (1.0 - a)).abs() <= 1e-12);
    }

    #[test]
    fn ged_is_symmetric_and_nonnegative((a, b) in mask_sets()) {
        let d = ged(&a, &b).unwrap();
        prop_assert!(d >= 0.0);
        // compare squares: the root amplifies rounding near zero
        let e = ged(&b, &a).unwrap();
        prop_assert!((d * d - e * e).abs() <= 1e-12);
    }

    #[test]
    fn config_round_trips(
        seed in any::<u64>(),
        kappa in 1e-6f64..10.0,
        hidden in prop::collection::vec(8usize..64, 1..4),
        epochs in 1usize..500,
    ) {
        let hidden: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
        let text = format!(
            "seed = {seed}\n[model]\nhidden = {}\n[train]\nkappa = {kappa}\nepochs = {epochs}\n",
            hidden.join(",")
        );
        let c = ExperimentConfig::parse(&text, &[]).unwrap();
        let again = ExperimentConfig::parse(&c.render(), &[]).unwrap();
        prop_assert_eq!(&c, &again);
        prop_assert_eq!(c.train.kappa, kappa);
    }
}

fn small_model() -> Model {
    let spec = ModelSpec::mlp(2, &[8, 8], 3, Some(Grouping { groups: 4, n_base: 1 }), false);
    Model::new(spec, &mut stream_rng(0, INIT_STREAM)).unwrap()
}

#[test]
fn predictions_are_distributions_and_identity_widths_change_nothing() {
    let m = small_model();
    let (x, _) = two_moons(50, 0.1, 0, 0, Split::Train).unwrap().split(Split::Train);
    let out = predict(&m, &x, None, 4, EvalMode::Sample, 0, Parallelism::Parallel).unwrap();
    for r in out.probs.rows() {
        assert!(r.iter().all(|&p| p >= 0.0));
        assert!((r.sum() - 1.0).abs() < 1e-12);
    }
    let seq = predict(&m, &x, None, 4, EvalMode::Sample, 0, Parallelism::Sequential).unwrap();
    assert_eq!(out.probs, seq.probs);

    let mut plan = m.width_plan(1.0).unwrap();
    for w in plan.layers.iter_mut().flatten() {
        *w = LayerWidth::identity(w.group_scale().len());
    }
    let full = predict(&m, &x, Some(&plan), 1, EvalMode::Mean, 0, Parallelism::Sequential).unwrap();
    let direct = predict(&m, &x, None, 1, EvalMode::Mean, 0, Parallelism::Sequential).unwrap();
    let gap = (&full.probs - &direct.probs).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(gap <= 1e-12, "{gap}");
}

#[test]
fn containers_reject_unknown_versions_and_corruption() {
    let ds = two_moons(10, 0.1, 0, 0, Split::Train).unwrap();
    let mut bytes = ds.encode().unwrap();
    assert_eq!(DatasetHandle::decode(&bytes).unwrap(), ds);
    bytes[4] = 9;
    assert!(matches!(
        DatasetHandle::decode(&bytes),
        Err(VndError::Version { found: 9, .. })
    ));

    let mut ck = Trainer::new(
        small_model(),
        TrainConfig {
            batch_size: 10,
            ..TrainConfig::default()
        },
        10,
    )
    .unwrap()
    .checkpoint()
    .encode();
    assert!(Checkpoint::decode(&ck).is_ok());
    let last = ck.len() - 1;
    ck[last] ^= 0xff;
    assert!(Checkpoint::decode(&ck).is_err());
    ck[last] ^= 0xff;
    ck[4] = 2;
    assert!(matches!(
        Checkpoint::decode(&ck),
        Err(VndError::Version { found: 2, .. })
    ));
}
