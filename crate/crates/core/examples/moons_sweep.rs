//! Trains the two-moons MLP on three seeds and prints the learned truncation
//! distributions and a width sweep for each.
//!
//! `cargo run --release --example moons_sweep -- [kappa] [epochs]`

use vnd::data::{checkerboard_ood, two_moons, Split};
use vnd::exec::{stream_rng, Parallelism};
use vnd::metrics::{width_sweep, SweepConfig, SweepData};
use vnd::model::{Grouping, Model, ModelSpec, Targets};
use vnd::trainer::{TrainConfig, Trainer, INIT_STREAM};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let kappa: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    for seed in 0..3u64 {
        let (x, y) = two_moons(1000, 0.1, seed, 0, Split::Train)?.split(Split::Train);
        let (tx, ty) = two_moons(1000, 0.1, seed, 1, Split::Test)?.split(Split::Test);
        let (ox, _) = checkerboard_ood(500, 0.1, seed, 2)?.split(Split::Ood);
        let Targets::Classes(labels) = ty else { unreachable!() };

        let spec = ModelSpec::mlp(2, &[64, 64], 2, Some(Grouping { groups: 8, n_base: 2 }), false);
        let model = Model::new(spec, &mut stream_rng(seed, INIT_STREAM))?;
        let cfg = TrainConfig {
            kappa,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, cfg, x.rows())?;
        t.fit(&x, &y)?;
        if let Some(last) = t.history.last() {
            println!(
                "seed {seed}: objective {:.3} kl {:.1} acc {:.3}",
                last.objective, last.kl, last.acc
            );
        }
        for (i, b) in t.model.betas() {
            let b: Vec<String> = b.iter().map(|v| format!("{v:.3}")).collect();
            println!("  layer {i} beta [{}]", b.join(", "));
        }
        let data = SweepData {
            recollect: &x,
            test: &tx,
            test_labels: &labels,
            ood: Some(&ox),
        };
        let cfg = SweepConfig {
            seeds: vec![seed],
            ..SweepConfig::default()
        };
        for row in width_sweep(&t.model, &data, &cfg, Parallelism::Parallel)?.rows {
            println!(
                "  width {:.2}: acc {:.3} ece {:.3} auroc {:.3} nll {:.3}",
                row.width, row.accuracy, row.ece, row.auroc, row.nll
            );
        }
    }
    Ok(())
}
