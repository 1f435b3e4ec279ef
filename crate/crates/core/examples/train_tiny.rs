//! Sandwich-rule supernet training on a synthetic dataset, then accuracy of
//! the smallest and largest subnets after BN recalibration.
//!
//! ```bash
//! cargo run --release -p nasbnn --example train_tiny -- 4
//! ```

use nasbnn::evosearch::evaluate;
use nasbnn::evosearch::EvalData;
use nasbnn::harness::prepare_data;
use nasbnn::presets;
use nasbnn::searchspace::{largest, smallest};
use nasbnn::supernet::Supernet;
use nasbnn::trainer::{train, TrainConfig, Trainer};

fn main() -> nasbnn::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let mut cfg = TrainConfig::tiny();
    cfg.epochs = epochs;
    let data = prepare_data(&cfg)?;
    let space = presets::tiny_space();
    let mut net = Supernet::build(&space, cfg.net)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let outcome = train(&mut net, &mut trainer, &data.train, &data.val, None)?;
    for e in &outcome.epochs {
        println!(
            "epoch {:>2}  loss {:.4}  teacher ce {:.4}  random-subnet acc {:.3}",
            e.epoch, e.mean_total, e.mean_ce_teacher, e.mean_random_acc
        );
    }
    let ed = EvalData {
        calib: &data.train,
        val: &data.test,
        batch_size: 64,
        calib_batches: cfg.calib_batches,
        seed: cfg.seed,
    };
    println!("test acc smallest {:.3}", evaluate(&mut net, &smallest(&space), &ed)?);
    println!("test acc largest  {:.3}", evaluate(&mut net, &largest(&space), &ed)?);
    Ok(())
}
