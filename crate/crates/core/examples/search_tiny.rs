//! Trains a tiny supernet briefly, then runs the budgeted evolutionary search
//! and prints the accuracy-vs-OPs front.
//!
//! ```bash
//! cargo run --release -p nasbnn --example search_tiny
//! ```

use nasbnn::evosearch::{evolve, EvalData};
use nasbnn::harness::{prepare_data, RunConfig};
use nasbnn::supernet::Supernet;
use nasbnn::trainer::{train, Trainer};

fn main() -> nasbnn::Result<()> {
    let run = RunConfig::preset("tiny")?;
    let space = run.resolve_space()?;
    let data = prepare_data(&run.train)?;
    let mut net = Supernet::build(&space, run.train.net)?;
    let mut trainer = Trainer::new(run.train.clone())?;
    train(&mut net, &mut trainer, &data.train, &data.val, None)?;

    println!("budgets (M OPs): {:?}", run.search.ops_budgets);
    let ed = EvalData {
        calib: &data.train,
        val: &data.val,
        batch_size: run.search.batch_size,
        calib_batches: run.search.calib_batches,
        seed: run.search.seed,
    };
    let result = evolve(&mut net, &run.search, ed)?;
    println!("{} distinct architectures evaluated", result.evaluated.len());
    for e in &result.front {
        println!("{:>8.4}M  acc {:.4}  {}", e.ops_m(), e.acc, e.arch.compact());
    }
    Ok(())
}
