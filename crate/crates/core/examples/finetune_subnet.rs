//! Extracts the largest subnet of a briefly trained tiny supernet and
//! finetunes it with binary weights and activations.
//!
//! ```bash
//! cargo run --release -p nasbnn --example finetune_subnet
//! ```

use nasbnn::harness::{prepare_data, RunConfig};
use nasbnn::searchspace::largest;
use nasbnn::supernet::Supernet;
use nasbnn::trainer::{finetune, train, Trainer};

fn main() -> nasbnn::Result<()> {
    let mut run = RunConfig::preset("tiny")?;
    run.finetune.epochs = 3;
    let space = run.resolve_space()?;
    let data = prepare_data(&run.train)?;
    let mut net = Supernet::build(&space, run.train.net)?;
    let mut trainer = Trainer::new(run.train.clone())?;
    train(&mut net, &mut trainer, &data.train, &data.val, None)?;

    let mut sub = net.extract(&largest(&space))?;
    let report = finetune(&mut sub, &run.finetune, &data.train, &data.val)?;
    println!("inherited accuracy {:.4}", report.acc_before);
    println!("finetuned accuracy {:.4}", report.acc_after);
    println!("step losses {:?}", report.losses);
    Ok(())
}
