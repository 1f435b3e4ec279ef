//! Wall-clock cost of sandwich steps on a bundled space.
//!
//! cargo run --release --example step_timing -- desk-cifar 32 3

use std::time::Instant;

use nasbnn::data::synthetic;
use nasbnn::presets::space_by_name;
use nasbnn::supernet::Supernet;
use nasbnn::trainer::{sandwich_step, Adam, TrainConfig};

fn main() -> nasbnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let space = space_by_name(args.first().map(String::as_str).unwrap_or("desk-cifar"))?;
    let batch: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let cfg = TrainConfig::desk();
    let data = synthetic(batch, space.num_classes, space.input_resolution, 0.5, 0);
    let idx: Vec<usize> = (0..batch).collect();
    let (x, y) = data.batch(&idx, None);
    let mut net = Supernet::build(&space, cfg.net)?;
    let mut opt = Adam::new();
    for step in 0..steps {
        let t = Instant::now();
        let l = sandwich_step(&mut net, &mut opt, &x, &y, &cfg, step, cfg.lr_init)?;
        println!(
            "step {step}: {:.3}s total loss {:.4}",
            t.elapsed().as_secs_f64(),
            l.total
        );
    }
    Ok(())
}
