//! Builds a supernet, activates an architecture and extracts it as a
//! standalone network that produces identical logits.
//!
//! ```bash
//! cargo run -p nasbnn --example supernet_extract
//! ```

use nasbnn::costmodel::count_params;
use nasbnn::data::synthetic;
use nasbnn::nn::BnMode;
use nasbnn::presets;
use nasbnn::searchspace::sample_uniform_seeded;
use nasbnn::supernet::{ExecMode, NetConfig, Supernet};

fn main() -> nasbnn::Result<()> {
    let space = presets::tiny_space();
    let mut net = Supernet::build(&space, NetConfig::default())?;
    let arch = sample_uniform_seeded(&space, 3, true)?;
    let data = synthetic(8, space.num_classes, space.input_resolution, 0.3, 0);
    let (x, _) = data.batch(&(0..8).collect::<Vec<_>>(), None);

    net.activate(&arch)?;
    let from_supernet = net.forward(&x, ExecMode::Bwba, BnMode::Eval)?;
    let mut sub = net.extract(&arch)?;
    let from_subnet = sub.forward(&x, ExecMode::Bwba, BnMode::Eval)?;
    assert_eq!(from_supernet, from_subnet);

    println!("architecture     {}", arch.compact());
    println!("supernet binary  {} weights", net.binary_weight_count());
    println!("subnet params    {} (deployed)", sub.deploy_param_count());
    println!("cost model       {}", count_params(&space, &arch).total());
    println!("logits identical: yes");
    Ok(())
}
