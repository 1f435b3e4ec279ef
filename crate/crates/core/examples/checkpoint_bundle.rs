//! Saves a supernet checkpoint and a subnet bundle, reloads both and checks
//! that logits survive the round trip.
//!
//! ```bash
//! cargo run -p nasbnn --example checkpoint_bundle
//! ```

use nasbnn::checkpoint::Checkpoint;
use nasbnn::data::synthetic;
use nasbnn::nn::BnMode;
use nasbnn::presets;
use nasbnn::searchspace::sample_uniform_seeded;
use nasbnn::supernet::{ExecMode, NetConfig, Supernet};

fn main() -> nasbnn::Result<()> {
    let dir = std::env::temp_dir().join("nasbnn-checkpoint-example");
    let space = presets::tiny_space();
    let net = Supernet::build(&space, NetConfig::default())?;
    let arch = sample_uniform_seeded(&space, 11, true)?;
    let data = synthetic(4, space.num_classes, space.input_resolution, 0.3, 5);
    let (x, _) = data.batch(&[0, 1, 2, 3], None);

    let super_path = dir.join("supernet.ckpt");
    Checkpoint::from_supernet(&net).save(&super_path)?;
    let mut reloaded = Checkpoint::load(&super_path)?.to_supernet()?;
    reloaded.activate(&arch)?;
    let a = reloaded.forward(&x, ExecMode::Bwba, BnMode::Eval)?;

    let bundle_path = dir.join("subnet.ckpt");
    Checkpoint::from_subnet(&net.extract(&arch)?).save(&bundle_path)?;
    let bundle = Checkpoint::load(&bundle_path)?;
    println!("bundle holds {} tensors for {}", bundle.tensors.len(), arch.compact());
    let mut sub = bundle.to_subnet()?;
    let b = sub.forward(&x, ExecMode::Bwba, BnMode::Eval)?;
    assert_eq!(a, b);
    println!("supernet and bundle logits match");

    let foreign = presets::nas_bnn("a")?;
    match bundle.check_arch(&foreign) {
        Err(e) => println!("loading a foreign architecture fails: {e}"),
        Ok(()) => unreachable!(),
    }
    Ok(())
}
