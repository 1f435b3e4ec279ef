//! A grouped binary convolution: sign activations, sign weights and the
//! per-channel scaling factor.
//!
//! ```bash
//! cargo run -p nasbnn --example binary_conv
//! ```

use nasbnn::binops::{binary_conv, ScaleMode};
use nasbnn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nasbnn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, c_in, c_out, hw, k, g) = (1, 8, 8, 6, 3, 2);
    let x: Vec<f32> = (0..n * c_in * hw * hw)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let w: Vec<f32> = (0..c_out * (c_in / g) * k * k)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x = Tensor::from_vec(&[n, c_in, hw, hw], x)?;
    let w = Tensor::from_vec(&[c_out, c_in / g, k, k], w)?;

    let out = binary_conv(&x, &w, g, 1, ScaleMode::ChannelMean)?;
    println!("output shape {:?}", out.output.shape());
    println!("alpha {:?}", out.alpha);
    let sums = &out.pre_scale.data()[..hw];
    println!("first row of +-1 sums (channel 0): {sums:?}");
    let fan_in = (c_in / g * k * k) as f32;
    assert!(out
        .pre_scale
        .data()
        .iter()
        .all(|v| v.fract() == 0.0 && v.abs() <= fan_in));
    Ok(())
}
