//! Counts architectures of a search space with and without the
//! non-decreasing channel constraint and draws a few uniform samples.
//!
//! ```bash
//! cargo run -p nasbnn --example space_stats -- paper 5
//! ```

use nasbnn::costmodel::total_ops;
use nasbnn::harness::{load_space, SpaceStats};
use nasbnn::searchspace::{is_valid, sample_uniform_seeded};

fn main() -> nasbnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "paper".into());
    let draws: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let space = load_space(&name)?;
    println!("{}", SpaceStats::compute(&space)?);

    for seed in 0..draws {
        let arch = sample_uniform_seeded(&space, seed, true)?;
        assert!(is_valid(&space, &arch));
        println!("{:>9.2}M  {}", total_ops(&space, &arch)?.total_m(), arch.compact());
    }
    Ok(())
}
