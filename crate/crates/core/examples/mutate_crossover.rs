//! Mutation and crossover keep children inside the search space.
//!
//! ```bash
//! cargo run -p nasbnn --example mutate_crossover
//! ```

use nasbnn::presets;
use nasbnn::searchspace::{crossover, largest, mutate, smallest, validate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nasbnn::Result<()> {
    let space = presets::paper_space();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (smallest(&space), largest(&space));
    println!("parent a: {}", a.compact());
    println!("parent b: {}", b.compact());
    for i in 0..4 {
        let child = crossover(&space, &a, &b, &mut rng)?;
        let child = mutate(&space, &child, 0.2, &mut rng)?;
        assert!(validate(&space, &child).is_empty());
        println!("child {i}:  {}", child.compact());
    }
    Ok(())
}
