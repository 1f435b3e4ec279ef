//! Prints OPs, parameter counts and model size of the bundled architectures.
//!
//! ```bash
//! cargo run -p nasbnn --example preset_costs
//! ```

use nasbnn::costmodel::{count_ops, count_params};
use nasbnn::presets::{self, REPORTED_OPS_M};

fn main() -> nasbnn::Result<()> {
    let space = presets::paper_space();
    println!(
        "{:<10} {:>10} {:>10} {:>8} {:>12} {:>12} {:>10}",
        "model", "OPs (M)", "reported", "delta", "binary", "fp32", "size (MB)"
    );
    for ((name, arch), (_, reported)) in presets::nas_bnn_all().into_iter().zip(REPORTED_OPS_M) {
        let ops = count_ops(&space, &arch, 224)?.total;
        let p = count_params(&space, &arch);
        println!(
            "{:<10} {:>10.2} {:>10.0} {:>7.1}% {:>12} {:>12} {:>10.2}",
            name,
            ops.total_m(),
            reported,
            100.0 * (ops.total_m() - reported) / reported,
            p.binary_params,
            p.fp_params,
            p.model_size_bytes as f64 / 1e6
        );
    }
    Ok(())
}
