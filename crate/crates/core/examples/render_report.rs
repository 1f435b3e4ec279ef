//! Renders an accuracy-vs-OPs scatter plot and a Markdown table from
//! a set of scored candidates.
//!
//! ```bash
//! cargo run -p nasbnn --example render_report -- /tmp/report
//! ```

use nasbnn::costmodel::total_ops;
use nasbnn::evosearch::{pareto_filter, ParetoEntry};
use nasbnn::harness::{markdown_table, scatter_svg};
use nasbnn::presets;
use nasbnn::searchspace::sample_uniform_seeded;

fn main() -> nasbnn::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "report".into()));
    std::fs::create_dir_all(&out).map_err(|e| nasbnn::Error::io(&out, e))?;
    let space = presets::paper_space();
    // Scores here are a made-up monotone proxy of OPs plus noise.
    let mut entries = Vec::new();
    for seed in 0..200 {
        let arch = sample_uniform_seeded(&space, seed, true)?;
        let ops = total_ops(&space, &arch)?.total_ops;
        let jitter = ((seed * 2654435761) % 1000) as f64 / 1000.0;
        let acc = 0.55 + 0.1 * (ops as f64 / 3e8).sqrt() + 0.03 * jitter;
        entries.push(ParetoEntry { arch, ops, acc });
    }
    let front = pareto_filter(&entries);
    let pts: Vec<(f64, f64)> = entries.iter().map(|e| (e.ops_m(), e.acc)).collect();
    let fpts: Vec<(f64, f64)> = front.iter().map(|e| (e.ops_m(), e.acc)).collect();
    let svg = scatter_svg(&pts, &fpts, "Accuracy vs. OPs");
    let rows: Vec<(String, f64, Option<f64>)> = front
        .iter()
        .enumerate()
        .map(|(i, e)| (format!("front-{i}"), e.ops_m(), Some(e.acc)))
        .collect();
    let md = markdown_table(&rows);
    print!("{md}");
    let svg_path = out.join("pareto.svg");
    std::fs::write(&svg_path, svg).map_err(|e| nasbnn::Error::io(&svg_path, e))?;
    println!("wrote {}", svg_path.display());
    Ok(())
}
