//! Command-line front end: `nasbnn space-stats|train|search|export|finetune|eval|report`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::costmodel::{count_params, layers_csv, total_ops};
use crate::error::{Error, Result};
use crate::evosearch::{self, candidates_csv, front_json, parse_front_json, EvalData, ParetoEntry};
use crate::harness::{
    load_space, markdown_table, parse_candidates_csv, prepare_data, scatter_svg, RunConfig, RunManifest, SpaceStats,
};
use crate::presets;
use crate::searchspace::Architecture;
use crate::supernet::Supernet;
use crate::trainer::{self, Trainer};

#[derive(Parser, Debug)]
#[command(name = "nasbnn", version, about = "Binary neural architecture search")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML or JSON file overriding keys of the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Bundled configuration: paper, desk, tiny.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// Overrides every seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: runs/<command>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Record that the run used single-threaded, seeded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Cardinalities, OPs range and stage table of a search space.
    SpaceStats {
        /// Space name or JSON file; defaults to the preset's space.
        #[arg(long)]
        space: Option<String>,
    },
    /// Train a supernet with the sandwich rule.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evolutionary search over a trained supernet.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Extract a subnet bundle with inherited weights.
    Export {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Architecture JSON file or a bundled name such as nas-bnn-b.
        #[arg(long)]
        arch: String,
    },
    /// Finetune an extracted subnet.
    Finetune {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy of a subnet bundle, or of an architecture inside a supernet.
    Eval {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        arch: Option<String>,
    },
    /// Render an accuracy-vs-OPs plot and Markdown tables.
    Report {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        front: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SpaceStats { .. } => "space-stats",
            Command::Train { .. } => "train",
            Command::Search { .. } => "search",
            Command::Export { .. } => "export",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn config(common: &Common) -> Result<RunConfig> {
    let base = RunConfig::preset(&common.preset)?;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load_over(&base, p)?,
        None => base,
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.search.seed = s;
        cfg.finetune.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn load_arch(spec: &str) -> Result<Architecture> {
    if spec.starts_with("nas-bnn-") && !Path::new(spec).exists() {
        return presets::nas_bnn(spec.trim_end_matches(".json"));
    }
    let p = Path::new(spec);
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    Architecture::from_json(&text)
}

#[derive(Serialize)]
struct EvalRecord {
    arch: Architecture,
    ops_m: f64,
    acc_val: f64,
    source: String,
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    let name = cli.command.name();
    let out = cli
        .common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    let seed = cfg.train.seed;
    let mut artifacts = Vec::new();
    let space_id;
    match &cli.command {
        Command::SpaceStats { space } => {
            let space = match space {
                Some(s) => load_space(s)?,
                None => cfg.resolve_space()?,
            };
            for w in space.check()? {
                eprintln!("warning: {w}");
            }
            let stats = SpaceStats::compute(&space)?;
            println!("{stats}");
            artifacts.push(write(&out.join("space_stats.txt"), &format!("{stats}\n"))?);
            space_id = space.id.clone();
        }
        Command::Train { resume, epochs } => {
            let mut tcfg = cfg.train.clone();
            if let Some(e) = epochs {
                tcfg.epochs = *e;
            }
            let data = prepare_data(&tcfg)?;
            let (mut net, mut t) = match resume {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    Trainer::resume(tcfg, &ck)?
                }
                None => {
                    let space = cfg.resolve_space()?;
                    let mut net_cfg = tcfg.net;
                    net_cfg.init_seed = tcfg.seed;
                    (Supernet::build(&space, net_cfg)?, Trainer::new(tcfg)?)
                }
            };
            t.config_hash = cfg.hash();
            artifacts.push(write(&out.join("config.toml"), &cfg.to_toml())?);
            let outcome = trainer::train(&mut net, &mut t, &data.train, &data.val, Some(&out))?;
            if let Some(last) = outcome.epochs.last() {
                println!(
                    "trained {} epochs; last epoch loss {:.4}, val smallest {:?}, val largest {:?}",
                    t.epoch, last.mean_total, last.val_smallest, last.val_largest
                );
            }
            artifacts.extend(outcome.checkpoint.filter(|p| p.exists()));
            artifacts.push(out.join("metrics.jsonl"));
            artifacts.push(out.join("epochs.jsonl"));
            space_id = net.space().id.clone();
        }
        Command::Search { checkpoint } => {
            let ck = Checkpoint::load(checkpoint)?;
            let mut net = ck.to_supernet()?;
            let data = prepare_data(&cfg.train)?;
            let ed = EvalData {
                calib: &data.train,
                val: &data.val,
                batch_size: cfg.search.batch_size,
                calib_batches: cfg.search.calib_batches,
                seed: cfg.search.seed,
            };
            let r = evosearch::evolve(&mut net, &cfg.search, ed)?;
            for (i, e) in r.front.iter().enumerate() {
                println!("{:>10.2}M  {:.4}  {}", e.ops_m(), e.acc, e.arch.compact());
                artifacts.push(write(&out.join(format!("front/arch_{i}.json")), &e.arch.to_json())?);
            }
            artifacts.push(write(&out.join("front.json"), &front_json(&r.front))?);
            artifacts.push(write(&out.join("candidates.csv"), &candidates_csv(&r.evaluated))?);
            space_id = net.space().id.clone();
        }
        Command::Export { checkpoint, arch } => {
            let arch = load_arch(arch)?;
            let net = match checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    ck.check_arch(&arch)?;
                    ck.to_supernet()?
                }
                None => {
                    let space = cfg.resolve_space()?;
                    if space.id != arch.space_id {
                        return Err(Error::SpaceMismatch {
                            arch: arch.space_id.clone(),
                            checkpoint: space.id,
                        });
                    }
                    Supernet::build(&space, cfg.train.net)?
                }
            };
            let space = net.space().clone();
            let sub = net.extract(&arch)?;
            let ops = crate::costmodel::count_ops(&space, &arch, space.input_resolution)?;
            let pc = count_params(&space, &arch);
            println!(
                "{}: {:.4}M OPs, {} binary / {} fp parameters, {:.2} MB",
                arch.compact(),
                ops.total.total_m(),
                pc.binary_params,
                pc.fp_params,
                pc.model_size_bytes as f64 / 1e6
            );
            let mut ck = Checkpoint::from_subnet(&sub);
            ck.header.config_hash = cfg.hash();
            let p = out.join("subnet.ckpt");
            ck.save(&p)?;
            artifacts.push(p);
            artifacts.push(write(&out.join("layers.csv"), &layers_csv(&ops))?);
            artifacts.push(write(&out.join("arch.json"), &arch.to_json())?);
            space_id = space.id;
        }
        Command::Finetune { bundle, epochs } => {
            let ck = Checkpoint::load(bundle)?;
            let mut sub = ck.to_subnet()?;
            let mut fcfg = cfg.finetune.clone();
            if let Some(e) = epochs {
                fcfg.epochs = *e;
            }
            let data = prepare_data(&fcfg)?;
            let rep = trainer::finetune(&mut sub, &fcfg, &data.train, &data.val)?;
            println!(
                "finetuned {} epochs: accuracy {:.4} -> {:.4}",
                rep.epochs, rep.acc_before, rep.acc_after
            );
            let mut out_ck = Checkpoint::from_subnet(&sub);
            out_ck.header.epoch = rep.epochs;
            out_ck.header.config_hash = cfg.hash();
            out_ck.header.extra = serde_json::to_value(&rep)?;
            let p = out.join("finetuned.ckpt");
            out_ck.save(&p)?;
            artifacts.push(p);
            artifacts.push(write(&out.join("finetune.json"), &serde_json::to_string_pretty(&rep)?)?);
            space_id = sub.source_space.id.clone();
        }
        Command::Eval {
            bundle,
            checkpoint,
            arch,
        } => {
            let data = prepare_data(&cfg.train)?;
            let ed = EvalData {
                calib: &data.train,
                val: &data.val,
                batch_size: cfg.search.batch_size,
                calib_batches: cfg.search.calib_batches,
                seed: cfg.search.seed,
            };
            let rec = match (bundle, checkpoint, arch) {
                (Some(b), None, None) => {
                    let mut sub = Checkpoint::load(b)?.to_subnet()?;
                    let pinned = sub.net.active().cloned().ok_or(Error::NoActiveSubnet)?;
                    let acc = evosearch::evaluate(&mut sub.net, &pinned, &ed)?;
                    EvalRecord {
                        ops_m: total_ops(&sub.source_space, &sub.arch)?.total_m(),
                        arch: sub.arch,
                        acc_val: acc,
                        source: "bundle".into(),
                    }
                }
                (None, Some(c), Some(a)) => {
                    let ck = Checkpoint::load(c)?;
                    let arch = load_arch(a)?;
                    ck.check_arch(&arch)?;
                    let mut net = ck.to_supernet()?;
                    let acc = evosearch::evaluate(&mut net, &arch, &ed)?;
                    EvalRecord {
                        ops_m: total_ops(net.space(), &arch)?.total_m(),
                        arch,
                        acc_val: acc,
                        source: "inherit".into(),
                    }
                }
                _ => {
                    return Err(Error::Config(
                        "eval needs either --bundle, or --checkpoint together with --arch".into(),
                    ))
                }
            };
            println!("{} {:.4}M OPs: top-1 {:.4}", rec.source, rec.ops_m, rec.acc_val);
            artifacts.push(write(&out.join("eval.json"), &serde_json::to_string_pretty(&rec)?)?);
            space_id = rec.arch.space_id.clone();
        }
        Command::Report { candidates, front } => {
            let text = std::fs::read_to_string(candidates).map_err(|e| Error::io(candidates, e))?;
            let rows = parse_candidates_csv(&text)?;
            let front: Vec<ParetoEntry> = match front {
                Some(p) => parse_front_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
                None => Vec::new(),
            };
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.ops_m, r.acc)).collect();
            let fpts: Vec<(f64, f64)> = front.iter().map(|e| (e.ops_m(), e.acc)).collect();
            artifacts.push(write(
                &out.join("pareto.svg"),
                &scatter_svg(&pts, &fpts, "Accuracy vs. OPs"),
            )?);
            let mut md = String::from("# Search report\n\n## Pareto front\n\n");
            let front_rows: Vec<(String, f64, Option<f64>)> = front
                .iter()
                .enumerate()
                .map(|(i, e)| (format!("front-{}", i + 1), e.ops_m(), Some(e.acc)))
                .collect();
            md.push_str(&markdown_table(&front_rows));
            md.push_str(&format!("\n{} candidates evaluated.\n", rows.len()));
            let space_ids: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.space_id.as_str()).collect();
            space_id = space_ids.into_iter().next().unwrap_or("").to_string();
            if space_id == "paper" {
                let space = presets::paper_space();
                let refs: Vec<(String, f64, Option<f64>)> = presets::nas_bnn_all()
                    .into_iter()
                    .map(|(n, a)| Ok((n, total_ops(&space, &a)?.total_m(), None)))
                    .collect::<Result<_>>()?;
                md.push_str("\n## Bundled architectures\n\n");
                md.push_str(&markdown_table(&refs));
            }
            artifacts.push(write(&out.join("report.md"), &md)?);
            println!(
                "wrote {} and {}",
                out.join("pareto.svg").display(),
                out.join("report.md").display()
            );
        }
    }
    let mut m = RunManifest::begin(name, &cfg, &space_id, seed, cli.common.deterministic);
    m.artifacts = artifacts;
    m.finish(&out)?;
    Ok(())
}
