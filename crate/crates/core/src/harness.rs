//! Run configuration, manifests, space statistics and report rendering used
//! by the command-line front end.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costmodel::total_ops;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evosearch::{build_val_split, SearchConfig};
use crate::presets::space_by_name;
use crate::searchspace::{cardinality, largest, ratio, sci, smallest, SearchSpace};
use crate::trainer::TrainConfig;

/// Everything a run needs besides its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Bundled space name or path to a space JSON file.
    pub space: String,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub finetune: TrainConfig,
}

/// Budgets splitting `[smallest, largest]` OPs of `space` into `n` buckets.
pub fn even_budgets(space: &SearchSpace, n: usize) -> Result<Vec<f64>> {
    let lo = total_ops(space, &smallest(space))?.total_m();
    let hi = total_ops(space, &largest(space))?.total_m();
    Ok((1..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect())
}

pub const RUN_PRESETS: &[&str] = &["paper", "desk", "tiny"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self {
                space: "paper".into(),
                train: TrainConfig::paper(),
                search: SearchConfig {
                    ops_budgets: vec![20.0, 60.0, 90.0, 125.0, 160.0, 200.0],
                    ..SearchConfig::default()
                },
                finetune: TrainConfig {
                    epochs: 25,
                    ..TrainConfig::finetune()
                },
            }),
            "desk" | "desk-cifar" => {
                let space = space_by_name("desk-cifar")?;
                Ok(Self {
                    space: "desk-cifar".into(),
                    train: TrainConfig::desk(),
                    search: SearchConfig {
                        ops_budgets: even_budgets(&space, 5)?,
                        calib_batches: 16,
                        ..SearchConfig::default()
                    },
                    finetune: TrainConfig {
                        epochs: 5,
                        ..TrainConfig::finetune()
                    },
                })
            }
            "tiny" => {
                let space = space_by_name("tiny")?;
                Ok(Self {
                    space: "tiny".into(),
                    train: TrainConfig::tiny(),
                    search: SearchConfig {
                        population: 12,
                        generations: 2,
                        ops_budgets: even_budgets(&space, 3)?,
                        calib_batches: 2,
                        batch_size: 32,
                        ..SearchConfig::default()
                    },
                    finetune: TrainConfig {
                        epochs: 1,
                        lr_init: 1e-4,
                        finetune: true,
                        ..TrainConfig::tiny()
                    },
                })
            }
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                RUN_PRESETS.join(", ")
            ))),
        }
    }

    /// `base` overlaid with the keys present in a TOML (or JSON) file.
    pub fn load_over(base: &RunConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            let v: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(v)?
        };
        let mut merged = serde_json::to_value(base)?;
        merge(&mut merged, overlay);
        serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
    }

    pub fn resolve_space(&self) -> Result<SearchSpace> {
        load_space(&self.space)
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // A tagged enum switching variant is replaced wholesale.
                    Some(slot) if slot.get("kind") == v.get("kind") || v.get("kind").is_none() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// JSON with object keys sorted, so equal content hashes equally.
pub fn canonical_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", serde_json::to_string(k).unwrap(), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        serde_json::Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// A bundled space name or a path to a space JSON file.
pub fn load_space(name_or_path: &str) -> Result<SearchSpace> {
    if let Ok(s) = space_by_name(name_or_path) {
        return Ok(s);
    }
    let p = Path::new(name_or_path);
    if !p.exists() {
        return space_by_name(name_or_path);
    }
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    let space: SearchSpace =
        serde_json::from_str(&text).map_err(|e| Error::InvalidSpace(format!("{}: {e}", p.display())))?;
    space.check()?;
    Ok(space)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub space_id: String,
    pub seed: u64,
    pub deterministic: bool,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<PathBuf>,
    pub version: String,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(command: &str, cfg: &RunConfig, space_id: &str, seed: u64, deterministic: bool) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            space_id: space_id.into(),
            seed,
            deterministic,
            started_unix: unix_now(),
            finished_unix: 0,
            artifacts: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn finish(&mut self, out: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Cardinalities and cost range of a space.
#[derive(Clone, Debug)]
pub struct SpaceStats {
    pub space_id: String,
    pub unconstrained: BigUint,
    pub nd: BigUint,
    pub ops_min_m: f64,
    pub ops_max_m: f64,
    pub table: String,
}

impl SpaceStats {
    pub fn compute(space: &SearchSpace) -> Result<Self> {
        Ok(Self {
            space_id: space.id.clone(),
            unconstrained: cardinality(space, false),
            nd: cardinality(space, true),
            ops_min_m: total_ops(space, &smallest(space))?.total_m(),
            ops_max_m: total_ops(space, &largest(space))?.total_m(),
            table: space.stage_table(),
        })
    }

    pub fn ratio(&self) -> f64 {
        ratio(&self.nd, &self.unconstrained)
    }
}

impl fmt::Display for SpaceStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "space: {}", self.space_id)?;
        writeln!(
            f,
            "architectures (unconstrained): {} (~{})",
            self.unconstrained,
            sci(&self.unconstrained, 2)
        )?;
        writeln!(f, "architectures (non-decreasing): {} (~{})", self.nd, sci(&self.nd, 2))?;
        writeln!(f, "ratio: {:.3e} ({:.4}%)", self.ratio(), 100.0 * self.ratio())?;
        writeln!(f, "OPs range: {:.2}M .. {:.2}M", self.ops_min_m, self.ops_max_m)?;
        write!(f, "{}", self.table)
    }
}

/// One row of a candidates CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRow {
    pub space_id: String,
    pub ops_m: f64,
    pub acc: f64,
    pub arch: String,
}

pub fn parse_candidates_csv(text: &str) -> Result<Vec<CandidateRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(4, ',');
        let mut next = |what: &str| {
            parts
                .next()
                .ok_or_else(|| Error::Data(format!("candidates line {}: missing {what}", i + 1)))
        };
        let space_id = next("space_id")?.to_string();
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("candidates line {}: bad {what} `{s}`", i + 1)))
        };
        let ops_m = num(next("ops_m")?, "ops_m")?;
        let acc = num(next("acc")?, "acc")?;
        let arch = next("arch")?.trim_matches('"').to_string();
        rows.push(CandidateRow {
            space_id,
            ops_m,
            acc,
            arch,
        });
    }
    Ok(rows)
}

/// Accuracy-vs-OPs scatter with the front drawn on top.
pub fn scatter_svg(points: &[(f64, f64)], front: &[(f64, f64)], title: &str) -> String {
    let (w, h, m) = (640.0, 420.0, 56.0);
    let all: Vec<&(f64, f64)> = points.iter().chain(front).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 1.0f64, 0.0f64, 1.0f64);
    if !all.is_empty() {
        x0 = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        x1 = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        y0 = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        y1 = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.05;
            y1 += 0.05;
        }
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">OPs (M)</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {})\">top-1 accuracy</text>\n",
        w / 2.0,
        xml_escape(title),
        h - m,
        w - m,
        h - m,
        h - m,
        w / 2.0,
        h - 14.0,
        h / 2.0,
        h / 2.0
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{fx:.1}</text>\n",
            sx(fx),
            h - m + 14.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{fy:.3}</text>\n",
            m - 4.0,
            sy(fy) + 3.0
        ));
    }
    for &(x, y) in points {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"#8aa4c8\"/>\n",
            sx(x),
            sy(y)
        ));
    }
    if !front.is_empty() {
        let path: Vec<String> = front
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in front {
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#c0392b\"/>\n",
                sx(x),
                sy(y)
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Markdown table with the columns model, OPs and top-1.
pub fn markdown_table(rows: &[(String, f64, Option<f64>)]) -> String {
    let mut s = String::from("| Model | OPs (M) | Top-1 (%) |\n|---|---:|---:|\n");
    for (name, ops, acc) in rows {
        let a = acc.map(|a| format!("{:.2}", 100.0 * a)).unwrap_or_else(|| "-".into());
        s.push_str(&format!("| {name} | {ops:.2} | {a} |\n"));
    }
    s
}

/// Training view, held-out validation split and test set for a config.
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    let (full, test) = cfg.dataset.load()?;
    let (tr, va) = build_val_split(&full.labels, full.classes, cfg.val_per_class, cfg.seed)?;
    Ok(PreparedData {
        train: full.subset(&tr),
        val: full.subset(&va),
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepared_tiny_data_is_split() {
        let d = prepare_data(&TrainConfig::tiny()).unwrap();
        assert_eq!(d.val.len(), 32);
        assert_eq!(d.train.len(), 256 - 32);
        assert_eq!(d.test.len(), 64);
    }

    #[test]
    fn presets_hash_stably_and_differ() {
        let a = RunConfig::preset("tiny").unwrap();
        assert_eq!(a.hash(), RunConfig::preset("tiny").unwrap().hash());
        assert_ne!(a.hash(), RunConfig::preset("desk").unwrap().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn toml_overlay_overrides_only_given_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nepochs = 7\n[search]\npopulation = 5\n").unwrap();
        let base = RunConfig::preset("tiny").unwrap();
        let c = RunConfig::load_over(&base, &p).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.search.population, 5);
        assert_eq!(c.train.batch_size, base.train.batch_size);
        std::fs::write(&p, "[train]\nepochs = \"many\"\n").unwrap();
        assert!(matches!(RunConfig::load_over(&base, &p), Err(Error::Config(_))));
    }

    #[test]
    fn full_config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("full.toml");
        let c = RunConfig::preset("desk").unwrap();
        std::fs::write(&p, c.to_toml()).unwrap();
        let back = RunConfig::load_over(&RunConfig::preset("tiny").unwrap(), &p).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":{"d":[1,2],"c":null}}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":{"c":null,"d":[1,2]},"b":1}"#);
    }

    #[test]
    fn space_file_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        let mut space = crate::presets::tiny_space();
        space.stages[1].group_choices = vec![3];
        std::fs::write(&p, serde_json::to_string(&space).unwrap()).unwrap();
        let e = load_space(p.to_str().unwrap()).unwrap_err().to_string();
        assert!(e.contains("stages[1].group_choices"), "{e}");
    }

    #[test]
    fn candidates_csv_round_trip_and_empty_plot() {
        let csv = "space_id,ops_m,acc,arch\ntiny,1.5,0.25,\"stem4|c8_k3_g1,c8_k3_g1\"\n";
        let rows = parse_candidates_csv(csv).unwrap();
        assert_eq!(rows[0].arch, "stem4|c8_k3_g1,c8_k3_g1");
        assert_eq!((rows[0].ops_m, rows[0].acc), (1.5, 0.25));
        assert!(parse_candidates_csv("space_id,ops_m,acc,arch\n").unwrap().is_empty());
        let svg = scatter_svg(&[], &[], "empty");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn markdown_table_columns() {
        let t = markdown_table(&[("nas-bnn-a".into(), 20.81, Some(0.5)), ("x".into(), 1.0, None)]);
        assert!(t.contains("| nas-bnn-a | 20.81 | 50.00 |"));
        assert!(t.contains("| x | 1.00 | - |"));
    }
}
