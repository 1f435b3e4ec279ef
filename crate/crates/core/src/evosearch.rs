//! Evolutionary search for the accuracy/OPs Pareto front of a trained supernet.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::total_ops;
use crate::data::{epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::nn::BnMode;
use crate::searchspace::{crossover, is_valid, mutate, sample_uniform, smallest, Architecture};
use crate::supernet::{ExecMode, Supernet};
use crate::trainer::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub parent_fraction: f64,
    pub mutation_prob: f64,
    pub crossover_fraction: f64,
    /// Upper edges of the OPs buckets, in millions, ascending.
    pub ops_budgets: Vec<f64>,
    pub calib_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 128,
            generations: 20,
            parent_fraction: 0.25,
            mutation_prob: 0.2,
            crossover_fraction: 0.5,
            ops_budgets: vec![40.0, 80.0, 120.0, 160.0, 200.0],
            calib_batches: 32,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn check(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("search.{name} must be in (0, 1], got {v}")))
            }
        };
        if self.population == 0 {
            return Err(Error::Config("search.population must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("search.batch_size must be positive".into()));
        }
        frac("parent_fraction", self.parent_fraction)?;
        frac("mutation_prob", self.mutation_prob)?;
        frac("crossover_fraction", self.crossover_fraction)?;
        if self.ops_budgets.is_empty() || self.ops_budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "search.ops_budgets must be non-empty and strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoEntry {
    pub arch: Architecture,
    pub ops: u64,
    pub acc: f64,
}

impl ParetoEntry {
    pub fn ops_m(&self) -> f64 {
        self.ops as f64 / 1e6
    }
}

/// Selection order: accuracy descending, OPs ascending, digest ascending.
pub fn rank_cmp(a: &ParetoEntry, b: &ParetoEntry) -> Ordering {
    b.acc
        .total_cmp(&a.acc)
        .then(a.ops.cmp(&b.ops))
        .then(a.arch.digest().cmp(&b.arch.digest()))
}

/// Maximal non-dominated subset under (minimize ops, maximize acc), sorted
/// by ops ascending. Exact duplicates collapse to one entry.
pub fn pareto_filter(entries: &[ParetoEntry]) -> Vec<ParetoEntry> {
    let mut sorted: Vec<&ParetoEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| {
        a.ops
            .cmp(&b.ops)
            .then(b.acc.total_cmp(&a.acc))
            .then(a.arch.digest().cmp(&b.arch.digest()))
    });
    let mut out: Vec<ParetoEntry> = Vec::new();
    for e in sorted {
        if out.last().is_none_or(|best| e.acc > best.acc) {
            out.push(e.clone());
        }
    }
    out
}

/// `a` dominates `b`.
pub fn dominates(a: &ParetoEntry, b: &ParetoEntry) -> bool {
    a.ops <= b.ops && a.acc >= b.acc && (a.ops < b.ops || a.acc > b.acc)
}

/// Seeded class-balanced hold-out: `(train_view, val)` index lists.
pub fn build_val_split(
    labels: &[usize],
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if per_class == 0 {
        return Err(Error::Data("validation split of 0 images per class is empty".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = Vec::with_capacity(per_class * classes);
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < per_class {
            return Err(Error::Data(format!(
                "class {c} has {} images, fewer than the {per_class} requested",
                idx.len()
            )));
        }
        val.extend(idx.choose_multiple(&mut rng, per_class).copied());
    }
    val.sort_unstable();
    let mut is_val = vec![false; labels.len()];
    for &i in &val {
        is_val[i] = true;
    }
    let train = (0..labels.len()).filter(|&i| !is_val[i]).collect();
    Ok((train, val))
}

/// Calibration and validation data for subnet evaluation.
#[derive(Clone, Copy, Debug)]
pub struct EvalData<'a> {
    pub calib: &'a Dataset,
    pub val: &'a Dataset,
    pub batch_size: usize,
    pub calib_batches: usize,
    pub seed: u64,
}

/// Replaces BN running statistics of `arch` by the average batch statistics
/// of `calib_batches` BWBA forwards. Weights are untouched.
pub fn recalibrate_bn(net: &mut Supernet, arch: &Architecture, data: &EvalData) -> Result<()> {
    net.activate(arch)?;
    if data.calib_batches == 0 || data.calib.is_empty() {
        return Ok(());
    }
    let order = epoch_order(data.calib.len(), data.seed, u64::MAX);
    net.begin_calibration();
    for idx in Dataset::batches(&order, data.batch_size, true)
        .into_iter()
        .take(data.calib_batches)
    {
        let (x, _) = data.calib.batch(&idx, None);
        net.forward(&x, ExecMode::Bwba, BnMode::Calibrate)?;
    }
    Ok(())
}

/// Top-1 accuracy of the active subnet in BWBA mode with running statistics.
pub fn accuracy(net: &mut Supernet, val: &Dataset, batch_size: usize) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let order: Vec<usize> = (0..val.len()).collect();
    let mut hits = 0usize;
    for idx in Dataset::batches(&order, batch_size, true) {
        let (x, y) = val.batch(&idx, None);
        let logits = net.forward(&x, ExecMode::Bwba, BnMode::Eval)?;
        let c = logits.shape()[1];
        hits += logits.data().chunks(c).zip(&y).filter(|(r, &l)| argmax(r) == l).count();
    }
    Ok(hits as f64 / val.len() as f64)
}

/// Activate, recalibrate, and measure accuracy on the validation split.
pub fn evaluate(net: &mut Supernet, arch: &Architecture, data: &EvalData) -> Result<f64> {
    if data.val.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    recalibrate_bn(net, arch, data)?;
    accuracy(net, data.val, data.batch_size)
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub front: Vec<ParetoEntry>,
    /// Every evaluated candidate in evaluation order.
    pub evaluated: Vec<ParetoEntry>,
}

/// Bucket of an OPs count: the first budget it fits under.
fn bucket_of(ops: u64, budgets: &[f64]) -> Option<usize> {
    budgets.iter().position(|&b| ops as f64 <= b * 1e6)
}

struct Evaluator<'n, 'd> {
    net: &'n mut Supernet,
    data: EvalData<'d>,
    cache: HashMap<Architecture, f64>,
    evaluated: Vec<ParetoEntry>,
}

impl Evaluator<'_, '_> {
    fn eval(&mut self, arch: &Architecture, ops: u64) -> Result<ParetoEntry> {
        debug_assert!(is_valid(self.net.space(), arch));
        let acc = match self.cache.get(arch) {
            Some(&a) => a,
            None => {
                let a = evaluate(self.net, arch, &self.data)?;
                self.cache.insert(arch.clone(), a);
                let e = ParetoEntry {
                    arch: arch.clone(),
                    ops,
                    acc: a,
                };
                log::debug!("evaluated {} ops {:.2}M acc {:.4}", arch.compact(), e.ops_m(), a);
                self.evaluated.push(e);
                a
            }
        };
        Ok(ParetoEntry {
            arch: arch.clone(),
            ops,
            acc,
        })
    }
}

/// Bucketed evolutionary search. BN statistics are restored afterwards.
pub fn evolve(net: &mut Supernet, cfg: &SearchConfig, data: EvalData) -> Result<SearchResult> {
    cfg.check()?;
    let space = net.space().clone();
    let small = total_ops(&space, &smallest(&space))?.total_ops;
    if small as f64 > cfg.ops_budgets[0] * 1e6 {
        return Err(Error::BudgetInfeasible {
            needed_m: small as f64 / 1e6,
            budget_m: cfg.ops_budgets[0],
        });
    }
    let snap = net.bn_snapshot();
    let result = evolve_inner(net, cfg, data);
    net.restore_bn(&snap);
    result
}

fn evolve_inner(net: &mut Supernet, cfg: &SearchConfig, data: EvalData) -> Result<SearchResult> {
    let space = net.space().clone();
    let nb = cfg.ops_budgets.len();
    let target = cfg.population.div_ceil(nb).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ops_of = |a: &Architecture| -> Result<u64> { Ok(total_ops(&space, a)?.total_ops) };
    let mut ev = Evaluator {
        net,
        data,
        cache: HashMap::new(),
        evaluated: Vec::new(),
    };
    // Initial population: ND-uniform samples binned by budget.
    let mut buckets: Vec<Vec<ParetoEntry>> = vec![Vec::new(); nb];
    let mut seen = std::collections::HashSet::new();
    let max_tries = 50 * cfg.population.max(8);
    let small = smallest(&space);
    let small_ops = ops_of(&small)?;
    if let Some(b) = bucket_of(small_ops, &cfg.ops_budgets) {
        seen.insert(small.clone());
        buckets[b].push(ev.eval(&small, small_ops)?);
    }
    for _ in 0..max_tries {
        if buckets.iter().all(|b| b.len() >= target) {
            break;
        }
        let a = sample_uniform(&space, &mut rng, true)?;
        let ops = ops_of(&a)?;
        if let Some(b) = bucket_of(ops, &cfg.ops_budgets) {
            if buckets[b].len() < target && seen.insert(a.clone()) {
                buckets[b].push(ev.eval(&a, ops)?);
            }
        }
    }
    for _ in 0..cfg.generations {
        let mut next: Vec<Vec<ParetoEntry>> = vec![Vec::new(); nb];
        for b in 0..nb {
            let mut members = buckets[b].clone();
            if members.is_empty() {
                continue;
            }
            members.sort_by(rank_cmp);
            let keep = ((members.len() as f64 * cfg.parent_fraction).ceil() as usize).clamp(1, members.len());
            let parents: Vec<ParetoEntry> = members[..keep].to_vec();
            let children = target.saturating_sub(keep);
            let n_cross = (children as f64 * cfg.crossover_fraction).round() as usize;
            let mut kids: Vec<ParetoEntry> = Vec::new();
            let mut local: std::collections::HashSet<Architecture> = parents.iter().map(|p| p.arch.clone()).collect();
            let mut tries = 0;
            while kids.len() < children && tries < 20 * children.max(1) {
                tries += 1;
                let child = if kids.len() < n_cross && parents.len() > 1 {
                    let pa = &parents.choose(&mut rng).unwrap().arch;
                    let pb = &parents.choose(&mut rng).unwrap().arch;
                    crossover(&space, pa, pb, &mut rng)?
                } else {
                    let p = &parents.choose(&mut rng).unwrap().arch;
                    mutate(&space, p, cfg.mutation_prob, &mut rng)?
                };
                let ops = ops_of(&child)?;
                if bucket_of(ops, &cfg.ops_budgets) != Some(b) || !local.insert(child.clone()) {
                    continue;
                }
                kids.push(ev.eval(&child, ops)?);
            }
            next[b] = parents.into_iter().chain(kids).collect();
        }
        buckets = next;
    }
    let front = pareto_filter(&ev.evaluated);
    Ok(SearchResult {
        front,
        evaluated: ev.evaluated,
    })
}

/// CSV of candidates: `space_id,ops_m,acc,arch` with the compact arch quoted.
pub fn candidates_csv(entries: &[ParetoEntry]) -> String {
    let mut s = String::from("space_id,ops_m,acc,arch\n");
    for e in entries {
        s.push_str(&format!(
            "{},{:.6},{:.6},\"{}\"\n",
            e.arch.space_id,
            e.ops_m(),
            e.acc,
            e.arch.compact()
        ));
    }
    s
}

#[derive(Serialize, Deserialize)]
struct FrontJson {
    arch: Architecture,
    ops_m: f64,
    acc: f64,
}

pub fn front_json(front: &[ParetoEntry]) -> String {
    let v: Vec<FrontJson> = front
        .iter()
        .map(|e| FrontJson {
            arch: e.arch.clone(),
            ops_m: e.ops_m(),
            acc: e.acc,
        })
        .collect();
    serde_json::to_string_pretty(&v).unwrap()
}

pub fn parse_front_json(s: &str) -> Result<Vec<ParetoEntry>> {
    let v: Vec<FrontJson> = serde_json::from_str(s)?;
    Ok(v.into_iter()
        .map(|f| ParetoEntry {
            arch: f.arch,
            ops: (f.ops_m * 1e6).round() as u64,
            acc: f.acc,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::presets::tiny_space;
    use crate::searchspace::largest;
    use crate::supernet::NetConfig;

    fn entry(ops: u64, acc: f64, seed: u64) -> ParetoEntry {
        let mut arch = largest(&tiny_space());
        arch.stem_channels = seed as usize;
        ParetoEntry { arch, ops, acc }
    }

    #[test]
    fn pareto_hand_example_and_duplicates() {
        let f = pareto_filter(&[entry(10, 0.5, 1), entry(20, 0.6, 2), entry(15, 0.4, 3)]);
        assert_eq!(
            f.iter().map(|e| (e.ops, e.acc)).collect::<Vec<_>>(),
            vec![(10, 0.5), (20, 0.6)]
        );
        let same = vec![entry(5, 0.3, 1); 4];
        assert_eq!(pareto_filter(&same).len(), 1);
        assert!(pareto_filter(&[]).is_empty());
    }

    #[test]
    fn val_split_is_balanced_disjoint_and_seeded() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let (tr, va) = build_val_split(&labels, 4, 10, 3).unwrap();
        assert_eq!(va.len(), 40);
        assert_eq!(tr.len() + va.len(), 200);
        for c in 0..4 {
            assert_eq!(va.iter().filter(|&&i| labels[i] == c).count(), 10);
        }
        assert!(tr.iter().all(|i| !va.contains(i)));
        assert_eq!(build_val_split(&labels, 4, 10, 3).unwrap(), (tr, va));
        assert!(build_val_split(&labels, 4, 0, 3).is_err());
        assert!(build_val_split(&labels, 4, 51, 3).is_err());
    }

    #[test]
    fn recalibration_freezes_weights_and_zero_batches_is_identity() {
        let space = tiny_space();
        let mut net = Supernet::build(&space, NetConfig::default()).unwrap();
        let d = synthetic(64, 4, 12, 0.5, 0);
        let before: Vec<_> = net.params().iter().map(|p| p.value.clone()).collect();
        let bn0 = net.bn_snapshot();
        let mut ed = EvalData {
            calib: &d,
            val: &d,
            batch_size: 16,
            calib_batches: 0,
            seed: 0,
        };
        recalibrate_bn(&mut net, &largest(&space), &ed).unwrap();
        assert_eq!(net.bn_snapshot(), bn0);
        ed.calib_batches = 2;
        recalibrate_bn(&mut net, &largest(&space), &ed).unwrap();
        assert_ne!(net.bn_snapshot(), bn0);
        let after: Vec<_> = net.params().iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn evaluate_is_deterministic_and_near_chance_untrained() {
        let space = tiny_space();
        let mut net = Supernet::build(&space, NetConfig::default()).unwrap();
        let d = synthetic(400, 4, 12, 0.5, 0);
        let ed = EvalData {
            calib: &d,
            val: &d,
            batch_size: 50,
            calib_batches: 2,
            seed: 0,
        };
        let a = evaluate(&mut net, &smallest(&space), &ed).unwrap();
        let b = evaluate(&mut net, &smallest(&space), &ed).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
        let empty = d.subset(&[]);
        let e = EvalData { val: &empty, ..ed };
        assert!(evaluate(&mut net, &smallest(&space), &e).is_err());
    }

    #[test]
    fn evolve_contract_on_tiny_space() {
        let space = tiny_space();
        let mut net = Supernet::build(&space, NetConfig::default()).unwrap();
        let d = synthetic(64, 4, 12, 0.5, 0);
        let ed = EvalData {
            calib: &d,
            val: &d,
            batch_size: 32,
            calib_batches: 1,
            seed: 0,
        };
        let lo = total_ops(&space, &smallest(&space)).unwrap().total_m();
        let hi = total_ops(&space, &largest(&space)).unwrap().total_m();
        let cfg = SearchConfig {
            population: 8,
            generations: 2,
            ops_budgets: vec![lo + (hi - lo) / 3.0, lo + 2.0 * (hi - lo) / 3.0, hi],
            calib_batches: 1,
            ..SearchConfig::default()
        };
        let weights: Vec<_> = net.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let r = evolve(&mut net, &cfg, ed).unwrap();
        let after: Vec<_> = net.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(weights, after);
        assert!(!r.front.is_empty());
        for e in &r.evaluated {
            assert!(is_valid(&space, &e.arch));
            assert!(e.ops_m() <= hi + 1e-9);
        }
        for w in r.front.windows(2) {
            assert!(w[0].ops < w[1].ops && w[0].acc < w[1].acc);
        }
        let infeasible = SearchConfig {
            ops_budgets: vec![lo / 2.0],
            ..cfg
        };
        assert!(matches!(
            evolve(&mut net, &infeasible, ed),
            Err(Error::BudgetInfeasible { .. })
        ));
    }

    #[test]
    fn front_json_round_trip() {
        let f = vec![entry(1_500_000, 0.25, 4)];
        let back = parse_front_json(&front_json(&f)).unwrap();
        assert_eq!(back, f);
    }
}
