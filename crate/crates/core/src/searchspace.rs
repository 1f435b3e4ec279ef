//! Architecture encoding and the elastic MobileNetV1-style search space.
//!
//! A network is a stem convolution followed by stages of separable blocks.
//! Each block owns one searchable grouped `k x k` binary convolution that
//! keeps its input width, followed by a fixed `1 x 1` binary convolution that
//! projects to the block's channel width. The channel width of a layer is
//! therefore the width of the block output.
//!
//! The Non-Decreasing (ND) constraint requires the flattened channel sequence
//! `stem, stage1-layer1, stage1-layer2, ...` to be non-decreasing.

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub depth_choices: Vec<usize>,
    pub channel_choices: Vec<usize>,
    pub kernel_choices: Vec<usize>,
    pub group_choices: Vec<usize>,
    pub stride: usize,
}

impl StageSpec {
    pub fn max_depth(&self) -> usize {
        *self.depth_choices.iter().max().unwrap()
    }
    pub fn min_depth(&self) -> usize {
        *self.depth_choices.iter().min().unwrap()
    }
    pub fn max_channels(&self) -> usize {
        *self.channel_choices.last().unwrap()
    }
    pub fn min_channels(&self) -> usize {
        self.channel_choices[0]
    }
    pub fn max_kernel(&self) -> usize {
        *self.kernel_choices.iter().max().unwrap()
    }
    pub fn min_kernel(&self) -> usize {
        *self.kernel_choices.iter().min().unwrap()
    }
    pub fn max_groups(&self) -> usize {
        *self.group_choices.iter().max().unwrap()
    }
    pub fn min_groups(&self) -> usize {
        *self.group_choices.iter().min().unwrap()
    }
    /// Number of `(channels, kernel, groups)` combinations of one layer.
    pub fn layer_choice_count(&self) -> usize {
        self.channel_choices.len() * self.kernel_choices.len() * self.group_choices.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub id: String,
    pub stem_channel_choices: Vec<usize>,
    #[serde(default = "default_stem_kernel")]
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    pub input_resolution: usize,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_stem_kernel() -> usize {
    3
}

fn default_in_channels() -> usize {
    3
}

impl SearchSpace {
    /// Checks the structural invariants of the space.
    ///
    /// Returns warnings for soft conditions (stage channel ranges that
    /// overlap, which make the ND constraint couple adjacent stages).
    pub fn check(&self) -> Result<Vec<String>> {
        let bad = |msg: String| Err(Error::InvalidSpace(msg));
        if self.stem_channel_choices.is_empty() {
            return bad("stem_channel_choices is empty".into());
        }
        if !strictly_increasing(&self.stem_channel_choices) {
            return bad("stem_channel_choices must be strictly increasing".into());
        }
        if self.stem_stride == 0 || self.stem_kernel.is_multiple_of(2) {
            return bad("stem_stride must be positive and stem_kernel odd".into());
        }
        if self.num_classes == 0 || self.input_resolution == 0 || self.in_channels == 0 {
            return bad("num_classes, input_resolution and in_channels must be positive".into());
        }
        for (s, st) in self.stages.iter().enumerate() {
            let name = format!("stages[{s}]");
            if st.depth_choices.is_empty()
                || st.channel_choices.is_empty()
                || st.kernel_choices.is_empty()
                || st.group_choices.is_empty()
            {
                return bad(format!("{name}: every choice set must be non-empty"));
            }
            if st.depth_choices.contains(&0) {
                return bad(format!("{name}.depth_choices: depths must be positive"));
            }
            if !strictly_increasing(&st.channel_choices) {
                return bad(format!("{name}.channel_choices must be strictly increasing"));
            }
            if st.kernel_choices.iter().any(|&k| k % 2 == 0) {
                return bad(format!("{name}.kernel_choices must be odd"));
            }
            if st.group_choices.contains(&0) || st.stride == 0 {
                return bad(format!("{name}: groups and stride must be positive"));
            }
            for &c in &st.channel_choices {
                for &g in &st.group_choices {
                    if c % g != 0 {
                        return bad(format!(
                            "{name}.group_choices: channels {c} not divisible by groups {g}"
                        ));
                    }
                }
            }
            let gmin = st.min_groups();
            if st.group_choices.iter().any(|&g| g % gmin != 0) {
                return bad(format!(
                    "{name}.group_choices: every choice must be a multiple of the minimum {gmin}"
                ));
            }
            // The first block's grouped conv runs at the previous width.
            let prev_max = if s == 0 {
                *self.stem_channel_choices.last().unwrap()
            } else {
                self.stages[s - 1].max_channels()
            };
            if prev_max % gmin != 0 {
                return bad(format!(
                    "{name}.group_choices: incoming width {prev_max} not divisible by {gmin}"
                ));
            }
        }
        let stride = self.total_stride();
        if !self.input_resolution.is_multiple_of(stride) {
            return Err(Error::Resolution {
                resolution: self.input_resolution,
                stride,
            });
        }
        let mut warnings = Vec::new();
        let mut prev_max = *self.stem_channel_choices.last().unwrap();
        for (s, st) in self.stages.iter().enumerate() {
            if prev_max > st.min_channels() {
                warnings.push(format!(
                    "stage {}: minimum width {} is below the preceding maximum {}; ND couples adjacent stages",
                    s + 1,
                    st.min_channels(),
                    prev_max
                ));
            }
            prev_max = st.max_channels();
        }
        Ok(warnings)
    }

    pub fn total_stride(&self) -> usize {
        self.stem_stride * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    /// Returns a copy with a different input resolution.
    pub fn with_resolution(&self, resolution: usize) -> Self {
        let mut s = self.clone();
        s.input_resolution = resolution;
        s
    }

    fn all_channel_values(&self) -> Vec<usize> {
        let mut set: BTreeSet<usize> = self.stem_channel_choices.iter().copied().collect();
        for st in &self.stages {
            set.extend(st.channel_choices.iter().copied());
        }
        set.into_iter().collect()
    }

    /// Human-readable per-stage table.
    pub fn stage_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:<10} {:<22} {:<10} {:<10} {:<6}\n",
            "stage", "depth", "channels", "kernel", "groups", "stride"
        ));
        out.push_str(&format!(
            "{:<8} {:<10} {:<22} {:<10} {:<10} {:<6}\n",
            "stem",
            "1",
            set_str(&self.stem_channel_choices),
            self.stem_kernel,
            1,
            self.stem_stride
        ));
        for (i, st) in self.stages.iter().enumerate() {
            out.push_str(&format!(
                "{:<8} {:<10} {:<22} {:<10} {:<10} {:<6}\n",
                i + 1,
                set_str(&st.depth_choices),
                set_str(&st.channel_choices),
                set_str(&st.kernel_choices),
                set_str(&st.group_choices),
                st.stride
            ));
        }
        out
    }
}

fn set_str(v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("{{{}}}", items.join(","))
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerChoice {
    #[serde(rename = "c")]
    pub channels: usize,
    #[serde(rename = "k")]
    pub kernel: usize,
    #[serde(rename = "g")]
    pub groups: usize,
}

impl LayerChoice {
    pub fn new(channels: usize, kernel: usize, groups: usize) -> Self {
        Self {
            channels,
            kernel,
            groups,
        }
    }
}

impl fmt::Display for LayerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}_k{}_g{}", self.channels, self.kernel, self.groups)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub stem_channels: usize,
    pub stages: Vec<Vec<LayerChoice>>,
    pub space_id: String,
}

#[derive(Serialize, Deserialize)]
struct ArchJson {
    stem_channels: usize,
    stages: Vec<StageJson>,
    space_id: String,
}

#[derive(Serialize, Deserialize)]
struct StageJson {
    layers: Vec<LayerChoice>,
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ArchJson {
            stem_channels: self.stem_channels,
            stages: self.stages.iter().map(|l| StageJson { layers: l.clone() }).collect(),
            space_id: self.space_id.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = ArchJson::deserialize(d)?;
        Ok(Architecture {
            stem_channels: a.stem_channels,
            stages: a.stages.into_iter().map(|s| s.layers).collect(),
            space_id: a.space_id,
        })
    }
}

impl Architecture {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Flattened channel sequence the ND constraint ranges over.
    pub fn channel_sequence(&self) -> Vec<usize> {
        std::iter::once(self.stem_channels)
            .chain(self.stages.iter().flatten().map(|l| l.channels))
            .collect()
    }

    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.len()).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.stages.iter().map(|s| s.len()).sum()
    }

    /// Width of the last layer (the classifier input width).
    pub fn output_channels(&self) -> usize {
        self.stages
            .iter()
            .flatten()
            .last()
            .map(|l| l.channels)
            .unwrap_or(self.stem_channels)
    }

    /// Stable 64-bit digest of the encoding, used for tie-breaking and caching.
    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.stem_channels.to_le_bytes());
        for st in &self.stages {
            h.update([0xffu8]);
            for l in st {
                h.update(l.channels.to_le_bytes());
                h.update(l.kernel.to_le_bytes());
                h.update(l.groups.to_le_bytes());
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    /// Compact one-line form: `stem24|c48_k3_g1,c48_k3_g1|...`.
    pub fn compact(&self) -> String {
        let mut s = format!("stem{}", self.stem_channels);
        for st in &self.stages {
            s.push('|');
            let parts: Vec<String> = st.iter().map(|l| l.to_string()).collect();
            s.push_str(&parts.join(","));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Membership,
    Depth,
    NonDecreasing,
    Divisibility,
    StageCount,
    SpaceId,
}

/// A single reason an architecture is not a member of a space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// 1-based stage index, `None` for the stem or whole-architecture issues.
    pub stage: Option<usize>,
    /// 1-based layer index within the stage.
    pub layer: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Checks choice-set membership, depths, divisibility of every grouped conv
/// and the ND constraint. Violations are returned as data.
pub fn validate(space: &SearchSpace, arch: &Architecture) -> Vec<Violation> {
    let mut out = Vec::new();
    if arch.space_id != space.id {
        out.push(Violation {
            kind: ViolationKind::SpaceId,
            stage: None,
            layer: None,
            message: format!("space_id `{}` does not match space `{}`", arch.space_id, space.id),
        });
    }
    if !space.stem_channel_choices.contains(&arch.stem_channels) {
        out.push(Violation {
            kind: ViolationKind::Membership,
            stage: None,
            layer: None,
            message: format!("stem channels {} not in choice set", arch.stem_channels),
        });
    }
    if arch.stages.len() != space.stages.len() {
        out.push(Violation {
            kind: ViolationKind::StageCount,
            stage: None,
            layer: None,
            message: format!(
                "architecture has {} stages, space has {}",
                arch.stages.len(),
                space.stages.len()
            ),
        });
        return out;
    }
    let mut prev = arch.stem_channels;
    for (s, (layers, st)) in arch.stages.iter().zip(&space.stages).enumerate() {
        let stage = s + 1;
        if !st.depth_choices.contains(&layers.len()) {
            out.push(Violation {
                kind: ViolationKind::Depth,
                stage: Some(stage),
                layer: None,
                message: format!("stage {stage}: depth {} not in choice set", layers.len()),
            });
        }
        for (i, l) in layers.iter().enumerate() {
            let layer = i + 1;
            let at = |field: &str, v: usize| Violation {
                kind: ViolationKind::Membership,
                stage: Some(stage),
                layer: Some(layer),
                message: format!("stage {stage}, layer {layer}: {field} {v} not in choice set"),
            };
            if !st.channel_choices.contains(&l.channels) {
                out.push(at("channels", l.channels));
            }
            if !st.kernel_choices.contains(&l.kernel) {
                out.push(at("kernel", l.kernel));
            }
            if !st.group_choices.contains(&l.groups) {
                out.push(at("groups", l.groups));
            }
            if l.groups > 0 && (!prev.is_multiple_of(l.groups) || l.channels % l.groups != 0) {
                out.push(Violation {
                    kind: ViolationKind::Divisibility,
                    stage: Some(stage),
                    layer: Some(layer),
                    message: format!(
                        "stage {stage}, layer {layer}: input width {prev} / output width {} not divisible by groups {}",
                        l.channels, l.groups
                    ),
                });
            }
            if l.channels < prev {
                let message = if i > 0 {
                    format!("ND at stage {stage}, layers {}\u{2192}{layer}", layer - 1)
                } else if s == 0 {
                    format!("ND at stage {stage}, stem\u{2192}layer 1")
                } else {
                    format!(
                        "ND at stage {stage}, layer 1 (after stage {} layer {})",
                        s,
                        arch.stages[s - 1].len()
                    )
                };
                out.push(Violation {
                    kind: ViolationKind::NonDecreasing,
                    stage: Some(stage),
                    layer: Some(layer),
                    message,
                });
            }
            prev = l.channels;
        }
    }
    out
}

/// Like [`validate`] but ignores the ND constraint (the unconstrained space).
pub fn validate_unconstrained(space: &SearchSpace, arch: &Architecture) -> Vec<Violation> {
    validate(space, arch)
        .into_iter()
        .filter(|v| v.kind != ViolationKind::NonDecreasing)
        .collect()
}

pub fn is_valid(space: &SearchSpace, arch: &Architecture) -> bool {
    validate(space, arch).is_empty()
}

/// Input channels per group for every searchable conv (stage, layer, value).
///
/// Diagnostic only: the value can fall below the nominal per-group width at
/// stage boundaries.
pub fn channels_per_group(arch: &Architecture) -> Vec<(usize, usize, usize)> {
    let mut prev = arch.stem_channels;
    let mut out = Vec::new();
    for (s, st) in arch.stages.iter().enumerate() {
        for (i, l) in st.iter().enumerate() {
            out.push((s + 1, i + 1, prev / l.groups.max(1)));
            prev = l.channels;
        }
    }
    out
}

/// Max depth, max channels, max kernel and minimum (densest) groups.
pub fn largest(space: &SearchSpace) -> Architecture {
    Architecture {
        stem_channels: *space.stem_channel_choices.last().unwrap(),
        stages: space
            .stages
            .iter()
            .map(|st| vec![LayerChoice::new(st.max_channels(), st.max_kernel(), st.min_groups()); st.max_depth()])
            .collect(),
        space_id: space.id.clone(),
    }
}

/// Min depth, min channels, min kernel and maximum (sparsest) groups.
pub fn smallest(space: &SearchSpace) -> Architecture {
    Architecture {
        stem_channels: space.stem_channel_choices[0],
        stages: space
            .stages
            .iter()
            .map(|st| vec![LayerChoice::new(st.min_channels(), st.min_kernel(), st.max_groups()); st.min_depth()])
            .collect(),
        space_id: space.id.clone(),
    }
}

/// Counting tables over channel values for exact cardinality and sampling.
///
/// `suffix[s][t][v]` is the number of ways to finish the architecture when
/// `t` layers of stage `s` remain and the last emitted width is channel value
/// index `v`. `t == 0` means stage `s` is complete.
#[derive(Clone, Debug)]
pub struct ArchCounter {
    space: SearchSpace,
    apply_nd: bool,
    values: Vec<usize>,
    suffix: Vec<Vec<Vec<BigUint>>>,
}

impl ArchCounter {
    pub fn new(space: &SearchSpace, apply_nd: bool) -> Self {
        let values = space.all_channel_values();
        let nv = values.len();
        let ns = space.stages.len();
        let mut suffix: Vec<Vec<Vec<BigUint>>> = vec![Vec::new(); ns];
        let mut after: Vec<BigUint> = vec![BigUint::one(); nv];
        for s in (0..ns).rev() {
            let st = &space.stages[s];
            let maxd = st.max_depth();
            let mut tables: Vec<Vec<BigUint>> = Vec::with_capacity(maxd + 1);
            tables.push(after.clone());
            for t in 1..=maxd {
                let next = &tables[t - 1];
                let mut cur = vec![BigUint::zero(); nv];
                for (vi, &v) in values.iter().enumerate() {
                    let mut acc = BigUint::zero();
                    for &c in &st.channel_choices {
                        if apply_nd && c < v {
                            continue;
                        }
                        let w = layer_weight(st, v, c);
                        if w == 0 {
                            continue;
                        }
                        let ci = values.binary_search(&c).unwrap();
                        acc += &next[ci] * BigUint::from(w);
                    }
                    cur[vi] = acc;
                }
                tables.push(cur);
            }
            let mut stage_total = vec![BigUint::zero(); nv];
            for &d in &st.depth_choices {
                for vi in 0..nv {
                    stage_total[vi] += &tables[d][vi];
                }
            }
            suffix[s] = tables;
            after = stage_total;
        }
        // `after` now counts completions from the start given the stem value.
        let mut me = Self {
            space: space.clone(),
            apply_nd,
            values,
            suffix,
        };
        me.suffix.push(vec![after]);
        me
    }

    fn from_stem(&self) -> &[BigUint] {
        &self.suffix[self.space.stages.len()][0]
    }

    fn stage_start(&self, s: usize, vi: usize) -> BigUint {
        let st = &self.space.stages[s];
        st.depth_choices.iter().map(|&d| self.suffix[s][d][vi].clone()).sum()
    }

    pub fn total(&self) -> BigUint {
        self.space
            .stem_channel_choices
            .iter()
            .map(|c| self.from_stem()[self.values.binary_search(c).unwrap()].clone())
            .sum()
    }

    /// Draws an architecture uniformly from the counted set by sequential
    /// DP-weighted choices.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Architecture> {
        let total = self.total();
        if total.is_zero() {
            return Err(Error::EmptySpace);
        }
        let vidx = |c: usize| self.values.binary_search(&c).unwrap();
        let stems: Vec<BigUint> = self
            .space
            .stem_channel_choices
            .iter()
            .map(|&c| self.from_stem()[vidx(c)].clone())
            .collect();
        let stem = self.space.stem_channel_choices[weighted_index(rng, &stems)];
        let mut prev = stem;
        let mut stages = Vec::with_capacity(self.space.stages.len());
        for (s, st) in self.space.stages.iter().enumerate() {
            let depth_w: Vec<BigUint> = st
                .depth_choices
                .iter()
                .map(|&d| self.suffix[s][d][vidx(prev)].clone())
                .collect();
            let depth = st.depth_choices[weighted_index(rng, &depth_w)];
            let mut layers = Vec::with_capacity(depth);
            for t in (1..=depth).rev() {
                let next = &self.suffix[s][t - 1];
                let ch_w: Vec<BigUint> = st
                    .channel_choices
                    .iter()
                    .map(|&c| {
                        if self.apply_nd && c < prev {
                            BigUint::zero()
                        } else {
                            &next[vidx(c)] * BigUint::from(layer_weight(st, prev, c))
                        }
                    })
                    .collect();
                let c = st.channel_choices[weighted_index(rng, &ch_w)];
                let k = st.kernel_choices[rng.random_range(0..st.kernel_choices.len())];
                let groups: Vec<usize> = admissible_groups(st, prev, c);
                let g = groups[rng.random_range(0..groups.len())];
                layers.push(LayerChoice::new(c, k, g));
                prev = c;
            }
            stages.push(layers);
        }
        debug_assert!(self.stage_start(0, vidx(stem)) > BigUint::zero());
        Ok(Architecture {
            stem_channels: stem,
            stages,
            space_id: self.space.id.clone(),
        })
    }
}

fn admissible_groups(st: &StageSpec, in_c: usize, out_c: usize) -> Vec<usize> {
    st.group_choices
        .iter()
        .copied()
        .filter(|&g| in_c.is_multiple_of(g) && out_c.is_multiple_of(g))
        .collect()
}

/// Number of (kernel, groups) options for a layer going from width `in_c`
/// to width `out_c`.
fn layer_weight(st: &StageSpec, in_c: usize, out_c: usize) -> usize {
    st.kernel_choices.len() * admissible_groups(st, in_c, out_c).len()
}

/// Uniform index in `0..bound` with exact arbitrary-precision rejection.
fn uniform_below<R: Rng + ?Sized>(rng: &mut R, bound: &BigUint) -> BigUint {
    debug_assert!(!bound.is_zero());
    let bits = bound.bits();
    let words = bits.div_ceil(32) as usize;
    let top_bits = bits - 32 * (words as u64 - 1);
    let mask: u32 = if top_bits == 32 {
        u32::MAX
    } else {
        (1u32 << top_bits) - 1
    };
    loop {
        let mut digits: Vec<u32> = (0..words).map(|_| rng.random::<u32>()).collect();
        *digits.last_mut().unwrap() &= mask;
        let x = BigUint::from_slice(&digits);
        if &x < bound {
            return x;
        }
    }
}

fn weighted_index<R: Rng + ?Sized>(rng: &mut R, weights: &[BigUint]) -> usize {
    let total: BigUint = weights.iter().sum();
    let mut r = uniform_below(rng, &total);
    for (i, w) in weights.iter().enumerate() {
        if &r < w {
            return i;
        }
        r -= w;
    }
    unreachable!("weights sum to total")
}

/// Exact number of architectures in the space, with or without ND.
pub fn cardinality(space: &SearchSpace, apply_nd: bool) -> BigUint {
    ArchCounter::new(space, apply_nd).total()
}

/// Closed-form count without ND or cross-stage divisibility coupling:
/// `|stem| * prod_s sum_{d} (|C|*|K|*|G|)^d`.
pub fn cardinality_product_formula(space: &SearchSpace) -> BigUint {
    let mut total = BigUint::from(space.stem_channel_choices.len());
    for st in &space.stages {
        let per_layer = BigUint::from(st.layer_choice_count());
        let stage: BigUint = st
            .depth_choices
            .iter()
            .map(|&d| num_traits::pow(per_layer.clone(), d))
            .sum();
        total *= stage;
    }
    total
}

/// Scientific rendering with `digits` significant digits, e.g. `3.96e21`.
pub fn sci(n: &BigUint, digits: usize) -> String {
    let s = n.to_str_radix(10);
    if s.len() <= digits {
        return s;
    }
    let exp = s.len() - 1;
    // Round to the requested number of significant digits.
    let head: u128 = s[..digits + 1].parse().unwrap();
    let rounded = (head + 5) / 10;
    let mut r = rounded.to_string();
    let mut exp = exp;
    if r.len() > digits {
        r.truncate(digits);
        exp += 1;
    }
    let (a, b) = r.split_at(1);
    if b.is_empty() {
        format!("{a}e{exp}")
    } else {
        format!("{a}.{b}e{exp}")
    }
}

/// Ratio of two big integers as `f64`.
pub fn ratio(num: &BigUint, den: &BigUint) -> f64 {
    let shift = den.bits().saturating_sub(60);
    let n = (num >> shift).to_f64().unwrap_or(f64::INFINITY);
    let d = (den >> shift).to_f64().unwrap_or(f64::INFINITY);
    n / d
}

pub fn sample_uniform<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R, apply_nd: bool) -> Result<Architecture> {
    ArchCounter::new(space, apply_nd).sample(rng)
}

pub fn sample_uniform_seeded(space: &SearchSpace, seed: u64, apply_nd: bool) -> Result<Architecture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_uniform(space, &mut rng, apply_nd)
}

/// Restores ND and divisibility after a genetic operator.
///
/// Channels below their predecessor are raised to the smallest admissible
/// choice; groups that no longer divide the conv input are replaced by the
/// first admissible choice.
pub fn repair(space: &SearchSpace, arch: &mut Architecture) -> Result<()> {
    let mut prev = arch.stem_channels;
    for (s, (layers, st)) in arch.stages.iter_mut().zip(&space.stages).enumerate() {
        for (i, l) in layers.iter_mut().enumerate() {
            if l.channels < prev {
                l.channels = st.channel_choices.iter().copied().find(|&c| c >= prev).ok_or_else(|| {
                    Error::InvalidArch(format!(
                        "irreparable: stage {} layer {} has no width >= {prev}",
                        s + 1,
                        i + 1
                    ))
                })?;
            }
            if !prev.is_multiple_of(l.groups) || l.channels % l.groups != 0 {
                l.groups = admissible_groups(st, prev, l.channels)
                    .first()
                    .copied()
                    .ok_or_else(|| {
                        Error::InvalidArch(format!(
                            "irreparable: stage {} layer {} has no admissible groups",
                            s + 1,
                            i + 1
                        ))
                    })?;
            }
            prev = l.channels;
        }
    }
    Ok(())
}

fn pick<R: Rng + ?Sized>(rng: &mut R, choices: &[usize]) -> usize {
    choices[rng.random_range(0..choices.len())]
}

pub fn mutate<R: Rng + ?Sized>(
    space: &SearchSpace,
    arch: &Architecture,
    prob: f64,
    rng: &mut R,
) -> Result<Architecture> {
    let mut out = arch.clone();
    if rng.random_bool(prob) {
        out.stem_channels = pick(rng, &space.stem_channel_choices);
    }
    for (layers, st) in out.stages.iter_mut().zip(&space.stages) {
        if rng.random_bool(prob) {
            let d = pick(rng, &st.depth_choices);
            while layers.len() > d {
                layers.pop();
            }
            while layers.len() < d {
                layers.push(LayerChoice::new(
                    pick(rng, &st.channel_choices),
                    pick(rng, &st.kernel_choices),
                    pick(rng, &st.group_choices),
                ));
            }
        }
        for l in layers.iter_mut() {
            if rng.random_bool(prob) {
                l.channels = pick(rng, &st.channel_choices);
            }
            if rng.random_bool(prob) {
                l.kernel = pick(rng, &st.kernel_choices);
            }
            if rng.random_bool(prob) {
                l.groups = pick(rng, &st.group_choices);
            }
        }
    }
    repair(space, &mut out)?;
    Ok(out)
}

pub fn crossover<R: Rng + ?Sized>(
    space: &SearchSpace,
    a: &Architecture,
    b: &Architecture,
    rng: &mut R,
) -> Result<Architecture> {
    let mut out = Architecture {
        stem_channels: if rng.random_bool(0.5) {
            a.stem_channels
        } else {
            b.stem_channels
        },
        stages: Vec::with_capacity(a.stages.len()),
        space_id: space.id.clone(),
    };
    for (la, lb) in a.stages.iter().zip(&b.stages) {
        let depth = if rng.random_bool(0.5) { la.len() } else { lb.len() };
        let layers = (0..depth)
            .map(|i| match (la.get(i), lb.get(i)) {
                (Some(x), Some(y)) => LayerChoice::new(
                    if rng.random_bool(0.5) { x.channels } else { y.channels },
                    if rng.random_bool(0.5) { x.kernel } else { y.kernel },
                    if rng.random_bool(0.5) { x.groups } else { y.groups },
                ),
                (Some(x), None) => *x,
                (None, Some(y)) => *y,
                (None, None) => unreachable!("depth comes from one parent"),
            })
            .collect();
        out.stages.push(layers);
    }
    repair(space, &mut out)?;
    Ok(out)
}

/// Every architecture of a (small) space, by brute force over all choices.
///
/// Intended for verification only. Returns `None` when the unconstrained
/// space exceeds `limit` members.
pub fn enumerate(space: &SearchSpace, apply_nd: bool, limit: u64) -> Option<Vec<Architecture>> {
    let raw = cardinality_product_formula(space);
    if raw > BigUint::from(limit) {
        return None;
    }
    let mut partial: Vec<Architecture> = space
        .stem_channel_choices
        .iter()
        .map(|&c| Architecture {
            stem_channels: c,
            stages: Vec::new(),
            space_id: space.id.clone(),
        })
        .collect();
    for st in &space.stages {
        let mut layer_opts = Vec::new();
        for &c in &st.channel_choices {
            for &k in &st.kernel_choices {
                for &g in &st.group_choices {
                    layer_opts.push(LayerChoice::new(c, k, g));
                }
            }
        }
        let mut next = Vec::new();
        for a in &partial {
            for &d in &st.depth_choices {
                let mut seqs: Vec<Vec<LayerChoice>> = vec![Vec::new()];
                for _ in 0..d {
                    let mut grown = Vec::with_capacity(seqs.len() * layer_opts.len());
                    for s in &seqs {
                        for l in &layer_opts {
                            let mut t = s.clone();
                            t.push(*l);
                            grown.push(t);
                        }
                    }
                    seqs = grown;
                }
                for s in seqs {
                    let mut b = a.clone();
                    b.stages.push(s);
                    next.push(b);
                }
            }
        }
        partial = next;
    }
    let keep = |a: &Architecture| {
        if apply_nd {
            validate(space, a).is_empty()
        } else {
            validate_unconstrained(space, a).is_empty()
        }
    };
    Some(partial.into_iter().filter(keep).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn toy() -> SearchSpace {
        SearchSpace {
            id: "toy".into(),
            stem_channel_choices: vec![8],
            stem_kernel: 3,
            stem_stride: 1,
            stages: vec![StageSpec {
                depth_choices: vec![2],
                channel_choices: vec![8, 16],
                kernel_choices: vec![3],
                group_choices: vec![1],
                stride: 1,
            }],
            input_resolution: 8,
            num_classes: 2,
            in_channels: 3,
        }
    }

    #[test]
    fn largest_paper_matches_table_extrema() {
        let space = presets::paper_space();
        let a = largest(&space);
        assert_eq!(a.stem_channels, 48);
        assert_eq!(a.depths(), vec![3, 3, 3, 9, 3]);
        let groups: Vec<usize> = a.stages.iter().map(|s| s[0].groups).collect();
        assert_eq!(groups, vec![1, 1, 2, 4, 8]);
        let kernels: Vec<usize> = a.stages.iter().map(|s| s[0].kernel).collect();
        assert_eq!(kernels, vec![3, 5, 5, 5, 5]);
        let chans: Vec<usize> = a.stages.iter().map(|s| s[0].channels).collect();
        assert_eq!(chans, vec![96, 192, 384, 768, 1536]);
        assert!(is_valid(&space, &a));
    }

    #[test]
    fn smallest_paper_matches_table_extrema() {
        let space = presets::paper_space();
        let a = smallest(&space);
        assert_eq!(a.stem_channels, 24);
        assert_eq!(a.depths(), vec![2, 2, 2, 8, 2]);
        let groups: Vec<usize> = a.stages.iter().map(|s| s[0].groups).collect();
        assert_eq!(groups, vec![1, 2, 4, 8, 16]);
        assert!(a.stages.iter().flatten().all(|l| l.kernel == 3));
        let chans: Vec<usize> = a.stages.iter().map(|s| s[0].channels).collect();
        assert_eq!(chans, vec![48, 96, 192, 384, 768]);
        assert!(is_valid(&space, &a));
    }

    #[test]
    fn nd_violation_is_named() {
        let space = presets::paper_space();
        let mut a = largest(&space);
        a.stages[2][1].channels = 192;
        let v = validate(&space, &a);
        assert!(
            v.iter().any(|v| v.message == "ND at stage 3, layers 1\u{2192}2"),
            "{v:?}"
        );
        // Raising layer 3 back above 192 is fine; only the drop is reported.
        assert_eq!(v.iter().filter(|v| v.kind == ViolationKind::NonDecreasing).count(), 1);
    }

    #[test]
    fn membership_violations_name_the_field() {
        let space = presets::paper_space();
        let mut a = smallest(&space);
        a.stages[0][0].kernel = 5;
        a.stages.pop();
        let v = validate(&space, &a);
        assert!(v.iter().any(|v| v.kind == ViolationKind::StageCount));
        let mut b = smallest(&space);
        b.stages[0][0].kernel = 5;
        let v = validate(&space, &b);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("kernel 5"));
    }

    #[test]
    fn singleton_space_largest_is_smallest() {
        let mut s = toy();
        s.stages[0].channel_choices = vec![16];
        assert_eq!(largest(&s), smallest(&s));
    }

    #[test]
    fn toy_cardinality_is_three() {
        assert_eq!(cardinality(&toy(), true), BigUint::from(3u32));
        assert_eq!(cardinality(&toy(), false), BigUint::from(4u32));
    }

    #[test]
    fn paper_cardinality_without_nd_is_the_product() {
        let space = presets::paper_space();
        let expected = BigUint::from(3u32)
            * BigUint::from(36u32)
            * BigUint::from(1872u32).pow(3)
            * (BigUint::from(12u32).pow(8) + BigUint::from(12u32).pow(9));
        assert_eq!(cardinality(&space, false), expected);
        assert_eq!(cardinality_product_formula(&space), expected);
        assert_eq!(sci(&expected, 2), "4.0e21");
    }

    #[test]
    fn paper_cardinality_with_nd_closed_form() {
        // Stage ranges do not overlap, so stages are independent:
        // per stage sum_d C(d+2,2) * (|K|*|G|)^d over 3 channel values.
        let space = presets::paper_space();
        let binom = |d: u32| BigUint::from((d + 2) * (d + 1) / 2);
        let stage = |ds: &[u32], kg: u32| -> BigUint { ds.iter().map(|&d| binom(d) * BigUint::from(kg).pow(d)).sum() };
        let expected = BigUint::from(3u32)
            * stage(&[2, 3], 1)
            * stage(&[2, 3], 4)
            * stage(&[2, 3], 4)
            * stage(&[8, 9], 4)
            * stage(&[2, 3], 4);
        let got = cardinality(&space, true);
        assert_eq!(got, expected);
        assert_eq!(sci(&got, 2), "3.3e17");
        let r = ratio(&got, &cardinality(&space, false));
        assert!((r - 8.4e-5).abs() < 0.1e-5, "{r}");
    }

    #[test]
    fn sampler_is_deterministic_and_valid() {
        let space = presets::paper_space();
        let a = sample_uniform_seeded(&space, 17, true).unwrap();
        let b = sample_uniform_seeded(&space, 17, true).unwrap();
        assert_eq!(a, b);
        assert!(is_valid(&space, &a));
    }

    #[test]
    fn toy_sampler_is_uniform() {
        let counter = ArchCounter::new(&toy(), true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = std::collections::HashMap::new();
        let n = 30_000;
        for _ in 0..n {
            let a = counter.sample(&mut rng).unwrap();
            *counts.entry(a.channel_sequence()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 3);
        for c in counts.values() {
            let f = *c as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn empty_space_errors() {
        let mut s = toy();
        s.stem_channel_choices = vec![32];
        assert!(cardinality(&s, true).is_zero());
        assert!(matches!(sample_uniform_seeded(&s, 1, true), Err(Error::EmptySpace)));
    }

    #[test]
    fn mutate_identity_and_full() {
        let space = presets::paper_space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = smallest(&space);
        assert_eq!(mutate(&space, &s, 0.0, &mut rng).unwrap(), s);
        let m = mutate(&space, &s, 1.0, &mut rng).unwrap();
        assert!(is_valid(&space, &m), "{:?}", validate(&space, &m));
    }

    #[test]
    fn crossover_of_identical_parents() {
        let space = presets::paper_space();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = sample_uniform(&space, &mut rng, true).unwrap();
        assert_eq!(crossover(&space, &a, &a, &mut rng).unwrap(), a);
    }

    #[test]
    fn repair_raises_channels_forward() {
        let space = presets::paper_space();
        let mut a = largest(&space);
        a.stages[3][4].channels = 384;
        repair(&space, &mut a).unwrap();
        assert_eq!(a.stages[3][4].channels, 768);
        assert!(is_valid(&space, &a));
    }

    #[test]
    fn json_schema_round_trip() {
        let space = presets::paper_space();
        let a = smallest(&space);
        let j = a.to_json();
        let v: serde_json::Value = serde_json::from_str(&j).unwrap();
        assert!(v["stages"][0]["layers"][0]["c"].is_number());
        assert_eq!(v["space_id"], "paper");
        assert_eq!(Architecture::from_json(&j).unwrap(), a);
    }

    #[test]
    fn per_group_width_diagnostic() {
        let space = presets::paper_space();
        let a = largest(&space);
        let d = channels_per_group(&a);
        assert_eq!(d[0], (1, 1, 48));
        // Stage 4 first block: 384 incoming channels over 4 groups.
        assert!(d.contains(&(4, 1, 96)));
    }

    #[test]
    fn space_check_rejects_bad_groups() {
        let mut s = presets::paper_space();
        s.stages[2].group_choices = vec![2, 5];
        let err = s.check().unwrap_err().to_string();
        assert!(err.contains("stages[2].group_choices"), "{err}");
    }

    #[test]
    fn paper_space_has_no_overlap_warnings() {
        assert!(presets::paper_space().check().unwrap().is_empty());
    }
}
