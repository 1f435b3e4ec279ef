//! Operation and parameter accounting.
//!
//! OPs = FLOPs + Int8OPs / 8 + BOPs / 64, with one multiply-accumulate
//! counted as one operation. The stem is billed as 8-bit, every block
//! convolution as binary, and the pooling plus classifier as full precision.
//! Batch-norm, RSign, RPReLU and shortcut arithmetic is reported separately
//! as `overhead_flops` and is not part of `total_ops`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::searchspace::{validate, Architecture, SearchSpace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    StemConv,
    GroupedConv,
    PointwiseConv,
    AvgPool,
    Linear,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::StemConv => "stem_conv",
            LayerKind::GroupedConv => "grouped_conv",
            LayerKind::PointwiseConv => "pointwise_conv",
            LayerKind::AvgPool => "avgpool",
            LayerKind::Linear => "linear",
        }
    }
}

/// Cost of one row of the per-layer table. `stage` 0 is the stem,
/// `stages.len() + 1` the head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub stage: usize,
    pub layer: usize,
    pub kind: LayerKind,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub g: usize,
    /// Output spatial size.
    pub h: usize,
    pub w: usize,
    pub flops: u64,
    pub int8_ops: u64,
    pub bops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub flops: u64,
    pub int8_ops: u64,
    pub bops: u64,
    /// `64 * total_ops`, exact.
    pub total_ops_x64: u128,
    /// `total_ops` rounded to the nearest integer.
    pub total_ops: u64,
    /// Elementwise work (BN, RSign, RPReLU, shortcuts) excluded from OPs.
    pub overhead_flops: u64,
}

impl CostBreakdown {
    fn from_parts(flops: u64, int8_ops: u64, bops: u64, overhead_flops: u64) -> Self {
        let x64 = 64 * flops as u128 + 8 * int8_ops as u128 + bops as u128;
        Self {
            flops,
            int8_ops,
            bops,
            total_ops_x64: x64,
            total_ops: ((x64 + 32) / 64) as u64,
            overhead_flops,
        }
    }

    /// Total OPs in millions.
    pub fn total_m(&self) -> f64 {
        self.total_ops_x64 as f64 / 64.0 / 1e6
    }

    /// Display form in millions with two decimals.
    pub fn display_m(&self) -> String {
        format!("{:.2}M", self.total_m())
    }

    /// Exact comparison against a budget given in millions of OPs.
    pub fn within_budget_m(&self, budget_m: f64) -> bool {
        // budget * 64e6 is integral for budgets with at most 6 decimals.
        let limit = (budget_m * 64.0 * 1e6).round() as u128;
        self.total_ops_x64 <= limit
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OpsReport {
    pub total: CostBreakdown,
    pub layers: Vec<LayerCost>,
}

fn conv_out(h: usize, stride: usize) -> usize {
    (h - 1) / stride + 1
}

/// Per-layer and total costs of `arch` at `input_resolution` x `input_resolution`.
pub fn count_ops(space: &SearchSpace, arch: &Architecture, input_resolution: usize) -> Result<OpsReport> {
    if let Some(v) = validate(space, arch).first() {
        return Err(Error::InvalidArch(v.to_string()));
    }
    let stride = space.total_stride();
    if input_resolution == 0 || !input_resolution.is_multiple_of(stride) {
        return Err(Error::Resolution {
            resolution: input_resolution,
            stride,
        });
    }
    let mut layers = Vec::new();
    let mut overhead = 0u64;
    let mut h = conv_out(input_resolution, space.stem_stride);
    let stem_c = arch.stem_channels;
    let sk = space.stem_kernel;
    layers.push(LayerCost {
        stage: 0,
        layer: 1,
        kind: LayerKind::StemConv,
        in_c: space.in_channels,
        out_c: stem_c,
        k: sk,
        g: 1,
        h,
        w: h,
        flops: 0,
        int8_ops: (stem_c * space.in_channels * sk * sk * h * h) as u64,
        bops: 0,
    });
    // Stem batch norm.
    overhead += (stem_c * h * h) as u64;
    let mut in_c = stem_c;
    for (s, (st, choices)) in space.stages.iter().zip(&arch.stages).enumerate() {
        for (i, l) in choices.iter().enumerate() {
            let stride = if i == 0 { st.stride } else { 1 };
            let h_in = h;
            h = conv_out(h, stride);
            let hw = (h * h) as u64;
            layers.push(LayerCost {
                stage: s + 1,
                layer: i + 1,
                kind: LayerKind::GroupedConv,
                in_c,
                out_c: in_c,
                k: l.kernel,
                g: l.groups,
                h,
                w: h,
                flops: 0,
                int8_ops: 0,
                bops: (in_c * (in_c / l.groups) * l.kernel * l.kernel) as u64 * hw,
            });
            layers.push(LayerCost {
                stage: s + 1,
                layer: i + 1,
                kind: LayerKind::PointwiseConv,
                in_c,
                out_c: l.channels,
                k: 1,
                g: 1,
                h,
                w: h,
                flops: 0,
                int8_ops: 0,
                bops: (l.channels * in_c) as u64 * hw,
            });
            // RSign on the input, then BN + shortcut add + RPReLU on the output,
            // for each of the two convolutions; the pooled shortcut on stride.
            overhead += (in_c * h_in * h_in) as u64 + 3 * in_c as u64 * hw;
            if stride > 1 {
                overhead += (in_c * h_in * h_in) as u64;
            }
            overhead += in_c as u64 * hw + 3 * l.channels as u64 * hw;
            in_c = l.channels;
        }
    }
    let head = space.stages.len() + 1;
    layers.push(LayerCost {
        stage: head,
        layer: 1,
        kind: LayerKind::AvgPool,
        in_c,
        out_c: in_c,
        k: h,
        g: 1,
        h: 1,
        w: 1,
        flops: (in_c * h * h) as u64,
        int8_ops: 0,
        bops: 0,
    });
    layers.push(LayerCost {
        stage: head,
        layer: 2,
        kind: LayerKind::Linear,
        in_c,
        out_c: space.num_classes,
        k: 1,
        g: 1,
        h: 1,
        w: 1,
        flops: (in_c * space.num_classes) as u64,
        int8_ops: 0,
        bops: 0,
    });
    let total = sum_layers(&layers, overhead);
    Ok(OpsReport { total, layers })
}

/// Totals of a list of per-layer rows.
pub fn sum_layers(layers: &[LayerCost], overhead_flops: u64) -> CostBreakdown {
    let flops = layers.iter().map(|l| l.flops).sum();
    let int8 = layers.iter().map(|l| l.int8_ops).sum();
    let bops = layers.iter().map(|l| l.bops).sum();
    CostBreakdown::from_parts(flops, int8, bops, overhead_flops)
}

/// Total OPs of the architecture at the space's own input resolution.
pub fn total_ops(space: &SearchSpace, arch: &Architecture) -> Result<CostBreakdown> {
    Ok(count_ops(space, arch, space.input_resolution)?.total)
}

pub const CSV_HEADER: &str = "stage,layer,type,in_c,out_c,k,g,H,W,flops,int8_ops,bops";

pub fn layers_csv(report: &OpsReport) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for l in &report.layers {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            l.stage,
            l.layer,
            l.kind.as_str(),
            l.in_c,
            l.out_c,
            l.k,
            l.g,
            l.h,
            l.w,
            l.flops,
            l.int8_ops,
            l.bops
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// 1-bit block convolution weights.
    pub binary_params: u64,
    /// 8-bit stem weights.
    pub int8_params: u64,
    /// 32-bit parameters: BN affine, RSign thresholds, RPReLU, classifier.
    pub fp_params: u64,
    pub model_size_bytes: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.binary_params + self.int8_params + self.fp_params
    }
}

/// Deployment parameter count of `arch`.
pub fn count_params(space: &SearchSpace, arch: &Architecture) -> ParamCount {
    let sk = space.stem_kernel;
    let stem = arch.stem_channels as u64;
    let int8 = stem * (space.in_channels * sk * sk) as u64;
    // Stem BN.
    let mut fp = 2 * stem;
    let mut binary = 0u64;
    let mut in_c = arch.stem_channels as u64;
    for l in arch.stages.iter().flatten() {
        let (c, k, g) = (l.channels as u64, l.kernel as u64, l.groups as u64);
        binary += in_c * (in_c / g) * k * k + c * in_c;
        // RSign + BN + RPReLU for each conv.
        fp += in_c + 2 * in_c + 3 * in_c;
        fp += in_c + 2 * c + 3 * c;
        in_c = c;
    }
    fp += in_c * space.num_classes as u64 + space.num_classes as u64;
    let bits = binary + 8 * int8 + 32 * fp;
    ParamCount {
        binary_params: binary,
        int8_params: int8,
        fp_params: fp,
        model_size_bytes: bits.div_ceil(8),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::searchspace::{largest, smallest, LayerChoice, StageSpec};

    fn one_layer_space(c_in: usize, c: usize, k: usize, res: usize) -> SearchSpace {
        SearchSpace {
            id: "one".into(),
            stem_channel_choices: vec![c_in],
            stem_kernel: 3,
            stem_stride: 1,
            stages: vec![StageSpec {
                depth_choices: vec![1],
                channel_choices: vec![c],
                kernel_choices: vec![k],
                group_choices: vec![1],
                stride: 1,
            }],
            input_resolution: res,
            num_classes: 10,
            in_channels: 3,
        }
    }

    #[test]
    fn pointwise_conv_bops() {
        let sp = one_layer_space(64, 64, 1, 56);
        let r = count_ops(&sp, &largest(&sp), 56).unwrap();
        let pw = r.layers.iter().find(|l| l.kind == LayerKind::PointwiseConv).unwrap();
        assert_eq!(pw.bops, 12_845_056);
        assert_eq!(pw.bops / 64, 200_704);
    }

    #[test]
    fn total_is_exact_rational() {
        let sp = presets::paper_space();
        let t = total_ops(&sp, &smallest(&sp)).unwrap();
        assert_eq!(
            t.total_ops_x64,
            64 * t.flops as u128 + 8 * t.int8_ops as u128 + t.bops as u128
        );
        let r = count_ops(&sp, &smallest(&sp), 224).unwrap();
        assert_eq!(sum_layers(&r.layers, t.overhead_flops), t);
    }

    #[test]
    fn binary_conv_param_bytes() {
        // One 3x3 grouped conv at 48 -> 48 contributes 48*48*9 one-bit weights.
        let sp = one_layer_space(48, 48, 3, 8);
        let p = count_params(&sp, &largest(&sp));
        assert_eq!(p.binary_params, 48 * 48 * 9 + 48 * 48);
        assert_eq!(48 * 48 * 9 / 8, 2_592);
    }

    #[test]
    fn empty_stage_list_counts_stem_and_head() {
        let mut sp = one_layer_space(8, 8, 1, 8);
        sp.stages.clear();
        let a = largest(&sp);
        let p = count_params(&sp, &a);
        assert_eq!(p.binary_params, 0);
        assert_eq!(p.int8_params, 8 * 27);
        assert_eq!(p.fp_params, 16 + 8 * 10 + 10);
        let r = count_ops(&sp, &a, 8).unwrap();
        assert_eq!(r.total.bops, 0);
    }

    #[test]
    fn incompatible_resolution_errors() {
        let sp = presets::paper_space();
        assert!(matches!(
            count_ops(&sp, &smallest(&sp), 100),
            Err(Error::Resolution { .. })
        ));
    }

    #[test]
    fn wider_kernel_never_cheaper() {
        let sp = presets::paper_space();
        let a = smallest(&sp);
        let base = total_ops(&sp, &a).unwrap();
        let mut b = a.clone();
        b.stages[2][0] = LayerChoice::new(192, 5, 4);
        assert!(total_ops(&sp, &b).unwrap().total_ops_x64 > base.total_ops_x64);
    }

    #[test]
    fn budget_comparison() {
        let sp = presets::paper_space();
        let t = total_ops(&sp, &smallest(&sp)).unwrap();
        assert!(t.within_budget_m(t.total_m() + 0.01));
        assert!(!t.within_budget_m(t.total_m() - 0.01));
    }
}
