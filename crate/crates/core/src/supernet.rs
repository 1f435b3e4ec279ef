//! Weight-sharing supernet over a [`SearchSpace`].
//!
//! Every tensor is stored at its largest size. A sub-network uses the first
//! `c` filters and input channels, the centered `k x k` crop of each kernel,
//! the top-left `k^2 x k^2` block of the layer's Bi-Transformation matrix,
//! and the first `d` blocks of each stage.
//!
//! Group slicing: with `g_min` the smallest group choice of a layer, the
//! stored weight is `[out, in / g_min, K, K]`. Filter `o` of an active layer
//! with `g` groups belongs to group `b = o / (out / g)` and reads the stored
//! input slots `(b mod (g / g_min)) * (in / g) ..` of its own row, so the
//! active weight is a block-diagonal slice of the dense one. At `g == g_min`
//! the slice is the whole stored row.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binops::{weight_path_backward, weight_path_forward, BiTransform, WeightPathCache, WeightPathConfig};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, BnMode, Lsq, Param, ParamKind, RPReLU, RSign};
use crate::searchspace::{self, largest, Architecture, LayerChoice, SearchSpace, StageSpec};
use crate::tensor::{self, ConvGeom, Tensor};

/// Numeric domain of weights and activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecMode {
    /// Full-precision weights, binary activations.
    Fwba,
    /// Binary weights and activations.
    Bwba,
    /// Full-precision weights and activations.
    Fwfa,
}

impl ExecMode {
    pub fn binary_weights(&self) -> bool {
        matches!(self, ExecMode::Bwba)
    }
    pub fn binary_acts(&self) -> bool {
        !matches!(self, ExecMode::Fwfa)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub weight_path: WeightPathConfig,
    /// 8-bit fake quantization of the stem input and weight.
    pub stem_int8: bool,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            weight_path: WeightPathConfig::default(),
            stem_int8: true,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct UnitShape {
    in_c: usize,
    out_c: usize,
    k: usize,
    g: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
struct UnitCache {
    x_shape: Vec<usize>,
    input: Tensor,
    w_eff: Tensor,
    wcache: WeightPathCache,
    geom: ConvGeom,
    shape: UnitShape,
    binary_acts: bool,
}

/// One binary convolution with its sign activation, batch norm, shortcut and
/// RPReLU: `y = rprelu(bn(conv(rsign(x))) + shortcut(x))`.
#[derive(Clone, Debug)]
struct Unit {
    pointwise: bool,
    k_max: usize,
    g_min: usize,
    in_max: usize,
    weight: Param,
    theta: Param,
    rsign: RSign,
    bn: BatchNorm,
    act: RPReLU,
    cache: Option<UnitCache>,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let a = (3.0 / fan_in as f32).sqrt();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-a..a)).collect()).unwrap()
}

fn identity_theta(k: usize) -> Tensor {
    let bt = BiTransform::identity(k);
    Tensor::from_vec(&[bt.side, bt.side], bt.theta).unwrap()
}

impl Unit {
    fn new(
        name: &str,
        pointwise: bool,
        in_max: usize,
        out_max: usize,
        k_max: usize,
        g_min: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let per = in_max / g_min;
        let shape = [out_max, per, k_max, k_max];
        Self {
            pointwise,
            k_max,
            g_min,
            in_max,
            weight: Param::new(
                format!("{name}.weight"),
                ParamKind::Weight,
                uniform_init(rng, &shape, per * k_max * k_max),
            ),
            theta: Param::new(format!("{name}.theta"), ParamKind::Theta, identity_theta(k_max)),
            rsign: RSign::new(&format!("{name}.rsign"), in_max),
            bn: BatchNorm::new(&format!("{name}.bn"), out_max),
            act: RPReLU::new(&format!("{name}.rprelu"), out_max),
            cache: None,
        }
    }

    /// Stored index of active element `(o, t, ky, kx)`.
    fn index_map(&self, s: UnitShape) -> impl Iterator<Item = usize> + '_ {
        let stored_in = self.in_max / self.g_min;
        let big_k = self.k_max;
        let off = (big_k - s.k) / 2;
        let icg = s.in_c / s.g;
        let ocg = s.out_c / s.g;
        let r = s.g / self.g_min;
        (0..s.out_c).flat_map(move |o| {
            let base = ((o / ocg) % r) * icg;
            (0..icg).flat_map(move |t| {
                (0..s.k).flat_map(move |ky| {
                    (0..s.k).map(move |kx| ((o * stored_in + base + t) * big_k + off + ky) * big_k + off + kx)
                })
            })
        })
    }

    fn gather(&self, s: UnitShape) -> Vec<f32> {
        let w = self.weight.value.data();
        self.index_map(s).map(|i| w[i]).collect()
    }

    fn theta_transform(&self) -> BiTransform {
        BiTransform {
            side: self.k_max * self.k_max,
            theta: self.theta.value.data().to_vec(),
        }
    }

    fn forward(
        &mut self,
        x: &Tensor,
        s: UnitShape,
        mode: ExecMode,
        bn_mode: BnMode,
        cfg: &WeightPathConfig,
    ) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4();
        if c != s.in_c {
            return Err(Error::Shape(format!("unit expects {} input channels, got {c}", s.in_c)));
        }
        if s.out_c < s.in_c {
            return Err(Error::Shape(format!(
                "decreasing width {} -> {} has no lossless shortcut",
                s.in_c, s.out_c
            )));
        }
        let input = if mode.binary_acts() {
            self.rsign.forward(x)
        } else {
            x.clone()
        };
        let raw = self.gather(s);
        let theta = self.theta_transform();
        let (eff, wcache) = weight_path_forward(&raw, s.out_c, s.k, &theta, mode.binary_weights(), cfg);
        let w_eff = Tensor::from_vec(&[s.out_c, s.in_c / s.g, s.k, s.k], eff)?;
        let geom = ConvGeom {
            in_c: s.in_c,
            out_c: s.out_c,
            k: s.k,
            groups: s.g,
            stride: s.stride,
            h,
            w,
        };
        let y = tensor::conv2d(&input, &w_eff, &geom)?;
        let mut z = self.bn.forward(&y, bn_mode);
        if self.pointwise {
            add_tiled(&mut z, x);
        } else if s.stride > 1 {
            z.add_assign(&tensor::avg_pool(x, s.stride));
        } else {
            z.add_assign(x);
        }
        let out = self.act.forward(&z);
        self.cache = Some(UnitCache {
            x_shape: x.shape().to_vec(),
            input,
            w_eff,
            wcache,
            geom,
            shape: s,
            binary_acts: mode.binary_acts(),
        });
        Ok(out)
    }

    fn backward(&mut self, dout: &Tensor, learn_binarizer: bool, cfg: &WeightPathConfig) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("unit backward before forward".into()))?;
        let s = cache.shape;
        let du = self.act.backward(dout, learn_binarizer);
        let dy = self.bn.backward(&du);
        let (dinput, dw_eff) = tensor::conv2d_backward(&cache.input, &cache.w_eff, &dy, &cache.geom, true)?;
        let theta = self.theta_transform();
        let (d_raw, d_theta) = weight_path_backward(&cache.wcache, &theta, dw_eff.data(), cfg);
        {
            let idx: Vec<usize> = self.index_map(s).collect();
            let g = self.weight.grad.data_mut();
            for (i, d) in idx.into_iter().zip(d_raw) {
                g[i] += d;
            }
        }
        if let Some(dt) = d_theta {
            self.theta.grad.data_mut().iter_mut().zip(dt).for_each(|(a, b)| *a += b);
        }
        let dinput = dinput.expect("dx requested");
        let mut dx = if cache.binary_acts {
            self.rsign.backward(&dinput, learn_binarizer)
        } else {
            dinput
        };
        let (n, c, _, _) = (cache.x_shape[0], cache.x_shape[1], 0, 0);
        if self.pointwise {
            let (_, _, oh, ow) = du.dims4();
            let plane = oh * ow;
            let dxd = dx.data_mut();
            for b in 0..n {
                for j in 0..s.out_c {
                    let src = &du.data()[(b * s.out_c + j) * plane..(b * s.out_c + j + 1) * plane];
                    let dst = &mut dxd[(b * c + j % c) * plane..(b * c + j % c + 1) * plane];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                }
            }
        } else if s.stride > 1 {
            dx.add_assign(&tensor::avg_pool_backward(&du, s.stride, &cache.x_shape));
        } else {
            dx.add_assign(&du);
        }
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let [g, b] = self.bn.params_mut();
        let [ag, ab, az] = self.act.params_mut();
        vec![
            &mut self.weight,
            &mut self.theta,
            &mut self.rsign.threshold,
            g,
            b,
            ag,
            ab,
            az,
        ]
    }

    fn params(&self) -> Vec<&Param> {
        vec![
            &self.weight,
            &self.theta,
            &self.rsign.threshold,
            &self.bn.gamma,
            &self.bn.beta,
            &self.act.gamma,
            &self.act.beta,
            &self.act.zeta,
        ]
    }
}

#[derive(Clone, Debug)]
struct Block {
    grouped: Unit,
    pointwise: Unit,
}

#[derive(Clone, Debug)]
struct Stem {
    weight: Param,
    bn: BatchNorm,
    wq: Lsq,
    xq: Lsq,
    k: usize,
    stride: usize,
    cache: Option<(Tensor, Tensor, ConvGeom)>,
}

#[derive(Clone, Debug)]
struct Head {
    weight: Param,
    bias: Param,
    cache: Option<(Tensor, Tensor, Vec<usize>)>,
}

/// Shared-weight network covering every architecture of a space.
#[derive(Clone, Debug)]
pub struct Supernet {
    space: SearchSpace,
    cfg: NetConfig,
    stem: Stem,
    stages: Vec<Vec<Block>>,
    head: Head,
    active: Option<Architecture>,
    int8_pass: bool,
}

impl Supernet {
    pub fn build(space: &SearchSpace, cfg: NetConfig) -> Result<Self> {
        space.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let stem_max = *space.stem_channel_choices.last().unwrap();
        let ks = space.stem_kernel;
        let stem_w = uniform_init(
            &mut rng,
            &[stem_max, space.in_channels, ks, ks],
            space.in_channels * ks * ks,
        );
        let stem = Stem {
            wq: Lsq::init_for("stem.wq", stem_w.data()),
            // Inputs are normalized; the 8-bit grid spans about +-4.
            xq: Lsq::new("stem.xq", 4.0 / crate::nn::LSQ_QP),
            weight: Param::new("stem.weight", ParamKind::Weight, stem_w),
            bn: BatchNorm::new("stem.bn", stem_max),
            k: ks,
            stride: space.stem_stride,
            cache: None,
        };
        let mut prev = stem_max;
        let mut stages = Vec::new();
        for (s, st) in space.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..st.max_depth() {
                let name = format!("stage{}.block{}", s + 1, j + 1);
                let in_max = if j == 0 { prev } else { st.max_channels() };
                let grouped = Unit::new(
                    &format!("{name}.grouped"),
                    false,
                    in_max,
                    in_max,
                    st.max_kernel(),
                    st.min_groups(),
                    &mut rng,
                );
                let pointwise = Unit::new(
                    &format!("{name}.pointwise"),
                    true,
                    in_max,
                    st.max_channels(),
                    1,
                    1,
                    &mut rng,
                );
                blocks.push(Block { grouped, pointwise });
            }
            prev = st.max_channels();
            stages.push(blocks);
        }
        let head = Head {
            weight: Param::new(
                "head.weight",
                ParamKind::Weight,
                uniform_init(&mut rng, &[space.num_classes, prev], prev),
            ),
            bias: Param::new("head.bias", ParamKind::Weight, Tensor::zeros(&[space.num_classes])),
            cache: None,
        };
        Ok(Self {
            space: space.clone(),
            cfg,
            stem,
            stages,
            head,
            active: None,
            int8_pass: false,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn set_weight_path(&mut self, wp: WeightPathConfig) {
        self.cfg.weight_path = wp;
    }

    /// Selects the sub-network used by subsequent forward passes.
    pub fn activate(&mut self, arch: &Architecture) -> Result<()> {
        let v = searchspace::validate(&self.space, arch);
        if let Some(first) = v.first() {
            return Err(Error::InvalidArch(first.message.clone()));
        }
        self.active = Some(arch.clone());
        Ok(())
    }

    pub fn active(&self) -> Option<&Architecture> {
        self.active.as_ref()
    }

    fn shapes(&self, arch: &Architecture) -> Vec<Vec<(UnitShape, UnitShape)>> {
        let mut prev = arch.stem_channels;
        arch.stages
            .iter()
            .zip(&self.space.stages)
            .map(|(layers, st)| {
                layers
                    .iter()
                    .enumerate()
                    .map(|(j, l)| {
                        let a = UnitShape {
                            in_c: prev,
                            out_c: prev,
                            k: l.kernel,
                            g: l.groups,
                            stride: if j == 0 { st.stride } else { 1 },
                        };
                        let b = UnitShape {
                            in_c: prev,
                            out_c: l.channels,
                            k: 1,
                            g: 1,
                            stride: 1,
                        };
                        prev = l.channels;
                        (a, b)
                    })
                    .collect()
            })
            .collect()
    }

    /// Logits `[n, classes]` of the active sub-network.
    pub fn forward(&mut self, x: &Tensor, mode: ExecMode, bn_mode: BnMode) -> Result<Tensor> {
        let arch = self.active.clone().ok_or(Error::NoActiveSubnet)?;
        let (n, c, h, w) = x.dims4();
        if c != self.space.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.space.in_channels
            )));
        }
        let cfg = self.cfg.weight_path;
        // Stem.
        let sc = arch.stem_channels;
        let ks = self.stem.k;
        let per_filter = c * ks * ks;
        let mut w_stem = self.stem.weight.value.data()[..sc * per_filter].to_vec();
        let mut x_in = x.clone();
        self.int8_pass = self.cfg.stem_int8;
        if self.int8_pass {
            w_stem = self.stem.wq.forward(&w_stem);
            x_in = Tensor::from_vec(x.shape(), self.stem.xq.forward(x.data()))?;
        }
        let w_stem = Tensor::from_vec(&[sc, c, ks, ks], w_stem)?;
        let geom = ConvGeom {
            in_c: c,
            out_c: sc,
            k: ks,
            groups: 1,
            stride: self.stem.stride,
            h,
            w,
        };
        let y = tensor::conv2d(&x_in, &w_stem, &geom)?;
        let mut cur = self.stem.bn.forward(&y, bn_mode);
        self.stem.cache = Some((x_in, w_stem, geom));
        // Stages.
        let shapes = self.shapes(&arch);
        for (blocks, sh) in self.stages.iter_mut().zip(&shapes) {
            for (block, &(a, b)) in blocks.iter_mut().zip(sh) {
                cur = block.grouped.forward(&cur, a, mode, bn_mode, &cfg)?;
                cur = block.pointwise.forward(&cur, b, mode, bn_mode, &cfg)?;
            }
        }
        // Head.
        let feat_shape = cur.shape().to_vec();
        let pooled = tensor::global_avg_pool(&cur);
        let cl = pooled.shape()[1];
        let classes = self.space.num_classes;
        let full = self.head.weight.value.shape()[1];
        let mut wh = Vec::with_capacity(classes * cl);
        for j in 0..classes {
            wh.extend_from_slice(&self.head.weight.value.data()[j * full..j * full + cl]);
        }
        let wh = Tensor::from_vec(&[classes, cl], wh)?;
        let logits = tensor::linear(&pooled, &wh, self.head.bias.value.data());
        self.head.cache = Some((pooled, wh, feat_shape));
        debug_assert_eq!(logits.shape(), &[n, classes]);
        Ok(logits)
    }

    /// Backpropagates `dlogits` through the last forward pass, accumulating
    /// parameter gradients. RSign and RPReLU parameters only accumulate when
    /// `learn_binarizer` is set.
    pub fn backward(&mut self, dlogits: &Tensor, learn_binarizer: bool) -> Result<()> {
        let cfg = self.cfg.weight_path;
        let (pooled, wh, feat_shape) = self
            .head
            .cache
            .take()
            .ok_or_else(|| Error::Shape("backward before forward".into()))?;
        let (dpooled, dw, db) = tensor::linear_backward(&pooled, &wh, dlogits);
        let cl = pooled.shape()[1];
        let full = self.head.weight.value.shape()[1];
        {
            let g = self.head.weight.grad.data_mut();
            for j in 0..self.space.num_classes {
                for i in 0..cl {
                    g[j * full + i] += dw.data()[j * cl + i];
                }
            }
            self.head
                .bias
                .grad
                .data_mut()
                .iter_mut()
                .zip(db)
                .for_each(|(a, b)| *a += b);
        }
        let mut d = tensor::global_avg_pool_backward(&dpooled, &feat_shape);
        let depths = self.active.as_ref().ok_or(Error::NoActiveSubnet)?.depths();
        for (blocks, &dep) in self.stages.iter_mut().zip(&depths).rev() {
            for block in blocks[..dep].iter_mut().rev() {
                d = block.pointwise.backward(&d, learn_binarizer, &cfg)?;
                d = block.grouped.backward(&d, learn_binarizer, &cfg)?;
            }
        }
        let dy = self.stem.bn.backward(&d);
        let (x_in, w_stem, geom) = self
            .stem
            .cache
            .take()
            .ok_or_else(|| Error::Shape("stem cache".into()))?;
        let (dx, dw) = tensor::conv2d_backward(&x_in, &w_stem, &dy, &geom, self.int8_pass)?;
        let dw = if self.int8_pass {
            self.stem.xq.backward(dx.expect("dx requested").data());
            self.stem.wq.backward(dw.data())
        } else {
            dw.into_data()
        };
        self.stem
            .weight
            .grad
            .data_mut()
            .iter_mut()
            .zip(dw)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Every trainable parameter in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        out.push(&mut self.stem.weight);
        let [g, b] = self.stem.bn.params_mut();
        out.push(g);
        out.push(b);
        out.push(&mut self.stem.wq.step);
        out.push(&mut self.stem.xq.step);
        for blocks in &mut self.stages {
            for block in blocks {
                out.extend(block.grouped.params_mut());
                out.extend(block.pointwise.params_mut());
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = vec![
            &self.stem.weight,
            &self.stem.bn.gamma,
            &self.stem.bn.beta,
            &self.stem.wq.step,
            &self.stem.xq.step,
        ];
        for blocks in &self.stages {
            for block in blocks {
                out.extend(block.grouped.params());
                out.extend(block.pointwise.params());
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out = vec![&mut self.stem.bn];
        for blocks in &mut self.stages {
            for block in blocks {
                out.push(&mut block.grouped.bn);
                out.push(&mut block.pointwise.bn);
            }
        }
        out
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut out = vec![&self.stem.bn];
        for blocks in &self.stages {
            for block in blocks {
                out.push(&block.grouped.bn);
                out.push(&block.pointwise.bn);
            }
        }
        out
    }

    /// Running statistics of every batch norm.
    pub fn bn_snapshot(&self) -> Vec<(Tensor, Tensor)> {
        self.batch_norms()
            .into_iter()
            .map(|b| (b.running_mean.clone(), b.running_var.clone()))
            .collect()
    }

    pub fn restore_bn(&mut self, snap: &[(Tensor, Tensor)]) {
        for (b, (m, v)) in self.batch_norms_mut().into_iter().zip(snap) {
            b.running_mean = m.clone();
            b.running_var = v.clone();
        }
    }

    pub fn begin_calibration(&mut self) {
        for b in self.batch_norms_mut() {
            b.begin_calibration();
        }
    }

    /// Parameters and running statistics by name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
        for b in self.batch_norms() {
            let base = b.gamma.name.trim_end_matches(".gamma").to_string();
            out.push((format!("{base}.running_mean"), &b.running_mean));
            out.push((format!("{base}.running_var"), &b.running_var));
        }
        out
    }

    /// Loads tensors by name; every tensor must be present with its shape.
    pub fn load_tensors(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let fetch = |name: &str, cur: &Tensor| -> Result<Tensor> {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != cur.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
            Ok(t.clone())
        };
        for p in self.params_mut() {
            p.value = fetch(&p.name, &p.value)?;
        }
        for b in self.batch_norms_mut() {
            let base = b.gamma.name.trim_end_matches(".gamma").to_string();
            b.running_mean = fetch(&format!("{base}.running_mean"), &b.running_mean)?;
            b.running_var = fetch(&format!("{base}.running_var"), &b.running_var)?;
        }
        Ok(())
    }

    /// Element count of trainable parameters per kind.
    pub fn param_count(&self, kind: ParamKind) -> usize {
        self.params()
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Total element count of the shared binary convolution weights.
    pub fn binary_weight_count(&self) -> usize {
        self.stages
            .iter()
            .flatten()
            .map(|b| b.grouped.weight.value.numel() + b.pointwise.weight.value.numel())
            .sum()
    }

    /// Standalone network holding the weights `arch` uses in this supernet.
    pub fn extract(&self, arch: &Architecture) -> Result<Subnet> {
        let v = searchspace::validate(&self.space, arch);
        if let Some(first) = v.first() {
            return Err(Error::InvalidArch(first.message.clone()));
        }
        let pinned = pinned_space(&self.space, arch);
        let mut net = Supernet::build(&pinned, self.cfg)?;
        let shapes = self.shapes(arch);
        let sc = arch.stem_channels;
        let per = self.stem.weight.value.numel() / self.stem.weight.value.shape()[0];
        net.stem.weight.value = Tensor::from_vec(
            net.stem.weight.value.shape(),
            self.stem.weight.value.data()[..sc * per].to_vec(),
        )?;
        copy_bn(&self.stem.bn, &mut net.stem.bn);
        net.stem.wq.step.value = self.stem.wq.step.value.clone();
        net.stem.xq.step.value = self.stem.xq.step.value.clone();
        let mut dst_blocks = net.stages.iter_mut().flatten();
        for (blocks, sh) in self.stages.iter().zip(&shapes) {
            for (block, &(a, b)) in blocks.iter().zip(sh) {
                let dst = dst_blocks.next().expect("pinned space has one stage per layer");
                copy_unit(&block.grouped, a, &mut dst.grouped)?;
                copy_unit(&block.pointwise, b, &mut dst.pointwise)?;
            }
        }
        let cl = arch.output_channels();
        let full = self.head.weight.value.shape()[1];
        let mut wh = Vec::new();
        for j in 0..self.space.num_classes {
            wh.extend_from_slice(&self.head.weight.value.data()[j * full..j * full + cl]);
        }
        net.head.weight.value = Tensor::from_vec(&[self.space.num_classes, cl], wh)?;
        net.head.bias.value = self.head.bias.value.clone();
        let pinned_arch = largest(&pinned);
        net.activate(&pinned_arch)?;
        Ok(Subnet {
            source_space: self.space.clone(),
            arch: arch.clone(),
            net,
        })
    }
}

fn copy_bn(src: &BatchNorm, dst: &mut BatchNorm) {
    let c = dst.gamma.value.numel();
    dst.gamma.value = Tensor::from_vec(&[c], src.gamma.value.data()[..c].to_vec()).unwrap();
    dst.beta.value = Tensor::from_vec(&[c], src.beta.value.data()[..c].to_vec()).unwrap();
    dst.running_mean = Tensor::from_vec(&[c], src.running_mean.data()[..c].to_vec()).unwrap();
    dst.running_var = Tensor::from_vec(&[c], src.running_var.data()[..c].to_vec()).unwrap();
}

fn prefix(src: &Param, n: usize) -> Tensor {
    Tensor::from_vec(&[n], src.value.data()[..n].to_vec()).unwrap()
}

fn copy_unit(src: &Unit, s: UnitShape, dst: &mut Unit) -> Result<()> {
    dst.weight.value = Tensor::from_vec(dst.weight.value.shape(), src.gather(s))?;
    let full = src.theta_transform().sub_block(s.k);
    dst.theta.value = Tensor::from_vec(&[full.side, full.side], full.theta)?;
    dst.rsign.threshold.value = prefix(&src.rsign.threshold, s.in_c);
    copy_bn(&src.bn, &mut dst.bn);
    dst.act.gamma.value = prefix(&src.act.gamma, s.out_c);
    dst.act.beta.value = prefix(&src.act.beta, s.out_c);
    dst.act.zeta.value = prefix(&src.act.zeta, s.out_c);
    Ok(())
}

/// Singleton space whose only member is `arch`, one stage per layer.
pub fn pinned_space(space: &SearchSpace, arch: &Architecture) -> SearchSpace {
    let mut stages = Vec::new();
    for (layers, st) in arch.stages.iter().zip(&space.stages) {
        for (j, l) in layers.iter().enumerate() {
            stages.push(StageSpec {
                depth_choices: vec![1],
                channel_choices: vec![l.channels],
                kernel_choices: vec![l.kernel],
                group_choices: vec![l.groups],
                stride: if j == 0 { st.stride } else { 1 },
            });
        }
    }
    SearchSpace {
        id: format!("{}/pinned-{:016x}", space.id, arch.digest()),
        stem_channel_choices: vec![arch.stem_channels],
        stem_kernel: space.stem_kernel,
        stem_stride: space.stem_stride,
        stages,
        input_resolution: space.input_resolution,
        num_classes: space.num_classes,
        in_channels: space.in_channels,
    }
}

/// A single architecture with its own copy of the inherited weights.
#[derive(Clone, Debug)]
pub struct Subnet {
    pub source_space: SearchSpace,
    pub arch: Architecture,
    pub net: Supernet,
}

impl Subnet {
    pub fn forward(&mut self, x: &Tensor, mode: ExecMode, bn_mode: BnMode) -> Result<Tensor> {
        self.net.forward(x, mode, bn_mode)
    }

    /// Deployable parameter count: convolution and classifier weights plus
    /// per-channel affine parameters. Running statistics, Bi-Transformation
    /// matrices and quantizer steps are excluded.
    pub fn deploy_param_count(&self) -> usize {
        self.net
            .params()
            .iter()
            .filter(|p| matches!(p.kind, ParamKind::Weight | ParamKind::BatchNorm | ParamKind::Binarizer))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn layer_choices(&self) -> Vec<LayerChoice> {
        self.arch.stages.iter().flatten().copied().collect()
    }
}

/// Adds `x` to `z` with channel `j` of `z` receiving channel `j % c_in` of `x`.
fn add_tiled(z: &mut Tensor, x: &Tensor) {
    let (n, c, h, w) = x.dims4();
    let out_c = z.shape()[1];
    let plane = h * w;
    let zd = z.data_mut();
    for b in 0..n {
        for j in 0..out_c {
            let src = &x.data()[(b * c + j % c) * plane..(b * c + j % c + 1) * plane];
            let dst = &mut zd[(b * out_c + j) * plane..(b * out_c + j + 1) * plane];
            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiled_shortcut_repeats_input_channels() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut z = Tensor::zeros(&[1, 4, 1, 2]);
        add_tiled(&mut z, &x);
        assert_eq!(z.data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }
    use crate::costmodel::count_params;
    use crate::presets::tiny_space;
    use crate::searchspace::{sample_uniform_seeded, smallest};

    fn input(n: usize, space: &SearchSpace, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = space.input_resolution;
        let len = n * space.in_channels * r * r;
        Tensor::from_vec(
            &[n, space.in_channels, r, r],
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn group_slicing_is_block_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut u = Unit::new("u", true, 4, 4, 1, 1, &mut rng);
        u.weight.value = Tensor::from_vec(&[4, 4, 1, 1], (0..16).map(|i| i as f32).collect()).unwrap();
        let s = UnitShape {
            in_c: 4,
            out_c: 4,
            k: 1,
            g: 2,
            stride: 1,
        };
        assert_eq!(u.gather(s), vec![0.0, 1.0, 4.0, 5.0, 10.0, 11.0, 14.0, 15.0]);
        let s1 = UnitShape { g: 1, ..s };
        assert_eq!(u.gather(s1), (0..16).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn kernel_slicing_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut u = Unit::new("u", false, 1, 1, 5, 1, &mut rng);
        u.weight.value = Tensor::from_vec(&[1, 1, 5, 5], (0..25).map(|i| i as f32).collect()).unwrap();
        let s = UnitShape {
            in_c: 1,
            out_c: 1,
            k: 3,
            g: 1,
            stride: 1,
        };
        assert_eq!(u.gather(s), vec![6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]);
    }

    #[test]
    fn largest_uses_all_binary_weights() {
        let space = tiny_space();
        let net = Supernet::build(&space, NetConfig::default()).unwrap();
        let pc = count_params(&space, &largest(&space));
        assert_eq!(net.binary_weight_count() as u64, pc.binary_params);
    }

    #[test]
    fn forward_shapes_and_no_active_error() {
        let space = tiny_space();
        let mut net = Supernet::build(&space, NetConfig::default()).unwrap();
        let x = input(2, &space, 1);
        assert!(matches!(
            net.forward(&x, ExecMode::Bwba, BnMode::Train),
            Err(Error::NoActiveSubnet)
        ));
        for arch in [
            largest(&space),
            smallest(&space),
            sample_uniform_seeded(&space, 3, true).unwrap(),
        ] {
            net.activate(&arch).unwrap();
            for mode in [ExecMode::Fwba, ExecMode::Bwba, ExecMode::Fwfa] {
                let y = net.forward(&x, mode, BnMode::Train).unwrap();
                assert_eq!(y.shape(), &[2, space.num_classes]);
                assert!(y.is_finite());
            }
        }
    }

    #[test]
    fn extracted_subnet_matches_supernet_bitwise() {
        let space = tiny_space();
        let mut net = Supernet::build(&space, NetConfig::default()).unwrap();
        let x = input(3, &space, 2);
        // Move running stats away from their defaults.
        net.activate(&largest(&space)).unwrap();
        net.forward(&x, ExecMode::Bwba, BnMode::Train).unwrap();
        for seed in 0..4 {
            let arch = sample_uniform_seeded(&space, seed, true).unwrap();
            net.activate(&arch).unwrap();
            let mut sub = net.extract(&arch).unwrap();
            for mode in [ExecMode::Bwba, ExecMode::Fwba] {
                let a = net.forward(&x, mode, BnMode::Eval).unwrap();
                let b = sub.forward(&x, mode, BnMode::Eval).unwrap();
                assert_eq!(a.data(), b.data());
            }
            let pc = count_params(&space, &arch);
            assert_eq!(sub.deploy_param_count() as u64, pc.total());
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences_in_fp_mode() {
        let space = tiny_space();
        let cfg = NetConfig {
            stem_int8: false,
            ..NetConfig::default()
        };
        let mut net = Supernet::build(&space, cfg).unwrap();
        let arch = sample_uniform_seeded(&space, 5, true).unwrap();
        net.activate(&arch).unwrap();
        let x = input(2, &space, 7);
        let probe = input(2, &space, 8);
        let classes = space.num_classes;
        let wts: Vec<f32> = (0..2 * classes).map(|i| ((i * 7) % 5) as f32 - 2.0).collect();
        let dl = Tensor::from_vec(&[2, classes], wts.clone()).unwrap();
        let loss = |net: &mut Supernet, x: &Tensor| -> f64 {
            let y = net.forward(x, ExecMode::Fwfa, BnMode::Train).unwrap();
            y.data().iter().zip(&wts).map(|(a, b)| (*a * *b) as f64).sum()
        };
        // Directional derivative w.r.t. the head bias and stem weight.
        net.zero_grad();
        net.forward(&x, ExecMode::Fwfa, BnMode::Train).unwrap();
        net.backward(&dl, true).unwrap();
        let analytic: f64 = net
            .stem
            .weight
            .grad
            .data()
            .iter()
            .zip(probe.data())
            .map(|(g, p)| (*g * *p) as f64)
            .sum();
        let eps = 1e-3f32;
        let base = net.stem.weight.value.clone();
        let shift = |net: &mut Supernet, sgn: f32| {
            let mut w = base.clone();
            w.data_mut()
                .iter_mut()
                .zip(probe.data())
                .for_each(|(a, p)| *a += sgn * eps * p);
            net.stem.weight.value = w;
        };
        shift(&mut net, 1.0);
        let lp = loss(&mut net, &x);
        shift(&mut net, -1.0);
        let lm = loss(&mut net, &x);
        let fd = (lp - lm) / (2.0 * eps as f64);
        assert!(
            (fd - analytic).abs() < 5e-2 * (1.0 + analytic.abs()),
            "fd {fd} analytic {analytic}"
        );
    }

    #[test]
    fn teacher_pass_leaves_binarizer_grads_zero() {
        let space = tiny_space();
        let mut net = Supernet::build(&space, NetConfig::default()).unwrap();
        net.activate(&largest(&space)).unwrap();
        let x = input(2, &space, 3);
        let y = net.forward(&x, ExecMode::Fwba, BnMode::Train).unwrap();
        net.zero_grad();
        net.backward(&y.map(|v| v * 0.1), false).unwrap();
        for p in net.params() {
            if matches!(p.kind, ParamKind::Binarizer | ParamKind::Theta) {
                assert!(p.grad.data().iter().all(|&g| g == 0.0), "{}", p.name);
            }
        }
        assert!(net
            .params()
            .iter()
            .any(|p| p.kind == ParamKind::Weight && p.grad.data().iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn tensor_round_trip_by_name() {
        let space = tiny_space();
        let a = Supernet::build(
            &space,
            NetConfig {
                init_seed: 1,
                ..NetConfig::default()
            },
        )
        .unwrap();
        let mut b = Supernet::build(
            &space,
            NetConfig {
                init_seed: 2,
                ..NetConfig::default()
            },
        )
        .unwrap();
        let map: BTreeMap<String, Tensor> = a.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        b.load_tensors(&map).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }
}
