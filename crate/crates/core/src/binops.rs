//! Binarization primitives and the shared-weight transforms.
//!
//! The weight path of a binary convolution is
//! `shared W -> weight_normalize -> bi_transform -> sign * alpha`;
//! the full-precision path stops after `weight_normalize`.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, ConvGeom, Tensor};

/// Variance epsilon of channel-wise weight normalization.
pub const WN_EPS: f64 = 1e-5;

#[inline]
pub fn sign<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// `+1` for `x >= 0`, `-1` otherwise.
pub fn sign_ste<T: Float>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| sign(v)).collect()
}

/// Clipped straight-through gradient: passes `dy` where `|x| <= 1`.
pub fn sign_ste_backward<T: Float>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v.abs() <= T::one() { g } else { T::zero() })
        .collect()
}

fn eps<T: Float>() -> T {
    T::from(WN_EPS).unwrap()
}

/// Per output channel `(w - mean) / sqrt(var + 1e-5)` with population
/// variance. `w` is laid out as `channels` contiguous chunks.
pub fn weight_normalize<T: Float>(w: &[T], channels: usize) -> Vec<T> {
    assert!(channels > 0 && w.len().is_multiple_of(channels));
    let per = w.len() / channels;
    let n = T::from(per).unwrap();
    let mut out = Vec::with_capacity(w.len());
    for ch in w.chunks(per) {
        let mean = ch.iter().fold(T::zero(), |a, &b| a + b) / n;
        let var = ch.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
        let inv = T::one() / (var + eps()).sqrt();
        out.extend(ch.iter().map(|&v| (v - mean) * inv));
    }
    out
}

pub fn weight_normalize_backward<T: Float>(w: &[T], channels: usize, dy: &[T]) -> Vec<T> {
    let per = w.len() / channels;
    let n = T::from(per).unwrap();
    let mut out = Vec::with_capacity(w.len());
    for (ch, g) in w.chunks(per).zip(dy.chunks(per)) {
        let mean = ch.iter().fold(T::zero(), |a, &b| a + b) / n;
        let var = ch.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
        let inv = T::one() / (var + eps()).sqrt();
        let gm = g.iter().fold(T::zero(), |a, &b| a + b) / n;
        let gy = ch.iter().zip(g).fold(T::zero(), |a, (&v, &d)| a + d * (v - mean) * inv) / n;
        out.extend(ch.iter().zip(g).map(|(&v, &d)| inv * (d - gm - (v - mean) * inv * gy)));
    }
    out
}

/// Learnable `side x side` matrix applied to flattened `k x k` filter patches.
/// A `k x k` kernel uses the top-left `k^2 x k^2` block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiTransform {
    pub side: usize,
    pub theta: Vec<f32>,
}

impl BiTransform {
    /// Identity for a layer whose largest kernel is `k_max`.
    pub fn identity(k_max: usize) -> Self {
        let side = k_max * k_max;
        let mut theta = vec![0.0; side * side];
        for i in 0..side {
            theta[i * side + i] = 1.0;
        }
        Self { side, theta }
    }

    /// The `k^2 x k^2` top-left block as a standalone transform.
    pub fn sub_block(&self, k: usize) -> BiTransform {
        let s = k * k;
        let mut theta = Vec::with_capacity(s * s);
        for i in 0..s {
            theta.extend_from_slice(&self.theta[i * self.side..i * self.side + s]);
        }
        BiTransform { side: s, theta }
    }
}

/// Flattens each `k x k` patch of `w`, right-multiplies by the top-left
/// `k^2 x k^2` block of `theta` (row-major, `side x side`), and reshapes back.
pub fn bi_transform<T: Float>(w: &[T], k: usize, theta: &[T], side: usize) -> Result<Vec<T>> {
    let kk = k * k;
    if kk > side || theta.len() != side * side || !w.len().is_multiple_of(kk) {
        return Err(Error::Shape(format!(
            "bi_transform: kernel {k}, theta side {side}, weight len {}",
            w.len()
        )));
    }
    let mut out = vec![T::zero(); w.len()];
    for (row, dst) in w.chunks(kk).zip(out.chunks_mut(kk)) {
        for (i, &r) in row.iter().enumerate() {
            if r == T::zero() {
                continue;
            }
            let th = &theta[i * side..i * side + kk];
            for (d, &t) in dst.iter_mut().zip(th) {
                *d = *d + r * t;
            }
        }
    }
    Ok(out)
}

/// `(dw, dtheta)` of [`bi_transform`]; `dtheta` is `side x side` with zeros
/// outside the used block.
pub fn bi_transform_backward<T: Float>(w: &[T], k: usize, theta: &[T], side: usize, dy: &[T]) -> (Vec<T>, Vec<T>) {
    let kk = k * k;
    let mut dw = vec![T::zero(); w.len()];
    let mut dtheta = vec![T::zero(); side * side];
    for ((row, g), drow) in w.chunks(kk).zip(dy.chunks(kk)).zip(dw.chunks_mut(kk)) {
        for i in 0..kk {
            let th = &theta[i * side..i * side + kk];
            let dth = &mut dtheta[i * side..i * side + kk];
            let mut acc = T::zero();
            for j in 0..kk {
                acc = acc + g[j] * th[j];
                dth[j] = dth[j] + row[i] * g[j];
            }
            drow[i] = acc;
        }
    }
    (dw, dtheta)
}

/// Per output channel `mean(|w|)`, accumulated in `f64`.
pub fn channel_abs_mean(w: &[f32], channels: usize) -> Vec<f32> {
    let per = w.len() / channels;
    w.chunks(per)
        .map(|ch| (ch.iter().map(|v| v.abs() as f64).sum::<f64>() / per as f64) as f32)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleMode {
    /// Multiply each output channel by `mean(|W_pre|)`.
    ChannelMean,
    None,
}

#[derive(Clone, Debug)]
pub struct BinaryConvOutput {
    /// Exact `+-1` dot-product sums.
    pub pre_scale: Tensor,
    pub output: Tensor,
    pub alpha: Vec<f32>,
}

/// Convolution of `+-1` activations with `sign(w_pre)`, scaled per output
/// channel. `w_pre` has shape `[out, in / groups, k, k]`.
pub fn binary_conv(
    x_b: &Tensor,
    w_pre: &Tensor,
    groups: usize,
    stride: usize,
    scale: ScaleMode,
) -> Result<BinaryConvOutput> {
    let (_, in_c, h, w) = x_b.dims4();
    let ws = w_pre.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::Shape(format!("binary_conv weight {ws:?}")));
    }
    let (out_c, k) = (ws[0], ws[2]);
    if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
        return Err(Error::Shape(format!(
            "binary_conv: channels {in_c}->{out_c} not divisible by groups {groups}"
        )));
    }
    if x_b.data().iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Shape("binary_conv: activations must be +-1".into()));
    }
    let geom = ConvGeom {
        in_c,
        out_c,
        k,
        groups,
        stride,
        h,
        w,
    };
    let wb = Tensor::from_vec(ws, sign_ste(w_pre.data()))?;
    let pre_scale = conv2d(x_b, &wb, &geom)?;
    let alpha = match scale {
        ScaleMode::ChannelMean => channel_abs_mean(w_pre.data(), out_c),
        ScaleMode::None => vec![1.0; out_c],
    };
    let mut output = pre_scale.clone();
    scale_channels(&mut output, &alpha);
    Ok(BinaryConvOutput {
        pre_scale,
        output,
        alpha,
    })
}

/// Multiplies channel `c` of an NCHW tensor by `s[c]`.
pub fn scale_channels(x: &mut Tensor, s: &[f32]) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    for b in 0..n {
        for (ch, &a) in s.iter().enumerate().take(c) {
            let o = (b * c + ch) * hw;
            x.data_mut()[o..o + hw].iter_mut().for_each(|v| *v *= a);
        }
    }
}

/// Switches for the shared-weight transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightPathConfig {
    pub weight_norm: bool,
    pub bi_transform: bool,
    pub scale: ScaleMode,
}

impl Default for WeightPathConfig {
    fn default() -> Self {
        Self {
            weight_norm: true,
            bi_transform: true,
            scale: ScaleMode::ChannelMean,
        }
    }
}

/// Intermediate values of one weight-path evaluation, kept for backward.
#[derive(Clone, Debug)]
pub struct WeightPathCache {
    raw: Vec<f32>,
    normalized: Vec<f32>,
    /// Pre-sign transformed weight (binary path only).
    transformed: Option<Vec<f32>>,
    alpha: Vec<f32>,
    channels: usize,
    k: usize,
}

/// Effective convolution weight for the chosen domain.
///
/// `theta` is the layer's full matrix; its top-left `k^2 x k^2` block is used.
pub fn weight_path_forward(
    raw: &[f32],
    channels: usize,
    k: usize,
    theta: &BiTransform,
    binary: bool,
    cfg: &WeightPathConfig,
) -> (Vec<f32>, WeightPathCache) {
    let normalized = if cfg.weight_norm {
        weight_normalize(raw, channels)
    } else {
        raw.to_vec()
    };
    if !binary {
        let cache = WeightPathCache {
            raw: raw.to_vec(),
            normalized: normalized.clone(),
            transformed: None,
            alpha: Vec::new(),
            channels,
            k,
        };
        return (normalized, cache);
    }
    let transformed = if cfg.bi_transform {
        bi_transform(&normalized, k, &theta.theta, theta.side).expect("theta covers kernel")
    } else {
        normalized.clone()
    };
    let alpha = match cfg.scale {
        ScaleMode::ChannelMean => channel_abs_mean(&transformed, channels),
        ScaleMode::None => vec![1.0; channels],
    };
    let per = transformed.len() / channels;
    let eff: Vec<f32> = transformed
        .iter()
        .enumerate()
        .map(|(i, &v)| sign(v) * alpha[i / per])
        .collect();
    let cache = WeightPathCache {
        raw: raw.to_vec(),
        normalized,
        transformed: Some(transformed),
        alpha,
        channels,
        k,
    };
    (eff, cache)
}

/// Gradient w.r.t. the raw shared weight and (binary path) the full theta.
/// `alpha` is treated as a constant.
pub fn weight_path_backward(
    cache: &WeightPathCache,
    theta: &BiTransform,
    d_eff: &[f32],
    cfg: &WeightPathConfig,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let mut dtheta = None;
    let d_norm = match &cache.transformed {
        None => d_eff.to_vec(),
        Some(t) => {
            let per = t.len() / cache.channels;
            let d_sign: Vec<f32> = d_eff
                .iter()
                .enumerate()
                .map(|(i, &g)| g * cache.alpha[i / per])
                .collect();
            let d_t = sign_ste_backward(t, &d_sign);
            if cfg.bi_transform {
                let (dw, dth) = bi_transform_backward(&cache.normalized, cache.k, &theta.theta, theta.side, &d_t);
                dtheta = Some(dth);
                dw
            } else {
                d_t
            }
        }
    };
    let d_raw = if cfg.weight_norm {
        weight_normalize_backward(&cache.raw, cache.channels, &d_norm)
    } else {
        d_norm
    };
    (d_raw, dtheta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sign_maps_zero_to_plus_one() {
        assert_eq!(sign_ste(&[0.3f32, -0.7, 0.0]), vec![1.0, -1.0, 1.0]);
        assert_eq!(sign_ste(&[0.1f32, 2.0, 7.5]), vec![1.0; 3]);
    }

    #[test]
    fn clipped_ste_mask() {
        assert_eq!(sign_ste_backward(&[0.5f32], &[1.0]), vec![1.0]);
        assert_eq!(sign_ste_backward(&[1.5f32], &[1.0]), vec![0.0]);
        assert_eq!(sign_ste_backward(&[-1.0f32, 1.0], &[2.0, 3.0]), vec![2.0, 3.0]);
    }

    #[test]
    fn weight_normalize_small_cases() {
        let y = weight_normalize(&[1.0f64, 2.0, 3.0], 1);
        let s = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        assert!((y[0] + s).abs() < 1e-12 && y[1].abs() < 1e-12 && (y[2] - s).abs() < 1e-12);
        assert!((y[2] - 1.2247).abs() < 1e-4);
        assert_eq!(weight_normalize(&[5.0f32, 5.0], 1), vec![0.0, 0.0]);
    }

    #[test]
    fn weight_normalize_random_channels_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Vec<f64> = (0..64 * 64 * 9).map(|_| rng.random_range(-3.0..5.0)).collect();
        let y = weight_normalize(&w, 64);
        for ch in y.chunks(64 * 9) {
            let m = ch.iter().sum::<f64>() / ch.len() as f64;
            let v = ch.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / ch.len() as f64;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-3);
        }
        let twice = weight_normalize(&y, 64);
        assert!(y.iter().zip(&twice).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn bi_transform_identity_and_scalar() {
        let t = BiTransform::identity(3);
        let w: Vec<f32> = (0..18).map(|i| i as f32 * 0.1).collect();
        assert_eq!(bi_transform(&w, 3, &t.theta, t.side).unwrap(), w);
        // 1x1 kernel reads theta[0][0] of any matrix.
        assert_eq!(bi_transform(&[0.5f32], 1, &[2.0], 1).unwrap(), vec![1.0]);
        assert!(bi_transform(&w, 5, &t.theta, t.side).is_err());
    }

    #[test]
    fn sub_block_matches_in_place_use() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = BiTransform::identity(5);
        t.theta.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        let w: Vec<f32> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = bi_transform(&w, 3, &t.theta, 25).unwrap();
        let sb = t.sub_block(3);
        let b = bi_transform(&w, 3, &sb.theta, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn binary_conv_dot_product() {
        let x = Tensor::from_vec(&[1, 3, 1, 1], vec![1.0, -1.0, 1.0]).unwrap();
        let w = Tensor::from_vec(&[1, 3, 1, 1], vec![1.0, 1.0, -1.0]).unwrap();
        let out = binary_conv(&x, &w, 1, 1, ScaleMode::ChannelMean).unwrap();
        assert_eq!(out.pre_scale.data(), &[-1.0]);
        assert_eq!(out.alpha, vec![1.0]);
        assert_eq!(out.output.data(), &[-1.0]);
    }

    #[test]
    fn binary_conv_rejects_bad_groups() {
        let x = Tensor::full(&[1, 3, 2, 2], 1.0);
        let w = Tensor::full(&[3, 1, 1, 1], 1.0);
        assert!(binary_conv(&x, &w, 2, 1, ScaleMode::None).is_err());
        let bad = Tensor::full(&[1, 2, 2, 2], 0.5);
        let w2 = Tensor::full(&[2, 2, 1, 1], 1.0);
        assert!(binary_conv(&bad, &w2, 1, 1, ScaleMode::None).is_err());
    }

    #[test]
    fn identity_theta_path_is_sign_of_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w: Vec<f32> = (0..4 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = WeightPathConfig::default();
        let (eff, _) = weight_path_forward(&w, 4, 3, &BiTransform::identity(3), true, &cfg);
        let norm = weight_normalize(&w, 4);
        let alpha = channel_abs_mean(&norm, 4);
        let expect: Vec<f32> = norm.iter().enumerate().map(|(i, &v)| sign(v) * alpha[i / 18]).collect();
        assert_eq!(eff, expect);
    }
}
