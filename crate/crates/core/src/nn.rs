//! Trainable parameters and the small elastic layers shared by every block.
//!
//! Each layer stores tensors sized for the widest configuration and operates
//! on the first `c` channels of them.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Shared convolution weights and the classifier.
    Weight,
    BatchNorm,
    /// RSign thresholds and RPReLU parameters.
    Binarizer,
    /// Bi-Transformation matrices.
    Theta,
    /// LSQ step sizes.
    Quant,
}

impl ParamKind {
    /// Whether weight decay applies.
    pub fn decays(&self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            kind,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Per-channel view helpers for NCHW tensors.
fn for_each_channel(x: &Tensor, mut f: impl FnMut(usize, &[f32])) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            f(ch, &x.data()[o..o + hw]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, running stats updated with momentum.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics, running stats replaced by the cumulative average
    /// over calibration batches.
    Calibrate,
}

#[derive(Clone, Debug)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
    calib_seen: usize,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.gamma"),
                ParamKind::BatchNorm,
                Tensor::full(&[channels], 1.0),
            ),
            beta: Param::new(format!("{name}.beta"), ParamKind::BatchNorm, Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            calib_seen: 0,
            cache: None,
        }
    }

    pub fn begin_calibration(&mut self) {
        self.calib_seen = 0;
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = (n * hw) as f64;
        let (mean, var): (Vec<f32>, Vec<f32>) = if mode == BnMode::Eval {
            (
                self.running_mean.data()[..c].to_vec(),
                self.running_var.data()[..c].to_vec(),
            )
        } else {
            let mut s = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for_each_channel(x, |ch, p| {
                for &v in p {
                    s[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            });
            let mean: Vec<f64> = s.iter().map(|v| v / count).collect();
            let var: Vec<f64> = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q / count - m * m).max(0.0))
                .collect();
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let momentum = match mode {
                BnMode::Train => self.momentum as f64,
                _ => 1.0 / (self.calib_seen as f64 + 1.0),
            };
            let rm = self.running_mean.data_mut();
            for ch in 0..c {
                rm[ch] = ((1.0 - momentum) * rm[ch] as f64 + momentum * mean[ch]) as f32;
            }
            let rv = self.running_var.data_mut();
            for ch in 0..c {
                rv[ch] = ((1.0 - momentum) * rv[ch] as f64 + momentum * var[ch] * unbiased) as f32;
            }
            if mode == BnMode::Calibrate {
                self.calib_seen += 1;
            }
            (
                mean.iter().map(|&v| v as f32).collect(),
                var.iter().map(|&v| v as f32).collect(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = x.clone();
        let mut y = x.clone();
        let gamma = &self.gamma.value.data()[..c];
        let beta = &self.beta.value.data()[..c];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                let xh = &mut x_hat.data_mut()[o..o + hw];
                for v in xh.iter_mut() {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
                let yo = &mut y.data_mut()[o..o + hw];
                for (d, &s) in yo.iter_mut().zip(xh.iter()) {
                    *d = s * gamma[ch] + beta[ch];
                }
            }
        }
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            batch_stats: mode != BnMode::Eval,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("batch norm backward before forward");
        let (n, c, h, w) = dy.dims4();
        let hw = h * w;
        let m = (n * hw) as f32;
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        let xh = cache.x_hat.data();
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    dgamma[ch] += dy.data()[i] * xh[i];
                    dbeta[ch] += dy.data()[i];
                }
            }
        }
        let gamma = self.gamma.value.data()[..c].to_vec();
        let mut dx = dy.clone();
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                let k = gamma[ch] * cache.inv_std[ch];
                for i in o..o + hw {
                    dx.data_mut()[i] = if cache.batch_stats {
                        k * (dy.data()[i] - dbeta[ch] / m - xh[i] * dgamma[ch] / m)
                    } else {
                        k * dy.data()[i]
                    };
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += dgamma[ch];
            self.beta.grad.data_mut()[ch] += dbeta[ch];
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Sign activation with a learnable per-channel threshold.
#[derive(Clone, Debug)]
pub struct RSign {
    pub threshold: Param,
    cache: Option<Tensor>,
}

impl RSign {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            threshold: Param::new(
                format!("{name}.threshold"),
                ParamKind::Binarizer,
                Tensor::zeros(&[channels]),
            ),
            cache: None,
        }
    }

    /// `sign(x - threshold)`; keeps the shifted input for the clipped STE.
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut shifted = x.clone();
        let t = self.threshold.value.data();
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                shifted.data_mut()[o..o + hw].iter_mut().for_each(|v| *v -= t[ch]);
            }
        }
        let out = shifted.map(crate::binops::sign);
        self.cache = Some(shifted);
        out
    }

    pub fn backward(&mut self, dy: &Tensor, learn: bool) -> Tensor {
        let shifted = self.cache.take().expect("rsign backward before forward");
        let (n, c, h, w) = dy.dims4();
        let hw = h * w;
        let dx = Tensor::from_vec(dy.shape(), crate::binops::sign_ste_backward(shifted.data(), dy.data())).unwrap();
        if learn {
            let g = self.threshold.grad.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * hw;
                    g[ch] -= dx.data()[o..o + hw].iter().sum::<f32>();
                }
            }
        }
        dx
    }
}

/// `y = z + zeta` for `z = x - gamma > 0`, else `beta * z + zeta`.
#[derive(Clone, Debug)]
pub struct RPReLU {
    pub gamma: Param,
    pub beta: Param,
    pub zeta: Param,
    cache: Option<Tensor>,
}

impl RPReLU {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.shift_in"),
                ParamKind::Binarizer,
                Tensor::zeros(&[channels]),
            ),
            beta: Param::new(
                format!("{name}.slope"),
                ParamKind::Binarizer,
                Tensor::full(&[channels], 0.25),
            ),
            zeta: Param::new(
                format!("{name}.shift_out"),
                ParamKind::Binarizer,
                Tensor::zeros(&[channels]),
            ),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut z = x.clone();
        let mut y = x.clone();
        let (g, bt, zt) = (self.gamma.value.data(), self.beta.value.data(), self.zeta.value.data());
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    let v = x.data()[i] - g[ch];
                    z.data_mut()[i] = v;
                    y.data_mut()[i] = if v > 0.0 { v } else { bt[ch] * v } + zt[ch];
                }
            }
        }
        self.cache = Some(z);
        y
    }

    pub fn backward(&mut self, dy: &Tensor, learn: bool) -> Tensor {
        let z = self.cache.take().expect("rprelu backward before forward");
        let (n, c, h, w) = dy.dims4();
        let hw = h * w;
        let bt = self.beta.value.data().to_vec();
        let mut dx = dy.clone();
        let mut db = vec![0.0f32; c];
        let mut dg = vec![0.0f32; c];
        let mut dz = vec![0.0f32; c];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    let g = dy.data()[i];
                    let v = z.data()[i];
                    let d = if v > 0.0 { g } else { g * bt[ch] };
                    if v <= 0.0 {
                        db[ch] += g * v;
                    }
                    dx.data_mut()[i] = d;
                    dg[ch] -= d;
                    dz[ch] += g;
                }
            }
        }
        if learn {
            for ch in 0..c {
                self.beta.grad.data_mut()[ch] += db[ch];
                self.gamma.grad.data_mut()[ch] += dg[ch];
                self.zeta.grad.data_mut()[ch] += dz[ch];
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 3] {
        [&mut self.gamma, &mut self.beta, &mut self.zeta]
    }
}

/// Learned-step-size fake quantizer for signed 8-bit values.
#[derive(Clone, Debug)]
pub struct Lsq {
    pub step: Param,
    cache: Option<(Vec<f32>, f32)>,
}

pub const LSQ_QN: f32 = -128.0;
pub const LSQ_QP: f32 = 127.0;

impl Lsq {
    pub fn new(name: &str, step: f32) -> Self {
        Self {
            step: Param::new(format!("{name}.step"), ParamKind::Quant, Tensor::full(&[1], step)),
            cache: None,
        }
    }

    /// Step `2 mean|v| / sqrt(Qp)` for the values `v`.
    pub fn init_for(name: &str, v: &[f32]) -> Self {
        let mean_abs = v.iter().map(|x| x.abs() as f64).sum::<f64>() / v.len().max(1) as f64;
        Self::new(name, (2.0 * mean_abs / (LSQ_QP as f64).sqrt()).max(1e-8) as f32)
    }

    pub fn forward(&mut self, v: &[f32]) -> Vec<f32> {
        let s = self.step.value.data()[0];
        let out = v.iter().map(|&x| (x / s).round().clamp(LSQ_QN, LSQ_QP) * s).collect();
        self.cache = Some((v.to_vec(), s));
        out
    }

    pub fn backward(&mut self, dq: &[f32]) -> Vec<f32> {
        let (v, s) = self.cache.take().expect("lsq backward before forward");
        let grad_scale = 1.0 / ((v.len() as f32) * LSQ_QP).sqrt();
        let mut ds = 0.0f32;
        let dv = v
            .iter()
            .zip(dq)
            .map(|(&x, &g)| {
                let r = x / s;
                if r < LSQ_QN {
                    ds += g * LSQ_QN;
                    0.0
                } else if r > LSQ_QP {
                    ds += g * LSQ_QP;
                    0.0
                } else {
                    ds += g * (r.round() - r);
                    g
                }
            })
            .collect();
        self.step.grad.data_mut()[0] += ds * grad_scale;
        dv
    }
}
