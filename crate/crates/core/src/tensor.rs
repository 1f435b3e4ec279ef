//! Dense row-major `f32` tensors and the convolution kernels the network needs.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `0..n` along the leading axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        }
    }
}

/// Geometry of a 2-D grouped convolution with "same" padding `k / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub groups: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }
    fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }
    fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }
    fn col_rows(&self) -> usize {
        self.in_per_group() * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    pub fn check(&self, x: &Tensor, w: &Tensor) -> Result<()> {
        if self.groups == 0 || !self.in_c.is_multiple_of(self.groups) || !self.out_c.is_multiple_of(self.groups) {
            return Err(Error::Shape(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_c, self.out_c, self.groups
            )));
        }
        let (_, c, h, wd) = x.dims4();
        if c != self.in_c || h != self.h || wd != self.w {
            return Err(Error::Shape(format!(
                "conv input {:?} does not match geometry {self:?}",
                x.shape()
            )));
        }
        let want = [self.out_c, self.in_per_group(), self.k, self.k];
        if w.shape() != want {
            return Err(Error::Shape(format!("conv weight {:?}, expected {want:?}", w.shape())));
        }
        Ok(())
    }
}

/// `out[m x n] (+)= a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices that cover the full strided extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], g: &ConvGeom, group: usize, col: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad() as isize);
    let (oh, ow) = (g.out_h(), g.out_w());
    let icg = g.in_per_group();
    let hw = g.h * g.w;
    for ci in 0..icg {
        let plane = &x[(group * icg + ci) * hw..(group * icg + ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &ConvGeom, group: usize, dx: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad() as isize);
    let (oh, ow) = (g.out_h(), g.out_w());
    let icg = g.in_per_group();
    let hw = g.h * g.w;
    for ci in 0..icg {
        let plane = &mut dx[(group * icg + ci) * hw..(group * icg + ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped convolution. `w` has shape `[out_c, in_c / groups, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    g.check(x, w)?;
    let n = x.shape()[0];
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let (icg, ocg, kk) = (g.in_per_group(), g.out_per_group(), g.col_rows());
    let mut y = Tensor::zeros(&[n, g.out_c, oh, ow]);
    let mut col = vec![0.0f32; if g.is_pointwise() { 0 } else { kk * ohw }];
    let in_stride = g.in_c * g.h * g.w;
    for b in 0..n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let yb = &mut y.data_mut()[b * g.out_c * ohw..(b + 1) * g.out_c * ohw];
        for grp in 0..g.groups {
            let wg = &w.data()[grp * ocg * kk..(grp + 1) * ocg * kk];
            let cols: &[f32] = if g.is_pointwise() {
                &xb[grp * icg * ohw..(grp + 1) * icg * ohw]
            } else {
                im2col(xb, g, grp, &mut col);
                &col
            };
            let out = &mut yb[grp * ocg * ohw..(grp + 1) * ocg * ohw];
            gemm(ocg, kk, ohw, wg, kk as isize, 1, cols, ohw as isize, 1, out, false);
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d`]: `(dx, dw)`. `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    g: &ConvGeom,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    g.check(x, w)?;
    let n = x.shape()[0];
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    if dy.shape() != [n, g.out_c, oh, ow] {
        return Err(Error::Shape(format!("conv grad {:?}", dy.shape())));
    }
    let (icg, ocg, kk) = (g.in_per_group(), g.out_per_group(), g.col_rows());
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![0.0f32; kk * ohw];
    let mut dcol = vec![0.0f32; kk * ohw];
    let in_stride = g.in_c * g.h * g.w;
    for b in 0..n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let dyb = &dy.data()[b * g.out_c * ohw..(b + 1) * g.out_c * ohw];
        for grp in 0..g.groups {
            let dyg = &dyb[grp * ocg * ohw..(grp + 1) * ocg * ohw];
            let cols: &[f32] = if g.is_pointwise() {
                &xb[grp * icg * ohw..(grp + 1) * icg * ohw]
            } else {
                im2col(xb, g, grp, &mut col);
                &col
            };
            // dW_g += dY_g * col^T
            let dwg = &mut dw.data_mut()[grp * ocg * kk..(grp + 1) * ocg * kk];
            gemm(ocg, ohw, kk, dyg, ohw as isize, 1, cols, 1, ohw as isize, dwg, true);
            if let Some(dx) = dx.as_mut() {
                let wg = &w.data()[grp * ocg * kk..(grp + 1) * ocg * kk];
                let dxb = &mut dx.data_mut()[b * in_stride..(b + 1) * in_stride];
                if g.is_pointwise() {
                    let dst = &mut dxb[grp * icg * ohw..(grp + 1) * icg * ohw];
                    gemm(kk, ocg, ohw, wg, 1, kk as isize, dyg, ohw as isize, 1, dst, true);
                } else {
                    gemm(kk, ocg, ohw, wg, 1, kk as isize, dyg, ohw as isize, 1, &mut dcol, false);
                    col2im(&dcol, g, grp, dxb);
                }
            }
        }
    }
    Ok((dx, dw))
}

/// Non-overlapping `s x s` average pooling.
pub fn avg_pool(x: &Tensor, s: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h / s, w / s);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let inv = 1.0 / (s * s) as f32;
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut yd[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += src[(oy * s + dy) * w + ox * s + dx];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &Tensor, s: usize, in_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / s, w / s);
    let mut dx = Tensor::zeros(in_shape);
    let inv = 1.0 / (s * s) as f32;
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = dyd[p * oh * ow + oy * ow + ox] * inv;
                for a in 0..s {
                    for b in 0..s {
                        dxd[p * h * w + (oy * s + a) * w + ox * s + b] = v;
                    }
                }
            }
        }
    }
    dx
}

/// Global average pool: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let data = x.data().chunks(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect();
    Tensor::from_vec(&[n, c], data).unwrap()
}

pub fn global_avg_pool_backward(dy: &Tensor, in_shape: &[usize]) -> Tensor {
    let hw = in_shape[2] * in_shape[3];
    let mut dx = Tensor::zeros(in_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        plane.fill(g / hw as f32);
    }
    dx
}

/// `y[n, j] = sum_i x[n, i] w[j, i] + b[j]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &[f32]) -> Tensor {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut y = Tensor::zeros(&[n, o]);
    for r in 0..n {
        y.data_mut()[r * o..(r + 1) * o].copy_from_slice(b);
    }
    gemm(
        n,
        i,
        o,
        x.data(),
        i as isize,
        1,
        w.data(),
        1,
        i as isize,
        y.data_mut(),
        true,
    );
    y
}

/// `(dx, dw, db)` of [`linear`].
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Vec<f32>) {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut dx = Tensor::zeros(&[n, i]);
    gemm(
        n,
        o,
        i,
        dy.data(),
        o as isize,
        1,
        w.data(),
        i as isize,
        1,
        dx.data_mut(),
        false,
    );
    let mut dw = Tensor::zeros(&[o, i]);
    gemm(
        o,
        n,
        i,
        dy.data(),
        1,
        o as isize,
        x.data(),
        i as isize,
        1,
        dw.data_mut(),
        false,
    );
    let mut db = vec![0.0; o];
    for row in dy.data().chunks(o) {
        for (a, b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
    (dx, dw, db)
}
