//! Forward and backward kernels. Every backward function takes whatever the
//! matching forward returned as its cache and produces input gradients plus
//! parameter gradients.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    drow[..x0.min(w)].fill(T::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                    }
                    drow[x1.max(x0).min(w)..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    x.fill(T::zero());
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x1 <= x0 {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    let srow = &src[y * w + x0..y * w + x1];
                    for (d, &s) in drow.iter_mut().zip(srow) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Geometry of a stride-1 "same" convolution with an odd square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// `y = W * x + b` with zero padding `kernel / 2`.
pub fn conv2d<T: Real>(x: &Tensor<T>, shape: ConvShape, w: &[T], b: Option<&[T]>) -> Tensor<T> {
    assert_eq!(x.c, shape.in_channels, "conv2d input channels");
    assert_eq!(w.len(), shape.weight_len());
    let (h, wd) = (x.h, x.w);
    let hw = h * wd;
    let mut y = Tensor::zeros(x.n, shape.out_channels, h, wd);
    let item_out = y.item_len();
    par::for_each_chunk_mut(&mut y.data, item_out, |i, out| {
        let xi = x.item(i);
        let owned;
        let col: &[T] = if shape.kernel == 1 {
            xi
        } else {
            let mut c = vec![T::zero(); shape.col_rows() * hw];
            im2col(xi, shape.in_channels, h, wd, shape.kernel, &mut c);
            owned = c;
            &owned
        };
        T::gemm(
            shape.out_channels,
            shape.col_rows(),
            hw,
            T::one(),
            w,
            false,
            col,
            false,
            T::zero(),
            out,
        );
        if let Some(b) = b {
            for (o, &bias) in out.chunks_mut(hw).zip(b) {
                o.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
    });
    y
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    shape: ConvShape,
    w: &[T],
    dy: &Tensor<T>,
) -> ConvGrads<T> {
    let (h, wd) = (x.h, x.w);
    let hw = h * wd;
    let rows = shape.col_rows();
    let parts = par::map_range(x.n, |i| {
        let xi = x.item(i);
        let dyi = dy.item(i);
        let col_owned;
        let col: &[T] = if shape.kernel == 1 {
            xi
        } else {
            let mut c = vec![T::zero(); rows * hw];
            im2col(xi, shape.in_channels, h, wd, shape.kernel, &mut c);
            col_owned = c;
            &col_owned
        };
        let mut dw = vec![T::zero(); shape.weight_len()];
        T::gemm(
            shape.out_channels,
            hw,
            rows,
            T::one(),
            dyi,
            false,
            col,
            true,
            T::zero(),
            &mut dw,
        );
        let db: Vec<T> = dyi.chunks(hw).map(|p| p.iter().copied().sum()).collect();
        let mut dcol = vec![T::zero(); rows * hw];
        T::gemm(
            rows,
            shape.out_channels,
            hw,
            T::one(),
            w,
            true,
            dyi,
            false,
            T::zero(),
            &mut dcol,
        );
        let dx = if shape.kernel == 1 {
            dcol
        } else {
            let mut dx = vec![T::zero(); shape.in_channels * hw];
            col2im(&dcol, shape.in_channels, h, wd, shape.kernel, &mut dx);
            dx
        };
        (dx, dw, db)
    });
    let mut dx = Tensor::zeros(x.n, x.c, h, wd);
    let mut dw = vec![T::zero(); shape.weight_len()];
    let mut db = vec![T::zero(); shape.out_channels];
    for (i, (dxi, dwi, dbi)) in parts.into_iter().enumerate() {
        dx.item_mut(i).copy_from_slice(&dxi);
        dw.iter_mut().zip(&dwi).for_each(|(a, &b)| *a = *a + b);
        db.iter_mut().zip(&dbi).for_each(|(a, &b)| *a = *a + b);
    }
    ConvGrads { dx, dw, db }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

/// Batch normalization with batch statistics (training mode).
pub fn batch_norm_train<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> (Tensor<T>, BnCache<T>) {
    let (n, c, hw) = (x.n, x.c, x.plane());
    let count = T::from_usize(n * hw).expect("count");
    let eps = T::from_f64_lossy(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            s = s + x.data[off..off + hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            v = v + x.data[off..off + hw]
                .iter()
                .map(|&a| (a - m) * (a - m))
                .sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(n, c, x.h, x.w);
    let mut y = Tensor::zeros(n, c, x.h, x.w);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for p in off..off + hw {
                let xh = (x.data[p] - m) * is;
                xhat.data[p] = xh;
                y.data[p] = g * xh + b;
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Batch normalization with frozen running statistics (inference mode).
pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let (c, hw) = (x.c, x.plane());
    let eps = T::from_f64_lossy(BN_EPS);
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma[ch] / (running_var[ch] + eps).sqrt())
        .collect();
    let mut y = x.clone();
    for (p, v) in y.data.iter_mut().enumerate() {
        let ch = (p / hw) % c;
        *v = (*v - running_mean[ch]) * scale[ch] + beta[ch];
    }
    y
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(cache: &BnCache<T>, gamma: &[T], dy: &Tensor<T>) -> BnGrads<T> {
    let xhat = &cache.xhat;
    let (n, c, hw) = (xhat.n, xhat.c, xhat.plane());
    let count = T::from_usize(n * hw).expect("count");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for p in off..off + hw {
                dgamma[ch] = dgamma[ch] + dy.data[p] * xhat.data[p];
                dbeta[ch] = dbeta[ch] + dy.data[p];
            }
        }
    }
    let mut dx = Tensor::zeros(n, c, xhat.h, xhat.w);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let g = gamma[ch];
            let k = g * cache.inv_std[ch] / count;
            for p in off..off + hw {
                dx.data[p] = k * (count * dy.data[p] - dbeta[ch] - xhat.data[p] * dgamma[ch]);
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

/// Exponential moving average update of running statistics from one
/// training batch. The running variance uses the unbiased batch variance.
pub fn batch_norm_update_running<T: Real>(
    cache: &BnCache<T>,
    running_mean: &mut [T],
    running_var: &mut [T],
) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let count = (cache.xhat.n * cache.xhat.plane()) as f64;
    let unbias = T::from_f64_lossy(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
    for ch in 0..running_mean.len() {
        running_mean[ch] = (T::one() - m) * running_mean[ch] + m * cache.mean[ch];
        running_var[ch] = (T::one() - m) * running_var[ch] + m * cache.var[ch] * unbias;
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Returns the output and the flat input
/// index chosen for each output element (first maximum wins).
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even spatial dims, got {}x{}",
            x.h, x.w
        )));
    }
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut idx = vec![0u32; y.data.len()];
    for plane in 0..x.n * x.c {
        let ib = plane * x.h * x.w;
        let ob = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ib + (2 * oy) * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let p = ib + (2 * oy + dy) * x.w + 2 * ox + dx;
                    if x.data[p] > x.data[best] {
                        best = p;
                    }
                }
                y.data[ob + oy * ow + ox] = x.data[best];
                idx[ob + oy * ow + ox] = best as u32;
            }
        }
    }
    Ok((y, idx))
}

pub fn max_pool2_backward<T: Real>(
    input_shape: [usize; 4],
    idx: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (&i, &g) in idx.iter().zip(&dy.data) {
        dx.data[i as usize] = dx.data[i as usize] + g;
    }
    dx
}

/// Source taps for half-pixel-centred linear interpolation from `src` to
/// `dst` samples: `(i0, i1, w0, w1)` per destination index.
pub(crate) fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let f = s - i0 as f64;
            let f = if i0 == i1 { 0.0 } else { f };
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// Bilinear 2x upsampling (half-pixel centres, edge clamped).
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let ty = linear_taps(x.h, oh);
    let tx = linear_taps(x.w, ow);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        let dst = &mut y.data[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * x.w + x0] + wx1 * src[y0 * x.w + x1])
                    + wy1 * (wx0 * src[y1 * x.w + x0] + wx1 * src[y1 * x.w + x1]);
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(input_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (dy.h, dy.w);
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut dx = Tensor::zeros(n, c, h, w);
    for plane in 0..n * c {
        let g = &dy.data[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + wy0 * wx0 * v;
                dst[y0 * w + x1] = dst[y0 * w + x1] + wy0 * wx1 * v;
                dst[y1 * w + x0] = dst[y1 * w + x0] + wy1 * wx0 * v;
                dst[y1 * w + x1] = dst[y1 * w + x1] + wy1 * wx1 * v;
            }
        }
    }
    dx
}

/// Row-major batch of vectors, `rows x cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `y = x W^T + b` with `W` stored `out x in`.
pub fn linear<T: Real>(x: &Matrix<T>, w: &[T], b: &[T], out: usize) -> Matrix<T> {
    assert_eq!(w.len(), out * x.cols);
    let mut y = vec![T::zero(); x.rows * out];
    T::gemm(x.rows, x.cols, out, T::one(), &x.data, false, w, true, T::zero(), &mut y);
    for r in y.chunks_mut(out) {
        r.iter_mut().zip(b).for_each(|(v, &bb)| *v = *v + bb);
    }
    Matrix::new(x.rows, out, y)
}

pub struct LinearGrads<T> {
    pub dx: Matrix<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn linear_backward<T: Real>(x: &Matrix<T>, w: &[T], dy: &Matrix<T>) -> LinearGrads<T> {
    let out = dy.cols;
    let mut dw = vec![T::zero(); out * x.cols];
    T::gemm(out, x.rows, x.cols, T::one(), &dy.data, true, &x.data, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); out];
    for r in dy.data.chunks(out) {
        db.iter_mut().zip(r).for_each(|(a, &b)| *a = *a + b);
    }
    let mut dx = vec![T::zero(); x.rows * x.cols];
    T::gemm(x.rows, out, x.cols, T::one(), &dy.data, false, w, false, T::zero(), &mut dx);
    LinearGrads {
        dx: Matrix::new(x.rows, x.cols, dx),
        dw,
        db,
    }
}

pub fn relu_matrix<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    Matrix::new(
        x.rows,
        x.cols,
        x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    )
}

pub fn relu_matrix_backward<T: Real>(y: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    Matrix::new(
        y.rows,
        y.cols,
        y.data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    )
}
