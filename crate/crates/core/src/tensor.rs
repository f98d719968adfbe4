//! Dense row-major `f64` tensors and the handful of kernels the pipeline
//! needs: matrix products, row softmax, direct convolution, average pooling
//! and bilinear resampling.
//!
//! Every reduction walks its operands in a fixed ascending order, so results
//! are bitwise reproducible for a given input on a given platform.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly and holds
    /// only finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor value");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    /// Row-major 2-D tensor from nested rows. Panics on ragged input; meant
    /// for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(&[rows.len(), cols], data).expect("valid literal")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(format!("expected c×h×w, got shape {:?}", self.shape))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn at3(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Adds `bias` to every row of a matrix.
    pub fn add_row_bias(&self, bias: &[f64]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if bias.len() != c {
            return Err(Error::dim(format!("bias of length {} for {r}×{c}", bias.len())));
        }
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut macs = 0;
    matmul_counted(a, b, &mut macs)
}

/// [`matmul`] that adds the number of multiply-accumulates it performs to
/// `macs`.
pub fn matmul_counted(a: &Tensor, b: &Tensor, macs: &mut u64) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (l, &av) in arow.iter().enumerate() {
                acc += av * b.data[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    *macs += (m * n * k) as u64;
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`, without materialising the transpose.
pub fn matmul_transpose_b_counted(a: &Tensor, b: &Tensor, macs: &mut u64) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "a·bᵀ needs equal row widths: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            out[i * n + j] = acc;
        }
    }
    *macs += (m * n * k) as u64;
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if n == 0 {
        return Err(Error::dim("softmax over an empty row"));
    }
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(n).take(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Normalises each row to zero mean and unit variance.
pub fn layer_norm_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Direct 2-D cross-correlation with zero padding and unit stride.
///
/// `x` is `c_in×h×w`, `kernel` is `c_out×c_in×k×k`, `bias` (if any) has one
/// entry per output channel.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&[f64]>, padding: usize) -> Result<Tensor> {
    let (c_in, h, w) = x.dims3()?;
    let (c_out, kc_in, kh, kw) = match kernel.shape[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::dim(format!(
                "kernel must be c_out×c_in×k×k, got {:?}",
                kernel.shape
            )))
        }
    };
    if kc_in != c_in {
        return Err(Error::dim(format!(
            "kernel expects {kc_in} input channels, input {:?} has {c_in}",
            x.shape
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::param(format!("kernel must be square and odd, got {kh}×{kw}")));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::dim(format!("bias length {} for {c_out} channels", b.len())));
        }
    }
    let k = kh;
    let (out_h, out_w) = match ((h + 2 * padding).checked_sub(k), (w + 2 * padding).checked_sub(k)) {
        (Some(a), Some(b)) => (a + 1, b + 1),
        _ => return Err(Error::dim(format!("{k}×{k} kernel larger than padded {h}×{w} input"))),
    };

    let mut out = vec![0.0; c_out * out_h * out_w];
    for co in 0..c_out {
        let b = bias.map_or(0.0, |b| b[co]);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = b;
                for ci in 0..c_in {
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let kv = kernel.data[((co * c_in + ci) * k + ky) * k + kx];
                            acc += kv * x.data[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c_out, out_h, out_w], out))
}

/// Non-overlapping `window×window` mean pooling. Partial windows on the
/// bottom and right edges average only their in-bounds cells.
pub fn avg_pool2d(x: &Tensor, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::param("pooling window must be at least 1"));
    }
    let (c, h, w) = x.dims3()?;
    let out_h = h.div_ceil(window);
    let out_w = w.div_ceil(window);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for oy in 0..out_h {
            let y_end = ((oy + 1) * window).min(h);
            for ox in 0..out_w {
                let x_end = ((ox + 1) * window).min(w);
                let mut acc = 0.0;
                for y in oy * window..y_end {
                    for xx in ox * window..x_end {
                        acc += x.data[(ch * h + y) * w + xx];
                    }
                }
                let count = (y_end - oy * window) * (x_end - ox * window);
                out[(ch * out_h + oy) * out_w + ox] = acc / count as f64;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// Bilinear interpolation of a `h×w` grid stored row-major in `img`.
///
/// Coordinates are in pixels with `(0, 0)` at the centre of the first cell.
/// Anything outside `[0, h−1]×[0, w−1]` returns `fill`.
pub fn bilinear_sample(img: &[f64], h: usize, w: usize, y: f64, x: f64, fill: f64) -> f64 {
    debug_assert_eq!(img.len(), h * w);
    let max_y = (h - 1) as f64;
    let max_x = (w - 1) as f64;
    // NaN fails both comparisons and falls through to `fill`.
    if !(y >= 0.0 && y <= max_y && x >= 0.0 && x <= max_x) {
        return fill;
    }
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;

    let v00 = img[y0 * w + x0];
    let v01 = img[y0 * w + x1];
    let v10 = img[y1 * w + x0];
    let v11 = img[y1 * w + x1];
    let top = v00 + (v01 - v00) * fx;
    let bottom = v10 + (v11 - v10) * fx;
    top + (bottom - top) * fy
}

/// [`bilinear_sample`] on a rank-2 tensor.
pub fn bilinear_sample_tensor(img: &Tensor, y: f64, x: f64, fill: f64) -> Result<f64> {
    let (h, w) = img.dims2()?;
    Ok(bilinear_sample(&img.data, h, w, y, x, fill))
}

/// Integer-factor bilinear up-sampling with the half-pixel
/// (align-corners = false) convention.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::param("up-sampling factor must be at least 1"));
    }
    let (c, h, w) = x.dims3()?;
    let (out_h, out_w) = (h * factor, w * factor);
    let f = factor as f64;
    let src_coord = |dst: usize, extent: usize| -> f64 {
        ((dst as f64 + 0.5) / f - 0.5).clamp(0.0, (extent - 1) as f64)
    };
    let ys: Vec<f64> = (0..out_h).map(|d| src_coord(d, h)).collect();
    let xs: Vec<f64> = (0..out_w).map(|d| src_coord(d, w)).collect();

    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        for &sy in &ys {
            for &sx in &xs {
                out.push(bilinear_sample(plane, h, w, sy, sx, 0.0));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
