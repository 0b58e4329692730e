//! Dense rank-5 video features, matrices, and the primitive operations the
//! non-local and pyramid blocks are assembled from.
//!
//! Layout is row-major `B,T,H,W,C` with channels fastest. Values are stored as
//! `f64`; a [`DType::F32`] tensor rounds every produced element to binary32.

pub mod io;
pub mod kernels;
pub mod tape;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PnlError, Result};
use kernels::Dims5;

pub use tape::{Adjoints, GradTape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn round_all(self, data: &mut [f64]) {
        if self == DType::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Tag used by the PNLT container.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = PnlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "binary32" => Ok(DType::F32),
            "f64" | "binary64" => Ok(DType::F64),
            other => Err(PnlError::config(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Shape of a [`VideoFeature`]: batch, frames, rows, cols, channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape5 {
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape5 {
    pub fn new(b: usize, t: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        let s = Shape5 { b, t, h, w, c };
        if s.dims().contains(&0) {
            return Err(PnlError::shape(format!("all dims must be >= 1, got {s}")));
        }
        Ok(s)
    }

    pub fn dims(&self) -> Dims5 {
        [self.b, self.t, self.h, self.w, self.c]
    }

    pub fn from_dims(d: &[usize]) -> Result<Self> {
        match d {
            [b, t, h, w, c] => Shape5::new(*b, *t, *h, *w, *c),
            _ => Err(PnlError::shape(format!("expected rank 5, got rank {}", d.len()))),
        }
    }

    pub fn numel(&self) -> usize {
        self.b * self.t * self.h * self.w * self.c
    }

    /// Spatiotemporal position count `T·H·W`.
    pub fn positions(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape5 { c, ..self }
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{},{})", self.b, self.t, self.h, self.w, self.c)
    }
}

/// Dense `B×T×H×W×C` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeature {
    shape: Shape5,
    dtype: DType,
    data: Vec<f64>,
}

impl VideoFeature {
    pub fn new(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, DType::F64, data)
    }

    pub fn with_dtype(shape: Shape5, dtype: DType, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(PnlError::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        dtype.round_all(&mut data);
        Ok(VideoFeature { shape, dtype, data })
    }

    pub fn zeros(shape: Shape5) -> Self {
        VideoFeature {
            shape,
            dtype: DType::F64,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn filled(shape: Shape5, value: f64) -> Self {
        VideoFeature {
            shape,
            dtype: DType::F64,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape5, mut f: impl FnMut(usize, usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b {
            for t in 0..shape.t {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        for c in 0..shape.c {
                            data.push(f(b, t, h, w, c));
                        }
                    }
                }
            }
        }
        VideoFeature {
            shape,
            dtype: DType::F64,
            data,
        }
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape5, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        VideoFeature {
            shape,
            dtype: DType::F64,
            data,
        }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn cast(&self, dtype: DType) -> Self {
        let mut data = self.data.clone();
        dtype.round_all(&mut data);
        VideoFeature {
            shape: self.shape,
            dtype,
            data,
        }
    }

    #[inline]
    pub fn index(&self, b: usize, t: usize, h: usize, w: usize, c: usize) -> usize {
        kernels::offset5(&self.shape.dims(), b, t, h, w, c)
    }

    pub fn get(&self, b: usize, t: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.index(b, t, h, w, c)]
    }

    /// Channel vector at one position.
    pub fn at(&self, b: usize, t: usize, h: usize, w: usize) -> &[f64] {
        let i = self.index(b, t, h, w, 0);
        &self.data[i..i + self.shape.c]
    }

    /// Batch item `b` viewed as an `N×C` matrix.
    pub fn batch_matrix(&self, b: usize) -> Matrix {
        let n = self.shape.positions() * self.shape.c;
        Matrix {
            rows: self.shape.positions(),
            cols: self.shape.c,
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &VideoFeature) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &VideoFeature) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Shape5, dtype: DType, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        VideoFeature { shape, dtype, data }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(PnlError::shape(format!("matrix dims must be >= 1, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(PnlError::shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(PnlError::shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data: kernels::matmul(&a.data, &b.data, a.rows, a.cols, b.cols),
    })
}

/// Softmax over each row.
pub fn softmax_lastdim(m: &Matrix) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: kernels::softmax_rows(&m.data, m.cols),
    }
}

/// Per-position linear map over the channel axis (a 1×1×1 convolution).
pub fn channel_linear(x: &VideoFeature, w: &Matrix, bias: Option<&[f64]>) -> Result<VideoFeature> {
    if x.shape.c != w.rows {
        return Err(PnlError::shape(format!(
            "channel_linear: input {} has {} channels, weight is {}x{}",
            x.shape, x.shape.c, w.rows, w.cols
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.cols {
            return Err(PnlError::shape(format!(
                "channel_linear: bias length {} for {} output channels",
                b.len(),
                w.cols
            )));
        }
    }
    let rows = x.data.len() / x.shape.c;
    let mut data = kernels::matmul(&x.data, &w.data, rows, w.rows, w.cols);
    if let Some(b) = bias {
        for row in data.chunks_mut(w.cols) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    x.dtype.round_all(&mut data);
    Ok(VideoFeature::from_parts(x.shape.with_channels(w.cols), x.dtype, data))
}

fn check_pool_factor(x: &VideoFeature, factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(PnlError::config(format!("pool factor must be a power of two, got {factor}")));
    }
    if !x.shape.h.is_multiple_of(factor) || !x.shape.w.is_multiple_of(factor) {
        return Err(PnlError::config(format!(
            "spatial dims {}x{} not divisible by pool factor {factor}",
            x.shape.h, x.shape.w
        )));
    }
    Ok(())
}

fn pooled_shape(s: Shape5, factor: usize) -> Shape5 {
    Shape5 {
        h: s.h / factor,
        w: s.w / factor,
        ..s
    }
}

/// Mean over non-overlapping `factor×factor` spatial windows.
pub fn avg_pool_spatial(x: &VideoFeature, factor: usize) -> Result<VideoFeature> {
    check_pool_factor(x, factor)?;
    let mut data = kernels::avg_pool(&x.data, &x.shape.dims(), factor);
    x.dtype.round_all(&mut data);
    Ok(VideoFeature::from_parts(pooled_shape(x.shape, factor), x.dtype, data))
}

/// Max over non-overlapping `factor×factor` spatial windows.
pub fn max_pool_spatial(x: &VideoFeature, factor: usize) -> Result<VideoFeature> {
    check_pool_factor(x, factor)?;
    let (data, _) = kernels::max_pool(&x.data, &x.shape.dims(), factor);
    Ok(VideoFeature::from_parts(pooled_shape(x.shape, factor), x.dtype, data))
}

/// Replicates every spatial cell into a `factor×factor` block.
pub fn upsample_nearest_spatial(x: &VideoFeature, factor: usize) -> Result<VideoFeature> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(PnlError::config(format!(
            "upsample factor must be a power of two, got {factor}"
        )));
    }
    let shape = Shape5 {
        h: x.shape.h * factor,
        w: x.shape.w * factor,
        ..x.shape
    };
    let data = kernels::upsample(&x.data, &x.shape.dims(), factor);
    Ok(VideoFeature::from_parts(shape, x.dtype, data))
}

/// Splits the channel axis into `n` contiguous groups.
pub fn split_channels(x: &VideoFeature, n: usize) -> Result<Vec<VideoFeature>> {
    if n < 2 {
        return Err(PnlError::config(format!("channel groups must be > 1, got {n}")));
    }
    if !x.shape.c.is_multiple_of(n) {
        return Err(PnlError::config(format!(
            "{} channels not divisible into {n} groups",
            x.shape.c
        )));
    }
    let width = x.shape.c / n;
    Ok((0..n)
        .map(|i| {
            let data = kernels::slice_cols(&x.data, x.shape.c, i * width, width);
            VideoFeature::from_parts(x.shape.with_channels(width), x.dtype, data)
        })
        .collect())
}

/// Concatenates features along the channel axis in list order.
pub fn concat_channels(parts: &[VideoFeature]) -> Result<VideoFeature> {
    let first = parts
        .first()
        .ok_or_else(|| PnlError::shape("concat_channels of an empty list"))?;
    let base = first.shape;
    for p in parts {
        let s = p.shape;
        if (s.b, s.t, s.h, s.w) != (base.b, base.t, base.h, base.w) {
            return Err(PnlError::shape(format!("concat_channels: {base} vs {s}")));
        }
        if p.dtype != first.dtype {
            return Err(PnlError::shape("concat_channels: mixed dtypes"));
        }
    }
    let rows = base.b * base.positions();
    let slices: Vec<(&[f64], usize)> = parts.iter().map(|p| (p.data.as_slice(), p.shape.c)).collect();
    let data = kernels::concat_cols(&slices, rows);
    let c = parts.iter().map(|p| p.shape.c).sum();
    Ok(VideoFeature::from_parts(base.with_channels(c), first.dtype, data))
}
