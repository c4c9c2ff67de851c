//! Dense and ternary matrix types, conv-kernel reshaping and the small amount
//! of linear algebra the rest of the crate is built on.
//!
//! Every type here is immutable once constructed. Constructors validate their
//! invariants (finite entries, ternary codes, nonnegative scales) so the
//! numerical modules can rely on them without re-checking.

use serde::{Deserialize, Serialize};

use crate::error::{FfnError, Result};

/// Row-major `f32` matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let len = checked_len(rows, cols)?;
        if data.len() != len {
            return Err(FfnError::size(format!(
                "{rows}x{cols} matrix needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FfnError::domain(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from `f(row, col)`; non-finite values are rejected.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let len = checked_len(rows, cols)?;
        let mut data = Vec::with_capacity(len);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix::new(rows, cols, data)
    }

    /// Narrows an `f64` buffer to `f32`.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        DenseMatrix::new(rows, cols, data.iter().map(|&v| v as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        DenseMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Squared Frobenius norm, accumulated in `f64`.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn scaled(&self, alpha: f32) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    /// `self * rhs` with `f64` accumulation.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(FfnError::size(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0f64; self.rows * rhs.cols];
        for i in 0..self.rows {
            let acc = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (l, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in acc.iter_mut().zip(rhs.row(l)) {
                    *o += f64::from(a) * f64::from(b);
                }
            }
        }
        DenseMatrix::from_f64(self.rows, rhs.cols, &out)
    }

    /// Squared Frobenius distance `||self - other||^2` in `f64`.
    pub fn distance_sq(&self, other: &DenseMatrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(FfnError::size(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum())
    }
}

fn checked_len(rows: usize, cols: usize) -> Result<usize> {
    rows.checked_mul(cols)
        .filter(|&n| n <= isize::MAX as usize / 4)
        .ok_or_else(|| FfnError::size(format!("{rows}x{cols} overflows")))
}

const CODE_ZERO: u8 = 0b00;
const CODE_PLUS: u8 = 0b01;
const CODE_MINUS: u8 = 0b10;

/// Matrix over {-1, 0, +1} stored at two bits per entry.
///
/// Codes are `00 = 0`, `01 = +1`, `10 = -1`; `11` is invalid. Entry `j` of a
/// row lives in byte `j / 4` at bit offset `2 * (j % 4)` (least significant
/// bits first). Each row starts on a fresh byte; unused trailing bits are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TernaryMatrix {
    rows: usize,
    cols: usize,
    packed: Vec<u8>,
}

impl TernaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TernaryMatrix {
            rows,
            cols,
            packed: vec![0; rows * row_bytes(cols)],
        }
    }

    /// Packs row-major values; each must be -1, 0 or +1.
    pub fn from_values(rows: usize, cols: usize, values: &[i8]) -> Result<Self> {
        let len = checked_len(rows, cols)?;
        if values.len() != len {
            return Err(FfnError::size(format!(
                "{rows}x{cols} ternary matrix needs {len} values, got {}",
                values.len()
            )));
        }
        let stride = row_bytes(cols);
        let mut packed = vec![0u8; rows * stride];
        for (idx, &v) in values.iter().enumerate() {
            let (i, j) = (idx / cols, idx % cols);
            let code = match v {
                0 => CODE_ZERO,
                1 => CODE_PLUS,
                -1 => CODE_MINUS,
                other => {
                    return Err(FfnError::domain(format!(
                        "entry ({i}, {j}) = {other} is not ternary"
                    )))
                }
            };
            packed[i * stride + j / 4] |= code << (2 * (j % 4));
        }
        Ok(TernaryMatrix { rows, cols, packed })
    }

    /// Builds a matrix whose column `j` is `columns[j]` (each of length `rows`).
    pub fn from_columns(rows: usize, columns: &[Vec<i8>]) -> Result<Self> {
        let cols = columns.len();
        let mut values = vec![0i8; rows * cols];
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(FfnError::size(format!(
                    "column {j} has {} entries, expected {rows}",
                    col.len()
                )));
            }
            for (i, &v) in col.iter().enumerate() {
                values[i * cols + j] = v;
            }
        }
        TernaryMatrix::from_values(rows, cols, &values)
    }

    /// Wraps already-packed rows, rejecting code `11` and dirty padding.
    pub fn from_packed(rows: usize, cols: usize, packed: Vec<u8>) -> Result<Self> {
        let stride = row_bytes(cols);
        let expected = rows
            .checked_mul(stride)
            .ok_or_else(|| FfnError::size("packed size overflows"))?;
        if packed.len() != expected {
            return Err(FfnError::size(format!(
                "{rows}x{cols} ternary matrix needs {expected} packed bytes, got {}",
                packed.len()
            )));
        }
        for i in 0..rows {
            for b in 0..stride {
                let byte = packed[i * stride + b];
                for slot in 0..4 {
                    let code = (byte >> (2 * slot)) & 0b11;
                    let j = b * 4 + slot;
                    if j >= cols && code != 0 {
                        return Err(FfnError::data(format!("row {i} has nonzero padding bits")));
                    }
                    if code == 0b11 {
                        return Err(FfnError::data(format!("invalid ternary code 11 at ({i}, {j})")));
                    }
                }
            }
        }
        Ok(TernaryMatrix { rows, cols, packed })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        let byte = self.packed[row * row_bytes(self.cols) + col / 4];
        match (byte >> (2 * (col % 4))) & 0b11 {
            CODE_PLUS => 1,
            CODE_MINUS => -1,
            _ => 0,
        }
    }

    /// Row-major decoded values.
    pub fn values(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn column(&self, col: usize) -> Vec<i8> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.values().into_iter().map(f32::from).collect(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.packed
            .iter()
            .map(|b| (0..4).filter(|s| (b >> (2 * s)) & 0b11 != 0).count())
            .sum()
    }

    pub fn zero_count(&self) -> usize {
        self.rows * self.cols - self.nnz()
    }

    /// Signed index lists of every column, for addition-only accumulation.
    pub fn column_supports(&self) -> Vec<TernarySupport> {
        let mut supports = vec![TernarySupport::default(); self.cols];
        for i in 0..self.rows {
            for (j, support) in supports.iter_mut().enumerate() {
                match self.get(i, j) {
                    1 => support.plus.push(i),
                    -1 => support.minus.push(i),
                    _ => {}
                }
            }
        }
        supports
    }

    /// Signed index lists of every row.
    pub fn row_supports(&self) -> Vec<TernarySupport> {
        (0..self.rows)
            .map(|i| {
                let mut support = TernarySupport::default();
                for j in 0..self.cols {
                    match self.get(i, j) {
                        1 => support.plus.push(j),
                        -1 => support.minus.push(j),
                        _ => {}
                    }
                }
                support
            })
            .collect()
    }
}

/// Positions of the +1 and -1 entries of a ternary vector.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TernarySupport {
    pub plus: Vec<usize>,
    pub minus: Vec<usize>,
}

impl TernarySupport {
    pub fn nnz(&self) -> usize {
        self.plus.len() + self.minus.len()
    }

    /// `sum(input[plus]) - sum(input[minus])`; no multiplications.
    pub fn accumulate(&self, input: &[f64]) -> f64 {
        let pos: f64 = self.plus.iter().map(|&i| input[i]).sum();
        let neg: f64 = self.minus.iter().map(|&i| input[i]).sum();
        pos - neg
    }
}

fn row_bytes(cols: usize) -> usize {
    cols.div_ceil(4)
}

/// Packs a dense matrix whose entries are exactly -1, 0 or +1.
pub fn pack_ternary(m: &DenseMatrix) -> Result<TernaryMatrix> {
    let mut values = Vec::with_capacity(m.data.len());
    for (idx, &v) in m.data.iter().enumerate() {
        let t = if v == 0.0 {
            0
        } else if v == 1.0 {
            1
        } else if v == -1.0 {
            -1
        } else {
            return Err(FfnError::domain(format!(
                "entry ({}, {}) = {v} is not ternary",
                idx / m.cols,
                idx % m.cols
            )));
        };
        values.push(t);
    }
    TernaryMatrix::from_values(m.rows, m.cols, &values)
}

/// Nonnegative diagonal scale, the `D` of a factorization.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalScale {
    values: Vec<f32>,
}

impl DiagonalScale {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(FfnError::domain(format!("scale entry {i} = {v} must be finite and >= 0")));
        }
        Ok(DiagonalScale { values })
    }

    pub fn zeros(k: usize) -> Self {
        DiagonalScale { values: vec![0.0; k] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|&v| f64::from(v)).sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

/// Shape metadata of a conv or fully-connected layer.
///
/// `in_channels` and `out_channels` are totals across groups. For fc layers
/// the kernel and output sizes are all 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: LayerKind,
    #[serde(default = "one")]
    pub kernel_w: usize,
    #[serde(default = "one")]
    pub kernel_h: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub out_w: usize,
    #[serde(default = "one")]
    pub out_h: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub has_bias: bool,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
}

fn one() -> usize {
    1
}

impl LayerDescriptor {
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        out_h: usize,
        out_w: usize,
        groups: usize,
    ) -> Self {
        LayerDescriptor {
            name: None,
            kind: LayerKind::Conv,
            kernel_w,
            kernel_h,
            in_channels,
            out_channels,
            out_w,
            out_h,
            groups,
            has_bias: false,
            stride: 1,
            pad: 0,
        }
    }

    pub fn fc(in_features: usize, out_features: usize) -> Self {
        LayerDescriptor {
            kind: LayerKind::Fc,
            ..LayerDescriptor::conv(1, 1, in_features, out_features, 1, 1, 1)
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_padding(mut self, stride: usize, pad: usize) -> Self {
        self.stride = stride;
        self.pad = pad;
        self
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{:?}", self.kind).to_lowercase())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.kernel_w,
            self.kernel_h,
            self.in_channels,
            self.out_channels,
            self.out_w,
            self.out_h,
            self.groups,
            self.stride,
        ];
        if counts.contains(&0) {
            return Err(FfnError::config(format!("layer {}: all counts must be >= 1", self.label())));
        }
        if self.kind == LayerKind::Fc
            && (self.kernel_w, self.kernel_h, self.out_w, self.out_h, self.groups) != (1, 1, 1, 1, 1)
        {
            return Err(FfnError::config(format!(
                "layer {}: fc layers have unit kernel, output and groups",
                self.label()
            )));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(FfnError::config(format!(
                "layer {}: groups = {} must divide channels {} and {}",
                self.label(),
                self.groups,
                self.in_channels,
                self.out_channels
            )));
        }
        Ok(())
    }

    /// Rows of one group's weight matrix: `w * h * c / groups`.
    pub fn group_rows(&self) -> usize {
        self.kernel_w * self.kernel_h * (self.in_channels / self.groups)
    }

    /// Columns of one group's weight matrix: `n / groups`.
    pub fn group_cols(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn out_positions(&self) -> usize {
        self.out_w * self.out_h
    }

    /// Weight count across all groups.
    pub fn params(&self) -> usize {
        self.group_rows() * self.group_cols() * self.groups
    }
}

/// Conv kernel in filter-major order: `data[((o * c + ic) * kh + ih) * kw + iw]`.
///
/// `in_channels` is the per-group channel count, as in a grouped conv.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub data: Vec<f32>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let len = [out_channels, in_channels, kernel_h, kernel_w]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FfnError::size("kernel size overflows"))?;
        if len == 0 {
            return Err(FfnError::size("kernel dimensions must be positive"));
        }
        if data.len() != len {
            return Err(FfnError::size(format!(
                "kernel {out_channels}x{in_channels}x{kernel_h}x{kernel_w} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(ConvKernel {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            data,
        })
    }

    fn index(&self, o: usize, ic: usize, ih: usize, iw: usize) -> usize {
        ((o * self.in_channels + ic) * self.kernel_h + ih) * self.kernel_w + iw
    }

    /// Rows of the reshaped matrix.
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Row of the reshaped matrix holding kernel tap `(ih, iw, ic)`.
///
/// The order is height-major, then width, then channel.
pub fn flat_index(ih: usize, iw: usize, ic: usize, kernel_w: usize, channels: usize) -> usize {
    (ih * kernel_w + iw) * channels + ic
}

/// Reshapes a kernel into an `m x n` matrix whose column `j` is filter `j`.
pub fn reshape_conv_to_matrix(kernel: &ConvKernel) -> Result<DenseMatrix> {
    let m = kernel.filter_len();
    let n = kernel.out_channels;
    let mut data = vec![0.0f32; checked_len(m, n)?];
    for o in 0..n {
        for ic in 0..kernel.in_channels {
            for ih in 0..kernel.kernel_h {
                for iw in 0..kernel.kernel_w {
                    let r = flat_index(ih, iw, ic, kernel.kernel_w, kernel.in_channels);
                    data[r * n + o] = kernel.data[kernel.index(o, ic, ih, iw)];
                }
            }
        }
    }
    DenseMatrix::new(m, n, data)
}

/// Inverse of [`reshape_conv_to_matrix`].
pub fn unreshape_matrix_to_conv(
    matrix: &DenseMatrix,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
) -> Result<ConvKernel> {
    if in_channels * kernel_h * kernel_w != matrix.rows() {
        return Err(FfnError::size(format!(
            "matrix has {} rows, kernel {in_channels}x{kernel_h}x{kernel_w} needs {}",
            matrix.rows(),
            in_channels * kernel_h * kernel_w
        )));
    }
    let n = matrix.cols();
    let mut kernel = ConvKernel::new(
        n,
        in_channels,
        kernel_h,
        kernel_w,
        vec![0.0; matrix.data().len()],
    )?;
    for o in 0..n {
        for ic in 0..in_channels {
            for ih in 0..kernel_h {
                for iw in 0..kernel_w {
                    let r = flat_index(ih, iw, ic, kernel_w, in_channels);
                    let idx = kernel.index(o, ic, ih, iw);
                    kernel.data[idx] = matrix.get(r, o);
                }
            }
        }
    }
    Ok(kernel)
}

/// `X diag(D) Y^T` as a sum of `k` scaled outer products (f64 accumulation).
pub fn factor_product(x: &TernaryMatrix, d: &DiagonalScale, y: &TernaryMatrix) -> Result<DenseMatrix> {
    let (m, n) = check_factor_shapes(x, d, y)?;
    let scales: Vec<f64> = d.values().iter().map(|&v| f64::from(v)).collect();
    let acc = outer_sum(m, n, &x.values(), &scales, &y.values());
    DenseMatrix::from_f64(m, n, &acc)
}

pub(crate) fn check_factor_shapes(
    x: &TernaryMatrix,
    d: &DiagonalScale,
    y: &TernaryMatrix,
) -> Result<(usize, usize)> {
    let k = d.len();
    if x.cols() != k || y.cols() != k {
        return Err(FfnError::size(format!(
            "factor shapes disagree: X {:?}, D {}, Y {:?}",
            x.shape(),
            k,
            y.shape()
        )));
    }
    Ok((x.rows(), y.rows()))
}

/// `sum_t s_t * x[:, t] y[:, t]^T` for row-major `m x k` and `n x k` factors.
pub(crate) fn outer_sum<A, B>(m: usize, n: usize, x: &[A], scales: &[f64], y: &[B]) -> Vec<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    let k = scales.len();
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        let row = &mut acc[i * n..(i + 1) * n];
        for t in 0..k {
            let xs: f64 = x[i * k + t].into() * scales[t];
            if xs == 0.0 {
                continue;
            }
            for (j, out) in row.iter_mut().enumerate() {
                *out += xs * y[j * k + t].into();
            }
        }
    }
    acc
}

/// `||W - X D Y^T||_F^2 / ||W||_F^2`.
pub fn approx_error(w: &DenseMatrix, x: &TernaryMatrix, d: &DiagonalScale, y: &TernaryMatrix) -> Result<f64> {
    let (m, n) = check_factor_shapes(x, d, y)?;
    if (m, n) != w.shape() {
        return Err(FfnError::size(format!(
            "W is {:?} but factors give {m}x{n}",
            w.shape()
        )));
    }
    let denom = w.frobenius_sq();
    if denom == 0.0 {
        return Err(FfnError::domain("approximation error undefined for zero-norm W"));
    }
    let scales: Vec<f64> = d.values().iter().map(|&v| f64::from(v)).collect();
    let approx = outer_sum(m, n, &x.values(), &scales, &y.values());
    let num: f64 = w
        .data()
        .iter()
        .zip(&approx)
        .map(|(&a, &b)| (f64::from(a) - b).powi(2))
        .sum();
    Ok(num / denom)
}
