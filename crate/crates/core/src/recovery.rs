//! Pseudo full-precision recovery of ternary factors, and the quantizers
//! that map full-precision factors back to ternary values.
//!
//! Given `W ~ X D Y^T`, recovery looks for real `X^`, `Y^` that fit `W`
//! better while still quantizing to exactly `X` and `Y`. Each entry of `X^`
//! is confined to the box `[X - 0.5 + eps, X + 0.5 - eps]` (which also keeps
//! it inside `[-1.5, 1.5]`), and likewise for `Y^`. `D` is held fixed.
//!
//! The problem is solved by alternation. With `Y^` fixed, the rows of `X^`
//! decouple into small box-constrained least-squares problems
//!
//! ```text
//! min_x  || w_i - (Y^ D) x ||^2   s.t.  lo <= x <= hi
//! ```
//!
//! each solved by cyclic coordinate descent with exact, clipped 1-D updates.
//! The same is then done for `Y^` with `X^` fixed.

use crate::error::{FfnError, Result};
use crate::tensor::{check_factor_shapes, DenseMatrix, DiagonalScale, TernaryMatrix};

/// Magnitude beyond which full-precision factors are clipped.
pub const CLIP: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryOptions {
    /// Margin shrinking the open box `|X^ - X| < 0.5` to `<= 0.5 - epsilon`.
    pub epsilon: f64,
    pub als_sweeps_max: usize,
    pub cd_passes_max: usize,
    /// Relative objective change below which alternation stops.
    pub tol: f64,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            epsilon: 1e-3,
            als_sweeps_max: 50,
            cd_passes_max: 10,
            tol: 1e-6,
        }
    }
}

impl RecoveryOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(FfnError::config(format!(
                "epsilon = {} must lie in (0, 0.5)",
                self.epsilon
            )));
        }
        if self.als_sweeps_max == 0 || self.cd_passes_max == 0 {
            return Err(FfnError::config("recovery iteration caps must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(FfnError::config("recovery tol must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredFactors {
    pub x_hat: DenseMatrix,
    pub y_hat: DenseMatrix,
    /// `||W - X^ D Y^^T||_F^2`, starting at `X^ = X`, `Y^ = Y`.
    pub objective_history: Vec<f64>,
}

impl RecoveredFactors {
    pub fn final_objective(&self) -> f64 {
        *self.objective_history.last().expect("history starts with the initial objective")
    }
}

/// Ternary quantizer: `+1` above 0.5, `-1` below -0.5, `0` on `[-0.5, 0.5]`.
pub fn quantize_value(a: f64) -> i8 {
    if a > 0.5 {
        1
    } else if a < -0.5 {
        -1
    } else {
        0
    }
}

/// Quantized matrix plus the number of entries that had to be clipped into
/// `(-1.5, 1.5)` first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quantized {
    pub matrix: TernaryMatrix,
    pub clipped: usize,
}

pub fn quantize(a: &DenseMatrix) -> Quantized {
    let mut clipped = 0;
    let values: Vec<i8> = a
        .data()
        .iter()
        .map(|&v| {
            let v = f64::from(v);
            if v.abs() >= CLIP {
                clipped += 1;
            }
            quantize_value(v.clamp(-CLIP, CLIP))
        })
        .collect();
    Quantized {
        matrix: TernaryMatrix::from_values(a.rows(), a.cols(), &values)
            .expect("quantizer output is ternary"),
        clipped,
    }
}

/// Scaled quantizer: `+lambda` above `0.5 lambda`, `-lambda` below
/// `-0.5 lambda`, else 0.
pub fn quantize_scaled_value(a: f64, lambda: f64) -> f64 {
    let half = 0.5 * lambda;
    if a > half {
        lambda
    } else if a < -half {
        -lambda
    } else {
        0.0
    }
}

pub fn quantize_scaled(a: &DenseMatrix, lambda: f32) -> Result<DenseMatrix> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(FfnError::domain(format!("lambda = {lambda} must be positive")));
    }
    let data = a
        .data()
        .iter()
        .map(|&v| quantize_scaled_value(f64::from(v), f64::from(lambda)) as f32)
        .collect();
    DenseMatrix::new(a.rows(), a.cols(), data)
}

/// Feasible box for a ternary value with margin `eps`.
pub fn recovery_box(t: i8, eps: f64) -> (f64, f64) {
    let c = f64::from(t);
    ((c - 0.5 + eps).max(-CLIP), (c + 0.5 - eps).min(CLIP))
}

fn objective(w: &[f64], m: usize, n: usize, x: &[f64], d: &[f64], y: &[f64]) -> f64 {
    let approx = crate::tensor::outer_sum(m, n, x, d, y);
    w.iter().zip(&approx).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Updates every row of `var` (`rows x k`) against `target` (`rows x cols`)
/// with `fixed` (`cols x k`) and scales `d` held constant.
#[allow(clippy::too_many_arguments)]
fn half_sweep(
    target: &[f64],
    rows: usize,
    cols: usize,
    fixed: &[f64],
    d: &[f64],
    var: &mut [f64],
    bounds: &[(f64, f64)],
    passes: usize,
) {
    let k = d.len();
    // A = fixed * diag(d), G = A^T A
    let a: Vec<f64> = fixed
        .chunks_exact(k)
        .flat_map(|row| row.iter().zip(d).map(|(v, s)| v * s))
        .collect();
    let mut g = vec![0.0; k * k];
    for row in a.chunks_exact(k) {
        for p in 0..k {
            if row[p] == 0.0 {
                continue;
            }
            for q in 0..k {
                g[p * k + q] += row[p] * row[q];
            }
        }
    }
    let mut b = vec![0.0; k];
    for i in 0..rows {
        let t_row = &target[i * cols..(i + 1) * cols];
        b.iter_mut().for_each(|v| *v = 0.0);
        for (j, &t) in t_row.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            for (bp, &ap) in b.iter_mut().zip(&a[j * k..(j + 1) * k]) {
                *bp += t * ap;
            }
        }
        let x = &mut var[i * k..(i + 1) * k];
        let bx = &bounds[i * k..(i + 1) * k];
        for _ in 0..passes {
            let mut moved = 0.0f64;
            for p in 0..k {
                let gpp = g[p * k + p];
                if gpp <= 0.0 {
                    continue;
                }
                let off: f64 = (0..k).filter(|&q| q != p).map(|q| g[p * k + q] * x[q]).sum();
                let next = ((b[p] - off) / gpp).clamp(bx[p].0, bx[p].1);
                moved = moved.max((next - x[p]).abs());
                x[p] = next;
            }
            if moved <= 1e-14 {
                break;
            }
        }
    }
}

/// Recovers `X^`, `Y^` for the factorization `W ~ X D Y^T`.
pub fn recover(
    w: &DenseMatrix,
    x: &TernaryMatrix,
    d: &DiagonalScale,
    y: &TernaryMatrix,
    opts: &RecoveryOptions,
) -> Result<RecoveredFactors> {
    opts.validate()?;
    let (m, n) = check_factor_shapes(x, d, y)?;
    if w.shape() != (m, n) {
        return Err(FfnError::size(format!(
            "W is {:?} but factors give {m}x{n}",
            w.shape()
        )));
    }
    let k = d.len();
    let target = w.to_f64();
    let target_t = w.transpose().to_f64();
    let scales: Vec<f64> = d.values().iter().map(|&v| f64::from(v)).collect();
    let xb: Vec<(f64, f64)> = x.values().iter().map(|&t| recovery_box(t, opts.epsilon)).collect();
    let yb: Vec<(f64, f64)> = y.values().iter().map(|&t| recovery_box(t, opts.epsilon)).collect();

    let mut xh: Vec<f64> = x.values().iter().map(|&t| f64::from(t)).collect();
    let mut yh: Vec<f64> = y.values().iter().map(|&t| f64::from(t)).collect();
    let mut history = vec![objective(&target, m, n, &xh, &scales, &yh)];

    for _ in 0..opts.als_sweeps_max {
        let prev = *history.last().unwrap();
        if prev == 0.0 {
            break;
        }
        let (saved_x, saved_y) = (xh.clone(), yh.clone());
        half_sweep(&target, m, n, &yh, &scales, &mut xh, &xb, opts.cd_passes_max);
        half_sweep(&target_t, n, m, &xh, &scales, &mut yh, &yb, opts.cd_passes_max);
        let obj = objective(&target, m, n, &xh, &scales, &yh);
        if obj > prev {
            xh = saved_x;
            yh = saved_y;
            break;
        }
        history.push(obj);
        if (prev - obj) / prev < opts.tol {
            break;
        }
    }

    let x_hat = narrow_into_box(m, k, &xh, &xb, opts.epsilon)?;
    let y_hat = narrow_into_box(n, k, &yh, &yb, opts.epsilon)?;
    debug_assert_eq!(quantize(&x_hat).matrix, *x);
    debug_assert_eq!(quantize(&y_hat).matrix, *y);
    Ok(RecoveredFactors {
        x_hat,
        y_hat,
        objective_history: history,
    })
}

fn narrow_into_box(rows: usize, cols: usize, v: &[f64], bounds: &[(f64, f64)], eps: f64) -> Result<DenseMatrix> {
    let data: Vec<f32> = v
        .iter()
        .zip(bounds)
        .map(|(&val, &(lo, hi))| {
            assert!(lo <= hi, "empty recovery box with epsilon {eps}");
            let mut f = val.clamp(lo, hi) as f32;
            // rounding to f32 may step just outside the box
            while f64::from(f) < lo {
                f = f.next_up();
            }
            while f64::from(f) > hi {
                f = f.next_down();
            }
            f
        })
        .collect();
    DenseMatrix::new(rows, cols, data)
}

/// `||W - X^ D Y^^T||_F^2` evaluated on the `f32` factors.
pub fn recovered_objective(w: &DenseMatrix, rec: &RecoveredFactors, d: &DiagonalScale) -> Result<f64> {
    let (m, n) = w.shape();
    let scales: Vec<f64> = d.values().iter().map(|&v| f64::from(v)).collect();
    if rec.x_hat.shape() != (m, d.len()) || rec.y_hat.shape() != (n, d.len()) {
        return Err(FfnError::size("recovered factors do not match W and D"));
    }
    Ok(objective(
        &w.to_f64(),
        m,
        n,
        &rec.x_hat.to_f64(),
        &scales,
        &rec.y_hat.to_f64(),
    ))
}
