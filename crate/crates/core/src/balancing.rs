//! Weight balancing of recovered factors.
//!
//! `X^ D Y^^T` is rescaled to `X~ D~ Y~^T` with
//!
//! ```text
//! X~ = lambda_x X^,   lambda_x = phi / sqrt(m + k)
//! Y~ = lambda_y Y^,   lambda_y = phi / sqrt(n + k)
//! D~ = D / (lambda_x lambda_y),   mean(D~) = 1
//! ```
//!
//! The last two conditions fix `lambda_x lambda_y = mean(D)`, so
//! `phi^2 = mean(D) sqrt((m + k)(n + k))` and the whole system has a closed
//! form. The represented matrix is unchanged.

use crate::error::{FfnError, Result};
use crate::tensor::{DenseMatrix, DiagonalScale};

#[derive(Clone, Debug, PartialEq)]
pub struct BalancedFactors {
    pub x: DenseMatrix,
    pub y: DenseMatrix,
    pub d: DiagonalScale,
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub phi: f64,
}

/// Balance scales for an `m x k` / `n x k` factor pair with mean scale `mean_d`.
pub fn balance_scales(m: usize, n: usize, k: usize, mean_d: f64) -> Result<(f64, f64, f64)> {
    if !(mean_d > 0.0) || !mean_d.is_finite() {
        return Err(FfnError::domain(format!(
            "cannot balance a decomposition with mean(D) = {mean_d}"
        )));
    }
    let mk = (m + k) as f64;
    let nk = (n + k) as f64;
    let phi = (mean_d * (mk * nk).sqrt()).sqrt();
    Ok((phi / mk.sqrt(), phi / nk.sqrt(), phi))
}

pub fn balance(x_hat: &DenseMatrix, d: &DiagonalScale, y_hat: &DenseMatrix) -> Result<BalancedFactors> {
    let k = d.len();
    if x_hat.cols() != k || y_hat.cols() != k {
        return Err(FfnError::size(format!(
            "cannot balance X {:?}, D {k}, Y {:?}",
            x_hat.shape(),
            y_hat.shape()
        )));
    }
    let (lambda_x, lambda_y, phi) = balance_scales(x_hat.rows(), y_hat.rows(), k, d.mean())?;
    let inv = 1.0 / (lambda_x * lambda_y);
    Ok(BalancedFactors {
        x: scale(x_hat, lambda_x)?,
        y: scale(y_hat, lambda_y)?,
        d: DiagonalScale::new(d.values().iter().map(|&v| (f64::from(v) * inv) as f32).collect())?,
        lambda_x,
        lambda_y,
        phi,
    })
}

/// Undoes [`balance`], returning `(X^, D, Y^)`.
pub fn unbalance(b: &BalancedFactors) -> Result<(DenseMatrix, DiagonalScale, DenseMatrix)> {
    if !(b.lambda_x > 0.0 && b.lambda_y > 0.0) {
        return Err(FfnError::domain("balance scales must be positive"));
    }
    let prod = b.lambda_x * b.lambda_y;
    Ok((
        scale(&b.x, 1.0 / b.lambda_x)?,
        DiagonalScale::new(b.d.values().iter().map(|&v| (f64::from(v) * prod) as f32).collect())?,
        scale(&b.y, 1.0 / b.lambda_y)?,
    ))
}

fn scale(m: &DenseMatrix, s: f64) -> Result<DenseMatrix> {
    DenseMatrix::new(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| (f64::from(v) * s) as f32).collect(),
    )
}

/// `X diag(D) Y^T` for dense factors, in `f64`.
pub fn dense_factor_product(x: &DenseMatrix, d: &DiagonalScale, y: &DenseMatrix) -> Vec<f64> {
    let scales: Vec<f64> = d.values().iter().map(|&v| f64::from(v)).collect();
    crate::tensor::outer_sum(x.rows(), y.rows(), x.data(), &scales, y.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recovery::{quantize, quantize_scaled};
    use proptest::prelude::*;

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn square_case_collapses() {
        let x = DenseMatrix::new(2, 2, vec![1.0, 0.2, -0.9, 1.1]).unwrap();
        let y = DenseMatrix::new(2, 2, vec![0.8, -1.0, 0.3, 1.2]).unwrap();
        let d = DiagonalScale::new(vec![0.01, 0.03]).unwrap();
        let b = balance(&x, &d, &y).unwrap();
        let root = d.mean().sqrt();
        assert!((root - 0.02f64.sqrt()).abs() < 1e-8);
        assert!((b.lambda_x - root).abs() < 1e-12);
        assert!((b.lambda_y - root).abs() < 1e-12);
        assert!((f64::from(b.d.values()[0]) - 0.5).abs() < 1e-6);
        assert!((f64::from(b.d.values()[1]) - 1.5).abs() < 1e-6);
    }

    #[test]
    fn identity_scale_square_is_identity() {
        let x = DenseMatrix::new(3, 3, vec![1.0, 0.0, -1.0, 0.6, 1.3, 0.0, -0.7, 0.2, 1.0]).unwrap();
        let d = DiagonalScale::new(vec![1.0; 3]).unwrap();
        let b = balance(&x, &d, &x).unwrap();
        assert_eq!(b.lambda_x, 1.0);
        assert_eq!(b.lambda_y, 1.0);
        assert_eq!(b.x, x);
        assert_eq!(b.d, d);
    }

    #[test]
    fn six_by_two_by_hand() {
        // m=6, n=2, k=2: lambda_x lambda_y = 0.03, lambda_x / lambda_y = sqrt(4/8)
        let x = DenseMatrix::new(6, 2, vec![1.0; 12]).unwrap();
        let y = DenseMatrix::new(2, 2, vec![1.0; 4]).unwrap();
        let d = DiagonalScale::new(vec![0.02, 0.04]).unwrap();
        let b = balance(&x, &d, &y).unwrap();
        assert!((b.lambda_x * b.lambda_y - 0.03).abs() < 1e-8);
        assert!((b.lambda_x / b.lambda_y - 0.5f64.sqrt()).abs() < 1e-9);
        // lambda_y^2 = 0.03 * sqrt(2) -> lambda_y = 0.2060..., lambda_x = 0.1456...
        assert!((b.lambda_y - (0.03 * 2f64.sqrt()).sqrt()).abs() < 1e-8);
        assert!((f64::from(b.d.values()[0]) - 2.0 / 3.0).abs() < 1e-6);
        assert!((f64::from(b.d.values()[1]) - 4.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_scale_is_domain_error() {
        let x = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
        assert!(matches!(
            balance(&x, &DiagonalScale::zeros(1), &x),
            Err(FfnError::Domain(_))
        ));
    }

    #[test]
    fn unit_lambdas_unbalance_to_identity() {
        let x = DenseMatrix::new(2, 1, vec![0.7, -1.2]).unwrap();
        let y = DenseMatrix::new(1, 1, vec![1.1]).unwrap();
        let d = DiagonalScale::new(vec![0.4]).unwrap();
        let b = BalancedFactors { x: x.clone(), y: y.clone(), d: d.clone(), lambda_x: 1.0, lambda_y: 1.0, phi: 1.0 };
        assert_eq!(unbalance(&b).unwrap(), (x, d, y));
    }

    fn factors(m: usize, n: usize, k: usize) -> impl Strategy<Value = (DenseMatrix, DiagonalScale, DenseMatrix)> {
        (
            proptest::collection::vec(-1.499f32..1.499, m * k),
            proptest::collection::vec(1e-5f32..1e-2, k),
            proptest::collection::vec(-1.499f32..1.499, n * k),
        )
            .prop_map(move |(x, d, y)| {
                (
                    DenseMatrix::new(m, k, x).unwrap(),
                    DiagonalScale::new(d).unwrap(),
                    DenseMatrix::new(n, k, y).unwrap(),
                )
            })
    }

    proptest! {
        #[test]
        fn balancing_invariants((x, d, y) in (1usize..12, 1usize..6, 1usize..5).prop_flat_map(|(m, n, k)| factors(m, n, k))) {
            let (m, n, k) = (x.rows(), y.rows(), d.len());
            let b = balance(&x, &d, &y).unwrap();
            let before = dense_factor_product(&x, &d, &y);
            let after = dense_factor_product(&b.x, &b.d, &b.y);
            prop_assume!(before.iter().any(|v| *v != 0.0));
            prop_assert!(rel_diff(&after, &before) < 1e-5);
            prop_assert!((b.d.mean() - 1.0).abs() < 1e-6);
            prop_assert!((b.lambda_x * ((m + k) as f64).sqrt() - b.phi).abs() < 1e-6);
            prop_assert!((b.lambda_y * ((n + k) as f64).sqrt() - b.phi).abs() < 1e-6);

            let (x2, d2, y2) = unbalance(&b).unwrap();
            for (a, e) in x2.data().iter().zip(x.data()).chain(y2.data().iter().zip(y.data())) {
                prop_assert!((a - e).abs() <= 1e-6 * e.abs().max(1e-3));
            }
            for (a, e) in d2.values().iter().zip(d.values()) {
                prop_assert!((a - e).abs() <= 1e-6 * e.abs());
            }
        }

        #[test]
        fn scaled_quantizer_sees_same_pattern(
            raw in proptest::collection::vec(-1.499f32..1.499, 1..30),
            dv in 1e-4f32..1.0,
        ) {
            // keep entries away from the +/-0.5 thresholds, as recovery does
            let xs: Vec<f32> = raw.iter().map(|&v| if (v.abs() - 0.5).abs() < 1e-3 { v * 0.9 } else { v }).collect();
            let x = DenseMatrix::new(xs.len(), 1, xs).unwrap();
            let y = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
            let d = DiagonalScale::new(vec![dv]).unwrap();
            let b = balance(&x, &d, &y).unwrap();
            let lx = b.lambda_x as f32;
            let lhs = quantize_scaled(&b.x, lx).unwrap();
            let rhs = quantize(&x).matrix.to_dense().scaled(lx);
            prop_assert_eq!(lhs, rhs);
        }
    }
}
