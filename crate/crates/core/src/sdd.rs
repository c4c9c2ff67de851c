//! Semidiscrete decomposition with cyclic refinement.
//!
//! `W ~ sum_i d_i x_i y_i^T` with ternary `x_i`, `y_i` and `d_i >= 0`. Terms
//! are first fitted greedily against the running residual, then revisited in
//! outer sweeps: each term is refitted against the residual of all the
//! others by alternating the two ternary subproblems.
//!
//! All arithmetic runs in `f64`. Scales are rounded to `f32` as soon as they
//! are computed so the residual tracked internally is the residual of the
//! factors that are returned.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FfnError, Result};
use crate::tensor::{DenseMatrix, DiagonalScale, TernaryMatrix};

/// How the starting `y` of every term is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitPolicy {
    /// Quantized right singular vectors of `W`, scaled to unit max-abs.
    SvdSign,
    /// Uniform draws from {-1, 0, +1}, seeded.
    RandomTernary,
}

/// Where a refinement sweep starts the alternation for a term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineStart {
    /// From the term's current `y`.
    Reuse,
    /// From the term's initial `y`.
    Reinitialize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SddOptions {
    pub k: usize,
    pub outer_iters_max: usize,
    pub inner_iters_max: usize,
    /// Outer sweeps stop once the relative residual improvement drops below this.
    pub tol: f64,
    pub seed: u64,
    pub init_policy: InitPolicy,
    pub refine_start: RefineStart,
}

impl SddOptions {
    pub fn new(k: usize) -> Self {
        SddOptions {
            k,
            outer_iters_max: 10,
            inner_iters_max: 20,
            tol: 1e-4,
            seed: 0,
            init_policy: InitPolicy::SvdSign,
            refine_start: RefineStart::Reuse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(FfnError::config("k must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(FfnError::config("tol must be > 0"));
        }
        if self.outer_iters_max == 0 || self.inner_iters_max == 0 {
            return Err(FfnError::config("iteration caps must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SddResult {
    pub x: TernaryMatrix,
    pub d: DiagonalScale,
    pub y: TernaryMatrix,
    /// Frobenius norm of the residual after each outer sweep.
    pub residual_history: Vec<f64>,
}

impl SddResult {
    pub fn k(&self) -> usize {
        self.d.len()
    }

    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }

    /// Rows of `(iteration, residual, r)` with `r = residual^2 / ||W||^2`.
    pub fn history_csv(&self, w_norm_sq: f64) -> String {
        let mut out = String::from("iteration,residual,r\n");
        for (i, res) in self.residual_history.iter().enumerate() {
            out.push_str(&format!("{},{:e},{:e}\n", i + 1, res, res * res / w_norm_sq));
        }
        out
    }
}

/// Best ternary `x` for a fixed `s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TernarySolution {
    pub x: Vec<i8>,
    /// `s` was all zero and `x` is the fallback unit vector.
    pub degenerate: bool,
}

/// `(x^T s)^2 / nnz(x)`, the objective the subproblem maximizes.
pub fn subproblem_score(x: &[i8], s: &[f64]) -> f64 {
    let nnz = x.iter().filter(|&&v| v != 0).count();
    if nnz == 0 {
        return 0.0;
    }
    let dot: f64 = x.iter().zip(s).map(|(&a, &b)| f64::from(a) * b).sum();
    dot * dot / nnz as f64
}

/// Maximizes `(x^T s)^2 / nnz(x)` over nonzero ternary `x`.
///
/// The optimum takes the `J` largest `|s_i|` with their signs; every prefix
/// length is scored and the smallest best `J` wins.
pub fn solve_ternary_subproblem(s: &[f64]) -> TernarySolution {
    let m = s.len();
    let mut x = vec![0i8; m];
    if m == 0 {
        return TernarySolution { x, degenerate: true };
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| s[b].abs().total_cmp(&s[a].abs()));

    if s[order[0]] == 0.0 {
        x[order[0]] = 1;
        return TernarySolution { x, degenerate: true };
    }

    let mut sum = 0.0f64;
    let mut best_len = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (j, &idx) in order.iter().enumerate() {
        sum += s[idx].abs();
        let score = sum * sum / (j + 1) as f64;
        if score > best_score {
            best_score = score;
            best_len = j + 1;
        }
    }
    for &idx in &order[..best_len] {
        x[idx] = if s[idx] > 0.0 { 1 } else { -1 };
    }
    TernarySolution { x, degenerate: false }
}

/// Least-squares scale of the pattern `x y^T` against `r`:
/// `x^T R y / (nnz(x) nnz(y))`. May be negative.
pub fn optimal_scale(r: &DenseMatrix, x: &[i8], y: &[i8]) -> Result<f64> {
    if x.len() != r.rows() || y.len() != r.cols() {
        return Err(FfnError::size(format!(
            "x has {} and y has {} entries for a {:?} residual",
            x.len(),
            y.len(),
            r.shape()
        )));
    }
    let nx = x.iter().filter(|&&v| v != 0).count();
    let ny = y.iter().filter(|&&v| v != 0).count();
    if nx == 0 || ny == 0 {
        return Err(FfnError::domain("optimal scale needs nonzero x and y"));
    }
    Ok(bilinear(&r.to_f64(), r.cols(), x, y) / (nx * ny) as f64)
}

fn bilinear(r: &[f64], n: usize, x: &[i8], y: &[i8]) -> f64 {
    let mut acc = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0 {
            continue;
        }
        let row = &r[i * n..(i + 1) * n];
        let s: f64 = row
            .iter()
            .zip(y)
            .filter(|(_, &yj)| yj != 0)
            .map(|(&v, &yj)| if yj > 0 { v } else { -v })
            .sum();
        acc += if xi > 0 { s } else { -s };
    }
    acc
}

/// One term `d x y^T` of the decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct RankOneTerm {
    pub x: Vec<i8>,
    pub d: f64,
    pub y: Vec<i8>,
}

impl RankOneTerm {
    /// Moves a negative scale into `x` so that `d >= 0`.
    pub fn fold_sign(mut self) -> Self {
        if self.d < 0.0 {
            self.d = -self.d;
            for v in &mut self.x {
                *v = -*v;
            }
        }
        self
    }
}

struct Residual {
    m: usize,
    n: usize,
    data: Vec<f64>,
}

impl Residual {
    fn times_y(&self, y: &[i8]) -> Vec<f64> {
        (0..self.m)
            .map(|i| {
                self.data[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(y)
                    .map(|(&v, &yj)| match yj {
                        1 => v,
                        -1 => -v,
                        _ => 0.0,
                    })
                    .sum()
            })
            .collect()
    }

    fn transpose_times_x(&self, x: &[i8]) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0 {
                continue;
            }
            let row = &self.data[i * self.n..(i + 1) * self.n];
            if xi > 0 {
                s.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            } else {
                s.iter_mut().zip(row).for_each(|(a, &v)| *a -= v);
            }
        }
        s
    }

    fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `out = self + sign * d * x y^T`.
    fn add_term_into(&self, term: &RankOneTerm, sign: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.data);
        let d = sign * term.d;
        if d == 0.0 {
            return;
        }
        for (i, &xi) in term.x.iter().enumerate() {
            if xi == 0 {
                continue;
            }
            let dx = d * f64::from(xi);
            let row = &mut out[i * self.n..(i + 1) * self.n];
            for (o, &yj) in row.iter_mut().zip(&term.y) {
                if yj != 0 {
                    *o += dx * f64::from(yj);
                }
            }
        }
    }
}

/// Alternates the two subproblems from `y0` and returns the fitted term.
fn alternate(r: &Residual, y0: &[i8], inner_iters_max: usize) -> RankOneTerm {
    let mut y = y0.to_vec();
    let mut x = vec![0i8; r.m];
    for _ in 0..inner_iters_max {
        let x_new = solve_ternary_subproblem(&r.times_y(&y)).x;
        let y_new = solve_ternary_subproblem(&r.transpose_times_x(&x_new)).x;
        let stable = x_new == x && y_new == y;
        x = x_new;
        y = y_new;
        if stable {
            break;
        }
    }
    let nx = x.iter().filter(|&&v| v != 0).count();
    let ny = y.iter().filter(|&&v| v != 0).count();
    let d = bilinear(&r.data, r.n, &x, &y) / (nx * ny) as f64;
    // stored scales are f32
    RankOneTerm { x, d: f64::from(d as f32), y }.fold_sign()
}

/// Fits a single term to `r` starting from `y0`.
pub fn fit_rank_one(r: &DenseMatrix, y0: &[i8], inner_iters_max: usize) -> Result<RankOneTerm> {
    if y0.len() != r.cols() {
        return Err(FfnError::size("starting y has the wrong length"));
    }
    let res = Residual {
        m: r.rows(),
        n: r.cols(),
        data: r.to_f64(),
    };
    Ok(alternate(&res, y0, inner_iters_max.max(1)))
}

fn check_input(w: &DenseMatrix) -> Result<()> {
    if w.data().iter().any(|v| !v.is_finite()) {
        return Err(FfnError::domain("W has non-finite entries"));
    }
    if w.rows() == 0 || w.cols() == 0 {
        return Err(FfnError::size("W must be nonempty"));
    }
    if w.frobenius_sq() == 0.0 {
        return Err(FfnError::domain("W must be nonzero"));
    }
    Ok(())
}

fn random_ternary(rng: &mut ChaCha8Rng, len: usize) -> Vec<i8> {
    let mut v: Vec<i8> = (0..len).map(|_| rng.random_range(-1i8..=1)).collect();
    if v.iter().all(|&t| t == 0) {
        let i = rng.random_range(0..len);
        v[i] = 1;
    }
    v
}

/// Starting `y` columns for `k` terms.
pub fn initial_y(w: &DenseMatrix, k: usize, policy: InitPolicy, seed: u64) -> Vec<Vec<i8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = w.cols();
    let mut cols = Vec::with_capacity(k);
    if policy == InitPolicy::SvdSign {
        let mat = DMatrix::from_row_slice(w.rows(), n, &w.to_f64());
        let svd = mat.svd(false, true);
        if let Some(v_t) = svd.v_t {
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
            for &i in order.iter().take(k) {
                let v: Vec<f64> = v_t.row(i).iter().copied().collect();
                let peak = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                if peak == 0.0 || !peak.is_finite() {
                    continue;
                }
                let col = v
                    .iter()
                    .map(|&e| {
                        let t = e / peak;
                        if t > 0.5 {
                            1
                        } else if t < -0.5 {
                            -1
                        } else {
                            0
                        }
                    })
                    .collect();
                cols.push(col);
            }
        }
    }
    while cols.len() < k {
        cols.push(random_ternary(&mut rng, n));
    }
    cols
}

struct Engine<'a> {
    opts: &'a SddOptions,
    residual: Residual,
    terms: Vec<RankOneTerm>,
    starts: Vec<Vec<i8>>,
    history: Vec<f64>,
}

impl Engine<'_> {
    fn refine_term(&mut self, i: usize, scratch_r: &mut Vec<f64>, scratch_c: &mut Vec<f64>) {
        let old = &self.terms[i];
        self.residual.add_term_into(old, 1.0, scratch_r);
        let r = Residual {
            m: self.residual.m,
            n: self.residual.n,
            data: std::mem::take(scratch_r),
        };
        let y0 = match self.opts.refine_start {
            RefineStart::Reuse => &self.terms[i].y,
            RefineStart::Reinitialize => &self.starts[i],
        };
        let cand = alternate(&r, y0, self.opts.inner_iters_max);
        r.add_term_into(&cand, -1.0, scratch_c);
        let cand_obj: f64 = scratch_c.iter().map(|v| v * v).sum();
        if cand_obj <= self.residual.norm_sq() {
            std::mem::swap(&mut self.residual.data, scratch_c);
            self.terms[i] = cand;
        }
        *scratch_r = r.data;
    }

    fn run(&mut self, start_index: usize) {
        let mut scratch_r = Vec::new();
        let mut scratch_c = Vec::new();
        let mut prev = self.residual.norm_sq().sqrt();
        for sweep in 0..self.opts.outer_iters_max {
            // the first sweep of an extension only needs to fit the new terms
            let from = if sweep == 0 { start_index } else { 0 };
            for i in from..self.terms.len() {
                self.refine_term(i, &mut scratch_r, &mut scratch_c);
            }
            let cur = self.residual.norm_sq().sqrt();
            self.history.push(cur);
            if cur == 0.0 || (prev - cur) / prev < self.opts.tol {
                break;
            }
            prev = cur;
        }
    }

    fn finish(self) -> Result<SddResult> {
        let (m, n) = (self.residual.m, self.residual.n);
        let xs: Vec<Vec<i8>> = self.terms.iter().map(|t| t.x.clone()).collect();
        let ys: Vec<Vec<i8>> = self.terms.iter().map(|t| t.y.clone()).collect();
        Ok(SddResult {
            x: TernaryMatrix::from_columns(m, &xs)?,
            d: DiagonalScale::new(self.terms.iter().map(|t| t.d as f32).collect())?,
            y: TernaryMatrix::from_columns(n, &ys)?,
            residual_history: self.history,
        })
    }
}

/// Decomposes `W` into `k` ternary terms.
pub fn sdd_decompose(w: &DenseMatrix, opts: &SddOptions) -> Result<SddResult> {
    opts.validate()?;
    check_input(w)?;
    let starts = initial_y(w, opts.k, opts.init_policy, opts.seed);
    decompose_with_starts(w, opts, starts)
}

/// Like [`sdd_decompose`] but with caller-chosen starting `y` columns
/// (`initial_y` is `n x k`).
pub fn sdd_decompose_from(w: &DenseMatrix, opts: &SddOptions, initial_y: &TernaryMatrix) -> Result<SddResult> {
    opts.validate()?;
    check_input(w)?;
    if initial_y.rows() != w.cols() || initial_y.cols() != opts.k {
        return Err(FfnError::size(format!(
            "initial Y is {:?}, expected {}x{}",
            initial_y.shape(),
            w.cols(),
            opts.k
        )));
    }
    let starts = (0..opts.k).map(|j| initial_y.column(j)).collect();
    decompose_with_starts(w, opts, starts)
}

fn decompose_with_starts(w: &DenseMatrix, opts: &SddOptions, starts: Vec<Vec<i8>>) -> Result<SddResult> {
    let (m, n) = w.shape();
    let terms = starts
        .iter()
        .map(|y| RankOneTerm {
            x: vec![0; m],
            d: 0.0,
            y: y.clone(),
        })
        .collect();
    let mut engine = Engine {
        opts,
        residual: Residual { m, n, data: w.to_f64() },
        terms,
        starts,
        history: Vec::new(),
    };
    engine.run(0);
    engine.finish()
}

/// Grows `prev` to `opts.k` terms: the existing terms are kept, the new ones
/// start at `d = 0`, and every term is then refined. The residual can only
/// shrink relative to `prev`.
pub fn sdd_extend(w: &DenseMatrix, prev: &SddResult, opts: &SddOptions) -> Result<SddResult> {
    opts.validate()?;
    check_input(w)?;
    let (m, n) = w.shape();
    let k0 = prev.k();
    if prev.x.rows() != m || prev.y.rows() != n {
        return Err(FfnError::size("previous decomposition does not match W"));
    }
    if opts.k < k0 {
        return Err(FfnError::config(format!("cannot extend {k0} terms down to {}", opts.k)));
    }
    let mut terms: Vec<RankOneTerm> = (0..k0)
        .map(|t| RankOneTerm {
            x: prev.x.column(t),
            d: f64::from(prev.d.values()[t]),
            y: prev.y.column(t),
        })
        .collect();
    let mut starts: Vec<Vec<i8>> = terms.iter().map(|t| t.y.clone()).collect();
    let fresh = initial_y(w, opts.k, opts.init_policy, opts.seed);
    for y in fresh.into_iter().skip(k0) {
        starts.push(y.clone());
        terms.push(RankOneTerm { x: vec![0; m], d: 0.0, y });
    }
    let mut residual = Residual { m, n, data: w.to_f64() };
    let mut scratch = Vec::new();
    for t in &terms[..k0] {
        residual.add_term_into(t, -1.0, &mut scratch);
        std::mem::swap(&mut residual.data, &mut scratch);
    }
    let mut engine = Engine {
        opts,
        residual,
        terms,
        starts,
        history: Vec::new(),
    };
    engine.run(k0);
    engine.finish()
}

/// `(k, r)` for each requested `k` (ascending), built by greedy extension.
pub fn sweep_k(w: &DenseMatrix, ks: &[usize], opts: &SddOptions) -> Result<Vec<(usize, f64)>> {
    let mut sorted = ks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len());
    let mut current: Option<SddResult> = None;
    for k in sorted {
        let o = SddOptions { k, ..opts.clone() };
        let next = match &current {
            None => sdd_decompose(w, &o)?,
            Some(prev) => sdd_extend(w, prev, &o)?,
        };
        let r = crate::tensor::approx_error(w, &next.x, &next.d, &next.y)?;
        out.push((k, r));
        current = Some(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{approx_error, factor_product};
    use rand_distr::{Distribution, StandardNormal};

    /// All nonzero ternary vectors of length `m`.
    fn all_ternary(m: usize) -> Vec<Vec<i8>> {
        let mut out = Vec::new();
        for code in 1..3usize.pow(m as u32) {
            let mut c = code;
            let v: Vec<i8> = (0..m)
                .map(|_| {
                    let t = (c % 3) as i8 - 1;
                    c /= 3;
                    t
                })
                .collect();
            if v.iter().any(|&t| t != 0) {
                out.push(v);
            }
        }
        out
    }

    fn brute_force_best(s: &[f64]) -> f64 {
        all_ternary(s.len())
            .iter()
            .map(|x| subproblem_score(x, s))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn subproblem_examples() {
        let sol = solve_ternary_subproblem(&[3.0, -1.0, 0.1]);
        assert_eq!(sol.x, vec![1, 0, 0]);
        // prefix scores 9, 8, 16.81 / 3
        assert!((brute_force_best(&[3.0, -1.0, 0.1]) - 9.0).abs() < 1e-12);
        assert_eq!(solve_ternary_subproblem(&[2.0, 2.0]).x, vec![1, 1]);
        assert_eq!(solve_ternary_subproblem(&[-5.0]).x, vec![-1]);
    }

    #[test]
    fn subproblem_degenerate_input() {
        let sol = solve_ternary_subproblem(&[0.0, 0.0, 0.0]);
        assert!(sol.degenerate);
        assert_eq!(sol.x, vec![1, 0, 0]);
    }

    #[test]
    fn subproblem_tie_prefers_shorter_prefix() {
        // prefix scores 9, 8, 25/3, 9
        let sol = solve_ternary_subproblem(&[3.0, 1.0, -1.0, 1.0]);
        assert_eq!(sol.x, vec![1, 0, 0, 0]);
    }

    #[test]
    fn subproblem_matches_enumeration_m_up_to_8() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..1000 {
            let m = 1 + trial % 8;
            let s: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
            let sol = solve_ternary_subproblem(&s);
            let got = subproblem_score(&sol.x, &s);
            let best = brute_force_best(&s);
            assert!((got - best).abs() <= 1e-12 * best, "trial {trial}: {got} vs {best}");
        }
    }

    #[test]
    fn optimal_scale_cases() {
        let x = [1i8, 0, -1];
        let y = [1i8, 1, 0];
        let t = RankOneTerm { x: x.to_vec(), d: 2.0, y: y.to_vec() };
        let r = DenseMatrix::from_fn(3, 3, |i, j| (2 * x[i] * y[j]) as f32).unwrap();
        assert_eq!(optimal_scale(&r, &t.x, &t.y).unwrap(), 2.0);

        let r = DenseMatrix::new(3, 3, vec![0.3, -1.2, 0.5, 0.9, 0.1, -0.4, -0.7, 0.6, 0.2]).unwrap();
        let d = optimal_scale(&r, &x, &y).unwrap();
        // 1-D oracle: minimize ||R - d x y^T||^2 by golden-section search
        let f = |d: f64| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += (r.get(i, j) as f64 - d * (x[i] * y[j]) as f64).powi(2);
                }
            }
            s
        };
        let (mut lo, mut hi) = (-5.0f64, 5.0f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - g * (hi - lo);
            let b = lo + g * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        assert!((d - (lo + hi) / 2.0).abs() < 1e-6, "{d} vs {}", (lo + hi) / 2.0);

        assert!(matches!(optimal_scale(&r, &[0, 0, 0], &y), Err(FfnError::Domain(_))));
    }

    #[test]
    fn negative_pattern_folds_sign() {
        let x = [1i8, -1, 0];
        let y = [0i8, 1, 1];
        let r = DenseMatrix::from_fn(3, 3, |i, j| -(x[i] * y[j]) as f32).unwrap();
        let term = fit_rank_one(&r, &y, 20).unwrap();
        assert_eq!(term.d, 1.0);
        assert_eq!(term.y, y.to_vec());
        assert_eq!(term.x, vec![-1, 1, 0]);
    }

    #[test]
    fn exact_rank_one_is_recovered() {
        let x = [1i8, 0, -1, 1];
        let y = [1i8, 1, 0];
        let w = DenseMatrix::from_fn(4, 3, |i, j| 1.5 * (x[i] * y[j]) as f32).unwrap();
        let res = sdd_decompose(&w, &SddOptions::new(1)).unwrap();
        assert_eq!(res.d.values(), &[1.5]);
        assert_eq!(res.final_residual(), 0.0);
        assert_eq!(approx_error(&w, &res.x, &res.d, &res.y).unwrap(), 0.0);
    }

    #[test]
    fn k1_three_by_three_reaches_global_optimum() {
        let w = DenseMatrix::new(3, 3, vec![1.0, -0.5, 0.0, 0.2, 0.8, -0.3, 0.0, 0.1, 0.6]).unwrap();
        let wf = w.to_f64();
        // exhaustive oracle over (x, y) with the closed-form best d
        let cands = all_ternary(3);
        let mut best = (f64::INFINITY, vec![], vec![]);
        for x in &cands {
            for y in &cands {
                let nx = x.iter().filter(|&&v| v != 0).count() as f64;
                let ny = y.iter().filter(|&&v| v != 0).count() as f64;
                let mut dot = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        dot += wf[i * 3 + j] * (x[i] * y[j]) as f64;
                    }
                }
                let obj = w.frobenius_sq() - dot * dot / (nx * ny);
                if obj < best.0 - 1e-12 {
                    best = (obj, x.clone(), y.clone());
                }
            }
        }
        let y0 = TernaryMatrix::from_columns(3, &[best.2.clone()]).unwrap();
        let res = sdd_decompose_from(&w, &SddOptions::new(1), &y0).unwrap();
        let got = res.final_residual().powi(2);
        assert!((got - best.0).abs() < 1e-6, "{got} vs {}", best.0);

        let default_run = sdd_decompose(&w, &SddOptions::new(1)).unwrap();
        assert!(default_run.final_residual().powi(2) >= best.0 - 1e-6);
    }

    #[test]
    fn residual_history_monotone_and_extension_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DenseMatrix::from_fn(12, 9, |_, _| StandardNormal.sample(&mut rng)).unwrap();
        for policy in [InitPolicy::SvdSign, InitPolicy::RandomTernary] {
            for start in [RefineStart::Reuse, RefineStart::Reinitialize] {
                let opts = SddOptions { init_policy: policy, refine_start: start, ..SddOptions::new(14) };
                let res = sdd_decompose(&w, &opts).unwrap();
                assert!(res.residual_history.windows(2).all(|p| p[1] <= p[0]));
                assert!(res.d.values().iter().all(|&d| d >= 0.0));
                let r = approx_error(&w, &res.x, &res.d, &res.y).unwrap();
                assert!(r < 1.0);
            }
        }
        let sweep = sweep_k(&w, &(1..=10).collect::<Vec<_>>(), &SddOptions::new(1)).unwrap();
        assert!(sweep.windows(2).all(|p| p[1].1 <= p[0].1), "{sweep:?}");
    }

    #[test]
    fn k_larger_than_both_dimensions() {
        let w = DenseMatrix::new(2, 3, vec![0.3, -0.7, 0.2, 1.1, 0.05, -0.4]).unwrap();
        let res = sdd_decompose(&w, &SddOptions::new(8)).unwrap();
        assert_eq!(res.x.shape(), (2, 8));
        assert_eq!(res.y.shape(), (3, 8));
        let p = factor_product(&res.x, &res.d, &res.y).unwrap();
        assert!(p.distance_sq(&w).unwrap() < w.frobenius_sq());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(sdd_decompose(&DenseMatrix::zeros(2, 2), &SddOptions::new(1)).is_err());
        let w = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
        assert!(sdd_decompose(&w, &SddOptions::new(0)).is_err());
        assert!(sdd_decompose(&w, &SddOptions { tol: 0.0, ..SddOptions::new(1) }).is_err());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = DenseMatrix::from_fn(7, 5, |_, _| StandardNormal.sample(&mut rng)).unwrap();
        let opts = SddOptions { init_policy: InitPolicy::RandomTernary, seed: 5, ..SddOptions::new(6) };
        assert_eq!(sdd_decompose(&w, &opts).unwrap(), sdd_decompose(&w, &opts).unwrap());
    }
}
