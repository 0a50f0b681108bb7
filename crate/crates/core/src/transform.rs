//! The count transform pair (f, k): E[f(X)|λ] ≈ log λ and
//! E[k(X)|λ] ≈ Var(f(X)|λ) for X ~ Poisson(λ).
//!
//! Both are tables on 0..=M with tails f(x) = ln x and k(x) = 1/x above M.
//! f is fit over the monotone family f(0) = a, f(x) = ln(x + c) for
//! 1 <= x <= M; k is a penalized least-squares table. Calibration uses the
//! grid points with λ >= 1 (below 1 no unbiased estimator of log λ exists, so
//! the bias there is only reported).

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::ingest::CountMatrix;
use crate::linalg::{eig_sym, SymmetricMatrix};

pub const DEFAULT_CUTOFF: u64 = 30;
const MAX_CONDITION: f64 = 1e12;
const CONTINUITY_TOL: f64 = 0.02;
const K_PENALTY: f64 = 1e-3;
const K_RIDGE: f64 = 1e-2;

/// Default calibration grid: 60 log-spaced points in [0.25, 60].
pub fn default_grid() -> Vec<f64> {
    log_spaced(0.25, 60.0, 60)
}

pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| match i {
            0 => lo,
            i if i == n - 1 => hi,
            i => (a + (b - a) * i as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

/// Bias of f and relative error of k at one calibration point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPoint {
    pub lambda: f64,
    pub f_bias: f64,
    pub k_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformPair {
    cutoff: u64,
    f_table: Vec<f64>,
    k_table: Vec<f64>,
    /// (a, c) of the f family.
    f_params: (f64, f64),
    calibration: Vec<CalibrationPoint>,
}

impl TransformPair {
    pub fn cutoff(&self) -> u64 {
        self.cutoff
    }

    pub fn f_table(&self) -> &[f64] {
        &self.f_table
    }

    pub fn k_table(&self) -> &[f64] {
        &self.k_table
    }

    pub fn f_params(&self) -> (f64, f64) {
        self.f_params
    }

    pub fn calibration(&self) -> &[CalibrationPoint] {
        &self.calibration
    }

    /// Largest |E f(X) - log λ| over grid points with λ >= 1.
    pub fn bias_tolerance(&self) -> f64 {
        self.calibration
            .iter()
            .filter(|c| c.lambda >= 1.0)
            .map(|c| c.f_bias.abs())
            .fold(0.0, f64::max)
    }

    pub fn k_tolerance(&self) -> f64 {
        self.calibration
            .iter()
            .filter(|c| c.lambda >= 1.0)
            .map(|c| c.k_rel_error.abs())
            .fold(0.0, f64::max)
    }

    #[inline]
    pub fn f(&self, x: u64) -> f64 {
        if x <= self.cutoff {
            self.f_table[x as usize]
        } else {
            (x as f64).ln()
        }
    }

    #[inline]
    pub fn k(&self, x: u64) -> f64 {
        if x <= self.cutoff {
            self.k_table[x as usize]
        } else {
            1.0 / x as f64
        }
    }

    /// CSV with header `x,f,k` for x = 0..=M.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,f,k\n");
        for x in 0..=self.cutoff {
            out.push_str(&format!("{x},{},{}\n", self.f(x), self.k(x)));
        }
        out
    }

    /// CSV with header `lambda,f_bias,k_rel_error`.
    pub fn calibration_csv(&self) -> String {
        let mut out = String::from("lambda,f_bias,k_rel_error\n");
        for c in &self.calibration {
            out.push_str(&format!("{},{},{}\n", c.lambda, c.f_bias, c.k_rel_error));
        }
        out
    }
}

impl Default for TransformPair {
    fn default() -> Self {
        build_transform(DEFAULT_CUTOFF, &default_grid()).expect("default transform builds")
    }
}

fn poisson_ln_pmf(x: u64, lambda: f64) -> f64 {
    x as f64 * lambda.ln() - lambda - ln_gamma(x as f64 + 1.0)
}

/// Poisson pmf for x = 0..=upper.
fn pmf_row(lambda: f64, upper: u64) -> Vec<f64> {
    (0..=upper).map(|x| poisson_ln_pmf(x, lambda).exp()).collect()
}

fn condition_number(m: &DMatrix<f64>) -> Result<f64> {
    let e = eig_sym(&SymmetricMatrix::new(m.clone())?)?;
    let hi = e.values[0];
    let lo = *e.values.last().unwrap();
    Ok(if lo <= 0.0 { f64::INFINITY } else { hi / lo })
}

/// Fit the transform pair for cutoff `cutoff` against the calibration grid.
pub fn build_transform(cutoff: u64, lambda_grid: &[f64]) -> Result<TransformPair> {
    if cutoff < 5 {
        return Err(Error::InvalidInput(format!("cutoff must be >= 5, got {cutoff}")));
    }
    if lambda_grid.windows(2).any(|w| w[1] <= w[0]) || lambda_grid.iter().any(|&l| l <= 0.0) {
        return Err(Error::InvalidInput("grid must be ascending and positive".into()));
    }
    let lo = *lambda_grid.first().ok_or_else(|| Error::InvalidInput("empty grid".into()))?;
    let hi = *lambda_grid.last().unwrap();
    if lo > 0.25 || hi < 2.0 * cutoff as f64 {
        return Err(Error::InvalidInput(format!(
            "grid [{lo}, {hi}] must span at least [0.25, {}]",
            2 * cutoff
        )));
    }
    let m = cutoff as usize;
    let upper = cutoff + (50.0 * (cutoff as f64).sqrt()).ceil() as u64;
    let rows: Vec<Vec<f64>> = lambda_grid.iter().map(|&l| pmf_row(l, upper)).collect();
    let fitted: Vec<usize> = (0..lambda_grid.len())
        .filter(|&g| lambda_grid[g] >= 1.0)
        .collect();
    if fitted.len() < 3 {
        return Err(Error::InvalidInput("grid needs at least three points >= 1".into()));
    }

    // f(x) for x > M contributes a fixed tail term.
    let log_tail: Vec<f64> = rows
        .iter()
        .map(|r| ((m + 1)..r.len()).map(|x| r[x] * (x as f64).ln()).sum())
        .collect();

    let (a, c) = fit_f_family(&rows, &log_tail, lambda_grid, &fitted, m)?;
    let mut f_table = vec![a; m + 1];
    for (x, slot) in f_table.iter_mut().enumerate().skip(1) {
        *slot = (x as f64 + c).ln();
    }
    if f_table.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::TransformBuild(format!(
            "fitted f is not increasing (f(0) = {a}, c = {c})"
        )));
    }
    let gap = (f_table[m] - (m as f64).ln()).abs();
    if gap > CONTINUITY_TOL {
        return Err(Error::TransformBuild(format!(
            "|f(M) - log M| = {gap:.4} exceeds {CONTINUITY_TOL}; use a larger cutoff"
        )));
    }

    let f_full = |x: usize| if x <= m { f_table[x] } else { (x as f64).ln() };
    let moments: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| {
            let (mut e1, mut e2) = (0.0, 0.0);
            for (x, &p) in r.iter().enumerate() {
                let fx = f_full(x);
                e1 += p * fx;
                e2 += p * fx * fx;
            }
            (e1, e2 - e1 * e1)
        })
        .collect();

    let k_table = fit_k_table(&rows, &moments, &fitted, m)?;
    let k_full = |x: usize| if x <= m { k_table[x] } else { 1.0 / x as f64 };

    let calibration = lambda_grid
        .iter()
        .enumerate()
        .map(|(g, &lambda)| {
            let ek: f64 = rows[g].iter().enumerate().map(|(x, &p)| p * k_full(x)).sum();
            let var = moments[g].1;
            CalibrationPoint {
                lambda,
                f_bias: moments[g].0 - lambda.ln(),
                k_rel_error: (ek - var) / var,
            }
        })
        .collect();

    Ok(TransformPair {
        cutoff,
        f_table,
        k_table,
        f_params: (a, c),
        calibration,
    })
}

/// Gauss-Newton with Levenberg damping on (a, c).
fn fit_f_family(
    rows: &[Vec<f64>],
    log_tail: &[f64],
    grid: &[f64],
    fitted: &[usize],
    m: usize,
) -> Result<(f64, f64)> {
    let residuals = |a: f64, c: f64| -> Vec<f64> {
        fitted
            .iter()
            .map(|&g| {
                let r = &rows[g];
                let body: f64 = (1..=m).map(|x| r[x] * (x as f64 + c).ln()).sum();
                r[0] * a + body + log_tail[g] - grid[g].ln()
            })
            .collect()
    };
    let sse = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    let (mut a, mut c) = (-1.0, 0.5);
    let mut res = residuals(a, c);
    let mut cost = sse(&res);
    let mut damping = 1e-6;
    let mut jtj = DMatrix::<f64>::zeros(2, 2);
    for _ in 0..200 {
        let jac: Vec<[f64; 2]> = fitted
            .iter()
            .map(|&g| {
                let r = &rows[g];
                [r[0], (1..=m).map(|x| r[x] / (x as f64 + c)).sum()]
            })
            .collect();
        jtj = DMatrix::from_fn(2, 2, |i, j| jac.iter().map(|row| row[i] * row[j]).sum());
        let jtr = DVector::from_fn(2, |i, _| jac.iter().zip(&res).map(|(row, r)| row[i] * r).sum());
        let mut improved = false;
        for _ in 0..40 {
            let mut lhs = jtj.clone();
            for i in 0..2 {
                lhs[(i, i)] *= 1.0 + damping;
            }
            let step = lhs
                .lu()
                .solve(&(-&jtr))
                .ok_or_else(|| Error::TransformBuild("singular Gauss-Newton system".into()))?;
            let (na, nc) = (a + step[0], c + step[1]);
            if nc <= -0.99 {
                damping *= 10.0;
                continue;
            }
            let nres = residuals(na, nc);
            let ncost = sse(&nres);
            if ncost <= cost {
                let small = step.amax() <= 1e-12;
                a = na;
                c = nc;
                res = nres;
                cost = ncost;
                damping = (damping * 0.1).max(1e-12);
                improved = !small;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let cond = condition_number(&jtj)?;
    if cond > MAX_CONDITION {
        return Err(Error::TransformBuild(format!(
            "normal equations for f have condition number {cond:e}; use a larger cutoff or denser grid"
        )));
    }
    Ok((a, c))
}

/// min Σ_g (A_g k + tail_g - Var_g)^2 + α (|D2 (k - k0)|^2 + ρ |k - k0|^2)
/// with k0(x) = 1/(x + 1/2).
fn fit_k_table(
    rows: &[Vec<f64>],
    moments: &[(f64, f64)],
    fitted: &[usize],
    m: usize,
) -> Result<Vec<f64>> {
    let dim = m + 1;
    let mut normal = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for &g in fitted {
        let r = &rows[g];
        let tail: f64 = ((m + 1)..r.len()).map(|x| r[x] / x as f64).sum();
        let target = moments[g].1 - tail;
        for i in 0..dim {
            rhs[i] += r[i] * target;
            for j in 0..dim {
                normal[(i, j)] += r[i] * r[j];
            }
        }
    }
    let top = eig_sym(&SymmetricMatrix::new(normal.clone())?)?.values[0];
    let alpha = K_PENALTY * top;
    let mut penalty = DMatrix::<f64>::zeros(dim, dim);
    for row in 0..dim.saturating_sub(2) {
        let d = [(row, 1.0), (row + 1, -2.0), (row + 2, 1.0)];
        for &(i, vi) in &d {
            for &(j, vj) in &d {
                penalty[(i, j)] += vi * vj;
            }
        }
    }
    for i in 0..dim {
        penalty[(i, i)] += K_RIDGE;
    }
    let penalty = penalty * alpha;
    let baseline = DVector::from_fn(dim, |x, _| 1.0 / (x as f64 + 0.5));
    let lhs = &normal + &penalty;
    let cond = condition_number(&lhs)?;
    if cond > MAX_CONDITION {
        return Err(Error::TransformBuild(format!(
            "normal equations for k have condition number {cond:e}; use a larger cutoff or denser grid"
        )));
    }
    let rhs = rhs + &penalty * baseline;
    let sol = lhs
        .cholesky()
        .ok_or_else(|| Error::TransformBuild("k system is not positive definite".into()))?
        .solve(&rhs);
    Ok(sol.iter().copied().collect())
}

/// Element-wise f(X) and k(X).
pub fn apply_transform(t: &TransformPair, x: &CountMatrix) -> (DMatrix<f64>, DMatrix<f64>) {
    let c = x.counts();
    (c.map(|v| t.f(v)), c.map(|v| t.k(v)))
}

/// Same as [`apply_transform`] for a raw table of nonnegative reals holding
/// integer counts; rejects negative or fractional entries.
pub fn apply_transform_f64(
    t: &TransformPair,
    x: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if let Some(bad) = x.iter().find(|v| **v < 0.0 || v.fract() != 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "counts must be nonnegative integers, found {bad}"
        )));
    }
    Ok((x.map(|v| t.f(v as u64)), x.map(|v| t.k(v as u64))))
}
