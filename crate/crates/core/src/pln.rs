//! Poisson log-normal covariance estimation by maximizing the Gaussian
//! variational lower bound.
//!
//! Model: log Λ_i = o_i 1 + μ + z_i with z_i ~ N(0, Σ) and X_ij | Λ_ij ~
//! Poisson(Λ_ij). Each sample gets a diagonal Gaussian q(z_i) = N(m_i - μ,
//! diag(s_i²)). The bound is
//!
//! Σ_ij [x_ij (o_i + m_ij) - exp(o_i + m_ij + s_ij²/2) - ln x_ij!]
//!   - n/2 ln|Σ| - 1/2 Σ_i [(m_i - μ)ᵀ Σ⁻¹ (m_i - μ) + tr(Σ⁻¹ diag(s_i²))]
//!   + 1/2 Σ_ij ln s_ij² + np/2
//!
//! Block coordinate ascent: (μ, Σ) in closed form, then per-sample Newton
//! steps on m_i with step halving and an exact 1-D solve for each s_ij².

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ingest::CountMatrix;
use crate::linalg::SymmetricMatrix;
use crate::transform::{apply_transform, TransformPair};
use crate::variance::{StudyVarianceEstimate, VarianceMethod};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlnOptions {
    pub max_iter: usize,
    /// Relative change of the bound that counts as converged.
    pub tol: f64,
    /// Allowed relative decrease of the bound per iteration.
    pub monotone_slack: f64,
    pub newton_steps: usize,
    pub exec: Execution,
}

impl Default for PlnOptions {
    fn default() -> Self {
        PlnOptions {
            max_iter: 500,
            tol: 1e-8,
            monotone_slack: 1e-7,
            newton_steps: 3,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlnFit {
    pub mean: DVector<f64>,
    pub sigma: SymmetricMatrix,
    pub variational_means: DMatrix<f64>,
    pub variational_vars: DMatrix<f64>,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
}

struct Sample {
    m: DVector<f64>,
    s2: DVector<f64>,
}

pub fn estimate_pln_variance(
    x: &CountMatrix,
    offsets: Option<&[f64]>,
    t: &TransformPair,
) -> Result<StudyVarianceEstimate> {
    let fit = fit_pln(x, offsets, t, &PlnOptions::default())?;
    Ok(StudyVarianceEstimate {
        mean: fit.mean,
        sigma: fit.sigma,
        n: x.n_samples(),
        method: VarianceMethod::PlnVariational,
        sdc: offsets.is_some(),
        repaired: false,
    })
}

/// Log total read count per sample, the usual depth offset.
pub fn log_depth_offsets(x: &CountMatrix) -> Vec<f64> {
    x.row_sums().iter().map(|&s| (s.max(1) as f64).ln()).collect()
}

pub fn fit_pln(
    x: &CountMatrix,
    offsets: Option<&[f64]>,
    t: &TransformPair,
    opts: &PlnOptions,
) -> Result<PlnFit> {
    let n = x.n_samples();
    let p = x.n_features();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if n < p + 2 {
        log::warn!("PLN fit with n = {n} < p + 2 = {}; covariance is poorly determined", p + 2);
    }
    let offsets: Vec<f64> = match offsets {
        Some(o) => {
            if o.len() != n {
                return Err(Error::InvalidInput(format!(
                    "{} offsets for {n} samples",
                    o.len()
                )));
            }
            if o.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("offsets must be finite".into()));
            }
            o.to_vec()
        }
        None => vec![0.0; n],
    };
    let counts = x.to_f64();
    let log_fact: f64 = x
        .counts()
        .iter()
        .map(|&c| ln_gamma(c as f64 + 1.0))
        .sum();

    let (f, _) = apply_transform(t, x);
    let mut samples: Vec<Sample> = (0..n)
        .map(|i| Sample {
            m: DVector::from_iterator(p, f.row(i).iter().map(|v| v - offsets[i])),
            s2: DVector::from_element(p, 0.1),
        })
        .collect();

    let mut trace = Vec::new();
    let mut converged = false;
    let mut mu;
    let mut sigma;
    loop {
        let (new_mu, new_sigma) = closed_form_params(&samples, p);
        mu = new_mu;
        sigma = new_sigma;
        let chol = sigma.clone().cholesky().ok_or_else(|| Error::Optimization {
            method: "pln",
            detail: "covariance update lost positive definiteness".into(),
        })?;
        let omega = chol.inverse();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();

        opts.exec.for_each_mut(&mut samples, |i, s| {
            update_sample(
                s,
                counts.row(i).iter().copied().collect::<Vec<_>>().as_slice(),
                offsets[i],
                &mu,
                &omega,
                opts.newton_steps,
            );
        });

        let elbo = elbo(&samples, &counts, &offsets, &mu, &omega, log_det, log_fact);
        if !elbo.is_finite() {
            return Err(Error::Optimization {
                method: "pln",
                detail: format!("non-finite bound after {} iterations", trace.len()),
            });
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if elbo < prev - opts.monotone_slack * prev.abs().max(1.0) {
                trace.push(elbo);
                return Err(Error::Optimization {
                    method: "pln",
                    detail: format!("bound decreased from {prev} to {elbo}; trace {trace:?}"),
                });
            }
            trace.push(elbo);
            if (elbo - prev).abs() <= opts.tol * elbo.abs().max(1.0) {
                converged = true;
            }
        } else {
            trace.push(elbo);
        }
        if converged || trace.len() >= opts.max_iter {
            break;
        }
    }
    // Final parameters consistent with the returned variational state.
    let (mu, sigma) = closed_form_params(&samples, p);
    let variational_means = DMatrix::from_fn(n, p, |i, j| samples[i].m[j]);
    let variational_vars = DMatrix::from_fn(n, p, |i, j| samples[i].s2[j]);
    Ok(PlnFit {
        mean: mu,
        sigma: SymmetricMatrix::new(sigma)?,
        variational_means,
        variational_vars,
        elbo_trace: trace,
        converged,
    })
}

fn closed_form_params(samples: &[Sample], p: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len() as f64;
    let mut mu = DVector::<f64>::zeros(p);
    for s in samples {
        mu += &s.m;
    }
    mu /= n;
    let mut sigma = DMatrix::<f64>::zeros(p, p);
    for s in samples {
        let d = &s.m - &mu;
        sigma.ger(1.0, &d, &d, 1.0);
        for j in 0..p {
            sigma[(j, j)] += s.s2[j];
        }
    }
    sigma /= n;
    // exact symmetry
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    (mu, sigma)
}

fn sample_objective(
    m: &DVector<f64>,
    s2: &DVector<f64>,
    x: &[f64],
    o: f64,
    mu: &DVector<f64>,
    omega: &DMatrix<f64>,
) -> f64 {
    let d = m - mu;
    let quad = (omega * &d).dot(&d);
    let mut acc = -0.5 * quad;
    for j in 0..m.len() {
        acc += x[j] * (o + m[j]) - (o + m[j] + 0.5 * s2[j]).exp();
    }
    acc
}

fn update_sample(
    s: &mut Sample,
    x: &[f64],
    o: f64,
    mu: &DVector<f64>,
    omega: &DMatrix<f64>,
    newton_steps: usize,
) {
    let p = s.m.len();
    let mut current = sample_objective(&s.m, &s.s2, x, o, mu, omega);
    for _ in 0..newton_steps {
        let a: Vec<f64> = (0..p).map(|j| (o + s.m[j] + 0.5 * s.s2[j]).exp()).collect();
        let od = omega * (&s.m - mu);
        let grad = DVector::from_fn(p, |j, _| x[j] - a[j] - od[j]);
        if grad.amax() <= 1e-10 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(*v))) {
            break;
        }
        let mut neg_hess = omega.clone();
        for j in 0..p {
            neg_hess[(j, j)] += a[j];
        }
        let Some(chol) = neg_hess.cholesky() else { break };
        let step = chol.solve(&grad);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &s.m + &step * scale;
            let val = sample_objective(&trial, &s.s2, x, o, mu, omega);
            if val.is_finite() && val >= current {
                s.m = trial;
                current = val;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    for j in 0..p {
        s.s2[j] = solve_s2(o + s.m[j], omega[(j, j)]);
    }
}

/// Maximizer over u > 0 of -exp(c + u/2) - ω u / 2 + ln(u) / 2, i.e. the root
/// of 1/u = exp(c + u/2) + ω.
fn solve_s2(c: f64, omega: f64) -> f64 {
    let g = |t: f64| (-t).exp() - (c + 0.5 * t.exp()).exp() - omega;
    let mut hi = -omega.ln();
    let mut lo = hi - 1.0;
    let mut tries = 0;
    while g(lo) <= 0.0 && tries < 200 {
        lo -= 2.0;
        tries += 1;
    }
    if g(hi) >= 0.0 {
        // only possible through rounding; the root is at hi
        return hi.exp();
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..100 {
        let val = g(t);
        if val > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let eu = t.exp();
        let deriv = -(-t).exp() - (c + 0.5 * eu).exp() * 0.5 * eu;
        let mut next = t - val / deriv;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-14 * (1.0 + t.abs()) {
            t = next;
            break;
        }
        t = next;
    }
    t.exp()
}

fn elbo(
    samples: &[Sample],
    counts: &DMatrix<f64>,
    offsets: &[f64],
    mu: &DVector<f64>,
    omega: &DMatrix<f64>,
    log_det: f64,
    log_fact: f64,
) -> f64 {
    let p = mu.len();
    let n = samples.len();
    let mut total = -log_fact - 0.5 * n as f64 * log_det + 0.5 * (n * p) as f64;
    for (i, s) in samples.iter().enumerate() {
        let o = offsets[i];
        let d = &s.m - mu;
        total -= 0.5 * (omega * &d).dot(&d);
        for j in 0..p {
            let x = counts[(i, j)];
            total += x * (o + s.m[j]) - (o + s.m[j] + 0.5 * s.s2[j]).exp();
            total -= 0.5 * omega[(j, j)] * s.s2[j];
            total += 0.5 * s.s2[j].ln();
        }
    }
    total
}
