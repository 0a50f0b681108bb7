//! Sample scores on a common basis.
//!
//! For each sample the latent log-mean η = log Λ maximizes
//!
//!   L(η) = xᵀη - 1ᵀe^η - (η - μ)ᵀ Q (η - μ),   Q = P Σ⁻¹ P,  P = I - VVᵀ,
//!
//! i.e. the Poisson log-likelihood minus the Σ⁻¹-weighted reconstruction
//! error of η - μ by its projection onto span(V). Scores are Vᵀ(η - μ).

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::cpca::CommonBasis;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ingest::CountMatrix;
use crate::linalg::SymmetricMatrix;
use crate::transform::{apply_transform, TransformPair};
use crate::variance::StudyVarianceEstimate;

const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;
const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ScoreFit {
    pub study: String,
    pub sample_ids: Vec<String>,
    /// n×p
    pub log_lambda: DMatrix<f64>,
    /// n×q
    pub scores: DMatrix<f64>,
    /// per sample, objective after each accepted step (first entry is the start)
    pub objective_trace: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
    /// per sample, `Some(reason)` when the optimizer did not converge
    pub flags: Vec<Option<String>>,
}

impl ScoreFit {
    pub fn q(&self) -> usize {
        self.scores.ncols()
    }

    pub fn flagged(&self) -> usize {
        self.flags.iter().filter(|f| f.is_some()).count()
    }

    pub fn scores_csv(&self) -> String {
        pooled_csv(std::slice::from_ref(self))
    }

    pub fn log_lambda_csv(&self, features: &[String]) -> String {
        let mut out = String::from("study,sample_id");
        for f in features {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
        for (i, id) in self.sample_ids.iter().enumerate() {
            let _ = write!(out, "{},{id}", self.study);
            for v in self.log_lambda.row(i).iter() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Penalty matrix Q and the objective for one study.
#[derive(Debug, Clone)]
pub struct ScoreObjective {
    pub mean: DVector<f64>,
    pub q_matrix: DMatrix<f64>,
}

impl ScoreObjective {
    pub fn new(mean: &DVector<f64>, sigma: &SymmetricMatrix, sdc: bool, basis: &DMatrix<f64>) -> Result<Self> {
        let p = sigma.dim();
        if basis.nrows() != p || mean.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "basis has {} rows and mean {} entries for a {p}-dimensional covariance",
                basis.nrows(),
                mean.len()
            )));
        }
        let inv = precision(sigma, sdc)?;
        let proj = DMatrix::<f64>::identity(p, p) - basis * basis.transpose();
        let q = &proj * inv * &proj;
        Ok(ScoreObjective {
            mean: mean.clone(),
            q_matrix: (&q + q.transpose()) * 0.5,
        })
    }

    pub fn value(&self, x: &[f64], eta: &DVector<f64>) -> f64 {
        let d = eta - &self.mean;
        let mut acc = -(&self.q_matrix * &d).dot(&d);
        for j in 0..eta.len() {
            acc += x[j] * eta[j] - eta[j].exp();
        }
        acc
    }

    pub fn gradient(&self, x: &[f64], eta: &DVector<f64>) -> DVector<f64> {
        let d = eta - &self.mean;
        let mut g = &self.q_matrix * d * -2.0;
        for j in 0..eta.len() {
            g[j] += x[j] - eta[j].exp();
        }
        g
    }

    /// L(η + δ) - L(η), evaluated without cancellation against L(η).
    pub fn increment(&self, x: &[f64], eta: &DVector<f64>, delta: &DVector<f64>) -> f64 {
        let d = eta - &self.mean;
        let qd = &self.q_matrix * delta;
        let mut acc = -(2.0 * d.dot(&qd) + delta.dot(&qd));
        for j in 0..eta.len() {
            acc += x[j] * delta[j] - eta[j].exp() * delta[j].exp_m1();
        }
        acc
    }

    /// Negative Hessian diag(e^η) + 2Q.
    fn curvature(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        let mut h = &self.q_matrix * 2.0;
        for j in 0..eta.len() {
            h[(j, j)] += eta[j].exp();
        }
        h
    }
}

/// Σ⁻¹, or for a depth-corrected Σ (Σ1 = 0) its inverse on the complement of
/// 1, leaving the depth direction unpenalized.
fn precision(sigma: &SymmetricMatrix, sdc: bool) -> Result<DMatrix<f64>> {
    let advise = |e: Error| match e {
        Error::NotPositiveDefinite(_) | Error::Singular(_) => Error::Singular(
            "covariance is not invertible; run psd_repair on the estimate before projecting".into(),
        ),
        other => other,
    };
    if !sdc {
        return sigma.spd_inverse().map_err(advise);
    }
    let p = sigma.dim();
    let uu = DMatrix::from_element(p, p, 1.0 / p as f64);
    let proj = DMatrix::<f64>::identity(p, p) - &uu;
    let centered = &proj * sigma.matrix() * &proj + &uu;
    let inv = SymmetricMatrix::new(centered)?.spd_inverse().map_err(advise)?;
    Ok(inv - uu)
}

pub fn project_scores(
    x: &CountMatrix,
    est: &StudyVarianceEstimate,
    basis: &CommonBasis,
    t: &TransformPair,
    exec: Execution,
) -> Result<ScoreFit> {
    if x.n_features() != basis.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} features but basis dimension {}",
            x.n_features(),
            basis.dim()
        )));
    }
    let obj = ScoreObjective::new(&est.mean, &est.sigma, est.sdc, &basis.vectors)?;
    let counts = x.to_f64();
    let (start, _) = apply_transform(t, x);
    let n = x.n_samples();
    let results = exec.map(n, |i| {
        let xi: Vec<f64> = counts.row(i).iter().copied().collect();
        let eta0 = start.row(i).transpose();
        maximize(&obj, &xi, eta0)
    });
    let p = x.n_features();
    let mut log_lambda = DMatrix::zeros(n, p);
    let mut objective_trace = Vec::with_capacity(n);
    let mut iterations = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        log_lambda.set_row(i, &r.eta.transpose());
        objective_trace.push(r.trace);
        iterations.push(r.iterations);
        if let Some(reason) = &r.flag {
            log::warn!("{}: sample {} flagged: {reason}", x.study_label(), x.samples()[i]);
        }
        flags.push(r.flag);
    }
    let scores = centered_scores(&log_lambda, &est.mean, &basis.vectors);
    Ok(ScoreFit {
        study: x.study_label().to_string(),
        sample_ids: x.samples().to_vec(),
        log_lambda,
        scores,
        objective_trace,
        iterations,
        flags,
    })
}

/// Rows Vᵀ(η_i - μ).
pub fn centered_scores(log_lambda: &DMatrix<f64>, mean: &DVector<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let mut centered = log_lambda.clone();
    for mut row in centered.row_iter_mut() {
        for j in 0..row.len() {
            row[j] -= mean[j];
        }
    }
    centered * basis
}

pub struct SampleResult {
    pub eta: DVector<f64>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub flag: Option<String>,
}

/// max_j |g_j| / (1 + x_j + e^η_j): the gradient relative to the size of
/// the Poisson terms it is built from.
fn scaled_gradient(g: &DVector<f64>, x: &[f64], eta: &DVector<f64>) -> f64 {
    g.iter()
        .zip(x)
        .zip(eta.iter())
        .map(|((g, x), e)| g.abs() / (1.0 + x + e.exp()))
        .fold(0.0, f64::max)
}

/// Damped Newton ascent from `eta`.
pub fn maximize(obj: &ScoreObjective, x: &[f64], mut eta: DVector<f64>) -> SampleResult {
    let mut value = obj.value(x, &eta);
    let mut trace = vec![value];
    for it in 0..MAX_ITER {
        let g = obj.gradient(x, &eta);
        let gmax = scaled_gradient(&g, x, &eta);
        if gmax <= GRAD_TOL {
            return SampleResult { eta, trace, iterations: it, flag: None };
        }
        let h = obj.curvature(&eta);
        let step = match h.cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone(),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let delta = &step * t;
            let gain = obj.increment(x, &eta, &delta);
            if gain.is_finite() && gain >= 0.0 {
                eta += delta;
                value += gain;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no ascent left at working precision
            let flag = (gmax > 1e-5).then(|| format!("line search failed with gradient {gmax:e}"));
            return SampleResult { eta, trace, iterations: it, flag };
        }
        trace.push(value);
    }
    let gmax = scaled_gradient(&obj.gradient(x, &eta), x, &eta);
    let flag = (gmax > GRAD_TOL)
        .then(|| format!("no convergence in {MAX_ITER} iterations, gradient {gmax:e}"));
    SampleResult { eta, trace, iterations: MAX_ITER, flag }
}

/// Concatenated score rows of several studies, in input order.
pub fn center_and_pool(fits: &[ScoreFit]) -> Result<String> {
    if let Some(first) = fits.first() {
        if let Some(bad) = fits.iter().find(|f| f.q() != first.q()) {
            return Err(Error::DimensionMismatch(format!(
                "study `{}` has {} score columns, `{}` has {}",
                bad.study,
                bad.q(),
                first.study,
                first.q()
            )));
        }
    }
    Ok(pooled_csv(fits))
}

fn pooled_csv(fits: &[ScoreFit]) -> String {
    let q = fits.first().map_or(0, ScoreFit::q);
    let mut out = String::from("study,sample_id");
    for j in 1..=q {
        let _ = write!(out, ",cpc_{j}");
    }
    out.push('\n');
    for f in fits {
        for (i, id) in f.sample_ids.iter().enumerate() {
            let _ = write!(out, "{},{id}", f.study);
            for v in f.scores.row(i).iter() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpca::BasisMethod;
    use crate::linalg::orthonormalize;
    use crate::variance::VarianceMethod;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn basis(vectors: DMatrix<f64>) -> CommonBasis {
        let q = vectors.ncols();
        CommonBasis {
            vectors,
            variances: DMatrix::zeros(1, q),
            weights: vec![1.0],
            method: BasisMethod::Scpca,
            objective_trace: vec![],
            converged: true,
        }
    }

    fn estimate(mean: DVector<f64>, sigma: SymmetricMatrix, sdc: bool) -> StudyVarianceEstimate {
        StudyVarianceEstimate {
            mean,
            sigma,
            n: 10,
            method: VarianceMethod::PoissonMoment,
            sdc,
            repaired: false,
        }
    }

    fn random_spd(p: usize, rng: &mut ChaCha8Rng) -> SymmetricMatrix {
        let a = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        SymmetricMatrix::new(&a * a.transpose() / p as f64 + DMatrix::identity(p, p) * 0.5).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 6;
        let v = orthonormalize(&DMatrix::from_fn(p, 2, |_, _| rng.sample(StandardNormal))).unwrap();
        let mean = DVector::from_fn(p, |_, _| rng.random_range(0.0..3.0));
        let obj = ScoreObjective::new(&mean, &random_spd(p, &mut rng), false, &v).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..p).map(|_| rng.random_range(0..40) as f64).collect();
            let eta = DVector::from_fn(p, |_, _| rng.random_range(-1.0..4.0));
            let g = obj.gradient(&x, &eta);
            let delta = DVector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
            let direct = obj.value(&x, &(&eta + &delta)) - obj.value(&x, &eta);
            assert!((obj.increment(&x, &eta, &delta) - direct).abs() <= 1e-9 * direct.abs().max(1.0));
            for j in 0..p {
                let h = 1e-5;
                let mut a = eta.clone();
                let mut b = eta.clone();
                a[j] += h;
                b[j] -= h;
                let fd = (obj.value(&x, &a) - obj.value(&x, &b)) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn full_basis_gives_poisson_mle() {
        let p = 4;
        let counts = DMatrix::from_row_slice(2, p, &[3, 17, 250, 1, 40, 2, 9, 1200]);
        let x = CountMatrix::from_counts(counts.clone(), "a");
        let est = estimate(DVector::from_element(p, 1.0), SymmetricMatrix::identity(p), false);
        let fit = project_scores(
            &x,
            &est,
            &basis(DMatrix::identity(p, p)),
            &TransformPair::default(),
            Execution::Sequential,
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..p {
                let want = (counts[(i, j)] as f64).ln();
                assert!((fit.log_lambda[(i, j)] - want).abs() <= 1e-8);
            }
        }
        assert_eq!(fit.flagged(), 0);
    }

    #[test]
    fn zero_row_matches_one_dimensional_oracle() {
        // L = -Σ e^η - Σ η², coordinatewise maximum of -e^η - η²
        let p = 3;
        let x = CountMatrix::from_counts(DMatrix::from_element(1, p, 0u64), "z");
        let est = estimate(DVector::zeros(p), SymmetricMatrix::identity(p), false);
        let fit = project_scores(
            &x,
            &est,
            &basis(DMatrix::zeros(p, 0)),
            &TransformPair::default(),
            Execution::Sequential,
        )
        .unwrap();
        let oracle = golden_max(|e| -e.exp() - e * e, -5.0, 5.0);
        for j in 0..p {
            assert!((fit.log_lambda[(0, j)] - oracle).abs() <= 1e-6);
        }
    }

    fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        while b - a > 1e-12 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn large_counts_score_like_plug_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = 5;
        let v = orthonormalize(&DMatrix::from_fn(p, 2, |_, _| rng.sample(StandardNormal))).unwrap();
        let counts = DMatrix::from_fn(3, p, |_, _| rng.random_range(1000..20000u64));
        let logs = counts.map(|c| (c as f64).ln());
        let mean = DVector::from_fn(p, |j, _| logs.column(j).mean());
        let est = estimate(mean.clone(), random_spd(p, &mut rng), false);
        let fit = project_scores(
            &CountMatrix::from_counts(counts, "big"),
            &est,
            &basis(v.clone()),
            &TransformPair::default(),
            Execution::Parallel,
        )
        .unwrap();
        let plug_in = centered_scores(&logs, &mean, &v);
        assert!((&fit.scores - plug_in).abs().max() <= 0.01);
        let again = centered_scores(&fit.log_lambda, &mean, &v);
        assert!((&fit.scores - again).abs().max() <= 1e-10);
    }

    #[test]
    fn every_sample_ascends() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = 20;
        let v = orthonormalize(&DMatrix::from_fn(p, 3, |_, _| rng.sample(StandardNormal))).unwrap();
        let counts = DMatrix::from_fn(100, p, |_, _| {
            if rng.random_bool(0.3) { 0 } else { rng.random_range(0..300u64) }
        });
        let est = estimate(DVector::from_element(p, 3.0), random_spd(p, &mut rng), false);
        let fit = project_scores(
            &CountMatrix::from_counts(counts, "s"),
            &est,
            &basis(v),
            &TransformPair::default(),
            Execution::Parallel,
        )
        .unwrap();
        for t in &fit.objective_trace {
            assert!(t.windows(2).all(|w| w[1] >= w[0]));
        }
        assert_eq!(fit.flagged(), 0, "{:?}", fit.flags.iter().flatten().collect::<Vec<_>>());
    }

    #[test]
    fn sdc_estimate_uses_complement_inverse() {
        let p = 4;
        let c = DMatrix::<f64>::identity(p, p) - DMatrix::from_element(p, p, 0.25);
        let sigma = SymmetricMatrix::new(c.clone() * 2.0).unwrap();
        let inv = precision(&sigma, true).unwrap();
        // pseudo-inverse of 2C is C/2
        assert!((inv - &c * 0.5).abs().max() <= 1e-12);
        assert!(matches!(precision(&sigma, false), Err(Error::Singular(_))));
    }

    #[test]
    fn pooling_checks_q() {
        let mk = |study: &str, n: usize, q: usize| ScoreFit {
            study: study.into(),
            sample_ids: (0..n).map(|i| format!("s{i}")).collect(),
            log_lambda: DMatrix::zeros(n, 2),
            scores: DMatrix::zeros(n, q),
            objective_trace: vec![],
            iterations: vec![],
            flags: vec![None; n],
        };
        let csv = center_and_pool(&[mk("a", 3, 2), mk("b", 2, 2)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "study,sample_id,cpc_1,cpc_2");
        assert_eq!(lines.len(), 6);
        assert!(lines[4].starts_with("b,s0,"));
        assert_eq!(center_and_pool(&[mk("a", 3, 2)]).unwrap(), mk("a", 3, 2).scores_csv());
        assert!(center_and_pool(&[mk("a", 1, 2), mk("b", 1, 3)]).is_err());
    }
}
