//! Multi-study factor analysis fitted by ECM on the study covariances.
//!
//! Σ_s = ΦΦᵀ + β_sβ_sᵀ + Ψ_s with Φ (p×q) and β_s (p×ℓ_s) lower triangular
//! and Ψ_s diagonal. The likelihood needs only (Σ̂_s, n_s):
//! Σ_s -n_s/2 (ln|Σ_s| + tr(Σ_s⁻¹ Σ̂_s)).

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cpca::{compute_variances, scpca_matrices, BasisMethod, CommonBasis};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{eig_sym, fix_signs, SymmetricMatrix};
use crate::variance::StudyVarianceEstimate;

const PSI_FLOOR: f64 = 1e-6;
const MONOTONE_SLACK: f64 = 1e-7;
const JITTER_SD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct MsfaConfig {
    pub q: usize,
    /// study-specific factor counts ℓ_s
    pub l: Vec<usize>,
    pub max_iter: usize,
    /// relative log-likelihood change counted as converged
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl MsfaConfig {
    pub fn new(q: usize, l: Vec<usize>) -> Self {
        MsfaConfig {
            q,
            l,
            max_iter: 5000,
            tol: 1e-7,
            restarts: 5,
            seed: 0,
            exec: Execution::Parallel,
        }
    }

    fn validate(&self, p: usize, studies: usize) -> Result<()> {
        if self.l.len() != studies {
            return Err(Error::Config(format!(
                "msfa needs one study-specific factor count per study: got {} for {studies} studies",
                self.l.len()
            )));
        }
        let total = self.q + self.l.iter().sum::<usize>();
        if total > p {
            return Err(Error::Config(format!(
                "msfa rank q + sum(l) = {total} exceeds dimension {p}"
            )));
        }
        if self.restarts == 0 || self.max_iter == 0 {
            return Err(Error::Config("msfa needs restarts >= 1 and max_iter >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MsfaFit {
    pub phi: DMatrix<f64>,
    pub betas: Vec<DMatrix<f64>>,
    pub psis: Vec<DVector<f64>>,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub restart_index: usize,
}

impl MsfaFit {
    pub fn model_covariance(&self, s: usize) -> DMatrix<f64> {
        let mut m = &self.phi * self.phi.transpose() + &self.betas[s] * self.betas[s].transpose();
        for j in 0..m.nrows() {
            m[(j, j)] += self.psis[s][j];
        }
        m
    }

    pub fn loglik(&self) -> f64 {
        self.loglik_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// `phi.csv`, `beta_<label>.csv`, `psi_<label>.csv` and `trace.csv`
    /// contents, in that order.
    pub fn csv_files(&self, features: &[String], labels: &[String]) -> Vec<(String, String)> {
        let mut files = vec![("phi.csv".to_string(), loadings_csv(&self.phi, features, "phi"))];
        for (s, label) in labels.iter().enumerate() {
            files.push((
                format!("beta_{label}.csv"),
                loadings_csv(&self.betas[s], features, "beta"),
            ));
            let mut psi = String::from("feature,psi\n");
            for (j, f) in features.iter().enumerate() {
                let _ = writeln!(psi, "{f},{}", self.psis[s][j]);
            }
            files.push((format!("psi_{label}.csv"), psi));
        }
        let mut trace = String::from("iteration,loglik\n");
        for (i, v) in self.loglik_trace.iter().enumerate() {
            let _ = writeln!(trace, "{i},{v}");
        }
        files.push(("trace.csv".to_string(), trace));
        files
    }
}

fn loadings_csv(m: &DMatrix<f64>, features: &[String], prefix: &str) -> String {
    let mut out = String::from("feature");
    for j in 1..=m.ncols() {
        let _ = write!(out, ",{prefix}_{j}");
    }
    out.push('\n');
    for (i, f) in features.iter().enumerate() {
        out.push_str(f);
        for j in 0..m.ncols() {
            let _ = write!(out, ",{}", m[(i, j)]);
        }
        out.push('\n');
    }
    out
}

pub fn fit_msfa(sigmas: &[StudyVarianceEstimate], cfg: &MsfaConfig) -> Result<MsfaFit> {
    let mats: Vec<SymmetricMatrix> = sigmas.iter().map(|e| e.sigma.clone()).collect();
    let ns: Vec<f64> = sigmas.iter().map(|e| e.n as f64).collect();
    fit_msfa_matrices(&mats, &ns, cfg)
}

/// Best converged restart by final log-likelihood.
pub fn fit_msfa_matrices(mats: &[SymmetricMatrix], ns: &[f64], cfg: &MsfaConfig) -> Result<MsfaFit> {
    let fits = fit_msfa_all(mats, ns, cfg)?;
    let mut traces = Vec::with_capacity(fits.len());
    let mut best: Option<MsfaFit> = None;
    for fit in fits {
        match fit {
            Ok(f) => {
                traces.push(f.loglik_trace.clone());
                if !f.converged {
                    log::debug!("msfa restart {} hit the iteration limit", f.restart_index);
                }
                if f.converged && best.as_ref().is_none_or(|b| f.loglik() > b.loglik()) {
                    best = Some(f);
                }
            }
            Err(RestartFailure { trace, reason }) => {
                log::debug!("msfa restart failed: {reason}");
                traces.push(trace);
            }
        }
    }
    best.ok_or(Error::MsfaFailed {
        restarts: cfg.restarts,
        traces,
    })
}

#[derive(Debug, Clone)]
pub struct RestartFailure {
    pub trace: Vec<f64>,
    pub reason: String,
}

/// Every restart, in restart order. Non-converged runs are returned as
/// fits with `converged = false`.
pub fn fit_msfa_all(
    mats: &[SymmetricMatrix],
    ns: &[f64],
    cfg: &MsfaConfig,
) -> Result<Vec<std::result::Result<MsfaFit, RestartFailure>>> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidInput("no covariance estimates".into()))?;
    let p = first.dim();
    if mats.iter().any(|m| m.dim() != p) || ns.len() != mats.len() {
        return Err(Error::DimensionMismatch("msfa inputs disagree in size".into()));
    }
    cfg.validate(p, mats.len())?;
    let start = initialize(mats, ns, cfg)?;
    Ok(cfg.exec.map(cfg.restarts, |r| {
        let mut init = start.clone();
        if r > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let noise = Normal::new(0.0, JITTER_SD).expect("valid sd");
            init.phi.apply(|v| *v *= noise.sample(&mut rng).exp());
        }
        run_ecm(mats, ns, init, cfg).map(|mut f| {
            f.restart_index = r;
            f
        })
    }))
}

#[derive(Debug, Clone)]
struct Params {
    phi: DMatrix<f64>,
    betas: Vec<DMatrix<f64>>,
    psis: Vec<DVector<f64>>,
}

/// Rotate the columns of `m` so that it is lower triangular (m ← mQ with
/// mᵀ = QR).
fn lower_triangularize(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return m.clone();
    }
    let qr = m.transpose().qr();
    let q = qr.q();
    let mut out = m * q;
    for r in 0..out.nrows() {
        for c in (r + 1)..out.ncols() {
            out[(r, c)] = 0.0;
        }
    }
    out
}

fn initialize(mats: &[SymmetricMatrix], ns: &[f64], cfg: &MsfaConfig) -> Result<Params> {
    let p = mats[0].dim();
    let total: f64 = ns.iter().sum();
    let mut pooled = DMatrix::<f64>::zeros(p, p);
    for (m, n) in mats.iter().zip(ns) {
        pooled += m.matrix() * (n / total);
    }
    let phi = if cfg.q == 0 {
        DMatrix::zeros(p, 0)
    } else {
        let weights: Vec<f64> = ns.iter().map(|n| (n - 1.0).max(1.0)).collect();
        let vectors = match scpca_matrices(mats, &weights, cfg.q) {
            Ok(b) => b.vectors,
            Err(e) => {
                log::debug!("msfa start: scpca failed ({e}); using pooled eigenvectors");
                eig_sym(&SymmetricMatrix::new(pooled.clone())?)?
                    .vectors
                    .columns(0, cfg.q)
                    .into_owned()
            }
        };
        let mut phi = vectors.clone();
        for j in 0..cfg.q {
            let d = vectors.column(j).dot(&(&pooled * vectors.column(j)));
            phi.column_mut(j).scale_mut(d.max(PSI_FLOOR).sqrt());
        }
        lower_triangularize(&phi)
    };
    let common = &phi * phi.transpose();
    let mut betas = Vec::with_capacity(mats.len());
    let mut psis = Vec::with_capacity(mats.len());
    for (s, m) in mats.iter().enumerate() {
        let resid = m.matrix() - &common;
        let l = cfg.l[s];
        let beta = if l == 0 {
            DMatrix::zeros(p, 0)
        } else {
            let e = eig_sym(&SymmetricMatrix::new(resid.clone())?)?;
            let mut b = e.vectors.columns(0, l).into_owned();
            for j in 0..l {
                b.column_mut(j).scale_mut(e.values[j].max(PSI_FLOOR).sqrt());
            }
            lower_triangularize(&b)
        };
        let model = &common + &beta * beta.transpose();
        // relative floor keeps the starting Σ_s well conditioned
        let psi = DVector::from_fn(p, |j, _| {
            let sjj = m.matrix()[(j, j)];
            (sjj - model[(j, j)]).max(0.05 * sjj.abs()).max(PSI_FLOOR)
        });
        betas.push(beta);
        psis.push(psi);
    }
    Ok(Params { phi, betas, psis })
}

struct Moments {
    /// E[z zᵀ] averaged over samples, (q+ℓ)×(q+ℓ)
    ezz: DMatrix<f64>,
    /// average x E[z]ᵀ, p×(q+ℓ)
    exz: DMatrix<f64>,
}

fn stacked(phi: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let p = phi.nrows();
    let (q, l) = (phi.ncols(), beta.ncols());
    DMatrix::from_fn(p, q + l, |i, j| if j < q { phi[(i, j)] } else { beta[(i, j - q)] })
}

/// Log-likelihood and E-step moments under the current parameters.
fn e_step(mats: &[SymmetricMatrix], ns: &[f64], par: &Params) -> Option<(f64, Vec<Moments>)> {
    let p = par.phi.nrows();
    let mut ll = 0.0;
    let mut moments = Vec::with_capacity(mats.len());
    for (s, m) in mats.iter().enumerate() {
        let lam = stacked(&par.phi, &par.betas[s]);
        let mut sigma = &lam * lam.transpose();
        for j in 0..p {
            sigma[(j, j)] += par.psis[s][j];
        }
        let chol = sigma.cholesky()?;
        let inv = chol.inverse();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let tr = inv.component_mul(m.matrix()).sum();
        ll += -0.5 * ns[s] * (log_det + tr);
        let delta = lam.transpose() * &inv;
        let k = lam.ncols();
        let exz = m.matrix() * delta.transpose();
        let ezz = DMatrix::<f64>::identity(k, k) - &delta * &lam + &delta * &exz;
        moments.push(Moments {
            ezz: (&ezz + ezz.transpose()) * 0.5,
            exz,
        });
    }
    ll.is_finite().then_some((ll, moments))
}

/// Solve G x = b restricted to the leading `k` coordinates; others are zero.
fn restricted_solve(g: &DMatrix<f64>, b: &DVector<f64>, k: usize) -> DVector<f64> {
    let mut out = DVector::zeros(b.len());
    if k == 0 {
        return out;
    }
    let gk = g.view((0, 0), (k, k)).into_owned();
    let bk = b.rows(0, k).into_owned();
    let sol = match gk.clone().cholesky() {
        Some(c) => c.solve(&bk),
        None => gk.lu().solve(&bk).unwrap_or_else(|| DVector::zeros(k)),
    };
    out.rows_mut(0, k).copy_from(&sol);
    out
}

/// One round of conditional maximizations: Φ, then each β_s, then each Ψ_s.
fn cm_steps(mats: &[SymmetricMatrix], ns: &[f64], par: &mut Params, mom: &[Moments]) {
    let p = par.phi.nrows();
    let q = par.phi.ncols();
    if q > 0 {
        for r in 0..p {
            let mut g = DMatrix::<f64>::zeros(q, q);
            let mut b = DVector::<f64>::zeros(q);
            for (s, m) in mom.iter().enumerate() {
                let l = par.betas[s].ncols();
                let a = ns[s] / par.psis[s][r];
                g += m.ezz.view((0, 0), (q, q)) * a;
                let mut rhs: DVector<f64> = m.exz.row(r).columns(0, q).transpose();
                if l > 0 {
                    let bq = m.ezz.view((0, q), (q, l));
                    rhs -= bq * par.betas[s].row(r).transpose();
                }
                b += rhs * a;
            }
            let sol = restricted_solve(&g, &b, (r + 1).min(q));
            par.phi.set_row(r, &sol.transpose());
        }
    }
    for (s, m) in mom.iter().enumerate() {
        let l = par.betas[s].ncols();
        if l == 0 {
            continue;
        }
        let c = m.ezz.view((q, q), (l, l)).into_owned();
        let bq = m.ezz.view((0, q), (q, l));
        for r in 0..p {
            let mut rhs: DVector<f64> = m.exz.row(r).columns(q, l).transpose();
            if q > 0 {
                rhs -= bq.transpose() * par.phi.row(r).transpose();
            }
            let sol = restricted_solve(&c, &rhs, (r + 1).min(l));
            par.betas[s].set_row(r, &sol.transpose());
        }
    }
    for (s, m) in mom.iter().enumerate() {
        let lam = stacked(&par.phi, &par.betas[s]);
        let lez = &lam * &m.ezz;
        for r in 0..p {
            let lr = lam.row(r);
            let v = mats[s].matrix()[(r, r)] - 2.0 * m.exz.row(r).dot(&lr) + lez.row(r).dot(&lr);
            par.psis[s][r] = v.max(PSI_FLOOR);
        }
    }
}

fn run_ecm(
    mats: &[SymmetricMatrix],
    ns: &[f64],
    mut par: Params,
    cfg: &MsfaConfig,
) -> std::result::Result<MsfaFit, RestartFailure> {
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    loop {
        let Some((ll, mom)) = e_step(mats, ns, &par) else {
            return Err(RestartFailure {
                trace,
                reason: "model covariance lost positive definiteness".into(),
            });
        };
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if ll < prev - MONOTONE_SLACK * prev.abs().max(1.0) {
                trace.push(ll);
                return Err(RestartFailure {
                    trace,
                    reason: format!("log-likelihood decreased from {prev} to {ll}"),
                });
            }
            if (ll - prev).abs() <= cfg.tol * ll.abs().max(1.0) {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if trace.len() > cfg.max_iter {
            break;
        }
        cm_steps(mats, ns, &mut par, &mom);
    }
    Ok(MsfaFit {
        phi: par.phi,
        betas: par.betas,
        psis: par.psis,
        loglik_trace: trace,
        converged,
        restart_index: 0,
    })
}

/// Leading q eigenvectors of ΦΦᵀ as a common basis, with per-study
/// variances under `mats`.
pub fn rotate_common(
    fit: &MsfaFit,
    q: usize,
    mats: &[SymmetricMatrix],
    weights: &[f64],
) -> Result<CommonBasis> {
    let gram = SymmetricMatrix::new(&fit.phi * fit.phi.transpose())?;
    let e = eig_sym(&gram)?;
    let top = e.values.first().copied().unwrap_or(0.0).max(0.0);
    let rank = e.values.iter().filter(|&&v| v > 1e-10 * top && v > 0.0).count();
    if q > rank {
        return Err(Error::Rank(format!(
            "requested {q} common axes but the common loadings have rank {rank}"
        )));
    }
    let mut vectors = e.vectors.columns(0, q).into_owned();
    fix_signs(&mut vectors);
    Ok(CommonBasis {
        variances: compute_variances(&vectors, mats),
        vectors,
        weights: weights.to_vec(),
        method: BasisMethod::Msfa,
        objective_trace: fit.loglik_trace.clone(),
        converged: fit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormalize, principal_angles};
    use rand_distr::StandardNormal;

    fn random_matrix(p: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(p, k, |_, _| rng.sample(StandardNormal))
    }

    use rand::Rng;

    fn known_phi_problem(seed: u64) -> (DMatrix<f64>, Vec<SymmetricMatrix>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 10;
        let phi = random_matrix(p, 2, &mut rng) * 1.5;
        let mats = (0..2)
            .map(|_| {
                let mut m = &phi * phi.transpose();
                for j in 0..p {
                    m[(j, j)] += rng.random_range(0.2..0.6);
                }
                SymmetricMatrix::new(m).unwrap()
            })
            .collect();
        (phi, mats)
    }

    #[test]
    fn recovers_known_common_gram() {
        let (phi, mats) = known_phi_problem(3);
        let cfg = MsfaConfig::new(2, vec![0, 0]);
        let fit = fit_msfa_matrices(&mats, &[200.0, 150.0], &cfg).unwrap();
        let truth = &phi * phi.transpose();
        let est = &fit.phi * fit.phi.transpose();
        let rel = (&est - &truth).norm() / truth.norm();
        assert!(rel <= 0.05, "gram error {rel}");
        for (s, m) in mats.iter().enumerate() {
            let inv = SymmetricMatrix::new(fit.model_covariance(s)).unwrap().spd_inverse().unwrap();
            let tr = (inv * m.matrix()).trace();
            assert!((tr - 10.0).abs() <= 0.5, "trace {tr}");
        }
        let basis = rotate_common(&fit, 2, &mats, &[199.0, 149.0]).unwrap();
        let angles = principal_angles(&basis.vectors, &orthonormalize(&phi).unwrap()).unwrap();
        assert!(angles.iter().all(|a| a.to_degrees() <= 2.0), "{angles:?}");
    }

    #[test]
    fn loglik_is_monotone_with_specific_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = 8;
        let phi = random_matrix(p, 2, &mut rng);
        let mats: Vec<SymmetricMatrix> = (0..3)
            .map(|_| {
                let b = random_matrix(p, 1, &mut rng) * 0.7;
                let mut m = &phi * phi.transpose() + &b * b.transpose();
                for j in 0..p {
                    m[(j, j)] += 0.3;
                }
                SymmetricMatrix::new(m).unwrap()
            })
            .collect();
        let cfg = MsfaConfig::new(2, vec![1, 1, 1]);
        for f in fit_msfa_all(&mats, &[100.0, 80.0, 60.0], &cfg).unwrap() {
            let f = f.expect("restart runs");
            for w in f.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - MONOTONE_SLACK * w[0].abs(), "{} -> {}", w[0], w[1]);
            }
            assert!(is_lower_triangular(&f.phi));
            assert!(f.betas.iter().all(is_lower_triangular));
        }
    }

    fn is_lower_triangular(m: &DMatrix<f64>) -> bool {
        (0..m.nrows()).all(|r| ((r + 1)..m.ncols()).all(|c| m[(r, c)] == 0.0))
    }

    #[test]
    fn q_zero_has_empty_common_part() {
        let (_, mats) = known_phi_problem(5);
        let cfg = MsfaConfig::new(0, vec![2, 2]);
        let fit = fit_msfa_matrices(&mats, &[200.0, 150.0], &cfg).unwrap();
        assert_eq!(fit.phi.ncols(), 0);
        assert!(matches!(
            rotate_common(&fit, 1, &mats, &[1.0, 1.0]),
            Err(Error::Rank(_))
        ));
    }

    #[test]
    fn rotate_common_of_orthogonal_columns() {
        let mut phi = DMatrix::<f64>::zeros(4, 2);
        phi[(0, 0)] = 3.0;
        phi[(1, 1)] = 2.0;
        let fit = MsfaFit {
            phi: phi.clone(),
            betas: vec![DMatrix::zeros(4, 0)],
            psis: vec![DVector::from_element(4, 1.0)],
            loglik_trace: vec![0.0],
            converged: true,
            restart_index: 0,
        };
        let mats = vec![SymmetricMatrix::identity(4)];
        let b = rotate_common(&fit, 2, &mats, &[1.0]).unwrap();
        assert!((b.vectors[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((b.vectors[(1, 1)] - 1.0).abs() < 1e-12);
        let gram = SymmetricMatrix::new(&phi * phi.transpose()).unwrap();
        let e = eig_sym(&gram).unwrap();
        assert!((e.values[0] - 9.0).abs() < 1e-12 && (e.values[1] - 4.0).abs() < 1e-12);
        assert!(matches!(rotate_common(&fit, 3, &mats, &[1.0]), Err(Error::Rank(_))));
    }

    #[test]
    fn rotate_common_ignores_loading_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = random_matrix(6, 3, &mut rng);
        let r = orthonormalize(&random_matrix(3, 3, &mut rng)).unwrap();
        let mk = |phi: DMatrix<f64>| MsfaFit {
            phi,
            betas: vec![DMatrix::zeros(6, 0)],
            psis: vec![DVector::from_element(6, 1.0)],
            loglik_trace: vec![],
            converged: true,
            restart_index: 0,
        };
        let mats = vec![SymmetricMatrix::identity(6)];
        let a = rotate_common(&mk(phi.clone()), 3, &mats, &[1.0]).unwrap();
        let b = rotate_common(&mk(&phi * r), 3, &mats, &[1.0]).unwrap();
        assert!((a.vectors - b.vectors).abs().max() <= 1e-10);
    }

    #[test]
    fn infeasible_rank_is_config_error() {
        let (_, mats) = known_phi_problem(1);
        let cfg = MsfaConfig::new(6, vec![3, 3]);
        assert!(matches!(
            fit_msfa_matrices(&mats, &[10.0, 10.0], &cfg),
            Err(Error::Config(_))
        ));
        let cfg = MsfaConfig::new(2, vec![1]);
        assert!(matches!(
            fit_msfa_matrices(&mats, &[10.0, 10.0], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn triangularize_preserves_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_matrix(5, 3, &mut rng);
        let t = lower_triangularize(&m);
        assert!(is_lower_triangular(&t));
        assert!((&t * t.transpose() - &m * m.transpose()).abs().max() <= 1e-12);
    }

    #[test]
    fn csv_bundle_names() {
        let (_, mats) = known_phi_problem(4);
        let mut cfg = MsfaConfig::new(1, vec![1, 0]);
        cfg.restarts = 2;
        let fit = fit_msfa_matrices(&mats, &[50.0, 50.0], &cfg).unwrap();
        let features: Vec<String> = (0..10).map(|j| format!("g{j}")).collect();
        let files = fit.csv_files(&features, &["a".into(), "b".into()]);
        let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            ["phi.csv", "beta_a.csv", "psi_a.csv", "beta_b.csv", "psi_b.csv", "trace.csv"]
        );
        assert!(files[0].1.starts_with("feature,phi_1\n"));
    }
}
