//! Common principal components: Flury's maximum-likelihood CPCA solved by
//! pairwise rotations (FG), and stepwise CPCA.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{eig_sym, fix_signs, SymmetricMatrix};
use crate::variance::StudyVarianceEstimate;

const FG_ANGLE_TOL: f64 = 1e-10;
const FG_MAX_SWEEPS: usize = 200;
const FG_GRID: usize = 64;
const SCPCA_STEP_TOL: f64 = 1e-10;
const SCPCA_MAX_ITER: usize = 5000;
const SCPCA_STALL: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMethod {
    Fcpca,
    Scpca,
    Msfa,
}

impl fmt::Display for BasisMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisMethod::Fcpca => "fcpca",
            BasisMethod::Scpca => "scpca",
            BasisMethod::Msfa => "msfa",
        })
    }
}

/// p×q orthonormal basis with per-study variances d_sj = v_jᵀ Σ_s v_j.
#[derive(Debug, Clone)]
pub struct CommonBasis {
    pub vectors: DMatrix<f64>,
    /// S×q
    pub variances: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub method: BasisMethod,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl CommonBasis {
    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn q(&self) -> usize {
        self.vectors.ncols()
    }

    /// CSV `feature,cpc_1..cpc_q`.
    pub fn vectors_csv(&self, features: &[String]) -> String {
        let mut out = String::from("feature");
        for j in 1..=self.q() {
            out.push_str(&format!(",cpc_{j}"));
        }
        out.push('\n');
        for (i, f) in features.iter().enumerate() {
            out.push_str(f);
            for j in 0..self.q() {
                out.push_str(&format!(",{}", self.vectors[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    /// CSV `study,d_1..d_q`, one row per study.
    pub fn variances_csv(&self, labels: &[String]) -> String {
        variances_table_csv(&self.variances, labels)
    }

    pub fn objective_csv(&self) -> String {
        let mut out = String::from("iteration,objective\n");
        for (i, v) in self.objective_trace.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

pub fn variances_table_csv(variances: &DMatrix<f64>, labels: &[String]) -> String {
    let mut out = String::from("study");
    for j in 1..=variances.ncols() {
        out.push_str(&format!(",d_{j}"));
    }
    out.push('\n');
    for (s, label) in labels.iter().enumerate() {
        out.push_str(label);
        for j in 0..variances.ncols() {
            out.push_str(&format!(",{}", variances[(s, j)]));
        }
        out.push('\n');
    }
    out
}

/// Covariances and Wishart weights (n_s - 1) from a set of estimates.
pub fn study_inputs(sigmas: &[StudyVarianceEstimate]) -> Result<(Vec<SymmetricMatrix>, Vec<f64>)> {
    let first = sigmas
        .first()
        .ok_or_else(|| Error::InvalidInput("no covariance estimates".into()))?;
    let p = first.dim();
    let mut mats = Vec::with_capacity(sigmas.len());
    let mut weights = Vec::with_capacity(sigmas.len());
    for (s, e) in sigmas.iter().enumerate() {
        if e.dim() != p {
            return Err(Error::DimensionMismatch(format!(
                "study {s} has dimension {}, expected {p}",
                e.dim()
            )));
        }
        if e.n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: e.n });
        }
        mats.push(e.sigma.clone());
        weights.push(e.n as f64 - 1.0);
    }
    Ok((mats, weights))
}

pub fn compute_variances(vectors: &DMatrix<f64>, mats: &[SymmetricMatrix]) -> DMatrix<f64> {
    let q = vectors.ncols();
    DMatrix::from_fn(mats.len(), q, |s, j| {
        let v: Vec<f64> = vectors.column(j).iter().copied().collect();
        mats[s].quadratic_form(&v)
    })
}

fn pooled(mats: &[SymmetricMatrix], weights: &[f64]) -> DMatrix<f64> {
    let total: f64 = weights.iter().sum();
    let p = mats[0].dim();
    let mut acc = DMatrix::<f64>::zeros(p, p);
    for (m, w) in mats.iter().zip(weights) {
        acc += m.matrix() * (*w / total);
    }
    acc
}

/// Σ_s w_s (Σ_j ln d_sj + p)
pub fn fcpca_objective(variances: &DMatrix<f64>, weights: &[f64]) -> f64 {
    let p = variances.ncols() as f64;
    weights
        .iter()
        .enumerate()
        .map(|(s, w)| w * (variances.row(s).iter().map(|d| d.ln()).sum::<f64>() + p))
        .sum()
}

/// max_{h≠j} |v_hᵀ (Σ_s w_s (d_sj - d_sh)/(d_sh d_sj) Σ_s) v_j|
pub fn fg_symmetry_residual(
    vectors: &DMatrix<f64>,
    mats: &[SymmetricMatrix],
    weights: &[f64],
) -> f64 {
    let p = vectors.ncols();
    let transformed: Vec<DMatrix<f64>> = mats
        .iter()
        .map(|m| vectors.transpose() * m.matrix() * vectors)
        .collect();
    let mut worst = 0.0f64;
    for h in 0..p {
        for j in (h + 1)..p {
            let mut acc = 0.0;
            for (t, w) in transformed.iter().zip(weights) {
                let (dh, dj) = (t[(h, h)], t[(j, j)]);
                acc += w * (dj - dh) / (dh * dj) * t[(h, j)];
            }
            worst = worst.max(acc.abs());
        }
    }
    worst
}

/// Flury CPCA over all p axes; the first `q` (all when `None`) are returned,
/// ordered by pooled weighted variance.
pub fn fcpca(sigmas: &[StudyVarianceEstimate], q: Option<usize>) -> Result<CommonBasis> {
    let (mats, weights) = study_inputs(sigmas)?;
    fcpca_matrices(&mats, &weights, q)
}

pub fn fcpca_matrices(
    mats: &[SymmetricMatrix],
    weights: &[f64],
    q: Option<usize>,
) -> Result<CommonBasis> {
    let b = fcpca_best_effort_matrices(mats, weights, q)?;
    if !b.converged {
        let residual = fg_symmetry_residual(&b.vectors, mats, weights);
        return Err(Error::Convergence {
            method: "fcpca",
            detail: format!("{FG_MAX_SWEEPS} sweeps, symmetry residual {residual:e}"),
        });
    }
    Ok(b)
}

/// As [`fcpca`], but a run that exhausts its sweeps returns the current
/// rotation with `converged = false` instead of failing. Near-equal trailing
/// variances make FG crawl while the leading axes have long settled.
pub fn fcpca_best_effort(sigmas: &[StudyVarianceEstimate], q: Option<usize>) -> Result<CommonBasis> {
    let (mats, weights) = study_inputs(sigmas)?;
    fcpca_best_effort_matrices(&mats, &weights, q)
}

pub fn fcpca_best_effort_matrices(
    mats: &[SymmetricMatrix],
    weights: &[f64],
    q: Option<usize>,
) -> Result<CommonBasis> {
    let p = check_inputs(mats, weights, q)?;
    for (s, m) in mats.iter().enumerate() {
        let e = eig_sym(m)?;
        let min = *e.values.last().unwrap();
        if min <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!(
                " (study {s}, smallest eigenvalue {min:e})"
            )));
        }
    }
    let total_w: f64 = weights.iter().sum();
    let w_norm: Vec<f64> = weights.iter().map(|w| w / total_w).collect();

    let mut v = eig_sym(&SymmetricMatrix::new(pooled(mats, weights))?)?.vectors;
    let mut t: Vec<DMatrix<f64>> = mats
        .iter()
        .map(|m| {
            let x = v.transpose() * m.matrix() * &v;
            (&x + x.transpose()) * 0.5
        })
        .collect();
    let diag_variances = |t: &[DMatrix<f64>]| DMatrix::from_fn(t.len(), p, |s, j| t[s][(j, j)]);
    let mut trace = vec![fcpca_objective(&diag_variances(&t), weights)];
    let mut converged = p == 1;

    for _ in 0..FG_MAX_SWEEPS {
        if p == 1 {
            break;
        }
        let mut max_angle = 0.0f64;
        for h in 0..p {
            for j in (h + 1)..p {
                let theta = pair_angle(&t, &w_norm, h, j);
                if theta != 0.0 {
                    let (c, s) = (theta.cos(), theta.sin());
                    rotate_columns(&mut v, h, j, c, s);
                    for ts in t.iter_mut() {
                        rotate_congruence(ts, h, j, c, s);
                    }
                    max_angle = max_angle.max(theta.abs());
                }
            }
        }
        trace.push(fcpca_objective(&diag_variances(&t), weights));
        if max_angle <= FG_ANGLE_TOL {
            converged = true;
            break;
        }
    }
    let variances = compute_variances(&v, mats);
    let pooled_var: Vec<f64> = (0..p)
        .map(|j| (0..mats.len()).map(|s| weights[s] * variances[(s, j)]).sum::<f64>() / total_w)
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| pooled_var[b].total_cmp(&pooled_var[a]));
    let keep = q.unwrap_or(p);
    let mut vectors = DMatrix::<f64>::zeros(p, keep);
    for (col, &k) in order.iter().take(keep).enumerate() {
        vectors.set_column(col, &v.column(k));
    }
    fix_signs(&mut vectors);
    let variances = compute_variances(&vectors, mats);
    Ok(CommonBasis {
        vectors,
        variances,
        weights: weights.to_vec(),
        method: BasisMethod::Fcpca,
        objective_trace: trace,
        converged,
    })
}

fn check_inputs(mats: &[SymmetricMatrix], weights: &[f64], q: Option<usize>) -> Result<usize> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidInput("no covariance matrices".into()))?;
    let p = first.dim();
    if mats.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} matrices but {} weights",
            mats.len(),
            weights.len()
        )));
    }
    if mats.iter().any(|m| m.dim() != p) {
        return Err(Error::DimensionMismatch("covariance dimensions differ".into()));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput("weights must be positive".into()));
    }
    if let Some(q) = q {
        if q == 0 || q > p {
            return Err(Error::InvalidInput(format!("q = {q} must be in 1..={p}")));
        }
    }
    Ok(p)
}

/// v_h <- c v_h + s v_j, v_j <- -s v_h + c v_j
fn rotate_columns(v: &mut DMatrix<f64>, h: usize, j: usize, c: f64, s: f64) {
    for k in 0..v.nrows() {
        let (a, b) = (v[(k, h)], v[(k, j)]);
        v[(k, h)] = c * a + s * b;
        v[(k, j)] = -s * a + c * b;
    }
}

/// T <- Gᵀ T G for the column rotation above.
fn rotate_congruence(t: &mut DMatrix<f64>, h: usize, j: usize, c: f64, s: f64) {
    let p = t.nrows();
    for k in 0..p {
        let (a, b) = (t[(k, h)], t[(k, j)]);
        t[(k, h)] = c * a + s * b;
        t[(k, j)] = -s * a + c * b;
    }
    for k in 0..p {
        let (a, b) = (t[(h, k)], t[(j, k)]);
        t[(h, k)] = c * a + s * b;
        t[(j, k)] = -s * a + c * b;
    }
    let off = 0.5 * (t[(h, j)] + t[(j, h)]);
    t[(h, j)] = off;
    t[(j, h)] = off;
}

/// Per-study 2×2 block of the pair in the current basis, as (m, a, g) where
/// the two rotated variances are m ± (a cos φ + g sin φ) at φ = 2θ.
struct PairBlock {
    mean: f64,
    half_diff: f64,
    cross: f64,
    weight: f64,
}

impl PairBlock {
    fn r(&self, phi: f64) -> f64 {
        self.half_diff * phi.cos() + self.cross * phi.sin()
    }

    fn dr(&self, phi: f64) -> f64 {
        -self.half_diff * phi.sin() + self.cross * phi.cos()
    }
}

fn pair_objective(blocks: &[PairBlock], phi: f64) -> f64 {
    blocks
        .iter()
        .map(|b| {
            let r = b.r(phi);
            b.weight * (b.mean * b.mean - r * r).ln()
        })
        .sum()
}

fn pair_slope(blocks: &[PairBlock], phi: f64) -> f64 {
    blocks
        .iter()
        .map(|b| {
            let r = b.r(phi);
            -2.0 * b.weight * r * b.dr(phi) / (b.mean * b.mean - r * r)
        })
        .sum()
}

/// Rotation angle θ in (-π/4, π/4] minimizing the pair's contribution
/// Σ_s w_s ln(d_sh d_sj); 0 when no rotation improves it.
fn pair_angle(t: &[DMatrix<f64>], weights: &[f64], h: usize, j: usize) -> f64 {
    let blocks: Vec<PairBlock> = t
        .iter()
        .zip(weights)
        .map(|(ts, &w)| PairBlock {
            mean: 0.5 * (ts[(h, h)] + ts[(j, j)]),
            half_diff: 0.5 * (ts[(h, h)] - ts[(j, j)]),
            cross: ts[(h, j)],
            weight: w,
        })
        .collect();
    let scale: f64 = blocks
        .iter()
        .map(|b| b.weight * b.cross.abs() / (b.mean * b.mean - b.half_diff * b.half_diff).abs().max(f64::MIN_POSITIVE) * b.mean.abs())
        .sum();
    let slope0 = pair_slope(&blocks, 0.0);
    if scale == 0.0 || slope0.abs() <= 1e-15 * scale {
        return 0.0;
    }

    // Coarse scan over one period of φ (the objective has period π).
    let step = std::f64::consts::PI / FG_GRID as f64;
    let phis: Vec<f64> = (0..FG_GRID).map(|k| -FRAC_PI_2 + step * (k as f64 + 0.5)).collect();
    let mut best_k = 0;
    let mut best_val = f64::INFINITY;
    for (k, &phi) in phis.iter().enumerate() {
        let val = pair_objective(&blocks, phi);
        if val < best_val {
            best_val = val;
            best_k = k;
        }
    }
    let f0 = pair_objective(&blocks, 0.0);
    // Bracket the minimum; the grid point nearest zero may be beaten by the
    // local minimum around φ = 0 itself.
    let (mut lo, mut hi) = if f0 <= best_val {
        if slope0 > 0.0 {
            (-step, 0.0)
        } else {
            (0.0, step)
        }
    } else {
        let c = phis[best_k];
        (c - step, c + step)
    };
    if pair_slope(&blocks, lo) > 0.0 || pair_slope(&blocks, hi) < 0.0 {
        // Not a clean bracket; widen once.
        lo -= step;
        hi += step;
        if pair_slope(&blocks, lo) > 0.0 || pair_slope(&blocks, hi) < 0.0 {
            return 0.0;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let g = pair_slope(&blocks, mid);
        if g.abs() <= 1e-12 * scale || hi - lo <= 1e-16 {
            lo = mid;
            hi = mid;
            break;
        }
        if g > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut phi = 0.5 * (lo + hi);
    // Fold into (-π/2, π/2] so θ = φ/2 lies in (-π/4, π/4].
    while phi <= -FRAC_PI_2 {
        phi += std::f64::consts::PI;
    }
    while phi > FRAC_PI_2 {
        phi -= std::f64::consts::PI;
    }
    if pair_objective(&blocks, phi) < f0 {
        0.5 * phi
    } else {
        0.0
    }
}

/// Stepwise CPCA: axes extracted one at a time in decreasing pooled variance.
pub fn scpca(sigmas: &[StudyVarianceEstimate], q: usize) -> Result<CommonBasis> {
    let (mats, weights) = study_inputs(sigmas)?;
    scpca_matrices(&mats, &weights, q)
}

/// Σ_s w_s ln(vᵀ Σ_s v); errors name the first study with vᵀΣv <= 0.
fn scpca_objective(mats: &[SymmetricMatrix], weights: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut forms = Vec::with_capacity(mats.len());
    for (s, (m, w)) in mats.iter().zip(weights).enumerate() {
        let val = m.quadratic_form(v);
        if val <= 0.0 {
            return Err(Error::Indefinite { study: s, value: val });
        }
        total += w * val.ln();
        forms.push(val);
    }
    Ok((total, forms))
}

pub fn scpca_matrices(mats: &[SymmetricMatrix], weights: &[f64], q: usize) -> Result<CommonBasis> {
    let p = check_inputs(mats, weights, Some(q))?;
    let total_w: f64 = weights.iter().sum();
    let w_norm: Vec<f64> = weights.iter().map(|w| w / total_w).collect();
    let pooled = pooled(mats, weights);
    let mut basis = DMatrix::<f64>::zeros(p, q);
    let mut trace = Vec::with_capacity(q);
    let mut converged = true;

    for j in 0..q {
        let done = basis.columns(0, j).into_owned();
        let project = |x: &DVector<f64>| -> DVector<f64> {
            let mut y = x.clone();
            for _ in 0..2 {
                let c = done.transpose() * &y;
                y -= &done * c;
            }
            y
        };
        let projector = DMatrix::<f64>::identity(p, p) - &done * done.transpose();
        let restricted = &projector * &pooled * &projector;
        let start = eig_sym(&SymmetricMatrix::new(restricted)?)?;
        let mut v: DVector<f64> = project(&start.vectors.column(0).into_owned());
        v /= v.norm();

        let as_slice = |v: &DVector<f64>| v.iter().copied().collect::<Vec<f64>>();
        let (mut obj, mut forms) = scpca_objective(mats, &w_norm, &as_slice(&v))?;
        let mut best_obj = obj;
        let mut best_step = f64::INFINITY;
        let mut since_progress = 0;
        let mut axis_converged = false;
        for _ in 0..SCPCA_MAX_ITER {
            let mut mv = DVector::<f64>::zeros(p);
            for ((m, w), f) in mats.iter().zip(&w_norm).zip(&forms) {
                mv += (m.matrix() * &v) * (w / f);
            }
            let mut next = project(&mv);
            let norm = next.norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Convergence {
                    method: "scpca",
                    detail: format!("axis {}: iteration collapsed", j + 1),
                });
            }
            next /= norm;
            if next.dot(&v) < 0.0 {
                next.neg_mut();
            }
            let step = (&next - &v).norm();
            v = next;
            let (o, f) = scpca_objective(mats, &w_norm, &as_slice(&v))?;
            obj = o;
            forms = f;
            if step <= SCPCA_STEP_TOL {
                axis_converged = true;
                break;
            }
            let mut progressed = false;
            if obj > best_obj {
                best_obj = obj;
                progressed = true;
            }
            if step < best_step {
                best_step = step;
                progressed = true;
            }
            if progressed {
                since_progress = 0;
            } else {
                since_progress += 1;
                if since_progress >= SCPCA_STALL {
                    return Err(Error::Convergence {
                        method: "scpca",
                        detail: format!(
                            "axis {}: no progress over {SCPCA_STALL} iterations (step {step:e})",
                            j + 1
                        ),
                    });
                }
            }
        }
        if !axis_converged {
            log::debug!("scpca axis {} hit {SCPCA_MAX_ITER} iterations", j + 1);
            converged = false;
        }
        basis.set_column(j, &v);
        trace.push(obj * total_w);
    }
    fix_signs(&mut basis);
    let variances = compute_variances(&basis, mats);
    Ok(CommonBasis {
        vectors: basis,
        variances,
        weights: weights.to_vec(),
        method: BasisMethod::Scpca,
        objective_trace: trace,
        converged,
    })
}

/// Explained variance of each axis under given covariances.
#[derive(Debug, Clone)]
pub struct ExplainedVariance {
    /// S×q, d̂_sj = v̂_jᵀ Σ_s v̂_j
    pub variances: DMatrix<f64>,
    /// per study, cumulative sums divided by tr(Σ_s)
    pub cumulative: Vec<Vec<f64>>,
}

pub fn explained_variance(basis: &CommonBasis, truth: &[SymmetricMatrix]) -> Result<ExplainedVariance> {
    explained_variance_vectors(&basis.vectors, truth)
}

pub fn explained_variance_vectors(
    vectors: &DMatrix<f64>,
    truth: &[SymmetricMatrix],
) -> Result<ExplainedVariance> {
    let p = vectors.nrows();
    if let Some(bad) = truth.iter().position(|m| m.dim() != p) {
        return Err(Error::DimensionMismatch(format!(
            "covariance {bad} has dimension {}, basis has {p}",
            truth[bad].dim()
        )));
    }
    let variances = compute_variances(vectors, truth);
    let cumulative = truth
        .iter()
        .enumerate()
        .map(|(s, m)| {
            let tr = m.trace();
            let mut acc = 0.0;
            variances
                .row(s)
                .iter()
                .map(|d| {
                    acc += d;
                    acc / tr
                })
                .collect()
        })
        .collect();
    Ok(ExplainedVariance {
        variances,
        cumulative,
    })
}
