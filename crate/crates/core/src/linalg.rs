//! Dense symmetric linear algebra: a cyclic Jacobi eigensolver, PSD repair
//! and principal angles between subspaces.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// A finite, exactly symmetric square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    /// Symmetrizes `m` as (m + m^T)/2. Rejects non-square or non-finite input.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidInput(format!(
                "matrix is {}x{}, expected square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidInput("empty matrix".into()));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("matrix has non-finite entries".into()));
        }
        let p = m.nrows();
        let mut s = m;
        for i in 0..p {
            for j in (i + 1)..p {
                let v = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(SymmetricMatrix(s))
    }

    pub fn identity(p: usize) -> Self {
        SymmetricMatrix(DMatrix::identity(p, p))
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// v^T M v
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let p = self.dim();
        let mut acc = 0.0;
        for i in 0..p {
            let row: f64 = v.iter().enumerate().map(|(j, vj)| self.0[(i, j)] * vj).sum();
            acc += v[i] * row;
        }
        acc
    }

    /// Positive definite by the smallest Jacobi eigenvalue.
    pub fn is_positive_definite(&self) -> bool {
        match eig_sym(self) {
            Ok(e) => e.values.last().is_some_and(|&v| v > 0.0),
            Err(_) => false,
        }
    }

    /// Inverse through Cholesky; fails for non positive definite input.
    pub fn spd_inverse(&self) -> Result<DMatrix<f64>> {
        let chol = self
            .0
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(String::new()))?;
        Ok(chol.inverse())
    }
}

/// Eigenpairs in descending order; column j of `vectors` pairs with `values[j]`.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&self.values));
        &self.vectors * d * self.vectors.transpose()
    }
}

/// Cyclic Jacobi eigendecomposition.
///
/// Eigenvalues are sorted descending (stable for ties). Each eigenvector is
/// signed so that its largest-magnitude component is positive, ties going to
/// the lowest index.
pub fn eig_sym(m: &SymmetricMatrix) -> Result<EigenDecomposition> {
    let p = m.dim();
    let mut a = m.matrix().clone();
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let mut v = DMatrix::<f64>::identity(p, p);
    let threshold = JACOBI_TOL * a.norm();

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for i in 0..p {
            for j in (i + 1)..p {
                off = off.max(a[(i, j)].abs());
            }
        }
        if off <= threshold {
            converged = true;
            break;
        }
        for i in 0..p {
            for j in (i + 1)..p {
                let aij = a[(i, j)];
                if aij.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(j, j)] - a[(i, i)]) / (2.0 * aij);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, i, j, c, s);
            }
        }
    }
    if !converged {
        let mut off = 0.0f64;
        for i in 0..p {
            for j in (i + 1)..p {
                off = off.max(a[(i, j)].abs());
            }
        }
        if off > threshold {
            return Err(Error::Convergence {
                method: "jacobi",
                detail: format!("off-diagonal {off:e} after {JACOBI_MAX_SWEEPS} sweeps"),
            });
        }
    }

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]));
    let values: Vec<f64> = order.iter().map(|&k| a[(k, k)]).collect();
    let mut vectors = DMatrix::<f64>::zeros(p, p);
    for (col, &k) in order.iter().enumerate() {
        vectors.set_column(col, &v.column(k));
    }
    fix_signs(&mut vectors);
    Ok(EigenDecomposition { values, vectors })
}

fn rotate(a: &mut DMatrix<f64>, v: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    let p = a.nrows();
    // A <- J^T A J with J the (i, j) Givens rotation.
    for k in 0..p {
        let aki = a[(k, i)];
        let akj = a[(k, j)];
        a[(k, i)] = c * aki - s * akj;
        a[(k, j)] = s * aki + c * akj;
    }
    for k in 0..p {
        let aik = a[(i, k)];
        let ajk = a[(j, k)];
        a[(i, k)] = c * aik - s * ajk;
        a[(j, k)] = s * aik + c * ajk;
    }
    a[(i, j)] = 0.0;
    a[(j, i)] = 0.0;
    for k in 0..p {
        let vki = v[(k, i)];
        let vkj = v[(k, j)];
        v[(k, i)] = c * vki - s * vkj;
        v[(k, j)] = s * vki + c * vkj;
    }
}

/// Flip each column so its largest-magnitude entry is positive.
pub fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let max = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if max == 0.0 {
            continue;
        }
        let lead = col
            .iter()
            .copied()
            .find(|x| x.abs() >= max * (1.0 - 1e-9))
            .unwrap_or(0.0);
        if lead < 0.0 {
            col.neg_mut();
        }
    }
}

/// Replace non-positive eigenvalues with small strictly decreasing positive
/// values and rebuild with the original eigenvectors.
///
/// An eigenvalue counts as non-positive when it is at most `1e-12 * max|λ|`.
/// The k-th replaced value (k = 0, 1, ...) is
/// `floor_scale * λ_min_pos * 2^-k`. Positive definite input is returned as is.
pub fn psd_repair(m: &SymmetricMatrix, floor_scale: f64) -> Result<SymmetricMatrix> {
    Ok(psd_repair_counted(m, floor_scale)?.0)
}

/// As [`psd_repair`], also returning how many eigenvalues were replaced.
pub fn psd_repair_counted(
    m: &SymmetricMatrix,
    floor_scale: f64,
) -> Result<(SymmetricMatrix, usize)> {
    if !(floor_scale > 0.0 && floor_scale.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "floor_scale must be positive, got {floor_scale}"
        )));
    }
    let eig = eig_sym(m)?;
    let scale = eig.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cutoff = 1e-12 * scale;
    let positive: Vec<f64> = eig.values.iter().copied().filter(|&v| v > cutoff).collect();
    if positive.len() == eig.values.len() {
        return Ok((m.clone(), 0));
    }
    let min_pos = positive
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if positive.is_empty() || !min_pos.is_finite() {
        return Err(Error::Degenerate(
            "all eigenvalues are non-positive; nothing to anchor the repair".into(),
        ));
    }
    let mut values = eig.values.clone();
    let mut k = 0i32;
    for v in values.iter_mut() {
        if *v <= cutoff {
            *v = floor_scale * min_pos * 2f64.powi(-k);
            k += 1;
        }
    }
    let rebuilt = EigenDecomposition {
        values,
        vectors: eig.vectors,
    }
    .reconstruct();
    Ok((SymmetricMatrix::new(rebuilt)?, k as usize))
}

/// Principal angles (radians, ascending) between the column spaces of two
/// p×q matrices with orthonormal columns.
///
/// Small angles come from the sines (singular values of b - a a^T b) and
/// large ones from the cosines, which keeps both ends accurate.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::InvalidInput(format!(
            "column counts differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "row counts differ: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let q = a.ncols();
    if q == 0 {
        return Ok(Vec::new());
    }
    let cross = a.transpose() * b;
    let resid = b - a * &cross;
    let cos2 = eig_sym(&SymmetricMatrix::new(cross.transpose() * &cross)?)?.values;
    let mut sin2 = eig_sym(&SymmetricMatrix::new(resid.transpose() * &resid)?)?.values;
    sin2.reverse();
    let angles = cos2
        .iter()
        .zip(sin2.iter())
        .map(|(&c2, &s2)| {
            let s2 = s2.max(0.0);
            if s2 < 0.5 {
                s2.sqrt().min(1.0).asin()
            } else {
                c2.max(0.0).sqrt().min(1.0).acos()
            }
        })
        .collect::<Vec<_>>();
    let mut angles = angles;
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

/// Gram-Schmidt with reorthogonalization; columns of `m` in order.
pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, q) = m.shape();
    let mut out = DMatrix::<f64>::zeros(p, q);
    for j in 0..q {
        let mut v: DVector<f64> = m.column(j).into_owned();
        for _ in 0..2 {
            for k in 0..j {
                let u = out.column(k);
                let proj = u.dot(&v);
                v.axpy(-proj, &u, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= 1e-12 {
            return Err(Error::Rank(format!("column {j} is linearly dependent")));
        }
        out.set_column(j, &(v / norm));
    }
    Ok(out)
}

/// max_ij |(V^T V - I)_ij|
pub fn orthonormality_defect(v: &DMatrix<f64>) -> f64 {
    let g = v.transpose() * v;
    let q = g.nrows();
    let mut worst = 0.0f64;
    for i in 0..q {
        for j in 0..q {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(p: usize, seed: u64) -> SymmetricMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        SymmetricMatrix::new(&m + m.transpose()).unwrap()
    }

    fn random_orthogonal(p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        orthonormalize(&m).unwrap()
    }

    #[test]
    fn construction_symmetrizes() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 3.0]);
        let s = SymmetricMatrix::new(m).unwrap();
        assert_eq!(s.matrix()[(0, 1)], 3.0);
        assert_eq!(s.matrix()[(1, 0)], 3.0);
    }

    #[test]
    fn rejects_non_finite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, 0.0, 1.0]);
        assert!(matches!(SymmetricMatrix::new(m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn diagonal_input_sorts_values() {
        let s = SymmetricMatrix::from_diagonal(&[3.0, 1.0, 2.0]).unwrap();
        let e = eig_sym(&s).unwrap();
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
        let expect = DMatrix::from_row_slice(3, 3, &[1., 0., 0., 0., 0., 1., 0., 1., 0.]);
        assert_eq!(e.vectors, expect);
    }

    #[test]
    fn identity_keeps_identity_vectors() {
        let e = eig_sym(&SymmetricMatrix::identity(4)).unwrap();
        assert!(e.values.iter().all(|&v| v == 1.0));
        assert_eq!(e.vectors, DMatrix::identity(4, 4));
    }

    #[test]
    fn random_reconstruction_and_orthogonality() {
        for seed in 0..10 {
            let s = random_symmetric(6, seed);
            let e = eig_sym(&s).unwrap();
            let err = (e.reconstruct() - s.matrix()).norm() / s.frobenius();
            assert!(err <= 1e-8, "reconstruction {err}");
            assert!(orthonormality_defect(&e.vectors) <= 1e-10);
            let tr: f64 = e.values.iter().sum();
            assert!((tr - s.trace()).abs() <= 1e-8 * s.trace().abs().max(1.0));
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sign_convention_largest_component_positive() {
        let s = random_symmetric(5, 42);
        let e = eig_sym(&s).unwrap();
        for col in e.vectors.column_iter() {
            let (idx, _) = col
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv + 1e-9 { (i, v.abs()) } else { (bi, bv) });
            assert!(col[idx] > 0.0);
        }
    }

    #[test]
    fn psd_repair_noop_on_pd() {
        let s = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let r = psd_repair(&s, 1e-3).unwrap();
        assert!((r.matrix() - s.matrix()).abs().max() <= 1e-12);
    }

    #[test]
    fn psd_repair_replacement_rule() {
        let s = SymmetricMatrix::from_diagonal(&[2.0, 0.0, -1.0]).unwrap();
        let r = psd_repair(&s, 1e-3).unwrap();
        let e = eig_sym(&r).unwrap();
        let expect = [2.0, 2e-3, 1e-3];
        for (got, want) in e.values.iter().zip(expect) {
            assert!((got - want).abs() <= 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn psd_repair_preserves_eigenvectors() {
        let v = random_orthogonal(5, 7);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.0, 1.0, -0.5, -1.5]));
        let s = SymmetricMatrix::new(&v * d * v.transpose()).unwrap();
        let r = psd_repair(&s, 1e-3).unwrap();
        let before = eig_sym(&s).unwrap();
        let after = eig_sym(&r).unwrap();
        assert!(*after.values.last().unwrap() > 0.0);
        for j in 0..5 {
            let a = before.vectors.columns(j, 1).into_owned();
            let b = after.vectors.columns(j, 1).into_owned();
            let ang = principal_angles(&a, &b).unwrap();
            assert!(ang[0] <= 1e-10, "column {j}: {}", ang[0]);
        }
        // output - input has rank <= number of repaired eigenvalues
        let diff = SymmetricMatrix::new(r.matrix() - s.matrix()).unwrap();
        let de = eig_sym(&diff).unwrap();
        let rank = de.values.iter().filter(|v| v.abs() > 1e-10).count();
        assert!(rank <= 2);
    }

    #[test]
    fn psd_repair_all_negative_is_degenerate() {
        let s = SymmetricMatrix::from_diagonal(&[-1.0, -2.0]).unwrap();
        assert!(matches!(psd_repair(&s, 1e-3), Err(Error::Degenerate(_))));
    }

    #[test]
    fn angles_trivial_cases() {
        let v = random_orthogonal(6, 3);
        let a = v.columns(0, 2).into_owned();
        let b = v.columns(2, 2).into_owned();
        assert!(principal_angles(&a, &a).unwrap().iter().all(|&x| x.abs() <= 1e-12));
        let perp = principal_angles(&a, &b).unwrap();
        assert!(perp.iter().all(|&x| (x - std::f64::consts::FRAC_PI_2).abs() <= 1e-12));
        let c = v.columns(0, 3).into_owned();
        assert!(principal_angles(&a, &c).is_err());
    }

    #[test]
    fn angles_rotation_invariant() {
        let v = random_orthogonal(8, 11);
        let a = v.columns(0, 3).into_owned();
        let r = random_orthogonal(3, 12);
        let ar = &a * r;
        for x in principal_angles(&a, &ar).unwrap() {
            assert!(x <= 1e-10, "{x}");
        }
    }

    #[test]
    fn angles_symmetric() {
        let a = random_orthogonal(7, 1).columns(0, 3).into_owned();
        let b = random_orthogonal(7, 2).columns(0, 3).into_owned();
        let ab = principal_angles(&a, &b).unwrap();
        let ba = principal_angles(&b, &a).unwrap();
        for (x, y) in ab.iter().zip(ba.iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}
