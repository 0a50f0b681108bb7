//! Per-study estimates of the mean and covariance of log latent abundances.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ingest::CountMatrix;
use crate::linalg::{psd_repair_counted, SymmetricMatrix};
use crate::transform::{apply_transform, TransformPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMethod {
    PoissonMoment,
    PlnVariational,
}

impl fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceMethod::PoissonMoment => "poisson-moment",
            VarianceMethod::PlnVariational => "pln-variational",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyVarianceEstimate {
    pub mean: DVector<f64>,
    pub sigma: SymmetricMatrix,
    pub n: usize,
    pub method: VarianceMethod,
    pub sdc: bool,
    pub repaired: bool,
}

impl StudyVarianceEstimate {
    pub fn dim(&self) -> usize {
        self.sigma.dim()
    }

    /// Copy with `sigma` made positive definite if needed.
    pub fn repaired(&self, floor_scale: f64) -> Result<StudyVarianceEstimate> {
        let (sigma, replaced) = psd_repair_counted(&self.sigma, floor_scale)?;
        Ok(StudyVarianceEstimate {
            sigma,
            repaired: self.repaired || replaced > 0,
            ..self.clone()
        })
    }

    /// CSV: one `# method=..,sdc=..,n=..,repaired=..` line, a header
    /// `feature,mean,<features...>`, then one row per feature.
    pub fn to_csv(&self, features: &[String]) -> String {
        let p = self.dim();
        let mut out = format!(
            "# method={},sdc={},n={},repaired={}\n",
            self.method, self.sdc, self.n, self.repaired
        );
        out.push_str("feature,mean");
        for f in features {
            out.push(',');
            out.push_str(f);
        }
        out.push('\n');
        for (i, name) in features.iter().enumerate().take(p) {
            out.push_str(&format!("{name},{}", self.mean[i]));
            for j in 0..p {
                out.push_str(&format!(",{}", self.sigma.matrix()[(i, j)]));
            }
            out.push('\n');
        }
        out
    }
}

/// Moment estimator: sample covariance of f(X) minus diag(mean k(X)).
pub fn estimate_poisson_variance(
    x: &CountMatrix,
    t: &TransformPair,
) -> Result<StudyVarianceEstimate> {
    let n = x.n_samples();
    if n < 3 {
        return Err(Error::InsufficientSamples { needed: 3, got: n });
    }
    for (j, col) in x.counts().column_iter().enumerate() {
        if col.iter().all(|&c| c == 0) {
            return Err(Error::ZeroVarianceFeature {
                feature: x.features()[j].clone(),
            });
        }
    }
    let (f, k) = apply_transform(t, x);
    let mean = column_means(&f);
    let mut sigma = sample_covariance(&f, &mean);
    let kbar = column_means(&k);
    for j in 0..sigma.nrows() {
        sigma[(j, j)] -= kbar[j];
    }
    Ok(StudyVarianceEstimate {
        mean,
        sigma: SymmetricMatrix::new(sigma)?,
        n,
        method: VarianceMethod::PoissonMoment,
        sdc: false,
        repaired: false,
    })
}

pub(crate) fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Covariance with divisor n - 1.
pub(crate) fn sample_covariance(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        for j in 0..row.len() {
            row[j] -= mean[j];
        }
    }
    centered.transpose() * &centered / (n as f64 - 1.0)
}

/// Depth correction Σ* = Σ - (pI + 11ᵀ)⁻¹Σ11ᵀ - 11ᵀΣ(pI + 11ᵀ)⁻¹ with
/// (pI + 11ᵀ)⁻¹ = (I - 11ᵀ/(2p))/p.
pub fn sdc_matrix(sigma: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let s = sigma.matrix();
    let p = s.nrows();
    let pf = p as f64;
    // r = Σ1, t = 1ᵀΣ1
    let r: Vec<f64> = s.row_iter().map(|row| row.sum()).collect();
    let total: f64 = r.iter().sum();
    // (pI+11ᵀ)⁻¹Σ11ᵀ has entries ((r_i - total/(2p)) / p) for every column j
    let a: Vec<f64> = r.iter().map(|ri| (ri - total / (2.0 * pf)) / pf).collect();
    let out = DMatrix::from_fn(p, p, |i, j| s[(i, j)] - a[i] - a[j]);
    SymmetricMatrix::new(out)
}

pub fn apply_sdc(e: &StudyVarianceEstimate) -> Result<StudyVarianceEstimate> {
    if e.sdc {
        return Err(Error::InvalidInput("estimate is already depth corrected".into()));
    }
    Ok(StudyVarianceEstimate {
        sigma: sdc_matrix(&e.sigma)?,
        sdc: true,
        ..e.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    #[test]
    fn constant_columns_give_negative_diagonal() {
        let t = TransformPair::default();
        let counts = DMatrix::from_fn(5, 2, |_, j| if j == 0 { 200u64 } else { 500 });
        let x = CountMatrix::from_counts(counts, "c");
        let e = estimate_poisson_variance(&x, &t).unwrap();
        let s = e.sigma.matrix();
        assert!((s[(0, 0)] + 1.0 / 200.0).abs() < 1e-15);
        assert!((s[(1, 1)] + 1.0 / 500.0).abs() < 1e-15);
        assert_eq!(s[(0, 1)], 0.0);
    }

    #[test]
    fn homogeneous_poisson_has_no_latent_variance() {
        let t = TransformPair::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pois = Poisson::new(50.0).unwrap();
        let counts = DMatrix::from_fn(10_000, 1, |_, _| pois.sample(&mut rng) as u64);
        let e = estimate_poisson_variance(&CountMatrix::from_counts(counts, "p"), &t).unwrap();
        assert!(e.sigma.matrix()[(0, 0)].abs() <= 0.01, "{}", e.sigma.matrix()[(0, 0)]);
    }

    #[test]
    fn errors_on_small_or_degenerate_input() {
        let t = TransformPair::default();
        let x = CountMatrix::from_counts(DMatrix::from_element(2, 2, 4u64), "a");
        assert!(matches!(
            estimate_poisson_variance(&x, &t),
            Err(Error::InsufficientSamples { .. })
        ));
        let mut c = DMatrix::from_element(4, 2, 4u64);
        c.column_mut(1).fill(0);
        let x = CountMatrix::from_counts(c, "a");
        match estimate_poisson_variance(&x, &t) {
            Err(Error::ZeroVarianceFeature { feature }) => assert_eq!(feature, "f1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sdc_of_identity_is_centering() {
        let s = sdc_matrix(&SymmetricMatrix::identity(4)).unwrap();
        let expect = DMatrix::<f64>::identity(4, 4) - DMatrix::from_element(4, 4, 0.25);
        assert!((s.matrix() - expect).abs().max() <= 1e-12);
    }

    #[test]
    fn sdc_fixes_already_centered() {
        let c = DMatrix::<f64>::identity(3, 3) - DMatrix::from_element(3, 3, 1.0 / 3.0);
        let s = SymmetricMatrix::new(&c * DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 3.0])) * &c).unwrap();
        let out = sdc_matrix(&s).unwrap();
        assert!((out.matrix() - s.matrix()).abs().max() <= 1e-10);
    }

    #[test]
    fn sdc_twice_is_rejected() {
        let e = StudyVarianceEstimate {
            mean: DVector::zeros(2),
            sigma: SymmetricMatrix::identity(2),
            n: 10,
            method: VarianceMethod::PoissonMoment,
            sdc: true,
            repaired: false,
        };
        assert!(apply_sdc(&e).is_err());
    }

    #[test]
    fn csv_has_provenance_header() {
        let e = StudyVarianceEstimate {
            mean: DVector::from_vec(vec![1.0, 2.0]),
            sigma: SymmetricMatrix::identity(2),
            n: 7,
            method: VarianceMethod::PoissonMoment,
            sdc: true,
            repaired: false,
        };
        let csv = e.to_csv(&["a".into(), "b".into()]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "# method=poisson-moment,sdc=true,n=7,repaired=false");
        assert_eq!(lines.next().unwrap(), "feature,mean,a,b");
        assert_eq!(lines.next().unwrap(), "a,1,1,0");
    }
}
