//! Synthetic multi-group Poisson log-normal scenarios with a known shared
//! eigenvector block, and a harness that scores how much true variance each
//! method's axes recover.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal};
use serde::Deserialize;

use crate::cpca::{compute_variances, explained_variance_vectors, fcpca_best_effort, scpca, BasisMethod};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ingest::CountMatrix;
use crate::linalg::{eig_sym, orthonormalize, principal_angles, SymmetricMatrix};
use crate::msfa::{fit_msfa, rotate_common, MsfaConfig};
use crate::pln::{estimate_pln_variance, log_depth_offsets};
use crate::scree::{suggest_q, DEFAULT_GAP_FRACTION};
use crate::transform::TransformPair;
use crate::variance::{apply_sdc, estimate_poisson_variance, StudyVarianceEstimate};

/// Largest latent log-mean before exponentiation.
pub const LOG_LAMBDA_CLAMP: f64 = 30.0;
const NAIVE_ZERO: f64 = 0.001;
const REPAIR_FLOOR: f64 = 1e-3;
const TRUTH_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigenProfile {
    #[default]
    Decreasing,
    NonDecreasing,
}

/// Scenario file contents (TOML). Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationScenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub p: usize,
    pub n: Vec<usize>,
    pub q_shared: usize,
    #[serde(default)]
    pub eigen_profile: EigenProfile,
    /// Explicit per-group eigenvalues (each of length p); the built-in
    /// spiked profile is used when absent.
    #[serde(default)]
    pub eigenvalues: Option<Vec<Vec<f64>>>,
    /// For the non-decreasing profile: eigenvector column c gets the
    /// `permutation[c]`-th largest value (1-based).
    #[serde(default)]
    pub permutation: Option<Vec<usize>>,
    /// Per group (mean, variance) of the latent log-means.
    #[serde(default = "default_mean_law")]
    pub mean_law: Vec<[f64; 2]>,
    /// Per group (shape, rate) of the depth factors.
    #[serde(default = "default_depth_law")]
    pub depth_law: Vec<[f64; 2]>,
    #[serde(default = "default_true")]
    pub sdc: bool,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Axes per curve (capped at p).
    #[serde(default = "default_axes")]
    pub axes: usize,
    #[serde(default)]
    pub msfa_q: Option<usize>,
    #[serde(default)]
    pub msfa_l: Option<Vec<usize>>,
    #[serde(default = "default_restarts")]
    pub msfa_restarts: usize,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_mean_law() -> Vec<[f64; 2]> {
    vec![[4.0, 3.0], [3.0, 2.0]]
}
fn default_depth_law() -> Vec<[f64; 2]> {
    vec![[7.0, 1.0], [10.0, 1.0]]
}
fn default_true() -> bool {
    true
}
fn default_replicates() -> usize {
    20
}
fn default_methods() -> Vec<String> {
    MethodDescriptor::ALL.iter().map(|m| m.to_string()).collect()
}
fn default_axes() -> usize {
    20
}
fn default_restarts() -> usize {
    5
}

impl SimulationScenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: SimulationScenario =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {}", e.message())))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn groups(&self) -> usize {
        self.n.len()
    }

    pub fn axes(&self) -> usize {
        self.axes.min(self.p)
    }

    pub fn msfa_q(&self) -> usize {
        self.msfa_q.unwrap_or(self.q_shared.max(1))
    }

    pub fn msfa_l(&self) -> Vec<usize> {
        self.msfa_l.clone().unwrap_or_else(|| vec![1; self.groups()])
    }

    pub fn method_descriptors(&self) -> Result<Vec<MethodDescriptor>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.groups();
        if self.p < 2 {
            return Err(Error::Config("p must be at least 2".into()));
        }
        if s == 0 || self.n.iter().any(|&n| n < 3) {
            return Err(Error::Config("n needs one entry >= 3 per group".into()));
        }
        if self.q_shared > self.p {
            return Err(Error::Config(format!("q_shared {} exceeds p {}", self.q_shared, self.p)));
        }
        if self.mean_law.len() != s || self.depth_law.len() != s {
            return Err(Error::Config(format!(
                "mean_law and depth_law need {s} entries (one per group)"
            )));
        }
        if self.mean_law.iter().any(|[m, v]| !m.is_finite() || v.is_nan() || *v < 0.0) {
            return Err(Error::Config("mean_law variances must be nonnegative".into()));
        }
        if self.depth_law.iter().any(|[a, b]| !(*a > 0.0 && *b > 0.0)) {
            return Err(Error::Config("depth_law shape and rate must be positive".into()));
        }
        if self.replicates == 0 || self.axes == 0 {
            return Err(Error::Config("replicates and axes must be positive".into()));
        }
        if self.msfa_l().len() != s {
            return Err(Error::Config(format!("msfa_l needs {s} entries")));
        }
        self.method_descriptors()?;
        self.group_eigenvalues()?;
        Ok(())
    }

    /// Eigenvalues attached to the eigenvector columns of each group.
    pub fn group_eigenvalues(&self) -> Result<Vec<Vec<f64>>> {
        let s = self.groups();
        let lists = match &self.eigenvalues {
            Some(lists) => {
                if lists.len() != s {
                    return Err(Error::Config(format!("eigenvalues need {s} lists")));
                }
                lists.clone()
            }
            None => vec![spiked_profile(self.p, self.q_shared); s],
        };
        for l in &lists {
            if l.len() != self.p || l.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!(
                    "each eigenvalue list must hold {} positive values",
                    self.p
                )));
            }
        }
        match self.eigen_profile {
            EigenProfile::Decreasing => Ok(lists
                .into_iter()
                .map(|mut l| {
                    l.sort_by(|a, b| b.total_cmp(a));
                    l
                })
                .collect()),
            EigenProfile::NonDecreasing => {
                let perm = self.permutation()?;
                Ok(lists
                    .into_iter()
                    .map(|mut l| {
                        l.sort_by(|a, b| b.total_cmp(a));
                        perm.iter().map(|&r| l[r - 1]).collect()
                    })
                    .collect())
            }
        }
    }

    /// Ranks used by the non-decreasing profile (explicit or default).
    pub fn permutation(&self) -> Result<Vec<usize>> {
        let perm = match &self.permutation {
            Some(p) => p.clone(),
            None => interleaved_permutation(self.p, self.q_shared),
        };
        let mut seen = vec![false; self.p];
        if perm.len() != self.p {
            return Err(Error::Config(format!("permutation needs {} entries", self.p)));
        }
        for &r in &perm {
            if r == 0 || r > self.p || seen[r - 1] {
                return Err(Error::Config("permutation must be a permutation of 1..p".into()));
            }
            seen[r - 1] = true;
        }
        Ok(perm)
    }
}

/// Shared block 4·0.85^(j-1) for j ≤ q, then a flat-ish tail 0.1·0.98^k
/// capped at half the smallest signal value.
pub fn spiked_profile(p: usize, q: usize) -> Vec<f64> {
    let signal: Vec<f64> = (0..q).map(|j| 4.0 * 0.85f64.powi(j as i32)).collect();
    let tail = signal.last().map_or(0.1, |&s| 0.1f64.min(0.5 * s));
    signal
        .into_iter()
        .chain((0..p - q).map(|k| tail * 0.98f64.powi(k as i32)))
        .collect()
}

/// Shared columns take ranks 1, 3, 5, ..; the first q non-shared columns
/// take ranks 2, 4, ..; the rest keep their order.
pub fn interleaved_permutation(p: usize, q: usize) -> Vec<usize> {
    let k = q.min(p - q);
    let mut perm = vec![0; p];
    for c in 0..k {
        perm[c] = 2 * c + 1;
        perm[q + c] = 2 * c + 2;
    }
    let mut next = 2 * k + 1;
    for slot in perm.iter_mut() {
        if *slot == 0 {
            *slot = next;
            next += 1;
        }
    }
    perm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarianceKind {
    Poisson,
    Pln,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NaiveKind {
    Count,
    LogCount,
    RelAbund,
    LogRelAbund,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodDescriptor {
    /// Per-group estimates combined by a common-basis method.
    Ensemble(VarianceKind, BasisMethod),
    /// One estimate on the concatenated groups, then its eigenvectors.
    Alone(VarianceKind),
    /// PCA of a transformed concatenated count matrix.
    Naive(NaiveKind),
}

impl MethodDescriptor {
    pub const ALL: [MethodDescriptor; 12] = {
        use BasisMethod::*;
        use MethodDescriptor::*;
        use VarianceKind::*;
        [
            Ensemble(Poisson, Scpca),
            Ensemble(Poisson, Fcpca),
            Ensemble(Poisson, Msfa),
            Ensemble(Pln, Scpca),
            Ensemble(Pln, Fcpca),
            Ensemble(Pln, Msfa),
            Alone(Poisson),
            Alone(Pln),
            Naive(NaiveKind::Count),
            Naive(NaiveKind::LogCount),
            Naive(NaiveKind::RelAbund),
            Naive(NaiveKind::LogRelAbund),
        ]
    };

    pub fn file_stem(&self) -> String {
        self.to_string().replace('+', "-")
    }
}

impl fmt::Display for MethodDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = |k: &VarianceKind| match k {
            VarianceKind::Poisson => "poisson",
            VarianceKind::Pln => "pln",
        };
        match self {
            MethodDescriptor::Ensemble(k, b) => write!(f, "{}+{b}", v(k)),
            MethodDescriptor::Alone(k) => write!(f, "{}-alone", v(k)),
            MethodDescriptor::Naive(k) => f.write_str(match k {
                NaiveKind::Count => "naive-count",
                NaiveKind::LogCount => "naive-logcount",
                NaiveKind::RelAbund => "naive-relabund",
                NaiveKind::LogRelAbund => "naive-logrelabund",
            }),
        }
    }
}

impl FromStr for MethodDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodDescriptor::ALL
            .iter()
            .find(|m| m.to_string() == s.trim())
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown method descriptor `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub eigenvectors: Vec<DMatrix<f64>>,
    pub eigenvalues: Vec<Vec<f64>>,
    pub shared_count: usize,
    pub sigma: Vec<SymmetricMatrix>,
}

impl GroundTruth {
    pub fn shared_block(&self) -> DMatrix<f64> {
        self.eigenvectors[0].columns(0, self.shared_count).into_owned()
    }

    /// Orthonormal basis of the shared block projected onto the complement
    /// of the all-ones vector.
    pub fn centered_shared_block(&self) -> Result<DMatrix<f64>> {
        let mut b = self.shared_block();
        for mut c in b.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
        }
        orthonormalize(&b)
    }

    /// Per group, the true eigenvalues sorted in decreasing order over the trace.
    pub fn sorted_fractions(&self) -> Vec<Vec<f64>> {
        self.eigenvalues
            .iter()
            .map(|l| {
                let tr: f64 = l.iter().sum();
                let mut v: Vec<f64> = l.iter().map(|x| x / tr).collect();
                v.sort_by(|a, b| b.total_cmp(a));
                v
            })
            .collect()
    }
}

/// Group 1 eigenvectors from FFᵀ (F with normalized Gaussian columns); each
/// further group keeps the first q columns and completes them with fresh
/// Gaussian directions orthogonalized against everything accepted so far.
pub fn build_truth<R: Rng>(sc: &SimulationScenario, rng: &mut R) -> Result<GroundTruth> {
    let p = sc.p;
    let q = sc.q_shared;
    let mut f = DMatrix::<f64>::from_fn(p, p, |_, _| rng.sample(StandardNormal));
    for mut c in f.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    let e1 = eig_sym(&SymmetricMatrix::new(&f * f.transpose())?)?.vectors;
    let mut eigenvectors = vec![e1.clone()];
    for _ in 1..sc.groups() {
        let mut e = DMatrix::<f64>::zeros(p, p);
        e.columns_mut(0, q).copy_from(&e1.columns(0, q));
        for c in q..p {
            let mut accepted = false;
            for _ in 0..TRUTH_RETRIES {
                let mut z = DVector::<f64>::from_fn(p, |_, _| rng.sample(StandardNormal));
                let before = z.norm();
                for _ in 0..2 {
                    let prev = e.columns(0, c);
                    let coef = prev.transpose() * &z;
                    z -= prev * coef;
                }
                let after = z.norm();
                if after > 1e-6 * before {
                    e.set_column(c, &(z / after));
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                return Err(Error::Degenerate(format!(
                    "could not complete eigenvector column {} after {TRUTH_RETRIES} draws",
                    c + 1
                )));
            }
        }
        eigenvectors.push(e);
    }
    let eigenvalues = sc.group_eigenvalues()?;
    let sigma = eigenvectors
        .iter()
        .zip(&eigenvalues)
        .map(|(e, l)| {
            let d = DMatrix::from_diagonal(&DVector::from_column_slice(l));
            SymmetricMatrix::new(e * d * e.transpose())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth {
        eigenvectors,
        eigenvalues,
        shared_count: q,
        sigma,
    })
}

/// One draw of every group's counts and the number of clamped log-means.
pub fn sample_counts<R: Rng>(
    truth: &GroundTruth,
    sc: &SimulationScenario,
    rng: &mut R,
) -> Result<(Vec<CountMatrix>, usize)> {
    let p = sc.p;
    let mut out = Vec::with_capacity(sc.groups());
    let mut clamped = 0;
    for s in 0..sc.groups() {
        let [m, v] = sc.mean_law[s];
        let mean_law = Normal::new(m, v.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let [shape, rate] = sc.depth_law[s];
        let depth = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Config(e.to_string()))?;
        let mu: Vec<f64> = (0..p).map(|_| mean_law.sample(rng)).collect();
        let root = &truth.eigenvectors[s]
            * DMatrix::from_diagonal(&DVector::from_iterator(
                p,
                truth.eigenvalues[s].iter().map(|l| l.sqrt()),
            ));
        let n = sc.n[s];
        let mut counts = DMatrix::<u64>::zeros(n, p);
        for i in 0..n {
            let eps = DVector::<f64>::from_fn(p, |_, _| rng.sample(StandardNormal));
            let z = &root * eps;
            let gamma = depth.sample(rng);
            for j in 0..p {
                let mut log_lambda = mu[j] + z[j];
                if log_lambda > LOG_LAMBDA_CLAMP {
                    log_lambda = LOG_LAMBDA_CLAMP;
                    clamped += 1;
                }
                let rate = gamma * log_lambda.exp();
                counts[(i, j)] = if rate > 0.0 {
                    Poisson::new(rate)
                        .map_err(|e| Error::Degenerate(format!("poisson rate {rate}: {e}")))?
                        .sample(rng) as u64
                } else {
                    0
                };
            }
        }
        let samples = (0..n).map(|i| format!("s{}", i + 1)).collect();
        let features = (0..p).map(|j| format!("g{}", j + 1)).collect();
        out.push(CountMatrix::new(samples, features, counts, format!("group{}", s + 1))?);
    }
    if clamped > 0 {
        log::warn!("{clamped} latent log-means clamped at {LOG_LAMBDA_CLAMP}");
    }
    Ok((out, clamped))
}

/// Per-replicate outcome of one method.
#[derive(Debug, Clone)]
pub struct MethodRun {
    /// group × axis explained fraction v̂_jᵀΣ_s v̂_j / tr Σ_s
    pub fractions: Vec<Vec<f64>>,
    /// largest principal angle (degrees) to the true shared block, when the
    /// method returned at least q_shared axes
    pub max_angle_deg: Option<f64>,
    /// same, against the shared block projected onto the complement of 1,
    /// the part a depth-corrected estimate can see
    pub max_angle_centered_deg: Option<f64>,
    /// estimated per-study variances along the axes (S×axes)
    pub estimated: Option<DMatrix<f64>>,
    /// false when the basis step stopped at its iteration limit (fcpca)
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub runs: Vec<std::result::Result<MethodRun, String>>,
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct CurveSummary {
    /// per group, per axis
    pub mean: Vec<Vec<f64>>,
    pub sd: Vec<Vec<f64>>,
    pub mean_cumulative: Vec<Vec<f64>>,
    pub sd_cumulative: Vec<Vec<f64>>,
    pub successes: usize,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub scenario: SimulationScenario,
    pub methods: Vec<MethodDescriptor>,
    pub truth: GroundTruth,
    pub replicates: Vec<ReplicateOutcome>,
    pub curves: Vec<Option<CurveSummary>>,
}

impl SimulationResult {
    pub fn method_index(&self, m: MethodDescriptor) -> Option<usize> {
        self.methods.iter().position(|&x| x == m)
    }

    pub fn curve(&self, m: MethodDescriptor) -> Option<&CurveSummary> {
        self.method_index(m).and_then(|i| self.curves[i].as_ref())
    }

    /// Per replicate, the scree suggestion for each group from that method's
    /// estimated axis variances.
    pub fn scree_suggestions(&self, m: MethodDescriptor) -> Vec<Option<Vec<usize>>> {
        let Some(i) = self.method_index(m) else {
            return vec![];
        };
        self.replicates
            .iter()
            .map(|r| {
                let run = r.runs[i].as_ref().ok()?;
                let est = run.estimated.as_ref()?;
                est.row_iter()
                    .map(|row| {
                        let v: Vec<f64> = row.iter().copied().collect();
                        suggest_q(&v, DEFAULT_GAP_FRACTION).ok().map(|s| s.q)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn clamped(&self) -> usize {
        self.replicates.iter().map(|r| r.clamped).sum()
    }

    /// File name → contents, in a fixed order.
    pub fn csv_files(&self) -> Vec<(String, String)> {
        let mut files = Vec::new();
        for (m, curve) in self.methods.iter().zip(&self.curves) {
            let Some(c) = curve else { continue };
            for s in 0..self.scenario.groups() {
                let mut out = String::from(
                    "axis,mean_explained_fraction,sd_across_replicates,mean_cumulative_fraction,sd_cumulative_fraction\n",
                );
                for j in 0..c.mean[s].len() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        j + 1,
                        c.mean[s][j],
                        c.sd[s][j],
                        c.mean_cumulative[s][j],
                        c.sd_cumulative[s][j]
                    );
                }
                files.push((format!("{}_group{}.csv", m.file_stem(), s + 1), out));
            }
        }
        for (s, fr) in self.truth.sorted_fractions().iter().enumerate() {
            let mut out = String::from("axis,true_fraction,true_cumulative_fraction\n");
            let mut acc = 0.0;
            for (j, v) in fr.iter().enumerate() {
                acc += v;
                let _ = writeln!(out, "{},{v},{acc}", j + 1);
            }
            files.push((format!("truth_group{}.csv", s + 1), out));
        }
        let mut success = String::from("method,successes,replicates,rate\n");
        for (m, c) in self.methods.iter().zip(&self.curves) {
            if matches!(m, MethodDescriptor::Ensemble(_, BasisMethod::Msfa)) {
                let k = c.as_ref().map_or(0, |c| c.successes);
                let r = self.replicates.len();
                let _ = writeln!(success, "{m},{k},{r},{}", k as f64 / r as f64);
            }
        }
        files.push(("msfa_success.csv".into(), success));
        let mut conv = String::from("method,runs,converged\n");
        for (i, m) in self.methods.iter().enumerate() {
            let runs: Vec<&MethodRun> = self.replicates.iter().filter_map(|r| r.runs[i].as_ref().ok()).collect();
            let k = runs.iter().filter(|r| r.converged).count();
            let _ = writeln!(conv, "{m},{},{k}", runs.len());
        }
        files.push(("convergence.csv".into(), conv));
        let mut angles = String::from("method,replicate,max_angle_deg,max_angle_centered_deg\n");
        for (i, m) in self.methods.iter().enumerate() {
            for (r, rep) in self.replicates.iter().enumerate() {
                if let Ok(MethodRun {
                    max_angle_deg: Some(a),
                    max_angle_centered_deg: Some(c),
                    ..
                }) = &rep.runs[i]
                {
                    let _ = writeln!(angles, "{m},{},{a},{c}", r + 1);
                }
            }
        }
        files.push(("recovery_angles.csv".into(), angles));
        files
    }

    pub fn manifest(&self) -> String {
        let sc = &self.scenario;
        let mut out = String::new();
        let _ = writeln!(out, "name = {}", sc.name);
        let _ = writeln!(out, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(out, "p = {}", sc.p);
        let _ = writeln!(out, "n = {:?}", sc.n);
        let _ = writeln!(out, "q_shared = {}", sc.q_shared);
        let _ = writeln!(out, "eigen_profile = {:?}", sc.eigen_profile);
        for (s, l) in self.truth.eigenvalues.iter().enumerate() {
            let _ = writeln!(out, "eigenvalues_group{} = {:?}", s + 1, l);
        }
        if sc.eigen_profile == EigenProfile::NonDecreasing {
            let _ = writeln!(out, "permutation = {:?}", sc.permutation().unwrap_or_default());
        }
        let _ = writeln!(out, "mean_law = {:?}", sc.mean_law);
        let _ = writeln!(out, "depth_law = {:?}", sc.depth_law);
        let _ = writeln!(out, "sdc = {}", sc.sdc);
        let _ = writeln!(out, "replicates = {}", sc.replicates);
        let _ = writeln!(out, "seed = {}", sc.seed);
        let _ = writeln!(out, "axes = {}", sc.axes());
        let _ = writeln!(out, "msfa_q = {}", sc.msfa_q());
        let _ = writeln!(out, "msfa_l = {:?}", sc.msfa_l());
        let _ = writeln!(out, "clamped_log_means = {}", self.clamped());
        for (m, c) in self.methods.iter().zip(&self.curves) {
            let k = c.as_ref().map_or(0, |c| c.successes);
            let _ = writeln!(out, "method {m}: {k}/{} replicates succeeded", sc.replicates);
        }
        out
    }
}

fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn run_scenario(sc: &SimulationScenario, exec: Execution) -> Result<SimulationResult> {
    sc.validate()?;
    let methods = sc.method_descriptors()?;
    let truth = build_truth(sc, &mut replicate_rng(sc.seed, 0))?;
    let t = TransformPair::default();
    let replicates = exec
        .map(sc.replicates, |r| {
            let mut rng = replicate_rng(sc.seed, r as u64 + 1);
            run_replicate(sc, &methods, &truth, &t, &mut rng, r)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let curves = (0..methods.len())
        .map(|i| summarize(&replicates, i, sc.groups()))
        .collect();
    Ok(SimulationResult {
        scenario: sc.clone(),
        methods,
        truth,
        replicates,
        curves,
    })
}

fn run_replicate(
    sc: &SimulationScenario,
    methods: &[MethodDescriptor],
    truth: &GroundTruth,
    t: &TransformPair,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Result<ReplicateOutcome> {
    let (groups, clamped) = sample_counts(truth, sc, rng)?;
    let mut ctx = Context {
        sc,
        truth,
        t,
        groups,
        seed: rng.random(),
        per_group: Default::default(),
        pooled: Default::default(),
    };
    let runs = methods
        .iter()
        .map(|&m| {
            ctx.run(m).map_err(|e| {
                log::debug!("replicate {}: {m} failed: {e}", index + 1);
                e.to_string()
            })
        })
        .collect();
    Ok(ReplicateOutcome { runs, clamped })
}

type Cached<T> = Option<std::result::Result<T, String>>;

struct Context<'a> {
    sc: &'a SimulationScenario,
    truth: &'a GroundTruth,
    t: &'a TransformPair,
    groups: Vec<CountMatrix>,
    seed: u64,
    per_group: [Cached<Vec<StudyVarianceEstimate>>; 2],
    pooled: [Cached<StudyVarianceEstimate>; 2],
}

fn kind_index(k: VarianceKind) -> usize {
    match k {
        VarianceKind::Poisson => 0,
        VarianceKind::Pln => 1,
    }
}

impl Context<'_> {
    fn estimate(&self, x: &CountMatrix, kind: VarianceKind) -> Result<StudyVarianceEstimate> {
        let e = match kind {
            VarianceKind::Poisson => {
                let e = estimate_poisson_variance(x, self.t)?;
                if self.sc.sdc {
                    apply_sdc(&e)?
                } else {
                    e
                }
            }
            VarianceKind::Pln => {
                let offsets = self.sc.sdc.then(|| log_depth_offsets(x));
                estimate_pln_variance(x, offsets.as_deref(), self.t)?
            }
        };
        e.repaired(REPAIR_FLOOR)
    }

    fn per_group(&mut self, kind: VarianceKind) -> Result<Vec<StudyVarianceEstimate>> {
        let k = kind_index(kind);
        if self.per_group[k].is_none() {
            let r = self
                .groups
                .iter()
                .map(|x| self.estimate(x, kind))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.to_string());
            self.per_group[k] = Some(r);
        }
        self.per_group[k].clone().unwrap().map_err(Error::Degenerate)
    }

    fn pooled(&mut self, kind: VarianceKind) -> Result<StudyVarianceEstimate> {
        let k = kind_index(kind);
        if self.pooled[k].is_none() {
            let r = CountMatrix::concat(&self.groups, "pooled")
                .and_then(|x| self.estimate(&x, kind))
                .map_err(|e| e.to_string());
            self.pooled[k] = Some(r);
        }
        self.pooled[k].clone().unwrap().map_err(Error::Degenerate)
    }

    fn run(&mut self, m: MethodDescriptor) -> Result<MethodRun> {
        let axes = self.sc.axes();
        let mut converged = true;
        let (vectors, estimated) = match m {
            MethodDescriptor::Ensemble(kind, basis) => {
                let est = self.per_group(kind)?;
                let b = match basis {
                    BasisMethod::Scpca => scpca(&est, axes)?,
                    BasisMethod::Fcpca => {
                        let mut b = fcpca_best_effort(&est, None)?;
                        b.vectors = b.vectors.columns(0, axes).into_owned();
                        b.variances = b.variances.columns(0, axes).into_owned();
                        b
                    }
                    BasisMethod::Msfa => {
                        let mut cfg = MsfaConfig::new(self.sc.msfa_q(), self.sc.msfa_l());
                        cfg.restarts = self.sc.msfa_restarts;
                        cfg.seed = self.seed;
                        cfg.exec = Execution::Sequential;
                        let fit = fit_msfa(&est, &cfg)?;
                        let mats: Vec<SymmetricMatrix> = est.iter().map(|e| e.sigma.clone()).collect();
                        let w: Vec<f64> = est.iter().map(|e| e.n as f64 - 1.0).collect();
                        rotate_common(&fit, self.sc.msfa_q(), &mats, &w)?
                    }
                };
                converged = b.converged;
                (b.vectors, Some(b.variances))
            }
            MethodDescriptor::Alone(kind) => {
                let est = self.pooled(kind)?;
                let e = eig_sym(&est.sigma)?;
                let v = e.vectors.columns(0, axes).into_owned();
                (v, None)
            }
            MethodDescriptor::Naive(kind) => (naive_pca(&self.groups, kind, axes)?, None),
        };
        let ev = explained_variance_vectors(&vectors, &self.truth.sigma)?;
        let fractions = (0..self.sc.groups())
            .map(|s| {
                let tr = self.truth.sigma[s].trace();
                ev.variances.row(s).iter().map(|d| d / tr).collect()
            })
            .collect();
        let q = self.truth.shared_count;
        let max_angle = |target: &DMatrix<f64>| -> Result<Option<f64>> {
            if q == 0 || vectors.ncols() < q {
                return Ok(None);
            }
            let a = principal_angles(&vectors.columns(0, q).into_owned(), target)?;
            Ok(Some(a.iter().cloned().fold(0.0, f64::max).to_degrees()))
        };
        let max_angle_deg = max_angle(&self.truth.shared_block())?;
        let max_angle_centered_deg = match q {
            0 => None,
            _ => max_angle(&self.truth.centered_shared_block()?)?,
        };
        Ok(MethodRun {
            fractions,
            max_angle_deg,
            max_angle_centered_deg,
            estimated,
            converged,
        })
    }
}

/// Leading eigenvectors of the covariance of a transformed, column-centered
/// concatenation of the groups.
pub fn naive_pca(groups: &[CountMatrix], kind: NaiveKind, axes: usize) -> Result<DMatrix<f64>> {
    let x = CountMatrix::concat(groups, "pooled")?.to_f64();
    let rel = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for mut row in out.row_iter_mut() {
            let total: f64 = row.sum();
            if total > 0.0 {
                row /= total;
            }
        }
        out
    };
    let impute_log = |m: DMatrix<f64>| m.map(|v| if v == 0.0 { NAIVE_ZERO.ln() } else { v.ln() });
    let data = match kind {
        NaiveKind::Count => x,
        NaiveKind::LogCount => impute_log(x),
        NaiveKind::RelAbund => rel(&x),
        NaiveKind::LogRelAbund => impute_log(rel(&x)),
    };
    let n = data.nrows() as f64;
    let mean = DVector::from_iterator(data.ncols(), data.column_iter().map(|c| c.sum() / n));
    let mut centered = data;
    for mut row in centered.row_iter_mut() {
        for j in 0..row.len() {
            row[j] -= mean[j];
        }
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    let e = eig_sym(&SymmetricMatrix::new(cov)?)?;
    Ok(e.vectors.columns(0, axes.min(e.vectors.ncols())).into_owned())
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn summarize(reps: &[ReplicateOutcome], i: usize, groups: usize) -> Option<CurveSummary> {
    let ok: Vec<&MethodRun> = reps.iter().filter_map(|r| r.runs[i].as_ref().ok()).collect();
    let axes = ok.first()?.fractions[0].len();
    let mut summary = CurveSummary {
        mean: vec![vec![0.0; axes]; groups],
        sd: vec![vec![0.0; axes]; groups],
        mean_cumulative: vec![vec![0.0; axes]; groups],
        sd_cumulative: vec![vec![0.0; axes]; groups],
        successes: ok.len(),
    };
    for s in 0..groups {
        let cumulative: Vec<Vec<f64>> = ok
            .iter()
            .map(|r| {
                r.fractions[s]
                    .iter()
                    .scan(0.0, |acc, v| {
                        *acc += v;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        for j in 0..axes {
            let per: Vec<f64> = ok.iter().map(|r| r.fractions[s][j]).collect();
            (summary.mean[s][j], summary.sd[s][j]) = mean_sd(&per);
            let cum: Vec<f64> = cumulative.iter().map(|c| c[j]).collect();
            (summary.mean_cumulative[s][j], summary.sd_cumulative[s][j]) = mean_sd(&cum);
        }
    }
    Some(summary)
}

/// v_jᵀΣ_s v_j for the true shared columns, divided by the group eigenvalue.
pub fn shared_ratios(truth: &GroundTruth) -> Vec<Vec<f64>> {
    let block = truth.shared_block();
    let d = compute_variances(&block, &truth.sigma);
    (0..truth.sigma.len())
        .map(|s| {
            (0..truth.shared_count)
                .map(|j| d[(s, j)] / truth.eigenvalues[s][j])
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(extra: &str) -> SimulationScenario {
        SimulationScenario::from_toml(&format!("p = 12\nn = [40, 30]\nq_shared = 3\n{extra}")).unwrap()
    }

    #[test]
    fn unknown_key_is_named() {
        let err = SimulationScenario::from_toml("p = 5\nn = [10, 10]\nq_shared = 1\nbogus = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = SimulationScenario::from_toml("p = 5\nn = [10, 10]\nq_shared = 1\nmethods = [\"x+y\"]\n")
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn descriptors_round_trip() {
        for m in MethodDescriptor::ALL {
            assert_eq!(m.to_string().parse::<MethodDescriptor>().unwrap(), m);
        }
        assert_eq!(MethodDescriptor::ALL[0].to_string(), "poisson+scpca");
        assert_eq!(MethodDescriptor::ALL[0].file_stem(), "poisson-scpca");
    }

    #[test]
    fn shared_block_is_exact() {
        let sc = scenario("");
        let truth = build_truth(&sc, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cross = truth.eigenvectors[0].transpose() * &truth.eigenvectors[1];
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((cross[(i, j)] - want).abs() <= 1e-12);
            }
        }
        for r in shared_ratios(&truth) {
            assert!(r.iter().all(|v| (v - 1.0).abs() <= 1e-10));
        }
        for (e, s) in truth.eigenvectors.iter().zip(&truth.sigma) {
            let d = DMatrix::from_diagonal(&DVector::from_column_slice(&truth.eigenvalues[0]));
            assert!((e * d * e.transpose() - s.matrix()).abs().max() <= 1e-10);
            assert!((e.transpose() * e - DMatrix::identity(12, 12)).abs().max() <= 1e-10);
        }
    }

    #[test]
    fn full_and_empty_sharing() {
        let sc = SimulationScenario::from_toml("p = 8\nn = [5, 5]\nq_shared = 8\n").unwrap();
        let t = build_truth(&sc, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(t.eigenvectors[0], t.eigenvectors[1]);
        let sc = SimulationScenario::from_toml("p = 30\nn = [5, 5]\nq_shared = 0\n").unwrap();
        let t = build_truth(&sc, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let cross = t.eigenvectors[0].transpose() * &t.eigenvectors[1];
        assert!(cross.abs().max() < 0.9);
    }

    #[test]
    fn counts_follow_poisson_law() {
        let sc = SimulationScenario::from_toml(
            "p = 3\nn = [10000]\nq_shared = 0\nmean_law = [[2.0, 0.0]]\ndepth_law = [[1e9, 1e9]]\n",
        )
        .unwrap();
        let mut truth = build_truth(&sc, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        // Σ = 0 up to the positivity requirement on eigenvalues
        truth.eigenvalues = vec![vec![1e-300; 3]];
        let (xs, clamped) = sample_counts(&truth, &sc, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(clamped, 0);
        let lambda = 2f64.exp();
        let se = (lambda / 10000.0).sqrt();
        for c in xs[0].to_f64().column_iter() {
            assert!((c.mean() - lambda).abs() <= 3.0 * se, "{}", c.mean());
        }
    }

    #[test]
    fn doubling_depth_doubles_row_sums() {
        let base = "p = 4\nn = [4000]\nq_shared = 0\nmean_law = [[1.0, 0.0]]\n";
        let sc1 = SimulationScenario::from_toml(&format!("{base}depth_law = [[1e8, 1e8]]\n")).unwrap();
        let sc2 = SimulationScenario::from_toml(&format!("{base}depth_law = [[1e8, 5e7]]\n")).unwrap();
        let mut truth = build_truth(&sc1, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        truth.eigenvalues = vec![vec![1e-300; 4]];
        let mean_sum = |sc: &SimulationScenario| {
            let (xs, _) = sample_counts(&truth, sc, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            xs[0].row_sums().iter().sum::<u64>() as f64 / 4000.0
        };
        let ratio = mean_sum(&sc2) / mean_sum(&sc1);
        assert!((ratio - 2.0).abs() < 0.03, "{ratio}");
    }

    #[test]
    fn table_three_shapes() {
        let sc = SimulationScenario::from_toml("p = 50\nn = [200, 100]\nq_shared = 5\n").unwrap();
        let truth = build_truth(&sc, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (xs, _) = sample_counts(&truth, &sc, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(xs[0].counts().shape(), (200, 50));
        assert_eq!(xs[1].counts().shape(), (100, 50));
    }

    #[test]
    fn profiles() {
        let l = spiked_profile(10, 3);
        assert_eq!(l.len(), 10);
        assert!(l.windows(2).all(|w| w[0] >= w[1]));
        let perm = interleaved_permutation(10, 3);
        assert_eq!(perm, vec![1, 3, 5, 2, 4, 6, 7, 8, 9, 10]);
        let sc = scenario("eigen_profile = \"non-decreasing\"\n");
        let ev = sc.group_eigenvalues().unwrap();
        assert!(ev[0][1] < ev[0][3]);
    }

    #[test]
    fn reproducible_and_monotone_curves() {
        let sc = scenario(
            "replicates = 3\naxes = 12\nseed = 9\nmethods = [\"poisson+scpca\", \"poisson+fcpca\", \"naive-logcount\", \"poisson-alone\"]\n",
        );
        let a = run_scenario(&sc, Execution::Parallel).unwrap();
        let b = run_scenario(&sc, Execution::Sequential).unwrap();
        assert_eq!(a.csv_files(), b.csv_files());
        for c in a.curves.iter().flatten() {
            for cum in &c.mean_cumulative {
                assert!(cum.windows(2).all(|w| w[1] >= w[0] - 1e-12));
                assert!((cum[11] - 1.0).abs() <= 1e-8, "{}", cum[11]);
            }
        }
    }
}
