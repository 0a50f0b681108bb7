//! End-to-end run: read studies, estimate per-study covariances, extract a
//! common basis, project scores, and write a CSV bundle.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cpca::{fcpca, scpca, BasisMethod, CommonBasis};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ingest::{aggregate, harmonize, read_counts, CountMatrix, FeatureMap, NzvRule};
use crate::linalg::orthonormality_defect;
use crate::msfa::{fit_msfa, rotate_common, MsfaConfig, MsfaFit};
use crate::pln::{estimate_pln_variance, log_depth_offsets};
use crate::scores::{center_and_pool, project_scores, ScoreFit};
use crate::transform::TransformPair;
use crate::variance::{apply_sdc, estimate_poisson_variance, StudyVarianceEstimate, VarianceMethod};

/// Floor scale handed to psd_repair before the basis step.
pub const REPAIR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub path: PathBuf,
    pub label: String,
}

/// Every field optional: one layer of settings (defaults, flags or a file).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigPatch {
    pub studies: Option<Vec<StudySpec>>,
    pub feature_map: Option<PathBuf>,
    pub variance_method: Option<VarianceMethod>,
    pub sdc: Option<bool>,
    pub basis_method: Option<BasisMethod>,
    pub q: Option<usize>,
    pub msfa_l: Option<Vec<usize>>,
    pub msfa_restarts: Option<usize>,
    pub seed: Option<u64>,
    pub nzv_freq_ratio: Option<f64>,
    pub nzv_unique_fraction: Option<f64>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfigPatch {
    /// Parse a TOML file; relative paths are resolved against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut patch = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(studies) = &mut patch.studies {
            studies.iter_mut().for_each(|s| resolve(&mut s.path));
        }
        if let Some(m) = &mut patch.feature_map {
            resolve(m);
        }
        if let Some(o) = &mut patch.output_dir {
            resolve(o);
        }
        Ok(patch)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {}", e.message())))
    }

    /// Fields set in `other` win.
    pub fn overridden_by(self, other: RunConfigPatch) -> RunConfigPatch {
        RunConfigPatch {
            studies: other.studies.or(self.studies),
            feature_map: other.feature_map.or(self.feature_map),
            variance_method: other.variance_method.or(self.variance_method),
            sdc: other.sdc.or(self.sdc),
            basis_method: other.basis_method.or(self.basis_method),
            q: other.q.or(self.q),
            msfa_l: other.msfa_l.or(self.msfa_l),
            msfa_restarts: other.msfa_restarts.or(self.msfa_restarts),
            seed: other.seed.or(self.seed),
            nzv_freq_ratio: other.nzv_freq_ratio.or(self.nzv_freq_ratio),
            nzv_unique_fraction: other.nzv_unique_fraction.or(self.nzv_unique_fraction),
            output_dir: other.output_dir.or(self.output_dir),
        }
    }

    pub fn resolve(self) -> Result<RunConfig> {
        let d = NzvRule::default();
        let cfg = RunConfig {
            studies: self.studies.unwrap_or_default(),
            feature_map: self.feature_map,
            variance_method: self.variance_method.unwrap_or(VarianceMethod::PoissonMoment),
            sdc: self.sdc.unwrap_or(true),
            basis_method: self.basis_method.unwrap_or(BasisMethod::Scpca),
            q: self
                .q
                .ok_or_else(|| Error::Config("q is required".into()))?,
            msfa_l: self.msfa_l,
            msfa_restarts: self.msfa_restarts.unwrap_or(5),
            seed: self.seed.unwrap_or(0),
            nzv: NzvRule {
                freq_ratio: self.nzv_freq_ratio.unwrap_or(d.freq_ratio),
                unique_fraction: self.nzv_unique_fraction.unwrap_or(d.unique_fraction),
            },
            output_dir: self
                .output_dir
                .ok_or_else(|| Error::Config("output_dir is required".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub studies: Vec<StudySpec>,
    pub feature_map: Option<PathBuf>,
    pub variance_method: VarianceMethod,
    pub sdc: bool,
    pub basis_method: BasisMethod,
    pub q: usize,
    pub msfa_l: Option<Vec<usize>>,
    pub msfa_restarts: usize,
    pub seed: u64,
    pub nzv: NzvRule,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.studies.is_empty() {
            return Err(Error::Config("at least one study is required".into()));
        }
        if self.q == 0 {
            return Err(Error::Config("q must be at least 1".into()));
        }
        let mut labels: Vec<&str> = self.studies.iter().map(|s| s.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("study labels must be unique".into()));
        }
        if let Some(bad) = self
            .studies
            .iter()
            .find(|s| s.label.is_empty() || s.label.contains(['/', '\\', ',']))
        {
            return Err(Error::Config(format!("invalid study label `{}`", bad.label)));
        }
        match (&self.msfa_l, self.basis_method) {
            (None, BasisMethod::Msfa) => {
                return Err(Error::Config("basis_method = msfa requires msfa_l".into()))
            }
            (Some(_), m) if m != BasisMethod::Msfa => {
                return Err(Error::Config(format!("msfa_l is only valid with basis_method = msfa, not {m}")))
            }
            (Some(l), _) if l.len() != self.studies.len() => {
                return Err(Error::Config(format!(
                    "msfa_l has {} entries for {} studies",
                    l.len(),
                    self.studies.len()
                )))
            }
            _ => {}
        }
        if self.msfa_restarts == 0 {
            return Err(Error::Config("msfa_restarts must be at least 1".into()));
        }
        Ok(())
    }

    /// Manifest text: the settings as a loadable TOML config (without
    /// `output_dir`), preceded by comment lines with run diagnostics.
    fn manifest(&self, notes: &[String]) -> Result<String> {
        // absolute paths, so the manifest replays from any working directory
        let absolute = |p: &PathBuf| fs::canonicalize(p).unwrap_or_else(|_| p.clone());
        let studies = self
            .studies
            .iter()
            .map(|s| StudySpec {
                path: absolute(&s.path),
                label: s.label.clone(),
            })
            .collect();
        let patch = RunConfigPatch {
            studies: Some(studies),
            feature_map: self.feature_map.as_ref().map(absolute),
            variance_method: Some(self.variance_method),
            sdc: Some(self.sdc),
            basis_method: Some(self.basis_method),
            q: Some(self.q),
            msfa_l: self.msfa_l.clone(),
            msfa_restarts: Some(self.msfa_restarts),
            seed: Some(self.seed),
            nzv_freq_ratio: Some(self.nzv.freq_ratio),
            nzv_unique_fraction: Some(self.nzv.unique_fraction),
            output_dir: None,
        };
        let mut out = format!("# poisson-cpca {}\n", env!("CARGO_PKG_VERSION"));
        for n in notes {
            let _ = writeln!(out, "# {n}");
        }
        out.push_str(
            &toml::to_string(&patch).map_err(|e| Error::Config(format!("manifest: {e}")))?,
        );
        Ok(out)
    }
}

/// Everything a run produces, before it is written.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub features: Vec<String>,
    pub labels: Vec<String>,
    pub estimates: Vec<StudyVarianceEstimate>,
    pub basis: CommonBasis,
    pub msfa: Option<MsfaFit>,
    pub scores: Vec<ScoreFit>,
    pub notes: Vec<String>,
}

pub fn load_studies(cfg: &RunConfig) -> Result<Vec<CountMatrix>> {
    let map = cfg.feature_map.as_deref().map(FeatureMap::read).transpose()?;
    let mut xs = Vec::with_capacity(cfg.studies.len());
    for s in &cfg.studies {
        let x = read_counts(&s.path, &s.label)?;
        xs.push(match &map {
            Some(m) => aggregate(&x, m)?,
            None => x,
        });
    }
    if xs.len() >= 2 {
        return harmonize(&xs, cfg.nzv);
    }
    let x = &xs[0];
    let keep: Vec<String> = x
        .features()
        .iter()
        .enumerate()
        .filter(|(j, _)| {
            let col: Vec<u64> = x.counts().column(*j).iter().copied().collect();
            !cfg.nzv.is_near_zero_variance(&col)
        })
        .map(|(_, f)| f.clone())
        .collect();
    if keep.is_empty() {
        return Err(Error::Harmonize("every feature was removed by the near-zero-variance filter".into()));
    }
    Ok(vec![x.select_features(&keep)?])
}

pub fn run_pipeline(cfg: &RunConfig, exec: Execution) -> Result<PipelineOutput> {
    cfg.validate()?;
    let xs = load_studies(cfg).map_err(|e| e.in_stage("ingest"))?;
    let features = xs[0].features().to_vec();
    let labels: Vec<String> = xs.iter().map(|x| x.study_label().to_string()).collect();
    let t = TransformPair::default();
    let mut notes = vec![format!("features = {}", features.len())];

    let estimates = xs
        .iter()
        .map(|x| {
            let e = match cfg.variance_method {
                VarianceMethod::PoissonMoment => {
                    let e = estimate_poisson_variance(x, &t)?;
                    if cfg.sdc {
                        apply_sdc(&e)?
                    } else {
                        e
                    }
                }
                VarianceMethod::PlnVariational => {
                    let offsets = cfg.sdc.then(|| log_depth_offsets(x));
                    estimate_pln_variance(x, offsets.as_deref(), &t)?
                }
            };
            e.repaired(REPAIR_FLOOR)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("variance"))?;
    for (label, e) in labels.iter().zip(&estimates) {
        if e.repaired {
            notes.push(format!("study {label}: covariance repaired to positive definite"));
        }
    }

    let mut msfa = None;
    let basis = match cfg.basis_method {
        BasisMethod::Scpca => scpca(&estimates, cfg.q),
        BasisMethod::Fcpca => fcpca(&estimates, Some(cfg.q)),
        BasisMethod::Msfa => {
            let mut m = MsfaConfig::new(cfg.q, cfg.msfa_l.clone().unwrap_or_default());
            m.restarts = cfg.msfa_restarts;
            m.seed = cfg.seed;
            m.exec = exec;
            fit_msfa(&estimates, &m).and_then(|fit| {
                let mats: Vec<_> = estimates.iter().map(|e| e.sigma.clone()).collect();
                let w: Vec<f64> = estimates.iter().map(|e| e.n as f64 - 1.0).collect();
                let b = rotate_common(&fit, cfg.q, &mats, &w);
                msfa = Some(fit);
                b
            })
        }
    }
    .map_err(|e| e.in_stage("basis"))?;
    if !basis.converged {
        notes.push(format!("basis ({}) hit its iteration limit", cfg.basis_method));
    }
    if let Some(f) = &msfa {
        notes.push(format!(
            "msfa restart {} selected, log-likelihood {}",
            f.restart_index,
            f.loglik()
        ));
    }

    let scores = xs
        .iter()
        .zip(&estimates)
        .map(|(x, e)| project_scores(x, e, &basis, &t, exec))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("scores"))?;
    for s in &scores {
        if s.flagged() > 0 {
            notes.push(format!("study {}: {} samples did not converge", s.study, s.flagged()));
        }
    }
    Ok(PipelineOutput {
        features,
        labels,
        estimates,
        basis,
        msfa,
        scores,
        notes,
    })
}

/// File name → contents, in write order.
pub fn bundle_files(cfg: &RunConfig, out: &PipelineOutput) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    for (label, e) in out.labels.iter().zip(&out.estimates) {
        files.push((format!("sigma_{label}.csv"), e.to_csv(&out.features)));
    }
    files.push(("basis.csv".into(), out.basis.vectors_csv(&out.features)));
    files.push(("eigenvalues.csv".into(), out.basis.variances_csv(&out.labels)));
    files.push(("scores.csv".into(), center_and_pool(&out.scores)?));
    if let Some(f) = &out.msfa {
        for (name, text) in f.csv_files(&out.features, &out.labels) {
            files.push((format!("msfa_{name}"), text));
        }
    }
    files.push(("manifest.txt".into(), cfg.manifest(&out.notes)?));
    Ok(files)
}

/// Run and write the bundle. Files go to a staging directory that replaces
/// `output_dir` only after every stage succeeded.
pub fn cmd_pipeline(cfg: &RunConfig, exec: Execution) -> Result<PipelineOutput> {
    let out = run_pipeline(cfg, exec)?;
    let files = bundle_files(cfg, &out)?;
    write_bundle(&cfg.output_dir, &files)?;
    Ok(out)
}

pub fn write_bundle(dir: &Path, files: &[(String, String)]) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("invalid output directory {}", dir.display())))?;
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".{}.staging-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    let result = (|| -> Result<()> {
        fs::create_dir(&staging)?;
        for (file, text) in files {
            fs::write(staging.join(file), text)?;
        }
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&staging, dir)?;
        Ok(())
    })();
    if result.is_err() && staging.exists() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

/// Reload `basis.csv` and return its orthonormality defect.
pub fn verify_basis_file(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .skip(1)
                .enumerate()
                .map(|(c, v)| {
                    v.parse::<f64>().map_err(|e| Error::Parse {
                        row: i + 2,
                        column: c + 2,
                        detail: e.to_string(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let p = rows.len();
    let q = rows.first().map_or(0, Vec::len);
    let m = nalgebra::DMatrix::from_fn(p, q, |i, j| rows[i][j]);
    Ok(orthonormality_defect(&m))
}
