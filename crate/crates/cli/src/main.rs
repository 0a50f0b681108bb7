use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poisson_cpca::cpca::BasisMethod;
use poisson_cpca::exec::configure_threads;
use poisson_cpca::pipeline::{cmd_pipeline, write_bundle, RunConfigPatch, StudySpec};
use poisson_cpca::scree::{gap_table, parse_eigenvalue_table, DEFAULT_GAP_FRACTION};
use poisson_cpca::simulate::{run_scenario, SimulationScenario};
use poisson_cpca::transform::{build_transform, default_grid, DEFAULT_CUTOFF};
use poisson_cpca::variance::VarianceMethod;
use poisson_cpca::{Error, ErrorKind, Execution, Result};

/// Thread count for the rayon pool. The only setting read from the environment.
const THREADS_VAR: &str = "POISSON_CPCA_THREADS";

const BIAS_LIMIT: f64 = 0.05;
const K_LIMIT: f64 = 0.10;

#[derive(Parser)]
#[command(name = "poisson-cpca", version, about = "Common principal components for multi-study count data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest studies, estimate covariances, extract a common basis and project scores.
    Pipeline(PipelineArgs),
    /// Run a simulation scenario and write explained-variance curves.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Suggest q from an eigenvalue table (`study,d_1,..,d_q`).
    Scree {
        eigenvalues: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GAP_FRACTION)]
        fraction: f64,
    },
    /// Build the log transform and write its tables and calibration.
    TransformAudit {
        #[arg(long, default_value_t = DEFAULT_CUTOFF)]
        cutoff: u64,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML run config; its settings override flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// PATH:LABEL, repeatable
    #[arg(long = "study", value_parser = parse_study)]
    studies: Vec<StudySpec>,
    #[arg(long)]
    feature_map: Option<PathBuf>,
    #[arg(long, value_parser = parse_variance)]
    variance_method: Option<VarianceMethod>,
    #[arg(long)]
    sdc: Option<bool>,
    #[arg(long, value_parser = parse_basis)]
    basis_method: Option<BasisMethod>,
    #[arg(long)]
    q: Option<usize>,
    /// comma-separated per-study factor counts
    #[arg(long, value_delimiter = ',')]
    msfa_l: Option<Vec<usize>>,
    #[arg(long)]
    msfa_restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nzv_freq_ratio: Option<f64>,
    #[arg(long)]
    nzv_unique_fraction: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn parse_study(s: &str) -> std::result::Result<StudySpec, String> {
    let (path, label) = s
        .rsplit_once(':')
        .ok_or_else(|| format!("expected PATH:LABEL, got `{s}`"))?;
    Ok(StudySpec {
        path: path.into(),
        label: label.into(),
    })
}

fn parse_variance(s: &str) -> std::result::Result<VarianceMethod, String> {
    match s {
        "poisson-moment" => Ok(VarianceMethod::PoissonMoment),
        "pln-variational" => Ok(VarianceMethod::PlnVariational),
        _ => Err(format!("unknown variance method `{s}` (poisson-moment, pln-variational)")),
    }
}

fn parse_basis(s: &str) -> std::result::Result<BasisMethod, String> {
    match s {
        "scpca" => Ok(BasisMethod::Scpca),
        "fcpca" => Ok(BasisMethod::Fcpca),
        "msfa" => Ok(BasisMethod::Msfa),
        _ => Err(format!("unknown basis method `{s}` (scpca, fcpca, msfa)")),
    }
}

impl PipelineArgs {
    fn into_patch(self) -> Result<RunConfigPatch> {
        let flags = RunConfigPatch {
            studies: (!self.studies.is_empty()).then_some(self.studies),
            feature_map: self.feature_map,
            variance_method: self.variance_method,
            sdc: self.sdc,
            basis_method: self.basis_method,
            q: self.q,
            msfa_l: self.msfa_l,
            msfa_restarts: self.msfa_restarts,
            seed: self.seed,
            nzv_freq_ratio: self.nzv_freq_ratio,
            nzv_unique_fraction: self.nzv_unique_fraction,
            output_dir: self.output_dir,
        };
        match &self.config {
            Some(path) => Ok(flags.overridden_by(RunConfigPatch::from_file(path)?)),
            None => Ok(flags),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pipeline(args) => {
            let cfg = args.into_patch()?.resolve()?;
            let out = cmd_pipeline(&cfg, Execution::Parallel)?;
            for note in &out.notes {
                log::info!("{note}");
            }
            println!(
                "wrote {} studies, {} features, q = {} to {}",
                out.labels.len(),
                out.features.len(),
                cfg.q,
                cfg.output_dir.display()
            );
        }
        Command::Simulate { scenario, output_dir } => {
            let text = std::fs::read_to_string(&scenario)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", scenario.display())))?;
            let sc = SimulationScenario::from_toml(&text)?;
            let result = run_scenario(&sc, Execution::Parallel)?;
            let mut files = result.csv_files();
            files.push(("manifest.txt".into(), result.manifest()));
            write_bundle(&output_dir, &files)?;
            if result.clamped() > 0 {
                log::warn!("{} latent values clamped", result.clamped());
            }
            println!("wrote {} files to {}", files.len(), output_dir.display());
        }
        Command::Scree { eigenvalues, fraction } => {
            let text = std::fs::read_to_string(&eigenvalues)?;
            let rows = parse_eigenvalue_table(&text)?;
            let (table, suggestions) = gap_table(&rows, fraction)?;
            print!("{table}");
            for ((study, _), s) in rows.iter().zip(&suggestions) {
                eprintln!("{study}: suggested q = {}{}", s.q, if s.flat { " (flat spectrum)" } else { "" });
            }
        }
        Command::TransformAudit { cutoff, output_dir } => {
            let grid = default_grid_for(cutoff);
            let t = build_transform(cutoff, &grid)?;
            let files = vec![
                ("transform.csv".to_string(), t.to_csv()),
                ("calibration.csv".to_string(), t.calibration_csv()),
            ];
            write_bundle(&output_dir, &files)?;
            let (bias, k) = (t.bias_tolerance(), t.k_tolerance());
            let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
            println!("max |bias| for lambda >= 1: {bias:.4} (limit {BIAS_LIMIT}) {}", verdict(bias <= BIAS_LIMIT));
            println!("max k relative error for lambda >= 1: {k:.4} (limit {K_LIMIT}) {}", verdict(k <= K_LIMIT));
        }
    }
    Ok(())
}

/// The default grid covers [0.25, 60]; larger cutoffs need it to reach 2M.
fn default_grid_for(cutoff: u64) -> Vec<f64> {
    let hi = 2.0 * cutoff as f64;
    if hi <= 60.0 {
        default_grid()
    } else {
        poisson_cpca::transform::log_spaced(0.25, hi, 60)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var(THREADS_VAR) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                configure_threads(n);
            }
            _ => log::warn!("ignoring {THREADS_VAR}={v}: expected a positive integer"),
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Convergence => 4,
            })
        }
    }
}
