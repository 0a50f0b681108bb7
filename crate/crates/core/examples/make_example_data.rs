//! Regenerates the bundled example studies under `data/example/`.

use std::fs;
use std::path::Path;

use poisson_cpca::ingest::{write_counts, CountMatrix};
use poisson_cpca::simulate::{build_truth, sample_counts, SimulationScenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/example");
    fs::create_dir_all(&dir)?;
    let sc = SimulationScenario::from_toml("p = 16\nn = [30, 24]\nq_shared = 3\nseed = 7\n")?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let truth = build_truth(&sc, &mut rng)?;
    let (xs, _) = sample_counts(&truth, &sc, &mut rng)?;
    let mut map = String::from("feature\tgroup\n");
    for j in 0..sc.p {
        map.push_str(&format!("strain{:02}\tgenus{:02}\n", j + 1, j / 2 + 1));
    }
    fs::write(dir.join("genus_map.tsv"), map)?;
    for (x, label) in xs.iter().zip(["cohortA", "cohortB"]) {
        let samples = x.samples().iter().map(|s| format!("{label}_{s}")).collect();
        let features = (1..=sc.p).map(|j| format!("strain{j:02}")).collect();
        let named = CountMatrix::new(samples, features, x.counts().clone(), label)?;
        write_counts(&dir.join(format!("{label}.tsv")), &named)?;
    }
    Ok(())
}
