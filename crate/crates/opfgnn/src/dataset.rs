//! Load-scenario sampling and on-disk dataset persistence.
//!
//! A dataset is a directory holding a JSON manifest (identity and sampling
//! bounds) and a CSV body with one row per (sample, bus). Floats are written
//! in Rust's shortest round-trip form, so save followed by load is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::NetworkCase;
use crate::matrix::Matrix;

pub const DEFAULT_LOW: f64 = 0.9;
pub const DEFAULT_HIGH: f64 = 1.1;

const DATASET_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const SAMPLES_FILE: &str = "samples.csv";
const CSV_HEADER: &str = "sample_id,bus_id,p_demand,q_demand";

/// A set of demand scenarios for one network: each sample is an N x 2 matrix
/// of per-bus (active, reactive) demand in p.u.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadDataset {
    pub case_name: String,
    pub seed: u64,
    pub low: f64,
    pub high: f64,
    pub bus_ids: Vec<u32>,
    pub samples: Vec<Matrix>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported dataset version {found}; this build reads version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("samples file is truncated: expected {expected} data rows, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("samples row {row}: {detail}")]
    Malformed { row: usize, detail: String },
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    case_name: String,
    seed: u64,
    low: f64,
    high: f64,
    sample_count: usize,
    bus_count: usize,
}

/// Draws `n` demand scenarios, each entry uniform between `low` and `high`
/// times the per-bus reference demand (active and reactive independently).
/// Deterministic in (`case`, `n`, `seed`).
pub fn sample_loads(case: &NetworkCase, n: usize, seed: u64, low: f64, high: f64) -> LoadDataset {
    assert!(n >= 1, "sample_loads: need at least one sample");
    assert!(0.0 <= low && low <= high, "sample_loads: need 0 <= low <= high, got [{low}, {high}]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_bus = case.buses.len();
    let draw = |rng: &mut ChaCha8Rng| if low == high { low } else { rng.random_range(low..high) };
    let samples = (0..n)
        .map(|_| {
            let mut m = Matrix::zeros(n_bus, 2);
            for (j, bus) in case.buses.iter().enumerate() {
                // Scaling the reference keeps zero-demand buses exactly zero.
                let p = bus.demand.re * draw(&mut rng);
                let q = bus.demand.im * draw(&mut rng);
                m.set(j, 0, p);
                m.set(j, 1, q);
            }
            m
        })
        .collect();
    LoadDataset {
        case_name: case.name.clone(),
        seed,
        low,
        high,
        bus_ids: case.buses.iter().map(|b| b.bus_id).collect(),
        samples,
    }
}

impl LoadDataset {
    /// Warning text when this dataset was sampled for a different network
    /// than the one it is about to be used with.
    pub fn case_mismatch_warning(&self, expected: &str) -> Option<String> {
        (self.case_name != expected).then(|| {
            format!(
                "dataset was sampled for case {:?} but is being used with case {:?}",
                self.case_name, expected
            )
        })
    }
}

pub fn save_dataset(ds: &LoadDataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: DATASET_VERSION,
        case_name: ds.case_name.clone(),
        seed: ds.seed,
        low: ds.low,
        high: ds.high,
        sample_count: ds.samples.len(),
        bus_count: ds.bus_ids.len(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    let mut body = String::with_capacity(32 * ds.samples.len() * ds.bus_ids.len() + 64);
    body.push_str(CSV_HEADER);
    body.push('\n');
    for (s, sample) in ds.samples.iter().enumerate() {
        for (j, &bus_id) in ds.bus_ids.iter().enumerate() {
            // Display prints the shortest digits that parse back to the same
            // f64, which is what makes the round trip bit-exact.
            body.push_str(&format!("{s},{bus_id},{},{}\n", sample.get(j, 0), sample.get(j, 1)));
        }
    }
    let mut f = fs::File::create(dir.join(SAMPLES_FILE))?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<LoadDataset, DatasetError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != DATASET_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: manifest.version,
            supported: DATASET_VERSION,
        });
    }
    let body = fs::read_to_string(dir.join(SAMPLES_FILE))?;
    let mut lines = body.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(DatasetError::Malformed {
                row: 0,
                detail: format!("expected header {CSV_HEADER:?}, found {other:?}"),
            })
        }
    }
    let n_bus = manifest.bus_count;
    let expected = manifest.sample_count * n_bus;
    let mut bus_ids: Vec<u32> = Vec::with_capacity(n_bus);
    let mut samples = vec![Matrix::zeros(n_bus, 2); manifest.sample_count];
    let mut count = 0usize;
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |name: &str| {
            fields.next().ok_or(DatasetError::Malformed {
                row: row + 1,
                detail: format!("missing {name} column"),
            })
        };
        let sample_id: usize = parse_field(next("sample_id")?, row + 1)?;
        let bus_id: u32 = parse_field(next("bus_id")?, row + 1)?;
        let p: f64 = parse_field(next("p_demand")?, row + 1)?;
        let q: f64 = parse_field(next("q_demand")?, row + 1)?;
        if count >= expected || sample_id != count / n_bus {
            return Err(DatasetError::Malformed {
                row: row + 1,
                detail: format!("out-of-order sample id {sample_id}"),
            });
        }
        let j = count % n_bus;
        if sample_id == 0 {
            bus_ids.push(bus_id);
        } else if bus_ids[j] != bus_id {
            return Err(DatasetError::Malformed {
                row: row + 1,
                detail: format!("bus id {bus_id} does not match sample 0 order"),
            });
        }
        samples[sample_id].set(j, 0, p);
        samples[sample_id].set(j, 1, q);
        count += 1;
    }
    if count != expected {
        return Err(DatasetError::Truncated { expected, found: count });
    }
    Ok(LoadDataset {
        case_name: manifest.case_name,
        seed: manifest.seed,
        low: manifest.low,
        high: manifest.high,
        bus_ids,
        samples,
    })
}

fn parse_field<T: std::str::FromStr>(tok: &str, row: usize) -> Result<T, DatasetError> {
    tok.trim().parse().map_err(|_| DatasetError::Malformed {
        row,
        detail: format!("cannot parse field {tok:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::parse_matpower;
    use proptest::prelude::*;

    const MINI: &str = "\
function mpc = mini
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0   0  0  0  1  1.0  0  135  1  1.05  0.95;
    2  1  40 10  1  5  1  1.0  0  135  1  1.05  0.95;
];
mpc.gen = [ 1  45  0  80  -50  1.0  100  1  100  0; ];
mpc.branch = [ 1  2  0.05  0.25  0.04  80  0  0  0.98  1  1  -30  30; ];
mpc.gencost = [ 2  0  0  3  0.005  10  10000; ];
";

    fn mini() -> NetworkCase {
        parse_matpower(MINI).unwrap()
    }

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir()
            .join(format!("opfgnn-dataset-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn degenerate_bounds_reproduce_reference_demand() {
        let case = mini();
        let ds = sample_loads(&case, 3, 7, 1.0, 1.0);
        for sample in &ds.samples {
            assert_eq!(sample.get(1, 0), case.buses[1].demand.re);
            assert_eq!(sample.get(1, 1), case.buses[1].demand.im);
        }
    }

    #[test]
    fn zero_demand_bus_stays_zero() {
        let ds = sample_loads(&mini(), 20, 3, 0.9, 1.1);
        for sample in &ds.samples {
            assert_eq!(sample.get(0, 0), 0.0);
            assert_eq!(sample.get(0, 1), 0.0);
        }
    }

    #[test]
    fn same_seed_gives_bitwise_identical_datasets() {
        let a = sample_loads(&mini(), 10, 99, 0.9, 1.1);
        let b = sample_loads(&mini(), 10, 99, 0.9, 1.1);
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            let bits_a: Vec<u64> = sa.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = sb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn save_then_load_round_trips_bit_exact() {
        let ds = sample_loads(&mini(), 3, 11, 0.9, 1.1);
        let dir = temp_dir("roundtrip");
        save_dataset(&ds, &dir).unwrap();
        let back = load_dataset(&dir).unwrap();
        assert_eq!(ds, back);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn version_mismatch_is_an_explicit_error() {
        let ds = sample_loads(&mini(), 1, 0, 0.9, 1.1);
        let dir = temp_dir("version");
        save_dataset(&ds, &dir).unwrap();
        let manifest_path = dir.join(MANIFEST_FILE);
        let bumped = fs::read_to_string(&manifest_path).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&manifest_path, bumped).unwrap();
        let err = load_dataset(&dir).unwrap_err();
        assert!(matches!(err, DatasetError::VersionMismatch { found: 9, supported: 1 }), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_samples_file_is_an_explicit_error() {
        let ds = sample_loads(&mini(), 4, 0, 0.9, 1.1);
        let dir = temp_dir("truncated");
        save_dataset(&ds, &dir).unwrap();
        let csv_path = dir.join(SAMPLES_FILE);
        let body = fs::read_to_string(&csv_path).unwrap();
        let keep: Vec<&str> = body.lines().take(1 + 5).collect();
        fs::write(&csv_path, keep.join("\n")).unwrap();
        let err = load_dataset(&dir).unwrap_err();
        assert!(matches!(err, DatasetError::Truncated { expected: 8, found: 5 }), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn mismatched_case_name_surfaces_a_warning() {
        let ds = sample_loads(&mini(), 1, 0, 0.9, 1.1);
        assert!(ds.case_mismatch_warning("mini").is_none());
        let warning = ds.case_mismatch_warning("case30").unwrap();
        assert!(warning.contains("mini") && warning.contains("case30"), "{warning}");
    }

    #[test]
    fn empty_sample_rows_are_never_produced_but_empty_dataset_loads() {
        // A dataset whose samples list is empty still round-trips.
        let mut ds = sample_loads(&mini(), 1, 0, 0.9, 1.1);
        ds.samples.clear();
        let dir = temp_dir("empty");
        save_dataset(&ds, &dir).unwrap();
        let back = load_dataset(&dir).unwrap();
        assert!(back.samples.is_empty());
        assert!(back.bus_ids.is_empty(), "bus order is recovered from rows, none were written");
        fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #[test]
        fn every_sample_lies_inside_the_scaled_interval(
            seed in 0u64..1_000,
            low in 0.5f64..1.0,
            width in 0.0f64..0.5,
        ) {
            let case = mini();
            let high = low + width;
            let ds = sample_loads(&case, 5, seed, low, high);
            for sample in &ds.samples {
                for (j, bus) in case.buses.iter().enumerate() {
                    for (c, r) in [(0, bus.demand.re), (1, bus.demand.im)] {
                        let (lo, hi) = (low * r, high * r);
                        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                        let v = sample.get(j, c);
                        prop_assert!(v >= lo && v <= hi, "bus {j} col {c}: {v} outside [{lo}, {hi}]");
                    }
                }
            }
        }
    }
}
