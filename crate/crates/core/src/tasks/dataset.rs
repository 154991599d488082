//! Newline-delimited JSON trajectory datasets with a fixed fold split.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::disk::{
    dump_frames, random_distractors, render_and_extract, simulate_disk, DiskSimConfig,
};
use super::odom::{simulate_odom2d, OdomSimConfig};
use super::TaskError;
use crate::factors::{Payload, Task};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_FOLDS: usize = 10;

/// Generator settings echoed into the dataset header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum GeneratorConfig {
    Disk(DiskSimConfig),
    Odom2d(OdomSimConfig),
}

impl GeneratorConfig {
    pub fn task(&self) -> Task {
        match self {
            GeneratorConfig::Disk(_) => Task::Disk,
            GeneratorConfig::Odom2d(_) => Task::Odom2d,
        }
    }

    pub fn length(&self) -> usize {
        match self {
            GeneratorConfig::Disk(c) => c.length,
            GeneratorConfig::Odom2d(c) => c.length,
        }
    }

    /// Offset subtracted from payloads before they reach the sensor head.
    pub fn sensor_origin(&self) -> Vec<f64> {
        match self {
            GeneratorConfig::Disk(c) => vec![c.center(); 2],
            GeneratorConfig::Odom2d(_) => vec![0.0; 2],
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub n_records: usize,
    pub length: usize,
    pub folds: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub index: usize,
    pub fold: usize,
    pub states: Vec<Vec<f64>>,
    pub payloads: Vec<Payload>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

/// Seed of record `index`, derived from the master seed.
pub fn record_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl TrajectoryDataset {
    pub fn generate(generator: GeneratorConfig, n_records: usize, seed: u64) -> Self {
        let folds = DEFAULT_FOLDS;
        let records = (0..n_records)
            .map(|index| {
                let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, index));
                let (states, payloads) = match &generator {
                    GeneratorConfig::Disk(c) => {
                        let tracked = simulate_disk(c, &mut rng);
                        let distractors = random_distractors(c, &mut rng);
                        let payloads = render_and_extract(c, &tracked, &distractors);
                        (tracked.iter().map(|s| s.to_vec()).collect(), payloads)
                    }
                    GeneratorConfig::Odom2d(c) => simulate_odom2d(c, &mut rng),
                };
                Record {
                    index,
                    fold: index % folds,
                    states,
                    payloads,
                }
            })
            .collect();
        TrajectoryDataset {
            header: DatasetHeader {
                format_version: DATASET_FORMAT_VERSION,
                n_records,
                length: generator.length(),
                folds,
                seed,
                config_hash: generator.hash(),
                generator,
            },
            records,
        }
    }

    pub fn task(&self) -> Task {
        self.header.generator.task()
    }

    pub fn write(&self, path: &Path) -> Result<(), TaskError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        let fmt = |e: serde_json::Error| TaskError::Format(e.to_string());
        writeln!(w, "{}", serde_json::to_string(&self.header).map_err(fmt)?)?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).map_err(fmt)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TaskError> {
        let file = fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| TaskError::Format("empty dataset file".into()))??;
        let header: DatasetHeader =
            serde_json::from_str(&first).map_err(|e| TaskError::Format(format!("header: {e}")))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(TaskError::Format(format!(
                "unsupported dataset format version {}",
                header.format_version
            )));
        }
        let mut records = Vec::with_capacity(header.n_records);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| TaskError::Format(format!("record line {}: {e}", i + 2)))?;
            records.push(r);
        }
        let ds = TrajectoryDataset { header, records };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<(), TaskError> {
        let h = &self.header;
        if self.records.len() != h.n_records {
            return Err(TaskError::Format(format!(
                "header declares {} records, found {}",
                h.n_records,
                self.records.len()
            )));
        }
        let state_dim = h.generator.task().state_kind().value_dim();
        for r in &self.records {
            if r.states.len() != h.length || r.payloads.len() != h.length {
                return Err(TaskError::Format(format!(
                    "record {} has length {} / {}, expected {}",
                    r.index,
                    r.states.len(),
                    r.payloads.len(),
                    h.length
                )));
            }
            if r.fold >= h.folds {
                return Err(TaskError::Format(format!(
                    "record {} fold {}",
                    r.index, r.fold
                )));
            }
            if r.states.iter().any(|s| s.len() != state_dim) {
                return Err(TaskError::Format(format!("record {} state width", r.index)));
            }
        }
        Ok(())
    }

    /// Renders the first `limit` disk records to `dir/frames/<record>/<t>.png`.
    /// Distractors are not stored, so each record is re-simulated from its
    /// seed. Returns the number of records written.
    pub fn dump_disk_frames(&self, dir: &Path, limit: usize) -> Result<usize, TaskError> {
        let GeneratorConfig::Disk(c) = &self.header.generator else {
            return Err(TaskError::Format(
                "frames exist only for the disk task".into(),
            ));
        };
        let mut written = 0;
        for r in self.records.iter().take(limit) {
            let mut rng = ChaCha8Rng::seed_from_u64(record_seed(self.header.seed, r.index));
            let tracked = simulate_disk(c, &mut rng);
            let distractors = random_distractors(c, &mut rng);
            if tracked.iter().zip(&r.states).any(|(a, b)| a[..] != b[..]) {
                return Err(TaskError::Format(format!(
                    "record {} does not match its seed",
                    r.index
                )));
            }
            dump_frames(
                c,
                &tracked,
                &distractors,
                &dir.join("frames").join(r.index.to_string()),
            )?;
            written += 1;
        }
        Ok(written)
    }

    /// Records of fold `k` and of all other folds.
    pub fn split(&self, k: usize) -> (Vec<&Record>, Vec<&Record>) {
        self.records.iter().partition(|r| r.fold != k)
    }

    pub fn fold(&self, k: usize) -> Vec<&Record> {
        self.records.iter().filter(|r| r.fold == k).collect()
    }
}
