//! On-disk layout of a run and its manifest.
//!
//! ```text
//! <out>/manifest.json
//! <out>/metrics.jsonl          one record per optimizer step
//! <out>/stats.csv
//! <out>/checkpoints/*.tlm      TinyLM checkpoints
//! <out>/checkpoints/*.opt      student AdamW state
//! <out>/datasets/*.jsonl       datasets, influence records, preference pairs
//! ```
//!
//! The manifest records the config, the SHA-256 of every artifact, and one
//! entry per finished iteration. Iteration entries form a hash chain; each
//! link covers everything in the entry except wall-clock timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::langmodel::sha256_hex;
use crate::synthesis::BuildStats;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
/// Chain value that precedes the first iteration.
pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// Wall-clock seconds of the seven iteration steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub build_probing: f64,
    pub collect_influences: f64,
    pub build_preferences: f64,
    pub train_teacher: f64,
    pub build_training: f64,
    pub train_student: f64,
    pub evaluate: f64,
}

impl StepTimings {
    pub const NAMES: [&'static str; 7] = [
        "build_probing",
        "collect_influences",
        "build_preferences",
        "train_teacher",
        "build_training",
        "train_student",
        "evaluate",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.build_probing,
            self.collect_influences,
            self.build_preferences,
            self.train_teacher,
            self.build_training,
            self.train_student,
            self.evaluate,
        ]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

/// Counts from a dataset build, without the retained instruction list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub examples: usize,
    pub prompts: usize,
    pub instruction_samples: usize,
    pub valid_instructions: usize,
    pub forbidden_dropped: usize,
    pub rouge_dropped: usize,
    pub unterminated_responses: usize,
    /// Highest pairwise ROUGE-L among retained instructions.
    pub max_pairwise_rouge: f64,
}

impl BuildSummary {
    pub fn new(examples: usize, stats: &BuildStats) -> Self {
        Self {
            examples,
            prompts: stats.prompts,
            instruction_samples: stats.instruction_samples,
            valid_instructions: stats.valid_instructions,
            forbidden_dropped: stats.forbidden_dropped,
            rouge_dropped: stats.rouge_dropped,
            unterminated_responses: stats.unterminated_responses,
            max_pairwise_rouge: crate::synthesis::max_pairwise_rouge(&stats.retained),
        }
    }
}

/// One finished iteration: file references, metrics and the chain link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub method: Method,
    pub teacher_checkpoint: String,
    pub student_checkpoint: String,
    pub student_optimizer: String,
    pub teacher_hash: String,
    pub student_hash: String,
    pub teacher_changed: bool,
    /// Dataset files written in this iteration, by role.
    pub datasets: BTreeMap<String, String>,
    pub probing: Option<BuildSummary>,
    pub training: BuildSummary,
    pub preference_pairs: usize,
    pub dpo_train_pairs: usize,
    pub dpo_heldout_pairs: usize,
    pub dpo_steps: usize,
    /// Mean DPO margin on the held-out preference pairs before and after.
    pub margin_before: Option<f64>,
    pub margin_after: Option<f64>,
    /// Positive-influence share of the probing batch (current teacher).
    pub probing_positive_fraction: Option<f64>,
    /// Positive-influence share of the first training examples (updated
    /// teacher), measured against the same student as the probing batch.
    pub shift_positive_fraction: Option<f64>,
    pub reference_loss: f64,
    pub heldout_loss: f64,
    pub exact_match: f64,
    pub pool_size: usize,
    pub prev_hash: String,
    pub hash: String,
    pub timings: StepTimings,
}

impl IterationRecord {
    /// Chain value of this entry: SHA-256 over the previous hash and the
    /// entry's JSON with `hash` emptied and timings zeroed.
    pub fn link_hash(&self) -> String {
        let mut canon = self.clone();
        canon.hash = String::new();
        canon.timings = StepTimings::default();
        let body = serde_json::to_vec(&canon).expect("record serializes");
        let mut bytes = self.prev_hash.as_bytes().to_vec();
        bytes.extend_from_slice(&body);
        sha256_hex(&bytes)
    }
}

/// Setup outputs shared by every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupRecord {
    pub base_teacher_checkpoint: String,
    pub base_teacher_hash: String,
    pub warmup_student_checkpoint: String,
    pub warmup_student_hash: String,
    pub fresh_reference_loss: f64,
    pub warmup_reference_loss: f64,
    pub warmup: BuildSummary,
    pub datasets: BTreeMap<String, String>,
    pub warmup_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub config: RunConfig,
    pub setup: SetupRecord,
    pub iterations: Vec<IterationRecord>,
    /// Relative path → SHA-256 of every artifact.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn last_hash(&self) -> &str {
        self.iterations.last().map_or(GENESIS_HASH, |r| r.hash.as_str())
    }

    /// The manifest with every wall-clock field zeroed; two runs with the
    /// same seed agree on this byte for byte.
    pub fn without_timings(&self) -> Self {
        let mut m = self.clone();
        m.setup.warmup_seconds = 0.0;
        for r in &mut m.iterations {
            r.timings = StepTimings::default();
        }
        m
    }

    /// Checks the chain and that every listed file exists with its hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let mut prev = GENESIS_HASH.to_string();
        for r in &self.iterations {
            if r.prev_hash != prev || r.link_hash() != r.hash {
                return Err(Error::Corrupt(format!("iteration {} breaks the manifest hash chain", r.iteration)));
            }
            prev = r.hash.clone();
        }
        for (name, expected) in &self.files {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
            if &sha256_hex(&bytes) != expected {
                return Err(Error::Corrupt(format!("{} does not match its manifest hash", path.display())));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// Reads and verifies the manifest in `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported manifest version {}", m.format_version)));
        }
        m.verify(dir)?;
        Ok(m)
    }
}

/// Writes artifacts under one output directory and remembers their hashes.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl ArtifactStore {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("datasets"))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn with_files(root: &Path, files: BTreeMap<String, String>) -> Result<Self> {
        let mut s = Self::create(root)?;
        s.files = files;
        Ok(s)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    /// Writes `bytes` to `name` (relative) and records the hash.
    pub fn put(&mut self, name: &str, bytes: &[u8]) -> Result<String> {
        fs::write(self.path(name), bytes)?;
        let h = sha256_hex(bytes);
        self.files.insert(name.to_string(), h.clone());
        Ok(h)
    }

    /// Serializes each record as one JSON line.
    pub fn put_jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<String> {
        let mut buf = Vec::new();
        crate::training::write_log_jsonl(records, &mut buf)?;
        self.put(name, &buf)
    }

    /// Reads `name` and checks it against the recorded hash.
    pub fn get(&self, name: &str) -> Result<Vec<u8>> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
        match self.files.get(name) {
            Some(h) if *h != sha256_hex(&bytes) => Err(Error::Corrupt(format!("{} does not match its manifest hash", path.display()))),
            _ => Ok(bytes),
        }
    }
}
