//! Staged experiment runner: gen-data → prep → pretrain → consensus →
//! train → evaluate, plus the ablation grid. Each stage writes its
//! artifacts and a `stage.json` recording input hashes; a stage whose
//! inputs hash the same as last time and whose outputs still exist is
//! skipped.

mod config;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{ConsensusConfig, RunConfig, SCHEMA_VERSION};
pub use stages::{AblationRow, CaseConsensus, ConsensusFile, Prediction, TrainedVariant};

use crate::error::{Error, Result};
use crate::manifest::{AccessEvent, StageTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub status: StageStatus,
}

#[derive(Serialize, Deserialize)]
struct StageRecord {
    stage: String,
    schema_version: u32,
    inputs: BTreeMap<String, String>,
    input_hash: String,
    outputs: Vec<String>,
}

pub(crate) fn sha_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn sha_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha_bytes(&bytes))
}

pub(crate) fn sha_json<T: Serialize>(v: &T) -> String {
    sha_bytes(&serde_json::to_vec(v).expect("serializable"))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path, e))?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runner bound to one run directory.
pub struct Pipeline {
    cfg: RunConfig,
    root: PathBuf,
    audit: Mutex<Vec<AccessEvent>>,
    outcomes: Vec<StageOutcome>,
}

impl Pipeline {
    /// Validates every stage config before anything runs.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let cfg = cfg.normalized();
        cfg.validate()?;
        let root = cfg.out_dir.clone();
        Ok(Pipeline { cfg, root, audit: Mutex::new(Vec::new()), outcomes: Vec::new() })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn outcomes(&self) -> &[StageOutcome] {
        &self.outcomes
    }

    /// Surgical-label reads made through any manifest this runner opened.
    pub fn ground_truth_access(&self) -> Vec<AccessEvent> {
        self.audit.lock().expect("audit lock").clone()
    }

    pub(crate) fn record_access(&self, events: Vec<AccessEvent>) {
        self.audit.lock().expect("audit lock").extend(events);
    }

    pub fn stage_dir(&self, tag: StageTag) -> PathBuf {
        self.root.join(tag.name())
    }

    fn record_path(&self, tag: StageTag) -> PathBuf {
        self.stage_dir(tag).join("stage.json")
    }

    /// Hash over the current bytes of every output an upstream stage
    /// recorded.
    pub(crate) fn digest(&self, tag: StageTag) -> Result<String> {
        let rp = self.record_path(tag);
        if !rp.exists() {
            return Err(Error::Dependency(format!(
                "stage `{}` has not completed in {}",
                tag.name(),
                self.root.display()
            )));
        }
        let rec: StageRecord = read_json(&rp)?;
        let mut h = Sha256::new();
        for o in &rec.outputs {
            h.update(o.as_bytes());
            h.update([0]);
            h.update(sha_file(&self.root.join(o))?.as_bytes());
            h.update([b'\n']);
        }
        Ok(hex::encode(h.finalize()))
    }

    fn cached(&self, tag: StageTag, input_hash: &str) -> bool {
        let Ok(rec) = read_json::<StageRecord>(&self.record_path(tag)) else { return false };
        rec.input_hash == input_hash
            && rec.schema_version == SCHEMA_VERSION
            && rec.outputs.iter().all(|o| self.root.join(o).exists())
    }

    /// Runs `body` unless cached. `body` returns output paths relative to
    /// the run directory. Failures are tagged with the stage name; partial
    /// artifacts stay on disk.
    pub(crate) fn stage(
        &mut self,
        tag: StageTag,
        inputs: BTreeMap<String, String>,
        body: impl FnOnce(&Self) -> Result<Vec<String>>,
    ) -> Result<StageStatus> {
        let input_hash = sha_json(&(SCHEMA_VERSION, tag.name(), &inputs));
        let status = if self.cached(tag, &input_hash) {
            log::info!("stage {}: inputs unchanged, skipping", tag.name());
            StageStatus::Skipped
        } else {
            log::info!("stage {}: running", tag.name());
            let dir = self.stage_dir(tag);
            ensure_dir(&dir).map_err(|e| e.in_stage(tag.name()))?;
            let rp = self.record_path(tag);
            if rp.exists() {
                fs::remove_file(&rp).map_err(|e| Error::io(&rp, e).in_stage(tag.name()))?;
            }
            let mut outputs = body(self).map_err(|e| e.in_stage(tag.name()))?;
            outputs.sort();
            let rec = StageRecord { stage: tag.name().into(), schema_version: SCHEMA_VERSION, inputs, input_hash, outputs };
            write_json(&rp, &rec).map_err(|e| e.in_stage(tag.name()))?;
            StageStatus::Ran
        };
        self.outcomes.push(StageOutcome { stage: tag.name(), status });
        Ok(status)
    }

    pub(crate) fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    /// gen-data → prep → pretrain → consensus → train → evaluate.
    pub fn run_all(&mut self) -> Result<()> {
        self.gen_data()?;
        self.prep()?;
        self.pretrain()?;
        self.consensus()?;
        self.train()?;
        self.evaluate()?;
        Ok(())
    }
}

/// Runs the six core stages in a fresh runner for `cfg`.
pub fn run_pipeline(cfg: RunConfig) -> Result<Pipeline> {
    let mut p = Pipeline::new(cfg)?;
    p.run_all()?;
    Ok(p)
}

/// Trains and evaluates the ablation grid on top of completed base-run
/// artifacts; returns the path of the CSV table.
pub fn run_ablations(cfg: RunConfig) -> Result<PathBuf> {
    let mut p = Pipeline::new(cfg)?;
    p.ablate()
}
