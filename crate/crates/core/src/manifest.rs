//! Dataset manifest: one JSON array of case records, paths relative to the
//! manifest file.
//!
//! Surgical ground truth is readable only by evaluation stages; every read
//! attempt is logged so the pipeline can audit split access.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T2,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTag {
    GenData,
    Prep,
    Pretrain,
    Consensus,
    Train,
    Predict,
    Evaluate,
    Ablate,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::GenData => "gen-data",
            StageTag::Prep => "prep",
            StageTag::Pretrain => "pretrain",
            StageTag::Consensus => "consensus",
            StageTag::Train => "train",
            StageTag::Predict => "predict",
            StageTag::Evaluate => "evaluate",
            StageTag::Ablate => "ablate",
        }
    }

    fn may_read_ground_truth(self) -> bool {
        matches!(self, StageTag::Evaluate | StageTag::Ablate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub case_id: String,
    pub split: Split,
    pub t1_path: Option<String>,
    pub t2_path: Option<String>,
    pub rater_labels: Option<Vec<u8>>,
    surgical_label: Option<u8>,
    pub center_voxel: [usize; 3],
}

impl Record {
    pub fn new(case_id: impl Into<String>, split: Split, center_voxel: [usize; 3]) -> Self {
        Record {
            case_id: case_id.into(),
            split,
            t1_path: None,
            t2_path: None,
            rater_labels: None,
            surgical_label: None,
            center_voxel,
        }
    }

    pub fn with_surgical_label(mut self, label: Option<u8>) -> Self {
        self.surgical_label = label;
        self
    }

    pub fn has_surgical_label(&self) -> bool {
        self.surgical_label.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub stage: StageTag,
    pub case_id: String,
    pub allowed: bool,
}

#[derive(Debug)]
pub struct DatasetManifest {
    root: PathBuf,
    records: Vec<Record>,
    audit: Mutex<Vec<AccessEvent>>,
}

impl Clone for DatasetManifest {
    fn clone(&self) -> Self {
        DatasetManifest {
            root: self.root.clone(),
            records: self.records.clone(),
            audit: Mutex::new(self.access_log()),
        }
    }
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        let mut ids: Vec<&str> = records.iter().map(|r| r.case_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate case_id `{}`", w[0])));
        }
        for r in &records {
            if let Some(l) = &r.rater_labels {
                if l.iter().any(|&x| x > 1) {
                    return Err(Error::Data(format!("case `{}` has non-binary rater labels", r.case_id)));
                }
            }
            if r.surgical_label.is_some_and(|x| x > 1) {
                return Err(Error::Data(format!("case `{}` has a non-binary surgical label", r.case_id)));
            }
        }
        Ok(DatasetManifest { root: root.into(), records, audit: Mutex::new(Vec::new()) })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<Record> = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.records).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Surgical label of `record`, only for stages allowed to see it.
    pub fn surgical_label(&self, record: &Record, stage: StageTag) -> Result<Option<u8>> {
        let allowed = stage.may_read_ground_truth();
        self.audit.lock().expect("audit lock").push(AccessEvent {
            stage,
            case_id: record.case_id.clone(),
            allowed,
        });
        if !allowed {
            return Err(Error::Data(format!(
                "stage `{}` may not read surgical labels (case `{}`)",
                stage.name(),
                record.case_id
            )));
        }
        Ok(record.surgical_label)
    }

    pub fn access_log(&self) -> Vec<AccessEvent> {
        self.audit.lock().expect("audit lock").clone()
    }

    /// Labeled records (train + val) in manifest order.
    pub fn labeled(&self) -> Vec<&Record> {
        self.records.iter().filter(|r| matches!(r.split, Split::Train | Split::Val)).collect()
    }

    /// Number of raters, checked consistent across labeled records.
    pub fn rater_count(&self) -> Result<usize> {
        let mut k = None;
        for r in self.records.iter().filter(|r| r.split != Split::Pretrain) {
            let Some(l) = &r.rater_labels else {
                return Err(Error::Data(format!("case `{}` has no rater labels", r.case_id)));
            };
            match k {
                None => k = Some(l.len()),
                Some(k) if k != l.len() => {
                    return Err(Error::Data(format!(
                        "case `{}` has {} rater labels, expected {k}",
                        r.case_id,
                        l.len()
                    )))
                }
                _ => {}
            }
        }
        k.filter(|&k| k > 0).ok_or_else(|| Error::Data("manifest has no rater-labelled cases".into()))
    }

    /// Copy of the manifest relocated to `root` with rewritten paths.
    pub fn with_records(&self, root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        Self::new(root, records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        let mut a = Record::new("a", Split::Train, [0, 0, 0]);
        a.rater_labels = Some(vec![1, 0, 1]);
        let mut b = Record::new("b", Split::Test, [0, 0, 0]).with_surgical_label(Some(1));
        b.rater_labels = Some(vec![0, 0, 1]);
        DatasetManifest::new("/tmp", vec![a, b]).unwrap()
    }

    #[test]
    fn ground_truth_gated_by_stage() {
        let m = sample();
        let test = m.split(Split::Test)[0].clone();
        assert!(m.surgical_label(&test, StageTag::Train).is_err());
        assert_eq!(m.surgical_label(&test, StageTag::Evaluate).unwrap(), Some(1));
        let log = m.access_log();
        assert_eq!(log.len(), 2);
        assert!(!log[0].allowed && log[1].allowed);
    }

    #[test]
    fn json_roundtrip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        let m = sample();
        m.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.trim_start().starts_with('['));
        assert!(text.contains("\"surgical_label\": 1"));
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.records(), m.records());
        assert_eq!(back.root(), dir.path());
        assert_eq!(back.rater_count().unwrap(), 3);
    }

    #[test]
    fn rejects_unknown_keys_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, r#"[{"case_id":"a","split":"train","t1_path":null,"t2_path":null,"rater_labels":null,"surgical_label":null,"center_voxel":[0,0,0],"typo":1}]"#).unwrap();
        assert!(DatasetManifest::load(&p).is_err());
        let r = Record::new("x", Split::Train, [0, 0, 0]);
        assert!(DatasetManifest::new("/", vec![r.clone(), r]).is_err());
    }
}
