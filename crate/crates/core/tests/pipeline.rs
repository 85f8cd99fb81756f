use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use haicomm::manifest::StageTag;
use haicomm::metrics::MetricsReport;
use haicomm::pipeline::{AblationRow, Pipeline, RunConfig, StageStatus};
use haicomm::Error;

/// Small enough to run every stage in seconds.
fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig { out_dir: out.to_path_buf(), ..RunConfig::default() };
    cfg.data.n_pretrain = 24;
    cfg.data.n_train = 16;
    cfg.data.n_val = 4;
    cfg.data.n_test = 10;
    cfg.data.min_pretrain_ratio = 1.0;
    cfg.pretrain.epochs = 2;
    cfg.consensus.classifier.folds = 2;
    cfg.consensus.classifier.train.max_epochs = 3;
    cfg.fusion.max_epochs = 3;
    cfg.fusion.warmup_epochs = 1.0;
    cfg.metrics.n_bootstrap = 50;
    cfg
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_runs_caches_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("a");
    let mut p = Pipeline::new(tiny(&run)).unwrap();
    p.run_all().unwrap();
    assert!(p.outcomes().iter().all(|o| o.status == StageStatus::Ran));
    let table = p.ablate().unwrap();
    for f in ["evaluate/metrics.json", "evaluate/roc.csv", "evaluate/predictions.json", "train/fusion.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    // Ground truth is read only by evaluate and ablate, and only for test cases.
    let audit = p.ground_truth_access();
    assert!(!audit.is_empty());
    assert!(audit.iter().all(|e| e.allowed && matches!(e.stage, StageTag::Evaluate | StageTag::Ablate)));
    assert!(audit.iter().all(|e| e.case_id.starts_with("tst")));

    let rows: Vec<AblationRow> = serde_json::from_slice(&std::fs::read(run.join("ablate/ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(std::fs::read_to_string(&table).unwrap().lines().count(), 11);
    let base: MetricsReport = serde_json::from_slice(&std::fs::read(run.join("evaluate/metrics.json")).unwrap()).unwrap();
    let full = rows.last().unwrap();
    assert_eq!((full.accuracy, full.auroc, full.auroc_std), (base.accuracy, base.auroc, base.auroc_std));

    let before = snapshot(&run);
    let mut again = Pipeline::new(tiny(&run)).unwrap();
    again.run_all().unwrap();
    again.ablate().unwrap();
    assert!(again.outcomes().iter().all(|o| o.status == StageStatus::Skipped));
    assert_eq!(snapshot(&run), before);

    let other = dir.path().join("b");
    let mut fresh = Pipeline::new(tiny(&other)).unwrap();
    fresh.run_all().unwrap();
    fresh.ablate().unwrap();
    assert_eq!(snapshot(&other), before);
}

#[test]
fn changed_config_reruns_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(tiny(dir.path())).unwrap();
    p.run_all().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.fusion.base_lr = 5e-4;
    let mut q = Pipeline::new(cfg).unwrap();
    q.run_all().unwrap();
    let status: Vec<(&str, StageStatus)> = q.outcomes().iter().map(|o| (o.stage, o.status)).collect();
    assert_eq!(
        status,
        [
            ("gen-data", StageStatus::Skipped),
            ("prep", StageStatus::Skipped),
            ("pretrain", StageStatus::Skipped),
            ("consensus", StageStatus::Skipped),
            ("train", StageStatus::Ran),
            ("evaluate", StageStatus::Ran),
        ]
    );
}

#[test]
fn corrupt_manifest_path_fails_in_prep() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(tiny(dir.path())).unwrap();
    p.gen_data().unwrap();
    let mp = dir.path().join("gen-data/manifest.json");
    let mut m: serde_json::Value = serde_json::from_slice(&std::fs::read(&mp).unwrap()).unwrap();
    m[0]["t1_path"] = "raw/does_not_exist.vol".into();
    std::fs::write(&mp, serde_json::to_vec(&m).unwrap()).unwrap();
    let err = p.prep().unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(stage, "prep"),
        other => panic!("expected a stage error, got {other:?}"),
    }
    assert!(err.to_string().contains("does_not_exist.vol"), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(!dir.path().join("prep/stage.json").exists());

    let missing = p.prep_from(Some(&dir.path().join("nowhere.json"))).unwrap_err();
    assert!(matches!(&missing, Error::Stage { stage, .. } if stage == "prep"));
    assert!(missing.to_string().contains("nowhere.json"));
}

#[test]
fn stages_need_their_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(tiny(dir.path())).unwrap();
    let err = p.ablate().unwrap_err();
    assert!(matches!(&err, Error::Stage { source, .. } if matches!(**source, Error::Dependency(_))), "{err}");
    assert!(matches!(p.train(), Err(Error::Stage { .. })));
}

#[test]
fn invalid_stage_config_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.prep.crop = [12, 32, 32];
    let err = Pipeline::new(cfg).err().unwrap();
    assert_eq!(err.exit_code(), 2);
    assert!(!dir.path().join("gen-data").exists());
}
