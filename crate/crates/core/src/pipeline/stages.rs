use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ensure_dir, read_json, sha_json, write_json, write_jsonl, Pipeline, StageStatus};
use crate::encoder3d::{patchify, pretrain, MaeModel, ViTConfig};
use crate::error::{Error, Result};
use crate::fusion::{build_ablation, predict_all, train_fusion, AblationSpec, FusionEpochLog, FusionInput, FusionModel};
use crate::manifest::{DatasetManifest, Record, Split, StageTag};
use crate::metrics::{accuracy, MetricsReport};
use crate::multirater::{crowdlab_consensus, majority_vote, train_consensus_classifier, ConsensusReport, RaterMatrix};
use crate::ndtensor::{Checkpoint, Rng, Tensor};
use crate::synthgen::gen_all;
use crate::volprep::{prep_volume, read_volume, sidecar_path, write_volume};

const SEED_PRETRAIN: u64 = 1;
const SEED_FUSION: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseConsensus {
    pub case_id: String,
    pub split: Split,
    pub rater_labels: Vec<u8>,
    /// Out-of-fold positive-class probability of the consensus classifier.
    pub model_prob: f64,
    pub pseudo_label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusFile {
    #[serde(flatten)]
    pub report: ConsensusReport,
    pub cases: Vec<CaseConsensus>,
}

/// Metadata written next to `fusion.ckpt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedVariant {
    pub encoder: ViTConfig,
    pub spec: AblationSpec,
    pub n_raters: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: String,
    pub p_pos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub modalities: String,
    pub raters: String,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub auroc: f64,
    pub auroc_std: f64,
}

#[derive(Serialize)]
struct Baselines {
    majority_vote_accuracy: f64,
    rater_accuracy: BTreeMap<String, f64>,
}

fn load_tokens(m: &DatasetManifest, rel: Option<&String>, vit: &ViTConfig) -> Result<Option<Tensor<f32>>> {
    let Some(rel) = rel else { return Ok(None) };
    let (v, _) = read_volume(&m.resolve(rel))?;
    patchify(&v, vit).map(Some)
}

fn fusion_input(m: &DatasetManifest, r: &Record, vit: &ViTConfig) -> Result<FusionInput<f32>> {
    let raters = r
        .rater_labels
        .clone()
        .ok_or_else(|| Error::Data(format!("case `{}` has no rater labels", r.case_id)))?;
    Ok(FusionInput { t1: load_tokens(m, r.t1_path.as_ref(), vit)?, t2: load_tokens(m, r.t2_path.as_ref(), vit)?, raters })
}

fn load_inputs(m: &DatasetManifest, recs: &[&Record], vit: &ViTConfig) -> Result<Vec<FusionInput<f32>>> {
    recs.par_iter().map(|r| fusion_input(m, r, vit)).collect()
}

fn modalities_label(spec: &AblationSpec) -> String {
    spec.modalities.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
}

fn raters_label(spec: &AblationSpec) -> String {
    if !spec.use_raters {
        return "-".into();
    }
    spec.rater_subset.iter().map(|j| format!("R{j}")).collect::<Vec<_>>().join("+")
}

/// Everything the train, evaluate and ablate stages share.
struct Ctx {
    manifest: DatasetManifest,
    phi: Checkpoint<f32>,
    n_raters: usize,
    train_x: Vec<FusionInput<f32>>,
    train_y: Vec<u8>,
    val_x: Vec<FusionInput<f32>>,
    val_y: Vec<u8>,
    test_recs: Vec<Record>,
    test_x: Vec<FusionInput<f32>>,
}

impl Pipeline {
    fn prep_manifest_path(&self) -> PathBuf {
        self.stage_dir(StageTag::Prep).join("manifest.json")
    }

    fn phi_path(&self) -> PathBuf {
        self.stage_dir(StageTag::Pretrain).join("phi.ckpt")
    }

    fn consensus_path(&self) -> PathBuf {
        self.stage_dir(StageTag::Consensus).join("consensus.json")
    }

    fn tokens(&self) -> usize {
        self.config().encoder.tokens(self.config().prep.crop).expect("validated geometry")
    }

    fn open_manifest(&self, path: &Path) -> Result<DatasetManifest> {
        DatasetManifest::load(path)
    }

    fn close_manifest(&self, m: &DatasetManifest) {
        self.record_access(m.access_log());
    }

    fn inputs(&self, entries: &[(&str, String)]) -> BTreeMap<String, String> {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    pub fn gen_data(&mut self) -> Result<StageStatus> {
        let inputs = self.inputs(&[("data", sha_json(&self.config().data))]);
        self.stage(StageTag::GenData, inputs, |p| {
            let dir = p.stage_dir(StageTag::GenData);
            let m = gen_all(&p.config().data, &dir)?;
            let mut out = vec![p.rel(&dir.join("manifest.json")), p.rel(&dir.join("latent.json"))];
            for r in m.records() {
                for rel in [&r.t1_path, &r.t2_path].into_iter().flatten() {
                    let path = m.resolve(rel);
                    out.push(p.rel(&path));
                    out.push(p.rel(&sidecar_path(&path)));
                }
            }
            Ok(out)
        })
    }

    pub fn prep(&mut self) -> Result<StageStatus> {
        self.prep_from(None)
    }

    /// Preprocesses every volume listed in `manifest` (default: the gen-data
    /// stage's manifest).
    pub fn prep_from(&mut self, manifest: Option<&Path>) -> Result<StageStatus> {
        let mp = manifest.map(Path::to_path_buf).unwrap_or_else(|| self.stage_dir(StageTag::GenData).join("manifest.json"));
        let tag = |e: Error| e.in_stage("prep");
        let upstream = match manifest {
            Some(p) => super::sha_file(p).map_err(tag)?,
            None => self.digest(StageTag::GenData).map_err(tag)?,
        };
        let inputs = self.inputs(&[("prep", sha_json(&self.config().prep)), ("manifest", upstream)]);
        self.stage(StageTag::Prep, inputs, |p| {
            let src = p.open_manifest(&mp)?;
            let dir = p.stage_dir(StageTag::Prep);
            ensure_dir(&dir.join("vol"))?;
            let cfg = &p.config().prep;
            let center = cfg.crop.map(|n| n / 2);
            let processed: Vec<(Record, Vec<String>)> = src
                .records()
                .par_iter()
                .map(|r| -> Result<(Record, Vec<String>)> {
                    let mut out = r.clone();
                    let mut files = Vec::new();
                    for (tag, slot) in [("t1", &mut out.t1_path), ("t2", &mut out.t2_path)] {
                        let Some(rel) = slot.clone() else { continue };
                        let (v, _) = read_volume(&src.resolve(&rel))?;
                        let v = prep_volume(&v, r.center_voxel, cfg)?;
                        let new_rel = format!("vol/{}_{tag}.vol", r.case_id);
                        let path = dir.join(&new_rel);
                        write_volume(&path, &v, Some(center))?;
                        files.push(p.rel(&path));
                        files.push(p.rel(&sidecar_path(&path)));
                        *slot = Some(new_rel);
                    }
                    out.center_voxel = center;
                    Ok((out, files))
                })
                .collect::<Result<_>>()?;
            p.close_manifest(&src);
            let mut outputs = Vec::new();
            let mut records = Vec::new();
            for (r, f) in processed {
                records.push(r);
                outputs.extend(f);
            }
            let m = src.with_records(&dir, records)?;
            let mp = dir.join("manifest.json");
            m.save(&mp)?;
            outputs.push(p.rel(&mp));
            Ok(outputs)
        })
    }

    pub fn pretrain(&mut self) -> Result<StageStatus> {
        self.pretrain_from(None)
    }

    /// Pretraining on the pretrain split of `manifest` (default: the prep
    /// stage's manifest).
    pub fn pretrain_from(&mut self, manifest: Option<&Path>) -> Result<StageStatus> {
        let mp = manifest.map(Path::to_path_buf).unwrap_or_else(|| self.prep_manifest_path());
        let tag = |e: Error| e.in_stage("pretrain");
        let upstream = match manifest {
            Some(p) => super::sha_file(p).map_err(tag)?,
            None => self.digest(StageTag::Prep).map_err(tag)?,
        };
        let inputs = self.inputs(&[
            ("manifest", upstream),
            ("encoder", sha_json(&self.config().encoder)),
            ("pretrain", sha_json(&self.config().pretrain)),
            ("seed", self.config().seed.to_string()),
        ]);
        self.stage(StageTag::Pretrain, inputs, |p| {
            let cfg = p.config();
            let m = p.open_manifest(&mp)?;
            let recs = m.split(Split::Pretrain);
            let tokens: Vec<Tensor<f32>> = recs
                .par_iter()
                .map(|r| -> Result<Vec<Tensor<f32>>> {
                    let mut v = Vec::new();
                    v.extend(load_tokens(&m, r.t1_path.as_ref(), &cfg.encoder)?);
                    v.extend(load_tokens(&m, r.t2_path.as_ref(), &cfg.encoder)?);
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            p.close_manifest(&m);
            let mut rng = Rng::keyed(cfg.seed, &[SEED_PRETRAIN]);
            let model = MaeModel::<f32>::new(&cfg.encoder, cfg.prep.crop, &mut rng)?;
            let out = pretrain(model, &tokens, &cfg.pretrain, cfg.seed, |l| {
                log::info!("pretrain epoch {} masked_mse {:.5} lr {:.2e}", l.epoch, l.masked_mse, l.lr);
                Ok(())
            })?;
            let dir = p.stage_dir(StageTag::Pretrain);
            let ck = p.phi_path();
            out.encoder().save(&ck)?;
            let lp = dir.join("log.jsonl");
            write_jsonl(&lp, &out.log)?;
            Ok(vec![p.rel(&ck), p.rel(&lp)])
        })
    }

    pub fn consensus(&mut self) -> Result<StageStatus> {
        let tag = |e: Error| e.in_stage("consensus");
        let inputs = self.inputs(&[
            ("prep", self.digest(StageTag::Prep).map_err(tag)?),
            ("pretrain", self.digest(StageTag::Pretrain).map_err(tag)?),
            ("encoder", sha_json(&self.config().encoder)),
            ("consensus", sha_json(&self.config().consensus)),
            ("seed", self.config().seed.to_string()),
        ]);
        self.stage(StageTag::Consensus, inputs, |p| {
            let cfg = p.config();
            let m = p.open_manifest(&p.prep_manifest_path())?;
            let recs = m.labeled();
            let xs = load_inputs(&m, &recs, &cfg.encoder)?;
            p.close_manifest(&m);
            let r = RaterMatrix::from_rows(xs.iter().map(|x| x.raters.clone()).collect())?;
            let mv = majority_vote(&r, None)?;
            let phi = Checkpoint::<f32>::load(&p.phi_path())?;
            let probs =
                train_consensus_classifier(&phi, &cfg.encoder, p.tokens(), &xs, &mv, &cfg.consensus.classifier, cfg.seed)?;
            let report = crowdlab_consensus(&r, &probs, &cfg.consensus.options)?;
            let cases = recs
                .iter()
                .enumerate()
                .map(|(i, rec)| CaseConsensus {
                    case_id: rec.case_id.clone(),
                    split: rec.split,
                    rater_labels: r.row(i).to_vec(),
                    model_prob: probs[i][1],
                    pseudo_label: report.pseudo_labels[i],
                })
                .collect();
            let path = p.consensus_path();
            write_json(&path, &ConsensusFile { report, cases })?;
            Ok(vec![p.rel(&path)])
        })
    }

    fn context(&self) -> Result<Ctx> {
        let cfg = self.config();
        let manifest = self.open_manifest(&self.prep_manifest_path())?;
        let phi = Checkpoint::<f32>::load(&self.phi_path())?;
        let cons: ConsensusFile = read_json(&self.consensus_path())?;
        let pseudo: HashMap<&str, u8> = cons.cases.iter().map(|c| (c.case_id.as_str(), c.pseudo_label)).collect();
        let n_raters = manifest.rater_count()?;
        let labelled = |split: Split| -> Result<(Vec<FusionInput<f32>>, Vec<u8>)> {
            let recs = manifest.split(split);
            let ys = recs
                .iter()
                .map(|r| {
                    pseudo.get(r.case_id.as_str()).copied().ok_or_else(|| {
                        Error::Dependency(format!("consensus has no pseudo label for `{}`", r.case_id))
                    })
                })
                .collect::<Result<Vec<u8>>>()?;
            Ok((load_inputs(&manifest, &recs, &cfg.encoder)?, ys))
        };
        let (train_x, train_y) = labelled(Split::Train)?;
        let (val_x, val_y) = labelled(Split::Val)?;
        let test_recs: Vec<Record> = manifest.split(Split::Test).into_iter().cloned().collect();
        let test_refs: Vec<&Record> = test_recs.iter().collect();
        let test_x = load_inputs(&manifest, &test_refs, &cfg.encoder)?;
        Ok(Ctx { manifest, phi, n_raters, train_x, train_y, val_x, val_y, test_recs, test_x })
    }

    fn train_variant(&self, ctx: &Ctx, spec: &AblationSpec) -> Result<(FusionModel<f32>, Vec<FusionEpochLog>, usize)> {
        let cfg = self.config();
        let mut rng = Rng::keyed(cfg.seed, &[SEED_FUSION]);
        let model = build_ablation(spec, &ctx.phi, &cfg.encoder, self.tokens(), ctx.n_raters, &mut rng)?;
        let name = spec.name(ctx.n_raters);
        let out = train_fusion(model, &ctx.train_x, &ctx.train_y, &ctx.val_x, &ctx.val_y, &cfg.fusion, cfg.seed, |l| {
            log::info!("{name} epoch {} loss {:.4} val_acc {:?}", l.epoch, l.train_loss, l.val_accuracy);
            Ok(())
        })?;
        Ok((out.model, out.log, out.best_epoch))
    }

    pub fn train(&mut self) -> Result<StageStatus> {
        let tag = |e: Error| e.in_stage("train");
        let inputs = self.inputs(&[
            ("prep", self.digest(StageTag::Prep).map_err(tag)?),
            ("pretrain", self.digest(StageTag::Pretrain).map_err(tag)?),
            ("consensus", self.digest(StageTag::Consensus).map_err(tag)?),
            ("encoder", sha_json(&self.config().encoder)),
            ("fusion", sha_json(&self.config().fusion)),
            ("seed", self.config().seed.to_string()),
        ]);
        self.stage(StageTag::Train, inputs, |p| {
            let ctx = p.context()?;
            p.close_manifest(&ctx.manifest);
            let spec = AblationSpec::full(ctx.n_raters);
            let (model, log, best_epoch) = p.train_variant(&ctx, &spec)?;
            let dir = p.stage_dir(StageTag::Train);
            let ck = dir.join("fusion.ckpt");
            model.to_checkpoint().save(&ck)?;
            let meta = dir.join("model.json");
            let encoder = p.config().encoder.clone();
            write_json(&meta, &TrainedVariant { encoder, spec, n_raters: ctx.n_raters, best_epoch })?;
            let lp = dir.join("log.jsonl");
            write_jsonl(&lp, &log)?;
            Ok(vec![p.rel(&ck), p.rel(&meta), p.rel(&lp)])
        })
    }

    pub fn load_fusion(&self) -> Result<FusionModel<f32>> {
        let dir = self.stage_dir(StageTag::Train);
        let meta: TrainedVariant = read_json(&dir.join("model.json"))?;
        let ck = Checkpoint::<f32>::load(&dir.join("fusion.ckpt"))?;
        FusionModel::from_checkpoint(meta.encoder, meta.spec, meta.n_raters, &ck)
    }

    /// Positive-class probabilities of the trained model for `split` of
    /// `manifest` (default: the prep stage's manifest), sorted by case id.
    pub fn predict(&self, manifest: Option<&Path>, split: Split) -> Result<Vec<Prediction>> {
        let model = self.load_fusion()?;
        let mp = manifest.map(Path::to_path_buf).unwrap_or_else(|| self.prep_manifest_path());
        let m = self.open_manifest(&mp)?;
        let mut recs = m.split(split);
        recs.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let xs = load_inputs(&m, &recs, &model.cfg)?;
        self.close_manifest(&m);
        let probs = predict_all(&model, &xs)?;
        Ok(recs.iter().zip(probs).map(|(r, p)| Prediction { case_id: r.case_id.clone(), p_pos: p[1] }).collect())
    }

    fn truth(&self, m: &DatasetManifest, recs: &[Record], stage: StageTag) -> Result<Vec<u8>> {
        recs.iter()
            .map(|r| {
                m.surgical_label(r, stage)?
                    .ok_or_else(|| Error::Data(format!("test case `{}` has no surgical label", r.case_id)))
            })
            .collect()
    }

    pub fn evaluate(&mut self) -> Result<StageStatus> {
        let tag = |e: Error| e.in_stage("evaluate");
        let inputs = self.inputs(&[
            ("prep", self.digest(StageTag::Prep).map_err(tag)?),
            ("train", self.digest(StageTag::Train).map_err(tag)?),
            ("metrics", sha_json(&self.config().metrics)),
        ]);
        self.stage(StageTag::Evaluate, inputs, |p| {
            let preds = p.predict(None, Split::Test)?;
            let m = p.open_manifest(&p.prep_manifest_path())?;
            let mut recs: Vec<Record> = m.split(Split::Test).into_iter().cloned().collect();
            recs.sort_by(|a, b| a.case_id.cmp(&b.case_id));
            let truth = p.truth(&m, &recs, StageTag::Evaluate)?;
            p.close_manifest(&m);
            let scores: Vec<f64> = preds.iter().map(|x| x.p_pos).collect();
            let report = MetricsReport::compute(&scores, &truth, &p.config().metrics)?;
            let dir = p.stage_dir(StageTag::Evaluate);
            report.write(&dir)?;
            let pp = dir.join("predictions.json");
            write_json(&pp, &preds)?;
            let votes = RaterMatrix::from_rows(
                recs.iter().map(|r| r.rater_labels.clone().unwrap_or_default()).collect(),
            )?;
            let mv = majority_vote(&votes, None)?;
            let mut rater_accuracy = BTreeMap::new();
            for (j, id) in votes.rater_ids().iter().enumerate() {
                rater_accuracy.insert(id.clone(), accuracy(&votes.column(j), &truth)?);
            }
            let bp = dir.join("baselines.json");
            write_json(&bp, &Baselines { majority_vote_accuracy: accuracy(&mv, &truth)?, rater_accuracy })?;
            Ok(vec![
                p.rel(&dir.join("metrics.json")),
                p.rel(&dir.join("roc.csv")),
                p.rel(&pp),
                p.rel(&bp),
            ])
        })
    }

    /// Ablation grid. The full-model row is the evaluate stage's report;
    /// every other row trains its own variant with the base run's seeds.
    pub fn ablate(&mut self) -> Result<PathBuf> {
        let tag = |e: Error| e.in_stage("ablate");
        let inputs = self.inputs(&[
            ("prep", self.digest(StageTag::Prep).map_err(tag)?),
            ("pretrain", self.digest(StageTag::Pretrain).map_err(tag)?),
            ("consensus", self.digest(StageTag::Consensus).map_err(tag)?),
            ("evaluate", self.digest(StageTag::Evaluate).map_err(tag)?),
            ("encoder", sha_json(&self.config().encoder)),
            ("fusion", sha_json(&self.config().fusion)),
            ("metrics", sha_json(&self.config().metrics)),
            ("seed", self.config().seed.to_string()),
        ]);
        let csv = self.stage_dir(StageTag::Ablate).join("ablation.csv");
        self.stage(StageTag::Ablate, inputs, |p| {
            let ctx = p.context()?;
            let truth = p.truth(&ctx.manifest, &ctx.test_recs, StageTag::Ablate)?;
            p.close_manifest(&ctx.manifest);
            let base: MetricsReport = read_json(&p.stage_dir(StageTag::Evaluate).join("metrics.json"))?;
            // Test cases in case-id order, matching the evaluate stage.
            let mut order: Vec<usize> = (0..ctx.test_recs.len()).collect();
            order.sort_by(|&a, &b| ctx.test_recs[a].case_id.cmp(&ctx.test_recs[b].case_id));
            let test_x: Vec<FusionInput<f32>> = order.iter().map(|&i| ctx.test_x[i].clone()).collect();
            let truth: Vec<u8> = order.iter().map(|&i| truth[i]).collect();
            let mut rows = Vec::new();
            for spec in AblationSpec::grid(ctx.n_raters) {
                let report = if spec.is_full(ctx.n_raters) {
                    base.clone()
                } else {
                    let (model, _, _) = p.train_variant(&ctx, &spec)?;
                    let scores: Vec<f64> = predict_all(&model, &test_x)?.iter().map(|q| q[1]).collect();
                    MetricsReport::compute(&scores, &truth, &p.config().metrics)?
                };
                rows.push(AblationRow {
                    variant: spec.name(ctx.n_raters),
                    modalities: modalities_label(&spec),
                    raters: raters_label(&spec),
                    accuracy: report.accuracy,
                    accuracy_std: report.accuracy_std,
                    auroc: report.auroc,
                    auroc_std: report.auroc_std,
                });
            }
            let dir = p.stage_dir(StageTag::Ablate);
            let mut s = String::from("variant,modalities,raters,accuracy,accuracy_std,auroc,auroc_std\n");
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                    r.variant, r.modalities, r.raters, r.accuracy, r.accuracy_std, r.auroc, r.auroc_std
                );
            }
            let csv = dir.join("ablation.csv");
            std::fs::write(&csv, s).map_err(|e| Error::io(&csv, e))?;
            let js = dir.join("ablation.json");
            write_json(&js, &rows)?;
            Ok(vec![p.rel(&csv), p.rel(&js)])
        })?;
        Ok(csv)
    }
}
