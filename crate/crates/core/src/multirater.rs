//! Multi-rater consensus: majority voting, the out-of-fold consensus
//! classifier, and model-weighted ensemble pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::encoder3d::ViTConfig;
use crate::error::{Error, Result};
use crate::fusion::{build_ablation, predict_all, train_fusion, AblationSpec, FusionInput, FusionTrainConfig};
use crate::ndtensor::{Checkpoint, Real, Rng};

pub const CONSENSUS_EPS: f64 = 1e-6;

/// `N × K` binary votes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterMatrix {
    labels: Vec<Vec<u8>>,
    rater_ids: Vec<String>,
}

impl RaterMatrix {
    pub fn new(labels: Vec<Vec<u8>>, rater_ids: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("rater matrix has no samples".into()));
        }
        let k = rater_ids.len();
        if k == 0 {
            return Err(Error::Data("rater matrix needs at least one rater".into()));
        }
        for (i, row) in labels.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Data(format!("sample {i} has {} votes, expected {k}", row.len())));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(Error::Data(format!("sample {i} has a non-binary vote")));
            }
        }
        Ok(RaterMatrix { labels, rater_ids })
    }

    /// Raters named `R1..RK`.
    pub fn from_rows(labels: Vec<Vec<u8>>) -> Result<Self> {
        let k = labels.first().map_or(0, Vec::len);
        Self::new(labels, (1..=k).map(|j| format!("R{j}")).collect())
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.rater_ids.len()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.labels[i]
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.labels
    }

    pub fn rater_ids(&self) -> &[String] {
        &self.rater_ids
    }

    pub fn column(&self, j: usize) -> Vec<u8> {
        self.labels.iter().map(|r| r[j]).collect()
    }
}

fn argmax2(p: &[f64; 2]) -> u8 {
    (p[1] > p[0]) as u8
}

fn check_probs(probs: &[[f64; 2]], n: usize) -> Result<()> {
    if probs.len() != n {
        return Err(Error::Dimension(format!("{} probability rows for {n} samples", probs.len())));
    }
    for (i, p) in probs.iter().enumerate() {
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (p[0] + p[1] - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!("probability row {i} = {p:?} is not a distribution")));
        }
    }
    Ok(())
}

/// Most frequent vote per sample. Ties go to the model's argmax when
/// `tie_break` is given, otherwise to 0; an exact probability tie also
/// resolves to 0.
pub fn majority_vote(r: &RaterMatrix, tie_break: Option<&[[f64; 2]]>) -> Result<Vec<u8>> {
    if let Some(p) = tie_break {
        check_probs(p, r.n())?;
    }
    Ok(r
        .rows()
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let ones: usize = row.iter().map(|&v| v as usize).sum();
            let zeros = row.len() - ones;
            match ones.cmp(&zeros) {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => 0,
                std::cmp::Ordering::Equal => tie_break.map_or(0, |p| argmax2(&p[i])),
            }
        })
        .collect())
}

fn agreement(a: &[u8], b: &[u8]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Mean over rater pairs of their per-sample agreement rate; 1 with a single
/// rater.
pub fn mean_pairwise_agreement(r: &RaterMatrix) -> f64 {
    let k = r.k();
    if k < 2 {
        return 1.0;
    }
    let cols: Vec<Vec<u8>> = (0..k).map(|j| r.column(j)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..k {
        for b in a + 1..k {
            total += agreement(&cols[a], &cols[b]);
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusOptions {
    /// Replaces the computed model weight `w_M`.
    pub model_weight_override: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub pseudo_labels: Vec<u8>,
    pub ensemble_probs: Vec<[f64; 2]>,
    pub rater_weights: Vec<f64>,
    pub model_weight: f64,
    pub rater_quality: Vec<f64>,
    pub model_quality: f64,
    pub baseline_agreement: f64,
    pub rater_agreement: f64,
    pub majority_labels: Vec<u8>,
    /// Every weight was zero, so the report fell back to majority vote.
    pub fallback_to_majority: bool,
}

/// Model-weighted ensemble of rater votes and classifier probabilities.
pub fn crowdlab_consensus(r: &RaterMatrix, model_probs: &[[f64; 2]], opts: &ConsensusOptions) -> Result<ConsensusReport> {
    check_probs(model_probs, r.n())?;
    let n = r.n();
    let k = r.k();
    let mv = majority_vote(r, Some(model_probs))?;
    let model_hard: Vec<u8> = model_probs.iter().map(argmax2).collect();
    let rater_quality: Vec<f64> = (0..k).map(|j| agreement(&r.column(j), &mv)).collect();
    let model_quality = agreement(&model_hard, &mv);
    let pos = mv.iter().filter(|&&y| y == 1).count();
    let baseline_agreement = pos.max(n - pos) as f64 / n as f64;
    let denom = 1.0 - baseline_agreement + CONSENSUS_EPS;
    let weight = |s: f64| (1.0 - (1.0 - s) / denom).max(0.0);
    let rater_weights: Vec<f64> = rater_quality.iter().map(|&s| weight(s)).collect();
    let mean_annotations = k as f64;
    let model_weight = match opts.model_weight_override {
        Some(w) if !(w >= 0.0) => return Err(Error::Config(format!("model weight override must be ≥ 0, got {w}"))),
        Some(w) => w,
        None => mean_annotations * weight(model_quality),
    };
    let rater_agreement = mean_pairwise_agreement(r);
    let total_w = model_weight + rater_weights.iter().sum::<f64>();

    let mut report = ConsensusReport {
        pseudo_labels: vec![],
        ensemble_probs: vec![],
        rater_weights,
        model_weight,
        rater_quality,
        model_quality,
        baseline_agreement,
        rater_agreement,
        majority_labels: mv.clone(),
        fallback_to_majority: false,
    };
    if total_w <= 0.0 {
        log::warn!("all consensus weights are zero; falling back to majority vote");
        report.fallback_to_majority = true;
        report.ensemble_probs = mv.iter().map(|&y| if y == 1 { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
        report.pseudo_labels = mv;
        return Ok(report);
    }
    for i in 0..n {
        let mut p = [model_weight * model_probs[i][0], model_weight * model_probs[i][1]];
        for (j, &w) in report.rater_weights.iter().enumerate() {
            let c = r.row(i)[j] as usize;
            p[c] += w * rater_agreement;
            p[1 - c] += w * (1.0 - rater_agreement);
        }
        let p = [p[0] / total_w, p[1] / total_w];
        report.pseudo_labels.push(argmax2(&p));
        report.ensemble_probs.push(p);
    }
    Ok(report)
}

/// Out-of-fold consensus classifier settings. The backbone is the pretrained
/// dual encoder pair with a linear head trained on image features only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub folds: usize,
    pub train: FusionTrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            folds: 5,
            train: FusionTrainConfig {
                max_epochs: 60,
                base_lr: 1e-2,
                patience: None,
                freeze_encoders: true,
                ..FusionTrainConfig::default()
            },
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("consensus classifier needs ≥ 2 folds, got {}", self.folds)));
        }
        self.train.validate()
    }
}

/// Fold index per sample, stratified by label: each class is shuffled and
/// dealt round-robin. The fold count shrinks to the minority class size so
/// every fold holds both classes.
pub fn stratified_folds(labels: &[u8], folds: usize, rng: &mut Rng) -> Result<(Vec<usize>, usize)> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let f = folds.min(pos.len()).min(neg.len());
    if f < 2 {
        return Err(Error::Data(format!(
            "consensus classifier needs ≥ 2 samples of each class, got {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let mut out = vec![0usize; labels.len()];
    let mut offset = 0;
    for mut class in [pos, neg] {
        rng.shuffle(&mut class);
        for (r, &i) in class.iter().enumerate() {
            out[i] = (r + offset) % f;
        }
        offset += class.len();
    }
    Ok((out, f))
}

/// Out-of-fold probabilities: sample i is scored by a model trained on the
/// other folds only.
pub fn train_consensus_classifier<T: Real>(
    phi: &Checkpoint<T>,
    vit: &ViTConfig,
    tokens: usize,
    inputs: &[FusionInput<T>],
    labels: &[u8],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    if inputs.len() != labels.len() {
        return Err(Error::Dimension(format!("{} cases but {} labels", inputs.len(), labels.len())));
    }
    let (fold_of, folds) = stratified_folds(labels, cfg.folds, &mut Rng::keyed(seed, &[0x666f_6c64]))?;
    let n_raters = inputs.first().map_or(0, |x| x.raters.len());
    let mut out = vec![[0.0; 2]; inputs.len()];
    for f in 0..folds {
        let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = (0..inputs.len()).partition(|&i| fold_of[i] != f);
        let xs: Vec<FusionInput<T>> = train_idx.iter().map(|&i| inputs[i].clone()).collect();
        let ys: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
        let mut rng = Rng::keyed(seed, &[0x636c_6173, f as u64]);
        let model = build_ablation(&AblationSpec::without_haic(), phi, vit, tokens, n_raters, &mut rng)?;
        let trained = train_fusion(model, &xs, &ys, &[], &[], &cfg.train, seed ^ (f as u64 + 1), |_| Ok(()))?;
        let held: Vec<FusionInput<T>> = test_idx.iter().map(|&i| inputs[i].clone()).collect();
        for (&i, p) in test_idx.iter().zip(predict_all(&trained.model, &held)?) {
            out[i] = p;
        }
    }
    Ok(out)
}
