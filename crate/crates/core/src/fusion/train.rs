use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{predict_cached, softmax2, FusionInput, FusionModel};
use crate::error::{Error, Result};
use crate::ndtensor::{cosine_annealing_lr, AdamW, AdamWConfig, Checkpoint, Grads, Graph, Real, Rng, Tensor, BCE_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionTrainConfig {
    pub max_epochs: usize,
    pub warmup_epochs: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    /// Early stopping on validation accuracy; `None` trains to `max_epochs`.
    pub patience: Option<usize>,
    pub freeze_encoders: bool,
    pub optimizer: AdamWConfig,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        FusionTrainConfig {
            max_epochs: 60,
            warmup_epochs: 5.0,
            base_lr: 1e-3,
            batch_size: 8,
            patience: Some(10),
            freeze_encoders: false,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl FusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("fusion training needs max_epochs ≥ 1 and batch_size ≥ 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be ≥ 1 when set".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.warmup_epochs >= 0.0) {
            return Err(Error::Config("base_lr and warmup_epochs must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

pub struct FusionOutcome<T> {
    pub model: FusionModel<T>,
    pub log: Vec<FusionEpochLog>,
    /// Epoch whose parameters were kept (equals the last epoch without
    /// early stopping).
    pub best_epoch: usize,
}

struct Step<T> {
    loss: f64,
    enc: Option<Grads<T>>,
    head: Grads<T>,
}

/// Per-case inputs as the training loop consumes them.
enum Prepared<'a, T> {
    Raw(&'a FusionInput<T>),
    Cached(Vec<Tensor<T>>, &'a [u8]),
}

fn prepare<'a, T: Real>(m: &FusionModel<T>, xs: &'a [FusionInput<T>], freeze: bool) -> Result<Vec<Prepared<'a, T>>> {
    xs.par_iter()
        .map(|x| {
            if freeze {
                Ok(Prepared::Cached(m.cached_features(x)?, &x.raters[..]))
            } else {
                Ok(Prepared::Raw(x))
            }
        })
        .collect()
}

fn step<T: Real>(m: &FusionModel<T>, x: &Prepared<T>, y: u8, train: bool) -> Result<Step<T>> {
    let mut g = Graph::new();
    let head = m.head.bind(&mut g, |_| train);
    let (logits, enc) = match x {
        Prepared::Raw(input) => {
            let enc = m.encoders.bind(&mut g, |_| train);
            (m.logits(&mut g, &enc, &head, input)?, Some(enc))
        }
        Prepared::Cached(img, votes) => (m.logits_from_cache(&mut g, &head, img, votes)?, None),
    };
    let p = g.softmax(logits);
    let p_pos = g.narrow(p, 1, 1, 1)?;
    let loss = g.bce_loss(p_pos, &[y])?;
    let value = g.scalar(loss).as_f64();
    if !train {
        return Ok(Step { loss: value, enc: None, head: Grads { per_param: vec![] } });
    }
    g.backward(loss)?;
    Ok(Step {
        loss: value,
        enc: enc.map(|e| m.encoders.collect_grads(&g, &e)),
        head: m.head.collect_grads(&g, &head),
    })
}

fn evaluate<T: Real>(m: &FusionModel<T>, xs: &[Prepared<T>], ys: &[u8]) -> Result<(f64, f64)> {
    let probs: Vec<[f64; 2]> = xs
        .par_iter()
        .map(|x| match x {
            Prepared::Cached(img, votes) => predict_cached(m, img, votes),
            Prepared::Raw(input) => {
                let mut g = Graph::new();
                let enc = m.encoders.bind(&mut g, |_| false);
                let head = m.head.bind(&mut g, |_| false);
                let l = m.logits(&mut g, &enc, &head, input)?;
                Ok(softmax2(&g.value(l).to_f64_vec()))
            }
        })
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (p, &y) in probs.iter().zip(ys) {
        correct += ((p[1] >= 0.5) as u8 == y) as usize;
        let q = p[1].clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= if y == 1 { q.ln() } else { (1.0 - q).ln() };
    }
    Ok((correct as f64 / ys.len() as f64, loss / ys.len() as f64))
}

/// Minimizes mean BCE of the positive-class probability against `labels`.
/// All parameter groups train jointly unless `freeze_encoders` is set, in
/// which case encoder features are computed once and only the rater encoder
/// and projection learn. With a non-empty validation set and `patience`, the
/// parameters with the best post-warmup validation accuracy (ties to lower
/// validation loss) are returned.
pub fn train_fusion<T: Real>(
    mut model: FusionModel<T>,
    train: &[FusionInput<T>],
    labels: &[u8],
    val: &[FusionInput<T>],
    val_labels: &[u8],
    cfg: &FusionTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&FusionEpochLog) -> Result<()>,
) -> Result<FusionOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("fusion training split is empty".into()));
    }
    if train.len() != labels.len() || val.len() != val_labels.len() {
        return Err(Error::Dimension("each training case needs exactly one label".into()));
    }
    let freeze = cfg.freeze_encoders;
    let tr = prepare(&model, train, freeze)?;
    let va = prepare(&model, val, freeze)?;
    let early = cfg.patience.filter(|_| !val.is_empty());

    let mut opt_enc = AdamW::new(&model.encoders, cfg.optimizer.clone());
    let mut opt_head = AdamW::new(&model.head, cfg.optimizer.clone());
    let n_batches = train.len().div_ceil(cfg.batch_size);
    let mut order_rng = Rng::keyed(seed, &[0x6675_7369_6f6e]);
    let mut log = Vec::new();
    let mut best: Option<(f64, f64, usize, Checkpoint<T>, Checkpoint<T>)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let order = order_rng.permutation(train.len());
        let mut total = 0.0;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let m = &model;
            let steps: Vec<Step<T>> =
                batch.par_iter().map(|&i| step(m, &tr[i], labels[i], true)).collect::<Result<_>>()?;
            let mut head = Grads::zeros_like(&model.head);
            let mut enc = (!freeze).then(|| Grads::zeros_like(&model.encoders));
            for s in &steps {
                total += s.loss;
                head.accumulate(&s.head);
                if let (Some(acc), Some(g)) = (enc.as_mut(), s.enc.as_ref()) {
                    acc.accumulate(g);
                }
            }
            let inv = T::lit(1.0 / batch.len() as f64);
            head.scale(inv);
            let progress = (epoch - 1) as f64 + (b + 1) as f64 / n_batches as f64;
            let total_epochs = cfg.max_epochs as f64;
            lr = cosine_annealing_lr(progress.min(total_epochs - 1e-9), cfg.warmup_epochs, total_epochs, cfg.base_lr);
            opt_head.step(&mut model.head, &head, lr)?;
            if let Some(mut enc) = enc {
                enc.scale(inv);
                opt_enc.step(&mut model.encoders, &enc, lr)?;
            }
        }
        let (val_accuracy, val_loss) = if val.is_empty() {
            (None, None)
        } else {
            let (a, l) = evaluate(&model, &va, val_labels)?;
            (Some(a), Some(l))
        };
        let entry = FusionEpochLog { epoch, train_loss: total / train.len() as f64, val_accuracy, val_loss, lr };
        on_epoch(&entry)?;
        log.push(entry);

        let warm = epoch as f64 > cfg.warmup_epochs;
        if let (Some(patience), Some(acc), Some(loss), true) = (early, val_accuracy, val_loss, warm) {
            let better = best.as_ref().is_none_or(|(ba, bl, ..)| acc > *ba || (acc == *ba && loss < *bl));
            if better {
                best = Some((acc, loss, epoch, model.encoders.clone(), model.head.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, _, epoch, enc, head)) => {
            model.encoders = enc;
            model.head = head;
            epoch
        }
        None => log.len(),
    };
    Ok(FusionOutcome { model, log, best_epoch })
}
