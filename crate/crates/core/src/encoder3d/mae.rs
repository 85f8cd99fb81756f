//! Masked autoencoder: shared encoder over visible tokens, decoder over the
//! full sequence with mask tokens, masked-token MSE.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vit::{init_encoder, lookup, normal, xavier, EncoderLayout, Stack};
use super::{complement, encode, sample_mask, ViTConfig};
use crate::error::{Error, Result};
use crate::ndtensor::{cosine_annealing_lr, AdamW, AdamWConfig, Checkpoint, Grads, Graph, ParamId, Real, Rng, Tensor, Value};

pub const ENCODER_PREFIX: &str = "enc.";
const DEC: &str = "dec.";

#[derive(Clone, Debug)]
struct DecoderLayout {
    embed: (ParamId, ParamId),
    mask: ParamId,
    pos: ParamId,
    stack: Stack,
    pred: (ParamId, ParamId),
}

impl DecoderLayout {
    fn resolve<T: Real>(ck: &Checkpoint<T>, cfg: &ViTConfig) -> Result<Self> {
        let l = |n: &str| lookup(ck, &format!("{DEC}{n}"));
        Ok(DecoderLayout {
            embed: (l("embed.w")?, l("embed.b")?),
            mask: l("mask")?,
            pos: l("pos")?,
            stack: Stack::resolve(ck, DEC, cfg.decoder_blocks, cfg.decoder_heads)?,
            pred: (l("pred.w")?, l("pred.b")?),
        })
    }
}

/// Encoder parameters (`enc.*`) and decoder parameters (`dec.*`, including
/// the mask token and decoder positional embeddings).
#[derive(Clone, Debug)]
pub struct MaeModel<T> {
    pub cfg: ViTConfig,
    pub extents: [usize; 3],
    pub encoder: Checkpoint<T>,
    pub decoder: Checkpoint<T>,
    enc_layout: EncoderLayout,
    dec_layout: DecoderLayout,
}

impl<T: Real> MaeModel<T> {
    pub fn new(cfg: &ViTConfig, extents: [usize; 3], rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let tokens = cfg.tokens(extents)?;
        let mut encoder = Checkpoint::new();
        init_encoder(&mut encoder, ENCODER_PREFIX, cfg, tokens, rng);
        let (e, d) = (cfg.embed_dim, cfg.decoder_dim);
        let mut decoder = Checkpoint::new();
        decoder.push(format!("{DEC}embed.w"), xavier(rng, e, d));
        decoder.push(format!("{DEC}embed.b"), Tensor::zeros(&[d]));
        decoder.push(format!("{DEC}mask"), normal(rng, &[1, d], 0.02));
        decoder.push(format!("{DEC}pos"), normal(rng, &[tokens + 1, d], 0.02));
        Stack::init(&mut decoder, DEC, cfg.decoder_blocks, d, cfg.mlp_dim(d), rng);
        decoder.push(format!("{DEC}pred.w"), xavier(rng, d, cfg.patch_len()));
        decoder.push(format!("{DEC}pred.b"), Tensor::zeros(&[cfg.patch_len()]));
        Self::from_parts(cfg.clone(), extents, encoder, decoder)
    }

    pub fn from_parts(cfg: ViTConfig, extents: [usize; 3], encoder: Checkpoint<T>, decoder: Checkpoint<T>) -> Result<Self> {
        let enc_layout = EncoderLayout::resolve(&encoder, ENCODER_PREFIX, &cfg)?;
        let dec_layout = DecoderLayout::resolve(&decoder, &cfg)?;
        let tokens = cfg.tokens(extents)?;
        if enc_layout.tokens() != tokens {
            return Err(Error::Dimension(format!(
                "encoder has {} positions, geometry needs {tokens}",
                enc_layout.tokens() + 1
            )));
        }
        Ok(MaeModel { cfg, extents, encoder, decoder, enc_layout, dec_layout })
    }

    pub fn tokens(&self) -> usize {
        self.enc_layout.tokens()
    }

    pub fn positional_embeddings(&self) -> &Tensor<T> {
        self.encoder.tensor(self.enc_layout.pos_id())
    }

    pub fn mask_token(&self) -> &Tensor<T> {
        self.decoder.tensor(self.dec_layout.mask)
    }

    /// Reconstruction `[T, patch_len]` from encoder and decoder parameter
    /// handles already bound on `g`. `visible` may be in any order.
    pub fn reconstruct(
        &self,
        g: &mut Graph<T>,
        enc: &[Value],
        dec: &[Value],
        tokens: Value,
        visible: &[usize],
    ) -> Result<Value> {
        let n = self.tokens();
        let masked = complement(n, visible);
        if masked.len() + visible.len() != n {
            return Err(Error::Dimension("visible token indices must be distinct".into()));
        }
        let z = encode(g, enc, &self.enc_layout, tokens, Some(visible))?;
        let dl = &self.dec_layout;
        let z = g.linear(z, dec[dl.embed.0 .0], Some(dec[dl.embed.1 .0]))?;
        let mut parts = vec![z];
        if !masked.is_empty() {
            parts.push(g.gather(dec[dl.mask.0], &vec![0; masked.len()])?);
        }
        let seq = g.concat(&parts, 0)?;
        let mut row_of = vec![0usize; n + 1];
        for (j, &t) in visible.iter().enumerate() {
            row_of[t + 1] = 1 + j;
        }
        for (k, &t) in masked.iter().enumerate() {
            row_of[t + 1] = 1 + visible.len() + k;
        }
        let seq = g.gather(seq, &row_of)?;
        let seq = g.add(seq, dec[dl.pos.0])?;
        let h = dl.stack.forward(g, dec, seq)?;
        let h = g.narrow(h, 0, 1, n)?;
        g.linear(h, dec[dl.pred.0 .0], Some(dec[dl.pred.1 .0]))
    }
}

pub struct MaeForward {
    pub recon: Value,
    pub masked: Vec<usize>,
    pub encoder_params: Vec<Value>,
    pub decoder_params: Vec<Value>,
}

/// Binds the model on `g`, draws a mask from `rng` and reconstructs.
pub fn mae_forward<T: Real>(m: &MaeModel<T>, g: &mut Graph<T>, tokens: Value, rng: &mut Rng, trainable: bool) -> Result<MaeForward> {
    let masked = sample_mask(m.tokens(), &m.cfg, rng);
    let visible = complement(m.tokens(), &masked);
    let encoder_params = m.encoder.bind(g, |_| trainable);
    let decoder_params = m.decoder.bind(g, |_| trainable);
    let recon = m.reconstruct(g, &encoder_params, &decoder_params, tokens, &visible)?;
    Ok(MaeForward { recon, masked, encoder_params, decoder_params })
}

/// Mean squared error over the masked tokens only, averaged per element.
pub fn mae_loss<T: Real>(g: &mut Graph<T>, recon: Value, target: Value, masked: &[usize]) -> Result<Value> {
    if masked.is_empty() {
        return Err(Error::Precondition("mae_loss needs at least one masked token".into()));
    }
    if g.shape(recon) != g.shape(target) {
        return Err(Error::Dimension(format!(
            "reconstruction {:?} vs target {:?}",
            g.shape(recon),
            g.shape(target)
        )));
    }
    let r = g.gather(recon, masked)?;
    let t = g.gather(target, masked)?;
    g.mse_loss(r, t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 30, batch_size: 8, base_lr: 1e-3, warmup_epochs: 3.0, optimizer: AdamWConfig::default() }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretraining needs epochs ≥ 1 and batch_size ≥ 1".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.warmup_epochs >= 0.0) {
            return Err(Error::Config("base_lr and warmup_epochs must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// One JSON-lines training-log entry. Epoch 0 is the pass over the data at
/// initialization; later entries average the batch losses seen during the
/// epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch: usize,
    pub masked_mse: f64,
    pub lr: f64,
}

pub struct PretrainOutcome<T> {
    pub model: MaeModel<T>,
    pub log: Vec<PretrainLog>,
}

impl<T: Real> PretrainOutcome<T> {
    /// Encoder weights φ*.
    pub fn encoder(&self) -> &Checkpoint<T> {
        &self.model.encoder
    }
}

struct SampleGrads<T> {
    loss: f64,
    enc: Grads<T>,
    dec: Grads<T>,
}

fn sample_step<T: Real>(m: &MaeModel<T>, tokens: &Tensor<T>, rng: &mut Rng, train: bool) -> Result<SampleGrads<T>> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let f = mae_forward(m, &mut g, x, rng, train)?;
    let loss = mae_loss(&mut g, f.recon, x, &f.masked)?;
    let value = g.scalar(loss).as_f64();
    if !train {
        return Ok(SampleGrads { loss: value, enc: Grads { per_param: vec![] }, dec: Grads { per_param: vec![] } });
    }
    g.backward(loss)?;
    Ok(SampleGrads {
        loss: value,
        enc: m.encoder.collect_grads(&g, &f.encoder_params),
        dec: m.decoder.collect_grads(&g, &f.decoder_params),
    })
}

/// Epoch-0 evaluation and per-step masks draw from streams keyed by
/// `(seed, epoch, sample)` so results do not depend on thread count.
fn mask_rng(seed: u64, epoch: usize, sample: usize) -> Rng {
    Rng::keyed(seed, &[0x6d61_736b, epoch as u64, sample as u64])
}

/// Jointly optimizes encoder and decoder on every token sequence in
/// `inputs` (T1-like and T2-like alike). `on_epoch` sees each log entry as
/// it is produced.
pub fn pretrain<T: Real>(
    mut model: MaeModel<T>,
    inputs: &[Tensor<T>],
    cfg: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&PretrainLog) -> Result<()>,
) -> Result<PretrainOutcome<T>> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Data("pretraining split is empty".into()));
    }
    let n = inputs.len();
    let init: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sample_step(&model, &inputs[i], &mut mask_rng(seed, 0, i), false).map(|s| s.loss))
        .collect::<Result<_>>()?;
    let entry = PretrainLog { epoch: 0, masked_mse: init.iter().sum::<f64>() / n as f64, lr: 0.0 };
    on_epoch(&entry)?;
    let mut log = vec![entry];

    let mut opt_enc = AdamW::new(&model.encoder, cfg.optimizer.clone());
    let mut opt_dec = AdamW::new(&model.decoder, cfg.optimizer.clone());
    let n_batches = n.div_ceil(cfg.batch_size);
    let mut order_rng = Rng::keyed(seed, &[0x6f72_6465_72]);
    for epoch in 1..=cfg.epochs {
        let order = order_rng.permutation(n);
        let mut total = 0.0;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let m = &model;
            let results: Vec<SampleGrads<T>> = batch
                .par_iter()
                .map(|&i| sample_step(m, &inputs[i], &mut mask_rng(seed, epoch, i), true))
                .collect::<Result<_>>()?;
            let mut enc = Grads::zeros_like(&model.encoder);
            let mut dec = Grads::zeros_like(&model.decoder);
            for r in &results {
                total += r.loss;
                enc.accumulate(&r.enc);
                dec.accumulate(&r.dec);
            }
            let inv = T::lit(1.0 / batch.len() as f64);
            enc.scale(inv);
            dec.scale(inv);
            let progress = (epoch - 1) as f64 + (b + 1) as f64 / n_batches as f64;
            lr = cosine_annealing_lr(progress.min(cfg.epochs as f64 - 1e-9), cfg.warmup_epochs, cfg.epochs as f64, cfg.base_lr);
            opt_enc.step(&mut model.encoder, &enc, lr)?;
            opt_dec.step(&mut model.decoder, &dec, lr)?;
        }
        let entry = PretrainLog { epoch, masked_mse: total / n as f64, lr };
        on_epoch(&entry)?;
        log.push(entry);
    }
    Ok(PretrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::gradcheck;

    fn toy() -> ViTConfig {
        ViTConfig {
            patch: [1, 2, 2],
            embed_dim: 4,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2.0,
            decoder_dim: 4,
            decoder_blocks: 1,
            decoder_heads: 1,
            mask_ratio: 0.5,
        }
    }

    fn random_tokens(rng: &mut Rng, t: usize, p: usize) -> Tensor<f64> {
        Tensor::new(vec![t, p], (0..t * p).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn hand_mse() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::from_rows(&[vec![1.0; 3], vec![0.0; 3], vec![5.0; 3]]).unwrap());
        let t = g.constant(Tensor::zeros(&[3, 3]));
        let l = mae_loss(&mut g, r, t, &[0, 1]).unwrap();
        assert_eq!(g.scalar(l), 0.5);
        assert!(matches!(mae_loss(&mut g, r, t, &[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn visible_tokens_do_not_affect_loss() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_rows(&[vec![0.2, 0.4], vec![0.1, 0.9], vec![0.3, 0.3]]).unwrap();
        let mut r = t.clone();
        r.data_mut()[0] = 0.7;
        let target = g.constant(t);
        let a = g.constant(r.clone());
        r.data_mut()[4] = 123.0;
        let b = g.constant(r);
        let la = mae_loss(&mut g, a, target, &[0, 1]).unwrap();
        let lb = mae_loss(&mut g, b, target, &[0, 1]).unwrap();
        assert_eq!(g.scalar(la).to_bits(), g.scalar(lb).to_bits());
    }

    #[test]
    fn shapes_in_pretraining_and_full_mode() {
        let cfg = ViTConfig::desk();
        let m = MaeModel::<f32>::new(&cfg, [16, 32, 32], &mut Rng::new(0, 0)).unwrap();
        assert_eq!(m.positional_embeddings().shape(), &[33, 64]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[32, 512]));
        let p = m.encoder.bind(&mut g, |_| false);
        let vis: Vec<usize> = (0..8).collect();
        let z = encode(&mut g, &p, &m.enc_layout, x, Some(&vis)).unwrap();
        assert_eq!(g.shape(z), &[9, 64]);
        let z = encode(&mut g, &p, &m.enc_layout, x, None).unwrap();
        assert_eq!(g.shape(z), &[33, 64]);
        let f = mae_forward(&m, &mut g, x, &mut Rng::new(1, 0), false).unwrap();
        assert_eq!(g.shape(f.recon), &[32, 512]);
        assert_eq!(f.masked.len(), 24);
    }

    #[test]
    fn visible_order_is_irrelevant() {
        let cfg = ViTConfig { patch: [1, 1, 2], ..toy() };
        let m = MaeModel::<f64>::new(&cfg, [1, 4, 2], &mut Rng::new(2, 0)).unwrap();
        let tokens = random_tokens(&mut Rng::new(3, 0), 4, 2);
        let loss = |vis: &[usize]| {
            let mut g = Graph::new();
            let x = g.constant(tokens.clone());
            let e = m.encoder.bind(&mut g, |_| false);
            let d = m.decoder.bind(&mut g, |_| false);
            let r = m.reconstruct(&mut g, &e, &d, x, vis).unwrap();
            let l = mae_loss(&mut g, r, x, &complement(4, vis)).unwrap();
            g.scalar(l)
        };
        assert!((loss(&[0, 2]) - loss(&[2, 0])).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = toy();
        let m = MaeModel::<f64>::new(&cfg, [2, 2, 2], &mut Rng::new(4, 0)).unwrap();
        assert_eq!(m.tokens(), 2);
        let tokens = random_tokens(&mut Rng::new(5, 0), 2, 4);
        let ne = m.encoder.len();
        let inputs: Vec<Tensor<f64>> =
            m.encoder.iter().chain(m.decoder.iter()).map(|(_, t)| t.clone()).collect();
        let rep = gradcheck::check(
            |g, p| {
                let x = g.constant(tokens.clone());
                let r = m.reconstruct(g, &p[..ne], &p[ne..], x, &[1])?;
                mae_loss(g, r, x, &[0])
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let cfg = ViTConfig { patch: [1, 2, 2], ..toy() };
        let m = MaeModel::<f32>::new(&cfg, [2, 2, 4], &mut Rng::new(0, 0)).unwrap();
        let data: Vec<Tensor<f32>> = (0..4).map(|i| random_tokens(&mut Rng::new(i, 9), 4, 4).cast()).collect();
        let pc = PretrainConfig { epochs: 3, batch_size: 2, base_lr: 0.0, ..PretrainConfig::default() };
        let out = pretrain(m.clone(), &data, &pc, 1, |_| Ok(())).unwrap();
        assert_eq!(out.model.encoder.max_abs_diff(&m.encoder), 0.0);
        assert_eq!(out.model.decoder.max_abs_diff(&m.decoder), 0.0);
        assert_eq!(out.log.len(), 4);
    }

    #[test]
    fn empty_split_is_data_error() {
        let m = MaeModel::<f32>::new(&toy(), [2, 2, 2], &mut Rng::new(0, 0)).unwrap();
        assert!(matches!(pretrain(m, &[], &PretrainConfig::default(), 0, |_| Ok(())), Err(Error::Data(_))));
    }
}
