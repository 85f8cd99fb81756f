#![allow(dead_code)]

use haicomm::encoder3d::{patchify, pretrain, MaeModel, PretrainConfig, ViTConfig};
use haicomm::fusion::{build_ablation, predict_all, train_fusion, AblationSpec, FusionInput, FusionTrainConfig};
use haicomm::manifest::Split;
use haicomm::metrics::accuracy;
use haicomm::multirater::{
    crowdlab_consensus, majority_vote, train_consensus_classifier, ClassifierConfig, ConsensusOptions, RaterMatrix,
};
use haicomm::ndtensor::{Checkpoint, Rng, Tensor};
use haicomm::synthgen::{render_case, render_pretrain, GenConfig};
use haicomm::volprep::{prep_volume, PrepConfig};

pub const EXTENTS: [usize; 3] = [16, 32, 32];

/// Image tokens, latent labels and generator votes of one split.
pub struct SplitData {
    pub images: Vec<(Tensor<f32>, Tensor<f32>)>,
    pub latent: Vec<u8>,
    pub votes: Vec<Vec<u8>>,
}

impl SplitData {
    pub fn render(g: &GenConfig, split: Split, n: usize, vit: &ViTConfig) -> Self {
        let pc = PrepConfig::desk();
        let mut out = SplitData { images: vec![], latent: vec![], votes: vec![] };
        for i in 0..n {
            let c = render_case(g, split, i);
            let t1 = patchify(&prep_volume(&c.t1, c.center_voxel, &pc).unwrap(), vit).unwrap();
            let t2 = patchify(&prep_volume(&c.t2, c.center_voxel, &pc).unwrap(), vit).unwrap();
            out.images.push((t1, t2));
            out.latent.push(c.latent);
            out.votes.push(c.rater_labels);
        }
        out
    }

    pub fn inputs(&self, votes: &[Vec<u8>]) -> Vec<FusionInput<f32>> {
        self.images
            .iter()
            .zip(votes)
            .map(|((t1, t2), v)| FusionInput { t1: Some(t1.clone()), t2: Some(t2.clone()), raters: v.clone() })
            .collect()
    }
}

pub fn pretrained_encoder(g: &GenConfig, vit: &ViTConfig, n: usize, epochs: usize, seed: u64) -> Checkpoint<f32> {
    let pc = PrepConfig::desk();
    let vols: Vec<Tensor<f32>> = (0..n)
        .map(|i| {
            let (_, v, c) = render_pretrain(g, i);
            patchify(&prep_volume(&v, c, &pc).unwrap(), vit).unwrap()
        })
        .collect();
    let mae = MaeModel::<f32>::new(vit, EXTENTS, &mut Rng::new(seed, 1)).unwrap();
    let cfg = PretrainConfig { epochs, ..Default::default() };
    pretrain(mae, &vols, &cfg, seed, |_| Ok(())).unwrap().encoder().clone()
}

/// Consensus pseudo labels for `xs` from out-of-fold classifier
/// probabilities and the rater votes carried by the inputs.
pub fn pseudo_labels(phi: &Checkpoint<f32>, vit: &ViTConfig, xs: &[FusionInput<f32>], seed: u64) -> Vec<u8> {
    let tokens = vit.tokens(EXTENTS).unwrap();
    let r = RaterMatrix::from_rows(xs.iter().map(|x| x.raters.clone()).collect()).unwrap();
    let mv = majority_vote(&r, None).unwrap();
    let probs = train_consensus_classifier(phi, vit, tokens, xs, &mv, &ClassifierConfig::default(), seed).unwrap();
    crowdlab_consensus(&r, &probs, &ConsensusOptions::default()).unwrap().pseudo_labels
}

/// Test accuracy vs latent truth of `spec` trained with frozen encoders.
#[allow(clippy::too_many_arguments)]
pub fn variant_accuracy(
    spec: &AblationSpec,
    phi: &Checkpoint<f32>,
    vit: &ViTConfig,
    train: (&[FusionInput<f32>], &[u8]),
    val: (&[FusionInput<f32>], &[u8]),
    test: (&[FusionInput<f32>], &[u8]),
    n_raters: usize,
    seed: u64,
) -> f64 {
    let tokens = vit.tokens(EXTENTS).unwrap();
    let m = build_ablation(spec, phi, vit, tokens, n_raters, &mut Rng::new(seed, 3)).unwrap();
    let cfg = FusionTrainConfig { freeze_encoders: true, base_lr: 1e-2, ..Default::default() };
    let out = train_fusion(m, train.0, train.1, val.0, val.1, &cfg, seed, |_| Ok(())).unwrap();
    let hard: Vec<u8> = predict_all(&out.model, test.0).unwrap().iter().map(|p| (p[1] >= 0.5) as u8).collect();
    accuracy(&hard, test.1).unwrap()
}
