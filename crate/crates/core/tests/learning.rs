mod common;

use common::{SplitData, EXTENTS};
use haicomm::encoder3d::{MaeModel, ViTConfig};
use haicomm::fusion::{build_ablation, predict, train_fusion, AblationSpec, FusionTrainConfig};
use haicomm::manifest::Split;
use haicomm::metrics::auroc;
use haicomm::multirater::{majority_vote, train_consensus_classifier, ClassifierConfig, RaterMatrix};
use haicomm::ndtensor::{Checkpoint, Rng};
use haicomm::synthgen::{AnnotatorProfile, GenConfig};

fn random_encoder(vit: &ViTConfig, seed: u64) -> Checkpoint<f32> {
    MaeModel::<f32>::new(vit, EXTENTS, &mut Rng::new(seed, 1)).unwrap().encoder
}

/// Out-of-fold classifier probabilities for `n` generated cases together
/// with their latent labels and majority votes.
fn oof(g: &GenConfig, n: usize, seed: u64) -> (Vec<f64>, Vec<u8>, Vec<u8>) {
    let vit = ViTConfig::desk();
    let d = SplitData::render(g, Split::Train, n, &vit);
    let xs = d.inputs(&d.votes);
    let mv = majority_vote(&RaterMatrix::from_rows(d.votes.clone()).unwrap(), None).unwrap();
    let phi = random_encoder(&vit, seed);
    let tokens = vit.tokens(EXTENTS).unwrap();
    let p = train_consensus_classifier(&phi, &vit, tokens, &xs, &mv, &ClassifierConfig::default(), seed).unwrap();
    for q in &p {
        assert!((q[0] + q[1] - 1.0).abs() <= 1e-6);
    }
    (p.iter().map(|q| q[1]).collect(), d.latent, mv)
}

#[test]
fn separability_dial_is_monotone() {
    let mut means = vec![];
    for amp in [0.0, 0.5, 1.0, 2.0] {
        let mut total = 0.0;
        for seed in 0..5 {
            let g = GenConfig { signal_amplitude: amp, seed, ..GenConfig::default() };
            let (s, latent, _) = oof(&g, 60, seed);
            total += auroc(&s, &latent).unwrap();
        }
        means.push(total / 5.0);
    }
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "mean AUROC by amplitude {means:?}");
}

#[test]
fn separable_cohort_is_learned_out_of_fold() {
    let g = GenConfig {
        signal_amplitude: 2.0,
        annotators: vec![AnnotatorProfile::new("R1", 1.0, 1.0)],
        ..GenConfig::default()
    };
    let (s, _, mv) = oof(&g, 60, 0);
    let acc = s.iter().zip(&mv).filter(|(p, &y)| ((**p >= 0.5) as u8) == y).count() as f64 / mv.len() as f64;
    assert!(acc >= 0.9, "out-of-fold accuracy {acc}");
}

#[test]
fn null_cohort_has_chance_auroc() {
    let mut total = 0.0;
    for seed in 0..3 {
        let g = GenConfig { signal_amplitude: 0.0, seed, ..GenConfig::default() };
        let (s, latent, _) = oof(&g, 200, seed);
        total += auroc(&s, &latent).unwrap();
    }
    let mean = total / 3.0;
    assert!((0.4..=0.6).contains(&mean), "mean AUROC {mean}");
}

#[test]
fn fine_tuning_reduces_loss_and_uses_the_raters() {
    let vit = ViTConfig::desk();
    let g = GenConfig { signal_amplitude: 2.0, ..GenConfig::default() };
    let d = SplitData::render(&g, Split::Train, 24, &vit);
    let xs = d.inputs(&d.votes);
    let phi = random_encoder(&vit, 0);
    let tokens = vit.tokens(EXTENTS).unwrap();
    let m = build_ablation(&AblationSpec::full(3), &phi, &vit, tokens, 3, &mut Rng::new(0, 3)).unwrap();
    let cfg = FusionTrainConfig { patience: None, ..Default::default() };
    let out = train_fusion(m.clone(), &xs, &d.latent, &[], &[], &cfg, 0, |_| Ok(())).unwrap();
    let first = out.log.first().unwrap().train_loss;
    let last = out.log.last().unwrap().train_loss;
    assert_eq!(out.log.len(), 60);
    assert!(last < first, "loss {first} -> {last}");

    let again = train_fusion(m, &xs, &d.latent, &[], &[], &cfg, 0, |_| Ok(())).unwrap();
    assert_eq!(again.model.to_checkpoint().max_abs_diff(&out.model.to_checkpoint()), 0.0);

    let mut x = xs[0].clone();
    let p = predict(&out.model, &x).unwrap();
    x.raters.iter_mut().for_each(|v| *v = 1 - *v);
    let q = predict(&out.model, &x).unwrap();
    assert_ne!(p, q);
}
