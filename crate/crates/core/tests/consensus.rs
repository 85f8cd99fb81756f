use haicomm::multirater::{crowdlab_consensus, majority_vote, ConsensusOptions, ConsensusReport, RaterMatrix};
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<[f64; 2]>)> {
    (2usize..6, 4usize..30).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(prop::collection::vec(0u8..2, k), n),
            prop::collection::vec(0.0f64..1.0, n).prop_map(|v| v.into_iter().map(|p| [1.0 - p, p]).collect()),
        )
    })
}

fn consensus(rows: &[Vec<u8>], probs: &[[f64; 2]], opts: &ConsensusOptions) -> ConsensusReport {
    crowdlab_consensus(&RaterMatrix::from_rows(rows.to_vec()).unwrap(), probs, opts).unwrap()
}

fn decisive(p: &[f64; 2]) -> bool {
    (p[1] - p[0]).abs() > 1e-9
}

fn argmax(p: &[f64; 2]) -> u8 {
    (p[1] > p[0]) as u8
}

proptest! {
    #[test]
    fn rater_permutation_permutes_weights((rows, probs) in instance(), seed in any::<u64>()) {
        let k = rows[0].len();
        let mut perm: Vec<usize> = (0..k).collect();
        haicomm::ndtensor::Rng::new(seed, 0).shuffle(&mut perm);
        let permuted: Vec<Vec<u8>> = rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let a = consensus(&rows, &probs, &ConsensusOptions::default());
        let b = consensus(&permuted, &probs, &ConsensusOptions::default());
        for (jb, &ja) in perm.iter().enumerate() {
            prop_assert!((a.rater_weights[ja] - b.rater_weights[jb]).abs() <= 1e-12);
        }
        for i in 0..rows.len() {
            if decisive(&a.ensemble_probs[i]) {
                prop_assert_eq!(a.pseudo_labels[i], b.pseudo_labels[i]);
            }
        }
    }

    #[test]
    fn sample_permutation_permutes_outputs((rows, probs) in instance(), seed in any::<u64>()) {
        let perm = haicomm::ndtensor::Rng::new(seed, 1).permutation(rows.len());
        let r2: Vec<Vec<u8>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let p2: Vec<[f64; 2]> = perm.iter().map(|&i| probs[i]).collect();
        let a = consensus(&rows, &probs, &ConsensusOptions::default());
        let b = consensus(&r2, &p2, &ConsensusOptions::default());
        prop_assert!((a.model_weight - b.model_weight).abs() <= 1e-12);
        for (ib, &ia) in perm.iter().enumerate() {
            prop_assert_eq!(a.majority_labels[ia], b.majority_labels[ib]);
            prop_assert!((a.ensemble_probs[ia][1] - b.ensemble_probs[ib][1]).abs() <= 1e-12);
            if decisive(&a.ensemble_probs[ia]) {
                prop_assert_eq!(a.pseudo_labels[ia], b.pseudo_labels[ib]);
            }
        }
    }

    #[test]
    fn overwhelming_model_weight_follows_the_model((rows, probs) in instance()) {
        let opts = ConsensusOptions { model_weight_override: Some(1e12) };
        let rep = consensus(&rows, &probs, &opts);
        for (i, p) in probs.iter().enumerate() {
            if (p[1] - p[0]).abs() > 1e-6 {
                prop_assert_eq!(rep.pseudo_labels[i], argmax(p));
            }
        }
    }

    #[test]
    fn perfect_raters_give_majority_vote(labels in prop::collection::vec(0u8..2, 4..30), k in 1usize..5, ps in prop::collection::vec(0.0f64..1.0, 30)) {
        let rows: Vec<Vec<u8>> = labels.iter().map(|&y| vec![y; k]).collect();
        let probs: Vec<[f64; 2]> = ps[..rows.len()].iter().map(|&p| [1.0 - p, p]).collect();
        let rep = consensus(&rows, &probs, &ConsensusOptions::default());
        let mv = majority_vote(&RaterMatrix::from_rows(rows.clone()).unwrap(), None).unwrap();
        prop_assert_eq!(&rep.pseudo_labels, &mv);
        prop_assert_eq!(&mv, &labels);
    }

    #[test]
    fn report_invariants_hold((rows, probs) in instance()) {
        let rep = consensus(&rows, &probs, &ConsensusOptions::default());
        prop_assert!(rep.model_weight >= 0.0 && rep.rater_weights.iter().all(|&w| w >= 0.0));
        for (p, &y) in rep.ensemble_probs.iter().zip(&rep.pseudo_labels) {
            prop_assert!((p[0] + p[1] - 1.0).abs() <= 1e-9);
            prop_assert_eq!(y, if p[1] > p[0] { 1 } else { 0 });
        }
    }
}
