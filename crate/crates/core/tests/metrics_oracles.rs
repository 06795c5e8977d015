use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdgae_core::metrics::{auc, average_precision};

/// Fraction of positive/negative pairs ordered correctly, ties counting half.
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut good, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    good += 1.0;
                } else if si == sj {
                    good += 0.5;
                }
            }
        }
    }
    good / pairs
}

/// Precision at every positive hit of the ranking, cut by an explicit
/// threshold sweep; equal scores are ranked by input position.
fn sweep_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let ahead = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    for k in 0..n {
        if !labels[k] {
            continue;
        }
        // the cut-off that includes k and everything ranked ahead of it
        let included: Vec<usize> = (0..n).filter(|&j| j == k || ahead(j, k)).collect();
        let hits = included.iter().filter(|&&j| labels[j]).count() as f64;
        ap += (1.0 / positives) * hits / included.len() as f64;
    }
    ap
}

#[test]
fn metrics_match_oracles_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..500 {
        let n = rng.random_range(2..60);
        let coarse = trial % 3 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { rng.random_range(0..5) as f64 / 4.0 } else { rng.random::<f64>() })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auc(&scores, &labels).unwrap();
        assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12, "trial {trial}");
        let p = average_precision(&scores, &labels).unwrap();
        assert!((p - sweep_ap(&scores, &labels)).abs() < 1e-12, "trial {trial}");
        assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&p));
    }
}

#[test]
fn auc_is_invariant_to_increasing_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.random_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = !labels[1];
        let base = auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 7.0).collect();
        assert_eq!(auc(&warped, &labels).unwrap(), base);
    }
}

#[test]
fn identical_scores_give_half() {
    let labels = [true, false, false, true, false];
    assert_eq!(auc(&[0.42; 5], &labels).unwrap(), 0.5);
}
