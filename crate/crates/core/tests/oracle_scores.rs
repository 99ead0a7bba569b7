//! The score derivation (spatial-average + softmax over foreground channels)
//! checked against a from-scratch reimplementation on random inputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segclass::{class_scores_from_seg, SegLogits};

/// Naive oracle: double loops, textbook softmax, explicit argmax scan.
fn oracle(num_classes: usize, h: usize, w: usize, data: &[f32]) -> (Vec<f64>, Vec<f64>, u32) {
    let mut means = vec![0.0f64; num_classes];
    for (c, mean) in means.iter_mut().enumerate() {
        let channel = c + 1; // channel 0 is background and is discarded
        let mut sum = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                sum += data[(channel * h + y) * w + x] as f64;
            }
        }
        *mean = sum / (h * w) as f64;
    }
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = means.iter().map(|&m| (m - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (means, probs, best as u32 + 1)
}

#[test]
fn scores_match_oracle_on_100_random_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let p = rng.gen_range(1..=12usize);
        let h = rng.gen_range(1..=9usize);
        let w = rng.gen_range(1..=9usize);
        let data: Vec<f32> = (0..(p + 1) * h * w)
            .map(|_| rng.gen_range(-6.0f32..6.0))
            .collect();
        let logits = SegLogits::new(p, h, w, data.clone()).unwrap();
        let got = class_scores_from_seg(&logits).unwrap();
        let (means, probs, predicted) = oracle(p, h, w, &data);
        for c in 0..p {
            assert!(
                (got.logits[c] - means[c]).abs() < 1e-6,
                "trial {trial} class {c}: mean {} vs oracle {}",
                got.logits[c],
                means[c]
            );
            assert!(
                (got.probabilities[c] - probs[c]).abs() < 1e-6,
                "trial {trial} class {c}: prob {} vs oracle {}",
                got.probabilities[c],
                probs[c]
            );
        }
        assert_eq!(got.predicted, predicted, "trial {trial}");
    }
}

#[test]
fn probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let data: Vec<f32> = (0..4 * 5 * 5).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let got = class_scores_from_seg(&SegLogits::new(3, 5, 5, data).unwrap()).unwrap();
        let sum: f64 = got.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((1..=3).contains(&got.predicted));
    }
}
