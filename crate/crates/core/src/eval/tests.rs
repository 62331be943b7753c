use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::oracle::{ctc_sequence_probs, edit_distance_recursive, exhaustive_ctc_decode, random_log_probs};

fn frames(path: &[usize], vocab: usize) -> Tensor {
    let mut data = Vec::new();
    for &s in path {
        for c in 0..vocab {
            data.push(if c == s { 0.0 } else { -30.0 });
        }
    }
    Tensor::new(vec![path.len(), vocab], data).unwrap()
}

#[test]
fn greedy_collapse_rule() {
    assert_eq!(greedy_ctc_decode(&frames(&[1, 1, 0, 2], 3)), vec![1, 2]);
    assert!(greedy_ctc_decode(&frames(&[0, 0, 0], 3)).is_empty());
    assert_eq!(greedy_ctc_decode(&frames(&[1, 0, 1], 3)), vec![1, 1]);
}

#[test]
fn cer_examples() {
    assert_eq!(cer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
    assert_eq!(cer(&[1, 2, 3], &[1, 2, 4]).unwrap(), 1.0 / 3.0);
    assert_eq!(cer(&[1], &[2, 3, 4]).unwrap(), 3.0);
    assert!(matches!(cer(&[], &[1]), Err(EvalError::EmptyReference)));
    assert_eq!(corpus_cer([(&[1, 2][..], &[1][..]), (&[3, 4][..], &[3, 4][..])]).unwrap(), 0.25);
}

#[test]
fn cer_matches_recursive_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let a: Vec<usize> = (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(1..=4)).collect();
        let b: Vec<usize> = (0..rng.gen_range(0..=10)).map(|_| rng.gen_range(1..=4)).collect();
        assert_eq!(levenshtein(&a, &b), edit_distance_recursive(&a, &b));
    }
}

#[test]
fn prefix_beam_matches_exhaustive_decode() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let t = rng.gen_range(1..=4);
        let v = rng.gen_range(2..=3);
        let lp = random_log_probs(&mut rng, t, v);
        let (best, p) = exhaustive_ctc_decode(&lp);
        let got = prefix_beam_decode(&lp, 8);
        let probs = ctc_sequence_probs(&lp);
        assert!((probs[&got] - p).abs() <= 1e-12 * p.max(1.0), "{got:?} vs {best:?}");
    }
}

#[test]
fn prefix_beam_equals_greedy_on_one_hot_frames() {
    let path = [0, 2, 2, 0, 1, 0, 1, 1];
    let lp = frames(&path, 3);
    assert_eq!(prefix_beam_decode(&lp, 4), greedy_ctc_decode(&lp));
}

#[test]
fn wider_beam_dominates_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let beams = [1, 2, 4, 8, 16];
    let mut mean = [0.0; 5];
    let mut worse = [0usize; 5];
    let n = 1000;
    for _ in 0..n {
        let t = rng.gen_range(2..=6);
        let lp = random_log_probs(&mut rng, t, 3);
        let probs = ctc_sequence_probs(&lp);
        let greedy = probs.get(&greedy_ctc_decode(&lp)).copied().unwrap_or(0.0);
        let p: Vec<f64> = beams.iter().map(|&b| probs[&prefix_beam_decode(&lp, b)]).collect();
        for k in 0..beams.len() {
            mean[k] += p[k] / n as f64;
            assert!(p[k] >= greedy - 1e-15, "beam {} below greedy", beams[k]);
            if k > 0 && p[k] < p[k - 1] - 1e-15 {
                worse[k] += 1;
            }
        }
    }
    // beam search is not monotone instance by instance; rare inversions are expected
    for k in 1..beams.len() {
        assert!(mean[k] >= mean[k - 1] - 1e-12, "{mean:?}");
        assert!(worse[k] * 50 <= n, "{worse:?}");
    }
}

#[test]
fn decode_config_validation() {
    assert!(DecodeConfig { beam_size: 0, ..DecodeConfig::default() }.validate().is_err());
    let lp = frames(&[1, 0, 2], 3);
    let cfg = DecodeConfig {
        mode: DecodeMode::PrefixBeam,
        beam_size: 3,
    };
    assert_eq!(decode(&lp, &cfg), vec![1, 2]);
}
