//! Brute-force reference implementations. Each one is deliberately naive and
//! shares no code with the routine it checks; the `selftest` command and the
//! test suites compare the fast paths against these.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::Tensor;
use crate::model::BLANK;

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Calls `visit` with every path in `vocab^frames`.
fn for_each_path(frames: usize, vocab: usize, mut visit: impl FnMut(&[usize])) {
    let mut path = vec![0usize; frames];
    loop {
        visit(&path);
        let mut i = frames;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
        }
    }
}

fn path_log_prob(log_probs: &Tensor, path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(u, &s)| log_probs.row(u)[s]).sum()
}

/// Total probability of every collapsed label sequence, by enumerating all
/// `vocab^frames` alignments.
pub fn ctc_sequence_probs(log_probs: &Tensor) -> HashMap<Vec<usize>, f64> {
    let mut out: HashMap<Vec<usize>, f64> = HashMap::new();
    for_each_path(log_probs.rows(), log_probs.cols(), |path| {
        *out.entry(collapse(path)).or_insert(0.0) += path_log_prob(log_probs, path).exp();
    });
    out
}

/// `-log p(labels)` by summing over every alignment that collapses to `labels`.
pub fn ctc_nll_by_enumeration(log_probs: &Tensor, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for_each_path(log_probs.rows(), log_probs.cols(), |path| {
        if collapse(path) == labels {
            total += path_log_prob(log_probs, path).exp();
        }
    });
    -total.ln()
}

/// The label sequence with the highest exact CTC probability.
pub fn exhaustive_ctc_decode(log_probs: &Tensor) -> (Vec<usize>, f64) {
    let probs = ctc_sequence_probs(log_probs);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut keys: Vec<_> = probs.keys().cloned().collect();
    keys.sort();
    for k in keys {
        let p = probs[&k];
        if best.as_ref().is_none_or(|(_, bp)| p > *bp) {
            best = Some((k, p));
        }
    }
    best.expect("at least one path")
}

/// Random log-probability rows and an alignable label sequence.
pub fn random_ctc_instance<R: Rng>(
    rng: &mut R,
    max_frames: usize,
    max_vocab: usize,
    max_len: usize,
) -> (Tensor, Vec<usize>) {
    loop {
        let frames = rng.gen_range(1..=max_frames);
        let vocab = rng.gen_range(2..=max_vocab);
        let len = rng.gen_range(0..=max_len.min(frames));
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
        let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
        if labels.len() + repeats > frames {
            continue;
        }
        return (random_log_probs(rng, frames, vocab), labels);
    }
}

pub fn random_log_probs<R: Rng>(rng: &mut R, frames: usize, vocab: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|p| (p / z).ln()));
    }
    Tensor::new(vec![frames, vocab], data).expect("positive dims")
}

/// Unit-cost edit distance by memoized recursion over suffixes.
pub fn edit_distance_recursive(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// Every sequence over `1..=alphabet` with length at most `max_len`.
pub fn all_sequences(alphabet: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for sym in 1..=alphabet {
                let mut t: Vec<usize> = s.clone();
                t.push(sym);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}
