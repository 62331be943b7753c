use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::Tensor;
use crate::losses::ctc_forward_backward;
use crate::model::BLANK;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    PrefixBeam,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_size: 8,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.beam_size == 0 {
            return Err(EvalError::InvalidConfig("beam_size must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn decode(log_probs: &Tensor, config: &DecodeConfig) -> Vec<usize> {
    match config.mode {
        DecodeMode::Greedy => greedy_ctc_decode(log_probs),
        DecodeMode::PrefixBeam => prefix_beam_decode(log_probs, config.beam_size),
    }
}

/// Best class per frame, repeats merged, blanks removed.
pub fn greedy_ctc_decode(log_probs: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for u in 0..log_probs.rows() {
        let row = log_probs.row(u);
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC prefix beam search without a language model. Each prefix keeps the
/// log-probability of ending in blank and of ending in its last symbol; the
/// `beam_size` prefixes with the largest total survive each frame.
///
/// The prefixes alive after the last frame, together with the greedy path,
/// are rescored with the exact CTC likelihood and the best one is returned.
/// A beam of 1 is therefore never worse than greedy, but it is not the same
/// search.
pub fn prefix_beam_decode(log_probs: &Tensor, beam_size: usize) -> Vec<usize> {
    let mut candidates: Vec<Vec<usize>> = prefix_beam_candidates(log_probs, beam_size);
    let greedy = greedy_ctc_decode(log_probs);
    if !candidates.contains(&greedy) {
        candidates.push(greedy);
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for c in candidates {
        let score = match ctc_forward_backward(log_probs, &c) {
            Ok((nll, _)) => -nll,
            Err(_) => continue,
        };
        let better = match &best {
            None => true,
            Some((b, s)) => score > *s || (score == *s && c < *b),
        };
        if better {
            best = Some((c, score));
        }
    }
    best.map(|(c, _)| c).unwrap_or_default()
}

/// Surviving prefixes of the beam search, best first.
pub fn prefix_beam_candidates(log_probs: &Tensor, beam_size: usize) -> Vec<Vec<usize>> {
    let ninf = f64::NEG_INFINITY;
    let beam_size = beam_size.max(1);
    let mut beams: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, ninf)];
    for u in 0..log_probs.rows() {
        let row = log_probs.row(u);
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, pb, pnb) in &beams {
            let total = lse(*pb, *pnb);
            for (c, &p) in row.iter().enumerate() {
                if c == BLANK {
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.0 = lse(e.0, total + p);
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(c);
                if prefix.last() == Some(&c) {
                    let e = next.entry(extended).or_insert((ninf, ninf));
                    e.1 = lse(e.1, pb + p);
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.1 = lse(e.1, pnb + p);
                } else {
                    let e = next.entry(extended).or_insert((ninf, ninf));
                    e.1 = lse(e.1, total + p);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, f64, f64)> =
            next.into_iter().map(|(k, (b, nb))| (k, b, nb)).collect();
        // stable sort keeps lexicographic order among equal scores
        ranked.sort_by(|a, b| lse(b.1, b.2).total_cmp(&lse(a.1, a.2)));
        ranked.truncate(beam_size);
        beams = ranked;
    }
    beams.into_iter().map(|(p, _, _)| p).collect()
}
