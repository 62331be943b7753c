use super::EvalError;

/// Unit-cost Levenshtein distance.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edit distance over reference length.
pub fn cer(reference: &[usize], hypothesis: &[usize]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level CER: total edits over total reference symbols.
pub fn corpus_cer<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Result<f64, EvalError> {
    let (mut edits, mut total) = (0usize, 0usize);
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(EvalError::EmptyReference);
        }
        edits += levenshtein(r, h);
        total += r.len();
    }
    if total == 0 {
        return Err(EvalError::EmptyReference);
    }
    Ok(edits as f64 / total as f64)
}
