//! Oracle suites shared by the `selftest` command and the acceptance tests.
//! Each suite compares a fast path against an independent reference and
//! reports one [`Check`].

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, AutodiffError, Graph, Tensor, Var};
use crate::eval::{levenshtein, prefix_beam_decode};
use crate::losses::{ctc_forward_backward, ctc_loss};
use crate::model::{ParamGrads, ParameterRegistry};
use crate::oracle::{
    all_sequences, ctc_nll_by_enumeration, ctc_sequence_probs, edit_distance_recursive, exhaustive_ctc_decode,
    random_ctc_instance, random_log_probs,
};
use crate::trainer::{inner_update, outer_update, Objective, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String, start: Instant) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("positive dims")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.1);
    }
    t
}

/// `sum(out * w)` for a fixed random `w`, so that every output entry matters.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var, AutodiffError> {
    let w = g.constant(w.shape().to_vec(), w.data().to_vec())?;
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type OpCase = Box<dyn Fn(&mut Graph, Var) -> Result<Var, AutodiffError>>;

/// Builds one random instance of `op`: the point to differentiate at and a
/// scalar function of it.
fn op_instance(op: &str, rng: &mut ChaCha8Rng) -> (Tensor, OpCase) {
    let r = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=5);
    let k = rng.gen_range(1..=4);
    let out_w = |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape);
    match op {
        "matmul_lhs" | "matmul_rhs" => {
            let a = random_tensor(rng, &[r, k]);
            let b = random_tensor(rng, &[k, c]);
            let w = out_w(rng, &[r, c]);
            if op == "matmul_lhs" {
                (a, Box::new(move |g, x| {
                    let b = g.constant(b.shape().to_vec(), b.data().to_vec())?;
                    let y = g.matmul(x, b)?;
                    weighted(g, y, &w)
                }))
            } else {
                (b, Box::new(move |g, x| {
                    let a = g.constant(a.shape().to_vec(), a.data().to_vec())?;
                    let y = g.matmul(a, x)?;
                    weighted(g, y, &w)
                }))
            }
        }
        "add" | "mul" | "add_row" | "mul_row" => {
            let a = random_tensor(rng, &[r, c]);
            let row = op.ends_with("_row");
            let b_shape = if row { vec![c] } else { vec![r, c] };
            let b = random_tensor(rng, &b_shape);
            let w = out_w(rng, &[r, c]);
            let is_add = op.starts_with("add");
            // differentiate with respect to the second operand when it is broadcast
            let (point, other) = if row { (b, a) } else { (a, b) };
            (point, Box::new(move |g, x| {
                let o = g.constant(other.shape().to_vec(), other.data().to_vec())?;
                let (lhs, rhs) = if row { (o, x) } else { (x, o) };
                let y = if is_add { g.add(lhs, rhs)? } else { g.mul(lhs, rhs)? };
                weighted(g, y, &w)
            }))
        }
        "scale" => {
            let f = rng.gen_range(-2.0..2.0);
            let w = out_w(rng, &[r, c]);
            (random_tensor(rng, &[r, c]), Box::new(move |g, x| {
                let y = g.scale(x, f);
                weighted(g, y, &w)
            }))
        }
        "relu" => {
            let w = out_w(rng, &[r, c]);
            (away_from_zero(rng, &[r, c]), Box::new(move |g, x| {
                let y = g.relu(x);
                weighted(g, y, &w)
            }))
        }
        "softmax" | "log_softmax" => {
            let w = out_w(rng, &[r, c]);
            let soft = op == "softmax";
            (random_tensor(rng, &[r, c]), Box::new(move |g, x| {
                let y = if soft { g.softmax(x) } else { g.log_softmax(x) };
                weighted(g, y, &w)
            }))
        }
        "layer_norm" | "layer_norm_gain" | "layer_norm_bias" => {
            let c = c.max(2);
            let x0 = random_tensor(rng, &[r, c]);
            let gain = random_tensor(rng, &[c]);
            let bias = random_tensor(rng, &[c]);
            let w = out_w(rng, &[r, c]);
            let which = op.to_string();
            let point = match op {
                "layer_norm" => x0.clone(),
                "layer_norm_gain" => gain.clone(),
                _ => bias.clone(),
            };
            (point, Box::new(move |g, v| {
                let mut get = |t: &Tensor, name: &str| -> Result<Var, AutodiffError> {
                    if which == name {
                        Ok(v)
                    } else {
                        g.constant(t.shape().to_vec(), t.data().to_vec())
                    }
                };
                let x = get(&x0, "layer_norm")?;
                let gn = get(&gain, "layer_norm_gain")?;
                let b = get(&bias, "layer_norm_bias")?;
                let y = g.layer_norm(x, gn, b, 1e-5)?;
                weighted(g, y, &w)
            }))
        }
        "dropout" => {
            let w = out_w(rng, &[r, c]);
            let seed = rng.gen();
            (random_tensor(rng, &[r, c]), Box::new(move |g, x| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
                let y = g.dropout(x, 0.3, &mut mask_rng);
                weighted(g, y, &w)
            }))
        }
        "embedding" => {
            let n = rng.gen_range(1..=6);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..r)).collect();
            let w = out_w(rng, &[n, c]);
            (random_tensor(rng, &[r, c]), Box::new(move |g, x| {
                let y = g.embedding(x, &idx)?;
                weighted(g, y, &w)
            }))
        }
        "concat_rows" | "concat_cols" => {
            let axis = usize::from(op == "concat_cols");
            let other_shape = if axis == 0 { [k, c] } else { [r, k] };
            let other = random_tensor(rng, &other_shape);
            let out_shape = if axis == 0 { [r + k, c] } else { [r, c + k] };
            let w = out_w(rng, &out_shape);
            let first: bool = rng.gen();
            (random_tensor(rng, &[r, c]), Box::new(move |g, x| {
                let o = g.constant(other.shape().to_vec(), other.data().to_vec())?;
                let parts = if first { [x, o] } else { [o, x] };
                let y = g.concat(&parts, axis)?;
                weighted(g, y, &w)
            }))
        }
        "slice_rows" | "slice_cols" => {
            let axis = usize::from(op == "slice_cols");
            let dim = if axis == 0 { r } else { c };
            let start = rng.gen_range(0..dim);
            let len = rng.gen_range(1..=dim - start);
            let out_shape = if axis == 0 { [len, c] } else { [r, len] };
            let w = out_w(rng, &out_shape);
            (random_tensor(rng, &[r, c]), Box::new(move |g, x| {
                let y = g.slice(x, axis, start, len)?;
                weighted(g, y, &w)
            }))
        }
        "sum" | "mean" => {
            let is_sum = op == "sum";
            let f = rng.gen_range(0.5..2.0);
            (random_tensor(rng, &[r, c]), Box::new(move |g, x| {
                let sq = g.mul(x, x)?;
                let y = if is_sum { g.sum(sq) } else { g.mean(sq) };
                Ok(g.scale(y, f))
            }))
        }
        "transpose" => {
            let w = out_w(rng, &[c, r]);
            (random_tensor(rng, &[r, c]), Box::new(move |g, x| {
                let y = g.transpose(x)?;
                weighted(g, y, &w)
            }))
        }
        other => panic!("no instance generator for {other}"),
    }
}

pub const OP_CASES: [&str; 23] = [
    "matmul_lhs",
    "matmul_rhs",
    "add",
    "add_row",
    "mul",
    "mul_row",
    "scale",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "layer_norm_gain",
    "layer_norm_bias",
    "dropout",
    "embedding",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "sum",
    "mean",
    "transpose",
    "ctc_loss",
];

/// Finite-difference check of every op on `instances` random instances each.
pub fn op_gradient_suite(instances: usize, seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    for (i, op) in OP_CASES.iter().enumerate() {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for _ in 0..instances {
            let res = if *op == "ctc_loss" {
                let (lp, labels) = random_ctc_instance(&mut rng, 6, 4, 3);
                finite_diff_check(|g, x| Ok(ctc_loss(g, x, &labels).expect("alignable by construction")), &lp, FD_STEP)
            } else {
                let (point, f) = op_instance(op, &mut rng);
                finite_diff_check(|g, x| f(g, x), &point, FD_STEP)
            };
            match res {
                Ok(e) => worst = worst.max(e),
                Err(e) => failure = Some(e.to_string()),
            }
        }
        let passed = failure.is_none() && worst < FD_TOL;
        let detail = match failure {
            Some(e) => format!("error: {e}"),
            None => format!("{instances} instances, max rel err {worst:.2e}"),
        };
        out.push(Check::new(&format!("grad {op}"), passed, detail, start));
    }
    out
}

/// CTC loss against exhaustive alignment enumeration, and its gradient
/// against central differences.
pub fn ctc_oracle_suite(instances: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_loss, mut worst_grad): (f64, f64) = (0.0, 0.0);
    let mut error = None;
    for _ in 0..instances {
        let (lp, labels) = random_ctc_instance(&mut rng, 6, 4, 3);
        match ctc_forward_backward(&lp, &labels) {
            Ok((loss, _)) => {
                let oracle = ctc_nll_by_enumeration(&lp, &labels);
                worst_loss = worst_loss.max((loss - oracle).abs() / oracle.abs().max(1e-300));
            }
            Err(e) => error = Some(e.to_string()),
        }
        match finite_diff_check(|g, x| Ok(ctc_loss(g, x, &labels).expect("alignable")), &lp, FD_STEP) {
            Ok(e) => worst_grad = worst_grad.max(e),
            Err(e) => error = Some(e.to_string()),
        }
    }
    let passed = error.is_none() && worst_loss < 1e-6 && worst_grad < FD_TOL;
    let detail = error.unwrap_or_else(|| {
        format!("{instances} instances, loss rel err {worst_loss:.2e}, grad rel err {worst_grad:.2e}")
    });
    Check::new("ctc vs alignment enumeration", passed, detail, start)
}

/// Levenshtein against the recursive oracle on every pair of sequences of
/// length <= `max_len` over `alphabet` symbols.
pub fn cer_oracle_suite(alphabet: usize, max_len: usize) -> Check {
    let start = Instant::now();
    let seqs = all_sequences(alphabet, max_len);
    let mut mismatches = 0usize;
    for a in &seqs {
        for b in &seqs {
            if levenshtein(a, b) != edit_distance_recursive(a, b) {
                mismatches += 1;
            }
        }
    }
    let pairs = seqs.len() * seqs.len();
    Check::new(
        "edit distance vs recursive oracle",
        mismatches == 0,
        format!("{pairs} pairs, {mismatches} mismatches"),
        start,
    )
}

/// Prefix beam output against the exact-CTC best label sequence.
pub fn prefix_beam_suite(instances: usize, beam: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let t = rng.gen_range(1..=4);
        let v = rng.gen_range(2..=3);
        let lp = random_log_probs(&mut rng, t, v);
        let (_, best_p) = exhaustive_ctc_decode(&lp);
        let got = prefix_beam_decode(&lp, beam);
        let p = ctc_sequence_probs(&lp).get(&got).copied().unwrap_or(0.0);
        if (p - best_p).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    Check::new(
        "prefix beam vs exhaustive decode",
        mismatches == 0,
        format!("{instances} instances (U<=4, V<=3, beam {beam}), {mismatches} mismatches"),
        start,
    )
}

/// `(theta - 5)^2 / 2` on a single scalar parameter.
struct Parabola;

impl Objective for Parabola {
    fn example_ids(&self) -> Vec<String> {
        vec!["p".into()]
    }

    fn loss_and_grad(&mut self, params: &ParameterRegistry, _: &[usize], _: u64) -> Result<(f64, ParamGrads), TrainError> {
        let theta = params.tensor(0).data()[0];
        let mut g = ParamGrads::empty(1);
        g.set(0, vec![theta - 5.0]);
        Ok(((theta - 5.0).powi(2) / 2.0, g))
    }
}

/// One first-order MAML iteration on the parabola from `theta = 1` with
/// `alpha = beta = 0.1`: returns `(theta', theta_new)`.
pub fn maml_parabola() -> Result<(f64, f64), TrainError> {
    let mut reg = ParameterRegistry::new();
    reg.insert("theta", Tensor::vector(vec![1.0]))?;
    let (prime, _) = inner_update(&mut Parabola, &reg, &[vec![0]], 0.1, 1, 5.0, 0, 1)?;
    outer_update(&mut Parabola, &mut reg, &prime, &[0], 0.1, 5.0, 0, 1)?;
    Ok((prime.tensor(0).data()[0], reg.tensor(0).data()[0]))
}

pub fn maml_arithmetic_check() -> Check {
    let start = Instant::now();
    match maml_parabola() {
        Ok((prime, theta)) => Check::new(
            "maml parabola",
            (prime - 1.4).abs() < 1e-12 && (theta - 1.36).abs() < 1e-12,
            format!("theta' = {prime}, theta = {theta}"),
            start,
        ),
        Err(e) => Check::new("maml parabola", false, e.to_string(), start),
    }
}

/// Every suite at its acceptance size.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = op_gradient_suite(100, seed);
    out.push(ctc_oracle_suite(200, seed));
    out.push(cer_oracle_suite(4, 4));
    out.push(prefix_beam_suite(100, 8, seed));
    out.push(maml_arithmetic_check());
    out
}
