use rand::Rng;

use super::{AutodiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add { lhs: Var, rhs: Var, row_broadcast: bool },
    Mul { lhs: Var, rhs: Var, row_broadcast: bool },
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout { x: Var, mask: Vec<f64> },
    Embedding { table: Var, indices: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    /// Scalar-valued function whose local gradient was computed eagerly.
    ScalarFn { x: Var, grad: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "reduce_sum",
            Op::Mean(_) => "reduce_mean",
            Op::Transpose(_) => "transpose",
            Op::ScalarFn { .. } => "scalar_fn",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Define-by-run computation graph. Nodes are appended in creation order,
/// so every node's inputs precede it and backward is a reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Adds `g` into the slot, copying it when the slot is still empty.
fn accumulate_copy(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(d) => d.iter_mut().zip(g).for_each(|(d, x)| *d += x),
        None => *slot = Some(g.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Copies a node's value out as a tensor.
    pub fn tensor(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shapes are validated")
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
    }

    /// Binds a tensor as a leaf. Honors the tensor's `requires_grad` flag.
    pub fn input(&mut self, tensor: &Tensor) -> Result<Var, AutodiffError> {
        self.leaf(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad())
    }

    pub fn leaf(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var, AutodiffError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() || expected == 0 {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFiniteInput { index: pos });
        }
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, AutodiffError> {
        self.leaf(shape, data, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bval) in row.iter_mut().zip(brow) {
                    *o += x * bval;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, rg))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool, AutodiffError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            return Ok(false);
        }
        let cols = *sa.last().unwrap();
        let rhs_is_row = match sb.as_slice() {
            [n] => *n == cols,
            [1, n] => *n == cols,
            _ => false,
        };
        if sa.len() == 2 && rhs_is_row {
            Ok(true)
        } else {
            Err(Self::mismatch(op, sa, sb))
        }
    }

    /// Elementwise sum. `b` may also be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let row_broadcast = self.broadcast_kind("add", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out: Vec<f64> = if row_broadcast {
            let n = bv.len();
            av.chunks_exact(n)
                .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
                .collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::Add {
                lhs: a,
                rhs: b,
                row_broadcast,
            },
            shape,
            out,
            rg,
        ))
    }

    /// Elementwise product. `b` may also be a row vector broadcast over the rows of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let row_broadcast = self.broadcast_kind("mul", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out: Vec<f64> = if row_broadcast {
            let n = bv.len();
            av.iter().enumerate().map(|(i, x)| x * bv[i % n]).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x * y).collect()
        };
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::Mul {
                lhs: a,
                rhs: b,
                row_broadcast,
            },
            shape,
            out,
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), shape, out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(Op::Relu(a), shape, out, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let (r, c) = rows_cols(&shape);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (dst, &x) in o.iter_mut().zip(row) {
                *dst = (x - max).exp();
                z += *dst;
            }
            o.iter_mut().for_each(|x| *x /= z);
        }
        let rg = self.rg(a);
        self.push(Op::Softmax(a), shape, out, rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let (r, c) = rows_cols(&shape);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for (dst, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *dst = x - lse;
            }
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a), shape, out, rg)
    }

    /// Row-wise layer normalization followed by an affine map with `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, AutodiffError> {
        let shape = self.nodes[x.0].shape.clone();
        let (r, c) = rows_cols(&shape);
        for p in [gain, bias] {
            if self.nodes[p.0].value.len() != c {
                return Err(Self::mismatch("layer_norm", &shape, &self.nodes[p.0].shape));
            }
        }
        let xv = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                normalized[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            shape,
            out,
            rg,
        ))
    }

    /// Inverted dropout; the sampled mask is recorded for backward.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.nodes[x.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Dropout { x, mask }, shape, out, rg)
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 || indices.is_empty() {
            return Err(Self::mismatch("embedding", &shape, &[indices.len()]));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: v });
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            vec![indices.len(), d],
            out,
            rg,
        ))
    }

    /// Concatenates 2-D tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs
            .first()
            .ok_or(AutodiffError::EmptyInput { op: "concat" })?;
        let base = self.nodes[first.0].shape.clone();
        if base.len() != 2 || axis > 1 {
            return Err(Self::mismatch("concat", &base, &[axis]));
        }
        let other = 1 - axis;
        let mut total = 0;
        for v in inputs {
            let s = &self.nodes[v.0].shape;
            if s.len() != 2 || s[other] != base[other] {
                return Err(Self::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(shape[0] * shape[1]);
        if axis == 0 {
            for v in inputs {
                out.extend_from_slice(&self.nodes[v.0].value);
            }
        } else {
            for r in 0..base[0] {
                for v in inputs {
                    let c = self.nodes[v.0].shape[1];
                    out.extend_from_slice(&self.nodes[v.0].value[r * c..(r + 1) * c]);
                }
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            out,
            rg,
        ))
    }

    /// Takes `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 || axis > 1 || len == 0 || start + len > s[axis] {
            return Err(Self::mismatch("slice", &s, &[axis, start, len]));
        }
        let v = &self.nodes[x.0].value;
        let (r, c) = (s[0], s[1]);
        let (shape, out) = if axis == 0 {
            (vec![len, c], v[start * c..(start + len) * c].to_vec())
        } else {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&v[i * c + start..i * c + start + len]);
            }
            (vec![r, len], out)
        };
        let rg = self.rg(x);
        Ok(self.push(Op::Slice { x, axis, start }, shape, out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Op::Mean(x), vec![1], vec![m], rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(Self::mismatch("transpose", &s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose(x), vec![c, r], out, rg))
    }

    /// Records a scalar function of `x` whose value and gradient were computed
    /// outside the graph (e.g. a dynamic-programming loss).
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var, AutodiffError> {
        if grad.len() != self.nodes[x.0].value.len() {
            return Err(Self::mismatch("scalar_fn", &self.nodes[x.0].shape, &[grad.len()]));
        }
        let rg = self.rg(x);
        Ok(self.push(Op::ScalarFn { x, grad }, vec![1], vec![value], rg))
    }

    /// Reverse sweep from a scalar `seed`. Every leaf that requires a gradient
    /// gets one (zeros when unreachable); interior gradients are released.
    pub fn backward(&self, seed: Var) -> Result<Gradients, AutodiffError> {
        if seed.0 >= self.nodes.len() {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        if self.nodes[seed.0].value.len() != 1 {
            return Err(AutodiffError::SeedNotScalar {
                shape: self.nodes[seed.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(vec![1.0]);
        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let (before, _) = grads.split_at_mut(idx);
            self.propagate(idx, &g, before);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bv = &self.nodes[b.0].value;
                    // da = g * b^T, as row updates against b^T
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv[p * n + j];
                        }
                    }
                    accumulate(&mut grads[a.0], m * k, |da| {
                        for i in 0..m {
                            let drow = &mut da[i * k..(i + 1) * k];
                            for j in 0..n {
                                let gv = g[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for (d, &bval) in drow.iter_mut().zip(&bt[j * k..(j + 1) * k]) {
                                    *d += gv * bval;
                                }
                            }
                        }
                    });
                }
                if self.rg(*b) {
                    let av = &self.nodes[a.0].value;
                    accumulate(&mut grads[b.0], k * n, |db| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += x * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add {
                lhs,
                rhs,
                row_broadcast,
            } => {
                if self.rg(*lhs) {
                    accumulate_copy(&mut grads[lhs.0], g);
                }
                if self.rg(*rhs) {
                    let n = self.nodes[rhs.0].value.len();
                    if *row_broadcast {
                        accumulate(&mut grads[rhs.0], n, |d| {
                            for row in g.chunks_exact(n) {
                                d.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                            }
                        });
                    } else {
                        accumulate_copy(&mut grads[rhs.0], g);
                    }
                }
            }
            Op::Mul {
                lhs,
                rhs,
                row_broadcast,
            } => {
                let (av, bv) = (&self.nodes[lhs.0].value, &self.nodes[rhs.0].value);
                let n = bv.len();
                if self.rg(*lhs) {
                    accumulate(&mut grads[lhs.0], g.len(), |d| {
                        for (i, x) in g.iter().enumerate() {
                            d[i] += x * if *row_broadcast { bv[i % n] } else { bv[i] };
                        }
                    });
                }
                if self.rg(*rhs) {
                    accumulate(&mut grads[rhs.0], n, |d| {
                        for (i, x) in g.iter().enumerate() {
                            if *row_broadcast {
                                d[i % n] += x * av[i];
                            } else {
                                d[i] += x * av[i];
                            }
                        }
                    });
                }
            }
            Op::Scale(a, f) => {
                accumulate(&mut grads[a.0], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += x * f)
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (r, c) = rows_cols(&node.shape);
                let y = &node.value;
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for i in 0..r {
                        let span = i * c..(i + 1) * c;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (r, c) = rows_cols(&node.shape);
                let y = &node.value;
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for i in 0..r {
                        let span = i * c..(i + 1) * c;
                        let total: f64 = g[span.clone()].iter().sum();
                        for j in span {
                            d[j] += g[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (r, c) = rows_cols(&node.shape);
                let gv = &self.nodes[gain.0].value;
                if self.rg(*gain) {
                    accumulate(&mut grads[gain.0], c, |d| {
                        for i in 0..r * c {
                            d[i % c] += g[i] * normalized[i];
                        }
                    });
                }
                if self.rg(*bias) {
                    accumulate(&mut grads[bias.0], c, |d| {
                        for i in 0..r * c {
                            d[i % c] += g[i];
                        }
                    });
                }
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], r * c, |d| {
                        let cf = c as f64;
                        for i in 0..r {
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..c {
                                let dh = g[i * c + j] * gv[j];
                                sum_dh += dh;
                                sum_dh_h += dh * normalized[i * c + j];
                            }
                            for j in 0..c {
                                let dh = g[i * c + j] * gv[j];
                                d[i * c + j] += inv_std[i] / cf
                                    * (cf * dh - sum_dh - normalized[i * c + j] * sum_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                accumulate(&mut grads[x.0], g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let s = &self.nodes[table.0].shape;
                let dim = s[1];
                accumulate(&mut grads[table.0], s[0] * dim, |d| {
                    for (row, &i) in indices.iter().enumerate() {
                        for j in 0..dim {
                            d[i * dim + j] += g[row * dim + j];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let total_cols = node.shape[1];
                let mut offset = 0;
                for v in inputs {
                    let s = &self.nodes[v.0].shape;
                    let (r, c) = (s[0], s[1]);
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], r * c, |d| {
                            if *axis == 0 {
                                for (dst, x) in d.iter_mut().zip(&g[offset * c..(offset + r) * c]) {
                                    *dst += x;
                                }
                            } else {
                                for i in 0..r {
                                    for j in 0..c {
                                        d[i * c + j] += g[i * total_cols + offset + j];
                                    }
                                }
                            }
                        });
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { x, axis, start } => {
                let s = &self.nodes[x.0].shape;
                let (r, c) = (s[0], s[1]);
                let (or, oc) = (node.shape[0], node.shape[1]);
                accumulate(&mut grads[x.0], r * c, |d| {
                    if *axis == 0 {
                        for (dst, v) in d[start * c..(start + or) * c].iter_mut().zip(g) {
                            *dst += v;
                        }
                    } else {
                        for i in 0..or {
                            for j in 0..oc {
                                d[i * c + start + j] += g[i * oc + j];
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                accumulate(&mut grads[x.0], n, |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let share = g[0] / n as f64;
                accumulate(&mut grads[x.0], n, |d| d.iter_mut().for_each(|v| *v += share));
            }
            Op::Transpose(x) => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                accumulate(&mut grads[x.0], r * c, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ScalarFn { x, grad } => {
                accumulate(&mut grads[x.0], grad.len(), |d| {
                    d.iter_mut().zip(grad).for_each(|(d, v)| *d += g[0] * v)
                });
            }
        }
    }

    /// Name of the op that produced `var`; used in diagnostics.
    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
