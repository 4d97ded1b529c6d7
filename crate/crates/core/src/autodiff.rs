//! Reverse-mode automatic differentiation over dense 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a 1×1 node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Leaves created with [`Tape::param`] require gradients; leaves created with
//! [`Tape::constant`] do not, and neither does anything computed only from
//! constants.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    GroupMax {
        input: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm {
        input: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    WeightedSumRows {
        input: Var,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
    },
    Precomputed {
        input: Var,
        grad: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + row` with the 1×C `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a ⊙ row` with the 1×C `row` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, rows.to_vec()), rg)
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    ///
    /// Ties resolve to the first row of the block attaining the maximum.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let input = self.value(a);
        let (rows, cols) = input.dim();
        assert!(
            group > 0 && rows % group == 0,
            "group_max: {rows} rows not divisible by {group}"
        );
        let groups = rows / group;
        let mut value = Array2::zeros((groups, cols));
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            let base = g * group;
            for c in 0..cols {
                let mut best = base;
                let mut best_v = input[[base, c]];
                for r in base + 1..base + group {
                    let v = input[[r, c]];
                    if v > best_v {
                        best_v = v;
                        best = r;
                    }
                }
                value[[g, c]] = best_v;
                argmax[g * cols + c] = best;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::GroupMax { input: a, argmax }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let value =
            Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count differs");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Row-wise softmax. Columns where `mask` is false are treated as −∞ and
    /// receive exactly zero weight. At least one column must be unmasked.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let value = softmax_rows_masked(self.value(a), mask);
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Layer normalization across columns with learnable 1×C gain and bias.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                xhat[[r, c]] = (row[c] - mean) * is;
            }
        }
        let normed = self.push(
            xhat.clone(),
            Op::LayerNorm {
                input: a,
                xhat,
                inv_std,
            },
            self.rg(a),
        );
        let scaled = self.mul_row(normed, gamma);
        self.add_row(scaled, beta)
    }

    /// `Σ_i w_i · row_i` as a 1×C row.
    pub fn weighted_sum_rows(&mut self, a: Var, weights: &[f64]) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), weights.len(), "weighted_sum_rows: weight count");
        let mut value = Array2::zeros((1, x.ncols()));
        for (row, &w) in x.outer_iter().zip(weights) {
            if w != 0.0 {
                value.row_mut(0).scaled_add(w, &row);
            }
        }
        let rg = self.rg(a);
        self.push(
            value,
            Op::WeightedSumRows {
                input: a,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).nrows();
        self.weighted_sum_rows(a, &vec![1.0 / n as f64; n])
    }

    /// `−log softmax(logits)[target]` for a 1×G row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), 1, "cross_entropy expects a single row");
        let lse = log_sum_exp(l.row(0).iter().copied());
        let loss = lse - l[[0, target]];
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, target },
            rg,
        )
    }

    /// Inserts a scalar function of `input` whose value and gradient were
    /// computed outside the tape.
    pub fn precomputed(&mut self, input: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(
            grad.dim(),
            self.value(input).dim(),
            "precomputed: gradient shape"
        );
        let rg = self.rg(input);
        self.push(
            Array2::from_elem((1, 1), value),
            Op::Precomputed { input, grad },
            rg,
        )
    }

    /// Gradients of the 1×1 node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, up: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, g: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, up.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(up));
                }
            }
            Op::Add(a, b) => {
                acc(*a, up.clone());
                acc(*b, up.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, up.clone());
                if self.rg(*row) {
                    acc(*row, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    acc(*a, up * self.value(*row));
                }
                if self.rg(*row) {
                    let prod = up * self.value(*a);
                    acc(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => acc(*a, up * *f),
            Op::Relu(a) => {
                let mut g = up.clone();
                ndarray::Zip::from(&mut g)
                    .and(self.value(*a))
                    .for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    });
                acc(*a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = up.clone();
                ndarray::Zip::from(&mut g)
                    .and(&node.value)
                    .for_each(|g, &y| *g *= y * (1.0 - y));
                acc(*a, g);
            }
            Op::Transpose(a) => acc(*a, up.t().as_standard_layout().into_owned()),
            Op::GatherRows(a, rows) => {
                let mut g = Array2::zeros(self.value(*a).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = g.row_mut(r);
                    dst += &up.row(i);
                }
                acc(*a, g);
            }
            Op::GroupMax { input, argmax } => {
                let cols = up.ncols();
                let mut g = Array2::zeros(self.value(*input).dim());
                for (i, &r) in argmax.iter().enumerate() {
                    let (grp, c) = (i / cols, i % cols);
                    g[[r, c]] += up[[grp, c]];
                }
                acc(*input, g);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        acc(p, up.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut g = Array2::zeros(self.value(*a).dim());
                let w = up.ncols();
                g.slice_mut(s![.., *start..*start + w]).assign(up);
                acc(*a, g);
            }
            Op::Reshape(a) => {
                let dim = self.value(*a).dim();
                let flat: Vec<f64> = up.iter().copied().collect();
                acc(*a, Array2::from_shape_vec(dim, flat).expect("reshape grad"));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut g = Array2::zeros(y.dim());
                for r in 0..y.nrows() {
                    let dot: f64 = y.row(r).iter().zip(up.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.ncols() {
                        g[[r, c]] = y[[r, c]] * (up[[r, c]] - dot);
                    }
                }
                acc(*a, g);
            }
            Op::LayerNorm {
                input,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.dim();
                let n = cols as f64;
                let mut g = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let dy = up.row(r);
                    let xh = xhat.row(r);
                    let mean_dy = dy.sum() / n;
                    let mean_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..cols {
                        g[[r, c]] = inv_std[r] * (dy[c] - mean_dy - xh[c] * mean_dy_xh);
                    }
                }
                acc(*input, g);
            }
            Op::WeightedSumRows { input, weights } => {
                let cols = up.ncols();
                let mut g = Array2::zeros((weights.len(), cols));
                for (r, &w) in weights.iter().enumerate() {
                    g.row_mut(r).scaled_add(w, &up.row(0));
                }
                acc(*input, g);
            }
            Op::CrossEntropy { logits, target } => {
                let l = self.value(*logits);
                let mut p = softmax_rows_masked(l, None);
                p[[0, *target]] -= 1.0;
                acc(*logits, p * up[[0, 0]]);
            }
            Op::Precomputed { input, grad } => acc(*input, grad * up[[0, 0]]),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with optional column mask (false = excluded).
pub fn softmax_rows_masked(x: &Array2<f64>, mask: Option<&[bool]>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (r, row) in x.outer_iter().enumerate() {
        let keep = |c: usize| mask.is_none_or(|m| m[c]);
        let max = (0..row.len())
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..row.len() {
            if keep(c) {
                let e = (row[c] - max).exp();
                out[[r, c]] = e;
                sum += e;
            }
        }
        out.row_mut(r).mapv_inplace(|v| v / sum);
    }
    out
}
