//! Arena-backed reverse-mode tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the indices of its inputs. [`Tape::backward`] walks the arena from the loss
//! node down to index 0, which is exactly reverse execution order, and returns
//! a [`Gradients`] table. The tape is not consumed, so backward can be replayed
//! and yields bit-identical results.

use crate::tensor::{gelu_grad_scalar, row_stats, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddTiled { x: Var, table: Var },
    Affine { x: Var, gamma: Var, beta: Var },
    LayerNorm { x: Var, eps: f64 },
    Gelu(Var),
    RowSoftmax(Var),
    GroupedABt { a: Var, b: Var, group: usize },
    GroupedAB { s: Var, v: Var, group: usize },
    GroupMean { x: Var, group: usize },
    Sum(Var),
    SumSquares(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    RowCos2Mean(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Ordered record of executed operations. One tape per thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Sums a non-empty list left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| TensorError::Usage("add_all: empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_vector(self.value(bias))?;
        self.push(out, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Adds row `r % table.rows` of `table` to row `r` of `x`.
    pub fn add_tiled(&mut self, x: Var, table: Var) -> Result<Var> {
        let xv = self.value(x);
        let tv = self.value(table);
        let group = tv.rows();
        if xv.shape().len() != 2 || tv.shape().len() != 2 || xv.cols() != tv.cols() || xv.rows() % group != 0 {
            return Err(TensorError::Shape {
                op: "add_tiled",
                lhs: xv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        let n = tv.len();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, t) in chunk.iter_mut().zip(tv.data()) {
                *o += t;
            }
        }
        self.push(out, Op::AddTiled { x, table }, &[x, table])
    }

    /// `γ ⊙ x + β` broadcast over rows.
    pub fn affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = self.value(x).affine_rows(self.value(gamma), self.value(beta))?;
        self.push(out, Op::Affine { x, gamma, beta }, &[x, gamma, beta])
    }

    /// Parameter-free row normalization.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let out = self.value(x).layer_norm_rows(eps)?;
        self.push(out, Op::LayerNorm { x, eps }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).gelu();
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows()?;
        self.push(out, Op::RowSoftmax(x), &[x])
    }

    /// Per-group `A_g · B_gᵀ` over consecutive blocks of `group` rows.
    /// Output is `rows × group`.
    pub fn grouped_abt(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        let out = grouped_abt(self.value(a), self.value(b), group)?;
        self.push(out, Op::GroupedABt { a, b, group }, &[a, b])
    }

    /// Per-group `S_g · V_g` where `S` is `rows × group`.
    pub fn grouped_ab(&mut self, s: Var, v: Var, group: usize) -> Result<Var> {
        let out = grouped_ab(self.value(s), self.value(v), group)?;
        self.push(out, Op::GroupedAB { s, v, group }, &[s, v])
    }

    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let out = self.value(x).group_mean_rows(group)?;
        self.push(out, Op::GroupMean { x, group }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum_squares());
        self.push(out, Op::SumSquares(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = cross_entropy_value(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean over rows of the squared cosine similarity between row `r` of `a`
    /// and row `r` of `b`. Rows where either vector is zero contribute 0.
    pub fn row_cos2_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.shape().len() != 2 {
            return Err(TensorError::Shape {
                op: "row_cos2_mean",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let rows = av.rows();
        let total: f64 = (0..rows).map(|r| row_cos(av.row(r), bv.row(r)).0.powi(2)).sum();
        self.push(Tensor::scalar(total / rows as f64), Op::RowCos2Mean(a, b), &[a, b])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::Usage(format!(
                "backward: loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.matmul_t(self.value(b))?)?;
                }
                if self.needs(b) {
                    self.accumulate(grads, b, self.value(a).t_matmul(g)?)?;
                }
            }
            &Op::MatMulT(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.matmul(self.value(b))?)?;
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.t_matmul(self.value(a))?)?;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.scale(-1.0))?;
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s))?,
            &Op::AddRowBias(x, bias) => {
                self.accumulate(grads, x, g.clone())?;
                if self.needs(bias) {
                    self.accumulate(grads, bias, column_sums(g))?;
                }
            }
            &Op::AddTiled { x, table } => {
                self.accumulate(grads, x, g.clone())?;
                if self.needs(table) {
                    let t = self.value(table);
                    let mut acc = Tensor::zeros(t.shape());
                    for chunk in g.data().chunks(t.len()) {
                        for (a, v) in acc.data_mut().iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, table, acc)?;
                }
            }
            &Op::Affine { x, gamma, beta } => {
                if self.needs(x) {
                    self.accumulate(grads, x, g.mul_row_vector(self.value(gamma))?)?;
                }
                if self.needs(gamma) {
                    self.accumulate(grads, gamma, column_sums(&g.mul(self.value(x))?))?;
                }
                if self.needs(beta) {
                    self.accumulate(grads, beta, column_sums(g))?;
                }
            }
            &Op::LayerNorm { x, eps } => {
                let y = &node.value;
                let xv = self.value(x);
                let n = y.cols();
                let mut out = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (_, inv) = row_stats(xv.row(r), eps);
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    let o = &mut out.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        o[j] = inv * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                self.accumulate(grads, x, out)?;
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, xv)| gv * gelu_grad_scalar(*xv))
                    .collect();
                self.accumulate(grads, x, Tensor::new(xv.shape(), d)?)?;
            }
            &Op::RowSoftmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut out = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let o = &mut out.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, x, out)?;
            }
            &Op::GroupedABt { a, b, group } => {
                // out_g = A_g B_gᵀ  =>  dA_g = G_g B_g,  dB_g = G_gᵀ A_g
                if self.needs(a) {
                    self.accumulate(grads, a, grouped_ab(g, self.value(b), group)?)?;
                }
                if self.needs(b) {
                    self.accumulate(grads, b, grouped_atb(g, self.value(a), group)?)?;
                }
            }
            &Op::GroupedAB { s, v, group } => {
                // out_g = S_g V_g  =>  dS_g = G_g V_gᵀ,  dV_g = S_gᵀ G_g
                if self.needs(s) {
                    self.accumulate(grads, s, grouped_abt(g, self.value(v), group)?)?;
                }
                if self.needs(v) {
                    self.accumulate(grads, v, grouped_atb(self.value(s), g, group)?)?;
                }
            }
            &Op::GroupMean { x, group } => {
                let xv = self.value(x);
                let n = xv.cols();
                let inv = 1.0 / group as f64;
                let mut out = Tensor::zeros(xv.shape());
                for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
                    for (o, gv) in row.iter_mut().zip(g.row(r / group)) {
                        *o = gv * inv;
                    }
                }
                self.accumulate(grads, x, out)?;
            }
            &Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, Tensor::full(&shape, g.item()))?;
            }
            &Op::SumSquares(x) => {
                let s = 2.0 * g.item();
                self.accumulate(grads, x, self.value(x).scale(s))?;
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let k = lv.cols();
                let batch = lv.rows() as f64;
                let mut out = lv.softmax_rows()?;
                for (r, &label) in labels.iter().enumerate() {
                    out.data_mut()[r * k + label] -= 1.0;
                }
                self.accumulate(grads, *logits, out.scale(g.item() / batch))?;
            }
            &Op::RowCos2Mean(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let n = av.cols();
                let rows = av.rows();
                let s = g.item() / rows as f64;
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for r in 0..rows {
                    let (ar, br) = (av.row(r), bv.row(r));
                    let (c, na, nb) = row_cos(ar, br);
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    // d(c²) = 2c·dc,  dc/da = b/(|a||b|) - c·a/|a|²
                    let k = 2.0 * c * s;
                    let (oa, ob) = (
                        &mut ga.data_mut()[r * n..(r + 1) * n],
                        &mut gb.data_mut()[r * n..(r + 1) * n],
                    );
                    for j in 0..n {
                        oa[j] = k * (br[j] / (na * nb) - c * ar[j] / (na * na));
                        ob[j] = k * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, a, ga)?;
                self.accumulate(grads, b, gb)?;
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulT(..) => "matmul_t",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Scale(..) => "scale",
        Op::AddRowBias(..) => "add_row_bias",
        Op::AddTiled { .. } => "add_tiled",
        Op::Affine { .. } => "affine",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(..) => "gelu",
        Op::RowSoftmax(..) => "row_softmax",
        Op::GroupedABt { .. } => "grouped_abt",
        Op::GroupedAB { .. } => "grouped_ab",
        Op::GroupMean { .. } => "group_mean",
        Op::Sum(..) => "sum",
        Op::SumSquares(..) => "sum_squares",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::RowCos2Mean(..) => "row_cos2_mean",
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for row in g.data().chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(&[n], out).expect("column count is positive")
}

/// Cosine similarity and both norms; cosine is 0 when either vector is zero.
pub(crate) fn row_cos(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, na, nb);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ((dot / (na * nb)).clamp(-1.0, 1.0), na, nb)
}

pub(crate) fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let k = logits.cols();
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(TensorError::Usage(format!(
                "cross_entropy: label {label} out of range for {k} classes"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / labels.len() as f64)
}

fn check_grouped(op: &'static str, a: &Tensor, b: &Tensor, group: usize) -> Result<usize> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() || group == 0 || a.rows() % group != 0 {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.rows() / group)
}

/// Per-group `A_g B_gᵀ`; A, B are `(G·group) × k`, result `(G·group) × group`.
pub(crate) fn grouped_abt(a: &Tensor, b: &Tensor, group: usize) -> Result<Tensor> {
    let groups = check_grouped("grouped_abt", a, b, group)?;
    if a.cols() != b.cols() {
        return Err(TensorError::Shape {
            op: "grouped_abt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = a.cols();
    let mut out = vec![0.0; a.rows() * group];
    for gi in 0..groups {
        let base = gi * group;
        crate::tensor::matmul_t_into(
            &a.data()[base * k..(base + group) * k],
            &b.data()[base * k..(base + group) * k],
            &mut out[base * group..(base + group) * group],
            group,
            k,
            group,
        );
    }
    Tensor::new(&[a.rows(), group], out)
}

/// Per-group `S_g V_g`; S is `(G·group) × group`, V is `(G·group) × k`.
pub(crate) fn grouped_ab(s: &Tensor, v: &Tensor, group: usize) -> Result<Tensor> {
    let groups = check_grouped("grouped_ab", s, v, group)?;
    if s.cols() != group {
        return Err(TensorError::Shape {
            op: "grouped_ab",
            lhs: s.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let k = v.cols();
    let mut out = vec![0.0; v.rows() * k];
    for gi in 0..groups {
        let base = gi * group;
        crate::tensor::matmul_into(
            &s.data()[base * group..(base + group) * group],
            &v.data()[base * k..(base + group) * k],
            &mut out[base * k..(base + group) * k],
            group,
            group,
            k,
        );
    }
    Tensor::new(&[v.rows(), k], out)
}

/// Per-group `A_gᵀ B_g`; A is `(G·group) × group`, B is `(G·group) × k`.
fn grouped_atb(a: &Tensor, b: &Tensor, group: usize) -> Result<Tensor> {
    let groups = check_grouped("grouped_atb", a, b, group)?;
    let k = b.cols();
    let mut out = vec![0.0; b.rows() * k];
    for gi in 0..groups {
        let base = gi * group;
        for p in 0..group {
            let a_row = &a.data()[(base + p) * group..(base + p + 1) * group];
            let b_row = &b.data()[(base + p) * k..(base + p + 1) * k];
            for (i, &av) in a_row.iter().enumerate() {
                let o = &mut out[(base + i) * k..(base + i + 1) * k];
                for (o, bv) in o.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(&[b.rows(), k], out)
}
