//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Each primitive records its operands and any forward values its backward
//! rule needs. Nodes are appended in evaluation order, so the node list is
//! already topologically sorted and a single reverse sweep propagates
//! adjoints to every gradient-enabled leaf. Tapes are rebuilt per forward
//! pass; there is no graph reuse.
//!
//! Every primitive verifies that its result is finite. A NaN or infinity
//! anywhere is a hard error, which is what lets the steering loop detect a
//! diverged optimization instead of silently producing garbage.

use crate::error::{Result, SteerError};
use crate::tensor::Tensor;

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Scale(TensorId, f64),
    Div(TensorId, TensorId),
    RowSoftmax(TensorId),
    Relu(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Mean(TensorId),
    Square(TensorId),
    Ln(TensorId),
    Slice {
        x: TensorId,
        r0: usize,
        c0: usize,
    },
    Concat {
        a: TensorId,
        b: TensorId,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by tape node.
///
/// Interior nodes keep their adjoints too; the relevancy map reads the
/// gradients of attention matrices straight out of here.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`; zero tensor if the node
    /// was never touched by the backward sweep.
    pub fn get(&self, id: TensorId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_opt(&self, id: TensorId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record an input tensor. Only leaves with `requires_grad` (and the
    /// nodes computed from them) participate in the backward sweep.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<TensorId> {
        if !value.all_finite() {
            return Err(SteerError::NonFinite { op: "leaf" });
        }
        Ok(self.push(Op::Leaf, value, requires_grad))
    }

    /// Record a tensor that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<TensorId> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<TensorId> {
        self.constant(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        self.finish("matmul", Op::Matmul(a, b), value, self.any_grad(&[a, b]))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        let value = self.value(a).transpose();
        self.finish("transpose", Op::Transpose(a), value, self.any_grad(&[a]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).add(self.value(b))?;
        self.finish("add", Op::Add(a, b), value, self.any_grad(&[a, b]))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        self.check(a)?;
        let value = self.value(a).scale(factor);
        self.finish("scale", Op::Scale(a, factor), value, self.any_grad(&[a]))
    }

    /// Elementwise division.
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a)?;
        self.check(b)?;
        if !self.value(a).same_shape(self.value(b)) {
            return Err(SteerError::ShapeMismatch {
                op: "div",
                left_rows: self.value(a).rows(),
                left_cols: self.value(a).cols(),
                right_rows: self.value(b).rows(),
                right_cols: self.value(b).cols(),
            });
        }
        let value = Tensor::new(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x / y)
                .collect(),
        )?;
        self.finish("div", Op::Div(a, b), value, self.any_grad(&[a, b]))
    }

    /// Numerically stable softmax over each row (row-max subtraction).
    pub fn row_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let input = self.value(x);
        let (rows, cols) = (input.rows(), input.cols());
        if cols == 0 {
            return Err(SteerError::invalid("row_softmax", "empty rows"));
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = input.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.set(r, c, e);
                sum += e;
            }
            for c in 0..cols {
                out.set(r, c, out.get(r, c) / sum);
            }
        }
        self.finish("row_softmax", Op::RowSoftmax(x), out, self.any_grad(&[x]))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let value = self.value(x).map(|v| v.max(0.0));
        self.finish("relu", Op::Relu(x), value, self.any_grad(&[x]))
    }

    /// Row-wise layer normalization with learnable gain and bias (both 1xD).
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let input = self.value(x);
        let (rows, cols) = (input.rows(), input.cols());
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.rows() != 1 || g.cols() != cols || b.rows() != 1 || b.cols() != cols {
            return Err(SteerError::invalid(
                "layer_norm",
                format!(
                    "gamma/beta must be 1x{}, got {}x{} and {}x{}",
                    cols,
                    g.rows(),
                    g.cols(),
                    b.rows(),
                    b.cols()
                ),
            ));
        }
        let mut normalized = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = input.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normalized.set(r, c, n);
                out.set(r, c, n * g.data()[c] + b.data()[c]);
            }
        }
        let requires = self.any_grad(&[x, gamma, beta]);
        self.finish(
            "layer_norm",
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            out,
            requires,
        )
    }

    /// Mean of all entries, producing a 1x1 scalar.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let input = self.value(x);
        if input.is_empty() {
            return Err(SteerError::invalid("mean", "empty tensor"));
        }
        let value = Tensor::scalar(input.sum() / input.len() as f64);
        self.finish("mean", Op::Mean(x), value, self.any_grad(&[x]))
    }

    pub fn square(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let value = self.value(x).map(|v| v * v);
        self.finish("square", Op::Square(x), value, self.any_grad(&[x]))
    }

    /// Elementwise natural log. Non-positive inputs surface as
    /// [`SteerError::NonFinite`].
    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let value = self.value(x).map(f64::ln);
        self.finish("ln", Op::Ln(x), value, self.any_grad(&[x]))
    }

    /// Contiguous sub-block `[r0, r1) x [c0, c1)`.
    pub fn slice(
        &mut self,
        x: TensorId,
        r0: usize,
        r1: usize,
        c0: usize,
        c1: usize,
    ) -> Result<TensorId> {
        self.check(x)?;
        let input = self.value(x);
        if r1 > input.rows() || c1 > input.cols() || r0 > r1 || c0 > c1 {
            return Err(SteerError::invalid(
                "slice",
                format!(
                    "[{}, {}) x [{}, {}) out of bounds for {}x{}",
                    r0,
                    r1,
                    c0,
                    c1,
                    input.rows(),
                    input.cols()
                ),
            ));
        }
        let mut value = Tensor::zeros(r1 - r0, c1 - c0);
        for r in r0..r1 {
            for c in c0..c1 {
                value.set(r - r0, c - c0, input.get(r, c));
            }
        }
        self.finish("slice", Op::Slice { x, r0, c0 }, value, self.any_grad(&[x]))
    }

    /// Concatenate along `axis`: 0 stacks rows, 1 joins columns.
    pub fn concat(&mut self, a: TensorId, b: TensorId, axis: usize) -> Result<TensorId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = match axis {
            0 => {
                if ta.cols() != tb.cols() {
                    return Err(SteerError::invalid("concat", "column counts differ"));
                }
                let mut data = ta.data().to_vec();
                data.extend_from_slice(tb.data());
                Tensor::new(ta.rows() + tb.rows(), ta.cols(), data)?
            }
            1 => {
                if ta.rows() != tb.rows() {
                    return Err(SteerError::invalid("concat", "row counts differ"));
                }
                let mut out = Tensor::zeros(ta.rows(), ta.cols() + tb.cols());
                for r in 0..ta.rows() {
                    for c in 0..ta.cols() {
                        out.set(r, c, ta.get(r, c));
                    }
                    for c in 0..tb.cols() {
                        out.set(r, ta.cols() + c, tb.get(r, c));
                    }
                }
                out
            }
            _ => return Err(SteerError::invalid("concat", "axis must be 0 or 1")),
        };
        self.finish("concat", Op::Concat { a, b, axis }, value, self.any_grad(&[a, b]))
    }

    /// Reverse sweep from a scalar root. Returns adjoints for every node the
    /// sweep reached; untouched nodes read back as zeros.
    pub fn backward(&self, root: TensorId) -> Result<Gradients> {
        self.check(root)?;
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(SteerError::RootNotScalar {
                rows: root_value.rows(),
                cols: root_value.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| (n.value.rows(), n.value.cols()))
                .collect(),
            grads,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.requires_grad(*a) {
                    let gb = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, gb)?;
                }
                if self.requires_grad(*b) {
                    let ga = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, ga)?;
                }
            }
            Op::Transpose(a) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.transpose())?;
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Scale(a, factor) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.scale(*factor))?;
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(vb.data())
                            .map(|(&gv, &bv)| gv / bv)
                            .collect(),
                    )?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                            .collect(),
                    )?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::RowSoftmax(x) => {
                if self.requires_grad(*x) {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = (0..y.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..y.cols() {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::Relu(x) => {
                if self.requires_grad(*x) {
                    let vx = self.value(*x);
                    let gx = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(vx.data())
                            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                            .collect(),
                    )?;
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = (normalized.rows(), normalized.cols());
                let vg = self.value(*gamma);
                if self.requires_grad(*gamma) {
                    let mut gg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.set(0, c, gg.get(0, c) + g.get(r, c) * normalized.get(r, c));
                        }
                    }
                    self.accumulate(grads, *gamma, gg)?;
                }
                if self.requires_grad(*beta) {
                    let mut gb = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb.set(0, c, gb.get(0, c) + g.get(r, c));
                        }
                    }
                    self.accumulate(grads, *beta, gb)?;
                }
                if self.requires_grad(*x) {
                    let n = cols as f64;
                    let mut gx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        // d/dx through x_hat = (x - mean) * inv_std
                        let mut sum_dn = 0.0;
                        let mut sum_dn_n = 0.0;
                        for c in 0..cols {
                            let dn = g.get(r, c) * vg.data()[c];
                            sum_dn += dn;
                            sum_dn_n += dn * normalized.get(r, c);
                        }
                        for c in 0..cols {
                            let dn = g.get(r, c) * vg.data()[c];
                            let v = inv_std[r]
                                * (dn - sum_dn / n - normalized.get(r, c) * sum_dn_n / n);
                            gx.set(r, c, v);
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::Mean(x) => {
                if self.requires_grad(*x) {
                    let vx = self.value(*x);
                    let gx = Tensor::filled(vx.rows(), vx.cols(), g.item() / vx.len() as f64);
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::Square(x) => {
                if self.requires_grad(*x) {
                    let vx = self.value(*x);
                    let gx = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(vx.data())
                            .map(|(&gv, &xv)| 2.0 * xv * gv)
                            .collect(),
                    )?;
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::Ln(x) => {
                if self.requires_grad(*x) {
                    let vx = self.value(*x);
                    let gx = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(vx.data())
                            .map(|(&gv, &xv)| gv / xv)
                            .collect(),
                    )?;
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::Slice { x, r0, c0 } => {
                if self.requires_grad(*x) {
                    let vx = self.value(*x);
                    let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gx.set(r0 + r, c0 + c, g.get(r, c));
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::Concat { a, b, axis } => {
                let (ra, ca) = (self.value(*a).rows(), self.value(*a).cols());
                if self.requires_grad(*a) {
                    // a occupies the leading block along either axis
                    self.accumulate(grads, *a, slice_block(g, 0, ra, 0, ca))?;
                }
                if self.requires_grad(*b) {
                    let gb = match axis {
                        0 => slice_block(g, ra, g.rows(), 0, g.cols()),
                        _ => slice_block(g, 0, g.rows(), ca, g.cols()),
                    };
                    self.accumulate(grads, *b, gb)?;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: TensorId, delta: Tensor) -> Result<()> {
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.requires_grad(*id))
    }

    fn check(&self, id: TensorId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(SteerError::UnknownNode(id.0));
        }
        Ok(())
    }

    fn finish(&mut self, name: &'static str, op: Op, value: Tensor, requires: bool) -> Result<TensorId> {
        if !value.all_finite() {
            return Err(SteerError::NonFinite { op: name });
        }
        Ok(self.push(op, value, requires))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }
}

fn slice_block(t: &Tensor, r0: usize, r1: usize, c0: usize, c1: usize) -> Tensor {
    let mut out = Tensor::zeros(r1 - r0, c1 - c0);
    for r in r0..r1 {
        for c in c0..c1 {
            out.set(r - r0, c - c0, t.get(r, c));
        }
    }
    out
}
