//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] is a single-assignment arena: every operation appends one node
//! whose operands already live on the tape, so reverse insertion order is a
//! valid reverse topological order for backpropagation. Shape agreement is
//! checked when a node is built, never during the backward sweep.
//!
//! The op set is intentionally small. Anything expressible as a composition
//! (eval-mode batch norm, column softmax, Euclidean distance) is composed;
//! only operations that would otherwise blow up node count or memory get a
//! fused implementation (sparse convolution, training-mode batch norm).

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::KernelMap;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S: Scalar> {
    /// Differentiable input (parameter or data).
    Leaf,
    /// Non-differentiable constant.
    Const,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// N x C plus a 1 x C row broadcast over rows.
    AddRow {
        a: NodeId,
        row: NodeId,
    },
    /// N x C times a 1 x C row, elementwise per row.
    MulRow {
        a: NodeId,
        row: NodeId,
    },
    Scale {
        a: NodeId,
        k: S,
    },
    AddScalar {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    /// max(x, min); gradient passes only where x > min.
    ClampMin {
        a: NodeId,
        min: S,
    },
    Sqrt {
        a: NodeId,
    },
    /// Elementwise base^p where the exponent is a 1 x 1 node broadcast over
    /// the base. The base must be strictly positive.
    Pow {
        base: NodeId,
        exponent: NodeId,
    },
    /// Softmax along each row.
    RowSoftmax {
        a: NodeId,
    },
    GatherRows {
        a: NodeId,
        idx: Arc<Vec<u32>>,
    },
    ScatterAddRows {
        a: NodeId,
        idx: Arc<Vec<u32>>,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    /// Mean over rows, producing 1 x C.
    MeanRows {
        a: NodeId,
    },
    /// Sum of all entries, producing 1 x 1.
    SumAll {
        a: NodeId,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    /// Fused sparse convolution: gather-GEMM-scatter once per kernel offset,
    /// one weight matrix per offset, optional 1 x C_out bias.
    SpConv {
        x: NodeId,
        weights: Vec<NodeId>,
        bias: Option<NodeId>,
        map: Arc<KernelMap>,
    },
    /// Fused training-mode batch norm. Saves the normalized activations and
    /// the inverse standard deviation for the backward pass.
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Array2<S>,
        inv_std: Array1<S>,
    },
}

struct Node<S: Scalar> {
    value: Array2<S>,
    grad: Option<Array2<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Batch statistics produced by a training-mode batch norm node, used by the
/// layer to update its running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<S: Scalar> {
    pub mean: Array1<S>,
    /// Biased (divide by N) variance, the one used for normalization.
    pub var_biased: Array1<S>,
    pub n_rows: usize,
}

/// Single-assignment autodiff tape.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<S> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`] call. `None` when
    /// the node was not reached or does not require gradients.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.nrows(), v.ncols())
    }

    fn push(&mut self, value: Array2<S>, requires_grad: bool, op: Op<S>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array2<S>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<S>) -> NodeId {
        self.push(value, false, Op::Const)
    }

    pub fn scalar_const(&mut self, v: S) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn mismatch(&self, op: &'static str, details: String) -> Error {
        Error::ShapeMismatch { op, details }
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(self.mismatch("matmul", format!("({ar}, {ac}) x ({br}, {bc})")));
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.t().to_owned();
        let rg = self.needs(a);
        self.push(value, rg, Op::Transpose { a })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    fn check_row_operand(&self, op: &'static str, a: NodeId, row: NodeId) -> Result<()> {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(self.mismatch(
                op,
                format!("operand {:?} with row ({rr}, {rc})", self.shape(a)),
            ));
        }
        Ok(())
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_row_operand("add_row", a, row)?;
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let rg = self.needs(a) || self.needs(row);
        Ok(self.push(value, rg, Op::AddRow { a, row }))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_row_operand("mul_row", a, row)?;
        let value = &self.nodes[a.0].value * &self.nodes[row.0].value;
        let rg = self.needs(a) || self.needs(row);
        Ok(self.push(value, rg, Op::MulRow { a, row }))
    }

    pub fn scale(&mut self, a: NodeId, k: S) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x * k);
        let rg = self.needs(a);
        self.push(value, rg, Op::Scale { a, k })
    }

    pub fn add_scalar(&mut self, a: NodeId, k: S) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x + k);
        let rg = self.needs(a);
        self.push(value, rg, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let zero = S::zero();
        let value = self.nodes[a.0].value.mapv(|x| if x > zero { x } else { zero });
        let rg = self.needs(a);
        self.push(value, rg, Op::Relu { a })
    }

    pub fn clamp_min(&mut self, a: NodeId, min: S) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| if x > min { x } else { min });
        let rg = self.needs(a);
        self.push(value, rg, Op::ClampMin { a, min })
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x.sqrt());
        let rg = self.needs(a);
        self.push(value, rg, Op::Sqrt { a })
    }

    /// Elementwise power with a 1 x 1 exponent node. The base must be
    /// strictly positive for the exponent gradient (ln base) to exist.
    pub fn pow(&mut self, base: NodeId, exponent: NodeId) -> Result<NodeId> {
        let (er, ec) = self.shape(exponent);
        if (er, ec) != (1, 1) {
            return Err(self.mismatch("pow", format!("exponent must be 1 x 1, got ({er}, {ec})")));
        }
        let p = self.nodes[exponent.0].value[[0, 0]];
        let value = self.nodes[base.0].value.mapv(|x| x.powf(p));
        let rg = self.needs(base) || self.needs(exponent);
        Ok(self.push(value, rg, Op::Pow { base, exponent }))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.iter().cloned().sum::<S>();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.needs(a);
        self.push(value, rg, Op::RowSoftmax { a })
    }

    /// Softmax along each column, composed as transpose / row softmax /
    /// transpose.
    pub fn col_softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.transpose(a);
        let sm = self.row_softmax(t);
        self.transpose(sm)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<u32>>) -> Result<NodeId> {
        let (n, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n) {
            return Err(self.mismatch("gather_rows", format!("index {bad} out of {n} rows")));
        }
        let src = &self.nodes[a.0].value;
        let mut value = Array2::zeros((idx.len(), c));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i as usize));
        }
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::GatherRows { a, idx }))
    }

    /// Scatters row `r` of the input into output row `idx[r]`, summing
    /// collisions. The output has `n_out` rows.
    pub fn scatter_add_rows(
        &mut self,
        a: NodeId,
        idx: Arc<Vec<u32>>,
        n_out: usize,
    ) -> Result<NodeId> {
        let (n, c) = self.shape(a);
        if idx.len() != n {
            return Err(self.mismatch(
                "scatter_add_rows",
                format!("{} indices for {n} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n_out) {
            return Err(self.mismatch(
                "scatter_add_rows",
                format!("index {bad} out of {n_out} rows"),
            ));
        }
        let src = &self.nodes[a.0].value;
        let mut value = Array2::zeros((n_out, c));
        for (r, &i) in idx.iter().enumerate() {
            let mut dst = value.row_mut(i as usize);
            dst += &src.row(r);
        }
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::ScatterAddRows { a, idx }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, _) = self.shape(a);
        if start + len > n {
            return Err(self.mismatch(
                "slice_rows",
                format!("rows {start}..{} out of {n}", start + len),
            ));
        }
        let value = self.nodes[a.0]
            .value
            .slice(s![start..start + len, ..])
            .to_owned();
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::SliceRows { a, start }))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let n = S::of(x.nrows() as f64);
        let value = (x.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        let rg = self.needs(a);
        self.push(value, rg, Op::MeanRows { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a.0].value.iter().cloned().sum::<S>();
        let rg = self.needs(a);
        self.push(Array2::from_elem((1, 1), total), rg, Op::SumAll { a })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let c = self.shape(parts[0]).1;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(self.mismatch("concat_rows", format!("{pc} columns vs {c}")));
            }
            total += pr;
        }
        let mut value = Array2::zeros((total, c));
        let mut row = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            value.slice_mut(s![row..row + v.nrows(), ..]).assign(v);
            row += v.nrows();
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Fused sparse convolution over a kernel map: for each offset `d`,
    /// gathers input rows, multiplies by that offset's weight matrix, and
    /// scatter-adds into the output rows.
    pub fn sp_conv(
        &mut self,
        x: NodeId,
        weights: &[NodeId],
        bias: Option<NodeId>,
        map: Arc<KernelMap>,
    ) -> Result<NodeId> {
        let (n, c_in) = self.shape(x);
        if n != map.n_in() {
            return Err(self.mismatch(
                "sp_conv",
                format!("{n} input rows but map covers {}", map.n_in()),
            ));
        }
        if weights.len() != map.offsets().len() {
            return Err(self.mismatch(
                "sp_conv",
                format!(
                    "{} weight matrices for {} offsets",
                    weights.len(),
                    map.offsets().len()
                ),
            ));
        }
        let (wr, c_out) = self.shape(weights[0]);
        for &w in weights {
            if self.shape(w) != (wr, c_out) {
                return Err(self.mismatch("sp_conv", "weight shapes differ across offsets".into()));
            }
        }
        if wr != c_in {
            return Err(self.mismatch(
                "sp_conv",
                format!("input has {c_in} channels, weights expect {wr}"),
            ));
        }
        if let Some(b) = bias {
            let (br, bc) = self.shape(b);
            if br != 1 || bc != c_out {
                return Err(self.mismatch("sp_conv", format!("bias ({br}, {bc})")));
            }
        }
        let mut value = Array2::zeros((map.n_out(), c_out));
        for (d, pairs) in map.pairs().iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let xv = &self.nodes[x.0].value;
            let mut gathered = Array2::zeros((pairs.len(), c_in));
            for (r, &i) in pairs.input.iter().enumerate() {
                gathered.row_mut(r).assign(&xv.row(i as usize));
            }
            let prod = gathered.dot(&self.nodes[weights[d].0].value);
            for (r, &o) in pairs.output.iter().enumerate() {
                let mut dst = value.row_mut(o as usize);
                dst += &prod.row(r);
            }
        }
        if let Some(b) = bias {
            value += &self.nodes[b.0].value;
        }
        let rg = self.needs(x)
            || weights.iter().any(|&w| self.needs(w))
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            value,
            rg,
            Op::SpConv {
                x,
                weights: weights.to_vec(),
                bias,
                map,
            },
        ))
    }

    /// Fused training-mode batch norm with batch statistics over all rows.
    /// Returns the output node plus the stats the layer folds into its
    /// running estimates. Requires at least two rows.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: S,
    ) -> Result<(NodeId, BatchStats<S>)> {
        let (n, c) = self.shape(x);
        if n < 2 {
            return Err(Error::DegenerateBatchStats);
        }
        self.check_row_operand("batch_norm", x, gamma)?;
        self.check_row_operand("batch_norm", x, beta)?;
        let xv = &self.nodes[x.0].value;
        let inv_n = S::of(1.0 / n as f64);
        let mean = xv.sum_axis(Axis(0)) * inv_n;
        let mut var = Array1::zeros(c);
        for row in xv.axis_iter(Axis(0)) {
            for (j, &v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        var *= inv_n;
        let inv_std = var.mapv(|v| S::one() / (v + eps).sqrt());
        let mut x_hat = xv.clone();
        for mut row in x_hat.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut value = x_hat.clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g[[0, j]] + b[[0, j]];
            }
        }
        let stats = BatchStats {
            mean,
            var_biased: var,
            n_rows: n,
        };
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            value,
            rg,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
        );
        Ok((id, stats))
    }

    /// Eval-mode batch norm: a fixed affine map built from running
    /// statistics, composed from broadcast primitives.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Array1<S>,
        running_var: &Array1<S>,
        eps: S,
    ) -> Result<NodeId> {
        let neg_mean = running_mean.mapv(|m| -m).insert_axis(Axis(0));
        let inv_std = running_var
            .mapv(|v| S::one() / (v + eps).sqrt())
            .insert_axis(Axis(0));
        let neg_mean = self.constant(neg_mean);
        let inv_std = self.constant(inv_std);
        let centered = self.add_row(x, neg_mean)?;
        let normalized = self.mul_row(centered, inv_std)?;
        let scaled = self.mul_row(normalized, gamma)?;
        self.add_row(scaled, beta)
    }

    /// Runs reverse-mode accumulation from a 1 x 1 loss node. Gradients of
    /// earlier backward calls on this tape are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let deltas = self.node_deltas(i);
            for (id, delta) in deltas {
                self.accumulate(id, delta);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Array2<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    /// Gradient contributions of node `i` to its operands. Pure reads; the
    /// caller applies the returned deltas.
    fn node_deltas(&self, i: usize) -> Vec<(NodeId, Array2<S>)> {
        let node = &self.nodes[i];
        let g = node.grad.as_ref().expect("node has gradient");
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out: Vec<(NodeId, Array2<S>)> = Vec::new();
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul { a, b } => {
                if needs(*a) {
                    out.push((*a, g.dot(&val(*b).t())));
                }
                if needs(*b) {
                    out.push((*b, val(*a).t().dot(g)));
                }
            }
            Op::Transpose { a } => {
                if needs(*a) {
                    out.push((*a, g.t().to_owned()));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    out.push((*b, g.mapv(|v| -v)));
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    out.push((*a, g * val(*b)));
                }
                if needs(*b) {
                    out.push((*b, g * val(*a)));
                }
            }
            Op::AddRow { a, row } => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*row) {
                    out.push((*row, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::MulRow { a, row } => {
                if needs(*a) {
                    out.push((*a, g * val(*row)));
                }
                if needs(*row) {
                    let prod = g * val(*a);
                    out.push((*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::Scale { a, k } => {
                if needs(*a) {
                    out.push((*a, g.mapv(|v| v * *k)));
                }
            }
            Op::AddScalar { a } => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
            }
            Op::Relu { a } => {
                if needs(*a) {
                    let mask = val(*a).mapv(|x| if x > S::zero() { S::one() } else { S::zero() });
                    out.push((*a, g * &mask));
                }
            }
            Op::ClampMin { a, min } => {
                if needs(*a) {
                    let mask = val(*a).mapv(|x| if x > *min { S::one() } else { S::zero() });
                    out.push((*a, g * &mask));
                }
            }
            Op::Sqrt { a } => {
                if needs(*a) {
                    // y = sqrt(x); dx = g / (2 y), with the denominator
                    // floored so a zero-length difference stays finite.
                    let floor = S::of(1e-12);
                    let two = S::of(2.0);
                    let mut dx = node.value.mapv(|y| S::one() / (two * y.max(floor)));
                    dx *= g;
                    out.push((*a, dx));
                }
            }
            Op::Pow { base, exponent } => {
                let p = val(*exponent)[[0, 0]];
                if needs(*base) {
                    let dx = val(*base).mapv(|x| p * x.powf(p - S::one()));
                    out.push((*base, &dx * g));
                }
                if needs(*exponent) {
                    // d/dp x^p = x^p ln x, summed over the broadcast.
                    let mut total = S::zero();
                    for ((y, x), gv) in node.value.iter().zip(val(*base).iter()).zip(g.iter()) {
                        total += *gv * *y * x.ln();
                    }
                    out.push((*exponent, Array2::from_elem((1, 1), total)));
                }
            }
            Op::RowSoftmax { a } => {
                if needs(*a) {
                    let y = &node.value;
                    let mut dx = y * g;
                    for (mut drow, (yrow, grow)) in dx
                        .axis_iter_mut(Axis(0))
                        .zip(y.axis_iter(Axis(0)).zip(g.axis_iter(Axis(0))))
                    {
                        let dot = yrow
                            .iter()
                            .zip(grow.iter())
                            .map(|(&yv, &gv)| yv * gv)
                            .sum::<S>();
                        for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                            *d -= yv * dot;
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::GatherRows { a, idx } => {
                if needs(*a) {
                    let (n, c) = (val(*a).nrows(), val(*a).ncols());
                    let mut dx = Array2::zeros((n, c));
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = dx.row_mut(i as usize);
                        dst += &g.row(r);
                    }
                    out.push((*a, dx));
                }
            }
            Op::ScatterAddRows { a, idx } => {
                if needs(*a) {
                    let c = g.ncols();
                    let mut dx = Array2::zeros((idx.len(), c));
                    for (r, &i) in idx.iter().enumerate() {
                        dx.row_mut(r).assign(&g.row(i as usize));
                    }
                    out.push((*a, dx));
                }
            }
            Op::SliceRows { a, start } => {
                if needs(*a) {
                    let (n, c) = (val(*a).nrows(), val(*a).ncols());
                    let mut dx = Array2::zeros((n, c));
                    dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    out.push((*a, dx));
                }
            }
            Op::MeanRows { a } => {
                if needs(*a) {
                    let n = val(*a).nrows();
                    let inv_n = S::of(1.0 / n as f64);
                    let grow = g.mapv(|v| v * inv_n);
                    let mut dx = Array2::zeros((n, g.ncols()));
                    for mut row in dx.axis_iter_mut(Axis(0)) {
                        row.assign(&grow.row(0));
                    }
                    out.push((*a, dx));
                }
            }
            Op::SumAll { a } => {
                if needs(*a) {
                    let gv = g[[0, 0]];
                    let (n, c) = (val(*a).nrows(), val(*a).ncols());
                    out.push((*a, Array2::from_elem((n, c), gv)));
                }
            }
            Op::ConcatRows { parts } => {
                let mut row = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    if needs(p) {
                        out.push((p, g.slice(s![row..row + n, ..]).to_owned()));
                    }
                    row += n;
                }
            }
            Op::SpConv {
                x,
                weights,
                bias,
                map,
            } => {
                let xv = val(*x);
                let c_in = xv.ncols();
                let mut dx = if needs(*x) {
                    Some(Array2::zeros((xv.nrows(), c_in)))
                } else {
                    None
                };
                for (d, pairs) in map.pairs().iter().enumerate() {
                    if pairs.is_empty() {
                        continue;
                    }
                    let mut g_gathered = Array2::zeros((pairs.len(), g.ncols()));
                    for (r, &o) in pairs.output.iter().enumerate() {
                        g_gathered.row_mut(r).assign(&g.row(o as usize));
                    }
                    if needs(weights[d]) {
                        let mut x_gathered = Array2::zeros((pairs.len(), c_in));
                        for (r, &idx) in pairs.input.iter().enumerate() {
                            x_gathered.row_mut(r).assign(&xv.row(idx as usize));
                        }
                        out.push((weights[d], x_gathered.t().dot(&g_gathered)));
                    }
                    if let Some(dx) = dx.as_mut() {
                        let back = g_gathered.dot(&val(weights[d]).t());
                        for (r, &idx) in pairs.input.iter().enumerate() {
                            let mut dst = dx.row_mut(idx as usize);
                            dst += &back.row(r);
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        out.push((*b, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                if needs(*gamma) {
                    let dgamma = (g * x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    out.push((*gamma, dgamma));
                }
                if needs(*beta) {
                    out.push((*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
                if needs(*x) {
                    // dx = gamma * inv_std / N * (N dy - sum(dy) - x_hat *
                    // sum(dy * x_hat)), the closed form with the batch
                    // statistics' dependence on x folded in.
                    let n = S::of(x_hat.nrows() as f64);
                    let sum_dy = g.sum_axis(Axis(0));
                    let sum_dy_xhat = (g * x_hat).sum_axis(Axis(0));
                    let gv = val(*gamma);
                    let mut dx = g.mapv(|v| v * n);
                    for mut row in dx.axis_iter_mut(Axis(0)) {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v -= sum_dy[j];
                        }
                    }
                    dx -= &(x_hat
                        * &sum_dy_xhat.clone().insert_axis(Axis(0)));
                    for mut row in dx.axis_iter_mut(Axis(0)) {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v *= gv[[0, j]] * inv_std[j] / n;
                        }
                    }
                    out.push((*x, dx));
                }
            }
        }
        out
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all checked entries.
    pub max_rel_err: f64,
    /// (input index, row, column) of the worst entry.
    pub worst: (usize, usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub n_checked: usize,
}

/// Checks analytic gradients of a scalar function against central finite
/// differences in f64.
///
/// `build` receives a fresh tape plus one leaf per input array and returns
/// the 1 x 1 loss node. Relative error uses |a - n| / max(1, |a|, |n|) so
/// tiny gradients are compared absolutely.
pub fn grad_check<F>(build: F, inputs: &[Array2<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |arrays: &[Array2<f64>]| -> Result<(f64, Vec<Option<Array2<f64>>>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        tape.backward(loss)?;
        let grads = ids.iter().map(|&id| tape.grad(id).cloned()).collect();
        Ok((tape.value(loss)[[0, 0]], grads))
    };
    let (_, grads) = eval(inputs)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        n_checked: 0,
    };
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for r in 0..input.nrows() {
            for c in 0..input.ncols() {
                let orig = work[k][[r, c]];
                work[k][[r, c]] = orig + h;
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = work.iter().map(|a| tape.leaf(a.clone())).collect();
                let plus = build(&mut tape, &ids)?;
                let f_plus = tape.value(plus)[[0, 0]];
                work[k][[r, c]] = orig - h;
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = work.iter().map(|a| tape.leaf(a.clone())).collect();
                let minus = build(&mut tape, &ids)?;
                let f_minus = tape.value(minus)[[0, 0]];
                work[k][[r, c]] = orig;
                let numeric = (f_plus - f_minus) / (2.0 * h);
                let analytic = grads[k].as_ref().map(|g| g[[r, c]]).unwrap_or(0.0);
                let rel = (analytic - numeric).abs()
                    / f64::max(1.0, f64::max(analytic.abs(), numeric.abs()));
                report.n_checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = (k, r, c);
                    report.analytic_at_worst = analytic;
                    report.numeric_at_worst = numeric;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{build_kernel_map, SparseVoxelGrid};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PRIMITIVE_TOL: f64 = 1e-5;
    const FD_STEP: f64 = 1e-6;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_matmul_known_value() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.leaf(array![[5.0, 6.0], [7.0, 8.0]]);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), &array![[19.0, 22.0], [43.0, 50.0]]);
    }

    #[test]
    fn forward_row_softmax_rows_sum_to_one() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(array![[0.0, 1.0, 2.0], [10.0, 10.0, 10.0]]);
        let y = tape.row_softmax(a);
        let v = tape.value(y);
        for row in v.axis_iter(Axis(0)) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!((v[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
        // Shift invariance via max subtraction keeps large logits finite.
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(array![[1000.0, 1001.0]]);
        let y = tape.row_softmax(a);
        assert!(tape.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_col_softmax_columns_sum_to_one() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(array![[0.0, 5.0], [1.0, 5.0], [2.0, 5.0]]);
        let y = tape.col_softmax(a);
        let v = tape.value(y);
        for col in v.axis_iter(Axis(1)) {
            let sum: f64 = col.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!((v[[0, 1]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0]]);
        assert!(matches!(
            tape.backward(a),
            Err(Error::NonScalarLoss { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn backward_shared_node_accumulates() {
        // f = sum(x + x) so df/dx = 2 everywhere.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0]]);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &array![[2.0, 2.0]]);
    }

    #[test]
    fn backward_skips_constant_branches() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        let c = tape.constant(array![[3.0, 4.0]]);
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &array![[3.0, 4.0]]);
    }

    #[test]
    fn shape_mismatch_is_a_build_error() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Array2::zeros((2, 3)));
        let b = tape.leaf(Array2::zeros((2, 3)));
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
        assert!(tape.add_row(a, b).is_err());
    }

    #[test]
    fn grad_matmul_and_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [randn(&mut rng, 3, 4), randn(&mut rng, 4, 2)];
        let report = grad_check(
            |tape, ids| {
                let t = tape.transpose(ids[1]);
                let tt = tape.transpose(t);
                let y = tape.matmul(ids[0], tt)?;
                Ok(tape.sum_all(y))
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [randn(&mut rng, 3, 3), randn(&mut rng, 3, 3)];
        let report = grad_check(
            |tape, ids| {
                let sum = tape.add(ids[0], ids[1])?;
                let diff = tape.sub(ids[0], ids[1])?;
                let prod = tape.mul(sum, diff)?;
                let scaled = tape.scale(prod, 0.5);
                let shifted = tape.add_scalar(scaled, 1.5);
                Ok(tape.sum_all(shifted))
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
    }

    #[test]
    fn grad_row_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [randn(&mut rng, 4, 3), randn(&mut rng, 1, 3), randn(&mut rng, 1, 3)];
        let report = grad_check(
            |tape, ids| {
                let shifted = tape.add_row(ids[0], ids[1])?;
                let scaled = tape.mul_row(shifted, ids[2])?;
                Ok(tape.sum_all(scaled))
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
    }

    #[test]
    fn grad_relu_and_clamp_away_from_kinks() {
        let inputs = [array![[0.5, -0.7, 1.2], [-0.3, 0.9, -1.1]]];
        let report = grad_check(
            |tape, ids| {
                let r = tape.relu(ids[0]);
                let c = tape.clamp_min(ids[0], 0.1);
                let y = tape.add(r, c)?;
                Ok(tape.sum_all(y))
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
    }

    #[test]
    fn grad_sqrt_and_pow_both_arguments() {
        let inputs = [array![[0.5, 1.5], [2.0, 0.25]], array![[2.7]]];
        let report = grad_check(
            |tape, ids| {
                let sq = tape.sqrt(ids[0]);
                let p = tape.pow(sq, ids[1])?;
                Ok(tape.sum_all(p))
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
    }

    #[test]
    fn grad_row_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [randn(&mut rng, 3, 5), randn(&mut rng, 3, 5)];
        let report = grad_check(
            |tape, ids| {
                let sm = tape.row_softmax(ids[0]);
                // Weighting breaks the rows-sum-to-one degeneracy so the
                // full Jacobian is exercised.
                let weighted = tape.mul(sm, ids[1])?;
                Ok(tape.sum_all(weighted))
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
    }

    #[test]
    fn grad_gather_scatter_slice_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [randn(&mut rng, 5, 3), randn(&mut rng, 4, 3)];
        let gather_idx = Arc::new(vec![4u32, 0, 0, 2]);
        let scatter_idx = Arc::new(vec![1u32, 1, 3, 0]);
        let report = grad_check(
            move |tape, ids| {
                let gathered = tape.gather_rows(ids[0], gather_idx.clone())?;
                let scattered = tape.scatter_add_rows(ids[1], scatter_idx.clone(), 5)?;
                let merged = tape.concat_rows(&[gathered, scattered])?;
                let sliced = tape.slice_rows(merged, 2, 6)?;
                let m = tape.mean_rows(sliced);
                Ok(tape.sum_all(m))
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
    }

    #[test]
    fn gather_rejects_out_of_range_index() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Array2::zeros((3, 2)));
        assert!(tape.gather_rows(a, Arc::new(vec![3])).is_err());
        assert!(tape.scatter_add_rows(a, Arc::new(vec![0, 1, 5]), 4).is_err());
    }

    fn tiny_grid() -> SparseVoxelGrid<f64> {
        let coords = vec![[0, 0, 0], [0, 1, 0], [1, 0, 0], [2, 2, 2]];
        SparseVoxelGrid::from_parts(coords, Array2::ones((4, 1)), 1, 0.01).unwrap()
    }

    #[test]
    fn sp_conv_matches_gather_matmul_scatter_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = tiny_grid();
        let km = Arc::new(build_kernel_map(&grid, 3, 1));
        let x = randn(&mut rng, km.n_in(), 2);
        let weights: Vec<Array2<f64>> = (0..km.offsets().len())
            .map(|_| randn(&mut rng, 2, 3))
            .collect();
        let bias = randn(&mut rng, 1, 3);

        let mut fused: Tape<f64> = Tape::new();
        let xf = fused.leaf(x.clone());
        let wf: Vec<NodeId> = weights.iter().map(|w| fused.leaf(w.clone())).collect();
        let bf = fused.leaf(bias.clone());
        let yf = fused.sp_conv(xf, &wf, Some(bf), km.clone()).unwrap();

        let mut composed: Tape<f64> = Tape::new();
        let xc = composed.leaf(x.clone());
        let mut acc: Option<NodeId> = None;
        for (d, w) in weights.iter().enumerate() {
            let pairs = &km.pairs()[d];
            if pairs.is_empty() {
                continue;
            }
            let wc = composed.leaf(w.clone());
            let gathered = composed
                .gather_rows(xc, Arc::new(pairs.input.clone()))
                .unwrap();
            let prod = composed.matmul(gathered, wc).unwrap();
            let scattered = composed
                .scatter_add_rows(prod, Arc::new(pairs.output.clone()), km.n_out())
                .unwrap();
            acc = Some(match acc {
                None => scattered,
                Some(a) => composed.add(a, scattered).unwrap(),
            });
        }
        let bc = composed.leaf(bias.clone());
        let yc = composed.add_row(acc.unwrap(), bc).unwrap();

        let diff = tape_diff(&fused, yf, &composed, yc);
        assert!(diff < 1e-14, "forward mismatch {diff}");
    }

    fn tape_diff(t1: &Tape<f64>, a: NodeId, t2: &Tape<f64>, b: NodeId) -> f64 {
        (t1.value(a) - t2.value(b))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn grad_sp_conv_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = tiny_grid();
        let km = Arc::new(build_kernel_map(&grid, 2, 2));
        assert!(km.total_pairs() > 0);
        let n_off = km.offsets().len();
        let mut inputs = vec![randn(&mut rng, km.n_in(), 2)];
        for _ in 0..n_off {
            inputs.push(randn(&mut rng, 2, 3));
        }
        inputs.push(randn(&mut rng, 1, 3));
        let report = grad_check(
            move |tape, ids| {
                let weights = &ids[1..1 + n_off];
                let y = tape.sp_conv(ids[0], weights, Some(ids[1 + n_off]), km.clone())?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
    }

    #[test]
    fn batch_norm_train_normalizes_batch() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(array![[0.0], [2.0]]);
        let gamma = tape.leaf(array![[1.0]]);
        let beta = tape.leaf(array![[0.0]]);
        let (y, stats) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        // mean 1, biased variance 1: x_hat = (x - 1) / sqrt(1 + 1e-5).
        let expect = 0.9999950000374997;
        assert!((tape.value(y)[[0, 0]] + expect).abs() < 1e-15);
        assert!((tape.value(y)[[1, 0]] - expect).abs() < 1e-15);
        assert_eq!(stats.mean[0], 1.0);
        assert_eq!(stats.var_biased[0], 1.0);
        assert_eq!(stats.n_rows, 2);
    }

    #[test]
    fn batch_norm_train_rejects_single_row() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        let gamma = tape.leaf(array![[1.0, 1.0]]);
        let beta = tape.leaf(array![[0.0, 0.0]]);
        assert!(matches!(
            tape.batch_norm_train(x, gamma, beta, 1e-5),
            Err(Error::DegenerateBatchStats)
        ));
    }

    #[test]
    fn grad_batch_norm_train_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = [randn(&mut rng, 6, 3), randn(&mut rng, 1, 3), randn(&mut rng, 1, 3)];
        let report = grad_check(
            |tape, ids| {
                let (y, _) = tape.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
                // A nonlinear readout keeps the normalization constraints
                // from hiding gradient errors.
                let sq = tape.mul(y, y)?;
                let m = tape.mean_rows(sq);
                Ok(tape.sum_all(m))
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
    }

    #[test]
    fn batch_norm_eval_is_fixed_affine_map() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(array![[1.0, 10.0], [3.0, 30.0]]);
        let gamma = tape.leaf(array![[2.0, 1.0]]);
        let beta = tape.leaf(array![[0.5, 0.0]]);
        let mean = Array1::from(vec![1.0, 20.0]);
        let var = Array1::from(vec![4.0, 100.0]);
        let y = tape
            .batch_norm_eval(x, gamma, beta, &mean, &var, 0.0)
            .unwrap();
        let v = tape.value(y);
        assert!((v[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((v[[1, 0]] - (2.0 * (3.0 - 1.0) / 2.0 + 0.5)).abs() < 1e-12);
        assert!((v[[0, 1]] - (10.0 - 20.0) / 10.0).abs() < 1e-12);
    }

    #[test]
    fn grad_full_composite_chain() {
        // One graph touching most ops at once, as a smoke test for
        // cross-op gradient interactions.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = [
            randn(&mut rng, 4, 3),
            randn(&mut rng, 3, 3),
            randn(&mut rng, 1, 3),
            Array2::from_elem((1, 1), 2.5),
        ];
        let report = grad_check(
            |tape, ids| {
                let h = tape.matmul(ids[0], ids[1])?;
                let h = tape.add_row(h, ids[2])?;
                let h = tape.relu(h);
                let h = tape.clamp_min(h, 1e-6);
                let p = tape.pow(h, ids[3])?;
                let pooled = tape.mean_rows(p);
                let minus_one = tape.scalar_const(-1.0);
                let inv = tape.pow(ids[3], minus_one)?;
                let d = tape.pow(pooled, inv)?;
                Ok(tape.sum_all(d))
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < PRIMITIVE_TOL, "{report:?}");
    }
}
