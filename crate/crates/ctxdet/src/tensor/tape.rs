//! Reverse-mode differentiation tape.
//!
//! Operations execute eagerly and record enough to replay the chain rule in
//! reverse. A tape lives on one thread for the duration of a forward/backward
//! pass; distinct tapes never share state.

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F: Real> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// A · Bᵀ where B is stored untransposed.
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: F },
    SumList { xs: Vec<NodeId> },
    Relu { x: NodeId },
    SoftmaxRows { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    AvgPool { x: NodeId, kernel: usize, stride: usize, ceil: bool },
    Conv2d { x: NodeId, w: NodeId, stride: usize, padding: usize },
    Reshape { x: NodeId },
    ConcatRows { xs: Vec<NodeId> },
    ConcatCols { a: NodeId, b: NodeId },
    SliceRows { x: NodeId, start: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    PairwiseNegSqDist { a: NodeId, b: NodeId },
    NormalizeRows { x: NodeId },
    SmoothL1Sum { pred: NodeId, target: Vec<F> },
    BceLogitsSum { logits: NodeId, targets: Vec<F> },
    CrossEntropySum { logits: NodeId, classes: Vec<usize> },
    SumAll { x: NodeId },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Gradients produced by a backward pass, indexed by node.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient tensor for a node, zero-filled if the node was unreachable.
    pub fn wrt(&self, tape: &Tape<F>, id: NodeId) -> Tensor<F> {
        let shape = tape.value(id).shape().to_vec();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, mut value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            ka,
            n,
            F::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            F::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul { a, b },
            rg,
        ))
    }

    /// A · Bᵀ with B stored as rows (used for affinity between row sets).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (n, kb) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul_nt column counts disagree: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            ka,
            n,
            F::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            F::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatmulNt { a, b }, rg))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim(format!(
                "sub shapes disagree: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub { a, b }, rg))
    }

    /// Adds a length-C bias over the last axis of an H x W x C (or N x C) tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let c = *self.value(x).shape().last().unwrap();
        if self.value(bias).shape() != [c] {
            return Err(Error::Dim(format!(
                "bias shape {:?} does not match channel count {}",
                self.value(bias).shape(),
                c
            )));
        }
        let b = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale { x, c }, rg)
    }

    /// Elementwise sum of same-shaped nodes (used to combine scene losses).
    pub fn sum_list(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Parameter("sum_list of zero nodes".into()));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        let mut data = self.value(xs[0]).data().to_vec();
        for &x in &xs[1..] {
            if self.value(x).shape() != shape {
                return Err(Error::Dim("sum_list shapes disagree".into()));
            }
            for (o, &v) in data.iter_mut().zip(self.value(x).data()) {
                *o += v;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::SumList { xs: xs.to_vec() },
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.maximum(F::zero()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::Relu { x }, rg)
    }

    // ── Structured ops ───────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        let data = kernels::softmax_rows_forward(self.value(x).data(), rows, cols);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::SoftmaxRows { x },
            rg,
        ))
    }

    pub fn max_pool(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        ceil_mode: bool,
    ) -> Result<NodeId> {
        let (h, w, c) = self.value(x).dims3()?;
        kernels::check_pool_params(h, w, kernel, stride, ceil_mode)?;
        let (data, argmax, oh, ow) =
            kernels::max_pool_forward(self.value(x).data(), h, w, c, kernel, stride, ceil_mode);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![oh, ow, c], data)?,
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    pub fn avg_pool(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        ceil_mode: bool,
    ) -> Result<NodeId> {
        let (h, w, c) = self.value(x).dims3()?;
        kernels::check_pool_params(h, w, kernel, stride, ceil_mode)?;
        let (data, oh, ow) =
            kernels::avg_pool_forward(self.value(x).data(), h, w, c, kernel, stride, ceil_mode);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![oh, ow, c], data)?,
            Op::AvgPool { x, kernel, stride, ceil: ceil_mode },
            rg,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (h, wd, cin) = self.value(x).dims3()?;
        let (k, k2, wcin, cout) = self.value(w).dims4()?;
        if k != k2 || k % 2 == 0 {
            return Err(Error::Parameter(format!(
                "conv kernel must be square with odd extent, got {k}x{k2}"
            )));
        }
        if wcin != cin {
            return Err(Error::Dim(format!(
                "conv channel mismatch: input has {cin}, weights expect {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv stride must be positive".into()));
        }
        let (data, oh, ow) = kernels::conv2d_forward(
            self.value(x).data(),
            (h, wd, cin),
            self.value(w).data(),
            (k, cin, cout),
            stride,
            padding,
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(vec![oh, ow, cout], data)?,
            Op::Conv2d { x, w, stride, padding },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Parameter("concat_rows of zero nodes".into()));
        }
        let (_, cols) = self.value(xs[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, c) = self.value(x).dims2()?;
            if c != cols {
                return Err(Error::Dim(format!(
                    "concat_rows column counts disagree: {cols} vs {c}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows { xs: xs.to_vec() },
            rg,
        ))
    }

    /// Joins two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::Dim(format!(
                "concat_cols row counts disagree: {ra} vs {rb}"
            )));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&self.value(a).data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.value(b).data()[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![ra, ca + cb], data)?,
            Op::ConcatCols { a, b },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > rows {
            return Err(Error::Dim(format!(
                "slice_rows {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![len, cols], data)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if idx.is_empty() {
            return Err(Error::Parameter("gather_rows with empty index set".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Dim(format!("gather_rows index {bad} out of {rows}")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(&self.value(x).data()[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], data)?,
            Op::GatherRows { x, idx },
            rg,
        ))
    }

    /// out[i][j] = -|a_i - b_j|^2 for row sets a (m x c) and b (n x c).
    pub fn pairwise_neg_sqdist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ca) = self.value(a).dims2()?;
        let (n, cb) = self.value(b).dims2()?;
        if ca != cb {
            return Err(Error::Dim(format!(
                "pairwise distance column counts disagree: {ca} vs {cb}"
            )));
        }
        let mut data = vec![F::zero(); m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..m {
            for j in 0..n {
                let mut acc = F::zero();
                for t in 0..ca {
                    let d = av[i * ca + t] - bv[j * ca + t];
                    acc += d * d;
                }
                data[i * n + j] = -acc;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::PairwiseNegSqDist { a, b },
            rg,
        ))
    }

    /// L2-normalizes each row (with a small epsilon under the root).
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        let eps = F::from_f64(1e-12);
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &self.value(x).data()[r * cols..(r + 1) * cols];
            let mut sq = F::zero();
            for &v in row {
                sq += v * v;
            }
            let norm = (sq + eps).sqrt();
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::NormalizeRows { x },
            rg,
        ))
    }

    // ── Losses (scalar outputs) ──────────────────────────────────────

    /// Sum of smooth-L1 terms between `pred` and a constant target.
    pub fn smooth_l1_sum(&mut self, pred: NodeId, target: Vec<F>) -> Result<NodeId> {
        if self.value(pred).numel() != target.len() {
            return Err(Error::Dim(format!(
                "smooth_l1 target has {} elements, prediction {}",
                target.len(),
                self.value(pred).numel()
            )));
        }
        let mut acc = F::zero();
        let half = F::from_f64(0.5);
        for (&p, &t) in self.value(pred).data().iter().zip(target.iter()) {
            let d = (p - t).abs();
            acc += if d < F::one() { half * d * d } else { d - half };
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::SmoothL1Sum { pred, target },
            rg,
        ))
    }

    /// Sum of binary cross-entropy with logits against constant targets.
    pub fn bce_logits_sum(&mut self, logits: NodeId, targets: Vec<F>) -> Result<NodeId> {
        if self.value(logits).numel() != targets.len() {
            return Err(Error::Dim(format!(
                "bce targets have {} elements, logits {}",
                targets.len(),
                self.value(logits).numel()
            )));
        }
        let mut acc = F::zero();
        for (&x, &t) in self.value(logits).data().iter().zip(targets.iter()) {
            acc += kernels::bce_with_logits(x, t);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::BceLogitsSum { logits, targets },
            rg,
        ))
    }

    /// Sum over rows of -log softmax(row)[class].
    pub fn cross_entropy_sum(&mut self, logits: NodeId, classes: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = self.value(logits).dims2()?;
        if classes.len() != rows {
            return Err(Error::Dim(format!(
                "{} class labels for {} rows",
                classes.len(),
                rows
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= cols) {
            return Err(Error::Dim(format!("class index {bad} out of {cols}")));
        }
        let mut acc = F::zero();
        for (r, &cls) in classes.iter().enumerate() {
            let row = &self.value(logits).data()[r * cols..(r + 1) * cols];
            acc += kernels::log_sum_exp_row(row) - row[cls];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::CrossEntropySum { logits, classes },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let acc = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(acc), Op::SumAll { x }, rg)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Runs the chain rule from a scalar `loss` node, returning gradients for
    /// every node that requires them.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Parameter(format!(
                "backward seed must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Vec<F>>],
        id: NodeId,
        numel: usize,
    ) -> &'a mut Vec<F> {
        grads[id.0].get_or_insert_with(|| vec![F::zero(); numel])
    }

    fn accumulate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let da = Self::ensure(grads, *a, m * k);
                    F::gemm(m, n, k, F::one(), g, false, self.value(*b).data(), true, F::one(), da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let db = Self::ensure(grads, *b, k * n);
                    F::gemm(k, m, n, F::one(), self.value(*a).data(), true, g, false, F::one(), db);
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (n, _) = self.value(*b).dims2()?;
                if self.rg(*a) {
                    // C = A·Bᵀ: dA = dC · B
                    let da = Self::ensure(grads, *a, m * k);
                    F::gemm(m, n, k, F::one(), g, false, self.value(*b).data(), false, F::one(), da);
                }
                if self.rg(*b) {
                    // dB = dCᵀ · A
                    let db = Self::ensure(grads, *b, n * k);
                    F::gemm(n, m, k, F::one(), g, true, self.value(*a).data(), false, F::one(), db);
                }
            }
            Op::Add { a, b } => {
                for &src in &[*a, *b] {
                    if self.rg(src) {
                        let d = Self::ensure(grads, src, g.len());
                        for (o, &v) in d.iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    let d = Self::ensure(grads, *a, g.len());
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.rg(*b) {
                    let d = Self::ensure(grads, *b, g.len());
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let c = self.value(*bias).numel();
                if self.rg(*x) {
                    let d = Self::ensure(grads, *x, g.len());
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.rg(*bias) {
                    let d = Self::ensure(grads, *bias, c);
                    for (idx, &v) in g.iter().enumerate() {
                        d[idx % c] += v;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.rg(*x) {
                    let d = Self::ensure(grads, *x, g.len());
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o += v * *c;
                    }
                }
            }
            Op::SumList { xs } => {
                for &x in xs {
                    if self.rg(x) {
                        let d = Self::ensure(grads, x, g.len());
                        for (o, &v) in d.iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    let d = Self::ensure(grads, *x, g.len());
                    for ((o, &v), &inp) in d.iter_mut().zip(g).zip(xv) {
                        if inp > F::zero() {
                            *o += v;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if self.rg(*x) {
                    let (rows, cols) = node.value.dims2()?;
                    let y = node.value.data();
                    let d = Self::ensure(grads, *x, rows * cols);
                    kernels::softmax_rows_backward(y, g, rows, cols, d);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.rg(*x) {
                    let numel = self.value(*x).numel();
                    let d = Self::ensure(grads, *x, numel);
                    kernels::max_pool_backward(g, argmax, d);
                }
            }
            Op::AvgPool { x, kernel, stride, ceil } => {
                if self.rg(*x) {
                    let (h, w, c) = self.value(*x).dims3()?;
                    let d = Self::ensure(grads, *x, h * w * c);
                    kernels::avg_pool_backward(g, h, w, c, *kernel, *stride, *ceil, d);
                }
            }
            Op::Conv2d { x, w, stride, padding } => {
                let (h, wd, cin) = self.value(*x).dims3()?;
                let (k, _, _, cout) = self.value(*w).dims4()?;
                let oh = node.value.shape()[0];
                let ow = node.value.shape()[1];
                let (gin, gw) = kernels::conv2d_backward(
                    g,
                    self.value(*x).data(),
                    (h, wd, cin),
                    self.value(*w).data(),
                    (k, cin, cout),
                    *stride,
                    *padding,
                    oh,
                    ow,
                );
                if self.rg(*x) {
                    let d = Self::ensure(grads, *x, h * wd * cin);
                    for (o, v) in d.iter_mut().zip(gin) {
                        *o += v;
                    }
                }
                if self.rg(*w) {
                    let d = Self::ensure(grads, *w, self.value(*w).numel());
                    for (o, v) in d.iter_mut().zip(gw) {
                        *o += v;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    let d = Self::ensure(grads, *x, g.len());
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let numel = self.value(x).numel();
                    if self.rg(x) {
                        let d = Self::ensure(grads, x, numel);
                        for (o, &v) in d.iter_mut().zip(&g[offset..offset + numel]) {
                            *o += v;
                        }
                    }
                    offset += numel;
                }
            }
            Op::ConcatCols { a, b } => {
                let (ra, ca) = self.value(*a).dims2()?;
                let (_, cb) = self.value(*b).dims2()?;
                if self.rg(*a) {
                    let d = Self::ensure(grads, *a, ra * ca);
                    for r in 0..ra {
                        for c in 0..ca {
                            d[r * ca + c] += g[r * (ca + cb) + c];
                        }
                    }
                }
                if self.rg(*b) {
                    let d = Self::ensure(grads, *b, ra * cb);
                    for r in 0..ra {
                        for c in 0..cb {
                            d[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let (_, cols) = self.value(*x).dims2()?;
                    let numel = self.value(*x).numel();
                    let d = Self::ensure(grads, *x, numel);
                    for (offset, &v) in g.iter().enumerate() {
                        d[start * cols + offset] += v;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.rg(*x) {
                    let (_, cols) = self.value(*x).dims2()?;
                    let numel = self.value(*x).numel();
                    let d = Self::ensure(grads, *x, numel);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            d[i * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::PairwiseNegSqDist { a, b } => {
                let (m, cdim) = self.value(*a).dims2()?;
                let (n, _) = self.value(*b).dims2()?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let two = F::from_f64(2.0);
                if self.rg(*a) {
                    let d = Self::ensure(grads, *a, m * cdim);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for t in 0..cdim {
                                d[i * cdim + t] -=
                                    two * gij * (av[i * cdim + t] - bv[j * cdim + t]);
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let d = Self::ensure(grads, *b, n * cdim);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for t in 0..cdim {
                                d[j * cdim + t] +=
                                    two * gij * (av[i * cdim + t] - bv[j * cdim + t]);
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { x } => {
                if self.rg(*x) {
                    let (rows, cols) = self.value(*x).dims2()?;
                    let eps = F::from_f64(1e-12);
                    let xv = self.value(*x).data();
                    let d = Self::ensure(grads, *x, rows * cols);
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let mut sq = F::zero();
                        for &v in row {
                            sq += v * v;
                        }
                        let norm = (sq + eps).sqrt();
                        let inv = F::one() / norm;
                        let inv3 = inv * inv * inv;
                        let mut dot = F::zero();
                        for (gv, &v) in g[r * cols..(r + 1) * cols].iter().zip(row) {
                            dot += *gv * v;
                        }
                        for (t, o) in d[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                            *o += g[r * cols + t] * inv - row[t] * dot * inv3;
                        }
                    }
                }
            }
            Op::SmoothL1Sum { pred, target } => {
                if self.rg(*pred) {
                    let seed = g[0];
                    let pv = self.value(*pred).data();
                    let d = Self::ensure(grads, *pred, pv.len());
                    for ((o, &p), &t) in d.iter_mut().zip(pv).zip(target.iter()) {
                        let diff = p - t;
                        let slope = diff.maximum(-F::one()).minimum(F::one());
                        *o += seed * slope;
                    }
                }
            }
            Op::BceLogitsSum { logits, targets } => {
                if self.rg(*logits) {
                    let seed = g[0];
                    let lv = self.value(*logits).data();
                    let d = Self::ensure(grads, *logits, lv.len());
                    for ((o, &x), &t) in d.iter_mut().zip(lv).zip(targets.iter()) {
                        *o += seed * (kernels::sigmoid(x) - t);
                    }
                }
            }
            Op::CrossEntropySum { logits, classes } => {
                if self.rg(*logits) {
                    let seed = g[0];
                    let (rows, cols) = self.value(*logits).dims2()?;
                    let lv = self.value(*logits).data();
                    let d = Self::ensure(grads, *logits, rows * cols);
                    for (r, &cls) in classes.iter().enumerate() {
                        let row = &lv[r * cols..(r + 1) * cols];
                        let probs = kernels::softmax_rows_forward(row, 1, cols);
                        for (t, &p) in probs.iter().enumerate() {
                            let indicator = if t == cls { F::one() } else { F::zero() };
                            d[r * cols + t] += seed * (p - indicator);
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.rg(*x) {
                    let seed = g[0];
                    let numel = self.value(*x).numel();
                    let d = Self::ensure(grads, *x, numel);
                    for o in d.iter_mut() {
                        *o += seed;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[1, 2], &[1.0, 0.0]), false);
        let b = tape.leaf(t64(&[2, 1], &[0.0, 1.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 3], &[0.0; 6]), false);
        let b = tape.leaf(t64(&[2, 2], &[0.0; 4]), false);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_backward_rule() {
        // d(sum(A·B))/dA = 1·Bᵀ broadcast; checked against the closed form.
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]), true);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        // dA = ones(2,2) · Bᵀ = [[11,15],[11,15]]
        assert_eq!(grads.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        // dB = Aᵀ · ones(2,2) = [[4,4],[6,6]]
        assert_eq!(grads.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_shift_invariance_and_sums() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 3], &[0.3, -1.2, 2.0]), false);
        let shifted = tape.leaf(t64(&[1, 3], &[0.3 + 7.5, -1.2 + 7.5, 2.0 + 7.5]), false);
        let y1 = tape.softmax_rows(x).unwrap();
        let y2 = tape.softmax_rows(shifted).unwrap();
        let sum: f64 = tape.value(y1).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (a, b) in tape.value(y1).data().iter().zip(tape.value(y2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_known_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 2], &[0.0, 2.0f64.ln()]), false);
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-12);

        let c = tape.leaf(t64(&[1, 3], &[4.2, 4.2, 4.2]), false);
        let yc = tape.softmax_rows(c).unwrap();
        for &v in tape.value(yc).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_single_window_and_ties() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = tape.max_pool(x, 2, 2, true).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);

        // ties: gradient goes to the first row-major argmax
        let t = tape.leaf(t64(&[1, 2, 1], &[5.0, 5.0]), true);
        let p = tape.max_pool(t, 2, 2, true).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(t).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn max_pool_idempotent_k1s1() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3, 1], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), false);
        let y = tape.max_pool(x, 1, 1, true).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn avg_pool_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.avg_pool(x, 2, 2, true).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn pool_parameter_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 2, 1], &[0.0; 4]), false);
        assert!(tape.max_pool(x, 0, 1, true).is_err());
        assert!(tape.max_pool(x, 2, 0, true).is_err());
        assert!(tape.max_pool(x, 3, 1, false).is_err());
        assert!(tape.max_pool(x, 3, 1, true).is_ok());
    }

    #[test]
    fn conv_zero_weights() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::full(vec![4, 4, 2], 1.3), false);
        let w = tape.leaf(Tensor::zeros(vec![3, 3, 2, 4]), false);
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(y).shape(), &[4, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![4, 4, 3]), false);
        let w = tape.leaf(Tensor::zeros(vec![3, 3, 2, 4]), false);
        assert!(tape.conv2d(x, w, 1, 1).is_err());
    }

    #[test]
    fn smooth_l1_piecewise_values() {
        let mut tape = Tape::new();
        let p = tape.leaf(t64(&[1, 2], &[0.5, 2.0]), false);
        let l = tape.smooth_l1_sum(p, vec![0.0, 0.0]).unwrap();
        // 0.5*0.25 + (2-0.5) = 0.125 + 1.5
        assert!((tape.value(l).item() - 1.625).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let g = tape.gather_rows(x, vec![2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0]);
        let loss = tape.sum_all(g);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_cols_layout() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2, 1], &[1.0, 2.0]), false);
        let b = tape.leaf(t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), false);
        let c = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
