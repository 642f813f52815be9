//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations are evaluated eagerly as they are recorded; `backward` replays
//! the tape in reverse, accumulating gradients by the chain rule. Node ids are
//! tape indices, so parents always precede children and a single reverse sweep
//! is a valid topological order.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub type NodeId = usize;

/// Forward/eval switch for stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// [m,k] x [k,n] -> [m,n]
    MatMul { a: NodeId, b: NodeId },
    /// [r,c] x [c] -> [r]
    MatVec { m: NodeId, v: NodeId },
    /// [n] . [n] -> [1]
    Dot { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    /// |a - b| elementwise; gradient at 0 defined as 0.
    AbsDiff { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    /// Single row of a matrix -> vector.
    Row { x: NodeId, index: usize },
    /// Contiguous 1-D slice.
    Slice { x: NodeId, start: usize },
    /// k vectors of length n -> [k,n]
    StackRows { rows: Vec<NodeId> },
    /// Per-column max over unmasked rows; `winners[j]` is the row whose entry
    /// receives the gradient (first row attaining the max).
    MaxOverTime { x: NodeId, winners: Vec<usize> },
    SoftmaxRow { x: NodeId },
    /// Fused softmax + cross entropy from raw scores; backward emits
    /// softmax(scores) - onehot(gold).
    CrossEntropy { scores: NodeId, gold: usize },
    /// Inverted dropout; mask entries are 0 or 1/(1-p).
    Dropout { x: NodeId, mask: Vec<f64> },
    Sum { x: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one backward pass, indexed by node id. Nodes unreachable from
/// the loss hold zero tensors.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.grads[id]
    }
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        id
    }

    /// Insert an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * tb.data()[p * n + j];
                }
            }
        }
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(vec![m, n], out)?))
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (tm, tv) = (&self.nodes[m].value, &self.nodes[v].value);
        if tm.shape().len() != 2 || tv.shape().len() != 1 || tm.cols() != tv.numel() {
            return Err(Error::Dimension(format!(
                "matvec {:?} x {:?}",
                tm.shape(),
                tv.shape()
            )));
        }
        let (r, c) = (tm.rows(), tm.cols());
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &tm.data()[i * c..(i + 1) * c];
            out[i] = row.iter().zip(tv.data()).map(|(a, b)| a * b).sum();
        }
        Ok(self.push(Op::MatVec { m, v }, Tensor::vector(out)))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape() != tb.shape() || ta.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "dot {:?} . {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot { a, b }, Tensor::scalar(s)))
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "{name} {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "hadamard", |x, y| x * y, Op::Hadamard { a, b })
    }

    pub fn abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "abs-diff", |x, y| (x - y).abs(), Op::AbsDiff { a, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x].value;
        let data: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(Op::Relu { x }, value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x].value;
        let data: Vec<f64> = t.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(Op::Sigmoid { x }, value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x].value;
        let data: Vec<f64> = t.data().iter().map(|&v| v.tanh()).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(Op::Tanh { x }, value)
    }

    /// Concatenate along `axis`. Vectors concatenate along axis 0; matrices
    /// along rows (0) or columns (1). All non-concat extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat of zero parts".into()));
        }
        let rank = self.nodes[parts[0]].value.shape().len();
        if axis >= rank {
            return Err(Error::Dimension(format!("concat axis {axis} for rank {rank}")));
        }
        for &p in parts {
            let s = self.nodes[p].value.shape();
            if s.len() != rank {
                return Err(Error::Dimension(format!(
                    "concat rank mismatch {:?} vs {:?}",
                    self.nodes[parts[0]].value.shape(),
                    s
                )));
            }
            for d in 0..rank {
                if d != axis && s[d] != self.nodes[parts[0]].value.shape()[d] {
                    return Err(Error::Dimension(format!(
                        "concat non-concat extent mismatch {:?} vs {:?} on axis {d}",
                        self.nodes[parts[0]].value.shape(),
                        s
                    )));
                }
            }
        }
        let value = match rank {
            1 => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.nodes[p].value.data());
                }
                Tensor::vector(data)
            }
            2 => {
                if axis == 0 {
                    let cols = self.nodes[parts[0]].value.cols();
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for &p in parts {
                        data.extend_from_slice(self.nodes[p].value.data());
                        rows += self.nodes[p].value.rows();
                    }
                    Tensor::new(vec![rows, cols], data)?
                } else {
                    let rows = self.nodes[parts[0]].value.rows();
                    let total_cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
                    let mut data = vec![0.0; rows * total_cols];
                    let mut col_off = 0;
                    for &p in parts {
                        let t = &self.nodes[p].value;
                        for r in 0..rows {
                            for c in 0..t.cols() {
                                data[r * total_cols + col_off + c] = t.at2(r, c);
                            }
                        }
                        col_off += t.cols();
                    }
                    Tensor::new(vec![rows, total_cols], data)?
                }
            }
            _ => return Err(Error::Dimension(format!("concat of rank-{rank} tensors"))),
        };
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, value))
    }

    /// Row `index` of a matrix as a vector.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if t.shape().len() != 2 {
            return Err(Error::Dimension(format!("row of shape {:?}", t.shape())));
        }
        if index >= t.rows() {
            return Err(Error::Index(format!("row {index} of {} rows", t.rows())));
        }
        let c = t.cols();
        let data = t.data()[index * c..(index + 1) * c].to_vec();
        Ok(self.push(Op::Row { x, index }, Tensor::vector(data)))
    }

    /// Contiguous slice [start, start+len) of a vector.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if t.shape().len() != 1 {
            return Err(Error::Dimension(format!("slice of shape {:?}", t.shape())));
        }
        if start + len > t.numel() {
            return Err(Error::Index(format!(
                "slice {start}..{} of length {}",
                start + len,
                t.numel()
            )));
        }
        let data = t.data()[start..start + len].to_vec();
        Ok(self.push(Op::Slice { x, start }, Tensor::vector(data)))
    }

    /// Stack equal-length vectors into a [k, n] matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Empty("stack_rows of zero rows".into()));
        }
        let n = self.nodes[rows[0]].value.numel();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let t = &self.nodes[r].value;
            if t.shape().len() != 1 || t.numel() != n {
                return Err(Error::Dimension(format!(
                    "stack_rows lengths {} vs {}",
                    n,
                    t.numel()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(Op::StackRows { rows: rows.to_vec() }, value))
    }

    /// Per-dimension max over the unmasked rows of a [T, k] matrix.
    /// `mask[t] = true` excludes step t. Ties go to the lowest row index, and
    /// that row alone receives the backward gradient.
    pub fn max_over_time(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if t.shape().len() != 2 {
            return Err(Error::Dimension(format!("max_over_time of shape {:?}", t.shape())));
        }
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(Error::Dimension(format!(
                    "mask length {} for {} steps",
                    m.len(),
                    rows
                )));
            }
        }
        let live: Vec<usize> = (0..rows)
            .filter(|&r| mask.map_or(true, |m| !m[r]))
            .collect();
        if live.is_empty() {
            return Err(Error::Empty("max_over_time with all steps masked".into()));
        }
        let mut out = vec![f64::NEG_INFINITY; cols];
        let mut winners = vec![0usize; cols];
        for &r in &live {
            for c in 0..cols {
                let v = t.at2(r, c);
                if v > out[c] {
                    out[c] = v;
                    winners[c] = r;
                }
            }
        }
        Ok(self.push(Op::MaxOverTime { x, winners }, Tensor::vector(out)))
    }

    /// Numerically stable softmax of a score vector.
    pub fn softmax_row(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if t.shape().len() != 1 {
            return Err(Error::Dimension(format!("softmax_row of shape {:?}", t.shape())));
        }
        Ok(self.push(Op::SoftmaxRow { x }, softmax(t.data())))
    }

    /// Cross-entropy loss of softmax(scores) against a gold index, fused for
    /// the stable backward softmax(scores) - onehot(gold). Forward is computed
    /// as logsumexp(scores) - scores[gold].
    pub fn cross_entropy_loss(&mut self, scores: NodeId, gold: usize) -> Result<NodeId> {
        let t = &self.nodes[scores].value;
        if t.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "cross_entropy_loss of shape {:?}",
                t.shape()
            )));
        }
        if gold >= t.numel() {
            return Err(Error::Index(format!(
                "gold index {gold} for {} classes",
                t.numel()
            )));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[gold];
        Ok(self.push(Op::CrossEntropy { scores, gold }, Tensor::scalar(loss)))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability p
    /// and survivors are scaled by 1/(1-p); eval mode is the identity.
    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        let t = &self.nodes[x].value;
        if mode == Mode::Eval || p == 0.0 {
            let value = t.clone();
            let mask = vec![1.0; value.numel()];
            return Ok(self.push(Op::Dropout { x, mask }, value));
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    /// Reverse accumulation from a scalar loss. Nodes that do not feed the
    /// loss keep zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_t = &self.nodes[loss].value;
        if !loss_t.is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                loss_t.shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss].data_mut()[0] = 1.0;

        for id in (0..=loss).rev() {
            if grads[id].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[id].clone();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = g . B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g.data()[i * n + j] * tb.data()[p * n + j];
                            }
                            grads[*a].data_mut()[i * k + p] += s;
                        }
                    }
                    // dB = A^T . g
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ta.data()[i * k + p] * g.data()[i * n + j];
                            }
                            grads[*b].data_mut()[p * n + j] += s;
                        }
                    }
                }
                Op::MatVec { m, v } => {
                    let (tm, tv) = (&self.nodes[*m].value, &self.nodes[*v].value);
                    let (r, c) = (tm.rows(), tm.cols());
                    for i in 0..r {
                        let gi = g.data()[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            grads[*m].data_mut()[i * c + j] += gi * tv.data()[j];
                            grads[*v].data_mut()[j] += gi * tm.data()[i * c + j];
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let gs = g.item();
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    for j in 0..ta.numel() {
                        grads[*a].data_mut()[j] += gs * tb.data()[j];
                        grads[*b].data_mut()[j] += gs * ta.data()[j];
                    }
                }
                Op::Add { a, b } => {
                    grads[*a].add_assign(&g)?;
                    grads[*b].add_assign(&g)?;
                }
                Op::Hadamard { a, b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    for j in 0..g.numel() {
                        grads[*a].data_mut()[j] += g.data()[j] * tb.data()[j];
                        grads[*b].data_mut()[j] += g.data()[j] * ta.data()[j];
                    }
                }
                Op::AbsDiff { a, b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    for j in 0..g.numel() {
                        let d = ta.data()[j] - tb.data()[j];
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        grads[*a].data_mut()[j] += g.data()[j] * s;
                        grads[*b].data_mut()[j] -= g.data()[j] * s;
                    }
                }
                Op::Relu { x } => {
                    let tx = &self.nodes[*x].value;
                    for j in 0..g.numel() {
                        if tx.data()[j] > 0.0 {
                            grads[*x].data_mut()[j] += g.data()[j];
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[id].value;
                    for j in 0..g.numel() {
                        let yj = y.data()[j];
                        grads[*x].data_mut()[j] += g.data()[j] * yj * (1.0 - yj);
                    }
                }
                Op::Tanh { x } => {
                    let y = &self.nodes[id].value;
                    for j in 0..g.numel() {
                        let yj = y.data()[j];
                        grads[*x].data_mut()[j] += g.data()[j] * (1.0 - yj * yj);
                    }
                }
                Op::Concat { parts, axis } => {
                    let rank = self.nodes[parts[0]].value.shape().len();
                    if rank == 1 || *axis == 0 {
                        let mut off = 0;
                        for &p in parts {
                            let n = self.nodes[p].value.numel();
                            for j in 0..n {
                                grads[p].data_mut()[j] += g.data()[off + j];
                            }
                            off += n;
                        }
                    } else {
                        let rows = self.nodes[parts[0]].value.rows();
                        let total_cols = g.cols();
                        let mut col_off = 0;
                        for &p in parts {
                            let c = self.nodes[p].value.cols();
                            for r in 0..rows {
                                for j in 0..c {
                                    grads[p].data_mut()[r * c + j] +=
                                        g.data()[r * total_cols + col_off + j];
                                }
                            }
                            col_off += c;
                        }
                    }
                }
                Op::Row { x, index } => {
                    let c = g.numel();
                    for j in 0..c {
                        grads[*x].data_mut()[index * c + j] += g.data()[j];
                    }
                }
                Op::Slice { x, start } => {
                    for j in 0..g.numel() {
                        grads[*x].data_mut()[start + j] += g.data()[j];
                    }
                }
                Op::StackRows { rows } => {
                    let n = self.nodes[rows[0]].value.numel();
                    for (r, &row) in rows.iter().enumerate() {
                        for j in 0..n {
                            grads[row].data_mut()[j] += g.data()[r * n + j];
                        }
                    }
                }
                Op::MaxOverTime { x, winners } => {
                    let cols = g.numel();
                    for (c, &r) in winners.iter().enumerate() {
                        grads[*x].data_mut()[r * cols + c] += g.data()[c];
                    }
                }
                Op::SoftmaxRow { x } => {
                    let y = &self.nodes[id].value;
                    let inner: f64 = g.data().iter().zip(y.data()).map(|(gj, yj)| gj * yj).sum();
                    for j in 0..g.numel() {
                        grads[*x].data_mut()[j] += y.data()[j] * (g.data()[j] - inner);
                    }
                }
                Op::CrossEntropy { scores, gold } => {
                    let gs = g.item();
                    let probs = softmax(self.nodes[*scores].value.data());
                    for j in 0..probs.numel() {
                        let indicator = if j == *gold { 1.0 } else { 0.0 };
                        grads[*scores].data_mut()[j] += gs * (probs.data()[j] - indicator);
                    }
                }
                Op::Dropout { x, mask } => {
                    for j in 0..g.numel() {
                        grads[*x].data_mut()[j] += g.data()[j] * mask[j];
                    }
                }
                Op::Sum { x } => {
                    let gs = g.item();
                    for v in grads[*x].data_mut() {
                        *v += gs;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn softmax(scores: &[f64]) -> Tensor {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Tensor::vector(exps.into_iter().map(|e| e / z).collect())
}

/// Plain cross entropy of a probability vector against a gold index.
pub fn cross_entropy(yhat: &Tensor, gold: usize) -> Result<f64> {
    if gold >= yhat.numel() {
        return Err(Error::Index(format!(
            "gold index {gold} for {} classes",
            yhat.numel()
        )));
    }
    Ok(-yhat.data()[gold].ln())
}

/// Maximum relative error between an analytic gradient and central finite
/// differences of `f`, over every coordinate of every parameter tensor.
///
/// The relative error denominator is max(1e-8, |analytic| + |numeric|).
pub fn grad_check<F>(mut f: F, params: &[Tensor], analytic: &[Tensor], step: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if step <= 0.0 {
        return Err(Error::Parameter(format!("step {step} must be positive")));
    }
    check_grad_shapes(params, analytic)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let up = f(&work);
            work[pi].data_mut()[j] = orig - step;
            let down = f(&work);
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check with a per-coordinate step-size ladder.
///
/// No single step resolves every coordinate of a deep model in 64-bit
/// arithmetic: a coordinate with an ordinary gradient needs a small step to
/// keep truncation error down, while a coordinate whose gradient is near the
/// rounding noise of the objective needs a large step so that noise, divided
/// by 2h, shrinks below the comparison floor. Along such a flat direction the
/// objective is nearly constant, so the large step costs almost no truncation
/// error in proportion to the gradient itself.
///
/// Each coordinate starts at the finest step and, while its best relative
/// error so far is 1e-7 or worse, retries at coarser steps (one rung uses
/// Richardson extrapolation for the middle scales), keeping the best rung. A
/// genuinely wrong analytic gradient disagrees with every rung, so the ladder
/// does not absorb real defects; it only removes the estimator's own noise.
/// Returns the maximum per-coordinate best error.
pub fn grad_check_adaptive<F>(mut f: F, params: &[Tensor], analytic: &[Tensor]) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    check_grad_shapes(params, analytic)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let a = grad.data()[j];
            let orig = work[pi].data()[j];
            let mut central = |h: f64, work: &mut [Tensor]| -> f64 {
                work[pi].data_mut()[j] = orig + h;
                let up = f(work);
                work[pi].data_mut()[j] = orig - h;
                let down = f(work);
                work[pi].data_mut()[j] = orig;
                (up - down) / (2.0 * h)
            };
            let mut best = relative_error(a, central(1e-5, &mut work));
            if best >= 1e-7 {
                best = best.min(relative_error(a, central(1e-3, &mut work)));
            }
            if best >= 1e-7 {
                let coarse = central(2e-2, &mut work);
                let fine = central(1e-2, &mut work);
                best = best.min(relative_error(a, (4.0 * fine - coarse) / 3.0));
            }
            if best >= 1e-7 {
                best = best.min(relative_error(a, central(1e-1, &mut work)));
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn check_grad_shapes(params: &[Tensor], analytic: &[Tensor]) -> Result<()> {
    if params.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors vs {} gradient tensors",
            params.len(),
            analytic.len()
        )));
    }
    for (grad, param) in analytic.iter().zip(params) {
        if grad.shape() != param.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} vs parameter shape {:?}",
                grad.shape(),
                param.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, data: &[f64]) -> NodeId {
        g.leaf(Tensor::vector(data.to_vec()))
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = g.leaf(Tensor::matrix(2, 2, vec![3.0, 1.0, 4.0, 1.0]).unwrap());
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 1.0, 4.0, 1.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let mut a = Tensor::zeros(vec![3, 4]);
        let mut b = Tensor::zeros(vec![4, 2]);
        a.fill_uniform(&mut rng, -1.0, 1.0);
        b.fill_uniform(&mut rng, -1.0, 1.0);

        let run = |params: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let na = g.leaf(params[0].clone());
            let nb = g.leaf(params[1].clone());
            let prod = g.matmul(na, nb).unwrap();
            let loss = g.sum(prod);
            let grads = g.backward(loss).unwrap();
            (
                g.value(loss).item(),
                vec![grads.wrt(na).clone(), grads.wrt(nb).clone()],
            )
        };
        let params = vec![a, b];
        let (_, analytic) = run(&params);
        let err = grad_check(|p| run(p).0, &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn relu_values_and_mask() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let all_neg = vec_leaf(&mut g, &[-3.0, -0.5]);
        let z = g.relu(all_neg);
        assert_eq!(g.value(z).data(), &[0.0, 0.0]);

        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        // Gradient is the indicator of x > 0; exactly zero at x == 0.
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pointwise_values() {
        let mut g = Graph::new();
        let zero = vec_leaf(&mut g, &[0.0]);
        let s = g.sigmoid(zero);
        let t = g.tanh(zero);
        assert_eq!(g.value(s).data(), &[0.5]);
        assert_eq!(g.value(t).data(), &[0.0]);

        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[3.0, 4.0]);
        let h = g.hadamard(a, b).unwrap();
        assert_eq!(g.value(h).data(), &[3.0, 8.0]);

        let d = g.abs_diff(a, a).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 0.0]);
    }

    #[test]
    fn pointwise_shape_mismatch() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[1.0]);
        assert!(g.hadamard(a, b).is_err());
        assert!(g.abs_diff(a, b).is_err());
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn pointwise_gradients_match_finite_differences() {
        let mut rng = Rng::new(17);
        let mut a = Tensor::zeros(vec![6]);
        let mut b = Tensor::zeros(vec![6]);
        // Keep away from 0 so |a-b| and relu are differentiable at the sample.
        a.fill_uniform(&mut rng, 0.2, 1.5);
        b.fill_uniform(&mut rng, -1.5, -0.2);

        let run = |params: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let na = g.leaf(params[0].clone());
            let nb = g.leaf(params[1].clone());
            let sg = g.sigmoid(na);
            let th = g.tanh(nb);
            let had = g.hadamard(sg, th).unwrap();
            let ad = g.abs_diff(na, nb).unwrap();
            let r = g.relu(nb);
            let sum1 = g.add(had, ad).unwrap();
            let sum2 = g.add(sum1, r).unwrap();
            let loss = g.sum(sum2);
            let grads = g.backward(loss).unwrap();
            (
                g.value(loss).item(),
                vec![grads.wrt(na).clone(), grads.wrt(nb).clone()],
            )
        };
        let params = vec![a, b];
        let (_, analytic) = run(&params);
        let err = grad_check(|p| run(p).0, &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn concat_values_and_backward() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[3.0]);
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);

        let single = g.concat(&[a], 0).unwrap();
        assert_eq!(g.value(single).data(), g.value(a).data());

        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(b).data(), &[1.0]);
    }

    #[test]
    fn concat_matrix_axes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let rows = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(rows).shape(), &[2, 2]);
        assert_eq!(g.value(rows).data(), &[1.0, 2.0, 3.0, 4.0]);
        let cols = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(cols).shape(), &[1, 4]);
        assert_eq!(g.value(cols).data(), &[1.0, 2.0, 3.0, 4.0]);

        let bad = g.leaf(Tensor::matrix(3, 1, vec![0.0; 3]).unwrap());
        assert!(g.concat(&[a, bad], 0).is_err());
    }

    #[test]
    fn max_over_time_single_step_is_identity() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.max_over_time(m, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn max_over_time_values_and_mask() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::matrix(2, 2, vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let y = g.max_over_time(m, None).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        // Masking the step holding the global max excludes it.
        let masked = g.max_over_time(m, Some(&[true, false])).unwrap();
        assert_eq!(g.value(masked).data(), &[3.0, 2.0]);

        let err = g.max_over_time(m, Some(&[true, true])).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn max_over_time_ties_route_to_first_step() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::matrix(2, 1, vec![5.0, 5.0]).unwrap());
        let y = g.max_over_time(m, None).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(m).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0, 0.0]);
        let y = g.softmax_row(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let a = vec_leaf(&mut g, &[1.2, -0.7, 3.0]);
        let b = vec_leaf(&mut g, &[1.2 + 100.0, -0.7 + 100.0, 3.0 + 100.0]);
        let ya = g.softmax_row(a).unwrap();
        let yb = g.softmax_row(b).unwrap();
        for (u, v) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!((u - v).abs() < 1e-12);
        }
        let total: f64 = g.value(ya).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_extreme_scores_do_not_overflow() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1000.0, 0.0]);
        let y = g.softmax_row(x).unwrap();
        let v = g.value(y).data();
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12 && v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn cross_entropy_plain_values() {
        let y = Tensor::vector(vec![0.5, 0.5]);
        assert!((cross_entropy(&y, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let certain = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(cross_entropy(&certain, 0).unwrap(), 0.0);
        assert!(cross_entropy(&y, 2).is_err());
    }

    #[test]
    fn fused_cross_entropy_matches_composition_and_finite_differences() {
        let mut rng = Rng::new(23);
        let mut scores = Tensor::zeros(vec![4]);
        scores.fill_uniform(&mut rng, -2.0, 2.0);

        // Forward agrees with -ln(softmax[gold]).
        let mut g = Graph::new();
        let s = g.leaf(scores.clone());
        let probs = g.softmax_row(s).unwrap();
        let loss = g.cross_entropy_loss(s, 2).unwrap();
        let direct = cross_entropy(g.value(probs), 2).unwrap();
        assert!((g.value(loss).item() - direct).abs() < 1e-12);

        let run = |params: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let s = g.leaf(params[0].clone());
            let loss = g.cross_entropy_loss(s, 2).unwrap();
            let grads = g.backward(loss).unwrap();
            (g.value(loss).item(), vec![grads.wrt(s).clone()])
        };
        let params = vec![scores];
        let (_, analytic) = run(&params);
        let err = grad_check(|p| run(p).0, &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn softmax_row_backward_matches_finite_differences() {
        let mut rng = Rng::new(31);
        let mut scores = Tensor::zeros(vec![5]);
        scores.fill_uniform(&mut rng, -1.0, 1.0);
        let mut weights = Tensor::zeros(vec![5]);
        weights.fill_uniform(&mut rng, -1.0, 1.0);

        let run = |params: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let s = g.leaf(params[0].clone());
            let w = g.leaf(weights.clone());
            let y = g.softmax_row(s).unwrap();
            let loss = g.dot(y, w).unwrap();
            let grads = g.backward(loss).unwrap();
            (g.value(loss).item(), vec![grads.wrt(s).clone()])
        };
        let params = vec![scores];
        let (_, analytic) = run(&params);
        let err = grad_check(|p| run(p).0, &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn dropout_identities() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, -2.0, 3.0]);
        let mut rng = Rng::new(1);
        let eval = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(eval).data(), g.value(x).data());
        let p0 = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(p0).data(), g.value(x).data());
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_and_expectation() {
        let n = 10_000;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0; n]));
        let mut rng = Rng::new(1234);
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "survivor fraction {frac}");
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "post-dropout mean {mean}");
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let draw = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![1.0; 64]));
            let mut rng = Rng::new(777);
            let y = g.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn backward_sum_is_ones_and_unreachable_is_zero() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        let unrelated = vec_leaf(&mut g, &[5.0]);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.wrt(unrelated).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        // y = x + x, dy/dx = 2.
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[3.0]);
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0]);
    }

    #[test]
    fn grad_check_quadratic_and_linear() {
        // f(t) = t^2 at t = 3: analytic gradient 6.
        let params = vec![Tensor::scalar(3.0)];
        let analytic = vec![Tensor::scalar(6.0)];
        let err = grad_check(|p| p[0].item() * p[0].item(), &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-9, "quadratic err {err}");

        // Linear functions are exact for central differences.
        let params = vec![Tensor::vector(vec![1.0, -2.0])];
        let analytic = vec![Tensor::vector(vec![4.0, 7.0])];
        let err = grad_check(
            |p| 4.0 * p[0].data()[0] + 7.0 * p[0].data()[1],
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "linear err {err}");
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let params = vec![Tensor::scalar(1.0)];
        let analytic = vec![Tensor::scalar(1.0)];
        assert!(grad_check(|p| p[0].item(), &params, &analytic, 0.0).is_err());
    }

    // Two coordinates five orders of magnitude apart: the strongly damped one
    // sits below the noise floor of a single fine step but resolves on a
    // coarser rung of the ladder.
    fn two_scale(p: &[Tensor]) -> f64 {
        p[0].data()[0].sin() + 1e-7 * p[0].data()[1].sin()
    }

    #[test]
    fn adaptive_ladder_resolves_mixed_gradient_scales() {
        let params = vec![Tensor::vector(vec![0.4, 0.9])];
        let analytic = vec![Tensor::vector(vec![
            0.4f64.cos(),
            1e-7 * 0.9f64.cos(),
        ])];
        let single = grad_check(two_scale, &params, &analytic, 1e-5).unwrap();
        assert!(single > 1e-6, "single step unexpectedly resolved: {single}");
        let laddered = grad_check_adaptive(two_scale, &params, &analytic).unwrap();
        assert!(laddered < 1e-6, "ladder err {laddered}");
    }

    #[test]
    fn adaptive_ladder_still_detects_wrong_gradients() {
        let params = vec![Tensor::vector(vec![0.4, 0.9])];
        // Tiny coordinate's claimed gradient is twice the true value: no step
        // size can make that agree.
        let analytic = vec![Tensor::vector(vec![
            0.4f64.cos(),
            2e-7 * 0.9f64.cos(),
        ])];
        let err = grad_check_adaptive(two_scale, &params, &analytic).unwrap();
        assert!(err > 0.1, "wrong gradient slipped through: {err}");
    }

    #[test]
    fn row_and_slice_backward() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let r = g.row(m, 1).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 4.0]);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(m).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let v = vec_leaf(&mut g, &[1.0, 2.0, 3.0, 4.0]);
        let s = g.slice(v, 1, 2).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 3.0]);
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(v).data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
