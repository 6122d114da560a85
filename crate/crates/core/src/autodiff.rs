//! Tape-based reverse-mode automatic differentiation over flat f32 buffers.
//!
//! A [`Tape`] records every differentiable op performed during a forward
//! pass and replays the records in reverse to accumulate gradients. Tapes
//! are rebuilt per forward pass (define-by-run). Persistent parameters live
//! in a [`ParamStore`]; each forward pass leases them onto the tape as leaf
//! nodes and [`Tape::accumulate_param_grads`] scatters leaf gradients back
//! after `backward`.
//!
//! [`Tape::detach`] is the gradient boundary that makes layer-wise training
//! local: it copies values into a fresh leaf with no history, so a backward
//! pass started downstream can never reach producers upstream of the cut.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

/// Index into a [`ParamStore`].
pub type ParamId = usize;

/// A persistent trainable parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub values: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
}

/// Owns all trainable parameters of a network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, shape: Vec<usize>, values: Vec<f32>) -> ParamId {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        let n = values.len();
        self.params.push(Param {
            values,
            grad: vec![0.0; n],
            shape,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
}

/// Saved geometry of a conv2d application.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) enum Op {
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f32 },
    Sum { x: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// y[r, f] = x[r, f] + bias[f]
    AddRow { x: usize, bias: usize },
    Reshape { x: usize },
    LeakyRelu { x: usize, slope: f32 },
    /// Mask already folds in the 1/(1-rate) survivor scale.
    Dropout { x: usize, mask: Vec<f32> },
    Conv2d { x: usize, w: usize, b: usize, dims: ConvDims },
    MaxPool { x: usize, argmax: Vec<u32> },
    AvgPool { x: usize, window: usize, stride: usize },
    AdaptiveAvgPool { x: usize, out_h: usize, out_w: usize },
    /// mean/invstd are the statistics actually used to normalize
    /// (batch stats in train mode, running stats in eval mode).
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f32>, invstd: Vec<f32>, train: bool },
    /// y[n,g] = x[n,f] · w[g,f]ᵀ + b[g]
    Linear { x: usize, w: usize, b: usize, n: usize, f: usize, g: usize },
    SoftmaxXent { logits: usize, probs: Vec<f32>, labels: Vec<u32> },
    /// target is the dense one-hot label matrix.
    FrobOnehot { logits: usize, probs: Vec<f32>, target: Vec<f32> },
}

struct Record {
    op: Op,
    out: usize,
}

/// Define-by-run gradient tape.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) node_values: Vec<Vec<f32>>,
    pub(crate) node_grads: Vec<Option<Vec<f32>>>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push_node(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f32>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Tensor {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "buffer length must equal product of shape extents"
        );
        self.nodes.push(Node {
            shape,
            requires_grad,
            param,
        });
        self.node_values.push(values);
        self.node_grads.push(None);
        Tensor(self.nodes.len() - 1)
    }

    /// Record `op -> out` if any input requires grad; otherwise drop it.
    pub(crate) fn record(&mut self, op: Op, out: Tensor) {
        if self.nodes[out.0].requires_grad {
            self.records.push(Record { op, out: out.0 });
        }
    }

    pub(crate) fn any_requires_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, values: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        self.push_node(shape, values, requires_grad, None)
    }

    /// Lease a persistent parameter onto the tape. Frozen params join the
    /// graph as constants: no ops through them are recorded for gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Tensor {
        let p = store.get(id);
        self.push_node(
            p.shape.clone(),
            p.values.clone(),
            trainable,
            trainable.then_some(id),
        )
    }

    /// Copy values into a fresh leaf with no tape history.
    pub fn detach(&mut self, x: Tensor) -> Tensor {
        let values = self.node_values[x.0].clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push_node(shape, values, false, None)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: Tensor) -> &[f32] {
        &self.node_values[t.0]
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f32]> {
        self.node_grads[t.0].as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn grad_buf(&mut self, id: usize) -> &mut Vec<f32> {
        let n = self.node_values[id].len();
        self.node_grads[id].get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn accumulate(&mut self, id: usize, delta: &[f32]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let g = self.grad_buf(id);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    // ---- basic ops ---------------------------------------------------

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let values: Vec<f32> = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires_grad(&[a.0, b.0]);
        let out = self.push_node(shape, values, rg, None);
        self.record(Op::Add { a: a.0, b: b.0 }, out);
        Ok(out)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let values: Vec<f32> = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires_grad(&[a.0, b.0]);
        let out = self.push_node(shape, values, rg, None);
        self.record(Op::Mul { a: a.0, b: b.0 }, out);
        Ok(out)
    }

    pub fn scale(&mut self, x: Tensor, c: f32) -> Tensor {
        let values: Vec<f32> = self.values(x).iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push_node(shape, values, rg, None);
        self.record(Op::Scale { x: x.0, c }, out);
        out
    }

    /// Sum all elements to a scalar of shape `[1]`.
    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let s: f32 = self.values(x).iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push_node(vec![1], vec![s], rg, None);
        self.record(Op::Sum { x: x.0 }, out);
        out
    }

    /// `a [m,k] × b [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} × {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut values = vec![0.0; m * n];
        gemm_nn(m, k, n, self.values(a), self.values(b), &mut values);
        let rg = self.any_requires_grad(&[a.0, b.0]);
        let out = self.push_node(vec![m, n], values, rg, None);
        self.record(Op::MatMul { a: a.0, b: b.0, m, k, n }, out);
        Ok(out)
    }

    /// Bias-style trailing-dimension broadcast: `x[.., f] + bias[f]`.
    pub fn add_row(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias);
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("{sx:?} + {sb:?}"),
            });
        }
        let f = sb[0];
        let bv = self.values(bias).to_vec();
        let values: Vec<f32> = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % f])
            .collect();
        let rg = self.any_requires_grad(&[x.0, bias.0]);
        let out = self.push_node(sx, values, rg, None);
        self.record(Op::AddRow { x: x.0, bias: bias.0 }, out);
        Ok(out)
    }

    pub fn reshape(&mut self, x: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let old: usize = self.shape(x).iter().product();
        let new: usize = shape.iter().product();
        if old != new {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let values = self.values(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.push_node(shape, values, rg, None);
        self.record(Op::Reshape { x: x.0 }, out);
        Ok(out)
    }

    // ---- backward ----------------------------------------------------

    /// Accumulate `∂loss/∂node` into every reachable requires-grad node.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.node_values[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.accumulate(loss.0, &[1.0]);
        for r in (0..self.records.len()).rev() {
            let out = self.records[r].out;
            let Some(out_grad) = self.node_grads[out].clone() else {
                continue;
            };
            // Ops before the seed node cannot have produced it twice; ops
            // after it simply see no output gradient and are skipped above.
            let op = std::mem::replace(&mut self.records[r].op, Op::Sum { x: out });
            self.backward_op(&op, out, &out_grad);
            self.records[r].op = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op, out: usize, og: &[f32]) {
        match op {
            Op::Add { a, b } => {
                self.accumulate(*a, og);
                self.accumulate(*b, og);
            }
            Op::Mul { a, b } => {
                let da: Vec<f32> = og.iter().zip(&self.node_values[*b]).map(|(g, v)| g * v).collect();
                let db: Vec<f32> = og.iter().zip(&self.node_values[*a]).map(|(g, v)| g * v).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f32> = og.iter().map(|g| g * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::Sum { x } => {
                let n = self.node_values[*x].len();
                self.accumulate(*x, &vec![og[0]; n]);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, og, &self.node_values[*b], &mut da);
                    self.accumulate(*a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, &self.node_values[*a], og, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::AddRow { x, bias } => {
                self.accumulate(*x, og);
                if self.nodes[*bias].requires_grad {
                    let f = self.node_values[*bias].len();
                    let mut db = vec![0.0; f];
                    for (i, g) in og.iter().enumerate() {
                        db[i % f] += g;
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Reshape { x } => {
                self.accumulate(*x, og);
            }
            other => crate::nn::backward_nn_op(self, other, out, og),
        }
    }

    /// Scatter gradients of leased parameter leaves back into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, self.node_grads[i].as_ref()) {
                let p = store.get_mut(pid);
                for (pg, gi) in p.grad.iter_mut().zip(g) {
                    *pg += gi;
                }
            }
        }
    }
}

// ---- flat gemm kernels ----------------------------------------------

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            crow[j] += acc;
        }
    }
}

/// c[m,n] += a[k,m]ᵀ · b[k,n]
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_elementwise() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], vec![2], false);
        let b = t.leaf(vec![3.0, 4.0], vec![2], false);
        let y = t.add(a, b).unwrap();
        assert_eq!(t.values(y), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.leaf(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![3, 3],
            false,
        );
        let x = t.leaf((0..12).map(|v| v as f32 * 0.5 - 2.0).collect(), vec![3, 4], false);
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.values(y), t.values(x));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, crate::rng::StreamTag::Data, 0);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let ta = t.leaf(a.clone(), vec![m, k], false);
        let tb = t.leaf(b.clone(), vec![k, n], false);
        let y = t.matmul(ta, tb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for l in 0..k {
                    acc += a[i * k + l] as f64 * b[l * n + j] as f64;
                }
                let got = t.values(y)[i * n + j] as f64;
                assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![5.0, -1.0, 2.0], vec![3], true);
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3], true);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true);
        assert!(matches!(
            t.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn detach_preserves_values_and_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.5, -2.5], vec![2], true);
        let y = t.mul(x, x).unwrap();
        let d = t.detach(y);
        assert_eq!(t.values(d), t.values(y));
        assert!(!t.requires_grad(d));
        let w = t.leaf(vec![2.0, 2.0], vec![2], true);
        let z = t.mul(d, w).unwrap();
        let l = t.sum(z);
        t.backward(l).unwrap();
        assert!(t.grad(x).is_none());
        assert!(t.grad(y).is_none());
        assert_eq!(t.grad(w).unwrap(), t.values(d));
    }

    #[test]
    fn scaled_loss_scales_gradients_exactly() {
        // Power-of-two factor so the scaling is exact in f32.
        let mut t = Tape::new();
        let x = t.leaf(vec![0.3, -1.7, 2.2], vec![3], true);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        let l4 = t.scale(l, 4.0);
        t.backward(l4).unwrap();
        let g4 = t.grad(x).unwrap().to_vec();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(vec![0.3, -1.7, 2.2], vec![3], true);
        let sq2 = t2.mul(x2, x2).unwrap();
        let l2 = t2.sum(sq2);
        t2.backward(l2).unwrap();
        let g1 = t2.grad(x2).unwrap();
        for (a, b) in g4.iter().zip(g1) {
            assert_eq!(*a, 4.0 * b);
        }
    }

    #[test]
    fn param_grads_accumulate_into_store() {
        let mut store = ParamStore::new();
        let pid = store.add(vec![2], vec![1.0, 2.0]);
        let mut t = Tape::new();
        let p = t.param(&store, pid, true);
        let sq = t.mul(p, p).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        t.accumulate_param_grads(&mut store);
        assert_eq!(store.get(pid).grad, vec![2.0, 4.0]);
        // Second harvest adds again (explicit zeroing is the caller's job).
        t.accumulate_param_grads(&mut store);
        assert_eq!(store.get(pid).grad, vec![4.0, 8.0]);
        store.zero_grads();
        assert_eq!(store.get(pid).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn frozen_param_receives_no_grad() {
        let mut store = ParamStore::new();
        let pid = store.add(vec![2], vec![1.0, 2.0]);
        let mut t = Tape::new();
        let p = t.param(&store, pid, false);
        let w = t.leaf(vec![3.0, 3.0], vec![2], true);
        let y = t.mul(p, w).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        t.accumulate_param_grads(&mut store);
        assert_eq!(store.get(pid).grad, vec![0.0, 0.0]);
        assert!(t.grad(w).is_some());
    }
}
