//! A small reverse-mode differentiation tape over dense f64 matrices.
//!
//! Nodes are evaluated eagerly at creation; `backward` is *symbolic* — it
//! appends ordinary tape nodes for every vector-Jacobian product instead of
//! writing into side buffers. Because every VJP is expressed in the same
//! closed primitive set, the output of one backward pass can itself be
//! differentiated, which the training loss needs: the force term is a
//! function of ∂E/∂r, so its parameter gradient is a second-order quantity.
//!
//! The primitive set is fixed; each primitive has a finite-difference test.
//! Piecewise-constant helpers (`in_range_mask`, `sign_mask`) carry zero
//! derivative by construction, which implements the convention that `clip`
//! and `abs` take their subgradient from the interior/sign side.

use std::sync::Arc;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn column(data: Vec<f64>) -> Tensor {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn row(data: Vec<f64>) -> Tensor {
        Tensor { rows: 1, cols: data.len(), data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }
}

pub type NodeId = usize;

// Ops record their full parameterization for Debug output even where the
// adjoint rule does not read every field back.
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Exp(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    Abs(NodeId),
    Clip(NodeId, f64, f64),
    InRangeMask(NodeId, f64, f64),
    SignMask(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    PadCols(NodeId, usize, usize),
    GatherRows(NodeId, Arc<Vec<usize>>),
    ScatterAddRows(NodeId, Arc<Vec<usize>>, usize),
    BroadcastCol(NodeId, usize),
    RowSum(NodeId),
    BroadcastRow(NodeId, usize),
    ColSum(NodeId),
    SumAll(NodeId),
    BroadcastAll(NodeId, usize, usize),
    ScaleRows(NodeId, Arc<Vec<f64>>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Differentiable input (parameters, per-edge distances).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input (geometry constants, labels).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.cols, tb.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Tensor::from_vec(m, n, out), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let (m, n) = (t.rows, t.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), Tensor::from_vec(n, m, out), rg)
    }

    fn zip_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(ta.rows, ta.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map_elementwise(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op, rg: bool) -> NodeId {
        let ta = &self.nodes[a].value;
        let value =
            Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|&x| f(x)).collect());
        self.push(op, value, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let rg = self.rg(a);
        self.map_elementwise(a, |x| x + s, Op::AddScalar(a, s), rg)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let rg = self.rg(a);
        self.map_elementwise(a, |x| x * s, Op::MulScalar(a, s), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.map_elementwise(a, f64::exp, Op::Exp(a), rg)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.map_elementwise(a, f64::sin, Op::Sin(a), rg)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.map_elementwise(a, f64::cos, Op::Cos(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.map_elementwise(a, f64::tanh, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.map_elementwise(a, sigmoid, Op::Sigmoid(a), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.map_elementwise(a, |x| x * sigmoid(x), Op::Silu(a), rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.map_elementwise(a, f64::abs, Op::Abs(a), rg)
    }

    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi);
        let rg = self.rg(a);
        self.map_elementwise(a, |x| x.clamp(lo, hi), Op::Clip(a, lo, hi), rg)
    }

    /// 1 where lo ≤ x ≤ hi else 0; piecewise constant, zero derivative.
    pub fn in_range_mask(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.map_elementwise(
            a,
            |x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
            Op::InRangeMask(a, lo, hi),
            false,
        )
    }

    /// sign(x) ∈ {−1, 0, 1}; piecewise constant, zero derivative.
    pub fn sign_mask(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(
            a,
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            Op::SignMask(a),
            false,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out[r * cols + off..r * cols + off + t.cols]
                    .copy_from_slice(t.row_slice(r));
            }
            off += t.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_vec(rows, cols, out), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let t = &self.nodes[a].value;
        assert!(start < end && end <= t.cols, "slice_cols out of range");
        let rows = t.rows;
        let w = end - start;
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w]
                .copy_from_slice(&t.data[r * t.cols + start..r * t.cols + end]);
        }
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, start, end), Tensor::from_vec(rows, w, out), rg)
    }

    /// Embed into a wider zero matrix with the input occupying columns
    /// offset..offset+cols — the adjoint of slice_cols.
    pub fn pad_cols(&mut self, a: NodeId, total_cols: usize, offset: usize) -> NodeId {
        let t = &self.nodes[a].value;
        assert!(offset + t.cols <= total_cols, "pad_cols out of range");
        let rows = t.rows;
        let mut out = vec![0.0; rows * total_cols];
        for r in 0..rows {
            out[r * total_cols + offset..r * total_cols + offset + t.cols]
                .copy_from_slice(t.row_slice(r));
        }
        let rg = self.rg(a);
        self.push(Op::PadCols(a, total_cols, offset), Tensor::from_vec(rows, total_cols, out), rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Arc<Vec<usize>>) -> NodeId {
        let t = &self.nodes[a].value;
        let cols = t.cols;
        let mut out = vec![0.0; indices.len() * cols];
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < t.rows, "gather_rows index {i} ≥ {}", t.rows);
            out[r * cols..(r + 1) * cols].copy_from_slice(t.row_slice(i));
        }
        let rows = indices.len();
        let rg = self.rg(a);
        self.push(Op::GatherRows(a, indices), Tensor::from_vec(rows, cols, out), rg)
    }

    /// out[indices[r]] += a[r]; also serves as segment-sum when `indices`
    /// are contiguous segment ids.
    pub fn scatter_add_rows(
        &mut self,
        a: NodeId,
        indices: Arc<Vec<usize>>,
        out_rows: usize,
    ) -> NodeId {
        let t = &self.nodes[a].value;
        assert_eq!(t.rows, indices.len(), "scatter_add_rows index length mismatch");
        let cols = t.cols;
        let mut out = vec![0.0; out_rows * cols];
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < out_rows, "scatter_add_rows index {i} ≥ {out_rows}");
            let src = t.row_slice(r);
            let dst = &mut out[i * cols..(i + 1) * cols];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let rg = self.rg(a);
        self.push(
            Op::ScatterAddRows(a, indices, out_rows),
            Tensor::from_vec(out_rows, cols, out),
            rg,
        )
    }

    pub fn broadcast_col(&mut self, a: NodeId, cols: usize) -> NodeId {
        let t = &self.nodes[a].value;
        assert_eq!(t.cols, 1, "broadcast_col needs an n×1 input");
        let rows = t.rows;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            out[r * cols..(r + 1) * cols].fill(t.data[r]);
        }
        let rg = self.rg(a);
        self.push(Op::BroadcastCol(a, cols), Tensor::from_vec(rows, cols, out), rg)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let out: Vec<f64> = (0..t.rows).map(|r| t.row_slice(r).iter().sum()).collect();
        let rows = t.rows;
        let rg = self.rg(a);
        self.push(Op::RowSum(a), Tensor::from_vec(rows, 1, out), rg)
    }

    pub fn broadcast_row(&mut self, a: NodeId, rows: usize) -> NodeId {
        let t = &self.nodes[a].value;
        assert_eq!(t.rows, 1, "broadcast_row needs a 1×c input");
        let cols = t.cols;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            out[r * cols..(r + 1) * cols].copy_from_slice(&t.data);
        }
        let rg = self.rg(a);
        self.push(Op::BroadcastRow(a, rows), Tensor::from_vec(rows, cols, out), rg)
    }

    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let mut out = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (o, &v) in out.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        let cols = t.cols;
        let rg = self.rg(a);
        self.push(Op::ColSum(a), Tensor::from_vec(1, cols, out), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let s: f64 = t.data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    pub fn broadcast_all(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let t = &self.nodes[a].value;
        assert_eq!((t.rows, t.cols), (1, 1), "broadcast_all needs a 1×1 input");
        let v = t.data[0];
        let rg = self.rg(a);
        self.push(Op::BroadcastAll(a, rows, cols), Tensor::from_vec(rows, cols, vec![v; rows * cols]), rg)
    }

    /// Row r scaled by the constant weight w[r]; adjoint is itself.
    pub fn scale_rows(&mut self, a: NodeId, weights: Arc<Vec<f64>>) -> NodeId {
        let t = &self.nodes[a].value;
        assert_eq!(t.rows, weights.len(), "scale_rows weight length mismatch");
        let (rows, cols) = (t.rows, t.cols);
        let mut out = t.data.clone();
        for r in 0..rows {
            let w = weights[r];
            for v in &mut out[r * cols..(r + 1) * cols] {
                *v *= w;
            }
        }
        let rg = self.rg(a);
        self.push(Op::ScaleRows(a, weights), Tensor::from_vec(rows, cols, out), rg)
    }

    /// First node (in creation order) holding a non-finite value, if any.
    pub fn first_nonfinite(&self) -> Option<(NodeId, String)> {
        for (id, n) in self.nodes.iter().enumerate() {
            if n.value.data.iter().any(|v| !v.is_finite()) {
                return Some((id, format!("{:?}", OpKind(&n.op))));
            }
        }
        None
    }

    /// Reverse-mode gradients of the scalar node `scalar` with respect to
    /// each node in `wrt`. Gradients are appended to the tape as ordinary
    /// nodes (symbolic backward), so they can be differentiated again.
    /// Returns None for a target with no differentiable path to `scalar`.
    pub fn backward(&mut self, scalar: NodeId, wrt: &[NodeId]) -> Vec<Option<NodeId>> {
        assert_eq!(
            (self.nodes[scalar].value.rows, self.nodes[scalar].value.cols),
            (1, 1),
            "backward target must be scalar"
        );

        // Which nodes can reach a requested target (following the DAG
        // downward)? Pruning here keeps the appended backward tape from
        // materializing gradients nobody asked for.
        let mut relevant = vec![false; scalar + 1];
        for &w in wrt {
            // a target created after the scalar has no path into it
            if w < relevant.len() {
                relevant[w] = true;
            }
        }
        for id in 0..=scalar {
            if relevant[id] {
                continue;
            }
            let hit = self.nodes[id].op_inputs().iter().any(|&i| relevant[i]);
            if hit {
                relevant[id] = true;
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; scalar + 1];
        let seed = self.constant(Tensor::scalar(1.0));
        grads[scalar] = Some(seed);

        for id in (0..=scalar).rev() {
            let g = match grads[id] {
                Some(g) if self.nodes[id].requires_grad && relevant[id] => g,
                _ => continue,
            };
            let op = self.nodes[id].op.clone();
            let accumulate = |tape: &mut Tape,
                                  grads: &mut Vec<Option<NodeId>>,
                                  input: NodeId,
                                  contrib: NodeId| {
                grads[input] = Some(match grads[input] {
                    None => contrib,
                    Some(old) => tape.add(old, contrib),
                });
            };
            let wants =
                |tape: &Tape, input: NodeId| tape.nodes[input].requires_grad && relevant[input];

            match op {
                Op::Leaf | Op::Const | Op::InRangeMask(..) | Op::SignMask(_) => {}
                Op::MatMul(a, b) => {
                    if wants(self, a) {
                        let bt = self.transpose(b);
                        let c = self.matmul(g, bt);
                        accumulate(self, &mut grads, a, c);
                    }
                    if wants(self, b) {
                        let at = self.transpose(a);
                        let c = self.matmul(at, g);
                        accumulate(self, &mut grads, b, c);
                    }
                }
                Op::Transpose(a) => {
                    if wants(self, a) {
                        let c = self.transpose(g);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::Add(a, b) => {
                    if wants(self, a) {
                        accumulate(self, &mut grads, a, g);
                    }
                    if wants(self, b) {
                        accumulate(self, &mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(self, a) {
                        accumulate(self, &mut grads, a, g);
                    }
                    if wants(self, b) {
                        let c = self.mul_scalar(g, -1.0);
                        accumulate(self, &mut grads, b, c);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(self, a) {
                        let c = self.mul(g, b);
                        accumulate(self, &mut grads, a, c);
                    }
                    if wants(self, b) {
                        let c = self.mul(g, a);
                        accumulate(self, &mut grads, b, c);
                    }
                }
                Op::AddScalar(a, _) => {
                    if wants(self, a) {
                        accumulate(self, &mut grads, a, g);
                    }
                }
                Op::MulScalar(a, s) => {
                    if wants(self, a) {
                        let c = self.mul_scalar(g, s);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::Exp(a) => {
                    if wants(self, a) {
                        let c = self.mul(g, id);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::Sin(a) => {
                    if wants(self, a) {
                        let ca = self.cos(a);
                        let c = self.mul(g, ca);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::Cos(a) => {
                    if wants(self, a) {
                        let sa = self.sin(a);
                        let nsa = self.mul_scalar(sa, -1.0);
                        let c = self.mul(g, nsa);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::Tanh(a) => {
                    if wants(self, a) {
                        // 1 − tanh²(a), reusing this node's own output
                        let t2 = self.mul(id, id);
                        let neg = self.mul_scalar(t2, -1.0);
                        let deriv = self.add_scalar(neg, 1.0);
                        let c = self.mul(g, deriv);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::Sigmoid(a) => {
                    if wants(self, a) {
                        // σ(1−σ), reusing this node's own output
                        let neg = self.mul_scalar(id, -1.0);
                        let om = self.add_scalar(neg, 1.0);
                        let deriv = self.mul(id, om);
                        let c = self.mul(g, deriv);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::Silu(a) => {
                    if wants(self, a) {
                        // σ(a)·(1 + a·(1−σ(a)))
                        let s = self.sigmoid(a);
                        let negs = self.mul_scalar(s, -1.0);
                        let oms = self.add_scalar(negs, 1.0);
                        let a_oms = self.mul(a, oms);
                        let inner = self.add_scalar(a_oms, 1.0);
                        let deriv = self.mul(s, inner);
                        let c = self.mul(g, deriv);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::Abs(a) => {
                    if wants(self, a) {
                        let m = self.sign_mask(a);
                        let c = self.mul(g, m);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::Clip(a, lo, hi) => {
                    if wants(self, a) {
                        let m = self.in_range_mask(a, lo, hi);
                        let c = self.mul(g, m);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in &parts {
                        let w = self.nodes[p].value.cols;
                        if wants(self, p) {
                            let c = self.slice_cols(g, off, off + w);
                            accumulate(self, &mut grads, p, c);
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    if wants(self, a) {
                        let total = self.nodes[a].value.cols;
                        let c = self.pad_cols(g, total, start);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::PadCols(a, _total, offset) => {
                    if wants(self, a) {
                        let w = self.nodes[a].value.cols;
                        let c = self.slice_cols(g, offset, offset + w);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::GatherRows(a, idx) => {
                    if wants(self, a) {
                        let rows = self.nodes[a].value.rows;
                        let c = self.scatter_add_rows(g, idx, rows);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::ScatterAddRows(a, idx, _out_rows) => {
                    if wants(self, a) {
                        let c = self.gather_rows(g, idx);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::BroadcastCol(a, _) => {
                    if wants(self, a) {
                        let c = self.row_sum(g);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::RowSum(a) => {
                    if wants(self, a) {
                        let cols = self.nodes[a].value.cols;
                        let c = self.broadcast_col(g, cols);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::BroadcastRow(a, _) => {
                    if wants(self, a) {
                        let c = self.col_sum(g);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::ColSum(a) => {
                    if wants(self, a) {
                        let rows = self.nodes[a].value.rows;
                        let c = self.broadcast_row(g, rows);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::SumAll(a) => {
                    if wants(self, a) {
                        let (r, cl) = {
                            let t = &self.nodes[a].value;
                            (t.rows, t.cols)
                        };
                        let c = self.broadcast_all(g, r, cl);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::BroadcastAll(a, _, _) => {
                    if wants(self, a) {
                        let c = self.sum_all(g);
                        accumulate(self, &mut grads, a, c);
                    }
                }
                Op::ScaleRows(a, w) => {
                    if wants(self, a) {
                        let c = self.scale_rows(g, w);
                        accumulate(self, &mut grads, a, c);
                    }
                }
            }
        }

        wrt.iter().map(|&w| grads.get(w).copied().flatten()).collect()
    }
}

impl Node {
    fn op_inputs(&self) -> Vec<NodeId> {
        match &self.op {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Exp(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Abs(a)
            | Op::Clip(a, _, _)
            | Op::InRangeMask(a, _, _)
            | Op::SignMask(a)
            | Op::SliceCols(a, _, _)
            | Op::PadCols(a, _, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _, _)
            | Op::BroadcastCol(a, _)
            | Op::RowSum(a)
            | Op::BroadcastRow(a, _)
            | Op::ColSum(a)
            | Op::SumAll(a)
            | Op::BroadcastAll(a, _, _)
            | Op::ScaleRows(a, _) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

/// Debug label without dumping index vectors.
struct OpKind<'a>(&'a Op);

impl std::fmt::Debug for OpKind<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self.0 {
            Op::Leaf => "Leaf",
            Op::Const => "Const",
            Op::MatMul(..) => "MatMul",
            Op::Transpose(_) => "Transpose",
            Op::Add(..) => "Add",
            Op::Sub(..) => "Sub",
            Op::Mul(..) => "Mul",
            Op::AddScalar(..) => "AddScalar",
            Op::MulScalar(..) => "MulScalar",
            Op::Exp(_) => "Exp",
            Op::Sin(_) => "Sin",
            Op::Cos(_) => "Cos",
            Op::Tanh(_) => "Tanh",
            Op::Sigmoid(_) => "Sigmoid",
            Op::Silu(_) => "Silu",
            Op::Abs(_) => "Abs",
            Op::Clip(..) => "Clip",
            Op::InRangeMask(..) => "InRangeMask",
            Op::SignMask(_) => "SignMask",
            Op::ConcatCols(_) => "ConcatCols",
            Op::SliceCols(..) => "SliceCols",
            Op::PadCols(..) => "PadCols",
            Op::GatherRows(..) => "GatherRows",
            Op::ScatterAddRows(..) => "ScatterAddRows",
            Op::BroadcastCol(..) => "BroadcastCol",
            Op::RowSum(_) => "RowSum",
            Op::BroadcastRow(..) => "BroadcastRow",
            Op::ColSum(_) => "ColSum",
            Op::SumAll(_) => "SumAll",
            Op::BroadcastAll(..) => "BroadcastAll",
            Op::ScaleRows(..) => "ScaleRows",
        };
        f.write_str(name)
    }
}
