//! Reverse-mode automatic differentiation on a growable tape.
//!
//! Operations evaluate eagerly and append a node to the [`Tape`]. A backward
//! pass emits its vector-Jacobian products as ordinary tape nodes built from
//! the same primitive set, so gradients are themselves differentiable and a
//! second backward pass through them yields exact second-order gradients.
//! Everything higher level (activations, softmax, layer norm, losses) is a
//! composite of the primitives defined here and inherits that property.
//!
//! All values are dense `f64` matrices. Vectors are `1×n` or `n×1`, scalars
//! are `1×1`. Shape errors panic: they are programming errors, not inputs.

use std::sync::Arc;

use ndarray::{Array2, Zip};

/// Dense matrix of f64, the only value type on the tape.
pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a * x + b elementwise; only the slope matters to the backward pass.
    Affine(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    SumAll(NodeId),
    /// (1,n) -> (m,n)
    BroadcastRows(NodeId),
    /// (m,1) -> (m,n)
    BroadcastCols(NodeId),
    GatherRows(NodeId, Arc<[usize]>),
    /// Scatter-add rows of x into a zero matrix.
    ScatterRows(NodeId, Arc<[usize]>),
    /// Rows [start, start+len) of x; the op stores only the start, the
    /// extent is recoverable from the node shapes.
    SliceRows(NodeId, usize),
    /// Embed x at row offset `start` of a zero matrix.
    PutRows(NodeId, usize),
    SliceCols(NodeId, usize),
    PutCols(NodeId, usize),
    /// Identity forward; backward multiplies the gradient by -lambda.
    GradReverse(NodeId, f64),
}

impl Op {
    fn parents(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Mul(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Affine(x, _)
            | Transpose(x)
            | Exp(x)
            | Ln(x)
            | Recip(x)
            | Sqrt(x)
            | Tanh(x)
            | SumRows(x)
            | SumCols(x)
            | SumAll(x)
            | BroadcastRows(x)
            | BroadcastCols(x)
            | GatherRows(x, _)
            | ScatterRows(x, _)
            | SliceRows(x, _)
            | PutRows(x, _)
            | SliceCols(x, _)
            | PutCols(x, _)
            | GradReverse(x, _) => [Some(x), None],
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients from one backward pass: node id of the gradient of the root
/// with respect to each node that required grad, as tape nodes.
pub struct Grads {
    g: Vec<Option<NodeId>>,
}

impl Grads {
    /// Gradient node of the backward root with respect to `id`, if any.
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.g.get(id.idx()).copied().flatten()
    }
}

/// Recording tape. Cleared and rebuilt every optimization step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.idx()].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on node of shape {:?}", v.dim());
        v[(0, 0)]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => false,
            ref op => op
                .parents()
                .iter()
                .flatten()
                .any(|p| self.nodes[p.idx()].requires_grad),
        };
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(u32::try_from(self.nodes.len()).expect("tape overflow"));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    // ---- leaves ------------------------------------------------------

    /// Differentiable leaf (a parameter injected for this step).
    pub fn param(&mut self, value: Mat) -> NodeId {
        self.push_with(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Mat::from_elem((1, 1), v))
    }

    /// New constant leaf holding a copy of `id`'s current value.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    // ---- primitives ---------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bin_broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bin_broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// a*x + b with scalar constants a, b.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let v = self.value(x).mapv(|e| a * e + b);
        self.push(v, Op::Affine(x, a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul inner dims {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let v = va.dot(vb);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::ln);
        self.push(v, Op::Ln(x))
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::recip);
        self.push(v, Op::Recip(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let mut out = Mat::zeros((1, v.ncols()));
        for row in v.rows() {
            Zip::from(out.row_mut(0)).and(&row).for_each(|o, &e| *o += e);
        }
        self.push(out, Op::SumRows(x))
    }

    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let mut out = Mat::zeros((v.nrows(), 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            out[(i, 0)] = row.sum();
        }
        self.push(out, Op::SumCols(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Mat::from_elem((1, 1), s), Op::SumAll(x))
    }

    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.nrows(), 1, "broadcast_rows needs a 1×n input");
        let out = v
            .broadcast((rows, v.ncols()))
            .expect("broadcast_rows")
            .to_owned();
        self.push(out, Op::BroadcastRows(x))
    }

    pub fn broadcast_cols(&mut self, x: NodeId, cols: usize) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.ncols(), 1, "broadcast_cols needs an n×1 input");
        let mut out = Mat::zeros((v.nrows(), cols));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.fill(v[(i, 0)]);
        }
        self.push(out, Op::BroadcastCols(x))
    }

    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> NodeId {
        let v = self.value(x);
        let mut out = Mat::zeros((ids.len(), v.ncols()));
        for (i, &r) in ids.iter().enumerate() {
            out.row_mut(i).assign(&v.row(r));
        }
        self.push(out, Op::GatherRows(x, ids.into()))
    }

    /// Scatter-add the rows of `x` into row positions `ids` of an otherwise
    /// zero matrix with `rows` rows. Duplicate ids accumulate.
    pub fn scatter_rows(&mut self, x: NodeId, ids: &[usize], rows: usize) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.nrows(), ids.len(), "scatter_rows id count");
        let mut out = Mat::zeros((rows, v.ncols()));
        for (i, &r) in ids.iter().enumerate() {
            let src = v.row(i);
            Zip::from(out.row_mut(r)).and(&src).for_each(|o, &e| *o += e);
        }
        self.push(out, Op::ScatterRows(x, ids.into()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x);
        let out = v.slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(x, start))
    }

    pub fn put_rows(&mut self, x: NodeId, start: usize, total: usize) -> NodeId {
        let v = self.value(x);
        let mut out = Mat::zeros((total, v.ncols()));
        out.slice_mut(ndarray::s![start..start + v.nrows(), ..])
            .assign(v);
        self.push(out, Op::PutRows(x, start))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x);
        let out = v.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn put_cols(&mut self, x: NodeId, start: usize, total: usize) -> NodeId {
        let v = self.value(x);
        let mut out = Mat::zeros((v.nrows(), total));
        out.slice_mut(ndarray::s![.., start..start + v.ncols()])
            .assign(v);
        self.push(out, Op::PutCols(x, start))
    }

    /// Identity on the forward pass; scales the backward gradient by
    /// `-lambda`.
    pub fn grad_reverse(&mut self, x: NodeId, lambda: f64) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::GradReverse(x, lambda))
    }

    // ---- composites ----------------------------------------------------

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, c, 0.0)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, 1.0, c)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.mul(x, x)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Broadcast any of (1,n), (m,1), (1,1) to (rows, cols).
    pub fn broadcast_to(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let (r, c) = self.value(x).dim();
        let mut cur = x;
        if c == 1 && cols > 1 {
            cur = self.broadcast_cols(cur, cols);
        }
        if r == 1 && rows > 1 {
            cur = self.broadcast_rows(cur, rows);
        }
        assert_eq!(self.value(cur).dim(), (rows, cols), "broadcast_to");
        cur
    }

    /// Row-wise softmax with the usual detached max-subtraction; subtracting
    /// a per-row constant leaves the value and all derivatives unchanged.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.value(x).dim();
        let m = self.row_max_const(x);
        let mb = self.broadcast_cols(m, cols);
        let shifted = self.sub(x, mb);
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let inv = self.recip(s);
        let invb = self.broadcast_cols(inv, cols);
        let out = self.mul(e, invb);
        debug_assert_eq!(self.value(out).dim(), (rows, cols));
        out
    }

    /// Row-wise log-softmax (same detached-max stabilization).
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let cols = self.value(x).ncols();
        let m = self.row_max_const(x);
        let mb = self.broadcast_cols(m, cols);
        let shifted = self.sub(x, mb);
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let ls = self.ln(s);
        let lsb = self.broadcast_cols(ls, cols);
        self.sub(shifted, lsb)
    }

    fn row_max_const(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let mut m = Mat::zeros((v.nrows(), 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            m[(i, 0)] = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        self.constant(m)
    }

    /// GELU (tanh approximation), built from primitives so second-order
    /// gradients flow through it.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        const C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C2: f64 = 0.044_715;
        let x2 = self.mul(x, x);
        let x3 = self.mul(x2, x);
        let x3s = self.scale(x3, C2);
        let inner = self.add(x, x3s);
        let u = self.scale(inner, C1);
        let t = self.tanh(u);
        let one_plus = self.add_scalar(t, 1.0);
        let half_x = self.scale(x, 0.5);
        self.mul(half_x, one_plus)
    }

    /// Inverted dropout: zero with probability `p`, otherwise scale by
    /// 1/(1-p). The mask is a constant, so gradients route through the
    /// surviving entries only.
    pub fn dropout<R: rand::Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} not in [0,1)");
        if p == 0.0 {
            return x;
        }
        let (rows, cols) = self.value(x).dim();
        let keep = 1.0 - p;
        let mut mask = Mat::zeros((rows, cols));
        for e in mask.iter_mut() {
            *e = if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            };
        }
        let m = self.constant(mask);
        self.mul(x, m)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar root. Gradient nodes are appended to the
    /// tape, so they can participate in further computation and be
    /// differentiated again.
    pub fn backward(&mut self, root: NodeId) -> Grads {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let n = root.idx() + 1;
        let mut reachable = vec![false; n];
        reachable[root.idx()] = true;
        for i in (0..n).rev() {
            if !reachable[i] {
                continue;
            }
            for p in self.nodes[i].op.parents().into_iter().flatten() {
                if self.nodes[p.idx()].requires_grad {
                    reachable[p.idx()] = true;
                }
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        grads[root.idx()] = Some(self.scalar_const(1.0));

        for i in (0..n).rev() {
            if !reachable[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let out_id = NodeId(i as u32);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for p in [a, b] {
                        if self.nodes[p.idx()].requires_grad {
                            let shape = self.value(p).dim();
                            let contrib = self.reduce_to(g, shape);
                            self.accumulate(&mut grads, p, contrib);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.idx()].requires_grad {
                        let gb = self.mul(g, b);
                        let shape = self.value(a).dim();
                        let contrib = self.reduce_to(gb, shape);
                        self.accumulate(&mut grads, a, contrib);
                    }
                    if self.nodes[b.idx()].requires_grad {
                        let ga = self.mul(g, a);
                        let shape = self.value(b).dim();
                        let contrib = self.reduce_to(ga, shape);
                        self.accumulate(&mut grads, b, contrib);
                    }
                }
                Op::Affine(x, a) => {
                    let contrib = self.scale(g, a);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.idx()].requires_grad {
                        let bt = self.transpose(b);
                        let contrib = self.matmul(g, bt);
                        self.accumulate(&mut grads, a, contrib);
                    }
                    if self.nodes[b.idx()].requires_grad {
                        let at = self.transpose(a);
                        let contrib = self.matmul(at, g);
                        self.accumulate(&mut grads, b, contrib);
                    }
                }
                Op::Transpose(x) => {
                    let contrib = self.transpose(g);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::Exp(x) => {
                    let contrib = self.mul(g, out_id);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::Ln(x) => {
                    let r = self.recip(x);
                    let contrib = self.mul(g, r);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::Recip(x) => {
                    // d(1/x) = -y^2
                    let y2 = self.mul(out_id, out_id);
                    let neg = self.neg(y2);
                    let contrib = self.mul(g, neg);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::Sqrt(x) => {
                    // d(sqrt x) = 0.5 / y
                    let r = self.recip(out_id);
                    let half = self.scale(r, 0.5);
                    let contrib = self.mul(g, half);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::Tanh(x) => {
                    // 1 - y^2
                    let y2 = self.mul(out_id, out_id);
                    let d = self.affine(y2, -1.0, 1.0);
                    let contrib = self.mul(g, d);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::SumRows(x) => {
                    let rows = self.value(x).nrows();
                    let contrib = self.broadcast_rows(g, rows);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::SumCols(x) => {
                    let cols = self.value(x).ncols();
                    let contrib = self.broadcast_cols(g, cols);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::SumAll(x) => {
                    let (rows, cols) = self.value(x).dim();
                    let contrib = self.broadcast_to(g, rows, cols);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::BroadcastRows(x) => {
                    let contrib = self.sum_rows(g);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::BroadcastCols(x) => {
                    let contrib = self.sum_cols(g);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::GatherRows(x, ids) => {
                    let rows = self.value(x).nrows();
                    let contrib = self.scatter_rows(g, &ids, rows);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::ScatterRows(x, ids) => {
                    let contrib = self.gather_rows(g, &ids);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::SliceRows(x, start) => {
                    let total = self.value(x).nrows();
                    let contrib = self.put_rows(g, start, total);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::PutRows(x, start) => {
                    let len = self.value(x).nrows();
                    let contrib = self.slice_rows(g, start, len);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::SliceCols(x, start) => {
                    let total = self.value(x).ncols();
                    let contrib = self.put_cols(g, start, total);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::PutCols(x, start) => {
                    let len = self.value(x).ncols();
                    let contrib = self.slice_cols(g, start, len);
                    self.accumulate(&mut grads, x, contrib);
                }
                Op::GradReverse(x, lambda) => {
                    let contrib = self.scale(g, -lambda);
                    self.accumulate(&mut grads, x, contrib);
                }
            }
        }
        Grads { g: grads }
    }

    fn accumulate(&mut self, grads: &mut [Option<NodeId>], p: NodeId, contrib: NodeId) {
        if !self.nodes[p.idx()].requires_grad {
            return;
        }
        grads[p.idx()] = Some(match grads[p.idx()] {
            None => contrib,
            Some(existing) => self.add(existing, contrib),
        });
    }

    /// Sum-reduce `g` down to `shape` (inverse of implicit broadcasting).
    fn reduce_to(&mut self, g: NodeId, shape: (usize, usize)) -> NodeId {
        let (gr, gc) = self.value(g).dim();
        let (r, c) = shape;
        let mut cur = g;
        if r == 1 && gr > 1 {
            cur = self.sum_rows(cur);
        }
        if c == 1 && gc > 1 {
            cur = self.sum_cols(cur);
        }
        assert_eq!(self.value(cur).dim(), shape, "reduce_to");
        cur
    }
}

fn bin_broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let rows = ra.max(rb);
    let cols = ca.max(cb);
    assert!(
        (ra == rows || ra == 1) && (rb == rows || rb == 1),
        "incompatible row dims {:?} vs {:?}",
        a.dim(),
        b.dim()
    );
    assert!(
        (ca == cols || ca == 1) && (cb == cols || cb == 1),
        "incompatible col dims {:?} vs {:?}",
        a.dim(),
        b.dim()
    );
    let av = a.broadcast((rows, cols)).expect("broadcast lhs");
    let bv = b.broadcast((rows, cols)).expect("broadcast rhs");
    let mut out = Mat::zeros((rows, cols));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randmat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        use rand::Rng;
        Mat::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences of a scalar-valued closure over leaf
    /// parameter matrices.
    fn finite_diff<F>(params: &[Mat], f: F, h: f64) -> Vec<Mat>
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut out = Vec::new();
        for pi in 0..params.len() {
            let mut g = Mat::zeros(params[pi].dim());
            for idx in 0..params[pi].len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Mat> = params.to_vec();
                    perturbed[pi].as_slice_mut().unwrap()[idx] += delta;
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> =
                        perturbed.iter().map(|m| tape.param(m.clone())).collect();
                    let root = f(&mut tape, &ids);
                    tape.scalar(root)
                };
                let plus = eval(h);
                let minus = eval(-h);
                g.as_slice_mut().unwrap()[idx] = (plus - minus) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn check_grads<F>(params: &[Mat], f: F, tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId + Copy,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|m| tape.param(m.clone())).collect();
        let root = f(&mut tape, &ids);
        let grads = tape.backward(root);
        let fd = finite_diff(params, f, 1e-5);
        for (i, id) in ids.iter().enumerate() {
            let g = grads.get(*id).expect("missing grad");
            let ad = tape.value(g);
            for (a, b) in ad.iter().zip(fd[i].iter()) {
                let denom = a.abs().max(b.abs()).max(1e-4);
                assert!(
                    (a - b).abs() / denom < tol,
                    "param {i}: autodiff {a} vs fd {b}"
                );
            }
        }
    }

    #[test]
    fn first_order_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = randmat(&mut rng, 3, 4);
        let x = randmat(&mut rng, 2, 3);
        let b = randmat(&mut rng, 1, 4);
        check_grads(&[w, x, b], |t, ids| {
            let h = t.matmul(ids[1], ids[0]);
            let hb = t.add(h, ids[2]);
            let a = t.gelu(hb);
            let p = t.softmax_rows(a);
            let lp = t.ln(p);
            let m = t.mul(p, lp);
            let s = t.sum_all(m);
            t.neg(s)
        }, 1e-6);
    }

    #[test]
    fn first_order_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let table = randmat(&mut rng, 5, 3);
        let w = randmat(&mut rng, 3, 3);
        check_grads(&[table, w], |t, ids| {
            let e = t.gather_rows(ids[0], &[0, 2, 2, 4]);
            let h = t.matmul(e, ids[1]);
            let part = t.slice_cols(h, 1, 2);
            let emb = t.put_cols(part, 0, 3);
            let row = t.slice_rows(emb, 1, 2);
            let back = t.put_rows(row, 0, 4);
            let sq = t.mul(back, back);
            let t1 = t.transpose(sq);
            let sc = t.scatter_rows(t1, &[1, 0, 1], 2);
            t.sum_all(sc)
        }, 1e-6);
    }

    #[test]
    fn first_order_norm_like_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randmat(&mut rng, 3, 4);
        check_grads(&[x], |t, ids| {
            let x = ids[0];
            let mean = t.sum_cols(x);
            let mean = t.scale(mean, 0.25);
            let mb = t.broadcast_cols(mean, 4);
            let xc = t.sub(x, mb);
            let var = t.mul(xc, xc);
            let var = t.sum_cols(var);
            let var = t.affine(var, 0.25, 1e-5);
            let istd = t.sqrt(var);
            let istd = t.recip(istd);
            let ib = t.broadcast_cols(istd, 4);
            let n = t.mul(xc, ib);
            let th = t.tanh(n);
            t.sum_all(th)
        }, 1e-6);
    }

    /// Second order: h(theta) = sum of squared first-order gradients. The
    /// analytic gradient of h requires differentiating through backward().
    #[test]
    fn second_order_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = randmat(&mut rng, 3, 3);
        let x0 = randmat(&mut rng, 2, 3);

        // h(w) = sum_i (d f / d xhat_i)^2 where f = sum(tanh(xhat w)^2),
        // xhat an intermediate depending on w as well.
        let build = |t: &mut Tape, ids: &[NodeId]| -> NodeId {
            let w = ids[0];
            let x = ids[1];
            let xh = t.matmul(x, w); // intermediate requiring grad
            let th = t.tanh(xh);
            let sq = t.mul(th, th);
            let f = t.sum_all(sq);
            let grads = t.backward(f);
            let gx = grads.get(xh).unwrap();
            let g2 = t.mul(gx, gx);
            t.sum_all(g2)
        };

        let mut tape = Tape::new();
        let ids = vec![tape.param(w.clone()), tape.param(x0.clone())];
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);
        let fd = finite_diff(&[w, x0], build, 1e-5);
        for (i, id) in ids.iter().enumerate() {
            let g = grads.get(*id).expect("missing second-order grad");
            let ad = tape.value(g);
            for (a, b) in ad.iter().zip(fd[i].iter()) {
                let denom = a.abs().max(b.abs()).max(1e-4);
                assert!(
                    (a - b).abs() / denom < 1e-5,
                    "param {i}: second-order autodiff {a} vs fd {b}"
                );
            }
        }
    }

    #[test]
    fn second_order_through_softmax_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = randmat(&mut rng, 4, 2);
        let x0 = randmat(&mut rng, 1, 4);
        let onehot = Mat::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();

        let build = move |t: &mut Tape, ids: &[NodeId]| -> NodeId {
            let w = ids[0];
            let x = ids[1];
            let h = t.tanh(x); // pretend hidden state
            let logits = t.matmul(h, w);
            let ls = t.log_softmax_rows(logits);
            let oh = t.constant(onehot.clone());
            let picked = t.mul(ls, oh);
            let s = t.sum_all(picked);
            let loss = t.neg(s);
            // grad-of-loss wrt h, then penalize its square (mask-loss shape)
            let grads = t.backward(loss);
            let gh = grads.get(h).unwrap();
            let gxh = t.mul(gh, h);
            let sq = t.mul(gxh, gxh);
            t.sum_all(sq)
        };

        let mut tape = Tape::new();
        let ids = vec![tape.param(w.clone()), tape.param(x0.clone())];
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);
        let fd = finite_diff(&[w, x0], build, 1e-5);
        for (i, id) in ids.iter().enumerate() {
            let g = grads.get(*id).expect("missing grad");
            let ad = tape.value(g);
            for (a, b) in ad.iter().zip(fd[i].iter()) {
                let denom = a.abs().max(b.abs()).max(1e-4);
                assert!(
                    (a - b).abs() / denom < 1e-5,
                    "param {i}: autodiff {a} vs fd {b}"
                );
            }
        }
    }

    #[test]
    fn grad_reverse_is_identity_forward_negation_backward() {
        let mut tape = Tape::new();
        let x = Mat::from_shape_vec((1, 2), vec![1.5, -2.0]).unwrap();
        let p = tape.param(x.clone());
        let r = tape.grad_reverse(p, 0.7);
        assert_eq!(tape.value(r), &x);
        let s = tape.sum_all(r);
        let grads = tape.backward(s);
        let g = grads.get(p).unwrap();
        assert_eq!(tape.value(g), &Mat::from_elem((1, 2), -0.7));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.constant(randmat(&mut rng, 4, 6));
        let p = tape.softmax_rows(x);
        for row in tape.value(p).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.param(randmat(&mut rng, 3, 3));
        let d = tape.dropout(x, 0.0, &mut rng);
        assert_eq!(d, x);
    }

    #[test]
    fn masked_softmax_routes_no_probability_to_masked_keys() {
        let mut tape = Tape::new();
        let scores = tape.constant(Mat::from_shape_vec((1, 3), vec![0.3, 0.1, 5.0]).unwrap());
        let bias = tape.constant(Mat::from_shape_vec((1, 3), vec![0.0, 0.0, -1e30]).unwrap());
        let masked = tape.add(scores, bias);
        let p = tape.softmax_rows(masked);
        let v = tape.value(p);
        assert_eq!(v[(0, 2)], 0.0);
        assert!((v[(0, 0)] + v[(0, 1)] - 1.0).abs() < 1e-12);
    }
}
