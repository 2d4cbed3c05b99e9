//! Reverse-mode differentiation over dense real matrices.
//!
//! The engine records a fixed catalog of primitives onto a tape. The network
//! architecture is static, so a tape is built once per worker and then reused:
//! `set_leaf` + `forward` replay the computation into preallocated buffers
//! without touching the allocator, and `backward` fills per-node adjoints.
//!
//! Shape mismatches are programmer errors, not recoverable conditions, so the
//! recording methods panic with the op name and the offending shapes.

use crate::matrix::{Matrix, SparseSym};

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    /// Elementwise product.
    Mul(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    Neg(usize),
    /// Sum of all entries, producing a 1x1 value.
    Sum(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    /// Elementwise sqrt(a^2 + b^2).
    Hypot(usize, usize),
    Sigmoid(usize),
    Relu(usize),
    Tanh(usize),
    /// Extended logarithm with max slope s (see the loss module).
    ExtLog(usize, f64),
    /// One application of a registered sparse symmetric matrix.
    SparseApply(usize, usize),
}

pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    sparse: Vec<SparseSym>,
    grads_ready: bool,
}

/// Extended logarithm: log(u) for u >= 1/s, linear continuation of slope s
/// below the knot. Continuous with continuous derivative min(1/u, s).
pub fn extended_log(u: f64, s: f64) -> f64 {
    debug_assert!(s > 0.0);
    if u >= 1.0 / s {
        u.ln()
    } else {
        s * u - 1.0 - s.ln()
    }
}

/// Derivative of [`extended_log`]: min(1/u, s) on u > 0, and s for u <= 0.
pub fn extended_log_deriv(u: f64, s: f64) -> f64 {
    if u >= 1.0 / s {
        1.0 / u
    } else {
        s
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), values: Vec::new(), grads: Vec::new(), sparse: Vec::new(), grads_ready: false }
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    /// Registers a sparse matrix for use with [`Tape::sparse_apply`].
    pub fn register_sparse(&mut self, m: SparseSym) -> usize {
        self.sparse.push(m);
        self.sparse.len() - 1
    }

    pub fn leaf(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Leaf, Matrix::zeros(rows, cols))
    }

    pub fn leaf_from(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Leaf, m)
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Const, m)
    }

    pub fn constant_scalar(&mut self, x: f64) -> NodeId {
        self.constant(Matrix::scalar(x))
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        self.grads_ready = false;
        NodeId(self.ops.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.values[id.0].shape()
    }

    fn require_same(&self, op: &str, a: NodeId, b: NodeId) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.require_same("add", a, b);
        let v = self.values[a.0].clone();
        let n = self.push(Op::Add(a.0, b.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.require_same("sub", a, b);
        let v = self.values[a.0].clone();
        let n = self.push(Op::Sub(a.0, b.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.require_same("mul", a, b);
        let v = self.values[a.0].clone();
        let n = self.push(Op::Mul(a.0, b.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, rb, "matmul: shape mismatch ({ra}, {ca}) x ({rb}, {cb})");
        let n = self.push(Op::MatMul(a.0, b.0), Matrix::zeros(ra, cb));
        self.eval_node(n.0);
        n
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.values[a.0].clone();
        let n = self.push(Op::Scale(a.0, c), v);
        self.eval_node(n.0);
        n
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].clone();
        let n = self.push(Op::Neg(a.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let n = self.push(Op::Sum(a.0), Matrix::zeros(1, 1));
        self.eval_node(n.0);
        n
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].clone();
        let n = self.push(Op::Sin(a.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].clone();
        let n = self.push(Op::Cos(a.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].clone();
        let n = self.push(Op::Square(a.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn hypot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.require_same("hypot", a, b);
        let v = self.values[a.0].clone();
        let n = self.push(Op::Hypot(a.0, b.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].clone();
        let n = self.push(Op::Sigmoid(a.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].clone();
        let n = self.push(Op::Relu(a.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].clone();
        let n = self.push(Op::Tanh(a.0), v);
        self.eval_node(n.0);
        n
    }

    pub fn extlog(&mut self, a: NodeId, s: f64) -> NodeId {
        assert!(s > 0.0, "extlog: slope must be positive, got {s}");
        let v = self.values[a.0].clone();
        let n = self.push(Op::ExtLog(a.0, s), v);
        self.eval_node(n.0);
        n
    }

    pub fn sparse_apply(&mut self, mat: usize, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(
            self.sparse[mat].n(),
            r,
            "sparse_apply: matrix of dimension {} applied to ({r}, {c})",
            self.sparse[mat].n()
        );
        let n = self.push(Op::SparseApply(mat, a.0), Matrix::zeros(r, c));
        self.eval_node(n.0);
        n
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.values[id.0];
        assert_eq!(v.shape(), (1, 1), "scalar_value on non-scalar node");
        v.data()[0]
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> &Matrix {
        assert!(self.grads_ready, "grad read before backward");
        &self.grads[id.0]
    }

    pub fn set_leaf(&mut self, id: NodeId, data: &[f64]) {
        assert!(matches!(self.ops[id.0], Op::Leaf), "set_leaf on non-leaf node");
        let v = &mut self.values[id.0];
        assert_eq!(v.data().len(), data.len(), "set_leaf: length mismatch");
        v.data_mut().copy_from_slice(data);
        self.grads_ready = false;
    }

    pub fn leaf_data_mut(&mut self, id: NodeId) -> &mut [f64] {
        assert!(matches!(self.ops[id.0], Op::Leaf), "leaf_data_mut on non-leaf node");
        self.grads_ready = false;
        self.values[id.0].data_mut()
    }

    /// Recomputes every non-leaf value in recording order. Allocation-free.
    pub fn forward(&mut self) {
        for i in 0..self.ops.len() {
            self.eval_node(i);
        }
        self.grads_ready = false;
    }

    fn eval_node(&mut self, i: usize) {
        let op = self.ops[i].clone();
        let (before, rest) = self.values.split_at_mut(i);
        let out = &mut rest[0];
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                for ((o, &x), &y) in out.data_mut().iter_mut().zip(before[a].data()).zip(before[b].data()) {
                    *o = x + y;
                }
            }
            Op::Sub(a, b) => {
                for ((o, &x), &y) in out.data_mut().iter_mut().zip(before[a].data()).zip(before[b].data()) {
                    *o = x - y;
                }
            }
            Op::Mul(a, b) => {
                for ((o, &x), &y) in out.data_mut().iter_mut().zip(before[a].data()).zip(before[b].data()) {
                    *o = x * y;
                }
            }
            Op::MatMul(a, b) => before[a].matmul_into(&before[b], out),
            Op::Scale(a, c) => {
                for (o, &x) in out.data_mut().iter_mut().zip(before[a].data()) {
                    *o = c * x;
                }
            }
            Op::Neg(a) => {
                for (o, &x) in out.data_mut().iter_mut().zip(before[a].data()) {
                    *o = -x;
                }
            }
            Op::Sum(a) => {
                out.data_mut()[0] = before[a].data().iter().sum();
            }
            Op::Sin(a) => {
                for (o, &x) in out.data_mut().iter_mut().zip(before[a].data()) {
                    *o = x.sin();
                }
            }
            Op::Cos(a) => {
                for (o, &x) in out.data_mut().iter_mut().zip(before[a].data()) {
                    *o = x.cos();
                }
            }
            Op::Square(a) => {
                for (o, &x) in out.data_mut().iter_mut().zip(before[a].data()) {
                    *o = x * x;
                }
            }
            Op::Hypot(a, b) => {
                for ((o, &x), &y) in out.data_mut().iter_mut().zip(before[a].data()).zip(before[b].data()) {
                    *o = (x * x + y * y).sqrt();
                }
            }
            Op::Sigmoid(a) => {
                for (o, &x) in out.data_mut().iter_mut().zip(before[a].data()) {
                    *o = 1.0 / (1.0 + (-x).exp());
                }
            }
            Op::Relu(a) => {
                for (o, &x) in out.data_mut().iter_mut().zip(before[a].data()) {
                    *o = if x > 0.0 { x } else { 0.0 };
                }
            }
            Op::Tanh(a) => {
                for (o, &x) in out.data_mut().iter_mut().zip(before[a].data()) {
                    *o = x.tanh();
                }
            }
            Op::ExtLog(a, s) => {
                for (o, &x) in out.data_mut().iter_mut().zip(before[a].data()) {
                    *o = extended_log(x, s);
                }
            }
            Op::SparseApply(m, a) => self.sparse[m].apply_into(&before[a], out),
        }
    }

    /// Reverse pass from a scalar root. Leaves unreachable from the root get
    /// zero gradient. Deterministic: same tape, same values, same gradients.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be 1x1, got {:?}", self.shape(root));
        self.backward_seeded(root, &[1.0]);
    }

    /// Reverse sweep from `root` with an arbitrary adjoint seed, giving the
    /// gradient of `seed . root` with respect to every node. Rows of a
    /// Jacobian come from seeding unit vectors.
    pub fn backward_seeded(&mut self, root: NodeId, seed: &[f64]) {
        if self.grads.len() != self.values.len() {
            self.grads = self.values.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect();
        } else {
            for g in &mut self.grads {
                g.fill(0.0);
            }
        }
        assert_eq!(
            self.grads[root.0].data().len(),
            seed.len(),
            "backward_seeded: seed length mismatch"
        );
        self.grads[root.0].data_mut().copy_from_slice(seed);
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            let (gleft, gright) = self.grads.split_at_mut(i);
            let g = &gright[0];
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            match op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    if a == b {
                        for (d, &gi) in gleft[a].data_mut().iter_mut().zip(g.data()) {
                            *d += 2.0 * gi;
                        }
                    } else {
                        let (x, y) = two_mut(gleft, a, b);
                        for ((da, db), &gi) in x.data_mut().iter_mut().zip(y.data_mut().iter_mut()).zip(g.data()) {
                            *da += gi;
                            *db += gi;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if a == b {
                        // d(a - a) = 0; gradients cancel.
                    } else {
                        let (x, y) = two_mut(gleft, a, b);
                        for ((da, db), &gi) in x.data_mut().iter_mut().zip(y.data_mut().iter_mut()).zip(g.data()) {
                            *da += gi;
                            *db -= gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if a == b {
                        let va = self.values[a].data();
                        for ((d, &gi), &x) in gleft[a].data_mut().iter_mut().zip(g.data()).zip(va) {
                            *d += 2.0 * gi * x;
                        }
                    } else {
                        let va = self.values[a].data();
                        let vb = self.values[b].data();
                        let (x, y) = two_mut(gleft, a, b);
                        for (((da, db), &gi), (&xa, &xb)) in x
                            .data_mut()
                            .iter_mut()
                            .zip(y.data_mut().iter_mut())
                            .zip(g.data())
                            .zip(va.iter().zip(vb))
                        {
                            *da += gi * xb;
                            *db += gi * xa;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    // C = A B; dA += G B^T, dB += A^T G.
                    let (n, m) = g.shape();
                    let k = self.values[a].cols();
                    {
                        let da = gleft[a].data_mut();
                        let vb = self.values[b].data();
                        for i2 in 0..n {
                            for p in 0..k {
                                let mut acc = 0.0;
                                let grow = &g.data()[i2 * m..(i2 + 1) * m];
                                let brow = &vb[p * m..(p + 1) * m];
                                for (gi, bi) in grow.iter().zip(brow) {
                                    acc += gi * bi;
                                }
                                da[i2 * k + p] += acc;
                            }
                        }
                    }
                    if a != b {
                        let db = gleft[b].data_mut();
                        let va = self.values[a].data();
                        for p in 0..k {
                            for i2 in 0..n {
                                let aval = va[i2 * k + p];
                                if aval == 0.0 {
                                    continue;
                                }
                                let grow = &g.data()[i2 * m..(i2 + 1) * m];
                                let dbrow = &mut db[p * m..(p + 1) * m];
                                for (d, gi) in dbrow.iter_mut().zip(grow) {
                                    *d += aval * gi;
                                }
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    for (d, &gi) in gleft[a].data_mut().iter_mut().zip(g.data()) {
                        *d += c * gi;
                    }
                }
                Op::Neg(a) => {
                    for (d, &gi) in gleft[a].data_mut().iter_mut().zip(g.data()) {
                        *d -= gi;
                    }
                }
                Op::Sum(a) => {
                    let gi = g.data()[0];
                    for d in gleft[a].data_mut() {
                        *d += gi;
                    }
                }
                Op::Sin(a) => {
                    let va = self.values[a].data();
                    for ((d, &gi), &x) in gleft[a].data_mut().iter_mut().zip(g.data()).zip(va) {
                        *d += gi * x.cos();
                    }
                }
                Op::Cos(a) => {
                    let va = self.values[a].data();
                    for ((d, &gi), &x) in gleft[a].data_mut().iter_mut().zip(g.data()).zip(va) {
                        *d -= gi * x.sin();
                    }
                }
                Op::Square(a) => {
                    let va = self.values[a].data();
                    for ((d, &gi), &x) in gleft[a].data_mut().iter_mut().zip(g.data()).zip(va) {
                        *d += 2.0 * gi * x;
                    }
                }
                Op::Hypot(a, b) => {
                    // d sqrt(a^2+b^2) = (a, b)/h; subgradient 0 at h = 0.
                    let h = self.values[i].data();
                    if a == b {
                        let va = self.values[a].data();
                        for (((d, &gi), &x), &hv) in
                            gleft[a].data_mut().iter_mut().zip(g.data()).zip(va).zip(h)
                        {
                            if hv != 0.0 {
                                *d += 2.0 * gi * x / hv;
                            }
                        }
                    } else {
                        let va = self.values[a].data();
                        let vb = self.values[b].data();
                        let (x, y) = two_mut(gleft, a, b);
                        for ((((da, db), &gi), (&xa, &xb)), &hv) in x
                            .data_mut()
                            .iter_mut()
                            .zip(y.data_mut().iter_mut())
                            .zip(g.data())
                            .zip(va.iter().zip(vb))
                            .zip(h)
                        {
                            if hv != 0.0 {
                                *da += gi * xa / hv;
                                *db += gi * xb / hv;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.values[i].data();
                    for ((d, &gi), &s) in gleft[a].data_mut().iter_mut().zip(g.data()).zip(y) {
                        *d += gi * s * (1.0 - s);
                    }
                }
                Op::Relu(a) => {
                    let va = self.values[a].data();
                    for ((d, &gi), &x) in gleft[a].data_mut().iter_mut().zip(g.data()).zip(va) {
                        if x > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = self.values[i].data();
                    for ((d, &gi), &t) in gleft[a].data_mut().iter_mut().zip(g.data()).zip(y) {
                        *d += gi * (1.0 - t * t);
                    }
                }
                Op::ExtLog(a, s) => {
                    let va = self.values[a].data();
                    for ((d, &gi), &u) in gleft[a].data_mut().iter_mut().zip(g.data()).zip(va) {
                        *d += gi * extended_log_deriv(u, s);
                    }
                }
                Op::SparseApply(m, a) => {
                    // A is symmetric, so the adjoint is another application.
                    let mut tmp = Matrix::zeros(g.rows(), g.cols());
                    self.sparse[m].apply_into(g, &mut tmp);
                    for (d, &t) in gleft[a].data_mut().iter_mut().zip(tmp.data()) {
                        *d += t;
                    }
                }
            }
        }
        self.grads_ready = true;
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn two_mut(slice: &mut [Matrix], a: usize, b: usize) -> (&mut Matrix, &mut Matrix) {
    assert_ne!(a, b);
    if a < b {
        let (l, r) = slice.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = slice.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}

/// Compares the analytic gradient of `root` at the tape's current leaf values
/// against central finite differences, returning the worst relative
/// discrepancy |analytic - numeric| / max(1, |analytic|).
///
/// The current point must keep a margin of more than 10h from relu kinks and
/// extended-log knots; central differences straddling a kink measure the
/// average slope, not the one-sided derivative the tape reports.
pub fn finite_difference_check(tape: &mut Tape, root: NodeId, leaves: &[NodeId], h: f64) -> f64 {
    tape.forward();
    tape.backward(root);
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&l| tape.grad(l).data().to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (li, &leaf) in leaves.iter().enumerate() {
        for c in 0..analytic[li].len() {
            let orig = tape.value(leaf).data()[c];
            tape.leaf_data_mut(leaf)[c] = orig + h;
            tape.forward();
            let f_plus = tape.scalar_value(root);
            tape.leaf_data_mut(leaf)[c] = orig - h;
            tape.forward();
            let f_minus = tape.scalar_value(root);
            tape.leaf_data_mut(leaf)[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[li][c];
            let disc = (a - numeric).abs() / a.abs().max(1.0);
            if disc > worst {
                worst = disc;
            }
        }
    }
    tape.forward();
    worst
}
