//! Tape-based reverse-mode autodiff over 2-d arrays.
//!
//! Every training path in the crate builds a fresh tape per example, calls
//! ops that append nodes, then runs backward() from a scalar loss. Nodes are
//! created in topological order (parents always precede children), so the
//! backward sweep is a single reverse pass; gradient accumulation order is
//! fixed by node order, which keeps runs bit-for-bit reproducible.
//!
//! The op set is deliberately small: just what a pre-LN transformer with
//! adapters, tied heads and the various losses needs. Parameters enter as
//! shared leaves (Rc, no copy); everything else is owned by the tape.

use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::scalar::Scalar;

pub type Mat<F> = Array2<F>;
/// Attention mask: true = may attend. Shared by reference since many nodes
/// in one tape reuse the same mask.
pub type MaskMat = Array2<bool>;

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

enum Value<F: Scalar> {
    Owned(Mat<F>),
    Shared(Rc<Mat<F>>),
}

impl<F: Scalar> Value<F> {
    fn get(&self) -> &Mat<F> {
        match self {
            Value::Owned(m) => m,
            Value::Shared(m) => m,
        }
    }
}

enum Op<F: Scalar> {
    Leaf,
    /// C = op(A) . op(B) with optional transposes.
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    /// A + bias, bias is 1 x n broadcast over rows.
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: F },
    /// A + c * B.
    AddScaled { a: NodeId, b: NodeId, c: F },
    /// A * s where s is a 1x1 node (adapter gate).
    MulScalar { a: NodeId, s: NodeId },
    Gelu { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, xhat: Mat<F>, inv_std: Vec<F> },
    /// Row softmax with a boolean mask; fully-denied rows produce all zeros.
    MaskedSoftmax { a: NodeId },
    /// Row r of output = table[ids[r]]. Duplicate ids accumulate gradient.
    GatherRows { table: NodeId, ids: Vec<usize> },
    /// Copy of base with some rows replaced by 1 x d nodes. Gradient for a
    /// replaced row flows to the replacement, not to base.
    OverrideRows { base: NodeId, rows: Vec<(usize, NodeId)> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize },
    /// Rows scaled to unit L2 norm; near-zero rows fall back to e1 and get
    /// zero gradient.
    L2NormalizeRows { a: NodeId, norms: Vec<F>, fallback: Vec<bool> },
    /// Scalar: mean over rows of -log softmax(logits)[row, target[row]].
    MeanCrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Mat<F> },
    /// Scalar: mean over rows of KL(target row || probs row). `probs` must
    /// already be a probability matrix (e.g. a MaskedSoftmax output).
    KlDivRows { target: Rc<Mat<F>>, probs: NodeId },
    /// Scalar: sum of c_i * v_i over 1x1 nodes.
    WeightedSum { parts: Vec<(NodeId, F)> },
}

struct Node<F: Scalar> {
    value: Value<F>,
    op: Op<F>,
    grad: Option<Mat<F>>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat<F> {
        self.nodes[id.0].value.get()
    }

    /// Gradient of the last backward() root w.r.t. this node, if it received any.
    pub fn grad(&self, id: NodeId) -> Option<&Mat<F>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar_value on non-1x1 node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value: Value::Owned(value), op, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn shared(&mut self, value: Rc<Mat<F>>) -> NodeId {
        self.nodes.push(Node { value: Value::Shared(value), op: Op::Leaf, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    // ─── forward ops ───

    fn mm(&self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Mat<F> {
        let av = self.value(a);
        let bv = self.value(b);
        match (ta, tb) {
            (false, false) => av.dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, false) => av.t().dot(bv),
            (true, true) => av.t().dot(&bv.t()),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.mm(a, b, false, false);
        self.push(v, Op::Matmul { a, b, ta: false, tb: false })
    }

    /// A . B^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.mm(a, b, false, true);
        self.push(v, Op::Matmul { a, b, ta: false, tb: true })
    }

    /// A^T . B
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.mm(a, b, true, false);
        self.push(v, Op::Matmul { a, b, ta: true, tb: false })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add { a, b })
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let bv = self.value(bias);
        assert_eq!(bv.nrows(), 1, "add_bias: bias must be 1 x n");
        assert_eq!(self.value(a).ncols(), bv.ncols(), "add_bias: width mismatch");
        let v = self.value(a) + &self.value(bias).row(0);
        self.push(v, Op::AddBias { a, bias })
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale { a, c })
    }

    /// a + c * b
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: F) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add_scaled: shape mismatch");
        let v = self.value(a) + &self.value(b).mapv(|x| x * c);
        self.push(v, Op::AddScaled { a, b, c })
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_value(s);
        let v = self.value(a).mapv(|x| x * sv);
        self.push(v, Op::MulScalar { a, s })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let k = F::from_f64(GELU_K);
        let c = F::from_f64(GELU_C);
        let half = F::from_f64(0.5);
        let one = F::one();
        let v = self.value(a).mapv(|x| {
            let t = (k * (x + c * x * x * x)).tanh();
            half * x * (one + t)
        });
        self.push(v, Op::Gelu { a })
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        assert_eq!(self.value(gain).dim(), (1, cols), "layer_norm: gain shape");
        assert_eq!(self.value(bias).dim(), (1, cols), "layer_norm: bias shape");
        let eps = F::from_f64(LN_EPS);
        let n = F::from_f64(cols as f64);
        let mut xhat = Mat::<F>::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.sum() / n;
            let mut var = F::zero();
            for &v in row.iter() {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / n;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for c in 0..cols {
                xhat[(r, c)] = (x[(r, c)] - mean) * is;
            }
        }
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let mut out = xhat.clone();
        for r in 0..rows {
            for c in 0..cols {
                out[(r, c)] = out[(r, c)] * g[c] + b[c];
            }
        }
        self.push(out, Op::LayerNorm { a, gain, bias, xhat, inv_std })
    }

    pub fn masked_softmax(&mut self, a: NodeId, mask: Rc<MaskMat>) -> NodeId {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        assert_eq!(mask.dim(), (rows, cols), "masked_softmax: mask shape");
        let mut out = Mat::<F>::zeros((rows, cols));
        for r in 0..rows {
            let mut mx = F::neg_infinity();
            for c in 0..cols {
                if mask[(r, c)] && x[(r, c)] > mx {
                    mx = x[(r, c)];
                }
            }
            if mx == F::neg_infinity() {
                continue; // fully denied row stays zero
            }
            let mut sum = F::zero();
            for c in 0..cols {
                if mask[(r, c)] {
                    let e = (x[(r, c)] - mx).exp();
                    out[(r, c)] = e;
                    sum = sum + e;
                }
            }
            for c in 0..cols {
                out[(r, c)] = out[(r, c)] / sum;
            }
        }
        self.push(out, Op::MaskedSoftmax { a })
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let cols = t.ncols();
        let mut v = Mat::<F>::zeros((ids.len(), cols));
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < t.nrows(), "gather_rows: id {} out of range {}", id, t.nrows());
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::GatherRows { table, ids: ids.to_vec() })
    }

    pub fn override_rows(&mut self, base: NodeId, rows: &[(usize, NodeId)]) -> NodeId {
        let mut v = self.value(base).clone();
        for &(pos, node) in rows {
            let rv = self.value(node);
            assert_eq!(rv.dim(), (1, v.ncols()), "override_rows: row shape");
            assert!(pos < v.nrows(), "override_rows: position out of range");
            v.row_mut(pos).assign(&rv.row(0));
        }
        self.push(v, Op::OverrideRows { base, rows: rows.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Mat::<F>::zeros((total, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), cols, "concat_rows: width mismatch");
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(v, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.nrows(), "slice_rows: out of range");
        let v = av.slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { a, start })
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> NodeId {
        self.slice_rows(a, r, 1)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty");
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Mat::<F>::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows, "concat_cols: height mismatch");
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.ncols(), "slice_cols: out of range");
        let v = av.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { a, start })
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let tiny = F::from_f64(1e-12);
        let mut v = Mat::<F>::zeros((rows, cols));
        let mut norms = Vec::with_capacity(rows);
        let mut fallback = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut s = F::zero();
            for c in 0..cols {
                s = s + x[(r, c)] * x[(r, c)];
            }
            let n = s.sqrt();
            if n < tiny {
                v[(r, 0)] = F::one(); // unit basis fallback for a zero row
                norms.push(F::one());
                fallback.push(true);
            } else {
                for c in 0..cols {
                    v[(r, c)] = x[(r, c)] / n;
                }
                norms.push(n);
                fallback.push(false);
            }
        }
        self.push(v, Op::L2NormalizeRows { a, norms, fallback })
    }

    /// Whether any row of an L2NormalizeRows node hit the zero-norm fallback.
    pub fn l2_fallback_hit(&self, id: NodeId) -> bool {
        match &self.nodes[id.0].op {
            Op::L2NormalizeRows { fallback, .. } => fallback.iter().any(|&f| f),
            _ => false,
        }
    }

    pub fn mean_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let x = self.value(logits);
        let (rows, cols) = x.dim();
        assert_eq!(rows, targets.len(), "mean_cross_entropy: target count");
        assert!(rows > 0, "mean_cross_entropy: empty batch");
        let mut probs = Mat::<F>::zeros((rows, cols));
        let mut loss = F::zero();
        for r in 0..rows {
            assert!(targets[r] < cols, "mean_cross_entropy: target out of range");
            let row = x.row(r);
            let mut mx = F::neg_infinity();
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = F::zero();
            for c in 0..cols {
                let e = (x[(r, c)] - mx).exp();
                probs[(r, c)] = e;
                sum = sum + e;
            }
            for c in 0..cols {
                probs[(r, c)] = probs[(r, c)] / sum;
            }
            loss = loss - probs[(r, targets[r])].ln();
        }
        loss = loss / F::from_f64(rows as f64);
        let v = Mat::from_elem((1, 1), loss);
        self.push(v, Op::MeanCrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    pub fn kl_div_rows(&mut self, target: Rc<Mat<F>>, probs: NodeId) -> NodeId {
        let p = self.value(probs);
        assert_eq!(p.dim(), target.dim(), "kl_div_rows: shape mismatch");
        let rows = p.nrows();
        let tiny = F::from_f64(1e-30);
        let mut loss = F::zero();
        for r in 0..rows {
            for c in 0..p.ncols() {
                let t = target[(r, c)];
                if t > F::zero() {
                    let pc = p[(r, c)].max(tiny);
                    loss = loss + t * (t.ln() - pc.ln());
                }
            }
        }
        loss = loss / F::from_f64(rows as f64);
        let v = Mat::from_elem((1, 1), loss);
        self.push(v, Op::KlDivRows { target, probs })
    }

    pub fn weighted_sum(&mut self, parts: &[(NodeId, F)]) -> NodeId {
        let mut s = F::zero();
        for &(id, c) in parts {
            s = s + self.scalar_value(id) * c;
        }
        let v = Mat::from_elem((1, 1), s);
        self.push(v, Op::WeightedSum { parts: parts.to_vec() })
    }

    // ─── backward ───

    fn acc(&mut self, id: NodeId, delta: Mat<F>) {
        debug_assert_eq!(self.value(id).dim(), delta.dim(), "grad shape mismatch");
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from `root` (normally a 1x1 loss). Seeds with ones.
    pub fn backward(&mut self, root: NodeId) {
        let dim = self.value(root).dim();
        self.nodes[root.0].grad = Some(Mat::ones(dim));
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.step_back(&op, &g, NodeId(i));
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
    }

    fn step_back(&mut self, op: &Op<F>, g: &Mat<F>, out: NodeId) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                // d(A_eff) = G . B_eff^T, d(B_eff) = A_eff^T . G, then undo
                // the transposes on the way out.
                let da_eff_t = |t: &Tape<F>| -> Mat<F> {
                    let bv = t.value(b);
                    if tb { g.dot(bv) } else { g.dot(&bv.t()) }
                };
                let da_eff = da_eff_t(self);
                let da = if ta { da_eff.t().to_owned() } else { da_eff };
                self.acc(a, da);
                let db_eff = {
                    let av = self.value(a);
                    if ta { av.dot(g) } else { av.t().dot(g) }
                };
                let db = if tb { db_eff.t().to_owned() } else { db_eff };
                self.acc(b, db);
            }
            Op::Add { a, b } => {
                self.acc(*a, g.clone());
                self.acc(*b, g.clone());
            }
            Op::AddBias { a, bias } => {
                self.acc(*a, g.clone());
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(*bias, db);
            }
            Op::Scale { a, c } => {
                self.acc(*a, g.mapv(|x| x * *c));
            }
            Op::AddScaled { a, b, c } => {
                self.acc(*a, g.clone());
                self.acc(*b, g.mapv(|x| x * *c));
            }
            Op::MulScalar { a, s } => {
                let sv = self.scalar_value(*s);
                self.acc(*a, g.mapv(|x| x * sv));
                let av = self.value(*a);
                let ds = (g * av).sum();
                self.acc(*s, Mat::from_elem((1, 1), ds));
            }
            Op::Gelu { a } => {
                let k = F::from_f64(GELU_K);
                let c = F::from_f64(GELU_C);
                let half = F::from_f64(0.5);
                let one = F::one();
                let three = F::from_f64(3.0);
                let x = self.value(*a);
                let mut da = g.clone();
                for (d, &xv) in da.iter_mut().zip(x.iter()) {
                    let u = k * (xv + c * xv * xv * xv);
                    let t = u.tanh();
                    let du = k * (one + three * c * xv * xv);
                    let gp = half * (one + t) + half * xv * (one - t * t) * du;
                    *d = *d * gp;
                }
                self.acc(*a, da);
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let (rows, cols) = xhat.dim();
                let n = F::from_f64(cols as f64);
                let gv = self.value(*gain).row(0).to_owned();
                // param grads
                let mut dg = Mat::<F>::zeros((1, cols));
                let mut db = Mat::<F>::zeros((1, cols));
                for r in 0..rows {
                    for c in 0..cols {
                        dg[(0, c)] = dg[(0, c)] + g[(r, c)] * xhat[(r, c)];
                        db[(0, c)] = db[(0, c)] + g[(r, c)];
                    }
                }
                // input grad, rowwise
                let mut da = Mat::<F>::zeros((rows, cols));
                for r in 0..rows {
                    let mut sum_dx = F::zero();
                    let mut sum_dx_xh = F::zero();
                    for c in 0..cols {
                        let dxh = g[(r, c)] * gv[c];
                        sum_dx = sum_dx + dxh;
                        sum_dx_xh = sum_dx_xh + dxh * xhat[(r, c)];
                    }
                    let m1 = sum_dx / n;
                    let m2 = sum_dx_xh / n;
                    for c in 0..cols {
                        let dxh = g[(r, c)] * gv[c];
                        da[(r, c)] = inv_std[r] * (dxh - m1 - xhat[(r, c)] * m2);
                    }
                }
                self.acc(*a, da);
                self.acc(*gain, dg);
                self.acc(*bias, db);
            }
            Op::MaskedSoftmax { a, .. } => {
                let p = self.value(out).clone();
                let (rows, cols) = p.dim();
                let mut da = Mat::<F>::zeros((rows, cols));
                for r in 0..rows {
                    let mut dot = F::zero();
                    for c in 0..cols {
                        dot = dot + g[(r, c)] * p[(r, c)];
                    }
                    for c in 0..cols {
                        da[(r, c)] = p[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                self.acc(*a, da);
            }
            Op::GatherRows { table, ids } => {
                let dim = self.value(*table).dim();
                let mut dt = Mat::<F>::zeros(dim);
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &g.row(r);
                }
                self.acc(*table, dt);
            }
            Op::OverrideRows { base, rows } => {
                let mut dbase = g.clone();
                for &(pos, node) in rows {
                    let dr = g.row(pos).to_owned().insert_axis(Axis(0));
                    self.acc(node, dr);
                    dbase.row_mut(pos).fill(F::zero());
                }
                self.acc(*base, dbase);
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    let dp = g.slice(ndarray::s![at..at + n, ..]).to_owned();
                    self.acc(p, dp);
                    at += n;
                }
            }
            Op::SliceRows { a, start } => {
                let dim = self.value(*a).dim();
                let mut da = Mat::<F>::zeros(dim);
                da.slice_mut(ndarray::s![*start..*start + g.nrows(), ..]).assign(g);
                self.acc(*a, da);
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    let dp = g.slice(ndarray::s![.., at..at + n]).to_owned();
                    self.acc(p, dp);
                    at += n;
                }
            }
            Op::SliceCols { a, start } => {
                let dim = self.value(*a).dim();
                let mut da = Mat::<F>::zeros(dim);
                da.slice_mut(ndarray::s![.., *start..*start + g.ncols()]).assign(g);
                self.acc(*a, da);
            }
            Op::L2NormalizeRows { a, norms, fallback } => {
                let y = self.value(out).clone();
                let (rows, cols) = y.dim();
                let mut da = Mat::<F>::zeros((rows, cols));
                for r in 0..rows {
                    if fallback[r] {
                        continue; // subgradient 0 at the degenerate point
                    }
                    let mut dot = F::zero();
                    for c in 0..cols {
                        dot = dot + y[(r, c)] * g[(r, c)];
                    }
                    for c in 0..cols {
                        da[(r, c)] = (g[(r, c)] - y[(r, c)] * dot) / norms[r];
                    }
                }
                self.acc(*a, da);
            }
            Op::MeanCrossEntropy { logits, targets, probs } => {
                let gs = g[(0, 0)];
                let rows = probs.nrows();
                let scale = gs / F::from_f64(rows as f64);
                let mut dl = probs.mapv(|p| p * scale);
                for (r, &t) in targets.iter().enumerate() {
                    dl[(r, t)] = dl[(r, t)] - scale;
                }
                self.acc(*logits, dl);
            }
            Op::KlDivRows { target, probs } => {
                let gs = g[(0, 0)];
                let p = self.value(*probs);
                let rows = p.nrows();
                let tiny = F::from_f64(1e-30);
                let scale = gs / F::from_f64(rows as f64);
                let mut dp = Mat::<F>::zeros(p.dim());
                for r in 0..rows {
                    for c in 0..p.ncols() {
                        let t = target[(r, c)];
                        if t > F::zero() {
                            dp[(r, c)] = -scale * t / p[(r, c)].max(tiny);
                        }
                    }
                }
                self.acc(*probs, dp);
            }
            Op::WeightedSum { parts } => {
                let gs = g[(0, 0)];
                for &(id, c) in parts {
                    self.acc(id, Mat::from_elem((1, 1), gs * c));
                }
            }
        }
    }
}
