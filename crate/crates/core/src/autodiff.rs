//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] records every operation executed through [`Var`] handles. Node
//! values are stored in the element type `T`; adjoints are accumulated in
//! `f64`. [`Tape::backward`] consumes the tape, so a tape supports exactly one
//! backward pass:
//!
//! ```compile_fail
//! use dimprune::{Tape, Tensor};
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(&Tensor::ones(&[2]).unwrap().with_grad());
//! let loss = x.sum().unwrap().id();
//! let _ = tape.backward(loss);
//! let _ = tape.backward(loss); // tape was moved by the first call
//! ```

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{check_shape, Element, Tensor};

/// Handle of a recorded node, detached from the tape borrow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf {
        name: Option<String>,
        trainable: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        groups: usize,
        m: usize,
        k: usize,
        p: usize,
        trans_b: bool,
    },
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    Concat {
        a: usize,
        b: usize,
        ca: usize,
        cb: usize,
    },
    Reshape(usize),
    Softmax {
        x: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    L1(usize),
    Sum(usize),
    Mean(usize),
    GroupMean {
        x: usize,
        groups: usize,
    },
    CrossEntropy {
        logits: usize,
        classes: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<T: Element> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    scope: RefCell<Vec<String>>,
    macs: RefCell<BTreeMap<String, u64>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A tensor-valued node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

fn to_f64<T: Element>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

fn from_f64<T: Element>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU, in 64-bit.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// `out[g] = a[g] · b[g]` (or `a[g] · b[g]ᵀ`), accumulated in f64.
fn bmm_kernel(a: &[f64], b: &[f64], groups: usize, m: usize, k: usize, p: usize, trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; groups * m * p];
    for g in 0..groups {
        let ag = &a[g * m * k..(g + 1) * m * k];
        let bg = &b[g * k * p..(g + 1) * k * p];
        let og = &mut out[g * m * p..(g + 1) * m * p];
        for i in 0..m {
            let row = &mut og[i * p..(i + 1) * p];
            if trans_b {
                for (j, o) in row.iter_mut().enumerate() {
                    let brow = &bg[j * k..(j + 1) * k];
                    *o = ag[i * k..(i + 1) * k].iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            } else {
                for kk in 0..k {
                    let aik = ag[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bg[kk * p..(kk + 1) * p];
                    for (o, bv) in row.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
        }
    }
    out
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            scope: RefCell::new(Vec::new()),
            macs: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op, needs_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf {
                name: None,
                trainable: tensor.requires_grad,
            },
            tensor.requires_grad,
        )
    }

    /// Records a named leaf; gradients can then be looked up by name.
    pub fn param(&self, name: impl Into<String>, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf {
                name: Some(name.into()),
                trainable: tensor.requires_grad,
            },
            tensor.requires_grad,
        )
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf {
                name: None,
                trainable: false,
            },
            false,
        )
    }

    pub fn var(&self, id: VarId) -> Var<'_, T> {
        Var { tape: self, id: id.0 }
    }

    /// Runs `f` with matmul work attributed to `label`.
    pub fn scoped<R>(&self, label: &str, f: impl FnOnce() -> R) -> R {
        self.scope.borrow_mut().push(label.to_string());
        let out = f();
        self.scope.borrow_mut().pop();
        out
    }

    fn count_macs(&self, macs: u64) {
        let label = self
            .scope
            .borrow()
            .last()
            .cloned()
            .unwrap_or_else(|| "unscoped".to_string());
        *self.macs.borrow_mut().entry(label).or_insert(0) += macs;
    }

    /// Multiply-accumulate counts of every recorded matrix product, per scope.
    pub fn mac_counts(&self) -> BTreeMap<String, u64> {
        self.macs.borrow().clone()
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.borrow().values().sum()
    }

    /// Computes gradients of the scalar `loss` for every trainable leaf.
    pub fn backward(self, loss: VarId) -> Result<Gradients<T>> {
        let nodes = self.nodes.into_inner();
        let root = loss.0;
        if root >= nodes.len() {
            return Err(Error::Usage(format!("loss node {root} is not on this tape")));
        }
        if nodes[root].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes_len: usize, id: usize, contrib: Vec<f64>) {
            debug_assert!(id < nodes_len);
            match &mut grads[id] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(contrib) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        }

        let n = nodes.len();
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| to_f64(&nodes[i].value);
            let wants = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf { .. } => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, n, *a, g.clone());
                    }
                    if wants(*b) {
                        acc(&mut grads, n, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, n, *a, g.clone());
                    }
                    if wants(*b) {
                        acc(&mut grads, n, *b, g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        let bv = val(*b);
                        acc(&mut grads, n, *a, g.iter().zip(&bv).map(|(x, y)| x * y).collect());
                    }
                    if wants(*b) {
                        let av = val(*a);
                        acc(&mut grads, n, *b, g.iter().zip(&av).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Scale(x, s) => {
                    acc(&mut grads, n, *x, g.iter().map(|v| v * s).collect());
                }
                Op::AddRow(x, b) => {
                    let c = nodes[*b].value.len();
                    if wants(*b) {
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            for (s, v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        acc(&mut grads, n, *b, gb);
                    }
                    if wants(*x) {
                        acc(&mut grads, n, *x, g);
                    }
                }
                Op::MulRow(x, v) => {
                    let c = nodes[*v].value.len();
                    let vv = val(*v);
                    if wants(*v) {
                        let xv = val(*x);
                        let mut gv = vec![0.0; c];
                        for (row, xrow) in g.chunks(c).zip(xv.chunks(c)) {
                            for j in 0..c {
                                gv[j] += row[j] * xrow[j];
                            }
                        }
                        acc(&mut grads, n, *v, gv);
                    }
                    if wants(*x) {
                        let gx = g.iter().enumerate().map(|(i, gi)| gi * vv[i % c]).collect();
                        acc(&mut grads, n, *x, gx);
                    }
                }
                Op::Bmm {
                    a,
                    b,
                    groups,
                    m,
                    k,
                    p,
                    trans_b,
                } => {
                    let (groups, m, k, p) = (*groups, *m, *k, *p);
                    if wants(*a) {
                        // dA = dC · Bᵀ  (or dC · B when B was transposed)
                        let bv = val(*b);
                        let ga = bmm_kernel(&g, &bv, groups, m, p, k, !*trans_b);
                        acc(&mut grads, n, *a, ga);
                    }
                    if wants(*b) {
                        let av = val(*a);
                        let mut gb = vec![0.0; groups * k * p];
                        for gi in 0..groups {
                            let ag = &av[gi * m * k..(gi + 1) * m * k];
                            let dg = &g[gi * m * p..(gi + 1) * m * p];
                            let out = &mut gb[gi * k * p..(gi + 1) * k * p];
                            for i in 0..m {
                                for kk in 0..k {
                                    let aik = ag[i * k + kk];
                                    for j in 0..p {
                                        let d = dg[i * p + j] * aik;
                                        if *trans_b {
                                            out[j * k + kk] += d;
                                        } else {
                                            out[kk * p + j] += d;
                                        }
                                    }
                                }
                            }
                        }
                        acc(&mut grads, n, *b, gb);
                    }
                }
                Op::Gather { x, index } => {
                    let mut gx = vec![0.0; nodes[*x].value.len()];
                    for (gi, &src) in g.iter().zip(index) {
                        gx[src] += gi;
                    }
                    acc(&mut grads, n, *x, gx);
                }
                Op::Concat { a, b, ca, cb } => {
                    let (ca, cb) = (*ca, *cb);
                    let rows = g.len() / (ca + cb);
                    if wants(*a) {
                        let mut ga = Vec::with_capacity(rows * ca);
                        for r in 0..rows {
                            ga.extend_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                        }
                        acc(&mut grads, n, *a, ga);
                    }
                    if wants(*b) {
                        let mut gb = Vec::with_capacity(rows * cb);
                        for r in 0..rows {
                            gb.extend_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                        }
                        acc(&mut grads, n, *b, gb);
                    }
                }
                Op::Reshape(x) => acc(&mut grads, n, *x, g),
                Op::Softmax { x, cols } => {
                    let y = val(id);
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(*cols).zip(y.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..*cols {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, n, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let c = nodes[*gain].value.len();
                    let gv = val(*gain);
                    if wants(*gain) {
                        let mut gg = vec![0.0; c];
                        for (row, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] += row[j] * xr[j];
                            }
                        }
                        acc(&mut grads, n, *gain, gg);
                    }
                    if wants(*bias) {
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            for j in 0..c {
                                gb[j] += row[j];
                            }
                        }
                        acc(&mut grads, n, *bias, gb);
                    }
                    if wants(*x) {
                        let mut gx = vec![0.0; g.len()];
                        for (r, ((row, xr), out)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                            let dxhat: Vec<f64> = (0..c).map(|j| row[j] * gv[j]).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                            let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                out[j] = rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                            }
                        }
                        acc(&mut grads, n, *x, gx);
                    }
                }
                Op::Gelu(x) => {
                    let xv = val(*x);
                    acc(
                        &mut grads,
                        n,
                        *x,
                        g.iter().zip(&xv).map(|(gi, xi)| gi * gelu_grad(*xi)).collect(),
                    );
                }
                Op::L1(x) => {
                    let xv = val(*x);
                    let s = g[0];
                    let gx = xv
                        .iter()
                        .map(|v| {
                            if *v > 0.0 {
                                s
                            } else if *v < 0.0 {
                                -s
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(&mut grads, n, *x, gx);
                }
                Op::Sum(x) => {
                    acc(&mut grads, n, *x, vec![g[0]; nodes[*x].value.len()]);
                }
                Op::Mean(x) => {
                    let len = nodes[*x].value.len();
                    acc(&mut grads, n, *x, vec![g[0] / len as f64; len]);
                }
                Op::GroupMean { x, groups } => {
                    let shape = &nodes[*x].shape;
                    let cols = *shape.last().unwrap();
                    let rows = nodes[*x].value.len() / cols;
                    let per = rows / groups;
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let grp = r / per;
                        for j in 0..cols {
                            gx[r * cols + j] = g[grp * cols + j] / per as f64;
                        }
                    }
                    acc(&mut grads, n, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    classes,
                    targets,
                    probs,
                } => {
                    let batch = targets.len();
                    let mut gx = probs.clone();
                    for (b, &t) in targets.iter().enumerate() {
                        gx[b * classes + t] -= 1.0;
                    }
                    let s = g[0] / batch as f64;
                    gx.iter_mut().for_each(|v| *v *= s);
                    acc(&mut grads, n, *logits, gx);
                }
            }
        }

        let mut out = Gradients {
            by_id: BTreeMap::new(),
            names: BTreeMap::new(),
        };
        for (id, node) in nodes.into_iter().enumerate() {
            if let Op::Leaf { name, trainable: true } = node.op {
                let g = grads[id].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::new(&node.shape, from_f64(g))?;
                if let Some(name) = name {
                    out.names.insert(name, VarId(id));
                }
                out.by_id.insert(VarId(id), t);
            }
        }
        Ok(out)
    }
}

/// Gradients of every trainable leaf of a consumed tape.
#[derive(Debug)]
pub struct Gradients<T: Element = f32> {
    by_id: BTreeMap<VarId, Tensor<T>>,
    names: BTreeMap<String, VarId>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<T>> {
        self.by_id.get(&id)
    }

    pub fn named(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|id| self.by_id.get(id))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    /// Stores the gradient of `name` into `tensor.grad`.
    pub fn attach(&self, name: &str, tensor: &mut Tensor<T>) -> Result<()> {
        let g = self
            .named(name)
            .ok_or_else(|| Error::Usage(format!("no gradient recorded for '{name}'")))?;
        if g.shape() != tensor.shape() {
            return Err(Error::dim("attach", g.shape(), tensor.shape()));
        }
        tensor.grad = Some(g.data().to_vec());
        Ok(())
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> VarId {
        VarId(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().value.len()
    }

    /// Snapshot of the forward value.
    pub fn value(&self) -> Tensor<T> {
        let node = self.node();
        Tensor::new(&node.shape, node.value.clone()).expect("node shape invariant")
    }

    fn values_f64(&self) -> Vec<f64> {
        to_f64(&self.node().value)
    }

    fn needs_grad(&self) -> bool {
        self.node().needs_grad
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn emit(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'t, T> {
        self.tape.push(shape, from_f64(value), op, needs_grad)
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::dim(name, &sa, &sb));
        }
        let (a, b) = (self.values_f64(), other.values_f64());
        let out = a.iter().zip(&b).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.needs_grad() || other.needs_grad();
        Ok(self.emit(sa, out, op, ng))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let out = self.values_f64().into_iter().map(|v| v * s).collect();
        self.emit(self.shape(), out, Op::Scale(self.id, s), self.needs_grad())
    }

    fn row_op(&self, v: &Var<'t, T>, name: &'static str) -> Result<(usize, Vec<f64>, Vec<f64>)> {
        self.same_tape(v);
        let (sx, sv) = (self.shape(), v.shape());
        let c = *sx.last().unwrap();
        if sv.len() != 1 || sv[0] != c {
            return Err(Error::dim(name, &sx, &sv));
        }
        Ok((c, self.values_f64(), v.values_f64()))
    }

    /// Adds a row vector `b[c]` to every row of `self[.., c]`.
    pub fn add_row(&self, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (c, x, bv) = self.row_op(b, "add_row")?;
        let out = x.iter().enumerate().map(|(i, v)| v + bv[i % c]).collect();
        let ng = self.needs_grad() || b.needs_grad();
        Ok(self.emit(self.shape(), out, Op::AddRow(self.id, b.id), ng))
    }

    /// Scales column `j` of `self[.., c]` by `v[j]`, i.e. right-multiplies by `diag(v)`.
    pub fn mul_row(&self, v: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (c, x, vv) = self.row_op(v, "mul_row")?;
        let out = x.iter().enumerate().map(|(i, e)| e * vv[i % c]).collect();
        let ng = self.needs_grad() || v.needs_grad();
        Ok(self.emit(self.shape(), out, Op::MulRow(self.id, v.id), ng))
    }

    /// Matrix product of `[m×k]` and `[k×p]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k, k2, p) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, p]) => (*m, *k, *k2, *p),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        self.tape.count_macs((m * k * p) as u64);
        let out = bmm_kernel(&self.values_f64(), &other.values_f64(), 1, m, k, p, false);
        let ng = self.needs_grad() || other.needs_grad();
        Ok(self.emit(
            vec![m, p],
            out,
            Op::Bmm {
                a: self.id,
                b: other.id,
                groups: 1,
                m,
                k,
                p,
                trans_b: false,
            },
            ng,
        ))
    }

    /// Batched product over the leading axis: `[g×m×k]·[g×k×p]`, or
    /// `[g×m×k]·[g×p×k]ᵀ` when `trans_b`.
    pub fn bmm(&self, other: &Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        let (g, m, k, g2, p, k2) = match (sa.as_slice(), sb.as_slice(), trans_b) {
            ([g, m, k], [g2, k2, p], false) => (*g, *m, *k, *g2, *p, *k2),
            ([g, m, k], [g2, p, k2], true) => (*g, *m, *k, *g2, *p, *k2),
            _ => return Err(Error::dim("bmm", &sa, &sb)),
        };
        if g != g2 || k != k2 {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        self.tape.count_macs((g * m * k * p) as u64);
        let out = bmm_kernel(&self.values_f64(), &other.values_f64(), g, m, k, p, trans_b);
        let ng = self.needs_grad() || other.needs_grad();
        Ok(self.emit(
            vec![g, m, p],
            out,
            Op::Bmm {
                a: self.id,
                b: other.id,
                groups: g,
                m,
                k,
                p,
                trans_b,
            },
            ng,
        ))
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    ///
    /// Permutations, window partitions, head splits and tilings are all
    /// expressed as gathers; the adjoint scatters back with accumulation.
    pub fn gather(&self, shape: &[usize], index: Vec<usize>) -> Result<Var<'t, T>> {
        let numel = check_shape(shape)?;
        if numel != index.len() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        let len = self.numel();
        if let Some(bad) = index.iter().find(|&&i| i >= len) {
            return Err(Error::Internal(format!("gather index {bad} out of range {len}")));
        }
        let out = {
            let node = self.node();
            index.iter().map(|&i| node.value[i].to_f64()).collect()
        };
        Ok(self.emit(shape.to_vec(), out, Op::Gather { x: self.id, index }, self.needs_grad()))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let (r, c) = match s.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(Error::dim("transpose", &s, &[0, 0])),
        };
        let index = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(&[c, r], index)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let numel = check_shape(shape)?;
        if numel != self.numel() {
            return Err(Error::dim("reshape", &self.shape(), shape));
        }
        let value = self.values_f64();
        Ok(self.emit(shape.to_vec(), value, Op::Reshape(self.id), self.needs_grad()))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_last", &sa, &sb));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (a, b) = (self.values_f64(), other.values_f64());
        let out = a
            .chunks(ca)
            .zip(b.chunks(cb))
            .flat_map(|(x, y)| x.iter().chain(y).copied().collect::<Vec<_>>())
            .collect();
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.needs_grad() || other.needs_grad();
        Ok(self.emit(
            shape,
            out,
            Op::Concat {
                a: self.id,
                b: other.id,
                ca,
                cb,
            },
            ng,
        ))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        let x = self.values_f64();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (oj, xj) in o.iter_mut().zip(row) {
                *oj = (xj - max).exp();
                sum += *oj;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.emit(shape, out, Op::Softmax { x: self.id, cols }, self.needs_grad()))
    }

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (c, x, gv) = self.row_op(gain, "layer_norm")?;
        let (_, _, bv) = self.row_op(bias, "layer_norm")?;
        let rows = x.len() / c;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.needs_grad() || gain.needs_grad() || bias.needs_grad();
        Ok(self.emit(
            self.shape(),
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, T> {
        let out = self.values_f64().into_iter().map(gelu_scalar).collect();
        self.emit(self.shape(), out, Op::Gelu(self.id), self.needs_grad())
    }

    /// Sum of absolute values; subgradient uses `sign(0) = 0`.
    pub fn l1_norm(&self) -> Var<'t, T> {
        let s = self.values_f64().iter().map(|v| v.abs()).sum();
        self.emit(vec![1], vec![s], Op::L1(self.id), self.needs_grad())
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let s = self.values_f64().iter().sum();
        Ok(self.emit(vec![1], vec![s], Op::Sum(self.id), self.needs_grad()))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let v = self.values_f64();
        let s = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.emit(vec![1], vec![s], Op::Mean(self.id), self.needs_grad()))
    }

    /// Averages consecutive equal-size row groups: `[groups·per × c] → [groups × c]`.
    pub fn group_mean(&self, groups: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        let rows = self.numel() / cols;
        if groups == 0 || !rows.is_multiple_of(groups) {
            return Err(Error::dim("group_mean", &shape, &[groups]));
        }
        let per = rows / groups;
        let x = self.values_f64();
        let mut out = vec![0.0; groups * cols];
        for r in 0..rows {
            for j in 0..cols {
                out[(r / per) * cols + j] += x[r * cols + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= per as f64);
        Ok(self.emit(
            vec![groups, cols],
            out,
            Op::GroupMean { x: self.id, groups },
            self.needs_grad(),
        ))
    }

    /// Mean softmax cross-entropy of `self[batch × classes]` against class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (batch, classes) = match shape.as_slice() {
            [b, c] => (*b, *c),
            _ => return Err(Error::dim("cross_entropy", &shape, &[targets.len()])),
        };
        if batch != targets.len() {
            return Err(Error::dim("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Config(format!("target {t} out of range for {classes} classes")));
        }
        let x = self.values_f64();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let row = &x[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for j in 0..classes {
                probs[b * classes + j] = (row[j] - lse).exp();
            }
        }
        let op = Op::CrossEntropy {
            logits: self.id,
            classes,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.emit(vec![1], vec![loss / batch as f64], op, self.needs_grad()))
    }
}
