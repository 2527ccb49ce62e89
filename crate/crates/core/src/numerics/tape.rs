//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and enough
//! bookkeeping to run its backward rule. Nodes are appended in evaluation
//! order, so walking the tape backwards is a reverse topological traversal.
//!
//! A tape borrows the [`ParamStore`] immutably; gradients land in a separate
//! [`GradStore`]. That split lets independent samples be differentiated on
//! separate threads against one shared set of weights.

use std::collections::HashMap;

use rand::Rng;

use super::ops::{self, Layout};
use super::{Array, GradStore, NumericsError, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Array),
    Borrowed(&'p Array),
}

impl Value<'_> {
    fn get(&self) -> &Array {
        match self {
            Value::Owned(a) => a,
            Value::Borrowed(a) => a,
        }
    }
}

enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Matmul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Gelu {
        x: Var,
    },
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SmoothedNll {
        logits: Var,
        targets: Vec<u32>,
        smoothing: f32,
        ignore: u32,
        probs: Array,
    },
    Sum {
        x: Var,
    },
    Focal {
        x: Var,
        gamma: f32,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    param_nodes: HashMap<ParamId, Var>,
    all_masked_rows: usize,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only constants and leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_nodes: HashMap::new(),
            all_masked_rows: 0,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of attention rows so far that had every position masked.
    pub fn all_masked_rows(&self) -> usize {
        self.all_masked_rows
    }

    pub fn value(&self, v: Var) -> &Array {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Value<'p>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.get().is_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, a: Array) -> Var {
        self.push(Value::Owned(a), Op::Constant, false)
    }

    /// A borrowed constant input.
    pub fn constant_ref(&mut self, a: &'p Array) -> Var {
        self.push(Value::Borrowed(a), Op::Constant, false)
    }

    /// A differentiable input whose gradient is reported in
    /// [`GradStore::leaf`].
    pub fn leaf(&mut self, a: Array) -> Var {
        self.push(Value::Owned(a), Op::Leaf, true)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let p = store.get(id);
        let v = self.push(Value::Borrowed(&p.value), Op::Param(id), p.trainable);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Value::Owned(out),
            Op::Matmul {
                a,
                b,
                b_transposed: false,
            },
            rg,
        ))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Value::Owned(out),
            Op::Matmul {
                a,
                b,
                b_transposed: true,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Value::Owned(out), Op::Add(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} * {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Array::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Value::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let out = ops::add_bias(self.value(x), self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Value::Owned(out), Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = ops::scale(self.value(x), factor);
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::Scale { x, factor }, rg)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let xw = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(xw, b),
            None => Ok(xw),
        }
    }

    /// Row-wise softmax of `x + mask`. The mask is a constant (no gradient);
    /// rows it fully disallows become zero and are counted in
    /// [`Tape::all_masked_rows`].
    pub fn softmax(&mut self, x: Var, mask: Option<&Array>) -> Result<Var, NumericsError> {
        let (out, masked) = ops::masked_softmax_rows(self.value(x), mask)?;
        self.all_masked_rows += masked;
        let rg = self.rg(&[x]);
        Ok(self.push(Value::Owned(out), Op::Softmax { x }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var, NumericsError> {
        let (out, xhat, rstd) = ops::layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(&[x, gain, bias]);
        let op = if rg {
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            }
        } else {
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: Vec::new(),
                rstd: Vec::new(),
            }
        };
        Ok(self.push(Value::Owned(out), op, rg))
    }

    /// Inverted dropout. Returns `x` itself in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, train: bool, rng: &mut R) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidProbability(p));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.value(x).len(), p, rng)?;
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Value::Owned(out), Op::Dropout { x, mask }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::Gelu { x }, rg)
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var, NumericsError> {
        let out = ops::embed(self.value(table), ids)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            Value::Owned(out),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let out = ops::slice_cols(self.value(x), start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Value::Owned(out), Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let arrays: Vec<Array> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = ops::concat_heads(&arrays)?;
        let rg = self.rg(parts);
        Ok(self.push(Value::Owned(out), Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Per-position label-smoothed NLL as a length-`T` vector; ignored
    /// positions hold zero.
    pub fn smoothed_nll(
        &mut self,
        logits: Var,
        targets: &[u32],
        smoothing: f32,
        ignore: u32,
    ) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let (per_pos, _) = ops::smoothed_nll_rows(lv, targets, smoothing, ignore)?;
        let probs = ops::masked_softmax_rows(lv, None)?.0;
        let out = Array::new(vec![per_pos.len()], per_pos.iter().map(|&v| v as f32).collect())?;
        let rg = self.rg(&[logits]);
        let op = Op::SmoothedNll {
            logits,
            targets: targets.to_vec(),
            smoothing,
            ignore,
            probs,
        };
        Ok(self.push(Value::Owned(out), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Value::Owned(Array::scalar(total as f32)), Op::Sum { x }, rg)
    }

    /// Element-wise focal modulation `(1 - e^-x)^gamma * x`.
    pub fn focal(&mut self, x: Var, gamma: f32) -> Var {
        let out = self
            .value(x)
            .map(|v| ops::focal_modulated(v as f64, gamma as f64) as f32);
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::Focal { x, gamma }, rg)
    }

    /// Backpropagates from a scalar `loss` with unit seed.
    pub fn backward(&self, loss: Var) -> Result<GradStore, NumericsError> {
        let mut sink = GradStore::new();
        self.backward_seeded(loss, 1.0, &mut sink)?;
        Ok(sink)
    }

    /// Backpropagates `seed * d loss` and adds the resulting parameter and
    /// leaf gradients into `sink`. The tape is left intact, so repeated calls
    /// accumulate.
    pub fn backward_seeded(&self, loss: Var, seed: f32, sink: &mut GradStore) -> Result<(), NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NumericsError::DetachedGraph);
        }
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::full(lv.shape(), seed));
        for i in (0..=loss.0).rev() {
            if let Some(g) = grads[i].take() {
                self.propagate(i, g, &mut grads, sink);
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Array>], v: Var) -> Option<&'g mut Array> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Array::zeros(shape)))
    }

    fn propagate(&self, i: usize, g: Array, grads: &mut [Option<Array>], sink: &mut GradStore) {
        match &self.nodes[i].op {
            Op::Constant => {}
            Op::Leaf => match sink.leaves.get_mut(&i) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    sink.leaves.insert(i, g);
                }
            },
            Op::Param(id) => {
                sink.param_slot(*id, g.shape()).add_assign(&g);
            }
            &Op::Matmul { a, b, b_transposed } => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = va.dims2();
                let n = g.cols();
                if let Some(da) = self.slot(grads, a) {
                    if b_transposed {
                        // C = A B^T, B: n x k  =>  dA = G B
                        ops::gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            Layout::Normal,
                            vb.data(),
                            Layout::Normal,
                            da.data_mut(),
                            true,
                        );
                    } else {
                        // C = A B, B: k x n  =>  dA = G B^T
                        ops::gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            Layout::Normal,
                            vb.data(),
                            Layout::Transposed,
                            da.data_mut(),
                            true,
                        );
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    if b_transposed {
                        // dB = G^T A
                        ops::gemm(
                            n,
                            m,
                            k,
                            g.data(),
                            Layout::Transposed,
                            va.data(),
                            Layout::Normal,
                            db.data_mut(),
                            true,
                        );
                    } else {
                        // dB = A^T G
                        ops::gemm(
                            k,
                            m,
                            n,
                            va.data(),
                            Layout::Transposed,
                            g.data(),
                            Layout::Normal,
                            db.data_mut(),
                            true,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    da.add_assign(&g);
                }
                if let Some(db) = self.slot(grads, b) {
                    db.add_assign(&g);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(da) = self.slot(grads, a) {
                    for ((d, gv), bv) in da.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for ((d, gv), av) in db.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gv * av;
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.add_assign(&g);
                }
                if let Some(db) = self.slot(grads, bias) {
                    let cols = g.cols();
                    let dbd = db.data_mut();
                    for row in g.data().chunks(cols) {
                        for (d, gv) in dbd.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(dx) = self.slot(grads, x) {
                    for (d, gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * factor;
                    }
                }
            }
            &Op::Softmax { x } => {
                let y = self.nodes[i].value.get();
                if let Some(dx) = self.slot(grads, x) {
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = g.dims2();
                let gain_v = self.value(*gain);
                if let Some(dg) = self.slot(grads, *gain) {
                    let dgd = dg.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            dgd[c] += g.row(r)[c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    let dbd = db.data_mut();
                    for r in 0..rows {
                        for (d, gv) in dbd.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let n = cols as f32;
                    let mut dxhat = vec![0.0f32; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0f32;
                        let mut mean_dh = 0.0f32;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gain_v.data()[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hr[c];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        let dxr = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxr[c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), m) in dx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            &Op::Gelu { x } => {
                let xv = self.value(x);
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, gv), xv) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += gv * ops::gelu_grad(*xv);
                    }
                }
            }
            Op::Embed { table, ids } => {
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, gv) in dt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if let Some(dx) = self.slot(grads, x) {
                    let w = g.cols();
                    for r in 0..g.rows() {
                        for (d, gv) in dx.row_mut(r)[start..start + w].iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..g.rows() {
                            for (d, gv) in dp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *d += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SmoothedNll {
                logits,
                targets,
                smoothing,
                ignore,
                probs,
            } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    let vocab = probs.cols();
                    let s = *smoothing;
                    let uniform = s / vocab as f32;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let gt = g.data()[r];
                        let pr = probs.row(r);
                        let dr = dl.row_mut(r);
                        for j in 0..vocab {
                            let onehot = if j == t as usize { 1.0 - s } else { 0.0 };
                            dr[j] += gt * (pr[j] - onehot - uniform);
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                let gv = g.item();
                if let Some(dx) = self.slot(grads, x) {
                    dx.data_mut().iter_mut().for_each(|d| *d += gv);
                }
            }
            &Op::Focal { x, gamma } => {
                let xv = self.value(x);
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, gv), xv) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += gv * ops::focal_modulated_grad(*xv as f64, gamma as f64) as f32;
                    }
                }
            }
        }
    }
}
