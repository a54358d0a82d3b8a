//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tensor::backward`]
//! walks the recorded nodes once in reverse, accumulating gradients
//! additively into every `requires_grad` leaf. Tapes are single-threaded and
//! are rebuilt for every training step.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{DegtaError, Result};
use crate::linalg::Matrix;

type BackwardFn = Box<dyn Fn(&Matrix) -> Vec<(usize, Matrix)>>;

struct Node {
    value: Rc<Matrix>,
    grad: Option<Matrix>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording tape. Cloning is cheap and shares the underlying node storage.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
    soft_ste: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
            soft_ste: false,
        }
    }

    /// A tape on which straight-through ops run their smooth surrogate
    /// (identity) instead of the hard indicator. Used by gradient checks so
    /// the finite-difference path differentiates the function whose exact
    /// gradient the straight-through backward implements.
    pub fn new_soft_ste() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
            soft_ste: true,
        }
    }

    pub fn soft_ste(&self) -> bool {
        self.soft_ste
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, requires_grad: bool, backward: Option<BackwardFn>) -> Tensor {
        self.push_shared(Rc::new(value), requires_grad, backward)
    }

    fn push_shared(
        &self,
        value: Rc<Matrix>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// Registers a differentiable leaf.
    pub fn var(&self, value: Matrix) -> Tensor {
        self.push(value, true, None)
    }

    /// Registers a constant; no gradient flows into it.
    pub fn constant(&self, value: Matrix) -> Tensor {
        self.push(value, false, None)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(Matrix::from_vec(1, 1, vec![v]))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate(dst: &mut Option<Matrix>, add: Matrix) {
    match dst {
        Some(m) => {
            debug_assert_eq!(m.shape(), add.shape());
            for (d, s) in m.data_mut().iter_mut().zip(add.data()) {
                *d += s;
            }
        }
        None => *dst = Some(add),
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.inner.borrow().nodes[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn value(&self) -> Matrix {
        (*self.tape.inner.borrow().nodes[self.id].value).clone()
    }

    /// Shared handle to the forward value; no copy.
    pub fn value_rc(&self) -> Rc<Matrix> {
        Rc::clone(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn scalar_value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let v = &inner.nodes[self.id].value;
        assert_eq!(v.shape(), (1, 1), "scalar_value on non-scalar tensor");
        v.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient accumulated by the last `backward` call, if any.
    pub fn grad(&self) -> Option<Matrix> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Reverse pass from this scalar: visits nodes exactly once in reverse
    /// recording order, accumulating gradients additively into parents.
    pub fn backward(&self) -> Result<()> {
        if self.shape() != (1, 1) {
            return Err(DegtaError::ShapeMismatch {
                op: "backward",
                expected: "1x1 scalar".into(),
                got: format!("{:?}", self.shape()),
            });
        }
        let mut inner = self.tape.inner.borrow_mut();
        for node in inner.nodes.iter_mut() {
            node.grad = None;
        }
        inner.nodes[self.id].grad = Some(Matrix::from_vec(1, 1, vec![1.0]));
        for id in (0..=self.id).rev() {
            let grad = match inner.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(f) = inner.nodes[id].backward.take() {
                for (pid, pg) in f(&grad) {
                    debug_assert!(pid < id);
                    if inner.nodes[pid].requires_grad {
                        accumulate(&mut inner.nodes[pid].grad, pg);
                    }
                }
            }
            inner.nodes[id].grad = Some(grad);
        }
        Ok(())
    }

    fn unary(
        &self,
        value: Matrix,
        backward: impl Fn(&Matrix) -> Matrix + 'static,
    ) -> Tensor {
        self.unary_shared(Rc::new(value), backward)
    }

    fn unary_shared(
        &self,
        value: Rc<Matrix>,
        backward: impl Fn(&Matrix) -> Matrix + 'static,
    ) -> Tensor {
        let req = self.requires_grad();
        let pid = self.id;
        self.tape.push_shared(
            value,
            req,
            Some(Box::new(move |g| vec![(pid, backward(g))])),
        )
    }

    fn shape_err(op: &'static str, expected: String, got: String) -> DegtaError {
        DegtaError::ShapeMismatch { op, expected, got }
    }

    // ---- arithmetic -----------------------------------------------------

    /// Elementwise addition; also broadcasts a `1 x C` row vector over rows.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, ca) = self.shape();
        let (rb, cb) = other.shape();
        let a = self.value_rc();
        let b = other.value_rc();
        let broadcast_row = rb == 1 && ra > 1 && ca == cb;
        if !(self.shape() == other.shape() || broadcast_row) {
            return Err(Self::shape_err(
                "add",
                format!("{ra}x{ca}"),
                format!("{rb}x{cb}"),
            ));
        }
        let mut out = (*a).clone();
        for r in 0..ra {
            let brow = if broadcast_row { b.row(0) } else { b.row(r) };
            for (d, s) in out.row_mut(r).iter_mut().zip(brow) {
                *d += s;
            }
        }
        let (ia, ib) = (self.id, other.id);
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out,
            req,
            Some(Box::new(move |g| {
                let gb = if broadcast_row {
                    let mut col = Matrix::zeros(1, cb);
                    for r in 0..g.rows() {
                        for (d, s) in col.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    col
                } else {
                    g.clone()
                };
                vec![(ia, g.clone()), (ib, gb)]
            })),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(self.value().map(|v| c * v), move |g| g.map(|v| c * v))
    }

    /// Elementwise product. Broadcasts `R x 1` over columns or `1 x 1` over
    /// everything when `other` is narrower than `self`.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, ca) = self.shape();
        let (rb, cb) = other.shape();
        let a = self.value_rc();
        let b = other.value_rc();
        enum Mode {
            Same,
            ColVec,
            Scalar,
        }
        let mode = if (rb, cb) == (ra, ca) {
            Mode::Same
        } else if rb == ra && cb == 1 {
            Mode::ColVec
        } else if (rb, cb) == (1, 1) {
            Mode::Scalar
        } else {
            return Err(Self::shape_err(
                "mul",
                format!("{ra}x{ca}, {ra}x1 or 1x1"),
                format!("{rb}x{cb}"),
            ));
        };
        let mut out = Matrix::zeros(ra, ca);
        for r in 0..ra {
            for c in 0..ca {
                let bv = match mode {
                    Mode::Same => b[(r, c)],
                    Mode::ColVec => b[(r, 0)],
                    Mode::Scalar => b[(0, 0)],
                };
                out[(r, c)] = a[(r, c)] * bv;
            }
        }
        let (ia, ib) = (self.id, other.id);
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut ga = Matrix::zeros(ra, ca);
                let (gr, gc) = match mode {
                    Mode::Same => (ra, ca),
                    Mode::ColVec => (ra, 1),
                    Mode::Scalar => (1, 1),
                };
                let mut gb = Matrix::zeros(gr, gc);
                for r in 0..ra {
                    for c in 0..ca {
                        let gv = g[(r, c)];
                        match mode {
                            Mode::Same => {
                                ga[(r, c)] = gv * b[(r, c)];
                                gb[(r, c)] += gv * a[(r, c)];
                            }
                            Mode::ColVec => {
                                ga[(r, c)] = gv * b[(r, 0)];
                                gb[(r, 0)] += gv * a[(r, c)];
                            }
                            Mode::Scalar => {
                                ga[(r, c)] = gv * b[(0, 0)];
                                gb[(0, 0)] += gv * a[(r, c)];
                            }
                        }
                    }
                }
                vec![(ia, ga), (ib, gb)]
            })),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, ca) = self.shape();
        let (rb, cb) = other.shape();
        if ca != rb {
            return Err(Self::shape_err(
                "matmul",
                format!("inner dims to agree ({ra}x{ca} * {rb}x{cb})"),
                format!("{ca} vs {rb}"),
            ));
        }
        let a = self.value_rc();
        let b = other.value_rc();
        let out = a.matmul(&b);
        let (ia, ib) = (self.id, other.id);
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out,
            req,
            Some(Box::new(move |g| {
                vec![
                    (ia, g.matmul(&b.transpose())),
                    (ib, a.transpose().matmul(g)),
                ]
            })),
        ))
    }

    pub fn transpose(&self) -> Tensor {
        self.unary(self.value().transpose(), |g| g.transpose())
    }

    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, ca) = self.shape();
        let (rb, cb) = other.shape();
        if ca != cb {
            return Err(Self::shape_err(
                "concat_rows",
                format!("both with {ca} cols"),
                format!("{cb} cols"),
            ));
        }
        let a = self.value_rc();
        let b = other.value_rc();
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let out = Matrix::from_vec(ra + rb, ca, data);
        let (ia, ib) = (self.id, other.id);
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out,
            req,
            Some(Box::new(move |g| {
                let ga = Matrix::from_vec(ra, ca, g.data()[..ra * ca].to_vec());
                let gb = Matrix::from_vec(rb, ca, g.data()[ra * ca..].to_vec());
                vec![(ia, ga), (ib, gb)]
            })),
        ))
    }

    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, ca) = self.shape();
        let (rb, cb) = other.shape();
        if ra != rb {
            return Err(Self::shape_err(
                "concat_cols",
                format!("both with {ra} rows"),
                format!("{rb} rows"),
            ));
        }
        let a = self.value_rc();
        let b = other.value_rc();
        let mut out = Matrix::zeros(ra, ca + cb);
        for r in 0..ra {
            out.row_mut(r)[..ca].copy_from_slice(a.row(r));
            out.row_mut(r)[ca..].copy_from_slice(b.row(r));
        }
        let (ia, ib) = (self.id, other.id);
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut ga = Matrix::zeros(ra, ca);
                let mut gb = Matrix::zeros(ra, cb);
                for r in 0..ra {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                vec![(ia, ga), (ib, gb)]
            })),
        ))
    }

    // ---- nonlinearities -------------------------------------------------

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let x = self.value_rc();
        let out = x.map(|v| if v >= 0.0 { v } else { slope * v });
        self.unary(out, move |g| {
            let mut d = g.clone();
            for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                if *xv < 0.0 {
                    *dv *= slope;
                }
            }
            d
        })
    }

    pub fn exp(&self) -> Tensor {
        let out = Rc::new(self.value_rc().map(f64::exp));
        let cap = Rc::clone(&out);
        self.unary_shared(out, move |g| {
            let mut d = g.clone();
            for (dv, ov) in d.data_mut().iter_mut().zip(cap.data()) {
                *dv *= ov;
            }
            d
        })
    }

    /// Row softmax with per-row max subtraction.
    pub fn row_softmax(&self) -> Tensor {
        let x = self.value_rc();
        let (r, c) = x.shape();
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in out.row_mut(i) {
                *o /= z;
            }
        }
        let out = Rc::new(out);
        let y = Rc::clone(&out);
        self.unary_shared(out, move |g| {
            let mut d = Matrix::zeros(r, c);
            for i in 0..r {
                let gy: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    d[(i, j)] = y[(i, j)] * (g[(i, j)] - gy);
                }
            }
            d
        })
    }

    /// Row softmax restricted to entries where `mask` is nonzero. Rows with
    /// no unmasked entry become all-zero and are reported in the returned
    /// flag vector; with `allow_empty = false` such rows are an error.
    pub fn masked_row_softmax(
        &self,
        mask: &Matrix,
        allow_empty: bool,
    ) -> Result<(Tensor, Vec<bool>)> {
        let x = self.value_rc();
        let (r, c) = x.shape();
        if mask.shape() != (r, c) {
            return Err(Self::shape_err(
                "masked_row_softmax",
                format!("{r}x{c} mask"),
                format!("{:?}", mask.shape()),
            ));
        }
        let mut out = Matrix::zeros(r, c);
        let mut empty = vec![false; r];
        for i in 0..r {
            let mut m = f64::NEG_INFINITY;
            for j in 0..c {
                if mask[(i, j)] != 0.0 {
                    m = m.max(x[(i, j)]);
                }
            }
            if m == f64::NEG_INFINITY {
                empty[i] = true;
                if !allow_empty {
                    return Err(DegtaError::InvalidParameter(format!(
                        "masked_row_softmax: row {i} fully masked"
                    )));
                }
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if mask[(i, j)] != 0.0 {
                    let e = (x[(i, j)] - m).exp();
                    out[(i, j)] = e;
                    z += e;
                }
            }
            for j in 0..c {
                out[(i, j)] /= z;
            }
        }
        let out = Rc::new(out);
        let y = Rc::clone(&out);
        let mk = Rc::new(mask.clone());
        let t = self.unary_shared(out, move |g| {
            let mut d = Matrix::zeros(r, c);
            for i in 0..r {
                let mut gy = 0.0;
                for j in 0..c {
                    if mk[(i, j)] != 0.0 {
                        gy += g[(i, j)] * y[(i, j)];
                    }
                }
                for j in 0..c {
                    if mk[(i, j)] != 0.0 {
                        d[(i, j)] = y[(i, j)] * (g[(i, j)] - gy);
                    }
                }
            }
            d
        });
        Ok((t, empty))
    }

    /// Fused transformer attention map: `row_softmax(self · kᵀ · scale)`
    /// with `self` as queries. The logits are never materialized; only the
    /// softmax output is stored.
    pub fn scaled_attention(&self, k: &Tensor, scale: f64) -> Result<Tensor> {
        let (n, dq) = self.shape();
        let (nk, dk) = k.shape();
        if n != nk || dq != dk {
            return Err(Self::shape_err(
                "scaled_attention",
                format!("{n}x{dq} keys"),
                format!("{nk}x{dk}"),
            ));
        }
        let q = self.value_rc();
        let kv = k.value_rc();
        let mut out = Matrix::zeros(n, n);
        let mut logits = vec![0.0f64; n];
        for i in 0..n {
            let qi = q.row(i);
            let mut m = f64::NEG_INFINITY;
            for (j, l) in logits.iter_mut().enumerate() {
                let dot: f64 = qi.iter().zip(kv.row(j)).map(|(a, b)| a * b).sum();
                *l = dot * scale;
                m = m.max(*l);
            }
            let row = out.row_mut(i);
            let mut z = 0.0;
            for (o, &l) in row.iter_mut().zip(&logits) {
                *o = (l - m).exp();
                z += *o;
            }
            for o in row.iter_mut() {
                *o /= z;
            }
        }
        let out = Rc::new(out);
        let y = Rc::clone(&out);
        let (iq, ik) = (self.id, k.id);
        let req = self.requires_grad() || k.requires_grad();
        Ok(self.tape.push_shared(
            out,
            req,
            Some(Box::new(move |g| {
                let mut dq_m = Matrix::zeros(n, dq);
                let mut dk_m = Matrix::zeros(n, dq);
                let mut dlog = vec![0.0f64; n];
                for i in 0..n {
                    let yi = y.row(i);
                    let gi = g.row(i);
                    let gy: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dlog[j] = yi[j] * (gi[j] - gy) * scale;
                    }
                    let qi = q.row(i).to_vec();
                    let dqi = dq_m.row_mut(i);
                    for (j, &dl) in dlog.iter().enumerate() {
                        if dl == 0.0 {
                            continue;
                        }
                        let kj = kv.row(j);
                        for (c, dv) in dqi.iter_mut().enumerate() {
                            *dv += dl * kj[c];
                        }
                    }
                    for (j, &dl) in dlog.iter().enumerate() {
                        if dl == 0.0 {
                            continue;
                        }
                        let dkj = dk_m.row_mut(j);
                        for (c, dv) in dkj.iter_mut().enumerate() {
                            *dv += dl * qi[c];
                        }
                    }
                }
                vec![(iq, dq_m), (ik, dk_m)]
            })),
        ))
    }

    /// Fused sampling-score map: masked row softmax of
    /// `w_self ∘ self + w_other ∘ other` restricted to nonzero entries of
    /// `mask`, where the weights are `1 x 1` tensors. Rows with no unmasked
    /// entry come back all-zero and flagged. Only the softmax output is
    /// materialized.
    pub fn weighted_masked_softmax(
        &self,
        other: &Tensor,
        w_self: &Tensor,
        w_other: &Tensor,
        mask: Rc<Matrix>,
    ) -> Result<(Tensor, Vec<bool>)> {
        let (r, c) = self.shape();
        if other.shape() != (r, c) || mask.shape() != (r, c) {
            return Err(Self::shape_err(
                "weighted_masked_softmax",
                format!("{r}x{c} operands"),
                format!("{:?} / {:?}", other.shape(), mask.shape()),
            ));
        }
        if w_self.shape() != (1, 1) || w_other.shape() != (1, 1) {
            return Err(Self::shape_err(
                "weighted_masked_softmax",
                "1x1 weights".into(),
                format!("{:?} / {:?}", w_self.shape(), w_other.shape()),
            ));
        }
        let a = self.value_rc();
        let b = other.value_rc();
        let wa = w_self.scalar_value();
        let wb = w_other.scalar_value();
        let mut out = Matrix::zeros(r, c);
        let mut empty = vec![false; r];
        for i in 0..r {
            let (ar, br, mr) = (a.row(i), b.row(i), mask.row(i));
            let mut m = f64::NEG_INFINITY;
            for j in 0..c {
                if mr[j] != 0.0 {
                    m = m.max(wa * ar[j] + wb * br[j]);
                }
            }
            if m == f64::NEG_INFINITY {
                empty[i] = true;
                continue;
            }
            let row = out.row_mut(i);
            let mut z = 0.0;
            for j in 0..c {
                if mr[j] != 0.0 {
                    let e = (wa * ar[j] + wb * br[j] - m).exp();
                    row[j] = e;
                    z += e;
                }
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Rc::new(out);
        let y = Rc::clone(&out);
        let (ia, ib, iwa, iwb) = (self.id, other.id, w_self.id, w_other.id);
        let req = self.requires_grad()
            || other.requires_grad()
            || w_self.requires_grad()
            || w_other.requires_grad();
        let mk = Rc::clone(&mask);
        let t = self.tape.push_shared(
            out,
            req,
            Some(Box::new(move |g| {
                let mut da = Matrix::zeros(r, c);
                let mut db = Matrix::zeros(r, c);
                let mut dwa = 0.0;
                let mut dwb = 0.0;
                for i in 0..r {
                    let (yi, gi, mi) = (y.row(i), g.row(i), mk.row(i));
                    let mut gy = 0.0;
                    for j in 0..c {
                        if mi[j] != 0.0 {
                            gy += gi[j] * yi[j];
                        }
                    }
                    let (ar, br) = (a.row(i), b.row(i));
                    let (dai, dbi) = (da.row_mut(i), db.row_mut(i));
                    for j in 0..c {
                        if mi[j] != 0.0 {
                            let dcomb = yi[j] * (gi[j] - gy);
                            dai[j] = wa * dcomb;
                            dbi[j] = wb * dcomb;
                            dwa += dcomb * ar[j];
                            dwb += dcomb * br[j];
                        }
                    }
                }
                vec![
                    (ia, da),
                    (ib, db),
                    (iwa, Matrix::from_vec(1, 1, vec![dwa])),
                    (iwb, Matrix::from_vec(1, 1, vec![dwb])),
                ]
            })),
        );
        Ok((t, empty))
    }

    /// Softmax within contiguous segments of a column vector. `offsets` has
    /// one more entry than there are segments; empty segments are allowed.
    pub fn segment_softmax(&self, offsets: &[usize]) -> Result<Tensor> {
        let x = self.value_rc();
        let (n, c) = x.shape();
        if c != 1 || *offsets.last().unwrap_or(&0) != n {
            return Err(Self::shape_err(
                "segment_softmax",
                format!("{n}x1 with offsets ending at {n}"),
                format!("{n}x{c}, offsets end {:?}", offsets.last()),
            ));
        }
        let mut out = Matrix::zeros(n, 1);
        for s in 0..offsets.len() - 1 {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo == hi {
                continue;
            }
            let m = x.data()[lo..hi]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in lo..hi {
                let e = (x.data()[k] - m).exp();
                out.data_mut()[k] = e;
                z += e;
            }
            for k in lo..hi {
                out.data_mut()[k] /= z;
            }
        }
        let out = Rc::new(out);
        let y = Rc::clone(&out);
        let offs = offsets.to_vec();
        Ok(self.unary_shared(out, move |g| {
            let mut d = Matrix::zeros(n, 1);
            for s in 0..offs.len() - 1 {
                let (lo, hi) = (offs[s], offs[s + 1]);
                let mut gy = 0.0;
                for k in lo..hi {
                    gy += g.data()[k] * y.data()[k];
                }
                for k in lo..hi {
                    d.data_mut()[k] = y.data()[k] * (g.data()[k] - gy);
                }
            }
            d
        }))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let (r, c) = self.shape();
        let total: f64 = self.value_rc().data().iter().sum();
        self.unary(Matrix::from_vec(1, 1, vec![total]), move |g| {
            let v = g[(0, 0)];
            Matrix::from_vec(r, c, vec![v; r * c])
        })
    }

    /// Column means over rows: `R x C -> 1 x C`.
    pub fn mean_rows(&self) -> Tensor {
        let x = self.value_rc();
        let (r, c) = x.shape();
        let mut out = Matrix::zeros(1, c);
        for i in 0..r {
            for j in 0..c {
                out[(0, j)] += x[(i, j)];
            }
        }
        for j in 0..c {
            out[(0, j)] /= r as f64;
        }
        self.unary(out, move |g| {
            let mut d = Matrix::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    d[(i, j)] = g[(0, j)] / r as f64;
                }
            }
            d
        })
    }

    /// Per-row sums over columns: `R x C -> R x 1`.
    pub fn row_sums(&self) -> Tensor {
        let x = self.value_rc();
        let (r, c) = x.shape();
        let mut out = Matrix::zeros(r, 1);
        for i in 0..r {
            out[(i, 0)] = x.row(i).iter().sum();
        }
        self.unary(out, move |g| {
            let mut d = Matrix::zeros(r, c);
            for i in 0..r {
                let gv = g[(i, 0)];
                for j in 0..c {
                    d[(i, j)] = gv;
                }
            }
            d
        })
    }

    // ---- indexing -------------------------------------------------------

    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        let x = self.value_rc();
        let (r, c) = x.shape();
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(DegtaError::IndexOutOfRange {
                index: bad,
                num_nodes: r,
            });
        }
        let mut out = Matrix::zeros(index.len(), c);
        for (k, &i) in index.iter().enumerate() {
            out.row_mut(k).copy_from_slice(x.row(i));
        }
        let idx = index.to_vec();
        Ok(self.unary(out, move |g| {
            let mut d = Matrix::zeros(r, c);
            for (k, &i) in idx.iter().enumerate() {
                for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                    *dv += gv;
                }
            }
            d
        }))
    }

    /// Adds row `k` of `self` into row `index[k]` of a fresh `n_rows x C`
    /// output. Rows not named by `index` stay zero.
    pub fn scatter_add_rows(&self, index: &[usize], n_rows: usize) -> Result<Tensor> {
        let x = self.value_rc();
        let (r, c) = x.shape();
        if r != index.len() {
            return Err(Self::shape_err(
                "scatter_add_rows",
                format!("{r} index entries"),
                format!("{}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n_rows) {
            return Err(DegtaError::IndexOutOfRange {
                index: bad,
                num_nodes: n_rows,
            });
        }
        let mut out = Matrix::zeros(n_rows, c);
        for (k, &i) in index.iter().enumerate() {
            for (dv, sv) in out.row_mut(i).iter_mut().zip(x.row(k)) {
                *dv += sv;
            }
        }
        let idx = index.to_vec();
        Ok(self.unary(out, move |g| {
            let mut d = Matrix::zeros(r, c);
            for (k, &i) in idx.iter().enumerate() {
                d.row_mut(k).copy_from_slice(g.row(i));
            }
            d
        }))
    }

    /// Gathers scalar entries `(r, c)` into an `E x 1` column.
    pub fn gather_entries(&self, pairs: &[(usize, usize)]) -> Result<Tensor> {
        let x = self.value_rc();
        let (r, c) = x.shape();
        if let Some(&(br, bc)) = pairs.iter().find(|&&(pr, pc)| pr >= r || pc >= c) {
            return Err(DegtaError::IndexOutOfRange {
                index: br.max(bc),
                num_nodes: r.max(c),
            });
        }
        let mut out = Matrix::zeros(pairs.len(), 1);
        for (k, &(pr, pc)) in pairs.iter().enumerate() {
            out[(k, 0)] = x[(pr, pc)];
        }
        let ps = pairs.to_vec();
        Ok(self.unary(out, move |g| {
            let mut d = Matrix::zeros(r, c);
            for (k, &(pr, pc)) in ps.iter().enumerate() {
                d[(pr, pc)] += g[(k, 0)];
            }
            d
        }))
    }

    // ---- gradient control -----------------------------------------------

    /// Identity forward; contributes exactly zero gradient to its parent.
    pub fn stop_gradient(&self) -> Tensor {
        self.tape.push_shared(self.value_rc(), false, None)
    }

    /// Forward: the 0/1 indicator `1_{x > tau}`. Backward: identity
    /// (`1 - stopgrad(x) + x`), so the upstream gradient passes through
    /// unchanged. On a soft-surrogate tape the forward is `x` itself.
    pub fn straight_through_threshold(&self, tau: f64) -> Tensor {
        let indicator = self
            .value_rc()
            .map(|v| if v > tau { 1.0 } else { 0.0 });
        self.straight_through_with(indicator)
    }

    /// Straight-through with an arbitrary precomputed hard forward value.
    pub fn straight_through_with(&self, hard: Matrix) -> Tensor {
        assert_eq!(hard.shape(), self.shape(), "hard mask shape mismatch");
        if self.tape.soft_ste {
            return self.unary_shared(self.value_rc(), |g| g.clone());
        }
        self.unary(hard, |g| g.clone())
    }

    // ---- losses ---------------------------------------------------------

    /// Mean softmax cross-entropy over rows of `logits` against integer
    /// labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let x = self.value_rc();
        let (r, c) = x.shape();
        if labels.len() != r {
            return Err(Self::shape_err(
                "cross_entropy",
                format!("{r} labels"),
                format!("{}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(DegtaError::InvalidParameter(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        let mut probs = Matrix::zeros(r, c);
        for i in 0..r {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            for p in probs.row_mut(i) {
                *p /= z;
            }
            total += z.ln() + m - row[labels[i]];
        }
        total /= r as f64;
        let lbl = labels.to_vec();
        Ok(self.unary(Matrix::from_vec(1, 1, vec![total]), move |g| {
            let gv = g[(0, 0)] / r as f64;
            let mut d = probs.clone();
            for (i, &l) in lbl.iter().enumerate() {
                d[(i, l)] -= 1.0;
            }
            for v in d.data_mut() {
                *v *= gv;
            }
            d
        }))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&self, target: &Matrix) -> Result<Tensor> {
        let x = self.value_rc();
        if x.shape() != target.shape() {
            return Err(Self::shape_err(
                "l1_loss",
                format!("{:?}", x.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        let n = (x.rows() * x.cols()) as f64;
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let t = target.clone();
        Ok(self.unary(Matrix::from_vec(1, 1, vec![total]), move |g| {
            let gv = g[(0, 0)] / n;
            let mut d = Matrix::zeros(t.rows(), t.cols());
            for (dv, (a, b)) in d.data_mut().iter_mut().zip(x.data().iter().zip(t.data())) {
                *dv = gv * (a - b).signum() * if a == b { 0.0 } else { 1.0 };
            }
            d
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // d/dx sum(x∘x) at x=[1,2] is [2,4].
        let tape = Tape::new();
        let x = tape.var(Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        let y = x.mul(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn uniform_softmax() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_vec(1, 4, vec![0.0; 4]));
        let y = x.row_softmax();
        for &v in y.value().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_vec(1, 1, vec![-1.0]));
        assert_eq!(x.leaky_relu(0.2).scalar_value(), -0.2);
    }

    #[test]
    fn straight_through_forward_and_backward() {
        let tape = Tape::new();
        let m = tape.var(Matrix::from_vec(1, 3, vec![0.6, 0.3, 0.1]));
        let out = m.straight_through_threshold(0.5);
        assert_eq!(out.value().data(), &[1.0, 0.0, 0.0]);

        let w = tape.constant(Matrix::from_vec(1, 3, vec![3.0, 5.0, 7.0]));
        let y = out.mul(&w).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(m.grad().unwrap().data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn straight_through_neg_inf_tau() {
        let tape = Tape::new();
        let m = tape.var(Matrix::from_vec(1, 3, vec![-4.0, 0.0, 2.0]));
        let out = m.straight_through_threshold(f64::NEG_INFINITY);
        assert_eq!(out.value().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn stop_gradient_blocks() {
        let tape = Tape::new();
        let x = tape.var(Matrix::from_vec(1, 1, vec![3.0]));
        let y = x.stop_gradient().mul(&x).unwrap().sum();
        y.backward().unwrap();
        // Only the non-detached factor contributes: d/dx (c*x) = c = 3.
        assert_eq!(x.grad().unwrap().data(), &[3.0]);
    }

    #[test]
    fn cross_entropy_symmetric_two_class() {
        let tape = Tape::new();
        let x = tape.var(Matrix::from_vec(1, 2, vec![0.0, 0.0]));
        let y = x.cross_entropy(&[0]).unwrap();
        assert!((y.scalar_value() - (2.0f64).ln()).abs() < 1e-12);
        y.backward().unwrap();
        let g = x.grad().unwrap();
        assert!((g[(0, 0)] + 0.5).abs() < 1e-12);
        assert!((g[(0, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_empty_row_flagged() {
        let tape = Tape::new();
        let x = tape.var(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let mask = Matrix::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let (y, empty) = x.masked_row_softmax(&mask, true).unwrap();
        assert_eq!(empty, vec![false, true]);
        assert_eq!(y.value().row(1), &[0.0, 0.0]);
        assert!(x.masked_row_softmax(&mask, false).is_err());
        let s: f64 = y.value().row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn segment_softmax_sums_to_one_per_segment() {
        let tape = Tape::new();
        let x = tape.var(Matrix::from_vec(5, 1, vec![1.0, 2.0, 3.0, -1.0, 0.5]));
        let y = x.segment_softmax(&[0, 3, 3, 5]).unwrap();
        let v = y.value();
        let s1: f64 = v.data()[0..3].iter().sum();
        let s2: f64 = v.data()[3..5].iter().sum();
        assert!((s1 - 1.0).abs() < 1e-12);
        assert!((s2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scatter_gather_roundtrip_gradients() {
        let tape = Tape::new();
        let x = tape.var(Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = x.gather_rows(&[2, 0, 2]).unwrap();
        let s = g.scatter_add_rows(&[0, 1, 0], 2).unwrap();
        assert_eq!(s.value().row(0), &[10.0, 12.0]);
        assert_eq!(s.value().row(1), &[1.0, 2.0]);
        let y = s.sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.var(Matrix::zeros(2, 2));
        assert!(x.backward().is_err());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let tape = Tape::new();
        let a = tape.var(Matrix::zeros(2, 3));
        let b = tape.var(Matrix::zeros(3, 3));
        assert!(a.add(&b).is_err());
        assert!(a.mul(&b).is_err());
        assert!(a.matmul(&b).is_ok());
        assert!(b.matmul(&b).is_ok());
        assert!(a.matmul(&a).is_err());
    }
}
