use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeom, GroupStats};
use super::{Array, DiffError, Result, Scalar};

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatmul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Upsample2x(usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        stats: GroupStats<F>,
    },
    Silu(usize),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    MeanSpatial(usize),
    ConcatChannels(usize, usize),
    SliceChannels {
        x: usize,
        start: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    AddPerItemChannel {
        x: usize,
        v: usize,
    },
    Reshape(usize),
    Softmax(usize),
    BceWithLogits {
        logits: usize,
        target: Array<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Array<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Record of primitive operations for one forward/backward pass.
///
/// Node indices are assigned in creation order, which is a topological
/// order of the computation graph; the reverse sweep walks them backwards.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
    check_finite: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, F> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    /// Creates a tape. Finite-value checking follows `GDDM_CHECK_FINITE`.
    pub fn new() -> Self {
        let check_finite = std::env::var("GDDM_CHECK_FINITE")
            .map(|v| v == "1" || v.eq_ignore_ascii_case("true"))
            .unwrap_or(false);
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite,
        }
    }

    /// Enables or disables the NaN/Inf assertion after every primitive.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input that receives a gradient.
    pub fn leaf(&self, value: Array<F>) -> Var<'_, F> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Input that is held fixed during the reverse sweep.
    pub fn constant(&self, value: Array<F>) -> Var<'_, F> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var<'_, F>) -> Ref<'_, Array<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    fn push_unchecked(&self, value: Array<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Array<F>, op: Op<F>) -> Result<Var<'_, F>> {
        if self.check_finite && !value.all_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents(&op).iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    /// Runs the reverse sweep from a one-element output.
    pub fn backward(&self, output: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if !out.value.is_scalar() {
            return Err(DiffError::NonScalar {
                shape: out.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Array<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Array::ones(out.value.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

fn parents<F>(op: &Op<F>) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => vec![a, b],
        Op::Matmul { a, b, .. } | Op::BatchMatmul { a, b, .. } => vec![a, b],
        Op::Conv2d { x, w, b, .. } => {
            let mut p = vec![x, w];
            p.extend(b);
            p
        }
        Op::GroupNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::AddBias { x, bias } => vec![x, bias],
        Op::AddPerItemChannel { x, v } => vec![x, v],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Upsample2x(a)
        | Op::Silu(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::MeanSpatial(a)
        | Op::Reshape(a)
        | Op::Softmax(a) => vec![a],
        Op::SliceChannels { x, .. } => vec![x],
        Op::BceWithLogits { logits, .. } => vec![logits],
    }
}

fn accumulate<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Array<F>>],
    id: usize,
    g: Array<F>,
) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(existing) => existing.axpy(F::one(), &g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn backprop<F: Scalar>(
    nodes: &[Node<F>],
    id: usize,
    g: &Array<F>,
    grads: &mut [Option<Array<F>>],
) -> Result<()> {
    let node = &nodes[id];
    let req = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.clone())?;
            accumulate(nodes, grads, b, g.clone())?;
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.clone())?;
            accumulate(nodes, grads, b, g.scale(-F::one()))?;
        }
        &Op::Mul(a, b) => {
            if req(a) {
                accumulate(nodes, grads, a, g.mul(&nodes[b].value)?)?;
            }
            if req(b) {
                accumulate(nodes, grads, b, g.mul(&nodes[a].value)?)?;
            }
        }
        &Op::Scale(a, s) => accumulate(nodes, grads, a, g.scale(s))?,
        &Op::AddScalar(a) => accumulate(nodes, grads, a, g.clone())?,
        &Op::Matmul { a, b, m, k, n } => {
            if req(a) {
                let mut da = vec![F::zero(); m * k];
                F::gemm(
                    m,
                    n,
                    k,
                    F::one(),
                    g.data(),
                    (n as isize, 1),
                    nodes[b].value.data(),
                    (1, n as isize),
                    F::zero(),
                    &mut da,
                    (k as isize, 1),
                );
                accumulate(
                    nodes,
                    grads,
                    a,
                    Array::from_vec(nodes[a].value.shape(), da)?,
                )?;
            }
            if req(b) {
                let mut db = vec![F::zero(); k * n];
                F::gemm(
                    k,
                    m,
                    n,
                    F::one(),
                    nodes[a].value.data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    F::zero(),
                    &mut db,
                    (n as isize, 1),
                );
                accumulate(
                    nodes,
                    grads,
                    b,
                    Array::from_vec(nodes[b].value.shape(), db)?,
                )?;
            }
        }
        &Op::BatchMatmul {
            a,
            b,
            trans_a,
            trans_b,
            batch,
            m,
            k,
            n,
        } => {
            let sa = bmm_strides(trans_a, m, k);
            let sb = bmm_strides(trans_b, k, n);
            if req(a) {
                let mut da = vec![F::zero(); batch * m * k];
                for i in 0..batch {
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        &g.data()[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &nodes[b].value.data()[i * k * n..(i + 1) * k * n],
                        (sb.1, sb.0),
                        F::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                        sa,
                    );
                }
                accumulate(
                    nodes,
                    grads,
                    a,
                    Array::from_vec(nodes[a].value.shape(), da)?,
                )?;
            }
            if req(b) {
                let mut db = vec![F::zero(); batch * k * n];
                for i in 0..batch {
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        &nodes[a].value.data()[i * m * k..(i + 1) * m * k],
                        (sa.1, sa.0),
                        &g.data()[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        F::zero(),
                        &mut db[i * k * n..(i + 1) * k * n],
                        sb,
                    );
                }
                accumulate(
                    nodes,
                    grads,
                    b,
                    Array::from_vec(nodes[b].value.shape(), db)?,
                )?;
            }
        }
        &Op::Conv2d { x, w, b, geom } => {
            let mut dx = req(x).then(|| vec![F::zero(); nodes[x].value.len()]);
            let mut dw = req(w).then(|| vec![F::zero(); nodes[w].value.len()]);
            let mut db = b
                .filter(|&b| req(b))
                .map(|b| vec![F::zero(); nodes[b].value.len()]);
            geom.backward(
                nodes[x].value.data(),
                nodes[w].value.data(),
                g.data(),
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(dx) = dx {
                accumulate(
                    nodes,
                    grads,
                    x,
                    Array::from_vec(nodes[x].value.shape(), dx)?,
                )?;
            }
            if let Some(dw) = dw {
                accumulate(
                    nodes,
                    grads,
                    w,
                    Array::from_vec(nodes[w].value.shape(), dw)?,
                )?;
            }
            if let (Some(b), Some(db)) = (b, db) {
                accumulate(
                    nodes,
                    grads,
                    b,
                    Array::from_vec(nodes[b].value.shape(), db)?,
                )?;
            }
        }
        &Op::Upsample2x(x) => {
            let [n, c, h, w] = nodes[x].value.dims4("upsample2x")?;
            let dx = kernels::upsample2x_backward(g.data(), n * c, h, w);
            accumulate(
                nodes,
                grads,
                x,
                Array::from_vec(nodes[x].value.shape(), dx)?,
            )?;
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            stats,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let dims = nodes[x].value.dims4("group_norm")?;
            let mut dx = req(x).then(|| vec![F::zero(); nodes[x].value.len()]);
            let mut dg = req(gamma).then(|| vec![F::zero(); nodes[gamma].value.len()]);
            let mut dbt = req(beta).then(|| vec![F::zero(); nodes[beta].value.len()]);
            kernels::group_norm_backward(
                nodes[x].value.data(),
                dims,
                *groups,
                nodes[gamma].value.data(),
                stats,
                g.data(),
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                dbt.as_deref_mut(),
            );
            if let Some(dx) = dx {
                accumulate(
                    nodes,
                    grads,
                    x,
                    Array::from_vec(nodes[x].value.shape(), dx)?,
                )?;
            }
            if let Some(dg) = dg {
                accumulate(
                    nodes,
                    grads,
                    gamma,
                    Array::from_vec(nodes[gamma].value.shape(), dg)?,
                )?;
            }
            if let Some(db) = dbt {
                accumulate(
                    nodes,
                    grads,
                    beta,
                    Array::from_vec(nodes[beta].value.shape(), db)?,
                )?;
            }
        }
        &Op::Silu(x) => {
            let d = nodes[x].value.zip_map(g, "silu", |v, gv| {
                let s = sigmoid(v);
                gv * (s + v * s * (F::one() - s))
            })?;
            accumulate(nodes, grads, x, d)?;
        }
        &Op::Relu(x) => {
            let d =
                nodes[x].value.zip_map(
                    g,
                    "relu",
                    |v, gv| if v > F::zero() { gv } else { F::zero() },
                )?;
            accumulate(nodes, grads, x, d)?;
        }
        &Op::Sigmoid(x) => {
            let d = node
                .value
                .zip_map(g, "sigmoid", |s, gv| gv * s * (F::one() - s))?;
            accumulate(nodes, grads, x, d)?;
        }
        &Op::Sum(x) => {
            let gv = g.item()?;
            accumulate(nodes, grads, x, Array::full(nodes[x].value.shape(), gv))?;
        }
        &Op::Mean(x) => {
            let len = nodes[x].value.len();
            let gv = g.item()? / F::from_f64(len as f64);
            accumulate(nodes, grads, x, Array::full(nodes[x].value.shape(), gv))?;
        }
        &Op::MeanSpatial(x) => {
            let [n, c, h, w] = nodes[x].value.dims4("mean_spatial")?;
            let inv = F::from_f64(1.0 / (h * w) as f64);
            let gd = g.data();
            let dx = Array::from_fn(&[n, c, h, w], |i| gd[i / (h * w)] * inv);
            accumulate(nodes, grads, x, dx)?;
        }
        &Op::ConcatChannels(a, b) => {
            let [n, ca, h, w] = nodes[a].value.dims4("concat_channels")?;
            let cb = nodes[b].value.shape()[1];
            let hw = h * w;
            let gd = g.data();
            if req(a) {
                let da = Array::from_fn(&[n, ca, h, w], |i| {
                    let (item, rest) = (i / (ca * hw), i % (ca * hw));
                    gd[item * (ca + cb) * hw + rest]
                });
                accumulate(nodes, grads, a, da)?;
            }
            if req(b) {
                let db = Array::from_fn(&[n, cb, h, w], |i| {
                    let (item, rest) = (i / (cb * hw), i % (cb * hw));
                    gd[item * (ca + cb) * hw + ca * hw + rest]
                });
                accumulate(nodes, grads, b, db)?;
            }
        }
        &Op::SliceChannels { x, start } => {
            let [n, c, h, w] = nodes[x].value.dims4("slice_channels")?;
            let len = g.shape()[1];
            let hw = h * w;
            let gd = g.data();
            let dx = Array::from_fn(&[n, c, h, w], |i| {
                let (item, ch, p) = (i / (c * hw), (i / hw) % c, i % hw);
                if ch >= start && ch < start + len {
                    gd[(item * len + ch - start) * hw + p]
                } else {
                    F::zero()
                }
            });
            accumulate(nodes, grads, x, dx)?;
        }
        &Op::AddBias { x, bias } => {
            accumulate(nodes, grads, x, g.clone())?;
            if req(bias) {
                let shape = g.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut db = vec![F::zero(); c];
                for (i, &v) in g.data().iter().enumerate() {
                    let ch = (i / inner) % c;
                    db[ch] = db[ch] + v;
                }
                accumulate(nodes, grads, bias, Array::from_vec(&[c], db)?)?;
            }
        }
        &Op::AddPerItemChannel { x, v } => {
            accumulate(nodes, grads, x, g.clone())?;
            if req(v) {
                let [n, c, h, w] = g.dims4("add_per_item_channel")?;
                let hw = h * w;
                let dv: Vec<F> = g
                    .data()
                    .chunks(hw)
                    .map(|p| p.iter().copied().sum())
                    .collect();
                accumulate(nodes, grads, v, Array::from_vec(&[n, c], dv)?)?;
            }
        }
        &Op::Reshape(x) => {
            accumulate(nodes, grads, x, g.reshape(nodes[x].value.shape())?)?;
        }
        &Op::Softmax(x) => {
            let cols = *node.value.shape().last().unwrap_or(&1);
            let dx = kernels::softmax_rows_backward(node.value.data(), g.data(), cols);
            accumulate(
                nodes,
                grads,
                x,
                Array::from_vec(nodes[x].value.shape(), dx)?,
            )?;
        }
        Op::BceWithLogits { logits, target } => {
            let l = &nodes[*logits].value;
            let n = l.shape()[0];
            let per = l.len() / n;
            let inv = F::from_f64(1.0 / per as f64);
            let gd = g.data();
            let ld = l.data();
            let td = target.data();
            let dl = Array::from_fn(l.shape(), |i| (sigmoid(ld[i]) - td[i]) * inv * gd[i / per]);
            accumulate(nodes, grads, *logits, dl)?;
        }
    }
    Ok(())
}

fn bmm_strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

#[inline]
fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn softplus<F: Scalar>(v: F) -> F {
    v.max(F::zero()) + (F::one() + (-v.abs()).exp()).ln()
}

/// Gradients produced by [`Tape::backward`], indexed by the input handles.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Array<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var<'_, F>) -> Option<&Array<F>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, with zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var<'_, F>) -> Array<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array::zeros(v.tape.value(v).shape()),
        }
    }

    pub fn take(&mut self, v: Var<'_, F>) -> Array<F> {
        match self.grads.get_mut(v.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Array::zeros(v.tape.value(v).shape()),
        }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array<F>> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn binary(
        self,
        other: Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Self> {
        let v = self.value().zip_map(&other.value(), name, f)?;
        self.tape.push(name, v, op)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, F>) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t, F>) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, F>) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: F) -> Result<Self> {
        let v = self.value().scale(s);
        self.tape.push("scale", v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: F) -> Result<Self> {
        let v = self.value().map(|a| a + s);
        self.tape.push("add_scalar", v, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Result<Self> {
        self.mul(self)
    }

    /// Matrix product of `[m, k]` and `[k, n]` arrays.
    pub fn matmul(self, other: Var<'t, F>) -> Result<Self> {
        let (m, k, n, data) = {
            let a = self.value();
            let b = other.value();
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            };
            if k != k2 {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = vec![F::zero(); m * n];
            F::gemm(
                m,
                k,
                n,
                F::one(),
                a.data(),
                (k as isize, 1),
                b.data(),
                (n as isize, 1),
                F::zero(),
                &mut out,
                (n as isize, 1),
            );
            (m, k, n, out)
        };
        let v = Array::from_vec(&[m, n], data)?;
        self.tape.push(
            "matmul",
            v,
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        )
    }

    /// Batched product of rank-3 arrays, optionally transposing either
    /// operand's trailing two axes.
    pub fn batch_matmul(self, other: Var<'t, F>, trans_a: bool, trans_b: bool) -> Result<Self> {
        let (batch, m, k, n, data) = {
            let a = self.value();
            let b = other.value();
            let mismatch = || DiffError::ShapeMismatch {
                op: "batch_matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            let (&[ba, a1, a2], &[bb, b1, b2]) = (a.shape(), b.shape()) else {
                return Err(mismatch());
            };
            let (m, k) = if trans_a { (a2, a1) } else { (a1, a2) };
            let (k2, n) = if trans_b { (b2, b1) } else { (b1, b2) };
            if ba != bb || k != k2 {
                return Err(mismatch());
            }
            let sa = bmm_strides(trans_a, m, k);
            let sb = bmm_strides(trans_b, k, n);
            let mut out = vec![F::zero(); ba * m * n];
            for i in 0..ba {
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    &a.data()[i * m * k..(i + 1) * m * k],
                    sa,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    sb,
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
            (ba, m, k, n, out)
        };
        let v = Array::from_vec(&[batch, m, n], data)?;
        self.tape.push(
            "batch_matmul",
            v,
            Op::BatchMatmul {
                a: self.id,
                b: other.id,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        )
    }

    /// 2D convolution of an NCHW input with a `[c_out, c_in, k, k]` kernel.
    pub fn conv2d(
        self,
        weight: Var<'t, F>,
        bias: Option<Var<'t, F>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (geom, out) = {
            let x = self.value();
            let w = weight.value();
            let dims = x.dims4("conv2d")?;
            let mismatch = || DiffError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            };
            let &[c_out, c_in, kh, kw] = w.shape() else {
                return Err(mismatch());
            };
            if c_in != dims[1] || kh != kw {
                return Err(mismatch());
            }
            let geom = ConvGeom::new(dims, c_out, kh, stride, pad).ok_or_else(mismatch)?;
            if let Some(b) = bias {
                if b.value().shape() != [c_out] {
                    return Err(DiffError::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: w.shape().to_vec(),
                        rhs: b.value().shape().to_vec(),
                    });
                }
            }
            let bias_ref = bias.map(|b| b.value());
            let out = geom.forward(x.data(), w.data(), bias_ref.as_ref().map(|b| b.data()));
            (geom, out)
        };
        let v = Array::from_vec(&[geom.batch, geom.c_out, geom.h_out, geom.w_out], out)?;
        self.tape.push(
            "conv2d",
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
        )
    }

    pub fn upsample2x(self) -> Result<Self> {
        let v = {
            let x = self.value();
            let [n, c, h, w] = x.dims4("upsample2x")?;
            Array::from_vec(
                &[n, c, 2 * h, 2 * w],
                kernels::upsample2x(x.data(), n * c, h, w),
            )?
        };
        self.tape.push("upsample2x", v, Op::Upsample2x(self.id))
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(self, groups: usize, gamma: Var<'t, F>, beta: Var<'t, F>) -> Result<Self> {
        let (v, stats) = {
            let x = self.value();
            let dims = x.dims4("group_norm")?;
            let c = dims[1];
            if groups == 0 || c % groups != 0 {
                return Err(DiffError::InvalidShape {
                    op: "group_norm",
                    shape: x.shape().to_vec(),
                    reason: format!("{c} channels not divisible into {groups} groups"),
                });
            }
            let (g, b) = (gamma.value(), beta.value());
            if g.shape() != [c] || b.shape() != [c] {
                return Err(DiffError::ShapeMismatch {
                    op: "group_norm affine",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (out, stats) = kernels::group_norm(
                x.data(),
                dims,
                groups,
                g.data(),
                b.data(),
                F::from_f64(1e-5),
            );
            (Array::from_vec(x.shape(), out)?, stats)
        };
        self.tape.push(
            "group_norm",
            v,
            Op::GroupNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                groups,
                stats,
            },
        )
    }

    pub fn silu(self) -> Result<Self> {
        let v = self.value().map(|a| a * sigmoid(a));
        self.tape.push("silu", v, Op::Silu(self.id))
    }

    pub fn relu(self) -> Result<Self> {
        let v = self.value().map(|a| a.max(F::zero()));
        self.tape.push("relu", v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Self> {
        let v = self.value().map(sigmoid);
        self.tape.push("sigmoid", v, Op::Sigmoid(self.id))
    }

    pub fn sum(self) -> Result<Self> {
        let v = Array::scalar(self.value().sum());
        self.tape.push("sum", v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        let v = Array::scalar(self.value().mean());
        self.tape.push("mean", v, Op::Mean(self.id))
    }

    /// Averages NCHW data over its spatial axes, giving `[n, c]`.
    pub fn mean_spatial(self) -> Result<Self> {
        let v = {
            let x = self.value();
            let [n, c, h, w] = x.dims4("mean_spatial")?;
            let inv = F::from_f64(1.0 / (h * w) as f64);
            let data = x
                .data()
                .chunks(h * w)
                .map(|p| p.iter().copied().sum::<F>() * inv)
                .collect();
            Array::from_vec(&[n, c], data)?
        };
        self.tape.push("mean_spatial", v, Op::MeanSpatial(self.id))
    }

    pub fn concat_channels(self, other: Var<'t, F>) -> Result<Self> {
        let v = {
            let a = self.value();
            let b = other.value();
            let [n, ca, h, w] = a.dims4("concat_channels")?;
            let [nb, cb, hb, wb] = b.dims4("concat_channels")?;
            if (n, h, w) != (nb, hb, wb) {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let hw = h * w;
            let mut data = Vec::with_capacity(a.len() + b.len());
            for i in 0..n {
                data.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
                data.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
            }
            Array::from_vec(&[n, ca + cb, h, w], data)?
        };
        self.tape
            .push("concat_channels", v, Op::ConcatChannels(self.id, other.id))
    }

    /// Channels `start..start + len` of NCHW data.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Self> {
        let v = {
            let x = self.value();
            let [n, c, h, w] = x.dims4("slice_channels")?;
            if len == 0 || start + len > c {
                return Err(DiffError::InvalidShape {
                    op: "slice_channels",
                    shape: x.shape().to_vec(),
                    reason: format!("channel range {start}..{} out of bounds", start + len),
                });
            }
            let hw = h * w;
            let mut data = Vec::with_capacity(n * len * hw);
            for i in 0..n {
                let off = (i * c + start) * hw;
                data.extend_from_slice(&x.data()[off..off + len * hw]);
            }
            Array::from_vec(&[n, len, h, w], data)?
        };
        self.tape
            .push("slice_channels", v, Op::SliceChannels { x: self.id, start })
    }

    /// Adds a `[c]` bias along axis 1 of a rank-2 or rank-4 array.
    pub fn add_bias(self, bias: Var<'t, F>) -> Result<Self> {
        let v = {
            let x = self.value();
            let b = bias.value();
            let shape = x.shape();
            if shape.len() < 2 || b.shape() != [shape[1]] {
                return Err(DiffError::ShapeMismatch {
                    op: "add_bias",
                    lhs: shape.to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let c = shape[1];
            let inner: usize = shape[2..].iter().product();
            let bd = b.data();
            let xd = x.data();
            Array::from_fn(shape, |i| xd[i] + bd[(i / inner) % c])
        };
        self.tape.push(
            "add_bias",
            v,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        )
    }

    /// Adds a `[n, c]` array to every pixel of `[n, c, h, w]` data.
    pub fn add_per_item_channel(self, v: Var<'t, F>) -> Result<Self> {
        let out = {
            let x = self.value();
            let e = v.value();
            let [n, c, h, w] = x.dims4("add_per_item_channel")?;
            if e.shape() != [n, c] {
                return Err(DiffError::ShapeMismatch {
                    op: "add_per_item_channel",
                    lhs: x.shape().to_vec(),
                    rhs: e.shape().to_vec(),
                });
            }
            let hw = h * w;
            let (xd, ed) = (x.data(), e.data());
            Array::from_fn(x.shape(), |i| xd[i] + ed[i / hw])
        };
        self.tape.push(
            "add_per_item_channel",
            out,
            Op::AddPerItemChannel {
                x: self.id,
                v: v.id,
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        self.tape.push("reshape", v, Op::Reshape(self.id))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(self) -> Result<Self> {
        let v = {
            let x = self.value();
            let cols = *x.shape().last().unwrap_or(&1);
            Array::from_vec(x.shape(), kernels::softmax_rows(x.data(), cols))?
        };
        self.tape.push("softmax", v, Op::Softmax(self.id))
    }

    /// Per-item mean binary cross-entropy between `sigmoid(self)` and a
    /// fixed target of the same shape; returns `[n]`.
    pub fn bce_with_logits(self, target: &Array<F>) -> Result<Self> {
        let v = {
            let l = self.value();
            l.expect_same_shape(target, "bce_with_logits")?;
            let n = l.shape()[0];
            let per = l.len() / n;
            let inv = F::from_f64(1.0 / per as f64);
            let data = l
                .data()
                .chunks(per)
                .zip(target.data().chunks(per))
                .map(|(lc, tc)| {
                    lc.iter()
                        .zip(tc)
                        .map(|(&lv, &tv)| softplus(lv) - tv * lv)
                        .sum::<F>()
                        * inv
                })
                .collect();
            Array::from_vec(&[n], data)?
        };
        self.tape.push(
            "bce_with_logits",
            v,
            Op::BceWithLogits {
                logits: self.id,
                target: target.clone(),
            },
        )
    }
}
