use std::cell::RefCell;
use std::fmt;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Pointwise operation kinds accepted by [`Var::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
}

impl ElementwiseKind {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        src: usize,
        start: usize,
        end: usize,
    },
    SelectRows {
        src: usize,
        rows: Vec<usize>,
    },
    MergeRows(Vec<(usize, Vec<usize>)>),
    TimeStep {
        src: usize,
        step: usize,
    },
    Reshape(usize),
    MaskMul {
        src: usize,
        mask: Vec<f64>,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        geometry: ConvGeometry,
    },
    GlobalAvgPool(usize),
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records primitive operations of one forward pass for reverse-mode
/// differentiation. Nodes are appended in evaluation order, so the record is
/// always topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let requires_grad = t.requires_grad();
        self.push(t.detached(), Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        value.set_requires_grad(false);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Smallest `|x|` over ReLU inputs that depend on trainable values, or
    /// infinity when there are none. Finite differences taken closer than
    /// this to a kink are not meaningful.
    pub fn relu_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(src) if nodes[src].requires_grad => Some(&nodes[src].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Clears the gradients accumulated on leaves.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Back-propagates from a single-element `loss`, adding the result into
    /// the gradient of every leaf that requires one. Repeated calls without
    /// [`zero_grad`](Self::zero_grad) keep accumulating.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a single-element loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                match &mut nodes[id].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => nodes[id].grad = Some(g),
                }
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

/// Pushes the output gradient `g` of node `id` into the gradients of its inputs.
fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *b, |gb| fold_into(gb, g, 1.0));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *b, |gb| fold_into(gb, g, -1.0));
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(grads, nodes, *a, |ga| {
                let nb = bv.len();
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi * bv[i % nb];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                let nb = gb.len();
                for (i, gi) in g.iter().enumerate() {
                    gb[i % nb] += gi * av[i];
                }
            });
        }
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, |ga| {
            for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                *x += gi * y * (1.0 - y);
            }
        }),
        Op::Tanh(a) => accumulate(grads, nodes, *a, |ga| {
            for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                *x += gi * (1.0 - y * y);
            }
        }),
        Op::Relu(a) => accumulate(grads, nodes, *a, |ga| {
            for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                if *y > 0.0 {
                    *x += gi;
                }
            }
        }),
        Op::Scale(a, s) => accumulate(grads, nodes, *a, |ga| {
            for (x, gi) in ga.iter_mut().zip(g) {
                *x += gi * s;
            }
        }),
        Op::MatMul(a, b) => {
            let (p, q) = dims2(&nodes[*a].value);
            let r = nodes[*b].value.shape()[1];
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(grads, nodes, *a, |ga| gemm_nt(p, r, q, g, bv, ga));
            accumulate(grads, nodes, *b, |gb| gemm_tn(q, p, r, av, g, gb));
        }
        Op::MatMulNT(a, b) => {
            let (p, q) = dims2(&nodes[*a].value);
            let r = nodes[*b].value.shape()[0];
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(grads, nodes, *a, |ga| gemm_nn(p, r, q, g, bv, ga));
            accumulate(grads, nodes, *b, |gb| gemm_tn(r, p, q, g, av, gb));
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        Op::Mean(a) => accumulate(grads, nodes, *a, |ga| {
            let s = g[0] / ga.len() as f64;
            ga.iter_mut().for_each(|x| *x += s);
        }),
        Op::ConcatCols(parts) => {
            let rows = out.shape()[0];
            let total = out.shape()[1];
            let mut offset = 0;
            for &part in parts {
                let width = nodes[part].value.shape()[1];
                accumulate(grads, nodes, part, |gp| {
                    for r in 0..rows {
                        for c in 0..width {
                            gp[r * width + c] += g[r * total + offset + c];
                        }
                    }
                });
                offset += width;
            }
        }
        Op::SliceCols { src, start, end } => {
            let (rows, cols) = dims2(&nodes[*src].value);
            let width = end - start;
            accumulate(grads, nodes, *src, |gs| {
                for r in 0..rows {
                    for c in 0..width {
                        gs[r * cols + start + c] += g[r * width + c];
                    }
                }
            });
        }
        Op::SelectRows { src, rows } => {
            let row_len = nodes[*src].value.len() / nodes[*src].value.shape()[0];
            accumulate(grads, nodes, *src, |gs| {
                for (i, &r) in rows.iter().enumerate() {
                    add_into(
                        &mut gs[r * row_len..(r + 1) * row_len],
                        &g[i * row_len..(i + 1) * row_len],
                    );
                }
            });
        }
        Op::MergeRows(parts) => {
            let row_len = out.len() / out.shape()[0];
            for (part, rows) in parts {
                accumulate(grads, nodes, *part, |gp| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut gp[i * row_len..(i + 1) * row_len],
                            &g[r * row_len..(r + 1) * row_len],
                        );
                    }
                });
            }
        }
        Op::TimeStep { src, step } => {
            let shape = nodes[*src].value.shape();
            let (b, t, d) = (shape[0], shape[1], shape[2]);
            accumulate(grads, nodes, *src, |gs| {
                for bi in 0..b {
                    let dst = (bi * t + step) * d;
                    add_into(&mut gs[dst..dst + d], &g[bi * d..(bi + 1) * d]);
                }
            });
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, |ga| add_into(ga, g)),
        Op::MaskMul { src, mask } => accumulate(grads, nodes, *src, |gs| {
            for ((x, gi), m) in gs.iter_mut().zip(g).zip(mask) {
                *x += gi * m;
            }
        }),
        Op::Conv2d {
            input,
            kernel,
            bias,
            geometry,
        } => {
            let batch = nodes[*input].value.shape()[0];
            let out_ch = nodes[*kernel].value.shape()[0];
            let (patch, p) = (geometry.patch_len(), geometry.out_len());
            let in_len = geometry.channels * geometry.height * geometry.width;
            let x = nodes[*input].value.data();
            let w = nodes[*kernel].value.data();
            let mut cols = vec![0.0; patch * p];
            if nodes[*kernel].requires_grad {
                accumulate(grads, nodes, *kernel, |gw| {
                    for bi in 0..batch {
                        geometry.im2col(&x[bi * in_len..(bi + 1) * in_len], &mut cols);
                        let gb = &g[bi * out_ch * p..(bi + 1) * out_ch * p];
                        gemm_nt(out_ch, p, patch, gb, &cols, gw);
                    }
                });
            }
            accumulate(grads, nodes, *bias, |gbias| {
                for bi in 0..batch {
                    for (o, gv) in gbias.iter_mut().enumerate() {
                        let start = (bi * out_ch + o) * p;
                        *gv += g[start..start + p].iter().sum::<f64>();
                    }
                }
            });
            accumulate(grads, nodes, *input, |gx| {
                for bi in 0..batch {
                    cols.iter_mut().for_each(|v| *v = 0.0);
                    let gb = &g[bi * out_ch * p..(bi + 1) * out_ch * p];
                    gemm_tn(patch, out_ch, p, w, gb, &mut cols);
                    geometry.col2im(&cols, &mut gx[bi * in_len..(bi + 1) * in_len]);
                }
            });
        }
        Op::GlobalAvgPool(a) => {
            let shape = nodes[*a].value.shape();
            let plane = shape[2] * shape[3];
            let scale = 1.0 / plane as f64;
            accumulate(grads, nodes, *a, |ga| {
                for (i, gi) in g.iter().enumerate() {
                    ga[i * plane..(i + 1) * plane]
                        .iter_mut()
                        .for_each(|x| *x += gi * scale);
                }
            });
        }
        Op::BceWithLogits { logits, targets } => {
            let lv = nodes[*logits].value.data();
            let n = lv.len() as f64;
            accumulate(grads, nodes, *logits, |gl| {
                for ((x, l), y) in gl.iter_mut().zip(lv).zip(targets) {
                    *x += g[0] * (sigmoid(*l) - y) / n;
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Sums a gradient over the broadcast (leading) axes of a smaller operand.
fn fold_into(dst: &mut [f64], src: &[f64], sign: f64) {
    let n = dst.len();
    for (i, s) in src.iter().enumerate() {
        dst[i % n] += sign * s;
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `−[y·log σ(ℓ) + (1−y)·log(1−σ(ℓ))]`.
pub(crate) fn bce_term(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data().to_vec()
    }

    /// Gradient accumulated on this leaf by [`Tape::backward`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id];
            let data = src.value.data().iter().map(|&x| f(x)).collect();
            (
                Tensor::new(src.value.shape().to_vec(), data).expect("shape preserved"),
                src.requires_grad,
            )
        };
        self.tape.push(value, op, rg)
    }

    /// Binary pointwise op. `other` may match `self` exactly or equal its
    /// trailing axes, in which case it is repeated along the leading ones.
    fn binary(&self, other: Var<'t>, kind: ElementwiseKind) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
                return Err(Error::dim(format!(
                    "{kind:?}: shapes {sa:?} and {sb:?} are not compatible"
                )));
            }
            let bv = b.value.data();
            let nb = bv.len();
            let data = a
                .value
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bv[i % nb];
                    match kind {
                        ElementwiseKind::Add => x + y,
                        ElementwiseKind::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            (
                Tensor::new(sa.to_vec(), data).expect("shape preserved"),
                a.requires_grad || b.requires_grad,
            )
        };
        let op = match kind {
            ElementwiseKind::Add => Op::Add(self.id, other.id),
            ElementwiseKind::Sub => Op::Sub(self.id, other.id),
            _ => Op::Mul(self.id, other.id),
        };
        Ok(self.tape.push(value, op, rg))
    }

    pub fn elementwise(&self, kind: ElementwiseKind, other: Option<Var<'t>>) -> Result<Var<'t>> {
        match (kind.is_binary(), other) {
            (true, Some(b)) => self.binary(b, kind),
            (true, None) => Err(Error::Contract(format!("{kind:?} needs two operands"))),
            (false, Some(_)) => Err(Error::Contract(format!("{kind:?} takes one operand"))),
            (false, None) => Ok(match kind {
                ElementwiseKind::Sigmoid => self.sigmoid(),
                ElementwiseKind::Tanh => self.tanh(),
                _ => self.relu(),
            }),
        }
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, ElementwiseKind::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, ElementwiseKind::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, ElementwiseKind::Mul)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(|x| x * s, Op::Scale(self.id, s))
    }

    /// `self[p×q] · other[q×r]`
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
            }
            let mut c = vec![0.0; sa[0] * sb[1]];
            gemm_nn(sa[0], sa[1], sb[1], a.value.data(), b.value.data(), &mut c);
            (
                Tensor::new([sa[0], sb[1]], c).expect("matmul shape"),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// `self[p×q] · other[r×q]ᵀ`, the layout of `x·Wᵀ` with `W` stored out×in.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
                return Err(Error::dim(format!(
                    "matmul_t: cannot multiply {sa:?} by transpose of {sb:?}"
                )));
            }
            let mut c = vec![0.0; sa[0] * sb[0]];
            gemm_nt(sa[0], sa[1], sb[0], a.value.data(), b.value.data(), &mut c);
            (
                Tensor::new([sa[0], sb[0]], c).expect("matmul shape"),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::MatMulNT(self.id, other.id), rg))
    }

    pub fn sum(&self) -> Var<'t> {
        let (v, rg) = self.reduce(|d| d.iter().sum());
        self.tape.push(v, Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let (v, rg) = self.reduce(|d| d.iter().sum::<f64>() / d.len() as f64);
        self.tape.push(v, Op::Mean(self.id), rg)
    }

    fn reduce(&self, f: impl Fn(&[f64]) -> f64) -> (Tensor, bool) {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        (Tensor::scalar(f(n.value.data())), n.requires_grad)
    }

    /// Concatenates 2-D values with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let (value, rg) = {
            let nodes = first.tape.nodes.borrow();
            let rows = nodes[first.id].value.shape()[0];
            let mut widths = Vec::with_capacity(parts.len());
            let mut rg = false;
            for p in parts {
                first.same_tape(p)?;
                let s = nodes[p.id].value.shape();
                if s.len() != 2 || s[0] != rows {
                    return Err(Error::dim(format!(
                        "concat_cols: shape {s:?} incompatible with {rows} rows"
                    )));
                }
                widths.push(s[1]);
                rg |= nodes[p.id].requires_grad;
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.id].value.data()[r * w..(r + 1) * w]);
                }
            }
            (Tensor::new([rows, total], data)?, rg)
        };
        Ok(first
            .tape
            .push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let s = n.value.shape();
            if s.len() != 2 || start >= end || end > s[1] {
                return Err(Error::dim(format!(
                    "slice_cols: range {start}..{end} invalid for shape {s:?}"
                )));
            }
            let (rows, cols) = (s[0], s[1]);
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&n.value.data()[r * cols + start..r * cols + end]);
            }
            (Tensor::new([rows, end - start], data)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::SliceCols { src: self.id, start, end }, rg))
    }

    /// Gathers entries along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let s = n.value.shape();
            let row_len = n.value.len() / s[0];
            if rows.is_empty() {
                return Err(Error::dim("select_rows: empty row list"));
            }
            let mut data = Vec::with_capacity(rows.len() * row_len);
            for &r in rows {
                if r >= s[0] {
                    return Err(Error::dim(format!(
                        "select_rows: row {r} out of range for shape {s:?}"
                    )));
                }
                data.extend_from_slice(&n.value.data()[r * row_len..(r + 1) * row_len]);
            }
            let mut shape = s.to_vec();
            shape[0] = rows.len();
            (Tensor::new(shape, data)?, n.requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::SelectRows {
                src: self.id,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Builds a tensor with `n_rows` leading entries where row `rows[i]` of
    /// the result is row `i` of the corresponding part. Every output row must
    /// be covered exactly once.
    pub fn merge_rows(n_rows: usize, parts: &[(Var<'t>, &[usize])]) -> Result<Var<'t>> {
        let (first, _) = parts
            .first()
            .ok_or_else(|| Error::dim("merge_rows: no parts"))?;
        let (value, rg) = {
            let nodes = first.tape.nodes.borrow();
            let tail = nodes[first.id].value.shape()[1..].to_vec();
            let row_len: usize = tail.iter().product();
            let mut data = vec![0.0; n_rows * row_len];
            let mut covered = vec![false; n_rows];
            let mut rg = false;
            for (part, rows) in parts {
                first.same_tape(part)?;
                let v = &nodes[part.id].value;
                if v.shape()[1..] != tail[..] || v.shape()[0] != rows.len() {
                    return Err(Error::dim(format!(
                        "merge_rows: part of shape {:?} does not fit {} rows of {tail:?}",
                        v.shape(),
                        rows.len()
                    )));
                }
                for (i, &r) in rows.iter().enumerate() {
                    if r >= n_rows || covered[r] {
                        return Err(Error::dim(format!("merge_rows: row {r} invalid or repeated")));
                    }
                    covered[r] = true;
                    data[r * row_len..(r + 1) * row_len]
                        .copy_from_slice(&v.data()[i * row_len..(i + 1) * row_len]);
                }
                rg |= nodes[part.id].requires_grad;
            }
            if covered.iter().any(|c| !c) {
                return Err(Error::dim("merge_rows: some rows are not covered"));
            }
            let mut shape = vec![n_rows];
            shape.extend(tail);
            (Tensor::new(shape, data)?, rg)
        };
        let op = Op::MergeRows(parts.iter().map(|(p, r)| (p.id, r.to_vec())).collect());
        Ok(first.tape.push(value, op, rg))
    }

    /// Slice `[:, step, :]` of a `B×T×D` value.
    pub fn time_step(&self, step: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let s = n.value.shape();
            if s.len() != 3 || step >= s[1] {
                return Err(Error::dim(format!(
                    "time_step: step {step} invalid for shape {s:?}"
                )));
            }
            let (b, t, d) = (s[0], s[1], s[2]);
            let mut data = Vec::with_capacity(b * d);
            for bi in 0..b {
                let start = (bi * t + step) * d;
                data.extend_from_slice(&n.value.data()[start..start + d]);
            }
            (Tensor::new([b, d], data)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::TimeStep { src: self.id, step }, rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.clone().reshape(shape.to_vec())?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Multiplies by a fixed mask of the same length (used for dropout).
    pub fn mask_mul(&self, mask: Vec<f64>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if mask.len() != n.value.len() {
                return Err(Error::dim(format!(
                    "mask of length {} for value of shape {:?}",
                    mask.len(),
                    n.value.shape()
                )));
            }
            let data = n.value.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            (Tensor::new(n.value.shape().to_vec(), data)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::MaskMul { src: self.id, mask }, rg))
    }

    /// Same-padded cross-correlation of `self[B×C×H×W]` with
    /// `kernel[O×C×k×k]` plus `bias[O]`.
    pub fn conv2d(&self, kernel: Var<'t>, bias: Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        self.same_tape(&bias)?;
        let (value, rg, geometry) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (&nodes[self.id], &nodes[kernel.id], &nodes[bias.id]);
            let (sx, sw) = (x.value.shape(), w.value.shape());
            if sx.len() != 4 || sw.len() != 4 {
                return Err(Error::dim(format!(
                    "conv2d expects 4-D input and kernel, got {sx:?} and {sw:?}"
                )));
            }
            if sw[1] != sx[1] {
                return Err(Error::dim(format!(
                    "conv2d: kernel {sw:?} expects {} input channels, input {sx:?} has {}",
                    sw[1], sx[1]
                )));
            }
            if sw[2] != sw[3] || sw[2] % 2 == 0 {
                return Err(Error::dim(format!("conv2d: kernel must be odd and square, got {sw:?}")));
            }
            if b.value.shape() != [sw[0]] {
                return Err(Error::dim(format!(
                    "conv2d: bias {:?} does not match {} output channels",
                    b.value.shape(),
                    sw[0]
                )));
            }
            if stride == 0 {
                return Err(Error::dim("conv2d: stride must be positive"));
            }
            let geometry = ConvGeometry {
                channels: sx[1],
                height: sx[2],
                width: sx[3],
                kernel: sw[2],
                stride,
            };
            let (batch, out_ch) = (sx[0], sw[0]);
            let (patch, p) = (geometry.patch_len(), geometry.out_len());
            let in_len = sx[1] * sx[2] * sx[3];
            let mut cols = vec![0.0; patch * p];
            let mut out = vec![0.0; batch * out_ch * p];
            for bi in 0..batch {
                geometry.im2col(&x.value.data()[bi * in_len..(bi + 1) * in_len], &mut cols);
                let ob = &mut out[bi * out_ch * p..(bi + 1) * out_ch * p];
                for (o, &bv) in b.value.data().iter().enumerate() {
                    ob[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bv);
                }
                gemm_nn(out_ch, patch, p, w.value.data(), &cols, ob);
            }
            let shape = [batch, out_ch, geometry.out_height(), geometry.out_width()];
            (
                Tensor::new(shape, out)?,
                x.requires_grad || w.requires_grad || b.requires_grad,
                geometry,
            )
        };
        let op = Op::Conv2d {
            input: self.id,
            kernel: kernel.id,
            bias: bias.id,
            geometry,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Mean over the spatial plane: `B×C×H×W → B×C`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let s = n.value.shape();
            if s.len() != 4 {
                return Err(Error::dim(format!("global_avg_pool expects 4-D input, got {s:?}")));
            }
            let plane = s[2] * s[3];
            let data = n
                .value
                .data()
                .chunks(plane)
                .map(|c| c.iter().sum::<f64>() / plane as f64)
                .collect();
            (Tensor::new([s[0], s[1]], data)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::GlobalAvgPool(self.id), rg))
    }

    /// Mean binary cross-entropy between these logits and binary `targets`.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.value.shape() != targets.shape() {
                return Err(Error::dim(format!(
                    "bce: logits {:?} vs targets {:?}",
                    n.value.shape(),
                    targets.shape()
                )));
            }
            if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(Error::invalid(format!("bce targets must be 0 or 1, found {bad}")));
            }
            let total: f64 = n
                .value
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&l, &y)| bce_term(l, y))
                .sum();
            (Tensor::scalar(total / targets.len() as f64), n.requires_grad)
        };
        let op = Op::BceWithLogits {
            logits: self.id,
            targets: targets.data().to_vec(),
        };
        Ok(self.tape.push(value, op, rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.0]));
        assert_eq!(z.sigmoid().to_vec(), vec![0.5]);
        assert_eq!(z.tanh().to_vec(), vec![0.0]);
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().to_vec(), vec![4.0, 6.0]);
        let sum = a.elementwise(ElementwiseKind::Add, Some(b)).unwrap();
        assert_eq!(sum.to_vec(), vec![4.0, 6.0]);
        assert!(a.elementwise(ElementwiseKind::Mul, None).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn bias_broadcast_along_leading_axis() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2], &[10.0, 20.0]).with_grad());
        let y = a.add(b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let row = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let col = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        assert_eq!(row.matmul(col).unwrap().to_vec(), vec![2.0]);
        assert!(matches!(row.matmul(row), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[2.0]).with_grad());
        tape.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros([2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_use_accumulates() {
        for k in [2usize, 3] {
            let tape = Tape::new();
            let x = tape.leaf(&t(&[2], &[0.3, -0.7]).with_grad());
            let mut acc = x;
            for _ in 1..k {
                acc = acc.add(x).unwrap();
            }
            tape.backward(acc.sum()).unwrap();
            assert_eq!(x.grad().unwrap(), vec![k as f64; 2]);
        }
    }

    #[test]
    fn second_backward_without_zeroing_doubles() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.5, -0.5]).with_grad());
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        let once = x.grad().unwrap();
        tape.backward(loss).unwrap();
        let twice = x.grad().unwrap();
        assert_eq!(twice, once.iter().map(|g| 2.0 * g).collect::<Vec<_>>());
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), once);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.leaf(&t(&[2], &[3.0, 4.0]).with_grad());
        tape.backward(c.mul(x).unwrap().sum()).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn merge_rows_requires_full_cover() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([1, 2]));
        assert!(Var::merge_rows(2, &[(a, &[0])]).is_err());
        assert!(Var::merge_rows(1, &[(a, &[0]), (a, &[0])]).is_err());
    }

    #[test]
    fn bce_rejects_soft_targets() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros([1, 1]));
        assert!(matches!(
            l.bce_with_logits(&t(&[1, 1], &[0.5])),
            Err(Error::Validation(_))
        ));
    }
}
