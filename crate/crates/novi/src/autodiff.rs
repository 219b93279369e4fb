//! Tape-based reverse-mode differentiation over tensor primitives.
//!
//! The adjoint pass is re-entrant: `grad_vars` emits the adjoint computation
//! as ordinary tape nodes, so gradients of gradients (double backward,
//! forward-over-reverse JVPs) come out of the same machinery. Every vjp below
//! is itself written in terms of taped primitives and is linear in the
//! incoming adjoint, which is what makes the re-entry sound.
//!
//! A tape is confined to one logical thread and is cheap to create; training
//! uses one tape per objective evaluation and drops it afterwards.

use crate::error::{NoviError, Result};
use crate::tensor::{CholeskyFactor, Side, Tensor};
use std::cell::RefCell;
use std::collections::{BinaryHeap, HashMap};
use std::rc::Rc;
use std::sync::Arc;

type Id = usize;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    AddScalar(Id, f64),
    MulScalar(Id, f64),
    /// `x^p` for constant `p`; domain `x > 0` unless `p` is a small integer.
    Powf(Id, f64),
    Exp(Id),
    Ln(Id),
    Tanh(Id),
    Sigmoid(Id),
    Relu(Id),
    /// `sqrt(max(x, 0))` with zero gradient on the clamped region.
    SqrtClamped(Id),
    /// `max(x, 0)` with zero gradient on the clamped region.
    ClampMin0(Id),
    Sum(Id),
    RowSums(Id),
    ColSums(Id),
    /// Vector of length m replicated into n rows.
    BroadcastRow(Id, usize),
    /// Vector of length n replicated into m columns.
    BroadcastCol(Id, usize),
    /// Scalar replicated into an arbitrary shape.
    BroadcastFill(Id),
    MatMul(Id, Id),
    Bmm(Id, Id),
    Transpose(Id),
    TransposeBatch(Id),
    SwapAxes01(Id),
    Reshape(Id),
    SliceRows(Id, usize, usize),
    SliceCols(Id, usize, usize),
    PadRows(Id, usize, usize),
    PadCols(Id, usize, usize),
    ConcatRows(Vec<Id>),
    ConcatCols(Vec<Id>),
    TileRows(Id, usize),
    PairwiseSqdist(Id, Id),
    /// Triangular solve against a constant factor.
    TriSolve(Arc<CholeskyFactor>, Id, Side),
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    needs_grad: bool,
}

/// Append-only record of a differentiable computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one tape node. The value behind a `Var` is immutable once
/// recorded.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every node recorded after `mark`. Vars created past the mark
    /// must not be used again.
    pub fn truncate(&self, mark: usize) {
        self.nodes.borrow_mut().truncate(mark);
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Record a constant; gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Record a differentiable leaf (a parameter or input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    fn value_of(&self, id: Id) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad_of(&self, id: Id) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn op_of(&self, id: Id) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    /// Taped reverse pass. Returns one adjoint `Var` per requested input;
    /// inputs the output does not depend on get zero adjoints. Because the
    /// adjoint computation is recorded, its outputs can be differentiated
    /// again (double backward).
    pub fn grad_vars<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if !std::ptr::eq(output.tape, self) {
            return Err(NoviError::contract("output lives on a different tape"));
        }
        for w in wrt {
            if !std::ptr::eq(w.tape, self) {
                return Err(NoviError::contract("wrt var lives on a different tape"));
            }
        }
        let out_val = self.value_of(output.id);
        if out_val.numel() != 1 {
            return Err(NoviError::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        // Sparse reverse sweep: visit only ancestors of the output, largest
        // id first (the tape is topologically ordered, so every consumer of
        // a node has a larger id and is processed before it).
        let mut adj: HashMap<Id, Var<'t>> = HashMap::new();
        let mut heap: BinaryHeap<Id> = BinaryHeap::new();
        adj.insert(
            output.id,
            self.constant(Tensor::filled(out_val.shape(), 1.0)),
        );
        heap.push(output.id);

        while let Some(id) = heap.pop() {
            let d = adj[&id];
            let op = self.op_of(id);
            if matches!(op, Op::Leaf) {
                continue;
            }
            let this = Var { tape: self, id };
            let contribs = self.vjp(&op, this, d)?;
            for (parent, contrib) in contribs {
                if !self.needs_grad_of(parent) {
                    continue;
                }
                match adj.entry(parent) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let sum = e.get().add(contrib)?;
                        e.insert(sum);
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(contrib);
                        heap.push(parent);
                    }
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                adj.get(&w.id).copied().unwrap_or_else(|| {
                    self.constant(Tensor::zeros(&w.value().shape().to_vec()))
                })
            })
            .collect())
    }

    /// Reverse pass returning plain tensors.
    pub fn backward<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Tensor>> {
        let vars = self.grad_vars(output, wrt)?;
        Ok(vars.iter().map(|v| (*v.value()).clone()).collect())
    }

    fn vjp<'t>(&'t self, op: &Op, out: Var<'t>, d: Var<'t>) -> Result<Vec<(Id, Var<'t>)>> {
        let v = |id: Id| Var { tape: self, id };
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, d), (b, d)],
            Op::Sub(a, b) => vec![(a, d), (b, d.scale(-1.0))],
            Op::Mul(a, b) => vec![(a, d.mul(v(b))?), (b, d.mul(v(a))?)],
            Op::Div(a, b) => {
                let da = d.div(v(b))?;
                let db = d.mul(out.div(v(b))?)?.scale(-1.0);
                vec![(a, da), (b, db)]
            }
            Op::AddScalar(a, _) => vec![(a, d)],
            Op::MulScalar(a, c) => vec![(a, d.scale(c))],
            Op::Powf(a, p) => {
                let da = d.mul(v(a).powf(p - 1.0).scale(p))?;
                vec![(a, da)]
            }
            Op::Exp(a) => vec![(a, d.mul(out)?)],
            Op::Ln(a) => vec![(a, d.div(v(a))?)],
            Op::Tanh(a) => {
                let sech2 = out.mul(out)?.scale(-1.0).add_scalar(1.0);
                vec![(a, d.mul(sech2)?)]
            }
            Op::Sigmoid(a) => {
                let gate = out.mul(out.scale(-1.0).add_scalar(1.0))?;
                vec![(a, d.mul(gate)?)]
            }
            Op::Relu(a) => {
                let mask = self.constant(self.value_of(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                vec![(a, d.mul(mask)?)]
            }
            Op::SqrtClamped(a) => {
                let mask = self.constant(self.value_of(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                // Offset keeps the reciprocal finite on the clamped region,
                // where the mask zeroes it anyway.
                let half_recip = out.add_scalar(1e-150).powf(-1.0).scale(0.5);
                vec![(a, d.mul(mask)?.mul(half_recip)?)]
            }
            Op::ClampMin0(a) => {
                let mask = self.constant(self.value_of(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                vec![(a, d.mul(mask)?)]
            }
            Op::Sum(a) => {
                let shape = self.value_of(a).shape().to_vec();
                vec![(a, d.broadcast_fill(&shape)?)]
            }
            Op::RowSums(a) => {
                let m = self.value_of(a).shape()[1];
                vec![(a, d.broadcast_col(m)?)]
            }
            Op::ColSums(a) => {
                let n = self.value_of(a).shape()[0];
                vec![(a, d.broadcast_row(n)?)]
            }
            Op::BroadcastRow(a, _) => vec![(a, d.col_sums()?)],
            Op::BroadcastCol(a, _) => vec![(a, d.row_sums()?)],
            Op::BroadcastFill(a) => {
                let shape = self.value_of(a).shape().to_vec();
                vec![(a, d.sum()?.reshape(&shape)?)]
            }
            Op::MatMul(a, b) => {
                let da = d.matmul(v(b).transpose()?)?;
                let db = v(a).transpose()?.matmul(d)?;
                vec![(a, da), (b, db)]
            }
            Op::Bmm(a, b) => {
                let da = d.bmm(v(b).transpose_batch()?)?;
                let db = v(a).transpose_batch()?.bmm(d)?;
                vec![(a, da), (b, db)]
            }
            Op::Transpose(a) => vec![(a, d.transpose()?)],
            Op::TransposeBatch(a) => vec![(a, d.transpose_batch()?)],
            Op::SwapAxes01(a) => vec![(a, d.swap_axes01()?)],
            Op::Reshape(a) => {
                let shape = self.value_of(a).shape().to_vec();
                vec![(a, d.reshape(&shape)?)]
            }
            Op::SliceRows(a, r0, r1) => {
                let n = self.value_of(a).shape()[0];
                vec![(a, d.pad_rows(r0, n - r1)?)]
            }
            Op::SliceCols(a, c0, c1) => {
                let m = self.value_of(a).shape()[1];
                vec![(a, d.pad_cols(c0, m - c1)?)]
            }
            Op::PadRows(a, before, _) => {
                let n = self.value_of(a).shape()[0];
                vec![(a, d.slice_rows(before, before + n)?)]
            }
            Op::PadCols(a, before, _) => {
                let m = self.value_of(a).shape()[1];
                vec![(a, d.slice_cols(before, before + m)?)]
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                let mut contribs = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.value_of(p).shape()[0];
                    contribs.push((p, d.slice_rows(offset, offset + n)?));
                    offset += n;
                }
                contribs
            }
            Op::ConcatCols(ref parts) => {
                let mut offset = 0;
                let mut contribs = Vec::with_capacity(parts.len());
                for &p in parts {
                    let m = self.value_of(p).shape()[1];
                    contribs.push((p, d.slice_cols(offset, offset + m)?));
                    offset += m;
                }
                contribs
            }
            Op::TileRows(a, times) => {
                let n = self.value_of(a).shape()[0];
                let mut acc = d.slice_rows(0, n)?;
                for t in 1..times {
                    acc = acc.add(d.slice_rows(t * n, (t + 1) * n)?)?;
                }
                vec![(a, acc)]
            }
            Op::PairwiseSqdist(x, z) => {
                let xv = v(x);
                let zv = v(z);
                let k = self.value_of(x).shape()[1];
                // d/dx = 2 [rowsum(d) * x - d z], d/dz = 2 [colsum(d) * z - d^T x]
                let dx = d
                    .row_sums()?
                    .broadcast_col(k)?
                    .mul(xv)?
                    .sub(d.matmul(zv)?)?
                    .scale(2.0);
                let dz = d
                    .col_sums()?
                    .broadcast_col(k)?
                    .mul(zv)?
                    .sub(d.transpose()?.matmul(xv)?)?
                    .scale(2.0);
                vec![(x, dx), (z, dz)]
            }
            Op::TriSolve(ref factor, b, side) => {
                let flipped = match side {
                    Side::Lower => Side::Upper,
                    Side::Upper => Side::Lower,
                };
                vec![(b, d.tri_solve(Arc::clone(factor), flipped)?)]
            }
        })
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs_grad_of(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op, value: Tensor) -> Var<'t> {
        let ng = self.needs_grad();
        self.tape.push(op, value, ng)
    }

    fn binary(self, other: Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        let ng = self.needs_grad() || other.needs_grad();
        self.tape.push(op, value, ng)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().add(&other.value())?;
        Ok(self.binary(other, Op::Add(self.id, other.id), value))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().sub(&other.value())?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), value))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().mul(&other.value())?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), value))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().zip_map(&other.value(), |a, b| a / b)?;
        Ok(self.binary(other, Op::Div(self.id, other.id), value))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().add_scalar(c);
        self.unary(Op::AddScalar(self.id, c), value)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().scale(c);
        self.unary(Op::MulScalar(self.id, c), value)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let value = self.value().map(|x| x.powf(p));
        self.unary(Op::Powf(self.id, p), value)
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), value)
    }

    pub fn ln(self) -> Var<'t> {
        let value = self.value().map(f64::ln);
        self.unary(Op::Ln(self.id), value)
    }

    pub fn tanh(self) -> Var<'t> {
        let value = self.value().map(f64::tanh);
        self.unary(Op::Tanh(self.id), value)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(Op::Sigmoid(self.id), value)
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.value().map(|x| x.max(0.0));
        self.unary(Op::Relu(self.id), value)
    }

    /// `sqrt(max(x, 0))`; gradient is zero on the clamped region.
    pub fn sqrt_clamped(self) -> Var<'t> {
        let value = self.value().map(|x| if x > 0.0 { x.sqrt() } else { 0.0 });
        self.unary(Op::SqrtClamped(self.id), value)
    }

    pub fn clamp_min0(self) -> Var<'t> {
        let value = self.value().map(|x| x.max(0.0));
        self.unary(Op::ClampMin0(self.id), value)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.value().sum());
        Ok(self.unary(Op::Sum(self.id), value))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        Ok(self.sum()?.scale(1.0 / n))
    }

    pub fn row_sums(self) -> Result<Var<'t>> {
        let value = self.value().row_sums()?;
        Ok(self.unary(Op::RowSums(self.id), value))
    }

    pub fn col_sums(self) -> Result<Var<'t>> {
        let value = self.value().col_sums()?;
        Ok(self.unary(Op::ColSums(self.id), value))
    }

    /// Replicate a length-m vector into n rows of an `(n, m)` tensor.
    pub fn broadcast_row(self, n: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 1 {
            return Err(NoviError::dim("broadcast_row expects a vector"));
        }
        let m = v.shape()[0];
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.unary(Op::BroadcastRow(self.id, n), value))
    }

    /// Replicate a length-n vector into m columns of an `(n, m)` tensor.
    pub fn broadcast_col(self, m: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 1 {
            return Err(NoviError::dim("broadcast_col expects a vector"));
        }
        let n = v.shape()[0];
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for _ in 0..m {
                data.push(v.data()[i]);
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.unary(Op::BroadcastCol(self.id, m), value))
    }

    /// Replicate a scalar into an arbitrary shape.
    pub fn broadcast_fill(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() != 1 {
            return Err(NoviError::dim("broadcast_fill expects a scalar"));
        }
        let value = Tensor::filled(shape, v.item());
        Ok(self.unary(Op::BroadcastFill(self.id), value))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        Ok(self.binary(other, Op::MatMul(self.id, other.id), value))
    }

    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().bmm(&other.value())?;
        Ok(self.binary(other, Op::Bmm(self.id, other.id), value))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        Ok(self.unary(Op::Transpose(self.id), value))
    }

    pub fn transpose_batch(self) -> Result<Var<'t>> {
        let value = self.value().transpose_batch()?;
        Ok(self.unary(Op::TransposeBatch(self.id), value))
    }

    pub fn swap_axes01(self) -> Result<Var<'t>> {
        let value = self.value().swap_axes01()?;
        Ok(self.unary(Op::SwapAxes01(self.id), value))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), value))
    }

    pub fn slice_rows(self, r0: usize, r1: usize) -> Result<Var<'t>> {
        let value = self.value().slice_rows(r0, r1)?;
        Ok(self.unary(Op::SliceRows(self.id, r0, r1), value))
    }

    pub fn slice_cols(self, c0: usize, c1: usize) -> Result<Var<'t>> {
        let value = self.value().slice_cols(c0, c1)?;
        Ok(self.unary(Op::SliceCols(self.id, c0, c1), value))
    }

    pub fn pad_rows(self, before: usize, after: usize) -> Result<Var<'t>> {
        let value = self.value().pad_rows(before, after)?;
        Ok(self.unary(Op::PadRows(self.id, before, after), value))
    }

    pub fn pad_cols(self, before: usize, after: usize) -> Result<Var<'t>> {
        let value = self.value().pad_cols(before, after)?;
        Ok(self.unary(Op::PadCols(self.id, before, after), value))
    }

    pub fn tile_rows(self, times: usize) -> Result<Var<'t>> {
        let value = self.value().tile_rows(times)?;
        Ok(self.unary(Op::TileRows(self.id, times), value))
    }

    pub fn pairwise_sqdist(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().pairwise_sqdist(&other.value())?;
        Ok(self.binary(other, Op::PairwiseSqdist(self.id, other.id), value))
    }

    /// Solve `L x = b` (or `L^T x = b`) against a constant factor.
    pub fn tri_solve(self, factor: Arc<CholeskyFactor>, side: Side) -> Result<Var<'t>> {
        let value = crate::tensor::tri_solve(&factor, &self.value(), side)?;
        Ok(self.unary(Op::TriSolve(factor, self.id, side), value))
    }

    /// Apply `(L L^T)^{-1}` against a constant factor (two solves).
    pub fn chol_solve(self, factor: Arc<CholeskyFactor>) -> Result<Var<'t>> {
        self.tri_solve(Arc::clone(&factor), Side::Lower)?
            .tri_solve(factor, Side::Upper)
    }

    /// Row-wise log-sum-exp of an `(n, m)` tensor, shifted by the row maxima
    /// (taken as constants) for stability.
    pub fn logsumexp_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        let (n, m) = match v.shape() {
            [n, m] => (*n, *m),
            s => return Err(NoviError::dim(format!("logsumexp_rows on shape {s:?}"))),
        };
        let maxima: Vec<f64> = (0..n)
            .map(|i| {
                v.data()[i * m..(i + 1) * m]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let max_const = self.tape.constant(Tensor::new(vec![n], maxima)?);
        let shifted = self.sub(max_const.broadcast_col(m)?)?;
        shifted
            .exp()
            .row_sums()?
            .ln()
            .add(max_const)
    }

    /// Inner product of two equally-shaped vars.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other)?.sum()
    }
}

/// Directional derivative of `output` w.r.t. `input` along `tangent`,
/// recorded on the tape so it can be reverse-differentiated in turn.
///
/// Implemented with two taped reverse passes through a dummy cotangent:
/// `d/dv <J^T v, w> = J w`. Both passes are linear in the dummy, so the
/// result is exact.
pub fn jvp<'t>(
    tape: &'t Tape,
    output: Var<'t>,
    input: Var<'t>,
    tangent: &Tensor,
) -> Result<Var<'t>> {
    if tangent.shape() != input.value().shape() {
        return Err(NoviError::dim(format!(
            "jvp tangent shape {:?} vs input shape {:?}",
            tangent.shape(),
            input.value().shape()
        )));
    }
    if !input.needs_grad() {
        return Err(NoviError::contract("jvp input must be differentiable"));
    }
    let dummy = tape.leaf(Tensor::zeros(&output.value().shape().to_vec()));
    let s = output.mul(dummy)?.sum()?;
    let pullback = tape.grad_vars(s, &[input])?[0];
    let t = pullback.mul(tape.constant(tangent.clone()))?.sum()?;
    Ok(tape.grad_vars(t, &[dummy])?[0])
}


impl<'t> Var<'t> {
    /// Concatenate vars along rows.
    pub fn concat_rows_join(parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(NoviError::input("concat of zero vars"));
        }
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat_rows(&refs)?;
        let ng = parts.iter().any(|p| p.needs_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Op::ConcatRows(ids), value, ng))
    }

    /// Concatenate vars along columns.
    pub fn concat_cols_join(parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(NoviError::input("concat of zero vars"));
        }
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat_cols(&refs)?;
        let ng = parts.iter().any(|p| p.needs_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Op::ConcatCols(ids), value, ng))
    }
}
