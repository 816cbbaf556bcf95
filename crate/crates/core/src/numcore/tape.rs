//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value. Node indices
//! are a topological order, so the reverse sweep walks them backwards once.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_into, softmax_in_place, MatView, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-6;

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Silu(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Rope { x: Var, table: Rc<RotationTable<T>> },
    Sum(Var),
    Mean(Var),
}

/// Per-row rotation angles (as cos/sin) for rotary position encoding.
#[derive(Clone, Debug)]
pub struct RotationTable<T> {
    /// Channel pairs per head.
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Scalar> RotationTable<T> {
    pub fn rows(&self) -> usize {
        self.cos.len().checked_div(self.pairs).unwrap_or(0)
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients of one reverse sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node; zero when the node did not reach the loss.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Writes parameter gradients into the store. Parameters that appear on
    /// the tape but did not reach the loss get a zero gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, scale: T) -> Result<()> {
        for &(id, v) in &self.params {
            match &self.grads[v.0] {
                Some(g) => store.accumulate_grad(id, g, scale)?,
                None => {
                    let shape = store.value(id).shape().to_vec();
                    store.accumulate_grad(id, &Tensor::zeros(&shape), scale)?;
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

fn add_slice_into<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let acc = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(acc.data_mut());
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    /// Leaf for a parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), "param")?;
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let av = MatView::row_major(self.value(a).data(), ar, ac);
        let bv = MatView::row_major(self.value(b).data(), br, bc);
        let av = if ta { av.t() } else { av };
        let bv = if tb { bv.t() } else { bv };
        if av.cols != bv.rows {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![T::zero(); m * n];
        gemm_into(av, bv, &mut out, n as isize, 1, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a, b, ta, tb }, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    fn row_operand(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (r, c) = self.dims2(x)?;
        if self.value(row).numel() != c {
            return Err(Error::shape(op, self.shape(x), self.shape(row)));
        }
        Ok((r, c))
    }

    /// `x[r×c] + row[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.row_operand("add_row", x, row)?;
        let rv = self.value(row).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(rv) {
                *o = *o + b;
            }
        }
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    /// `x[r×c] ⊙ row[c]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.row_operand("mul_row", x, row)?;
        let rv = self.value(row).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(rv) {
                *o = *o * b;
            }
        }
        self.push(out, Op::MulRow(x, row), "mul_row")
    }

    /// `x[r×c] ⊙ col[r]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(col).numel() != r {
            return Err(Error::shape("mul_col", self.shape(x), self.shape(col)));
        }
        let cv = self.value(col).data();
        let mut out = self.value(x).clone();
        for (chunk, &s) in out.data_mut().chunks_mut(c.max(1)).zip(cv) {
            for o in chunk.iter_mut() {
                *o = *o * s;
            }
        }
        self.push(out, Op::MulCol(x, col), "mul_col")
    }

    /// `x * s` where `s` holds exactly one value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let k = self.value(s).data()[0];
        let out = self.value(x).scale(k);
        self.push(out, Op::MulScalar(x, s), "mul_scalar")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::from_f64(k);
        let out = self.value(x).scale(k);
        self.push(out, Op::Scale(x, k), "scale")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_last()?;
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        let n = T::from_f64(c as f64);
        let eps = T::from_f64(LN_EPS);
        for (row, orow) in xv.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = row
                .iter()
                .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
                / n;
            let is = (var + eps).sqrt().recip();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push(value, Op::LayerNorm { x, inv_std }, "layer_norm")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(x), "silu")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid_shape("concat_rows", "no inputs"))?;
        let (_, c) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, c2) = self.dims2(x)?;
            if c2 != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push(value, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if start + len > r {
            return Err(Error::invalid_shape(
                "slice_rows",
                format!("rows {start}..{} out of {r}", start + len),
            ));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        self.push(value, Op::SliceRows { x, start }, "slice_rows")
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid_shape(
                "gather_rows",
                format!("row {bad} out of {r}"),
            ));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        self.push(value, Op::GatherRows { x, idx }, "gather_rows")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid_shape("concat_cols", "no inputs"))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r2, c) = self.dims2(x)?;
            if r2 != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        self.push(value, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if start + len > c {
            return Err(Error::invalid_shape(
                "slice_cols",
                format!("cols {start}..{} out of {c}", start + len),
            ));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        self.push(value, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Rotates channel pairs `(2p, 2p+1)` of every head chunk of each row.
    pub fn rope(&mut self, x: Var, table: Rc<RotationTable<T>>) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let head = table.pairs * 2;
        if table.rows() != r || head == 0 || c % head != 0 {
            return Err(Error::invalid_shape(
                "rope",
                format!(
                    "input {r}x{c} vs table {} rows x {} channels",
                    table.rows(),
                    head
                ),
            ));
        }
        let mut out = self.value(x).clone();
        rotate(out.data_mut(), r, c, &table, false);
        self.push(out, Op::Rope { x, table }, "rope")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                params.push((id, Var(i)));
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        // parameters recorded after the loss node still belong to the tape
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if let Op::Param(id) = node.op {
                params.push((id, Var(i)));
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.dims2(a)?;
                let (br, bc) = self.dims2(b)?;
                let av = MatView::row_major(self.value(a).data(), ar, ac);
                let bv = MatView::row_major(self.value(b).data(), br, bc);
                let a_eff = if ta { av.t() } else { av };
                let b_eff = if tb { bv.t() } else { bv };
                let (m, n) = (a_eff.rows, b_eff.cols);
                let gv = MatView::row_major(g.data(), m, n);
                // d op(a) = g · op(b)ᵀ, written back in a's storage layout
                let (rs, cs) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
                add_slice_into(&mut grads[a.0], &[ar, ac], |buf| {
                    gemm_into(gv, b_eff.t(), buf, rs, cs, true)
                });
                let (rs, cs) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
                add_slice_into(&mut grads[b.0], &[br, bc], |buf| {
                    gemm_into(a_eff.t(), gv, buf, rs, cs, true)
                });
            }
            &Op::Add(a, b) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.clone());
            }
            &Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(b), "mul", |x, y| x * y)?;
                let gb = g.zip_map(self.value(a), "mul", |x, y| x * y)?;
                add_into(&mut grads[a.0], ga);
                add_into(&mut grads[b.0], gb);
            }
            &Op::AddRow(x, row) => {
                let (_, c) = self.dims2(x)?;
                add_into(&mut grads[x.0], g.clone());
                let rshape = self.shape(row).to_vec();
                add_slice_into(&mut grads[row.0], &rshape, |buf| {
                    for chunk in g.data().chunks(c) {
                        for (o, &v) in buf.iter_mut().zip(chunk) {
                            *o = *o + v;
                        }
                    }
                });
            }
            &Op::MulRow(x, row) => {
                let (_, c) = self.dims2(x)?;
                let rv = self.value(row).data();
                let xv = self.value(x).data();
                let mut gx = g.clone();
                for chunk in gx.data_mut().chunks_mut(c) {
                    for (o, &s) in chunk.iter_mut().zip(rv) {
                        *o = *o * s;
                    }
                }
                add_into(&mut grads[x.0], gx);
                let rshape = self.shape(row).to_vec();
                add_slice_into(&mut grads[row.0], &rshape, |buf| {
                    for (gc, xc) in g.data().chunks(c).zip(xv.chunks(c)) {
                        for ((o, &gv), &xv) in buf.iter_mut().zip(gc).zip(xc) {
                            *o = *o + gv * xv;
                        }
                    }
                });
            }
            &Op::MulCol(x, col) => {
                let (_, c) = self.dims2(x)?;
                let c = c.max(1);
                let cv = self.value(col).data();
                let xv = self.value(x).data();
                let mut gx = g.clone();
                for (chunk, &s) in gx.data_mut().chunks_mut(c).zip(cv) {
                    for o in chunk.iter_mut() {
                        *o = *o * s;
                    }
                }
                add_into(&mut grads[x.0], gx);
                let cshape = self.shape(col).to_vec();
                add_slice_into(&mut grads[col.0], &cshape, |buf| {
                    for ((o, gc), xc) in buf.iter_mut().zip(g.data().chunks(c)).zip(xv.chunks(c)) {
                        let dot = gc.iter().zip(xc).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        *o = *o + dot;
                    }
                });
            }
            &Op::MulScalar(x, s) => {
                let k = self.value(s).data()[0];
                add_into(&mut grads[x.0], g.scale(k));
                let dot = g
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .fold(T::zero(), |a, (&p, &q)| a + p * q);
                let sshape = self.shape(s).to_vec();
                add_into(&mut grads[s.0], Tensor::full(&sshape, dot));
            }
            &Op::Scale(x, k) => add_into(&mut grads[x.0], g.scale(k)),
            &Op::Softmax(x) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap_or(&1);
                let mut gx = vec![T::zero(); y.numel()];
                for ((o, yr), gr) in gx
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = yv * (gv - dot);
                    }
                }
                add_into(&mut grads[x.0], Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let (_, c) = y.dims2()?;
                let n = T::from_f64(c as f64);
                let mut gx = vec![T::zero(); y.numel()];
                for (((o, yr), gr), &is) in gx
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                    .zip(inv_std)
                {
                    let mg = gr.iter().fold(T::zero(), |a, &b| a + b) / n;
                    let mgy = gr.iter().zip(yr).fold(T::zero(), |a, (&p, &q)| a + p * q) / n;
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = is * (gv - mg - yv * mgy);
                    }
                }
                add_into(&mut grads[x.0], Tensor::new(y.shape().to_vec(), gx)?);
            }
            &Op::Silu(x) => {
                let gx = g.zip_map(self.value(x), "silu", |gv, xv| {
                    let s = (T::one() + (-xv).exp()).recip();
                    gv * s * (T::one() + xv * (T::one() - s))
                })?;
                add_into(&mut grads[x.0], gx);
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    let part = Tensor::new(self.shape(x).to_vec(), g.data()[offset..offset + n].to_vec())?;
                    add_into(&mut grads[x.0], part);
                    offset += n;
                }
            }
            &Op::SliceRows { x, start } => {
                let (_, c) = self.dims2(x)?;
                let xshape = self.shape(x).to_vec();
                add_slice_into(&mut grads[x.0], &xshape, |buf| {
                    for (o, &v) in buf[start * c..start * c + g.numel()].iter_mut().zip(g.data()) {
                        *o = *o + v;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let (_, c) = self.dims2(*x)?;
                let xshape = self.shape(*x).to_vec();
                add_slice_into(&mut grads[x.0], &xshape, |buf| {
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &v) in buf[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g.data()[k * c..(k + 1) * c])
                        {
                            *o = *o + v;
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let (r, total) = g.dims2()?;
                let mut start = 0;
                for &x in xs {
                    let (_, w) = self.dims2(x)?;
                    let mut part = Vec::with_capacity(r * w);
                    for i in 0..r {
                        part.extend_from_slice(&g.data()[i * total + start..i * total + start + w]);
                    }
                    add_into(&mut grads[x.0], Tensor::new(vec![r, w], part)?);
                    start += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.dims2(x)?;
                let (_, len) = g.dims2()?;
                let xshape = self.shape(x).to_vec();
                add_slice_into(&mut grads[x.0], &xshape, |buf| {
                    for i in 0..r {
                        for j in 0..len {
                            buf[i * c + start + j] = buf[i * c + start + j] + g.data()[i * len + j];
                        }
                    }
                });
            }
            &Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(x))?;
                add_into(&mut grads[x.0], gx);
            }
            Op::Rope { x, table } => {
                let (r, c) = self.dims2(*x)?;
                let mut gx = g.clone();
                rotate(gx.data_mut(), r, c, table, true);
                add_into(&mut grads[x.0], gx);
            }
            &Op::Sum(x) => {
                let s = g.data()[0];
                add_into(&mut grads[x.0], Tensor::full(self.shape(x), s));
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel().max(1);
                let s = g.data()[0] / T::from_f64(n as f64);
                add_into(&mut grads[x.0], Tensor::full(self.shape(x), s));
            }
        }
        Ok(())
    }
}

/// In-place pairwise rotation; `inverse` applies the transpose rotation.
pub(crate) fn rotate<T: Scalar>(data: &mut [T], rows: usize, cols: usize, table: &RotationTable<T>, inverse: bool) {
    let pairs = table.pairs;
    let head = pairs * 2;
    for r in 0..rows {
        let cos = &table.cos[r * pairs..(r + 1) * pairs];
        let sin = &table.sin[r * pairs..(r + 1) * pairs];
        let row = &mut data[r * cols..(r + 1) * cols];
        for chunk in row.chunks_mut(head) {
            for p in 0..pairs {
                let (x0, x1) = (chunk[2 * p], chunk[2 * p + 1]);
                let (c, s) = (cos[p], if inverse { -sin[p] } else { sin[p] });
                chunk[2 * p] = x0 * c - x1 * s;
                chunk[2 * p + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Row-wise softmax of a plain tensor slice (shared with the attention oracle).
pub fn softmax_rows<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        softmax_in_place(row);
    }
}
