//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation in execution order. Values are computed
//! eagerly; [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients additively into every node that requires them. A graph is built
//! for one forward/backward pass and then dropped.

use std::rc::Rc;

use super::param::{ParamId, ParamStore};
use super::resample::ResamplePlan;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll {
        x: Var,
    },
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    DivRows {
        num: Var,
        den: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Var,
    },
    Resample {
        x: Var,
        plan: Rc<ResamplePlan>,
    },
    Bce {
        y: Var,
        p: Var,
        lo: f64,
        hi: f64,
    },
    SoftDice {
        y: Var,
        p: Var,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution-ordered tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
    corrupt_backward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every parameter of `store` as a leaf. Trainable parameters
    /// require gradients, frozen ones do not.
    pub fn bind(&mut self, store: &ParamStore) {
        self.params = store
            .iter()
            .map(|p| Some(self.leaf(p.tensor.clone(), p.trainable)))
            .collect();
    }

    /// Like [`Graph::bind`], but nothing requires a gradient.
    pub fn bind_frozen(&mut self, store: &ParamStore) {
        self.params = store.iter().map(|p| Some(self.leaf(p.tensor.clone(), false))).collect();
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params
            .get(id.index())
            .copied()
            .flatten()
            .unwrap_or_else(|| panic!("parameter {id:?} not bound to this graph"))
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::from_index(i), v)))
    }

    /// Test hook: perturbs the matmul backward rule so gradient checks fail.
    pub fn set_corrupt_backward(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v`
    /// requires one and was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
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

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- operations -------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new([m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[0, 0]));
        }
        let (rows, cols) = (s[0], s[1]);
        let value = Tensor::new([cols, rows], transpose_raw(self.data(x), rows, cols))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose { x, rows, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let value = self
            .value(x)
            .reshape(shape.clone())
            .map_err(|_| Error::dim("reshape", self.shape(x), &shape))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul { a, b }))
    }

    /// Adds a length-`n` bias to every row of a tensor whose last extent is `n`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("rank >= 1");
        if self.value(bias).numel() != n {
            return Err(Error::dim("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.data(x).to_vec();
        softmax_raw(&mut out, outer, len, inner);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape (a rank-1 input gives `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!(
                "sum axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &e)| e)
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SumAxis { x, outer, len, inner }, rg))
    }

    /// Divides row `r` of a 2-D tensor by `den[r]`.
    pub fn div_rows(&mut self, num: Var, den: Var) -> Result<Var> {
        let s = self.shape(num).to_vec();
        if s.len() != 2 || self.value(den).numel() != s[0] {
            return Err(Error::dim("div_rows", &s, self.shape(den)));
        }
        let d = self.data(den).to_vec();
        if d.contains(&0.0) {
            return Err(Error::Degenerate("division by zero row denominator".into()));
        }
        let mut data = self.data(num).to_vec();
        for (row, dv) in data.chunks_exact_mut(s[1]).zip(&d) {
            row.iter_mut().for_each(|v| *v /= dv);
        }
        let value = Tensor::new(s, data)?;
        let rg = self.rg(&[num, den]);
        Ok(self.push(value, Op::DivRows { num, den }, rg))
    }

    /// Scales every row of a 2-D tensor to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("normalize_rows", &s, &[0, 0]));
        }
        let mut data = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(s[0]);
        for row in data.chunks_exact_mut(s[1]) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate("normalising a zero-norm row".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor::new(s, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let rows = self.shape(first)[0];
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            meta.push((p, s[1]));
        }
        let total: usize = meta.iter().map(|&(_, c)| c).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &meta {
                data.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::new([rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols { parts: meta, rows }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::dim("slice_cols", &s, &[start, len]));
        }
        let src = self.data(x);
        let data = (0..s[0])
            .flat_map(|r| src[r * s[1] + start..r * s[1] + start + len].iter().copied())
            .collect();
        let value = Tensor::new([s[0], len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start, len }, rg))
    }

    /// 3-D convolution on a channels-last volume `[x, y, z, cin]` with a cubic
    /// odd kernel `[k, k, k, cin, cout]`, zero padding `k / 2` and `stride`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let geo = ConvGeom::new(self.shape(x), self.shape(w), self.shape(b), stride)?;
        let out = geo.forward(self.data(x), self.data(w), self.data(b));
        let value = Tensor::new(geo.out_shape(), out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv3d { x, w, b, stride }, rg))
    }

    /// Transposed convolution with kernel 2 and stride 2: each input voxel
    /// expands into a 2x2x2 output block. Weight is `[2, 2, 2, cin, cout]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let geo = UpGeom::new(self.shape(x), self.shape(w), self.shape(b))?;
        let out = geo.forward(self.data(x), self.data(w), self.data(b));
        let value = Tensor::new(geo.out_shape(), out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::ConvTranspose3d { x, w, b }, rg))
    }

    /// Applies a precomputed spatial resampling to a channels-last volume.
    pub fn resample(&mut self, x: Var, plan: Rc<ResamplePlan>) -> Result<Var> {
        let value = plan.apply(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Resample { x, plan }, rg))
    }

    /// Mean binary cross-entropy with predictions clamped to `[lo, hi]`.
    pub fn bce(&mut self, y: Var, p: Var, lo: f64, hi: f64) -> Result<Var> {
        self.same_shape("bce", y, p)?;
        let n = self.value(p).numel() as f64;
        let total: f64 = self
            .data(y)
            .iter()
            .zip(self.data(p))
            .map(|(&t, &q)| {
                let c = q.clamp(lo, hi);
                -(t * c.ln() + (1.0 - t) * (1.0 - c).ln())
            })
            .sum();
        let rg = self.rg(&[y, p]);
        Ok(self.push(Tensor::scalar(total / n), Op::Bce { y, p, lo, hi }, rg))
    }

    /// `1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps)`.
    pub fn soft_dice(&mut self, y: Var, p: Var, eps: f64) -> Result<Var> {
        self.same_shape("soft_dice", y, p)?;
        let (num, den) = dice_terms(self.data(y), self.data(p), eps);
        let rg = self.rg(&[y, p]);
        Ok(self.push(Tensor::scalar(1.0 - num / den), Op::SoftDice { y, p, eps }, rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from a one-element `root`. Gradients of previous calls
    /// are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot, &self.nodes);
    }

    fn backward_node(&mut self, idx: usize, g: &[f64]) {
        // Ops are cheap to match on by reference; clone the small handles out
        // so `acc` can borrow the tape mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let skew = if self.corrupt_backward { 1.01 } else { 1.0 };
                self.acc(a, |ga, nodes| {
                    // ga += g . b^T
                    let bd = nodes[b.0].value.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            ga[i * k + p] += skew * s;
                        }
                    }
                });
                self.acc(b, |gb, nodes| {
                    // gb += a^T . g
                    let ad = nodes[a.0].value.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            &Op::Transpose { x, rows, cols } => {
                // value is [cols, rows]; transpose g back
                self.acc(x, |gx, _| {
                    for c in 0..cols {
                        for r in 0..rows {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            &Op::Reshape { x } => self.acc(x, |gx, _| add_into(gx, g)),
            &Op::Add { a, b } => {
                self.acc(a, |ga, _| add_into(ga, g));
                self.acc(b, |gb, _| add_into(gb, g));
            }
            &Op::Sub { a, b } => {
                self.acc(a, |ga, _| add_into(ga, g));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            &Op::Mul { a, b } => {
                self.acc(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    for ((d, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                });
                self.acc(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    for ((d, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                });
            }
            &Op::AddRowBias { x, bias } => {
                self.acc(x, |gx, _| add_into(gx, g));
                self.acc(bias, |gb, _| {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Scale { x, c } => {
                self.acc(x, |gx, _| gx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v));
            }
            &Op::Relu { x } => {
                self.acc(x, |gx, nodes| {
                    let xd = nodes[x.0].value.data();
                    for ((d, gv), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            &Op::Sigmoid { x } => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(x, |gx, _| {
                    for ((d, gv), yv) in gx.iter_mut().zip(g).zip(&y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(x, |gx, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::SumAll { x } => {
                let gv = g[0];
                self.acc(x, |gx, _| gx.iter_mut().for_each(|d| *d += gv));
            }
            &Op::SumAxis { x, outer, len, inner } => {
                self.acc(x, |gx, _| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                gx[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            &Op::DivRows { num, den } => {
                let cols = self.shape(num)[1];
                let d = self.data(den).to_vec();
                self.acc(num, |gn, _| {
                    for ((dst, grow), dv) in gn.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(&d) {
                        for (a, b) in dst.iter_mut().zip(grow) {
                            *a += b / dv;
                        }
                    }
                });
                let out = self.nodes[idx].value.data().to_vec();
                self.acc(den, |gd, _| {
                    for (r, dst) in gd.iter_mut().enumerate() {
                        let s: f64 = g[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(&out[r * cols..(r + 1) * cols])
                            .map(|(a, b)| a * b)
                            .sum();
                        *dst -= s / d[r];
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = self.nodes[idx].value.data().to_vec();
                let cols = y.len() / norms.len();
                self.acc(*x, |gx, _| {
                    for (r, n) in norms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for i in span {
                            gx[i] += (g[i] - y[i] * dot) / n;
                        }
                    }
                });
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    self.acc(p, |gp, _| {
                        for r in 0..*rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            add_into(&mut gp[r * c..(r + 1) * c], src);
                        }
                    });
                    offset += c;
                }
            }
            &Op::SliceCols { x, start, len } => {
                let cols = self.shape(x)[1];
                self.acc(x, |gx, _| {
                    for (r, grow) in g.chunks_exact(len).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + len], grow);
                    }
                });
            }
            &Op::Conv3d { x, w, b, stride } => {
                let geo =
                    ConvGeom::new(self.shape(x), self.shape(w), self.shape(b), stride).expect("validated in forward");
                self.acc(x, |gx, nodes| geo.backward_input(g, nodes[w.0].value.data(), gx));
                self.acc(w, |gw, nodes| geo.backward_weight(g, nodes[x.0].value.data(), gw));
                self.acc(b, |gb, _| {
                    for row in g.chunks_exact(geo.cout) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::ConvTranspose3d { x, w, b } => {
                let geo = UpGeom::new(self.shape(x), self.shape(w), self.shape(b)).expect("validated in forward");
                self.acc(x, |gx, nodes| geo.backward_input(g, nodes[w.0].value.data(), gx));
                self.acc(w, |gw, nodes| geo.backward_weight(g, nodes[x.0].value.data(), gw));
                self.acc(b, |gb, _| {
                    for row in g.chunks_exact(geo.cout) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Resample { x, plan } => {
                let plan = Rc::clone(plan);
                self.acc(*x, |gx, _| plan.apply_transpose(g, gx));
            }
            &Op::Bce { y, p, lo, hi } => {
                let n = self.value(p).numel() as f64;
                let gv = g[0] / n;
                self.acc(p, |gp, nodes| {
                    let (yd, pd) = (nodes[y.0].value.data(), nodes[p.0].value.data());
                    for ((d, &t), &q) in gp.iter_mut().zip(yd).zip(pd) {
                        if q > lo && q < hi {
                            *d += gv * (-t / q + (1.0 - t) / (1.0 - q));
                        }
                    }
                });
                self.acc(y, |gy, nodes| {
                    let pd = nodes[p.0].value.data();
                    for (d, &q) in gy.iter_mut().zip(pd) {
                        let c = q.clamp(lo, hi);
                        *d -= gv * (c.ln() - (1.0 - c).ln());
                    }
                });
            }
            &Op::SoftDice { y, p, eps } => {
                let (num, den) = dice_terms(self.data(y), self.data(p), eps);
                let gv = g[0];
                let den2 = den * den;
                self.acc(p, |gp, nodes| {
                    let yd = nodes[y.0].value.data();
                    let pd = nodes[p.0].value.data();
                    for ((d, &t), &q) in gp.iter_mut().zip(yd).zip(pd) {
                        *d -= gv * (2.0 * t * den - num * 2.0 * q) / den2;
                    }
                });
                self.acc(y, |gy, nodes| {
                    let yd = nodes[y.0].value.data();
                    let pd = nodes[p.0].value.data();
                    for ((d, &t), &q) in gy.iter_mut().zip(yd).zip(pd) {
                        *d -= gv * (2.0 * q * den - num * 2.0 * t) / den2;
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

// ---- raw kernels ------------------------------------------------------------

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dice_terms(y: &[f64], p: &[f64], eps: f64) -> (f64, f64) {
    let (mut yp, mut yy, mut pp) = (0.0, 0.0, 0.0);
    for (&t, &q) in y.iter().zip(p) {
        yp += t * q;
        yy += t * t;
        pp += q * q;
    }
    (2.0 * yp + eps, yy + pp + eps)
}

/// `(outer, len, inner)` strides around `axis` of a row-major shape.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_raw(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| data[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (data[at(l)] - max).exp();
                data[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                data[at(l)] /= total;
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

struct ConvGeom {
    inp: [usize; 3],
    out: [usize; 3],
    k: usize,
    pad: usize,
    stride: usize,
    cin: usize,
    cout: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], bs: &[usize], stride: usize) -> Result<Self> {
        let (&[x, y, z, cin], &[k, k1, k2, wcin, cout]) = (xs, ws) else {
            return Err(Error::dim("conv3d", xs, ws));
        };
        if k != k1 || k != k2 || k % 2 == 0 || wcin != cin || bs != [cout] || stride == 0 {
            return Err(Error::dim("conv3d", xs, ws));
        }
        let pad = k / 2;
        let o = |e: usize| (e + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            inp: [x, y, z],
            out: [o(x), o(y), o(z)],
            k,
            pad,
            stride,
            cin,
            cout,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.out[0], self.out[1], self.out[2], self.cout]
    }

    /// Calls `f(out_voxel, in_voxel, kernel_tap)` for every in-bounds pair.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ix, iy, iz] = self.inp;
        let [ox, oy, oz] = self.out;
        let k = self.k;
        for a in 0..ox {
            for b in 0..oy {
                for c in 0..oz {
                    let o = (a * oy + b) * oz + c;
                    for ka in 0..k {
                        let Some(xa) = (a * self.stride + ka).checked_sub(self.pad) else {
                            continue;
                        };
                        if xa >= ix {
                            continue;
                        }
                        for kb in 0..k {
                            let Some(xb) = (b * self.stride + kb).checked_sub(self.pad) else {
                                continue;
                            };
                            if xb >= iy {
                                continue;
                            }
                            for kc in 0..k {
                                let Some(xc) = (c * self.stride + kc).checked_sub(self.pad) else {
                                    continue;
                                };
                                if xc >= iz {
                                    continue;
                                }
                                f(o, (xa * iy + xb) * iz + xc, (ka * k + kb) * k + kc);
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        let nvox = self.out.iter().product::<usize>();
        let mut out = Vec::with_capacity(nvox * cout);
        for _ in 0..nvox {
            out.extend_from_slice(b);
        }
        self.for_each_tap(|o, i, t| {
            let orow = &mut out[o * cout..(o + 1) * cout];
            for ci in 0..cin {
                let xv = x[i * cin + ci];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &w[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                for (ov, wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        });
        out
    }

    fn backward_input(&self, g: &[f64], w: &[f64], gx: &mut [f64]) {
        let (cin, cout) = (self.cin, self.cout);
        self.for_each_tap(|o, i, t| {
            let grow = &g[o * cout..(o + 1) * cout];
            for ci in 0..cin {
                let wrow = &w[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                let s: f64 = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                gx[i * cin + ci] += s;
            }
        });
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], gw: &mut [f64]) {
        let (cin, cout) = (self.cin, self.cout);
        self.for_each_tap(|o, i, t| {
            let grow = &g[o * cout..(o + 1) * cout];
            for ci in 0..cin {
                let xv = x[i * cin + ci];
                if xv == 0.0 {
                    continue;
                }
                let dst = &mut gw[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                for (d, gv) in dst.iter_mut().zip(grow) {
                    *d += xv * gv;
                }
            }
        });
    }
}

struct UpGeom {
    inp: [usize; 3],
    cin: usize,
    cout: usize,
}

impl UpGeom {
    fn new(xs: &[usize], ws: &[usize], bs: &[usize]) -> Result<Self> {
        let (&[x, y, z, cin], &[2, 2, 2, wcin, cout]) = (xs, ws) else {
            return Err(Error::dim("conv_transpose3d", xs, ws));
        };
        if wcin != cin || bs != [cout] {
            return Err(Error::dim("conv_transpose3d", xs, ws));
        }
        Ok(UpGeom {
            inp: [x, y, z],
            cin,
            cout,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.inp[0] * 2, self.inp[1] * 2, self.inp[2] * 2, self.cout]
    }

    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ix, iy, iz] = self.inp;
        let (oy, oz) = (iy * 2, iz * 2);
        for a in 0..ix {
            for b in 0..iy {
                for c in 0..iz {
                    let i = (a * iy + b) * iz + c;
                    for t in 0..8 {
                        let (da, db, dc) = (t >> 2, (t >> 1) & 1, t & 1);
                        let o = ((2 * a + da) * oy + 2 * b + db) * oz + 2 * c + dc;
                        f(o, i, t);
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        let nvox = self.inp.iter().product::<usize>() * 8;
        let mut out = Vec::with_capacity(nvox * cout);
        for _ in 0..nvox {
            out.extend_from_slice(b);
        }
        self.for_each_tap(|o, i, t| {
            let orow = &mut out[o * cout..(o + 1) * cout];
            for ci in 0..cin {
                let xv = x[i * cin + ci];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &w[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                for (ov, wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        });
        out
    }

    fn backward_input(&self, g: &[f64], w: &[f64], gx: &mut [f64]) {
        let (cin, cout) = (self.cin, self.cout);
        self.for_each_tap(|o, i, t| {
            let grow = &g[o * cout..(o + 1) * cout];
            for ci in 0..cin {
                let wrow = &w[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                gx[i * cin + ci] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
            }
        });
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], gw: &mut [f64]) {
        let (cin, cout) = (self.cin, self.cout);
        self.for_each_tap(|o, i, t| {
            let grow = &g[o * cout..(o + 1) * cout];
            for ci in 0..cin {
                let xv = x[i * cin + ci];
                if xv == 0.0 {
                    continue;
                }
                let dst = &mut gw[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                for (d, gv) in dst.iter_mut().zip(grow) {
                    *d += xv * gv;
                }
            }
        });
    }
}
