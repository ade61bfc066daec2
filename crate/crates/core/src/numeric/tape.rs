//! Reverse-mode differentiation over [`NdBuffer`] values.
//!
//! A [`Tape`] records every operation in forward order together with its
//! output. [`Tape::backward`] replays the record in exact reverse order and
//! accumulates gradients additively, so a value consumed by several
//! operations receives the sum of all their contributions.

use std::sync::Arc;

use super::buffer::{gemm, gemm_at, gemm_bt, NdBuffer};
use crate::error::{HicError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Flat index maps from a broadcast output back into both operands.
#[derive(Debug)]
struct Broadcast {
    lhs: Vec<usize>,
    rhs: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Sub(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<NdBuffer>),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    ConstLeft(Arc<NdBuffer>, Var),
    TransposeLast2(Var),
    SwapAxes01(Var),
    Reshape(Var),
    Softmax(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    LevelFuse { alpha: Var, levels: Vec<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Ssm { u: Var, a: Var, b: Var, c: Var, d: Var },
    RowNorm(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::ConstLeft(..) => "const_left",
            Op::TransposeLast2(..) => "transpose",
            Op::SwapAxes01(..) => "swap_axes",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::Tanh(..) => "tanh",
            Op::Concat(..) => "concat",
            Op::LevelFuse { .. } => "level_fuse",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Ssm { .. } => "ssm",
            Op::RowNorm(..) => "row_norm",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node {
    value: NdBuffer,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Forward record of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visit_order: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when the loss does
    /// not depend on it.
    pub fn get(&self, var: Var) -> NdBuffer {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => NdBuffer::from_parts(shape, g.clone()),
            None => NdBuffer::zeros(&shape),
        }
    }

    /// Non-leaf operation ids in the order the backward pass visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the corresponding
/// element of an operand of shape `src` broadcast into `out`.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let padded: Vec<usize> = std::iter::repeat(1)
        .take(rank - src.len())
        .chain(src.iter().copied())
        .collect();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { s };
        s *= padded[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap();
    (shape.iter().product::<usize>() / last, last)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &NdBuffer {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records an input value (parameter or constant).
    pub fn leaf(&mut self, value: NdBuffer) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(HicError::numeric(
                format!("{}#{id}", op.name()),
                format!("non-finite output at flat index {pos}"),
            ));
        }
        self.nodes.push(Node {
            value: NdBuffer::from_parts(shape, data),
            op,
        });
        Ok(Var(id))
    }

    fn binary_broadcast(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, Broadcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| {
            HicError::dim(format!("{name} of {sa:?} and {sb:?}: shapes do not broadcast"))
        })?;
        let bc = Broadcast {
            lhs: broadcast_map(sa, &out),
            rhs: broadcast_map(sb, &out),
        };
        Ok((out, bc))
    }

    /// Elementwise sum with right-aligned broadcasting of unit extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, bc) = self.binary_broadcast(a, b, "add")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = bc.lhs.iter().zip(&bc.rhs).map(|(&i, &j)| va[i] + vb[j]).collect();
        self.push(shape, data, Op::Add(a, b, bc))
    }

    /// Elementwise product with right-aligned broadcasting of unit extents.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, bc) = self.binary_broadcast(a, b, "mul")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = bc.lhs.iter().zip(&bc.rhs).map(|(&i, &j)| va[i] * vb[j]).collect();
        self.push(shape, data, Op::Mul(a, b, bc))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(HicError::dim(format!(
                "sub of {:?} and {:?}: shapes must match",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Scale(a, factor))
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&mut self, a: Var, c: Arc<NdBuffer>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(HicError::dim(format!(
                "mul_const of {:?} and {:?}: shapes must match",
                self.shape(a),
                c.shape()
            )));
        }
        let data = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::MulConst(a, c))
    }

    /// `a[.., K] · b[K, N]`, treating every leading index of `a` as a row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(HicError::dim(format!(
                "matmul of {sa:?} and {sb:?}: inner extents must match"
            )));
        }
        let (m, k) = split_last(sa);
        let n = sb[1];
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(shape, out, Op::MatMul(a, b))
    }

    /// Batched product `a[B, M, K] · b[B, K, N]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(HicError::dim(format!(
                "batch_matmul of {sa:?} and {sb:?}: batch and inner extents must match"
            )));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(vec![bs, m, n], out, Op::BatchMatMul(a, b))
    }

    /// Applies a constant matrix `c[T, S]` to every batch slice `x[b]` of
    /// shape `[S, H]`, giving `[B, T, H]`.
    pub fn const_left(&mut self, c: Arc<NdBuffer>, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if c.rank() != 2 || sx.len() != 3 || c.shape()[1] != sx[1] {
            return Err(HicError::dim(format!(
                "const_left of {:?} and {sx:?}: inner extents must match",
                c.shape()
            )));
        }
        let (bs, s, h, t) = (sx[0], sx[1], sx[2], c.shape()[0]);
        let mut out = vec![0.0; bs * t * h];
        let vx = self.value(x).data();
        for i in 0..bs {
            gemm(c.data(), &vx[i * s * h..(i + 1) * s * h], &mut out[i * t * h..(i + 1) * t * h], t, s, h);
        }
        self.push(vec![bs, t, h], out, Op::ConstLeft(c, x))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(HicError::dim(format!("transpose needs rank ≥ 2, got {sa:?}")));
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch = sa.iter().product::<usize>() / (r * c);
        let out = transpose_batched(self.value(a).data(), batch, r, c);
        let mut shape = sa;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        self.push(shape, out, Op::TransposeLast2(a))
    }

    /// `[A, B, C] → [B, A, C]`.
    pub fn swap_axes01(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(HicError::dim(format!("swap_axes01 needs rank 3, got {sa:?}")));
        }
        let out = swap01(self.value(a).data(), sa[0], sa[1], sa[2]);
        self.push(vec![sa[1], sa[0], sa[2]], out, Op::SwapAxes01(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(shape.to_vec(), v.into_data(), Op::Reshape(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_lastdim();
        let shape = v.shape().to_vec();
        self.push(shape, v.into_data(), Op::Softmax(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|v| v.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Tanh(a))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(HicError::dim(format!(
                    "concat of {first:?} and {s:?}: leading extents must match"
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = total;
        self.push(shape, out, Op::Concat(parts.to_vec()))
    }

    /// `z[p, :] = Σ_l alpha[p, l] · levels[l][p, :]` with the level sum in
    /// increasing `l` order.
    pub fn level_fuse(&mut self, alpha: Var, levels: &[Var]) -> Result<Var> {
        let sa = self.shape(alpha).to_vec();
        let sy = self.shape(levels[0]).to_vec();
        if *sa.last().unwrap() != levels.len() || sa[..sa.len() - 1] != sy[..sy.len() - 1] {
            return Err(HicError::dim(format!(
                "level_fuse of weights {sa:?} with {} levels of {sy:?}",
                levels.len()
            )));
        }
        if levels.iter().any(|&l| self.shape(l) != sy.as_slice()) {
            return Err(HicError::dim("level_fuse: all levels must share a shape"));
        }
        let (rows, h) = split_last(&sy);
        let nl = levels.len();
        let mut out = vec![0.0; rows * h];
        let va = self.value(alpha).data();
        for (l, &lv) in levels.iter().enumerate() {
            let y = self.value(lv).data();
            for p in 0..rows {
                let w = va[p * nl + l];
                for c in 0..h {
                    out[p * h + c] += w * y[p * h + c];
                }
            }
        }
        self.push(sy, out, Op::LevelFuse { alpha, levels: levels.to_vec() })
    }

    /// Normalization over the last axis followed by a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (rows, h) = split_last(&sx);
        if self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(HicError::dim(format!(
                "layer_norm of {sx:?} needs gain/bias of shape [{h}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (vx, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; rows * h];
        for r in 0..rows {
            let row = &vx[r * h..(r + 1) * h];
            let (mean, rstd) = moments(row);
            for c in 0..h {
                out[r * h + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
        }
        self.push(sx, out, Op::LayerNorm { x, gamma, beta })
    }

    /// Causal diagonal linear recurrence along axis 1 of `u[B, T, H]`:
    /// `s_t = a ⊙ s_{t-1} + b ⊙ u_t`, `y_t = c ⊙ s_t + d ⊙ u_t`, `s_{-1} = 0`.
    pub fn ssm_scan(&mut self, u: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        if su.len() != 3 {
            return Err(HicError::dim(format!("ssm_scan needs [B, T, H], got {su:?}")));
        }
        let h = su[2];
        for v in [a, b, c, d] {
            if self.shape(v) != [h] {
                return Err(HicError::dim(format!(
                    "ssm_scan coefficients must have shape [{h}], got {:?}",
                    self.shape(v)
                )));
            }
        }
        let (_, out) = ssm_forward(
            self.value(u).data(),
            [a, b, c, d].map(|v| self.value(v).data()),
            su[0],
            su[1],
            h,
        );
        self.push(su, out, Op::Ssm { u, a, b, c, d })
    }

    /// Euclidean norm of every last-axis slice; output drops the last axis
    /// (rank-1 inputs give shape `[1]`).
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (rows, w) = split_last(&sa);
        let v = self.value(a).data();
        let out = (0..rows)
            .map(|r| v[r * w..(r + 1) * w].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let shape = if sa.len() == 1 { vec![1] } else { sa[..sa.len() - 1].to_vec() };
        self.push(shape, out, Op::RowNorm(a))
    }

    /// Sum of all elements, left to right.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(HicError::dim(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut visit_order = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) {
                visit_order.push(id);
                self.backward_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visit_order,
        })
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                acc(*a, &mut |ga| {
                    for (i, &j) in bc.lhs.iter().enumerate() {
                        ga[j] += g[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &j) in bc.rhs.iter().enumerate() {
                        gb[j] += g[i];
                    }
                });
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for (i, (&j, &k)) in bc.lhs.iter().zip(&bc.rhs).enumerate() {
                        ga[j] += g[i] * vb[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, (&j, &k)) in bc.lhs.iter().zip(&bc.rhs).enumerate() {
                        gb[k] += g[i] * va[j];
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s));
            }
            Op::MulConst(a, c) => {
                acc(*a, &mut |ga| {
                    for ((x, y), k) in ga.iter_mut().zip(g).zip(c.data()) {
                        *x += y * k;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = split_last(shape(*a));
                let n = shape(*b)[1];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| gemm_bt(g, vb, ga, m, n, k));
                acc(*b, &mut |gb| gemm_at(va, g, gb, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let sa = shape(*a);
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], shape(*b)[2]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..bs {
                        gemm_bt(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bs {
                        gemm_at(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::ConstLeft(c, x) => {
                let sx = shape(*x);
                let (bs, s, h, t) = (sx[0], sx[1], sx[2], c.shape()[0]);
                acc(*x, &mut |gx| {
                    for i in 0..bs {
                        gemm_at(
                            c.data(),
                            &g[i * t * h..(i + 1) * t * h],
                            &mut gx[i * s * h..(i + 1) * s * h],
                            t,
                            s,
                            h,
                        );
                    }
                });
            }
            Op::TransposeLast2(a) => {
                let sa = shape(*a);
                let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let batch = g.len() / (r * c);
                let back = transpose_batched(g, batch, c, r);
                acc(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::SwapAxes01(a) => {
                let sa = shape(*a);
                let back = swap01(g, sa[1], sa[0], sa[2]);
                acc(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::Reshape(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                acc(*a, &mut |ga| {
                    for r in 0..y.len() / w {
                        let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for i in 0..w {
                            ga[r * w + i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = g.len() / total;
                let mut start = 0;
                for &p in parts {
                    let w = *shape(p).last().unwrap();
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + start + c];
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::LevelFuse { alpha, levels } => {
                let nl = levels.len();
                let (rows, h) = split_last(shape(levels[0]));
                let va = val(*alpha);
                acc(*alpha, &mut |gal| {
                    for (l, &lv) in levels.iter().enumerate() {
                        let y = val(lv);
                        for p in 0..rows {
                            let mut dot = 0.0;
                            for c in 0..h {
                                dot += g[p * h + c] * y[p * h + c];
                            }
                            gal[p * nl + l] += dot;
                        }
                    }
                });
                for (l, &lv) in levels.iter().enumerate() {
                    acc(lv, &mut |gy| {
                        for p in 0..rows {
                            let w = va[p * nl + l];
                            for c in 0..h {
                                gy[p * h + c] += w * g[p * h + c];
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (rows, h) = split_last(shape(*x));
                let (vx, vg) = (val(*x), val(*gamma));
                let mut gx_all = vec![0.0; rows * h];
                let mut gg = vec![0.0; h];
                let mut gb = vec![0.0; h];
                let mut xhat = vec![0.0; h];
                let mut gxhat = vec![0.0; h];
                for r in 0..rows {
                    let row = &vx[r * h..(r + 1) * h];
                    let gr = &g[r * h..(r + 1) * h];
                    let (mean, rstd) = moments(row);
                    for c in 0..h {
                        xhat[c] = (row[c] - mean) * rstd;
                        gxhat[c] = gr[c] * vg[c];
                        gg[c] += gr[c] * xhat[c];
                        gb[c] += gr[c];
                    }
                    let mean_g = gxhat.iter().sum::<f64>() / h as f64;
                    let mean_gx = gxhat.iter().zip(&xhat).map(|(p, q)| p * q).sum::<f64>() / h as f64;
                    for c in 0..h {
                        gx_all[r * h + c] = rstd * (gxhat[c] - mean_g - xhat[c] * mean_gx);
                    }
                }
                acc(*x, &mut |ga| ga.iter_mut().zip(&gx_all).for_each(|(p, q)| *p += q));
                acc(*gamma, &mut |ga| ga.iter_mut().zip(&gg).for_each(|(p, q)| *p += q));
                acc(*beta, &mut |ga| ga.iter_mut().zip(&gb).for_each(|(p, q)| *p += q));
            }
            Op::Ssm { u, a, b, c, d } => {
                let su = shape(*u);
                let (bs, t, h) = (su[0], su[1], su[2]);
                let vu = val(*u);
                let coef = [*a, *b, *c, *d].map(|v| val(v));
                let (states, _) = ssm_forward(vu, coef, bs, t, h);
                let [va, vb, vc, vd] = coef;
                let mut gu = vec![0.0; vu.len()];
                let mut gcoef = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];
                let mut gs_next = vec![0.0; h];
                for bi in 0..bs {
                    gs_next.iter_mut().for_each(|v| *v = 0.0);
                    for ti in (0..t).rev() {
                        let base = (bi * t + ti) * h;
                        for k in 0..h {
                            let gy = g[base + k];
                            let gs = vc[k] * gy + va[k] * gs_next[k];
                            let s = states[base + k];
                            let s_prev = if ti > 0 { states[base - h + k] } else { 0.0 };
                            let ut = vu[base + k];
                            gu[base + k] = vb[k] * gs + vd[k] * gy;
                            gcoef[0][k] += gs * s_prev;
                            gcoef[1][k] += gs * ut;
                            gcoef[2][k] += gy * s;
                            gcoef[3][k] += gy * ut;
                            gs_next[k] = gs;
                        }
                    }
                }
                acc(*u, &mut |ga| ga.iter_mut().zip(&gu).for_each(|(p, q)| *p += q));
                for (v, gc) in [*a, *b, *c, *d].into_iter().zip(&gcoef) {
                    acc(v, &mut |ga| ga.iter_mut().zip(gc).for_each(|(p, q)| *p += q));
                }
            }
            Op::RowNorm(a) => {
                let va = val(*a);
                let norms = node.value.data();
                let w = va.len() / norms.len();
                acc(*a, &mut |ga| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm == 0.0 {
                            continue;
                        }
                        for c in 0..w {
                            ga[r * w + c] += g[r] * va[r * w + c] / nrm;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
        }
    }
}

fn moments(row: &[f64]) -> (f64, f64) {
    let h = row.len() as f64;
    let mean = row.iter().sum::<f64>() / h;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn transpose_batched(src: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    out
}

fn swap01(src: &[f64], d0: usize, d1: usize, d2: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..d0 {
        for j in 0..d1 {
            let from = (i * d1 + j) * d2;
            let to = (j * d0 + i) * d2;
            out[to..to + d2].copy_from_slice(&src[from..from + d2]);
        }
    }
    out
}

/// Returns `(states, outputs)` of the diagonal recurrence.
fn ssm_forward(u: &[f64], coef: [&[f64]; 4], bs: usize, t: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let [a, b, c, d] = coef;
    let mut states = vec![0.0; u.len()];
    let mut out = vec![0.0; u.len()];
    for bi in 0..bs {
        for ti in 0..t {
            let base = (bi * t + ti) * h;
            for k in 0..h {
                let prev = if ti > 0 { states[base - h + k] } else { 0.0 };
                let s = a[k] * prev + b[k] * u[base + k];
                states[base + k] = s;
                out[base + k] = c[k] * s + d[k] * u[base + k];
            }
        }
    }
    (states, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 5, 1], &[1, 1, 8]), Some(vec![4, 5, 8]));
        assert_eq!(broadcast_shape(&[4, 5, 8], &[8]), Some(vec![4, 5, 8]));
        assert_eq!(broadcast_shape(&[4, 5, 8], &[4, 1, 8]), Some(vec![4, 5, 8]));
        assert_eq!(broadcast_shape(&[4, 5], &[3]), None);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(NdBuffer::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = t.add(x, x).unwrap();
        let z = t.mul(y, x).unwrap();
        let s = t.sum(z).unwrap();
        // s = 2 Σ x², ds/dx = 4x
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_visits_in_reverse() {
        let mut t = Tape::new();
        let x = t.leaf(NdBuffer::scalar(3.0));
        let a = t.scale(x, 2.0).unwrap();
        let b = t.tanh(a).unwrap();
        let c = t.sum(b).unwrap();
        let g = t.backward(c).unwrap();
        assert_eq!(g.visit_order(), &[c.id(), b.id(), a.id()]);
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut t = Tape::new();
        let x = t.leaf(NdBuffer::scalar(1e300));
        let err = t.scale(x, 1e300).unwrap_err();
        assert!(err.to_string().contains("scale#1"), "{err}");
    }

    #[test]
    fn ssm_degenerate_is_identity() {
        let mut t = Tape::new();
        let u = t.leaf(NdBuffer::from_fn(&[2, 3, 2], |i| i as f64 - 4.0).unwrap());
        let a = t.leaf(NdBuffer::zeros(&[2]));
        let b = t.leaf(NdBuffer::filled(&[2], 0.7));
        let c = t.leaf(NdBuffer::zeros(&[2]));
        let d = t.leaf(NdBuffer::filled(&[2], 1.0));
        let y = t.ssm_scan(u, a, b, c, d).unwrap();
        assert_eq!(t.value(y), t.value(u));
    }

    #[test]
    fn swap_axes_layout() {
        let mut t = Tape::new();
        let x = t.leaf(NdBuffer::from_fn(&[2, 3, 1], |i| i as f64).unwrap());
        let y = t.swap_axes01(x).unwrap();
        assert_eq!(t.shape(y), &[3, 2, 1]);
        assert_eq!(t.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
