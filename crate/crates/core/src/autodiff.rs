//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its value and the recipe needed to
//! route gradients back to its inputs. [`Tape::backward`] walks the nodes in
//! reverse order and fills the gradient slot of every tensor that requires one.
//! Nodes that do not depend on a gradient-requiring leaf carry no gradient, which
//! is how frozen parameters (the teacher) are kept out of the update.

use crate::error::{Error, Result};
use crate::tensor::{self, gelu, gelu_grad, row_moments, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        moments: Vec<(f64, f64)>,
    },
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ReplaceRows {
        x: Var,
        rows: Vec<usize>,
        fill: Var,
    },
    RowNormMean {
        x: Var,
        rows: Vec<usize>,
    },
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::RowNormMean { .. } => "row_norm_mean",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Deliberate backward-rule corruption, used to prove the gradient checker
/// catches a wrong rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardFault {
    #[default]
    None,
    /// Scales the gradient flowing into the right-hand matmul operand by 1.5.
    MatMulRhs,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: BackwardFault,
    non_finite: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        value.set_requires_grad(true);
        self.push_raw(value, Op::Leaf)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        value.set_requires_grad(false);
        self.push_raw(value, Op::Leaf)
    }

    fn push_raw(&mut self, value: Tensor, op: Op) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(format!(
                "{} produced a non-finite value at node {}",
                op.name(),
                self.nodes.len()
            ));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        value.set_requires_grad(rg);
        self.push_raw(value, op)
    }

    /// First non-finite value observed, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(msg) => Err(Error::NonFinite(msg.clone())),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(av.shape(), data).expect("shapes checked");
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[n×p] + bias[p]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (_, p) = xv.matrix_dims("add_bias")?;
        if bv.len() != p {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        out.clear_grad();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % p];
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = tensor::layernorm(xv, self.value(gamma), self.value(beta))?;
        let moments = (0..xv.rows()).map(|i| row_moments(xv.row(i))).collect();
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                moments,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.matrix_dims("slice_cols")?;
        if start + width > c || width == 0 {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, width]));
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let out = Tensor::new(&[n, width], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.matrix_dims("slice_rows")?;
        if start + count > n || count == 0 {
            return Err(Error::shape("slice_rows", xv.shape(), &[start, count]));
        }
        let data = xv.data()[start * c..(start + count) * c].to_vec();
        let out = Tensor::new(&[count, c], data)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let (n, _) = self.value(first).matrix_dims("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc) = self.value(p).matrix_dims("concat_cols")?;
            if pn != n {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[n, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Replaces the listed rows of `x` with the vector `fill`.
    pub fn replace_rows(&mut self, x: Var, rows: &[usize], fill: Var) -> Result<Var> {
        let xv = self.value(x);
        let fv = self.value(fill);
        let (n, c) = xv.matrix_dims("replace_rows")?;
        if fv.len() != c {
            return Err(Error::shape("replace_rows", xv.shape(), fv.shape()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("replace_rows", xv.shape(), &[bad]));
        }
        let mut out = xv.clone();
        out.clear_grad();
        for &r in rows {
            out.row_mut(r).copy_from_slice(fv.data());
        }
        Ok(self.push(
            out,
            Op::ReplaceRows {
                x,
                rows: rows.to_vec(),
                fill,
            },
            &[x, fill],
        ))
    }

    /// `(1/|rows|) Σ_{i ∈ rows} ‖x_i‖₂` as a scalar. The gradient of a zero row is zero.
    pub fn row_norm_mean(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, _) = xv.matrix_dims("row_norm_mean")?;
        if rows.is_empty() {
            return Err(Error::Degenerate("row_norm_mean over an empty row set".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("row_norm_mean", xv.shape(), &[bad]));
        }
        let total: f64 = rows.iter().map(|&r| l2(xv.row(r))).sum();
        let out = Tensor::scalar(total / rows.len() as f64);
        Ok(self.push(out, Op::RowNormMean { x, rows: rows.to_vec() }, &[x]))
    }

    /// `Σ w_i · t_i` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Config("empty weighted sum".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, t.shape()));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += w * b;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(acc, Op::WeightedSum(terms.to_vec()), &inputs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Back-propagates from the scalar `output`, writing into the gradient slot
    /// of every node that requires a gradient.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.check_finite()?;
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", self.value(output).shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.route(idx, &g, &mut grads);
            let slot = self.nodes[idx].value.grad_mut_or_zero();
            for (s, v) in slot.iter_mut().zip(&g) {
                *s += v;
            }
        }
        Ok(())
    }

    fn route(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].value.requires_grad() {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let p = bv.cols();
                if self.requires_grad(*a) {
                    let bt = bv.transpose().expect("matrix");
                    let mut ga = vec![0.0; m * k];
                    tensor::matmul_into(g, bt.data(), &mut ga, m, p, k);
                    send(*a, ga);
                }
                if self.requires_grad(*b) {
                    let at = av.transpose().expect("matrix");
                    let mut gb = vec![0.0; k * p];
                    tensor::matmul_into(at.data(), g, &mut gb, k, m, p);
                    if self.fault == BackwardFault::MatMulRhs {
                        gb.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::AddBias(x, bias) => {
                send(*x, g.to_vec());
                let p = self.value(*bias).len();
                let mut gb = vec![0.0; p];
                for (i, v) in g.iter().enumerate() {
                    gb[i % p] += v;
                }
                send(*bias, gb);
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
            Op::Transpose(x) => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                send(*x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut gx = vec![0.0; y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                moments,
            } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let d = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (i, &(mean, rstd)) in moments.iter().enumerate() {
                    let xr = xv.row(i);
                    let gr = &g[i * d..(i + 1) * d];
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[i * d + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        gg[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                    }
                }
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gbeta);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                send(*x, g.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)).collect());
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let w = node.value.cols();
                let mut gx = vec![0.0; xv.len()];
                for i in 0..xv.rows() {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(*x, gx);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                send(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let n = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = vec![0.0; n * w];
                    for i in 0..n {
                        gp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    send(p, gp);
                }
            }
            Op::ReplaceRows { x, rows, fill } => {
                let c = self.value(*x).cols();
                let mut gx = g.to_vec();
                let mut gf = vec![0.0; c];
                for &r in rows {
                    for j in 0..c {
                        gf[j] += gx[r * c + j];
                        gx[r * c + j] = 0.0;
                    }
                }
                send(*x, gx);
                send(*fill, gf);
            }
            Op::RowNormMean { x, rows } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let scale = g[0] / rows.len() as f64;
                let mut gx = vec![0.0; xv.len()];
                for &r in rows {
                    let row = xv.row(r);
                    let norm = l2(row);
                    if norm > 0.0 {
                        for j in 0..c {
                            gx[r * c + j] += scale * row[j] / norm;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    send(v, g.iter().map(|x| x * w).collect());
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
        }
    }
}

pub(crate) fn l2(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::filled(&[2, 2], 0.5));
        let c = tape.constant(&Tensor::filled(&[2, 2], 2.0));
        let y = tape.matmul(c, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn zero_row_norm_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2, 3]));
        let l = tape.row_norm_mean(x, &[0, 1]).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 6]);
    }

    #[test]
    fn non_finite_values_block_backward() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::filled(&[1, 1], f64::MAX));
        let y = tape.scale(x, 10.0);
        let s = tape.sum(y);
        let err = tape.backward(s).unwrap_err().to_string();
        assert!(err.contains("scale"), "{err}");
    }

    #[test]
    fn shared_node_accumulates() {
        let mut rng = Rng::new(3);
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::randn(&[2, 2], 1.0, &mut rng));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
    }
}
