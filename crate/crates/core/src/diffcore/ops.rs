//! Forward definitions of the differentiable op set.

use std::rc::Rc;

use super::kernels::{gemm_nn, gemm_nt};
use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Negative slope used by attention scoring unless overridden.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Permute the axes of a row-major buffer: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += out_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= out_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    fn check_same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands recorded on different tapes"))
        }
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let data = n.value.data().iter().map(|&x| f(x)).collect();
            let value = Tensor::new(n.value.shape().to_vec(), data).expect("shape preserved");
            (value, n.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    fn zip(self, other: Var<'t>, op_name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.check_same_tape(&other, op_name)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.value.shape() != b.value.shape() {
                return Err(Error::shape(
                    op_name,
                    format!("{:?} vs {:?}", a.value.shape(), b.value.shape()),
                ));
            }
            let data = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Tensor::new(a.value.shape().to_vec(), data)?,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    fn bcast(self, other: Var<'t>, op_name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.check_same_tape(&other, op_name)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
                return Err(Error::shape(op_name, format!("{sa:?} with trailing {sb:?}")));
            }
            let bd = b.value.data();
            let n = bd.len();
            let data = a
                .value
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % n]))
                .collect();
            (Tensor::new(sa.to_vec(), data)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// `self + other` where `other`'s shape equals the trailing dims of `self`.
    pub fn add_bcast(self, other: Var<'t>) -> Result<Var<'t>> {
        self.bcast(other, "add_bcast", Op::AddBcast(self.id, other.id), |a, b| a + b)
    }

    /// `self * other` where `other`'s shape equals the trailing dims of `self`.
    pub fn mul_bcast(self, other: Var<'t>) -> Result<Var<'t>> {
        self.bcast(other, "mul_bcast", Op::MulBcast(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.map(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.map(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.map(Op::LeakyRelu(self.id, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn log(self) -> Var<'t> {
        self.map(Op::Log(self.id), f64::ln)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.map(Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn square(self) -> Var<'t> {
        self.powf(2.0)
    }

    pub fn abs(self) -> Var<'t> {
        self.map(Op::Abs(self.id), f64::abs)
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "matmul")?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
            let (k, n) = (sb[0], sb[1]);
            let m = a.value.numel() / k.max(1);
            let (ad, bd) = (a.value.data(), b.value.data());
            let mut out = vec![0.0; m * n];
            gemm_nn(ad, bd, &mut out, m, k, n);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            (Tensor::new(shape, out)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Batched product `[B, m, k] x [B, k, n]`, or with `trans_b` `[B, m, k] x [B, n, k]ᵀ`.
    pub fn bmm(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.check_same_tape(&other, "bmm")?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            let ok = sa.len() == 3
                && sb.len() == 3
                && sa[0] == sb[0]
                && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
            if !ok {
                return Err(Error::shape(
                    "bmm",
                    format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
                ));
            }
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = if trans_b { sb[1] } else { sb[2] };
            let (ad, bd) = (a.value.data(), b.value.data());
            let mut out = vec![0.0; batch * m * n];
            for t in 0..batch {
                let at = &ad[t * m * k..(t + 1) * m * k];
                let bt = &bd[t * k * n..(t + 1) * k * n];
                let ot = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    gemm_nt(at, bt, ot, m, k, n);
                } else {
                    gemm_nn(at, bt, ot, m, k, n);
                }
            }
            (Tensor::new(vec![batch, m, n], out)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::Bmm {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        ))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let rank = a.value.rank();
            let mut seen = vec![false; rank];
            let valid = perm.len() == rank && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(Error::shape(
                    "permute",
                    format!("{:?} by {perm:?}", a.value.shape()),
                ));
            }
            let (data, shape) = permute_data(a.value.data(), a.value.shape(), perm);
            (Tensor::new(shape, data)?, a.requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::shape("transpose", format!("rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.value.clone().reshape(shape.to_vec())?, a.requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Concatenate along the last axis; all leading dims must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_last", "no operands"))?;
        let tape = first.tape;
        let (value, rg) = {
            let nodes = tape.nodes();
            let lead = &nodes[first.id].value.shape()[..nodes[first.id].value.rank() - 1];
            let mut total = 0;
            let mut rg = false;
            for p in parts {
                first.check_same_tape(p, "concat_last")?;
                let v = &nodes[p.id].value;
                if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                    return Err(Error::shape(
                        "concat_last",
                        format!("{:?} vs leading {lead:?}", v.shape()),
                    ));
                }
                total += v.last_dim();
                rg |= nodes[p.id].requires_grad;
            }
            let rows = nodes[first.id].value.rows();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (Tensor::new(shape, data)?, rg)
        };
        Ok(tape.push(
            value,
            Op::ConcatLast(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Stack row blocks: each part viewed as `[rows_i, w]`, output `[Σ rows_i, w]`.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no operands"))?;
        let tape = first.tape;
        let (value, rg) = {
            let nodes = tape.nodes();
            let w = nodes[first.id].value.last_dim();
            let mut data = Vec::new();
            let mut rg = false;
            for p in parts {
                first.check_same_tape(p, "concat_rows")?;
                let v = &nodes[p.id].value;
                if v.last_dim() != w {
                    return Err(Error::shape(
                        "concat_rows",
                        format!("width {} vs {w}", v.last_dim()),
                    ));
                }
                data.extend_from_slice(v.data());
                rg |= nodes[p.id].requires_grad;
            }
            let rows = data.len() / w.max(1);
            (Tensor::new(vec![rows, w], data)?, rg)
        };
        Ok(tape.push(
            value,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Select rows of the `[rows, w]` view; indices may repeat.
    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let (rows, w) = (a.value.rows(), a.value.last_dim());
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx.iter() {
                if i >= rows {
                    return Err(Error::shape(
                        "gather_rows",
                        format!("index {i} out of {rows} rows"),
                    ));
                }
                data.extend_from_slice(a.value.row(i));
            }
            (Tensor::new(vec![idx.len(), w], data)?, a.requires_grad)
        };
        Ok(self.tape.push(value, Op::GatherRows { a: self.id, idx }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.masked_softmax(None)
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    ///
    /// `mask` covers a whole number of rows and is tiled over the tensor.
    /// Excluded entries get probability exactly 0. A row with no allowed
    /// entry is an error.
    pub fn masked_softmax(self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let w = a.value.last_dim();
            if let Some(m) = mask {
                if m.is_empty() || m.len() % w != 0 || a.value.numel() % m.len() != 0 {
                    return Err(Error::shape(
                        "softmax",
                        format!("mask of {} over {:?}", m.len(), a.value.shape()),
                    ));
                }
            }
            let mut out = vec![0.0; a.value.numel()];
            for (r, (xrow, orow)) in a.value.data().chunks(w).zip(out.chunks_mut(w)).enumerate() {
                let allowed = |j: usize| match mask {
                    Some(m) => m[(r * w + j) % m.len()],
                    None => true,
                };
                let mx = (0..w)
                    .filter(|&j| allowed(j))
                    .map(|j| xrow[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    return Err(Error::shape(
                        "softmax",
                        format!("row {r} has no unmasked entry"),
                    ));
                }
                let mut s = 0.0;
                for j in 0..w {
                    if allowed(j) {
                        let e = (xrow[j] - mx).exp();
                        orow[j] = e;
                        s += e;
                    }
                }
                for o in orow.iter_mut() {
                    *o /= s;
                }
            }
            (Tensor::new(a.value.shape().to_vec(), out)?, a.requires_grad)
        };
        Ok(self.tape.push(value, Op::Softmax { a: self.id }, rg))
    }

    /// Normalise each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let (value, rg, inv_std) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let w = a.value.last_dim();
            let wf = w as f64;
            let mut out = vec![0.0; a.value.numel()];
            let mut inv_std = Vec::with_capacity(a.value.rows());
            for (xrow, orow) in a.value.data().chunks(w).zip(out.chunks_mut(w)) {
                let mean = xrow.iter().sum::<f64>() / wf;
                let var = xrow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / wf;
                let is = 1.0 / (var + eps).sqrt();
                for (o, x) in orow.iter_mut().zip(xrow) {
                    *o = (x - mean) * is;
                }
                inv_std.push(is);
            }
            let value = Tensor::new(a.value.shape().to_vec(), out).expect("shape preserved");
            (value, a.requires_grad, inv_std)
        };
        self.tape.push(value, Op::LayerNorm { a: self.id, inv_std }, rg)
    }

    fn reduce(self, op: Op, f: impl Fn(&[f64]) -> f64, last_only: bool) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let value = if last_only {
                let w = a.value.last_dim();
                let data: Vec<f64> = a.value.data().chunks(w).map(&f).collect();
                let shape = a.value.shape()[..a.value.rank().saturating_sub(1)].to_vec();
                let shape = if shape.is_empty() { vec![1] } else { shape };
                Tensor::new(shape, data).expect("reduced shape")
            } else {
                Tensor::scalar(f(a.value.data()))
            };
            (value, a.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce(Op::SumAll(self.id), |d| d.iter().sum(), false)
    }

    pub fn mean(self) -> Var<'t> {
        self.reduce(
            Op::MeanAll(self.id),
            |d| d.iter().sum::<f64>() / d.len() as f64,
            false,
        )
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t> {
        self.reduce(Op::SumLast(self.id), |d| d.iter().sum(), true)
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(self) -> Var<'t> {
        self.reduce(
            Op::MeanLast(self.id),
            |d| d.iter().sum::<f64>() / d.len() as f64,
            true,
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
