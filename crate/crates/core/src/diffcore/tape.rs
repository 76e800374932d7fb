//! Define-by-run computation tape.
//!
//! Every forward op appends a node holding its output value and the
//! information needed to route gradients back to its parents. A fresh tape
//! is built for every forward pass; [`Tape::backward`] walks it once in
//! reverse insertion order, which is a valid reverse topological order
//! because a node can only reference nodes that already exist.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a trainable tensor inside a parameter store.
pub type ParamId = usize;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBcast(usize, usize),
    MulBcast(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, trans_b: bool },
    Permute { a: usize, perm: Vec<usize> },
    Reshape(usize),
    ConcatLast(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows { a: usize, idx: Rc<Vec<usize>> },
    Sigmoid(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Log(usize),
    Exp(usize),
    Powf(usize, f64),
    Abs(usize),
    Clamp(usize, f64, f64),
    Softmax { a: usize },
    LayerNorm { a: usize, inv_std: Vec<f64> },
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize),
    MeanLast(usize),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf on the tape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<ParamId, Tensor> {
        self.grads
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
        self.nodes.borrow().is_empty()
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Trainable leaf bound to parameter `id`; its gradient is reported by
    /// [`Tape::backward`] under that id.
    pub fn param(&self, id: ParamId, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf { param: Some(id) }, true)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// The tape is left untouched, so calling this twice returns identical
    /// gradients. Intermediate adjoints live only for the duration of the call.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::invalid("loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);
        let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { param: Some(pid) } = node.op {
                let g = adj[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                match grads.get_mut(&pid) {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                            *e += v;
                        }
                    }
                    None => {
                        let t = Tensor::new(node.value.shape().to_vec(), g)?;
                        grads.insert(pid, t);
                    }
                }
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            backprop(&nodes, id, &g, &mut adj);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, grad: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut adj[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(grad) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}

fn accumulate_with(
    adj: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = adj[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            accumulate(adj, nodes, *a, g.to_vec());
            accumulate(adj, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(adj, nodes, *a, g.to_vec());
            accumulate(adj, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(adj, nodes, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            accumulate(adj, nodes, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::AddBcast(a, b) => {
            accumulate(adj, nodes, *a, g.to_vec());
            let n = nodes[*b].value.numel();
            accumulate_with(adj, nodes, *b, |gb| {
                for chunk in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
            });
        }
        Op::MulBcast(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            let n = bv.len();
            accumulate_with(adj, nodes, *a, |ga| {
                for (i, (o, gv)) in ga.iter_mut().zip(g).enumerate() {
                    *o += gv * bv[i % n];
                }
            });
            accumulate_with(adj, nodes, *b, |gb| {
                for (i, gv) in g.iter().enumerate() {
                    gb[i % n] += gv * av[i];
                }
            });
        }
        Op::Scale(a, c) => accumulate(adj, nodes, *a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) => accumulate(adj, nodes, *a, g.to_vec()),
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.numel() / k;
            if nodes[*a].requires_grad {
                // dA = dC · Bᵀ
                let mut ga = vec![0.0; m * k];
                gemm_nt(g, bv.data(), &mut ga, m, n, k);
                accumulate(adj, nodes, *a, ga);
            }
            // dB = Aᵀ · dC
            accumulate_with(adj, nodes, *b, |gb| gemm_tn(av.data(), g, gb, m, k, n));
        }
        Op::Bmm { a, b, trans_b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = node.value.shape()[2];
            let (ad, bd) = (av.data(), bv.data());
            let (sa, sb, sg) = (m * k, k * n, m * n);
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; batch * sa];
                for t in 0..batch {
                    let (gt, bt) = (&g[t * sg..(t + 1) * sg], &bd[t * sb..(t + 1) * sb]);
                    let out = &mut ga[t * sa..(t + 1) * sa];
                    if *trans_b {
                        // C = A·Bᵀ with B [n,k]: dA = dC·B
                        gemm_nn(gt, bt, out, m, n, k);
                    } else {
                        gemm_nt(gt, bt, out, m, n, k);
                    }
                }
                accumulate(adj, nodes, *a, ga);
            }
            accumulate_with(adj, nodes, *b, |gb| {
                for t in 0..batch {
                    let (gt, at) = (&g[t * sg..(t + 1) * sg], &ad[t * sa..(t + 1) * sa]);
                    let out = &mut gb[t * sb..(t + 1) * sb];
                    if *trans_b {
                        // dB = dCᵀ·A, shape [n,k]
                        gemm_tn(gt, at, out, m, n, k);
                    } else {
                        gemm_tn(at, gt, out, m, k, n);
                    }
                }
            });
        }
        Op::Permute { a, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (data, _) = super::ops::permute_data(g, node.value.shape(), &inv);
            accumulate(adj, nodes, *a, data);
        }
        Op::Reshape(a) => accumulate(adj, nodes, *a, g.to_vec()),
        Op::ConcatLast(parts) => {
            let total = node.value.last_dim();
            let rows = node.value.rows();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.last_dim();
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(adj, nodes, p, gp);
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                accumulate(adj, nodes, p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::GatherRows { a, idx } => {
            let w = node.value.last_dim();
            accumulate_with(adj, nodes, *a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[src * w..(src + 1) * w];
                    for (o, v) in dst.iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *o += v;
                    }
                }
            });
        }
        Op::Sigmoid(a) => accumulate(
            adj,
            nodes,
            *a,
            g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
        ),
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            accumulate(
                adj,
                nodes,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::LeakyRelu(a, slope) => {
            let x = nodes[*a].value.data();
            accumulate(
                adj,
                nodes,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                    .collect(),
            );
        }
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            accumulate(adj, nodes, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
        }
        Op::Exp(a) => accumulate(adj, nodes, *a, g.iter().zip(out).map(|(g, y)| g * y).collect()),
        Op::Powf(a, p) => {
            let x = nodes[*a].value.data();
            accumulate(
                adj,
                nodes,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(g, x)| g * p * x.powf(p - 1.0))
                    .collect(),
            );
        }
        Op::Abs(a) => {
            // subgradient 0 at the kink
            let x = nodes[*a].value.data();
            accumulate(
                adj,
                nodes,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                    .collect(),
            );
        }
        Op::Clamp(a, lo, hi) => {
            let x = nodes[*a].value.data();
            accumulate(
                adj,
                nodes,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::Softmax { a } => {
            let w = node.value.last_dim();
            let mut ga = vec![0.0; g.len()];
            for ((grow, yrow), orow) in g.chunks(w).zip(out.chunks(w)).zip(ga.chunks_mut(w)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for ((o, g), y) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o = y * (g - dot);
                }
            }
            accumulate(adj, nodes, *a, ga);
        }
        Op::LayerNorm { a, inv_std } => {
            let w = node.value.last_dim();
            let wf = w as f64;
            let mut ga = vec![0.0; g.len()];
            for (r, ((grow, yrow), orow)) in g
                .chunks(w)
                .zip(out.chunks(w))
                .zip(ga.chunks_mut(w))
                .enumerate()
            {
                let mean_g: f64 = grow.iter().sum::<f64>() / wf;
                let mean_gy: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / wf;
                for ((o, g), y) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o = inv_std[r] * (g - mean_g - y * mean_gy);
                }
            }
            accumulate(adj, nodes, *a, ga);
        }
        Op::SumAll(a) => {
            let n = nodes[*a].value.numel();
            accumulate(adj, nodes, *a, vec![g[0]; n]);
        }
        Op::MeanAll(a) => {
            let n = nodes[*a].value.numel();
            accumulate(adj, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::SumLast(a) | Op::MeanLast(a) => {
            let w = nodes[*a].value.last_dim();
            let scale = if matches!(node.op, Op::MeanLast(_)) {
                1.0 / w as f64
            } else {
                1.0
            };
            let mut ga = Vec::with_capacity(g.len() * w);
            for v in g {
                ga.extend(std::iter::repeat(v * scale).take(w));
            }
            accumulate(adj, nodes, *a, ga);
        }
    }
}
