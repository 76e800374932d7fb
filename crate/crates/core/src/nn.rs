//! Layers built on the tape: linear maps, affine layer norm and pre-norm
//! transformer blocks. Layers hold parameter ids into a [`ParamStore`] and
//! read the bound variables from a slice indexed by those ids.

use rand::Rng;

use crate::diffcore::{ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Xavier/Glorot uniform init for an `[fan_in, fan_out]` matrix.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

/// Small uniform init for vectors such as embeddings.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("uniform shape")
}

/// Copy every tensor of `src` whose name exists in `dst`; shapes must agree.
/// Returns the number of copied tensors. Names listed in `required` must be present in `src`.
pub fn load_named(dst: &mut ParamStore, src: &ParamStore, required_prefix: &str) -> Result<usize> {
    let mut copied = 0;
    for e in dst.entries_mut() {
        match src.by_name(&e.name) {
            Some(t) if t.shape() == e.tensor.shape() => {
                e.tensor = t.clone();
                copied += 1;
            }
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                )))
            }
            None if e.name.starts_with(required_prefix) && !required_prefix.is_empty() => {
                return Err(Error::Checkpoint(format!("checkpoint lacks parameter {}", e.name)))
            }
            None => {}
        }
    }
    Ok(copied)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        layer: usize,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), layer, xavier_uniform(rng, d_in, d_out));
        let b = bias.then(|| store.add(format!("{name}.b"), layer, Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p[self.w])?;
        match self.b {
            Some(b) => y.add_bcast(p[b]),
            None => Ok(y),
        }
    }
}

/// Layer norm over the last axis with learned gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn register(store: &mut ParamStore, name: &str, layer: usize, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), layer, Tensor::full(&[dim], 1.0)),
            shift: store.add(format!("{name}.b"), layer, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(LAYER_NORM_EPS).mul_bcast(p[self.gain])?.add_bcast(p[self.shift])
    }
}

/// Multi-head self-attention over `[B, T, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl SelfAttention {
    pub fn register(store: &mut ParamStore, name: &str, layer: usize, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            heads,
            dim,
            q: Linear::register(store, &format!("{name}.q"), layer, dim, dim, true, rng),
            // a key bias shifts every score in a row equally, so softmax ignores it
            k: Linear::register(store, &format!("{name}.k"), layer, dim, dim, false, rng),
            v: Linear::register(store, &format!("{name}.v"), layer, dim, dim, true, rng),
            out: Linear::register(store, &format!("{name}.o"), layer, dim, dim, true, rng),
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, t) = (shape[0], shape[1]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |y: Var<'t>| -> Result<Var<'t>> {
            y.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, t, dh])
        };
        let q = split(self.q.forward(p, x)?)?;
        let k = split(self.k.forward(p, x)?)?;
        let v = split(self.v.forward(p, x)?)?;
        let attn = q.bmm(k, true)?.scale(1.0 / (dh as f64).sqrt()).softmax()?;
        let ctx = attn
            .bmm(v, false)?
            .reshape(&[b, h, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.dim])?;
        self.out.forward(p, ctx)
    }
}

/// Pre-norm transformer block: `x + attn(norm(x))`, then `x + mlp(norm(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub attn: SelfAttention,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        layer: usize,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            norm1: Norm::register(store, &format!("{name}.norm1"), layer, dim),
            attn: SelfAttention::register(store, &format!("{name}.attn"), layer, dim, heads, rng),
            norm2: Norm::register(store, &format!("{name}.norm2"), layer, dim),
            fc1: Linear::register(store, &format!("{name}.fc1"), layer, dim, mlp_dim, true, rng),
            fc2: Linear::register(store, &format!("{name}.fc2"), layer, mlp_dim, dim, true, rng),
        })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let x = x.add(self.attn.forward(p, self.norm1.forward(p, x)?)?)?;
        let hidden = self.fc1.forward(p, self.norm2.forward(p, x)?)?.relu();
        x.add(self.fc2.forward(p, hidden)?)
    }
}

/// Fixed sinusoidal position table `[n, dim]`.
pub fn sinusoidal_positions(n: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; n * dim];
    for pos in 0..n {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, dim], data).expect("position table")
}
