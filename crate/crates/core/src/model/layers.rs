//! Transformer building blocks recorded onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std²) truncated at ±2σ by rejection.
pub fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::lit(v);
        }
    })
}

pub(crate) struct Init<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> Init<'_, T, R> {
    pub fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let t = trunc_normal(shape, INIT_STD, self.rng);
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, T::one()))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.weight(format!("{prefix}.weight"), &[d_in, d_out])?,
            bias: Some(init.zeros(format!("{prefix}.bias"), &[d_out])?),
        })
    }

    pub(crate) fn without_bias<T: Real, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.weight(format!("{prefix}.weight"), &[d_in, d_out])?,
            bias: None,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.tape.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.ones(format!("{prefix}.gamma"), &[dim])?,
            beta: init.zeros(format!("{prefix}.beta"), &[dim])?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, eps: T) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm_rows(x, gamma, beta, eps)
    }
}

/// Multi-head scaled dot-product attention over projected `q: [Lq, d]`
/// and `k, v: [Lk, d]`.
fn multi_head<T: Real>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
    let dim = g.value(q).cols();
    let dh = dim / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.slice_cols(q, h * dh, dh)?;
        let kh = g.tape.slice_cols(k, h * dh, dh)?;
        let vh = g.tape.slice_cols(v, h * dh, dh)?;
        let s = g.tape.matmul_bt(qh, kh)?;
        let s = g.tape.scale(s, scale);
        let p = g.tape.softmax_rows(s, mask.map(<[bool]>::to_vec))?;
        outs.push(g.tape.matmul(p, vh)?);
    }
    g.tape.concat_cols(&outs)
}

/// Query, key and value projections. Keys carry no bias: a key bias shifts
/// every score in a row equally and cannot change the softmax.
#[derive(Clone, Debug)]
pub struct Projections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Projections {
    fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, dim: usize, kv_dim: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(init, &format!("{prefix}.q"), dim, dim)?,
            k: Linear::without_bias(init, &format!("{prefix}.k"), kv_dim, dim)?,
            v: Linear::new(init, &format!("{prefix}.v"), kv_dim, dim)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub proj_in: Projections,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub(crate) fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            proj_in: Projections::new(init, prefix, dim, dim)?,
            proj: Linear::new(init, &format!("{prefix}.proj"), dim, dim)?,
            heads,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let q = self.proj_in.q.forward(g, x)?;
        let k = self.proj_in.k.forward(g, x)?;
        let v = self.proj_in.v.forward(g, x)?;
        let o = multi_head(g, q, k, v, self.heads, mask)?;
        self.proj.forward(g, o)
    }
}

/// Queries from the text stream; keys and values from the image latent.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub proj_in: Projections,
    pub proj: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub(crate) fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        prefix: &str,
        dim: usize,
        memory_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj_in: Projections::new(init, prefix, dim, memory_dim)?,
            proj: Linear::new(init, &format!("{prefix}.proj"), dim, dim)?,
            heads,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, memory: Var) -> Result<Var> {
        let q = self.proj_in.q.forward(g, x)?;
        let k = self.proj_in.k.forward(g, memory)?;
        let v = self.proj_in.v.forward(g, memory)?;
        let o = multi_head(g, q, k, v, self.heads, None)?;
        self.proj.forward(g, o)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block, optionally with a cross-attention sublayer
/// between self-attention and the MLP.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub cross: Option<(LayerNorm, CrossAttention)>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub(crate) fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        memory_dim: Option<usize>,
    ) -> Result<Self> {
        let ln1 = LayerNorm::new(init, &format!("{prefix}.ln1"), dim)?;
        let attn = SelfAttention::new(init, &format!("{prefix}.attn"), dim, heads)?;
        let cross = match memory_dim {
            Some(md) => Some((
                LayerNorm::new(init, &format!("{prefix}.ln_cross"), dim)?,
                CrossAttention::new(init, &format!("{prefix}.cross"), dim, md, heads)?,
            )),
            None => None,
        };
        let ln2 = LayerNorm::new(init, &format!("{prefix}.ln2"), dim)?;
        let mlp = Mlp {
            fc1: Linear::new(init, &format!("{prefix}.mlp.fc1"), dim, mlp_ratio * dim)?,
            fc2: Linear::new(init, &format!("{prefix}.mlp.fc2"), mlp_ratio * dim, dim)?,
        };
        Ok(Self {
            ln1,
            attn,
            cross,
            ln2,
            mlp,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        eps: T,
        mask: Option<&[bool]>,
        memory: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, x, eps)?;
        let a = self.attn.forward(g, h, mask)?;
        let mut x = g.tape.add(x, a)?;
        if let (Some((ln, cross)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(g, x, eps)?;
            let c = cross.forward(g, h, mem)?;
            x = g.tape.add(x, c)?;
        }
        let h = self.ln2.forward(g, x, eps)?;
        let m = self.mlp.forward(g, h)?;
        g.tape.add(x, m)
    }
}

/// Fixed sinusoidal table: `pe[p, 2i] = sin(p / 10000^(2i/d))`,
/// `pe[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_table<T: Real>(positions: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[positions, dim], |i| {
        let (p, j) = (i / dim, i % dim);
        let pair = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Sinusoidal table over a row-major `rows × cols` grid: the first half of
/// the channels encodes the row, the second half the column.
pub fn grid_sinusoidal_table<T: Real>(rows: usize, cols: usize, dim: usize) -> Tensor<T> {
    let dr = dim / 2;
    let (tr, tc) = (sinusoidal_table::<T>(rows, dr), sinusoidal_table::<T>(cols, dim - dr));
    Tensor::from_fn(&[rows * cols, dim], |i| {
        let (p, j) = (i / dim, i % dim);
        if j < dr {
            tr.get2(p / cols, j)
        } else {
            tc.get2(p % cols, j - dr)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_values() {
        let t = sinusoidal_table::<f64>(5, 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(t.get2(3, 0), 3f64.sin());
        assert_eq!(t.get2(3, 3), (3.0 / 100.0f64).cos());
        assert_eq!(t, sinusoidal_table::<f64>(5, 4));
    }

    #[test]
    fn grid_sinusoid_splits_rows_and_columns() {
        let t = grid_sinusoidal_table::<f64>(3, 4, 8);
        assert_eq!(t.shape(), [12, 8]);
        let (r, c) = (sinusoidal_table::<f64>(3, 4), sinusoidal_table::<f64>(4, 4));
        assert_eq!(&t.row(6)[..4], r.row(1));
        assert_eq!(&t.row(6)[4..], c.row(2));
        assert_eq!(&t.row(2)[..4], &t.row(3)[..4]);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = crate::rng::rng_for(&[1]);
        let t = trunc_normal::<f64>(&[5000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 5000.0;
        assert!(mean.abs() < 0.002);
    }
}
