//! Transformer building blocks on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] of named [`Var`]s; modules hold clones
//! of their vars (cheap, shared storage) so optimizers and checkpoints can
//! address every parameter by name.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

fn join_key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Var> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::Invariant(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
        self.insert(name, Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.insert(name, Tensor::zeros(shape, DType::F32, &Device::Cpu)?)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.insert(name, Tensor::ones(shape, DType::F32, &Device::Cpu)?)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Store sharing the variables whose names satisfy `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let vars = self.vars.iter().filter(|(n, _)| keep(n)).map(|(n, v)| (n.clone(), v.clone())).collect();
        ParamStore { vars }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every tensor out, prefixing names.
    pub fn export(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((join_key(prefix, k), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every parameter from `tensors[prefix + name]`. All names must
    /// be present with matching shapes.
    pub fn import(&self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let key = join_key(prefix, k);
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {key}")))?;
            if t.dims() != v.dims() {
                return Err(Error::Shape(format!("{key}: checkpoint {:?} vs model {:?}", t.dims(), v.dims())));
            }
            v.set(t)?;
        }
        Ok(())
    }

    /// SHA-256 over parameter names and raw `f32` bytes.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for x in v.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu_erf()?,
        })
    }
}

/// Per-forward options: dropout state and test hooks.
pub struct Forward<'a> {
    pub dropout: f32,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub record_attention: bool,
    pub attention: Vec<Tensor>,
}

impl<'a> Forward<'a> {
    /// Deterministic evaluation: no dropout, nothing recorded.
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None, record_attention: false, attention: Vec::new() }
    }

    pub fn train(dropout: f32, rng: &'a mut ChaCha8Rng) -> Self {
        Self { dropout, rng: Some(rng), record_attention: false, attention: Vec::new() }
    }

    pub fn recording() -> Self {
        Self { record_attention: true, ..Self::eval() }
    }

    /// Inverted dropout with masks drawn from the owned generator.
    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
        Ok(x.mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_std(store, name, inp, out, bias, 0.02, rng)
    }

    /// Input layers that read raw features (pixels, code vectors) use
    /// `1 / sqrt(inp)` so the input dominates the added position embeddings.
    pub fn fan_in(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_std(store, name, inp, out, bias, 1.0 / (inp as f64).sqrt(), rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[inp, out], std, rng)?;
        let bias = if bias { Some(store.zeros(&format!("{name}.bias"), &[out])?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(self.weight.as_tensor())?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(&format!("{name}.gain"), &[dim])?,
            bias: store.zeros(&format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::layer_norm_slow(x, self.gain.as_tensor(), self.bias.as_tensor(), 1e-5)?)
    }
}

/// Pre-norm transformer block with multi-head self-attention.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    activation: Activation,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, mlp_ratio * dim, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_ratio * dim, dim, true, rng)?,
            heads,
            activation,
        })
    }

    /// `mask` is an additive `[T, T]` bias (0 or -inf).
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, fwd: &mut Forward) -> Result<Tensor> {
        let (b, t, dim) = x.dims3()?;
        let hd = dim / self.heads;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?;
        let qkv = qkv.reshape((b, t, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        if fwd.record_attention {
            fwd.attention.push(attn.detach());
        }
        let attn = fwd.dropout(&attn)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, dim))?;
        let x = (x + fwd.dropout(&self.proj.forward(&ctx)?)?)?;
        let h = self.activation.apply(&self.fc1.forward(&self.ln2.forward(&x)?)?)?;
        let x = (&x + fwd.dropout(&self.fc2.forward(&h)?)?)?;
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Transformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), dim, heads, mlp_ratio, activation, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), dim)? })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, fwd: &mut Forward) -> Result<Tensor> {
        let mut x = x.clone();
        for block in &self.blocks {
            x = block.forward(&x, mask, fwd)?;
        }
        self.ln_f.forward(&x)
    }
}

/// Additive causal mask: position `t` may attend to `s <= t`.
pub fn causal_mask(t: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j <= i { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(data, (t, t), device)?)
}

/// Additive mask that forbids attention between the first `k` positions and
/// the remaining ones (both directions).
pub fn block_cross_mask(k: usize, total: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..total)
        .flat_map(|i| (0..total).map(move |j| if (i < k) == (j < k) { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(data, (total, total), device)?)
}

/// Identity in the forward pass whose backward multiplies the incoming
/// gradient by `scale`. The forward value is bit-identical to `x`.
pub fn grad_scale(x: &Tensor, scale: f64) -> Result<Tensor> {
    let frozen = x.detach();
    Ok(frozen.add(&(x.sub(&frozen)? * scale)?)?)
}

/// Straight-through combination: forward value of `hard` (bit-exact),
/// gradient of `soft`.
pub fn straight_through(soft: &Tensor, hard: &Tensor) -> Result<Tensor> {
    Ok(soft.sub(&soft.detach())?.add(hard)?)
}

/// Row-wise argmax over the last axis with ties going to the lowest index.
pub fn argmax_rows<T: PartialOrd + Copy>(values: &[T], width: usize) -> Vec<u32> {
    values
        .chunks_exact(width)
        .map(|row| {
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// One-hot encoding of ids as a `[ids.len(), width]` tensor.
pub fn one_hot(ids: &[u32], width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; ids.len() * width];
    for (row, &id) in ids.iter().enumerate() {
        data[row * width + id as usize] = 1.0;
    }
    Ok(Tensor::from_vec(data, (ids.len(), width), device)?.to_dtype(dtype)?)
}

/// Flattened values of any float tensor as `f64`.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Gradient of `t` in `grads`, or zeros when `t` did not reach the loss.
pub fn grad_or_zeros(grads: &candle_core::backprop::GradStore, t: &Tensor) -> Result<Tensor> {
    Ok(match grads.get(t) {
        Some(g) => g.clone(),
        None => t.zeros_like()?,
    })
}

/// Largest absolute entry of a tensor.
pub fn max_abs(t: &Tensor) -> Result<f32> {
    Ok(t.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grad_scale_is_exact_forward_and_scales_backward() {
        let v = Var::new(&[0.1f32, -2.5, 3.3], &Device::Cpu).unwrap();
        let y = grad_scale(v.as_tensor(), 3.0).unwrap();
        assert_eq!(y.to_vec1::<f32>().unwrap(), vec![0.1, -2.5, 3.3]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(v.as_tensor()).unwrap().to_vec1::<f32>().unwrap(), vec![3.0; 3]);
    }

    #[test]
    fn straight_through_value_is_hard() {
        let soft = Var::new(&[0.3f32, 0.7], &Device::Cpu).unwrap();
        let hard = Tensor::new(&[0f32, 1.0], &Device::Cpu).unwrap();
        let st = straight_through(soft.as_tensor(), &hard).unwrap();
        assert_eq!(st.to_vec1::<f32>().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, 0.0, 0.0, 0.0], 3), vec![1, 0]);
    }

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask(3, &Device::Cpu).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(m[0][0], 0.0);
        assert!(m[0][1].is_infinite());
        assert_eq!(m[2][1], 0.0);
    }

    #[test]
    fn store_hash_and_import() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        Linear::new(&mut a, "l", 3, 2, true, &mut rng).unwrap();
        let h = a.hash().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamStore::new();
        Linear::new(&mut b, "l", 3, 2, true, &mut rng).unwrap();
        assert_ne!(h, b.hash().unwrap());
        b.import("", &a.export("").unwrap()).unwrap();
        assert_eq!(h, b.hash().unwrap());
    }
}
