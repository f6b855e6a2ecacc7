//! Quantizers for the two token groups.
//!
//! Visual tokens use an L2-normalized nearest-neighbour VQ with an
//! embedding-space straight-through estimator. Prologue tokens use a
//! probability-space straight-through estimator: the forward value is the
//! one-hot argmax of `softmax(h . c / tau)`, the backward pass follows the
//! softmax probabilities.

use candle_core::{DType, Device, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{argmax_rows, one_hot, straight_through, to_f64_vec, ParamStore};

/// An ordered set of code vectors.
#[derive(Debug, Clone)]
pub struct Codebook {
    vectors: Var,
    normalized: bool,
}

impl Codebook {
    /// Unit-norm rows drawn from a Gaussian (visual codebook).
    pub fn normalized(store: &mut ParamStore, name: &str, size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_size(size, dim)?;
        let vectors = store.normal(name, &[size, dim], 1.0, rng)?;
        let cb = Self { vectors, normalized: true };
        cb.renormalize()?;
        Ok(cb)
    }

    /// Unnormalized Gaussian rows (prologue codebook).
    pub fn gaussian(store: &mut ParamStore, name: &str, size: usize, dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_size(size, dim)?;
        Ok(Self { vectors: store.normal(name, &[size, dim], std, rng)?, normalized: false })
    }

    /// Wraps an existing tensor; normalizes rows when `normalized` is set.
    pub fn from_tensor(vectors: Tensor, normalized: bool) -> Result<Self> {
        let (size, dim) = vectors.dims2()?;
        check_size(size, dim)?;
        let cb = Self { vectors: Var::from_tensor(&vectors)?, normalized };
        if normalized {
            cb.renormalize()?;
        }
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.dims()[1]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn vectors(&self) -> &Tensor {
        self.vectors.as_tensor()
    }

    pub fn var(&self) -> &Var {
        &self.vectors
    }

    /// Re-projects rows onto the unit sphere (no-op for unnormalized books).
    pub fn renormalize(&self) -> Result<()> {
        if self.normalized {
            let v = self.vectors.as_tensor().detach();
            self.vectors.set(&l2_normalize(&v)?)?;
        }
        Ok(())
    }

    /// Rows for the given ids, `[ids.len(), dim]`.
    pub fn lookup(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.size()) {
            return Err(Error::InvalidInput(format!("code id {bad} outside [0, {})", self.size())));
        }
        let idx = Tensor::from_slice(ids, ids.len(), self.vectors.device())?;
        Ok(self.vectors.as_tensor().index_select(&idx, 0)?)
    }
}

fn check_size(size: usize, dim: usize) -> Result<()> {
    if size < 2 || dim == 0 {
        Err(Error::Config(format!("codebook needs at least 2 rows of positive dim, got {size}x{dim}")))
    } else {
        Ok(())
    }
}

/// Row-wise L2 normalization over the last axis.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Output of the visual quantizer.
#[derive(Debug, Clone)]
pub struct VqOutput {
    /// Code ids, shape of the input without its last axis.
    pub ids: Vec<u32>,
    pub id_shape: Vec<usize>,
    /// Selected code vectors in the forward pass, identity gradient to the
    /// normalized input in the backward pass.
    pub quantized: Tensor,
    /// Mean squared difference between normalized inputs and their codes,
    /// gradient to the codebook only.
    pub codebook_loss: Tensor,
    /// The same value with gradient to the inputs only.
    pub commit_loss: Tensor,
}

impl VqOutput {
    /// `codebook_loss + beta * commit_loss`.
    pub fn loss(&self, beta: f64) -> Result<Tensor> {
        Ok(self.codebook_loss.add(&(&self.commit_loss * beta)?)?)
    }

    pub fn ids_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.ids, self.id_shape.as_slice(), device)?)
    }
}

/// Nearest-neighbour quantization by cosine similarity against a normalized
/// codebook. Ties go to the lowest index.
pub fn vq_encode(h: &Tensor, cb: &Codebook) -> Result<VqOutput> {
    if !cb.is_normalized() {
        return Err(Error::Config("vq_encode requires a normalized codebook".into()));
    }
    let dims = h.dims().to_vec();
    let d = *dims.last().ok_or_else(|| Error::Shape("scalar input to vq_encode".into()))?;
    if d != cb.dim() {
        return Err(Error::Shape(format!("input dim {d} vs codebook dim {}", cb.dim())));
    }
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let flat = h.reshape((rows, d))?;
    let hn = l2_normalize(&flat)?;
    let sims = hn.detach().matmul(&cb.vectors().detach().t()?)?;
    let sims = to_f64_vec(&sims)?;
    if sims.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("vq_encode input".into()));
    }
    let ids = argmax_rows(&sims, cb.size());
    let codes = cb.lookup(&ids)?.to_dtype(h.dtype())?;
    // Per-element mean, so the scale does not grow with the code dimension.
    let codebook_loss = hn.detach().sub(&codes)?.sqr()?.mean_all()?;
    let commit_loss = hn.sub(&codes.detach())?.sqr()?.mean_all()?;
    let quantized = straight_through(&hn, &codes.detach())?.reshape(dims.as_slice())?;
    Ok(VqOutput { ids, id_shape: dims[..dims.len() - 1].to_vec(), quantized, codebook_loss, commit_loss })
}

/// Output of the probability-space straight-through estimator.
#[derive(Debug, Clone)]
pub struct ProbSteOutput {
    pub hard_ids: Vec<u32>,
    pub id_shape: Vec<usize>,
    /// `softmax(h . c / tau)`, `[.., V]`.
    pub soft_probs: Tensor,
    /// Exactly one-hot in value; carries the gradient of `soft_probs`.
    pub pass_through: Tensor,
    /// `pass_through . codebook`, `[.., dim]`.
    pub quantized: Tensor,
}

/// Prologue quantizer. The hard assignment is the argmax of the raw dot
/// products, which makes it independent of `tau`.
pub fn prob_ste(h: &Tensor, cb: &Codebook, tau: f64) -> Result<ProbSteOutput> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("Prob-STE temperature must be positive, got {tau}")));
    }
    let dims = h.dims().to_vec();
    let d = *dims.last().ok_or_else(|| Error::Shape("scalar input to prob_ste".into()))?;
    if d != cb.dim() {
        return Err(Error::Shape(format!("input dim {d} vs codebook dim {}", cb.dim())));
    }
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let v = cb.size();
    let flat = h.reshape((rows, d))?;
    let book = cb.vectors().to_dtype(h.dtype())?;
    let dots = flat.matmul(&book.t()?)?;
    let raw = to_f64_vec(&dots)?;
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue("prob_ste input".into()));
    }
    let hard_ids = argmax_rows(&raw, v);
    let soft = candle_nn::ops::softmax(&(dots / tau)?, D::Minus1)?;
    let hot = one_hot(&hard_ids, v, h.dtype(), h.device())?;
    let pass = straight_through(&soft, &hot)?;
    let quantized = pass.matmul(&book)?;
    let mut prob_shape = dims.clone();
    *prob_shape.last_mut().unwrap() = v;
    let mut q_shape = dims.clone();
    *q_shape.last_mut().unwrap() = d;
    Ok(ProbSteOutput {
        hard_ids,
        id_shape: dims[..dims.len() - 1].to_vec(),
        soft_probs: soft.reshape(prob_shape.as_slice())?,
        pass_through: pass.reshape(prob_shape.as_slice())?,
        quantized: quantized.reshape(q_shape.as_slice())?,
    })
}

/// Straight-through one-hot of an arbitrary logit tensor `[.., V]`:
/// returns (argmax ids, one-hot forward value with the softmax gradient).
pub fn soft_pass_through(logits: &Tensor) -> Result<(Vec<u32>, Tensor)> {
    let dims = logits.dims().to_vec();
    let v = *dims.last().unwrap();
    let rows = logits.elem_count() / v;
    let flat = logits.reshape((rows, v))?;
    let ids = argmax_rows(&to_f64_vec(&flat)?, v);
    let soft = candle_nn::ops::softmax(&flat, D::Minus1)?;
    let hot = one_hot(&ids, v, logits.dtype(), logits.device())?;
    Ok((ids, straight_through(&soft, &hot)?.reshape(dims.as_slice())?))
}

/// Differentiable view of the visual assignment used by the AR-regularized
/// baselines: `softmax(cos / tau)` with a one-hot forward value. The ids match
/// [`vq_encode`] on the same input.
pub fn vq_pass_through(h: &Tensor, cb: &Codebook, tau: f64) -> Result<(Vec<u32>, Tensor)> {
    let dims = h.dims().to_vec();
    let d = *dims.last().ok_or_else(|| Error::Shape("scalar input to vq_pass_through".into()))?;
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let hn = l2_normalize(&h.reshape((rows, d))?)?;
    let sims = hn.matmul(&cb.vectors().t()?)?;
    let ids = argmax_rows(&to_f64_vec(&sims)?, cb.size());
    let soft = candle_nn::ops::softmax(&(sims / tau)?, D::Minus1)?;
    let hot = one_hot(&ids, cb.size(), h.dtype(), h.device())?;
    let mut shape = dims.clone();
    *shape.last_mut().unwrap() = cb.size();
    Ok((ids, straight_through(&soft, &hot)?.reshape(shape.as_slice())?))
}

/// Usage histogram and perplexity (`exp` of the usage entropy in nats).
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStats {
    pub usage: Vec<f64>,
    pub perplexity: f64,
}

pub fn codebook_stats(ids: impl IntoIterator<Item = u32>, size: usize) -> Result<CodebookStats> {
    let mut counts = vec![0u64; size];
    let mut total = 0u64;
    for id in ids {
        let slot = counts
            .get_mut(id as usize)
            .ok_or_else(|| Error::InvalidInput(format!("code id {id} outside [0, {size})")))?;
        *slot += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::InvalidInput("empty id stream".into()));
    }
    let usage: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let entropy: f64 = usage.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok(CodebookStats { usage, perplexity: entropy.exp() })
}

/// Convenience for tests and diagnostics: a codebook held in `f64`.
pub fn codebook_f64(rows: &[Vec<f64>], normalized: bool) -> Result<Codebook> {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let t = Tensor::from_vec(flat, (rows.len(), dim), &Device::Cpu)?.to_dtype(DType::F64)?;
    Codebook::from_tensor(t, normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn cpu() -> Device {
        Device::Cpu
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        use rand_distr::{Distribution, StandardNormal};
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect()
    }

    #[test]
    fn exact_code_row_is_selected_with_zero_commit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = codebook_f64(&random_rows(&mut rng, 8, 5), true).unwrap();
        let row = cb.vectors().get(3).unwrap().reshape((1, 5)).unwrap();
        let out = vq_encode(&row, &cb).unwrap();
        assert_eq!(out.ids, vec![3]);
        assert!(out.commit_loss.to_scalar::<f64>().unwrap() < 1e-20);
    }

    #[test]
    fn nearest_axis() {
        let cb = codebook_f64(&[vec![1.0, 0.0], vec![0.0, 1.0]], true).unwrap();
        let h = Tensor::new(&[[0.9f64, 0.1]], &cpu()).unwrap();
        assert_eq!(vq_encode(&h, &cb).unwrap().ids, vec![0]);
    }

    #[test]
    fn ties_take_lowest_index() {
        let cb = codebook_f64(&[vec![1.0, 0.0], vec![0.0, 1.0]], true).unwrap();
        let h = Tensor::new(&[[1.0f64, 1.0]], &cpu()).unwrap();
        assert_eq!(vq_encode(&h, &cb).unwrap().ids, vec![0]);
    }

    #[test]
    fn vq_rejects_non_finite_and_unnormalized() {
        let cb = codebook_f64(&[vec![1.0, 0.0], vec![0.0, 1.0]], true).unwrap();
        let h = Tensor::new(&[[f64::NAN, 1.0]], &cpu()).unwrap();
        assert!(vq_encode(&h, &cb).is_err());
        let raw = codebook_f64(&[vec![1.0, 0.0], vec![0.0, 1.0]], false).unwrap();
        assert!(matches!(vq_encode(&Tensor::new(&[[1.0f64, 0.0]], &cpu()).unwrap(), &raw), Err(Error::Config(_))));
    }

    #[test]
    fn vq_quantized_values_are_code_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = codebook_f64(&random_rows(&mut rng, 16, 4), true).unwrap();
        let h = Tensor::from_vec(random_rows(&mut rng, 6, 4).concat(), (2, 3, 4), &cpu()).unwrap();
        let out = vq_encode(&h, &cb).unwrap();
        assert_eq!(out.quantized.dims(), &[2, 3, 4]);
        let expected = cb.lookup(&out.ids).unwrap().reshape((2, 3, 4)).unwrap();
        assert_eq!(to_f64_vec(&out.quantized).unwrap(), to_f64_vec(&expected).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn vq_matches_exhaustive_search(seed in 0u64..10_000, v in 2usize..=64, d in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = random_rows(&mut rng, v, d);
            let cb = codebook_f64(&rows, true).unwrap();
            let hs = random_rows(&mut rng, 10, d);
            let h = Tensor::from_vec(hs.concat(), (10, d), &cpu()).unwrap();
            let out = vq_encode(&h, &cb).unwrap();
            // Brute force: smallest euclidean distance between unit vectors.
            let unit = |r: &[f64]| { let n = r.iter().map(|x| x * x).sum::<f64>().sqrt(); r.iter().map(|x| x / n).collect::<Vec<_>>() };
            for (i, hrow) in hs.iter().enumerate() {
                let hu = unit(hrow);
                let mut best = (0usize, f64::INFINITY);
                for (j, c) in rows.iter().enumerate() {
                    let cu = unit(c);
                    let dist: f64 = hu.iter().zip(&cu).map(|(a, b)| (a - b).powi(2)).sum();
                    if dist < best.1 - 1e-12 { best = (j, dist); }
                }
                prop_assert_eq!(out.ids[i] as usize, best.0);
            }
        }

        #[test]
        fn prob_ste_hard_ids_are_tau_invariant(seed in 0u64..10_000, tau_a in 0.001f64..10.0, tau_b in 0.001f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = codebook_f64(&random_rows(&mut rng, 12, 3), false).unwrap();
            let h = Tensor::from_vec(random_rows(&mut rng, 5, 3).concat(), (5, 3), &cpu()).unwrap();
            let a = prob_ste(&h, &cb, tau_a).unwrap();
            let b = prob_ste(&h, &cb, tau_b).unwrap();
            prop_assert_eq!(a.hard_ids, b.hard_ids);
        }
    }

    #[test]
    fn prob_ste_forward_values() {
        // Codebook = identity, so logits per code equal h.
        let cb = codebook_f64(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], false).unwrap();
        let h = Tensor::new(&[[2.0f64, 1.0, 0.5]], &cpu()).unwrap();
        for tau in [0.01, 0.1, 1.0, 5.0] {
            assert_eq!(prob_ste(&h, &cb, tau).unwrap().hard_ids, vec![0]);
        }
        let out = prob_ste(&h, &cb, 1.0).unwrap();
        let z: f64 = [2.0f64, 1.0, 0.5].iter().map(|x| x.exp()).sum();
        let expected = [2.0f64.exp() / z, 1.0f64.exp() / z, 0.5f64.exp() / z];
        let got = to_f64_vec(&out.soft_probs).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(to_f64_vec(&out.pass_through).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(to_f64_vec(&out.quantized).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(prob_ste(&h, &cb, 0.0), Err(Error::Config(_))));
        assert!(matches!(prob_ste(&h, &cb, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn prob_ste_gradient_equals_softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cb = codebook_f64(&random_rows(&mut rng, 6, 4), false).unwrap();
        let h = Var::from_tensor(&Tensor::from_vec(random_rows(&mut rng, 3, 4).concat(), (3, 4), &cpu()).unwrap()).unwrap();
        let w = Tensor::from_vec(random_rows(&mut rng, 3, 6).concat(), (3, 6), &cpu()).unwrap();
        let out = prob_ste(h.as_tensor(), &cb, 0.5).unwrap();
        let g_pass = out.pass_through.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let out = prob_ste(h.as_tensor(), &cb, 0.5).unwrap();
        let g_soft = out.soft_probs.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let a = to_f64_vec(g_pass.get(h.as_tensor()).unwrap()).unwrap();
        let b = to_f64_vec(g_soft.get(h.as_tensor()).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|x| x.abs() > 0.0));
    }

    #[test]
    fn renormalize_keeps_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cb = Codebook::normalized(&mut store, "cb", 10, 6, &mut rng).unwrap();
        cb.var().set(&(cb.vectors() * 3.0).unwrap()).unwrap();
        cb.renormalize().unwrap();
        for row in cb.vectors().to_vec2::<f32>().unwrap() {
            let n: f32 = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stats() {
        assert!((codebook_stats(vec![7; 20], 16).unwrap().perplexity - 1.0).abs() < 1e-12);
        assert!((codebook_stats(0..16, 16).unwrap().perplexity - 16.0).abs() < 1e-9);
        let h: f64 = -(2.0f64 / 3.0) * (2.0f64 / 3.0).ln() - (1.0f64 / 3.0) * (1.0f64 / 3.0).ln();
        assert!((codebook_stats(vec![0, 0, 1], 4).unwrap().perplexity - h.exp()).abs() < 1e-12);
        assert!(codebook_stats(Vec::<u32>::new(), 4).is_err());
        assert!(codebook_stats(vec![4], 4).is_err());
    }
}
