//! Autoregressive sampling with two-group classifier-free guidance.
//!
//! Prologue positions use a constant guidance scale, visual positions a
//! cosine ramp from 1 to `s_vis`. Each group has its own temperature.

use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ar::ArModel;
use crate::error::{Error, Result};
use crate::nn::argmax_rows;
use crate::plot::image_grid;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfgConfig {
    /// Constant guidance scale on prologue positions.
    pub s_pro: f64,
    /// Final visual guidance scale.
    pub s_vis: f64,
    /// Exponent of the cosine ramp.
    pub cos_p: f64,
    pub t_pro: f64,
    pub t_vis: f64,
    pub top_k: Option<usize>,
    /// Argmax decoding (the zero-temperature limit).
    pub greedy: bool,
}

impl Default for CfgConfig {
    fn default() -> Self {
        Self::prologue()
    }
}

impl CfgConfig {
    /// Prologue base model: constant 0.7, cosine scale 3.75 with p = 0.2.
    pub fn prologue() -> Self {
        Self { s_pro: 0.7, s_vis: 3.75, cos_p: 0.2, t_pro: 1.0, t_vis: 1.0, top_k: None, greedy: false }
    }

    /// Prologue-Post: constant 0.6, cosine scale 3.75 with p = 0.25.
    pub fn post() -> Self {
        Self { s_pro: 0.6, cos_p: 0.25, ..Self::prologue() }
    }

    /// Large tokenizer with the largest AR: constant 0.7, cosine 2.25, p = 0.225.
    pub fn large() -> Self {
        Self { s_vis: 2.25, cos_p: 0.225, ..Self::prologue() }
    }

    /// Conditional-only decoding with a shared temperature.
    pub fn unguided(temperature: f64) -> Self {
        Self { s_pro: 1.0, s_vis: 1.0, cos_p: 1.0, t_pro: temperature, t_vis: temperature, top_k: None, greedy: false }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.s_pro, self.s_vis, self.cos_p, self.t_pro, self.t_vis];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("guidance settings must be finite".into()));
        }
        if self.s_pro < 0.0 || self.s_vis < 0.0 {
            return Err(Error::Config("guidance scales must be >= 0".into()));
        }
        if self.cos_p <= 0.0 || self.t_pro <= 0.0 || self.t_vis <= 0.0 {
            return Err(Error::Config("cosine exponent and temperatures must be > 0".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// `uncond + s * (cond - uncond)`; `s = 1` returns `cond` and `s = 0`
/// returns `uncond` exactly.
pub fn guided_logits(cond: &Tensor, uncond: &Tensor, s: f64) -> Result<Tensor> {
    if cond.dims() != uncond.dims() {
        return Err(Error::Shape(format!("cond {:?} vs uncond {:?}", cond.dims(), uncond.dims())));
    }
    if s == 1.0 {
        return Ok(cond.clone());
    }
    if s == 0.0 {
        return Ok(uncond.clone());
    }
    Ok(uncond.add(&(cond.sub(uncond)? * s)?)?)
}

/// Visual guidance scale at visual position `t` of `n`:
/// `1 + (s_vis - 1) * ((1 - cos(pi t / (n - 1))) / 2)^p`.
pub fn visual_scale_at(t: usize, n: usize, s_vis: f64, cos_p: f64) -> f64 {
    if n < 2 {
        return s_vis;
    }
    if t == 0 {
        return 1.0;
    }
    if t >= n - 1 {
        return s_vis;
    }
    let x = (1.0 - (std::f64::consts::PI * t as f64 / (n - 1) as f64).cos()) / 2.0;
    1.0 + (s_vis - 1.0) * x.powf(cos_p)
}

/// One generated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub class: u32,
    pub zp: Vec<u32>,
    pub zv: Vec<u32>,
    pub seed: u64,
}

/// Draws one id per row from `[B, V]` logits.
fn pick(logits: &Tensor, temperature: f64, top_k: Option<usize>, greedy: bool, rngs: &mut [ChaCha8Rng]) -> Result<Vec<u32>> {
    let v = logits.dims()[1];
    let values = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if greedy {
        return Ok(argmax_rows(&values, v));
    }
    let mut out = Vec::with_capacity(rngs.len());
    for (row, rng) in values.chunks_exact(v).zip(rngs.iter_mut()) {
        let mut scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
        if let Some(k) = top_k {
            if k < v {
                let mut sorted = scaled.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let cut = sorted[k - 1];
                let mut kept = 0;
                for x in scaled.iter_mut() {
                    if *x >= cut && kept < k {
                        kept += 1;
                    } else {
                        *x = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = v - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                chosen = i;
                break;
            }
            u -= w;
        }
        out.push(chosen as u32);
    }
    Ok(out)
}

/// Logits of the next position with guidance applied.
fn step_logits(ar: &ArModel, cond: &[u32], null: &[u32], zp: &[u32], zv: &[u32], s: f64) -> Result<Tensor> {
    let c = ar.next_logits(cond, zp, zv)?;
    if s == 1.0 {
        return Ok(c);
    }
    let u = ar.next_logits(null, zp, zv)?;
    guided_logits(&c, &u, s)
}

/// Generates one sequence per `(class, seed)` pair. With `fixed_zp` the
/// prologue block is injected verbatim and only visual tokens are sampled.
pub fn generate(ar: &ArModel, classes: &[u32], seeds: &[u64], cfg: &CfgConfig, fixed_zp: Option<&[u32]>) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if classes.is_empty() {
        return Err(Error::InvalidInput("no classes to sample".into()));
    }
    if classes.len() != seeds.len() {
        return Err(Error::Shape(format!("{} classes but {} seeds", classes.len(), seeds.len())));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c as usize >= ar.num_classes()) {
        return Err(Error::InvalidInput(format!("class {bad} outside [0, {})", ar.num_classes())));
    }
    let (k, n) = (ar.prologue_tokens(), ar.visual_tokens());
    let b = classes.len();
    let null = vec![ar.null_class(); b];
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut zp: Vec<Vec<u32>> = vec![Vec::with_capacity(k); b];
    match fixed_zp {
        Some(ids) => {
            if ids.len() != k {
                return Err(Error::Shape(format!("fixed prologue has {} ids, model expects {k}", ids.len())));
            }
            if let Some(&bad) = ids.iter().find(|&&i| i as usize >= ar.prologue_vocab()) {
                return Err(Error::InvalidInput(format!("prologue id {bad} outside [0, {})", ar.prologue_vocab())));
            }
            zp.iter_mut().for_each(|row| row.extend_from_slice(ids));
        }
        None => {
            for _ in 0..k {
                let flat: Vec<u32> = zp.iter().flatten().copied().collect();
                let logits = step_logits(ar, classes, &null, &flat, &[], cfg.s_pro)?;
                let ids = pick(&logits, cfg.t_pro, cfg.top_k, cfg.greedy, &mut rngs)?;
                zp.iter_mut().zip(ids).for_each(|(row, id)| row.push(id));
            }
        }
    }
    let zp_flat: Vec<u32> = zp.iter().flatten().copied().collect();
    let mut zv: Vec<Vec<u32>> = vec![Vec::with_capacity(n); b];
    for t in 0..n {
        let flat: Vec<u32> = zv.iter().flatten().copied().collect();
        let s = visual_scale_at(t, n, cfg.s_vis, cfg.cos_p);
        let logits = step_logits(ar, classes, &null, &zp_flat, &flat, s)?;
        let ids = pick(&logits, cfg.t_vis, cfg.top_k, cfg.greedy, &mut rngs)?;
        zv.iter_mut().zip(ids).for_each(|(row, id)| row.push(id));
    }
    Ok(classes
        .iter()
        .zip(seeds)
        .zip(zp.into_iter().zip(zv))
        .map(|((&class, &seed), (zp, zv))| Sample { class, zp, zv, seed })
        .collect())
}

/// Decodes samples to a `[B, C, H, W]` image tensor.
pub fn decode_samples(tok: &Tokenizer, samples: &[Sample]) -> Result<Tensor> {
    let ids: Vec<u32> = samples.iter().flat_map(|s| s.zv.clone()).collect();
    tok.decode(&ids)
}

/// Generates `n_per_class` samples for each class (row-major: one row per
/// class), writes a tiled PNG at `png` and one JSON line per sample at
/// `manifest`. Sample seeds are `base_seed + index`.
#[allow(clippy::too_many_arguments)]
pub fn sample_grid(
    tok: &Tokenizer,
    ar: &ArModel,
    classes: &[u32],
    n_per_class: usize,
    cfg: &CfgConfig,
    base_seed: u64,
    fixed_zp: Option<&[u32]>,
    png: &Path,
    manifest: &Path,
) -> Result<Vec<Sample>> {
    if classes.is_empty() || n_per_class == 0 {
        return Err(Error::InvalidInput("sample grid needs at least one class and one sample per class".into()));
    }
    let all_classes: Vec<u32> = classes.iter().flat_map(|&c| std::iter::repeat_n(c, n_per_class)).collect();
    let seeds: Vec<u64> = (0..all_classes.len() as u64).map(|i| base_seed + i).collect();
    let mut samples = Vec::with_capacity(all_classes.len());
    for (c, s) in all_classes.chunks(32).zip(seeds.chunks(32)) {
        samples.extend(generate(ar, c, s, cfg, fixed_zp)?);
    }
    let images = decode_samples(tok, &samples)?;
    image_grid(&images, classes.len(), n_per_class)?.save(png)?;
    write_manifest(manifest, &samples)?;
    Ok(samples)
}

pub fn write_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        writeln!(f, "{}", serde_json::to_string(s)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<Sample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArConfig;
    use crate::nn::Activation;
    use candle_core::Device;

    fn ar() -> ArModel {
        let cfg = ArConfig { dim: 16, layers: 1, heads: 2, mlp_ratio: 2, activation: Activation::Relu, dropout: 0.0, emb_dropout: 0.0 };
        ArModel::new(&cfg, 3, 5, 7, 9, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn guidance_formula() {
        let c = Tensor::new(&[[1f32, 2.0]], &Device::Cpu).unwrap();
        let u = Tensor::new(&[[0f32, 0.0]], &Device::Cpu).unwrap();
        assert_eq!(guided_logits(&c, &u, 2.0).unwrap().to_vec2::<f32>().unwrap(), vec![vec![2.0, 4.0]]);
        assert_eq!(guided_logits(&c, &u, 1.0).unwrap().to_vec2::<f32>().unwrap(), c.to_vec2::<f32>().unwrap());
        assert_eq!(guided_logits(&c, &u, 0.0).unwrap().to_vec2::<f32>().unwrap(), u.to_vec2::<f32>().unwrap());
        assert!(guided_logits(&c, &Tensor::new(&[0f32], &Device::Cpu).unwrap(), 2.0).is_err());
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        assert_eq!(visual_scale_at(0, 64, 3.75, 0.25), 1.0);
        assert_eq!(visual_scale_at(63, 64, 3.75, 0.25), 3.75);
        assert_eq!(visual_scale_at(0, 1, 2.25, 0.225), 2.25);
        let s: Vec<f64> = (0..64).map(|t| visual_scale_at(t, 64, 2.25, 0.225)).collect();
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn greedy_is_deterministic_and_temperature_invariant() {
        let m = ar();
        let cfg = CfgConfig { greedy: true, ..CfgConfig::prologue() };
        let a = generate(&m, &[0, 1], &[1, 2], &cfg, None).unwrap();
        let b = generate(&m, &[0, 1], &[5, 6], &CfgConfig { t_vis: 0.3, t_pro: 3.0, ..cfg.clone() }, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((&x.zp, &x.zv), (&y.zp, &y.zv));
        }
    }

    #[test]
    fn fixed_prologue_is_injected() {
        let m = ar();
        let fixed = [1u32, 6, 2];
        let cfg = CfgConfig::unguided(1.0);
        let a = generate(&m, &[2], &[10], &cfg, Some(&fixed)).unwrap();
        let b = generate(&m, &[2], &[11], &cfg, Some(&fixed)).unwrap();
        assert_eq!(a[0].zp, fixed);
        assert_eq!(b[0].zp, fixed);
        assert_ne!(a[0].zv, b[0].zv);
        assert!(generate(&m, &[2], &[1], &cfg, Some(&[1, 2])).is_err());
        assert!(generate(&m, &[2], &[1], &cfg, Some(&[1, 2, 7])).is_err());
    }

    #[test]
    fn invalid_inputs() {
        let m = ar();
        let cfg = CfgConfig::prologue();
        assert!(generate(&m, &[4], &[0], &cfg, None).is_err());
        assert!(generate(&m, &[], &[], &cfg, None).is_err());
        assert!(CfgConfig { t_vis: 0.0, ..cfg.clone() }.validate().is_err());
    }

    #[test]
    fn top_k_one_is_greedy() {
        let m = ar();
        let greedy = generate(&m, &[3], &[0], &CfgConfig { greedy: true, ..CfgConfig::unguided(1.0) }, None).unwrap();
        let top1 = generate(&m, &[3], &[99], &CfgConfig { top_k: Some(1), ..CfgConfig::unguided(1.0) }, None).unwrap();
        assert_eq!(greedy[0].zv, top1[0].zv);
    }
}
