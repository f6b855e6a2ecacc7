//! Linear probes on token features.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::to_f64_vec;
use crate::pipeline::{Frontend, TokenCache};
use crate::quantization::Codebook;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    /// The K prologue tokens.
    Prologue,
    /// The first K visual tokens in raster order.
    FirstKVisual,
}

impl FromStr for ProbeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prologue" => Ok(Self::Prologue),
            "first_k_visual" | "first-k-visual" => Ok(Self::FirstKVisual),
            other => Err(Error::Config(format!("unknown probe source {other:?}"))),
        }
    }
}

/// Fixed optimization budget shared by every probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeBudget {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeBudget {
    fn default() -> Self {
        Self { epochs: 100, batch: 64, lr: 0.05, weight_decay: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub source: ProbeSource,
    pub top1: f64,
    pub top5: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub feature_dim: usize,
    pub warning: Option<String>,
}

fn codebook_rows(cb: &Codebook) -> Result<Vec<Vec<f64>>> {
    let dim = cb.dim();
    Ok(to_f64_vec(cb.vectors())?.chunks(dim).map(|c| c.to_vec()).collect())
}

/// Concatenated code vectors of the first `k` tokens of each sample.
pub fn token_features(frontend: &Frontend, cache: &TokenCache, source: ProbeSource, k: usize) -> Result<Vec<Vec<f64>>> {
    let (rows, ids) = match source {
        ProbeSource::Prologue => {
            let cb = match &frontend.post {
                Some(p) => p.codebook(),
                None => frontend
                    .tokenizer
                    .prologue_codebook()
                    .ok_or_else(|| Error::InvalidInput("tokenizer has no prologue tokens to probe".into()))?,
            };
            (codebook_rows(cb)?, &cache.zp)
        }
        ProbeSource::FirstKVisual => (codebook_rows(frontend.tokenizer.visual_codebook())?, &cache.zv),
    };
    ids.iter()
        .map(|r| {
            if r.len() < k {
                return Err(Error::InvalidInput(format!("sample has {} tokens, probe needs {k}", r.len())));
            }
            Ok(r[..k].iter().flat_map(|&id| rows[id as usize].iter().copied()).collect())
        })
        .collect()
}

/// Softmax regression trained by minibatch SGD on standardized features.
/// Standardization statistics come from the training split only.
pub fn linear_probe(
    source: ProbeSource,
    train: (&[Vec<f64>], &[u32]),
    test: (&[Vec<f64>], &[u32]),
    num_classes: usize,
    budget: &ProbeBudget,
) -> Result<ProbeResult> {
    let (xs, ys) = train;
    let (xt, yt) = test;
    if xs.is_empty() || xt.is_empty() {
        return Err(Error::NoSamples);
    }
    if xs.len() != ys.len() || xt.len() != yt.len() {
        return Err(Error::Shape("features and labels differ in length".into()));
    }
    let d = xs[0].len();
    if xs.iter().chain(xt).any(|x| x.len() != d) {
        return Err(Error::Shape("features differ in dimension".into()));
    }
    if let Some(&bad) = ys.iter().chain(yt).find(|&&y| y as usize >= num_classes) {
        return Err(Error::InvalidInput(format!("label {bad} outside [0, {num_classes})")));
    }
    let mut counts = vec![0usize; num_classes];
    ys.iter().for_each(|&y| counts[y as usize] += 1);
    let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    let (lo, hi) = (*present.iter().min().unwrap(), *present.iter().max().unwrap());
    let warning = (hi > 10 * lo).then(|| format!("class imbalance {hi}:{lo} in probe training labels"));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }

    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-6))
        .collect();
    let norm = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect() };
    let xs: Vec<Vec<f64>> = xs.iter().map(|x| norm(x)).collect();
    let xt: Vec<Vec<f64>> = xt.iter().map(|x| norm(x)).collect();

    let c = num_classes;
    let mut w = vec![0.0; c * d];
    let mut b = vec![0.0; c];
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut gw = vec![0.0; c * d];
    let mut gb = vec![0.0; c];
    for _ in 0..budget.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(budget.batch.max(1)) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let p = softmax(&logits(&w, &b, &xs[i], c, d));
                for k in 0..c {
                    let err = p[k] - if k == ys[i] as usize { 1.0 } else { 0.0 };
                    gb[k] += err;
                    for j in 0..d {
                        gw[k * d + j] += err * xs[i][j];
                    }
                }
            }
            let scale = budget.lr / chunk.len() as f64;
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= scale * gi + budget.lr * budget.weight_decay * *wi;
            }
            for (bi, gi) in b.iter_mut().zip(&gb) {
                *bi -= scale * gi;
            }
        }
    }

    let (mut top1, mut top5) = (0usize, 0usize);
    for (x, &y) in xt.iter().zip(yt) {
        let z = logits(&w, &b, x, c, d);
        let target = z[y as usize];
        // Rank counts strictly larger logits, plus equal ones at lower index.
        let rank = z.iter().enumerate().filter(|&(k, &v)| v > target || (v == target && k < y as usize)).count();
        top1 += (rank == 0) as usize;
        top5 += (rank < 5) as usize;
    }
    let m = xt.len() as f64;
    Ok(ProbeResult {
        source,
        top1: top1 as f64 / m,
        top5: top5 as f64 / m,
        train_samples: xs.len(),
        test_samples: xt.len(),
        feature_dim: d,
        warning,
    })
}

fn logits(w: &[f64], b: &[f64], x: &[f64], c: usize, d: usize) -> Vec<f64> {
    (0..c).map(|k| b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn label_features_are_separable() {
        let labels: Vec<u32> = (0..60).map(|i| i % 6).collect();
        let feats: Vec<Vec<f64>> = labels.iter().map(|&y| (0..6).map(|k| (k == y) as u32 as f64).collect()).collect();
        let r = linear_probe(ProbeSource::Prologue, (&feats, &labels), (&feats, &labels), 6, &ProbeBudget::default()).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.top5, 1.0);
    }

    #[test]
    fn noise_features_are_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = |n: usize| -> (Vec<Vec<f64>>, Vec<u32>) {
            let y: Vec<u32> = (0..n).map(|i| (i % 10) as u32).collect();
            let x = (0..n).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
            (x, y)
        };
        let (xs, ys) = draw(200);
        let (xt, yt) = draw(1000);
        let r = linear_probe(ProbeSource::FirstKVisual, (&xs, &ys), (&xt, &yt), 10, &ProbeBudget::default()).unwrap();
        assert!(r.top1 < 0.2, "{}", r.top1);
    }

    #[test]
    fn warns_on_imbalance() {
        let mut labels = vec![0u32; 22];
        labels.push(1);
        labels.push(1);
        let feats: Vec<Vec<f64>> = labels.iter().map(|&y| vec![y as f64]).collect();
        let budget = ProbeBudget { epochs: 1, ..Default::default() };
        let r = linear_probe(ProbeSource::Prologue, (&feats, &labels), (&feats, &labels), 2, &budget).unwrap();
        assert!(r.warning.is_some());
    }
}
