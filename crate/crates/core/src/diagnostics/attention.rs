//! Attention maps of the AR model.
//!
//! Input layout is `[class, zp_1..zp_K, zv_1..zv_{N-1}]`, so row `i` is the
//! query at input position `i`, prologue keys are columns `1..=K` and visual
//! queries are rows `K+1..T`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ar::{ArModel, ArSequence};
use crate::error::{Error, Result};
use crate::nn::to_f64_vec;
use crate::plot::heatmap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMap {
    pub layer: usize,
    /// Row-major `[T, T]`, heads and batch averaged.
    pub matrix: Vec<f64>,
    /// Mean over visual queries of the attention mass on prologue keys.
    pub prologue_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub prologue_tokens: usize,
    pub visual_tokens: usize,
    pub seq_len: usize,
    pub layers: Vec<LayerMap>,
    /// `K / (K + N)`.
    pub uniform_baseline: f64,
    /// Prologue mass of causal uniform attention under the same masking.
    pub causal_uniform_baseline: f64,
}

impl AttentionReport {
    /// Prologue mass averaged over the reported layers.
    pub fn prologue_mass(&self) -> f64 {
        self.layers.iter().map(|l| l.prologue_mass).sum::<f64>() / self.layers.len().max(1) as f64
    }

    /// Mean of the layer matrices.
    pub fn mean_matrix(&self) -> Vec<f64> {
        let t = self.seq_len;
        let mut m = vec![0.0; t * t];
        for l in &self.layers {
            for (o, v) in m.iter_mut().zip(&l.matrix) {
                *o += v / self.layers.len() as f64;
            }
        }
        m
    }

    /// One map per prologue key: attention from each visual query, placed at
    /// the grid position of that query's input token. The final grid cell has
    /// no query and stays zero.
    pub fn prologue_heatmaps(&self) -> Vec<Vec<f64>> {
        let (k, n, t) = (self.prologue_tokens, self.visual_tokens, self.seq_len);
        let m = self.mean_matrix();
        (1..=k)
            .map(|key| {
                let mut cells = vec![0.0; n];
                for row in (k + 1)..t {
                    cells[row - k - 1] = m[row * t + key];
                }
                cells
            })
            .collect()
    }

    /// Writes `attn_layer{l}.png` per layer, `attn_prologue{j}.png` per
    /// prologue key (square visual grids only) and `attention.json`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        let t = self.seq_len;
        for l in &self.layers {
            let p = dir.join(format!("attn_layer{}.png", l.layer));
            heatmap(&l.matrix, t, t, 6)?.save(&p)?;
            out.push(p);
        }
        let side = (self.visual_tokens as f64).sqrt().round() as usize;
        if side * side == self.visual_tokens {
            for (j, cells) in self.prologue_heatmaps().iter().enumerate() {
                let p = dir.join(format!("attn_prologue{j}.png"));
                heatmap(cells, side, side, 12)?.save(&p)?;
                out.push(p);
            }
        }
        let p = dir.join("attention.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)?)?;
        out.push(p);
        Ok(out)
    }
}

/// Zeroes the diagonal and the first column, then rescales nonzero rows to
/// sum to one.
pub fn mask_and_renormalize(m: &mut [f64], t: usize) {
    for i in 0..t {
        m[i * t + i] = 0.0;
        m[i * t] = 0.0;
        let row = &mut m[i * t..(i + 1) * t];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

fn prologue_mass(m: &[f64], t: usize, k: usize) -> f64 {
    let rows = (k + 1)..t;
    let count = rows.len();
    if count == 0 || k == 0 {
        return 0.0;
    }
    rows.map(|i| m[i * t + 1..i * t + 1 + k].iter().sum::<f64>()).sum::<f64>() / count as f64
}

/// Averages `[B, H, T, T]` attention over batch and heads, masking the
/// diagonal and first column of each head before averaging and
/// renormalizing rows afterwards.
pub fn average_map(probs: &[f64], batch: usize, heads: usize, t: usize) -> Result<Vec<f64>> {
    if probs.len() != batch * heads * t * t {
        return Err(Error::Shape(format!("{} attention values for [{batch}, {heads}, {t}, {t}]", probs.len())));
    }
    let mut avg = vec![0.0; t * t];
    for head in probs.chunks(t * t) {
        for i in 0..t {
            for j in 0..t {
                if i != j && j != 0 {
                    avg[i * t + j] += head[i * t + j];
                }
            }
        }
    }
    mask_and_renormalize(&mut avg, t);
    Ok(avg)
}

/// Attention report for the given layers (0-based). Empty `layers` means all.
pub fn attention_maps(ar: &ArModel, seq: &ArSequence, layers: &[usize]) -> Result<AttentionReport> {
    let total = ar.num_layers();
    let layers: Vec<usize> = if layers.is_empty() { (0..total).collect() } else { layers.to_vec() };
    if let Some(&bad) = layers.iter().find(|&&l| l >= total) {
        return Err(Error::InvalidInput(format!("layer {bad} out of range, model has {total} layers")));
    }
    let probs = ar.attention(seq)?;
    let (k, n) = (ar.prologue_tokens(), ar.visual_tokens());
    let t = k + n;
    let mut maps = Vec::new();
    for &l in &layers {
        let (b, h, tq, tk) = probs[l].dims4()?;
        if tq != t || tk != t {
            return Err(Error::Shape(format!("attention is {tq}x{tk}, expected {t}x{t}")));
        }
        let matrix = average_map(&to_f64_vec(&probs[l])?, b, h, t)?;
        maps.push(LayerMap { layer: l, prologue_mass: prologue_mass(&matrix, t, k), matrix });
    }
    let mut uniform = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..=i {
            uniform[i * t + j] = 1.0;
        }
    }
    mask_and_renormalize(&mut uniform, t);
    Ok(AttentionReport {
        prologue_tokens: k,
        visual_tokens: n,
        seq_len: t,
        layers: maps,
        uniform_baseline: k as f64 / t as f64,
        causal_uniform_baseline: prologue_mass(&uniform, t, k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prologue_mass_of_uniform() {
        let (t, k) = (6, 2);
        let mut m = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..=i {
                m[i * t + j] = 1.0;
            }
        }
        mask_and_renormalize(&mut m, t);
        // Rows 3, 4, 5 see 2, 3, 4 non-masked keys.
        let want = (1.0 + 2.0 / 3.0 + 0.5) / 3.0;
        assert!((prologue_mass(&m, t, k) - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn masking_is_idempotent_and_rows_normalize(vals in proptest::collection::vec(0.0f64..1.0, 25)) {
            let t = 5;
            let mut m = vals.clone();
            mask_and_renormalize(&mut m, t);
            let once = m.clone();
            mask_and_renormalize(&mut m, t);
            for (a, b) in once.iter().zip(&m) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for i in 0..t {
                let s: f64 = m[i * t..(i + 1) * t].iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
                prop_assert_eq!(m[i * t + i], 0.0);
                prop_assert_eq!(m[i * t], 0.0);
            }
        }
    }
}
