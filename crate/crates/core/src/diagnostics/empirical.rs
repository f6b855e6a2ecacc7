//! Information estimates from trained checkpoints.

use serde::{Deserialize, Serialize};

use crate::ar::ArModel;
use crate::diagnostics::info::entropy;
use crate::error::{Error, Result};
use crate::pipeline::{eval_ar, EvalInputs, TokenCache};

/// Plug-in estimates are flagged when there are fewer than this many samples
/// per histogram cell.
pub const SAMPLES_PER_CELL: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalInfo {
    /// Visual CE with every visual input dropped and the prologue ids of
    /// another sample, minus the same with the true prologue ids.
    pub mi_proxy: f64,
    pub ce_visual_true_prologue: f64,
    pub ce_visual_shuffled_prologue: f64,
    /// Plug-in entropy of each prologue position.
    pub h_zp_positions: Vec<f64>,
    /// Plug-in entropy of each visual position.
    pub h_zv_positions: Vec<f64>,
    /// Mean plug-in MI over all (prologue position, visual position) pairs.
    pub mean_pairwise_mi: f64,
    pub samples: usize,
    pub table_size: usize,
    pub warning: Option<String>,
}

/// Histogram entropy of ids in `[0, vocab)`.
pub fn plugin_entropy(ids: impl IntoIterator<Item = u32>, vocab: usize) -> f64 {
    let mut counts = vec![0usize; vocab.max(1)];
    let mut n = 0usize;
    for id in ids {
        counts[id as usize] += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    entropy(&p)
}

/// Histogram MI between two paired id streams.
pub fn plugin_mi(a: &[u32], b: &[u32], vocab_a: usize, vocab_b: usize) -> f64 {
    use std::collections::HashMap;
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let mut joint: HashMap<(u32, u32), usize> = HashMap::new();
    for i in 0..n {
        *joint.entry((a[i], b[i])).or_default() += 1;
    }
    let ha = plugin_entropy(a[..n].iter().copied(), vocab_a);
    let hb = plugin_entropy(b[..n].iter().copied(), vocab_b);
    let hj: f64 = joint.values().map(|&c| c as f64 / n as f64).map(|p| -p * p.ln()).sum();
    (ha + hb - hj).max(0.0)
}

pub fn info_empirical(ar: &ArModel, cache: &TokenCache) -> Result<EmpiricalInfo> {
    let samples = cache.len();
    if samples == 0 {
        return Err(Error::NoSamples);
    }
    let k = ar.prologue_tokens();
    let n = ar.visual_tokens();
    let (vp, vv) = (ar.prologue_vocab(), ar.visual_vocab());
    let true_zp = eval_ar(ar, cache, EvalInputs::VisualDropped)?;
    let shuffled = eval_ar(ar, cache, EvalInputs::VisualDroppedShuffledPrologue)?;

    let column = |rows: &Vec<Vec<u32>>, j: usize| -> Vec<u32> { rows.iter().map(|r| r[j]).collect() };
    let zp_cols: Vec<Vec<u32>> = (0..k).map(|j| column(&cache.zp, j)).collect();
    let zv_cols: Vec<Vec<u32>> = (0..n).map(|j| column(&cache.zv, j)).collect();
    let h_zp_positions = zp_cols.iter().map(|c| plugin_entropy(c.iter().copied(), vp)).collect();
    let h_zv_positions = zv_cols.iter().map(|c| plugin_entropy(c.iter().copied(), vv)).collect();
    let mut mi_sum = 0.0;
    for a in &zp_cols {
        for b in &zv_cols {
            mi_sum += plugin_mi(a, b, vp, vv);
        }
    }
    let pairs = (k * n).max(1);
    let table_size = vp.max(1) * vv;
    let warning = (k > 0 && samples < SAMPLES_PER_CELL * table_size).then(|| {
        format!(
            "{samples} samples for a {table_size}-cell histogram; plug-in MI is biased upward, rely on the CE proxy"
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(EmpiricalInfo {
        mi_proxy: shuffled.ce_visual - true_zp.ce_visual,
        ce_visual_true_prologue: true_zp.ce_visual,
        ce_visual_shuffled_prologue: shuffled.ce_visual,
        h_zp_positions,
        h_zv_positions,
        mean_pairwise_mi: if k == 0 { 0.0 } else { mi_sum / pairs as f64 },
        samples,
        table_size,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plugin_identities() {
        let a = [0u32, 1, 2, 3, 0, 1, 2, 3];
        assert!((plugin_entropy(a.iter().copied(), 4) - 4f64.ln()).abs() < 1e-12);
        assert!((plugin_mi(&a, &a, 4, 4) - 4f64.ln()).abs() < 1e-12);
        let b = [0u32; 8];
        assert!(plugin_mi(&a, &b, 4, 1).abs() < 1e-12);
    }
}
