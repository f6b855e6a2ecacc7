//! Cheap sample-quality proxies for guidance sweeps.
//!
//! `fidelity` is the mean L1 distance from each generated image to its
//! nearest reference image of the same class (lower is better).
//! `consistency` is the accuracy of a pixel-space linear classifier, trained
//! on the reference set, at recovering the conditioning class.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::probe::{linear_probe, ProbeBudget, ProbeSource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleQuality {
    pub fidelity: f64,
    pub consistency: f64,
}

/// Average-pools a `[C, S, S]` image by `factor`.
pub fn pooled(image: &[f32], channels: usize, size: usize, factor: usize) -> Vec<f64> {
    let out = size / factor;
    let mut v = vec![0.0; channels * out * out];
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let (oy, ox) = (y / factor, x / factor);
                if oy < out && ox < out {
                    v[(c * out + oy) * out + ox] += image[(c * size + y) * size + x] as f64;
                }
            }
        }
    }
    let norm = (factor * factor) as f64;
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// `images` is flat `[B, C, S, S]` in the reference set's layout.
pub fn sample_quality(images: &[f32], classes: &[u32], reference: &Dataset, budget: &ProbeBudget) -> Result<SampleQuality> {
    let len = reference.image_len();
    if images.len() != classes.len() * len {
        return Err(Error::Shape(format!("{} pixels for {} images of {len}", images.len(), classes.len())));
    }
    if classes.is_empty() || reference.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut dist = 0.0;
    for (img, &c) in images.chunks(len).zip(classes) {
        let best = (0..reference.len())
            .filter(|&i| reference.label(i) == c)
            .map(|i| img.iter().zip(reference.image(i)).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / len as f64)
            .fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return Err(Error::InvalidInput(format!("reference set has no images of class {c}")));
        }
        dist += best;
    }
    let factor = (reference.size / 8).max(1);
    let feats = |i: &[f32]| pooled(i, reference.channels, reference.size, factor);
    let train_x: Vec<Vec<f64>> = (0..reference.len()).map(|i| feats(reference.image(i))).collect();
    let test_x: Vec<Vec<f64>> = images.chunks(len).map(feats).collect();
    let probe = linear_probe(
        ProbeSource::FirstKVisual,
        (&train_x, reference.labels()),
        (&test_x, classes),
        reference.num_classes,
        budget,
    )?;
    Ok(SampleQuality { fidelity: dist / classes.len() as f64, consistency: probe.top1 })
}
