//! Exact information quantities of small discrete joints `q(z_p, z_v)`.
//!
//! Every quantity is computed by its own direct summation so that identities
//! between them (chain rule, CE = H + KL, conditioning gap = MI) are real
//! checks rather than rearrangements of one number. Units are nats and
//! `0 log 0 = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major pmf over `A` prologue states (rows) and `B` visual states
/// (columns). Visual states may carry a mixed-radix factorization into
/// positions (`visual_shape`, product = `B`, first position most significant).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    pmf: Vec<f64>,
    rows: usize,
    cols: usize,
    visual_shape: Vec<usize>,
}

pub const NORMALIZATION_TOL: f64 = 1e-12;

impl DiscreteJoint {
    pub fn new(pmf: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || pmf.len() != rows * cols {
            return Err(Error::Shape(format!("{} entries for a {rows}x{cols} joint", pmf.len())));
        }
        if let Some(bad) = pmf.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidInput(format!("pmf entry {bad} is not a probability")));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidInput(format!("pmf is not normalized: sums to {total}")));
        }
        Ok(Self { pmf, rows, cols, visual_shape: vec![cols] })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidInput("weights must have a positive finite sum".into()));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect(), rows, cols)
    }

    /// Declares how visual states split into positions.
    pub fn with_visual_shape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.iter().product::<usize>() != self.cols || shape.contains(&0) {
            return Err(Error::Shape(format!("visual shape {shape:?} does not factor {} states", self.cols)));
        }
        self.visual_shape = shape.to_vec();
        Ok(self)
    }

    /// Random joint with Dirichlet(1)-like weights; `zero_frac` of the cells
    /// are zeroed (at least one stays positive).
    pub fn random(rng: &mut impl Rng, rows: usize, cols: usize, zero_frac: f64) -> Result<Self> {
        let mut w: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < zero_frac { 0.0 } else { -(1.0 - rng.random::<f64>()).ln() })
            .collect();
        if w.iter().all(|&x| x == 0.0) {
            let i = rng.random_range(0..w.len());
            w[i] = 1.0;
        }
        Self::from_weights(w, rows, cols)
    }

    /// `q(a, b) = q(a) q(b)`.
    pub fn independent(pa: &[f64], pb: &[f64]) -> Result<Self> {
        let pmf = pa.iter().flat_map(|a| pb.iter().map(move |b| a * b)).collect();
        Self::new(pmf, pa.len(), pb.len())
    }

    /// `q(a, b) = q_v(b) 1[f(b) = a]`: a deterministic prologue encoder.
    pub fn deterministic(q_v: &[f64], f: &[usize], rows: usize) -> Result<Self> {
        if f.len() != q_v.len() || f.iter().any(|&a| a >= rows) {
            return Err(Error::Shape("encoder map does not match the visual states".into()));
        }
        let cols = q_v.len();
        let mut pmf = vec![0.0; rows * cols];
        for (b, (&p, &a)) in q_v.iter().zip(f).enumerate() {
            pmf[a * cols + b] = p;
        }
        Self::new(pmf, rows, cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn visual_shape(&self) -> &[usize] {
        &self.visual_shape
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.pmf[a * self.cols + b]
    }

    pub fn marginal_p(&self) -> Vec<f64> {
        (0..self.rows).map(|a| (0..self.cols).map(|b| self.get(a, b)).sum()).collect()
    }

    pub fn marginal_v(&self) -> Vec<f64> {
        (0..self.cols).map(|b| (0..self.rows).map(|a| self.get(a, b)).sum()).collect()
    }

    /// Digits of visual state `b` under the visual shape.
    pub fn visual_digits(&self, b: usize) -> Vec<usize> {
        let mut digits = vec![0; self.visual_shape.len()];
        let mut rest = b;
        for (i, &r) in self.visual_shape.iter().enumerate().rev() {
            digits[i] = rest % r;
            rest /= r;
        }
        digits
    }
}

fn neg_plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Entropy of a pmf in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().map(|&x| neg_plogp(x)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub h_joint: f64,
    pub h_zp: f64,
    pub h_zv: f64,
    pub h_zv_given_zp: f64,
    pub mi: f64,
}

impl InfoReport {
    /// `H(zp, zv) - (H(zv) + H(zp) - I)`.
    pub fn chain_rule_residual(&self) -> f64 {
        self.h_joint - (self.h_zv + self.h_zp - self.mi)
    }
}

pub fn info_exact(q: &DiscreteJoint) -> InfoReport {
    let pa = q.marginal_p();
    let pb = q.marginal_v();
    let mut h_joint = 0.0;
    let mut h_cond = 0.0;
    let mut mi = 0.0;
    for a in 0..q.rows {
        for b in 0..q.cols {
            let p = q.get(a, b);
            if p > 0.0 {
                h_joint -= p * p.ln();
                h_cond -= p * (p / pa[a]).ln();
                mi += p * (p / (pa[a] * pb[b])).ln();
            }
        }
    }
    InfoReport {
        h_joint,
        h_zp: entropy(&pa),
        h_zv: entropy(&pb),
        // Rounding can leave values a hair below zero.
        h_zv_given_zp: h_cond.max(0.0),
        mi: mi.max(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeDecomposition {
    pub ce: f64,
    pub entropy: f64,
    pub kl: f64,
}

/// `CE(q, p) = -sum q log p`, `H(q)` and `KL(q || p)`, each summed directly.
pub fn ce_decomposition(q: &DiscreteJoint, p: &DiscreteJoint) -> Result<CeDecomposition> {
    if q.rows != p.rows || q.cols != p.cols {
        return Err(Error::Shape(format!("q is {}x{}, p is {}x{}", q.rows, q.cols, p.rows, p.cols)));
    }
    let (mut ce, mut h, mut kl) = (0.0, 0.0, 0.0);
    for a in 0..q.rows {
        for b in 0..q.cols {
            let (qi, pi) = (q.get(a, b), p.get(a, b));
            if qi > 0.0 {
                if pi <= 0.0 {
                    return Err(Error::Support { row: a, col: b });
                }
                ce -= qi * pi.ln();
                h -= qi * qi.ln();
                kl += qi * (qi / pi).ln();
            }
        }
    }
    Ok(CeDecomposition { ce, entropy: h, kl })
}

/// A model `p(zp) prod_i p(zv_i | zp)` fitted by exact counting: the best
/// AR prior whose visual positions are conditionally independent given the
/// prologue.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedFit {
    pub p_zp: Vec<f64>,
    /// `[a][position][digit]`.
    pub p_pos: Vec<Vec<Vec<f64>>>,
}

impl FactorizedFit {
    pub fn fit(q: &DiscreteJoint) -> Self {
        let pa = q.marginal_p();
        let shape = q.visual_shape.clone();
        let mut p_pos: Vec<Vec<Vec<f64>>> = (0..q.rows).map(|_| shape.iter().map(|&r| vec![0.0; r]).collect()).collect();
        for b in 0..q.cols {
            let digits = q.visual_digits(b);
            for a in 0..q.rows {
                let p = q.get(a, b);
                if p > 0.0 {
                    for (i, &d) in digits.iter().enumerate() {
                        p_pos[a][i][d] += p / pa[a];
                    }
                }
            }
        }
        Self { p_zp: pa, p_pos }
    }

    pub fn prob(&self, q: &DiscreteJoint, a: usize, b: usize) -> f64 {
        self.p_zp[a] * q.visual_digits(b).iter().enumerate().map(|(i, &d)| self.p_pos[a][i][d]).product::<f64>()
    }

    /// The fitted model as a joint over the same cells.
    pub fn joint(&self, q: &DiscreteJoint) -> Result<DiscreteJoint> {
        let pmf: Vec<f64> = (0..q.rows).flat_map(|a| (0..q.cols).map(move |b| (a, b))).map(|(a, b)| self.prob(q, a, b)).collect();
        let total: f64 = pmf.iter().sum();
        DiscreteJoint::new(pmf.into_iter().map(|p| p / total).collect(), q.rows, q.cols)?.with_visual_shape(&q.visual_shape)
    }
}

/// Total CE `-sum q log p` of `q` under its own factorized fit.
pub fn factorized_ce(q: &DiscreteJoint) -> f64 {
    let fit = FactorizedFit::fit(q);
    let mut ce = 0.0;
    for a in 0..q.rows {
        for b in 0..q.cols {
            let p = q.get(a, b);
            if p > 0.0 {
                ce -= p * fit.prob(q, a, b).ln();
            }
        }
    }
    ce
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// Optimal visual CE without a prologue, `-sum q(zv) log q(zv)`.
    pub marginal_ce: f64,
    /// Visual CE of the exact conditional fit, `-sum q log q(zv | zp)`.
    pub conditional_ce: f64,
    pub mi: f64,
    /// `(marginal_ce - conditional_ce) - mi`.
    pub gap_residual: f64,
    /// Total CE with `zp` collapsed to one state under the exact fit.
    pub collapsed_total: f64,
    /// Total CE of the prologue-free baseline under the exact fit.
    pub baseline_total: f64,
    /// `H(zp) - I + KL(q(zp) || p(zp)) + E KL(q(zv|zp) || p(zv|zp))` for the
    /// factorized fit of the given joint.
    pub objective: f64,
    /// Factorized-model total CE minus `H(zv) + objective`.
    pub decomposition_residual: f64,
    pub factorized: Option<EncoderSearch>,
}

/// Exhaustive search over deterministic prologue encoders `f: zv -> zp`
/// with a factorized AR prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSearch {
    /// Factorized CE of the prologue-free baseline.
    pub baseline_total: f64,
    /// Factorized total CE with a constant encoder.
    pub collapsed_total: f64,
    pub best_total: f64,
    pub best_encoder: Vec<usize>,
    pub encoders_tried: usize,
}

/// Largest number of encoders [`collapse_oracle`] will enumerate.
pub const MAX_ENCODERS: usize = 1 << 16;

/// Collapse analysis of a joint. The encoder search runs when
/// `rows^cols <= MAX_ENCODERS`.
pub fn collapse_oracle(q: &DiscreteJoint) -> Result<CollapseReport> {
    let pa = q.marginal_p();
    let pb = q.marginal_v();
    let marginal_ce: f64 = pb.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    let mut conditional_ce = 0.0;
    for a in 0..q.rows {
        for b in 0..q.cols {
            let p = q.get(a, b);
            if p > 0.0 {
                conditional_ce -= p * (p / pa[a]).ln();
            }
        }
    }
    let info = info_exact(q);

    // Collapsed: a single prologue state with p(zp) = 1 contributes
    // -log 1 = 0, and the conditional fit equals the visual marginal.
    let collapsed = DiscreteJoint::new(pb.clone(), 1, q.cols)?;
    let collapsed_total = -(0..q.cols).map(|b| collapsed.get(0, b)).filter(|&p| p > 0.0).map(|p| p * p.ln() + p * 1f64.ln()).sum::<f64>();
    let baseline_total = -pb.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();

    // Objective terms under the factorized fit.
    let fit = FactorizedFit::fit(q);
    let mut kl_p = 0.0;
    for (a, &p) in pa.iter().enumerate() {
        if p > 0.0 {
            kl_p += p * (p / fit.p_zp[a]).ln();
        }
    }
    let mut kl_cond = 0.0;
    let mut total_ce = 0.0;
    for a in 0..q.rows {
        for b in 0..q.cols {
            let p = q.get(a, b);
            if p > 0.0 {
                let model = fit.prob(q, a, b);
                let model_cond = model / fit.p_zp[a];
                kl_cond += p * ((p / pa[a]) / model_cond).ln();
                total_ce -= p * model.ln();
            }
        }
    }
    let objective = info.h_zp - info.mi + kl_p + kl_cond;
    let decomposition_residual = total_ce - (info.h_zv + objective);

    let factorized = encoder_search(q, &pb)?;
    Ok(CollapseReport {
        marginal_ce,
        conditional_ce,
        mi: info.mi,
        gap_residual: (marginal_ce - conditional_ce) - info.mi,
        collapsed_total,
        baseline_total,
        objective,
        decomposition_residual,
        factorized,
    })
}

fn encoder_search(q: &DiscreteJoint, pb: &[f64]) -> Result<Option<EncoderSearch>> {
    let (rows, cols) = (q.rows, q.cols);
    let count = (rows as f64).powi(cols as i32);
    if count > MAX_ENCODERS as f64 {
        return Ok(None);
    }
    let shape = q.visual_shape.clone();
    let baseline = DiscreteJoint::new(pb.to_vec(), 1, cols)?.with_visual_shape(&shape)?;
    let baseline_total = factorized_ce(&baseline);
    let mut f = vec![0usize; cols];
    let collapsed_total = factorized_ce(&DiscreteJoint::deterministic(pb, &f, rows)?.with_visual_shape(&shape)?);
    let mut best_total = collapsed_total;
    let mut best_encoder = f.clone();
    let mut tried = 1usize;
    loop {
        // Next encoder in mixed-radix order.
        let mut i = 0;
        while i < cols {
            f[i] += 1;
            if f[i] < rows {
                break;
            }
            f[i] = 0;
            i += 1;
        }
        if i == cols {
            break;
        }
        tried += 1;
        let total = factorized_ce(&DiscreteJoint::deterministic(pb, &f, rows)?.with_visual_shape(&shape)?);
        if total < best_total {
            best_total = total;
            best_encoder = f.clone();
        }
    }
    Ok(Some(EncoderSearch { baseline_total, collapsed_total, best_total, best_encoder, encoders_tried: tried }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-9;

    #[test]
    fn independent_uniform() {
        let u = [0.25; 4];
        let r = info_exact(&DiscreteJoint::independent(&u, &u).unwrap());
        assert!(r.mi.abs() < TOL);
        assert!((r.h_joint - 2.0 * 4f64.ln()).abs() < TOL);
    }

    #[test]
    fn diagonal() {
        let mut pmf = vec![0.0; 16];
        for i in 0..4 {
            pmf[i * 4 + i] = 0.25;
        }
        let r = info_exact(&DiscreteJoint::new(pmf, 4, 4).unwrap());
        assert!((r.mi - 4f64.ln()).abs() < TOL);
        assert!(r.h_zv_given_zp.abs() < TOL);
    }

    #[test]
    fn rejects_unnormalized() {
        assert!(DiscreteJoint::new(vec![0.5, 0.4], 1, 2).is_err());
        assert!(DiscreteJoint::new(vec![1.5, -0.5], 1, 2).is_err());
    }

    #[test]
    fn ce_against_direct_sum() {
        let q = DiscreteJoint::new(vec![0.25; 4], 1, 4).unwrap();
        let p = DiscreteJoint::new(vec![0.7, 0.1, 0.1, 0.1], 1, 4).unwrap();
        let d = ce_decomposition(&q, &p).unwrap();
        let direct = -0.25 * (0.7f64.ln() + 3.0 * 0.1f64.ln());
        assert!((d.ce - direct).abs() < 1e-12);
        let same = ce_decomposition(&q, &q).unwrap();
        assert_eq!(same.kl, 0.0);
        assert_eq!(same.ce, same.entropy);
    }

    #[test]
    fn support_violation_names_cell() {
        let q = DiscreteJoint::new(vec![0.5, 0.5], 1, 2).unwrap();
        let p = DiscreteJoint::new(vec![1.0, 0.0], 1, 2).unwrap();
        match ce_decomposition(&q, &p) {
            Err(Error::Support { row: 0, col: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn collapsed_prologue_matches_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = DiscreteJoint::random(&mut rng, 1, 6, 0.2).unwrap();
        let r = collapse_oracle(&q).unwrap();
        assert_eq!(r.collapsed_total, r.baseline_total);
        assert_eq!(r.conditional_ce, r.marginal_ce);
    }

    #[test]
    fn copy_prologue_zeroes_conditional_entropy() {
        let q_v = [0.1, 0.2, 0.3, 0.4];
        let q = DiscreteJoint::deterministic(&q_v, &[0, 1, 2, 3], 4).unwrap();
        let r = collapse_oracle(&q).unwrap();
        assert!(r.conditional_ce.abs() < TOL);
        assert!((r.marginal_ce - r.mi).abs() < TOL);
    }

    #[test]
    fn encoder_search_equality_iff_positions_independent() {
        // Two binary visual positions.
        let indep = DiscreteJoint::independent(&[1.0], &[0.3 * 0.6, 0.3 * 0.4, 0.7 * 0.6, 0.7 * 0.4])
            .unwrap()
            .with_visual_shape(&[2, 2])
            .unwrap();
        let s = collapse_oracle(&indep).unwrap().factorized.unwrap();
        assert_eq!(s.encoders_tried, 1);
        let q_v = [0.3 * 0.6, 0.3 * 0.4, 0.7 * 0.6, 0.7 * 0.4];
        let q = DiscreteJoint::deterministic(&q_v, &[0, 0, 0, 0], 4).unwrap().with_visual_shape(&[2, 2]).unwrap();
        let s = collapse_oracle(&q).unwrap().factorized.unwrap();
        assert_eq!(s.encoders_tried, 256);
        assert!((s.best_total - s.collapsed_total).abs() < TOL);
        // Perfectly correlated positions: copying beats collapse.
        let q = DiscreteJoint::deterministic(&[0.5, 0.0, 0.0, 0.5], &[0, 0, 0, 0], 4).unwrap().with_visual_shape(&[2, 2]).unwrap();
        let s = collapse_oracle(&q).unwrap().factorized.unwrap();
        assert!(s.best_total < s.collapsed_total - 0.1);
        assert!((s.collapsed_total - s.baseline_total).abs() < TOL);
    }

    proptest! {
        #[test]
        fn identities_hold(seed in 0u64..1000, a in 1usize..6, b in 1usize..9, zero in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = DiscreteJoint::random(&mut rng, a, b, zero).unwrap();
            let r = info_exact(&q);
            prop_assert!(r.chain_rule_residual().abs() < TOL);
            prop_assert!(r.mi <= r.h_zp.min(r.h_zv) + TOL);
            prop_assert!(r.h_zv_given_zp <= r.h_zv + TOL);
            let p = DiscreteJoint::random(&mut rng, a, b, 0.0).unwrap();
            let d = ce_decomposition(&q, &p).unwrap();
            prop_assert!((d.ce - (d.entropy + d.kl)).abs() < TOL);
            let c = collapse_oracle(&q).unwrap();
            prop_assert!(c.gap_residual.abs() < TOL);
            prop_assert!(c.decomposition_residual.abs() < TOL);
            prop_assert!(c.conditional_ce <= c.marginal_ce + TOL);
        }
    }
}
