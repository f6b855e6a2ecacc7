//! Causal transformer prior over `[class; z_p; z_v]`.
//!
//! Output position `t` predicts sequence token `t + 1`: the first `K`
//! positions predict prologue ids through one head, the remaining `N`
//! predict visual ids through a second head. Visual dropout only touches the
//! inputs. Targets are always the undropped ids.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ArConfig;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, causal_mask, one_hot, Forward, Linear, ParamStore, Transformer};
use crate::tokenizer::{scalar, TokenGroups};

/// How prologue tokens enter the AR input.
#[derive(Debug, Clone)]
pub enum PrologueInput {
    None,
    /// `[B, K, V_p]` one-hot-valued pass-through weights (`p~ . W_emb`).
    Soft(Tensor),
    /// Row-major `[B, K]` ids (discrete lookup).
    Hard(Vec<u32>),
}

/// How visual tokens enter the AR input.
#[derive(Debug, Clone)]
pub enum VisualInput {
    Ids(Vec<u32>),
    /// `[B, N, V_v]` pass-through weights carrying gradient to the visual
    /// path (AR-regularized baselines only).
    Soft(Tensor),
}

/// A batch of AR sequences. The dropout flags are per sample: a dropped
/// sample sees EOS at every visual input position.
#[derive(Debug, Clone)]
pub struct ArSequence {
    pub cond: Vec<u32>,
    pub zp: PrologueInput,
    pub zv: VisualInput,
    pub zp_targets: Vec<u32>,
    pub zv_targets: Vec<u32>,
    /// Optional differentiable visual targets (`[B, N, V_v]`, one-hot valued).
    pub zv_soft_targets: Option<Tensor>,
    pub visual_dropped: Vec<bool>,
}

impl ArSequence {
    pub fn batch(&self) -> usize {
        self.cond.len()
    }

    /// Per-position mask of sample `b` (true = input replaced by EOS).
    pub fn dropout_mask(&self, b: usize, n: usize) -> Vec<bool> {
        vec![self.visual_dropped[b]; n]
    }

    /// Stage-2 style sequence from cached hard ids.
    pub fn from_ids(cond: Vec<u32>, zp: Vec<u32>, zv: Vec<u32>) -> Self {
        let b = cond.len();
        Self {
            cond,
            zp: if zp.is_empty() { PrologueInput::None } else { PrologueInput::Hard(zp.clone()) },
            zv: VisualInput::Ids(zv.clone()),
            zp_targets: zp,
            zv_targets: zv,
            zv_soft_targets: None,
            visual_dropped: vec![false; b],
        }
    }

    /// Same sequence with every visual input replaced by EOS.
    pub fn fully_dropped(&self) -> Self {
        Self { visual_dropped: vec![true; self.batch()], ..self.clone() }
    }
}

/// Draws class and visual dropout for a batch. Prologue inputs use the soft
/// pass-through weights when the tokenizer produced them.
pub fn build_sequence(
    tg: &TokenGroups,
    labels: &[u32],
    num_classes: usize,
    p_drop: f64,
    class_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ArSequence> {
    if !(0.0..=1.0).contains(&p_drop) || !(0.0..=1.0).contains(&class_drop) {
        return Err(Error::Config(format!("dropout probabilities must be in [0, 1], got {p_drop}, {class_drop}")));
    }
    if labels.len() != tg.batch {
        return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), tg.batch)));
    }
    let null = num_classes as u32;
    let mut cond = Vec::with_capacity(labels.len());
    let mut dropped = Vec::with_capacity(labels.len());
    for &l in labels {
        cond.push(if rng.random::<f64>() < class_drop { null } else { l });
        dropped.push(rng.random::<f64>() < p_drop);
    }
    let (zp, zp_targets) = match &tg.zp {
        Some(z) => (PrologueInput::Soft(z.pass_through.clone()), z.hard_ids.clone()),
        None => (PrologueInput::None, Vec::new()),
    };
    Ok(ArSequence {
        cond,
        zp,
        zv: VisualInput::Ids(tg.zv.ids.clone()),
        zp_targets,
        zv_targets: tg.zv.ids.clone(),
        zv_soft_targets: None,
        visual_dropped: dropped,
    })
}

#[derive(Debug, Clone)]
pub struct ArLogits {
    /// `[B, K, V_p]`, absent when `K = 0`.
    pub prologue: Option<Tensor>,
    /// `[B, N, V_v]`.
    pub visual: Tensor,
}

#[derive(Debug, Clone)]
pub struct ArLossParts {
    pub ce_prologue: Tensor,
    pub ce_visual: Tensor,
    pub ce_total: Tensor,
    pub top1_acc: f64,
}

impl ArLossParts {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        Ok((scalar(&self.ce_prologue)?, scalar(&self.ce_visual)?, scalar(&self.ce_total)?))
    }
}

#[derive(Debug, Clone)]
pub struct ArModel {
    pub cfg: ArConfig,
    store: ParamStore,
    class_emb: Var,
    prologue_emb: Option<Var>,
    /// `V_v + 1` rows; the last is EOS.
    visual_emb: Var,
    pos: Var,
    transformer: Transformer,
    head_p: Option<Linear>,
    head_v: Linear,
    k: usize,
    n: usize,
    v_p: usize,
    v_v: usize,
    num_classes: usize,
}

impl ArModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: &ArConfig,
        prologue_tokens: usize,
        visual_tokens: usize,
        prologue_vocab: usize,
        visual_vocab: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.dim;
        let mut store = ParamStore::new();
        let class_emb = store.normal("class_emb", &[num_classes + 1, d], 0.02, rng)?;
        let (prologue_emb, head_p) = if prologue_tokens > 0 {
            (
                Some(store.normal("prologue_emb", &[prologue_vocab, d], 0.02, rng)?),
                Some(Linear::new(&mut store, "head_p", d, prologue_vocab, true, rng)?),
            )
        } else {
            (None, None)
        };
        let visual_emb = store.normal("visual_emb", &[visual_vocab + 1, d], 0.02, rng)?;
        let pos = store.normal("pos", &[prologue_tokens + visual_tokens, d], 0.02, rng)?;
        let transformer =
            Transformer::new(&mut store, "transformer", cfg.layers, d, cfg.heads, cfg.mlp_ratio, cfg.activation, rng)?;
        let head_v = Linear::new(&mut store, "head_v", d, visual_vocab, true, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            class_emb,
            prologue_emb,
            visual_emb,
            pos,
            transformer,
            head_p,
            head_v,
            k: prologue_tokens,
            n: visual_tokens,
            v_p: prologue_vocab,
            v_v: visual_vocab,
            num_classes,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn prologue_tokens(&self) -> usize {
        self.k
    }

    pub fn visual_tokens(&self) -> usize {
        self.n
    }

    pub fn prologue_vocab(&self) -> usize {
        self.v_p
    }

    pub fn visual_vocab(&self) -> usize {
        self.v_v
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn null_class(&self) -> u32 {
        self.num_classes as u32
    }

    pub fn eos(&self) -> u32 {
        self.v_v as u32
    }

    fn device(&self) -> &Device {
        self.pos.device()
    }

    fn lookup(&self, table: &Var, ids: &[u32], limit: usize, what: &str) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= limit) {
            return Err(Error::InvalidInput(format!("{what} id {bad} outside [0, {limit})")));
        }
        let idx = Tensor::from_slice(ids, ids.len(), self.device())?;
        Ok(table.as_tensor().index_select(&idx, 0)?)
    }

    /// Input embeddings `[B, L, d]` for a prefix: class token, `kp` prologue
    /// inputs and `nv` visual inputs, with positions added.
    fn embed(&self, cond: &[u32], zp: &PrologueInput, kp: usize, zv: &VisualInput, nv: usize, dropped: &[bool]) -> Result<Tensor> {
        let b = cond.len();
        let d = self.cfg.dim;
        let mut parts = vec![self.lookup(&self.class_emb, cond, self.num_classes + 1, "class")?.reshape((b, 1, d))?];
        if kp > 0 {
            let table = self
                .prologue_emb
                .as_ref()
                .ok_or_else(|| Error::Config("AR model has no prologue positions".into()))?;
            let e = match zp {
                PrologueInput::None => return Err(Error::InvalidInput("prologue inputs missing".into())),
                PrologueInput::Hard(ids) => {
                    let w = ids.len() / b;
                    let ids: Vec<u32> = ids.chunks(w).flat_map(|r| r[..kp].to_vec()).collect();
                    self.lookup(table, &ids, self.v_p, "prologue")?.reshape((b, kp, d))?
                }
                PrologueInput::Soft(p) => {
                    let p = p.narrow(1, 0, kp)?;
                    p.reshape((b * kp, self.v_p))?.matmul(table.as_tensor())?.reshape((b, kp, d))?
                }
            };
            parts.push(e);
        }
        if nv > 0 {
            let e = match zv {
                VisualInput::Ids(ids) => {
                    let w = ids.len() / b;
                    let eos = self.eos();
                    let ids: Vec<u32> = ids
                        .chunks(w)
                        .zip(dropped)
                        .flat_map(|(r, &drop)| if drop { vec![eos; nv] } else { r[..nv].to_vec() })
                        .collect();
                    self.lookup(&self.visual_emb, &ids, self.v_v + 1, "visual")?.reshape((b, nv, d))?
                }
                VisualInput::Soft(p) => {
                    let table = self.visual_emb.as_tensor().narrow(0, 0, self.v_v)?;
                    let e = p.narrow(1, 0, nv)?.reshape((b * nv, self.v_v))?.matmul(&table)?.reshape((b, nv, d))?;
                    if dropped.iter().any(|&x| x) {
                        let keep: Vec<f32> = dropped.iter().map(|&x| if x { 0.0 } else { 1.0 }).collect();
                        let keep = Tensor::from_vec(keep, (b, 1, 1), self.device())?;
                        let drop = keep.affine(-1.0, 1.0)?;
                        let eos = self.visual_emb.as_tensor().get(self.v_v)?.reshape((1, 1, d))?;
                        e.broadcast_mul(&keep)?.add(&drop.broadcast_mul(&eos)?)?
                    } else {
                        e
                    }
                }
            };
            parts.push(e);
        }
        let x = Tensor::cat(&parts, 1)?;
        let l = x.dims()[1];
        Ok(x.broadcast_add(&self.pos.as_tensor().narrow(0, 0, l)?)?)
    }

    /// Dropout rates come from the model config; they only take effect when
    /// `fwd` carries a generator.
    fn run(&self, x: &Tensor, fwd: &mut Forward) -> Result<Tensor> {
        let saved = fwd.dropout;
        fwd.dropout = self.cfg.emb_dropout;
        let x = fwd.dropout(x)?;
        fwd.dropout = self.cfg.dropout;
        let mask = causal_mask(x.dims()[1], self.device())?;
        let h = self.transformer.forward(&x, Some(&mask), fwd);
        fwd.dropout = saved;
        h
    }

    fn check(&self, seq: &ArSequence) -> Result<()> {
        let b = seq.batch();
        if b == 0 {
            return Err(Error::InvalidInput("empty AR batch".into()));
        }
        if seq.zv_targets.len() != b * self.n {
            return Err(Error::Shape(format!("{} visual targets, expected {}", seq.zv_targets.len(), b * self.n)));
        }
        if seq.zp_targets.len() != b * self.k {
            return Err(Error::Shape(format!("{} prologue targets, expected {}", seq.zp_targets.len(), b * self.k)));
        }
        if seq.visual_dropped.len() != b {
            return Err(Error::Shape("dropout flags do not match batch".into()));
        }
        Ok(())
    }

    /// Teacher-forced logits for every position.
    pub fn forward(&self, seq: &ArSequence, fwd: &mut Forward) -> Result<ArLogits> {
        self.check(seq)?;
        let x = self.embed(&seq.cond, &seq.zp, self.k, &seq.zv, self.n - 1, &seq.visual_dropped)?;
        let h = self.run(&x, fwd)?;
        let prologue = match &self.head_p {
            Some(head) => Some(head.forward(&h.narrow(1, 0, self.k)?)?),
            None => None,
        };
        let visual = self.head_v.forward(&h.narrow(1, self.k, self.n)?)?;
        Ok(ArLogits { prologue, visual })
    }

    /// Cross-entropy against the undropped targets.
    pub fn loss(&self, seq: &ArSequence, logits: &ArLogits) -> Result<ArLossParts> {
        let b = seq.batch();
        let dev = self.device();
        let mut correct = 0usize;
        let ce_visual = {
            let lv = logits.visual.reshape((b * self.n, self.v_v))?;
            let target = match &seq.zv_soft_targets {
                Some(t) => t.reshape((b * self.n, self.v_v))?,
                None => one_hot(&seq.zv_targets, self.v_v, lv.dtype(), dev)?,
            };
            correct += count_correct(&lv, &seq.zv_targets, self.v_v)?;
            soft_ce(&lv, &target)?
        };
        let ce_prologue = match &logits.prologue {
            Some(lp) if self.k > 0 => {
                let lp = lp.reshape((b * self.k, self.v_p))?;
                correct += count_correct(&lp, &seq.zp_targets, self.v_p)?;
                soft_ce(&lp, &one_hot(&seq.zp_targets, self.v_p, lp.dtype(), dev)?)?
            }
            _ => Tensor::new(0f32, dev)?,
        };
        let (k, n) = (self.k as f64, self.n as f64);
        let ce_total = ((&ce_prologue * (k / (k + n)))? + (&ce_visual * (n / (k + n)))?)?;
        let top1_acc = correct as f64 / (b * (self.k + self.n)) as f64;
        Ok(ArLossParts { ce_prologue, ce_visual, ce_total, top1_acc })
    }

    /// Logits `[B, V]` of the next token after a hard-id prefix. Every row has
    /// `zp.len() / B` prologue ids and `zv.len() / B` visual ids. Prologue
    /// positions are filled before any visual one.
    pub fn next_logits(&self, cond: &[u32], zp: &[u32], zv: &[u32]) -> Result<Tensor> {
        let b = cond.len();
        let kp = zp.len() / b.max(1);
        let nv = zv.len() / b.max(1);
        if kp > self.k || nv >= self.n || (nv > 0 && kp < self.k) {
            return Err(Error::Shape(format!("invalid prefix: {kp} prologue, {nv} visual ids")));
        }
        let x = self.embed(
            cond,
            &PrologueInput::Hard(zp.to_vec()),
            kp,
            &VisualInput::Ids(zv.to_vec()),
            nv,
            &vec![false; b],
        )?;
        let h = self.run(&x, &mut Forward::eval())?;
        let last = h.narrow(1, h.dims()[1] - 1, 1)?.squeeze(1)?;
        if kp < self.k {
            self.head_p.as_ref().expect("prologue head").forward(&last)
        } else {
            self.head_v.forward(&last)
        }
    }

    /// Per-layer attention probabilities `[B, H, T, T]` of a teacher-forced pass.
    pub fn attention(&self, seq: &ArSequence) -> Result<Vec<Tensor>> {
        self.check(seq)?;
        let x = self.embed(&seq.cond, &seq.zp, self.k, &seq.zv, self.n - 1, &seq.visual_dropped)?;
        let mut fwd = Forward::recording();
        self.run(&x, &mut fwd)?;
        Ok(fwd.attention)
    }

    pub fn num_layers(&self) -> usize {
        self.transformer.num_layers()
    }
}

/// Mean over rows of `-sum(target * log_softmax(logits))`.
pub fn soft_ce(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(target.mul(&logp)?.sum(D::Minus1)?.mean_all()?.neg()?)
}

fn count_correct(logits: &Tensor, targets: &[u32], width: usize) -> Result<usize> {
    let values = logits.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(argmax_rows(&values, width).iter().zip(targets).filter(|(a, b)| a == b).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Mode, RunConfig};
    use crate::data::synth_shapes;
    use crate::nn::{grad_or_zeros, max_abs, to_f64_vec};
    use crate::tokenizer::Tokenizer;
    use rand::SeedableRng;

    fn cfg() -> ArConfig {
        ArConfig {
            dim: 32,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            activation: crate::nn::Activation::Relu,
            dropout: 0.1,
            emb_dropout: 0.1,
        }
    }

    fn model(seed: u64) -> ArModel {
        ArModel::new(&cfg(), 4, 6, 10, 12, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn seq() -> ArSequence {
        ArSequence::from_ids(vec![0, 2], vec![1, 2, 3, 4, 5, 6, 7, 8], (0..12).collect())
    }

    #[test]
    fn logits_shapes() {
        let m = model(0);
        let l = m.forward(&seq(), &mut Forward::eval()).unwrap();
        assert_eq!(l.prologue.unwrap().dims(), &[2, 4, 10]);
        assert_eq!(l.visual.dims(), &[2, 6, 12]);
    }

    #[test]
    fn causality_probe() {
        let m = model(1);
        let base = seq();
        let flat = |s: &ArSequence| {
            let l = m.forward(s, &mut Forward::eval()).unwrap();
            let p = l.prologue.unwrap().get(0).unwrap().to_vec2::<f32>().unwrap();
            let v = l.visual.get(0).unwrap().to_vec2::<f32>().unwrap();
            p.into_iter().chain(v).collect::<Vec<_>>()
        };
        let reference = flat(&base);
        // Input positions: 0 = class, 1..=K prologue, K+1.. visual.
        for t in 0..(4 + 6) {
            let mut s = base.clone();
            if t == 0 {
                s.cond[0] = 1;
            } else if t <= 4 {
                let mut ids = s.zp_targets.clone();
                ids[t - 1] = (ids[t - 1] + 1) % 10;
                s.zp = PrologueInput::Hard(ids);
            } else {
                let mut ids = s.zv_targets.clone();
                ids[t - 5] = (ids[t - 5] + 1) % 12;
                s.zv = VisualInput::Ids(ids);
            }
            let out = flat(&s);
            for pos in 0..10 {
                let changed = out[pos] != reference[pos];
                assert_eq!(changed, pos >= t, "input {t} output {pos}");
            }
        }
    }

    #[test]
    fn soft_one_hot_matches_hard_lookup() {
        let m = model(2);
        let s = seq();
        let hot = one_hot(&s.zp_targets, 10, DType::F32, &Device::Cpu).unwrap().reshape((2, 4, 10)).unwrap();
        let soft = ArSequence { zp: PrologueInput::Soft(hot), ..s.clone() };
        let a = m.forward(&s, &mut Forward::eval()).unwrap();
        let b = m.forward(&soft, &mut Forward::eval()).unwrap();
        let d = a.visual.sub(&b.visual).unwrap();
        assert!(max_abs(&d).unwrap() <= 1e-6);
    }

    #[test]
    fn untrained_ce_near_log_vocab() {
        let m = model(3);
        let s = seq();
        let l = m.forward(&s, &mut Forward::eval()).unwrap();
        let (cp, cv, total) = m.loss(&s, &l).unwrap().values().unwrap();
        assert!((cp - 10f64.ln()).abs() < 0.1 * 10f64.ln(), "{cp}");
        assert!((cv - 12f64.ln()).abs() < 0.1 * 12f64.ln(), "{cv}");
        assert!((total - (4.0 * cp + 6.0 * cv) / 10.0).abs() < 1e-6);
    }

    #[test]
    fn perfect_logits_give_zero_ce() {
        let m = model(4);
        let s = seq();
        let big = |ids: &[u32], v: usize, shape: (usize, usize, usize)| {
            (one_hot(ids, v, DType::F32, &Device::Cpu).unwrap() * 1e4).unwrap().reshape(shape).unwrap()
        };
        let l = ArLogits { prologue: Some(big(&s.zp_targets, 10, (2, 4, 10))), visual: big(&s.zv_targets, 12, (2, 6, 12)) };
        let parts = m.loss(&s, &l).unwrap();
        assert_eq!(parts.values().unwrap().2, 0.0);
        assert_eq!(parts.top1_acc, 1.0);
    }

    #[test]
    fn dropout_changes_inputs_not_targets() {
        let m = model(5);
        let s = seq();
        let d = s.fully_dropped();
        assert_eq!(s.zv_targets, d.zv_targets);
        let a = m.forward(&s, &mut Forward::eval()).unwrap().visual;
        let b = m.forward(&d, &mut Forward::eval()).unwrap().visual;
        // The first visual output only sees class + prologue, so it is unaffected.
        assert_eq!(to_f64_vec(&a.narrow(1, 0, 1).unwrap()).unwrap(), to_f64_vec(&b.narrow(1, 0, 1).unwrap()).unwrap());
        assert_ne!(to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
    }

    #[test]
    fn build_sequence_dropout_extremes() {
        let mut c = RunConfig::desk(Mode::Prologue);
        c.tokenizer.dim = 32;
        c.tokenizer.encoder_layers = 1;
        c.tokenizer.decoder_layers = 1;
        let tok = Tokenizer::new(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ds = synth_shapes(0, 4, 2, 32).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3], &Device::Cpu).unwrap();
        let tg = tok.tokenize(&batch.pixels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = build_sequence(&tg, &batch.labels, 4, 1.0, 0.0, &mut rng).unwrap();
        assert!(all.visual_dropped.iter().all(|&x| x));
        assert!(all.dropout_mask(0, 64).iter().all(|&x| x));
        let none = build_sequence(&tg, &batch.labels, 4, 0.0, 1.0, &mut rng).unwrap();
        assert!(none.visual_dropped.iter().all(|&x| !x));
        assert!(none.cond.iter().all(|&c| c == 4));
        assert_eq!(none.zv_targets, all.zv_targets);
        assert!(build_sequence(&tg, &batch.labels, 4, 1.5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn next_logits_match_teacher_forcing() {
        let m = model(6);
        let s = seq();
        let full = m.forward(&s, &mut Forward::eval()).unwrap();
        let zp: Vec<u32> = s.zp_targets.chunks(4).flat_map(|r| r[..2].to_vec()).collect();
        let step = m.next_logits(&s.cond, &zp, &[]).unwrap();
        let tf = full.prologue.unwrap().narrow(1, 2, 1).unwrap().squeeze(1).unwrap();
        assert!(max_abs(&step.sub(&tf).unwrap()).unwrap() < 1e-5);
        let zv: Vec<u32> = s.zv_targets.chunks(6).flat_map(|r| r[..3].to_vec()).collect();
        let step = m.next_logits(&s.cond, &s.zp_targets, &zv).unwrap();
        let tf = full.visual.narrow(1, 3, 1).unwrap().squeeze(1).unwrap();
        assert!(max_abs(&step.sub(&tf).unwrap()).unwrap() < 1e-5);
    }

    #[test]
    fn soft_prologue_routes_gradient() {
        let m = model(7);
        let s = seq();
        let v = Var::new(&[[0.3f32; 10]; 8], &Device::Cpu).unwrap();
        let soft = candle_nn::ops::softmax(&v.as_tensor().reshape((2, 4, 10)).unwrap(), D::Minus1).unwrap();
        let s = ArSequence { zp: PrologueInput::Soft(soft), ..s };
        let l = m.forward(&s, &mut Forward::eval()).unwrap();
        let g = m.loss(&s, &l).unwrap().ce_total.backward().unwrap();
        assert!(max_abs(&grad_or_zeros(&g, v.as_tensor()).unwrap()).unwrap() > 0.0);
    }
}
