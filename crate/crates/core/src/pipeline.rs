//! Training protocols: joint Stage 1 (tokenizer + compact AR), Stage 2 on
//! frozen tokens, the post-hoc prologue variant, the one-stage variant, and
//! the lambda sweep driver.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ar::{build_sequence, ArModel, ArSequence, PrologueInput, VisualInput};
use crate::checkpoint::Checkpoint;
use crate::config::{ArConfig, Mode, RunConfig};
use crate::data::{load_folder, synth_shapes, Dataset};
use crate::error::{Error, Result};
use crate::metrics::MetricLog;
use crate::nn::{grad_or_zeros, grad_scale, max_abs, Forward};
use crate::optim::AdamW;
use crate::quantization::codebook_stats;
use crate::tokenizer::{scalar, EncoderOutput, PrologueEncoder, Tokenizer};

/// Independent generator per purpose, all derived from the run seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const INIT_TOKENIZER: u64 = 1;
const INIT_AR: u64 = 2;
const SHUFFLE: u64 = 3;
const SEQUENCE: u64 = 4;
const DROPOUT: u64 = 5;
const INIT_PROLOGUE: u64 = 6;

/// Train / held-out split of the configured data source.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let ds = match cfg.data_path() {
        None => synth_shapes(cfg.seed, d.num_classes, d.samples_per_class, d.image_size)?,
        Some(path) => {
            let ds = load_folder(&path, d.image_size)?;
            if ds.num_classes != d.num_classes {
                return Err(Error::Config(format!(
                    "data.num_classes = {} but {} has {} class folders",
                    d.num_classes,
                    path.display(),
                    ds.num_classes
                )));
            }
            ds
        }
    };
    ds.split(d.holdout_frac)
}

/// Where a training function may write diagnostics.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for NaN dumps; the system temp dir when unset.
    pub dump_dir: Option<PathBuf>,
    /// Skip the per-epoch held-out evaluation (only the final one runs).
    pub final_eval_only: bool,
}

impl TrainOptions {
    fn dump_dir(&self) -> PathBuf {
        self.dump_dir.clone().unwrap_or_else(std::env::temp_dir)
    }
}

/// The frozen token producer used after Stage 1: the tokenizer plus, for
/// Prologue-Post, the attached prologue encoder.
#[derive(Debug, Clone)]
pub struct Frontend {
    pub tokenizer: Tokenizer,
    pub post: Option<PrologueEncoder>,
}

/// Hard ids of a dataset, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCache {
    pub zp: Vec<Vec<u32>>,
    pub zv: Vec<Vec<u32>>,
    pub labels: Vec<u32>,
}

impl TokenCache {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence(&self, idx: &[usize]) -> ArSequence {
        let cond = idx.iter().map(|&i| self.labels[i]).collect();
        let zp = idx.iter().flat_map(|&i| self.zp[i].clone()).collect();
        let zv = idx.iter().flat_map(|&i| self.zv[i].clone()).collect();
        ArSequence::from_ids(cond, zp, zv)
    }
}

impl Frontend {
    /// Prologue tokens produced per image.
    pub fn prologue_tokens(&self) -> usize {
        match &self.post {
            Some(p) => p.tokens(),
            None => self.tokenizer.prologue_tokens(),
        }
    }

    pub fn prologue_vocab(&self) -> usize {
        match &self.post {
            Some(p) => p.codebook().size(),
            None => self.tokenizer.prologue_codebook().map(|c| c.size()).unwrap_or(0),
        }
    }

    /// `(zp rows, zv rows)` for a pixel batch.
    pub fn tokenize(&self, pixels: &Tensor) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
        let tg = self.tokenizer.tokenize(pixels)?;
        let zv = tg.zv_rows();
        let zp = match &self.post {
            Some(p) => {
                let out = p.quantize(pixels)?;
                out.hard_ids.chunks(p.tokens()).map(|c| c.to_vec()).collect()
            }
            None => tg.zp_rows(),
        };
        Ok((zp, zv))
    }

    pub fn cache(&self, ds: &Dataset) -> Result<TokenCache> {
        let mut cache = TokenCache { zp: Vec::new(), zv: Vec::new(), labels: Vec::new() };
        for idx in chunks(ds.len(), 64) {
            let batch = ds.batch(&idx, &Device::Cpu)?;
            let (zp, zv) = self.tokenize(&batch.pixels)?;
            cache.zp.extend(zp);
            cache.zv.extend(zv);
            cache.labels.extend(batch.labels);
        }
        Ok(cache)
    }
}

fn chunks(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(size).map(|c| c.to_vec()).collect()
}

/// Mean absolute reconstruction error of `decode(tokenize(x))` over a dataset.
pub fn eval_recon(tok: &Tokenizer, ds: &Dataset) -> Result<f64> {
    let mut total = 0f64;
    let mut count = 0usize;
    for idx in chunks(ds.len(), 64) {
        let batch = ds.batch(&idx, &Device::Cpu)?;
        let out = tok.forward(&batch.pixels)?;
        total += scalar(&out.loss.l1)? * idx.len() as f64;
        count += idx.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Held-out AR metrics on cached ids (class-conditional, no dropout).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArEval {
    pub ce_prologue: f64,
    pub ce_visual: f64,
    pub ce_total: f64,
    pub top1: f64,
}

/// How the evaluation sequence is perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalInputs {
    #[default]
    Clean,
    /// Every visual input replaced by EOS.
    VisualDropped,
    /// Visual inputs dropped and prologue ids permuted across samples.
    VisualDroppedShuffledPrologue,
}

pub fn eval_ar(ar: &ArModel, cache: &TokenCache, inputs: EvalInputs) -> Result<ArEval> {
    let n = cache.len();
    if n == 0 {
        return Err(Error::NoSamples);
    }
    let mut sums = [0f64; 4];
    let perm: Vec<usize> = (0..n).map(|i| (i + n / 2 + 1) % n).collect();
    for idx in chunks(n, 64) {
        let mut seq = cache.sequence(&idx);
        match inputs {
            EvalInputs::Clean => {}
            EvalInputs::VisualDropped => seq = seq.fully_dropped(),
            EvalInputs::VisualDroppedShuffledPrologue => {
                seq = seq.fully_dropped();
                if ar.prologue_tokens() > 0 {
                    let shuffled: Vec<u32> = idx.iter().flat_map(|&i| cache.zp[perm[i]].clone()).collect();
                    seq.zp = PrologueInput::Hard(shuffled);
                }
            }
        }
        let logits = ar.forward(&seq, &mut Forward::eval())?;
        let parts = ar.loss(&seq, &logits)?;
        let (cp, cv, ct) = parts.values()?;
        let w = idx.len() as f64;
        sums[0] += cp * w;
        sums[1] += cv * w;
        sums[2] += ct * w;
        sums[3] += parts.top1_acc * w;
    }
    let n = n as f64;
    Ok(ArEval { ce_prologue: sums[0] / n, ce_visual: sums[1] / n, ce_total: sums[2] / n, top1: sums[3] / n })
}

/// Largest absolute gradients observed by the routing check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    /// `d L_AR / d C_v`.
    pub ar_to_visual_codebook: f32,
    /// `d L_AR / d h_v`, with `h_v` cut from the encoder.
    pub ar_to_visual_states: f32,
    /// `d L_AR / d queries` (`None` when the mode has no prologue queries).
    pub ar_to_queries: Option<f32>,
    /// `d L_recon / d C_p`.
    pub recon_to_prologue_codebook: Option<f32>,
}

impl RoutingReport {
    /// Checks the mode's routing contract.
    pub fn verify(&self, mode: Mode) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(format!("gradient routing ({mode}): {m}")));
        if mode.is_arreg() {
            if self.ar_to_visual_codebook == 0.0 {
                return fail("AR loss does not reach the visual codebook".into());
            }
            return Ok(());
        }
        if self.ar_to_visual_codebook != 0.0 || self.ar_to_visual_states != 0.0 {
            return fail(format!(
                "AR gradient leaks into the visual path ({} on C_v, {} on h_v)",
                self.ar_to_visual_codebook, self.ar_to_visual_states
            ));
        }
        if matches!(mode, Mode::Prologue | Mode::PrologueOnestage | Mode::ProloguePost) {
            match self.ar_to_queries {
                Some(g) if g > 0.0 => {}
                _ => return fail("AR loss does not reach the prologue queries".into()),
            }
        }
        if let Some(g) = self.recon_to_prologue_codebook {
            if g != 0.0 {
                return fail(format!("reconstruction gradient {g} on the prologue codebook"));
            }
        }
        Ok(())
    }
}

/// Gradient exposure of one batch under the mode's Stage-1 routing, measured
/// with unit AR weight.
pub fn routing_check(cfg: &RunConfig, tok: &Tokenizer, ar: &ArModel, pixels: &Tensor, labels: &[u32]) -> Result<RoutingReport> {
    let enc = tok.encode(pixels, Default::default())?;
    let h_v = Var::from_tensor(&enc.h_v.detach())?;
    let cut = EncoderOutput { h_p: enc.h_p.clone(), h_v: h_v.as_tensor().clone() };
    let tg = tok.quantize(&cut)?;
    let mut rng = stream(cfg.seed, SEQUENCE);
    let mut seq = build_sequence(&tg, labels, ar.num_classes(), 0.0, 0.0, &mut rng)?;
    if cfg.mode.is_arreg() {
        let (_, pass) = tok.visual_pass_through(&cut)?;
        seq.zv = VisualInput::Soft(pass.clone());
        seq.zv_soft_targets = Some(pass);
    }
    let logits = ar.forward(&seq, &mut Forward::eval())?;
    let ce = ar.loss(&seq, &logits)?.ce_total;
    let grads = ce.backward()?;
    let ar_to_visual_codebook = max_abs(&grad_or_zeros(&grads, tok.visual_codebook().vectors())?)?;
    let ar_to_visual_states = max_abs(&grad_or_zeros(&grads, h_v.as_tensor())?)?;
    let ar_to_queries = match tok.prologue_queries() {
        Some(q) => Some(max_abs(&grad_or_zeros(&grads, q.as_tensor())?)?),
        None => None,
    };
    let recon_to_prologue_codebook = match tok.prologue_codebook() {
        Some(cb) => {
            let out = tok.forward(pixels)?;
            let g = out.loss.total.backward()?;
            Some(max_abs(&grad_or_zeros(&g, cb.vectors())?)?)
        }
        None => None,
    };
    Ok(RoutingReport { ar_to_visual_codebook, ar_to_visual_states, ar_to_queries, recon_to_prologue_codebook })
}

/// Routing check for Prologue-Post: the AR loss reaches the new queries but
/// never the frozen visual codebook.
pub fn routing_check_post(tok: &Tokenizer, pro: &PrologueEncoder, ar: &ArModel, pixels: &Tensor, labels: &[u32]) -> Result<RoutingReport> {
    let tg = tok.tokenize(pixels)?;
    let zp = pro.quantize(pixels)?;
    let seq = ArSequence {
        zp: PrologueInput::Soft(zp.pass_through.clone()),
        zp_targets: zp.hard_ids.clone(),
        ..ArSequence::from_ids(labels.to_vec(), Vec::new(), tg.zv.ids.clone())
    };
    let logits = ar.forward(&seq, &mut Forward::eval())?;
    let grads = ar.loss(&seq, &logits)?.ce_total.backward()?;
    Ok(RoutingReport {
        ar_to_visual_codebook: max_abs(&grad_or_zeros(&grads, tok.visual_codebook().vectors())?)?,
        ar_to_visual_states: 0.0,
        ar_to_queries: Some(max_abs(&grad_or_zeros(&grads, pro.queries().as_tensor())?)?),
        recon_to_prologue_codebook: None,
    })
}

fn ar_for(cfg: &RunConfig, ar_cfg: &ArConfig, k: usize, v_p: usize, seed_stream: u64) -> Result<ArModel> {
    ArModel::new(
        ar_cfg,
        k,
        cfg.visual_tokens(),
        v_p.max(1),
        cfg.tokenizer.visual_codebook,
        cfg.data.num_classes,
        &mut stream(cfg.seed, seed_stream),
    )
}

/// The tokenizer-side architecture of a config. Prologue-Post reuses a
/// plain 2D tokenizer.
fn tokenizer_config(cfg: &RunConfig) -> RunConfig {
    if cfg.mode == Mode::ProloguePost {
        cfg.with_mode(Mode::Baseline2d)
    } else {
        cfg.clone()
    }
}

fn ar_config_for_kind<'a>(cfg: &'a RunConfig, kind: &str) -> &'a ArConfig {
    match kind {
        "stage1" | "post" => &cfg.compact_ar,
        _ => &cfg.full_ar,
    }
}

pub fn load_tokenizer(ck: &Checkpoint) -> Result<Tokenizer> {
    let tcfg = tokenizer_config(&ck.config);
    let tok = Tokenizer::new(&tcfg, &mut stream(ck.config.seed, INIT_TOKENIZER))?;
    tok.params().import("tok", &ck.tensors)?;
    Ok(tok)
}

pub fn load_frontend(ck: &Checkpoint) -> Result<Frontend> {
    let tokenizer = load_tokenizer(ck)?;
    let post = if ck.tensors.keys().any(|k| k.starts_with("pro.")) {
        let p = PrologueEncoder::new(&ck.config, &mut stream(ck.config.seed, INIT_PROLOGUE))?;
        p.params().import("pro", &ck.tensors)?;
        Some(p)
    } else {
        None
    };
    Ok(Frontend { tokenizer, post })
}

/// The AR model stored in a checkpoint, sized for its frontend.
pub fn load_ar(ck: &Checkpoint, frontend: &Frontend) -> Result<ArModel> {
    let ar = ar_for(
        &ck.config,
        ar_config_for_kind(&ck.config, &ck.kind),
        frontend.prologue_tokens(),
        frontend.prologue_vocab(),
        INIT_AR,
    )?;
    ar.params().import("ar", &ck.tensors)?;
    Ok(ar)
}

fn check_finite(
    step: usize,
    values: &[(&str, f64)],
    ids: &[String],
    groups: &[(&str, &crate::nn::ParamStore)],
    grads: Option<&candle_core::backprop::GradStore>,
    opts: &TrainOptions,
) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let mut grad_norms = serde_json::Map::new();
    if let Some(g) = grads {
        for (prefix, store) in groups {
            for (name, var) in store.iter() {
                if let Some(t) = g.get(var.as_tensor()) {
                    let n = t.sqr()?.sum_all()?.to_scalar::<f32>()?.sqrt();
                    grad_norms.insert(format!("{prefix}.{name}"), serde_json::json!(n));
                }
            }
        }
    }
    let dump = serde_json::json!({
        "step": step,
        "losses": values.iter().map(|(k, v)| (k.to_string(), serde_json::json!(v.to_string()))).collect::<serde_json::Map<_, _>>(),
        "batch_ids": ids,
        "grad_norms": grad_norms,
    });
    let dir = opts.dump_dir();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("nan_dump_step{step}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
    Err(Error::NonFinite { step, dump: path })
}

/// Optimizer step that turns a non-finite gradient norm into a dump + abort.
fn guarded_step(
    opt: &mut AdamW,
    grads: &candle_core::backprop::GradStore,
    step: usize,
    ids: &[String],
    groups: &[(&str, &crate::nn::ParamStore)],
    opts: &TrainOptions,
) -> Result<Vec<crate::optim::StepStats>> {
    match opt.step(grads) {
        Err(Error::NonFiniteValue(what)) => {
            check_finite(step, &[(what.as_str(), f64::NAN)], ids, groups, Some(grads), opts)?;
            unreachable!("check_finite fails on NaN")
        }
        other => other,
    }
}

/// Turns a non-finite intermediate in a forward pass into a dump + abort.
fn guarded<T>(
    r: Result<T>,
    step: usize,
    ids: &[String],
    groups: &[(&str, &crate::nn::ParamStore)],
    opts: &TrainOptions,
) -> Result<T> {
    match r {
        Err(Error::NonFiniteValue(what)) => {
            check_finite(step, &[(what.as_str(), f64::NAN)], ids, groups, None, opts)?;
            unreachable!("check_finite fails on NaN")
        }
        other => other,
    }
}

/// Result of a training function.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub routing: Option<RoutingReport>,
}

impl TrainOutcome {
    pub fn history(&self) -> &MetricLog {
        &self.checkpoint.history
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Joint tokenizer + AR training, `L = L_recon + lambda * L_AR`, with the
/// mode's gradient routing. Stage 1 uses the compact AR; the one-stage
/// variant uses the full AR and is final.
pub fn train_stage1(cfg: &RunConfig, train: &Dataset, holdout: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    if cfg.mode == Mode::ProloguePost {
        return Err(Error::Config("prologue_post trains from a frozen baseline_2d checkpoint".into()));
    }
    joint_training(cfg, &cfg.compact_ar, "stage1", train, holdout, opts)
}

pub fn train_onestage(cfg: &RunConfig, train: &Dataset, holdout: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    if cfg.mode != Mode::PrologueOnestage {
        return Err(Error::Config(format!("train_onestage needs mode prologue_onestage, got {}", cfg.mode)));
    }
    joint_training(cfg, &cfg.full_ar, "onestage", train, holdout, opts)
}

fn joint_training(
    cfg: &RunConfig,
    ar_cfg: &ArConfig,
    kind: &str,
    train: &Dataset,
    holdout: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dev = Device::Cpu;
    let tok = Tokenizer::new(cfg, &mut stream(cfg.seed, INIT_TOKENIZER))?;
    let k = tok.prologue_tokens();
    let v_p = tok.prologue_codebook().map(|c| c.size()).unwrap_or(0);
    let ar = ar_for(cfg, ar_cfg, k, v_p, INIT_AR)?;

    let probe: Vec<usize> = (0..train.len().min(4)).collect();
    let probe = train.batch(&probe, &dev)?;
    let routing = routing_check(cfg, &tok, &ar, &probe.pixels, &probe.labels)?;
    routing.verify(cfg.mode)?;

    let stage = &cfg.stage1;
    let spe = steps_per_epoch(train.len(), stage.batch_size);
    let total = spe * stage.epochs;
    let mut opt = AdamW::new(total);
    opt.add_group("tok", tok.params(), &stage.tokenizer_optim)?;
    opt.add_group("ar", ar.params(), &stage.ar_optim)?;
    let mut shuffle = stream(cfg.seed, SHUFFLE);
    let mut seq_rng = stream(cfg.seed, SEQUENCE);
    let mut drop_rng = stream(cfg.seed, DROPOUT);
    let mut log = MetricLog::default();
    let frontend_eval = |tok: &Tokenizer, ar: &ArModel, log: &mut MetricLog, step: u64| -> Result<()> {
        stage1_eval(tok, ar, holdout, log, step)
    };
    if !opts.final_eval_only {
        frontend_eval(&tok, &ar, &mut log, 0)?;
    }
    let lambda = cfg.lambda;
    let mut step = 0usize;
    for epoch in 0..stage.epochs {
        let order = epoch_order(train.len(), &mut shuffle);
        for idx in order.chunks(stage.batch_size) {
            let batch = if cfg.data.augment {
                train.augmented_batch(idx, &dev, &mut shuffle)?
            } else {
                train.batch(idx, &dev)?
            };
            let groups = [("tok", tok.params()), ("ar", ar.params())];
            let out = guarded(tok.forward(&batch.pixels), step, &batch.ids, &groups, opts)?;
            let mut seq = build_sequence(&out.tokens, &batch.labels, cfg.data.num_classes, cfg.p_drop, cfg.class_drop, &mut seq_rng)?;
            if let Some(zp) = &out.tokens.zp {
                seq.zp = PrologueInput::Soft(grad_scale(&zp.pass_through, lambda)?);
            }
            if cfg.mode.is_arreg() {
                let (_, pass) = tok.visual_pass_through(&out.encoded)?;
                let pass = grad_scale(&pass, lambda)?;
                seq.zv = VisualInput::Soft(pass.clone());
                seq.zv_soft_targets = Some(pass);
            }
            let logits = ar.forward(&seq, &mut Forward::train(0.0, &mut drop_rng))?;
            let parts = ar.loss(&seq, &logits)?;
            // AR parameters see the plain CE; the tokenizer sees lambda-scaled
            // AR gradients through `grad_scale` above.
            let loss = out.loss.total.add(&parts.ce_total)?;
            let (l1, commit, recon_total) = out.loss.values()?;
            let (cp, cv, ct) = parts.values()?;
            let values = [("recon_l1", l1), ("commit", commit), ("ce_total", ct)];
            let grads = loss.backward()?;
            check_finite(step, &values, &batch.ids, &groups, Some(&grads), opts)?;
            let stats = guarded_step(&mut opt, &grads, step, &batch.ids, &groups, opts)?;
            tok.after_step()?;
            if step % cfg.log_every.max(1) == 0 || step + 1 == total {
                let s = step as u64;
                log.push(s, "train/recon_l1", l1);
                log.push(s, "train/commit", commit);
                log.push(s, "train/ce_prologue", cp);
                log.push(s, "train/ce_visual", cv);
                log.push(s, "train/ce_total", ct);
                log.push(s, "train/top1", parts.top1_acc);
                log.push(s, "train/loss", recon_total + lambda * ct);
                log.push(s, "train/lr", stats[0].lr);
                log.push(s, "train/grad_norm_tok", stats[0].grad_norm);
                log.push(s, "train/grad_norm_ar", stats[1].grad_norm);
                log::info!("{kind} step {step}/{total} recon {l1:.4} ce_p {cp:.3} ce_v {cv:.3}");
            }
            step += 1;
        }
        if !opts.final_eval_only || epoch + 1 == stage.epochs {
            frontend_eval(&tok, &ar, &mut log, step as u64)?;
        }
    }
    if stage.epochs == 0 {
        frontend_eval(&tok, &ar, &mut log, 0)?;
    }
    let mut ck = Checkpoint::new(cfg, kind, step as u64, log);
    ck.extend(tok.params().export("tok")?);
    ck.extend(ar.params().export("ar")?);
    ck.extend(opt.export());
    Ok(TrainOutcome { checkpoint: ck, routing: Some(routing) })
}

fn stage1_eval(tok: &Tokenizer, ar: &ArModel, holdout: &Dataset, log: &mut MetricLog, step: u64) -> Result<()> {
    let frontend = Frontend { tokenizer: tok.clone(), post: None };
    let cache = frontend.cache(holdout)?;
    log.push(step, "eval/recon_l1", eval_recon(tok, holdout)?);
    push_ar_eval(log, step, &eval_ar(ar, &cache, EvalInputs::Clean)?);
    push_perplexities(log, step, &frontend, &cache)?;
    Ok(())
}

fn push_ar_eval(log: &mut MetricLog, step: u64, e: &ArEval) {
    log.push(step, "eval/ce_prologue", e.ce_prologue);
    log.push(step, "eval/ce_visual", e.ce_visual);
    log.push(step, "eval/ce_total", e.ce_total);
    log.push(step, "eval/top1", e.top1);
}

fn push_perplexities(log: &mut MetricLog, step: u64, f: &Frontend, cache: &TokenCache) -> Result<()> {
    let v = codebook_stats(cache.zv.iter().flatten().copied(), f.tokenizer.visual_codebook().size())?;
    log.push(step, "eval/perplexity_v", v.perplexity);
    if f.prologue_tokens() > 0 {
        let p = codebook_stats(cache.zp.iter().flatten().copied(), f.prologue_vocab())?;
        log.push(step, "eval/perplexity_p", p.perplexity);
    }
    Ok(())
}

/// Fresh full-size AR on the frozen tokenizer's hard ids.
pub fn train_stage2(tok_ck: &Checkpoint, cfg: &RunConfig, train: &Dataset, holdout: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !matches!(tok_ck.kind.as_str(), "stage1" | "post") {
        return Err(Error::Config(format!("stage 2 needs a stage1 or post checkpoint, got {}", tok_ck.kind)));
    }
    let frontend = load_frontend(tok_ck)?;
    let hash_before = frontend_hash(&frontend)?;
    let train_cache = frontend.cache(train)?;
    let eval_cache = frontend.cache(holdout)?;
    let ar = ar_for(cfg, &cfg.full_ar, frontend.prologue_tokens(), frontend.prologue_vocab(), INIT_AR)?;
    let stage = &cfg.stage2;
    let total = steps_per_epoch(train_cache.len(), stage.batch_size) * stage.epochs;
    let mut opt = AdamW::new(total);
    opt.add_group("ar", ar.params(), &stage.ar_optim)?;
    let mut shuffle = stream(cfg.seed, SHUFFLE);
    let mut seq_rng = stream(cfg.seed, SEQUENCE);
    let mut drop_rng = stream(cfg.seed, DROPOUT);
    let mut log = MetricLog::default();
    if !opts.final_eval_only {
        push_ar_eval(&mut log, 0, &eval_ar(&ar, &eval_cache, EvalInputs::Clean)?);
    }
    let mut step = 0usize;
    let null = cfg.data.num_classes as u32;
    for epoch in 0..stage.epochs {
        let order = epoch_order(train_cache.len(), &mut shuffle);
        for idx in order.chunks(stage.batch_size) {
            let mut seq = train_cache.sequence(idx);
            for c in seq.cond.iter_mut() {
                if rand::Rng::random::<f64>(&mut seq_rng) < cfg.class_drop {
                    *c = null;
                }
            }
            let logits = ar.forward(&seq, &mut Forward::train(0.0, &mut drop_rng))?;
            let parts = ar.loss(&seq, &logits)?;
            let (cp, cv, ct) = parts.values()?;
            let ids: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            let grads = parts.ce_total.backward()?;
            let groups = [("ar", ar.params())];
            check_finite(step, &[("ce_total", ct)], &ids, &groups, Some(&grads), opts)?;
            let stats = guarded_step(&mut opt, &grads, step, &ids, &groups, opts)?;
            if step % cfg.log_every.max(1) == 0 || step + 1 == total {
                let s = step as u64;
                log.push(s, "train/ce_prologue", cp);
                log.push(s, "train/ce_visual", cv);
                log.push(s, "train/ce_total", ct);
                log.push(s, "train/top1", parts.top1_acc);
                log.push(s, "train/lr", stats[0].lr);
                log.push(s, "train/grad_norm_ar", stats[0].grad_norm);
                log::info!("stage2 step {step}/{total} ce_p {cp:.3} ce_v {cv:.3}");
            }
            step += 1;
        }
        if !opts.final_eval_only || epoch + 1 == stage.epochs {
            push_ar_eval(&mut log, step as u64, &eval_ar(&ar, &eval_cache, EvalInputs::Clean)?);
        }
    }
    if frontend_hash(&frontend)? != hash_before {
        return Err(Error::Invariant("tokenizer parameters changed during stage 2".into()));
    }
    let mut ck = Checkpoint::new(&tok_ck.config, "stage2", step as u64, log);
    ck.tensors = tok_ck.tensors.iter().filter(|(k, _)| k.starts_with("tok.") || k.starts_with("pro.")).map(|(k, v)| (k.clone(), v.clone())).collect();
    // Stage-2 sizing comes from the run config, so store it as the checkpoint config.
    ck.config = RunConfig { stage2: cfg.stage2.clone(), full_ar: cfg.full_ar.clone(), ..tok_ck.config.clone() };
    ck.config_hash = ck.config.hash();
    ck.extend(ar.params().export("ar")?);
    ck.extend(opt.export());
    Ok(TrainOutcome { checkpoint: ck, routing: None })
}

fn frontend_hash(f: &Frontend) -> Result<String> {
    let mut h = f.tokenizer.params().hash()?;
    if let Some(p) = &f.post {
        h.push_str(&p.params().hash()?);
    }
    Ok(h)
}

/// Post-hoc prologue: a new prologue encoder and compact AR trained with the
/// AR loss only, on top of a frozen 2D tokenizer.
pub fn train_prologue_post(frozen: &Checkpoint, cfg: &RunConfig, train: &Dataset, holdout: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode != Mode::ProloguePost {
        return Err(Error::Config(format!("train_prologue_post needs mode prologue_post, got {}", cfg.mode)));
    }
    if frozen.config.mode != Mode::Baseline2d || frozen.kind != "stage1" {
        return Err(Error::Config(format!(
            "prologue_post needs a baseline_2d stage1 checkpoint, got {} {}",
            frozen.config.mode, frozen.kind
        )));
    }
    let dev = Device::Cpu;
    let tok = load_tokenizer(frozen)?;
    let tok_hash = tok.params().hash()?;
    let recon_before = eval_recon(&tok, holdout)?;
    let pro = PrologueEncoder::new(cfg, &mut stream(cfg.seed, INIT_PROLOGUE))?;
    let ar = ar_for(cfg, &cfg.compact_ar, pro.tokens(), pro.codebook().size(), INIT_AR)?;

    let probe: Vec<usize> = (0..train.len().min(4)).collect();
    let probe = train.batch(&probe, &dev)?;
    let routing = routing_check_post(&tok, &pro, &ar, &probe.pixels, &probe.labels)?;
    routing.verify(cfg.mode)?;

    let frontend = Frontend { tokenizer: tok, post: None };
    let zv_train = frontend.cache(train)?.zv;
    let stage = &cfg.stage1;
    let total = steps_per_epoch(train.len(), stage.batch_size) * stage.epochs;
    let mut opt = AdamW::new(total);
    opt.add_group("pro", pro.params(), &stage.tokenizer_optim)?;
    opt.add_group("ar", ar.params(), &stage.ar_optim)?;
    let mut shuffle = stream(cfg.seed, SHUFFLE);
    let mut seq_rng = stream(cfg.seed, SEQUENCE);
    let mut drop_rng = stream(cfg.seed, DROPOUT);
    let mut log = MetricLog::default();
    let eval = |pro: &PrologueEncoder, ar: &ArModel, log: &mut MetricLog, step: u64| -> Result<()> {
        let f = Frontend { tokenizer: frontend.tokenizer.clone(), post: Some(pro.clone()) };
        let cache = f.cache(holdout)?;
        push_ar_eval(log, step, &eval_ar(ar, &cache, EvalInputs::Clean)?);
        push_perplexities(log, step, &f, &cache)
    };
    if !opts.final_eval_only {
        eval(&pro, &ar, &mut log, 0)?;
    }
    let mut step = 0usize;
    let null = cfg.data.num_classes as u32;
    for epoch in 0..stage.epochs {
        let order = epoch_order(train.len(), &mut shuffle);
        for idx in order.chunks(stage.batch_size) {
            let batch = train.batch(idx, &dev)?;
            let groups = [("pro", pro.params()), ("ar", ar.params())];
            let zp = guarded(pro.quantize(&batch.pixels), step, &batch.ids, &groups, opts)?;
            let zv: Vec<u32> = idx.iter().flat_map(|&i| zv_train[i].clone()).collect();
            let mut seq = ArSequence {
                zp: PrologueInput::Soft(zp.pass_through.clone()),
                zp_targets: zp.hard_ids.clone(),
                ..ArSequence::from_ids(batch.labels.clone(), Vec::new(), zv)
            };
            for (c, d) in seq.cond.iter_mut().zip(seq.visual_dropped.iter_mut()) {
                if rand::Rng::random::<f64>(&mut seq_rng) < cfg.class_drop {
                    *c = null;
                }
                *d = rand::Rng::random::<f64>(&mut seq_rng) < cfg.p_drop;
            }
            let logits = ar.forward(&seq, &mut Forward::train(0.0, &mut drop_rng))?;
            let parts = ar.loss(&seq, &logits)?;
            let (cp, cv, ct) = parts.values()?;
            let grads = parts.ce_total.backward()?;
            check_finite(step, &[("ce_total", ct)], &batch.ids, &groups, Some(&grads), opts)?;
            let stats = guarded_step(&mut opt, &grads, step, &batch.ids, &groups, opts)?;
            if step % cfg.log_every.max(1) == 0 || step + 1 == total {
                let s = step as u64;
                log.push(s, "train/ce_prologue", cp);
                log.push(s, "train/ce_visual", cv);
                log.push(s, "train/ce_total", ct);
                log.push(s, "train/top1", parts.top1_acc);
                log.push(s, "train/lr", stats[0].lr);
                log.push(s, "train/grad_norm_pro", stats[0].grad_norm);
                log.push(s, "train/grad_norm_ar", stats[1].grad_norm);
            }
            step += 1;
        }
        if !opts.final_eval_only || epoch + 1 == stage.epochs {
            eval(&pro, &ar, &mut log, step as u64)?;
        }
    }
    let tok = frontend.tokenizer;
    if tok.params().hash()? != tok_hash {
        return Err(Error::Invariant("frozen tokenizer changed during prologue_post training".into()));
    }
    let recon_after = eval_recon(&tok, holdout)?;
    if recon_after.to_bits() != recon_before.to_bits() {
        return Err(Error::Invariant(format!("reconstruction changed: {recon_before} -> {recon_after}")));
    }
    log.push(step as u64, "eval/recon_l1", recon_after);
    let mut ck = Checkpoint::new(cfg, "post", step as u64, log);
    ck.extend(tok.params().export("tok")?);
    ck.extend(pro.params().export("pro")?);
    ck.extend(ar.params().export("ar")?);
    ck.extend(opt.export());
    Ok(TrainOutcome { checkpoint: ck, routing: Some(routing) })
}

/// One cell of a lambda sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub arm: Mode,
    pub lambda: f64,
    pub config_hash: String,
    pub recon_l1: f64,
    pub ce_total: f64,
    pub ce_visual: f64,
}

impl SweepCell {
    /// Final held-out metrics of a Stage-1 run.
    pub fn from_history(cfg: &RunConfig, h: &MetricLog) -> Self {
        Self {
            arm: cfg.mode,
            lambda: cfg.lambda,
            config_hash: cfg.hash(),
            recon_l1: h.last("eval/recon_l1").unwrap_or(f64::NAN),
            ce_total: h.last("eval/ce_total").unwrap_or(f64::NAN),
            ce_visual: h.last("eval/ce_visual").unwrap_or(f64::NAN),
        }
    }
}

pub fn sweep_config(base: &RunConfig, arm: Mode, lambda: f64) -> RunConfig {
    let mut c = base.with_mode(arm);
    c.lambda = lambda;
    c
}

/// One Stage-1 run per `(arm, lambda)`. `on_cell` sees each finished run
/// (e.g. to persist it) before the next starts.
pub fn lambda_sweep(
    base: &RunConfig,
    lambdas: &[f64],
    arms: &[Mode],
    mut on_cell: impl FnMut(&SweepCell, &TrainOutcome) -> Result<()>,
) -> Result<Vec<SweepCell>> {
    if let Some(bad) = arms.iter().find(|m| !matches!(m, Mode::Prologue | Mode::Baseline2dArreg | Mode::Baseline1dArreg)) {
        return Err(Error::Config(format!("lambda sweep arm {bad} is not one of prologue, 2d_arreg, 1d_arreg")));
    }
    let (train, holdout) = load_data(base)?;
    let mut cells = Vec::new();
    for &arm in arms {
        for &lambda in lambdas {
            let cfg = sweep_config(base, arm, lambda);
            let out = train_stage1(&cfg, &train, &holdout, &TrainOptions { final_eval_only: true, ..Default::default() })?;
            let cell = SweepCell::from_history(&cfg, out.history());
            on_cell(&cell, &out)?;
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// The ablation axes: `(label, config)` per row, each a single change from
/// the default prologue config, plus the post-hoc and one-stage variants.
pub fn ablation_grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let base = base.with_mode(Mode::Prologue);
    let mut rows = Vec::new();
    let mut add = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        rows.push((label, c));
    };
    for p in [0.0, 0.5, 1.0] {
        add(format!("p_drop={p}"), &|c| c.p_drop = p);
    }
    for k in [4usize, 16, 64] {
        add(format!("K={k}"), &|c| c.tokenizer.prologue_tokens = k);
    }
    for v in [256usize, 1024, 4096] {
        add(format!("Cp={v}"), &|c| c.tokenizer.prologue_codebook = v);
    }
    for t in [0.01, 0.1, 1.0] {
        add(format!("tau={t}"), &|c| c.tokenizer.tau = t);
    }
    for l in [1.0, 3.0, 6.0] {
        add(format!("lambda={l}"), &|c| c.lambda = l);
    }
    rows.push(("prologue_post".into(), base.with_mode(Mode::ProloguePost)));
    rows.push(("prologue_onestage".into(), base.with_mode(Mode::PrologueOnestage)));
    rows
}

/// Run directory `<root>/<hash12>-<mode>`.
pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(cfg.run_name())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode) -> RunConfig {
        RunConfig::tiny(mode)
    }

    #[test]
    fn routing_matrix() {
        for mode in [Mode::Prologue, Mode::Baseline2dArreg, Mode::Baseline1dArreg, Mode::Baseline2d, Mode::PrologueOnestage] {
            let cfg = tiny(mode);
            let tok = Tokenizer::new(&cfg, &mut stream(0, 1)).unwrap();
            let ar = ar_for(&cfg, &cfg.compact_ar, tok.prologue_tokens(), 16, 2).unwrap();
            let (train, _) = load_data(&cfg).unwrap();
            let b = train.batch(&[0, 1, 2], &Device::Cpu).unwrap();
            let r = routing_check(&cfg, &tok, &ar, &b.pixels, &b.labels).unwrap();
            r.verify(mode).unwrap();
            match mode {
                Mode::Prologue | Mode::PrologueOnestage => {
                    assert_eq!(r.ar_to_visual_codebook, 0.0);
                    assert_eq!(r.ar_to_visual_states, 0.0);
                    assert!(r.ar_to_queries.unwrap() > 0.0);
                    assert_eq!(r.recon_to_prologue_codebook, Some(0.0));
                }
                Mode::Baseline2dArreg | Mode::Baseline1dArreg => {
                    assert!(r.ar_to_visual_codebook > 0.0);
                    assert!(r.ar_to_visual_states > 0.0);
                }
                _ => assert_eq!(r.ar_to_visual_codebook, 0.0),
            }
        }
    }

    #[test]
    fn stage1_is_deterministic_and_round_trips() {
        let cfg = tiny(Mode::Prologue);
        let (train, holdout) = load_data(&cfg).unwrap();
        let a = train_stage1(&cfg, &train, &holdout, &TrainOptions::default()).unwrap();
        let b = train_stage1(&cfg, &train, &holdout, &TrainOptions::default()).unwrap();
        assert_eq!(a.history(), b.history());
        assert!(a.history().last("eval/perplexity_p").is_some());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        a.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let f1 = load_frontend(&a.checkpoint).unwrap();
        let f2 = load_frontend(&back).unwrap();
        let x = holdout.batch(&[0, 1], &Device::Cpu).unwrap().pixels;
        let r1 = f1.tokenizer.forward(&x).unwrap().recon.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let r2 = f2.tokenizer.forward(&x).unwrap().recon.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(r1, r2);
        let ar1 = load_ar(&a.checkpoint, &f1).unwrap();
        let ar2 = load_ar(&back, &f2).unwrap();
        let cache = f1.cache(&holdout).unwrap();
        assert_eq!(eval_ar(&ar1, &cache, EvalInputs::Clean).unwrap(), eval_ar(&ar2, &cache, EvalInputs::Clean).unwrap());
    }

    #[test]
    fn stage2_freezes_tokenizer() {
        let cfg = tiny(Mode::Prologue);
        let (train, holdout) = load_data(&cfg).unwrap();
        let s1 = train_stage1(&cfg, &train, &holdout, &TrainOptions::default()).unwrap();
        let s2 = train_stage2(&s1.checkpoint, &cfg, &train, &holdout, &TrainOptions::default()).unwrap();
        assert_eq!(s2.checkpoint.section("tok").len(), s1.checkpoint.section("tok").len());
        let a = load_tokenizer(&s1.checkpoint).unwrap().params().hash().unwrap();
        let b = load_tokenizer(&s2.checkpoint).unwrap().params().hash().unwrap();
        assert_eq!(a, b);
        let ce = s2.history().series("eval/ce_total");
        assert!(ce.last().unwrap().1 < ce[0].1);
    }

    #[test]
    fn prologue_post_keeps_reconstruction() {
        let base = tiny(Mode::Baseline2d);
        let (train, holdout) = load_data(&base).unwrap();
        let s1 = train_stage1(&base, &train, &holdout, &TrainOptions::default()).unwrap();
        let mut post = tiny(Mode::ProloguePost);
        post.stage1.epochs = 3;
        let out = train_prologue_post(&s1.checkpoint, &post, &train, &holdout, &TrainOptions::default()).unwrap();
        assert_eq!(out.history().last("eval/recon_l1"), s1.history().last("eval/recon_l1"));
        let f = load_frontend(&out.checkpoint).unwrap();
        assert!(f.post.is_some());
        assert_eq!(f.tokenizer.params().hash().unwrap(), load_tokenizer(&s1.checkpoint).unwrap().params().hash().unwrap());
        // Wrong source checkpoint.
        assert!(train_prologue_post(&out.checkpoint, &post, &train, &holdout, &TrainOptions::default()).is_err());
    }

    #[test]
    fn nan_aborts_with_dump() {
        let mut cfg = tiny(Mode::Prologue);
        cfg.stage1.tokenizer_optim.lr = 1e30;
        cfg.stage1.tokenizer_optim.warmup_frac = 0.0;
        cfg.stage1.tokenizer_optim.grad_clip = 0.0;
        cfg.stage1.epochs = 4;
        let (train, holdout) = load_data(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { dump_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        match train_stage1(&cfg, &train, &holdout, &opts) {
            Err(Error::NonFinite { dump, .. }) => assert!(dump.exists()),
            other => panic!("expected a non-finite abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn ablation_rows() {
        let rows = ablation_grid(&RunConfig::default());
        assert_eq!(rows.len(), 17);
        assert!(rows.iter().any(|(l, c)| l == "K=64" && c.tokenizer.prologue_tokens == 64));
        assert!(rows.iter().any(|(_, c)| c.mode == Mode::PrologueOnestage));
    }
}
