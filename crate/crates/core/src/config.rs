//! Run configuration: every hyperparameter of a training or sampling run.
//!
//! Configs are TOML documents. They serialize deterministically, so the
//! SHA-256 of the canonical JSON form identifies a run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Joint Stage 1 with AR gradients routed to prologue tokens only.
    Prologue,
    /// Frozen 2D tokenizer plus a post-hoc prologue encoder.
    ProloguePost,
    /// Joint training with the full-size AR, no Stage 2.
    PrologueOnestage,
    /// 2D tokenizer, pure two-stage (AR sees no tokenizer gradient).
    #[serde(rename = "baseline_2d", alias = "2d")]
    Baseline2d,
    /// 1D (query-token) tokenizer, pure two-stage.
    #[serde(rename = "baseline_1d", alias = "1d")]
    Baseline1d,
    /// 2D tokenizer with AR gradients flowing into visual tokens.
    #[serde(rename = "baseline_2d_arreg", alias = "2d_arreg")]
    Baseline2dArreg,
    /// 1D tokenizer with AR gradients flowing into visual tokens.
    #[serde(rename = "baseline_1d_arreg", alias = "1d_arreg")]
    Baseline1dArreg,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Prologue,
        Mode::ProloguePost,
        Mode::PrologueOnestage,
        Mode::Baseline2d,
        Mode::Baseline1d,
        Mode::Baseline2dArreg,
        Mode::Baseline1dArreg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Prologue => "prologue",
            Mode::ProloguePost => "prologue_post",
            Mode::PrologueOnestage => "prologue_onestage",
            Mode::Baseline2d => "baseline_2d",
            Mode::Baseline1d => "baseline_1d",
            Mode::Baseline2dArreg => "baseline_2d_arreg",
            Mode::Baseline1dArreg => "baseline_1d_arreg",
        }
    }

    /// Accepts the canonical names plus the short sweep aliases
    /// (`2d_arreg`, `1d`, ...).
    pub fn parse(s: &str) -> Result<Mode> {
        let s = s.trim();
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().strip_prefix("baseline_") == Some(s))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }

    /// Modes whose tokenizer carries prologue tokens in the main encoder.
    pub fn has_prologue(self) -> bool {
        matches!(self, Mode::Prologue | Mode::PrologueOnestage)
    }

    pub fn is_1d(self) -> bool {
        matches!(self, Mode::Baseline1d | Mode::Baseline1dArreg)
    }

    pub fn is_arreg(self) -> bool {
        matches!(self, Mode::Baseline2dArreg | Mode::Baseline1dArreg)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `synth` or a path to a class-per-folder image directory.
    pub source: String,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub holdout_frac: f64,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub patch_size: usize,
    /// Prologue token count (0 for baselines).
    pub prologue_tokens: usize,
    pub prologue_codebook: usize,
    pub visual_codebook: usize,
    /// Dimension of the (L2-normalized) visual code vectors.
    pub code_dim: usize,
    /// Number of latent tokens for the 1D tokenizer baselines.
    pub tokens_1d: usize,
    pub dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub tau: f64,
    pub prologue_init_std: f64,
    pub commit_weight: f64,
    /// Weight of the encoder-side commitment term inside the VQ loss,
    /// relative to the codebook term.
    pub commit_beta: f64,
    /// Layers of the separate prologue encoder used by Prologue-Post.
    pub post_encoder_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub dropout: f32,
    pub emb_dropout: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_end: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer for tokenizer-side parameters (unused in Stage 2).
    pub tokenizer_optim: OptimConfig,
    /// Optimizer for the AR model.
    pub ar_optim: OptimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// AR loss weight on the tokenizer side.
    pub lambda: f64,
    pub p_drop: f64,
    pub class_drop: f64,
    pub log_every: usize,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    /// Compact AR trained jointly in Stage 1.
    pub compact_ar: ArConfig,
    /// Full-size AR of Stage 2 and of the one-stage variant.
    pub full_ar: ArConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

/// Full-scale reference values (ImageNet 256, base-size tokenizer). Kept for
/// documentation and for full-size experiments; CPU runs use [`RunConfig::desk`].
pub mod full_scale {
    pub const PROLOGUE_TOKENS: usize = 16;
    pub const PROLOGUE_CODEBOOK: usize = 1024;
    pub const VISUAL_CODEBOOK: usize = 16384;
    pub const VISUAL_TOKENS: usize = 256;
    pub const LAMBDA: f64 = 3.0;
    pub const TAU: f64 = 0.1;
    pub const P_DROP: f64 = 0.5;
    pub const CLASS_DROP: f64 = 0.1;
    pub const COMMIT_WEIGHT: f64 = 1.0;
    pub const LAMBDA_GRID: [f64; 5] = [0.03, 0.3, 1.0, 3.0, 6.0];
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(Mode::Prologue)
    }
}

impl RunConfig {
    /// Desk-scale defaults: 32x32 images, 4x4 patches (64 visual tokens),
    /// 8 prologue tokens, d = 128, 4-layer encoder/decoder/compact AR.
    pub fn desk(mode: Mode) -> Self {
        let tok_optim = OptimConfig {
            lr: 1e-3,
            lr_end: 3e-4,
            warmup_frac: 0.05,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        };
        let ar_optim = OptimConfig { weight_decay: 3e-2, ..tok_optim.clone() };
        let ar = ArConfig {
            dim: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            activation: Activation::Gelu,
            dropout: 0.1,
            emb_dropout: 0.1,
        };
        let mut cfg = Self {
            mode,
            seed: 0,
            lambda: full_scale::LAMBDA,
            p_drop: full_scale::P_DROP,
            class_drop: full_scale::CLASS_DROP,
            log_every: 100,
            data: DataConfig {
                source: "synth".into(),
                num_classes: 10,
                samples_per_class: 64,
                image_size: 32,
                holdout_frac: 0.125,
                augment: false,
            },
            tokenizer: TokenizerConfig {
                patch_size: 4,
                prologue_tokens: 8,
                prologue_codebook: 128,
                visual_codebook: 512,
                code_dim: 16,
                tokens_1d: 64,
                dim: 128,
                encoder_layers: 4,
                decoder_layers: 4,
                heads: 4,
                mlp_ratio: 4,
                activation: Activation::Gelu,
                tau: full_scale::TAU,
                prologue_init_std: 0.02,
                commit_weight: full_scale::COMMIT_WEIGHT,
                commit_beta: 0.25,
                post_encoder_layers: 2,
            },
            compact_ar: ar.clone(),
            full_ar: ArConfig { layers: 8, ..ar },
            stage1: StageConfig {
                epochs: 30,
                batch_size: 32,
                tokenizer_optim: tok_optim,
                ar_optim: ar_optim.clone(),
            },
            stage2: StageConfig {
                epochs: 30,
                batch_size: 32,
                tokenizer_optim: OptimConfig { weight_decay: 0.0, ..ar_optim.clone() },
                ar_optim: OptimConfig { beta2: 0.96, ..ar_optim },
            },
        };
        cfg.apply_mode_constraints();
        cfg
    }

    /// A smaller variant of [`RunConfig::desk`] sized for a single CPU core:
    /// d = 64, 2-layer encoder/decoder/compact AR, 4-layer full AR, 20
    /// epochs per stage.
    pub fn quick(mode: Mode) -> Self {
        let mut c = Self::desk(mode);
        c.tokenizer.dim = 64;
        c.tokenizer.encoder_layers = 2;
        c.tokenizer.decoder_layers = 2;
        c.tokenizer.post_encoder_layers = 1;
        c.compact_ar.dim = 64;
        c.compact_ar.layers = 2;
        c.full_ar.dim = 64;
        c.full_ar.layers = 4;
        c.stage1.epochs = 20;
        c.stage2.epochs = 20;
        c.log_every = 50;
        c
    }

    /// Seconds-scale smoke configuration: 16x16 images of 4 classes, d = 32,
    /// single-layer networks, 2 epochs per stage.
    pub fn tiny(mode: Mode) -> Self {
        let mut c = Self::desk(mode);
        c.data.num_classes = 4;
        c.data.samples_per_class = 6;
        c.data.image_size = 16;
        c.data.holdout_frac = 0.25;
        c.tokenizer.dim = 32;
        c.tokenizer.heads = 2;
        c.tokenizer.encoder_layers = 1;
        c.tokenizer.decoder_layers = 1;
        c.tokenizer.post_encoder_layers = 1;
        if c.tokenizer.prologue_tokens > 0 {
            c.tokenizer.prologue_tokens = 4;
        }
        c.tokenizer.prologue_codebook = 16;
        c.tokenizer.visual_codebook = 32;
        c.tokenizer.tokens_1d = 16;
        for ar in [&mut c.compact_ar, &mut c.full_ar] {
            ar.dim = 32;
            ar.heads = 2;
            ar.layers = 1;
        }
        c.full_ar.layers = 2;
        c.stage1.epochs = 2;
        c.stage2.epochs = 2;
        c.stage1.batch_size = 8;
        c.stage2.batch_size = 8;
        c.log_every = 1;
        c
    }

    /// Named preset: `desk`, `quick` or `tiny`.
    pub fn preset(name: &str, mode: Mode) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(mode)),
            "quick" => Ok(Self::quick(mode)),
            "tiny" => Ok(Self::tiny(mode)),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected desk, quick or tiny"))),
        }
    }

    /// Forces the structural settings a mode implies.
    pub fn apply_mode_constraints(&mut self) {
        match self.mode {
            Mode::Prologue | Mode::PrologueOnestage | Mode::ProloguePost => {}
            Mode::Baseline2d | Mode::Baseline1d => {
                self.tokenizer.prologue_tokens = 0;
                self.lambda = 0.0;
                self.p_drop = 0.0;
            }
            Mode::Baseline2dArreg | Mode::Baseline1dArreg => {
                self.tokenizer.prologue_tokens = 0;
                self.p_drop = 0.0;
            }
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut c = self.clone();
        c.mode = mode;
        c.apply_mode_constraints();
        c
    }

    pub fn visual_tokens(&self) -> usize {
        if self.mode.is_1d() {
            self.tokenizer.tokens_1d
        } else {
            let g = self.data.image_size / self.tokenizer.patch_size.max(1);
            g * g
        }
    }

    /// Prologue tokens seen by the AR model (the post-hoc encoder's count for
    /// Prologue-Post).
    pub fn ar_prologue_tokens(&self) -> usize {
        self.tokenizer.prologue_tokens
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.tokenizer;
        let d = &self.data;
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return fail(format!("p_drop must be in [0, 1], got {}", self.p_drop));
        }
        if !(0.0..=1.0).contains(&self.class_drop) {
            return fail(format!("class_drop must be in [0, 1], got {}", self.class_drop));
        }
        if !(t.tau > 0.0) {
            return fail(format!("tokenizer.tau must be > 0, got {}", t.tau));
        }
        if !(t.commit_weight >= 0.0) || !(t.commit_beta >= 0.0) {
            return fail(format!("tokenizer.commit_weight and commit_beta must be >= 0, got {} and {}", t.commit_weight, t.commit_beta));
        }
        if t.patch_size == 0 || d.image_size % t.patch_size != 0 {
            return fail(format!(
                "data.image_size {} not divisible by tokenizer.patch_size {}",
                d.image_size, t.patch_size
            ));
        }
        if d.num_classes < 2 {
            return fail("data.num_classes must be >= 2".into());
        }
        match self.mode {
            Mode::Baseline2d | Mode::Baseline1d | Mode::Baseline2dArreg | Mode::Baseline1dArreg => {
                if t.prologue_tokens != 0 {
                    return fail(format!("mode {} requires tokenizer.prologue_tokens = 0", self.mode));
                }
            }
            _ => {
                if t.prologue_tokens == 0 {
                    return fail(format!("mode {} requires tokenizer.prologue_tokens > 0", self.mode));
                }
                if t.prologue_codebook < 2 {
                    return fail("tokenizer.prologue_codebook must be >= 2".into());
                }
            }
        }
        if matches!(self.mode, Mode::Baseline2d | Mode::Baseline1d) && self.lambda != 0.0 {
            return fail(format!("mode {} is pure two-stage and requires lambda = 0", self.mode));
        }
        if t.visual_codebook < 2 {
            return fail("tokenizer.visual_codebook must be >= 2".into());
        }
        if self.mode.is_1d() && t.tokens_1d == 0 {
            return fail("tokenizer.tokens_1d must be > 0 for 1D modes".into());
        }
        for (name, dim, heads) in [
            ("tokenizer", t.dim, t.heads),
            ("compact_ar", self.compact_ar.dim, self.compact_ar.heads),
            ("full_ar", self.full_ar.dim, self.full_ar.heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return fail(format!("{name}.dim {dim} not divisible by {name}.heads {heads}"));
            }
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.batch_size == 0 {
                return fail(format!("{name}.batch_size must be > 0"));
            }
            for o in [&s.tokenizer_optim, &s.ar_optim] {
                if !(o.lr > 0.0) || o.lr_end < 0.0 || !(0.0..1.0).contains(&o.warmup_frac) {
                    return fail(format!("{name}: invalid learning-rate schedule"));
                }
            }
        }
        if !(0.0..1.0).contains(&d.holdout_frac) {
            return fail("data.holdout_frac must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// `<first 12 hex chars of hash>-<mode>`.
    pub fn run_name(&self) -> String {
        format!("{}-{}", &self.hash()[..12], self.mode)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies dotted-path `key=value` overrides. Values are parsed as TOML
    /// literals, falling back to strings. Unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
            let value = parse_value(value.trim());
            set_path(&mut doc, key.trim(), value)?;
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::from_toml(&text)?;
        if overrides.iter().any(|o| o.as_ref().trim_start().starts_with("mode")) {
            cfg.apply_mode_constraints();
        }
        Ok(cfg)
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        (self.data.source != "synth").then(|| PathBuf::from(&self.data.source))
    }
}

fn parse_value(s: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {s}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {part:?} is not a table")))?;
        let slot = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            let value = coerce(slot, value)
                .ok_or_else(|| Error::Config(format!("override {key:?} has the wrong type")))?;
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::Config(format!("empty override key {key:?}")))
}

// Integers given for float fields and vice versa.
fn coerce(slot: &toml::Value, value: toml::Value) -> Option<toml::Value> {
    use toml::Value as V;
    match (slot, value) {
        (V::Float(_), V::Integer(i)) => Some(V::Float(i as f64)),
        (V::String(_), V::String(s)) => Some(V::String(s)),
        (V::String(_), v) => Some(V::String(v.to_string())),
        (a, b) if std::mem::discriminant(a) == std::mem::discriminant(&b) => Some(b),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_hash_stability() {
        let cfg = RunConfig::desk(Mode::Prologue);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.run_name().len(), 12 + 1 + "prologue".len());
        assert_ne!(cfg.hash(), cfg.with_mode(Mode::Baseline2d).hash());
    }

    #[test]
    fn full_scale_defaults() {
        let cfg = RunConfig::desk(Mode::Prologue);
        assert_eq!(cfg.lambda, 3.0);
        assert_eq!(cfg.tokenizer.tau, 0.1);
        assert_eq!(cfg.p_drop, 0.5);
        assert_eq!(cfg.class_drop, 0.1);
        assert_eq!(cfg.tokenizer.commit_weight, 1.0);
        assert_eq!(cfg.visual_tokens(), 64);
        assert_eq!(cfg.tokenizer.prologue_tokens, 8);
        assert_eq!(cfg.tokenizer.prologue_codebook, 128);
        assert_eq!(cfg.tokenizer.visual_codebook, 512);
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::desk(Mode::Prologue);
        let o = cfg.with_overrides(&["lambda=6", "tokenizer.tau=1.0", "stage1.epochs=2"]).unwrap();
        assert_eq!(o.lambda, 6.0);
        assert_eq!(o.tokenizer.tau, 1.0);
        assert_eq!(o.stage1.epochs, 2);
        assert!(cfg.with_overrides(&["lamda=3"]).is_err());
        assert!(cfg.with_overrides(&["tokenizer.tua=3"]).is_err());
        assert!(cfg.with_overrides(&["stage1.epochs=abc"]).is_err());
        let b = cfg.with_overrides(&["mode=baseline_2d"]).unwrap();
        assert_eq!(b.tokenizer.prologue_tokens, 0);
        b.validate().unwrap();
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::desk(Mode::Baseline2d);
        cfg.tokenizer.prologue_tokens = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk(Mode::Prologue);
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        for m in Mode::ALL {
            RunConfig::desk(m).validate().unwrap();
        }
    }

    #[test]
    fn mode_aliases() {
        assert_eq!(Mode::parse("2d_arreg").unwrap(), Mode::Baseline2dArreg);
        assert_eq!(Mode::parse("prologue").unwrap(), Mode::Prologue);
        assert!(Mode::parse("3d").is_err());
    }
}
