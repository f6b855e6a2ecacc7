use prologue::ar::ArModel;
use prologue::config::{Mode, RunConfig};
use prologue::diagnostics::{attention_maps, collapse_oracle, info_empirical, info_exact, token_features, DiscreteJoint, ProbeSource};
use prologue::pipeline::{stream, Frontend, TokenCache};
use prologue::tokenizer::Tokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn untrained(cfg: &RunConfig) -> (Frontend, ArModel) {
    let tok = Tokenizer::new(cfg, &mut stream(cfg.seed, 0)).unwrap();
    let ar = ArModel::new(
        &cfg.full_ar,
        cfg.tokenizer.prologue_tokens,
        cfg.visual_tokens(),
        cfg.tokenizer.prologue_codebook,
        cfg.tokenizer.visual_codebook,
        cfg.data.num_classes,
        &mut stream(cfg.seed, 1),
    )
    .unwrap();
    (Frontend { tokenizer: tok, post: None }, ar)
}

fn random_cache(cfg: &RunConfig, n: usize, seed: u64) -> TokenCache {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.tokenizer.prologue_tokens;
    let v = cfg.visual_tokens();
    TokenCache {
        zp: (0..n).map(|_| (0..k).map(|_| rng.random_range(0..cfg.tokenizer.prologue_codebook as u32)).collect()).collect(),
        zv: (0..n).map(|_| (0..v).map(|_| rng.random_range(0..cfg.tokenizer.visual_codebook as u32)).collect()).collect(),
        labels: (0..n).map(|i| (i % cfg.data.num_classes) as u32).collect(),
    }
}

#[test]
fn untrained_model_has_no_prologue_information() {
    let cfg = RunConfig::tiny(Mode::Prologue);
    let (_, ar) = untrained(&cfg);
    let report = info_empirical(&ar, &random_cache(&cfg, 32, 5)).unwrap();
    assert!(report.mi_proxy.abs() < 0.02, "{report:?}");
    // Near-uniform predictions at initialization.
    let uniform = (cfg.tokenizer.visual_codebook as f64).ln();
    assert!((report.ce_visual_true_prologue - uniform).abs() < 0.1);
    assert!(report.warning.is_some());
}

#[test]
fn probe_features_follow_codebook_layout() {
    let cfg = RunConfig::tiny(Mode::Prologue);
    let (frontend, _) = untrained(&cfg);
    let cache = random_cache(&cfg, 6, 1);
    let k = cfg.tokenizer.prologue_tokens;
    let dims = [
        (ProbeSource::Prologue, frontend.tokenizer.prologue_codebook().unwrap().dim()),
        (ProbeSource::FirstKVisual, frontend.tokenizer.visual_codebook().dim()),
    ];
    for (source, dim) in dims {
        let f = token_features(&frontend, &cache, source, k).unwrap();
        assert_eq!(f.len(), 6);
        assert!(f.iter().all(|x| x.len() == k * dim));
    }
    assert!(token_features(&frontend, &cache, ProbeSource::Prologue, k + 1).is_err());

    let base = RunConfig::tiny(Mode::Baseline2d);
    let (frontend, _) = untrained(&base);
    let cache = random_cache(&base, 2, 1);
    assert!(token_features(&frontend, &cache, ProbeSource::Prologue, 1).is_err());
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = RunConfig::tiny(Mode::Prologue);
    let (_, ar) = untrained(&cfg);
    let cache = random_cache(&cfg, 4, 2);
    let report = attention_maps(&ar, &cache.sequence(&[0, 1, 2, 3]), &[]).unwrap();
    let t = report.seq_len;
    assert_eq!(report.layers.len(), cfg.full_ar.layers);
    for l in &report.layers {
        for i in 2..t {
            let s: f64 = l.matrix[i * t..(i + 1) * t].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
            assert!(l.matrix[i * t + i + 1..(i + 1) * t].iter().all(|&v| v.abs() < 1e-6), "row {i} attends ahead");
        }
    }
    assert!(report.causal_uniform_baseline > report.uniform_baseline);
    assert!(attention_maps(&ar, &cache.sequence(&[0]), &[cfg.full_ar.layers]).is_err());
}

#[test]
fn copy_case_reaches_zero_conditional_entropy() {
    // zp is a copy of zv: conditioning removes all uncertainty.
    let q = DiscreteJoint::from_weights(vec![0.2, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.3], 3, 3).unwrap();
    let info = info_exact(&q);
    assert!(info.h_zv_given_zp.abs() < 1e-12);
    assert!((info.mi - info.h_zv).abs() < 1e-12);
    let c = collapse_oracle(&q).unwrap();
    assert!(c.conditional_ce.abs() < 1e-12);
    assert!((c.collapsed_total - c.baseline_total).abs() < 1e-12);
}
