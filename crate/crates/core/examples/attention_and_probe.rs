//! Attention maps, empirical information and linear probes on a trained
//! prologue model.

use prologue::config::{Mode, RunConfig};
use prologue::diagnostics::{attention_maps, info_empirical, linear_probe, token_features, ProbeBudget, ProbeSource};
use prologue::pipeline::{load_ar, load_data, load_frontend, train_stage1, train_stage2, TrainOptions};

fn main() -> prologue::Result<()> {
    let cfg = RunConfig::tiny(Mode::Prologue);
    let (train, holdout) = load_data(&cfg)?;
    let s1 = train_stage1(&cfg, &train, &holdout, &TrainOptions::default())?;

    let frontend = load_frontend(&s1.checkpoint)?;
    let compact = load_ar(&s1.checkpoint, &frontend)?;
    let (tc, hc) = (frontend.cache(&train)?, frontend.cache(&holdout)?);
    let info = info_empirical(&compact, &hc)?;
    println!("MI proxy {:.4} nats (shuffled {:.4} vs true {:.4})", info.mi_proxy, info.ce_visual_shuffled_prologue, info.ce_visual_true_prologue);

    for source in [ProbeSource::Prologue, ProbeSource::FirstKVisual] {
        let k = frontend.prologue_tokens();
        let xs = token_features(&frontend, &tc, source, k)?;
        let xt = token_features(&frontend, &hc, source, k)?;
        let r = linear_probe(source, (&xs, &tc.labels), (&xt, &hc.labels), cfg.data.num_classes, &ProbeBudget::default())?;
        println!("probe {source:?}: top1 {:.3} top5 {:.3}", r.top1, r.top5);
    }

    let s2 = train_stage2(&s1.checkpoint, &cfg, &train, &holdout, &TrainOptions::default())?;
    let ar = load_ar(&s2.checkpoint, &frontend)?;
    let idx: Vec<usize> = (0..hc.len()).collect();
    let report = attention_maps(&ar, &hc.sequence(&idx), &[])?;
    println!(
        "prologue attention mass {:.4}; uniform {:.4}, causal uniform {:.4}",
        report.prologue_mass(),
        report.uniform_baseline,
        report.causal_uniform_baseline
    );
    let dir = std::path::Path::new("target/examples/attention");
    report.save(dir)?;
    println!("maps in {}", dir.display());
    Ok(())
}
