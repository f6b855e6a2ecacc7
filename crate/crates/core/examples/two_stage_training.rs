//! Stage 1 (tokenizer + compact AR) followed by Stage 2 (full AR on frozen
//! tokens), with checkpoints and a metrics CSV.
//!
//! cargo run --example two_stage_training -- [tiny|quick|desk] [mode]

use prologue::checkpoint::Checkpoint;
use prologue::config::{Mode, RunConfig};
use prologue::pipeline::{eval_ar, load_ar, load_data, load_frontend, train_stage1, train_stage2, EvalInputs, TrainOptions};

fn main() -> prologue::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let preset = std::env::args().nth(1).unwrap_or_else(|| "tiny".into());
    let mode = Mode::parse(&std::env::args().nth(2).unwrap_or_else(|| "prologue".into()))?;
    let cfg = RunConfig::preset(&preset, mode)?;
    let out = std::path::PathBuf::from("target/examples/two_stage").join(cfg.run_name());
    std::fs::create_dir_all(&out)?;

    let (train, holdout) = load_data(&cfg)?;
    let opts = TrainOptions { dump_dir: Some(out.clone()), ..Default::default() };
    let s1 = train_stage1(&cfg, &train, &holdout, &opts)?;
    if let Some(r) = &s1.routing {
        println!("routing: {r:?}");
    }
    let h = s1.history();
    println!(
        "stage 1: recon {:.4}, ce_visual {:.3}, prologue perplexity {:.2}",
        h.last("eval/recon_l1").unwrap_or(f64::NAN),
        h.last("eval/ce_visual").unwrap_or(f64::NAN),
        h.last("eval/perplexity_p").unwrap_or(f64::NAN)
    );
    s1.checkpoint.save(&out.join("stage1.ckpt"))?;

    let s2 = train_stage2(&s1.checkpoint, &cfg, &train, &holdout, &opts)?;
    s2.checkpoint.save(&out.join("stage2.ckpt"))?;
    s2.history().append_csv(&out.join("metrics.csv"))?;

    // Reload from disk and evaluate.
    let ck = Checkpoint::load(&out.join("stage2.ckpt"))?;
    let frontend = load_frontend(&ck)?;
    let ar = load_ar(&ck, &frontend)?;
    let cache = frontend.cache(&holdout)?;
    let e = eval_ar(&ar, &cache, EvalInputs::Clean)?;
    println!("stage 2: ce_visual {:.3}, ce_total {:.3}, top1 {:.3}", e.ce_visual, e.ce_total, e.top1);
    println!("artifacts in {}", out.display());
    Ok(())
}
