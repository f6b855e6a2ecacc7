//! Attaches a prologue encoder and compact AR to a frozen baseline tokenizer.
//! Reconstruction is untouched by construction.

use prologue::config::{Mode, RunConfig};
use prologue::pipeline::{load_data, train_prologue_post, train_stage1, TrainOptions};

fn main() -> prologue::Result<()> {
    let base = RunConfig::tiny(Mode::Baseline2d);
    let (train, holdout) = load_data(&base)?;
    let frozen = train_stage1(&base, &train, &holdout, &TrainOptions::default())?;

    let mut cfg = RunConfig::tiny(Mode::ProloguePost);
    cfg.stage1.epochs = 4;
    let post = train_prologue_post(&frozen.checkpoint, &cfg, &train, &holdout, &TrainOptions::default())?;
    let ce = post.history().series("eval/ce_total");
    println!(
        "recon before {:?} after {:?}",
        frozen.history().last("eval/recon_l1"),
        post.history().last("eval/recon_l1")
    );
    println!("AR CE {:.4} -> {:.4}", ce[0].1, ce[ce.len() - 1].1);
    Ok(())
}
