//! Two-group guided sampling: constant prologue scale, cosine-scheduled
//! visual scale, and fixed-prologue resampling.

use prologue::config::{Mode, RunConfig};
use prologue::pipeline::{load_ar, load_data, load_frontend, train_stage1, train_stage2, TrainOptions};
use prologue::sampling::{decode_samples, generate, sample_grid, visual_scale_at, CfgConfig};

fn main() -> prologue::Result<()> {
    let cfg = RunConfig::tiny(Mode::Prologue);
    let (train, holdout) = load_data(&cfg)?;
    let s1 = train_stage1(&cfg, &train, &holdout, &TrainOptions::default())?;
    let s2 = train_stage2(&s1.checkpoint, &cfg, &train, &holdout, &TrainOptions::default())?;
    let frontend = load_frontend(&s2.checkpoint)?;
    let ar = load_ar(&s2.checkpoint, &frontend)?;

    let guide = CfgConfig::prologue();
    let n = ar.visual_tokens();
    let schedule: Vec<String> = [0, n / 4, n / 2, 3 * n / 4, n - 1]
        .iter()
        .map(|&t| format!("s({t})={:.2}", visual_scale_at(t, n, guide.s_vis, guide.cos_p)))
        .collect();
    println!("visual guidance schedule: {}", schedule.join(" "));

    let out = std::path::PathBuf::from("target/examples/sampling");
    std::fs::create_dir_all(&out)?;
    let classes: Vec<u32> = (0..cfg.data.num_classes as u32).collect();
    sample_grid(&frontend.tokenizer, &ar, &classes, 6, &guide, 0, None, &out.join("guided.png"), &out.join("guided.jsonl"))?;

    // Same prologue, different seeds: only visual tokens are resampled.
    let anchor = generate(&ar, &[0], &[99], &guide, None)?;
    let seeds: Vec<u64> = (0..6).collect();
    let resampled = generate(&ar, &[0; 6], &seeds, &guide, Some(&anchor[0].zp))?;
    assert!(resampled.iter().all(|s| s.zp == anchor[0].zp));
    let images = decode_samples(&frontend.tokenizer, &resampled)?;
    prologue::plot::image_grid(&images, 1, 6)?.save(out.join("fixed_prologue.png"))?;
    println!("prologue {:?} shared by 6 samples", anchor[0].zp);
    println!("outputs in {}", out.display());
    Ok(())
}
