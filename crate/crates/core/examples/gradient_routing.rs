//! Measures which parameters receive AR-loss and reconstruction gradients in
//! every training mode.

use candle_core::Device;
use prologue::ar::ArModel;
use prologue::config::{Mode, RunConfig};
use prologue::data::synth_shapes;
use prologue::pipeline::{routing_check, stream};
use prologue::tokenizer::Tokenizer;

fn main() -> prologue::Result<()> {
    for mode in [Mode::Prologue, Mode::PrologueOnestage, Mode::Baseline2d, Mode::Baseline2dArreg, Mode::Baseline1dArreg] {
        let cfg = RunConfig::tiny(mode);
        let tok = Tokenizer::new(&cfg, &mut stream(cfg.seed, 1))?;
        let ar = ArModel::new(
            &cfg.compact_ar,
            tok.prologue_tokens(),
            tok.visual_tokens(),
            cfg.tokenizer.prologue_codebook,
            cfg.tokenizer.visual_codebook,
            cfg.data.num_classes,
            &mut stream(cfg.seed, 2),
        )?;
        let ds = synth_shapes(0, cfg.data.num_classes, 2, cfg.data.image_size)?;
        let batch = ds.batch(&(0..ds.len()).collect::<Vec<_>>(), &Device::Cpu)?;
        let r = routing_check(&cfg, &tok, &ar, &batch.pixels, &batch.labels)?;
        r.verify(mode)?;
        println!(
            "{mode:>18}: |dL_AR/dC_v| {:.2e}  |dL_AR/dh_v| {:.2e}  |dL_AR/dq| {}  |dL_rec/dC_p| {}",
            r.ar_to_visual_codebook,
            r.ar_to_visual_states,
            r.ar_to_queries.map(|v| format!("{v:.2e}")).unwrap_or_else(|| "-".into()),
            r.recon_to_prologue_codebook.map(|v| format!("{v:.2e}")).unwrap_or_else(|| "-".into()),
        );
    }
    Ok(())
}
