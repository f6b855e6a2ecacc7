//! Encodes a batch into prologue and visual tokens and decodes the visual
//! tokens back to pixels with an untrained tokenizer.

use candle_core::Device;
use prologue::config::{Mode, RunConfig};
use prologue::data::synth_shapes;
use prologue::pipeline::stream;
use prologue::quantization::codebook_stats;
use prologue::tokenizer::Tokenizer;

fn main() -> prologue::Result<()> {
    let cfg = RunConfig::quick(Mode::Prologue);
    let tok = Tokenizer::new(&cfg, &mut stream(cfg.seed, 1))?;
    println!(
        "{} prologue tokens (|C_p| = {}), {} visual tokens (|C_v| = {})",
        tok.prologue_tokens(),
        cfg.tokenizer.prologue_codebook,
        tok.visual_tokens(),
        cfg.tokenizer.visual_codebook
    );

    let ds = synth_shapes(0, 10, 4, cfg.data.image_size)?;
    let batch = ds.batch(&(0..8).collect::<Vec<_>>(), &Device::Cpu)?;
    let out = tok.forward(&batch.pixels)?;
    let zp = out.tokens.zp_rows();
    let zv = out.tokens.zv_rows();
    println!("image 0 prologue ids {:?}", zp[0]);
    println!("image 0 first visual ids {:?}", &zv[0][..16]);

    let (l1, commit, _) = out.loss.values()?;
    println!("recon l1 {l1:.4}, commitment {commit:.4}");

    // Decoding depends on visual ids only.
    let again = tok.decode(out.tokens.zv_ids())?;
    let diff = (again - &out.recon)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("decode(zv) vs forward reconstruction max diff {diff:e}");

    let stats = codebook_stats(out.tokens.zv_ids().iter().copied(), cfg.tokenizer.visual_codebook)?;
    let used = stats.usage.iter().filter(|&&u| u > 0.0).count();
    println!("visual codes used {used}/{}, perplexity {:.1}", cfg.tokenizer.visual_codebook, stats.perplexity);
    Ok(())
}
