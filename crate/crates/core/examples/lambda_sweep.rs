//! Stage-1 runs over AR loss weights for the prologue and AR-regularized
//! arms, written as a CSV and a log-x plot.

use prologue::config::{Mode, RunConfig};
use prologue::pipeline::lambda_sweep;
use prologue::plot::{build_figure, PlotKind};

fn main() -> prologue::Result<()> {
    let base = RunConfig::tiny(Mode::Prologue);
    let cells = lambda_sweep(&base, &[0.03, 1.0, 6.0], &[Mode::Prologue, Mode::Baseline2dArreg], |cell, _| {
        println!("{:>18} lambda {:<5} recon {:.4} ce_visual {:.3}", cell.arm, cell.lambda, cell.recon_l1, cell.ce_visual);
        Ok(())
    })?;
    let dir = std::path::Path::new("target/examples/sweep");
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv).map_err(|e| prologue::Error::Format(e.to_string()))?;
    for c in &cells {
        w.serialize(c).map_err(|e| prologue::Error::Format(e.to_string()))?;
    }
    w.flush()?;
    let (png, _) = build_figure(PlotKind::Sweep, &[csv], &[])?.save(&dir.join("sweep.png"))?;
    println!("plot {}", png.display());
    Ok(())
}
