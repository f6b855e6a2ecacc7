//! Config presets, TOML round trip, dotted overrides and run naming.

use prologue::config::{Mode, RunConfig};

fn main() -> prologue::Result<()> {
    let cfg = RunConfig::desk(Mode::Prologue);
    let text = cfg.to_toml();
    println!("{}", text.lines().take(12).collect::<Vec<_>>().join("\n"));
    assert_eq!(RunConfig::from_toml(&text)?, cfg);

    let tuned = cfg.with_overrides(&["lambda=6", "tokenizer.tau=1.0", "p_drop=1.0"])?;
    println!("run dirs: {} and {}", cfg.run_name(), tuned.run_name());

    match cfg.with_overrides(&["tokenizer.tua=1.0"]) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("unknown keys are errors"),
    }

    let base = cfg.with_mode(Mode::Baseline2d);
    println!("baseline_2d: K = {}, lambda = {}", base.tokenizer.prologue_tokens, base.lambda);
    Ok(())
}
