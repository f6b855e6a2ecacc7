//! Command-line driver: one subcommand per experiment.
//!
//! Every training command writes to `<run root>/<hash12>-<mode>/`:
//! `config.toml`, `metrics.csv` (`step,metric,value`, metric names prefixed
//! by stage), one checkpoint per stage and a `DONE` marker once all stages
//! finished. The run root is `--run-root`, else `$PROLOGUE_RUN_ROOT`, else
//! `./runs`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig};
use crate::diagnostics::{
    attention_maps, collapse_oracle, info_empirical, info_exact, linear_probe, sample_quality, token_features, DiscreteJoint,
    ProbeBudget, ProbeSource,
};
use crate::error::{Error, Result};
use crate::metrics::MetricLog;
use crate::pipeline::{
    ablation_grid, load_ar, load_data, load_frontend, run_dir, sweep_config, train_onestage, train_prologue_post,
    train_stage1, train_stage2, SweepCell, TrainOptions, TrainOutcome,
};
use crate::plot::{build_figure, image_grid, PlotKind};
use crate::sampling::{decode_samples, generate, write_manifest, CfgConfig, Sample};

pub const RUN_ROOT_ENV: &str = "PROLOGUE_RUN_ROOT";
const DONE: &str = "DONE";

#[derive(Debug, Parser)]
#[command(name = "prologue", version, about = "Dual-group image tokenizer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML config file. Without it the desk defaults of `--mode` are used.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Training mode, e.g. prologue, baseline_2d, 2d_arreg.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Built-in defaults used without `--config`: desk, quick or tiny.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Re-run even if the run directory is complete.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
    /// Dotted-path override, e.g. `--set tokenizer.tau=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct CkptArgs {
    /// Checkpoint to use instead of the configured run's latest one.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GuidanceArgs {
    /// Guidance preset: prologue, post, large or unguided.
    #[arg(long)]
    pub guidance: Option<String>,
    #[arg(long)]
    pub s_pro: Option<f64>,
    #[arg(long)]
    pub s_vis: Option<f64>,
    #[arg(long)]
    pub cos_p: Option<f64>,
    /// Sampling temperature for both token groups.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and cache the synthetic shapes dataset.
    SynthData {
        #[command(flatten)]
        run: RunArgs,
        /// Cache file; defaults to `<run root>/data/<name>.bin`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a tokenizer and AR prior.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// `1`, `2` or `all`.
        #[arg(long, default_value = "all")]
        stage: String,
        /// Frozen baseline_2d stage-1 checkpoint for prologue_post.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Draw class-conditional samples.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
        #[command(flatten)]
        guidance: GuidanceArgs,
        /// Comma-separated class ids; all classes when omitted.
        #[arg(long)]
        classes: Option<String>,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        /// Sample one prologue per class and resample only the visual tokens.
        #[arg(long)]
        fix_prologue: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage-1 runs over a grid of AR loss weights.
    SweepLambda {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "0.03,0.3,1,3,6")]
        grid: String,
        #[arg(long, default_value = "prologue,2d_arreg")]
        arms: String,
    },
    /// Sample quality over a grid of visual guidance scales.
    SweepCfg {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long, default_value = "1,1.5,2.25,3,3.75,4.5")]
        grid: String,
        /// Cosine schedule exponents, one curve each.
        #[arg(long, default_value = "0.2,1")]
        cos_ps: String,
        #[arg(long, default_value_t = 4)]
        per_class: usize,
    },
    /// Linear probes on prologue and first-K visual token features.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
        /// prologue, first_k_visual or both.
        #[arg(long, default_value = "both")]
        source: String,
        /// Tokens per sample; defaults to the configured prologue length.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Attention maps of the AR model on held-out data.
    Attn {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
        /// Comma-separated 0-based layers; all when omitted.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Exact information report for a joint table, or empirical estimates
    /// from a checkpoint.
    Info {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        ckpt: CkptArgs,
        /// JSON file `{"rows": A, "cols": B, "pmf": [...], "visual_shape": [...]}`.
        #[arg(long)]
        joint: Option<PathBuf>,
    },
    /// Stage-1 runs over the ablation axes.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Only rows whose label contains one of these comma-separated strings.
        #[arg(long)]
        rows: Option<String>,
    },
    /// Render a figure from CSV files.
    Plot {
        /// sweep, curves or cfg-tradeoff.
        #[arg(long)]
        kind: String,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Metric names for curves plots. Repeatable.
        #[arg(long = "metric")]
        metrics: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses the process arguments, runs the command and maps errors to exit
/// codes: 2 for validation failures, 1 for runtime failures.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        1
    }
}

/// Base config from `--config` / `--mode`, then overrides and `--seed`.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    if args.device != "cpu" {
        return Err(Error::Config(format!("device {:?} is not available; this build runs on cpu", args.device)));
    }
    let mode = args.mode.as_deref().map(Mode::parse).transpose()?;
    let mut cfg = match &args.config {
        Some(path) => {
            let c = RunConfig::load(path)?;
            match mode {
                Some(m) => c.with_mode(m),
                None => c,
            }
        }
        None => RunConfig::preset(&args.preset, mode.unwrap_or(Mode::Prologue))?,
    };
    cfg = cfg.with_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData { run, out } => synth_data(&resolve_config(&run)?, &run.run_root, out),
        Command::Train { run, stage, from } => {
            let stages = Stages::parse(&stage)?;
            let cfg = resolve_config(&run)?;
            let dir = train_run(&cfg, &run.run_root, run.force, stages, from.as_deref())?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Sample { run, ckpt, guidance, classes, per_class, base_seed, fix_prologue, out } => {
            let cfg = resolve_config(&run)?;
            let (path, ck) = open_checkpoint(&cfg, &run.run_root, &ckpt)?;
            let guide = guidance.resolve(ck.config.mode)?;
            let classes = match classes {
                Some(s) => parse_list::<u32>(&s, "classes")?,
                None => (0..ck.config.data.num_classes as u32).collect(),
            };
            let out = out.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("samples"));
            let samples = sample_command(&ck, &classes, per_class, base_seed, &guide, fix_prologue, &out)?;
            println!("{} samples written to {}", samples.len(), out.display());
            Ok(())
        }
        Command::SweepLambda { run, grid, arms } => {
            let base = resolve_config(&run)?;
            let lambdas = parse_list::<f64>(&grid, "grid")?;
            let arms = arms.split(',').map(Mode::parse).collect::<Result<Vec<_>>>()?;
            let csv = sweep_lambda(&base, &run.run_root, run.force, &lambdas, &arms)?;
            println!("{}", csv.display());
            Ok(())
        }
        Command::SweepCfg { run, ckpt, guidance, grid, cos_ps, per_class } => {
            let cfg = resolve_config(&run)?;
            let (path, ck) = open_checkpoint(&cfg, &run.run_root, &ckpt)?;
            let base = guidance.resolve(ck.config.mode)?;
            let scales = parse_list::<f64>(&grid, "grid")?;
            let exps = parse_list::<f64>(&cos_ps, "cos_ps")?;
            let dir = path.parent().unwrap_or(Path::new(".")).join("cfg_sweep");
            let csv = sweep_cfg(&ck, &base, &scales, &exps, per_class, &dir)?;
            println!("{}", csv.display());
            Ok(())
        }
        Command::Probe { run, ckpt, source, k } => {
            let cfg = resolve_config(&run)?;
            let (path, ck) = open_checkpoint(&cfg, &run.run_root, &ckpt)?;
            let sources = match source.as_str() {
                "both" => vec![ProbeSource::Prologue, ProbeSource::FirstKVisual],
                s => vec![s.parse()?],
            };
            let k = k.unwrap_or_else(|| default_probe_k(&ck.config));
            let record = probe_command(&ck, &sources, k)?;
            let out = path.parent().unwrap_or(Path::new(".")).join("probe.json");
            std::fs::write(&out, serde_json::to_string_pretty(&record)?)?;
            println!("{}", serde_json::to_string_pretty(&record)?);
            Ok(())
        }
        Command::Attn { run, ckpt, layers, samples } => {
            let cfg = resolve_config(&run)?;
            let (path, ck) = open_checkpoint(&cfg, &run.run_root, &ckpt)?;
            let layers = match layers {
                Some(s) => parse_list::<usize>(&s, "layers")?,
                None => Vec::new(),
            };
            let frontend = load_frontend(&ck)?;
            let ar = load_ar(&ck, &frontend)?;
            let (_, holdout) = load_data(&ck.config)?;
            let cache = frontend.cache(&holdout)?;
            let idx: Vec<usize> = (0..cache.len().min(samples)).collect();
            let report = attention_maps(&ar, &cache.sequence(&idx), &layers)?;
            let dir = path.parent().unwrap_or(Path::new(".")).join("attention");
            report.save(&dir)?;
            println!(
                "prologue attention mass {:.4} (uniform {:.4}, causal uniform {:.4}); maps in {}",
                report.prologue_mass(),
                report.uniform_baseline,
                report.causal_uniform_baseline,
                dir.display()
            );
            Ok(())
        }
        Command::Info { run, ckpt, joint } => match joint {
            Some(path) => {
                let q = read_joint(&path)?;
                let record = serde_json::json!({ "info": info_exact(&q), "collapse": collapse_oracle(&q)? });
                println!("{}", serde_json::to_string_pretty(&record)?);
                Ok(())
            }
            None => {
                let cfg = resolve_config(&run)?;
                let (path, ck) = open_checkpoint(&cfg, &run.run_root, &ckpt)?;
                let frontend = load_frontend(&ck)?;
                let ar = load_ar(&ck, &frontend)?;
                let (_, holdout) = load_data(&ck.config)?;
                let report = info_empirical(&ar, &frontend.cache(&holdout)?)?;
                let record = serde_json::json!({ "config_hash": ck.config_hash, "checkpoint": ck.kind, "report": report });
                std::fs::write(path.parent().unwrap_or(Path::new(".")).join("info.json"), serde_json::to_string_pretty(&record)?)?;
                println!("{}", serde_json::to_string_pretty(&record)?);
                Ok(())
            }
        },
        Command::Ablate { run, rows } => {
            let base = resolve_config(&run)?;
            let filter: Vec<String> = rows.map(|s| s.split(',').map(|t| t.trim().to_string()).collect()).unwrap_or_default();
            let csv = ablate(&base, &run.run_root, run.force, &filter)?;
            println!("{}", csv.display());
            Ok(())
        }
        Command::Plot { kind, inputs, metrics, out } => {
            let fig = build_figure(PlotKind::parse(&kind)?, &inputs, &metrics)?;
            let (png, json) = fig.save(&out)?;
            println!("{} {}", png.display(), json.display());
            Ok(())
        }
    }
}

impl GuidanceArgs {
    pub fn resolve(&self, mode: Mode) -> Result<CfgConfig> {
        let preset = self.guidance.as_deref().unwrap_or(match mode {
            Mode::ProloguePost => "post",
            _ => "prologue",
        });
        let mut c = match preset {
            "prologue" => CfgConfig::prologue(),
            "post" => CfgConfig::post(),
            "large" => CfgConfig::large(),
            "unguided" => CfgConfig::unguided(1.0),
            other => return Err(Error::Config(format!("unknown guidance preset {other:?}"))),
        };
        if let Some(v) = self.s_pro {
            c.s_pro = v;
        }
        if let Some(v) = self.s_vis {
            c.s_vis = v;
        }
        if let Some(v) = self.cos_p {
            c.cos_p = v;
        }
        if let Some(t) = self.temperature {
            c.t_pro = t;
            c.t_vis = t;
        }
        if self.top_k.is_some() {
            c.top_k = self.top_k;
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|_| Error::Config(format!("{what}: cannot parse {t:?}"))))
        .collect()
}

/// Which stages `train` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stages {
    One,
    Two,
    All,
}

impl Stages {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("--stage must be 1, 2 or all, got {other:?}"))),
        }
    }
}

/// Latest checkpoint in a run directory.
pub fn final_checkpoint(dir: &Path) -> Option<PathBuf> {
    ["stage2.ckpt", "onestage.ckpt", "post.ckpt", "stage1.ckpt"].iter().map(|f| dir.join(f)).find(|p| p.exists())
}

fn open_checkpoint(cfg: &RunConfig, root: &Path, args: &CkptArgs) -> Result<(PathBuf, Checkpoint)> {
    let path = match &args.ckpt {
        Some(p) => p.clone(),
        None => {
            let dir = run_dir(root, cfg);
            final_checkpoint(&dir).ok_or_else(|| {
                Error::InvalidInput(format!("no checkpoint in {}; run `train` with the same config first", dir.display()))
            })?
        }
    };
    let ck = Checkpoint::load(&path)?;
    Ok((path, ck))
}

fn append_history(dir: &Path, kind: &str, history: &MetricLog) -> Result<()> {
    let mut prefixed = MetricLog::default();
    for r in &history.records {
        prefixed.push(r.step, &format!("{kind}/{}", r.metric), r.value);
    }
    prefixed.append_csv(&dir.join("metrics.csv"))
}

fn save_outcome(dir: &Path, out: &TrainOutcome) -> Result<PathBuf> {
    let path = dir.join(format!("{}.ckpt", out.checkpoint.kind));
    out.checkpoint.save(&path)?;
    append_history(dir, &out.checkpoint.kind, out.history())?;
    if let Some(r) = &out.routing {
        std::fs::write(dir.join(format!("routing_{}.json", out.checkpoint.kind)), serde_json::to_string_pretty(r)?)?;
    }
    Ok(path)
}

/// Loads `<dir>/<kind>.ckpt` unless forced, otherwise trains it.
fn stage_checkpoint(
    dir: &Path,
    kind: &str,
    force: bool,
    train: impl FnOnce() -> Result<TrainOutcome>,
) -> Result<Checkpoint> {
    let path = dir.join(format!("{kind}.ckpt"));
    if path.exists() && !force {
        log::info!("reusing {}", path.display());
        return Checkpoint::load(&path);
    }
    let out = train()?;
    save_outcome(dir, &out)?;
    Ok(out.checkpoint)
}

/// Trains the configured run into its run directory and returns the
/// directory. Completed runs are skipped unless `force`.
pub fn train_run(cfg: &RunConfig, root: &Path, force: bool, stages: Stages, from: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = run_dir(root, cfg);
    if dir.join(DONE).exists() && !force {
        log::info!("{} is complete; pass --force to re-run", dir.display());
        return Ok(dir);
    }
    std::fs::create_dir_all(&dir)?;
    if force {
        let _ = std::fs::remove_file(dir.join("metrics.csv"));
    }
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let (train, holdout) = load_data(cfg)?;
    let opts = TrainOptions { dump_dir: Some(dir.clone()), ..Default::default() };

    let first = match cfg.mode {
        Mode::PrologueOnestage => {
            stage_checkpoint(&dir, "onestage", force, || train_onestage(cfg, &train, &holdout, &opts))?;
            std::fs::write(dir.join(DONE), "onestage\n")?;
            return Ok(dir);
        }
        Mode::ProloguePost => {
            let frozen = match from {
                Some(p) => Checkpoint::load(p)?,
                None => {
                    let base = cfg.with_mode(Mode::Baseline2d);
                    let base_dir = train_run(&base, root, false, Stages::One, None)?;
                    Checkpoint::load(&base_dir.join("stage1.ckpt"))?
                }
            };
            stage_checkpoint(&dir, "post", force, || train_prologue_post(&frozen, cfg, &train, &holdout, &opts))?
        }
        _ => {
            if stages == Stages::Two && !dir.join("stage1.ckpt").exists() {
                return Err(Error::InvalidInput(format!("--stage 2 needs {}", dir.join("stage1.ckpt").display())));
            }
            stage_checkpoint(&dir, "stage1", force && stages != Stages::Two, || train_stage1(cfg, &train, &holdout, &opts))?
        }
    };
    if stages == Stages::One {
        return Ok(dir);
    }
    stage_checkpoint(&dir, "stage2", force, || train_stage2(&first, cfg, &train, &holdout, &opts))?;
    std::fs::write(dir.join(DONE), "stage2\n")?;
    Ok(dir)
}

pub fn synth_data(cfg: &RunConfig, root: &Path, out: Option<PathBuf>) -> Result<()> {
    let d = &cfg.data;
    if cfg.data_path().is_some() {
        return Err(Error::Config("synth-data needs data.source = \"synth\"".into()));
    }
    let ds = crate::data::synth_shapes(cfg.seed, d.num_classes, d.samples_per_class, d.image_size)?;
    let out = out.unwrap_or_else(|| {
        root.join("data").join(format!("synth-s{}-c{}x{}-{}px.bin", cfg.seed, d.num_classes, d.samples_per_class, d.image_size))
    });
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    ds.save_cache(&out)?;
    let cols = d.samples_per_class.min(8);
    let idx: Vec<usize> = (0..d.num_classes).flat_map(|c| (0..cols).map(move |i| c * d.samples_per_class + i)).collect();
    let preview = ds.batch(&idx, &Device::Cpu)?;
    // synth_shapes stores images grouped by class.
    image_grid(&preview.pixels, d.num_classes, cols)?.save(out.with_extension("png"))?;
    println!("{} images written to {}", ds.len(), out.display());
    Ok(())
}

/// Class-conditional samples written as `samples.png` (one row per class)
/// and `samples.jsonl` under `out`.
pub fn sample_command(
    ck: &Checkpoint,
    classes: &[u32],
    per_class: usize,
    base_seed: u64,
    guide: &CfgConfig,
    fix_prologue: bool,
    out: &Path,
) -> Result<Vec<Sample>> {
    if classes.is_empty() || per_class == 0 {
        return Err(Error::InvalidInput("need at least one class and one sample per class".into()));
    }
    let frontend = load_frontend(ck)?;
    let ar = load_ar(ck, &frontend)?;
    let mut samples = Vec::new();
    for (row, &c) in classes.iter().enumerate() {
        let seeds: Vec<u64> = (0..per_class as u64).map(|i| base_seed + (row * per_class) as u64 + i).collect();
        let class_ids = vec![c; per_class];
        let fixed = if fix_prologue {
            if ar.prologue_tokens() == 0 {
                return Err(Error::InvalidInput("--fix-prologue needs a model with prologue tokens".into()));
            }
            let anchor = generate(&ar, &[c], &[base_seed.wrapping_add(1_000_000 + row as u64)], guide, None)?;
            Some(anchor[0].zp.clone())
        } else {
            None
        };
        samples.extend(generate(&ar, &class_ids, &seeds, guide, fixed.as_deref())?);
    }
    std::fs::create_dir_all(out)?;
    let images = decode_samples(&frontend.tokenizer, &samples)?;
    image_grid(&images, classes.len(), per_class)?.save(out.join("samples.png"))?;
    write_manifest(&out.join("samples.jsonl"), &samples)?;
    Ok(samples)
}

/// Runs (or reuses) one Stage-1 run per `(arm, lambda)` and writes
/// `sweep.csv` plus `sweep.png` under `<root>/sweep-lambda-<hash12>/`.
pub fn sweep_lambda(base: &RunConfig, root: &Path, force: bool, lambdas: &[f64], arms: &[Mode]) -> Result<PathBuf> {
    if lambdas.is_empty() || arms.is_empty() {
        return Err(Error::Config("sweep needs at least one lambda and one arm".into()));
    }
    let mut cells = Vec::new();
    for &arm in arms {
        if !matches!(arm, Mode::Prologue | Mode::Baseline2dArreg | Mode::Baseline1dArreg) {
            return Err(Error::Config(format!("lambda sweep arm {arm} is not one of prologue, 2d_arreg, 1d_arreg")));
        }
        for &lambda in lambdas {
            let cfg = sweep_config(base, arm, lambda);
            let dir = train_run(&cfg, root, force, Stages::One, None)?;
            let ck = Checkpoint::load(&dir.join("stage1.ckpt"))?;
            let cell = SweepCell::from_history(&cfg, &ck.history);
            log::info!("{arm} lambda {lambda}: recon {:.4} ce_v {:.4}", cell.recon_l1, cell.ce_visual);
            cells.push(cell);
        }
    }
    let out = root.join(format!("sweep-lambda-{}", &base.hash()[..12]));
    std::fs::create_dir_all(&out)?;
    let csv_path = out.join("sweep.csv");
    write_rows(&csv_path, &cells)?;
    build_figure(PlotKind::Sweep, &[csv_path.clone()], &[])?.save(&out.join("sweep.png"))?;
    Ok(csv_path)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CfgCell {
    pub s_vis: f64,
    pub variant: String,
    pub fidelity: f64,
    pub consistency: f64,
}

/// Sample quality per `(cos_p, s_vis)`; writes `cfg_sweep.csv` and
/// `cfg_sweep.png` to `dir`. Seeds are shared across cells.
pub fn sweep_cfg(ck: &Checkpoint, base: &CfgConfig, scales: &[f64], exps: &[f64], per_class: usize, dir: &Path) -> Result<PathBuf> {
    let frontend = load_frontend(ck)?;
    let ar = load_ar(ck, &frontend)?;
    let (train, _) = load_data(&ck.config)?;
    let classes: Vec<u32> = (0..ck.config.data.num_classes as u32).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let seeds: Vec<u64> = (0..classes.len() as u64).collect();
    let mut cells = Vec::new();
    for &p in exps {
        for &s in scales {
            let guide = CfgConfig { s_vis: s, cos_p: p, ..*base };
            let mut samples = Vec::new();
            for (c, sd) in classes.chunks(32).zip(seeds.chunks(32)) {
                samples.extend(generate(&ar, c, sd, &guide, None)?);
            }
            let images = crate::nn::to_f64_vec(&decode_samples(&frontend.tokenizer, &samples)?)?;
            let images: Vec<f32> = images.into_iter().map(|v| v as f32).collect();
            let q = sample_quality(&images, &classes, &train, &ProbeBudget::default())?;
            log::info!("cos_p {p} s_vis {s}: fidelity {:.4} consistency {:.3}", q.fidelity, q.consistency);
            cells.push(CfgCell { s_vis: s, variant: format!("p={p}"), fidelity: q.fidelity, consistency: q.consistency });
        }
    }
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("cfg_sweep.csv");
    write_rows(&csv_path, &cells)?;
    build_figure(PlotKind::CfgTradeoff, &[csv_path.clone()], &[])?.save(&dir.join("cfg_sweep.png"))?;
    Ok(csv_path)
}

fn default_probe_k(cfg: &RunConfig) -> usize {
    if cfg.tokenizer.prologue_tokens > 0 {
        cfg.tokenizer.prologue_tokens
    } else {
        RunConfig::desk(Mode::Prologue).tokenizer.prologue_tokens
    }
}

/// Probe results keyed by the checkpoint's config hash.
pub fn probe_command(ck: &Checkpoint, sources: &[ProbeSource], k: usize) -> Result<serde_json::Value> {
    let frontend = load_frontend(ck)?;
    let (train, holdout) = load_data(&ck.config)?;
    let (tc, hc) = (frontend.cache(&train)?, frontend.cache(&holdout)?);
    let mut results = Vec::new();
    for &source in sources {
        let k = if source == ProbeSource::Prologue { frontend.prologue_tokens().min(k) } else { k };
        let xs = token_features(&frontend, &tc, source, k)?;
        let xt = token_features(&frontend, &hc, source, k)?;
        let r = linear_probe(source, (&xs, &tc.labels), (&xt, &hc.labels), ck.config.data.num_classes, &ProbeBudget::default())?;
        results.push(r);
    }
    Ok(serde_json::json!({ "config_hash": ck.config_hash, "checkpoint": ck.kind, "k": k, "results": results }))
}

#[derive(serde::Deserialize)]
struct JointFile {
    rows: usize,
    cols: usize,
    pmf: Vec<f64>,
    #[serde(default)]
    visual_shape: Option<Vec<usize>>,
}

pub fn read_joint(path: &Path) -> Result<DiscreteJoint> {
    let f: JointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let q = DiscreteJoint::new(f.pmf, f.rows, f.cols)?;
    match f.visual_shape {
        Some(s) => q.with_visual_shape(&s),
        None => Ok(q),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub row: String,
    pub mode: String,
    pub config_hash: String,
    pub recon_l1: f64,
    pub ce_visual: f64,
    pub ce_total: f64,
    pub perplexity_p: f64,
}

/// Stage-1 (or post) run per ablation row; writes `ablation.csv` under
/// `<root>/ablate-<hash12>/`.
pub fn ablate(base: &RunConfig, root: &Path, force: bool, filter: &[String]) -> Result<PathBuf> {
    let mut rows = Vec::new();
    for (label, cfg) in ablation_grid(base) {
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        cfg.validate()?;
        let (dir, kind) = match cfg.mode {
            Mode::PrologueOnestage => (train_run(&cfg, root, force, Stages::All, None)?, "onestage"),
            Mode::ProloguePost => (train_run(&cfg, root, force, Stages::One, None)?, "post"),
            _ => (train_run(&cfg, root, force, Stages::One, None)?, "stage1"),
        };
        let ck = Checkpoint::load(&dir.join(format!("{kind}.ckpt")))?;
        let h = &ck.history;
        let get = |m: &str| h.last(m).unwrap_or(f64::NAN);
        log::info!("ablation {label}: recon {:.4} ce_v {:.4}", get("eval/recon_l1"), get("eval/ce_visual"));
        rows.push(AblationRow {
            row: label,
            mode: cfg.mode.to_string(),
            config_hash: cfg.hash(),
            recon_l1: get("eval/recon_l1"),
            ce_visual: get("eval/ce_visual"),
            ce_total: get("eval/ce_total"),
            perplexity_p: get("eval/perplexity_p"),
        });
    }
    if rows.is_empty() {
        return Err(Error::Config("no ablation rows match the filter".into()));
    }
    let out = root.join(format!("ablate-{}", &base.hash()[..12]));
    std::fs::create_dir_all(&out)?;
    let path = out.join("ablation.csv");
    write_rows(&path, &rows)?;
    Ok(path)
}
