use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vitmil::config::{Preset, RunConfig};
use vitmil::eval::OutlierMode;
use vitmil::io::Split;
use vitmil::pipeline::{self, RunRecord};
use vitmil::Error;

#[derive(Parser, Debug)]
#[command(name = "vitmil", version, about = "Slide classification and tumour localisation from tile embeddings")]
struct Cli {
    /// Base settings before --config and flag overrides.
    #[arg(long, global = true, default_value = "desk", value_parser = parse_preset)]
    preset: Preset,

    /// JSON file deep-merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cap on worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Print the effective configuration and exit.
    #[arg(long)]
    show_config: bool,

    /// Debug logging.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic slide corpus with labels and a train/test split.
    Synth(SynthArgs),
    /// Cut slides into tissue tiles.
    Tile(TileArgs),
    /// Self-distillation pre-training of the ViT on tiles.
    Pretrain(PretrainArgs),
    /// Tile feature vectors from a pre-trained checkpoint.
    Embed(EmbedArgs),
    /// Train the dual-stream aggregator on bag embeddings.
    TrainMil(TrainMilArgs),
    /// Slide-level accuracy, ROC and AUC.
    Eval(EvalArgs),
    /// Attention heatmap and overlay for one slide.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    n_slides: Option<usize>,
    /// Grid as ROWSxCOLS, e.g. 8x8.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(u32, u32)>,
    #[arg(long)]
    positive_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TileArgs {
    #[arg(long)]
    slides: PathBuf,
    #[arg(long)]
    patch_size: Option<u32>,
    #[arg(long)]
    min_foreground: Option<f64>,
    /// Stain-normalise tiles (true/false).
    #[arg(long)]
    normalize: Option<bool>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    tiles: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Restrict training to one split of this labels file.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    tiles: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    k_last: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainMilArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// train, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    model: PathBuf,
    /// Slide PNG; its file stem is the slide id.
    #[arg(long)]
    slide: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    z_cap: Option<f64>,
    /// clamp or zero.
    #[arg(long, value_parser = parse_outlier_mode)]
    outlier_mode: Option<OutlierMode>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_grid(s: &str) -> Result<(u32, u32), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or("expected ROWSxCOLS")?;
    Ok((
        r.trim().parse().map_err(|e| format!("rows: {e}"))?,
        c.trim().parse().map_err(|e| format!("cols: {e}"))?,
    ))
}

fn parse_outlier_mode(s: &str) -> Result<OutlierMode, String> {
    match s {
        "clamp" => Ok(OutlierMode::Clamp),
        "zero" => Ok(OutlierMode::Zero),
        _ => Err("expected clamp or zero".into()),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) => 2,
        Error::Io(_) | Error::Image(_) => 3,
        Error::Numerical { .. } => 5,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> vitmil::Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(cli.preset, cli.config.as_deref())?;
    if let Some(cmd) = &cli.command {
        apply_overrides(&mut cfg, cmd);
        cfg.validate()?;
    }
    if cli.show_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let Some(cmd) = cli.command else {
        return Err(Error::Usage("no command given (try --help)".into()));
    };
    let hash = cfg.hash();
    match cmd {
        Command::Synth(a) => {
            let m = pipeline::synth_corpus(&cfg.synth, a.seed, &a.out)?;
            let pos = m.slides.iter().filter(|s| s.label == 1).count();
            log::info!("{} slides ({pos} positive) in {}", m.slides.len(), a.out.display());
            RunRecord::new("synth", Some(a.seed), hash).write(&a.out, outputs(&["manifest.json", "labels.csv"]))
        }
        Command::Tile(a) => {
            let ms = pipeline::tile_corpus(&a.slides, &cfg.tile, &a.out)?;
            let n: usize = ms.iter().map(|m| m.tiles.len()).sum();
            log::info!("{n} tiles from {} slides", ms.len());
            let mut outs: Vec<String> = ms.iter().map(|m| format!("{}/manifest.json", m.slide_id)).collect();
            if cfg.tile.normalize {
                outs.push("stain_reference.json".into());
            }
            RunRecord::new("tile", None, hash).input("slides", &a.slides).write(&a.out, outs)
        }
        Command::Pretrain(a) => {
            let subset = a
                .labels
                .as_deref()
                .map(|l| pipeline::split_ids(l, a.split))
                .transpose()?;
            let s = pipeline::pretrain_stage(&a.tiles, &cfg, a.seed, subset.as_ref(), &a.out)?;
            if let Some(last) = s.trace.last() {
                log::info!(
                    "{} steps on {} tiles, final loss {:.4}, teacher entropy {:.4}",
                    s.trace.len(),
                    s.n_tiles,
                    last.loss,
                    last.teacher_entropy
                );
            }
            let mut rec = RunRecord::new("pretrain", Some(a.seed), hash).input("tiles", &a.tiles);
            if let Some(l) = &a.labels {
                rec = rec.input("labels", l);
            }
            rec.write(&a.out, outputs(&["teacher.ckpt", "loss.csv", "config.json"]))
        }
        Command::Embed(a) => {
            let n = pipeline::embed_stage(&a.tiles, &a.checkpoint, cfg.embed.k_last, &a.out)?;
            log::info!("embedded {n} slides");
            RunRecord::new("embed", None, hash)
                .input("tiles", &a.tiles)
                .input("checkpoint", &a.checkpoint)
                .write(&a.out, vec![format!("{n} slide embedding files")])
        }
        Command::TrainMil(a) => {
            let losses = pipeline::train_mil_stage(&a.embeddings, &a.labels, &cfg.mil, a.seed, &a.out)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                log::info!("aggregator loss {first:.4} -> {last:.4}");
            }
            RunRecord::new("train-mil", Some(a.seed), hash)
                .input("embeddings", &a.embeddings)
                .input("labels", &a.labels)
                .write(&a.out, outputs(&["mil.ckpt", "train_loss.csv", "config.json"]))
        }
        Command::Eval(a) => {
            let split = match a.split.as_str() {
                "all" => None,
                s => Some(s.parse::<Split>()?),
            };
            let r = pipeline::eval_stage(&a.model, &a.embeddings, &a.labels, split, &a.out)?;
            println!("{}", serde_json::to_string(&r.metrics)?);
            RunRecord::new("eval", None, hash)
                .input("model", &a.model)
                .input("embeddings", &a.embeddings)
                .input("labels", &a.labels)
                .write(&a.out, outputs(&["metrics.json", "roc.dat", "predictions.csv"]))
        }
        Command::Heatmap(a) => {
            let r = pipeline::heatmap_stage(&a.model, &a.slide, &a.embeddings, &cfg.eval, &a.out)?;
            let id = &r.heatmap.slide_id;
            log::info!("{id}: final score {:.4}", r.prediction.final_score);
            RunRecord::new("heatmap", None, hash)
                .input("model", &a.model)
                .input("slide", &a.slide)
                .input("embeddings", &a.embeddings)
                .write(&a.out, vec![r.overlay.clone(), format!("{id}_heatmap.json")])
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    match cmd {
        Command::Synth(a) => {
            if let Some(n) = a.n_slides {
                cfg.synth.n_slides = n;
            }
            if let Some((r, c)) = a.grid {
                cfg.synth.grid_rows = r;
                cfg.synth.grid_cols = c;
            }
            if let Some(f) = a.positive_fraction {
                cfg.synth.positive_fraction = f;
            }
        }
        Command::Tile(a) => {
            if let Some(p) = a.patch_size {
                cfg.tile.patch_size = p;
            }
            if let Some(f) = a.min_foreground {
                cfg.tile.min_foreground = f;
            }
            if let Some(n) = a.normalize {
                cfg.tile.normalize = n;
            }
        }
        Command::Pretrain(a) => {
            if let Some(e) = a.epochs {
                cfg.dino.epochs = e;
                cfg.dino.warmup_epochs = cfg.dino.warmup_epochs.min(e);
            }
        }
        Command::Embed(a) => {
            if let Some(k) = a.k_last {
                cfg.embed.k_last = k;
            }
        }
        Command::TrainMil(a) => {
            if let Some(e) = a.epochs {
                cfg.mil.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.mil.lr = lr;
            }
        }
        Command::Eval(_) => {}
        Command::Heatmap(a) => {
            if let Some(z) = a.z_cap {
                cfg.eval.z_cap = z;
            }
            if let Some(m) = a.outlier_mode {
                cfg.eval.outlier_mode = m;
            }
        }
    }
}

fn outputs(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}
