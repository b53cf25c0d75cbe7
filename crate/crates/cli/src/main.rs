use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use reid_core::camstyle::assemble_full_training_set;
use reid_core::camstyle::builtin_translator;
use reid_core::datamodel::{load_dataset, save_dataset};
use reid_core::pipeline::checkpoint::Checkpoint;
use reid_core::pipeline::config::{Stage, TrainConfig};
use reid_core::pipeline::toydata::{make_toy_data, write_toy_data, ToyDataSpec};
use reid_core::pipeline::train::{evaluate_checkpoint, finetune, pretrain};

#[derive(Parser, Debug)]
#[command(name = "reid", version, about = "Domain-adaptive person re-identification on desk-scale data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Toy,
    Full,
}

#[derive(Args, Debug)]
struct Common {
    /// Key-per-line TOML config; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn train_config(&self, stage: Stage) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => match self.preset {
                Preset::Toy => TrainConfig::toy(stage),
                Preset::Full => TrainConfig::full(stage),
            },
        };
        if cfg.stage != stage {
            bail!("config is for stage {}, command needs {stage}", cfg.stage);
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic source and target datasets.
    MakeToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        num_ids_source: usize,
        #[arg(long, default_value_t = 30)]
        num_ids_target: usize,
        #[arg(long, default_value_t = 4)]
        cams: usize,
        #[arg(long, default_value_t = 3)]
        images_per_id_cam: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
    /// Add camera-style copies of every source image for each other camera.
    Assemble {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training on an assembled source manifest.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
    },
    /// Mean-teacher adaptation on the target train split.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Print a preset config as TOML.
    Config {
        #[arg(long, default_value = "pretrain")]
        stage: Stage,
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
    },
    /// Query/gallery retrieval metrics; writes `<out>/metrics.json`.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn save_final(ck: &Checkpoint, out: &Path, stage: Stage) -> Result<PathBuf> {
    let path = out.join(format!("{stage}.ckpt"));
    ck.save(&path)?;
    ck.config.save(&out.join(format!("{stage}_config.toml")))?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToyData {
            out,
            seed,
            num_ids_source,
            num_ids_target,
            cams,
            images_per_id_cam,
            height,
            width,
        } => {
            let spec = ToyDataSpec {
                num_ids_source,
                num_ids_target,
                cams,
                images_per_id_cam,
                size: (height, width),
                seed,
            };
            let data = make_toy_data(&spec)?;
            let (src, tgt) = write_toy_data(&out, &data)?;
            println!("source: {} images -> {}", data.source.len(), src.display());
            println!("target: {} images -> {}", data.target.len(), tgt.display());
        }
        Command::Assemble { source, out } => {
            let records = load_dataset(&source)?;
            let cams = records.iter().map(|r| r.camera_id + 1).max().context("empty source manifest")?;
            let assembled = assemble_full_training_set(&records, cams, &builtin_translator)?;
            let manifest = save_dataset(&out, &assembled)?;
            println!("assembled {} -> {} images -> {}", records.len(), assembled.len(), manifest.display());
        }
        Command::Pretrain { common, source } => {
            let cfg = common.train_config(Stage::Pretrain)?;
            let records = load_dataset(&source)?;
            let result = pretrain(&cfg, &records, Some(&common.out))?;
            let path = save_final(&result.checkpoint, &common.out, Stage::Pretrain)?;
            let last = result.losses.last().map_or(f64::NAN, |l| l.total);
            println!("pretrain: {} epochs, final loss {last:.4} -> {}", cfg.epochs, path.display());
        }
        Command::Finetune { common, checkpoint, target } => {
            let cfg = common.train_config(Stage::Finetune)?;
            let pretrained = Checkpoint::load(&checkpoint)?;
            let records = load_dataset(&target)?;
            let result = finetune(&cfg, &pretrained, &records, Some(&common.out))?;
            let path = save_final(&result.checkpoint, &common.out, Stage::Finetune)?;
            let last = result.losses.last().map_or(f64::NAN, |l| l.total);
            println!("finetune: {} epochs, final loss {last:.4} -> {}", cfg.epochs, path.display());
        }
        Command::Config { stage, preset } => {
            let cfg = match preset {
                Preset::Toy => TrainConfig::toy(stage),
                Preset::Full => TrainConfig::full(stage),
            };
            print!("{}", cfg.to_toml()?);
        }
        Command::Evaluate { checkpoint, target, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let records = load_dataset(&target)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let metrics = out.join("metrics.json");
            let r = evaluate_checkpoint(&ck, &records, Some(&metrics))?;
            println!(
                "mAP {:.4}  rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  ({} queries) -> {}",
                r.map,
                r.rank(1),
                r.rank(5),
                r.rank(10),
                r.num_valid_queries,
                metrics.display()
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
