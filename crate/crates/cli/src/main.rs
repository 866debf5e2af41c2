use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use priorfuse_core::degradation::{degrade, DegradationSpec};
use priorfuse_core::workbench::checkpoint;
use priorfuse_core::workbench::image_io::{read_image, write_image};
use priorfuse_core::workbench::restore::{evaluate_dirs, restore_files};
use priorfuse_core::workbench::{gen_data, load_dataset, train_dict, train_restorer, StageConfig};
use priorfuse_core::Rng;

#[derive(Parser)]
#[command(name = "priorfuse", version, about = "Codebook-prior face restoration at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration; built-in 32 px desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<StageConfig> {
        let mut cfg = match &self.config {
            Some(path) => StageConfig::load(path)?,
            None => StageConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render procedural faces and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: the configured data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of images (default: the configured num_images).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Stage 1: learn the codebook with its encoder and decoder.
    TrainDict {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (default: the configured data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default: the configured out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: train the restorer from a stage-1 checkpoint.
    TrainRestore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stage-1 checkpoint (default: the configured stage1_checkpoint).
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Restore image files with a stage-2 checkpoint.
    Restore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-head attention maps next to each output.
        #[arg(long)]
        dump_attention: bool,
        /// Bilinearly resize inputs that do not match the configured size.
        #[arg(long)]
        resize: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// PSNR, SSIM and IDD of predictions against references, plus FFD.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Per-image CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Degrade one image with an explicit or sampled spec.
    Degrade {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `sigma=..,r=..,delta=..,q=..,seed=..`; sampled from the configured
        /// ranges with the seed when omitted.
        #[arg(long)]
        spec: Option<DegradationSpec>,
    },
}

fn images_from(dir: &Path) -> Result<Vec<priorfuse_core::Tensor>> {
    let data = load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
    eprintln!("{} images from {}", data.len(), dir.display());
    Ok(data.into_iter().map(|(_, img)| img).collect())
}

/// Logs `lr` and `total` (the second and third columns) twenty times a run.
fn progress(iters: usize) -> impl FnMut(usize, &[f64]) {
    let every = (iters / 20).max(1);
    move |iter, row| {
        if iter % every == 0 {
            eprintln!("iter {iter:>7}  lr={:.2e} total={:.5}", row[1], row[2]);
        }
    }
}

fn write_run(out: &Path, stem: &str, store: &priorfuse_core::ParamStore, csv: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let ckpt = out.join(format!("{stem}.ckpt"));
    checkpoint::save(&ckpt, store)?;
    let log = out.join(format!("{stem}_loss.csv"));
    std::fs::write(&log, csv)?;
    println!("{}\n{}", ckpt.display(), log.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out, n } => {
            let cfg = common.load()?;
            let dir = out.unwrap_or(cfg.data_dir.clone());
            let paths = gen_data(&dir, n.unwrap_or(cfg.num_images), cfg.model.image_size, cfg.seed, &cfg.roi)?;
            println!("wrote {} images to {}", paths.len(), dir.display());
        }
        Command::TrainDict { common, data, out } => {
            let cfg = common.load()?;
            let images = images_from(&data.unwrap_or(cfg.data_dir.clone()))?;
            let start = Instant::now();
            let run = train_dict(&cfg, &images, progress(cfg.dict.iters))?;
            eprintln!(
                "stage 1 done in {:.1?}: l1 {:.4} -> {:.4}, {} codes in use",
                start.elapsed(),
                run.initial_l1,
                run.final_l1,
                run.distinct_codes
            );
            write_run(&out.unwrap_or(cfg.out_dir.clone()), "stage1", &run.store, &run.log.to_csv())?;
        }
        Command::TrainRestore { common, data, out, stage1 } => {
            let cfg = common.load()?;
            let images = images_from(&data.unwrap_or(cfg.data_dir.clone()))?;
            let s1_path = stage1.unwrap_or(cfg.stage1_checkpoint.clone());
            let s1 = checkpoint::load(&s1_path).with_context(|| format!("loading stage-1 checkpoint {}", s1_path.display()))?;
            let start = Instant::now();
            let run = train_restorer(&cfg, &images, &s1, progress(cfg.restore.iters))?;
            eprintln!("stage 2 done in {:.1?}", start.elapsed());
            write_run(&out.unwrap_or(cfg.out_dir.clone()), "stage2", &run.store, &run.log.to_csv())?;
        }
        Command::Restore { common, checkpoint, out, dump_attention, resize, inputs } => {
            let cfg = common.load()?;
            let written = restore_files(&cfg, &checkpoint, &inputs, &out, resize, dump_attention)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Eval { pred, gt, out } => {
            let report = evaluate_dirs(&pred, &gt)?;
            if let Some(path) = out {
                std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{}", report.summary());
        }
        Command::Degrade { common, input, out, spec } => {
            let cfg = common.load()?;
            let img = read_image(&input)?;
            let spec = match spec {
                Some(s) => s,
                None => {
                    let [h, w] = [img.shape()[0], img.shape()[1]];
                    cfg.degradation.sample(&mut Rng::seed(cfg.seed), h.min(w))
                }
            };
            let result = degrade(&img, &spec)?;
            write_image(&out, &result.image)?;
            println!("{spec}");
            if result.clamped > 0 {
                eprintln!("{} values clamped to [0, 1]", result.clamped);
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flag_is_rejected() {
        assert!(Cli::try_parse_from(["priorfuse", "eval", "--pred", "a", "--gt", "b", "--bogus"]).is_err());
    }

    #[test]
    fn spec_flag_parses() {
        let cli = Cli::try_parse_from(["priorfuse", "degrade", "x.ppm", "--out", "y.ppm", "--spec", "sigma=1,r=2,delta=3,q=80,seed=4"]).unwrap();
        let Command::Degrade { spec: Some(s), .. } = cli.command else { panic!("expected degrade") };
        assert_eq!(s.q, 80.0);
    }
}
