use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use biastune::config::load_model_config;
use biastune::data::io::{read_image, write_image, write_mask};
use biastune::data::{load_dataset, load_images, make_synthetic_dataset, Split, VocabSpec};
use biastune::eval::{evaluate, ClassReport};
use biastune::tuning::{fit, partition_parameters};
use biastune::{BinaryMask, DeltaCheckpoint, Error, Image, ModelConfig, ModelF32, RunConfig};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

#[derive(Parser)]
#[command(
    name = "biastune",
    version,
    about = "Bias-tuning for text-prompted segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shape dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset root; the split goes into `<out>/<split>/`.
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, short)]
        n: Option<usize>,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Left/right disk labels instead of four shape classes.
        #[arg(long)]
        spatial: bool,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Bias-tune a model; writes the delta checkpoint, loss.csv, partition.json and report.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split and write report.csv.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image for one text prompt; writes mask.png and overlay.png.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter partition and trainable ratio without training.
    Budget {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write partition.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    VitBaseLike,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure { code: 1, error }
    }
}

fn config_failure(error: Error) -> Failure {
    let code = match error {
        Error::Config(_) => 2,
        _ => 1,
    };
    Failure { code, error }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(config_failure)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.run.out.clone())
        .unwrap_or_else(|| PathBuf::from("run"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn io_failure(path: &Path, source: std::io::Error) -> Failure {
    Failure {
        code: 1,
        error: Error::Io {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn write_report(dir: &Path, report: &ClassReport) -> Result<(), Failure> {
    write(&dir.join("report.csv"), report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn restore(cfg: &RunConfig, checkpoint: &Path) -> Result<ModelF32, Failure> {
    let delta = DeltaCheckpoint::load(checkpoint)?;
    let mut model: ModelF32 = cfg.build_model()?;
    delta.apply(&mut model)?;
    Ok(model)
}

fn overlay(image: &Image, mask: &BinaryMask) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            if mask.get(y, x) {
                let [r, g, b] = image.pixel(y, x);
                out.set_pixel(y, x, [0.5 * r + 0.5, 0.5 * g, 0.5 * b]);
            }
        }
    }
    out
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            config,
            seed,
            out,
            n,
            split,
            spatial,
            image_size,
        } => {
            let (spec, cfg_seed, cfg_n) = match config {
                Some(path) => {
                    let cfg = load_config(&path, seed)?;
                    (
                        cfg.vocab_spec().map_err(config_failure)?,
                        cfg.run.seed,
                        cfg.data.n_images,
                    )
                }
                None if spatial => (VocabSpec::spatial_disks(image_size), 0, 16),
                None => (VocabSpec::shapes(image_size), 0, 16),
            };
            let seed = seed.unwrap_or(cfg_seed);
            let n = n.unwrap_or(cfg_n);
            let manifest = make_synthetic_dataset(&out, split, seed, n, &spec)?;
            println!(
                "wrote {} images to {}",
                manifest.len(),
                manifest.split_dir().display()
            );
        }
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let out = out_dir(out, &cfg);
            let manifest = load_dataset(&cfg.data.root, cfg.data.split, &cfg.model.class_vocab)?;
            let images = load_images(&manifest)?;
            let mut model: ModelF32 = cfg.build_model()?;
            let outcome = fit(&cfg.train_config(), &images, &mut model)?;
            DeltaCheckpoint::capture(&model)?.save(&out.join("checkpoint.bin"))?;
            write(&out.join("loss.csv"), outcome.loss_csv())?;
            write(
                &out.join("partition.json"),
                outcome.partition.summary_json(),
            )?;
            let report = evaluate(&model, &images, &cfg.model.class_vocab)?;
            write_report(&out, &report)?;
            info!("outputs in {}", out.display());
        }
        Command::Eval {
            config,
            checkpoint,
            seed,
            split,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let out = out_dir(out, &cfg);
            let model = restore(&cfg, &checkpoint)?;
            let split = split.unwrap_or(cfg.data.split);
            let manifest = load_dataset(&cfg.data.root, split, &cfg.model.class_vocab)?;
            let report = evaluate(&model, &load_images(&manifest)?, &cfg.model.class_vocab)?;
            write_report(&out, &report)?;
        }
        Command::Predict {
            config,
            checkpoint,
            image,
            prompt,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let model = restore(&cfg, &checkpoint)?;
            let img = read_image(&image)?;
            let mask = model.predict_mask(&img, &prompt)?;
            write_mask(&out.join("mask.png"), &mask)?;
            write_image(&out.join("overlay.png"), &overlay(&img, &mask))?;
            println!(
                "{prompt}: {:.4} of pixels foreground",
                mask.foreground_fraction()
            );
        }
        Command::Budget {
            config,
            preset,
            seed,
            out,
        } => {
            let vocab = || {
                ["disk", "square", "triangle", "blob"]
                    .map(String::from)
                    .to_vec()
            };
            let model_cfg = match (config, preset) {
                (Some(path), _) => load_model_config(&path).map_err(config_failure)?,
                (None, Some(Preset::Toy)) => ModelConfig::toy(vocab()),
                (None, Some(Preset::VitBaseLike)) | (None, None) => {
                    ModelConfig::vit_base_like(vocab())
                }
            };
            let model = ModelF32::new(model_cfg, seed.unwrap_or(0))?;
            let partition = partition_parameters(&model)?;
            print!("{}", partition.table());
            if let Some(dir) = out {
                write(&dir.join("partition.json"), partition.summary_json())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
