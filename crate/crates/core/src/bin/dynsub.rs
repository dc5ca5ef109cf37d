use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dynsub::checkpoint::{load_model, LoadedModel};
use dynsub::config::{DataConfig, ExperimentConfig};
use dynsub::evaluation::evaluate_checkpoint;
use dynsub::experiment::{self, export_embeddings, load_data, run_experiment, run_wss, train_with_artifacts, Splits};
use dynsub::folder::write_image_folder;
use dynsub::synthetic::generate_synthetic;
use dynsub::trainer::TrainMode;
use dynsub::wss::{export_attention, extract_attention, select_threshold};
use dynsub::{plot, Error, Result};

#[derive(Parser)]
#[command(name = "dynsub", version, about = "Dynamic subspace metric learning and attention-driven segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; the desk preset when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (or file, for `embed`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic set as a class-per-folder PNG tree.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Train every configured seed, or continue one checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "dynamic|static-K")]
        mode: Option<String>,
        #[arg(long = "static-k", value_name = "N")]
        static_k: Option<usize>,
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Test-set NMI and Recall@K of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Export normalized embeddings of one split.
    Embed {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Export attention maps of one split as PNG.
    Attend {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Sweep the binarization threshold on validation masks.
    WssThreshold {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Threshold, build proxy masks and train the segmenter.
    WssTrain {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild summary.json of a run directory.
    Report { run_dir: PathBuf },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Loads a checkpoint and the data split it should be applied to; the
/// model's own input size overrides the config's.
fn model_and_data(checkpoint: &Path, common: &Common) -> Result<(LoadedModel, Splits)> {
    let loaded = load_model(checkpoint)?;
    let mut cfg = load_config(common)?;
    cfg.model = loaded.model_config.clone();
    if let DataConfig::Synthetic(s) = &mut cfg.data {
        s.spec.image_size = cfg.model.input.height;
    }
    let splits = load_data(&cfg)?;
    Ok((loaded, splits))
}

fn pick(splits: &Splits, split: Split) -> &dynsub::data::Dataset {
    match split {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
        Split::Test => &splits.test,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen { common } => {
            let cfg = load_config(&common)?;
            let DataConfig::Synthetic(s) = &cfg.data else {
                return Err(Error::Config("synth-gen needs a synthetic data section".into()));
            };
            let spec = dynsub::synthetic::SyntheticSpec { n_samples: s.spec.n_samples + s.n_val + s.n_test, ..s.spec.clone() };
            let data = generate_synthetic(&spec, common.seed.unwrap_or(s.data_seed))?;
            let out = out_dir(&common, "synthetic");
            write_image_folder(&data, &out)?;
            println!("{} images in {} classes written to {}", data.len(), data.num_classes(), out.display());
        }
        Command::Train { common, mode, static_k, resume } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.trainer.mode = m.parse::<TrainMode>()?;
            }
            if let Some(k) = static_k {
                cfg.trainer.static_k = k;
            }
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            cfg.validate()?;
            match resume {
                None => {
                    let root = run_experiment(&cfg)?;
                    print_json(&experiment::report(&root)?)?;
                }
                Some(ckpt) => {
                    let mut trainer = load_model(&ckpt)?.into_trainer()?;
                    let seed = trainer.config.seed;
                    let dir = cfg.out_dir.join(&cfg.name).join(format!("seed-{seed}"));
                    let splits = load_data(&cfg)?;
                    let outcome = train_with_artifacts(&mut trainer, &cfg, &splits, seed, &dir)?;
                    print_json(&outcome)?;
                }
            }
        }
        Command::Eval { checkpoint, common, split } => {
            let (m, splits) = model_and_data(&checkpoint, &common)?;
            let report = evaluate_checkpoint(&m.model, &m.layout, pick(&splits, split), common.seed.unwrap_or(0))?;
            if let Some(out) = &common.out {
                fs::create_dir_all(out)?;
                report.append_jsonl(&out.join("results.jsonl"))?;
            }
            print_json(&report)?;
        }
        Command::Embed { checkpoint, common, split } => {
            let (m, splits) = model_and_data(&checkpoint, &common)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("embeddings.bin"));
            if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(p)?;
            }
            export_embeddings(&m.model, &m.layout, pick(&splits, split), &out)?;
            println!("{}", out.display());
        }
        Command::Attend { checkpoint, common, split } => {
            let (m, splits) = model_and_data(&checkpoint, &common)?;
            let maps = extract_attention(&m.model, pick(&splits, split))?;
            let out = out_dir(&common, "attention");
            export_attention(&out, &maps)?;
            println!("{} maps written to {}", maps.len(), out.display());
        }
        Command::WssThreshold { checkpoint, common } => {
            let cfg = load_config(&common)?;
            let (m, splits) = model_and_data(&checkpoint, &common)?;
            let gt: Vec<Vec<u8>> = splits
                .val
                .samples
                .iter()
                .map(|s| s.mask.clone().ok_or_else(|| Error::InvalidInput(format!("{} has no mask", s.id))))
                .collect::<Result<_>>()?;
            let sweep = select_threshold(&extract_attention(&m.model, &splits.val)?, &gt, &cfg.wss.grid)?;
            if let Some(out) = &common.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("threshold.json"), serde_json::to_string_pretty(&sweep)?)?;
                plot::threshold_curve(&out.join("dice_vs_threshold.svg"), &sweep)?;
            }
            print_json(&sweep)?;
        }
        Command::WssTrain { checkpoint, common } => {
            let cfg = load_config(&common)?;
            let (m, splits) = model_and_data(&checkpoint, &common)?;
            let out = out_dir(&common, "wss");
            fs::create_dir_all(&out)?;
            let report = run_wss(&m.model, &splits, &cfg.wss, common.seed.unwrap_or(0), Some(&out))?;
            fs::write(out.join("wss.json"), serde_json::to_string_pretty(&report)?)?;
            print_json(&report)?;
        }
        Command::Report { run_dir } => print_json(&experiment::report(&run_dir)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
