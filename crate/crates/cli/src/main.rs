//! `amae`: synthetic data, pretraining, fine-tuning, evaluation, statistics
//! and reconstruction dumps.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amae_core::data::manifest::{build_dataset, load_dataset, write_dataset, Dataset, Split};
use amae_core::data::ModalityId;
use amae_core::eval::suite::{evaluate_suite, render_table, ModelResult};
use amae_core::eval::wilcoxon_signed_rank;
use amae_core::recon::{reconstruct, stats, write_slices};
use amae_core::seg::HeadKind;
use amae_core::train::checkpoint::write_metrics;
use amae_core::train::pipeline::{
    finetune, init_seg_model, pretrain_checkpoint, pretrain_start, resume_pretrain, seg_model_from,
};
use amae_core::train::{loops::run_pretrain, Checkpoint, MetricRecord};
use amae_core::{mae, Error};
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;

const CHECKPOINT_FILE: &str = "checkpoint.amck";
const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Run(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

#[derive(Parser)]
#[command(name = "amae", version, about = "Adaptive masked autoencoder for variable-modality 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_pretrain: Option<usize>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Masked-autoencoder pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        /// Continue from an earlier pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a segmentation head.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pretraining checkpoint path, or `random`.
        #[arg(long)]
        init: String,
        #[arg(long, value_parser = ["adaptive", "concat"])]
        head: String,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Test-set Dice for one or more fine-tuned checkpoints.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `path` or `name=path`; repeat for several models.
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<String>,
        #[arg(long)]
        drop_modality: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired Wilcoxon signed-rank test between two result files.
    Compare {
        #[arg(long, num_args = 2, required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump original / masked / reconstructed slices for one subject.
    Reconstruct {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        subject: u32,
        /// `axis,index`, for example `0,8`.
        #[arg(long)]
        slice: String,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn print_metric(r: &MetricRecord) {
    match r.dice {
        Some(d) => eprintln!("epoch {:>4} {:<8} loss {:.6} dice {:.4} lr {:.3e}", r.epoch, r.split, r.loss, d, r.lr),
        None => eprintln!("epoch {:>4} {:<8} loss {:.6} lr {:.3e}", r.epoch, r.split, r.loss, r.lr),
    }
}

/// Fits the model extents and catalog size to the dataset on disk.
fn load_data(dir: &Path, cfg: &mut RunConfig) -> Result<Dataset, CliError> {
    let ds = load_dataset(dir)?;
    if let Some((_, s)) = ds.subjects.first() {
        cfg.model.volume = s.dims()?;
    }
    cfg.model.num_modalities = ds.catalog.len();
    Ok(ds)
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { config, out, seed, n_pretrain, n_train, n_val, n_test } => {
            let mut cfg = config::load(config.as_deref())?;
            let d = &mut cfg.data;
            if let Some(s) = seed {
                d.generator.seed = s;
            }
            d.n_pretrain = n_pretrain.unwrap_or(d.n_pretrain);
            d.n_train = n_train.unwrap_or(d.n_train);
            d.n_val = n_val.unwrap_or(d.n_val);
            d.n_test = n_test.unwrap_or(d.n_test);
            let ds = build_dataset(&cfg.data)?;
            let entries = write_dataset(&out, &ds)?;
            config::echo(&out, &cfg)?;
            let count = |s: Split| entries.iter().filter(|e| e.split == s).count();
            println!(
                "wrote {} subjects to {} (pretrain {}, train {}, val {}, test {})",
                entries.len(),
                out.display(),
                count(Split::Pretrain),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test)
            );
            Ok(())
        }
        Command::Pretrain { data, config, out, epochs, lr, seed, mask_ratio, resume } => {
            let mut cfg = config::load(config.as_deref())?;
            let p = &mut cfg.pretrain;
            p.epochs = epochs.unwrap_or(p.epochs);
            p.lr = lr.unwrap_or(p.lr);
            p.seed = seed.unwrap_or(p.seed);
            p.mask_ratio = mask_ratio.unwrap_or(p.mask_ratio);
            let ds = load_data(&data, &mut cfg)?;
            cfg.model.validate()?;
            cfg.pretrain.validate()?;
            config::echo(&out, &cfg)?;
            let start = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    if ckpt.vit != cfg.model || ckpt.catalog != ds.catalog {
                        return Err(CliError::Usage("resume checkpoint was trained with a different model or catalog".into()));
                    }
                    resume_pretrain(ckpt)?
                }
                None => pretrain_start(&cfg.model, &cfg.pretrain)?,
            };
            let subjects = ds.split(Split::Pretrain);
            let run = run_pretrain(&subjects, &cfg.model, &cfg.pretrain, start, None, &mut print_metric)?;
            let ckpt = pretrain_checkpoint(run, &cfg.model, &ds.catalog, &cfg)?;
            ckpt.save(&out.join(CHECKPOINT_FILE))?;
            write_metrics(&out.join(METRICS_FILE), &ckpt.metrics)?;
            println!("saved {}", out.join(CHECKPOINT_FILE).display());
            Ok(())
        }
        Command::Finetune { data, config, out, init, head, epochs, lr, seed } => {
            let mut cfg = config::load(config.as_deref())?;
            cfg.head.kind = head.parse::<HeadKind>()?;
            let f = &mut cfg.finetune;
            f.epochs = epochs.unwrap_or(f.epochs);
            f.lr = lr.unwrap_or(f.lr);
            f.seed = seed.unwrap_or(f.seed);
            let ds = load_data(&data, &mut cfg)?;
            cfg.model.validate()?;
            cfg.finetune.validate()?;
            let pre = match init.as_str() {
                "random" => None,
                path => Some(Checkpoint::load(Path::new(path))?),
            };
            if let Some(ck) = &pre {
                if ck.catalog != ds.catalog {
                    return Err(CliError::Run(Error::Transfer {
                        field: "catalog".into(),
                        detail: "checkpoint and dataset catalogs differ".into(),
                    }));
                }
            }
            config::echo(&out, &cfg)?;
            let (model, report) = init_seg_model(&cfg.model, &cfg.head, cfg.finetune.seed, pre.as_ref())?;
            if let Some(r) = &report {
                write_json(&out.join("transfer.json"), r)?;
            }
            let train = ds.split(Split::Train);
            let val = ds.split(Split::Val);
            let (_, ckpt) = finetune(&train, &val, model, &ds.catalog, &cfg.finetune, &cfg, &mut print_metric)?;
            ckpt.save(&out.join(CHECKPOINT_FILE))?;
            write_metrics(&out.join(METRICS_FILE), &ckpt.metrics)?;
            match ckpt.best {
                Some(b) => println!("best validation dice {:.4} at epoch {}", b.val_dice, b.epoch),
                None => println!("no epochs run; saved initial weights"),
            }
            Ok(())
        }
        Command::Eval { data, config, ckpts, drop_modality, out } => {
            let mut cfg = config::load(config.as_deref())?;
            if drop_modality.is_some() {
                cfg.eval.drop_modality = drop_modality;
            }
            let ds = load_data(&data, &mut cfg)?;
            let drop = cfg.eval.drop_modality.map(ModalityId);
            if let Some(m) = drop {
                if !ds.catalog.contains(m) {
                    return Err(CliError::Usage(format!("modality {m} is not in the catalog")));
                }
            }
            config::echo(&out, &cfg)?;
            let mut models = Vec::new();
            for spec in &ckpts {
                let (name, path) = match spec.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(spec);
                        let name = p
                            .parent()
                            .and_then(|d| d.file_name())
                            .map(|n| n.to_string_lossy().into_owned())
                            .unwrap_or_else(|| spec.clone());
                        (name, p)
                    }
                };
                let ck = Checkpoint::load(&path)?;
                if ck.catalog != ds.catalog {
                    return Err(CliError::Run(Error::contract(format!("`{name}` uses a different modality catalog"))));
                }
                models.push((name, seg_model_from(&ck)?));
            }
            let suite = evaluate_suite(&models, &ds.split(Split::Test), drop)?;
            write_json(&out.join("results.json"), &suite)?;
            for m in &suite.models {
                write_json(&out.join(format!("{}.json", m.model)), m)?;
            }
            let table = render_table(&suite);
            fs::write(out.join("results.txt"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Compare { results, out } => {
            let read = |p: &PathBuf| -> Result<ModelResult, CliError> {
                let bytes = fs::read(p)?;
                serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
            };
            let a = read(&results[0])?;
            let b = read(&results[1])?;
            let ids = |r: &ModelResult| r.subjects.iter().map(|s| s.subject_id).collect::<Vec<_>>();
            if ids(&a) != ids(&b) {
                return Err(CliError::Run(Error::contract("result files cover different subjects")));
            }
            let da: Vec<f64> = a.subjects.iter().map(|s| s.dice).collect();
            let db: Vec<f64> = b.subjects.iter().map(|s| s.dice).collect();
            let w = wilcoxon_signed_rank(&da, &db)?;
            let verdict = if w.p_value < 0.05 { "significant" } else { "not significant" };
            println!("{} (mean {:.4}) vs {} (mean {:.4}), n = {}", a.model, a.mean_dice, b.model, b.mean_dice, da.len());
            println!("W = {} (W+ = {}, W- = {}), method {:?}", w.statistic, w.w_plus, w.w_minus, w.method);
            println!("two-sided p = {:.6}", w.p_value);
            println!("verdict at alpha 0.05: {verdict}{}", if w.degenerate() { " (all differences zero)" } else { "" });
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write_json(
                    &dir.join("compare.json"),
                    &serde_json::json!({
                        "a": a.model, "b": b.model, "test": w, "significant": w.p_value < 0.05,
                        "results": results,
                    }),
                )?;
            }
            Ok(())
        }
        Command::Reconstruct { data, config, ckpt, subject, slice, mask_ratio, seed, out } => {
            let mut cfg = config::load(config.as_deref())?;
            cfg.reconstruct.mask_ratio = mask_ratio.unwrap_or(cfg.reconstruct.mask_ratio);
            cfg.reconstruct.seed = seed.unwrap_or(cfg.reconstruct.seed);
            let (axis, index) = slice
                .split_once(',')
                .and_then(|(a, i)| Some((a.trim().parse::<usize>().ok()?, i.trim().parse::<usize>().ok()?)))
                .ok_or_else(|| CliError::Usage(format!("--slice expects `axis,index`, got `{slice}`")))?;
            let ds = load_data(&data, &mut cfg)?;
            let ck = Checkpoint::load(&ckpt)?;
            let sample = ds
                .subjects
                .iter()
                .map(|(_, s)| s)
                .find(|s| s.id == subject)
                .ok_or_else(|| CliError::Run(Error::Bounds(format!("subject {subject} not in dataset"))))?;
            config::echo(&out, &cfg)?;
            let plans = mae::sample_plans(sample, ck.vit.patches(), cfg.reconstruct.mask_ratio, cfg.reconstruct.seed, 0)?;
            let recon = reconstruct(&ck.state.params, &ck.vit, sample, &plans)?;
            let files = write_slices(&out, ck.vit.volume, &recon, axis, index)?;
            let st: Vec<_> = recon.iter().map(stats).collect();
            write_json(&out.join("recon.json"), &st)?;
            for s in &st {
                println!(
                    "modality {}: masked voxels {}, mse {:.6}, mean-baseline mse {:.6}",
                    s.modality, s.masked_voxels, s.mse, s.mean_baseline_mse
                );
            }
            println!("wrote {} images to {}", files.len(), out.display());
            Ok(())
        }
    }
}
