use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use hved_core::config::RunConfig;
use hved_core::eval::{configure_global_threads, evaluate_all_subsets, format_table, streams, to_csv, ModelSegmenter};
use hved_core::io::{read_any, write_tensor, Checkpoint};
use hved_core::latent::{Modality, ModalitySubset};
use hved_core::network::infer;
use hved_core::rng::HvedRng;
use hved_core::synth::{normalize, Split};
use hved_core::train::{train_loop, write_dataset, Dataset, DiceValidator, RunPaths, StopReason};
use hved_core::{HvedError, Result, Tensor};

#[derive(Parser)]
#[command(name = "hved", version, about = "Hetero-modal variational encoder-decoder for synthetic tumour phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom train/val/test splits and a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every N iterations (0 disables).
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Segment and complete one case from any subset of its modalities.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Observed modalities as four 0/1 characters in F, T1, T1c, T2 order.
        #[arg(long)]
        subset: ModalitySubset,
        /// Directory holding flair.hvt, t1.hvt, t1c.hvt and t2.hvt.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Dice table over all 15 modality subsets of the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ckpt_baseline: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn env_u64(name: &str) -> Result<Option<u64>> {
    match std::env::var(name) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| HvedError::Config { key: name.into(), msg: format!("cannot parse `{v}`") }),
        Err(_) => Ok(None),
    }
}

fn threads() -> Result<usize> {
    Ok(env_u64("HVED_THREADS")?.unwrap_or(0) as usize)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = env_u64("HVED_SEED")? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HvedError::io(dir, e))
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let t = Instant::now();
    let entries = write_dataset(&cfg, out)?;
    println!("wrote {} samples to {} in {:.1?}", entries.len(), out.display(), t.elapsed());
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, resume: Option<&Path>, log_every: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let train = Dataset::load(data, Split::Train, &cfg)?;
    let val = Dataset::load(data, Split::Val, &cfg)?;
    if cfg.max_iters > 0 && train.is_empty() {
        return Err(HvedError::Data(format!("{} has no training samples", data.display())));
    }
    let resume = resume.map(|p| Checkpoint::load_for(p, &cfg)).transpose()?;
    create_dir(out)?;
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(|e| HvedError::io(out.join("config.txt"), e))?;
    println!(
        "training {} parameters on {} samples ({} validation), fusion {}",
        cfg.network.param_count(),
        train.len(),
        val.len(),
        cfg.network.fusion
    );
    let start = Instant::now();
    let mut validator = DiceValidator { cfg: &cfg, data: &val };
    let summary = train_loop(&cfg, &train, &mut validator, &RunPaths::new(out), resume, |r| {
        if log_every > 0 && r.iteration % log_every == 0 {
            println!(
                "iter {:>6}  lr {:.2e}  subset {}  dice {:.4}  ce {:.4}  l2 {:.4}  kl {:.4}  total {:.4}  [{:.0?}]",
                r.iteration,
                r.lr,
                r.subset,
                r.loss.dice,
                r.loss.cross_entropy,
                r.loss.l2_recon,
                r.loss.kl,
                r.loss.total,
                start.elapsed()
            );
        }
    })?;
    for (it, v) in &summary.validations {
        println!("validation at {it}: complete dice {v:.2}");
    }
    let how = match summary.stop {
        StopReason::MaxIters => "reached max-iters",
        StopReason::EarlyStop => "stopped early",
    };
    println!("{how} after {} iterations in {:.1?}; checkpoints in {}", summary.iterations, start.elapsed(), out.display());
    Ok(())
}

fn read_volume(path: &Path) -> Result<Tensor<f32>> {
    let t = read_any(path)?.into_f32();
    match t.shape() {
        [_, _, _] => Ok(t.batched()),
        [1, _, _, _] => Ok(t),
        s => Err(HvedError::shape("infer", format!("{}: expected (D, H, W) or (1, D, H, W), got {s:?}", path.display()))),
    }
}

fn cmd_infer(ckpt: &Path, subset: ModalitySubset, input: &Path, out: &Path, samples: Option<usize>) -> Result<()> {
    let paths: Vec<(Modality, PathBuf)> = subset
        .members()
        .filter_map(Modality::from_index)
        .map(|m| (m, input.join(format!("{}.hvt", m.name()))))
        .collect();
    if let Some((m, p)) = paths.iter().find(|(_, p)| !p.is_file()) {
        return Err(HvedError::MissingEntry(format!("{} input {}", m.name(), p.display())));
    }
    let ck = Checkpoint::load(ckpt)?;
    let cfg = &ck.config;
    let mut observed = BTreeMap::new();
    for (m, p) in &paths {
        observed.insert(*m, normalize(&read_volume(p)?, cfg.normalize_foreground)?);
    }
    let shapes: Vec<&[usize]> = observed.values().map(|t| t.shape()).collect();
    if shapes.windows(2).any(|w| w[0] != w[1]) {
        return Err(HvedError::shape("infer", "input volumes differ in shape"));
    }
    let n = samples.unwrap_or(cfg.infer_samples);
    let mut rng = HvedRng::derived(cfg.seed, streams::INFER);
    let result = infer(&cfg.network, &ck.params, &observed, subset, n, true, &mut rng)?;
    create_dir(out)?;
    for (m, r) in Modality::ALL.iter().zip(&result.reconstructions) {
        write_tensor(&out.join(format!("recon_{}.hvt", m.name())), r)?;
    }
    write_tensor(&out.join("seg_probs.hvt"), &result.seg_probs)?;
    let spatial = result.seg_probs.shape()[1..].to_vec();
    let labels = Tensor::new(spatial, result.labels().into_iter().map(f32::from).collect())?;
    write_tensor(&out.join("labels.hvt"), &labels)?;
    println!(
        "subset {subset}: {} reconstructions, segmentation from {n} draws written to {}",
        result.reconstructions.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, baseline: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let threads = threads()?;
    let ck = Checkpoint::load(ckpt)?;
    let base = baseline.map(Checkpoint::load).transpose()?;
    let run = |ck: &Checkpoint| -> Result<_> {
        let test = Dataset::load(data, Split::Test, &ck.config)?;
        let model = ModelSegmenter { cfg: &ck.config.network, params: &ck.params, samples: ck.config.infer_samples };
        evaluate_all_subsets(&model, &test.samples, ck.config.seed, threads)
    };
    let main = run(&ck)?;
    let base_table = base.as_ref().map(run).transpose()?;
    print!("{}", format_table(&main, base_table.as_ref()));
    fs::write(out, to_csv(&main, base_table.as_ref())).map_err(|e| HvedError::io(out, e))?;
    println!("report written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = env_u64("HVED_THREADS")? {
        configure_global_threads(n as usize)?;
    }
    match cli.command {
        Command::GenData { config, out } => gen_data(config.as_deref(), &out),
        Command::Train { config, data, out, resume, log_every } => {
            train(config.as_deref(), &data, &out, resume.as_deref(), log_every)
        }
        Command::Infer { ckpt, subset, input, out, samples } => cmd_infer(&ckpt, subset, &input, &out, samples),
        Command::Eval { ckpt, ckpt_baseline, data, out } => cmd_eval(&ckpt, ckpt_baseline.as_deref(), &data, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
