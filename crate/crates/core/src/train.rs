//! Datasets and the training loop.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{HvedError, Result};
use crate::eval::{evaluate_subset, streams, ModelSegmenter};
use crate::io::{read_manifest, read_tensor, write_manifest, write_tensor, Checkpoint, ManifestEntry};
use crate::latent::{Modality, ModalitySubset, SubsetDistribution, NUM_MODALITIES};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::network::{forward_train, NetworkParams, NUM_CLASSES};
use crate::optim::{adam_step, AdamState};
use crate::rng::HvedRng;
use crate::synth::{flip_augment, generate_phantom, sample_patch, split_seeds, PhantomSample, Split};
use crate::tensor::Tensor;

pub const LOSS_LOG: &str = "loss_log.csv";
pub const VAL_LOG: &str = "val_log.csv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LOSS_LOG_HEADER: &str = "iter,lr,dice,ce,l2,kl,total";

/// `base / factor^⌊step / every⌋`
pub fn lr_at(base: f64, factor: f64, every: u64, step: u64) -> f64 {
    base / factor.powi((step / every.max(1)) as i32)
}

/// Learning rate of `cfg` at `step`.
pub fn config_lr(cfg: &RunConfig, step: u64) -> f64 {
    lr_at(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every, step)
}

/// Normalised samples of one split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<PhantomSample>,
}

impl Dataset {
    /// Generates the split in memory from the configured seeds.
    pub fn generate(cfg: &RunConfig, split: Split) -> Result<Self> {
        let seeds: Vec<u64> = split_seeds(cfg.data_seed, cfg.train_count, cfg.val_count, cfg.test_count)
            .into_iter()
            .filter(|&(_, s)| s == split)
            .map(|(seed, _)| seed)
            .collect();
        let samples = seeds
            .par_iter()
            .map(|&seed| generate_phantom(&cfg.phantom, seed)?.normalized(cfg.normalize_foreground))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { split, samples })
    }

    /// Loads the split listed in `dir`'s manifest.
    pub fn load(dir: &Path, split: Split, cfg: &RunConfig) -> Result<Self> {
        let entries = read_manifest(dir)?;
        let samples = entries
            .par_iter()
            .filter(|e| e.split == split)
            .map(|e| load_sample(dir, e)?.normalized(cfg.normalize_foreground))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { split, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads the raw modality and label files of one manifest entry.
pub fn load_sample(dir: &Path, e: &ManifestEntry) -> Result<PhantomSample> {
    let modalities = Modality::ALL
        .iter()
        .map(|m| read_tensor::<f32>(&e.modality_path(dir, m.name())))
        .collect::<Result<Vec<_>>>()?;
    let seg = read_tensor::<f32>(&e.labels_path(dir))?;
    let edge = seg.shape().first().copied().unwrap_or(0);
    if seg.shape() != [edge, edge, edge] || modalities.iter().any(|m| m.shape() != [1, edge, edge, edge]) {
        return Err(HvedError::Data(format!("{}: inconsistent volume shapes", e.basename)));
    }
    let labels = seg
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v < NUM_CLASSES as f32 && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(HvedError::Data(format!("{}: label value {v} is not a class index", e.basename)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomSample { modalities, labels, edge, seed: e.seed })
}

/// Writes every split's raw phantoms plus the manifest into `dir`.
pub fn write_dataset(cfg: &RunConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| HvedError::io(dir, e))?;
    let seeds = split_seeds(cfg.data_seed, cfg.train_count, cfg.val_count, cfg.test_count);
    let mut counters = [0usize; 3];
    let entries: Vec<ManifestEntry> = seeds
        .iter()
        .map(|&(seed, split)| {
            let k = &mut counters[split as usize];
            let basename = format!("{}_{:04}", split.name(), *k);
            *k += 1;
            ManifestEntry { basename, seed, split }
        })
        .collect();
    entries.par_iter().try_for_each(|e| {
        let s = generate_phantom(&cfg.phantom, e.seed)?;
        for (m, t) in Modality::ALL.iter().zip(&s.modalities) {
            write_tensor(&e.modality_path(dir, m.name()), t)?;
        }
        let edge = s.edge;
        let seg = Tensor::new(vec![edge, edge, edge], s.labels.iter().map(|&l| f32::from(l)).collect())?;
        write_tensor(&e.labels_path(dir), &seg)
    })?;
    write_manifest(dir, &entries)?;
    Ok(entries)
}

/// Mutable state of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: u64,
    pub params: NetworkParams<f32>,
    pub adam: AdamState<f32>,
    pub best_val: f64,
    pub patience_counter: u64,
    pub rng: HvedRng,
}

impl TrainState {
    /// Fresh parameters from the `INIT` stream of the run seed.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let params = NetworkParams::init(&cfg.network, &mut HvedRng::derived(cfg.seed, streams::INIT))?;
        Ok(TrainState {
            iteration: 0,
            params,
            adam: AdamState::new(cfg.weight_decay),
            best_val: f64::NEG_INFINITY,
            patience_counter: 0,
            rng: HvedRng::seed_from_u64(cfg.seed),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        TrainState {
            iteration: ck.iteration,
            params: ck.params,
            adam: ck.adam,
            best_val: ck.best_val,
            patience_counter: ck.patience_counter,
            rng: HvedRng::from_state(ck.rng),
        }
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            iteration: self.iteration,
            rng: self.rng.state(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            best_val: self.best_val,
            patience_counter: self.patience_counter,
        }
    }
}

/// What one iteration did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    /// One-based index of the completed iteration.
    pub iteration: u64,
    pub lr: f64,
    pub subset: ModalitySubset,
    pub loss: LossBreakdown,
}

impl IterationRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{},{}", self.iteration, self.lr, l.dice, l.cross_entropy, l.l2_recon, l.kl, l.total)
    }
}

pub fn loss_weights(cfg: &RunConfig) -> LossWeights {
    LossWeights { l2: cfg.l2_weight, kl: cfg.kl_weight, exclude_background: cfg.dice_exclude_background }
}

fn diverged(state: &TrainState, source: HvedError) -> HvedError {
    HvedError::Diverged {
        iteration: state.iteration + 1,
        last_good: (state.iteration > 0).then_some(state.iteration),
        source: Box::new(source),
    }
}

/// One optimisation step on `sample`: draws a subset, flips, crops a patch,
/// runs the network on the subset, backpropagates the composite loss and
/// applies Adam. All randomness comes from `state.rng` in that order.
pub fn train_iteration(
    cfg: &RunConfig,
    state: &mut TrainState,
    sample: &PhantomSample,
    dist: &SubsetDistribution,
) -> Result<IterationRecord> {
    let subset = dist.draw(&mut state.rng);
    let (flipped, _) = flip_augment(sample, &mut state.rng)?;
    let (patch, _) = sample_patch(&flipped, cfg.network.patch_size, &mut state.rng)?;
    let mut fr = match forward_train(&cfg.network, &state.params, &patch.modalities, subset, cfg.kl_reduction, &mut state.rng) {
        Ok(fr) => fr,
        Err(e @ HvedError::NonFinite { .. }) => return Err(diverged(state, e)),
        Err(e) => return Err(e),
    };
    let (loss, breakdown) = match total_loss(&mut fr, &patch.modalities, &patch.labels, &loss_weights(cfg)) {
        Ok(v) => v,
        Err(e @ HvedError::NonFinite { .. }) => return Err(diverged(state, e)),
        Err(e) => return Err(e),
    };
    if !breakdown.total.is_finite() {
        return Err(diverged(state, HvedError::NonFinite { node: loss.0, op: "total_loss" }));
    }
    fr.graph.backward(loss)?;
    let grads = state.params.full_grads(&fr.graph);
    if let Some(name) = grads.iter().find(|(_, g)| !g.all_finite()).map(|(n, _)| n.clone()) {
        return Err(diverged(state, HvedError::Data(format!("non-finite gradient for {name}"))));
    }
    let lr = config_lr(cfg, state.iteration);
    adam_step(&mut state.params.tensors, &grads, &mut state.adam, lr)?;
    state.iteration += 1;
    Ok(IterationRecord { iteration: state.iteration, lr, subset, loss: breakdown })
}

/// Index into the training set for iteration `iter` (zero-based): a fresh
/// permutation per epoch, walked in order.
pub fn sample_index(seed: u64, n: usize, iter: u64) -> usize {
    let epoch = iter / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut HvedRng::derived(seed, streams::EPOCH | epoch));
    order[(iter % n as u64) as usize]
}

/// Validation score, higher is better.
pub trait Validator {
    fn validate(&mut self, params: &NetworkParams<f32>, iteration: u64) -> Result<f64>;
}

/// Mean complete-region Dice of the full-modality subset on a dataset.
pub struct DiceValidator<'a> {
    pub cfg: &'a RunConfig,
    pub data: &'a Dataset,
}

impl Validator for DiceValidator<'_> {
    fn validate(&mut self, params: &NetworkParams<f32>, _iteration: u64) -> Result<f64> {
        if self.data.is_empty() {
            return Err(HvedError::Data("validation set is empty".into()));
        }
        let model = ModelSegmenter { cfg: &self.cfg.network, params, samples: self.cfg.val_samples };
        let full = ModalitySubset::full(NUM_MODALITIES);
        let scores = evaluate_subset(&model, &self.data.samples, full, self.cfg.seed, streams::VALIDATION)?;
        Ok(scores.iter().map(|d| d.complete).sum::<f64>() / scores.len() as f64)
    }
}

/// Why the loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    EarlyStop,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: u64,
    pub stop: StopReason,
    pub best_val: f64,
    pub records: Vec<IterationRecord>,
    pub validations: Vec<(u64, f64)>,
}

/// Output locations of a run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join(LOSS_LOG)
    }
    pub fn val_log(&self) -> PathBuf {
        self.dir.join(VAL_LOG)
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join(LAST_CKPT)
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join(BEST_CKPT)
    }
}

/// Rewrites `path` keeping the header and rows whose first column is at most
/// `upto`; creates it with just the header when missing.
fn truncate_log(path: &Path, header: &str, upto: u64) -> Result<()> {
    let mut text = format!("{header}\n");
    if let Ok(old) = fs::read_to_string(path) {
        for line in old.lines().skip(1) {
            let keep = line.split(',').next().and_then(|v| v.parse::<u64>().ok()).is_some_and(|i| i <= upto);
            if keep {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    fs::write(path, text).map_err(|e| HvedError::io(path, e))
}

fn append(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").map_err(|e| HvedError::io(path, e))
}

fn open_append(path: &Path) -> Result<fs::File> {
    fs::OpenOptions::new().append(true).open(path).map_err(|e| HvedError::io(path, e))
}

/// Trains until `max-iters` or early stopping.
///
/// Validation runs every `val-every` iterations; an improvement of more than
/// `min-delta` resets the patience counter and refreshes `best.ckpt`,
/// otherwise the counter grows and the run stops once it reaches
/// `patience`. `last.ckpt` is written every `save-every` iterations and at
/// the end. With `max-iters = 0` only the initial `last.ckpt` is written.
/// A resumed run truncates the logs to the checkpoint's iteration and then
/// appends, so its logs match those of an uninterrupted run.
pub fn train_loop(
    cfg: &RunConfig,
    train: &Dataset,
    validator: &mut dyn Validator,
    paths: &RunPaths,
    resume: Option<Checkpoint>,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(&paths.dir).map_err(|e| HvedError::io(&paths.dir, e))?;
    let mut state = match resume {
        Some(ck) => {
            if ck.config.network != cfg.network {
                return Err(HvedError::CheckpointMismatch("resume checkpoint has a different network".into()));
            }
            TrainState::from_checkpoint(ck)
        }
        None => TrainState::init(cfg)?,
    };
    let mut summary = TrainSummary {
        iterations: state.iteration,
        stop: StopReason::MaxIters,
        best_val: state.best_val,
        records: Vec::new(),
        validations: Vec::new(),
    };
    if cfg.max_iters == 0 {
        state.checkpoint(cfg).save(&paths.last())?;
        return Ok(summary);
    }
    if train.is_empty() {
        return Err(HvedError::Data("training set is empty".into()));
    }
    truncate_log(&paths.loss_log(), LOSS_LOG_HEADER, state.iteration)?;
    truncate_log(&paths.val_log(), "iter,val_dice,best,patience", state.iteration)?;
    let mut loss_log = open_append(&paths.loss_log())?;
    let mut val_log = open_append(&paths.val_log())?;
    let dist = SubsetDistribution::uniform_size(NUM_MODALITIES);

    while state.iteration < cfg.max_iters {
        if state.patience_counter >= cfg.patience && cfg.patience > 0 {
            summary.stop = StopReason::EarlyStop;
            break;
        }
        let idx = sample_index(cfg.seed, train.len(), state.iteration);
        let rec = train_iteration(cfg, &mut state, &train.samples[idx], &dist)?;
        append(&mut loss_log, &paths.loss_log(), &rec.csv_line())?;
        on_iteration(&rec);
        summary.records.push(rec);

        let it = state.iteration;
        if it % cfg.val_every == 0 {
            let v = validator.validate(&state.params, it)?;
            if v > state.best_val + cfg.min_delta {
                state.best_val = v;
                state.patience_counter = 0;
                state.checkpoint(cfg).save(&paths.best())?;
            } else {
                state.patience_counter += 1;
            }
            append(&mut val_log, &paths.val_log(), &format!("{it},{v},{},{}", state.best_val, state.patience_counter))?;
            summary.validations.push((it, v));
        }
        if it % cfg.save_every == 0 || it == cfg.max_iters {
            state.checkpoint(cfg).save(&paths.last())?;
        }
    }
    if summary.stop == StopReason::EarlyStop || state.iteration % cfg.save_every != 0 {
        state.checkpoint(cfg).save(&paths.last())?;
    }
    if !paths.best().exists() {
        state.checkpoint(cfg).save(&paths.best())?;
    }
    summary.iterations = state.iteration;
    summary.best_val = state.best_val;
    Ok(summary)
}
