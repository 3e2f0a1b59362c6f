//! Dice evaluation over every modality subset, and modality completion
//! error.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{HvedError, Result};
use crate::latent::{Modality, ModalitySubset, NUM_MODALITIES};
use crate::losses::RegionDice;
use crate::network::{infer, NetworkConfig, NetworkParams};
use crate::rng::HvedRng;
use crate::synth::PhantomSample;
use crate::tensor::Tensor;

/// Stream labels of derived generators; the high 16 bits name the purpose.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const EPOCH: u64 = 1 << 48;
    pub const VALIDATION: u64 = 2 << 48;
    pub const EVAL: u64 = 3 << 48;
    pub const COMPLETION: u64 = 4 << 48;
    pub const INFER: u64 = 5 << 48;
}

/// Anything that maps a sample and an observed subset to a label volume.
pub trait Segmenter: Sync {
    fn segment(&self, sample: &PhantomSample, subset: ModalitySubset, rng: &mut HvedRng) -> Result<Vec<u8>>;
}

/// Segmentation by a trained network, averaging `samples` posterior draws.
pub struct ModelSegmenter<'a> {
    pub cfg: &'a NetworkConfig,
    pub params: &'a NetworkParams<f32>,
    pub samples: usize,
}

pub fn observed_images(sample: &PhantomSample, subset: ModalitySubset) -> BTreeMap<Modality, Tensor<f32>> {
    subset
        .members()
        .filter_map(|i| Some((Modality::from_index(i)?, sample.modalities.get(i)?.clone())))
        .collect()
}

impl Segmenter for ModelSegmenter<'_> {
    fn segment(&self, sample: &PhantomSample, subset: ModalitySubset, rng: &mut HvedRng) -> Result<Vec<u8>> {
        let out = infer(self.cfg, self.params, &observed_images(sample, subset), subset, self.samples, false, rng)?;
        Ok(out.labels())
    }
}

/// Runs `f` on a pool of `threads` workers (`0` lets rayon decide).
pub fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HvedError::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Sizes rayon's global pool; only the first call in a process has effect.
pub fn configure_global_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| HvedError::InvalidArgument(format!("thread pool: {e}")))
}

/// Mean Dice per sample of one subset. Sample `i` uses the generator
/// derived from `(seed, label_base + i)`, so results do not depend on
/// scheduling.
pub fn evaluate_subset(
    model: &dyn Segmenter,
    data: &[PhantomSample],
    subset: ModalitySubset,
    seed: u64,
    label_base: u64,
) -> Result<Vec<RegionDice>> {
    data.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = HvedRng::derived(seed, label_base + i as u64);
            RegionDice::compute(&model.segment(s, subset, &mut rng)?, &s.labels)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetRow {
    pub subset: ModalitySubset,
    pub dice: RegionDice,
}

/// Fifteen subset rows in report order plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<SubsetRow>,
    pub means: RegionDice,
}

impl EvalTable {
    pub fn row(&self, subset: ModalitySubset) -> Option<&RegionDice> {
        self.rows.iter().find(|r| r.subset == subset).map(|r| &r.dice)
    }
}

/// Mean Dice of every non-empty subset over `data`. Work runs on `threads`
/// workers; cells are merged in a fixed order.
pub fn evaluate_all_subsets(
    model: &dyn Segmenter,
    data: &[PhantomSample],
    seed: u64,
    threads: usize,
) -> Result<EvalTable> {
    if data.is_empty() {
        return Err(HvedError::Data("evaluation set is empty".into()));
    }
    let order = ModalitySubset::report_order();
    let n = data.len();
    let cells: Vec<(ModalitySubset, usize)> =
        order.iter().flat_map(|&s| (0..n).map(move |i| (s, i))).collect();
    let scores = with_pool(threads, || {
        cells
            .par_iter()
            .map(|&(subset, i)| {
                let label = streams::EVAL | (u64::from(subset.mask()) << 32) | i as u64;
                let mut rng = HvedRng::derived(seed, label);
                RegionDice::compute(&model.segment(&data[i], subset, &mut rng)?, &data[i].labels)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let rows: Vec<SubsetRow> = order
        .iter()
        .zip(scores.chunks(n))
        .map(|(&subset, chunk)| SubsetRow { subset, dice: RegionDice::mean(chunk) })
        .collect();
    let means = RegionDice::mean(&rows.iter().map(|r| r.dice).collect::<Vec<_>>());
    Ok(EvalTable { rows, means })
}

fn marks(subset: ModalitySubset) -> String {
    Modality::ALL.iter().map(|&m| if subset.has(m) { " •  " } else { " ◦  " }).collect()
}

/// Aligned plain-text table; a baseline adds a second block of columns.
pub fn format_table(main: &EvalTable, baseline: Option<&EvalTable>) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<6}{:<16}{:>9}{:>9}{:>10}", "mask", " F   T1  T1c T2", "complete", "core", "enhancing");
    if baseline.is_some() {
        let _ = write!(out, "  |{:>9}{:>9}{:>10}", "complete", "core", "enhancing");
    }
    out.push('\n');
    let line = |out: &mut String, label: &str, m: &str, d: &RegionDice, b: Option<&RegionDice>| {
        let _ = write!(out, "{label:<6}{m:<16}{:>9.2}{:>9.2}{:>10.2}", d.complete, d.core, d.enhancing);
        if let Some(b) = b {
            let _ = write!(out, "  |{:>9.2}{:>9.2}{:>10.2}", b.complete, b.core, b.enhancing);
        }
        out.push('\n');
    };
    for r in &main.rows {
        let b = baseline.and_then(|t| t.row(r.subset));
        line(&mut out, &r.subset.to_string(), &marks(r.subset), &r.dice, b);
    }
    line(&mut out, "means", "", &main.means, baseline.map(|t| &t.means));
    out
}

/// CSV with columns `subset-mask,complete,core,enhancing`, plus
/// `baseline-complete,baseline-core,baseline-enhancing` when a baseline is
/// given. The last row has mask `means`.
pub fn to_csv(main: &EvalTable, baseline: Option<&EvalTable>) -> String {
    let mut out = String::from("subset-mask,complete,core,enhancing");
    if baseline.is_some() {
        out.push_str(",baseline-complete,baseline-core,baseline-enhancing");
    }
    out.push('\n');
    let line = |out: &mut String, label: &str, d: &RegionDice, b: Option<&RegionDice>| {
        let _ = write!(out, "{label},{},{},{}", d.complete, d.core, d.enhancing);
        if let Some(b) = b {
            let _ = write!(out, ",{},{},{}", b.complete, b.core, b.enhancing);
        }
        out.push('\n');
    };
    for r in &main.rows {
        line(&mut out, &r.subset.to_string(), &r.dice, baseline.and_then(|t| t.row(r.subset)));
    }
    line(&mut out, "means", &main.means, baseline.map(|t| &t.means));
    out
}

/// Reconstruction error of one unobserved modality.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionRow {
    pub sample: usize,
    pub subset: ModalitySubset,
    pub missing: Modality,
    pub mse: f64,
    /// Error of predicting the volume's own global mean everywhere.
    pub mean_predictor_mse: f64,
}

/// For every sample and every three-modality subset, reconstructs the
/// missing modality and compares it with the constant mean predictor.
pub fn completion_errors(
    cfg: &NetworkConfig,
    params: &NetworkParams<f32>,
    data: &[PhantomSample],
    samples: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<CompletionRow>> {
    let full = ModalitySubset::full(NUM_MODALITIES);
    let subsets: Vec<ModalitySubset> = ModalitySubset::report_order().into_iter().filter(|s| s.len() == 3).collect();
    let cells: Vec<(usize, ModalitySubset)> =
        (0..data.len()).flat_map(|i| subsets.iter().map(move |&s| (i, s))).collect();
    with_pool(threads, || {
        cells
            .par_iter()
            .map(|&(i, subset)| {
                let sample = &data[i];
                let missing_idx = full.members().find(|&m| !subset.contains(m)).expect("one modality missing");
                let missing = Modality::from_index(missing_idx).expect("valid index");
                let label = streams::COMPLETION | (u64::from(subset.mask()) << 32) | i as u64;
                let mut rng = HvedRng::derived(seed, label);
                let out = infer(cfg, params, &observed_images(sample, subset), subset, samples, true, &mut rng)?;
                let recon = out.reconstructions.get(missing_idx).ok_or_else(|| {
                    HvedError::InvalidArgument("network has no image decoders".into())
                })?;
                let truth = &sample.modalities[missing_idx];
                let n = truth.numel() as f64;
                let mean = truth.data().iter().map(|&v| v as f64).sum::<f64>() / n;
                let mse =
                    recon.data().iter().zip(truth.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n;
                let mean_predictor_mse = truth.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                Ok(CompletionRow { sample: i, subset, missing, mse, mean_predictor_mse })
            })
            .collect::<Result<Vec<_>>>()
    })?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_phantom, PhantomConfig};

    struct Oracle;
    impl Segmenter for Oracle {
        fn segment(&self, s: &PhantomSample, _: ModalitySubset, _: &mut HvedRng) -> Result<Vec<u8>> {
            Ok(s.labels.clone())
        }
    }

    /// Predicts the truth only when T1c is observed, background otherwise.
    struct NeedsT1c;
    impl Segmenter for NeedsT1c {
        fn segment(&self, s: &PhantomSample, subset: ModalitySubset, _: &mut HvedRng) -> Result<Vec<u8>> {
            Ok(if subset.has(Modality::T1c) { s.labels.clone() } else { vec![0; s.labels.len()] })
        }
    }

    fn data(n: u64) -> Vec<PhantomSample> {
        let cfg = PhantomConfig { volume_edge: 16, radius_min: 3.0, radius_max: 4.0, ..PhantomConfig::default() };
        (0..n).map(|s| generate_phantom(&cfg, s).unwrap()).collect()
    }

    #[test]
    fn perfect_model_scores_100_everywhere() {
        let t = evaluate_all_subsets(&Oracle, &data(1), 0, 1).unwrap();
        assert_eq!(t.rows.len(), 15);
        for r in &t.rows {
            assert_eq!(r.dice, RegionDice { complete: 100.0, core: 100.0, enhancing: 100.0 });
        }
        assert_eq!(t.means.complete, 100.0);
        let csv = to_csv(&t, None);
        assert_eq!(csv.lines().count(), 17);
        assert!(csv.lines().last().unwrap().starts_with("means,"));
        assert_eq!(format_table(&t, Some(&t)).lines().count(), 17);
    }

    #[test]
    fn means_row_is_the_row_average() {
        let t = evaluate_all_subsets(&NeedsT1c, &data(3), 0, 2).unwrap();
        for region in crate::losses::Region::ALL {
            let avg = t.rows.iter().map(|r| r.dice.get(region)).sum::<f64>() / 15.0;
            assert!((t.means.get(region) - avg).abs() < 1e-9);
        }
        assert_eq!(t.row("0010".parse().unwrap()).unwrap().complete, 100.0);
        assert_eq!(t.row("0001".parse().unwrap()).unwrap().complete, 0.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(evaluate_all_subsets(&Oracle, &[], 0, 1), Err(HvedError::Data(_))));
    }

    #[test]
    fn model_evaluation_is_independent_of_thread_count() {
        let cfg = NetworkConfig {
            levels: 2,
            channels: vec![2, 2],
            latent_channels: vec![1, 1],
            patch_size: 8,
            ..NetworkConfig::default()
        };
        let params = NetworkParams::init(&cfg, &mut HvedRng::seed_from_u64(0)).unwrap();
        let model = ModelSegmenter { cfg: &cfg, params: &params, samples: 2 };
        let d: Vec<_> = data(2).into_iter().map(|s| s.normalized(false).unwrap()).collect();
        let a = evaluate_all_subsets(&model, &d, 9, 1).unwrap();
        let b = evaluate_all_subsets(&model, &d, 9, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(to_csv(&a, None), to_csv(&b, None));
    }
}
