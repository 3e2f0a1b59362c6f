//! Training losses and Dice evaluation.
//!
//! Segmentation tensors are class-major: `(C, D, H, W)` at tensor level and
//! `(1, C, D, H, W)` inside a graph. Labels are flat `u8` volumes in the same
//! voxel order.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, NodeId};
use crate::error::{HvedError, Result};
use crate::network::ForwardResult;
use crate::synth::{LABEL_ENHANCING, LABEL_NECROTIC};
use crate::tensor::{Real, Tensor};

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// One-hot encoding `(C, labels.len())` reshaped to `(C, spatial...)`.
pub fn one_hot<T: Real>(labels: &[u8], classes: usize, spatial: &[usize]) -> Result<Tensor<T>> {
    let s: usize = spatial.iter().product();
    if s != labels.len() {
        return Err(HvedError::shape("one_hot", format!("{} labels for spatial shape {spatial:?}", labels.len())));
    }
    check_labels(labels, classes)?;
    let mut shape = vec![classes];
    shape.extend_from_slice(spatial);
    let mut data = vec![T::zero(); classes * s];
    for (v, &l) in labels.iter().enumerate() {
        data[l as usize * s + v] = T::one();
    }
    Tensor::new(shape, data)
}

fn check_labels(labels: &[u8], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l as usize >= classes) {
        Some(&l) => Err(HvedError::LabelOutOfRange { label: l, classes }),
        None => Ok(()),
    }
}

fn class_split<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [c, rest @ ..] if !rest.is_empty() => Ok((*c, rest.iter().product())),
        s => Err(HvedError::shape(op, format!("expected (C, spatial...), got {s:?}"))),
    }
}

/// `1 − mean_c (2 Σ p q + s) / (Σ p + Σ q + s)`, optionally skipping class 0.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, exclude_background: bool) -> Result<f64> {
    if probs.shape() != target.shape() {
        return Err(HvedError::shape("dice_loss", format!("{:?} vs {:?}", probs.shape(), target.shape())));
    }
    let (c, s) = class_split("dice_loss", probs)?;
    let first = usize::from(exclude_background);
    if c <= first {
        return Err(HvedError::InvalidArgument("dice_loss needs a foreground class".into()));
    }
    let (p, q) = (probs.data(), target.data());
    let mut total = 0.0;
    for ch in first..c {
        let (mut pq, mut sp, mut sq) = (0.0, 0.0, 0.0);
        for v in ch * s..(ch + 1) * s {
            let (a, b) = (p[v].to_f64().unwrap(), q[v].to_f64().unwrap());
            pq += a * b;
            sp += a;
            sq += b;
        }
        total += (2.0 * pq + DICE_SMOOTH) / (sp + sq + DICE_SMOOTH);
    }
    Ok(1.0 - total / (c - first) as f64)
}

/// Mean over voxels of `−log softmax(logits)[label]`.
pub fn cross_entropy_loss<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let (c, s) = class_split("cross_entropy_loss", logits)?;
    if labels.len() != s {
        return Err(HvedError::shape("cross_entropy_loss", format!("{} labels for {s} voxels", labels.len())));
    }
    check_labels(labels, c)?;
    let x = logits.data();
    let mut total = 0.0;
    for (v, &l) in labels.iter().enumerate() {
        let m = (0..c).map(|ch| x[ch * s + v].to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..c).map(|ch| (x[ch * s + v].to_f64().unwrap() - m).exp()).sum::<f64>().ln();
        total += lse - x[l as usize * s + v].to_f64().unwrap();
    }
    Ok(total / s as f64)
}

/// Mean squared error averaged over every modality and voxel.
pub fn l2_recon_loss<T: Real>(recons: &[Tensor<T>], targets: &[Tensor<T>]) -> Result<f64> {
    if recons.len() != targets.len() || recons.is_empty() {
        return Err(HvedError::shape("l2_recon_loss", format!("{} reconstructions, {} targets", recons.len(), targets.len())));
    }
    let mut total = 0.0;
    for (r, t) in recons.iter().zip(targets) {
        if r.shape() != t.shape() {
            return Err(HvedError::shape("l2_recon_loss", format!("{:?} vs {:?}", r.shape(), t.shape())));
        }
        let se: f64 = r.data().iter().zip(t.data()).map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).powi(2)).sum();
        total += se / r.numel() as f64;
    }
    Ok(total / recons.len() as f64)
}

fn seg_spatial(g: &Graph<impl Real>, logits: NodeId, op: &'static str) -> Result<(usize, Vec<usize>)> {
    match g.shape(logits) {
        [1, c, rest @ ..] if !rest.is_empty() => Ok((*c, rest.to_vec())),
        s => Err(HvedError::shape(op, format!("expected (1, C, spatial...), got {s:?}"))),
    }
}

/// Soft Dice loss of `softmax(logits)` against `labels`, as a graph node.
pub fn graph_dice_loss<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[u8],
    exclude_background: bool,
) -> Result<NodeId> {
    let (c, spatial) = seg_spatial(g, logits, "dice_loss")?;
    let first = usize::from(exclude_background);
    if c <= first {
        return Err(HvedError::InvalidArgument("dice_loss needs a foreground class".into()));
    }
    let q = one_hot::<T>(labels, c, &spatial)?;
    let q_sum = {
        let s: usize = spatial.iter().product();
        Tensor::from_fn(vec![c], |ch| q.data()[ch * s..(ch + 1) * s].iter().copied().sum::<T>())
    };
    let p = g.softmax(logits)?;
    let qn = g.constant(q.batched());
    let pq = g.mul(p, qn)?;
    let inter = g.channel_sum(pq)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let sp = g.channel_sum(p)?;
    let sq = g.constant(q_sum);
    let den = g.add(sp, sq)?;
    let den = g.add_scalar(den, DICE_SMOOTH)?;
    let ratio = g.div(num, den)?;
    let kept = if exclude_background {
        let mask = g.constant(Tensor::from_fn(vec![c], |ch| if ch == 0 { T::zero() } else { T::one() }));
        g.mul(ratio, mask)?
    } else {
        ratio
    };
    let total = g.sum(kept)?;
    let mean = g.scale(total, -1.0 / (c - first) as f64)?;
    g.add_scalar(mean, 1.0)
}

/// Voxel-mean cross-entropy of `logits` against `labels`, as a graph node.
pub fn graph_cross_entropy<T: Real>(g: &mut Graph<T>, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
    let (c, spatial) = seg_spatial(g, logits, "cross_entropy")?;
    let q = g.constant(one_hot::<T>(labels, c, &spatial)?.batched());
    let ls = g.log_softmax(logits)?;
    let picked = g.mul(ls, q)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / labels.len() as f64)
}

/// Mean squared error of each reconstruction node against its target,
/// averaged over targets. Targets are unbatched `(1, D, H, W)` images.
pub fn graph_l2<T: Real>(g: &mut Graph<T>, recons: &[NodeId], targets: &[Tensor<T>]) -> Result<NodeId> {
    if recons.len() != targets.len() || recons.is_empty() {
        return Err(HvedError::shape("l2_recon_loss", format!("{} reconstructions, {} targets", recons.len(), targets.len())));
    }
    let mut terms = Vec::with_capacity(recons.len());
    for (&r, t) in recons.iter().zip(targets) {
        let t = g.constant(t.clone().batched());
        let d = g.sub(r, t)?;
        let sq = g.mul(d, d)?;
        terms.push(g.mean(sq)?);
    }
    let total = g.add_all(&terms)?;
    g.scale(total, 1.0 / recons.len() as f64)
}

/// Weights of the auxiliary loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l2: f64,
    pub kl: f64,
    pub exclude_background: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l2: 0.1, kl: 0.1, exclude_background: false }
    }
}

/// Loss components in double precision.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub cross_entropy: f64,
    pub l2_recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(dice: f64, cross_entropy: f64, l2_recon: f64, kl: f64, w: &LossWeights) -> Self {
        let mut b = LossBreakdown { dice, cross_entropy, l2_recon, kl, total: 0.0 };
        b.total = b.weighted_total(w);
        b
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.dice + self.cross_entropy + w.l2 * self.l2_recon + w.kl * self.kl
    }
}

/// Adds the composite loss to the graph of `fr`. Returns the scalar node to
/// differentiate and the component values. The moments baseline has neither
/// reconstructions nor a KL term; those components are zero.
pub fn total_loss<T: Real>(
    fr: &mut ForwardResult<T>,
    images: &[Tensor<T>],
    labels: &[u8],
    w: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    let g = &mut fr.graph;
    let dice = graph_dice_loss(g, fr.seg_logits, labels, w.exclude_background)?;
    let ce = graph_cross_entropy(g, fr.seg_logits, labels)?;
    let mut terms = vec![dice, ce];
    let l2 = if fr.reconstructions.is_empty() {
        None
    } else {
        let l2 = graph_l2(g, &fr.reconstructions, images)?;
        terms.push(g.scale(l2, w.l2)?);
        Some(l2)
    };
    if let Some(kl) = fr.kl_total {
        terms.push(g.scale(kl, w.kl)?);
    }
    let total = g.add_all(&terms)?;
    let val = |id: Option<NodeId>| id.map_or(0.0, |id| g.value(id).item().to_f64().unwrap());
    let b = LossBreakdown::new(val(Some(dice)), val(Some(ce)), val(l2), val(fr.kl_total), w);
    Ok((total, b))
}

/// Evaluation region, a union of labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Complete,
    Core,
    Enhancing,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Complete, Region::Core, Region::Enhancing];

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Complete => label != 0,
            Region::Core => label == LABEL_NECROTIC || label == LABEL_ENHANCING,
            Region::Enhancing => label == LABEL_ENHANCING,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Complete => "complete",
            Region::Core => "core",
            Region::Enhancing => "enhancing",
        }
    }
}

impl FromStr for Region {
    type Err = HvedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(Region::Complete),
            "core" => Ok(Region::Core),
            "enhancing" => Ok(Region::Enhancing),
            other => Err(HvedError::UnknownRegion(other.to_string())),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dice overlap in percent of the region masks of two label volumes. Two
/// empty masks score 100.
pub fn dice_score(pred: &[u8], truth: &[u8], region: Region) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(HvedError::shape("dice_score", format!("{} vs {} voxels", pred.len(), truth.len())));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (x, y) = (region.contains(p), region.contains(t));
        a += x as usize;
        b += y as usize;
        both += (x && y) as usize;
    }
    Ok(if a + b == 0 { 100.0 } else { 200.0 * both as f64 / (a + b) as f64 })
}

/// Dice per region, in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegionDice {
    pub complete: f64,
    pub core: f64,
    pub enhancing: f64,
}

impl RegionDice {
    pub fn compute(pred: &[u8], truth: &[u8]) -> Result<Self> {
        Ok(RegionDice {
            complete: dice_score(pred, truth, Region::Complete)?,
            core: dice_score(pred, truth, Region::Core)?,
            enhancing: dice_score(pred, truth, Region::Enhancing)?,
        })
    }

    pub fn get(&self, region: Region) -> f64 {
        match region {
            Region::Complete => self.complete,
            Region::Core => self.core,
            Region::Enhancing => self.enhancing,
        }
    }

    /// Component-wise arithmetic mean; zero for an empty slice.
    pub fn mean(rows: &[RegionDice]) -> RegionDice {
        if rows.is_empty() {
            return RegionDice::default();
        }
        let n = rows.len() as f64;
        RegionDice {
            complete: rows.iter().map(|r| r.complete).sum::<f64>() / n,
            core: rows.iter().map(|r| r.core).sum::<f64>() / n,
            enhancing: rows.iter().map(|r| r.enhancing).sum::<f64>() / n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::HvedRng;
    use rand::Rng;

    fn random_labels(n: usize, c: u8, rng: &mut HvedRng) -> Vec<u8> {
        (0..n).map(|_| rng.random_range(0..c)).collect()
    }

    fn softmax_classes(logits: &Tensor<f64>) -> Tensor<f64> {
        let (c, s) = (logits.shape()[0], logits.numel() / logits.shape()[0]);
        let x = logits.data();
        Tensor::from_fn(logits.shape().to_vec(), |i| {
            let v = i % s;
            let z: f64 = (0..c).map(|ch| x[ch * s + v].exp()).sum();
            x[i].exp() / z
        })
    }

    #[test]
    fn dice_loss_of_perfect_prediction_is_zero() {
        let mut rng = HvedRng::seed_from_u64(1);
        let labels = random_labels(64, 4, &mut rng);
        let q = one_hot::<f64>(&labels, 4, &[4, 4, 4]).unwrap();
        assert!(dice_loss(&q, &q, false).unwrap().abs() < 1e-6);
    }

    #[test]
    fn dice_loss_uniform_two_classes_hand_count() {
        // N voxels all class 0, p = 0.5 everywhere:
        // class 0: 2·0.5N / (0.5N + N) = 2/3; class 1: s / (0.5N + s) ≈ 0.
        let n = 1000.0;
        let p = Tensor::<f64>::full(vec![2, 10, 10, 10], 0.5);
        let q = one_hot::<f64>(&[0u8; 1000], 2, &[10, 10, 10]).unwrap();
        let s = DICE_SMOOTH;
        let expect = 1.0 - 0.5 * ((n + s) / (1.5 * n + s) + s / (0.5 * n + s));
        assert!((dice_loss(&p, &q, false).unwrap() - expect).abs() < 1e-12);
        assert!((expect - (1.0 - 1.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_analytic_values() {
        let uniform = Tensor::<f64>::zeros(vec![4, 2, 2, 2]);
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        assert!((cross_entropy_loss(&uniform, &labels).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sure = Tensor::<f64>::from_fn(vec![4, 2, 2, 2], |i| if i / 8 == labels[i % 8] as usize { 20.0 } else { 0.0 });
        assert!(cross_entropy_loss(&sure, &labels).unwrap() < 1e-8);
        assert!(matches!(cross_entropy_loss(&uniform, &[4, 0, 0, 0, 0, 0, 0, 0]), Err(HvedError::LabelOutOfRange { label: 4, classes: 4 })));
    }

    #[test]
    fn cross_entropy_matches_naive_log_softmax() {
        let mut rng = HvedRng::seed_from_u64(2);
        let logits = Tensor::<f64>::randn(vec![4, 3, 3, 3], &mut rng).map(|x| 3.0 * x);
        let labels = random_labels(27, 4, &mut rng);
        let mut naive = 0.0;
        for (v, &l) in labels.iter().enumerate() {
            let z: f64 = (0..4).map(|c| logits.data()[c * 27 + v].exp()).sum();
            naive -= (logits.data()[l as usize * 27 + v].exp() / z).ln();
        }
        naive /= 27.0;
        assert!((cross_entropy_loss(&logits, &labels).unwrap() - naive).abs() < 1e-10);
    }

    #[test]
    fn l2_values() {
        let mut rng = HvedRng::seed_from_u64(3);
        let t: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(vec![1, 3, 3, 3], &mut rng)).collect();
        assert_eq!(l2_recon_loss(&t, &t).unwrap(), 0.0);
        let shifted: Vec<_> = t.iter().map(|x| x.map(|v| v + 1.0)).collect();
        assert!((l2_recon_loss(&shifted, &t).unwrap() - 1.0).abs() < 1e-12);
        let r: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(vec![1, 3, 3, 3], &mut rng)).collect();
        let mut naive = 0.0;
        for m in 0..4 {
            let mut acc = 0.0;
            for v in 0..27 {
                let d = r[m].data()[v] - t[m].data()[v];
                acc += d * d;
            }
            naive += acc / 27.0;
        }
        assert!((l2_recon_loss(&r, &t).unwrap() - naive / 4.0).abs() < 1e-10);
    }

    #[test]
    fn graph_losses_match_tensor_losses() {
        let mut rng = HvedRng::seed_from_u64(4);
        let logits = Tensor::<f64>::randn(vec![4, 3, 3, 3], &mut rng);
        let labels = random_labels(27, 4, &mut rng);
        for exclude in [false, true] {
            let mut g = Graph::new();
            let x = g.input(logits.clone().batched());
            let d = graph_dice_loss(&mut g, x, &labels, exclude).unwrap();
            let ce = graph_cross_entropy(&mut g, x, &labels).unwrap();
            let q = one_hot(&labels, 4, &[3, 3, 3]).unwrap();
            let want = dice_loss(&softmax_classes(&logits), &q, exclude).unwrap();
            assert!((g.value(d).item() - want).abs() < 1e-12);
            assert!((g.value(ce).item() - cross_entropy_loss(&logits, &labels).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let mut rng = HvedRng::seed_from_u64(5);
        let logits = Tensor::<f64>::randn(vec![1, 4, 3, 3, 3], &mut rng);
        let labels = random_labels(27, 4, &mut rng);
        for exclude in [false, true] {
            let r = grad_check(|g, ids| graph_dice_loss(g, ids[0], &labels, exclude), std::slice::from_ref(&logits), 1e-6, 1e-4, None).unwrap();
            assert!(r.passed, "dice {r:?}");
        }
        let r = grad_check(|g, ids| graph_cross_entropy(g, ids[0], &labels), std::slice::from_ref(&logits), 1e-6, 1e-4, None).unwrap();
        assert!(r.passed, "ce {r:?}");
        let targets: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(vec![1, 2, 2, 2], &mut rng)).collect();
        let recons: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(vec![1, 1, 2, 2, 2], &mut rng)).collect();
        let r = grad_check(|g, ids| graph_l2(g, ids, &targets), &recons, 1e-6, 1e-4, None).unwrap();
        assert!(r.passed, "l2 {r:?}");
    }

    #[test]
    fn breakdown_weighted_sum() {
        let w = LossWeights::default();
        assert_eq!(LossBreakdown::new(0.0, 0.0, 0.0, 0.0, &w).total, 0.0);
        let b = LossBreakdown::new(0.5, 0.7, 2.0, 3.0, &w);
        assert!((b.total - 1.7).abs() < 1e-15);
        assert_eq!(b.total, b.weighted_total(&w));
    }

    #[test]
    fn dice_score_cases() {
        let truth = [0, 1, 2, 3, 3, 0];
        for r in Region::ALL {
            assert_eq!(dice_score(&truth, &truth, r).unwrap(), 100.0);
        }
        assert_eq!(dice_score(&[3, 3, 0, 0], &[0, 0, 3, 3], Region::Enhancing).unwrap(), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0], Region::Core).unwrap(), 100.0);
        assert_eq!(dice_score(&[0, 0], &[1, 0], Region::Core).unwrap(), 0.0);
        // 100 + 100 voxels, 50 shared.
        let mut a = vec![0u8; 300];
        let mut b = vec![0u8; 300];
        a[..100].fill(2);
        b[50..150].fill(1);
        assert_eq!(dice_score(&a, &b, Region::Complete).unwrap(), 50.0);
        assert_eq!("core".parse::<Region>().unwrap(), Region::Core);
        assert!(matches!("tumour".parse::<Region>(), Err(HvedError::UnknownRegion(_))));
    }

    #[test]
    fn soft_dice_on_hard_predictions_agrees_with_score() {
        let mut rng = HvedRng::seed_from_u64(6);
        let truth = random_labels(125, 4, &mut rng);
        let pred: Vec<u8> = truth.iter().map(|&l| if rng.random_bool(0.3) { rng.random_range(0..4) } else { l }).collect();
        // Region binarisation applied to both sides gives a two-class problem.
        for r in Region::ALL {
            let bin = |l: &[u8]| l.iter().map(|&x| r.contains(x) as u8).collect::<Vec<_>>();
            let p = one_hot::<f64>(&bin(&pred), 2, &[5, 5, 5]).unwrap();
            let q = one_hot::<f64>(&bin(&truth), 2, &[5, 5, 5]).unwrap();
            let soft = 1.0 - dice_loss(&p, &q, true).unwrap();
            assert!((soft - dice_score(&pred, &truth, r).unwrap() / 100.0).abs() < 1e-6);
        }
    }
}
