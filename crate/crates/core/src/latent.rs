//! Diagonal-Gaussian algebra for the shared latent space and the
//! modality-subset mixture.
//!
//! Every posterior is parameterised by its mean and log-variance. Experts are
//! fused with the standard-normal prior by summing precisions:
//!
//! ```text
//! Σ = (1 + Σᵢ Σᵢ⁻¹)⁻¹        μ = Σ · Σᵢ Σᵢ⁻¹ μᵢ
//! ```
//!
//! elementwise on the diagonals. Two flavours of each operation exist: plain
//! tensor functions, and graph builders used inside the network so gradients
//! flow through fusion, sampling and the KL term.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{HvedError, Result};
use crate::tensor::{Real, Tensor};

/// Log-variances are clamped to this range before exponentiation.
pub const LOG_VAR_MIN: f64 = -14.0;
pub const LOG_VAR_MAX: f64 = 14.0;

pub const NUM_MODALITIES: usize = 4;

/// Imaging channels, in the fixed FLAIR, T1, T1c, T2 order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Flair = 0,
    T1 = 1,
    T1c = 2,
    T2 = 3,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::Flair, Modality::T1, Modality::T1c, Modality::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Lower-case name used for parameter and file names.
    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1c => "t1c",
            Modality::T2 => "t2",
        }
    }
}

/// Non-empty set of modalities, bit `i` standing for modality index `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalitySubset {
    mask: u8,
    n: u8,
}

impl ModalitySubset {
    pub fn new(mask: u8, n: usize) -> Result<Self> {
        if n == 0 || n > 8 {
            return Err(HvedError::InvalidArgument(format!("unsupported modality count {n}")));
        }
        if mask == 0 {
            return Err(HvedError::EmptySubset);
        }
        if n < 8 && mask >> n != 0 {
            return Err(HvedError::InvalidArgument(format!("mask {mask:#b} exceeds {n} modalities")));
        }
        Ok(ModalitySubset { mask, n: n as u8 })
    }

    pub fn full(n: usize) -> Self {
        let mask = if n >= 8 { u8::MAX } else { (1u8 << n) - 1 };
        ModalitySubset { mask, n: n as u8 }
    }

    pub fn from_modalities(ms: &[Modality]) -> Result<Self> {
        let mask = ms.iter().fold(0u8, |m, x| m | (1 << x.index()));
        Self::new(mask, NUM_MODALITIES)
    }

    pub fn mask(self) -> u8 {
        self.mask
    }

    pub fn num_modalities(self) -> usize {
        self.n as usize
    }

    pub fn contains(self, index: usize) -> bool {
        index < self.n as usize && self.mask & (1 << index) != 0
    }

    pub fn has(self, m: Modality) -> bool {
        self.contains(m.index())
    }

    pub fn len(self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// Member indices in increasing order.
    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..self.n as usize).filter(move |&i| self.mask & (1 << i) != 0)
    }

    /// All `2ⁿ − 1` non-empty subsets ordered by mask.
    pub fn all(n: usize) -> Vec<Self> {
        (1..(1u16 << n)).map(|m| ModalitySubset { mask: m as u8, n: n as u8 }).collect()
    }

    /// The fifteen four-modality subsets in reporting order: singletons,
    /// pairs, triples, then the full set.
    pub fn report_order() -> Vec<Self> {
        [
            "0001", "0010", "0100", "1000", "0011", "0110", "1100", "0101", "1001", "1010", "1110",
            "1101", "1011", "0111", "1111",
        ]
        .iter()
        .map(|s| s.parse().expect("static masks are valid"))
        .collect()
    }
}

/// Formats as a 0/1 string, first character = modality 0 (FLAIR).
impl fmt::Display for ModalitySubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n as usize {
            f.write_str(if self.contains(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for ModalitySubset {
    type Err = HvedError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.len() > 8 {
            return Err(HvedError::InvalidArgument(format!("subset mask `{s}` must have 1-8 digits")));
        }
        let mut mask = 0u8;
        for (i, c) in s.chars().enumerate() {
            match c {
                '1' => mask |= 1 << i,
                '0' => {}
                _ => return Err(HvedError::InvalidArgument(format!("subset mask `{s}` must be 0/1"))),
            }
        }
        Self::new(mask, s.len())
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Mixture weights over the non-empty modality subsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetDistribution {
    n: usize,
    weights: Vec<(ModalitySubset, f64)>,
}

impl SubsetDistribution {
    /// Weights must cover every non-empty subset of `n` modalities exactly
    /// once, be non-negative and sum to one within `1e-12`.
    pub fn new(n: usize, mut weights: Vec<(ModalitySubset, f64)>) -> Result<Self> {
        weights.sort_by_key(|(s, _)| s.mask());
        let expected = ModalitySubset::all(n);
        if weights.len() != expected.len()
            || weights.iter().zip(&expected).any(|((s, _), e)| s != e)
        {
            return Err(HvedError::InvalidArgument(format!(
                "support must be exactly the {} non-empty subsets",
                expected.len()
            )));
        }
        if weights.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(HvedError::InvalidArgument("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(HvedError::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        Ok(SubsetDistribution { n, weights })
    }

    /// Draw a size uniformly in `1..=n`, then a subset of that size
    /// uniformly: `α_π = 1 / (n · C(n, |π|))`.
    pub fn uniform_size(n: usize) -> Self {
        let weights = ModalitySubset::all(n)
            .into_iter()
            .map(|s| (s, 1.0 / (n as f64 * binomial(n, s.len()))))
            .collect();
        SubsetDistribution { n, weights }
    }

    pub fn point_mass(subset: ModalitySubset) -> Self {
        let n = subset.num_modalities();
        let weights = ModalitySubset::all(n)
            .into_iter()
            .map(|s| (s, if s == subset { 1.0 } else { 0.0 }))
            .collect();
        SubsetDistribution { n, weights }
    }

    pub fn num_modalities(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &[(ModalitySubset, f64)] {
        &self.weights
    }

    pub fn weight(&self, subset: ModalitySubset) -> f64 {
        self.weights.iter().find(|(s, _)| *s == subset).map_or(0.0, |(_, w)| *w)
    }

    /// Ancestral draw of the mixture component by inverse CDF.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ModalitySubset {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(s, w) in &self.weights {
            acc += w;
            if u < acc {
                return s;
            }
        }
        // u landed in the rounding slack above the last cumulative weight
        self.weights.iter().rev().find(|(_, w)| *w > 0.0).expect("some positive weight").0
    }
}

pub fn draw_subset<R: Rng + ?Sized>(d: &SubsetDistribution, rng: &mut R) -> ModalitySubset {
    d.draw(rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian<T: Real = f64> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Real> DiagonalGaussian<T> {
    pub fn new(mu: Tensor<T>, log_var: Tensor<T>) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(HvedError::shape(
                "gaussian",
                format!("mu {:?} vs log_var {:?}", mu.shape(), log_var.shape()),
            ));
        }
        Ok(DiagonalGaussian { mu, log_var })
    }

    pub fn standard(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        DiagonalGaussian { mu: Tensor::zeros(shape.clone()), log_var: Tensor::zeros(shape) }
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn variance(&self) -> Tensor<T> {
        self.log_var.map(|v| v.exp())
    }
}

fn clamp_log_var<T: Real>(v: T) -> T {
    v.max(T::lit(LOG_VAR_MIN)).min(T::lit(LOG_VAR_MAX))
}

/// Precision-weighted product of diagonal Gaussians, optionally with the
/// standard-normal prior as an extra unit-precision, zero-mean expert.
///
/// Per element the expert terms are summed in a canonical (sorted) order, so
/// the result is bitwise independent of the order of `experts`.
pub fn gaussian_product<T: Real>(
    experts: &[DiagonalGaussian<T>],
    include_prior: bool,
) -> Result<DiagonalGaussian<T>> {
    let first = experts.first().ok_or(HvedError::EmptyExperts)?;
    for e in experts {
        if e.shape() != first.shape() || e.log_var.shape() != first.shape() {
            return Err(HvedError::shape(
                "gaussian_product",
                format!("{:?} vs {:?}", e.shape(), first.shape()),
            ));
        }
    }
    let n = first.mu.numel();
    let mut mu = Vec::with_capacity(n);
    let mut log_var = Vec::with_capacity(n);
    let mut terms: Vec<(T, T)> = Vec::with_capacity(experts.len());
    for i in 0..n {
        terms.clear();
        for e in experts {
            let precision = (-clamp_log_var(e.log_var.data()[i])).exp();
            terms.push((precision, precision * e.mu.data()[i]));
        }
        terms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
        let mut precision = if include_prior { T::one() } else { T::zero() };
        let mut weighted = T::zero();
        for &(p, w) in &terms {
            precision += p;
            weighted += w;
        }
        mu.push(weighted / precision);
        log_var.push(-precision.ln());
    }
    let shape = first.shape().to_vec();
    DiagonalGaussian::new(Tensor::new(shape.clone(), mu)?, Tensor::new(shape, log_var)?)
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1)`
pub fn kl_to_standard_normal<T: Real>(g: &DiagonalGaussian<T>) -> f64 {
    g.mu
        .data()
        .iter()
        .zip(g.log_var.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            0.5 * (m * m + lv.exp() - lv - 1.0)
        })
        .sum()
}

/// Reparameterised draw `μ + exp(½·log σ²) ⊙ ε`.
pub fn sample<T: Real, R: Rng + ?Sized>(g: &DiagonalGaussian<T>, rng: &mut R) -> Tensor<T> {
    let eps = Tensor::<T>::randn(g.shape().to_vec(), rng);
    sample_with_noise(g, &eps)
}

pub fn sample_with_noise<T: Real>(g: &DiagonalGaussian<T>, eps: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    Tensor::from_fn(g.shape().to_vec(), |i| {
        g.mu.data()[i] + (half * g.log_var.data()[i]).exp() * eps.data()[i]
    })
}

/// Per-level posteriors of the multi-scale latent, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleLatent<T: Real = f64> {
    pub levels: Vec<DiagonalGaussian<T>>,
}

/// Handles to a Gaussian living inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianNode {
    pub mu: NodeId,
    pub log_var: NodeId,
}

impl GaussianNode {
    pub fn value<T: Real>(&self, g: &Graph<T>) -> DiagonalGaussian<T> {
        DiagonalGaussian { mu: g.value(self.mu).clone(), log_var: g.value(self.log_var).clone() }
    }
}

/// How the per-element KL terms of one latent level are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlReduction {
    Sum,
    Mean,
}

impl FromStr for KlReduction {
    type Err = HvedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(KlReduction::Sum),
            "mean" => Ok(KlReduction::Mean),
            _ => Err(HvedError::InvalidArgument(format!("kl reduction `{s}`"))),
        }
    }
}

impl fmt::Display for KlReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlReduction::Sum => "sum",
            KlReduction::Mean => "mean",
        })
    }
}

/// In-graph product of experts. Experts are accumulated in slice order.
pub fn graph_product<T: Real>(
    g: &mut Graph<T>,
    experts: &[GaussianNode],
    include_prior: bool,
) -> Result<GaussianNode> {
    if experts.is_empty() {
        return Err(HvedError::EmptyExperts);
    }
    let mut precisions = Vec::with_capacity(experts.len());
    let mut weighted = Vec::with_capacity(experts.len());
    for e in experts {
        let lv = g.clamp(e.log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        let neg = g.neg(lv)?;
        let p = g.exp(neg)?;
        weighted.push(g.mul(p, e.mu)?);
        precisions.push(p);
    }
    let mut precision = g.add_all(&precisions)?;
    if include_prior {
        precision = g.add_scalar(precision, 1.0)?;
    }
    let weighted = g.add_all(&weighted)?;
    let mu = g.div(weighted, precision)?;
    let log_p = g.log(precision)?;
    let log_var = g.neg(log_p)?;
    Ok(GaussianNode { mu, log_var })
}

/// In-graph KL to the standard normal, summed or averaged over elements.
pub fn graph_kl<T: Real>(g: &mut Graph<T>, q: GaussianNode, reduction: KlReduction) -> Result<NodeId> {
    let mu2 = g.mul(q.mu, q.mu)?;
    let var = g.exp(q.log_var)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, q.log_var)?;
    let c = g.add_scalar(b, -1.0)?;
    let total = match reduction {
        KlReduction::Sum => g.sum(c)?,
        KlReduction::Mean => g.mean(c)?,
    };
    g.scale(total, 0.5)
}

/// In-graph reparameterised sample with externally supplied noise.
pub fn graph_sample_with_noise<T: Real>(
    g: &mut Graph<T>,
    q: GaussianNode,
    eps: Tensor<T>,
) -> Result<NodeId> {
    let eps = g.constant(eps);
    let half = g.scale(q.log_var, 0.5)?;
    let std = g.exp(half)?;
    let noise = g.mul(std, eps)?;
    g.add(q.mu, noise)
}

pub fn graph_sample<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    q: GaussianNode,
    rng: &mut R,
) -> Result<NodeId> {
    let eps = Tensor::randn(g.shape(q.mu).to_vec(), rng);
    graph_sample_with_noise(g, q, eps)
}

/// Monte-Carlo check of the mixture KL convexity bound.
#[derive(Clone, Copy, Debug)]
pub struct MixtureBound {
    /// Monte-Carlo estimate of `KL(Σ α_π q_π ‖ p)`.
    pub lhs: f64,
    /// Standard error of `lhs`.
    pub lhs_stderr: f64,
    /// Closed-form `Σ α_π KL(q_π ‖ p)`.
    pub rhs: f64,
}

fn log_density(g: &DiagonalGaussian<f64>, z: &[f64]) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_5;
    g.mu
        .data()
        .iter()
        .zip(g.log_var.data())
        .zip(z)
        .map(|((&m, &lv), &x)| -0.5 * (LN_2PI + lv + (x - m) * (x - m) / lv.exp()))
        .sum()
}

/// Estimates both sides of `KL(q ‖ p) ≤ Σ_π α_π KL(q_π ‖ p)` for the mixture
/// `q = Σ_π α_π q_π`, sampling the mixture ancestrally.
pub fn mixture_kl_bound_check<R: Rng + ?Sized>(
    per_subset: &[(ModalitySubset, DiagonalGaussian<f64>)],
    dist: &SubsetDistribution,
    num_samples: usize,
    rng: &mut R,
) -> Result<MixtureBound> {
    let comps: Vec<(f64, &DiagonalGaussian<f64>)> = per_subset
        .iter()
        .map(|(s, q)| (dist.weight(*s), q))
        .filter(|(w, _)| *w > 0.0)
        .collect();
    if comps.is_empty() || num_samples < 2 {
        return Err(HvedError::InvalidArgument("need weighted components and ≥2 samples".into()));
    }
    let prior = DiagonalGaussian::standard(comps[0].1.shape().to_vec());
    let rhs = comps.iter().map(|(w, q)| w * kl_to_standard_normal(q)).sum();

    let total_w: f64 = comps.iter().map(|(w, _)| w).sum();
    let mut z = vec![0.0; comps[0].1.mu.numel()];
    let mut logs = vec![0.0; comps.len()];
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..num_samples {
        // ancestral: component, then point
        let u: f64 = rng.random::<f64>() * total_w;
        let mut acc = 0.0;
        let mut pick = comps.len() - 1;
        for (j, (w, _)) in comps.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = j;
                break;
            }
        }
        let q = comps[pick].1;
        for (i, zi) in z.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            *zi = q.mu.data()[i] + (0.5 * q.log_var.data()[i]).exp() * e;
        }
        for (j, (w, qj)) in comps.iter().enumerate() {
            logs[j] = (w / total_w).ln() + log_density(qj, &z);
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_mix = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let x = log_mix - log_density(&prior, &z);
        // Welford
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (num_samples - 1) as f64;
    Ok(MixtureBound { lhs: mean, lhs_stderr: (var / num_samples as f64).sqrt(), rhs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::HvedRng;

    fn g1(mu: f64, var: f64) -> DiagonalGaussian<f64> {
        DiagonalGaussian::new(
            Tensor::from_f64(vec![1], &[mu]).unwrap(),
            Tensor::from_f64(vec![1], &[var.ln()]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn one_standard_expert_halves_variance() {
        let f = gaussian_product(&[g1(0.0, 1.0)], true).unwrap();
        assert_eq!(f.mu.item(), 0.0);
        assert!((f.variance().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_standard_experts_third_variance() {
        let f = gaussian_product(&[g1(0.0, 1.0), g1(0.0, 1.0)], true).unwrap();
        assert_eq!(f.mu.item(), 0.0);
        assert!((f.variance().item() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bare_product_without_prior() {
        let f = gaussian_product(&[g1(2.0, 1.0), g1(0.0, 1.0)], false).unwrap();
        assert!((f.mu.item() - 1.0).abs() < 1e-15);
        assert!((f.variance().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn product_errors() {
        assert!(matches!(gaussian_product::<f64>(&[], true), Err(HvedError::EmptyExperts)));
        let a = DiagonalGaussian::<f64>::standard(vec![2]);
        let b = DiagonalGaussian::<f64>::standard(vec![3]);
        assert!(gaussian_product(&[a, b], true).is_err());
    }

    #[test]
    fn graph_product_matches_tensor_product() {
        let mut rng = HvedRng::seed_from_u64(4);
        let experts: Vec<DiagonalGaussian<f64>> = (0..3)
            .map(|_| {
                DiagonalGaussian::new(Tensor::randn(vec![2, 3], &mut rng), Tensor::randn(vec![2, 3], &mut rng))
                    .unwrap()
            })
            .collect();
        let direct = gaussian_product(&experts, true).unwrap();
        let mut g = Graph::new();
        let nodes: Vec<GaussianNode> = experts
            .iter()
            .map(|e| GaussianNode { mu: g.input(e.mu.clone()), log_var: g.input(e.log_var.clone()) })
            .collect();
        let fused = graph_product(&mut g, &nodes, true).unwrap().value(&g);
        assert!(fused.mu.max_abs_diff(&direct.mu) < 1e-12);
        assert!(fused.log_var.max_abs_diff(&direct.log_var) < 1e-12);
    }

    #[test]
    fn kl_plug_ins() {
        assert_eq!(kl_to_standard_normal(&DiagonalGaussian::<f64>::standard(vec![5])), 0.0);
        assert!((kl_to_standard_normal(&g1(1.0, 1.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn graph_kl_matches_closed_form() {
        let mut rng = HvedRng::seed_from_u64(8);
        let q = DiagonalGaussian::new(Tensor::randn(vec![7], &mut rng), Tensor::randn(vec![7], &mut rng)).unwrap();
        let mut g = Graph::<f64>::new();
        let node = GaussianNode { mu: g.input(q.mu.clone()), log_var: g.input(q.log_var.clone()) };
        let s = graph_kl(&mut g, node, KlReduction::Sum).unwrap();
        let m = graph_kl(&mut g, node, KlReduction::Mean).unwrap();
        let closed = kl_to_standard_normal(&q);
        assert!((g.value(s).item() - closed).abs() < 1e-12);
        assert!((g.value(m).item() - closed / 7.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_variance_sample_is_mean() {
        let mut rng = HvedRng::seed_from_u64(2);
        let q = DiagonalGaussian::new(
            Tensor::<f64>::from_f64(vec![4], &[1.0, -2.0, 0.5, 3.0]).unwrap(),
            Tensor::full(vec![4], -20.0),
        )
        .unwrap();
        let z = sample(&q, &mut rng);
        assert!(z.max_abs_diff(&q.mu) < 1e-4);
    }

    #[test]
    fn sample_gradient_wrt_mean_is_ones() {
        let mut rng = HvedRng::seed_from_u64(6);
        let mut g = Graph::<f64>::new();
        let q = GaussianNode {
            mu: g.input(Tensor::randn(vec![3, 2], &mut rng)),
            log_var: g.input(Tensor::randn(vec![3, 2], &mut rng)),
        };
        let z = graph_sample(&mut g, q, &mut rng).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(q.mu).unwrap(), &Tensor::ones(vec![3, 2]));
    }

    #[test]
    fn uniform_size_weights() {
        let d = SubsetDistribution::uniform_size(4);
        assert_eq!(d.weights().len(), 15);
        let full: ModalitySubset = "1111".parse().unwrap();
        let flair: ModalitySubset = "1000".parse().unwrap();
        let pair: ModalitySubset = "0101".parse().unwrap();
        assert!((d.weight(full) - 0.25).abs() < 1e-15);
        assert!((d.weight(flair) - 1.0 / 16.0).abs() < 1e-15);
        assert!((d.weight(pair) - 1.0 / 24.0).abs() < 1e-15);
        // validated constructor accepts its own output
        SubsetDistribution::new(4, d.weights().to_vec()).unwrap();
    }

    #[test]
    fn distribution_validation() {
        let mut w = SubsetDistribution::uniform_size(4).weights().to_vec();
        w[0].1 += 0.01;
        assert!(SubsetDistribution::new(4, w.clone()).is_err());
        w.pop();
        assert!(SubsetDistribution::new(4, w).is_err());
    }

    #[test]
    fn point_mass_always_draws_its_subset() {
        let full = ModalitySubset::full(4);
        let d = SubsetDistribution::point_mass(full);
        let mut rng = HvedRng::seed_from_u64(1);
        assert!((0..1000).all(|_| d.draw(&mut rng) == full));
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let d = SubsetDistribution::uniform_size(4);
        let mut a = HvedRng::seed_from_u64(77);
        let mut b = HvedRng::seed_from_u64(77);
        let xs: Vec<_> = (0..200).map(|_| d.draw(&mut a)).collect();
        let ys: Vec<_> = (0..200).map(|_| d.draw(&mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn subset_parsing_and_display() {
        let s: ModalitySubset = "0001".parse().unwrap();
        assert!(s.has(Modality::T2));
        assert_eq!(s.len(), 1);
        assert_eq!(s.to_string(), "0001");
        assert!(matches!("0000".parse::<ModalitySubset>(), Err(HvedError::EmptySubset)));
        assert!("01x1".parse::<ModalitySubset>().is_err());
        let order = ModalitySubset::report_order();
        assert_eq!(order.len(), 15);
        let mut sorted = order.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 15);
    }

    #[test]
    fn degenerate_mixtures() {
        let mut rng = HvedRng::seed_from_u64(12);
        let d = SubsetDistribution::uniform_size(4);
        let prior_only: Vec<_> = ModalitySubset::all(4)
            .into_iter()
            .map(|s| (s, DiagonalGaussian::standard(vec![2])))
            .collect();
        let b = mixture_kl_bound_check(&prior_only, &d, 1000, &mut rng).unwrap();
        assert!(b.lhs.abs() < 1e-12 && b.rhs == 0.0);

        let q = DiagonalGaussian::new(
            Tensor::from_f64(vec![2], &[0.7, -0.2]).unwrap(),
            Tensor::from_f64(vec![2], &[-0.5, 0.3]).unwrap(),
        )
        .unwrap();
        let same: Vec<_> = ModalitySubset::all(4).into_iter().map(|s| (s, q.clone())).collect();
        let b = mixture_kl_bound_check(&same, &d, 50_000, &mut rng).unwrap();
        assert!((b.lhs - b.rhs).abs() < 4.0 * b.lhs_stderr.max(1e-3), "{b:?}");
    }
}
