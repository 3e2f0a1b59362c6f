//! Hetero-modal encoder/decoder network.
//!
//! One encoder per modality maps its image to a ladder of per-level latent
//! Gaussians. The members of the observed subset are fused level by level and
//! independent decoders (one per modality, one for the segmentation) turn the
//! fused ladder back into volumes, the coarsest level entering first and each
//! finer level joining through a skip concatenation.
//!
//! Graph tensors are `(1, C, D, H, W)`; the public entry points take and
//! return unbatched `(C, D, H, W)` volumes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{HvedError, Result};
use crate::latent::{
    graph_kl, graph_product, DiagonalGaussian, GaussianNode, KlReduction, Modality, ModalitySubset,
    MultiScaleLatent, LOG_VAR_MAX, LOG_VAR_MIN, NUM_MODALITIES,
};
use crate::tensor::{Real, Tensor};

pub const NUM_CLASSES: usize = 4;
pub const LEAKY_SLOPE: f64 = 0.01;

/// How per-modality codes are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Product of Gaussian experts with the standard-normal prior.
    Poe,
    /// Mean and population variance of the per-modality codes, decoded
    /// deterministically (non-variational baseline).
    Moments,
}

impl FromStr for FusionMode {
    type Err = HvedError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poe" => Ok(FusionMode::Poe),
            "moments" => Ok(FusionMode::Moments),
            _ => Err(HvedError::InvalidArgument(format!("fusion mode `{s}`"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Poe => "poe",
            FusionMode::Moments => "moments",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub latent_channels: Vec<usize>,
    pub patch_size: usize,
    pub num_modalities: usize,
    pub num_classes: usize,
    pub fusion: FusionMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 4,
            channels: vec![8, 16, 32, 64],
            latent_channels: vec![4, 8, 16, 32],
            patch_size: 32,
            num_modalities: NUM_MODALITIES,
            num_classes: NUM_CLASSES,
            fusion: FusionMode::Poe,
        }
    }
}

/// Output of a decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Image(Modality),
    Segmentation,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Image(m) => m.name(),
            Target::Segmentation => "seg",
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HvedError::Config { key: "network".into(), msg });
        if self.levels == 0 {
            return bad("levels must be positive".into());
        }
        if self.channels.len() != self.levels || self.latent_channels.len() != self.levels {
            return bad(format!(
                "{} levels need {} channel and latent-channel entries",
                self.levels, self.levels
            ));
        }
        if self.channels.iter().chain(&self.latent_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        let div = 1usize << (self.levels - 1);
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(div) {
            return bad(format!("patch size {} not divisible by {div}", self.patch_size));
        }
        if self.num_modalities != NUM_MODALITIES {
            return bad(format!("exactly {NUM_MODALITIES} modalities are supported"));
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        Ok(())
    }

    /// Spatial edge of level `k` (0 = finest).
    pub fn level_edge(&self, k: usize) -> usize {
        self.patch_size >> k
    }

    /// Decoders present for this fusion mode. The moments baseline is a
    /// segmentation network and has no image decoders.
    pub fn targets(&self) -> Vec<Target> {
        let mut t = Vec::new();
        if self.fusion == FusionMode::Poe {
            t.extend(Modality::ALL.iter().map(|&m| Target::Image(m)));
        }
        t.push(Target::Segmentation);
        t
    }

    /// Channels of the fused code entering decoder level `k`.
    fn code_channels(&self, k: usize) -> usize {
        match self.fusion {
            FusionMode::Poe => self.latent_channels[k],
            FusionMode::Moments => 2 * self.latent_channels[k],
        }
    }

    /// Every parameter name with its shape.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, k: usize| {
            out.insert(format!("{name}.w"), vec![c_out, c_in, k, k, k]);
            out.insert(format!("{name}.b"), vec![c_out]);
        };
        for m in Modality::ALL {
            for k in 0..self.levels {
                let p = format!("enc.{}.l{k}", m.name());
                let c = self.channels[k];
                if k == 0 {
                    conv(format!("{p}.conv0"), c, 1, 3);
                } else {
                    conv(format!("{p}.down"), c, self.channels[k - 1], 3);
                    conv(format!("{p}.conv0"), c, c, 3);
                }
                conv(format!("{p}.conv1"), c, c, 3);
                conv(format!("{p}.mu"), self.latent_channels[k], c, 1);
                if self.fusion == FusionMode::Poe {
                    conv(format!("{p}.logvar"), self.latent_channels[k], c, 1);
                }
            }
        }
        for t in self.targets() {
            let p = format!("dec.{}", t.name());
            for k in 0..self.levels {
                let from_below = if k + 1 < self.levels { self.channels[k + 1] } else { 0 };
                conv(format!("{p}.l{k}.conv"), self.channels[k], from_below + self.code_channels(k), 3);
            }
            let out_c = match t {
                Target::Image(_) => 1,
                Target::Segmentation => self.num_classes,
            };
            conv(format!("{p}.head"), out_c, self.channels[0], 1);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().values().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T: Real = f32> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> NetworkParams<T> {
    /// He-uniform weights for the leaky-ReLU convolutions, smaller uniform
    /// weights for the linear heads, zero biases. Names are visited in sorted
    /// order so the draw sequence is a pure function of the config.
    pub fn init<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let linear = name.contains(".mu.") || name.contains(".head.");
                let mut bound = if linear { (3.0 / fan_in as f64).sqrt() } else { (6.0 / fan_in as f64).sqrt() };
                if name.contains(".logvar.") {
                    bound *= 0.1;
                }
                Tensor::rand_uniform(shape, -bound, bound, rng)
            };
            tensors.insert(name, t);
        }
        Ok(NetworkParams { tensors })
    }

    pub fn zeros(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(NetworkParams {
            tensors: cfg.param_shapes().into_iter().map(|(n, s)| (n, Tensor::zeros(s))).collect(),
        })
    }

    /// Checks that names and shapes are exactly those of `cfg`.
    pub fn check(&self, cfg: &NetworkConfig) -> Result<()> {
        let shapes = cfg.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(HvedError::CheckpointMismatch(format!(
                "{} parameters, config expects {}",
                self.tensors.len(),
                shapes.len()
            )));
        }
        for (name, shape) in &shapes {
            match self.tensors.get(name) {
                None => return Err(HvedError::MissingEntry(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(HvedError::CheckpointMismatch(format!(
                        "{name}: {:?} vs expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| HvedError::MissingEntry(name.to_string()))
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Gradients for every parameter, zero where `graph` never used it.
    pub fn full_grads(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        let mut grads = graph.param_grads();
        for (name, p) in &self.tensors {
            grads.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        }
        grads
    }
}

/// Per-level code of one modality: mean head, and log-variance head when
/// the fusion is probabilistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelCode {
    pub mu: NodeId,
    pub log_var: Option<NodeId>,
}

/// Fused code of one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusedLevel {
    Gaussian(GaussianNode),
    Moments { mean: NodeId, var: NodeId },
}

/// Graph under construction together with the parameters it binds.
/// Each parameter enters the graph at most once, and only when used.
pub struct NetBuilder<'a, T: Real> {
    pub graph: Graph<T>,
    cfg: &'a NetworkConfig,
    params: &'a NetworkParams<T>,
    bound: HashMap<String, NodeId>,
}

impl<'a, T: Real> NetBuilder<'a, T> {
    pub fn new(cfg: &'a NetworkConfig, params: &'a NetworkParams<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(NetBuilder { graph: Graph::new(), cfg, params, bound: HashMap::new() })
    }

    pub fn config(&self) -> &NetworkConfig {
        self.cfg
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = self.graph.param(name, self.params.get(name)?.clone());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    fn conv(&mut self, x: NodeId, prefix: &str, stride: usize) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let pad = self.graph.shape(w)[2] / 2;
        self.graph.conv3d(x, w, Some(b), stride, pad)
    }

    fn conv_act(&mut self, x: NodeId, prefix: &str, stride: usize) -> Result<NodeId> {
        let y = self.conv(x, prefix, stride)?;
        self.graph.leaky_relu(y, LEAKY_SLOPE)
    }

    /// Spatial dims the ladder can halve `levels − 1` times.
    fn check_spatial(&self, op: &'static str, dims: &[usize]) -> Result<()> {
        let div = 1usize << (self.cfg.levels - 1);
        if dims.len() != 3 || dims.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(HvedError::shape(op, format!("spatial dims {dims:?} must be three multiples of {div}")));
        }
        Ok(())
    }

    /// Adds a `(1, 1, D, H, W)` image leaf from a `(1, D, H, W)` volume;
    /// constant unless gradients with respect to the image are wanted. The
    /// network is fully convolutional, so any size divisible by
    /// `2^(levels−1)` is accepted; training uses `patch_size`.
    pub fn image(&mut self, x: &Tensor<T>, differentiable: bool) -> Result<NodeId> {
        if x.shape().len() != 4 || x.shape()[0] != 1 {
            return Err(HvedError::shape("image", format!("expected [1, D, H, W], got {:?}", x.shape())));
        }
        self.check_spatial("image", &x.shape()[1..])?;
        let t = x.clone().batched();
        Ok(if differentiable { self.graph.input(t) } else { self.graph.constant(t) })
    }

    /// Encoder ladder of modality `m`, finest level first.
    pub fn encode_modality(&mut self, x: NodeId, m: Modality) -> Result<Vec<LevelCode>> {
        let shape = self.graph.shape(x).to_vec();
        if shape.len() != 5 || shape[..2] != [1, 1] {
            return Err(HvedError::shape("encode_modality", format!("expected [1, 1, D, H, W], got {shape:?}")));
        }
        self.check_spatial("encode_modality", &shape[2..])?;
        let mut h = x;
        let mut codes = Vec::with_capacity(self.cfg.levels);
        for k in 0..self.cfg.levels {
            let pre = format!("enc.{}.l{k}", m.name());
            if k > 0 {
                h = self.conv_act(h, &format!("{pre}.down"), 2)?;
            }
            h = self.conv_act(h, &format!("{pre}.conv0"), 1)?;
            h = self.conv_act(h, &format!("{pre}.conv1"), 1)?;
            let mu = self.conv(h, &format!("{pre}.mu"), 1)?;
            let log_var = match self.cfg.fusion {
                FusionMode::Poe => {
                    let raw = self.conv(h, &format!("{pre}.logvar"), 1)?;
                    Some(self.graph.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?)
                }
                FusionMode::Moments => None,
            };
            codes.push(LevelCode { mu, log_var });
        }
        Ok(codes)
    }

    /// Fuses the ladders of the subset members level by level.
    pub fn fuse(
        &mut self,
        codes: &BTreeMap<Modality, Vec<LevelCode>>,
        subset: ModalitySubset,
    ) -> Result<Vec<FusedLevel>> {
        let members: Vec<Modality> = subset.members().filter_map(Modality::from_index).collect();
        if members.is_empty() {
            return Err(HvedError::EmptySubset);
        }
        let mut ladders = Vec::with_capacity(members.len());
        for m in &members {
            let l = codes
                .get(m)
                .ok_or_else(|| HvedError::MissingEntry(format!("latent code for {}", m.name())))?;
            if l.len() != self.cfg.levels {
                return Err(HvedError::shape("fuse", format!("{} levels, expected {}", l.len(), self.cfg.levels)));
            }
            ladders.push(l);
        }
        let mut fused = Vec::with_capacity(self.cfg.levels);
        for k in 0..self.cfg.levels {
            let level = match self.cfg.fusion {
                FusionMode::Poe => {
                    let experts = ladders
                        .iter()
                        .map(|l| {
                            let log_var = l[k].log_var.ok_or_else(|| {
                                HvedError::InvalidArgument("product fusion needs log-variance heads".into())
                            })?;
                            Ok(GaussianNode { mu: l[k].mu, log_var })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    FusedLevel::Gaussian(graph_product(&mut self.graph, &experts, true)?)
                }
                FusionMode::Moments => {
                    let g = &mut self.graph;
                    let inv = 1.0 / ladders.len() as f64;
                    let mus: Vec<NodeId> = ladders.iter().map(|l| l[k].mu).collect();
                    let total = g.add_all(&mus)?;
                    let mean = g.scale(total, inv)?;
                    let mut sq = Vec::with_capacity(mus.len());
                    for &m in &mus {
                        let d = g.sub(m, mean)?;
                        sq.push(g.mul(d, d)?);
                    }
                    let total_sq = g.add_all(&sq)?;
                    let var = g.scale(total_sq, inv)?;
                    FusedLevel::Moments { mean, var }
                }
            };
            fused.push(level);
        }
        Ok(fused)
    }

    /// Decoder input of every level: a reparameterised sample for Gaussian
    /// levels (noise drawn level by level from `rng`), the concatenated
    /// moments otherwise.
    pub fn decoder_inputs<R: Rng + ?Sized>(&mut self, fused: &[FusedLevel], rng: &mut R) -> Result<Vec<NodeId>> {
        fused
            .iter()
            .map(|f| match *f {
                FusedLevel::Gaussian(q) => {
                    let eps = Tensor::<T>::randn(self.graph.shape(q.mu).to_vec(), rng);
                    crate::latent::graph_sample_with_noise(&mut self.graph, q, eps)
                }
                FusedLevel::Moments { mean, var } => self.graph.concat(&[mean, var]),
            })
            .collect()
    }

    /// Decodes a ladder of codes (finest first) into `target`.
    pub fn decode(&mut self, z: &[NodeId], target: Target) -> Result<NodeId> {
        let levels = self.cfg.levels;
        if z.len() != levels {
            return Err(HvedError::shape("decode", format!("{} codes for {levels} levels", z.len())));
        }
        let base = self.graph.shape(z[0]).to_vec();
        if base.len() != 5 {
            return Err(HvedError::shape("decode", format!("level 0 code has shape {base:?}")));
        }
        self.check_spatial("decode", &base[2..])?;
        for (k, &zk) in z.iter().enumerate() {
            let expect = [1, self.cfg.code_channels(k), base[2] >> k, base[3] >> k, base[4] >> k];
            if self.graph.shape(zk) != expect {
                return Err(HvedError::shape(
                    "decode",
                    format!("level {k}: {:?} vs expected {expect:?}", self.graph.shape(zk)),
                ));
            }
        }
        let pre = format!("dec.{}", target.name());
        let mut h = self.conv_act(z[levels - 1], &format!("{pre}.l{}.conv", levels - 1), 1)?;
        for k in (0..levels - 1).rev() {
            let up = self.graph.upsample2(h)?;
            let joined = self.graph.concat(&[up, z[k]])?;
            h = self.conv_act(joined, &format!("{pre}.l{k}.conv"), 1)?;
        }
        self.conv(h, &format!("{pre}.head"), 1)
    }
}

/// Result of one training-mode pass.
pub struct ForwardResult<T: Real> {
    pub graph: Graph<T>,
    /// Image reconstructions in modality order; empty for the moments
    /// baseline, which has no image decoders.
    pub reconstructions: Vec<NodeId>,
    pub seg_logits: NodeId,
    pub latents: Vec<FusedLevel>,
    /// Sum over levels of the KL of the fused posterior to the prior;
    /// absent for the moments baseline.
    pub kl_total: Option<NodeId>,
}

impl<T: Real> ForwardResult<T> {
    /// Fused posteriors, finest level first (Gaussian fusion only).
    pub fn fused_latent(&self) -> Option<MultiScaleLatent<T>> {
        let levels = self
            .latents
            .iter()
            .map(|l| match l {
                FusedLevel::Gaussian(q) => Some(q.value(&self.graph)),
                FusedLevel::Moments { .. } => None,
            })
            .collect::<Option<Vec<_>>>()?;
        Some(MultiScaleLatent { levels })
    }
}

/// One training pass: encodes the subset members of `x` (four `(1, P, P, P)`
/// images in modality order), fuses, samples each level once and decodes every
/// target.
pub fn forward_train<T: Real, R: Rng + ?Sized>(
    cfg: &NetworkConfig,
    params: &NetworkParams<T>,
    x: &[Tensor<T>],
    subset: ModalitySubset,
    kl_reduction: KlReduction,
    rng: &mut R,
) -> Result<ForwardResult<T>> {
    if x.len() != NUM_MODALITIES {
        return Err(HvedError::shape("forward_train", format!("{} images, expected {NUM_MODALITIES}", x.len())));
    }
    let mut b = NetBuilder::new(cfg, params)?;
    let mut codes = BTreeMap::new();
    for i in subset.members() {
        let m = Modality::from_index(i).ok_or(HvedError::EmptySubset)?;
        let xi = b.image(&x[i], false)?;
        codes.insert(m, b.encode_modality(xi, m)?);
    }
    let latents = b.fuse(&codes, subset)?;
    let kl_total = match cfg.fusion {
        FusionMode::Poe => {
            let mut terms = Vec::with_capacity(latents.len());
            for l in &latents {
                if let FusedLevel::Gaussian(q) = *l {
                    terms.push(graph_kl(&mut b.graph, q, kl_reduction)?);
                }
            }
            Some(b.graph.add_all(&terms)?)
        }
        FusionMode::Moments => None,
    };
    let z = b.decoder_inputs(&latents, rng)?;
    let mut reconstructions = Vec::new();
    let mut seg_logits = None;
    for t in cfg.targets() {
        let out = b.decode(&z, t)?;
        match t {
            Target::Image(_) => reconstructions.push(out),
            Target::Segmentation => seg_logits = Some(out),
        }
    }
    Ok(ForwardResult {
        graph: b.graph,
        reconstructions,
        seg_logits: seg_logits.expect("segmentation decoder always present"),
        latents,
        kl_total,
    })
}

/// Averaged inference outputs, unbatched.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T: Real> {
    /// `(1, P, P, P)` per modality in modality order; empty when images were
    /// not requested or the network has no image decoders.
    pub reconstructions: Vec<Tensor<T>>,
    /// `(C, P, P, P)` class probabilities.
    pub seg_probs: Tensor<T>,
}

impl<T: Real> Inference<T> {
    /// Per-voxel argmax of the class probabilities (first maximum wins).
    pub fn labels(&self) -> Vec<u8> {
        argmax_labels(&self.seg_probs)
    }
}

/// Argmax over axis 0 of a `(C, ...)` tensor.
pub fn argmax_labels<T: Real>(probs: &Tensor<T>) -> Vec<u8> {
    let c = probs.shape()[0];
    let v = probs.numel() / c;
    let d = probs.data();
    (0..v)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * v + i] > d[best * v + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Draws `num_samples` codes from the fused posterior of the observed
/// modalities (all levels jointly per draw), decodes each and averages the
/// outputs in draw order. Segmentation outputs are averaged as softmax maps.
/// The moments baseline is deterministic and is decoded once.
pub fn infer<T: Real, R: Rng + ?Sized>(
    cfg: &NetworkConfig,
    params: &NetworkParams<T>,
    observed: &BTreeMap<Modality, Tensor<T>>,
    subset: ModalitySubset,
    num_samples: usize,
    with_images: bool,
    rng: &mut R,
) -> Result<Inference<T>> {
    if num_samples == 0 {
        return Err(HvedError::InvalidArgument("num-samples must be positive".into()));
    }
    let mut enc = NetBuilder::new(cfg, params)?;
    let mut codes = BTreeMap::new();
    for i in subset.members() {
        let m = Modality::from_index(i).ok_or(HvedError::EmptySubset)?;
        let x = observed
            .get(&m)
            .ok_or_else(|| HvedError::MissingEntry(format!("input image for {}", m.name())))?;
        let xi = enc.image(x, false)?;
        codes.insert(m, enc.encode_modality(xi, m)?);
    }
    let fused = enc.fuse(&codes, subset)?;
    let levels: Vec<Fixed<T>> = fused
        .iter()
        .map(|f| match *f {
            FusedLevel::Gaussian(q) => Fixed::Gaussian(q.value(&enc.graph)),
            FusedLevel::Moments { mean, var } => Fixed::Code(
                crate::kernels::concat_channels(&[enc.graph.value(mean), enc.graph.value(var)]).expect("same shape"),
            ),
        })
        .collect();
    drop(enc);

    let draws = if cfg.fusion == FusionMode::Moments { 1 } else { num_samples };
    let targets: Vec<Target> =
        cfg.targets().into_iter().filter(|t| with_images || *t == Target::Segmentation).collect();
    let mut sums: BTreeMap<Target, Tensor<T>> = BTreeMap::new();
    for _ in 0..draws {
        let codes: Vec<Tensor<T>> = levels
            .iter()
            .map(|l| match l {
                Fixed::Gaussian(q) => {
                    let half = T::lit(0.5);
                    Tensor::from_fn(q.shape().to_vec(), |i| {
                        let e: f64 = StandardNormal.sample(&mut *rng);
                        q.mu.data()[i] + (half * q.log_var.data()[i]).exp() * T::lit(e)
                    })
                }
                Fixed::Code(t) => t.clone(),
            })
            .collect();
        let mut dec = NetBuilder::new(cfg, params)?;
        let z: Vec<NodeId> = codes.into_iter().map(|c| dec.graph.constant(c)).collect();
        for &t in &targets {
            let out = dec.decode(&z, t)?;
            let value = if t == Target::Segmentation {
                let p = dec.graph.softmax(out)?;
                dec.graph.value(p).clone()
            } else {
                dec.graph.value(out).clone()
            };
            match sums.get_mut(&t) {
                Some(acc) => acc.data_mut().iter_mut().zip(value.data()).for_each(|(a, &v)| *a += v),
                None => {
                    sums.insert(t, value);
                }
            }
        }
    }
    let inv = T::lit(1.0 / draws as f64);
    let mut reconstructions = Vec::new();
    let mut seg_probs = None;
    for (t, s) in sums {
        let avg = s.map(|v| v * inv).unbatched();
        match t {
            Target::Image(_) => reconstructions.push(avg),
            Target::Segmentation => seg_probs = Some(avg),
        }
    }
    Ok(Inference { reconstructions, seg_probs: seg_probs.expect("segmentation decoder always present") })
}

/// Fused level frozen as plain tensors for repeated decoding.
enum Fixed<T: Real> {
    Gaussian(DiagonalGaussian<T>),
    Code(Tensor<T>),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::HvedRng;

    fn small(fusion: FusionMode) -> NetworkConfig {
        NetworkConfig {
            levels: 2,
            channels: vec![2, 3],
            latent_channels: vec![2, 2],
            patch_size: 8,
            fusion,
            ..NetworkConfig::default()
        }
    }

    fn images(p: usize, rng: &mut HvedRng) -> Vec<Tensor<f64>> {
        (0..4).map(|_| Tensor::randn(vec![1, p, p, p], rng)).collect()
    }

    #[test]
    fn default_ladder_shapes() {
        let cfg = NetworkConfig::default();
        let mut rng = HvedRng::seed_from_u64(0);
        let params = NetworkParams::<f32>::init(&cfg, &mut rng).unwrap();
        let mut b = NetBuilder::new(&cfg, &params).unwrap();
        let x = b.image(&Tensor::zeros(vec![1, 32, 32, 32]), false).unwrap();
        let codes = b.encode_modality(x, Modality::T1).unwrap();
        let expect = [(4, 32), (8, 16), (16, 8), (32, 4)];
        for (c, &(ch, e)) in codes.iter().zip(&expect) {
            assert_eq!(b.graph.shape(c.mu), &[1, ch, e, e, e]);
            assert_eq!(b.graph.shape(c.log_var.unwrap()), &[1, ch, e, e, e]);
        }
    }

    #[test]
    fn zero_params_give_standard_codes() {
        let cfg = small(FusionMode::Poe);
        let params = NetworkParams::<f64>::zeros(&cfg).unwrap();
        let mut b = NetBuilder::new(&cfg, &params).unwrap();
        let x = b.image(&Tensor::zeros(vec![1, 8, 8, 8]), false).unwrap();
        for c in b.encode_modality(x, Modality::Flair).unwrap() {
            assert!(b.graph.value(c.mu).data().iter().all(|&v| v == 0.0));
            assert!(b.graph.value(c.log_var.unwrap()).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoders_are_modality_specific() {
        let cfg = small(FusionMode::Poe);
        let mut rng = HvedRng::seed_from_u64(1);
        let params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        let mut b = NetBuilder::new(&cfg, &params).unwrap();
        let img = Tensor::randn(vec![1, 8, 8, 8], &mut rng);
        let x = b.image(&img, false).unwrap();
        let a = b.encode_modality(x, Modality::T1).unwrap();
        let c = b.encode_modality(x, Modality::T2).unwrap();
        assert!(b.graph.value(a[0].mu).max_abs_diff(b.graph.value(c[0].mu)) > 0.0);
    }

    #[test]
    fn moments_singleton_keeps_mean_and_zero_variance() {
        let cfg = small(FusionMode::Moments);
        let mut rng = HvedRng::seed_from_u64(2);
        let params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        let mut b = NetBuilder::new(&cfg, &params).unwrap();
        let x = b.image(&Tensor::randn(vec![1, 8, 8, 8], &mut rng), false).unwrap();
        let codes = b.encode_modality(x, Modality::T1c).unwrap();
        let subset = ModalitySubset::from_modalities(&[Modality::T1c]).unwrap();
        let fused = b.fuse(&BTreeMap::from([(Modality::T1c, codes.clone())]), subset).unwrap();
        for (f, c) in fused.iter().zip(&codes) {
            let FusedLevel::Moments { mean, var } = *f else { panic!("moments expected") };
            assert_eq!(b.graph.value(mean), b.graph.value(c.mu));
            assert!(b.graph.value(var).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn decode_output_shapes() {
        let cfg = NetworkConfig::default();
        let params = NetworkParams::<f32>::zeros(&cfg).unwrap();
        let mut b = NetBuilder::new(&cfg, &params).unwrap();
        let z: Vec<NodeId> = (0..4)
            .map(|k| {
                let e = cfg.level_edge(k);
                b.graph.constant(Tensor::zeros(vec![1, cfg.latent_channels[k], e, e, e]))
            })
            .collect();
        let img = b.decode(&z, Target::Image(Modality::Flair)).unwrap();
        assert_eq!(b.graph.shape(img), &[1, 1, 32, 32, 32]);
        assert!(b.graph.value(img).data().iter().all(|&v| v == 0.0));
        let seg = b.decode(&z, Target::Segmentation).unwrap();
        assert_eq!(b.graph.shape(seg), &[1, 4, 32, 32, 32]);
    }

    #[test]
    fn decode_rejects_wrong_ladder() {
        let cfg = small(FusionMode::Poe);
        let params = NetworkParams::<f64>::zeros(&cfg).unwrap();
        let mut b = NetBuilder::new(&cfg, &params).unwrap();
        let z0 = b.graph.constant(Tensor::zeros(vec![1, 2, 8, 8, 8]));
        let z1 = b.graph.constant(Tensor::zeros(vec![1, 2, 8, 8, 8]));
        assert!(matches!(b.decode(&[z0, z1], Target::Segmentation), Err(HvedError::ShapeMismatch { .. })));
    }

    #[test]
    fn every_level_reaches_the_output() {
        let cfg = NetworkConfig { levels: 3, channels: vec![2, 3, 4], latent_channels: vec![2, 2, 2], patch_size: 8, ..small(FusionMode::Poe) };
        let mut rng = HvedRng::seed_from_u64(3);
        let params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        let mut b = NetBuilder::new(&cfg, &params).unwrap();
        let z: Vec<NodeId> = (0..3)
            .map(|k| {
                let e = cfg.level_edge(k);
                b.graph.input(Tensor::randn(vec![1, 2, e, e, e], &mut rng))
            })
            .collect();
        let out = b.decode(&z, Target::Image(Modality::T2)).unwrap();
        let s = b.graph.sum(out).unwrap();
        b.graph.backward(s).unwrap();
        for &zk in &z {
            assert!(b.graph.grad(zk).unwrap().data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn absent_encoders_get_zero_gradient() {
        let cfg = small(FusionMode::Poe);
        let mut rng = HvedRng::seed_from_u64(4);
        let params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = images(8, &mut rng);
        let subset: ModalitySubset = "0001".parse().unwrap();
        let mut f = forward_train(&cfg, &params, &x, subset, KlReduction::Mean, &mut rng).unwrap();
        let mut outs = f.reconstructions.clone();
        outs.push(f.seg_logits);
        let sums: Vec<NodeId> = outs.iter().map(|&o| f.graph.sum(o).unwrap()).collect();
        let s = f.graph.add_all(&sums).unwrap();
        f.graph.backward(s).unwrap();
        let grads = params.full_grads(&f.graph);
        for m in Modality::ALL {
            let prefix = format!("enc.{}.", m.name());
            let enc: Vec<_> = grads.iter().filter(|(n, _)| n.starts_with(&prefix)).collect();
            assert!(!enc.is_empty());
            let any_nonzero = enc.iter().any(|(_, g)| g.data().iter().any(|&v| v != 0.0));
            assert_eq!(any_nonzero, subset.has(m), "{}", m.name());
        }
    }

    #[test]
    fn forward_train_is_deterministic() {
        let cfg = small(FusionMode::Poe);
        let mut rng = HvedRng::seed_from_u64(5);
        let params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = images(8, &mut rng);
        let run = || {
            let mut r = HvedRng::seed_from_u64(77);
            let f = forward_train(&cfg, &params, &x, ModalitySubset::full(4), KlReduction::Sum, &mut r).unwrap();
            (f.graph.value(f.seg_logits).clone(), f.graph.value(f.kl_total.unwrap()).item())
        };
        let (a, ka) = run();
        let (b, kb) = run();
        assert!(a.bit_eq(&b));
        assert_eq!(ka.to_bits(), kb.to_bits());
    }

    #[test]
    fn moments_network_has_only_a_segmentation_decoder() {
        let cfg = small(FusionMode::Moments);
        let mut rng = HvedRng::seed_from_u64(6);
        let params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        assert!(params.tensors.keys().all(|k| !k.contains("logvar") && !k.starts_with("dec.flair")));
        let x = images(8, &mut rng);
        let f = forward_train(&cfg, &params, &x, "1010".parse().unwrap(), KlReduction::Mean, &mut rng).unwrap();
        assert!(f.reconstructions.is_empty());
        assert!(f.kl_total.is_none());
        assert_eq!(f.graph.shape(f.seg_logits), &[1, 4, 8, 8, 8]);
    }

    #[test]
    fn infer_probabilities_sum_to_one() {
        let cfg = small(FusionMode::Poe);
        let mut rng = HvedRng::seed_from_u64(7);
        let params = NetworkParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = images(8, &mut rng);
        let observed = BTreeMap::from([(Modality::T1, x[1].clone()), (Modality::T2, x[3].clone())]);
        let out = infer(&cfg, &params, &observed, "0101".parse().unwrap(), 3, true, &mut rng).unwrap();
        assert_eq!(out.reconstructions.len(), 4);
        assert_eq!(out.seg_probs.shape(), &[4, 8, 8, 8]);
        let v = 512;
        for i in 0..v {
            let s: f64 = (0..4).map(|c| out.seg_probs.data()[c * v + i]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(out.labels().len(), v);
    }

    #[test]
    fn infer_requires_observed_members() {
        let cfg = small(FusionMode::Poe);
        let params = NetworkParams::<f64>::zeros(&cfg).unwrap();
        let mut rng = HvedRng::seed_from_u64(8);
        let observed = BTreeMap::from([(Modality::T1, Tensor::zeros(vec![1, 8, 8, 8]))]);
        let err = infer(&cfg, &params, &observed, "0011".parse().unwrap(), 1, false, &mut rng);
        assert!(matches!(err, Err(HvedError::MissingEntry(_))));
    }

    #[test]
    fn config_validation() {
        let cfg = NetworkConfig { patch_size: 20, ..NetworkConfig::default() };
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::default();
        cfg.channels.pop();
        assert!(cfg.validate().is_err());
    }
}
