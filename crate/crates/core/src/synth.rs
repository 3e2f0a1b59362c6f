//! Synthetic multi-modal tumour phantoms.
//!
//! A phantom is three nested, randomly rotated ellipsoids: the outer one is
//! the whole lesion, the middle one the core and the inner one the
//! enhancing part. Labels are 0 background, 1 necrotic/non-enhancing core,
//! 2 oedema (lesion outside the core), 3 enhancing. Each modality paints
//! every tissue with a fixed intensity from a contrast matrix and adds white
//! Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HvedError, Result};
use crate::latent::NUM_MODALITIES;
use crate::rng::HvedRng;
use crate::tensor::{Real, Tensor};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NECROTIC: u8 = 1;
pub const LABEL_OEDEMA: u8 = 2;
pub const LABEL_ENHANCING: u8 = 3;

/// Intensity per `[modality][tissue]`, tissues in label order.
///
/// FLAIR lights up the whole lesion, T1c singles out the enhancing part, T1
/// carries faint hypo-intense contrast and T2 is bright on the core.
pub const DEFAULT_CONTRAST: [[f64; 4]; NUM_MODALITIES] = [
    [0.0, 1.5, 2.0, 1.5],
    [0.0, -0.8, -0.5, -0.3],
    [0.0, 0.4, 0.2, 2.5],
    [0.0, 1.6, 1.2, 1.0],
];

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub volume_edge: usize,
    /// Range of the outer ellipsoid's base radius in voxels; each semi-axis
    /// is the base radius times a factor in [0.8, 1.2].
    pub radius_min: f64,
    pub radius_max: f64,
    pub contrast: [[f64; 4]; NUM_MODALITIES],
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            volume_edge: 32,
            radius_min: 6.0,
            radius_max: 9.0,
            contrast: DEFAULT_CONTRAST,
            noise_sigma: 0.25,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(HvedError::Config { key: key.into(), msg });
        if self.volume_edge == 0 {
            return bad("volume-edge", "must be positive".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("radius-min", format!("need 0 < min <= max, got {}..{}", self.radius_min, self.radius_max));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("noise-sigma", format!("must be >= 0, got {}", self.noise_sigma));
        }
        for i in 0..NUM_MODALITIES {
            for j in i + 1..NUM_MODALITIES {
                if self.contrast[i] == self.contrast[j] {
                    return bad("contrast", format!("rows {i} and {j} are identical"));
                }
            }
        }
        Ok(())
    }
}

/// Four co-registered cubic volumes with their label map.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    /// `(1, E, E, E)` per modality, in modality order.
    pub modalities: Vec<Tensor<f32>>,
    /// `E³` labels in row-major order.
    pub labels: Vec<u8>,
    pub edge: usize,
    pub seed: u64,
}

/// Semi-axes, rotation and centre of the outer ellipsoid plus the nested
/// scale/offset pairs in normalised coordinates.
#[derive(Clone, Debug)]
struct Geometry {
    center: [f64; 3],
    axes: [f64; 3],
    rot: [[f64; 3]; 3],
    core: (f64, [f64; 3]),
    enh: (f64, [f64; 3]),
}

fn random_rotation(rng: &mut HvedRng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Offset of a nested ball of radius `s` that keeps it inside the unit ball.
fn nested_offset(s: f64, rng: &mut HvedRng) -> [f64; 3] {
    let mut dir = [0.0f64; 3];
    loop {
        for v in dir.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            let r = rng.random_range(0.0..1.0) * 0.5 * (1.0 - s);
            return dir.map(|v| v / n * r);
        }
    }
}

fn draw_geometry(cfg: &PhantomConfig, rng: &mut HvedRng) -> Result<Geometry> {
    let base = if cfg.radius_max > cfg.radius_min {
        rng.random_range(cfg.radius_min..cfg.radius_max)
    } else {
        cfg.radius_min
    };
    let axes = [0; 3].map(|_| base * rng.random_range(0.8..1.2));
    let rot = random_rotation(rng);
    let reach = axes.iter().cloned().fold(0.0, f64::max);
    let e = cfg.volume_edge as f64;
    let (lo, hi) = (reach, e - 1.0 - reach);
    if hi < lo {
        return Err(HvedError::Data(format!(
            "tumour larger than volume: semi-axis {reach:.2} in a {}-voxel edge",
            cfg.volume_edge
        )));
    }
    let center = [0; 3].map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo });
    let core_s = rng.random_range(0.5..0.7);
    let core_o = nested_offset(core_s, rng);
    let enh_s = rng.random_range(0.5..0.7);
    let enh_o = nested_offset(enh_s, rng);
    Ok(Geometry { center, axes, rot, core: (core_s, core_o), enh: (enh_s, enh_o) })
}

fn norm2(v: [f64; 3]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn shrink(u: [f64; 3], (s, o): (f64, [f64; 3])) -> [f64; 3] {
    [(u[0] - o[0]) / s, (u[1] - o[1]) / s, (u[2] - o[2]) / s]
}

impl Geometry {
    /// Lesion-normalised coordinates of voxel `p` (unit ball = lesion).
    fn normalised(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut u = [0.0; 3];
        for (i, ui) in u.iter_mut().enumerate() {
            // rotate into the ellipsoid frame: Rᵀ·d
            let r = self.rot[0][i] * d[0] + self.rot[1][i] * d[1] + self.rot[2][i] * d[2];
            *ui = r / self.axes[i];
        }
        u
    }

    fn label(&self, p: [f64; 3]) -> u8 {
        let u = self.normalised(p);
        if norm2(u) > 1.0 {
            return LABEL_BACKGROUND;
        }
        let c = shrink(u, self.core);
        if norm2(c) > 1.0 {
            return LABEL_OEDEMA;
        }
        if norm2(shrink(c, self.enh)) > 1.0 {
            LABEL_NECROTIC
        } else {
            LABEL_ENHANCING
        }
    }
}

/// Deterministic phantom for `(cfg, seed)`.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<PhantomSample> {
    cfg.validate()?;
    let mut rng = HvedRng::seed_from_u64(seed);
    let geo = draw_geometry(cfg, &mut rng)?;
    let e = cfg.volume_edge;
    let mut labels = Vec::with_capacity(e * e * e);
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                labels.push(geo.label([z as f64, y as f64, x as f64]));
            }
        }
    }
    let modalities = cfg
        .contrast
        .iter()
        .map(|row| {
            let data: Vec<f32> = labels
                .iter()
                .map(|&l| {
                    let n: f64 = if cfg.noise_sigma > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
                    (row[l as usize] + cfg.noise_sigma * n) as f32
                })
                .collect();
            Tensor::new(vec![1, e, e, e], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomSample { modalities, labels, edge: e, seed })
}

/// Zero-mean, unit-variance rescaling. Statistics come from every voxel, or
/// only from nonzero voxels when `foreground_only` is set; the transform is
/// applied to the whole volume either way.
pub fn normalize<T: Real>(x: &Tensor<T>, foreground_only: bool) -> Result<Tensor<T>> {
    let vals: Vec<f64> = x
        .data()
        .iter()
        .map(|v| v.as_f64())
        .filter(|&v| !foreground_only || v != 0.0)
        .collect();
    if vals.is_empty() {
        return Err(HvedError::Data("normalize: no voxels to compute statistics from".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var.is_nan() || var <= 0.0 {
        return Err(HvedError::Data("normalize: constant input has zero variance".into()));
    }
    let inv = 1.0 / var.sqrt();
    Ok(x.map(|v| T::lit((v.as_f64() - mean) * inv)))
}

impl PhantomSample {
    /// Normalises each modality in place.
    pub fn normalized(mut self, foreground_only: bool) -> Result<Self> {
        for m in self.modalities.iter_mut() {
            *m = normalize(m, foreground_only)?;
        }
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        let e = self.edge;
        if self.labels.len() != e * e * e || self.modalities.iter().any(|m| m.shape() != [1, e, e, e]) {
            return Err(HvedError::Data(format!("sample {} is not a consistent {e}³ volume", self.seed)));
        }
        Ok(())
    }
}

fn flip_volume<V: Copy>(data: &[V], e: usize, flips: [bool; 3]) -> Vec<V> {
    let mut out = Vec::with_capacity(data.len());
    let pick = |i: usize, f: bool| if f { e - 1 - i } else { i };
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                out.push(data[(pick(z, flips[0]) * e + pick(y, flips[1])) * e + pick(x, flips[2])]);
            }
        }
    }
    out
}

/// Flips the listed axes (D, H, W) of every modality and the labels.
pub fn flip_with_mask(sample: &PhantomSample, flips: [bool; 3]) -> Result<PhantomSample> {
    sample.check()?;
    let e = sample.edge;
    let modalities = sample
        .modalities
        .iter()
        .map(|m| Tensor::new(m.shape().to_vec(), flip_volume(m.data(), e, flips)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomSample { modalities, labels: flip_volume(&sample.labels, e, flips), edge: e, seed: sample.seed })
}

/// Flips each spatial axis independently with probability ½; three coin
/// flips are drawn in D, H, W order.
pub fn flip_augment<R: Rng + ?Sized>(sample: &PhantomSample, rng: &mut R) -> Result<(PhantomSample, [bool; 3])> {
    let flips = [rng.random::<bool>(), rng.random::<bool>(), rng.random::<bool>()];
    Ok((flip_with_mask(sample, flips)?, flips))
}

/// Cubic crop of edge `edge` at `corner`.
pub fn crop(sample: &PhantomSample, edge: usize, corner: [usize; 3]) -> Result<PhantomSample> {
    sample.check()?;
    let e = sample.edge;
    if edge == 0 || corner.iter().any(|&c| c + edge > e) {
        return Err(HvedError::InvalidArgument(format!("crop {edge} at {corner:?} exceeds {e}³ volume")));
    }
    let cut = |data: &[f32]| -> Vec<f32> { crop_slice(data, e, edge, corner) };
    let modalities = sample
        .modalities
        .iter()
        .map(|m| Tensor::new(vec![1, edge, edge, edge], cut(m.data())))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomSample {
        modalities,
        labels: crop_slice(&sample.labels, e, edge, corner),
        edge,
        seed: sample.seed,
    })
}

fn crop_slice<V: Copy>(data: &[V], e: usize, edge: usize, c: [usize; 3]) -> Vec<V> {
    let mut out = Vec::with_capacity(edge * edge * edge);
    for z in 0..edge {
        for y in 0..edge {
            let start = ((c[0] + z) * e + c[1] + y) * e + c[2];
            out.extend_from_slice(&data[start..start + edge]);
        }
    }
    out
}

/// Random cubic patch with a uniformly drawn corner (D, H, W order).
pub fn sample_patch<R: Rng + ?Sized>(
    sample: &PhantomSample,
    edge: usize,
    rng: &mut R,
) -> Result<(PhantomSample, [usize; 3])> {
    if edge == 0 || edge > sample.edge {
        return Err(HvedError::InvalidArgument(format!(
            "patch edge {edge} larger than volume edge {}",
            sample.edge
        )));
    }
    let span = sample.edge - edge;
    let corner = [0; 3].map(|_| rng.random_range(0..=span));
    Ok((crop(sample, edge, corner)?, corner))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(HvedError::Format(format!("unknown split `{s}`"))),
        }
    }
}

/// Consecutive, disjoint seed ranges: train, then validation, then test.
pub fn split_seeds(base: u64, train: usize, val: usize, test: usize) -> Vec<(u64, Split)> {
    let mut out = Vec::with_capacity(train + val + test);
    let mut s = base;
    for (count, split) in [(train, Split::Train), (val, Split::Val), (test, Split::Test)] {
        for _ in 0..count {
            out.push((s, split));
            s += 1;
        }
    }
    out
}
