//! Binary tensor files, checkpoints and dataset manifests.
//!
//! Everything is little-endian with fixed-width fields.
//!
//! Tensor file:
//!
//! ```text
//! "HVEDTNSR"  u32 version  u8 dtype  u8 ndim  ndim × u64 shape  payload
//! ```
//!
//! Checkpoint:
//!
//! ```text
//! "HVEDCKPT"  u32 version
//! u32 len + config text
//! u64 iteration
//! u32 len + rng algorithm name, 56 rng state bytes
//! u64 adam step, f64 beta1, f64 beta2, f64 eps, f64 weight decay
//! f64 best validation dice, u64 patience counter
//! u32 entry count, then per entry: u32 len + name, tensor file body
//! ```
//!
//! Entry names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{HvedError, Result};
use crate::network::NetworkParams;
use crate::optim::AdamState;
use crate::rng::{RngState, RNG_ALGORITHM, RNG_STATE_BYTES};
use crate::synth::Split;
use crate::tensor::{DType, Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 8] = b"HVEDTNSR";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HVEDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Tensor of either on-disk scalar type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

/// Little-endian reader over an in-memory buffer. Running past the end is
/// a format error mentioning what was being read.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            HvedError::Format(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| HvedError::Format(format!("{what} is not UTF-8")))
    }

    fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Appends the full tensor file encoding of `t` (magic included).
pub fn encode_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(T::DTYPE as u8);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    match T::DTYPE {
        DType::F32 => {
            for x in t.data() {
                out.extend_from_slice(&x.to_f32().unwrap().to_bits().to_le_bytes());
            }
        }
        DType::F64 => {
            for x in t.data() {
                out.extend_from_slice(&x.to_f64().unwrap().to_bits().to_le_bytes());
            }
        }
    }
}

fn decode_any(c: &mut Cursor<'_>) -> Result<AnyTensor> {
    if &c.array::<8>("magic")? != TENSOR_MAGIC {
        return Err(HvedError::Format("bad tensor magic".into()));
    }
    let version = c.u32("version")?;
    if version != TENSOR_VERSION {
        return Err(HvedError::Format(format!("unsupported tensor version {version}")));
    }
    let tag = c.u8("dtype")?;
    let dtype = DType::from_tag(tag).ok_or_else(|| HvedError::Format(format!("unsupported dtype tag {tag}")))?;
    let ndim = c.u8("ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = c.u64("shape")?;
        shape.push(usize::try_from(d).map_err(|_| HvedError::Format(format!("dimension {d} too large")))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| HvedError::Format("shape overflows".into()))?;
    let bytes = c.take(
        numel.checked_mul(dtype.size()).ok_or_else(|| HvedError::Format("shape overflows".into()))?,
        "payload",
    )?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            shape,
            bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            shape,
            bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        )?),
    })
}

fn decode_typed<T: Real>(c: &mut Cursor<'_>) -> Result<Tensor<T>> {
    match (decode_any(c)?, T::DTYPE) {
        (AnyTensor::F32(t), DType::F32) => Ok(t.cast()),
        (AnyTensor::F64(t), DType::F64) => Ok(t.cast()),
        (other, want) => Err(HvedError::Format(format!(
            "tensor has dtype {}, expected {want:?}",
            if matches!(other, AnyTensor::F32(_)) { "f32" } else { "f64" }
        ))),
    }
}

/// Parses a whole tensor file held in memory. Trailing bytes are an error.
pub fn decode_tensor<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut c = Cursor::new(bytes);
    let t = decode_typed(&mut c)?;
    if !c.finished() {
        return Err(HvedError::Format("trailing bytes after tensor payload".into()));
    }
    Ok(t)
}

/// Writes to a sibling temporary file, then renames over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| HvedError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| HvedError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| HvedError::io(path, e))
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out);
    write_atomic(path, &out)
}

/// Reads a tensor whose stored dtype must be `T`.
pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| HvedError::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| with_path(e, path))
}

/// Reads a tensor of whichever dtype is stored.
pub fn read_any(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| HvedError::io(path, e))?;
    let mut c = Cursor::new(&bytes);
    let t = decode_any(&mut c).map_err(|e| with_path(e, path))?;
    if !c.finished() {
        return Err(HvedError::Format(format!("{}: trailing bytes after tensor payload", path.display())));
    }
    Ok(t)
}

fn with_path(e: HvedError, path: &Path) -> HvedError {
    match e {
        HvedError::Format(m) => HvedError::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub rng: RngState,
    pub params: NetworkParams<f32>,
    pub adam: AdamState<f32>,
    pub best_val: f64,
    pub patience_counter: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_string(&mut out, &self.config.to_text());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        put_string(&mut out, RNG_ALGORITHM);
        out.extend_from_slice(&self.rng.to_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        for x in [self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.weight_decay] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.best_val.to_le_bytes());
        out.extend_from_slice(&self.patience_counter.to_le_bytes());

        let groups: [(&str, &BTreeMap<String, Tensor<f32>>); 3] =
            [("param/", &self.params.tensors), ("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)];
        let count: usize = groups.iter().map(|(_, g)| g.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, group) in groups {
            for (name, t) in group {
                put_string(&mut out, &format!("{prefix}{name}"));
                encode_tensor(t, &mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        if &c.array::<8>("magic")? != CHECKPOINT_MAGIC {
            return Err(HvedError::Format("bad checkpoint magic".into()));
        }
        let version = c.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(HvedError::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = RunConfig::parse(&c.string("config")?)?;
        let iteration = c.u64("iteration")?;
        let algo = c.string("rng algorithm")?;
        if algo != RNG_ALGORITHM {
            return Err(HvedError::Format(format!("unknown rng algorithm `{algo}`")));
        }
        let rng = RngState::from_bytes(c.take(RNG_STATE_BYTES, "rng state")?)?;
        let mut adam = AdamState::new(0.0);
        adam.step = c.u64("adam step")?;
        adam.beta1 = c.f64("beta1")?;
        adam.beta2 = c.f64("beta2")?;
        adam.eps = c.f64("eps")?;
        adam.weight_decay = c.f64("weight decay")?;
        let best_val = c.f64("best validation")?;
        let patience_counter = c.u64("patience counter")?;

        let count = c.u32("entry count")?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name = c.string("entry name")?;
            let t = decode_typed::<f32>(&mut c)?;
            let (group, key) = if let Some(k) = name.strip_prefix("param/") {
                (&mut params, k)
            } else if let Some(k) = name.strip_prefix("adam.m/") {
                (&mut adam.m, k)
            } else if let Some(k) = name.strip_prefix("adam.v/") {
                (&mut adam.v, k)
            } else {
                return Err(HvedError::Format(format!("unknown checkpoint entry `{name}`")));
            };
            if group.insert(key.to_string(), t).is_some() {
                return Err(HvedError::Format(format!("duplicate checkpoint entry `{name}`")));
            }
        }
        if !c.finished() {
            return Err(HvedError::Format("trailing bytes after checkpoint entries".into()));
        }
        let params = NetworkParams { tensors: params };
        params.check(&config.network)?;
        for (name, p) in &params.tensors {
            for (g, label) in [(&adam.m, "adam.m"), (&adam.v, "adam.v")] {
                match g.get(name) {
                    Some(t) if t.shape() != p.shape() => {
                        return Err(HvedError::CheckpointMismatch(format!("{label}/{name} has the wrong shape")))
                    }
                    None if adam.step > 0 => return Err(HvedError::MissingEntry(format!("{label}/{name}"))),
                    _ => {}
                }
            }
        }
        Ok(Checkpoint { config, iteration, rng, params, adam, best_val, patience_counter })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HvedError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| with_path(e, path))
    }

    /// Loads and checks that the stored network matches `expected`.
    pub fn load_for(path: &Path, expected: &RunConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config.network != expected.network {
            return Err(HvedError::CheckpointMismatch(format!(
                "{} was trained with a different network configuration",
                path.display()
            )));
        }
        Ok(ck)
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub basename: String,
    pub seed: u64,
    pub split: Split,
}

impl ManifestEntry {
    /// Files holding the four modalities, in modality order, and the labels.
    pub fn modality_path(&self, dir: &Path, modality: &str) -> PathBuf {
        dir.join(format!("{}_{modality}.hvt", self.basename))
    }

    pub fn labels_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_seg.hvt", self.basename))
    }
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text: String =
        entries.iter().map(|e| format!("{} {} {}\n", e.basename, e.seed, e.split.name())).collect();
    write_atomic(&dir.join(MANIFEST_NAME), text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| HvedError::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || HvedError::Data(format!("{}:{}: expected `basename seed split`", path.display(), n + 1));
        let mut parts = line.split_whitespace();
        let (Some(basename), Some(seed), Some(split), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        out.push(ManifestEntry {
            basename: basename.to_string(),
            seed: seed.parse().map_err(|_| bad())?,
            split: Split::parse(split).map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::HvedRng;
    use proptest::prelude::*;

    #[test]
    fn zeros_2x3_f64_is_78_bytes() {
        let mut out = Vec::new();
        encode_tensor(&Tensor::<f64>::zeros(vec![2, 3]), &mut out);
        assert_eq!(out.len(), 8 + 4 + 1 + 1 + 2 * 8 + 6 * 8);
        assert_eq!(out.len(), 78);
        assert_eq!(&out[..8], b"HVEDTNSR");
        assert_eq!(&out[8..12], &[1, 0, 0, 0]);
        assert_eq!(out[12], 1);
        assert_eq!(out[13], 2);
        assert_eq!(&out[14..22], &[2, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn known_f32_layout() {
        let mut out = Vec::new();
        encode_tensor(&Tensor::<f32>::new(vec![1], vec![1.0]).unwrap(), &mut out);
        assert_eq!(out.len(), 8 + 4 + 2 + 8 + 4);
        assert_eq!(&out[22..], &[0x00, 0x00, 0x80, 0x3f]);
    }

    #[test]
    fn file_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.hvt");
        write_tensor(&p, &Tensor::<f64>::zeros(vec![2, 3])).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 78);
        let back: Tensor<f64> = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert!(matches!(read_tensor::<f32>(&p), Err(HvedError::Format(_))));
        assert!(matches!(read_any(&p), Ok(AnyTensor::F64(_))));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut good = Vec::new();
        encode_tensor(&Tensor::<f32>::ones(vec![3, 2]), &mut good);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor::<f32>(&bad), Err(HvedError::Format(m)) if m.contains("magic")));
        assert!(matches!(decode_tensor::<f32>(&good[..good.len() - 1]), Err(HvedError::Format(m)) if m.contains("truncated")));
        let mut v = good.clone();
        v[8] = 9;
        assert!(matches!(decode_tensor::<f32>(&v), Err(HvedError::Format(m)) if m.contains("version")));
        let mut d = good.clone();
        d[12] = 7;
        assert!(matches!(decode_tensor::<f32>(&d), Err(HvedError::Format(m)) if m.contains("dtype")));
        let mut long = good;
        long.push(0);
        assert!(decode_tensor::<f32>(&long).is_err());
    }

    proptest! {
        #[test]
        fn tensor_round_trip_is_bitwise(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let mut rng = HvedRng::seed_from_u64(seed);
            let t32 = Tensor::<f32>::randn(shape.clone(), &mut rng);
            let t64 = Tensor::<f64>::randn(shape, &mut rng);
            let mut b = Vec::new();
            encode_tensor(&t32, &mut b);
            prop_assert!(decode_tensor::<f32>(&b).unwrap().bit_eq(&t32));
            let mut b = Vec::new();
            encode_tensor(&t64, &mut b);
            prop_assert!(decode_tensor::<f64>(&b).unwrap().bit_eq(&t64));
        }

        #[test]
        fn config_round_trip(
            lr in 1e-6f64..1.0,
            seed in any::<u64>(),
            moments in any::<bool>(),
            sum in any::<bool>(),
            l2 in 0.0f64..2.0,
            iters in 0u64..100_000,
            fg in any::<bool>(),
        ) {
            let mut cfg = RunConfig { lr, seed, ..RunConfig::default() };
            cfg.network.fusion = if moments { crate::network::FusionMode::Moments } else { crate::network::FusionMode::Poe };
            cfg.kl_reduction = if sum { crate::latent::KlReduction::Sum } else { crate::latent::KlReduction::Mean };
            cfg.l2_weight = l2;
            cfg.max_iters = iters;
            cfg.normalize_foreground = fg;
            let text = cfg.to_text();
            let back = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_text(), text);
        }
    }

    fn small_config() -> RunConfig {
        RunConfig::parse("levels=2\nchannels=2,4\nlatent-channels=1,2\npatch-size=8\nvolume-edge=16").unwrap()
    }

    fn sample_checkpoint() -> Checkpoint {
        let config = small_config();
        let mut rng = HvedRng::seed_from_u64(3);
        let params = NetworkParams::init(&config.network, &mut rng).unwrap();
        let mut adam = AdamState::new(config.weight_decay);
        adam.step = 4;
        for (n, p) in &params.tensors {
            adam.m.insert(n.clone(), Tensor::randn(p.shape().to_vec(), &mut rng));
            adam.v.insert(n.clone(), p.map(|x| x * x));
        }
        Checkpoint { config, iteration: 17, rng: rng.state(), params, adam, best_val: 71.5, patience_counter: 2 }
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        for (n, t) in &ck.params.tensors {
            assert!(back.params.tensors[n].bit_eq(t));
            assert!(back.adam.m[n].bit_eq(&ck.adam.m[n]));
        }
        assert_eq!(back, ck);
        assert!(Checkpoint::load_for(&p, &ck.config).is_ok());
    }

    #[test]
    fn checkpoint_rejects_other_network() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let mut other = ck.config.clone();
        other.network.channels = vec![4, 4];
        assert!(matches!(Checkpoint::load_for(&p, &other), Err(HvedError::CheckpointMismatch(_))));
    }

    #[test]
    fn checkpoint_missing_entry() {
        let mut ck = sample_checkpoint();
        let name = ck.params.tensors.keys().next().unwrap().clone();
        ck.params.tensors.remove(&name);
        ck.adam.m.remove(&name);
        ck.adam.v.remove(&name);
        let err = Checkpoint::from_bytes(&ck.to_bytes()).unwrap_err();
        assert!(matches!(err, HvedError::CheckpointMismatch(_) | HvedError::MissingEntry(_)), "{err:?}");
        let mut ck = sample_checkpoint();
        ck.adam.v.remove(&name);
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes()), Err(HvedError::MissingEntry(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry { basename: "train_0000".into(), seed: 1000, split: Split::Train },
            ManifestEntry { basename: "test_0000".into(), seed: 9, split: Split::Test },
        ];
        write_manifest(dir.path(), &entries).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), entries);
        fs::write(dir.path().join(MANIFEST_NAME), "a 1\n").unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(HvedError::Data(_))));
    }
}
