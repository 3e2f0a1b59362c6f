//! Portable, serializable random stream.
//!
//! ChaCha8 is counter-based: its full state is the 32-byte key, the stream
//! id and the word position, all of which are platform independent.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HvedError, Result};

/// Identifier written into checkpoints next to the state bytes.
pub const RNG_ALGORITHM: &str = "chacha8-v1";

/// Serialized size of [`RngState`]: key + stream + word position.
pub const RNG_STATE_BYTES: usize = 32 + 8 + 16;

#[derive(Clone, Debug)]
pub struct HvedRng(ChaCha8Rng);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl HvedRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        HvedRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream derived from a base seed and a label, e.g. an
    /// epoch number or an evaluation cell.
    pub fn derived(seed: u64, label: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.wrapping_add(1));
        HvedRng(rng)
    }

    pub fn state(&self) -> RngState {
        RngState { key: self.0.get_seed(), stream: self.0.get_stream(), word_pos: self.0.get_word_pos() }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.key);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        HvedRng(rng)
    }
}

impl RngState {
    pub fn to_bytes(&self) -> [u8; RNG_STATE_BYTES] {
        let mut out = [0u8; RNG_STATE_BYTES];
        out[..32].copy_from_slice(&self.key);
        out[32..40].copy_from_slice(&self.stream.to_le_bytes());
        out[40..].copy_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != RNG_STATE_BYTES {
            return Err(HvedError::Format(format!("rng state must be {RNG_STATE_BYTES} bytes")));
        }
        let mut key = [0u8; 32];
        key.copy_from_slice(&bytes[..32]);
        let stream = u64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes"));
        let word_pos = u128::from_le_bytes(bytes[40..].try_into().expect("16 bytes"));
        Ok(RngState { key, stream, word_pos })
    }
}

impl RngCore for HvedRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}
