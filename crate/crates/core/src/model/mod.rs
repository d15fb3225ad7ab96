// SPDX-License-Identifier: MIT OR Apache-2.0

//! The toy multimodal decoder: a raw visual-embedding prefix followed by
//! text tokens, pre-norm blocks, causal attention, GELU MLP, greedy decode.

mod config;
mod decode;
mod forward;
pub mod io;
mod weights;

pub use config::{ModelConfig, PhaseName};
pub use decode::{greedy_decode, greedy_decode_with, Decoded};
pub use forward::{
    embed_positions, forward, logits_at, run_layers, Hook, HookChain, KvCache, NoHook, Phase,
    Session, Site, StopAt,
};
pub use io::{load_weights, save_weights};
pub use weights::{LayerWeights, ModelBundle, ModelWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Position role inside a sequence. `Generated` marks positions appended
/// by decoding; the input itself only holds the first three.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Visual,
    Query,
    Last,
    Generated,
}

impl Role {
    pub fn letter(self) -> &'static str {
        match self {
            Role::Visual => "V",
            Role::Query => "Q",
            Role::Last => "L",
            Role::Generated => "G",
        }
    }
}

/// Visual prefix (raw `d_model` rows) plus text token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSequence {
    pub visual: Tensor2,
    pub text: Vec<usize>,
}

impl InputSequence {
    pub fn new(visual: Tensor2, text: Vec<usize>) -> Self {
        Self { visual, text }
    }

    pub fn len(&self) -> usize {
        self.visual.rows() + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the last input position.
    pub fn last_pos(&self) -> usize {
        self.len() - 1
    }

    pub fn roles(&self) -> Vec<Role> {
        let nv = self.visual.rows();
        let mut r = vec![Role::Visual; nv];
        for i in 0..self.text.len() {
            r.push(if i + 1 == self.text.len() {
                Role::Last
            } else {
                Role::Query
            });
        }
        r
    }

    pub fn validate(&self, c: &ModelConfig) -> Result<()> {
        if self.visual.rows() != c.n_visual || self.visual.cols() != c.d_model {
            return Err(Error::Input(format!(
                "visual prefix is {}x{}, model expects {}x{}",
                self.visual.rows(),
                self.visual.cols(),
                c.n_visual,
                c.d_model
            )));
        }
        if self.text.is_empty() {
            return Err(Error::Input("text must hold at least one token".into()));
        }
        if let Some(&t) = self.text.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Index(format!("token {t} outside vocab {}", c.vocab_size)));
        }
        if self.len() > c.max_seq {
            return Err(Error::Length {
                len: self.len(),
                max: c.max_seq,
            });
        }
        if !self.visual.is_finite() {
            return Err(Error::Input("visual prefix holds non-finite values".into()));
        }
        Ok(())
    }

    /// FNV-1a (64-bit) over the visual bits and token ids.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(&(self.visual.rows() as u64).to_le_bytes());
        eat(&(self.visual.cols() as u64).to_le_bytes());
        for v in self.visual.data() {
            eat(&v.to_bits().to_le_bytes());
        }
        eat(&(self.text.len() as u64).to_le_bytes());
        for &t in &self.text {
            eat(&(t as u64).to_le_bytes());
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_partition() {
        let x = InputSequence::new(Tensor2::zeros(3, 4), vec![1, 2, 3]);
        assert_eq!(
            x.roles(),
            vec![
                Role::Visual,
                Role::Visual,
                Role::Visual,
                Role::Query,
                Role::Query,
                Role::Last
            ]
        );
        assert_eq!(x.roles().iter().filter(|r| **r == Role::Last).count(), 1);
    }

    #[test]
    fn fingerprint_sensitive() {
        let a = InputSequence::new(Tensor2::zeros(2, 2), vec![1]);
        let mut b = a.clone();
        b.visual.set(1, 1, 1e-300);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }

    #[test]
    fn too_long_is_length_error() {
        let c = ModelConfig::small(1, 1, 4, 4, 8, 2);
        let x = InputSequence::new(Tensor2::zeros(2, 4), vec![0; c.max_seq]);
        assert!(matches!(x.validate(&c), Err(Error::Length { .. })));
    }
}
