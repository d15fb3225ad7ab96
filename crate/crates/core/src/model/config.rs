// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_visual: usize,
    pub max_seq: usize,
    /// Last layer of the adapt phase.
    pub adapt_end: usize,
    /// Last layer of the aggregate phase.
    pub aggregate_end: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 256,
            vocab_size: 512,
            n_visual: 16,
            max_seq: 128,
            adapt_end: 3,
            aggregate_end: 7,
        }
    }
}

/// The three processing phases, as inclusive layer ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseName {
    Adapt,
    Aggregate,
    Execute,
}

impl PhaseName {
    pub const ALL: [PhaseName; 3] = [PhaseName::Adapt, PhaseName::Aggregate, PhaseName::Execute];
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return bad("layer, head, width and mlp counts must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_head != self.d_model / self.n_heads {
            return bad(format!(
                "d_head {} must equal d_model / n_heads = {}",
                self.d_head,
                self.d_model / self.n_heads
            ));
        }
        // A single block cannot host three phases; it may collapse them.
        let ordered = if self.n_layers == 1 {
            self.adapt_end == 0 && self.aggregate_end == 0
        } else {
            self.adapt_end < self.aggregate_end && self.aggregate_end < self.n_layers
        };
        if !ordered {
            return bad(format!(
                "need adapt_end < aggregate_end < n_layers, got {} / {} / {}",
                self.adapt_end, self.aggregate_end, self.n_layers
            ));
        }
        if self.vocab_size == 0 || self.max_seq <= self.n_visual {
            return bad("vocab must be nonempty and max_seq must exceed n_visual".into());
        }
        Ok(())
    }

    /// Builds a config with `d_head` derived; convenient for small test models.
    pub fn small(n_layers: usize, n_heads: usize, d_model: usize, d_mlp: usize, vocab: usize, n_visual: usize) -> Self {
        let (adapt_end, aggregate_end) = match n_layers {
            0 | 1 => (0, 0),
            2 => (0, 1),
            n => ((n - 1) / 3, (2 * n - 1) / 3),
        };
        Self {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads.max(1),
            d_mlp,
            vocab_size: vocab,
            n_visual,
            max_seq: n_visual + 32,
            adapt_end,
            aggregate_end,
        }
    }

    pub fn phase_of(&self, layer: usize) -> PhaseName {
        if layer <= self.adapt_end {
            PhaseName::Adapt
        } else if layer <= self.aggregate_end {
            PhaseName::Aggregate
        } else {
            PhaseName::Execute
        }
    }

    pub fn phase_layers(&self, phase: PhaseName) -> std::ops::Range<usize> {
        match phase {
            PhaseName::Adapt => 0..self.adapt_end + 1,
            PhaseName::Aggregate => self.adapt_end + 1..self.aggregate_end + 1,
            PhaseName::Execute => self.aggregate_end + 1..self.n_layers,
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embed = self.vocab_size * d * 2 + self.max_seq * d;
        let per_layer = 4 * d * d + 2 * d * self.d_mlp + 4 * d;
        embed + self.n_layers * per_layer + 2 * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_phases_cover() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        let mut n = 0;
        for p in PhaseName::ALL {
            for l in c.phase_layers(p) {
                assert_eq!(c.phase_of(l), p);
                n += 1;
            }
        }
        assert_eq!(n, c.n_layers);
        assert_eq!(c.phase_layers(PhaseName::Aggregate), 4..8);
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let c = ModelConfig {
            d_model: 65,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn phase_order_is_enforced() {
        let c = ModelConfig {
            adapt_end: 7,
            aggregate_end: 7,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
