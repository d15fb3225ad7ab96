// SPDX-License-Identifier: MIT OR Apache-2.0

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor2};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    /// `d_model × d_model`; head `h` owns columns `h*d_head..(h+1)*d_head`.
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
    /// `d_model × d_model`; head `h` owns rows `h*d_head..(h+1)*d_head`.
    pub w_o: Tensor2,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    /// `d_model × d_mlp`.
    pub w_up: Tensor2,
    /// `d_mlp × d_model`; row `u` is neuron `u`'s write vector.
    pub w_down: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    /// `vocab × d_model`.
    pub tok_embed: Tensor2,
    /// `max_seq × d_model`, indexed by absolute position; text positions only.
    pub pos_embed: Tensor2,
    /// `d_model × vocab`.
    pub unembed: Tensor2,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
}

/// Config plus weights; immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl LayerWeights {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.d_model;
        Self {
            ln1_g: vec![1.0; d],
            ln1_b: vec![0.0; d],
            w_q: Tensor2::zeros(d, d),
            w_k: Tensor2::zeros(d, d),
            w_v: Tensor2::zeros(d, d),
            w_o: Tensor2::zeros(d, d),
            ln2_g: vec![1.0; d],
            ln2_b: vec![0.0; d],
            w_up: Tensor2::zeros(d, c.d_mlp),
            w_down: Tensor2::zeros(c.d_mlp, d),
        }
    }
}

impl ModelWeights {
    /// All matrices zero, all layer-norm gains one.
    pub fn zeros(c: &ModelConfig) -> Self {
        let d = c.d_model;
        Self {
            tok_embed: Tensor2::zeros(c.vocab_size, d),
            pos_embed: Tensor2::zeros(c.max_seq, d),
            unembed: Tensor2::zeros(d, c.vocab_size),
            layers: (0..c.n_layers).map(|_| LayerWeights::zeros(c)).collect(),
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
        }
    }

    /// Every parameter vector in the fixed serialization order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.tok_embed.data(),
            self.pos_embed.data(),
            self.unembed.data(),
        ];
        for l in &self.layers {
            out.extend([
                l.ln1_g.as_slice(),
                l.ln1_b.as_slice(),
                l.w_q.data(),
                l.w_k.data(),
                l.w_v.data(),
                l.w_o.data(),
                l.ln2_g.as_slice(),
                l.ln2_b.as_slice(),
                l.w_up.data(),
                l.w_down.data(),
            ]);
        }
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_embed.data_mut(),
            self.pos_embed.data_mut(),
            self.unembed.data_mut(),
        ];
        for l in &mut self.layers {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            out.push(l.w_q.data_mut());
            out.push(l.w_k.data_mut());
            out.push(l.w_v.data_mut());
            out.push(l.w_o.data_mut());
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            out.push(l.w_up.data_mut());
            out.push(l.w_down.data_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_shapes(&self, c: &ModelConfig) -> Result<()> {
        let d = c.d_model;
        let shape = |t: &Tensor2, r: usize, k: usize, what: &str| -> Result<()> {
            if t.rows() != r || t.cols() != k {
                return Err(Error::Format(format!(
                    "{what} is {}x{}, config needs {r}x{k}",
                    t.rows(),
                    t.cols()
                )));
            }
            Ok(())
        };
        shape(&self.tok_embed, c.vocab_size, d, "token embedding")?;
        shape(&self.pos_embed, c.max_seq, d, "positional embedding")?;
        shape(&self.unembed, d, c.vocab_size, "unembedding")?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Format("layer count mismatch".into()));
        }
        for l in &self.layers {
            for m in [&l.w_q, &l.w_k, &l.w_v, &l.w_o] {
                shape(m, d, d, "attention projection")?;
            }
            shape(&l.w_up, d, c.d_mlp, "up projection")?;
            shape(&l.w_down, c.d_mlp, d, "down projection")?;
        }
        Ok(())
    }
}

impl ModelBundle {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights })
    }

    /// Gaussian weights with standard deviation `1/sqrt(d_model)`; layer-norm
    /// gains one and shifts zero. Deterministic from `seed`.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let s = 1.0 / (config.d_model as f64).sqrt();
        let d = config.d_model;
        let tok_embed = rng.gaussian_matrix(config.vocab_size, d, s);
        let pos_embed = rng.gaussian_matrix(config.max_seq, d, s);
        let unembed = rng.gaussian_matrix(d, config.vocab_size, s);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                w_q: rng.gaussian_matrix(d, d, s),
                w_k: rng.gaussian_matrix(d, d, s),
                w_v: rng.gaussian_matrix(d, d, s),
                w_o: rng.gaussian_matrix(d, d, s),
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w_up: rng.gaussian_matrix(d, config.d_mlp, s),
                w_down: rng.gaussian_matrix(config.d_mlp, d, s),
            })
            .collect();
        let weights = ModelWeights {
            tok_embed,
            pos_embed,
            unembed,
            layers,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
        };
        Ok(Self { config, weights })
    }

    pub fn head_cols(&self, head: usize) -> std::ops::Range<usize> {
        let dh = self.config.d_head;
        head * dh..(head + 1) * dh
    }
}
