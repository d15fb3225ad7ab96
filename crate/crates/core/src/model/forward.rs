// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hooked forward engine with a key/value cache.
//!
//! Every instrumentation point hands the hook a mutable slice at the moment
//! the value is produced and before anything downstream reads it. Hook
//! points, per layer and position:
//!
//! * `embedding`: layer-0 input (visual rows raw, text = token + position)
//! * `key`: per-head key slice, before it enters the cache
//! * `scores`: per-head pre-softmax row over keys `0..=pos`
//! * `probs`: the same row after softmax
//! * `head_out`: per-head attention output, before `W_O`
//! * `attn_out`: the summed attention block output
//! * `neurons`: post-GELU MLP activations
//! * `residual`: residual stream after the whole block

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{InputSequence, ModelBundle, Role};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor2};

/// `Prefill` is step 0; `Decode(t)` is the step that feeds generated token `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode(usize),
}

impl Phase {
    pub fn step(self) -> usize {
        match self {
            Phase::Prefill => 0,
            Phase::Decode(t) => t,
        }
    }
}

/// Where a hook fires.
#[derive(Clone, Copy, Debug)]
pub struct Site<'a> {
    pub phase: Phase,
    pub layer: usize,
    pub pos: usize,
    /// Roles of every position known so far.
    pub roles: &'a [Role],
}

#[allow(unused_variables)]
pub trait Hook {
    fn embedding(&mut self, site: &Site, x: &mut [f64]) {}
    fn key(&mut self, site: &Site, head: usize, k: &mut [f64]) {}
    fn scores(&mut self, site: &Site, head: usize, row: &mut [f64]) {}
    fn probs(&mut self, site: &Site, head: usize, row: &mut [f64]) {}
    fn head_out(&mut self, site: &Site, head: usize, z: &mut [f64]) {}
    fn attn_out(&mut self, site: &Site, a: &mut [f64]) {}
    fn neurons(&mut self, site: &Site, n: &mut [f64]) {}
    fn residual(&mut self, site: &Site, x: &mut [f64]) {}
}

pub struct NoHook;
impl Hook for NoHook {}

/// Applies hooks in order; put recorders last so they see final values.
#[derive(Default)]
pub struct HookChain<'a> {
    hooks: Vec<&'a mut dyn Hook>,
}

impl<'a> HookChain<'a> {
    pub fn new() -> Self {
        Self { hooks: Vec::new() }
    }

    pub fn with(mut self, h: &'a mut dyn Hook) -> Self {
        self.hooks.push(h);
        self
    }

    pub fn push(&mut self, h: &'a mut dyn Hook) {
        self.hooks.push(h);
    }
}

macro_rules! fan_out {
    ($self:ident, $m:ident, $($a:expr),*) => {
        for h in $self.hooks.iter_mut() {
            h.$m($($a),*);
        }
    };
}

impl Hook for HookChain<'_> {
    fn embedding(&mut self, s: &Site, x: &mut [f64]) {
        fan_out!(self, embedding, s, x);
    }
    fn key(&mut self, s: &Site, h: usize, k: &mut [f64]) {
        fan_out!(self, key, s, h, k);
    }
    fn scores(&mut self, s: &Site, h: usize, r: &mut [f64]) {
        fan_out!(self, scores, s, h, r);
    }
    fn probs(&mut self, s: &Site, h: usize, r: &mut [f64]) {
        fan_out!(self, probs, s, h, r);
    }
    fn head_out(&mut self, s: &Site, h: usize, z: &mut [f64]) {
        fan_out!(self, head_out, s, h, z);
    }
    fn attn_out(&mut self, s: &Site, a: &mut [f64]) {
        fan_out!(self, attn_out, s, a);
    }
    fn neurons(&mut self, s: &Site, n: &mut [f64]) {
        fan_out!(self, neurons, s, n);
    }
    fn residual(&mut self, s: &Site, x: &mut [f64]) {
        fan_out!(self, residual, s, x);
    }
}

#[derive(Clone, Debug, Default)]
struct LayerKv {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Per-layer keys and values for every processed position.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    layers: Vec<LayerKv>,
}

impl KvCache {
    fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where a partial run stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopAt {
    /// Run every block in the range completely.
    Full,
    /// Skip the MLP of the last block in the range.
    AfterAttention,
}

#[allow(clippy::too_many_arguments)]
fn run_block(
    bundle: &ModelBundle,
    layer: usize,
    kv: &mut LayerKv,
    xs: &mut [Vec<f64>],
    start: usize,
    phase: Phase,
    roles: &[Role],
    hook: &mut dyn Hook,
    skip_mlp: bool,
) {
    let c = &bundle.config;
    let w = &bundle.weights.layers[layer];
    let (d, dh) = (c.d_model, c.d_head);
    let scale = 1.0 / (dh as f64).sqrt();
    debug_assert_eq!(kv.keys.len(), start);
    let mut ln = vec![0.0; d];
    let mut qs = Vec::with_capacity(xs.len());
    for (i, x) in xs.iter().enumerate() {
        let site = Site {
            phase,
            layer,
            pos: start + i,
            roles,
        };
        kernels::layer_norm(x, &w.ln1_g, &w.ln1_b, &mut ln);
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        kernels::vec_mat(&ln, &w.w_q, &mut q);
        kernels::vec_mat(&ln, &w.w_k, &mut k);
        kernels::vec_mat(&ln, &w.w_v, &mut v);
        for h in 0..c.n_heads {
            hook.key(&site, h, &mut k[h * dh..(h + 1) * dh]);
        }
        kv.keys.push(k);
        kv.values.push(v);
        qs.push(q);
    }
    let mut z = vec![0.0; d];
    let mut a = vec![0.0; d];
    let mut up = vec![0.0; c.d_mlp];
    let mut down = vec![0.0; d];
    for (i, x) in xs.iter_mut().enumerate() {
        let pos = start + i;
        let site = Site {
            phase,
            layer,
            pos,
            roles,
        };
        for h in 0..c.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = &qs[i][cols.clone()];
            let mut row: Vec<f64> = (0..=pos)
                .map(|j| kernels::dot(qh, &kv.keys[j][cols.clone()]) * scale)
                .collect();
            hook.scores(&site, h, &mut row);
            kernels::softmax_in_place(&mut row);
            hook.probs(&site, h, &mut row);
            let vals: Vec<&[f64]> = (0..=pos).map(|j| &kv.values[j][cols.clone()]).collect();
            kernels::attend(&row, &vals, &mut z[cols.clone()]);
            hook.head_out(&site, h, &mut z[cols]);
        }
        kernels::vec_mat(&z, &w.w_o, &mut a);
        hook.attn_out(&site, &mut a);
        for (xv, av) in x.iter_mut().zip(&a) {
            *xv += av;
        }
        if skip_mlp {
            continue;
        }
        kernels::layer_norm(x, &w.ln2_g, &w.ln2_b, &mut ln);
        kernels::vec_mat(&ln, &w.w_up, &mut up);
        for u in up.iter_mut() {
            *u = kernels::gelu(*u);
        }
        hook.neurons(&site, &mut up);
        kernels::vec_mat(&up, &w.w_down, &mut down);
        for (xv, dv) in x.iter_mut().zip(&down) {
            *xv += dv;
        }
        hook.residual(&site, x);
    }
}

/// Layer-0 inputs for `tokens` placed at absolute positions `start..`.
pub fn embed_positions(
    bundle: &ModelBundle,
    visual: Option<&Tensor2>,
    tokens: &[usize],
    start: usize,
) -> Vec<Vec<f64>> {
    let w = &bundle.weights;
    let mut out = Vec::new();
    if let Some(v) = visual {
        for r in 0..v.rows() {
            out.push(v.row(r).to_vec());
        }
    }
    let base = start + out.len();
    for (i, &t) in tokens.iter().enumerate() {
        let e = w.tok_embed.row(t);
        let p = w.pos_embed.row(base + i);
        out.push(e.iter().zip(p).map(|(a, b)| a + b).collect());
    }
    out
}

/// Unembedded logits of one residual vector.
pub fn logits_at(bundle: &ModelBundle, x: &[f64]) -> Vec<f64> {
    let w = &bundle.weights;
    let mut ln = vec![0.0; x.len()];
    kernels::layer_norm(x, &w.lnf_g, &w.lnf_b, &mut ln);
    let mut out = vec![0.0; bundle.config.vocab_size];
    kernels::vec_mat(&ln, &w.unembed, &mut out);
    out
}

/// An incremental pass over one sequence.
pub struct Session<'m> {
    bundle: &'m ModelBundle,
    cache: KvCache,
    roles: Vec<Role>,
    steps: usize,
    resid: Vec<Vec<f64>>,
}

impl<'m> Session<'m> {
    pub fn new(bundle: &'m ModelBundle) -> Self {
        Self {
            bundle,
            cache: KvCache::new(bundle.config.n_layers),
            roles: Vec::new(),
            steps: 0,
            resid: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Final residual of every processed position.
    pub fn final_residuals(&self) -> &[Vec<f64>] {
        &self.resid
    }

    fn advance(&mut self, mut xs: Vec<Vec<f64>>, phase: Phase, hook: &mut dyn Hook) -> Vec<Vec<f64>> {
        let start = self.resid.len();
        for (i, x) in xs.iter_mut().enumerate() {
            let site = Site {
                phase,
                layer: 0,
                pos: start + i,
                roles: &self.roles,
            };
            hook.embedding(&site, x);
        }
        for layer in 0..self.bundle.config.n_layers {
            run_block(
                self.bundle,
                layer,
                &mut self.cache.layers[layer],
                &mut xs,
                start,
                phase,
                &self.roles,
                hook,
                false,
            );
        }
        self.resid.extend(xs.iter().cloned());
        xs
    }

    /// Processes the input, plus optional trailing tokens tagged `Generated`,
    /// in one prefill pass. Returns logits for every position.
    pub fn prefill_with(
        &mut self,
        input: &InputSequence,
        extra: &[usize],
        hook: &mut dyn Hook,
    ) -> Result<Tensor2> {
        let c = &self.bundle.config;
        input.validate(c)?;
        if !self.roles.is_empty() {
            return Err(Error::Internal("prefill on a used session".into()));
        }
        let total = input.len() + extra.len();
        if total > c.max_seq {
            return Err(Error::Length {
                len: total,
                max: c.max_seq,
            });
        }
        if let Some(&t) = extra.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Index(format!("token {t} outside vocab")));
        }
        self.roles = input.roles();
        self.roles.extend(std::iter::repeat_n(Role::Generated, extra.len()));
        let mut toks = input.text.clone();
        toks.extend_from_slice(extra);
        let xs = embed_positions(self.bundle, Some(&input.visual), &toks, 0);
        let out = self.advance(xs, Phase::Prefill, hook);
        let mut logits = Tensor2::zeros(out.len(), c.vocab_size);
        for (i, x) in out.iter().enumerate() {
            logits.row_mut(i).copy_from_slice(&logits_at(self.bundle, x));
        }
        Ok(logits)
    }

    pub fn prefill(&mut self, input: &InputSequence, hook: &mut dyn Hook) -> Result<Tensor2> {
        self.prefill_with(input, &[], hook)
    }

    /// Feeds one generated token; returns the logits at its position.
    pub fn step(&mut self, token: usize, hook: &mut dyn Hook) -> Result<Vec<f64>> {
        let c = &self.bundle.config;
        if self.roles.is_empty() {
            return Err(Error::Internal("decode step before prefill".into()));
        }
        if token >= c.vocab_size {
            return Err(Error::Index(format!("token {token} outside vocab")));
        }
        let pos = self.roles.len();
        if pos + 1 > c.max_seq {
            return Err(Error::Length {
                len: pos + 1,
                max: c.max_seq,
            });
        }
        self.steps += 1;
        self.roles.push(Role::Generated);
        let xs = embed_positions(self.bundle, None, &[token], pos);
        let out = self.advance(xs, Phase::Decode(self.steps), hook);
        Ok(logits_at(self.bundle, &out[0]))
    }
}

/// Full prefill forward: logits for every position.
pub fn forward(bundle: &ModelBundle, input: &InputSequence, hook: &mut dyn Hook) -> Result<Tensor2> {
    Session::new(bundle).prefill(input, hook)
}

/// Runs blocks `layers` over a whole sequence whose input to the first
/// block is `xs`. Used for partial re-runs that reuse an upstream trace.
pub fn run_layers(
    bundle: &ModelBundle,
    mut xs: Vec<Vec<f64>>,
    roles: &[Role],
    layers: Range<usize>,
    hook: &mut dyn Hook,
    stop: StopAt,
) -> Result<Vec<Vec<f64>>> {
    if layers.end > bundle.config.n_layers {
        return Err(Error::Index(format!("layer range {layers:?}")));
    }
    if xs.len() != roles.len() {
        return Err(Error::Shape("one role per position required".into()));
    }
    let last = layers.end.saturating_sub(1);
    for layer in layers {
        let mut kv = LayerKv::default();
        let skip = stop == StopAt::AfterAttention && layer == last;
        run_block(bundle, layer, &mut kv, &mut xs, 0, Phase::Prefill, roles, hook, skip);
    }
    Ok(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::SeededRng;

    fn toy(seed: u64) -> (ModelBundle, InputSequence) {
        let c = ModelConfig::small(3, 2, 8, 16, 30, 3);
        let b = ModelBundle::init_random(c.clone(), seed).unwrap();
        let mut r = SeededRng::new(seed + 100);
        let x = InputSequence::new(r.gaussian_matrix(3, 8, 1.0), vec![4, 9, 2, 17]);
        (b, x)
    }

    #[test]
    fn cached_decode_equals_full_forward() {
        let (b, x) = toy(1);
        let mut s = Session::new(&b);
        let l0 = s.prefill(&x, &mut NoHook).unwrap();
        let la = s.step(5, &mut NoHook).unwrap();
        let lb = s.step(11, &mut NoHook).unwrap();
        let full = Session::new(&b).prefill_with(&x, &[5, 11], &mut NoHook).unwrap();
        assert_eq!(full.row(x.len() - 1), l0.row(x.len() - 1));
        assert_eq!(full.row(x.len()), la.as_slice());
        assert_eq!(full.row(x.len() + 1), lb.as_slice());
    }

    #[test]
    fn causality() {
        let (b, x) = toy(2);
        let base = forward(&b, &x, &mut NoHook).unwrap();
        let mut y = x.clone();
        y.text[1] = 20;
        let pert = forward(&b, &y, &mut NoHook).unwrap();
        let p = 3 + 1;
        for i in 0..x.len() {
            if i < p {
                assert_eq!(base.row(i), pert.row(i));
            } else {
                assert_ne!(base.row(i), pert.row(i));
            }
        }
    }

    struct Grab(Vec<Vec<f64>>);
    impl Hook for Grab {
        fn embedding(&mut self, _: &Site, x: &mut [f64]) {
            self.0.push(x.to_vec());
        }
    }

    #[test]
    fn visual_rows_enter_unchanged() {
        let (b, x) = toy(3);
        let mut g = Grab(Vec::new());
        forward(&b, &x, &mut g).unwrap();
        for r in 0..3 {
            assert_eq!(g.0[r], x.visual.row(r));
        }
    }

    #[test]
    fn partial_run_matches_full() {
        let (b, x) = toy(4);
        struct Res(Vec<Vec<Vec<f64>>>);
        impl Hook for Res {
            fn residual(&mut self, s: &Site, x: &mut [f64]) {
                if self.0.len() <= s.layer {
                    self.0.resize(s.layer + 1, Vec::new());
                }
                self.0[s.layer].push(x.to_vec());
            }
        }
        let mut rec = Res(Vec::new());
        let full = forward(&b, &x, &mut rec).unwrap();
        let out = run_layers(&b, rec.0[0].clone(), &x.roles(), 1..3, &mut NoHook, StopAt::Full).unwrap();
        for (i, r) in out.iter().enumerate() {
            assert_eq!(logits_at(&b, r), full.row(i));
        }
    }

    #[test]
    fn hand_computed_single_layer() {
        // 1 layer, 1 head, d=2, vocab 2, one visual row + one token.
        let c = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            d_head: 2,
            d_mlp: 1,
            vocab_size: 2,
            n_visual: 1,
            max_seq: 4,
            adapt_end: 0,
            aggregate_end: 0,
        };
        let mut w = crate::model::ModelWeights::zeros(&c);
        w.tok_embed = Tensor2::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        w.unembed = Tensor2::identity(2);
        let l = &mut w.layers[0];
        l.w_v = Tensor2::identity(2);
        l.w_o = Tensor2::identity(2);
        let b = ModelBundle::new(c, w).unwrap();
        // Zero q/k: uniform attention. Visual [3,1] normalises to [1,-1];
        // token 0 [0,2] normalises to [-1,1]. Position 1 averages: [0,0].
        let x = InputSequence::new(Tensor2::from_rows(&[vec![3.0, 1.0]]).unwrap(), vec![0]);
        let logits = forward(&b, &x, &mut NoHook).unwrap();
        // Residual at 1: [0,2] + [0,0] = [0,2] -> LN [-1,1] (eps negligible).
        assert!((logits.get(1, 0) + 1.0).abs() < 1e-9);
        assert!((logits.get(1, 1) - 1.0).abs() < 1e-9);
        // Position 0: [3,1] + attn [1,-1] = [4,0] -> LN [1,-1].
        assert!((logits.get(0, 0) - 1.0).abs() < 1e-9);
        assert!((logits.get(0, 1) + 1.0).abs() < 1e-9);
    }
}
