// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation capture and the patch engine.

mod export;
mod patch;

pub use export::{trace_from_bytes, trace_to_bytes, TRACE_MAGIC};
pub use patch::{causal_effect, run_with_patches, PatchSpec, PatchTarget, Patcher};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Hook, InputSequence, ModelBundle, ModelConfig, Site};
use crate::numerics::{kernels, Tensor2};

/// Tensor families a trace can hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Embedding,
    Residual,
    AttnOut,
    HeadOut,
    Scores,
    Neurons,
}

/// What to record. Ranges restrict layers / positions when set.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptureFilter {
    pub embedding: bool,
    pub residual: bool,
    pub attn_out: bool,
    pub head_out: bool,
    pub scores: bool,
    pub neurons: bool,
    pub layers: Option<Range<usize>>,
    pub positions: Option<Range<usize>>,
}

impl CaptureFilter {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            embedding: true,
            residual: true,
            attn_out: true,
            head_out: true,
            scores: true,
            neurons: true,
            layers: None,
            positions: None,
        }
    }

    pub fn only(families: &[Family]) -> Self {
        let mut f = Self::none();
        for fam in families {
            match fam {
                Family::Embedding => f.embedding = true,
                Family::Residual => f.residual = true,
                Family::AttnOut => f.attn_out = true,
                Family::HeadOut => f.head_out = true,
                Family::Scores => f.scores = true,
                Family::Neurons => f.neurons = true,
            }
        }
        f
    }

    pub fn layers(mut self, r: Range<usize>) -> Self {
        self.layers = Some(r);
        self
    }

    pub fn positions(mut self, r: Range<usize>) -> Self {
        self.positions = Some(r);
        self
    }

    pub fn is_empty(&self) -> bool {
        !(self.embedding || self.residual || self.attn_out || self.head_out || self.scores || self.neurons)
    }

    fn keeps(&self, layer: usize, pos: usize) -> bool {
        self.layers.as_ref().is_none_or(|r| r.contains(&layer))
            && self.positions.as_ref().is_none_or(|r| r.contains(&pos))
    }
}

type Slots = Vec<Option<Vec<f64>>>;
type Cell<'a> = (Family, usize, usize, usize, &'a [f64]);

fn per_layer<'a>(fam: Family, store: &'a [Slots], out: &mut Vec<Cell<'a>>) {
    for (l, s) in store.iter().enumerate() {
        for (p, v) in s.iter().enumerate() {
            if let Some(v) = v {
                out.push((fam, l, 0, p, v.as_slice()));
            }
        }
    }
}

fn per_head<'a>(fam: Family, store: &'a [Vec<Slots>], out: &mut Vec<Cell<'a>>) {
    for (l, hs) in store.iter().enumerate() {
        for (h, s) in hs.iter().enumerate() {
            for (p, v) in s.iter().enumerate() {
                if let Some(v) = v {
                    out.push((fam, l, h, p, v.as_slice()));
                }
            }
        }
    }
}

fn put(slots: &mut Slots, pos: usize, v: &[f64]) {
    if slots.len() <= pos {
        slots.resize(pos + 1, None);
    }
    slots[pos] = Some(v.to_vec());
}

fn get(slots: &Slots, pos: usize) -> Option<&[f64]> {
    slots.get(pos).and_then(|s| s.as_deref())
}

/// Recorded activations of one pass (prefill and any decode steps).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    /// Length of the input part (visual + text).
    pub input_len: usize,
    /// Total positions seen, including generated ones.
    pub seq_len: usize,
    pub fingerprint: u64,
    pub(crate) embedding: Slots,
    pub(crate) residual: Vec<Slots>,
    pub(crate) attn_out: Vec<Slots>,
    pub(crate) head_out: Vec<Vec<Slots>>,
    pub(crate) scores: Vec<Vec<Slots>>,
    pub(crate) neurons: Vec<Slots>,
}

impl ActivationTrace {
    pub fn empty(c: &ModelConfig, input: &InputSequence) -> Self {
        Self {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            d_head: c.d_head,
            d_mlp: c.d_mlp,
            input_len: input.len(),
            seq_len: input.len(),
            fingerprint: input.fingerprint(),
            embedding: Vec::new(),
            residual: vec![Vec::new(); c.n_layers],
            attn_out: vec![Vec::new(); c.n_layers],
            head_out: vec![vec![Vec::new(); c.n_heads]; c.n_layers],
            scores: vec![vec![Vec::new(); c.n_heads]; c.n_layers],
            neurons: vec![Vec::new(); c.n_layers],
        }
    }

    pub fn embedding(&self, pos: usize) -> Option<&[f64]> {
        get(&self.embedding, pos)
    }

    pub fn residual(&self, layer: usize, pos: usize) -> Option<&[f64]> {
        self.residual.get(layer).and_then(|s| get(s, pos))
    }

    pub fn attn_out(&self, layer: usize, pos: usize) -> Option<&[f64]> {
        self.attn_out.get(layer).and_then(|s| get(s, pos))
    }

    pub fn head_out(&self, layer: usize, head: usize, pos: usize) -> Option<&[f64]> {
        self.head_out
            .get(layer)
            .and_then(|h| h.get(head))
            .and_then(|s| get(s, pos))
    }

    /// Pre-softmax score row of query `pos` (length `pos + 1`).
    pub fn scores(&self, layer: usize, head: usize, pos: usize) -> Option<&[f64]> {
        self.scores
            .get(layer)
            .and_then(|h| h.get(head))
            .and_then(|s| get(s, pos))
    }

    /// Post-softmax attention row, recomputed from the stored scores.
    pub fn probs(&self, layer: usize, head: usize, pos: usize) -> Option<Vec<f64>> {
        self.scores(layer, head, pos).map(|r| {
            let mut p = r.to_vec();
            kernels::softmax_in_place(&mut p);
            p
        })
    }

    pub fn neurons(&self, layer: usize, pos: usize) -> Option<&[f64]> {
        self.neurons.get(layer).and_then(|s| get(s, pos))
    }

    /// Residual input to `layer` (the embedding for layer 0).
    pub fn block_input(&self, layer: usize, pos: usize) -> Option<&[f64]> {
        if layer == 0 {
            self.embedding(pos)
        } else {
            self.residual(layer - 1, pos)
        }
    }

    /// Layer-input residual rows for every position, or an error naming the
    /// first missing cell.
    pub fn block_inputs(&self, layer: usize) -> Result<Vec<Vec<f64>>> {
        (0..self.seq_len)
            .map(|p| {
                self.block_input(layer, p).map(<[f64]>::to_vec).ok_or_else(|| {
                    Error::IncompleteTrace(format!("no input to layer {layer} at position {p}"))
                })
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_count() == 0
    }

    /// Every stored cell as `(family, layer, head, pos, values)`, in a fixed
    /// order. `layer`/`head` are 0 where they do not apply.
    pub fn cells(&self) -> Vec<Cell<'_>> {
        let mut out = Vec::new();
        for (p, v) in self.embedding.iter().enumerate() {
            if let Some(v) = v {
                out.push((Family::Embedding, 0, 0, p, v.as_slice()));
            }
        }
        per_layer(Family::Residual, &self.residual, &mut out);
        per_layer(Family::AttnOut, &self.attn_out, &mut out);
        per_head(Family::HeadOut, &self.head_out, &mut out);
        per_head(Family::Scores, &self.scores, &mut out);
        per_layer(Family::Neurons, &self.neurons, &mut out);
        out
    }

    pub fn cell_count(&self) -> usize {
        self.cells().len()
    }

    pub(crate) fn store(&mut self, fam: Family, layer: usize, head: usize, pos: usize, v: &[f64]) {
        match fam {
            Family::Embedding => put(&mut self.embedding, pos, v),
            Family::Residual => put(&mut self.residual[layer], pos, v),
            Family::AttnOut => put(&mut self.attn_out[layer], pos, v),
            Family::HeadOut => put(&mut self.head_out[layer][head], pos, v),
            Family::Scores => put(&mut self.scores[layer][head], pos, v),
            Family::Neurons => put(&mut self.neurons[layer], pos, v),
        }
        if pos + 1 > self.seq_len {
            self.seq_len = pos + 1;
        }
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.cells()
            .iter()
            .all(|(_, _, _, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Checks stored widths against the recorded dimensions.
    pub fn check_dims(&self) -> Result<()> {
        for (fam, _, _, pos, v) in self.cells() {
            let want = match fam {
                Family::Embedding | Family::Residual | Family::AttnOut => self.d_model,
                Family::HeadOut => self.d_head,
                Family::Scores => pos + 1,
                Family::Neurons => self.d_mlp,
            };
            if v.len() != want {
                return Err(Error::Format(format!(
                    "{fam:?} cell at position {pos} has width {}, expected {want}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Hook that copies requested activations into a trace.
pub struct Recorder {
    filter: CaptureFilter,
    pub trace: ActivationTrace,
}

impl Recorder {
    pub fn new(c: &ModelConfig, input: &InputSequence, filter: CaptureFilter) -> Self {
        Self {
            filter,
            trace: ActivationTrace::empty(c, input),
        }
    }

    pub fn finish(self) -> ActivationTrace {
        self.trace
    }
}

impl Hook for Recorder {
    fn embedding(&mut self, s: &Site, x: &mut [f64]) {
        if self.filter.embedding && self.filter.keeps(0, s.pos) {
            self.trace.store(Family::Embedding, 0, 0, s.pos, x);
        }
    }
    fn scores(&mut self, s: &Site, h: usize, r: &mut [f64]) {
        if self.filter.scores && self.filter.keeps(s.layer, s.pos) {
            self.trace.store(Family::Scores, s.layer, h, s.pos, r);
        }
    }
    fn head_out(&mut self, s: &Site, h: usize, z: &mut [f64]) {
        if self.filter.head_out && self.filter.keeps(s.layer, s.pos) {
            self.trace.store(Family::HeadOut, s.layer, h, s.pos, z);
        }
    }
    fn attn_out(&mut self, s: &Site, a: &mut [f64]) {
        if self.filter.attn_out && self.filter.keeps(s.layer, s.pos) {
            self.trace.store(Family::AttnOut, s.layer, 0, s.pos, a);
        }
    }
    fn neurons(&mut self, s: &Site, n: &mut [f64]) {
        if self.filter.neurons && self.filter.keeps(s.layer, s.pos) {
            self.trace.store(Family::Neurons, s.layer, 0, s.pos, n);
        }
    }
    fn residual(&mut self, s: &Site, x: &mut [f64]) {
        if self.filter.residual && self.filter.keeps(s.layer, s.pos) {
            self.trace.store(Family::Residual, s.layer, 0, s.pos, x);
        }
    }
}

/// Forward with recording; the logits are those of a plain forward.
pub fn run_with_capture(
    bundle: &ModelBundle,
    input: &InputSequence,
    filter: &CaptureFilter,
) -> Result<(Tensor2, ActivationTrace)> {
    let mut rec = Recorder::new(&bundle.config, input, filter.clone());
    let logits = forward(bundle, input, &mut rec)?;
    Ok((logits, rec.finish()))
}

/// Capture over the input followed by `extra` tokens in one pass, so the
/// trace also covers generated positions.
pub fn capture_with_continuation(
    bundle: &ModelBundle,
    input: &InputSequence,
    extra: &[usize],
    filter: &CaptureFilter,
) -> Result<(Tensor2, ActivationTrace)> {
    let mut rec = Recorder::new(&bundle.config, input, filter.clone());
    let logits = crate::model::Session::new(bundle).prefill_with(input, extra, &mut rec)?;
    Ok((logits, rec.finish()))
}

/// `Logit(y⁺) − Logit(y⁻)` on one logit row.
pub fn logit_difference(logits: &[f64], y_plus: usize, y_minus: usize) -> Result<f64> {
    if y_plus >= logits.len() || y_minus >= logits.len() {
        return Err(Error::Index(format!(
            "token ids {y_plus}/{y_minus} outside vocab {}",
            logits.len()
        )));
    }
    Ok(logits[y_plus] - logits[y_minus])
}
