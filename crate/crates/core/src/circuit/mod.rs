// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit discovery: latent restoration head ranking, source tokens,
//! neuron attribution, saliency, logit lens, phase-level patching,
//! knockout / recovery, head-set intersections and keyword probes.
//!
//! The intention metric is always read on the attention-block output of the
//! target layer at the last input position.

mod grad;

pub use grad::{
    attribution_score, flow_sums, grad_r_wrt_key, saliency, taped_forward, trace_neurons, AttributionMode,
    NeuronScore, NeuronTrace, SaliencyLayer, SaliencyMap, TapedForward,
};

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Evaluator;
use crate::model::{
    forward, greedy_decode_with, logits_at, run_layers, Hook, HookChain, InputSequence, ModelBundle, PhaseName, Role,
    Site, StopAt,
};
use crate::numerics::{cosine_sim, kernels};
use crate::par;
use crate::steering::ContrastivePair;
use crate::trace::{
    capture_with_continuation, run_with_capture, ActivationTrace, CaptureFilter, Family, PatchSpec, PatchTarget,
    Patcher, Recorder,
};

/// `I(A) = cos(A, S_l)`.
pub fn emotional_intention(attn_output: &[f64], steering: &[f64]) -> Result<f64> {
    if attn_output.len() != steering.len() {
        return Err(Error::Shape("attention output and steering lengths differ".into()));
    }
    cosine_sim(attn_output, steering)
}

/// Which layer's attention output the metric is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricTarget {
    CriticalLayer,
    FinalLayer,
}

impl MetricTarget {
    pub fn layer(self, bundle: &ModelBundle, critical: usize) -> usize {
        match self {
            MetricTarget::CriticalLayer => critical,
            MetricTarget::FinalLayer => bundle.config.n_layers - 1,
        }
    }
}

/// Records the attention output at one layer and position.
struct AttnProbe {
    layer: usize,
    pos: usize,
    value: Option<Vec<f64>>,
}

impl Hook for AttnProbe {
    fn attn_out(&mut self, s: &Site, a: &mut [f64]) {
        if s.layer == self.layer && s.pos == self.pos {
            self.value = Some(a.to_vec());
        }
    }
}

/// The contrast of one pair at one target layer, with the traces every
/// restoration run needs.
#[derive(Clone, Debug)]
pub struct RestorationContext {
    pub target_layer: usize,
    pub steering: Vec<f64>,
    /// X⁺ head outputs (layers `..=target`) and attention outputs.
    pub plus: ActivationTrace,
    /// X⁻ embedding, residuals and attention outputs.
    pub minus: ActivationTrace,
    pub i_plus: f64,
    pub i_minus: f64,
    pub last: usize,
    pub roles: Vec<Role>,
}

impl RestorationContext {
    /// Fails with a degenerate-contrast error when `|I⁺ − I⁻| < 1e-9`.
    pub fn new(
        bundle: &ModelBundle,
        x_plus: &InputSequence,
        x_minus: &InputSequence,
        target_layer: usize,
        steering: &[f64],
    ) -> Result<Self> {
        let c = &bundle.config;
        if target_layer >= c.n_layers {
            return Err(Error::Index(format!("target layer {target_layer}")));
        }
        if x_plus.len() != x_minus.len() {
            return Err(Error::Pair("positive and negative lengths differ".into()));
        }
        if steering.len() != c.d_model {
            return Err(Error::Shape("steering vector length".into()));
        }
        let last = x_minus.last_pos();
        let fp = CaptureFilter::only(&[Family::HeadOut, Family::AttnOut]).layers(0..target_layer + 1);
        let fm = CaptureFilter::only(&[Family::Embedding, Family::Residual, Family::AttnOut])
            .layers(0..target_layer + 1);
        let (_, plus) = run_with_capture(bundle, x_plus, &fp)?;
        let (_, minus) = run_with_capture(bundle, x_minus, &fm)?;
        let read = |t: &ActivationTrace| {
            t.attn_out(target_layer, last)
                .ok_or_else(|| Error::Internal("attention output not captured".into()))
                .and_then(|a| emotional_intention(a, steering))
        };
        let i_plus = read(&plus)?;
        let i_minus = read(&minus)?;
        if (i_plus - i_minus).abs() < 1e-9 {
            return Err(Error::DegenerateContrast(format!(
                "I(O+) - I(O-) = {:e}",
                i_plus - i_minus
            )));
        }
        Ok(Self {
            target_layer,
            steering: steering.to_vec(),
            plus,
            minus,
            i_plus,
            i_minus,
            last,
            roles: x_minus.roles(),
        })
    }

    pub fn denom(&self) -> f64 {
        self.i_plus - self.i_minus
    }

    fn ratio(&self, i_patch: f64) -> f64 {
        (i_patch - self.i_minus) / self.denom()
    }

    /// `R` for head `(l′, h)` patched from X⁺ at every position. Re-runs
    /// only layers `l′..=l` from the recorded X⁻ block inputs.
    pub fn restore_head(&self, bundle: &ModelBundle, head: (usize, usize)) -> Result<f64> {
        let (lp, h) = head;
        if lp > self.target_layer {
            return Err(Error::Index(format!("head layer {lp} above target {}", self.target_layer)));
        }
        let spec = PatchSpec::single(PatchTarget::HeadOutput {
            layer: lp,
            head: h,
            positions: (0..=self.last).collect(),
        });
        let mut patcher = Patcher::new(&bundle.config, &self.plus, &spec, &self.roles, self.last + 1)?;
        let mut probe = AttnProbe {
            layer: self.target_layer,
            pos: self.last,
            value: None,
        };
        {
            let mut chain = HookChain::new().with(&mut patcher).with(&mut probe);
            run_layers(
                bundle,
                self.minus.block_inputs(lp)?,
                &self.roles,
                lp..self.target_layer + 1,
                &mut chain,
                StopAt::AfterAttention,
            )?;
        }
        let a = probe.value.ok_or_else(|| Error::Internal("probe missed".into()))?;
        Ok(self.ratio(emotional_intention(&a, &self.steering)?))
    }

    /// `R` for an arbitrary patch from X⁺, by a full forward of X⁻. The
    /// donor must hold the named cells; `plus` only records head and
    /// attention outputs.
    pub fn restore_spec(&self, bundle: &ModelBundle, x_minus: &InputSequence, spec: &PatchSpec) -> Result<f64> {
        let mut patcher = Patcher::new(&bundle.config, &self.plus, spec, &self.roles, self.last + 1)?;
        let i = intention_under(bundle, x_minus, self.target_layer, &self.steering, &mut patcher)?;
        Ok(self.ratio(i))
    }
}

/// `I` at `(layer, N)` of a forward on `input` under `hook`.
pub fn intention_under(
    bundle: &ModelBundle,
    input: &InputSequence,
    layer: usize,
    steering: &[f64],
    hook: &mut dyn Hook,
) -> Result<f64> {
    let mut probe = AttnProbe {
        layer,
        pos: input.last_pos(),
        value: None,
    };
    {
        let mut chain = HookChain::new().with(hook).with(&mut probe);
        forward(bundle, input, &mut chain)?;
    }
    let a = probe.value.ok_or_else(|| Error::Index(format!("layer {layer} not reached")))?;
    emotional_intention(&a, steering)
}

/// Latent restoration of one head for one pair.
pub fn latent_restoration(
    bundle: &ModelBundle,
    x_plus: &InputSequence,
    x_minus: &InputSequence,
    head: (usize, usize),
    critical_layer: usize,
    steering: &[f64],
) -> Result<f64> {
    RestorationContext::new(bundle, x_plus, x_minus, critical_layer, steering)?.restore_head(bundle, head)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    /// Mean `R` over usable pairs; absent when every pair was degenerate.
    pub score: Option<f64>,
    pub emotion: String,
    pub target: MetricTarget,
    pub target_layer: usize,
    pub n_used: usize,
    pub n_skipped: usize,
}

impl HeadScore {
    pub fn skipped(&self) -> bool {
        self.score.is_none()
    }
}

/// Mean restoration of every head upstream of the target layer, sorted by
/// score descending, ties by `(layer, head)`; skipped heads last.
pub fn rank_heads(
    bundle: &ModelBundle,
    pairs: &[ContrastivePair],
    critical_layer: usize,
    steering: &[f64],
    target: MetricTarget,
) -> Result<Vec<HeadScore>> {
    if pairs.is_empty() {
        return Err(Error::Input("rank_heads needs at least one pair".into()));
    }
    let c = &bundle.config;
    let tl = target.layer(bundle, critical_layer);
    if tl >= c.n_layers {
        return Err(Error::Index(format!("target layer {tl}")));
    }
    let heads: Vec<(usize, usize)> = (0..tl).flat_map(|l| (0..c.n_heads).map(move |h| (l, h))).collect();
    let per_pair = par::try_map(pairs, |p| -> Result<Option<Vec<f64>>> {
        let ctx = match RestorationContext::new(bundle, &p.x_plus, &p.x_minus, tl, steering) {
            Ok(ctx) => ctx,
            Err(Error::DegenerateContrast(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        heads.iter().map(|&h| ctx.restore_head(bundle, h)).collect::<Result<Vec<_>>>().map(Some)
    })?;
    let used: Vec<&Vec<f64>> = per_pair.iter().flatten().collect();
    let n_skipped = per_pair.len() - used.len();
    let emotion = pairs[0].emotion.clone();
    let mut out: Vec<HeadScore> = heads
        .iter()
        .enumerate()
        .map(|(i, &(layer, head))| {
            let score = if used.is_empty() {
                None
            } else {
                let mut s = 0.0;
                for r in &used {
                    s += r[i];
                }
                Some(s / used.len() as f64)
            };
            HeadScore {
                layer,
                head,
                score,
                emotion: emotion.clone(),
                target,
                target_layer: tl,
                n_used: used.len(),
                n_skipped,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        let key = |s: &HeadScore| s.score.unwrap_or(f64::NEG_INFINITY);
        b.skipped()
            .cmp(&a.skipped())
            .reverse()
            .then(key(b).total_cmp(&key(a)))
            .then((a.layer, a.head).cmp(&(b.layer, b.head)))
    });
    Ok(out)
}

/// Key position with the largest attention probability from `query_pos`
/// for head `(l′, h)`; ties go to the lowest position.
pub fn source_token(trace: &ActivationTrace, head: (usize, usize), query_pos: usize) -> Result<usize> {
    let p = trace
        .probs(head.0, head.1, query_pos)
        .ok_or_else(|| Error::IncompleteTrace(format!("scores of head {}.{} at {query_pos}", head.0, head.1)))?;
    Ok(kernels::argmax(&p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensRow {
    pub label: String,
    /// `(token, probability)`, most probable first, ties by lower id.
    pub top: Vec<(usize, f64)>,
    pub entropy: f64,
    /// Probability mass on a token set, when one was given.
    pub emotion_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitLensReport {
    pub rows: Vec<LensRow>,
}

/// `softmax(U · LN_final(v))` summary.
pub fn logit_lens(bundle: &ModelBundle, v: &[f64], k: usize) -> Result<LensRow> {
    lens_row(bundle, v, k, None, String::new())
}

fn lens_row(bundle: &ModelBundle, v: &[f64], k: usize, mass_on: Option<&[usize]>, label: String) -> Result<LensRow> {
    if v.len() != bundle.config.d_model {
        return Err(Error::Shape(format!("vector of length {} for d_model {}", v.len(), bundle.config.d_model)));
    }
    let mut p = logits_at(bundle, v);
    kernels::softmax_in_place(&mut p);
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let top = idx.iter().take(k).map(|&t| (t, p[t])).collect();
    let emotion_mass = mass_on.map(|ts| ts.iter().filter(|&&t| t < p.len()).map(|&t| p[t]).sum());
    Ok(LensRow {
        label,
        top,
        entropy: kernels::entropy(&p),
        emotion_mass,
    })
}

/// One lens row per vector (e.g. `S_l` for every layer).
pub fn logit_lens_layers(
    bundle: &ModelBundle,
    vectors: &[Vec<f64>],
    k: usize,
    mass_on: Option<&[usize]>,
) -> Result<LogitLensReport> {
    let rows = vectors
        .iter()
        .enumerate()
        .map(|(l, v)| lens_row(bundle, v, k, mass_on, format!("layer_{l}")))
        .collect::<Result<_>>()?;
    Ok(LogitLensReport { rows })
}

/// Per visual position of one input: lens of its residual at `layer`.
pub fn logit_lens_visual(
    bundle: &ModelBundle,
    input: &InputSequence,
    layer: usize,
    k: usize,
    mass_on: &[usize],
) -> Result<LogitLensReport> {
    let f = CaptureFilter::only(&[Family::Residual]).layers(layer..layer + 1);
    let (_, t) = run_with_capture(bundle, input, &f)?;
    let rows = (0..input.visual.rows())
        .map(|p| {
            let v = t.residual(layer, p).ok_or_else(|| Error::Index(format!("layer {layer}")))?;
            lens_row(bundle, v, k, Some(mass_on), format!("visual_{p}"))
        })
        .collect::<Result<_>>()?;
    Ok(LogitLensReport { rows })
}

/// Patch set for one (role, layer range) cell: residuals of the role's
/// positions after each block, plus the layer-0 inputs when the range
/// starts at 0.
pub fn phase_patch_spec(input: &InputSequence, role: Role, layers: &Range<usize>) -> PatchSpec {
    if layers.is_empty() {
        return PatchSpec::default();
    }
    let mut targets = vec![PatchTarget::TokenGroup {
        role,
        layer_start: layers.start,
        layer_end: layers.end,
    }];
    if layers.start == 0 {
        let positions: Vec<usize> = input
            .roles()
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(p, _)| p)
            .collect();
        targets.push(PatchTarget::Embedding { positions });
    }
    PatchSpec::new(targets)
}

fn patch_donor(bundle: &ModelBundle, x_plus: &InputSequence) -> Result<ActivationTrace> {
    let f = CaptureFilter::only(&[Family::Embedding, Family::Residual]);
    Ok(run_with_capture(bundle, x_plus, &f)?.1)
}

fn patched_decode(
    bundle: &ModelBundle,
    x_minus: &InputSequence,
    donor: &ActivationTrace,
    spec: &PatchSpec,
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut p = Patcher::new(&bundle.config, donor, spec, &x_minus.roles(), x_minus.len())?;
    Ok(greedy_decode_with(bundle, x_minus, max_new, &mut p)?.tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePatchResult {
    pub role: Role,
    pub layer_start: usize,
    pub layer_end: usize,
    pub baseline: f64,
    pub patched: f64,
    pub delta: f64,
}

/// Mean hit-rate change from patching `role`'s residuals over `layers`
/// from X⁺ into X⁻ during prefill.
pub fn phase_patch(
    bundle: &ModelBundle,
    pairs: &[ContrastivePair],
    role: Role,
    layers: Range<usize>,
    evaluator: &Evaluator,
) -> Result<PhasePatchResult> {
    if layers.end > bundle.config.n_layers || layers.start > layers.end {
        return Err(Error::Index(format!("layer range {layers:?}")));
    }
    if pairs.is_empty() {
        return Err(Error::Input("no pairs".into()));
    }
    let rows = par::try_map(pairs, |p| -> Result<(f64, f64)> {
        let base = evaluator.hit_rate(bundle, &p.x_minus, &p.emotion)?;
        let spec = phase_patch_spec(&p.x_minus, role, &layers);
        if spec.is_empty() {
            return Ok((base, base));
        }
        let donor = patch_donor(bundle, &p.x_plus)?;
        let toks = patched_decode(bundle, &p.x_minus, &donor, &spec, evaluator.max_new)?;
        Ok((base, evaluator.score(&toks, &p.emotion)?))
    })?;
    let n = rows.len() as f64;
    let baseline = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let patched = rows.iter().map(|r| r.1).sum::<f64>() / n;
    Ok(PhasePatchResult {
        role,
        layer_start: layers.start,
        layer_end: layers.end,
        baseline,
        patched,
        delta: patched - baseline,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub phase: PhaseName,
    pub role: Role,
    pub layer_start: usize,
    pub layer_end: usize,
    pub patched: f64,
    pub delta: f64,
    /// Fraction of patched decodes containing one of the pair emotion's
    /// keyword tokens.
    pub keyword_frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub baseline: f64,
    pub baseline_keyword_frequency: f64,
    pub cells: Vec<PhaseCell>,
}

impl PhaseGrid {
    /// Role with the largest delta in a phase (ties: V, Q, L order).
    pub fn argmax_role(&self, phase: PhaseName) -> Option<Role> {
        let mut best: Option<&PhaseCell> = None;
        for c in self.cells.iter().filter(|c| c.phase == phase) {
            if best.is_none_or(|b| c.delta > b.delta) {
                best = Some(c);
            }
        }
        best.map(|c| c.role)
    }
}

pub const PHASE_ROLES: [Role; 3] = [Role::Visual, Role::Query, Role::Last];

/// Every (phase, role) cell over shared donors and baselines.
pub fn phase_patch_grid(bundle: &ModelBundle, pairs: &[ContrastivePair], evaluator: &Evaluator) -> Result<PhaseGrid> {
    if pairs.is_empty() {
        return Err(Error::Input("no pairs".into()));
    }
    let c = &bundle.config;
    let cells: Vec<(PhaseName, Role, Range<usize>)> = PhaseName::ALL
        .iter()
        .flat_map(|&ph| PHASE_ROLES.iter().map(move |&r| (ph, r, c.phase_layers(ph))))
        .collect();
    let kw = |toks: &[usize], emotion: &str| -> f64 {
        let group: BTreeSet<usize> = evaluator.lexicon.group_tokens(emotion).into_iter().collect();
        if toks.iter().any(|t| group.contains(t)) {
            1.0
        } else {
            0.0
        }
    };
    let rows = par::try_map(pairs, |p| -> Result<(f64, f64, Vec<(f64, f64)>)> {
        let base_toks = evaluator.decode_with(bundle, &p.x_minus, &mut crate::model::NoHook)?;
        let base = evaluator.score(&base_toks, &p.emotion)?;
        let donor = patch_donor(bundle, &p.x_plus)?;
        let mut out = Vec::with_capacity(cells.len());
        for (_, role, layers) in &cells {
            let spec = phase_patch_spec(&p.x_minus, *role, layers);
            let toks = if spec.is_empty() {
                base_toks.clone()
            } else {
                patched_decode(bundle, &p.x_minus, &donor, &spec, evaluator.max_new)?
            };
            out.push((evaluator.score(&toks, &p.emotion)?, kw(&toks, &p.emotion)));
        }
        Ok((base, kw(&base_toks, &p.emotion), out))
    })?;
    let n = rows.len() as f64;
    let baseline = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let baseline_kw = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let cells = cells
        .iter()
        .enumerate()
        .map(|(i, (phase, role, layers))| {
            let patched = rows.iter().map(|r| r.2[i].0).sum::<f64>() / n;
            PhaseCell {
                phase: *phase,
                role: *role,
                layer_start: layers.start,
                layer_end: layers.end,
                patched,
                delta: patched - baseline,
                keyword_frequency: rows.iter().map(|r| r.2[i].1).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(PhaseGrid {
        baseline,
        baseline_keyword_frequency: baseline_kw,
        cells,
    })
}

/// How knocked-out heads are replaced.
#[derive(Clone, Copy, Debug)]
pub enum KnockoutMode<'d> {
    Zero,
    /// Donor head outputs where the donor has them; positions it lacks are
    /// left as computed.
    Recover(&'d ActivationTrace),
}

/// Head ablation active at prefill and every decode step.
pub struct KnockoutHook<'d> {
    heads: BTreeSet<(usize, usize)>,
    mode: KnockoutMode<'d>,
}

impl<'d> KnockoutHook<'d> {
    pub fn new(bundle: &ModelBundle, heads: &[(usize, usize)], mode: KnockoutMode<'d>) -> Result<Self> {
        let c = &bundle.config;
        for &(l, h) in heads {
            if l >= c.n_layers || h >= c.n_heads {
                return Err(Error::Index(format!("head {l}.{h} out of range")));
            }
        }
        Ok(Self {
            heads: heads.iter().copied().collect(),
            mode,
        })
    }
}

impl Hook for KnockoutHook<'_> {
    fn head_out(&mut self, s: &Site, h: usize, z: &mut [f64]) {
        if !self.heads.contains(&(s.layer, h)) {
            return;
        }
        match self.mode {
            KnockoutMode::Zero => z.iter_mut().for_each(|v| *v = 0.0),
            KnockoutMode::Recover(d) => {
                if let Some(v) = d.head_out(s.layer, h, s.pos) {
                    z.copy_from_slice(v);
                }
            }
        }
    }
}

pub fn knockout(
    bundle: &ModelBundle,
    input: &InputSequence,
    heads: &[(usize, usize)],
    mode: KnockoutMode<'_>,
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut hook = KnockoutHook::new(bundle, heads, mode)?;
    Ok(greedy_decode_with(bundle, input, max_new, &mut hook)?.tokens)
}

/// Head outputs of X⁺ over its own greedy continuation, so recovery can
/// also patch generated positions.
pub fn recovery_donor(bundle: &ModelBundle, x_plus: &InputSequence, max_new: usize) -> Result<ActivationTrace> {
    let toks = greedy_decode_with(bundle, x_plus, max_new, &mut crate::model::NoHook)?.tokens;
    let extra = &toks[..toks.len() - 1];
    Ok(capture_with_continuation(bundle, x_plus, extra, &CaptureFilter::only(&[Family::HeadOut]))?.1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntersectionCounts {
    pub emotions: Vec<String>,
    /// Heads whose set of containing top-k lists is exactly this subset.
    pub exclusive: Vec<(Vec<String>, usize)>,
    /// Heads in every top-k list of this subset.
    pub inclusive: Vec<(Vec<String>, usize)>,
    pub union: usize,
}

/// Overlap counts of per-emotion top-k heads for every nonempty subset
/// (subsets in bitmask order).
pub fn head_intersection(rankings: &[(String, Vec<(usize, usize)>)], k: usize) -> Result<IntersectionCounts> {
    let n = rankings.len();
    if n < 2 {
        return Err(Error::Input("need at least two emotions".into()));
    }
    if n > 16 {
        return Err(Error::Input("at most 16 emotions".into()));
    }
    let sets: Vec<BTreeSet<(usize, usize)>> = rankings.iter().map(|(_, r)| r.iter().take(k).copied().collect()).collect();
    let mut member: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for (i, s) in sets.iter().enumerate() {
        for h in s {
            *member.entry(*h).or_default() |= 1 << i;
        }
    }
    let names = |mask: u32| -> Vec<String> {
        (0..n).filter(|i| mask & (1 << i) != 0).map(|i| rankings[i].0.clone()).collect()
    };
    let mut exclusive = Vec::new();
    let mut inclusive = Vec::new();
    for mask in 1u32..(1 << n) {
        let ex = member.values().filter(|&&m| m == mask).count();
        let inc = member.values().filter(|&&m| m & mask == mask).count();
        exclusive.push((names(mask), ex));
        inclusive.push((names(mask), inc));
    }
    Ok(IntersectionCounts {
        emotions: rankings.iter().map(|r| r.0.clone()).collect(),
        exclusive,
        inclusive,
        union: member.len(),
    })
}

/// Builds a fresh hook for input `i`; `None` runs unhooked.
pub type HookFactory<'f> = dyn Fn(usize) -> Result<Option<Box<dyn Hook + 'f>>> + Sync + 'f;

/// Fraction of continuations that contain any target token.
pub fn keyword_frequency_probe(
    bundle: &ModelBundle,
    inputs: &[InputSequence],
    targets: &BTreeSet<usize>,
    make_hook: &HookFactory<'_>,
    max_new: usize,
) -> Result<f64> {
    if let Some(&t) = targets.iter().find(|&&t| t >= bundle.config.vocab_size) {
        return Err(Error::Index(format!("target token {t} outside vocab")));
    }
    if inputs.is_empty() || targets.is_empty() {
        return Ok(0.0);
    }
    let hits = par::map_range(inputs.len(), |i| -> Result<bool> {
        let toks = match make_hook(i)? {
            Some(mut h) => greedy_decode_with(bundle, &inputs[i], max_new, h.as_mut())?.tokens,
            None => greedy_decode_with(bundle, &inputs[i], max_new, &mut crate::model::NoHook)?.tokens,
        };
        Ok(toks.iter().any(|t| targets.contains(t)))
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / inputs.len() as f64)
}

/// A recorder over the whole forward, for callers doing their own patches.
pub fn recorder_for(bundle: &ModelBundle, input: &InputSequence, filter: CaptureFilter) -> Recorder {
    Recorder::new(&bundle.config, input, filter)
}

#[cfg(test)]
mod tests;
