// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{logit_difference, run_with_capture, ActivationTrace, CaptureFilter, Recorder};
use crate::error::{Error, Result};
use crate::model::{forward, Hook, HookChain, InputSequence, ModelBundle, ModelConfig, Role, Site};
use crate::numerics::Tensor2;

/// One thing to overwrite from a donor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchTarget {
    ResidualAt {
        layer: usize,
        positions: Vec<usize>,
    },
    HeadOutput {
        layer: usize,
        head: usize,
        positions: Vec<usize>,
    },
    NeuronActivation {
        layer: usize,
        neuron: usize,
        positions: Vec<usize>,
    },
    /// Residual of every position holding `role`, at layers
    /// `layer_start..layer_end`.
    TokenGroup {
        role: Role,
        layer_start: usize,
        layer_end: usize,
    },
    /// Whole attention-block output at the given positions.
    AttnOutput {
        layer: usize,
        positions: Vec<usize>,
    },
    /// Layer-0 input rows.
    Embedding { positions: Vec<usize> },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub targets: Vec<PatchTarget>,
}

impl PatchSpec {
    pub fn new(targets: Vec<PatchTarget>) -> Self {
        Self { targets }
    }

    pub fn single(t: PatchTarget) -> Self {
        Self { targets: vec![t] }
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
struct Resolved {
    residual: BTreeSet<(usize, usize)>,
    head: BTreeSet<(usize, usize, usize)>,
    attn: BTreeSet<(usize, usize)>,
    embedding: BTreeSet<usize>,
    neuron: BTreeMap<(usize, usize), Vec<usize>>,
}

fn resolve(spec: &PatchSpec, c: &ModelConfig, roles: &[Role], max_pos: usize) -> Result<Resolved> {
    let mut r = Resolved::default();
    let layer_ok = |l: usize| {
        if l >= c.n_layers {
            Err(Error::PatchSpec(format!("layer {l} out of range")))
        } else {
            Ok(())
        }
    };
    let pos_ok = |p: usize| {
        if p >= max_pos {
            Err(Error::PatchSpec(format!("position {p} out of range")))
        } else {
            Ok(())
        }
    };
    let overlap = |what: &str| Err(Error::PatchSpec(format!("overlapping {what} cell")));
    for t in &spec.targets {
        match t {
            PatchTarget::ResidualAt { layer, positions } => {
                layer_ok(*layer)?;
                for &p in positions {
                    pos_ok(p)?;
                    if !r.residual.insert((*layer, p)) {
                        return overlap("residual");
                    }
                }
            }
            PatchTarget::TokenGroup {
                role,
                layer_start,
                layer_end,
            } => {
                if layer_start > layer_end || *layer_end > c.n_layers {
                    return Err(Error::PatchSpec(format!(
                        "layer range {layer_start}..{layer_end} out of range"
                    )));
                }
                for l in *layer_start..*layer_end {
                    for (p, pr) in roles.iter().enumerate() {
                        if pr == role && !r.residual.insert((l, p)) {
                            return overlap("residual");
                        }
                    }
                }
            }
            PatchTarget::HeadOutput {
                layer,
                head,
                positions,
            } => {
                layer_ok(*layer)?;
                if *head >= c.n_heads {
                    return Err(Error::PatchSpec(format!("head {head} out of range")));
                }
                for &p in positions {
                    pos_ok(p)?;
                    if !r.head.insert((*layer, *head, p)) {
                        return overlap("head output");
                    }
                }
            }
            PatchTarget::NeuronActivation {
                layer,
                neuron,
                positions,
            } => {
                layer_ok(*layer)?;
                if *neuron >= c.d_mlp {
                    return Err(Error::PatchSpec(format!("neuron {neuron} out of range")));
                }
                for &p in positions {
                    pos_ok(p)?;
                    let e = r.neuron.entry((*layer, p)).or_default();
                    if e.contains(neuron) {
                        return overlap("neuron");
                    }
                    e.push(*neuron);
                }
            }
            PatchTarget::Embedding { positions } => {
                for &p in positions {
                    pos_ok(p)?;
                    if !r.embedding.insert(p) {
                        return overlap("embedding");
                    }
                }
            }
            PatchTarget::AttnOutput { layer, positions } => {
                layer_ok(*layer)?;
                for &p in positions {
                    pos_ok(p)?;
                    if !r.attn.insert((*layer, p)) {
                        return overlap("attention output");
                    }
                }
            }
        }
    }
    Ok(r)
}

fn missing(what: String) -> Error {
    Error::IncompleteDonor(what)
}

fn check_donor(r: &Resolved, d: &ActivationTrace) -> Result<()> {
    for &(l, p) in &r.residual {
        d.residual(l, p)
            .ok_or_else(|| missing(format!("residual at layer {l}, position {p}")))?;
    }
    for &(l, h, p) in &r.head {
        d.head_out(l, h, p)
            .ok_or_else(|| missing(format!("head {l}.{h} output at position {p}")))?;
    }
    for &(l, p) in &r.attn {
        d.attn_out(l, p)
            .ok_or_else(|| missing(format!("attention output at layer {l}, position {p}")))?;
    }
    for &p in &r.embedding {
        d.embedding(p)
            .ok_or_else(|| missing(format!("embedding at position {p}")))?;
    }
    for &(l, p) in r.neuron.keys() {
        d.neurons(l, p)
            .ok_or_else(|| missing(format!("neurons at layer {l}, position {p}")))?;
    }
    Ok(())
}

/// Hook that overwrites named cells with donor values as they are produced.
pub struct Patcher<'d> {
    donor: &'d ActivationTrace,
    r: Resolved,
}

impl<'d> Patcher<'d> {
    /// Resolves `spec` against the target's roles and checks the donor holds
    /// every named cell. `max_pos` bounds explicit positions (input length,
    /// or longer when decode positions are patched).
    pub fn new(
        c: &ModelConfig,
        donor: &'d ActivationTrace,
        spec: &PatchSpec,
        roles: &[Role],
        max_pos: usize,
    ) -> Result<Self> {
        let r = resolve(spec, c, roles, max_pos)?;
        check_donor(&r, donor)?;
        Ok(Self { donor, r })
    }
}

impl Hook for Patcher<'_> {
    fn embedding(&mut self, s: &Site, x: &mut [f64]) {
        if self.r.embedding.contains(&s.pos) {
            x.copy_from_slice(self.donor.embedding(s.pos).expect("checked"));
        }
    }
    fn head_out(&mut self, s: &Site, h: usize, z: &mut [f64]) {
        if self.r.head.contains(&(s.layer, h, s.pos)) {
            z.copy_from_slice(self.donor.head_out(s.layer, h, s.pos).expect("checked"));
        }
    }
    fn attn_out(&mut self, s: &Site, a: &mut [f64]) {
        if self.r.attn.contains(&(s.layer, s.pos)) {
            a.copy_from_slice(self.donor.attn_out(s.layer, s.pos).expect("checked"));
        }
    }
    fn neurons(&mut self, s: &Site, n: &mut [f64]) {
        if let Some(us) = self.r.neuron.get(&(s.layer, s.pos)) {
            let d = self.donor.neurons(s.layer, s.pos).expect("checked");
            for &u in us {
                n[u] = d[u];
            }
        }
    }
    fn residual(&mut self, s: &Site, x: &mut [f64]) {
        if self.r.residual.contains(&(s.layer, s.pos)) {
            x.copy_from_slice(self.donor.residual(s.layer, s.pos).expect("checked"));
        }
    }
}

/// Forward on `input` with `spec`'s cells taken from `donor`.
pub fn run_with_patches(
    bundle: &ModelBundle,
    input: &InputSequence,
    donor: &ActivationTrace,
    spec: &PatchSpec,
    filter: &CaptureFilter,
) -> Result<(Tensor2, ActivationTrace)> {
    input.validate(&bundle.config)?;
    if donor.input_len != input.len() {
        return Err(Error::PatchSpec(format!(
            "donor length {} differs from input length {}",
            donor.input_len,
            input.len()
        )));
    }
    let mut patcher = Patcher::new(&bundle.config, donor, spec, &input.roles(), input.len())?;
    let mut rec = Recorder::new(&bundle.config, input, filter.clone());
    let logits = {
        let mut chain = HookChain::new().with(&mut patcher).with(&mut rec);
        forward(bundle, input, &mut chain)?
    };
    Ok((logits, rec.finish()))
}

/// Normalised effect `(F_patch − F(X⁻)) / (F(X⁺) − F(X⁻))`, with F the
/// logit difference at the last input position.
pub fn causal_effect(
    bundle: &ModelBundle,
    x_plus: &InputSequence,
    x_minus: &InputSequence,
    component: &PatchSpec,
    y_plus: usize,
    y_minus: usize,
) -> Result<f64> {
    let last = x_minus.last_pos();
    let (lp, donor) = run_with_capture(bundle, x_plus, &CaptureFilter::all())?;
    let lm = forward(bundle, x_minus, &mut crate::model::NoHook)?;
    let f_plus = logit_difference(lp.row(last), y_plus, y_minus)?;
    let f_minus = logit_difference(lm.row(last), y_plus, y_minus)?;
    let denom = f_plus - f_minus;
    if denom.abs() < 1e-9 {
        return Err(Error::DegenerateContrast(format!(
            "F(X+) - F(X-) = {denom:e}"
        )));
    }
    let (patched, _) = run_with_patches(bundle, x_minus, &donor, component, &CaptureFilter::none())?;
    let f_patch = logit_difference(patched.row(last), y_plus, y_minus)?;
    Ok((f_patch - f_minus) / denom)
}
