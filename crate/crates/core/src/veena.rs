// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inference-time intervention: flow-aware attention scaling (VEE) on
//! selected heads and sparse neuron amplification (ENA).
//!
//! VEE multiplies pre-softmax scores literally, so a negative score times
//! `beta > 1` gets more negative. `additive_vee` switches to `+ ln(beta)` on
//! the same cells; it is an ablation, not the default.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::error::{Error, Result};
use crate::model::{greedy_decode_with, Decoded, Hook, InputSequence, ModelBundle, ModelConfig, Phase, Role, Site};
use crate::numerics::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub vee: bool,
    pub ena: bool,
    #[serde(default)]
    pub additive_vee: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub c_head: Vec<(usize, usize)>,
    pub c_neuron: Vec<(usize, usize)>,
    pub beta: f64,
    pub gamma: f64,
    /// Critical middle layer; `-1` sits below every layer.
    pub l_emo: i64,
    pub flags: Flags,
}

impl InterventionSpec {
    pub fn new(c_head: Vec<(usize, usize)>, c_neuron: Vec<(usize, usize)>, beta: f64, gamma: f64, l_emo: i64) -> Self {
        Self {
            c_head,
            c_neuron,
            beta,
            gamma,
            l_emo,
            flags: Flags {
                vee: true,
                ena: true,
                additive_vee: false,
            },
        }
    }

    pub fn validate(&self, c: &ModelConfig) -> Result<()> {
        for &(l, h) in &self.c_head {
            if l >= c.n_layers || h >= c.n_heads {
                return Err(Error::Input(format!("critical head {l}.{h} out of range")));
            }
        }
        for &(l, u) in &self.c_neuron {
            if l >= c.n_layers || u >= c.d_mlp {
                return Err(Error::Input(format!("critical neuron {l}.{u} out of range")));
            }
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) || !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::Input("beta and gamma must be finite and at least 1".into()));
        }
        if self.l_emo < -1 || self.l_emo >= c.n_layers as i64 {
            return Err(Error::Input(format!("l_emo {} out of range", self.l_emo)));
        }
        Ok(())
    }

    pub fn has_head(&self, layer: usize, head: usize) -> bool {
        self.c_head.contains(&(layer, head))
    }

    pub fn to_json(&self) -> Result<String> {
        canon::report_string(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        canon::write_report(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("intervention spec: {e}")))
    }
}

/// Whether the VEE predicate holds for one score cell.
pub fn vee_fires(spec: &InterventionSpec, phase: Phase, layer: usize, roles: &[Role], q: usize, k: usize) -> bool {
    if roles[k] != Role::Visual {
        return false;
    }
    let l = layer as i64;
    match phase {
        Phase::Prefill => l <= spec.l_emo && roles[q] == Role::Query,
        Phase::Decode(_) => l > spec.l_emo && q + 1 == roles.len(),
    }
}

/// Multiplier matrix for one head: `beta` where the predicate holds, else 1.
/// Heads outside `C_head` get all ones. Rows are queries, columns keys;
/// entries above the diagonal are never read.
pub fn vee_mask(spec: &InterventionSpec, phase: Phase, layer: usize, head: usize, roles: &[Role]) -> Tensor2 {
    let n = roles.len();
    let mut m = Tensor2::from_vec(n, n, vec![1.0; n * n]).expect("square");
    if !spec.has_head(layer, head) {
        return m;
    }
    for q in 0..n {
        for k in 0..=q {
            if vee_fires(spec, phase, layer, roles, q, k) {
                m.set(q, k, spec.beta);
            }
        }
    }
    m
}

/// Elementwise `W ⊙ M` on the causal part of a score matrix. Entries above
/// the diagonal stay as they are (masked).
pub fn apply_vee(scores: &Tensor2, mask: &Tensor2) -> Result<Tensor2> {
    if scores.rows() != mask.rows() || scores.cols() != mask.cols() {
        return Err(Error::Shape("score and mask shapes differ".into()));
    }
    let mut out = scores.clone();
    for q in 0..scores.rows() {
        for k in 0..=q.min(scores.cols().saturating_sub(1)) {
            out.set(q, k, scores.get(q, k) * mask.get(q, k));
        }
    }
    Ok(out)
}

/// Scales activations of neurons in `C_neuron` at `layer` by `gamma`.
pub fn apply_ena(acts: &[f64], spec: &InterventionSpec, layer: usize) -> Vec<f64> {
    let mut out = acts.to_vec();
    for &(l, u) in &spec.c_neuron {
        if l == layer && u < out.len() {
            out[u] *= spec.gamma;
        }
    }
    out
}

/// One applied multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub step: usize,
    pub layer: usize,
    pub kind: String,
    /// Head for `vee`, neuron for `ena`.
    pub index: usize,
    pub query_pos: usize,
    /// Key position for `vee`; equal to `query_pos` for `ena`.
    pub key_pos: usize,
    pub multiplier: f64,
}

/// Decode-time hook implementing both masks.
pub struct VeenaHook<'s> {
    spec: &'s InterventionSpec,
    neurons_by_layer: Vec<Vec<usize>>,
    heads: BTreeSet<(usize, usize)>,
    log: Option<Vec<ProvenanceRecord>>,
}

impl<'s> VeenaHook<'s> {
    pub fn new(spec: &'s InterventionSpec, record: bool) -> Self {
        let n_layers = spec.c_neuron.iter().map(|p| p.0 + 1).max().unwrap_or(0);
        let mut neurons_by_layer = vec![Vec::new(); n_layers];
        for &(l, u) in &spec.c_neuron {
            if !neurons_by_layer[l].contains(&u) {
                neurons_by_layer[l].push(u);
            }
        }
        for v in &mut neurons_by_layer {
            v.sort_unstable();
        }
        Self {
            spec,
            neurons_by_layer,
            heads: spec.c_head.iter().copied().collect(),
            log: record.then(Vec::new),
        }
    }

    pub fn provenance(self) -> Vec<ProvenanceRecord> {
        self.log.unwrap_or_default()
    }
}

impl Hook for VeenaHook<'_> {
    fn scores(&mut self, s: &Site, head: usize, row: &mut [f64]) {
        if !self.spec.flags.vee || !self.heads.contains(&(s.layer, head)) {
            return;
        }
        let beta = self.spec.beta;
        let shift = beta.ln();
        for (k, v) in row.iter_mut().enumerate() {
            if vee_fires(self.spec, s.phase, s.layer, s.roles, s.pos, k) {
                if self.spec.flags.additive_vee {
                    *v += shift;
                } else {
                    *v *= beta;
                }
                if let Some(log) = &mut self.log {
                    log.push(ProvenanceRecord {
                        step: s.phase.step(),
                        layer: s.layer,
                        kind: "vee".into(),
                        index: head,
                        query_pos: s.pos,
                        key_pos: k,
                        multiplier: beta,
                    });
                }
            }
        }
    }

    fn neurons(&mut self, s: &Site, n: &mut [f64]) {
        if !self.spec.flags.ena {
            return;
        }
        let Some(us) = self.neurons_by_layer.get(s.layer) else {
            return;
        };
        for &u in us {
            n[u] *= self.spec.gamma;
            if let Some(log) = &mut self.log {
                log.push(ProvenanceRecord {
                    step: s.phase.step(),
                    layer: s.layer,
                    kind: "ena".into(),
                    index: u,
                    query_pos: s.pos,
                    key_pos: s.pos,
                    multiplier: self.spec.gamma,
                });
            }
        }
    }
}

/// Greedy decode under the intervention, with a full provenance log.
pub fn run_veena(
    bundle: &ModelBundle,
    input: &InputSequence,
    spec: &InterventionSpec,
    max_new: usize,
) -> Result<(Decoded, Vec<ProvenanceRecord>)> {
    spec.validate(&bundle.config)?;
    let mut h = VeenaHook::new(spec, true);
    let d = greedy_decode_with(bundle, input, max_new, &mut h)?;
    Ok((d, h.provenance()))
}

/// Union of per-emotion top-k heads and neurons, each sorted ascending.
pub fn aggregate_critical_sets(
    heads_per_emotion: &[Vec<(usize, usize)>],
    neurons_per_emotion: &[Vec<(usize, usize)>],
    k_head: usize,
    k_neuron: usize,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let h: BTreeSet<(usize, usize)> = heads_per_emotion
        .iter()
        .flat_map(|r| r.iter().take(k_head).copied())
        .collect();
    let n: BTreeSet<(usize, usize)> = neurons_per_emotion
        .iter()
        .flat_map(|r| r.iter().take(k_neuron).copied())
        .collect();
    (h.into_iter().collect(), n.into_iter().collect())
}

/// Writes provenance as JSON lines, one canonical object per record.
pub fn write_provenance(path: &Path, records: &[ProvenanceRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", canon::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::greedy_decode;
    use crate::numerics::SeededRng;

    fn toy() -> (ModelBundle, InputSequence) {
        let c = ModelConfig::small(4, 2, 8, 16, 30, 3);
        let b = ModelBundle::init_random(c, 31).unwrap();
        let mut r = SeededRng::new(32);
        (b, InputSequence::new(r.gaussian_matrix(3, 8, 1.0), vec![1, 2, 3, 4]))
    }

    fn roles() -> Vec<Role> {
        vec![Role::Visual, Role::Visual, Role::Query, Role::Query, Role::Last]
    }

    #[test]
    fn unit_coefficients_are_inert() {
        let (b, x) = toy();
        let base = greedy_decode(&b, &x, 6, None).unwrap();
        let all_heads: Vec<_> = (0..4).flat_map(|l| (0..2).map(move |h| (l, h))).collect();
        let all_neurons: Vec<_> = (0..4).flat_map(|l| (0..16).map(move |u| (l, u))).collect();
        let mut spec = InterventionSpec::new(all_heads, all_neurons, 1.0, 1.0, 1);
        assert_eq!(greedy_decode(&b, &x, 6, Some(&spec)).unwrap(), base);
        spec.beta = 3.0;
        spec.gamma = 2.0;
        spec.flags.vee = false;
        spec.flags.ena = false;
        assert_eq!(greedy_decode(&b, &x, 6, Some(&spec)).unwrap(), base);
    }

    #[test]
    fn mask_cases() {
        let r = roles();
        let spec = InterventionSpec::new(vec![(1, 0)], vec![], 2.0, 1.5, 1);
        let m = vee_mask(&spec, Phase::Prefill, 1, 0, &r);
        for q in 0..5 {
            for k in 0..=q {
                let want = if r[q] == Role::Query && r[k] == Role::Visual { 2.0 } else { 1.0 };
                assert_eq!(m.get(q, k), want);
            }
        }
        // Prefill above l_emo and heads outside the set: all ones.
        let ones = Tensor2::from_vec(5, 5, vec![1.0; 25]).unwrap();
        assert_eq!(vee_mask(&spec, Phase::Prefill, 2, 0, &r), ones);
        assert_eq!(vee_mask(&spec, Phase::Prefill, 1, 1, &r), ones);
        let unit = InterventionSpec::new(vec![(1, 0)], vec![], 1.0, 1.0, 1);
        assert_eq!(vee_mask(&unit, Phase::Prefill, 1, 0, &r), ones);
        // Decode: only the newest row, only above l_emo.
        let mut g = r.clone();
        g.push(Role::Generated);
        let spec2 = InterventionSpec::new(vec![(2, 0)], vec![], 2.0, 1.5, 1);
        let d = vee_mask(&spec2, Phase::Decode(1), 2, 0, &g);
        assert_eq!(d.get(5, 0), 2.0);
        assert_eq!(d.get(5, 2), 1.0);
        assert_eq!(d.get(3, 0), 1.0);
    }

    #[test]
    fn apply_vee_closed_form() {
        let s = Tensor2::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let m = Tensor2::from_rows(&[vec![2.0, 1.0]]).unwrap();
        let scaled = apply_vee(&s, &m).unwrap();
        let p = scaled.softmax_rows();
        let e = std::f64::consts::E;
        assert!((p.get(0, 0) - e * e / (e * e + e)).abs() < 1e-12);
        assert!((p.get(0, 0) - 0.7311).abs() < 1e-4);
        let neg = apply_vee(&Tensor2::from_rows(&[vec![-1.0]]).unwrap(), &Tensor2::from_rows(&[vec![2.0]]).unwrap()).unwrap();
        assert_eq!(neg.get(0, 0), -2.0);
    }

    #[test]
    fn ena_cases() {
        let a = [1.0, 2.0, 3.0];
        let spec = InterventionSpec::new(vec![], vec![(0, 1)], 2.0, 1.5, 0);
        assert_eq!(apply_ena(&a, &spec, 0), vec![1.0, 3.0, 3.0]);
        assert_eq!(apply_ena(&a, &spec, 1), a.to_vec());
        let unit = InterventionSpec::new(vec![], vec![(0, 1)], 2.0, 1.0, 0);
        assert_eq!(apply_ena(&a, &unit, 0), a.to_vec());
        let empty = InterventionSpec::new(vec![], vec![], 2.0, 9.0, 0);
        assert_eq!(apply_ena(&a, &empty, 0), a.to_vec());
    }

    #[test]
    fn phase_gating_via_provenance() {
        let (b, x) = toy();
        let heads: Vec<_> = (0..4).flat_map(|l| (0..2).map(move |h| (l, h))).collect();
        let top = InterventionSpec::new(heads.clone(), vec![], 2.0, 1.0, 3);
        let (_, log) = run_veena(&b, &x, &top, 4).unwrap();
        assert!(log.iter().all(|r| r.step == 0));
        assert!(!log.is_empty());
        let bottom = InterventionSpec::new(heads, vec![], 2.0, 1.0, -1);
        let (_, log) = run_veena(&b, &x, &bottom, 4).unwrap();
        assert!(log.iter().all(|r| r.step > 0));
        assert!(!log.is_empty());
    }

    #[test]
    fn monotone_in_beta_for_positive_cell() {
        let row = [0.8, 0.3, -0.2];
        let mut prev = 0.0;
        for i in 0..6 {
            let beta = 1.0 + i as f64 * 0.5;
            let mut r = row;
            r[0] *= beta;
            crate::numerics::kernels::softmax_in_place(&mut r);
            assert!(r[0] > prev);
            prev = r[0];
        }
    }

    #[test]
    fn critical_set_union() {
        let a = vec![(1, 0), (2, 1), (3, 0)];
        let b = vec![(5, 0), (6, 1), (7, 0)];
        let (h, _) = aggregate_critical_sets(&[a.clone()], &[], 2, 0);
        assert_eq!(h, vec![(1, 0), (2, 1)]);
        let (h, _) = aggregate_critical_sets(&[a, b], &[], 3, 0);
        assert_eq!(h.len(), 6);
    }

    #[test]
    fn spec_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spec.json");
        let s = InterventionSpec::new(vec![(4, 1)], vec![(1, 7)], 2.0, 1.5, 7);
        s.save(&p).unwrap();
        assert_eq!(InterventionSpec::load(&p).unwrap(), s);
    }
}
