// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-wired emotional pathway inside a small random background:
//!
//! trigger neuron (reads the visual feature, writes a routing direction `r`)
//! → copy head (text queries find `r`, copy the emotion identity, write
//! `e_k`) → thresholded amplifier (`e_k` → `e'_k`) → relay head (output
//! positions gather `e_k`, `e'_k` from the text) → keyword unembedding.
//!
//! All plant directions are orthonormal and zero-mean, so layer norm only
//! rescales them.

use serde::{Deserialize, Serialize};

use super::dataset::{gen_dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::eval::{Evaluator, Lexicon};
use crate::model::{greedy_decode_with, ModelBundle, ModelConfig, NoHook};
use crate::numerics::{kernels, SeededRng};
use crate::par;
use crate::trace::{run_with_capture, CaptureFilter, Family};

/// Token id of the prompt terminator (last input token).
pub const PROMPT_END: usize = 1;
/// First token of every continuation.
pub const OPENER: usize = 2;
/// Default output when no emotion is detected.
pub const NEUTRAL: usize = 3;
/// LN2 shift along the bias direction; large so stray residual components
/// along it are negligible.
const BIAS_SHIFT: f64 = 64.0;
/// Lowest id of the text ("neutral event") vocabulary.
pub const TEXT_VOCAB_START: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantDirections {
    /// Shared trigger feature.
    pub f: Vec<f64>,
    /// Per-emotion identity, added to `f` in the visual feature.
    pub g: Vec<Vec<f64>>,
    pub r: Vec<f64>,
    /// Marker carried by text tokens and the prompt terminator.
    pub text_marker: Vec<f64>,
    /// Marker carried by output tokens.
    pub out_marker: Vec<f64>,
    pub opener: Vec<f64>,
    /// Copy-head writer directions.
    pub e: Vec<Vec<f64>>,
    /// Amplified writer directions, read by the keyword unembedding.
    pub e_amp: Vec<Vec<f64>>,
    /// Carried only by the LN2 shift of the thresholded layers, so planted
    /// neurons get a constant offset that no other neuron reads.
    pub bias: Vec<f64>,
}

/// Magnitudes of every planted weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantGains {
    /// Multiplier on the random initialisation.
    pub background: f64,
    /// Per-coordinate std of neutral visual rows.
    pub visual_noise: f64,
    pub marker: f64,
    pub opener_marker: f64,
    pub trigger_gain: f64,
    /// In layer-normed units (`|x̂| = √d`).
    pub trigger_threshold: f64,
    pub trigger_write: f64,
    pub copy_qk: f64,
    pub copy_ov: f64,
    pub amp_gain: f64,
    pub amp_threshold: f64,
    pub amp_write: f64,
    pub relay_qk: f64,
    pub relay_ov: f64,
    pub keyword: f64,
    pub neutral: f64,
    pub opener: f64,
}

impl Default for PlantGains {
    fn default() -> Self {
        Self {
            background: 0.1,
            visual_noise: 0.125,
            marker: 1.0,
            opener_marker: 1.0,
            trigger_gain: 2.0,
            trigger_threshold: 3.5,
            trigger_write: 0.5,
            copy_qk: 0.8,
            copy_ov: 0.3,
            amp_gain: 1.0,
            amp_threshold: 5.0,
            amp_write: 0.5,
            relay_qk: 0.5,
            relay_ov: 0.5,
            keyword: 4.0,
            neutral: 2.0,
            opener: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub emotions: Vec<String>,
    /// Per emotion, the keyword tokens its writer promotes (first favoured).
    pub keyword_tokens: Vec<Vec<usize>>,
    pub visual_pos: usize,
    /// `(l_trig, u_trig)`.
    pub trigger: (usize, usize),
    /// `(l_copy, h_copy)`.
    pub copy_head: (usize, usize),
    pub amp_layer: usize,
    /// One amplifier neuron per emotion.
    pub amp_neurons: Vec<usize>,
    pub relay_head: (usize, usize),
    pub strength: f64,
    /// Relative half-width of the uniform strength jitter.
    pub strength_jitter: f64,
    /// Pairs with `index % 20 < weak_per_20` use `weak_strength`.
    pub weak_per_20: usize,
    pub weak_strength: f64,
    /// Scales trigger write and copy-head gains; doubled on each retry.
    pub wiring: f64,
    pub gains: PlantGains,
    pub dirs: PlantDirections,
}

/// Orthonormal, zero-mean directions via Gram-Schmidt on Gaussian draws.
pub fn orthonormal_directions(d: usize, n: usize, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    if n + 1 > d {
        return Err(Error::Config(format!("{n} plant directions need d_model > {n}")));
    }
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut basis: Vec<Vec<f64>> = vec![ones];
    while basis.len() < n + 1 {
        let mut v = rng.gaussian_vec(d, 1.0);
        for _ in 0..2 {
            for b in &basis {
                let c = kernels::dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let nv = kernels::norm(&v);
        if nv < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        basis.push(v);
    }
    basis.remove(0);
    Ok(basis)
}

impl PlantSpec {
    /// Default wiring for `config`, with directions drawn from `seed`.
    pub fn new(config: &ModelConfig, lexicon: &Lexicon, seed: u64) -> Result<Self> {
        let emotions = lexicon.emotions();
        let ne = emotions.len();
        let d = config.d_model;
        let mut rng = SeededRng::new(seed).fork(0x706c_616e_74);
        let mut v = orthonormal_directions(d, 6 + 3 * ne, &mut rng)?.into_iter();
        let mut take = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| v.next().expect("counted")).collect() };
        let f = take(1).remove(0);
        let g = take(ne);
        let r = take(1).remove(0);
        let text_marker = take(1).remove(0);
        let out_marker = take(1).remove(0);
        let opener = take(1).remove(0);
        let e = take(ne);
        let e_amp = take(ne);
        let bias = take(1).remove(0);
        let keyword_tokens = emotions.iter().map(|em| lexicon.group_tokens(em)).collect();
        let l_copy = config.adapt_end + 1;
        let spec = Self {
            emotions,
            keyword_tokens,
            visual_pos: config.n_visual / 2,
            trigger: (config.adapt_end.min(1), 7),
            copy_head: (l_copy, 1),
            amp_layer: l_copy + 1,
            amp_neurons: (0..ne).map(|k| 11 + 5 * k).collect(),
            relay_head: (config.aggregate_end + 1, 2),
            strength: 3.0,
            strength_jitter: 0.1,
            weak_per_20: 3,
            weak_strength: 1.15,
            wiring: 1.0,
            gains: PlantGains::default(),
            dirs: PlantDirections {
                f,
                g,
                r,
                text_marker,
                out_marker,
                opener,
                e,
                e_amp,
                bias,
            },
        };
        spec.validate(config)?;
        Ok(spec)
    }

    pub fn validate(&self, c: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trigger.0 >= self.copy_head.0 {
            return bad("trigger layer must precede the copy layer".into());
        }
        if !(self.copy_head.0 < self.amp_layer && self.amp_layer < self.relay_head.0 && self.relay_head.0 < c.n_layers) {
            return bad("need copy < amplifier < relay < n_layers".into());
        }
        if self.copy_head.1 >= c.n_heads || self.relay_head.1 >= c.n_heads {
            return bad("plant head index out of range".into());
        }
        if self.trigger.1 >= c.d_mlp || self.amp_neurons.iter().any(|&u| u >= c.d_mlp) {
            return bad("plant neuron index out of range".into());
        }
        if self.visual_pos >= c.n_visual {
            return bad("designated visual position outside the prefix".into());
        }
        let ne = self.emotions.len();
        if ne == 0 || self.keyword_tokens.len() != ne || self.amp_neurons.len() != ne {
            return bad("one keyword group and amplifier neuron per emotion".into());
        }
        if 2 * ne + 1 > c.d_head {
            return bad("relay head too narrow for the emotion count".into());
        }
        if self.keyword_tokens.iter().flatten().any(|&t| t >= TEXT_VOCAB_START || t <= NEUTRAL) {
            return bad("keyword tokens must lie between the specials and the text vocabulary".into());
        }
        if c.vocab_size <= TEXT_VOCAB_START + 8 {
            return bad("vocab too small for the text vocabulary".into());
        }
        let unit = |v: &[f64]| v.len() == c.d_model && (kernels::norm(v) - 1.0).abs() < 1e-9;
        let d = &self.dirs;
        let all = [&d.f, &d.r, &d.text_marker, &d.out_marker, &d.opener, &d.bias]
            .into_iter()
            .chain(d.g.iter())
            .chain(d.e.iter())
            .chain(d.e_amp.iter());
        for v in all {
            if !unit(v) {
                return bad("plant directions must be unit norm".into());
            }
        }
        if d.g.len() != ne || d.e.len() != ne || d.e_amp.len() != ne {
            return bad("one identity and writer direction per emotion".into());
        }
        Ok(())
    }

    /// Every planted direction, for projecting them out of neutral rows.
    pub fn all_directions(&self) -> Vec<&[f64]> {
        let d = &self.dirs;
        let mut v: Vec<&[f64]> = vec![&d.f, &d.r, &d.text_marker, &d.out_marker, &d.opener, &d.bias];
        v.extend(d.g.iter().map(Vec::as_slice));
        v.extend(d.e.iter().map(Vec::as_slice));
        v.extend(d.e_amp.iter().map(Vec::as_slice));
        v
    }

    /// Visual feature added at the designated position for emotion `k`.
    pub fn feature(&self, k: usize) -> Vec<f64> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        self.dirs.f.iter().zip(&self.dirs.g[k]).map(|(a, b)| s * (a + b)).collect()
    }

    /// Strength for pair index `i` with jitter draw `u ∈ [0, 1)`.
    pub fn pair_strength(&self, i: usize, u: f64) -> f64 {
        let base = if i % 20 < self.weak_per_20 { self.weak_strength } else { self.strength };
        base * (1.0 + self.strength_jitter * (2.0 * u - 1.0))
    }

    pub fn emotion_index(&self, emotion: &str) -> Option<usize> {
        self.emotions.iter().position(|e| e == emotion)
    }
}

fn add_scaled(dst: &mut [f64], v: &[f64], s: f64) {
    for (a, b) in dst.iter_mut().zip(v) {
        *a += s * b;
    }
}

/// Background model with the plant wired in, no gates.
pub fn wire_plant(config: &ModelConfig, plant: &PlantSpec, seed: u64) -> Result<ModelBundle> {
    plant.validate(config)?;
    let mut b = ModelBundle::init_random(config.clone(), seed)?;
    let g = &plant.gains;
    let d = &plant.dirs;
    let w = &mut b.weights;
    for t in w.tensors_mut() {
        t.iter_mut().for_each(|x| *x *= g.background);
    }
    for layer in &mut w.layers {
        layer.ln1_g.iter_mut().for_each(|x| *x = 1.0);
        layer.ln2_g.iter_mut().for_each(|x| *x = 1.0);
        layer.ln1_b.iter_mut().for_each(|x| *x = 0.0);
        layer.ln2_b.iter_mut().for_each(|x| *x = 0.0);
    }
    w.lnf_g.iter_mut().for_each(|x| *x = 1.0);
    w.lnf_b.iter_mut().for_each(|x| *x = 0.0);

    let outputs: Vec<usize> = [OPENER, NEUTRAL]
        .into_iter()
        .chain(plant.keyword_tokens.iter().flatten().copied())
        .collect();
    for tok in TEXT_VOCAB_START..config.vocab_size {
        add_scaled(w.tok_embed.row_mut(tok), &d.text_marker, g.marker);
    }
    for &tok in &outputs {
        add_scaled(w.tok_embed.row_mut(tok), &d.out_marker, g.marker);
    }
    let pe = w.tok_embed.row_mut(PROMPT_END);
    add_scaled(pe, &d.text_marker, g.marker);
    add_scaled(pe, &d.opener, g.opener_marker);

    let wiring = plant.wiring;
    let dm = config.d_model;
    let dh = config.d_head;

    for l in [plant.trigger.0, plant.amp_layer] {
        let lw = &mut w.layers[l];
        for u in 0..config.d_mlp {
            let c: f64 = (0..dm).map(|i| lw.w_up.get(i, u) * d.bias[i]).sum();
            for i in 0..dm {
                lw.w_up.set(i, u, lw.w_up.get(i, u) - c * d.bias[i]);
            }
        }
        lw.ln2_b.iter_mut().zip(&d.bias).for_each(|(a, b)| *a = BIAS_SHIFT * b);
    }

    // Trigger: pre = κ (x̂·f − θ).
    let (lt, ut) = plant.trigger;
    let lw = &mut w.layers[lt];
    for i in 0..dm {
        lw.w_up.set(i, ut, g.trigger_gain * (d.f[i] - g.trigger_threshold / BIAS_SHIFT * d.bias[i]));
        lw.w_down.set(ut, i, wiring * g.trigger_write * d.r[i]);
    }

    // Copy head: query reads the text marker, key reads r, value reads g_k.
    let (lc, hc) = plant.copy_head;
    let lw = &mut w.layers[lc];
    let c0 = hc * dh;
    for i in 0..dm {
        for j in c0..c0 + dh {
            lw.w_q.set(i, j, 0.0);
            lw.w_k.set(i, j, 0.0);
            lw.w_v.set(i, j, 0.0);
            lw.w_o.set(j, i, 0.0);
        }
        lw.w_q.set(i, c0, wiring * g.copy_qk * d.text_marker[i]);
        lw.w_k.set(i, c0, wiring * g.copy_qk * d.r[i]);
        for (k, gk) in d.g.iter().enumerate() {
            lw.w_v.set(i, c0 + 1 + k, gk[i]);
            lw.w_o.set(c0 + 1 + k, i, wiring * g.copy_ov * d.e[k][i]);
        }
    }

    // Amplifier: one thresholded neuron per emotion, e_k → e'_k.
    let lw = &mut w.layers[plant.amp_layer];
    for (k, &u) in plant.amp_neurons.iter().enumerate() {
        for i in 0..dm {
            lw.w_up.set(i, u, g.amp_gain * (d.e[k][i] - g.amp_threshold / BIAS_SHIFT * d.bias[i]));
            lw.w_down.set(u, i, g.amp_write * d.e_amp[k][i]);
        }
    }

    // Relay: output positions gather e and e' from text positions.
    let (lr, hr) = plant.relay_head;
    let lw = &mut w.layers[lr];
    let c0 = hr * dh;
    let ne = plant.emotions.len();
    for i in 0..dm {
        for j in c0..c0 + dh {
            lw.w_q.set(i, j, 0.0);
            lw.w_k.set(i, j, 0.0);
            lw.w_v.set(i, j, 0.0);
            lw.w_o.set(j, i, 0.0);
        }
        lw.w_q.set(i, c0, g.relay_qk * d.out_marker[i]);
        lw.w_k.set(i, c0, g.relay_qk * d.text_marker[i]);
        for k in 0..ne {
            lw.w_v.set(i, c0 + 1 + k, d.e[k][i]);
            lw.w_v.set(i, c0 + 1 + ne + k, d.e_amp[k][i]);
            lw.w_o.set(c0 + 1 + k, i, g.relay_ov * d.e[k][i]);
            lw.w_o.set(c0 + 1 + ne + k, i, g.relay_ov * d.e_amp[k][i]);
        }
    }

    // Unembedding: keywords read e'_k, the defaults read their markers.
    for i in 0..dm {
        for (k, toks) in plant.keyword_tokens.iter().enumerate() {
            for (j, &t) in toks.iter().enumerate() {
                w.unembed.set(i, t, g.keyword * (1.0 - 0.01 * j as f64) * d.e_amp[k][i]);
            }
        }
        w.unembed.set(i, NEUTRAL, g.neutral * d.out_marker[i]);
        w.unembed.set(i, OPENER, g.opener * d.opener[i]);
    }
    b.weights.check_shapes(config)?;
    Ok(b)
}

/// Construction-gate measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub attempts: usize,
    pub wiring: f64,
    pub n_pairs: usize,
    pub trigger_plus: f64,
    pub trigger_minus: f64,
    pub copy_attention: f64,
    pub positive_emission: f64,
    pub negative_emission: f64,
    pub passed: bool,
}

impl GateReport {
    fn check(&self) -> bool {
        self.trigger_plus >= 5.0 * self.trigger_minus.abs()
            && self.copy_attention >= 0.5
            && self.positive_emission >= 0.8
            && self.negative_emission <= 0.2
    }
}

pub const MAX_ATTEMPTS: usize = 8;
const GATE_SEED_TAG: u64 = 0x6761_7465;

/// Measures the three gates on a probe set drawn from the plant.
pub fn measure_gates(
    bundle: &ModelBundle,
    plant: &PlantSpec,
    lexicon: &Lexicon,
    seed: u64,
    pairs_per_emotion: usize,
    max_new: usize,
) -> Result<GateReport> {
    let data = gen_dataset(
        &DatasetSpec {
            seed: seed ^ GATE_SEED_TAG,
            pairs_per_emotion,
            extraction_per_emotion: pairs_per_emotion,
        },
        plant,
        &bundle.config,
    )?;
    let pairs = data.pairs(None);
    let ev = Evaluator::new(lexicon.clone(), Vec::new(), max_new);
    let (lt, ut) = plant.trigger;
    let (lc, hc) = plant.copy_head;
    let p = plant.visual_pos;
    let rows = par::try_map(&pairs, |pair| -> Result<[f64; 5]> {
        let f = CaptureFilter::only(&[Family::Neurons, Family::Scores]).layers(lt.min(lc)..lc.max(lt) + 1);
        let (_, tp) = run_with_capture(bundle, &pair.x_plus, &f)?;
        let (_, tm) = run_with_capture(bundle, &pair.x_minus, &f)?;
        let a_plus = tp.neurons(lt, p).ok_or_else(|| Error::Internal("trigger not recorded".into()))?[ut];
        let a_minus = tm.neurons(lt, p).ok_or_else(|| Error::Internal("trigger not recorded".into()))?[ut];
        let nv = pair.x_plus.visual.rows();
        let nq = pair.x_plus.text.len() - 1;
        let mut att = 0.0;
        for q in nv..nv + nq {
            att += tp.probs(lc, hc, q).ok_or_else(|| Error::Internal("scores not recorded".into()))?[p];
        }
        let ep = ev.emits_keyword(&greedy_decode_with(bundle, &pair.x_plus, max_new, &mut NoHook)?.tokens);
        let em = ev.emits_keyword(&greedy_decode_with(bundle, &pair.x_minus, max_new, &mut NoHook)?.tokens);
        Ok([a_plus, a_minus, att / nq.max(1) as f64, ep as u8 as f64, em as u8 as f64])
    })?;
    let n = rows.len() as f64;
    let mean = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>() / n;
    let mut r = GateReport {
        attempts: 1,
        wiring: plant.wiring,
        n_pairs: rows.len(),
        trigger_plus: mean(0),
        trigger_minus: mean(1),
        copy_attention: mean(2),
        positive_emission: mean(3),
        negative_emission: mean(4),
        passed: false,
    };
    r.passed = r.check();
    Ok(r)
}

/// Wires the plant and checks the gates, doubling the wiring strength on
/// failure up to [`MAX_ATTEMPTS`] times.
pub fn build_planted_model(
    config: &ModelConfig,
    plant: &PlantSpec,
    lexicon: &Lexicon,
    seed: u64,
    gate_pairs_per_emotion: usize,
    max_new: usize,
) -> Result<(ModelBundle, PlantSpec, GateReport)> {
    let mut p = plant.clone();
    let mut last = None;
    for attempt in 1..=MAX_ATTEMPTS {
        let b = wire_plant(config, &p, seed)?;
        let mut g = measure_gates(&b, &p, lexicon, seed, gate_pairs_per_emotion, max_new)?;
        g.attempts = attempt;
        if g.passed {
            return Ok((b, p, g));
        }
        last = Some(g);
        p.wiring *= 2.0;
    }
    Err(Error::PlantGate(format!("{:?}", last.expect("at least one attempt"))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::default_lexicon;

    #[test]
    fn directions_are_orthonormal_and_zero_mean() {
        let c = ModelConfig::default();
        let p = PlantSpec::new(&c, &default_lexicon(), 2).unwrap();
        let dirs = p.all_directions();
        for (i, a) in dirs.iter().enumerate() {
            assert!(a.iter().sum::<f64>().abs() < 1e-10);
            for (j, b) in dirs.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((kernels::dot(a, b) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn invalid_indices_are_rejected() {
        let c = ModelConfig::default();
        let p = PlantSpec::new(&c, &default_lexicon(), 2).unwrap();
        let mut late = p.clone();
        late.trigger.0 = late.copy_head.0;
        assert!(late.validate(&c).is_err());
        let mut wide = p.clone();
        wide.copy_head.1 = c.n_heads;
        assert!(wide.validate(&c).is_err());
        let mut neuron = p;
        neuron.trigger.1 = c.d_mlp;
        assert!(neuron.validate(&c).is_err());
    }

    #[test]
    fn default_plant_passes_its_gates() {
        let c = ModelConfig::default();
        let lex = default_lexicon();
        let p = PlantSpec::new(&c, &lex, 0).unwrap();
        let (_, _, g) = build_planted_model(&c, &p, &lex, 0, 10, 8).unwrap();
        assert!(g.passed, "{g:?}");
        assert!(g.trigger_plus >= 5.0 * g.trigger_minus.abs());
        assert!(g.copy_attention >= 0.5);
        assert!(g.positive_emission >= 0.8 && g.negative_emission <= 0.2);
    }

    #[test]
    fn wiring_is_deterministic() {
        let c = ModelConfig::default();
        let p = PlantSpec::new(&c, &default_lexicon(), 5).unwrap();
        assert_eq!(wire_plant(&c, &p, 5).unwrap(), wire_plant(&c, &p, 5).unwrap());
    }

    #[test]
    fn pair_strength_stratifies() {
        let c = ModelConfig::default();
        let p = PlantSpec::new(&c, &default_lexicon(), 1).unwrap();
        assert_eq!(p.pair_strength(0, 0.5), p.weak_strength);
        assert_eq!(p.pair_strength(p.weak_per_20, 0.5), p.strength);
        assert!(p.pair_strength(5, 0.0) < p.strength && p.pair_strength(5, 0.999) > p.strength);
    }
}
