// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::model::{ModelConfig, NoHook};
use crate::numerics::SeededRng;

fn toy(seed: u64) -> (ModelBundle, ContrastivePair, Vec<f64>) {
    let c = ModelConfig::small(4, 2, 8, 16, 30, 3);
    let b = ModelBundle::init_random(c, seed).unwrap();
    let mut r = SeededRng::new(seed ^ 0x5eed);
    let text = vec![4, 9, 2, 17];
    let pair = ContrastivePair {
        id: seed,
        emotion: "joy".into(),
        x_plus: InputSequence::new(r.gaussian_matrix(3, 8, 1.0), text.clone()),
        x_minus: InputSequence::new(r.gaussian_matrix(3, 8, 1.0), text),
    };
    let s = r.gaussian_vec(8, 1.0);
    (b, pair, s)
}

struct KeyNudge {
    layer: usize,
    head: usize,
    pos: usize,
    dir: Vec<f64>,
}

impl Hook for KeyNudge {
    fn key(&mut self, s: &Site, h: usize, k: &mut [f64]) {
        if s.layer == self.layer && h == self.head && s.pos == self.pos {
            for (a, d) in k.iter_mut().zip(&self.dir) {
                *a += d;
            }
        }
    }
}

struct NeuronNudge {
    layer: usize,
    pos: usize,
    unit: usize,
    eps: f64,
}

impl Hook for NeuronNudge {
    fn neurons(&mut self, s: &Site, n: &mut [f64]) {
        if s.layer == self.layer && s.pos == self.pos {
            n[self.unit] += self.eps;
        }
    }
}

#[test]
fn tape_metric_bit_equals_forward() {
    for seed in 0..4 {
        let (b, p, s) = toy(seed);
        let ctx = RestorationContext::new(&b, &p.x_plus, &p.x_minus, 3, &s).unwrap();
        let tf = taped_forward(&b, ctx.minus.block_inputs(0).unwrap(), 0, 3, ctx.last, &s).unwrap();
        assert_eq!(tf.value(), ctx.i_minus);
        let tf1 = taped_forward(&b, ctx.minus.block_inputs(2).unwrap(), 2, 3, ctx.last, &s).unwrap();
        assert_eq!(tf1.value(), ctx.i_minus);
    }
}

#[test]
fn key_gradient_matches_central_difference() {
    let (b, p, s) = toy(7);
    let ctx = RestorationContext::new(&b, &p.x_plus, &p.x_minus, 3, &s).unwrap();
    let (lp, h, t) = (1, 1, 2);
    let g = grad_r_wrt_key(&b, &ctx, (lp, h), t).unwrap();
    let eps = 1e-5;
    for i in 0..b.config.d_head {
        let mut dir = vec![0.0; b.config.d_head];
        dir[i] = eps;
        let mut up = KeyNudge { layer: lp, head: h, pos: t, dir: dir.clone() };
        let mut dn = KeyNudge { layer: lp, head: h, pos: t, dir: dir.iter().map(|x| -x).collect() };
        let fp = intention_under(&b, &p.x_minus, 3, &s, &mut up).unwrap();
        let fm = intention_under(&b, &p.x_minus, 3, &s, &mut dn).unwrap();
        let fd = (fp - fm) / (2.0 * eps) / ctx.denom();
        assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "{i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn neuron_gradient_matches_central_difference() {
    let (b, p, s) = toy(11);
    let ctx = RestorationContext::new(&b, &p.x_plus, &p.x_minus, 3, &s).unwrap();
    let tf = taped_forward(&b, ctx.minus.block_inputs(0).unwrap(), 0, 3, ctx.last, &s).unwrap();
    let g = tf.backward().unwrap();
    let eps = 1e-5;
    for (layer, pos, unit) in [(0, 1, 3), (1, 5, 0), (2, 6, 15)] {
        let an = g.get(tf.neurons[&(layer, pos)])[unit];
        let mut up = NeuronNudge { layer, pos, unit, eps };
        let mut dn = NeuronNudge { layer, pos, unit, eps: -eps };
        let fp = intention_under(&b, &p.x_minus, 3, &s, &mut up).unwrap();
        let fm = intention_under(&b, &p.x_minus, 3, &s, &mut dn).unwrap();
        let fd = (fp - fm) / (2.0 * eps);
        assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{layer}.{unit}@{pos}: {fd} vs {an}");
    }
}

#[test]
fn restoration_identities() {
    let (b, p, s) = toy(3);
    let ctx = RestorationContext::new(&b, &p.x_plus, &p.x_minus, 3, &s).unwrap();
    let all: Vec<usize> = (0..=ctx.last).collect();
    let full = PatchSpec::single(PatchTarget::AttnOutput { layer: 3, positions: all.clone() });
    assert!((ctx.restore_spec(&b, &p.x_minus, &full).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(ctx.restore_spec(&b, &p.x_minus, &PatchSpec::default()).unwrap(), 0.0);
    for head in [(0, 0), (1, 1), (2, 0), (3, 1)] {
        let fast = ctx.restore_head(&b, head).unwrap();
        let spec = PatchSpec::single(PatchTarget::HeadOutput { layer: head.0, head: head.1, positions: all.clone() });
        let slow = ctx.restore_spec(&b, &p.x_minus, &spec).unwrap();
        assert!((fast - slow).abs() < 1e-12, "{head:?}: {fast} vs {slow}");
    }
    let same = RestorationContext::new(&b, &p.x_minus, &p.x_minus, 3, &s);
    assert!(matches!(same, Err(Error::DegenerateContrast(_))));
}

#[test]
fn restoration_is_invariant_to_steering_scale() {
    let (b, p, s) = toy(5);
    let s3: Vec<f64> = s.iter().map(|x| x * 3.0).collect();
    let a = latent_restoration(&b, &p.x_plus, &p.x_minus, (1, 0), 3, &s).unwrap();
    let c = latent_restoration(&b, &p.x_plus, &p.x_minus, (1, 0), 3, &s3).unwrap();
    assert!((a - c).abs() < 1e-12);
}

#[test]
fn rank_heads_covers_upstream_heads_in_order() {
    let (b, p, s) = toy(9);
    let mut pairs = vec![p.clone()];
    pairs.push(ContrastivePair { id: 99, x_plus: p.x_minus.clone(), ..p.clone() });
    let r = rank_heads(&b, &pairs, 3, &s, MetricTarget::CriticalLayer).unwrap();
    assert_eq!(r.len(), 3 * b.config.n_heads);
    assert!(r.iter().all(|h| h.n_used == 1 && h.n_skipped == 1 && h.layer < 3));
    for w in r.windows(2) {
        assert!(w[0].score.unwrap() >= w[1].score.unwrap());
    }
    let fin = rank_heads(&b, &pairs[..1], 3, &s, MetricTarget::FinalLayer).unwrap();
    assert_eq!(fin[0].target_layer, 3);
}

#[test]
fn exact_attribution_is_delta_times_gradient() {
    let (b, p, s) = toy(13);
    let traces = trace_neurons(&b, std::slice::from_ref(&p), 3, &s, &[(2, 0)], 5, AttributionMode::Exact).unwrap();
    let t = &traces[0];
    assert_eq!(t.neurons.len(), 5);
    for w in t.neurons.windows(2) {
        assert!(w[0].g_abs >= w[1].g_abs);
    }
    let top = &t.neurons[0];
    let ctx = RestorationContext::new(&b, &p.x_plus, &p.x_minus, 3, &s).unwrap();
    let f = CaptureFilter::only(&[Family::Neurons]);
    let (_, tp) = run_with_capture(&b, &p.x_plus, &f).unwrap();
    let (_, tm) = run_with_capture(&b, &p.x_minus, &f).unwrap();
    let ts = top.source_token;
    let delta = tp.neurons(top.layer, ts).unwrap()[top.neuron] - tm.neurons(top.layer, ts).unwrap()[top.neuron];
    let eps = 1e-5;
    let mut up = NeuronNudge { layer: top.layer, pos: ts, unit: top.neuron, eps };
    let mut dn = NeuronNudge { layer: top.layer, pos: ts, unit: top.neuron, eps: -eps };
    let fd = (intention_under(&b, &p.x_minus, 3, &s, &mut up).unwrap()
        - intention_under(&b, &p.x_minus, 3, &s, &mut dn).unwrap())
        / (2.0 * eps)
        / ctx.denom();
    assert!((delta * fd - top.g).abs() < 1e-6 * (1.0 + top.g.abs()));
}

#[test]
fn source_token_breaks_ties_low() {
    let (b, p, _) = toy(2);
    let (_, t) = run_with_capture(&b, &p.x_minus, &CaptureFilter::only(&[Family::Scores])).unwrap();
    let pos = source_token(&t, (0, 0), 0).unwrap();
    assert_eq!(pos, 0);
    let last = p.x_minus.last_pos();
    let probs = t.probs(1, 1, last).unwrap();
    assert_eq!(source_token(&t, (1, 1), last).unwrap(), kernels::argmax(&probs));
    let (_, empty) = run_with_capture(&b, &p.x_minus, &CaptureFilter::none()).unwrap();
    assert!(source_token(&empty, (0, 0), 0).is_err());
}

#[test]
fn saliency_flows_use_role_groups() {
    let (b, p, s) = toy(4);
    let m = saliency(&b, &p, 3, &s).unwrap();
    assert_eq!(m.layers.len(), 4);
    let roles = p.x_minus.roles();
    for l in &m.layers {
        let mut vl = 0.0;
        for h in &l.heads {
            vl += flow_sums(h, &roles).2;
        }
        assert!((vl - l.v_to_l).abs() < 1e-15);
    }
    for row in &m.normalized {
        assert!(row.iter().all(|x| x.abs() <= 1.0 + 1e-12));
    }
}

#[test]
fn lens_is_sorted_distribution() {
    let (b, _, s) = toy(1);
    let row = logit_lens(&b, &s, 5).unwrap();
    assert_eq!(row.top.len(), 5);
    for w in row.top.windows(2) {
        assert!(w[0].1 >= w[1].1);
    }
    assert!(row.entropy >= 0.0 && row.entropy <= (b.config.vocab_size as f64).ln() + 1e-12);
    let rep = logit_lens_layers(&b, &[s.clone(), s], 3, Some(&[0, 1, 2])).unwrap();
    assert_eq!(rep.rows[0].top, rep.rows[1].top);
    assert!(rep.rows[0].emotion_mass.unwrap() <= 1.0);
    assert!(logit_lens(&b, &[1.0], 1).is_err());
}

#[test]
fn phase_spec_adds_embedding_at_layer_zero() {
    let (_, p, _) = toy(1);
    let s0 = phase_patch_spec(&p.x_minus, Role::Visual, &(0..2));
    assert_eq!(s0.targets.len(), 2);
    assert_eq!(s0.targets[1], PatchTarget::Embedding { positions: vec![0, 1, 2] });
    assert_eq!(phase_patch_spec(&p.x_minus, Role::Query, &(2..3)).targets.len(), 1);
    assert!(phase_patch_spec(&p.x_minus, Role::Query, &(2..2)).is_empty());
}

#[test]
fn full_residual_patch_reproduces_donor_decode() {
    let (b, p, _) = toy(6);
    let donor = patch_donor(&b, &p.x_plus).unwrap();
    let n = b.config.n_layers;
    let spec = PatchSpec::new(
        [Role::Visual, Role::Query, Role::Last]
            .iter()
            .flat_map(|&r| phase_patch_spec(&p.x_minus, r, &(0..n)).targets)
            .collect(),
    );
    let patched = patched_decode(&b, &p.x_minus, &donor, &spec, 4).unwrap();
    let plus = greedy_decode_with(&b, &p.x_plus, 4, &mut NoHook).unwrap().tokens;
    assert_eq!(patched, plus);
}

#[test]
fn knockout_modes() {
    let (b, p, _) = toy(8);
    let plain = greedy_decode_with(&b, &p.x_plus, 5, &mut NoHook).unwrap().tokens;
    assert_eq!(knockout(&b, &p.x_plus, &[], KnockoutMode::Zero, 5).unwrap(), plain);
    let donor = recovery_donor(&b, &p.x_plus, 5).unwrap();
    let heads: Vec<(usize, usize)> = (0..4).flat_map(|l| (0..2).map(move |h| (l, h))).collect();
    assert_eq!(knockout(&b, &p.x_plus, &heads, KnockoutMode::Recover(&donor), 5).unwrap(), plain);
    assert!(knockout(&b, &p.x_plus, &[(9, 0)], KnockoutMode::Zero, 5).is_err());
}

#[test]
fn intersection_counts() {
    let r = vec![
        ("a".to_string(), vec![(0, 0), (0, 1), (1, 0)]),
        ("b".to_string(), vec![(0, 0), (1, 1), (2, 0)]),
        ("c".to_string(), vec![(0, 0), (0, 1), (3, 3)]),
    ];
    let x = head_intersection(&r, 2).unwrap();
    assert_eq!(x.union, 3);
    let find = |v: &[(Vec<String>, usize)], names: &[&str]| {
        v.iter().find(|(n, _)| n.iter().map(String::as_str).eq(names.iter().copied())).unwrap().1
    };
    assert_eq!(find(&x.inclusive, &["a", "b", "c"]), 1);
    assert_eq!(find(&x.exclusive, &["a", "c"]), 1);
    assert_eq!(find(&x.exclusive, &["b"]), 1);
    assert_eq!(find(&x.inclusive, &["a"]), 2);
    assert_eq!(x.exclusive.iter().map(|e| e.1).sum::<usize>(), x.union);
    assert!(head_intersection(&r[..1], 2).is_err());
}

#[test]
fn keyword_probe_counts_continuations() {
    let (b, p, _) = toy(10);
    let inputs = vec![p.x_plus.clone(), p.x_minus.clone()];
    let first = greedy_decode_with(&b, &p.x_plus, 3, &mut NoHook).unwrap().tokens[0];
    let targets: BTreeSet<usize> = [first].into();
    let f = keyword_frequency_probe(&b, &inputs, &targets, &|_| Ok(None), 3).unwrap();
    assert!(f >= 0.5);
    let bad: BTreeSet<usize> = [10_000].into();
    assert!(keyword_frequency_probe(&b, &inputs, &bad, &|_| Ok(None), 3).is_err());
}
