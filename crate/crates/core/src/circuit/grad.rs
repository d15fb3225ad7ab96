// SPDX-License-Identifier: MIT OR Apache-2.0

//! Taped re-run of the forward pass for exact gradients of the intention
//! metric `I = cos(O_attn[l, N], S_l)`, plus neuron attribution and
//! attention saliency built on it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{source_token, RestorationContext};
use crate::error::{Error, Result};
use crate::model::{InputSequence, ModelBundle, Role};
use crate::numerics::{AdjointTape, Gradients, NodeId, Tensor2};
use crate::par;
use crate::steering::ContrastivePair;
use crate::trace::{run_with_capture, ActivationTrace, CaptureFilter, Family};

/// A recorded forward from `start` up to the attention of `target` at one
/// metric position.
pub struct TapedForward<'a> {
    pub tape: AdjointTape<'a>,
    /// `(layer, head, pos)` → key slice.
    pub keys: BTreeMap<(usize, usize, usize), NodeId>,
    /// `(layer, head, query)` → post-softmax row.
    pub probs: BTreeMap<(usize, usize, usize), NodeId>,
    /// `(layer, pos)` → post-GELU activations.
    pub neurons: BTreeMap<(usize, usize), NodeId>,
    pub attn_out: NodeId,
    pub metric: NodeId,
}

impl TapedForward<'_> {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.metric)
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(self.metric)
    }
}

/// Records blocks `start..=target` over `xs` (the block inputs of `start`)
/// and the metric at `metric_pos`.
pub fn taped_forward<'a>(
    bundle: &'a ModelBundle,
    xs: Vec<Vec<f64>>,
    start: usize,
    target: usize,
    metric_pos: usize,
    steering: &[f64],
) -> Result<TapedForward<'a>> {
    let c = &bundle.config;
    if start > target || target >= c.n_layers {
        return Err(Error::Index(format!("tape layers {start}..={target}")));
    }
    if metric_pos >= xs.len() {
        return Err(Error::Index(format!("metric position {metric_pos}")));
    }
    if steering.len() != c.d_model {
        return Err(Error::Shape("steering vector length".into()));
    }
    let (dh, nh) = (c.d_head, c.n_heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let n = metric_pos + 1;
    let mut tape = AdjointTape::new();
    let mut keys = BTreeMap::new();
    let mut probs = BTreeMap::new();
    let mut neurons = BTreeMap::new();
    let mut cur: Vec<NodeId> = xs.into_iter().take(n).map(|x| tape.leaf(x)).collect();
    let mut attn_out = None;
    for layer in start..=target {
        let w = &bundle.weights.layers[layer];
        let mut qh = Vec::with_capacity(n);
        let mut kh = Vec::with_capacity(n);
        let mut vh = Vec::with_capacity(n);
        for (p, &x) in cur.iter().enumerate() {
            let ln = tape.layer_norm(x, &w.ln1_g, &w.ln1_b)?;
            let q = tape.vec_mat(ln, &w.w_q)?;
            let k = tape.vec_mat(ln, &w.w_k)?;
            let v = tape.vec_mat(ln, &w.w_v)?;
            let mut qs = Vec::with_capacity(nh);
            let mut ks = Vec::with_capacity(nh);
            let mut vs = Vec::with_capacity(nh);
            for h in 0..nh {
                qs.push(tape.slice(q, h * dh, dh)?);
                let kid = tape.slice(k, h * dh, dh)?;
                keys.insert((layer, h, p), kid);
                ks.push(kid);
                vs.push(tape.slice(v, h * dh, dh)?);
            }
            qh.push(qs);
            kh.push(ks);
            vh.push(vs);
        }
        let rows: Vec<usize> = if layer == target { vec![metric_pos] } else { (0..n).collect() };
        let mut next = cur.clone();
        for &p in &rows {
            let mut zs = Vec::with_capacity(nh);
            for h in 0..nh {
                let ks: Vec<NodeId> = (0..=p).map(|j| kh[j][h]).collect();
                let vs: Vec<NodeId> = (0..=p).map(|j| vh[j][h]).collect();
                let s = tape.scores(qh[p][h], &ks, scale)?;
                let pr = tape.softmax(s)?;
                probs.insert((layer, h, p), pr);
                zs.push(tape.attend(pr, &vs)?);
            }
            let z = tape.concat(&zs)?;
            let a = tape.vec_mat(z, &w.w_o)?;
            if layer == target {
                attn_out = Some(a);
                break;
            }
            let x1 = tape.add(cur[p], a)?;
            let ln2 = tape.layer_norm(x1, &w.ln2_g, &w.ln2_b)?;
            let up = tape.vec_mat(ln2, &w.w_up)?;
            let act = tape.gelu(up)?;
            neurons.insert((layer, p), act);
            let down = tape.vec_mat(act, &w.w_down)?;
            next[p] = tape.add(x1, down)?;
        }
        cur = next;
    }
    let attn_out = attn_out.ok_or_else(|| Error::Internal("tape never reached target".into()))?;
    let s = tape.leaf(steering.to_vec());
    let metric = tape.cosine(attn_out, s)?;
    Ok(TapedForward {
        tape,
        keys,
        probs,
        neurons,
        attn_out,
        metric,
    })
}

fn block_inputs_of(trace: &ActivationTrace, layer: usize) -> Result<Vec<Vec<f64>>> {
    trace.block_inputs(layer)
}

/// `∂R/∂k` for head `(l′, h)` at key position `t*`: the exact gradient of
/// `I` on the unpatched X⁻ run through layers `l′..=l`, divided by
/// `I(O⁺) − I(O⁻)`.
pub fn grad_r_wrt_key(
    bundle: &ModelBundle,
    ctx: &RestorationContext,
    head: (usize, usize),
    t_star: usize,
) -> Result<Vec<f64>> {
    let (lp, h) = head;
    if lp > ctx.target_layer || h >= bundle.config.n_heads {
        return Err(Error::Index(format!("head {lp}.{h}")));
    }
    if t_star > ctx.last {
        return Err(Error::Index(format!("key position {t_star}")));
    }
    let xs = block_inputs_of(&ctx.minus, lp)?;
    let tf = taped_forward(bundle, xs, lp, ctx.target_layer, ctx.last, &ctx.steering)?;
    let g = tf.backward()?;
    let id = tf.keys[&(lp, h, t_star)];
    let d = ctx.denom();
    Ok(g.get(id).iter().map(|x| x / d).collect())
}

/// How a neuron's effect on the metric is linearised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMode {
    /// `ΔA · ∂R/∂A`, the full reverse-mode derivative through every path.
    #[default]
    Exact,
    /// `ΔA · (W_down[u] · W_K[:, h] · ∂R/∂k)`: the direct write into the
    /// head's key, ignoring layer norms and intermediate layers.
    KeyChain,
}

/// Key-chain attribution of neuron `(l″, u)` for head `(l′, h)`.
pub fn attribution_score(
    bundle: &ModelBundle,
    trace_plus: &ActivationTrace,
    trace_minus: &ActivationTrace,
    neuron: (usize, usize),
    head: (usize, usize),
    t_star: usize,
    grad_k: &[f64],
) -> Result<f64> {
    let (ln, u) = neuron;
    let (lp, h) = head;
    if ln >= lp {
        return Err(Error::Index(format!("neuron layer {ln} is not upstream of head layer {lp}")));
    }
    let c = &bundle.config;
    if grad_k.len() != c.d_head || u >= c.d_mlp {
        return Err(Error::Shape("gradient or neuron index".into()));
    }
    let a_plus = trace_plus
        .neurons(ln, t_star)
        .ok_or_else(|| Error::IncompleteTrace(format!("positive neurons {ln} at {t_star}")))?;
    let a_minus = trace_minus
        .neurons(ln, t_star)
        .ok_or_else(|| Error::IncompleteTrace(format!("negative neurons {ln} at {t_star}")))?;
    let delta = a_plus[u] - a_minus[u];
    let chain = key_chain(bundle, ln, u, lp, h, grad_k);
    Ok(delta * chain)
}

fn key_chain(bundle: &ModelBundle, ln: usize, u: usize, lp: usize, h: usize, grad_k: &[f64]) -> f64 {
    let dh = bundle.config.d_head;
    let write = bundle.weights.layers[ln].w_down.row(u);
    let wk = &bundle.weights.layers[lp].w_k;
    let mut s = 0.0;
    for (i, &wi) in write.iter().enumerate() {
        let row = &wk.row(i)[h * dh..(h + 1) * dh];
        s += wi * crate::numerics::kernels::dot(row, grad_k);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub layer: usize,
    pub neuron: usize,
    /// Mean signed `G` over the pairs used.
    pub g: f64,
    /// Mean `|G|` over the pairs used; the ranking key.
    pub g_abs: f64,
    pub head: (usize, usize),
    /// Most frequent `t*` over pairs (ties: lowest).
    pub source_token: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronTrace {
    pub head: (usize, usize),
    pub emotion: String,
    pub mode: AttributionMode,
    pub n_used: usize,
    pub n_skipped: usize,
    pub neurons: Vec<NeuronScore>,
}

struct PairAttribution {
    /// Per head: `t*` and `G` for every `(l″, u)` with `l″ < l′`, row major.
    per_head: Vec<(usize, Vec<f64>)>,
}

fn attribute_pair(
    bundle: &ModelBundle,
    pair: &ContrastivePair,
    target: usize,
    steering: &[f64],
    heads: &[(usize, usize)],
    mode: AttributionMode,
) -> Result<Option<PairAttribution>> {
    let c = &bundle.config;
    let ctx = match RestorationContext::new(bundle, &pair.x_plus, &pair.x_minus, target, steering) {
        Ok(ctx) => ctx,
        Err(Error::DegenerateContrast(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let max_l = heads.iter().map(|h| h.0).max().unwrap_or(0);
    let f = CaptureFilter::only(&[Family::Scores, Family::Neurons]).layers(0..max_l + 1);
    let (_, tp) = run_with_capture(bundle, &pair.x_plus, &f)?;
    let (_, tm) = run_with_capture(bundle, &pair.x_minus, &CaptureFilter::only(&[Family::Neurons]))?;
    let tf = taped_forward(bundle, ctx.minus.block_inputs(0)?, 0, target, ctx.last, steering)?;
    let g = tf.backward()?;
    let d = ctx.denom();
    let mut per_head = Vec::with_capacity(heads.len());
    for &(lp, h) in heads {
        let t = source_token(&tp, (lp, h), ctx.last)?;
        let grad_k: Vec<f64> = g.get(tf.keys[&(lp, h, t)]).iter().map(|x| x / d).collect();
        let mut gs = Vec::with_capacity(lp * c.d_mlp);
        for ln in 0..lp {
            let ap = tp.neurons(ln, t).ok_or_else(|| Error::IncompleteTrace("neurons".into()))?;
            let am = tm.neurons(ln, t).ok_or_else(|| Error::IncompleteTrace("neurons".into()))?;
            let dr_da = g.get(tf.neurons[&(ln, t)]);
            for u in 0..c.d_mlp {
                let delta = ap[u] - am[u];
                gs.push(match mode {
                    AttributionMode::Exact => delta * dr_da[u] / d,
                    AttributionMode::KeyChain => delta * key_chain(bundle, ln, u, lp, h, &grad_k),
                });
            }
        }
        per_head.push((t, gs));
    }
    Ok(Some(PairAttribution { per_head }))
}

/// Attribution of every upstream neuron to each head, averaged over pairs;
/// the top `k_neuron` by mean `|G|` are kept (ties: lower layer, index).
pub fn trace_neurons(
    bundle: &ModelBundle,
    pairs: &[ContrastivePair],
    target: usize,
    steering: &[f64],
    heads: &[(usize, usize)],
    k_neuron: usize,
    mode: AttributionMode,
) -> Result<Vec<NeuronTrace>> {
    let c = &bundle.config;
    for &(lp, h) in heads {
        if lp > target || h >= c.n_heads {
            return Err(Error::Index(format!("head {lp}.{h}")));
        }
    }
    let emotion = pairs.first().map(|p| p.emotion.clone()).unwrap_or_default();
    if k_neuron == 0 || heads.is_empty() {
        return Ok(heads
            .iter()
            .map(|&head| NeuronTrace {
                head,
                emotion: emotion.clone(),
                mode,
                n_used: 0,
                n_skipped: 0,
                neurons: Vec::new(),
            })
            .collect());
    }
    let results = par::try_map(pairs, |p| attribute_pair(bundle, p, target, steering, heads, mode))?;
    let used: Vec<&PairAttribution> = results.iter().flatten().collect();
    let n_skipped = results.len() - used.len();
    let mut out = Vec::with_capacity(heads.len());
    for (hi, &head) in heads.iter().enumerate() {
        let width = head.0 * c.d_mlp;
        let mut sum = vec![0.0; width];
        let mut sum_abs = vec![0.0; width];
        let mut t_count: BTreeMap<usize, usize> = BTreeMap::new();
        for pa in &used {
            let (t, gs) = &pa.per_head[hi];
            *t_count.entry(*t).or_default() += 1;
            for (i, g) in gs.iter().enumerate() {
                sum[i] += g;
                sum_abs[i] += g.abs();
            }
        }
        let n = used.len().max(1) as f64;
        let t_mode = t_count
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map_or(0, |(t, _)| *t);
        let mut scores: Vec<NeuronScore> = (0..width)
            .map(|i| NeuronScore {
                layer: i / c.d_mlp,
                neuron: i % c.d_mlp,
                g: sum[i] / n,
                g_abs: sum_abs[i] / n,
                head,
                source_token: t_mode,
            })
            .collect();
        if used.is_empty() {
            scores.clear();
        }
        scores.sort_by(|a, b| {
            b.g_abs
                .total_cmp(&a.g_abs)
                .then(a.layer.cmp(&b.layer))
                .then(a.neuron.cmp(&b.neuron))
        });
        scores.truncate(k_neuron);
        out.push(NeuronTrace {
            head,
            emotion: emotion.clone(),
            mode,
            n_used: used.len(),
            n_skipped,
            neurons: scores,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyLayer {
    pub layer: usize,
    /// One `seq × seq` matrix per head; row = query, column = key. Rows
    /// not computed (future keys, or non-metric rows at the target layer)
    /// are zero.
    pub heads: Vec<Tensor2>,
    pub v_to_q: f64,
    pub q_to_l: f64,
    pub v_to_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub layers: Vec<SaliencyLayer>,
    /// Per-flow values divided by the largest magnitude across layers.
    pub normalized: Vec<[f64; 3]>,
}

/// Sums of matching cells: `(V→Q, Q→L, V→L)`.
pub fn flow_sums(m: &Tensor2, roles: &[Role]) -> (f64, f64, f64) {
    let (mut vq, mut ql, mut vl) = (0.0, 0.0, 0.0);
    for q in 0..m.rows() {
        for k in 0..=q.min(m.cols().saturating_sub(1)) {
            let x = m.get(q, k);
            match (roles[q], roles[k]) {
                (Role::Query, Role::Visual) => vq += x,
                (Role::Last, Role::Query) => ql += x,
                (Role::Last, Role::Visual) => vl += x,
                _ => {}
            }
        }
    }
    (vq, ql, vl)
}

/// Attention probability times `∂R/∂p` on X⁻, for every layer up to the
/// target.
pub fn saliency(
    bundle: &ModelBundle,
    pair: &ContrastivePair,
    target: usize,
    steering: &[f64],
) -> Result<SaliencyMap> {
    let ctx = RestorationContext::new(bundle, &pair.x_plus, &pair.x_minus, target, steering)?;
    saliency_in(bundle, &ctx, &pair.x_minus)
}

pub(crate) fn saliency_in(bundle: &ModelBundle, ctx: &RestorationContext, xm: &InputSequence) -> Result<SaliencyMap> {
    let c = &bundle.config;
    let tf = taped_forward(bundle, ctx.minus.block_inputs(0)?, 0, ctx.target_layer, ctx.last, &ctx.steering)?;
    let g = tf.backward()?;
    let d = ctx.denom();
    let n = ctx.last + 1;
    let roles = xm.roles();
    let mut layers = Vec::new();
    for layer in 0..=ctx.target_layer {
        let mut heads = Vec::with_capacity(c.n_heads);
        let (mut vq, mut ql, mut vl) = (0.0, 0.0, 0.0);
        for h in 0..c.n_heads {
            let mut m = Tensor2::zeros(n, n);
            for q in 0..n {
                if let Some(&id) = tf.probs.get(&(layer, h, q)) {
                    let p = tf.tape.value(id);
                    let gp = g.get(id);
                    for k in 0..=q {
                        m.set(q, k, p[k] * gp[k] / d);
                    }
                }
            }
            let (a, b, cc) = flow_sums(&m, &roles);
            vq += a;
            ql += b;
            vl += cc;
            heads.push(m);
        }
        layers.push(SaliencyLayer {
            layer,
            heads,
            v_to_q: vq,
            q_to_l: ql,
            v_to_l: vl,
        });
    }
    let mut mx = [0.0f64; 3];
    for l in &layers {
        for (m, v) in mx.iter_mut().zip([l.v_to_q, l.q_to_l, l.v_to_l]) {
            *m = m.max(v.abs());
        }
    }
    let normalized = layers
        .iter()
        .map(|l| {
            let f = [l.v_to_q, l.q_to_l, l.v_to_l];
            let mut o = [0.0; 3];
            for i in 0..3 {
                o[i] = if mx[i] == 0.0 { 0.0 } else { f[i] / mx[i] };
            }
            o
        })
        .collect();
    Ok(SaliencyMap { layers, normalized })
}
