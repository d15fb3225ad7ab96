// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scoped reverse-mode differentiation over vector-valued nodes.
//!
//! A tape holds exactly the primitives a caller records. Forward values are
//! produced by the same kernels the model uses, so `replay` reproduces them
//! bit for bit. `backward` walks the records once, newest first.

use super::kernels;
use super::Tensor2;
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<'a> {
    Leaf,
    VecMat(NodeId, &'a Tensor2),
    Add(NodeId, NodeId),
    Slice(NodeId, usize),
    Concat(Vec<NodeId>),
    LayerNorm {
        x: NodeId,
        gamma: &'a [f64],
        beta: &'a [f64],
    },
    Gelu(NodeId),
    Scores {
        q: NodeId,
        keys: Vec<NodeId>,
        scale: f64,
    },
    Softmax(NodeId),
    Attend {
        probs: NodeId,
        values: Vec<NodeId>,
    },
    Dot(NodeId, NodeId),
    Cosine(NodeId, NodeId),
    Scale(NodeId, f64),
}

#[derive(Clone, Debug)]
struct Node<'a> {
    op: Op<'a>,
    value: Vec<f64>,
}

/// Recorded computation. Borrowed weights live at least as long as the tape.
#[derive(Clone, Debug, Default)]
pub struct AdjointTape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints for every node of a tape, indexed by handle.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }
}

fn eval<'v>(op: &Op<'_>, v: &dyn Fn(NodeId) -> &'v [f64]) -> Result<Vec<f64>> {
    Ok(match op {
        Op::Leaf | Op::Slice(..) => unreachable!("leaves and slices are materialised by callers"),
        Op::VecMat(x, w) => {
            let mut out = vec![0.0; w.cols()];
            kernels::vec_mat(v(*x), w, &mut out);
            out
        }
        Op::Add(a, b) => v(*a).iter().zip(v(*b)).map(|(x, y)| x + y).collect(),
        Op::Concat(parts) => {
            let mut out = Vec::new();
            for p in parts {
                out.extend_from_slice(v(*p));
            }
            out
        }
        Op::LayerNorm { x, gamma, beta } => {
            let mut out = vec![0.0; v(*x).len()];
            kernels::layer_norm(v(*x), gamma, beta, &mut out);
            out
        }
        Op::Gelu(x) => v(*x).iter().map(|&t| kernels::gelu(t)).collect(),
        Op::Scores { q, keys, scale } => keys
            .iter()
            .map(|k| kernels::dot(v(*q), v(*k)) * scale)
            .collect(),
        Op::Softmax(x) => {
            let mut out = v(*x).to_vec();
            kernels::softmax_in_place(&mut out);
            out
        }
        Op::Attend { probs, values } => {
            let vs: Vec<&[f64]> = values.iter().map(|id| v(*id)).collect();
            let mut out = vec![0.0; vs.first().map_or(0, |t| t.len())];
            kernels::attend(v(*probs), &vs, &mut out);
            out
        }
        Op::Dot(a, b) => vec![kernels::dot(v(*a), v(*b))],
        Op::Cosine(a, b) => vec![super::cosine_sim(v(*a), v(*b))?],
        Op::Scale(x, s) => v(*x).iter().map(|t| t * s).collect(),
    })
}

impl<'a> AdjointTape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Scalar value of a length-1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op<'a>) -> Result<NodeId> {
        let nodes = &self.nodes;
        let value = eval(&op, &|id| nodes[id.0].value.as_slice())?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::InvalidHandle(id.0));
        }
        Ok(())
    }

    pub fn vec_mat(&mut self, x: NodeId, w: &'a Tensor2) -> Result<NodeId> {
        self.check(x)?;
        if self.value(x).len() != w.rows() {
            return Err(Error::Shape(format!(
                "vector of length {} against {}x{} matrix",
                self.value(x).len(),
                w.rows(),
                w.cols()
            )));
        }
        self.push(Op::VecMat(x, w))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Shape("add of unequal lengths".into()));
        }
        self.push(Op::Add(a, b))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let src = self.value(x);
        if start + len > src.len() {
            return Err(Error::Shape(format!(
                "slice {start}..{} of length {}",
                start + len,
                src.len()
            )));
        }
        let value = src[start..start + len].to_vec();
        self.nodes.push(Node {
            op: Op::Slice(x, start),
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.check(p)?;
        }
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: &'a [f64], beta: &'a [f64]) -> Result<NodeId> {
        self.check(x)?;
        if self.value(x).len() != gamma.len() || gamma.len() != beta.len() {
            return Err(Error::Shape("layer norm parameter length".into()));
        }
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.push(Op::Gelu(x))
    }

    /// `s_j = (q · k_j) * scale` for each key.
    pub fn scores(&mut self, q: NodeId, keys: &[NodeId], scale: f64) -> Result<NodeId> {
        self.check(q)?;
        for &k in keys {
            self.check(k)?;
            if self.value(k).len() != self.value(q).len() {
                return Err(Error::Shape("query/key length".into()));
            }
        }
        self.push(Op::Scores {
            q,
            keys: keys.to_vec(),
            scale,
        })
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.push(Op::Softmax(x))
    }

    pub fn attend(&mut self, probs: NodeId, values: &[NodeId]) -> Result<NodeId> {
        self.check(probs)?;
        if self.value(probs).len() != values.len() {
            return Err(Error::Shape("one probability per value required".into()));
        }
        for &v in values {
            self.check(v)?;
        }
        self.push(Op::Attend {
            probs,
            values: values.to_vec(),
        })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.push(Op::Dot(a, b))
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.push(Op::Cosine(a, b))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.check(x)?;
        self.push(Op::Scale(x, s))
    }

    /// Reverse sweep from a scalar node. Each record is visited once, in
    /// strict reverse order of recording.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        self.check(seed)?;
        if self.nodes[seed.0].value.len() != 1 {
            return Err(Error::Shape("backward seed must be a scalar node".into()));
        }
        let mut g: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        g[seed.0][0] = 1.0;
        for i in (0..=seed.0).rev() {
            let gi = std::mem::take(&mut g[i]);
            if gi.iter().all(|&v| v == 0.0) {
                g[i] = gi;
                continue;
            }
            self.backprop_node(i, &gi, &mut g);
            g[i] = gi;
        }
        Ok(Gradients { grads: g })
    }

    fn backprop_node(&self, i: usize, gi: &[f64], g: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| self.nodes[id.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::VecMat(x, w) => {
                let mut dx = vec![0.0; w.rows()];
                kernels::mat_vec(w, gi, &mut dx);
                acc(&mut g[x.0], &dx);
            }
            Op::Add(a, b) => {
                acc(&mut g[a.0], gi);
                acc(&mut g[b.0], gi);
            }
            Op::Slice(x, start) => {
                let dst = &mut g[x.0][*start..*start + gi.len()];
                acc(dst, gi);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(&mut g[p.0], &gi[off..off + n]);
                    off += n;
                }
            }
            Op::LayerNorm { x, gamma, .. } => {
                let xv = val(*x);
                let mut n = vec![0.0; xv.len()];
                let inv = kernels::normalize(xv, &mut n);
                if inv == 0.0 {
                    return;
                }
                let len = xv.len() as f64;
                let dn: Vec<f64> = gi.iter().zip(gamma.iter()).map(|(a, b)| a * b).collect();
                let mean_dn = dn.iter().sum::<f64>() / len;
                let mean_dn_n = kernels::dot(&dn, &n) / len;
                let dx: Vec<f64> = (0..xv.len())
                    .map(|j| inv * (dn[j] - mean_dn - n[j] * mean_dn_n))
                    .collect();
                acc(&mut g[x.0], &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = val(*x)
                    .iter()
                    .zip(gi)
                    .map(|(&t, d)| d * kernels::gelu_grad(t))
                    .collect();
                acc(&mut g[x.0], &dx);
            }
            Op::Scores { q, keys, scale } => {
                let qv = val(*q).to_vec();
                let mut dq = vec![0.0; qv.len()];
                for (j, k) in keys.iter().enumerate() {
                    let ds = gi[j] * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kv = val(*k);
                    for d in 0..qv.len() {
                        dq[d] += ds * kv[d];
                    }
                    let dk: Vec<f64> = qv.iter().map(|t| ds * t).collect();
                    acc(&mut g[k.0], &dk);
                }
                acc(&mut g[q.0], &dq);
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let s = kernels::dot(p, gi);
                let dx: Vec<f64> = p.iter().zip(gi).map(|(pj, dj)| pj * (dj - s)).collect();
                acc(&mut g[x.0], &dx);
            }
            Op::Attend { probs, values } => {
                let pv = val(*probs).to_vec();
                let mut dp = vec![0.0; pv.len()];
                for (j, v) in values.iter().enumerate() {
                    dp[j] = kernels::dot(gi, val(*v));
                    let dv: Vec<f64> = gi.iter().map(|t| t * pv[j]).collect();
                    acc(&mut g[v.0], &dv);
                }
                acc(&mut g[probs.0], &dp);
            }
            Op::Dot(a, b) => {
                let d = gi[0];
                let da: Vec<f64> = val(*b).iter().map(|t| t * d).collect();
                let db: Vec<f64> = val(*a).iter().map(|t| t * d).collect();
                acc(&mut g[a.0], &da);
                acc(&mut g[b.0], &db);
            }
            Op::Cosine(a, b) => {
                let d = gi[0];
                let (av, bv) = (val(*a), val(*b));
                let (na, nb) = (kernels::norm(av), kernels::norm(bv));
                let c = node.value[0];
                let da: Vec<f64> = (0..av.len())
                    .map(|j| d * (bv[j] / (na * nb) - c * av[j] / (na * na)))
                    .collect();
                let db: Vec<f64> = (0..bv.len())
                    .map(|j| d * (av[j] / (na * nb) - c * bv[j] / (nb * nb)))
                    .collect();
                acc(&mut g[a.0], &da);
                acc(&mut g[b.0], &db);
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = gi.iter().map(|t| t * s).collect();
                acc(&mut g[x.0], &dx);
            }
        }
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Vec<f64>>> {
        self.replay_with(&[])
    }

    /// Recomputes every node, substituting the given node values. An
    /// overridden node keeps its override; everything downstream is rebuilt.
    pub fn replay_with(&self, overrides: &[(NodeId, Vec<f64>)]) -> Result<Vec<Vec<f64>>> {
        for (id, v) in overrides {
            self.check(*id)?;
            if v.len() != self.nodes[id.0].value.len() {
                return Err(Error::Shape(format!("override for node {} has wrong length", id.0)));
            }
        }
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some((_, v)) = overrides.iter().find(|(id, _)| id.0 == i) {
                vals.push(v.clone());
                continue;
            }
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Slice(x, start) => vals[x.0][*start..*start + node.value.len()].to_vec(),
                op => eval(op, &|id| vals[id.0].as_slice())?,
            };
            vals.push(v);
        }
        Ok(vals)
    }
}

#[inline]
fn acc(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-4 || (fd - grad[i]).abs() < 1e-9,
                "coord {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn quadratic_form_gradient() {
        let mut t = AdjointTape::new();
        let u = t.leaf(vec![1.0, -2.0, 0.5]);
        let d = t.dot(u, u).unwrap();
        let g = t.backward(d).unwrap();
        assert_eq!(g.get(u), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn cosine_gradient_matches_fd() {
        let mut rng = SeededRng::new(3);
        for _ in 0..20 {
            let u0 = rng.gaussian_vec(6, 1.0);
            let c = rng.gaussian_vec(6, 1.0);
            let mut t = AdjointTape::new();
            let u = t.leaf(u0.clone());
            let cn = t.leaf(c.clone());
            let s = t.cosine(u, cn).unwrap();
            let g = t.backward(s).unwrap();
            fd_check(|x| crate::numerics::cosine_sim(x, &c).unwrap(), &u0, g.get(u));
        }
    }

    #[test]
    fn softmax_gradient_matches_fd() {
        let mut rng = SeededRng::new(4);
        for _ in 0..20 {
            let x0 = rng.gaussian_vec(5, 2.0);
            let w = rng.gaussian_vec(5, 1.0);
            let mut t = AdjointTape::new();
            let x = t.leaf(x0.clone());
            let wn = t.leaf(w.clone());
            let p = t.softmax(x).unwrap();
            let s = t.dot(p, wn).unwrap();
            let g = t.backward(s).unwrap();
            let f = |xs: &[f64]| {
                let mut p = xs.to_vec();
                kernels::softmax_in_place(&mut p);
                kernels::dot(&p, &w)
            };
            fd_check(f, &x0, g.get(x));
        }
    }

    #[test]
    fn layer_norm_and_gelu_chain_matches_fd() {
        let mut rng = SeededRng::new(5);
        let gamma = rng.gaussian_vec(8, 1.0);
        let beta = rng.gaussian_vec(8, 0.3);
        let w = rng.gaussian_matrix(8, 4, 0.5);
        let target = rng.gaussian_vec(4, 1.0);
        for _ in 0..20 {
            let x0 = rng.gaussian_vec(8, 1.0);
            let mut t = AdjointTape::new();
            let x = t.leaf(x0.clone());
            let tn = t.leaf(target.clone());
            let y = t.layer_norm(x, &gamma, &beta).unwrap();
            let z = t.gelu(y).unwrap();
            let o = t.vec_mat(z, &w).unwrap();
            let s = t.cosine(o, tn).unwrap();
            let g = t.backward(s).unwrap();
            let f = |xs: &[f64]| {
                let mut y = vec![0.0; 8];
                kernels::layer_norm(xs, &gamma, &beta, &mut y);
                let z: Vec<f64> = y.iter().map(|&v| kernels::gelu(v)).collect();
                let mut o = vec![0.0; 4];
                kernels::vec_mat(&z, &w, &mut o);
                crate::numerics::cosine_sim(&o, &target).unwrap()
            };
            fd_check(f, &x0, g.get(x));
        }
    }

    #[test]
    fn attention_chain_matches_fd() {
        let mut rng = SeededRng::new(6);
        let keys: Vec<Vec<f64>> = (0..4).map(|_| rng.gaussian_vec(3, 1.0)).collect();
        let vals: Vec<Vec<f64>> = (0..4).map(|_| rng.gaussian_vec(3, 1.0)).collect();
        let target = rng.gaussian_vec(3, 1.0);
        let q0 = rng.gaussian_vec(3, 1.0);
        let run = |q: &[f64], k2: &[f64]| {
            let mut t = AdjointTape::new();
            let qn = t.leaf(q.to_vec());
            let ks: Vec<NodeId> = (0..4)
                .map(|j| t.leaf(if j == 2 { k2.to_vec() } else { keys[j].clone() }))
                .collect();
            let vs: Vec<NodeId> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let tn = t.leaf(target.clone());
            let s = t.scores(qn, &ks, 0.5).unwrap();
            let p = t.softmax(s).unwrap();
            let a = t.attend(p, &vs).unwrap();
            let c = t.cosine(a, tn).unwrap();
            (t, qn, ks[2], c)
        };
        let (t, qn, k2, c) = run(&q0, &keys[2]);
        let g = t.backward(c).unwrap();
        fd_check(|q| { let (t, _, _, c) = run(q, &keys[2]); t.scalar(c) }, &q0, g.get(qn));
        fd_check(|k| { let (t, _, _, c) = run(&q0, k); t.scalar(c) }, &keys[2], g.get(k2));
    }

    #[test]
    fn replay_is_bit_exact_and_overrides_propagate() {
        let mut rng = SeededRng::new(8);
        let w = rng.gaussian_matrix(4, 4, 1.0);
        let mut t = AdjointTape::new();
        let x = t.leaf(rng.gaussian_vec(4, 1.0));
        let y = t.vec_mat(x, &w).unwrap();
        let s = t.slice(y, 1, 2).unwrap();
        let z = t.concat(&[s, x]).unwrap();
        let o = t.dot(z, z).unwrap();
        let vals = t.replay().unwrap();
        for i in 0..t.len() {
            assert_eq!(vals[i], t.value(NodeId(i)));
        }
        let moved = t.replay_with(&[(x, vec![0.0; 4])]).unwrap();
        assert_eq!(moved[o.index()], vec![0.0]);
    }

    #[test]
    fn bad_handle_is_rejected() {
        let mut t = AdjointTape::new();
        let _ = t.leaf(vec![1.0]);
        assert!(matches!(t.backward(NodeId(5)), Err(Error::InvalidHandle(5))));
    }
}
