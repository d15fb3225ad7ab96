// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive steering directions: per-pair extraction at the last input
//! token, hit-rate-filtered aggregation, residual injection and layer scans.
//!
//! Injection happens at the post-block residual hook of the chosen layer,
//! the same point the directions are read from.
//!
//! # `EMM1` matrix files
//!
//! Same framing as weight files: magic `EMM1`, `u32` header length, a
//! canonical JSON header, `rows × cols` row-major `f64` values, CRC-32.
//! The header always carries `rows`, `cols` and `labels` (one per row);
//! callers may add fields (steering sets add `emotion`, `tau`, `n_valid`,
//! `pair_ids`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canon;
use crate::error::{Error, Result};
use crate::eval::{change_ratio, Evaluator};
use crate::model::io::{frame, unframe};
use crate::model::{Hook, InputSequence, ModelBundle, Site};
use crate::numerics::Tensor2;
use crate::par;
use crate::trace::{run_with_capture, CaptureFilter, Family};

pub const MATRIX_MAGIC: &[u8; 4] = b"EMM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub id: u64,
    pub emotion: String,
    pub x_plus: InputSequence,
    pub x_minus: InputSequence,
}

impl ContrastivePair {
    pub fn validate(&self) -> Result<()> {
        if self.x_plus.text != self.x_minus.text {
            return Err(Error::Pair(format!("pair {}: text tokens differ", self.id)));
        }
        if self.x_plus.visual.rows() != self.x_minus.visual.rows()
            || self.x_plus.visual.cols() != self.x_minus.visual.cols()
        {
            return Err(Error::Pair(format!("pair {}: visual shapes differ", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDirection {
    pub pair_id: u64,
    pub emotion: String,
    /// `s_{i,l}` for every layer.
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringSet {
    pub emotion: String,
    pub tau: f64,
    /// `S_l` for every layer.
    pub vectors: Vec<Vec<f64>>,
    /// Valid pair ids, ascending.
    pub valid_ids: Vec<u64>,
    /// `H(X⁺_i, y_i)` for every candidate pair, ascending id.
    pub hit_rates: Vec<(u64, f64)>,
}

impl SteeringSet {
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.vectors[l]
    }

    pub fn n_layers(&self) -> usize {
        self.vectors.len()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.vectors {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rows: Vec<String> = (0..self.vectors.len()).map(|l| format!("layer_{l}")).collect();
        let mut extra = serde_json::Map::new();
        extra.insert("emotion".into(), Value::from(self.emotion.clone()));
        extra.insert("tau".into(), Value::from(self.tau));
        extra.insert("n_valid".into(), Value::from(self.valid_ids.len()));
        extra.insert("pair_ids".into(), serde_json::to_value(&self.valid_ids)?);
        extra.insert("hit_rates".into(), serde_json::to_value(&self.hit_rates)?);
        let m = Tensor2::from_rows(&self.vectors)?;
        write_matrix(path, &m, &rows, extra)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, _, header) = read_matrix(path)?;
        let field = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("steering header lacks {k}")))
        };
        let fmt = |e: serde_json::Error| Error::Format(format!("steering header: {e}"));
        Ok(Self {
            emotion: serde_json::from_value(field("emotion")?).map_err(fmt)?,
            tau: serde_json::from_value(field("tau")?).map_err(fmt)?,
            vectors: (0..m.rows()).map(|r| m.row(r).to_vec()).collect(),
            valid_ids: serde_json::from_value(field("pair_ids")?).map_err(fmt)?,
            hit_rates: serde_json::from_value(field("hit_rates")?).map_err(fmt)?,
        })
    }
}

/// `s_l = h⁺_{l,N} − h⁻_{l,N}` at the last input position for every layer.
pub fn extract_pair_direction(bundle: &ModelBundle, pair: &ContrastivePair) -> Result<PairDirection> {
    pair.validate()?;
    let last = pair.x_plus.last_pos();
    let filter = CaptureFilter::only(&[Family::Residual]).positions(last..last + 1);
    let (_, tp) = run_with_capture(bundle, &pair.x_plus, &filter)?;
    let (_, tm) = run_with_capture(bundle, &pair.x_minus, &filter)?;
    let mut vectors = Vec::with_capacity(bundle.config.n_layers);
    for l in 0..bundle.config.n_layers {
        let (a, b) = match (tp.residual(l, last), tm.residual(l, last)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Internal(format!("residual {l} not captured"))),
        };
        vectors.push(a.iter().zip(b).map(|(x, y)| x - y).collect());
    }
    Ok(PairDirection {
        pair_id: pair.id,
        emotion: pair.emotion.clone(),
        vectors,
    })
}

/// Filters by `H > τ` and averages the survivors in ascending id order.
pub fn aggregate_from(
    emotion: &str,
    tau: f64,
    directions: &[PairDirection],
    hits: &[(u64, f64)],
) -> Result<SteeringSet> {
    if directions.is_empty() {
        return Err(Error::Input("no pair directions".into()));
    }
    let hit: BTreeMap<u64, f64> = hits.iter().copied().collect();
    let mut dirs: Vec<&PairDirection> = directions.iter().collect();
    dirs.sort_by_key(|d| d.pair_id);
    let valid: Vec<&PairDirection> = dirs
        .iter()
        .copied()
        .filter(|d| hit.get(&d.pair_id).is_some_and(|&h| h > tau))
        .collect();
    let mut hit_rates: Vec<(u64, f64)> = dirs
        .iter()
        .map(|d| (d.pair_id, hit.get(&d.pair_id).copied().unwrap_or(0.0)))
        .collect();
    hit_rates.sort_by_key(|p| p.0);
    if valid.is_empty() {
        return Err(Error::NoValidPairs {
            emotion: emotion.to_string(),
            tau,
            hit_rates,
        });
    }
    let n_layers = valid[0].vectors.len();
    let d = valid[0].vectors.first().map_or(0, Vec::len);
    let mut vectors = vec![vec![0.0; d]; n_layers];
    for p in &valid {
        for (acc, v) in vectors.iter_mut().zip(&p.vectors) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
    }
    let n = valid.len() as f64;
    for v in &mut vectors {
        for a in v.iter_mut() {
            *a /= n;
        }
    }
    Ok(SteeringSet {
        emotion: emotion.to_string(),
        tau,
        vectors,
        valid_ids: valid.iter().map(|p| p.pair_id).collect(),
        hit_rates,
    })
}

/// Extracts, scores and aggregates the pairs labelled `emotion`.
pub fn aggregate_steering(
    bundle: &ModelBundle,
    pairs: &[ContrastivePair],
    emotion: &str,
    tau: f64,
    evaluator: &Evaluator,
) -> Result<(SteeringSet, Vec<PairDirection>)> {
    let mine: Vec<&ContrastivePair> = pairs.iter().filter(|p| p.emotion == emotion).collect();
    if mine.is_empty() {
        return Err(Error::Input(format!("no pairs labelled {emotion:?}")));
    }
    let dirs = par::try_map(&mine, |p| extract_pair_direction(bundle, p))?;
    let hits = par::try_map(&mine, |p| {
        evaluator
            .hit_rate(bundle, &p.x_plus, emotion)
            .map(|h| (p.id, h))
    })?;
    let set = aggregate_from(emotion, tau, &dirs, &hits)?;
    Ok((set, dirs))
}

/// Which positions receive an injection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectPositions {
    /// Every position, including generated ones.
    All,
    /// Only the last input position.
    LastInput,
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
struct Injection {
    layer: usize,
    vector: Vec<f64>,
    alpha: f64,
    positions: InjectPositions,
}

/// Adds `α·S_l` to the residual. Injections sharing layer, vector and
/// positions are merged into one coefficient, so stacking is exactly one
/// addition.
#[derive(Clone, Debug, Default)]
pub struct SteeringHook {
    injections: Vec<Injection>,
    last_input: usize,
}

impl SteeringHook {
    pub fn new(input: &InputSequence) -> Self {
        Self {
            injections: Vec::new(),
            last_input: input.last_pos(),
        }
    }

    pub fn add(mut self, layer: usize, vector: &[f64], alpha: f64, positions: InjectPositions) -> Self {
        let same = |i: &Injection| {
            i.layer == layer
                && i.positions == positions
                && i.vector.len() == vector.len()
                && i.vector.iter().zip(vector).all(|(a, b)| a.to_bits() == b.to_bits())
        };
        match self.injections.iter_mut().find(|i| same(i)) {
            Some(i) => i.alpha += alpha,
            None => self.injections.push(Injection {
                layer,
                vector: vector.to_vec(),
                alpha,
                positions,
            }),
        }
        self
    }
}

impl Hook for SteeringHook {
    fn residual(&mut self, s: &Site, x: &mut [f64]) {
        for inj in &self.injections {
            if inj.layer != s.layer || inj.alpha == 0.0 {
                continue;
            }
            let hit = match &inj.positions {
                InjectPositions::All => true,
                InjectPositions::LastInput => s.pos == self.last_input,
                InjectPositions::Explicit(ps) => ps.contains(&s.pos),
            };
            if hit {
                for (xv, v) in x.iter_mut().zip(&inj.vector) {
                    *xv += inj.alpha * v;
                }
            }
        }
    }
}

/// Greedy decode with `α·S_layer` injected at prefill and every step.
pub fn inject_steering(
    bundle: &ModelBundle,
    input: &InputSequence,
    steering: &SteeringSet,
    layer: usize,
    alpha: f64,
    positions: InjectPositions,
    max_new: usize,
) -> Result<Vec<usize>> {
    if layer >= bundle.config.n_layers || layer >= steering.n_layers() {
        return Err(Error::Index(format!("layer {layer} outside model")));
    }
    let mut hook = SteeringHook::new(input).add(layer, steering.layer(layer), alpha, positions);
    Ok(crate::model::greedy_decode_with(bundle, input, max_new, &mut hook)?.tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScan {
    pub emotion: String,
    pub alpha: f64,
    pub baseline: f64,
    /// Mean hit rate under injection, by layer.
    pub steered: Vec<f64>,
    /// `(layer, C_l)` sorted by `C` descending, ties by layer.
    pub ranking: Vec<(usize, f64)>,
}

impl LayerScan {
    pub fn peak(&self) -> usize {
        self.ranking[0].0
    }
}

/// Mean hit rate over probes with and without injection at each layer.
/// An all-zero baseline is an undefined-ratio error carrying the best
/// steered hit rate.
pub fn layer_scan(
    bundle: &ModelBundle,
    steering: &SteeringSet,
    probes: &[InputSequence],
    alpha: f64,
    evaluator: &Evaluator,
) -> Result<LayerScan> {
    if probes.is_empty() {
        return Err(Error::Input("empty probe set".into()));
    }
    let label = steering.emotion.as_str();
    let n_layers = bundle.config.n_layers.min(steering.n_layers());
    let base = par::try_map(probes, |x| evaluator.hit_rate(bundle, x, label))?;
    let baseline = base.iter().sum::<f64>() / probes.len() as f64;
    let cells: Vec<(usize, usize)> = (0..n_layers)
        .flat_map(|l| (0..probes.len()).map(move |i| (l, i)))
        .collect();
    let scores = par::try_map(&cells, |&(l, i)| {
        let x = &probes[i];
        let mut hook = SteeringHook::new(x).add(l, steering.layer(l), alpha, InjectPositions::All);
        evaluator.hit_rate_with(bundle, x, label, &mut hook)
    })?;
    let steered: Vec<f64> = scores
        .chunks(probes.len())
        .map(|c| c.iter().sum::<f64>() / probes.len() as f64)
        .collect();
    if baseline == 0.0 {
        let best = steered.iter().copied().fold(0.0, f64::max);
        return Err(Error::UndefinedRatio { h_new: best });
    }
    let mut ranking = Vec::with_capacity(n_layers);
    for (l, &h) in steered.iter().enumerate() {
        ranking.push((l, change_ratio(baseline, h)?));
    }
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(LayerScan {
        emotion: label.to_string(),
        alpha,
        baseline,
        steered,
        ranking,
    })
}

/// Writes an `EMM1` matrix with one label per row and extra header fields.
pub fn write_matrix(
    path: &Path,
    m: &Tensor2,
    labels: &[String],
    extra: serde_json::Map<String, Value>,
) -> Result<()> {
    if labels.len() != m.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), m.rows())));
    }
    let mut header = extra;
    header.insert("rows".into(), Value::from(m.rows()));
    header.insert("cols".into(), Value::from(m.cols()));
    header.insert("labels".into(), serde_json::to_value(labels)?);
    let text = canon::to_string(&Value::Object(header))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, frame(MATRIX_MAGIC, &text, &[m.data()]))?;
    Ok(())
}

/// Reads an `EMM1` matrix: values, row labels, full header.
pub fn read_matrix(path: &Path) -> Result<(Tensor2, Vec<String>, serde_json::Map<String, Value>)> {
    let bytes = std::fs::read(path)?;
    let (text, data) = unframe(MATRIX_MAGIC, &bytes)?;
    let header: serde_json::Map<String, Value> =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("matrix header: {e}")))?;
    let dim = |k: &str| {
        header
            .get(k)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("matrix header lacks {k}")))
    };
    let (rows, cols) = (dim("rows")?, dim("cols")?);
    if rows * cols != data.len() {
        return Err(Error::Format(format!(
            "matrix payload holds {} values, header says {rows}x{cols}",
            data.len()
        )));
    }
    let labels: Vec<String> = header
        .get("labels")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::Format(format!("matrix labels: {e}")))?
        .unwrap_or_default();
    if labels.len() != rows {
        return Err(Error::Format("one label per row required".into()));
    }
    Ok((Tensor2::from_vec(rows, cols, data)?, labels, header))
}

/// Pair directions at one layer as a matrix, labelled by emotion.
pub fn export_directions(directions: &[PairDirection], layer: usize, path: &Path) -> Result<()> {
    if directions.is_empty() {
        return Err(Error::Input("no directions to export".into()));
    }
    let rows: Vec<Vec<f64>> = directions
        .iter()
        .map(|d| {
            d.vectors
                .get(layer)
                .cloned()
                .ok_or_else(|| Error::Index(format!("layer {layer} outside direction")))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<String> = directions.iter().map(|d| d.emotion.clone()).collect();
    let mut extra = serde_json::Map::new();
    extra.insert("layer".into(), Value::from(layer));
    extra.insert(
        "pair_ids".into(),
        serde_json::to_value(directions.iter().map(|d| d.pair_id).collect::<Vec<_>>())?,
    );
    write_matrix(path, &Tensor2::from_rows(&rows)?, &labels, extra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{greedy_decode, ModelConfig};
    use crate::numerics::SeededRng;

    fn toy() -> (ModelBundle, ContrastivePair) {
        let c = ModelConfig::small(3, 2, 8, 16, 60, 3);
        let b = ModelBundle::init_random(c, 5).unwrap();
        let mut r = SeededRng::new(6);
        let xm = InputSequence::new(r.gaussian_matrix(3, 8, 1.0), vec![50, 51, 52]);
        let mut xp = xm.clone();
        for (i, v) in r.gaussian_vec(8, 2.0).into_iter().enumerate() {
            let cur = xp.visual.get(1, i);
            xp.visual.set(1, i, cur + v);
        }
        let pair = ContrastivePair {
            id: 3,
            emotion: "happy".into(),
            x_plus: xp,
            x_minus: xm,
        };
        (b, pair)
    }

    #[test]
    fn identical_inputs_give_zero_and_swap_negates() {
        let (b, p) = toy();
        let same = ContrastivePair {
            x_plus: p.x_minus.clone(),
            ..p.clone()
        };
        let d0 = extract_pair_direction(&b, &same).unwrap();
        assert!(d0.vectors.iter().flatten().all(|&x| x == 0.0));
        let d = extract_pair_direction(&b, &p).unwrap();
        let swapped = ContrastivePair {
            x_plus: p.x_minus.clone(),
            x_minus: p.x_plus.clone(),
            ..p.clone()
        };
        let ds = extract_pair_direction(&b, &swapped).unwrap();
        for (a, s) in d.vectors.iter().flatten().zip(ds.vectors.iter().flatten()) {
            assert_eq!(*a, -*s);
        }
        assert_eq!(d.vectors.len(), 3);
    }

    #[test]
    fn mismatched_text_is_a_pair_error() {
        let (b, mut p) = toy();
        p.x_minus.text[0] = 1;
        assert!(matches!(extract_pair_direction(&b, &p), Err(Error::Pair(_))));
    }

    fn dir(id: u64, v: f64) -> PairDirection {
        PairDirection {
            pair_id: id,
            emotion: "sad".into(),
            vectors: vec![vec![v, 2.0 * v]; 2],
        }
    }

    #[test]
    fn aggregation_filters_and_averages() {
        let dirs = [dir(2, 1.0), dir(1, -1.0), dir(3, 5.0)];
        let hits = [(1, 1.0), (2, 1.0), (3, 0.5)];
        let s = aggregate_from("sad", 0.5, &dirs, &hits).unwrap();
        assert_eq!(s.valid_ids, vec![1, 2]);
        assert_eq!(s.vectors[0], vec![0.0, 0.0]);
        let s0 = aggregate_from("sad", 0.0, &dirs, &hits).unwrap();
        assert_eq!(s0.valid_ids.len(), 3);
        let err = aggregate_from("sad", 1.0, &dirs, &hits).unwrap_err();
        assert!(matches!(err, Error::NoValidPairs { ref hit_rates, .. } if hit_rates.len() == 3));
    }

    #[test]
    fn injection_identities() {
        let (b, p) = toy();
        let x = &p.x_plus;
        let v = vec![0.3; 8];
        let base = greedy_decode(&b, x, 4, None).unwrap().tokens;
        let mut h0 = SteeringHook::new(x).add(1, &v, 0.0, InjectPositions::All);
        assert_eq!(crate::model::greedy_decode_with(&b, x, 4, &mut h0).unwrap().tokens, base);
        let mut hc = SteeringHook::new(x)
            .add(1, &v, 0.1, InjectPositions::All)
            .add(1, &v, -0.1, InjectPositions::All);
        let a = crate::model::forward(&b, x, &mut hc).unwrap();
        let bl = crate::model::forward(&b, x, &mut crate::model::NoHook).unwrap();
        assert_eq!(a, bl);
        let mut h12 = SteeringHook::new(x)
            .add(2, &v, 0.25, InjectPositions::All)
            .add(2, &v, 0.5, InjectPositions::All);
        let mut h3 = SteeringHook::new(x).add(2, &v, 0.75, InjectPositions::All);
        assert_eq!(
            crate::model::forward(&b, x, &mut h12).unwrap(),
            crate::model::forward(&b, x, &mut h3).unwrap()
        );
    }

    #[test]
    fn matrix_round_trip_and_steering_file() {
        let dir_ = tempfile::tempdir().unwrap();
        let dirs = [dir(1, 0.5), dir(2, -0.25), dir(3, 0.0)];
        let p = dir_.path().join("d.emm");
        export_directions(&dirs, 1, &p).unwrap();
        let (m, labels, _) = read_matrix(&p).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 2));
        assert_eq!(m.row(1), dirs[1].vectors[1].as_slice());
        assert_eq!(labels, vec!["sad"; 3]);
        let s = aggregate_from("sad", 0.5, &dirs, &[(1, 1.0), (2, 1.0)]).unwrap();
        let sp = dir_.path().join("s.emm");
        s.save(&sp).unwrap();
        assert_eq!(SteeringSet::load(&sp).unwrap(), s);
    }
}
