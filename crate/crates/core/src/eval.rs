// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lexicon keyword extraction, emotion wheels, hit rate, F_s, WAF and the
//! relative change ratio.
//!
//! Keyword extraction is a deterministic token-id lookup. The default pack
//! (two wheels over happy / sad / angry / fear, eight synonyms each) ships
//! as JSON under `data/` and is a functional stand-in, not a curated
//! affective resource.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canon;
use crate::error::{Error, Result};
use crate::model::{greedy_decode_with, Hook, InputSequence, ModelBundle, NoHook};

pub const CORE_EMOTIONS: [&str; 4] = ["happy", "sad", "angry", "fear"];

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.json");
const DEFAULT_WHEELS: [&str; 2] = [
    include_str!("../data/wheel_core.json"),
    include_str!("../data/wheel_nuance.json"),
];

/// Keyword → core emotion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionWheel {
    pub wheel_id: String,
    pub mapping: BTreeMap<String, String>,
}

impl EmotionWheel {
    pub fn map(&self, keyword: &str) -> Option<&str> {
        self.mapping.get(keyword).map(String::as_str)
    }

    /// Image of a keyword set; unmappable keywords drop out.
    pub fn image<'a, I: IntoIterator<Item = &'a String>>(&self, ys: I) -> BTreeSet<String> {
        ys.into_iter()
            .filter_map(|y| self.map(y).map(str::to_string))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("wheel file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        canon::write_report(path, self)
    }
}

/// Token id ↔ keyword table plus per-emotion synonym groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub tokens: BTreeMap<usize, String>,
    pub groups: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Format("lexicon must be an object".into()))?;
        let mut tokens = BTreeMap::new();
        let mut groups = BTreeMap::new();
        for (k, val) in obj {
            if k == "groups" {
                groups = serde_json::from_value(val.clone())
                    .map_err(|e| Error::Format(format!("lexicon groups: {e}")))?;
            } else if k == "schema_version" {
                continue;
            } else {
                let id: usize = k
                    .parse()
                    .map_err(|_| Error::Format(format!("lexicon key {k:?} is not a token id")))?;
                let word = val
                    .as_str()
                    .ok_or_else(|| Error::Format(format!("lexicon entry {k} is not a string")))?;
                tokens.insert(id, word.to_string());
            }
        }
        let lex = Self { tokens, groups };
        lex.check()?;
        Ok(lex)
    }

    pub fn to_value(&self) -> Value {
        let mut m = serde_json::Map::new();
        for (id, w) in &self.tokens {
            m.insert(id.to_string(), Value::from(w.clone()));
        }
        m.insert(
            "groups".into(),
            serde_json::to_value(&self.groups).expect("string map"),
        );
        Value::Object(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        canon::write_report(path, &self.to_value())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for w in self.tokens.values() {
            if !seen.insert(w) {
                return Err(Error::Format(format!("keyword {w:?} bound to two tokens")));
            }
        }
        Ok(())
    }

    /// Every keyword must be mapped by at least one wheel.
    pub fn check_against(&self, wheels: &[EmotionWheel]) -> Result<()> {
        for w in self.tokens.values() {
            if !wheels.iter().any(|wh| wh.map(w).is_some()) {
                return Err(Error::Format(format!("keyword {w:?} is in no wheel")));
            }
        }
        Ok(())
    }

    pub fn token_of(&self, keyword: &str) -> Option<usize> {
        self.tokens.iter().find(|(_, w)| *w == keyword).map(|(&id, _)| id)
    }

    /// Token ids of an emotion's synonym group, in group order.
    pub fn group_tokens(&self, emotion: &str) -> Vec<usize> {
        self.groups
            .get(emotion)
            .map(|ws| ws.iter().filter_map(|w| self.token_of(w)).collect())
            .unwrap_or_default()
    }

    pub fn emotions(&self) -> Vec<String> {
        self.groups.keys().cloned().collect()
    }
}

pub fn default_lexicon() -> Lexicon {
    Lexicon::from_json(DEFAULT_LEXICON).expect("bundled lexicon parses")
}

pub fn default_wheels() -> Vec<EmotionWheel> {
    DEFAULT_WHEELS
        .iter()
        .map(|t| serde_json::from_str(t).expect("bundled wheel parses"))
        .collect()
}

/// Lexicon keywords whose tokens occur in `tokens`, deduplicated.
pub fn extract_keywords(tokens: &[usize], lexicon: &Lexicon) -> BTreeSet<String> {
    tokens
        .iter()
        .filter_map(|t| lexicon.tokens.get(t).cloned())
        .collect()
}

/// Mean over wheels of the indicator `Φ_k(y) ∈ Φ_k(Y)`.
pub fn hit_rate(ys: &BTreeSet<String>, label: &str, wheels: &[EmotionWheel]) -> Result<f64> {
    if wheels.is_empty() {
        return Err(Error::Input("at least one wheel required".into()));
    }
    let mut hits = 0usize;
    for w in wheels {
        let core = w
            .map(label)
            .ok_or_else(|| Error::LabelCoverage(label.to_string()))?;
        if w.image(ys).contains(core) {
            hits += 1;
        }
    }
    Ok(hits as f64 / wheels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelPrf {
    pub wheel_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsScore {
    pub per_wheel: Vec<WheelPrf>,
    pub fs: f64,
}

/// Set-level F score averaged over wheels. Empty predicted group gives
/// `P = 0`, empty true group `R = 0`, and `P = R = 0` gives `F = 0`.
pub fn fs_score(pred: &BTreeSet<String>, truth: &BTreeSet<String>, wheels: &[EmotionWheel]) -> Result<FsScore> {
    if wheels.is_empty() {
        return Err(Error::Input("at least one wheel required".into()));
    }
    let mut per_wheel = Vec::new();
    let mut sum = 0.0;
    for w in wheels {
        let gp = w.image(pred);
        let gt = w.image(truth);
        let inter = gp.intersection(&gt).count() as f64;
        let p = if gp.is_empty() { 0.0 } else { inter / gp.len() as f64 };
        let r = if gt.is_empty() { 0.0 } else { inter / gt.len() as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        sum += f;
        per_wheel.push(WheelPrf {
            wheel_id: w.wheel_id.clone(),
            precision: p,
            recall: r,
            f,
        });
    }
    Ok(FsScore {
        fs: sum / wheels.len() as f64,
        per_wheel,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WafReport {
    pub waf: f64,
    pub accuracy: f64,
}

/// Support-weighted mean of per-class F1.
pub fn waf(preds: &[Polarity], labels: &[Polarity]) -> Result<WafReport> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("no samples".into()));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for class in [Polarity::Positive, Polarity::Negative] {
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == class && **l == class).count() as f64;
        let pp = preds.iter().filter(|p| **p == class).count() as f64;
        let support = labels.iter().filter(|l| **l == class).count() as f64;
        let precision = if pp == 0.0 { 0.0 } else { tp / pp };
        let recall = if support == 0.0 { 0.0 } else { tp / support };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        total += f1 * support / n;
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64;
    Ok(WafReport {
        waf: total,
        accuracy: correct / n,
    })
}

/// `(h_new − h_base) / h_base × 100`.
pub fn change_ratio(h_base: f64, h_new: f64) -> Result<f64> {
    if h_base == 0.0 {
        return Err(Error::UndefinedRatio { h_new });
    }
    Ok((h_new - h_base) / h_base * 100.0)
}

/// Scored decodes for one labelled sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<f64>,
    pub mean_hit_rate: f64,
    pub fs: Vec<FsScore>,
    pub mean_fs: f64,
    pub change_ratio: Option<f64>,
    pub meta: BTreeMap<String, String>,
}

/// Scores decodes against labels. `baseline` enables the change ratio.
pub fn evaluate(
    decodes: &[Vec<usize>],
    labels: &[String],
    lexicon: &Lexicon,
    wheels: &[EmotionWheel],
    baseline: Option<f64>,
    meta: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if decodes.len() != labels.len() {
        return Err(Error::Input("one label per decode required".into()));
    }
    let mut per_sample = Vec::with_capacity(decodes.len());
    let mut fs = Vec::with_capacity(decodes.len());
    for (d, y) in decodes.iter().zip(labels) {
        let ys = extract_keywords(d, lexicon);
        per_sample.push(hit_rate(&ys, y, wheels)?);
        let truth: BTreeSet<String> = [y.clone()].into_iter().collect();
        fs.push(fs_score(&ys, &truth, wheels)?);
    }
    let n = per_sample.len().max(1) as f64;
    let mean_hit_rate = per_sample.iter().sum::<f64>() / n;
    let mean_fs = fs.iter().map(|f| f.fs).sum::<f64>() / n;
    let change_ratio = match baseline {
        Some(h) => Some(change_ratio(h, mean_hit_rate)?),
        None => None,
    };
    Ok(EvalReport {
        per_sample,
        mean_hit_rate,
        fs,
        mean_fs,
        change_ratio,
        meta,
    })
}

/// Mean hit rate of decodes for one label.
pub fn mean_hit_rate(decodes: &[Vec<usize>], label: &str, lexicon: &Lexicon, wheels: &[EmotionWheel]) -> Result<f64> {
    if decodes.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for d in decodes {
        s += hit_rate(&extract_keywords(d, lexicon), label, wheels)?;
    }
    Ok(s / decodes.len() as f64)
}

/// Greedy-decodes and scores continuations against a label.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluator {
    pub lexicon: Lexicon,
    pub wheels: Vec<EmotionWheel>,
    pub max_new: usize,
}

impl Evaluator {
    pub fn new(lexicon: Lexicon, wheels: Vec<EmotionWheel>, max_new: usize) -> Self {
        Self {
            lexicon,
            wheels,
            max_new,
        }
    }

    pub fn default_pack(max_new: usize) -> Self {
        Self::new(default_lexicon(), default_wheels(), max_new)
    }

    pub fn score(&self, tokens: &[usize], label: &str) -> Result<f64> {
        hit_rate(&extract_keywords(tokens, &self.lexicon), label, &self.wheels)
    }

    pub fn decode_with(&self, bundle: &ModelBundle, input: &InputSequence, hook: &mut dyn Hook) -> Result<Vec<usize>> {
        Ok(greedy_decode_with(bundle, input, self.max_new, hook)?.tokens)
    }

    /// `H(X, y)` on the greedy continuation under `hook`.
    pub fn hit_rate_with(
        &self,
        bundle: &ModelBundle,
        input: &InputSequence,
        label: &str,
        hook: &mut dyn Hook,
    ) -> Result<f64> {
        let toks = self.decode_with(bundle, input, hook)?;
        self.score(&toks, label)
    }

    pub fn hit_rate(&self, bundle: &ModelBundle, input: &InputSequence, label: &str) -> Result<f64> {
        self.hit_rate_with(bundle, input, label, &mut NoHook)
    }

    /// True when the continuation holds any lexicon keyword at all.
    pub fn emits_keyword(&self, tokens: &[usize]) -> bool {
        tokens.iter().any(|t| self.lexicon.tokens.contains_key(t))
    }
}
