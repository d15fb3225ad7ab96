// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end run: planted model, dataset, steering, layer scan, head and
//! neuron localisation, knockout/recovery, phase patching, VEENA and
//! evaluation, all written under one run directory.
//!
//! Layout:
//!
//! ```text
//! <out>/config.json
//! <out>/model/{weights.emc, plant.json, gates.json}
//! <out>/data/{pairs.jsonl, visuals.emv}
//! <out>/steering/<emotion>.emm, <emotion>_directions.emm, <emotion>_scan.json, <emotion>_lens.json
//! <out>/heads/<emotion>.json, <emotion>_knockout.json, <emotion>_saliency.json, intersection.json
//! <out>/neurons/<emotion>.json
//! <out>/veena/spec.json, <emotion>.json, <emotion>_provenance.jsonl
//! <out>/veena_plant/...   (same, targeting the planted components)
//! <out>/eval/phase_patch.json, <emotion>_<condition>.json, evaluation.json, summary.json
//! ```
//!
//! A stage whose output already exists in the run directory is loaded
//! rather than recomputed, so single-stage CLI invocations chain.

use std::sync::OnceLock;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetSpec, Split};
use super::plant::{build_planted_model, GateReport, PlantSpec};
use crate::canon;
use crate::circuit::{
    head_intersection, knockout, logit_lens_layers, logit_lens_visual, phase_patch_grid, rank_heads, recovery_donor,
    saliency, trace_neurons, AttributionMode, HeadScore, IntersectionCounts, KnockoutMode, LogitLensReport,
    MetricTarget, NeuronTrace, PhaseGrid, SaliencyMap,
};
use crate::error::{Error, Result};
use crate::eval::{
    default_lexicon, default_wheels, evaluate, waf, EmotionWheel, EvalReport, Evaluator, Lexicon,
    Polarity, WafReport,
};
use crate::model::{greedy_decode_with, load_weights, save_weights, ModelBundle, ModelConfig, NoHook, PhaseName, Role};
use crate::par;
use crate::steering::{aggregate_steering, export_directions, layer_scan, ContrastivePair, LayerScan, SteeringSet};
use crate::veena::{aggregate_critical_sets, run_veena, write_provenance, InterventionSpec};

pub const SCHEMA_NOTE_ANALYSIS: &str = "analysis split is not filtered by tau";
const DATA_SEED_TAG: u64 = 0x6461_7461;

/// Every knob of a run. Missing fields take their defaults when loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Master seed: model background, plant directions, and (tagged) data.
    pub seed: u64,
    pub tau: f64,
    pub alpha: f64,
    /// Defaults to `aggregate_end`.
    pub l_emo: Option<i64>,
    pub beta: f64,
    pub gamma: f64,
    pub k_head: usize,
    pub k_neuron: usize,
    /// Layer whose attention output defines the intention metric; defaults
    /// to `aggregate_end + 1`.
    pub critical_layer: Option<usize>,
    pub max_new: usize,
    pub pairs_per_emotion: usize,
    pub extraction_per_emotion: usize,
    pub gate_pairs_per_emotion: usize,
    /// Analysis pairs per emotion used by each expensive stage.
    pub head_pairs: usize,
    pub neuron_pairs: usize,
    /// Top-ranked heads whose upstream neurons are traced.
    pub neuron_heads: usize,
    pub knockout_pairs: usize,
    pub phase_pairs: usize,
    pub saliency_pairs: usize,
    pub lens_top_k: usize,
    pub attribution: AttributionMode,
    pub positive_emotions: Vec<String>,
    pub lexicon_path: Option<PathBuf>,
    pub wheels_path: Option<PathBuf>,
    /// Existing dataset (JSON lines + visual blob) instead of generating one.
    pub dataset_path: Option<PathBuf>,
    pub visuals_path: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            tau: 0.5,
            alpha: 0.1,
            l_emo: None,
            beta: 2.0,
            gamma: 1.5,
            k_head: 10,
            k_neuron: 30,
            critical_layer: None,
            max_new: 8,
            pairs_per_emotion: 500,
            extraction_per_emotion: 250,
            gate_pairs_per_emotion: 20,
            head_pairs: 40,
            neuron_pairs: 20,
            neuron_heads: 2,
            knockout_pairs: 100,
            phase_pairs: 40,
            saliency_pairs: 1,
            lens_top_k: 5,
            attribution: AttributionMode::Exact,
            positive_emotions: vec!["happy".into()],
            lexicon_path: None,
            wheels_path: None,
            dataset_path: None,
            visuals_path: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Accepts a hand-written file or a run's own `config.json`.
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path).map_err(|e| match e {
            Error::Format(m) => Error::Config(m),
            e => e,
        })
    }

    pub fn l_emo(&self) -> i64 {
        self.l_emo.unwrap_or(self.model.aggregate_end as i64)
    }

    pub fn critical_layer(&self) -> usize {
        self.critical_layer.unwrap_or(self.model.aggregate_end + 1)
    }

    pub fn data_seed(&self) -> u64 {
        self.seed ^ DATA_SEED_TAG
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.critical_layer() >= self.model.n_layers {
            return bad("critical_layer must be below n_layers");
        }
        if self.extraction_per_emotion == 0 || self.extraction_per_emotion >= self.pairs_per_emotion {
            return bad("need 0 < extraction_per_emotion < pairs_per_emotion");
        }
        if self.max_new == 0 {
            return bad("max_new must be at least 1");
        }
        if self.beta < 1.0 || self.gamma < 1.0 {
            return bad("beta and gamma must be at least 1");
        }
        if !(self.tau.is_finite() && self.alpha.is_finite()) {
            return bad("tau and alpha must be finite");
        }
        Ok(())
    }
}

/// Per-emotion head rankings for both metric targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    pub emotion: String,
    pub critical: Vec<HeadScore>,
    pub final_layer: Vec<HeadScore>,
}

impl HeadRanking {
    /// Scored heads toward the critical layer, best first.
    pub fn top(&self, k: usize) -> Vec<(usize, usize)> {
        self.critical.iter().filter(|h| !h.skipped()).take(k).map(|h| (h.layer, h.head)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnockoutReport {
    pub emotion: String,
    pub heads: Vec<(usize, usize)>,
    pub n_pairs: usize,
    /// Mean hit rate on X⁺ and on X⁻ (neutral baseline).
    pub emotional: f64,
    pub neutral: f64,
    /// X⁺ with the heads zeroed.
    pub knocked_out: f64,
    /// X⁻ with the heads' outputs taken from X⁺.
    pub recovered: f64,
    pub recovery_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VeenaEmotion {
    pub emotion: String,
    pub baseline: f64,
    pub veena: f64,
    pub decodes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VeenaReport {
    pub spec: InterventionSpec,
    pub per_emotion: Vec<VeenaEmotion>,
    pub baseline: f64,
    pub veena: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionSummary {
    pub emotion: String,
    pub n_valid: usize,
    pub scan_peak: usize,
    pub scan_peak_change: f64,
    pub top_head: Option<(usize, usize)>,
    pub top_head_final: Option<(usize, usize)>,
    /// Top neurons upstream of the top head, by mean `|G|`.
    pub top_neurons: Vec<(usize, usize)>,
    pub baseline: f64,
    pub neutral: f64,
    pub knocked_out: f64,
    pub recovered: f64,
    pub veena: f64,
    pub veena_plant: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantLocation {
    pub trigger: (usize, usize),
    pub copy_head: (usize, usize),
    pub copy_layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub emotions: Vec<EmotionSummary>,
    pub plant: PlantLocation,
    pub gates: GateReport,
    pub evaluation: Evaluation,
    pub phase_argmax: Vec<(PhaseName, Option<Role>)>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub hit_rate: f64,
    pub fs: f64,
    pub waf: WafReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub conditions: Vec<Condition>,
    pub veena_gain: f64,
    pub veena_plant_gain: f64,
    pub note: String,
}

impl Evaluation {
    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// A run directory with its model, dataset and lazily computed stages.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub evaluator: Evaluator,
    pub bundle: ModelBundle,
    pub plant: PlantSpec,
    pub gates: GateReport,
    pub data: Dataset,
    emotions: Vec<String>,
    steering: OnceLock<Vec<SteeringSet>>,
    heads: OnceLock<Vec<HeadRanking>>,
    neurons: OnceLock<Vec<Vec<NeuronTrace>>>,
    plain: OnceLock<Vec<(Vec<Vec<usize>>, Vec<Vec<usize>>)>>,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    canon::write_report(path, v)
}

/// Inverse of [`canon::write_report`]: drops `schema_version` and unwraps
/// a non-object payload from `data`.
fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let fail = |e: serde_json::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(fail)?;
    if let Some(m) = v.as_object_mut() {
        m.remove("schema_version");
        if m.len() == 1 && m.contains_key("data") {
            v = m.remove("data").unwrap_or_default();
        }
    }
    serde_json::from_value(v).map_err(fail)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl Run {
    /// Loads the model and dataset from the run directory (or the configured
    /// paths), building and writing whatever is missing.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.out_dir.clone();
        std::fs::create_dir_all(&dir)?;
        write_json(&dir.join("config.json"), &config)?;
        let lexicon = match &config.lexicon_path {
            Some(p) => Lexicon::load(p)?,
            None => default_lexicon(),
        };
        let wheels: Vec<EmotionWheel> = match &config.wheels_path {
            Some(p) => read_json(p)?,
            None => default_wheels(),
        };
        lexicon.check_against(&wheels)?;
        let evaluator = Evaluator::new(lexicon.clone(), wheels, config.max_new);

        let mdir = dir.join("model");
        let (wpath, ppath, gpath) = (mdir.join("weights.emc"), mdir.join("plant.json"), mdir.join("gates.json"));
        let (bundle, plant, gates) = if wpath.exists() && ppath.exists() && gpath.exists() {
            let b = load_weights(&wpath)?;
            if b.config != config.model {
                return Err(Error::Config("run directory holds a model with a different config".into()));
            }
            (b, read_json(&ppath)?, read_json(&gpath)?)
        } else {
            let p0 = PlantSpec::new(&config.model, &lexicon, config.seed)?;
            let (b, p, g) = build_planted_model(
                &config.model,
                &p0,
                &lexicon,
                config.seed,
                config.gate_pairs_per_emotion,
                config.max_new,
            )?;
            save_weights(&b, &wpath)?;
            write_json(&ppath, &p)?;
            write_json(&gpath, &g)?;
            (b, p, g)
        };

        let data = match (&config.dataset_path, &config.visuals_path) {
            (Some(j), Some(v)) => Dataset::load(j, v)?,
            (None, None) => {
                let (j, v) = (dir.join("data/pairs.jsonl"), dir.join("data/visuals.emv"));
                if j.exists() && v.exists() {
                    Dataset::load(&j, &v)?
                } else {
                    let spec = DatasetSpec {
                        seed: config.data_seed(),
                        pairs_per_emotion: config.pairs_per_emotion,
                        extraction_per_emotion: config.extraction_per_emotion,
                    };
                    let d = super::dataset::gen_dataset(&spec, &plant, &config.model)?;
                    d.save(&j, &v)?;
                    d
                }
            }
            _ => return Err(Error::Config("dataset_path and visuals_path go together".into())),
        };
        data.validate(&config.model)?;
        let emotions: Vec<String> = plant
            .emotions
            .iter()
            .filter(|e| data.records.iter().any(|r| &r.emotion == *e))
            .cloned()
            .collect();
        if emotions.is_empty() {
            return Err(Error::Input("dataset holds no plant emotion".into()));
        }
        Ok(Self {
            config,
            dir,
            evaluator,
            bundle,
            plant,
            gates,
            data,
            emotions,
            steering: OnceLock::new(),
            heads: OnceLock::new(),
            neurons: OnceLock::new(),
            plain: OnceLock::new(),
        })
    }

    pub fn emotions(&self) -> &[String] {
        &self.emotions
    }

    fn path(&self, sub: &str, file: &str) -> PathBuf {
        self.dir.join(sub).join(file)
    }

    fn analysis(&self, emotion: &str, n: Option<usize>) -> Vec<ContrastivePair> {
        let mut v = self.data.pairs_for(emotion, Split::Analysis);
        if let Some(n) = n {
            v.truncate(n);
        }
        v
    }

    /// `S_l` per emotion from the extraction split.
    pub fn steering(&self) -> Result<&[SteeringSet]> {
        if let Some(s) = self.steering.get() {
            return Ok(s);
        }
        let cl = self.config.critical_layer();
        let mut out = Vec::new();
        for em in &self.emotions {
            let path = self.path("steering", &format!("{em}.emm"));
            let s = if path.exists() {
                SteeringSet::load(&path)?
            } else {
                let ext = self.data.pairs_for(em, Split::Extraction);
                let (s, dirs) = aggregate_steering(&self.bundle, &ext, em, self.config.tau, &self.evaluator)?;
                s.save(&path)?;
                export_directions(&dirs, cl, &self.path("steering", &format!("{em}_directions.emm")))?;
                s
            };
            out.push(s);
        }
        Ok(self.steering.get_or_init(|| out))
    }

    /// Greedy decodes of analysis X⁺ and X⁻, per emotion.
    fn plain(&self) -> Result<&[(Vec<Vec<usize>>, Vec<Vec<usize>>)]> {
        if let Some(p) = self.plain.get() {
            return Ok(p);
        }
        let mut out = Vec::new();
        for em in &self.emotions {
            let pairs = self.analysis(em, None);
            let dec = |x: &crate::model::InputSequence| -> Result<Vec<usize>> {
                Ok(greedy_decode_with(&self.bundle, x, self.config.max_new, &mut NoHook)?.tokens)
            };
            let plus = par::try_map(&pairs, |p| dec(&p.x_plus))?;
            let minus = par::try_map(&pairs, |p| dec(&p.x_minus))?;
            out.push((plus, minus));
        }
        Ok(self.plain.get_or_init(|| out))
    }

    pub fn scan_layers(&self) -> Result<Vec<LayerScan>> {
        let mut out = Vec::new();
        for s in self.steering()? {
            let probes: Vec<_> = self.analysis(&s.emotion, None).into_iter().map(|p| p.x_plus).collect();
            let scan = layer_scan(&self.bundle, s, &probes, self.config.alpha, &self.evaluator)?;
            write_json(&self.path("steering", &format!("{}_scan.json", s.emotion)), &scan)?;
            out.push(scan);
        }
        Ok(out)
    }

    /// Lens of every `S_l`, plus the visual prefix of the first analysis
    /// X⁺ at the critical layer.
    pub fn logit_lens(&self) -> Result<Vec<(LogitLensReport, LogitLensReport)>> {
        let cl = self.config.critical_layer();
        let k = self.config.lens_top_k;
        let mut out = Vec::new();
        for s in self.steering()? {
            let toks = self.evaluator.lexicon.group_tokens(&s.emotion);
            let layers = logit_lens_layers(&self.bundle, &s.vectors, k, Some(&toks))?;
            let probe = self
                .analysis(&s.emotion, Some(1))
                .pop()
                .ok_or_else(|| Error::Input(format!("no analysis pairs for {}", s.emotion)))?;
            let visual = logit_lens_visual(&self.bundle, &probe.x_plus, cl, k, &toks)?;
            #[derive(Serialize)]
            struct Lens<'a> {
                emotion: &'a str,
                steering: &'a LogitLensReport,
                visual_layer: usize,
                visual: &'a LogitLensReport,
            }
            write_json(
                &self.path("steering", &format!("{}_lens.json", s.emotion)),
                &Lens {
                    emotion: &s.emotion,
                    steering: &layers,
                    visual_layer: cl,
                    visual: &visual,
                },
            )?;
            out.push((layers, visual));
        }
        Ok(out)
    }

    pub fn locate_heads(&self) -> Result<&[HeadRanking]> {
        if let Some(h) = self.heads.get() {
            return Ok(h);
        }
        let cl = self.config.critical_layer();
        let mut out = Vec::new();
        for s in self.steering()? {
            let path = self.path("heads", &format!("{}.json", s.emotion));
            let r = if path.exists() {
                read_json(&path)?
            } else {
                let pairs = self.analysis(&s.emotion, Some(self.config.head_pairs));
                let fl = MetricTarget::FinalLayer.layer(&self.bundle, cl);
                let r = HeadRanking {
                    emotion: s.emotion.clone(),
                    critical: rank_heads(&self.bundle, &pairs, cl, s.layer(cl), MetricTarget::CriticalLayer)?,
                    final_layer: rank_heads(&self.bundle, &pairs, cl, s.layer(fl), MetricTarget::FinalLayer)?,
                };
                write_json(&path, &r)?;
                r
            };
            out.push(r);
        }
        if out.len() >= 2 {
            let tops: Vec<(String, Vec<(usize, usize)>)> =
                out.iter().map(|r| (r.emotion.clone(), r.top(self.config.k_head))).collect();
            let ix: IntersectionCounts = head_intersection(&tops, self.config.k_head)?;
            write_json(&self.path("heads", "intersection.json"), &ix)?;
        }
        Ok(self.heads.get_or_init(|| out))
    }

    pub fn trace_neurons(&self) -> Result<&[Vec<NeuronTrace>]> {
        if let Some(n) = self.neurons.get() {
            return Ok(n);
        }
        let cl = self.config.critical_layer();
        let heads = self.locate_heads()?;
        let mut out = Vec::new();
        for (s, hr) in self.steering()?.iter().zip(heads) {
            let path = self.path("neurons", &format!("{}.json", s.emotion));
            let t: Vec<NeuronTrace> = if path.exists() {
                read_json(&path)?
            } else {
                let top: Vec<(usize, usize)> =
                    hr.top(self.config.neuron_heads).into_iter().filter(|&(l, _)| l > 0).collect();
                let pairs = self.analysis(&s.emotion, Some(self.config.neuron_pairs));
                let t = if top.is_empty() {
                    Vec::new()
                } else {
                    trace_neurons(
                        &self.bundle,
                        &pairs,
                        cl,
                        s.layer(cl),
                        &top,
                        self.config.k_neuron,
                        self.config.attribution,
                    )?
                };
                write_json(&path, &t)?;
                t
            };
            out.push(t);
        }
        Ok(self.neurons.get_or_init(|| out))
    }

    pub fn saliency(&self) -> Result<Vec<Vec<SaliencyMap>>> {
        let cl = self.config.critical_layer();
        let mut out = Vec::new();
        for s in self.steering()? {
            let mut maps = Vec::new();
            for p in self.analysis(&s.emotion, None) {
                if maps.len() >= self.config.saliency_pairs {
                    break;
                }
                match saliency(&self.bundle, &p, cl, s.layer(cl)) {
                    Ok(m) => maps.push(m),
                    Err(Error::DegenerateContrast(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            write_json(&self.path("heads", &format!("{}_saliency.json", s.emotion)), &maps)?;
            out.push(maps);
        }
        Ok(out)
    }

    /// Zeroes the top head on X⁺, and restores it on X⁻ from X⁺.
    pub fn knockout(&self) -> Result<Vec<KnockoutReport>> {
        let heads = self.locate_heads()?;
        let plain = self.plain()?;
        let mut out = Vec::new();
        for (i, hr) in heads.iter().enumerate() {
            let em = &hr.emotion;
            let top = hr.top(1);
            let pairs = self.analysis(em, Some(self.config.knockout_pairs));
            let n = pairs.len();
            let score = |t: &[usize]| self.evaluator.score(t, em);
            let emotional = mean(&plain[i].0[..n].iter().map(|t| score(t)).collect::<Result<Vec<_>>>()?);
            let neutral = mean(&plain[i].1[..n].iter().map(|t| score(t)).collect::<Result<Vec<_>>>()?);
            let (knocked_out, recovered) = if top.is_empty() {
                (emotional, neutral)
            } else {
                let ko = par::try_map(&pairs, |p| -> Result<f64> {
                    score(&knockout(&self.bundle, &p.x_plus, &top, KnockoutMode::Zero, self.config.max_new)?)
                })?;
                let rec = par::try_map(&pairs, |p| -> Result<f64> {
                    let donor = recovery_donor(&self.bundle, &p.x_plus, self.config.max_new)?;
                    score(&knockout(&self.bundle, &p.x_minus, &top, KnockoutMode::Recover(&donor), self.config.max_new)?)
                })?;
                (mean(&ko), mean(&rec))
            };
            let r = KnockoutReport {
                emotion: em.clone(),
                heads: top,
                n_pairs: n,
                emotional,
                neutral,
                knocked_out,
                recovered,
                recovery_ratio: (emotional > 0.0).then(|| recovered / emotional),
            };
            write_json(&self.path("heads", &format!("{em}_knockout.json")), &r)?;
            out.push(r);
        }
        Ok(out)
    }

    pub fn phase_patch(&self) -> Result<PhaseGrid> {
        let pairs: Vec<ContrastivePair> = self
            .emotions
            .iter()
            .flat_map(|em| self.analysis(em, Some(self.config.phase_pairs)))
            .collect();
        let grid = phase_patch_grid(&self.bundle, &pairs, &self.evaluator)?;
        #[derive(Serialize)]
        struct Report<'a> {
            grid: &'a PhaseGrid,
            argmax: Vec<(PhaseName, Option<Role>)>,
            n_pairs: usize,
        }
        write_json(
            &self.dir.join("eval/phase_patch.json"),
            &Report {
                grid: &grid,
                argmax: PhaseName::ALL.iter().map(|&p| (p, grid.argmax_role(p))).collect(),
                n_pairs: pairs.len(),
            },
        )?;
        Ok(grid)
    }

    /// Intervention targeting the union of discovered heads and neurons.
    pub fn intervention(&self) -> Result<InterventionSpec> {
        let heads: Vec<Vec<(usize, usize)>> = self
            .locate_heads()?
            .iter()
            .map(|r| r.top(self.config.k_head))
            .collect();
        let neurons: Vec<Vec<(usize, usize)>> = self
            .trace_neurons()?
            .iter()
            .map(|traces| {
                let mut all: Vec<(f64, (usize, usize))> = traces
                    .iter()
                    .flat_map(|t| t.neurons.iter().map(|n| (n.g_abs, (n.layer, n.neuron))))
                    .collect();
                all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let mut seen = std::collections::BTreeSet::new();
                all.into_iter().filter(|(_, u)| seen.insert(*u)).map(|(_, u)| u).collect()
            })
            .collect();
        let (c_head, c_neuron) = aggregate_critical_sets(&heads, &neurons, self.config.k_head, self.config.k_neuron);
        Ok(InterventionSpec::new(
            c_head,
            c_neuron,
            self.config.beta,
            self.config.gamma,
            self.config.l_emo(),
        ))
    }

    /// The planted pathway itself: copy head, trigger and amplifier neurons.
    pub fn plant_intervention(&self) -> InterventionSpec {
        let neurons = std::iter::once(self.plant.trigger)
            .chain(self.plant.amp_neurons.iter().map(|&u| (self.plant.amp_layer, u)))
            .collect();
        InterventionSpec::new(
            vec![self.plant.copy_head],
            neurons,
            self.config.beta,
            self.config.gamma,
            self.config.l_emo(),
        )
    }

    /// VEENA with the discovered sets under `veena/`, and with the planted
    /// sets under `veena_plant/`.
    pub fn run_veena(&self) -> Result<(VeenaReport, VeenaReport)> {
        let found = self.veena_with("veena", self.intervention()?)?;
        let planted = self.veena_with("veena_plant", self.plant_intervention())?;
        Ok((found, planted))
    }

    fn veena_with(&self, sub: &str, spec: InterventionSpec) -> Result<VeenaReport> {
        spec.validate(&self.bundle.config)?;
        write_json(&self.path(sub, "spec.json"), &spec)?;
        let plain = self.plain()?;
        let mut per_emotion = Vec::new();
        let (mut all_base, mut all_v) = (Vec::new(), Vec::new());
        for (i, em) in self.emotions.iter().enumerate() {
            let pairs = self.analysis(em, None);
            let decodes = par::try_map(&pairs, |p| -> Result<Vec<usize>> {
                Ok(run_veena(&self.bundle, &p.x_plus, &spec, self.config.max_new)?.0.tokens)
            })?;
            if let Some(p) = pairs.first() {
                let (_, prov) = run_veena(&self.bundle, &p.x_plus, &spec, self.config.max_new)?;
                write_provenance(&self.path(sub, &format!("{em}_provenance.jsonl")), &prov)?;
            }
            let base = plain[i].0.iter().map(|t| self.evaluator.score(t, em)).collect::<Result<Vec<_>>>()?;
            let v = decodes.iter().map(|t| self.evaluator.score(t, em)).collect::<Result<Vec<_>>>()?;
            let e = VeenaEmotion {
                emotion: em.clone(),
                baseline: mean(&base),
                veena: mean(&v),
                decodes,
            };
            write_json(&self.path(sub, &format!("{em}.json")), &e)?;
            all_base.extend(base);
            all_v.extend(v);
            per_emotion.push(e);
        }
        let (baseline, veena) = (mean(&all_base), mean(&all_v));
        Ok(VeenaReport {
            spec,
            per_emotion,
            baseline,
            veena,
            gain: veena - baseline,
        })
    }

    fn polarity(&self, emotion: &str) -> Polarity {
        if self.config.positive_emotions.iter().any(|e| e == emotion) {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    /// Polarity of the first keyword's emotion; a decode with no keyword
    /// is counted as the opposite of its label.
    fn predicted_polarity(&self, tokens: &[usize], label: Polarity) -> Polarity {
        let lex = &self.evaluator.lexicon;
        let first = tokens.iter().find_map(|t| lex.tokens.get(t));
        match first.and_then(|kw| lex.groups.iter().find(|(_, g)| g.contains(kw)).map(|(e, _)| e)) {
            Some(e) => self.polarity(e),
            None => match label {
                Polarity::Positive => Polarity::Negative,
                Polarity::Negative => Polarity::Positive,
            },
        }
    }

    fn eval_set(&self, name: &str, decodes: &[Vec<Vec<usize>>]) -> Result<(f64, f64, WafReport)> {
        let (mut preds, mut labels, mut fs, mut h) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (em, ds) in self.emotions.iter().zip(decodes) {
            let ys = vec![em.clone(); ds.len()];
            let mut meta = BTreeMap::new();
            meta.insert("emotion".into(), em.clone());
            meta.insert("condition".into(), name.into());
            meta.insert("seed".into(), self.config.seed.to_string());
            meta.insert("split".into(), "analysis".into());
            meta.insert("note".into(), SCHEMA_NOTE_ANALYSIS.into());
            let rep: EvalReport = evaluate(ds, &ys, &self.evaluator.lexicon, &self.evaluator.wheels, None, meta)?;
            write_json(&self.path("eval", &format!("{em}_{name}.json")), &rep)?;
            let label = self.polarity(em);
            for d in ds {
                labels.push(label);
                preds.push(self.predicted_polarity(d, label));
            }
            fs.extend(rep.fs.iter().map(|f| f.fs));
            h.extend(rep.per_sample);
        }
        Ok((mean(&h), mean(&fs), waf(&preds, &labels)?))
    }

    /// Every stage in order, then `eval/summary.json`.
    pub fn full_pipeline(&self) -> Result<RunSummary> {
        let steering = self.steering()?;
        let scans = self.scan_layers()?;
        self.logit_lens()?;
        let heads = self.locate_heads()?;
        let neurons = self.trace_neurons()?;
        self.saliency()?;
        let kos = self.knockout()?;
        let grid = self.phase_patch()?;
        let (veena, planted) = self.run_veena()?;
        self.summarize(steering, &scans, heads, neurons, &kos, &grid, &veena, &planted)
    }

    #[allow(clippy::too_many_arguments)]
    fn summarize(
        &self,
        steering: &[SteeringSet],
        scans: &[LayerScan],
        heads: &[HeadRanking],
        neurons: &[Vec<NeuronTrace>],
        kos: &[KnockoutReport],
        grid: &PhaseGrid,
        veena: &VeenaReport,
        planted: &VeenaReport,
    ) -> Result<RunSummary> {
        let mut emotions = Vec::new();
        for i in 0..self.emotions.len() {
            let top_head = heads[i].top(1).first().copied();
            let top_neurons = neurons[i]
                .iter()
                .find(|t| Some(t.head) == top_head)
                .map(|t| t.neurons.iter().map(|n| (n.layer, n.neuron)).collect())
                .unwrap_or_default();
            emotions.push(EmotionSummary {
                emotion: self.emotions[i].clone(),
                n_valid: steering[i].valid_ids.len(),
                scan_peak: scans[i].peak(),
                scan_peak_change: scans[i].ranking[0].1,
                top_head,
                top_head_final: heads[i]
                    .final_layer
                    .iter()
                    .find(|h| !h.skipped())
                    .map(|h| (h.layer, h.head)),
                top_neurons,
                baseline: veena.per_emotion[i].baseline,
                neutral: kos[i].neutral,
                knocked_out: kos[i].knocked_out,
                recovered: kos[i].recovered,
                veena: veena.per_emotion[i].veena,
                veena_plant: planted.per_emotion[i].veena,
            });
        }
        let evaluation = self.evaluate_with(veena, planted)?;
        let s = RunSummary {
            emotions,
            plant: PlantLocation {
                trigger: self.plant.trigger,
                copy_head: self.plant.copy_head,
                copy_layer: self.plant.copy_head.0,
            },
            gates: self.gates.clone(),
            evaluation,
            phase_argmax: PhaseName::ALL.iter().map(|&p| (p, grid.argmax_role(p))).collect(),
            notes: vec![SCHEMA_NOTE_ANALYSIS.into()],
        };
        write_json(&self.dir.join("eval/summary.json"), &s)?;
        Ok(s)
    }

    /// Hit rate, FS and WAF of the plain and both VEENA decodes of the
    /// analysis split; writes `eval/evaluation.json`.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let (veena, planted) = self.run_veena()?;
        self.evaluate_with(&veena, &planted)
    }

    fn evaluate_with(&self, veena: &VeenaReport, planted: &VeenaReport) -> Result<Evaluation> {
        let base: Vec<Vec<Vec<usize>>> = self.plain()?.iter().map(|p| p.0.clone()).collect();
        let mut conditions = Vec::new();
        for (name, decodes) in [
            ("baseline", base),
            ("veena", veena.per_emotion.iter().map(|e| e.decodes.clone()).collect()),
            ("veena_plant", planted.per_emotion.iter().map(|e| e.decodes.clone()).collect()),
        ] {
            let (hit_rate, fs, waf) = self.eval_set(name, &decodes)?;
            conditions.push(Condition {
                name: name.into(),
                hit_rate,
                fs,
                waf,
            });
        }
        let e = Evaluation {
            conditions,
            veena_gain: veena.gain,
            veena_plant_gain: planted.gain,
            note: SCHEMA_NOTE_ANALYSIS.into(),
        };
        write_json(&self.dir.join("eval/evaluation.json"), &e)?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_round_trip() {
        let c = RunConfig::default();
        assert_eq!((c.tau, c.alpha, c.beta, c.gamma, c.k_head, c.k_neuron), (0.5, 0.1, 2.0, 1.5, 10, 30));
        assert_eq!(c.l_emo(), c.model.aggregate_end as i64);
        assert_eq!(c.critical_layer(), c.model.aggregate_end + 1);
        assert_eq!(c.extraction_per_emotion, 250);
        let text = canon::report_string(&c).unwrap();
        assert!(!text.contains("out_dir"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, &text).unwrap();
        let mut back = RunConfig::load(&p).unwrap();
        back.out_dir = c.out_dir.clone();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_config_fills_defaults_and_unknown_fields_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 7, "tau": 0.25}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!((c.seed, c.tau, c.alpha), (7, 0.25, 0.1));
        std::fs::write(&p, r#"{"taux": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
    }

    #[test]
    fn validate_rejects_bad_values() {
        let ok = RunConfig::default();
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.critical_layer = Some(c.model.n_layers);
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.extraction_per_emotion = c.pairs_per_emotion;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.beta = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn read_json_undoes_write_report() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        let v = vec![(1usize, 2usize), (3, 4)];
        write_json(&p, &v).unwrap();
        let back: Vec<(usize, usize)> = read_json(&p).unwrap();
        assert_eq!(back, v);
    }
}
