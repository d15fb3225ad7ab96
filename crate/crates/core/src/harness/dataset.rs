// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic contrastive pairs: JSON-lines records plus an `EMV1` blob of
//! visual matrices (same framing as the other binary artifacts).

use std::io::{BufRead, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plant::{PlantSpec, PROMPT_END, TEXT_VOCAB_START};
use crate::canon;
use crate::error::{Error, Result};
use crate::model::io::{frame, unframe};
use crate::model::{InputSequence, ModelConfig};
use crate::numerics::{kernels, SeededRng, Tensor2};
use crate::steering::ContrastivePair;

pub const VISUAL_MAGIC: &[u8; 4] = b"EMV1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Extraction,
    Analysis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub emotion: String,
    pub split: Split,
    pub strength: f64,
    pub text_token_ids: Vec<usize>,
    /// Index into the visual blob.
    pub visual_pos: usize,
    pub visual_neg: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub visuals: Vec<Tensor2>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub pairs_per_emotion: usize,
    /// The first this many pairs of each emotion form the extraction split.
    pub extraction_per_emotion: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            pairs_per_emotion: 500,
            extraction_per_emotion: 250,
        }
    }
}

const TEXT_LEN_MIN: usize = 5;
const TEXT_LEN_MAX: usize = 8;

/// Pairs for every plant emotion. Neutral rows are Gaussian with every
/// plant direction projected out, rescaled to norm `visual_noise · √d`; the positive
/// adds `strength · f_k` at the designated position; text ends with the
/// prompt terminator.
pub fn gen_dataset(spec: &DatasetSpec, plant: &PlantSpec, config: &ModelConfig) -> Result<Dataset> {
    plant.validate(config)?;
    let mut records = Vec::new();
    let mut visuals = Vec::new();
    let text_vocab = config.vocab_size - TEXT_VOCAB_START;
    let mut root = SeededRng::new(spec.seed);
    let dirs = plant.all_directions();
    let row_norm = plant.gains.visual_noise * (config.d_model as f64).sqrt();
    for (k, emotion) in plant.emotions.iter().enumerate() {
        let feature = plant.feature(k);
        let mut er = root.fork(k as u64 + 1);
        for i in 0..spec.pairs_per_emotion {
            let mut r = er.fork(i as u64);
            let mut neg = r.gaussian_matrix(config.n_visual, config.d_model, plant.gains.visual_noise);
            for row in 0..config.n_visual {
                let x = neg.row_mut(row);
                for dir in &dirs {
                    let c = kernels::dot(x, dir);
                    for (a, b) in x.iter_mut().zip(dir.iter()) {
                        *a -= c * b;
                    }
                }
                let n = kernels::norm(x);
                if n > 0.0 {
                    let s = row_norm / n;
                    x.iter_mut().for_each(|a| *a *= s);
                }
            }
            // Quantised to the canonical float text so the record round-trips.
            let strength: f64 = format!("{:.9e}", plant.pair_strength(i, r.uniform()))
                .parse()
                .map_err(|_| Error::Internal("strength format".into()))?;
            let mut pos = neg.clone();
            for (x, fv) in pos.row_mut(plant.visual_pos).iter_mut().zip(&feature) {
                *x += strength * fv;
            }
            let n_text = TEXT_LEN_MIN + r.below(TEXT_LEN_MAX - TEXT_LEN_MIN + 1);
            let mut text: Vec<usize> = (0..n_text).map(|_| TEXT_VOCAB_START + r.below(text_vocab)).collect();
            text.push(PROMPT_END);
            records.push(DatasetRecord {
                id: (k * spec.pairs_per_emotion + i) as u64,
                emotion: emotion.clone(),
                split: if i < spec.extraction_per_emotion { Split::Extraction } else { Split::Analysis },
                strength,
                text_token_ids: text,
                visual_pos: visuals.len(),
                visual_neg: visuals.len() + 1,
            });
            visuals.push(pos);
            visuals.push(neg);
        }
    }
    let d = Dataset { records, visuals };
    d.validate(config)?;
    Ok(d)
}

impl Dataset {
    /// Checks references, shapes, distinct ids and that a pair differs in
    /// at most one visual row.
    pub fn validate(&self, c: &ModelConfig) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id) {
                return Err(Error::Format(format!("duplicate record id {}", r.id)));
            }
            let get = |i: usize| {
                self.visuals
                    .get(i)
                    .ok_or_else(|| Error::Format(format!("record {} references missing matrix {i}", r.id)))
            };
            let (p, n) = (get(r.visual_pos)?, get(r.visual_neg)?);
            if p.rows() != n.rows() || p.cols() != n.cols() {
                return Err(Error::Format(format!("record {}: visual shapes differ", r.id)));
            }
            if p.rows() != c.n_visual || p.cols() != c.d_model {
                return Err(Error::Format(format!("record {}: visual shape does not match the model", r.id)));
            }
            if !p.is_finite() || !n.is_finite() {
                return Err(Error::Format(format!("record {}: non-finite visual values", r.id)));
            }
            let differing = (0..p.rows()).filter(|&i| p.row(i) != n.row(i)).count();
            if differing > 1 {
                return Err(Error::Format(format!("record {}: pair differs in {differing} visual rows", r.id)));
            }
            if r.text_token_ids.is_empty() || r.text_token_ids.iter().any(|&t| t >= c.vocab_size) {
                return Err(Error::Format(format!("record {}: bad text tokens", r.id)));
            }
            if c.n_visual + r.text_token_ids.len() > c.max_seq {
                return Err(Error::Format(format!("record {}: sequence exceeds max_seq", r.id)));
            }
        }
        Ok(())
    }

    pub fn pair(&self, r: &DatasetRecord) -> ContrastivePair {
        ContrastivePair {
            id: r.id,
            emotion: r.emotion.clone(),
            x_plus: InputSequence::new(self.visuals[r.visual_pos].clone(), r.text_token_ids.clone()),
            x_minus: InputSequence::new(self.visuals[r.visual_neg].clone(), r.text_token_ids.clone()),
        }
    }

    /// Pairs in record order, optionally restricted to a split.
    pub fn pairs(&self, split: Option<Split>) -> Vec<ContrastivePair> {
        self.records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| self.pair(r))
            .collect()
    }

    pub fn pairs_for(&self, emotion: &str, split: Split) -> Vec<ContrastivePair> {
        self.records
            .iter()
            .filter(|r| r.emotion == emotion && r.split == split)
            .map(|r| self.pair(r))
            .collect()
    }

    /// Writes `<stem>.jsonl` and `<stem>.emv`.
    pub fn save(&self, jsonl: &Path, blob: &Path) -> Result<()> {
        for p in [jsonl, blob] {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(jsonl)?);
        for r in &self.records {
            writeln!(f, "{}", canon::to_string(r)?)?;
        }
        f.flush()?;
        let (rows, cols) = self.visuals.first().map_or((0, 0), |m| (m.rows(), m.cols()));
        let header = canon::to_string(&serde_json::json!({
            "count": self.visuals.len(),
            "rows": rows,
            "cols": cols,
        }))?;
        let blocks: Vec<&[f64]> = self.visuals.iter().map(|m| m.data()).collect();
        std::fs::write(blob, frame(VISUAL_MAGIC, &header, &blocks))?;
        Ok(())
    }

    pub fn load(jsonl: &Path, blob: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(jsonl)?);
        let mut records = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("dataset line {}: {e}", i + 1)))?,
            );
        }
        let bytes = std::fs::read(blob)?;
        let (text, data) = unframe(VISUAL_MAGIC, &bytes)?;
        #[derive(Deserialize)]
        struct Header {
            count: usize,
            rows: usize,
            cols: usize,
        }
        let h: Header = serde_json::from_str(text).map_err(|e| Error::Format(format!("visual blob header: {e}")))?;
        let per = h.rows * h.cols;
        if per * h.count != data.len() {
            return Err(Error::Format("visual blob size does not match its header".into()));
        }
        let visuals = if per == 0 {
            Vec::new()
        } else {
            data.chunks_exact(per)
                .map(|c| Tensor2::from_vec(h.rows, h.cols, c.to_vec()))
                .collect::<Result<_>>()?
        };
        Ok(Self { records, visuals })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::default_lexicon;
    use crate::trace::{run_with_capture, CaptureFilter, Family};

    fn small() -> (ModelConfig, PlantSpec, DatasetSpec) {
        let c = ModelConfig::default();
        let p = PlantSpec::new(&c, &default_lexicon(), 4).unwrap();
        let s = DatasetSpec {
            seed: 9,
            pairs_per_emotion: 12,
            extraction_per_emotion: 6,
        };
        (c, p, s)
    }

    #[test]
    fn same_seed_same_bytes_and_round_trip() {
        let (c, p, s) = small();
        let dir = tempfile::tempdir().unwrap();
        let write = |tag: &str| {
            let d = gen_dataset(&s, &p, &c).unwrap();
            let (j, b) = (dir.path().join(format!("{tag}.jsonl")), dir.path().join(format!("{tag}.emv")));
            d.save(&j, &b).unwrap();
            (d, std::fs::read(&j).unwrap(), std::fs::read(&b).unwrap(), j, b)
        };
        let (d1, j1, b1, jp, bp) = write("a");
        let (_, j2, b2, _, _) = write("b");
        assert_eq!(j1, j2);
        assert_eq!(b1, b2);
        assert_eq!(Dataset::load(&jp, &bp).unwrap(), d1);
    }

    #[test]
    fn positive_adds_strength_times_feature_at_one_row() {
        let (c, p, s) = small();
        let d = gen_dataset(&s, &p, &c).unwrap();
        for r in &d.records {
            let k = p.emotion_index(&r.emotion).unwrap();
            let f = p.feature(k);
            let (pos, neg) = (&d.visuals[r.visual_pos], &d.visuals[r.visual_neg]);
            for row in 0..c.n_visual {
                for j in 0..c.d_model {
                    let diff = pos.get(row, j) - neg.get(row, j);
                    let want = if row == p.visual_pos { r.strength * f[j] } else { 0.0 };
                    assert!((diff - want).abs() < 1e-12, "record {} row {row}", r.id);
                }
            }
        }
        assert_eq!(d.records.iter().filter(|r| r.split == Split::Extraction).count(), 6 * p.emotions.len());
    }

    #[test]
    fn zero_strength_gives_identical_pairs_and_zero_contrast() {
        let (c, mut p, s) = small();
        p.strength = 0.0;
        p.weak_strength = 0.0;
        let d = gen_dataset(&s, &p, &c).unwrap();
        let b = super::super::plant::wire_plant(&c, &p, 4).unwrap();
        for pair in d.pairs(None).iter().take(4) {
            assert_eq!(pair.x_plus, pair.x_minus);
            let f = CaptureFilter::only(&[Family::Residual]);
            let (_, tp) = run_with_capture(&b, &pair.x_plus, &f).unwrap();
            let (_, tm) = run_with_capture(&b, &pair.x_minus, &f).unwrap();
            let last = pair.x_plus.last_pos();
            for l in 0..c.n_layers {
                assert_eq!(tp.residual(l, last), tm.residual(l, last));
            }
        }
    }

    #[test]
    fn validator_rejects_broken_records() {
        let (c, p, s) = small();
        let good = gen_dataset(&s, &p, &c).unwrap();

        let mut two_rows = good.clone();
        let i = two_rows.records[0].visual_pos;
        let other = (p.visual_pos + 1) % c.n_visual;
        two_rows.visuals[i].set(other, 0, 5.0);
        assert!(matches!(two_rows.validate(&c), Err(Error::Format(_))));

        let mut dangling = good.clone();
        dangling.records[0].visual_neg = 10_000;
        assert!(dangling.validate(&c).is_err());

        let mut dup = good.clone();
        dup.records[1].id = dup.records[0].id;
        assert!(dup.validate(&c).is_err());

        let mut bad_tok = good;
        bad_tok.records[0].text_token_ids.push(c.vocab_size);
        assert!(bad_tok.validate(&c).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let (c, p, s) = small();
        let d = gen_dataset(&s, &p, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (j, b) = (dir.path().join("d.jsonl"), dir.path().join("d.emv"));
        d.save(&j, &b).unwrap();
        let bytes = std::fs::read(&b).unwrap();
        std::fs::write(&b, &bytes[..bytes.len() - 9]).unwrap();
        assert!(Dataset::load(&j, &b).is_err());
    }
}
