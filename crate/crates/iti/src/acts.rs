//! Capture and persist last-token head activations with truth labels.
//!
//! File layout: a textual header (L, H, D, N, version) and an id line,
//! then one label byte per record, then a contiguous little-endian f32
//! payload in record-major, layer-major, head-major order. Round-trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{format_input, FormatMode, LabeledPair, Question};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::provenance::atomic_write;
use crate::tokenizer::Tokenizer;

const MAGIC: &str = "itiacts";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ActRecord {
    /// Position of the source pair in the canonical flattened pair list.
    pub pair_index: usize,
    pub question_id: usize,
    pub label: bool,
    /// L x H x D, the head activations at the final input token.
    acts: Vec<f32>,
}

impl ActRecord {
    pub fn head(&self, n_heads: usize, head_dim: usize, layer: usize, head: usize) -> &[f32] {
        let start = (layer * n_heads + head) * head_dim;
        &self.acts[start..start + head_dim]
    }

    pub fn all(&self) -> &[f32] {
        &self.acts
    }

    pub fn all_mut(&mut self) -> &mut [f32] {
        &mut self.acts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub pair_index: usize,
    pub question_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub records: Vec<ActRecord>,
}

impl ActivationDataset {
    pub fn head_slice<'a>(&'a self, record: &'a ActRecord, layer: usize, head: usize) -> &'a [f32] {
        record.head(self.n_heads, self.head_dim, layer, head)
    }

    /// record index by canonical pair index.
    pub fn pair_index_map(&self) -> BTreeMap<usize, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.pair_index, i))
            .collect()
    }
}

/// Run the model over probe-formatted inputs and capture the last-token
/// activation of every head. Inputs that exceed `max_seq_len` (or tokenize
/// to nothing) are recorded as skipped, never silently dropped.
pub fn collect_activations(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    questions: &[Question],
    pairs: &[LabeledPair],
) -> Result<(ActivationDataset, Vec<SkipEntry>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("pair list"));
    }
    let by_id: BTreeMap<usize, &Question> = questions.iter().map(|q| (q.id, q)).collect();
    let cfg = &model.config;
    let (l, h, d) = (cfg.n_layers, cfg.n_heads, cfg.head_dim);

    let mut records = Vec::with_capacity(pairs.len());
    let mut skipped = Vec::new();
    for (pair_index, pair) in pairs.iter().enumerate() {
        let question = by_id.get(&pair.question_id).ok_or_else(|| {
            Error::InvalidArg(format!("pair references unknown question {}", pair.question_id))
        })?;
        let text = format_input(&question.question, Some(&pair.answer), FormatMode::Probe)?;
        let tokens = tokenizer.encode(&text);
        if tokens.is_empty() {
            skipped.push(SkipEntry {
                pair_index,
                question_id: pair.question_id,
                reason: "input tokenized to zero tokens".into(),
            });
            continue;
        }
        if tokens.len() > cfg.max_seq_len {
            skipped.push(SkipEntry {
                pair_index,
                question_id: pair.question_id,
                reason: format!(
                    "input length {} exceeds max_seq_len {}",
                    tokens.len(),
                    cfg.max_seq_len
                ),
            });
            continue;
        }
        let (_, trace) = model.forward_with_taps(&tokens)?;
        let last = tokens.len() - 1;
        let mut acts = Vec::with_capacity(l * h * d);
        for layer in 0..l {
            for head in 0..h {
                acts.extend_from_slice(trace.get(layer, head, last));
            }
        }
        records.push(ActRecord {
            pair_index,
            question_id: pair.question_id,
            label: pair.label,
            acts,
        });
    }

    Ok((
        ActivationDataset {
            n_layers: l,
            n_heads: h,
            head_dim: d,
            records,
        },
        skipped,
    ))
}

pub fn save_dataset(ds: &ActivationDataset, path: &Path) -> Result<()> {
    let mut bytes = format!(
        "{MAGIC} {VERSION} n_layers={} n_heads={} head_dim={} n_records={}\n",
        ds.n_layers,
        ds.n_heads,
        ds.head_dim,
        ds.records.len()
    )
    .into_bytes();
    let ids: Vec<String> = ds
        .records
        .iter()
        .map(|r| format!("{}:{}", r.pair_index, r.question_id))
        .collect();
    bytes.extend_from_slice(format!("ids={}\n", ids.join(",")).as_bytes());
    for r in &ds.records {
        bytes.push(u8::from(r.label));
    }
    for r in &ds.records {
        for x in &r.acts {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)
}

pub fn load_dataset(path: &Path) -> Result<ActivationDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<String> {
        let rel = bytes[cursor..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::DatasetFormat("missing header line".into()))?;
        let line = std::str::from_utf8(&bytes[cursor..cursor + rel])
            .map_err(|_| Error::DatasetFormat("header is not UTF-8".into()))?
            .to_string();
        cursor += rel + 1;
        Ok(line)
    };

    let header = next_line(&bytes)?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::DatasetFormat("bad magic".into()));
    }
    if parts.next() != Some(VERSION) {
        return Err(Error::DatasetFormat("unsupported version".into()));
    }
    let mut fields = BTreeMap::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::DatasetFormat(format!("malformed header field {part:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let num = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .ok_or_else(|| Error::DatasetFormat(format!("header missing {k}")))?
            .parse()
            .map_err(|_| Error::DatasetFormat(format!("header field {k} is not a count")))
    };
    let (l, h, d, n) = (num("n_layers")?, num("n_heads")?, num("head_dim")?, num("n_records")?);

    let ids_line = next_line(&bytes)?;
    let ids_str = ids_line
        .strip_prefix("ids=")
        .ok_or_else(|| Error::DatasetFormat("missing ids line".into()))?;
    let ids: Vec<(usize, usize)> = if ids_str.is_empty() {
        Vec::new()
    } else {
        ids_str
            .split(',')
            .map(|tok| {
                let (p, q) = tok
                    .split_once(':')
                    .ok_or_else(|| Error::DatasetFormat(format!("malformed id {tok:?}")))?;
                Ok((
                    p.parse()
                        .map_err(|_| Error::DatasetFormat("bad pair index".into()))?,
                    q.parse()
                        .map_err(|_| Error::DatasetFormat("bad question id".into()))?,
                ))
            })
            .collect::<Result<_>>()?
    };
    if ids.len() != n {
        return Err(Error::DatasetFormat(format!(
            "header declares {n} records, id line holds {}",
            ids.len()
        )));
    }

    let rec_floats = l * h * d;
    let expected = n + n * rec_floats * 4;
    if bytes.len() - cursor != expected {
        return Err(Error::DatasetFormat(format!(
            "payload holds {} bytes, header declares {}",
            bytes.len() - cursor,
            expected
        )));
    }
    let labels = &bytes[cursor..cursor + n];
    cursor += n;

    let mut records = Vec::with_capacity(n);
    for (i, &(pair_index, question_id)) in ids.iter().enumerate() {
        let mut acts = Vec::with_capacity(rec_floats);
        for _ in 0..rec_floats {
            let raw = [bytes[cursor], bytes[cursor + 1], bytes[cursor + 2], bytes[cursor + 3]];
            let x = f32::from_le_bytes(raw);
            if !x.is_finite() {
                return Err(Error::DatasetFormat(format!(
                    "non-finite activation at byte offset {cursor}"
                )));
            }
            acts.push(x);
            cursor += 4;
        }
        records.push(ActRecord {
            pair_index,
            question_id,
            label: labels[i] != 0,
            acts,
        });
    }
    Ok(ActivationDataset {
        n_layers: l,
        n_heads: h,
        head_dim: d,
        records,
    })
}

/// Test/fixture constructor: records built from raw activation buffers.
pub fn dataset_from_raw(
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    records: Vec<(usize, usize, bool, Vec<f32>)>,
) -> Result<ActivationDataset> {
    let rec_floats = n_layers * n_heads * head_dim;
    let records = records
        .into_iter()
        .map(|(pair_index, question_id, label, acts)| {
            if acts.len() != rec_floats {
                return Err(Error::DimMismatch(format!(
                    "record holds {} floats, expected {rec_floats}",
                    acts.len()
                )));
            }
            Ok(ActRecord {
                pair_index,
                question_id,
                label,
                acts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationDataset {
        n_layers,
        n_heads,
        head_dim,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::flatten_qa_pairs;
    use crate::model::ModelConfig;
    use crate::tokenizer::ByteTokenizer;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            head_dim: 8,
            hidden_dim: 32,
            vocab_size: 258,
            max_seq_len: 64,
        }
    }

    fn questions(n: usize) -> Vec<Question> {
        (0..n)
            .map(|i| Question {
                id: i,
                category: "c".into(),
                question: format!("Q{i}?"),
                best_answer: "b".into(),
                correct_answers: vec![format!("t{i}")],
                incorrect_answers: vec![format!("f{i}")],
            })
            .collect()
    }

    #[test]
    fn collect_shapes_and_determinism() {
        let model = Model::random(cfg(), 5).unwrap();
        let qs = questions(3);
        let mut pairs = flatten_qa_pairs(&qs);
        pairs.truncate(5);
        let tok = ByteTokenizer;
        let (ds, skipped) = collect_activations(&model, &tok, &qs, &pairs).unwrap();
        assert!(skipped.is_empty());
        assert_eq!(ds.records.len(), 5);
        assert_eq!((ds.n_layers, ds.n_heads, ds.head_dim), (2, 4, 8));
        for r in &ds.records {
            assert_eq!(r.all().len(), 2 * 4 * 8);
        }
        let (ds2, _) = collect_activations(&model, &tok, &qs, &pairs).unwrap();
        assert_eq!(ds, ds2);
    }

    #[test]
    fn records_match_independent_forward_pass() {
        let model = Model::random(cfg(), 6).unwrap();
        let qs = questions(2);
        let pairs = flatten_qa_pairs(&qs);
        let tok = ByteTokenizer;
        let (ds, _) = collect_activations(&model, &tok, &qs, &pairs).unwrap();
        for (i, pair) in pairs.iter().enumerate() {
            let q = &qs[pair.question_id];
            let text = format_input(&q.question, Some(&pair.answer), FormatMode::Probe).unwrap();
            let tokens = tok.encode(&text);
            let (_, trace) = model.forward_with_taps(&tokens).unwrap();
            for l in 0..2 {
                for h in 0..4 {
                    assert_eq!(
                        ds.head_slice(&ds.records[i], l, h),
                        trace.get(l, h, tokens.len() - 1)
                    );
                }
            }
        }
    }

    #[test]
    fn over_length_inputs_are_skipped_with_reason() {
        let model = Model::random(cfg(), 7).unwrap();
        let mut qs = questions(2);
        qs[1].correct_answers = vec!["x".repeat(200)];
        let pairs = flatten_qa_pairs(&qs);
        let (ds, skipped) = collect_activations(&model, &ByteTokenizer, &qs, &pairs).unwrap();
        assert_eq!(ds.records.len() + skipped.len(), pairs.len());
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].question_id, 1);
        assert!(skipped[0].reason.contains("max_seq_len"));
    }

    #[test]
    fn longer_answer_changes_only_its_own_record() {
        let model = Model::random(cfg(), 8).unwrap();
        let qs = questions(2);
        let mut pairs = flatten_qa_pairs(&qs);
        let tok = ByteTokenizer;
        let (before, _) = collect_activations(&model, &tok, &qs, &pairs).unwrap();
        pairs[2].answer = "a much longer answer".into();
        let (after, _) = collect_activations(&model, &tok, &qs, &pairs).unwrap();
        for i in [0usize, 1, 3] {
            assert_eq!(before.records[i], after.records[i]);
        }
        assert_ne!(before.records[2].all(), after.records[2].all());
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let model = Model::random(cfg(), 9).unwrap();
        let qs = questions(3);
        let pairs = flatten_qa_pairs(&qs);
        let (ds, _) = collect_activations(&model, &ByteTokenizer, &qs, &pairs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.bin");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = dataset_from_raw(2, 4, 8, vec![]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.bin");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ds = dataset_from_raw(1, 1, 2, vec![(0, 0, true, vec![1.0, 2.0])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.bin");
        save_dataset(&ds, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::DatasetFormat(_))));
    }
}
