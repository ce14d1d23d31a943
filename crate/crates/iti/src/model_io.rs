//! Model file format: a one-line textual header with key=value config
//! fields and the explicit parameter ordering, followed by a little-endian
//! f32 payload in that order. Save/load round-trips byte-identically.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::provenance::atomic_write;

const MAGIC: &str = "itimodel";
const VERSION: &str = "v1";
const ORDER: &str = "tok_emb,pos_emb,layers(ln1_g,ln1_b,w_query,w_key,w_value,w_out,out_bias,ln2_g,ln2_b,mlp_fc_w,mlp_fc_b,mlp_proj_w,mlp_proj_b),lnf_g,lnf_b,unembed";

fn header_line(config: &ModelConfig) -> String {
    format!(
        "{MAGIC} {VERSION} n_layers={} n_heads={} head_dim={} hidden_dim={} vocab_size={} max_seq_len={} order={ORDER}\n",
        config.n_layers,
        config.n_heads,
        config.head_dim,
        config.hidden_dim,
        config.vocab_size,
        config.max_seq_len,
    )
}

fn param_vecs(model: &Model) -> Vec<&[f32]> {
    let mut v: Vec<&[f32]> = vec![&model.tok_emb, &model.pos_emb];
    for layer in &model.layers {
        v.extend_from_slice(&[
            &layer.ln1_gain,
            &layer.ln1_bias,
            &layer.w_query,
            &layer.w_key,
            &layer.w_value,
            &layer.w_out,
            &layer.out_bias,
            &layer.ln2_gain,
            &layer.ln2_bias,
            &layer.mlp_fc_w,
            &layer.mlp_fc_b,
            &layer.mlp_proj_w,
            &layer.mlp_proj_b,
        ]);
    }
    v.push(&model.lnf_gain);
    v.push(&model.lnf_bias);
    v.push(&model.unembed);
    v
}

fn param_vecs_mut(model: &mut Model) -> Vec<&mut Vec<f32>> {
    let mut v: Vec<&mut Vec<f32>> = vec![&mut model.tok_emb, &mut model.pos_emb];
    for layer in &mut model.layers {
        v.push(&mut layer.ln1_gain);
        v.push(&mut layer.ln1_bias);
        v.push(&mut layer.w_query);
        v.push(&mut layer.w_key);
        v.push(&mut layer.w_value);
        v.push(&mut layer.w_out);
        v.push(&mut layer.out_bias);
        v.push(&mut layer.ln2_gain);
        v.push(&mut layer.ln2_bias);
        v.push(&mut layer.mlp_fc_w);
        v.push(&mut layer.mlp_fc_b);
        v.push(&mut layer.mlp_proj_w);
        v.push(&mut layer.mlp_proj_b);
    }
    v.push(&mut model.lnf_gain);
    v.push(&mut model.lnf_bias);
    v.push(&mut model.unembed);
    v
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = header_line(&self.config).into_bytes();
        for params in param_vecs(self) {
            for x in params {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::ModelFormat("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::ModelFormat("header is not UTF-8".into()))?;
        let config = parse_header(header)?;

        let mut model = Model::zeros(config)?;
        let payload = &bytes[nl + 1..];
        let expected: usize = param_vecs(&model).iter().map(|p| p.len()).sum();
        if payload.len() != expected * 4 {
            return Err(Error::ModelFormat(format!(
                "payload holds {} bytes, header declares {} floats ({} bytes)",
                payload.len(),
                expected,
                expected * 4
            )));
        }
        let mut offset = 0usize;
        for params in param_vecs_mut(&mut model) {
            for x in params.iter_mut() {
                let raw = [
                    payload[offset],
                    payload[offset + 1],
                    payload[offset + 2],
                    payload[offset + 3],
                ];
                *x = f32::from_le_bytes(raw);
                if !x.is_finite() {
                    return Err(Error::ModelFormat(format!(
                        "non-finite value at payload offset {offset}"
                    )));
                }
                offset += 4;
            }
        }
        Ok(model)
    }
}

fn parse_header(header: &str) -> Result<ModelConfig> {
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    if parts.next() != Some(VERSION) {
        return Err(Error::ModelFormat("unsupported version".into()));
    }
    let mut fields = std::collections::BTreeMap::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::ModelFormat(format!("malformed header field {part:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let num = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .ok_or_else(|| Error::ModelFormat(format!("header missing {k}")))?
            .parse()
            .map_err(|_| Error::ModelFormat(format!("header field {k} is not a count")))
    };
    if fields.get("order").map(String::as_str) != Some(ORDER) {
        return Err(Error::ModelFormat("unknown parameter ordering".into()));
    }
    let config = ModelConfig {
        n_layers: num("n_layers")?,
        n_heads: num("n_heads")?,
        head_dim: num("head_dim")?,
        hidden_dim: num("hidden_dim")?,
        vocab_size: num("vocab_size")?,
        max_seq_len: num("max_seq_len")?,
    };
    config.validate()?;
    Ok(config)
}
