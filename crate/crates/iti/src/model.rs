//! Minimal decoder-only transformer with per-head activation taps.
//!
//! Each block is pre-norm: norm -> multi-head attention -> residual add ->
//! norm -> MLP -> residual add, with learned position embeddings. The
//! per-head attention output (dimension `head_dim`, taken after the
//! attention operator and before the head's output projection) is the tap
//! site for probing and the injection site for steering. The attention
//! output projection carries an explicit bias, zero by default, so a
//! steering shift can be folded into it as a pure parameter edit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::InterventionSpec;
use crate::linalg::dot;

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.n_layers >= 1
            && self.n_heads >= 1
            && self.head_dim >= 1
            && self.hidden_dim >= 1
            && self.vocab_size >= 1
            && self.max_seq_len >= 1;
        if !all_positive {
            return Err(Error::Config("all dimensions must be >= 1".into()));
        }
        if self.hidden_dim != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden_dim {} != n_heads {} * head_dim {}",
                self.hidden_dim, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// MLP inner width.
    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

/// One transformer block. Attention projections are stored head-major:
/// `w_query`/`w_key`/`w_value` are `H x D x DH` (the value projection is the
/// per-head read matrix P), `w_out` is `H x DH x D` (the per-head write
/// matrix Q). `out_bias` is the attention output-projection bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub w_query: Vec<f32>,
    pub w_key: Vec<f32>,
    pub w_value: Vec<f32>,
    pub w_out: Vec<f32>,
    pub out_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub mlp_fc_w: Vec<f32>,
    pub mlp_fc_b: Vec<f32>,
    pub mlp_proj_w: Vec<f32>,
    pub mlp_proj_b: Vec<f32>,
}

impl LayerWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let dh = config.hidden_dim;
        let d = config.head_dim;
        let h = config.n_heads;
        let f = config.mlp_dim();
        LayerWeights {
            ln1_gain: vec![1.0; dh],
            ln1_bias: vec![0.0; dh],
            w_query: vec![0.0; h * d * dh],
            w_key: vec![0.0; h * d * dh],
            w_value: vec![0.0; h * d * dh],
            w_out: vec![0.0; h * dh * d],
            out_bias: vec![0.0; dh],
            ln2_gain: vec![1.0; dh],
            ln2_bias: vec![0.0; dh],
            mlp_fc_w: vec![0.0; f * dh],
            mlp_fc_b: vec![0.0; f],
            mlp_proj_w: vec![0.0; dh * f],
            mlp_proj_b: vec![0.0; dh],
        }
    }

    /// Row `d` of head `h`'s query projection (a DH-vector).
    fn qkv_row<'a>(w: &'a [f32], dh: usize, d: usize, head: usize, row: usize) -> &'a [f32] {
        let start = (head * d + row) * dh;
        &w[start..start + dh]
    }

    /// The write matrix Q of one head applied to a head-space vector,
    /// accumulated into `out` (length DH).
    pub fn out_project(&self, head: usize, dh: usize, d: usize, tap: &[f32], out: &mut [f32]) {
        let base = head * dh * d;
        for i in 0..dh {
            let row = &self.w_out[base + i * d..base + i * d + d];
            out[i] += dot(row, tap);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// V x DH, row per token.
    pub tok_emb: Vec<f32>,
    /// max_seq_len x DH, row per position.
    pub pos_emb: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Vec<f32>,
    pub lnf_bias: Vec<f32>,
    /// V x DH, row per token.
    pub unembed: Vec<f32>,
}

/// Per-head activations `x_l^h` captured during a forward pass,
/// shape L x H x T x D. When an intervention is active the trace holds the
/// shifted values, i.e. exactly what the head's output projection consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_positions: usize,
    pub head_dim: usize,
    data: Vec<f32>,
}

impl ActivationTrace {
    fn zeros(l: usize, h: usize, t: usize, d: usize) -> Self {
        ActivationTrace {
            n_layers: l,
            n_heads: h,
            n_positions: t,
            head_dim: d,
            data: vec![0.0; l * h * t * d],
        }
    }

    fn idx(&self, l: usize, h: usize, t: usize) -> usize {
        ((l * self.n_heads + h) * self.n_positions + t) * self.head_dim
    }

    pub fn get(&self, layer: usize, head: usize, position: usize) -> &[f32] {
        let i = self.idx(layer, head, position);
        &self.data[i..i + self.head_dim]
    }

    fn set(&mut self, layer: usize, head: usize, position: usize, v: &[f32]) {
        let i = self.idx(layer, head, position);
        self.data[i..i + self.head_dim].copy_from_slice(v);
    }
}

/// Full forward-pass record: logits for every position plus residual-stream
/// snapshots around each block, for reconstruction checks and stream-delta
/// analysis.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    /// T x V, row per position.
    pub logits: Vec<f32>,
    pub trace: ActivationTrace,
    /// Stream at block entry, per layer (each T x DH).
    pub stream_pre_attn: Vec<Vec<f32>>,
    /// Stream after the attention residual add, per layer.
    pub stream_post_attn: Vec<Vec<f32>>,
    /// Stream after the MLP residual add, per layer.
    pub stream_post_mlp: Vec<Vec<f32>>,
}

impl ForwardRecord {
    pub fn logits_at(&self, position: usize, vocab: usize) -> &[f32] {
        &self.logits[position * vocab..(position + 1) * vocab]
    }
}

/// Greedy decoding result with the logits that produced each emitted token.
#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub tokens: Vec<u32>,
    /// One V-vector per emitted token.
    pub step_logits: Vec<Vec<f32>>,
}

fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) {
    let n = x.len();
    let mut mean = 0.0f64;
    for v in x {
        mean += f64::from(*v);
    }
    mean /= n as f64;
    let mut var = 0.0f64;
    for v in x {
        let d = f64::from(*v) - mean;
        var += d * d;
    }
    var /= n as f64;
    let inv = 1.0 / (var + f64::from(LN_EPS)).sqrt();
    for i in 0..n {
        out[i] = (((f64::from(x[i]) - mean) * inv) as f32) * gain[i] + bias[i];
    }
}

fn gelu(x: f32) -> f32 {
    // tanh approximation
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Numerically stable softmax (max subtraction, f64 accumulation).
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| f64::from(z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

/// Log-softmax value of one index, in f64.
pub fn log_softmax_at(logits: &[f32], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = logits.iter().map(|&z| f64::from(z - max).exp()).sum();
    f64::from(logits[index] - max) - sum.ln()
}

impl Model {
    /// All-zero weights (layer-norm gains at 1). Useful as a scaffold for
    /// analytically constructed fixtures.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let dh = config.hidden_dim;
        Ok(Model {
            tok_emb: vec![0.0; config.vocab_size * dh],
            pos_emb: vec![0.0; config.max_seq_len * dh],
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::zeros(&config))
                .collect(),
            lnf_gain: vec![1.0; dh],
            lnf_bias: vec![0.0; dh],
            unembed: vec![0.0; config.vocab_size * dh],
            config,
        })
    }

    /// Seeded random initialization (gaussian weights, zero biases).
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut model = Model::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0f32, 0.05).unwrap();
        let e = Normal::new(0.0f32, 0.1).unwrap();
        let fill = |v: &mut [f32], d: &Normal<f32>, rng: &mut ChaCha8Rng| {
            for x in v.iter_mut() {
                *x = d.sample(rng);
            }
        };
        fill(&mut model.tok_emb, &e, &mut rng);
        fill(&mut model.pos_emb, &e, &mut rng);
        for layer in &mut model.layers {
            fill(&mut layer.w_query, &w, &mut rng);
            fill(&mut layer.w_key, &w, &mut rng);
            fill(&mut layer.w_value, &w, &mut rng);
            fill(&mut layer.w_out, &w, &mut rng);
            fill(&mut layer.mlp_fc_w, &w, &mut rng);
            fill(&mut layer.mlp_proj_w, &w, &mut rng);
        }
        fill(&mut model.unembed, &e, &mut rng);
        let _ = rng.gen::<u64>();
        Ok(model)
    }

    pub fn embedding_row(&self, token: u32) -> &[f32] {
        let dh = self.config.hidden_dim;
        &self.tok_emb[token as usize * dh..(token as usize + 1) * dh]
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::LengthOverflow {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Forward pass with full stream snapshots and per-head taps.
    pub fn forward_full(
        &self,
        tokens: &[u32],
        spec: Option<&InterventionSpec>,
    ) -> Result<ForwardRecord> {
        self.check_tokens(tokens)?;
        if let Some(s) = spec {
            s.validate(&self.config)?;
        }
        let cfg = &self.config;
        let (t_len, dh, d, n_heads, vocab) = (
            tokens.len(),
            cfg.hidden_dim,
            cfg.head_dim,
            cfg.n_heads,
            cfg.vocab_size,
        );
        let scale = 1.0 / (d as f32).sqrt();

        let mut stream = vec![0.0f32; t_len * dh];
        for (t, &tok) in tokens.iter().enumerate() {
            let emb = self.embedding_row(tok);
            let pos = &self.pos_emb[t * dh..(t + 1) * dh];
            for i in 0..dh {
                stream[t * dh + i] = emb[i] + pos[i];
            }
        }

        let mut trace = ActivationTrace::zeros(cfg.n_layers, n_heads, t_len, d);
        let mut pre_attn = Vec::with_capacity(cfg.n_layers);
        let mut post_attn = Vec::with_capacity(cfg.n_layers);
        let mut post_mlp = Vec::with_capacity(cfg.n_layers);

        let mut normed = vec![0.0f32; t_len * dh];
        for (l, layer) in self.layers.iter().enumerate() {
            pre_attn.push(stream.clone());
            for t in 0..t_len {
                let (x, y) = (
                    &stream[t * dh..(t + 1) * dh],
                    &mut normed[t * dh..(t + 1) * dh],
                );
                layer_norm(x, &layer.ln1_gain, &layer.ln1_bias, y);
            }

            let mut delta = vec![0.0f32; t_len * dh];
            let mut q = vec![0.0f32; t_len * d];
            let mut k = vec![0.0f32; t_len * d];
            let mut v = vec![0.0f32; t_len * d];
            let mut tap = vec![0.0f32; d];
            for h in 0..n_heads {
                for t in 0..t_len {
                    let x = &normed[t * dh..(t + 1) * dh];
                    for r in 0..d {
                        q[t * d + r] = dot(LayerWeights::qkv_row(&layer.w_query, dh, d, h, r), x);
                        k[t * d + r] = dot(LayerWeights::qkv_row(&layer.w_key, dh, d, h, r), x);
                        v[t * d + r] = dot(LayerWeights::qkv_row(&layer.w_value, dh, d, h, r), x);
                    }
                }
                for t in 0..t_len {
                    // causal: position t attends to positions <= t only
                    let scores: Vec<f32> = (0..=t)
                        .map(|s| dot(&q[t * d..(t + 1) * d], &k[s * d..(s + 1) * d]) * scale)
                        .collect();
                    let weights = softmax(&scores);
                    tap.iter_mut().for_each(|x| *x = 0.0);
                    for (s, w) in weights.iter().enumerate() {
                        for r in 0..d {
                            tap[r] += w * v[s * d + r];
                        }
                    }
                    if let Some(shift) = spec.and_then(|s| s.shift_for(l, h)) {
                        for (x, s) in tap.iter_mut().zip(&shift) {
                            *x += s;
                        }
                    }
                    trace.set(l, h, t, &tap);
                    layer.out_project(h, dh, d, &tap, &mut delta[t * dh..(t + 1) * dh]);
                }
            }
            for t in 0..t_len {
                for i in 0..dh {
                    stream[t * dh + i] += delta[t * dh + i] + layer.out_bias[i];
                }
            }
            post_attn.push(stream.clone());

            let f = cfg.mlp_dim();
            let mut hidden = vec![0.0f32; f];
            for t in 0..t_len {
                layer_norm(
                    &stream[t * dh..(t + 1) * dh],
                    &layer.ln2_gain,
                    &layer.ln2_bias,
                    &mut normed[t * dh..(t + 1) * dh],
                );
                let x = &normed[t * dh..(t + 1) * dh];
                for j in 0..f {
                    hidden[j] = gelu(dot(&layer.mlp_fc_w[j * dh..(j + 1) * dh], x) + layer.mlp_fc_b[j]);
                }
                for i in 0..dh {
                    stream[t * dh + i] +=
                        dot(&layer.mlp_proj_w[i * f..(i + 1) * f], &hidden) + layer.mlp_proj_b[i];
                }
            }
            post_mlp.push(stream.clone());
        }

        let mut logits = vec![0.0f32; t_len * vocab];
        let mut final_norm = vec![0.0f32; dh];
        for t in 0..t_len {
            layer_norm(
                &stream[t * dh..(t + 1) * dh],
                &self.lnf_gain,
                &self.lnf_bias,
                &mut final_norm,
            );
            for tok in 0..vocab {
                logits[t * vocab + tok] = dot(&self.unembed[tok * dh..(tok + 1) * dh], &final_norm);
            }
        }

        Ok(ForwardRecord {
            logits,
            trace,
            stream_pre_attn: pre_attn,
            stream_post_attn: post_attn,
            stream_post_mlp: post_mlp,
        })
    }

    /// Forward pass returning logits for every position and the per-head
    /// activation trace.
    pub fn forward_with_taps(&self, tokens: &[u32]) -> Result<(Vec<f32>, ActivationTrace)> {
        let rec = self.forward_full(tokens, None)?;
        Ok((rec.logits, rec.trace))
    }

    /// Next-token distribution at the final position.
    pub fn next_token_distribution(
        &self,
        tokens: &[u32],
        spec: Option<&InterventionSpec>,
    ) -> Result<Vec<f32>> {
        let rec = self.forward_full(tokens, spec)?;
        let vocab = self.config.vocab_size;
        Ok(softmax(rec.logits_at(tokens.len() - 1, vocab)))
    }

    /// Greedy decoding; the intervention (if any) is re-applied on every
    /// step's forward pass. Ties go to the lowest token id.
    pub fn generate_greedy(
        &self,
        prompt: &[u32],
        max_new: usize,
        spec: Option<&InterventionSpec>,
    ) -> Result<Vec<u32>> {
        Ok(self.generate_traced(prompt, max_new, spec)?.tokens)
    }

    pub fn generate_traced(
        &self,
        prompt: &[u32],
        max_new: usize,
        spec: Option<&InterventionSpec>,
    ) -> Result<GenerationTrace> {
        self.check_tokens(prompt)?;
        if prompt.len() + max_new > self.config.max_seq_len {
            return Err(Error::LengthOverflow {
                len: prompt.len() + max_new,
                max: self.config.max_seq_len,
            });
        }
        let vocab = self.config.vocab_size;
        let mut ctx = prompt.to_vec();
        let mut tokens = Vec::with_capacity(max_new);
        let mut step_logits = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let rec = self.forward_full(&ctx, spec)?;
            let logits = rec.logits_at(ctx.len() - 1, vocab).to_vec();
            let mut best = 0usize;
            for tok in 1..vocab {
                if logits[tok] > logits[best] {
                    best = tok;
                }
            }
            ctx.push(best as u32);
            tokens.push(best as u32);
            step_logits.push(logits);
        }
        Ok(GenerationTrace { tokens, step_logits })
    }

    /// Log probability of `continuation` given `prompt` (sum over positions
    /// of log next-token probability). Empty continuation is 0 by convention.
    pub fn conditional_logprob(
        &self,
        prompt: &[u32],
        continuation: &[u32],
        spec: Option<&InterventionSpec>,
    ) -> Result<f64> {
        self.check_tokens(prompt)?;
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let full: Vec<u32> = prompt.iter().chain(continuation).copied().collect();
        if full.len() > self.config.max_seq_len {
            return Err(Error::LengthOverflow {
                len: full.len(),
                max: self.config.max_seq_len,
            });
        }
        let rec = self.forward_full(&full, spec)?;
        let vocab = self.config.vocab_size;
        let mut lp = 0.0f64;
        for (i, &tok) in continuation.iter().enumerate() {
            let pos = prompt.len() + i - 1;
            lp += log_softmax_at(rec.logits_at(pos, vocab), tok as usize);
        }
        Ok(lp)
    }
}
