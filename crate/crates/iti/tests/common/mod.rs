//! Shared fixtures for integration tests: small random models, synthetic
//! question sets, planted-signal activation datasets, and random specs.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use iti::acts::{dataset_from_raw, ActivationDataset};
use iti::data::Question;
use iti::direction::Direction;
use iti::intervene::{build_spec, InterventionSpec};
use iti::linalg::normalize;
use iti::model::{Model, ModelConfig};
use iti::probe::HeadSelection;
use iti::tokenizer::HashWordTokenizer;

pub const FIX_LAYERS: usize = 2;
pub const FIX_HEADS: usize = 4;
pub const FIX_HEAD_DIM: usize = 8;
pub const FIX_VOCAB: usize = 64;

pub fn fixture_config() -> ModelConfig {
    ModelConfig {
        n_layers: FIX_LAYERS,
        n_heads: FIX_HEADS,
        head_dim: FIX_HEAD_DIM,
        hidden_dim: FIX_HEADS * FIX_HEAD_DIM,
        vocab_size: FIX_VOCAB,
        max_seq_len: 512,
    }
}

pub fn fixture_model(seed: u64) -> Model {
    Model::random(fixture_config(), seed).unwrap()
}

pub fn fixture_tokenizer() -> HashWordTokenizer {
    HashWordTokenizer::new(FIX_VOCAB)
}

/// Synthetic question set: each question has 2 correct and 3 incorrect
/// answers with varied word content.
pub fn synth_questions(n: usize) -> Vec<Question> {
    (0..n)
        .map(|i| Question {
            id: i,
            category: format!("group{}", i % 3),
            question: format!("what is item {i} called"),
            best_answer: format!("item {i} is a widget"),
            correct_answers: vec![
                format!("item {i} is a widget"),
                format!("a widget named {i}"),
            ],
            incorrect_answers: vec![
                format!("item {i} is a gadget"),
                format!("nobody knows {i}"),
                format!("item {i} is cursed"),
            ],
        })
        .collect()
}

/// Random spec over `k` distinct heads with unit directions and positive
/// sigmas.
pub fn random_fixture_spec(config: &ModelConfig, k: usize, alpha: f32, seed: u64) -> InterventionSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heads: Vec<(usize, usize)> = (0..config.n_layers)
        .flat_map(|l| (0..config.n_heads).map(move |h| (l, h)))
        .collect();
    heads.shuffle(&mut rng);
    heads.truncate(k);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut directions: Vec<Direction> = (0..config.n_layers * config.n_heads)
        .map(|_| Direction::zero(config.head_dim, iti::direction::DirectionMethod::Random))
        .collect();
    for &(l, h) in &heads {
        let raw: Vec<f32> = (0..config.head_dim).map(|_| normal.sample(&mut rng)).collect();
        directions[l * config.n_heads + h] = Direction {
            vector: normalize(&raw).unwrap(),
            method: iti::direction::DirectionMethod::Random,
            sigma: rng.gen_range(0.5f32..2.0),
        };
    }
    build_spec(
        &HeadSelection::HeadWise(heads),
        &directions,
        config.n_heads,
        config.head_dim,
        alpha,
    )
    .unwrap()
}

/// Activation dataset with a truth signal planted in exactly one head:
/// that head's activations shift by +/- `strength` on every coordinate
/// according to the label; all other heads are pure noise. Layout matches
/// `flatten_qa_pairs` over `synth_questions(n_questions)` (5 pairs per
/// question, 2 true then 3 false).
pub fn planted_dataset(
    n_questions: usize,
    target: (usize, usize),
    strength: f32,
    seed: u64,
) -> (ActivationDataset, Vec<Question>) {
    let questions = synth_questions(n_questions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let dim = FIX_LAYERS * FIX_HEADS * FIX_HEAD_DIM;
    let mut raw = Vec::new();
    let mut pair_index = 0usize;
    for q in &questions {
        for label in [true, true, false, false, false] {
            let mut acts: Vec<f32> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
            let sign = if label { strength } else { -strength };
            let base = (target.0 * FIX_HEADS + target.1) * FIX_HEAD_DIM;
            for v in &mut acts[base..base + FIX_HEAD_DIM] {
                *v += sign;
            }
            raw.push((pair_index, q.id, label, acts));
            pair_index += 1;
        }
    }
    (
        dataset_from_raw(FIX_LAYERS, FIX_HEADS, FIX_HEAD_DIM, raw).unwrap(),
        questions,
    )
}

/// Gaussian class clouds with per-coordinate standard deviations.
pub fn gaussian_clouds(
    n_per_class: usize,
    dim: usize,
    shift: &[f32],
    sd: &[f32],
    seed: u64,
) -> (Vec<Vec<f32>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..2 * n_per_class {
        let label = i % 2 == 0;
        let sign = if label { 1.0f32 } else { -1.0 };
        x.push(
            (0..dim)
                .map(|j| sign * shift[j] + sd[j] * noise.sample(&mut rng))
                .collect(),
        );
        y.push(label);
    }
    (x, y)
}
