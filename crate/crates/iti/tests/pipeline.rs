//! Pipeline-level integration tests: cross-validation, sweeps, train-size
//! curves, and property-based invariants.

mod common;

use common::*;

use proptest::prelude::*;

use iti::data::split_folds;
use iti::direction::DirectionMethod;
use iti::eval::{cross_validate, sweep_grid, trainsize_curve, FitConfig, PipelineInputs};
use iti::intervene::SelectorKind;
use iti::model::{softmax, Model, ModelConfig};

fn base_cfg() -> FitConfig {
    FitConfig {
        k: 2,
        alpha: 3.0,
        method: DirectionMethod::MassMean,
        selector: SelectorKind::HeadWise,
        n_folds: 2,
        seed: 5,
    }
}

#[test]
fn sweep_cell_count_and_recomputable_means() {
    let model = fixture_model(1);
    let tokenizer = fixture_tokenizer();
    let (ds, questions) = planted_dataset(8, (1, 2), 1.2, 2);
    let inputs = PipelineInputs {
        model: &model,
        tokenizer: &tokenizer,
        questions: &questions,
        acts: &ds,
    };
    let k = [1usize, 2];
    let alpha = [0.0f32, 4.0];
    let seeds = [3u64, 4, 5];
    let result = sweep_grid(&inputs, &base_cfg(), &k, &alpha, &seeds, None).unwrap();
    assert_eq!(result.cells.len(), k.len() * alpha.len() * seeds.len());
    assert_eq!(result.means.len(), k.len() * alpha.len());
    for mean in &result.means {
        let mut acc = 0.0f64;
        let mut kl = 0.0f64;
        let mut n = 0usize;
        for cell in result.cells.iter().filter(|c| c.k == mean.k && c.alpha == mean.alpha) {
            acc += f64::from(cell.report.mc_accuracy);
            kl += cell.report.kl.unwrap();
            n += 1;
        }
        assert_eq!(n, seeds.len());
        assert!((mean.mc_accuracy as f64 - acc / n as f64).abs() < 1e-6);
        assert!((mean.kl.unwrap() - kl / n as f64).abs() < 1e-12);
    }
    // alpha = 0 cells are no-ops: KL 0 within 1e-9
    for cell in result.cells.iter().filter(|c| c.alpha == 0.0) {
        assert!(cell.report.kl.unwrap().abs() <= 1e-9);
    }
}

#[test]
fn cross_validation_is_deterministic() {
    let model = fixture_model(11);
    let tokenizer = fixture_tokenizer();
    let (ds, questions) = planted_dataset(10, (0, 3), 1.0, 12);
    let inputs = PipelineInputs {
        model: &model,
        tokenizer: &tokenizer,
        questions: &questions,
        acts: &ds,
    };
    let a = cross_validate(&inputs, &base_cfg(), None, false).unwrap();
    let b = cross_validate(&inputs, &base_cfg(), None, false).unwrap();
    assert_eq!(a.per_question, b.per_question);
    assert_eq!(a.report.mc_accuracy.to_bits(), b.report.mc_accuracy.to_bits());
    assert_eq!(a.report.kl.unwrap().to_bits(), b.report.kl.unwrap().to_bits());
}

#[test]
fn category_counts_sum_to_question_total() {
    let model = fixture_model(21);
    let tokenizer = fixture_tokenizer();
    let (ds, questions) = planted_dataset(9, (0, 0), 1.0, 22);
    let inputs = PipelineInputs {
        model: &model,
        tokenizer: &tokenizer,
        questions: &questions,
        acts: &ds,
    };
    let outcome = cross_validate(&inputs, &base_cfg(), None, false).unwrap();
    let total: usize = outcome.report.per_category.iter().map(|r| r.count).sum();
    assert_eq!(total, questions.len());
}

#[test]
fn trainsize_full_fraction_is_self_similar() {
    let model = fixture_model(31);
    let tokenizer = fixture_tokenizer();
    let (ds, questions) = planted_dataset(12, (1, 1), 1.5, 32);
    let inputs = PipelineInputs {
        model: &model,
        tokenizer: &tokenizer,
        questions: &questions,
        acts: &ds,
    };
    let points = trainsize_curve(&inputs, &base_cfg(), &[1.0], 33).unwrap();
    assert_eq!(points.len(), 1);
    assert!(
        (points[0].direction_cosine - 1.0).abs() <= 1e-6,
        "cosine at fraction 1.0 is {}",
        points[0].direction_cosine
    );
}

#[test]
fn trainsize_cosine_grows_with_fraction() {
    let model = fixture_model(41);
    let tokenizer = fixture_tokenizer();
    let (ds, questions) = planted_dataset(40, (0, 2), 1.0, 42);
    let inputs = PipelineInputs {
        model: &model,
        tokenizer: &tokenizer,
        questions: &questions,
        acts: &ds,
    };
    let fractions = [0.2f64, 0.6, 1.0];
    let mut mean = vec![0.0f64; fractions.len()];
    for seed in 0..5u64 {
        let points = trainsize_curve(&inputs, &base_cfg(), &fractions, 50 + seed).unwrap();
        for (m, p) in mean.iter_mut().zip(&points) {
            *m += f64::from(p.direction_cosine) / 5.0;
        }
    }
    for w in mean.windows(2) {
        assert!(w[1] >= w[0] - 0.05, "cosine curve not nondecreasing within noise: {mean:?}");
    }
}

#[test]
fn trainsize_rejects_bad_fractions() {
    let model = fixture_model(51);
    let tokenizer = fixture_tokenizer();
    let (ds, questions) = planted_dataset(8, (0, 0), 1.0, 52);
    let inputs = PipelineInputs {
        model: &model,
        tokenizer: &tokenizer,
        questions: &questions,
        acts: &ds,
    };
    assert!(trainsize_curve(&inputs, &base_cfg(), &[], 1).is_err());
    assert!(trainsize_curve(&inputs, &base_cfg(), &[0.0], 1).is_err());
    assert!(trainsize_curve(&inputs, &base_cfg(), &[1.5], 1).is_err());
}

#[test]
fn pointwise_selector_runs_end_to_end() {
    let model = fixture_model(61);
    let tokenizer = fixture_tokenizer();
    let (ds, questions) = planted_dataset(10, (1, 0), 1.5, 62);
    let inputs = PipelineInputs {
        model: &model,
        tokenizer: &tokenizer,
        questions: &questions,
        acts: &ds,
    };
    let cfg = FitConfig {
        selector: SelectorKind::PointWise,
        ..base_cfg()
    };
    let outcome = cross_validate(&inputs, &cfg, None, false).unwrap();
    assert_eq!(outcome.per_question.len(), questions.len());
    for fit in &outcome.fold_fits {
        assert!(!fit.spec.entries.is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn softmax_is_a_probability_simplex(logits in proptest::collection::vec(-30.0f32..30.0, 2..20)) {
        let p = softmax(&logits);
        prop_assert_eq!(p.len(), logits.len());
        for &v in &p {
            prop_assert!(v >= 0.0 && v <= 1.0);
        }
        let sum: f64 = p.iter().map(|&v| f64::from(v)).sum();
        prop_assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn model_round_trips_byte_identically(seed in 0u64..500) {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            head_dim: 4,
            hidden_dim: 8,
            vocab_size: 16,
            max_seq_len: 32,
        };
        let model = Model::random(config, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        loaded.save(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        prop_assert_eq!(bytes1, bytes2);
        prop_assert_eq!(loaded, model);
    }

    #[test]
    fn fold_split_partitions_questions(n in 2usize..60, folds in 2usize..5, seed in 0u64..100) {
        prop_assume!(n >= folds);
        let questions = synth_questions(n);
        let plan = split_folds(&questions, folds, seed).unwrap();
        let mut all: Vec<usize> = (0..folds).flat_map(|f| plan.questions_in_fold(f)).collect();
        all.sort_unstable();
        let expected: Vec<usize> = (0..n).collect();
        prop_assert_eq!(all, expected);
        let sizes = plan.fold_sizes();
        let max = sizes.iter().max().unwrap();
        let min = sizes.iter().min().unwrap();
        prop_assert!(max - min <= 1);
    }
}
