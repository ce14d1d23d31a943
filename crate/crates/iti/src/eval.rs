//! Scoring and experiment drivers: multiple-choice accuracy by candidate
//! log-likelihood, cross-entropy on a plain-text corpus, pre/post-steering
//! KL divergence, (K, alpha) sweeps, cross-validation, per-category
//! breakdowns, and training-set-size curves.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acts::ActivationDataset;
use crate::data::{format_input, split_folds, FormatMode, Question, SplitPlan};
use crate::direction::{
    ccs_direction, estimate_sigma, mass_mean_direction, probe_weight_direction, random_direction,
    Direction, DirectionMethod,
};
use crate::error::{Error, Result};
use crate::intervene::{build_spec, InterventionSpec, SelectorKind};
use crate::model::Model;
use crate::probe::{
    probe_all_heads, select_heads, train_concat_probe, HeadAccuracyMatrix, HeadSelection,
    TrainSettings,
};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub alpha: f32,
    pub method: DirectionMethod,
    pub selector: SelectorKind,
    pub n_folds: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
    pub accuracy: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mc_accuracy: f32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
    pub per_category: Vec<CategoryRow>,
    pub config: EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub no_comment_count: Option<usize>,
}

/// Per-question multiple-choice outcome.
#[derive(Debug, Clone)]
pub struct McOutcome {
    pub accuracy: f32,
    /// (question id, scored positive)
    pub per_question: Vec<(usize, bool)>,
}

/// Score every candidate answer by conditional log-probability under the
/// generation prompt; a question is positive iff its best correct candidate
/// strictly beats its best incorrect one (ties count as incorrect).
pub fn mc_eval(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    questions: &[Question],
    spec: Option<&InterventionSpec>,
    length_normalized: bool,
) -> Result<McOutcome> {
    if questions.is_empty() {
        return Err(Error::EmptyInput("question list"));
    }
    let mut per_question = Vec::with_capacity(questions.len());
    for q in questions {
        if q.correct_answers.is_empty() || q.incorrect_answers.is_empty() {
            return Err(Error::InvalidArg(format!(
                "question {} lacks both candidate classes",
                q.id
            )));
        }
        let prompt_text = format_input(&q.question, None, FormatMode::Generation)?;
        let prompt = tokenizer.encode(&prompt_text);
        let score = |answer: &str| -> Result<f64> {
            let cand = tokenizer.encode(&format!(" {answer}"));
            let lp = model.conditional_logprob(&prompt, &cand, spec)?;
            Ok(if length_normalized && !cand.is_empty() {
                lp / cand.len() as f64
            } else {
                lp
            })
        };
        let best = |answers: &[String]| -> Result<f64> {
            let mut best = f64::NEG_INFINITY;
            for a in answers {
                best = best.max(score(a)?);
            }
            Ok(best)
        };
        let positive = best(&q.correct_answers)? > best(&q.incorrect_answers)?;
        per_question.push((q.id, positive));
    }
    let positives = per_question.iter().filter(|(_, p)| *p).count();
    Ok(McOutcome {
        accuracy: positives as f32 / per_question.len() as f32,
        per_question,
    })
}

pub fn mc_accuracy(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    questions: &[Question],
    spec: Option<&InterventionSpec>,
) -> Result<f32> {
    Ok(mc_eval(model, tokenizer, questions, spec, false)?.accuracy)
}

/// Mean negative log-probability per predicted token, in nats.
pub fn cross_entropy(
    model: &Model,
    corpus: &[Vec<u32>],
    spec: Option<&InterventionSpec>,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for seq in corpus {
        if seq.len() < 2 {
            return Err(Error::InvalidArg("corpus sequence shorter than 2 tokens".into()));
        }
        let lp = model.conditional_logprob(&seq[..1], &seq[1..], spec)?;
        nll -= lp;
        count += seq.len() - 1;
    }
    Ok(nll / count as f64)
}

/// KL(p || q) in nats, f64 accumulation.
pub fn kl_divergence(p: &[f32], q: &[f32]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            let pi = f64::from(pi);
            pi * (pi / f64::from(qi).max(1e-300)).ln()
        })
        .sum()
}

/// Mean next-token KL between the unsteered and steered model over a
/// prompt set. Defaults to KL(pre || post); `reverse` swaps the arguments.
pub fn kl_pre_post(
    model: &Model,
    spec: &InterventionSpec,
    prompts: &[Vec<u32>],
    reverse: bool,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompt list"));
    }
    let mut total = 0.0f64;
    for prompt in prompts {
        let pre = model.next_token_distribution(prompt, None)?;
        let post = model.next_token_distribution(prompt, Some(spec))?;
        total += if reverse {
            kl_divergence(&post, &pre)
        } else {
            kl_divergence(&pre, &post)
        };
    }
    Ok(total / prompts.len() as f64)
}

/// Per-category accuracy table (every category; display filtering is the
/// caller's concern). Rows are sorted by category name.
pub fn category_report(per_question: &[(usize, bool)], questions: &[Question]) -> Vec<CategoryRow> {
    use std::collections::BTreeMap;
    let category_of: BTreeMap<usize, &str> = questions
        .iter()
        .map(|q| (q.id, q.category.as_str()))
        .collect();
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for &(qid, positive) in per_question {
        if let Some(cat) = category_of.get(&qid) {
            let entry = tally.entry(cat).or_default();
            entry.0 += 1;
            entry.1 += usize::from(positive);
        }
    }
    tally
        .into_iter()
        .map(|(category, (count, positives))| CategoryRow {
            category: category.to_string(),
            count,
            accuracy: positives as f32 / count as f32,
        })
        .collect()
}

/// Count greedy generations containing the refusal string, the stand-in
/// informativeness signal.
pub fn count_no_comment(
    model: &Model,
    tokenizer: &dyn Tokenizer,
    questions: &[Question],
    spec: Option<&InterventionSpec>,
    max_new: usize,
) -> Result<usize> {
    let mut count = 0usize;
    for q in questions {
        let prompt_text = format_input(&q.question, None, FormatMode::Generation)?;
        let prompt = tokenizer.encode(&prompt_text);
        let budget = max_new.min(model.config.max_seq_len.saturating_sub(prompt.len()));
        let out = model.generate_greedy(&prompt, budget, spec)?;
        if tokenizer.decode(&out).contains("I have no comment") {
            count += 1;
        }
    }
    Ok(count)
}

// ---------------------------------------------------------------------------
// Pipeline drivers
// ---------------------------------------------------------------------------

pub struct PipelineInputs<'a> {
    pub model: &'a Model,
    pub tokenizer: &'a dyn Tokenizer,
    pub questions: &'a [Question],
    pub acts: &'a ActivationDataset,
}

#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub k: usize,
    pub alpha: f32,
    pub method: DirectionMethod,
    pub selector: SelectorKind,
    pub n_folds: usize,
    pub seed: u64,
}

impl FitConfig {
    fn eval_config(&self, fold: Option<usize>) -> EvalConfig {
        EvalConfig {
            k: self.k,
            alpha: self.alpha,
            method: self.method,
            selector: self.selector,
            n_folds: self.n_folds,
            seed: self.seed,
            fold,
        }
    }
}

/// Everything fitted on the training folds: probe grid, selection,
/// per-head directions (zero for unselected heads), and the spec.
#[derive(Debug, Clone)]
pub struct FoldFit {
    pub matrix: HeadAccuracyMatrix,
    pub selection: HeadSelection,
    pub directions: Vec<Direction>,
    pub spec: InterventionSpec,
}

/// Per-question CCS pairing: one truthful and one false record per
/// question, seeded. Questions lacking either class are skipped.
fn ccs_record_pairs(
    ds: &ActivationDataset,
    record_indices: &[usize],
    seed: u64,
) -> Vec<(usize, usize)> {
    use std::collections::BTreeMap;
    let mut by_question: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for &i in record_indices {
        let r = &ds.records[i];
        let entry = by_question.entry(r.question_id).or_default();
        if r.label {
            entry.0.push(i);
        } else {
            entry.1.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (_, (pos, neg)) in by_question {
        if let (Some(&p), Some(&n)) = (pos.choose(&mut rng), neg.choose(&mut rng)) {
            pairs.push((p, n));
        }
    }
    pairs
}

fn head_features(
    ds: &ActivationDataset,
    record_indices: &[usize],
    layer: usize,
    head: usize,
) -> (Vec<Vec<f32>>, Vec<bool>) {
    let mut x = Vec::with_capacity(record_indices.len());
    let mut y = Vec::with_capacity(record_indices.len());
    for &i in record_indices {
        let r = &ds.records[i];
        x.push(ds.head_slice(r, layer, head).to_vec());
        y.push(r.label);
    }
    (x, y)
}

fn fit_record_indices(
    ds: &ActivationDataset,
    plan: &SplitPlan,
    exclude_fold: Option<usize>,
) -> Vec<usize> {
    let map = ds.pair_index_map();
    plan.fit_pairs(exclude_fold)
        .into_iter()
        .filter_map(|p| map.get(&p).copied())
        .collect()
}

/// One head's direction by the configured method, fit on the given records.
fn direction_for_head(
    ds: &ActivationDataset,
    record_indices: &[usize],
    ccs_pairs: &[(usize, usize)],
    probe: Option<&crate::probe::Probe>,
    head: (usize, usize),
    method: DirectionMethod,
    seed: u64,
) -> Result<Vec<f32>> {
    match method {
        DirectionMethod::MassMean => {
            let (x, y) = head_features(ds, record_indices, head.0, head.1);
            mass_mean_direction(&x, &y)
        }
        DirectionMethod::ProbeWeight => {
            let probe = probe.ok_or_else(|| {
                Error::InvalidArg(format!("no trained probe for head ({}, {})", head.0, head.1))
            })?;
            probe_weight_direction(probe)
        }
        DirectionMethod::Random => {
            let head_seed = seed ^ ((head.0 as u64) << 32 | head.1 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            Ok(random_direction(ds.head_dim, head_seed))
        }
        DirectionMethod::Ccs => {
            let pairs: Vec<(Vec<f32>, Vec<f32>)> = ccs_pairs
                .iter()
                .map(|&(p, n)| {
                    (
                        ds.head_slice(&ds.records[p], head.0, head.1).to_vec(),
                        ds.head_slice(&ds.records[n], head.0, head.1).to_vec(),
                    )
                })
                .collect();
            Ok(ccs_direction(&pairs, seed)?.direction)
        }
    }
}

/// Fit probes, selection, directions, and sigmas on every fold except
/// `exclude_fold`, and assemble the spec. Held-out records are never read.
pub fn fit_fold(
    ds: &ActivationDataset,
    plan: &SplitPlan,
    exclude_fold: Option<usize>,
    cfg: &FitConfig,
) -> Result<FoldFit> {
    let settings = TrainSettings::default();
    let grid = probe_all_heads(ds, plan, exclude_fold, &settings)?;

    let selection = match cfg.selector {
        SelectorKind::HeadWise => select_heads(&grid.matrix, cfg.k)?,
        SelectorKind::AllHeads => HeadSelection::AllHeads,
        SelectorKind::PointWise => {
            train_concat_probe(ds, plan, exclude_fold, cfg.k, &settings)?.1
        }
    };

    let needed: BTreeSet<(usize, usize)> = match &selection {
        HeadSelection::HeadWise(list) => list.iter().copied().collect(),
        HeadSelection::AllHeads => (0..ds.n_layers)
            .flat_map(|l| (0..ds.n_heads).map(move |h| (l, h)))
            .collect(),
        HeadSelection::PointWise { coords, .. } => coords
            .iter()
            .map(|&c| {
                let l = c / (ds.n_heads * ds.head_dim);
                let h = (c / ds.head_dim) % ds.n_heads;
                (l, h)
            })
            .collect(),
    };

    let fit_idx = fit_record_indices(ds, plan, exclude_fold);
    let ccs_pairs = if cfg.method == DirectionMethod::Ccs {
        ccs_record_pairs(ds, &fit_idx, cfg.seed)
    } else {
        Vec::new()
    };

    let mut directions: Vec<Direction> = (0..ds.n_layers * ds.n_heads)
        .map(|_| Direction::zero(ds.head_dim, cfg.method))
        .collect();
    for &(l, h) in &needed {
        let probe = grid.probes[l * ds.n_heads + h].as_ref();
        let vector = direction_for_head(ds, &fit_idx, &ccs_pairs, probe, (l, h), cfg.method, cfg.seed)?;
        let sigma = estimate_sigma(ds, (l, h), &vector, plan, exclude_fold)?;
        directions[l * ds.n_heads + h] = Direction {
            vector,
            method: cfg.method,
            sigma,
        };
    }

    let spec = build_spec(&selection, &directions, ds.n_heads, ds.head_dim, cfg.alpha)?;
    Ok(FoldFit {
        matrix: grid.matrix,
        selection,
        directions,
        spec,
    })
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: EvalReport,
    pub per_question: Vec<(usize, bool)>,
    pub fold_fits: Vec<FoldFit>,
}

/// K-fold cross-validated evaluation: directions are fit on the other
/// folds' pairs only, and every question is evaluated exactly once on its
/// own held-out fold.
pub fn cross_validate(
    inputs: &PipelineInputs,
    cfg: &FitConfig,
    corpus: Option<&[Vec<u32>]>,
    kl_reverse: bool,
) -> Result<CvOutcome> {
    let plan = split_folds(inputs.questions, cfg.n_folds, cfg.seed)?;
    let mut per_question = Vec::new();
    let mut fold_fits = Vec::new();
    let mut kl_total = 0.0f64;
    let mut kl_count = 0usize;
    let mut ce_total = 0.0f64;
    for fold in 0..cfg.n_folds {
        let fit = fit_fold(inputs.acts, &plan, Some(fold), cfg)?;
        let held_out_ids: BTreeSet<usize> = plan.questions_in_fold(fold).into_iter().collect();
        let held_out: Vec<Question> = inputs
            .questions
            .iter()
            .filter(|q| held_out_ids.contains(&q.id))
            .cloned()
            .collect();
        let mc = mc_eval(inputs.model, inputs.tokenizer, &held_out, Some(&fit.spec), false)?;
        per_question.extend(mc.per_question);

        let prompts: Vec<Vec<u32>> = held_out
            .iter()
            .map(|q| {
                format_input(&q.question, None, FormatMode::Generation)
                    .map(|t| inputs.tokenizer.encode(&t))
            })
            .collect::<Result<_>>()?;
        kl_total += kl_pre_post(inputs.model, &fit.spec, &prompts, kl_reverse)? * prompts.len() as f64;
        kl_count += prompts.len();

        if let Some(corpus) = corpus {
            ce_total += cross_entropy(inputs.model, corpus, Some(&fit.spec))?;
        }
        fold_fits.push(fit);
    }
    let positives = per_question.iter().filter(|(_, p)| *p).count();
    let report = EvalReport {
        mc_accuracy: positives as f32 / per_question.len() as f32,
        ce: corpus.map(|_| ce_total / cfg.n_folds as f64),
        kl: Some(kl_total / kl_count as f64),
        per_category: category_report(&per_question, inputs.questions),
        config: cfg.eval_config(None),
        no_comment_count: None,
    };
    Ok(CvOutcome {
        report,
        per_question,
        fold_fits,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub alpha: f32,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepMean {
    pub k: usize,
    pub alpha: f32,
    pub mc_accuracy: f32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub means: Vec<SweepMean>,
}

/// Grid sweep over (K, alpha, seed); each cell is a full cross-validated
/// run. Output ordering follows the input lists; per-(K, alpha) means are
/// arithmetic means of the per-seed cells.
pub fn sweep_grid(
    inputs: &PipelineInputs,
    base: &FitConfig,
    k_list: &[usize],
    alpha_list: &[f32],
    seeds: &[u64],
    corpus: Option<&[Vec<u32>]>,
) -> Result<SweepResult> {
    if k_list.is_empty() || alpha_list.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyInput("sweep axis"));
    }
    let mut cells = Vec::new();
    let mut means = Vec::new();
    for &k in k_list {
        for &alpha in alpha_list {
            let mut acc_mc = 0.0f64;
            let mut acc_kl = 0.0f64;
            let mut acc_ce = 0.0f64;
            for &seed in seeds {
                let cfg = FitConfig {
                    k,
                    alpha,
                    seed,
                    ..*base
                };
                let outcome = cross_validate(inputs, &cfg, corpus, false)?;
                acc_mc += f64::from(outcome.report.mc_accuracy);
                acc_kl += outcome.report.kl.unwrap_or(0.0);
                acc_ce += outcome.report.ce.unwrap_or(0.0);
                cells.push(SweepCell {
                    k,
                    alpha,
                    seed,
                    report: outcome.report,
                });
            }
            let n = seeds.len() as f64;
            means.push(SweepMean {
                k,
                alpha,
                mc_accuracy: (acc_mc / n) as f32,
                ce: corpus.map(|_| acc_ce / n),
                kl: Some(acc_kl / n),
            });
        }
    }
    Ok(SweepResult { cells, means })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSizePoint {
    pub fraction: f64,
    pub mc_accuracy: f32,
    /// Cosine between the direction refit on the subsample and the
    /// full-data direction, at the designated (top-ranked) head.
    pub direction_cosine: f32,
    pub head: (usize, usize),
}

/// Shrink the training data to each fraction, refit, and compare the
/// designated head's direction against the full-data one.
pub fn trainsize_curve(
    inputs: &PipelineInputs,
    cfg: &FitConfig,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<TrainSizePoint>> {
    if fractions.is_empty() {
        return Err(Error::EmptyInput("fraction list"));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::InvalidArg("fractions must lie in (0, 1]".into()));
    }
    let plan = split_folds(inputs.questions, cfg.n_folds, cfg.seed)?;
    let eval_fold = cfg.n_folds - 1;
    let full_fit = fit_fold(inputs.acts, &plan, Some(eval_fold), cfg)?;
    let (head_l, head_h) = full_fit
        .matrix
        .ranked()
        .first()
        .map(|&(l, h, _)| (l, h))
        .ok_or_else(|| Error::Degenerate("no head with a trained probe".into()))?;
    // Probe-weight directions depend on probe training internals that are
    // awkward to refit in isolation, so the curve compares mass-mean
    // directions in that case; other methods compare like for like.
    let curve_method = if cfg.method == DirectionMethod::ProbeWeight {
        DirectionMethod::MassMean
    } else {
        cfg.method
    };
    let fit_idx = fit_record_indices(inputs.acts, &plan, Some(eval_fold));
    let full_dir = direction_for_head(
        inputs.acts,
        &fit_idx,
        &ccs_record_pairs(inputs.acts, &fit_idx, cfg.seed),
        None,
        (head_l, head_h),
        curve_method,
        cfg.seed,
    )?;

    let held_out_ids: BTreeSet<usize> = plan.questions_in_fold(eval_fold).into_iter().collect();
    let eval_questions: Vec<Question> = inputs
        .questions
        .iter()
        .filter(|q| held_out_ids.contains(&q.id))
        .cloned()
        .collect();

    let mut points = Vec::with_capacity(fractions.len());
    for (i, &fraction) in fractions.iter().enumerate() {
        let sub = subsample_dataset(inputs.acts, &plan, eval_fold, fraction, seed.wrapping_add(i as u64))?;
        let fit = fit_fold(&sub, &plan, Some(eval_fold), cfg)?;
        let sub_idx = fit_record_indices(&sub, &plan, Some(eval_fold));
        let sub_dir = direction_for_head(
            &sub,
            &sub_idx,
            &ccs_record_pairs(&sub, &sub_idx, cfg.seed),
            None,
            (head_l, head_h),
            curve_method,
            cfg.seed,
        )?;
        let mc = mc_eval(inputs.model, inputs.tokenizer, &eval_questions, Some(&fit.spec), false)?;
        points.push(TrainSizePoint {
            fraction,
            mc_accuracy: mc.accuracy,
            direction_cosine: crate::linalg::cosine(&sub_dir, &full_dir),
            head: (head_l, head_h),
        });
    }
    Ok(points)
}

/// Keep all held-out-fold records plus a seeded fraction of the fitting
/// records. Errors if the subsample ends up single-class.
fn subsample_dataset(
    ds: &ActivationDataset,
    plan: &SplitPlan,
    eval_fold: usize,
    fraction: f64,
    seed: u64,
) -> Result<ActivationDataset> {
    let fit_pairs: BTreeSet<usize> = plan.fit_pairs(Some(eval_fold)).into_iter().collect();
    let mut fit_records: Vec<usize> = (0..ds.records.len())
        .filter(|&i| fit_pairs.contains(&ds.records[i].pair_index))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fit_records.shuffle(&mut rng);
    let keep_n = ((fit_records.len() as f64) * fraction).round().max(1.0) as usize;
    let keep: BTreeSet<usize> = fit_records.into_iter().take(keep_n.min(ds.records.len())).collect();

    let mut records = Vec::new();
    let mut labels = (false, false);
    for (i, r) in ds.records.iter().enumerate() {
        let in_eval = !fit_pairs.contains(&r.pair_index);
        if in_eval || keep.contains(&i) {
            if !in_eval {
                if r.label {
                    labels.0 = true;
                } else {
                    labels.1 = true;
                }
            }
            records.push((r.pair_index, r.question_id, r.label, r.all().to_vec()));
        }
    }
    if !(labels.0 && labels.1) {
        return Err(Error::SingleClass);
    }
    crate::acts::dataset_from_raw(ds.n_layers, ds.n_heads, ds.head_dim, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{softmax, ModelConfig};
    use crate::tokenizer::ByteTokenizer;

    /// Model that assigns every context the same next-token distribution,
    /// peaked at `favored`. All token embeddings share one zero-mean
    /// vector; only the favored unembedding row is nonzero.
    fn constant_preference_model(favored: u8) -> Model {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            head_dim: 4,
            hidden_dim: 4,
            vocab_size: 258,
            max_seq_len: 2048,
        };
        let mut model = Model::zeros(config).unwrap();
        let e = [1.0f32, -1.0, 1.0, -1.0];
        for tok in 0..258 {
            model.tok_emb[tok * 4..tok * 4 + 4].copy_from_slice(&e);
        }
        let row = favored as usize * 4;
        model.unembed[row..row + 4].copy_from_slice(&e);
        model
    }

    fn question(id: usize, correct: &str, incorrect: &str) -> Question {
        Question {
            id,
            category: format!("cat{}", id % 2),
            question: format!("Which {id}?"),
            best_answer: correct.to_string(),
            correct_answers: vec![correct.to_string()],
            incorrect_answers: vec![incorrect.to_string()],
        }
    }

    #[test]
    fn mc_accuracy_always_correct_construction() {
        let model = constant_preference_model(b'a');
        let questions = vec![question(0, "aa", "bb"), question(1, "aaa", "bbb")];
        let out = mc_eval(&model, &ByteTokenizer, &questions, None, false).unwrap();
        assert_eq!(out.accuracy, 1.0);
        // flip the construction: now the incorrect candidate wins
        let questions = vec![question(0, "bb", "aa")];
        let out = mc_eval(&model, &ByteTokenizer, &questions, None, false).unwrap();
        assert_eq!(out.accuracy, 0.0);
    }

    #[test]
    fn no_comment_counting_matches_the_generated_text() {
        // position-programmed model: token embeddings are zero, position
        // p >= start embeds as a one-hot keyed to p - start, and each
        // refusal character's unembedding row lights up at its step, so
        // greedy decoding spells out the string verbatim
        let refusal = "I have no comment";
        let q = question(0, "a", "b");
        let prompt_text = format_input(&q.question, None, FormatMode::Generation).unwrap();
        let start = prompt_text.len() - 1;
        let dim = refusal.len() + 1;
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            head_dim: dim,
            hidden_dim: dim,
            vocab_size: 258,
            max_seq_len: start + 64,
        };
        let mut model = Model::zeros(config).unwrap();
        for (k, byte) in refusal.bytes().enumerate() {
            model.pos_emb[(start + k) * dim + k] = 1.0;
            model.unembed[byte as usize * dim + k] = 1.0;
        }
        let count = count_no_comment(&model, &ByteTokenizer, &[q.clone()], None, refusal.len()).unwrap();
        assert_eq!(count, 1);
        // a shorter budget truncates the string and the match fails
        let count = count_no_comment(&model, &ByteTokenizer, &[q.clone()], None, refusal.len() - 1).unwrap();
        assert_eq!(count, 0);
        let silent = constant_preference_model(b' ');
        assert_eq!(count_no_comment(&silent, &ByteTokenizer, &[q], None, 8).unwrap(), 0);
    }

    #[test]
    fn mc_ties_count_as_incorrect() {
        let model = constant_preference_model(b'a');
        let questions = vec![question(0, "same", "same")];
        let out = mc_eval(&model, &ByteTokenizer, &questions, None, false).unwrap();
        assert_eq!(out.accuracy, 0.0);
    }

    #[test]
    fn mc_is_candidate_order_invariant() {
        let model = constant_preference_model(b'a');
        let mut q = question(0, "aa", "bb");
        q.correct_answers = vec!["ca".into(), "aa".into()];
        q.incorrect_answers = vec!["bb".into(), "bc".into()];
        let a = mc_eval(&model, &ByteTokenizer, &[q.clone()], None, false)
            .unwrap()
            .accuracy;
        q.correct_answers.reverse();
        q.incorrect_answers.reverse();
        let b = mc_eval(&model, &ByteTokenizer, &[q], None, false)
            .unwrap()
            .accuracy;
        assert_eq!(a, b);
    }

    #[test]
    fn cross_entropy_of_uniform_model_is_ln_v() {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            head_dim: 4,
            hidden_dim: 4,
            vocab_size: 32,
            max_seq_len: 64,
        };
        let model = Model::zeros(config).unwrap(); // zero unembedding: uniform
        let corpus = vec![vec![1u32, 5, 9, 2], vec![3u32, 4]];
        let ce = cross_entropy(&model, &corpus, None).unwrap();
        assert!((ce - 32f64.ln()).abs() < 1e-4, "ce {ce}");
        assert!(cross_entropy(&model, &[], None).is_err());
        assert!(cross_entropy(&model, &[vec![1u32]], None).is_err());
    }

    #[test]
    fn hand_computed_two_token_kl() {
        // pre = (1/2, 1/2) from equal logits; post = (9/10, 1/10) from
        // logits (ln 9, 0)
        let pre = softmax(&[0.0, 0.0]);
        let post = softmax(&[9f32.ln(), 0.0]);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let kl = kl_divergence(&pre, &post);
        assert!((kl - expected).abs() < 1e-4, "kl {kl}");
        assert!((kl - 0.5108).abs() < 1e-4);
        assert_eq!(kl_divergence(&pre, &pre), 0.0);
    }

    #[test]
    fn category_report_sums_and_single_category() {
        let questions = vec![question(0, "a", "b"), question(1, "a", "b"), question(2, "a", "b")];
        let per_question = vec![(0, true), (1, false), (2, true)];
        let rows = category_report(&per_question, &questions);
        let total: usize = rows.iter().map(|r| r.count).sum();
        assert_eq!(total, 3);

        let single: Vec<Question> = questions
            .iter()
            .map(|q| Question {
                category: "only".into(),
                ..q.clone()
            })
            .collect();
        let rows = category_report(&per_question, &single);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].accuracy - 2.0 / 3.0).abs() < 1e-6);
    }
}
