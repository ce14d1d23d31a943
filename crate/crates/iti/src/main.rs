//! Command-line front end for the truthfulness-steering pipeline.
//!
//! Every JSON/TSV output embeds the run configuration and SHA-256 hashes of
//! its input files; binary outputs get a sidecar `.manifest.json` with the
//! same information.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use iti::acts::{collect_activations, load_dataset, save_dataset, ActivationDataset};
use iti::data::{
    flatten_qa_pairs, format_input, parse_truthfulqa_csv, split_folds, FormatMode, Question,
};
use iti::direction::DirectionMethod;
use iti::eval::{
    category_report, cross_entropy, cross_validate, fit_fold, kl_pre_post, mc_eval, sweep_grid,
    trainsize_curve, EvalReport, FitConfig, PipelineInputs,
};
use iti::intervene::{bake_bias, InterventionSpec, SelectorKind};
use iti::linalg::dot;
use iti::model::{Model, ModelConfig};
use iti::probe::{
    probe_all_heads, train_orthogonal_probe, HeadAccuracyMatrix, Probe, TrainSettings,
};
use iti::provenance::{atomic_write, hash_file};
use iti::tokenizer::{ByteTokenizer, Tokenizer, BYTE_VOCAB_SIZE};

#[derive(Parser)]
#[command(name = "iti", about = "Probe and steer truthfulness in small transformers", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirMethodArg {
    MassMean,
    ProbeWeight,
    Ccs,
    Random,
}

impl From<DirMethodArg> for DirectionMethod {
    fn from(a: DirMethodArg) -> Self {
        match a {
            DirMethodArg::MassMean => DirectionMethod::MassMean,
            DirMethodArg::ProbeWeight => DirectionMethod::ProbeWeight,
            DirMethodArg::Ccs => DirectionMethod::Ccs,
            DirMethodArg::Random => DirectionMethod::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SelectorArg {
    Head,
    Pointwise,
    All,
}

impl From<SelectorArg> for SelectorKind {
    fn from(a: SelectorArg) -> Self {
        match a {
            SelectorArg::Head => SelectorKind::HeadWise,
            SelectorArg::Pointwise => SelectorKind::PointWise,
            SelectorArg::All => SelectorKind::AllHeads,
        }
    }
}

/// Flags shared by every fitting subcommand.
#[derive(Debug, Args)]
struct FitArgs {
    /// Number of heads to steer (or K for pointwise coordinate count)
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Intervention strength
    #[arg(long, default_value_t = 15.0)]
    alpha: f32,
    #[arg(long = "dir-method", value_enum, default_value_t = DirMethodArg::MassMean)]
    dir_method: DirMethodArg,
    #[arg(long, value_enum, default_value_t = SelectorArg::Head)]
    selector: SelectorArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    folds: usize,
}

impl FitArgs {
    fn config(&self) -> anyhow::Result<FitConfig> {
        if self.selector == SelectorArg::Pointwise && self.k == 0 {
            bail!("--selector pointwise requires --k >= 1");
        }
        Ok(FitConfig {
            k: self.k,
            alpha: self.alpha,
            method: self.dir_method.into(),
            selector: self.selector.into(),
            n_folds: self.folds,
            seed: self.seed,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Create a randomly initialized model file
    InitModel {
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long = "head-dim", default_value_t = 8)]
        head_dim: usize,
        #[arg(long, default_value_t = BYTE_VOCAB_SIZE)]
        vocab: usize,
        #[arg(long = "max-seq", default_value_t = 2048)]
        max_seq: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every question/answer pair through the model and store per-head
    /// activations at the final prompt token
    Collect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per-head truth probes and write the accuracy grid
    Probe {
        #[arg(long)]
        acts: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute steering directions and scales for every head
    Direction {
        #[arg(long)]
        acts: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "dir-method", value_enum, default_value_t = DirMethodArg::MassMean)]
        dir_method: DirMethodArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit probes + directions and emit a complete intervention spec
    Spec {
        #[arg(long)]
        acts: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold an intervention spec into the model's output-projection biases
    Bake {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy generation from a prompt, optionally steered
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Question text; wrapped in the few-shot QA prompt
        #[arg(long)]
        prompt: String,
        #[arg(long = "max-new", default_value_t = 64)]
        max_new: usize,
    },
    /// Multiple-choice accuracy over the dataset
    EvalMc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "len-norm", default_value_t = false)]
        len_norm: bool,
        /// Hide categories with fewer questions than this from the report
        #[arg(long = "min-category", default_value_t = 10)]
        min_category: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-entropy (nats per token) on a plain-text corpus
    EvalCe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean next-token KL between unsteered and steered model
    EvalKl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "kl-reverse", default_value_t = false)]
        kl_reverse: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid sweep over K, alpha, and seeds; each cell is a cross-validated run
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        acts: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f32>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long = "dir-method", value_enum, default_value_t = DirMethodArg::MassMean)]
        dir_method: DirMethodArg,
        #[arg(long, value_enum, default_value_t = SelectorArg::Head)]
        selector: SelectorArg,
        #[arg(long, default_value_t = 2)]
        folds: usize,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated evaluation with held-out folds
    Cv {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        acts: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long = "kl-reverse", default_value_t = false)]
        kl_reverse: bool,
        #[arg(long = "min-category", default_value_t = 10)]
        min_category: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refit on shrunken training sets and track direction stability
    Trainsize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        acts: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit plot-ready TSV tables from previously computed artifacts
    PlotData {
        /// Probe report produced by the `probe` subcommand
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        acts: PathBuf,
        /// Sweep report to convert into a flat table
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Train-size report to convert into a flat table
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_questions(path: &Path) -> anyhow::Result<Vec<Question>> {
    parse_truthfulqa_csv(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_spec(path: &Path) -> anyhow::Result<InterventionSpec> {
    InterventionSpec::load(path).with_context(|| format!("loading spec {}", path.display()))
}

/// Hash a list of (label, path) inputs into a provenance map.
fn input_hashes(inputs: &[(&str, &Path)]) -> anyhow::Result<serde_json::Value> {
    let mut map = serde_json::Map::new();
    for (label, path) in inputs {
        map.insert(label.to_string(), json!(hash_file(path)?));
    }
    Ok(serde_json::Value::Object(map))
}

/// Corpus file -> token windows of at most max_seq_len, each >= 2 tokens.
fn load_corpus(path: &Path, tokenizer: &dyn Tokenizer, max_len: usize) -> anyhow::Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("loading corpus {}", path.display()))?;
    let tokens = tokenizer.encode(&text);
    let windows: Vec<Vec<u32>> = tokens
        .chunks(max_len)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect();
    if windows.is_empty() {
        bail!("corpus {} yields no usable token windows", path.display());
    }
    Ok(windows)
}

fn filtered_report(mut report: EvalReport, min_category: usize) -> EvalReport {
    report.per_category.retain(|r| r.count >= min_category);
    report
}

#[derive(Serialize)]
struct ProbeReport {
    inputs: serde_json::Value,
    folds: usize,
    seed: u64,
    matrix: HeadAccuracyMatrix,
    probes: Vec<Option<Probe>>,
    errors: Vec<(usize, usize, String)>,
    top_head: Option<(usize, usize)>,
    orthogonal_probe: Option<Probe>,
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let tokenizer = ByteTokenizer;
    match cli.command {
        Command::InitModel { layers, heads, head_dim, vocab, max_seq, seed, out } => {
            let config = ModelConfig {
                n_layers: layers,
                n_heads: heads,
                head_dim,
                hidden_dim: heads * head_dim,
                vocab_size: vocab,
                max_seq_len: max_seq,
            };
            let model = Model::random(config, seed)?;
            model.save(&out)?;
            println!("wrote model {}", out.display());
        }
        Command::Collect { model, data, out } => {
            let m = load_model(&model)?;
            let questions = load_questions(&data)?;
            let pairs = flatten_qa_pairs(&questions);
            let (ds, skips) = collect_activations(&m, &tokenizer, &questions, &pairs)?;
            save_dataset(&ds, &out)?;
            let manifest = json!({
                "inputs": input_hashes(&[("model", model.as_path()), ("data", data.as_path())])?,
                "records": ds.records.len(),
                "skipped": skips,
            });
            let manifest_path = out.with_extension("manifest.json");
            write_json(&manifest_path, &manifest)?;
            println!(
                "wrote {} records to {} ({} skipped), manifest {}",
                ds.records.len(),
                out.display(),
                skips.len(),
                manifest_path.display()
            );
        }
        Command::Probe { acts, data, folds, seed, out } => {
            let ds = load_dataset(&acts)?;
            let questions = load_questions(&data)?;
            let plan = split_folds(&questions, folds, seed)?;
            let settings = TrainSettings::default();
            let grid = probe_all_heads(&ds, &plan, None, &settings)?;
            let top = grid.matrix.ranked().first().map(|&(l, h, _)| (l, h));
            let orthogonal = match top {
                Some((l, h)) => {
                    let first = grid.probes[l * ds.n_heads + h]
                        .as_ref()
                        .ok_or_else(|| anyhow!("top head ({l}, {h}) has no probe"))?;
                    let (tx, ty) = head_matrix(&ds, &plan.train_pairs(None), l, h);
                    let (vx, vy) = head_matrix(&ds, &plan.val_pairs(None), l, h);
                    Some(train_orthogonal_probe(&tx, &ty, &vx, &vy, first, &settings)?)
                }
                None => None,
            };
            let report = ProbeReport {
                inputs: input_hashes(&[("acts", acts.as_path()), ("data", data.as_path())])?,
                folds,
                seed,
                matrix: grid.matrix,
                probes: grid.probes,
                errors: grid.errors,
                top_head: top,
                orthogonal_probe: orthogonal,
            };
            write_json(&out, &report)?;
            println!("wrote probe report {}", out.display());
        }
        Command::Direction { acts, data, dir_method, seed, folds, out } => {
            let ds = load_dataset(&acts)?;
            let questions = load_questions(&data)?;
            let plan = split_folds(&questions, folds, seed)?;
            let cfg = FitConfig {
                k: ds.n_layers * ds.n_heads,
                alpha: 1.0,
                method: dir_method.into(),
                selector: SelectorKind::AllHeads,
                n_folds: folds,
                seed,
            };
            let fit = fit_fold(&ds, &plan, None, &cfg)?;
            let rows: Vec<serde_json::Value> = (0..ds.n_layers)
                .flat_map(|l| (0..ds.n_heads).map(move |h| (l, h)))
                .map(|(l, h)| {
                    let d = &fit.directions[l * ds.n_heads + h];
                    json!({"layer": l, "head": h, "direction": d.vector, "sigma": d.sigma})
                })
                .collect();
            let report = json!({
                "inputs": input_hashes(&[("acts", acts.as_path()), ("data", data.as_path())])?,
                "method": DirectionMethod::from(dir_method),
                "seed": seed,
                "folds": folds,
                "directions": rows,
            });
            write_json(&out, &report)?;
            println!("wrote directions {}", out.display());
        }
        Command::Spec { acts, data, fit, out } => {
            let cfg = fit.config()?;
            let ds = load_dataset(&acts)?;
            let questions = load_questions(&data)?;
            let plan = split_folds(&questions, cfg.n_folds, cfg.seed)?;
            let fitted = fit_fold(&ds, &plan, None, &cfg)?;
            let mut spec = fitted.spec;
            spec.provenance.dataset_hash = Some(hash_file(&acts)?);
            spec.provenance.method = Some(cfg.method.to_string());
            spec.provenance.seed = Some(cfg.seed);
            spec.save(&out)?;
            println!(
                "wrote spec {} ({} heads, alpha {})",
                out.display(),
                spec.entries.len(),
                spec.alpha
            );
        }
        Command::Bake { model, spec, out } => {
            let m = load_model(&model)?;
            let s = load_spec(&spec)?;
            s.validate(&m.config)?;
            let baked = bake_bias(&m, &s)?;
            baked.save(&out)?;
            let manifest = json!({
                "inputs": input_hashes(&[("model", model.as_path()), ("spec", spec.as_path())])?,
                "alpha": s.alpha,
                "heads": s.entries.len(),
            });
            write_json(&out.with_extension("manifest.json"), &manifest)?;
            println!("wrote baked model {}", out.display());
        }
        Command::Generate { model, spec, prompt, max_new } => {
            let m = load_model(&model)?;
            let s = spec.as_deref().map(load_spec).transpose()?;
            if let Some(s) = &s {
                s.validate(&m.config)?;
            }
            let text = format_input(&prompt, None, FormatMode::Generation)?;
            let tokens = tokenizer.encode(&text);
            let budget = max_new.min(m.config.max_seq_len.saturating_sub(tokens.len()));
            let generated = m.generate_greedy(&tokens, budget, s.as_ref())?;
            println!("{}", tokenizer.decode(&generated));
        }
        Command::EvalMc { model, data, spec, len_norm, min_category, out } => {
            let m = load_model(&model)?;
            let questions = load_questions(&data)?;
            let s = spec.as_deref().map(load_spec).transpose()?;
            let mc = mc_eval(&m, &tokenizer, &questions, s.as_ref(), len_norm)?;
            let rows = category_report(&mc.per_question, &questions);
            let shown: Vec<_> = rows.into_iter().filter(|r| r.count >= min_category).collect();
            let mut inputs = vec![("model", model.as_path()), ("data", data.as_path())];
            if let Some(p) = spec.as_deref() {
                inputs.push(("spec", p));
            }
            let report = json!({
                "inputs": input_hashes(&inputs)?,
                "mc_accuracy": mc.accuracy,
                "length_normalized": len_norm,
                "min_category": min_category,
                "per_category": shown,
            });
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            println!("mc_accuracy {}", mc.accuracy);
        }
        Command::EvalCe { model, corpus, spec, out } => {
            let m = load_model(&model)?;
            let s = spec.as_deref().map(load_spec).transpose()?;
            let windows = load_corpus(&corpus, &tokenizer, m.config.max_seq_len)?;
            let ce = cross_entropy(&m, &windows, s.as_ref())?;
            let mut inputs = vec![("model", model.as_path()), ("corpus", corpus.as_path())];
            if let Some(p) = spec.as_deref() {
                inputs.push(("spec", p));
            }
            let report = json!({
                "inputs": input_hashes(&inputs)?,
                "ce_nats_per_token": ce,
                "windows": windows.len(),
            });
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            println!("ce {ce}");
        }
        Command::EvalKl { model, data, spec, kl_reverse, out } => {
            let m = load_model(&model)?;
            let questions = load_questions(&data)?;
            let s = load_spec(&spec)?;
            s.validate(&m.config)?;
            let prompts: Vec<Vec<u32>> = questions
                .iter()
                .map(|q| {
                    format_input(&q.question, None, FormatMode::Generation)
                        .map(|t| tokenizer.encode(&t))
                })
                .collect::<iti::Result<_>>()?;
            let kl = kl_pre_post(&m, &s, &prompts, kl_reverse)?;
            let report = json!({
                "inputs": input_hashes(&[
                    ("model", model.as_path()),
                    ("data", data.as_path()),
                    ("spec", spec.as_path()),
                ])?,
                "kl_nats": kl,
                "reverse": kl_reverse,
            });
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            println!("kl {kl}");
        }
        Command::Sweep {
            model, data, acts, k, alpha, seeds, dir_method, selector, folds, corpus, out,
        } => {
            let m = load_model(&model)?;
            let questions = load_questions(&data)?;
            let ds = load_dataset(&acts)?;
            let windows = corpus
                .as_deref()
                .map(|p| load_corpus(p, &tokenizer, m.config.max_seq_len))
                .transpose()?;
            let inputs = PipelineInputs {
                model: &m,
                tokenizer: &tokenizer,
                questions: &questions,
                acts: &ds,
            };
            let base = FitConfig {
                k: k[0],
                alpha: alpha[0],
                method: dir_method.into(),
                selector: selector.into(),
                n_folds: folds,
                seed: seeds[0],
            };
            let result = sweep_grid(&inputs, &base, &k, &alpha, &seeds, windows.as_deref())?;
            let mut hashed = vec![("model", model.as_path()), ("data", data.as_path()), ("acts", acts.as_path())];
            if let Some(p) = corpus.as_deref() {
                hashed.push(("corpus", p));
            }
            let report = json!({
                "inputs": input_hashes(&hashed)?,
                "k": k,
                "alpha": alpha,
                "seeds": seeds,
                "folds": folds,
                "method": DirectionMethod::from(dir_method),
                "cells": result.cells,
                "means": result.means,
            });
            write_json(&out, &report)?;
            println!("wrote sweep {} ({} cells)", out.display(), result.cells.len());
        }
        Command::Cv { model, data, acts, fit, corpus, kl_reverse, min_category, out } => {
            let cfg = fit.config()?;
            let m = load_model(&model)?;
            let questions = load_questions(&data)?;
            let ds = load_dataset(&acts)?;
            let windows = corpus
                .as_deref()
                .map(|p| load_corpus(p, &tokenizer, m.config.max_seq_len))
                .transpose()?;
            let inputs = PipelineInputs {
                model: &m,
                tokenizer: &tokenizer,
                questions: &questions,
                acts: &ds,
            };
            let outcome = cross_validate(&inputs, &cfg, windows.as_deref(), kl_reverse)?;
            let report = filtered_report(outcome.report, min_category);
            let mut hashed = vec![("model", model.as_path()), ("data", data.as_path()), ("acts", acts.as_path())];
            if let Some(p) = corpus.as_deref() {
                hashed.push(("corpus", p));
            }
            let doc = json!({
                "inputs": input_hashes(&hashed)?,
                "report": report,
                "per_question": outcome.per_question,
            });
            write_json(&out, &doc)?;
            println!("mc_accuracy {}", report.mc_accuracy);
        }
        Command::Trainsize { model, data, acts, fit, fractions, out } => {
            let cfg = fit.config()?;
            let m = load_model(&model)?;
            let questions = load_questions(&data)?;
            let ds = load_dataset(&acts)?;
            let inputs = PipelineInputs {
                model: &m,
                tokenizer: &tokenizer,
                questions: &questions,
                acts: &ds,
            };
            let points = trainsize_curve(&inputs, &cfg, &fractions, cfg.seed)?;
            let doc = json!({
                "inputs": input_hashes(&[
                    ("model", model.as_path()),
                    ("data", data.as_path()),
                    ("acts", acts.as_path()),
                ])?,
                "points": points,
            });
            write_json(&out, &doc)?;
            println!("wrote curve {} ({} points)", out.display(), points.len());
        }
        Command::PlotData { probes, acts, sweep, curve, out } => {
            emit_plot_data(&probes, &acts, sweep.as_deref(), curve.as_deref(), &out)?;
        }
    }
    Ok(())
}

fn head_matrix(
    ds: &ActivationDataset,
    pair_indices: &[usize],
    layer: usize,
    head: usize,
) -> (Vec<Vec<f32>>, Vec<bool>) {
    let map = ds.pair_index_map();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for p in pair_indices {
        if let Some(&i) = map.get(p) {
            let r = &ds.records[i];
            x.push(ds.head_slice(r, layer, head).to_vec());
            y.push(r.label);
        }
    }
    (x, y)
}

fn emit_plot_data(
    probes_path: &Path,
    acts_path: &Path,
    sweep: Option<&Path>,
    curve: Option<&Path>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let probes_text = std::fs::read_to_string(probes_path)
        .with_context(|| format!("loading probe report {}", probes_path.display()))?;
    let report: serde_json::Value = serde_json::from_str(&probes_text)?;
    let matrix: HeadAccuracyMatrix = serde_json::from_value(
        report
            .get("matrix")
            .cloned()
            .ok_or_else(|| anyhow!("probe report lacks a matrix field"))?,
    )?;
    let ds = load_dataset(acts_path)?;
    if matrix.n_layers != ds.n_layers || matrix.n_heads != ds.n_heads {
        bail!(
            "probe grid is {}x{} but activation file is {}x{}",
            matrix.n_layers,
            matrix.n_heads,
            ds.n_layers,
            ds.n_heads
        );
    }
    let provenance = format!(
        "# probes={} acts={}\n",
        hash_file(probes_path)?,
        hash_file(acts_path)?
    );

    // heatmap: L rows x H columns, plus a variant with each row sorted
    // descending so layer profiles are comparable
    let mut heat = provenance.clone();
    let mut heat_sorted = provenance.clone();
    for l in 0..matrix.n_layers {
        let row: Vec<f32> = (0..matrix.n_heads).map(|h| matrix.get(l, h)).collect();
        heat.push_str(&join_floats(&row));
        heat.push('\n');
        let mut sorted = row;
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        heat_sorted.push_str(&join_floats(&sorted));
        heat_sorted.push('\n');
    }
    atomic_write(&out_dir.join("heatmap.tsv"), heat.as_bytes())?;
    atomic_write(&out_dir.join("heatmap_sorted.tsv"), heat_sorted.as_bytes())?;

    // scatter: each record projected onto the top head's probe direction
    // and its orthogonal companion
    let top: Option<(usize, usize)> = serde_json::from_value(
        report.get("top_head").cloned().unwrap_or(serde_json::Value::Null),
    )?;
    if let Some((l, h)) = top {
        let probes: Vec<Option<Probe>> =
            serde_json::from_value(report.get("probes").cloned().unwrap_or_default())?;
        let ortho: Option<Probe> = serde_json::from_value(
            report
                .get("orthogonal_probe")
                .cloned()
                .unwrap_or(serde_json::Value::Null),
        )?;
        let first = probes
            .get(l * ds.n_heads + h)
            .and_then(|p| p.as_ref())
            .ok_or_else(|| anyhow!("probe report lacks the top head's probe"))?;
        let ortho = ortho.ok_or_else(|| anyhow!("probe report lacks the orthogonal probe"))?;
        let d1 = unit(&first.theta)?;
        let d2 = unit(&ortho.theta)?;
        let mut scatter = provenance.clone();
        scatter.push_str(&format!("# head={l},{h}\n"));
        scatter.push_str("proj1\tproj2\tlabel\n");
        for r in &ds.records {
            let x = ds.head_slice(r, l, h);
            scatter.push_str(&format!(
                "{}\t{}\t{}\n",
                dot(x, &d1),
                dot(x, &d2),
                u8::from(r.label)
            ));
        }
        atomic_write(&out_dir.join("scatter.tsv"), scatter.as_bytes())?;
    }

    if let Some(path) = sweep {
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let cells = doc
            .get("cells")
            .and_then(|c| c.as_array())
            .ok_or_else(|| anyhow!("sweep report lacks cells"))?;
        let mut table = format!("# sweep={}\n", hash_file(path)?);
        table.push_str("k\talpha\tseed\tmc_accuracy\tce\tkl\n");
        for cell in cells {
            let rep = &cell["report"];
            table.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                cell["k"],
                cell["alpha"],
                cell["seed"],
                rep["mc_accuracy"],
                rep.get("ce").cloned().unwrap_or(serde_json::Value::Null),
                rep.get("kl").cloned().unwrap_or(serde_json::Value::Null),
            ));
        }
        atomic_write(&out_dir.join("sweep.tsv"), table.as_bytes())?;
    }

    if let Some(path) = curve {
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let points = doc
            .get("points")
            .and_then(|p| p.as_array())
            .ok_or_else(|| anyhow!("train-size report lacks points"))?;
        let mut table = format!("# curve={}\n", hash_file(path)?);
        table.push_str("fraction\tmc_accuracy\tdirection_cosine\n");
        for p in points {
            table.push_str(&format!(
                "{}\t{}\t{}\n",
                p["fraction"], p["mc_accuracy"], p["direction_cosine"]
            ));
        }
        atomic_write(&out_dir.join("curve.tsv"), table.as_bytes())?;
    }
    println!("wrote plot data to {}", out_dir.display());
    Ok(())
}

fn join_floats(row: &[f32]) -> String {
    row.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("\t")
}

fn unit(v: &[f32]) -> anyhow::Result<Vec<f32>> {
    iti::linalg::normalize(v).ok_or_else(|| anyhow!("zero-norm probe direction"))
}
