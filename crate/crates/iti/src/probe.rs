//! Per-head linear truthfulness probes.
//!
//! A probe is `sigmoid(<theta, x> + intercept)` fit by full-batch gradient
//! descent on L2-regularized logistic loss with backtracking line search
//! (fixed defaults: L2 1e-3, gradient-norm stop 1e-6, 2000 iterations max).
//! The intercept is included even though the sigmoid form omits one, since
//! head activations are not mean-centered. The orthogonal second probe is
//! the same optimization restricted to the hyperplane orthogonal to the
//! first probe's direction.

use serde::{Deserialize, Serialize};

use crate::acts::ActivationDataset;
use crate::data::SplitPlan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub l2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            l2: 1e-3,
            max_iters: 2000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub theta: Vec<f32>,
    pub intercept: f32,
    pub train_accuracy: f32,
    pub val_accuracy: f32,
}

/// L x H grid of validation accuracies; NaN marks a head whose probe
/// failed to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracyMatrix {
    pub n_layers: usize,
    pub n_heads: usize,
    pub values: Vec<f32>,
}

impl HeadAccuracyMatrix {
    pub fn get(&self, layer: usize, head: usize) -> f32 {
        self.values[layer * self.n_heads + head]
    }

    /// Heads ordered by accuracy descending, ties broken by ascending
    /// (layer, head). NaN entries are excluded.
    pub fn ranked(&self) -> Vec<(usize, usize, f32)> {
        let mut heads: Vec<(usize, usize, f32)> = (0..self.n_layers)
            .flat_map(|l| (0..self.n_heads).map(move |h| (l, h)))
            .map(|(l, h)| (l, h, self.get(l, h)))
            .filter(|(_, _, a)| a.is_finite())
            .collect();
        heads.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelection {
    /// Top-K heads by probe validation accuracy.
    HeadWise(Vec<(usize, usize)>),
    /// K*D individual activation coordinates (global indices
    /// layer*H*D + head*D + dim) ranked by |theta| of the concatenated probe.
    PointWise { coords: Vec<usize>, k: usize },
    AllHeads,
}

/// Probes for every head plus their accuracy grid. Per-head training
/// failures are recorded, not fatal.
#[derive(Debug, Clone)]
pub struct ProbeGrid {
    pub matrix: HeadAccuracyMatrix,
    pub probes: Vec<Option<Probe>>,
    pub errors: Vec<(usize, usize, String)>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_training_input(x: &[Vec<f32>], y: &[bool]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch(format!(
            "{} feature rows vs {} labels",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArg("need at least 2 training samples".into()));
    }
    if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
        return Err(Error::SingleClass);
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim) {
        return Err(Error::DimMismatch("inconsistent feature dimension".into()));
    }
    Ok(dim)
}

struct LogisticProblem<'a> {
    x: &'a [Vec<f32>],
    y: &'a [bool],
    l2: f64,
    /// Optimize within the hyperplane orthogonal to this unit vector.
    constraint: Option<Vec<f64>>,
}

impl LogisticProblem<'_> {
    fn project(&self, w: &mut [f64]) {
        if let Some(u) = &self.constraint {
            let proj: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
            for (wi, ui) in w.iter_mut().zip(u) {
                *wi -= proj * ui;
            }
        }
    }

    fn loss(&self, w: &[f64], b: f64) -> f64 {
        let n = self.x.len() as f64;
        let mut total = 0.0f64;
        for (row, &label) in self.x.iter().zip(self.y) {
            let z = b + row.iter().zip(w).map(|(x, w)| f64::from(*x) * w).sum::<f64>();
            total += softplus(z) - if label { z } else { 0.0 };
        }
        total / n + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn grad(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let n = self.x.len() as f64;
        let mut gw = vec![0.0f64; w.len()];
        let mut gb = 0.0f64;
        for (row, &label) in self.x.iter().zip(self.y) {
            let z = b + row.iter().zip(w).map(|(x, w)| f64::from(*x) * w).sum::<f64>();
            let r = sigmoid(z) - if label { 1.0 } else { 0.0 };
            for (g, x) in gw.iter_mut().zip(row) {
                *g += r * f64::from(*x);
            }
            gb += r;
        }
        for (g, wi) in gw.iter_mut().zip(w) {
            *g = *g / n + self.l2 * wi;
        }
        self.project(&mut gw);
        (gw, gb / n)
    }

    fn solve(&self, dim: usize, settings: &TrainSettings) -> (Vec<f64>, f64) {
        let mut w = vec![0.0f64; dim];
        let mut b = 0.0f64;
        let mut loss = self.loss(&w, b);
        for _ in 0..settings.max_iters {
            let (gw, gb) = self.grad(&w, b);
            let gnorm2: f64 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
            if gnorm2.sqrt() <= settings.grad_tol {
                break;
            }
            let mut step = 1.0f64;
            loop {
                let mut w_new: Vec<f64> = w.iter().zip(&gw).map(|(w, g)| w - step * g).collect();
                self.project(&mut w_new);
                let b_new = b - step * gb;
                let loss_new = self.loss(&w_new, b_new);
                if loss_new <= loss - 0.5 * step * gnorm2 || step < 1e-14 {
                    w = w_new;
                    b = b_new;
                    loss = loss_new;
                    break;
                }
                step *= 0.5;
            }
            if loss.is_nan() {
                break;
            }
        }
        self.project(&mut w);
        (w, b)
    }
}

/// Fraction of samples the probe classifies correctly at threshold 0.5.
/// A predicted probability of exactly 0.5 counts as incorrect.
pub fn probe_accuracy(theta: &[f32], intercept: f32, x: &[Vec<f32>], y: &[bool]) -> f32 {
    if x.is_empty() {
        return f32::NAN;
    }
    let correct = x
        .iter()
        .zip(y)
        .filter(|(row, &label)| {
            let z = f64::from(intercept)
                + row
                    .iter()
                    .zip(theta)
                    .map(|(x, t)| f64::from(*x) * f64::from(*t))
                    .sum::<f64>();
            if label {
                z > 0.0
            } else {
                z < 0.0
            }
        })
        .count();
    correct as f32 / x.len() as f32
}

pub fn train_probe(
    train_x: &[Vec<f32>],
    train_y: &[bool],
    val_x: &[Vec<f32>],
    val_y: &[bool],
    settings: &TrainSettings,
) -> Result<Probe> {
    let dim = check_training_input(train_x, train_y)?;
    let problem = LogisticProblem {
        x: train_x,
        y: train_y,
        l2: settings.l2,
        constraint: None,
    };
    let (w, b) = problem.solve(dim, settings);
    finish_probe(w, b, train_x, train_y, val_x, val_y)
}

/// Train a second probe constrained to the hyperplane orthogonal to the
/// first probe's direction.
pub fn train_orthogonal_probe(
    train_x: &[Vec<f32>],
    train_y: &[bool],
    val_x: &[Vec<f32>],
    val_y: &[bool],
    first: &Probe,
    settings: &TrainSettings,
) -> Result<Probe> {
    let dim = check_training_input(train_x, train_y)?;
    if first.theta.len() != dim {
        return Err(Error::DimMismatch("first probe dimension".into()));
    }
    let norm: f64 = first
        .theta
        .iter()
        .map(|&t| f64::from(t) * f64::from(t))
        .sum::<f64>()
        .sqrt();
    if norm <= 1e-12 {
        return Err(Error::Degenerate("first probe has zero direction".into()));
    }
    let u: Vec<f64> = first.theta.iter().map(|&t| f64::from(t) / norm).collect();
    let problem = LogisticProblem {
        x: train_x,
        y: train_y,
        l2: settings.l2,
        constraint: Some(u.clone()),
    };
    let (mut w, b) = problem.solve(dim, settings);
    // exact final projection so the stored f32 vector meets the tolerance
    let proj: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
    for (wi, ui) in w.iter_mut().zip(&u) {
        *wi -= proj * ui;
    }
    finish_probe(w, b, train_x, train_y, val_x, val_y)
}

fn finish_probe(
    w: Vec<f64>,
    b: f64,
    train_x: &[Vec<f32>],
    train_y: &[bool],
    val_x: &[Vec<f32>],
    val_y: &[bool],
) -> Result<Probe> {
    if val_x.len() != val_y.len() {
        return Err(Error::DimMismatch("validation rows vs labels".into()));
    }
    let theta: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let intercept = b as f32;
    Ok(Probe {
        train_accuracy: probe_accuracy(&theta, intercept, train_x, train_y),
        val_accuracy: probe_accuracy(&theta, intercept, val_x, val_y),
        theta,
        intercept,
    })
}

fn gather_head(
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

/// Resolve the plan's pair-index sets to dataset record indices (skipped
/// pairs simply have no record).
fn record_indices(ds: &ActivationDataset, pair_indices: &[usize]) -> Vec<usize> {
    let map = ds.pair_index_map();
    pair_indices
        .iter()
        .filter_map(|p| map.get(p).copied())
        .collect()
}

/// Train one probe per head on the plan's training pairs and score it on
/// the validation pairs. `exclude_fold` drops a held-out fold entirely.
pub fn probe_all_heads(
    ds: &ActivationDataset,
    plan: &SplitPlan,
    exclude_fold: Option<usize>,
    settings: &TrainSettings,
) -> Result<ProbeGrid> {
    let train_idx = record_indices(ds, &plan.train_pairs(exclude_fold));
    let val_idx = record_indices(ds, &plan.val_pairs(exclude_fold));
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::EmptyInput("train or validation record set"));
    }
    let (l_n, h_n) = (ds.n_layers, ds.n_heads);
    let mut values = vec![f32::NAN; l_n * h_n];
    let mut probes: Vec<Option<Probe>> = vec![None; l_n * h_n];
    let mut errors = Vec::new();
    for l in 0..l_n {
        for h in 0..h_n {
            let (tx, ty) = gather_head(ds, &train_idx, l, h);
            let (vx, vy) = gather_head(ds, &val_idx, l, h);
            match train_probe(&tx, &ty, &vx, &vy, settings) {
                Ok(p) => {
                    values[l * h_n + h] = p.val_accuracy;
                    probes[l * h_n + h] = Some(p);
                }
                Err(e) => errors.push((l, h, e.to_string())),
            }
        }
    }
    Ok(ProbeGrid {
        matrix: HeadAccuracyMatrix {
            n_layers: l_n,
            n_heads: h_n,
            values,
        },
        probes,
        errors,
    })
}

/// Top-K heads by validation accuracy, ties broken by ascending
/// (layer, head).
pub fn select_heads(matrix: &HeadAccuracyMatrix, k: usize) -> Result<HeadSelection> {
    let ranked = matrix.ranked();
    if k > matrix.n_layers * matrix.n_heads {
        return Err(Error::InvalidArg(format!(
            "K = {k} exceeds head count {}",
            matrix.n_layers * matrix.n_heads
        )));
    }
    if k > ranked.len() {
        return Err(Error::InvalidArg(format!(
            "K = {k} exceeds the {} heads with trained probes",
            ranked.len()
        )));
    }
    Ok(HeadSelection::HeadWise(
        ranked.into_iter().take(k).map(|(l, h, _)| (l, h)).collect(),
    ))
}

/// Train one probe over the concatenation of all heads (features z-scored
/// with training statistics) and select the K*D coordinates with the
/// largest absolute coefficients.
pub fn train_concat_probe(
    ds: &ActivationDataset,
    plan: &SplitPlan,
    exclude_fold: Option<usize>,
    k: usize,
    settings: &TrainSettings,
) -> Result<(Probe, HeadSelection)> {
    let dim = ds.n_layers * ds.n_heads * ds.head_dim;
    let n_coords = k * ds.head_dim;
    if n_coords > dim {
        return Err(Error::InvalidArg(format!(
            "K = {k} selects {n_coords} coordinates, model has {dim}"
        )));
    }
    let train_idx = record_indices(ds, &plan.train_pairs(exclude_fold));
    let val_idx = record_indices(ds, &plan.val_pairs(exclude_fold));
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::EmptyInput("train or validation record set"));
    }

    let raw = |idx: &[usize]| -> (Vec<Vec<f32>>, Vec<bool>) {
        (
            idx.iter().map(|&i| ds.records[i].all().to_vec()).collect(),
            idx.iter().map(|&i| ds.records[i].label).collect(),
        )
    };
    let (tx_raw, ty) = raw(&train_idx);
    let (vx_raw, vy) = raw(&val_idx);

    // per-coordinate z-scoring from training statistics
    let n = tx_raw.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for row in &tx_raw {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += f64::from(*x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; dim];
    for row in &tx_raw {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(row) {
            let d = f64::from(*x) - m;
            *v += d * d;
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let standardize = |rows: &[Vec<f32>]| -> Vec<Vec<f32>> {
        rows.iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        if sd[j] > 1e-12 {
                            ((f64::from(x) - mean[j]) / sd[j]) as f32
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    };

    let probe = train_probe(&standardize(&tx_raw), &ty, &standardize(&vx_raw), &vy, settings)?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        probe.theta[b]
            .abs()
            .partial_cmp(&probe.theta[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut coords: Vec<usize> = order.into_iter().take(n_coords).collect();
    coords.sort_unstable();
    Ok((probe, HeadSelection::PointWise { coords, k }))
}
