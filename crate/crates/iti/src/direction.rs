//! Intervention directions: four estimation methods plus the per-head
//! standard deviation of activations along a direction.
//!
//! Directions are unit-normalized before sigma estimation so that
//! `alpha * sigma` has consistent units across methods.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acts::ActivationDataset;
use crate::data::SplitPlan;
use crate::error::{Error, Result};
use crate::linalg::{dot, normalize};
use crate::probe::Probe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMethod {
    ProbeWeight,
    MassMean,
    Ccs,
    Random,
}

impl std::fmt::Display for DirectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DirectionMethod::ProbeWeight => "probe_weight",
            DirectionMethod::MassMean => "mass_mean",
            DirectionMethod::Ccs => "ccs",
            DirectionMethod::Random => "random",
        };
        f.write_str(s)
    }
}

/// A unit direction in head space with its estimated activation spread.
/// The zero vector is permitted only for heads no intervention touches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub vector: Vec<f32>,
    pub method: DirectionMethod,
    pub sigma: f32,
}

impl Direction {
    pub fn zero(dim: usize, method: DirectionMethod) -> Self {
        Direction {
            vector: vec![0.0; dim],
            method,
            sigma: 0.0,
        }
    }
}

/// Unit vector from the false-class mean to the truthful-class mean.
pub fn mass_mean_direction(features: &[Vec<f32>], labels: &[bool]) -> Result<Vec<f32>> {
    if features.len() != labels.len() {
        return Err(Error::DimMismatch("features vs labels".into()));
    }
    let dim = features.first().map(|f| f.len()).unwrap_or(0);
    let mut sums = [vec![0.0f64; dim], vec![0.0f64; dim]];
    let mut counts = [0usize; 2];
    for (row, &label) in features.iter().zip(labels) {
        let c = usize::from(label);
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(row) {
            *s += f64::from(*x);
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::SingleClass);
    }
    let diff: Vec<f32> = (0..dim)
        .map(|j| (sums[1][j] / counts[1] as f64 - sums[0][j] / counts[0] as f64) as f32)
        .collect();
    normalize(&diff).ok_or_else(|| Error::Degenerate("class means coincide".into()))
}

/// The probe's weight vector, unit-normalized.
pub fn probe_weight_direction(probe: &Probe) -> Result<Vec<f32>> {
    normalize(&probe.theta).ok_or_else(|| Error::Degenerate("probe direction is zero".into()))
}

/// Seeded draw from the uniform distribution on the unit sphere.
pub fn random_direction(dim: usize, seed: u64) -> Vec<f32> {
    assert!(dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Some(unit) = normalize(&v) {
            return unit;
        }
    }
}

#[derive(Debug, Clone)]
pub struct CcsOutcome {
    /// Unit direction, sign already resolved against the labeled pairs.
    pub direction: Vec<f32>,
    /// Best objective value across restarts.
    pub loss: f64,
    /// The objective stayed near its uninformative optimum.
    pub low_confidence: bool,
}

const CCS_RESTARTS: usize = 10;
const CCS_ITERS: usize = 1500;
const CCS_LR: f64 = 0.25;
const CCS_UNINFORMATIVE_LOSS: f64 = 0.15;

/// Contrast-consistent search over (truthful, false) activation pairs.
///
/// Both populations are mean-centered, then a sigmoid probe is fit to
/// minimize the per-pair consistency term `(p+ - (1 - p-))^2` plus the
/// confidence term `min(p+, p-)^2`, by seeded gradient-descent restarts;
/// the best-loss solution is kept. The optimization never reads the pair
/// ordering; the final sign is flipped if needed so the truthful-class
/// mean projection exceeds the false-class one.
pub fn ccs_direction(pairs: &[(Vec<f32>, Vec<f32>)], seed: u64) -> Result<CcsOutcome> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArg("need at least 2 pairs".into()));
    }
    let dim = pairs[0].0.len();
    if pairs.iter().any(|(a, b)| a.len() != dim || b.len() != dim) {
        return Err(Error::DimMismatch("inconsistent pair dimension".into()));
    }
    if pairs.iter().all(|(a, b)| a == b) {
        return Err(Error::Degenerate("all pairs have identical sides".into()));
    }
    let n = pairs.len() as f64;

    // mean-center each population
    let mut mean_pos = vec![0.0f64; dim];
    let mut mean_neg = vec![0.0f64; dim];
    for (a, b) in pairs {
        for j in 0..dim {
            mean_pos[j] += f64::from(a[j]) / n;
            mean_neg[j] += f64::from(b[j]) / n;
        }
    }
    let centered: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .map(|(a, b)| {
            (
                (0..dim).map(|j| f64::from(a[j]) - mean_pos[j]).collect(),
                (0..dim).map(|j| f64::from(b[j]) - mean_neg[j]).collect(),
            )
        })
        .collect();

    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let loss_of = |w: &[f64], b: f64| -> f64 {
        let mut total = 0.0;
        for (a, c) in &centered {
            let pp = sigmoid(b + a.iter().zip(w).map(|(x, w)| x * w).sum::<f64>());
            let pn = sigmoid(b + c.iter().zip(w).map(|(x, w)| x * w).sum::<f64>());
            let cons = pp - (1.0 - pn);
            total += cons * cons + pp.min(pn).powi(2);
        }
        total / n
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..CCS_RESTARTS {
        let init: Vec<f64> = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / (dim as f64).sqrt()
            })
            .collect();
        let mut w = init;
        let mut b = 0.0f64;
        for _ in 0..CCS_ITERS {
            let mut gw = vec![0.0f64; dim];
            let mut gb = 0.0f64;
            for (a, c) in &centered {
                let pp = sigmoid(b + a.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>());
                let pn = sigmoid(b + c.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>());
                let cons = 2.0 * (pp - (1.0 - pn));
                let mut dp = cons * pp * (1.0 - pp);
                let mut dn = cons * pn * (1.0 - pn);
                if pp <= pn {
                    dp += 2.0 * pp * pp * (1.0 - pp);
                } else {
                    dn += 2.0 * pn * pn * (1.0 - pn);
                }
                for j in 0..dim {
                    gw[j] += dp * a[j] + dn * c[j];
                }
                gb += dp + dn;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= CCS_LR * g / n;
            }
            b -= CCS_LR * gb / n;
        }
        let l = loss_of(&w, b);
        if best.as_ref().map_or(true, |(_, bl)| l < *bl) {
            best = Some((w, l));
        }
    }
    let (w, loss) = best.unwrap();
    if !loss.is_finite() {
        return Err(Error::Degenerate(
            "contrast-consistency optimization diverged".into(),
        ));
    }
    let raw: Vec<f32> = w.iter().map(|&x| x as f32).collect();
    let mut direction = normalize(&raw).ok_or_else(|| {
        Error::Degenerate("contrast-consistency optimization returned a zero direction".into())
    })?;

    // sign resolution via the labeled pair ordering
    let mut proj_true = 0.0f64;
    let mut proj_false = 0.0f64;
    for (a, b) in pairs {
        proj_true += f64::from(dot(a, &direction));
        proj_false += f64::from(dot(b, &direction));
    }
    if proj_true <= proj_false {
        direction.iter_mut().for_each(|x| *x = -*x);
    }

    Ok(CcsOutcome {
        direction,
        loss,
        low_confidence: loss > CCS_UNINFORMATIVE_LOSS,
    })
}

/// Population standard deviation of the features' projections onto a unit
/// direction.
pub fn projection_std<'a>(
    features: impl Iterator<Item = &'a [f32]>,
    direction: &[f32],
) -> Result<f32> {
    let mut projections = Vec::new();
    for row in features {
        projections.push(f64::from(dot(row, direction)));
    }
    if projections.is_empty() {
        return Err(Error::EmptyInput("record set for sigma estimation"));
    }
    let n = projections.len() as f64;
    let mean: f64 = projections.iter().sum::<f64>() / n;
    let var: f64 = projections.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    Ok(var.sqrt() as f32)
}

/// Standard deviation of one head's activations along a unit direction,
/// over the train and validation records of the non-excluded folds.
pub fn estimate_sigma(
    ds: &ActivationDataset,
    head: (usize, usize),
    direction: &[f32],
    plan: &SplitPlan,
    exclude_fold: Option<usize>,
) -> Result<f32> {
    if (crate::linalg::norm(direction) - 1.0).abs() > 1e-4 {
        return Err(Error::InvalidArg("direction must be unit-norm".into()));
    }
    let map = ds.pair_index_map();
    let indices: Vec<usize> = plan
        .fit_pairs(exclude_fold)
        .into_iter()
        .filter_map(|p| map.get(&p).copied())
        .collect();
    projection_std(
        indices
            .iter()
            .map(|&i| ds.head_slice(&ds.records[i], head.0, head.1)),
        direction,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine;
    use crate::probe::{train_probe, TrainSettings};
    use rand_distr::Normal;

    fn clouds(
        n_per_class: usize,
        dim: usize,
        shift: &[f32],
        axis_sd: &[f32],
        seed: u64,
    ) -> (Vec<Vec<f32>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..2 * n_per_class {
            let label = i % 2 == 0;
            let sign = if label { 1.0f32 } else { -1.0 };
            x.push(
                (0..dim)
                    .map(|j| {
                        let noise: f32 = Normal::new(0.0, axis_sd[j]).unwrap().sample(&mut rng);
                        sign * shift[j] + noise
                    })
                    .collect(),
            );
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn mass_mean_recovers_planted_axis() {
        let mut shift = vec![0.0f32; 8];
        shift[0] = 1.0; // class means at +-e1, i.e. difference 2 e1
        let (x, y) = clouds(500, 8, &shift, &[1.0; 8], 1);
        let d = mass_mean_direction(&x, &y).unwrap();
        let mut e1 = vec![0.0f32; 8];
        e1[0] = 1.0;
        assert!(cosine(&d, &e1) >= 0.99, "cosine {}", cosine(&d, &e1));
    }

    #[test]
    fn mass_mean_antisymmetric_under_label_swap() {
        let mut shift = vec![0.0f32; 4];
        shift[1] = 0.7;
        let (x, y) = clouds(50, 4, &shift, &[1.0; 4], 2);
        let d = mass_mean_direction(&x, &y).unwrap();
        let flipped: Vec<bool> = y.iter().map(|l| !l).collect();
        let d2 = mass_mean_direction(&x, &flipped).unwrap();
        for (a, b) in d.iter().zip(&d2) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn mass_mean_degenerate_cases() {
        let x = vec![vec![1.0f32, 2.0], vec![1.0, 2.0]];
        assert!(matches!(
            mass_mean_direction(&x, &[true, false]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            mass_mean_direction(&x, &[true, true]),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn mass_mean_invariant_to_balanced_duplication() {
        let mut shift = vec![0.0f32; 4];
        shift[0] = 1.0;
        let (x, y) = clouds(40, 4, &shift, &[1.0; 4], 3);
        let d = mass_mean_direction(&x, &y).unwrap();
        let mut x2 = x.clone();
        let mut y2 = y.clone();
        x2.extend_from_slice(&x);
        y2.extend_from_slice(&y);
        let d2 = mass_mean_direction(&x2, &y2).unwrap();
        assert!(cosine(&d, &d2) >= 1.0 - 1e-6);
    }

    #[test]
    fn probe_weight_normalizes() {
        let probe = Probe {
            theta: vec![3.0, 4.0, 0.0],
            intercept: 0.0,
            train_accuracy: 0.0,
            val_accuracy: 0.0,
        };
        let d = probe_weight_direction(&probe).unwrap();
        assert!((d[0] - 0.6).abs() < 1e-6 && (d[1] - 0.8).abs() < 1e-6);
        let zero = Probe {
            theta: vec![0.0; 3],
            ..probe
        };
        assert!(probe_weight_direction(&zero).is_err());
    }

    #[test]
    fn probe_and_mass_mean_agree_on_isotropic_classes() {
        let mut shift = vec![0.0f32; 8];
        shift[0] = 1.0;
        let (x, y) = clouds(500, 8, &shift, &[1.0; 8], 4);
        let mm = mass_mean_direction(&x, &y).unwrap();
        let probe = train_probe(&x, &y, &x, &y, &TrainSettings::default()).unwrap();
        let pw = probe_weight_direction(&probe).unwrap();
        assert!(cosine(&mm, &pw) >= 0.9, "cosine {}", cosine(&mm, &pw));
    }

    #[test]
    fn anisotropic_classes_split_the_two_candidates() {
        // covariance stretched 10x along e1, mean difference along e1+e2:
        // the separating direction tilts away from the mass-mean direction
        let mut shift = vec![0.0f32; 8];
        shift[0] = 1.5;
        shift[1] = 1.5;
        let mut sd = vec![1.0f32; 8];
        sd[0] = 10.0f32.sqrt();
        let (x, y) = clouds(1500, 8, &shift, &sd, 5);
        let mm = mass_mean_direction(&x, &y).unwrap();
        let probe = train_probe(&x, &y, &x, &y, &TrainSettings::default()).unwrap();
        let pw = probe_weight_direction(&probe).unwrap();
        let c = cosine(&mm, &pw);
        assert!(c < 0.95, "cosine {c}");
        assert!(c > 0.0);
    }

    #[test]
    fn random_direction_is_unit_and_seeded() {
        let a = random_direction(8, 9);
        let b = random_direction(8, 9);
        let c = random_direction(8, 10);
        assert!((crate::linalg::norm(&a) - 1.0).abs() < 1e-6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn random_directions_average_to_zero() {
        let mut mean = vec![0.0f64; 8];
        let n = 10_000usize;
        for seed in 0..n {
            for (m, x) in mean.iter_mut().zip(random_direction(8, seed as u64)) {
                *m += f64::from(x) / n as f64;
            }
        }
        let norm: f64 = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        assert!(norm <= 0.05, "mean norm {norm}");
    }

    /// Contrast pairs with a per-pair latent truth value along a planted
    /// axis. A plain population shift would vanish under the method's
    /// mean-centering, so the sign of the shift varies per pair (60/40, so
    /// the label-based sign rule stays decidable).
    fn planted_pairs(n: usize, dim: usize, strength: f32, seed: u64) -> (Vec<(Vec<f32>, Vec<f32>)>, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 0.3).unwrap();
        let center = Normal::new(0.0f32, 1.0).unwrap();
        let mut d = vec![0.0f32; dim];
        d[2] = strength;
        let pairs = (0..n)
            .map(|i| {
                let t: f32 = if i % 5 < 3 { 1.0 } else { -1.0 };
                let c: Vec<f32> = (0..dim).map(|_| center.sample(&mut rng)).collect();
                let pos: Vec<f32> = (0..dim)
                    .map(|j| c[j] + t * d[j] + noise.sample(&mut rng))
                    .collect();
                let neg: Vec<f32> = (0..dim)
                    .map(|j| c[j] - t * d[j] + noise.sample(&mut rng))
                    .collect();
                (pos, neg)
            })
            .collect();
        (pairs, normalize(&d).unwrap())
    }

    #[test]
    fn ccs_recovers_planted_pair_direction_with_sign() {
        let (pairs, d) = planted_pairs(200, 8, 3.0, 11);
        let out = ccs_direction(&pairs, 11).unwrap();
        assert!(!out.low_confidence, "loss {}", out.loss);
        let c = cosine(&out.direction, &d);
        assert!(c >= 0.9, "cosine {c}");
        // sign rule: mean projection of the truthful side is larger
        let mut pt = 0.0;
        let mut pf = 0.0;
        for (a, b) in &pairs {
            pt += dot(a, &out.direction);
            pf += dot(b, &out.direction);
        }
        assert!(pt > pf);
    }

    #[test]
    fn ccs_flags_pure_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0f32, 1.0).unwrap();
        let pairs: Vec<(Vec<f32>, Vec<f32>)> = (0..200)
            .map(|_| {
                (
                    (0..8).map(|_| noise.sample(&mut rng)).collect(),
                    (0..8).map(|_| noise.sample(&mut rng)).collect(),
                )
            })
            .collect();
        let out = ccs_direction(&pairs, 12).unwrap();
        assert!(out.low_confidence, "loss {}", out.loss);
    }

    #[test]
    fn ccs_rejects_degenerate_input() {
        let p = vec![(vec![1.0f32, 2.0], vec![1.0f32, 2.0]); 5];
        assert!(ccs_direction(&p, 1).is_err());
        assert!(ccs_direction(&p[..1], 1).is_err());
    }

    #[test]
    fn sigma_basics() {
        let rows = vec![vec![2.0f32, 5.0]; 10];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let s = projection_std(refs.iter().copied(), &[1.0, 0.0]).unwrap();
        assert_eq!(s, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noise = Normal::new(0.0f32, 1.0).unwrap();
        let rows: Vec<Vec<f32>> = (0..10_000)
            .map(|_| vec![noise.sample(&mut rng), 7.0])
            .collect();
        let s = projection_std(rows.iter().map(|r| r.as_slice()), &[1.0, 0.0]).unwrap();
        assert!((0.97..=1.03).contains(&s), "sigma {s}");

        let scaled: Vec<Vec<f32>> = rows.iter().map(|r| vec![3.0 * r[0], 3.0 * r[1]]).collect();
        let s3 = projection_std(scaled.iter().map(|r| r.as_slice()), &[1.0, 0.0]).unwrap();
        assert!((s3 / s - 3.0).abs() < 1e-4);

        // invariant to adding a vector orthogonal to the direction
        let offset: Vec<Vec<f32>> = rows.iter().map(|r| vec![r[0], r[1] + 123.0]).collect();
        let so = projection_std(offset.iter().map(|r| r.as_slice()), &[1.0, 0.0]).unwrap();
        assert!((so - s).abs() < 1e-5);
    }

    #[test]
    fn estimate_sigma_requires_unit_direction() {
        let (ds, questions) = crate::probe::tests::planted_head_dataset(20, (0, 0), 1.0, 14);
        let plan = crate::data::split_folds(&questions, 2, 14).unwrap();
        assert!(estimate_sigma(&ds, (0, 0), &[2.0; 8], &plan, None).is_err());
        let d = normalize(&[1.0; 8]).unwrap();
        let s = estimate_sigma(&ds, (0, 0), &d, &plan, None).unwrap();
        assert!(s > 0.0);
    }
}
