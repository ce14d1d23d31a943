//! Steering specs: which heads to shift, along which unit direction, and by
//! how much. The shift `alpha * sigma * theta` is added to a selected head's
//! activation on every forward pass; `bake_bias` folds the same shift into
//! the attention output-projection biases so an unmodified inference path
//! reproduces it.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::direction::Direction;
use crate::error::{Error, Result};
use crate::linalg::{norm, normalize};
use crate::model::{Model, ModelConfig};
use crate::probe::HeadSelection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    HeadWise,
    PointWise,
    AllHeads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecEntry {
    pub layer: usize,
    pub head: usize,
    /// Unit direction in head space.
    pub direction: Vec<f32>,
    pub sigma: f32,
}

/// Provenance recorded alongside a serialized spec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpecProvenance {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fold: Option<usize>,
}

/// A complete intervention: global strength plus per-head direction and
/// scale. Heads without an entry are left untouched (their direction is
/// implicitly the zero vector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub alpha: f32,
    pub selector: SelectorKind,
    pub entries: Vec<SpecEntry>,
    #[serde(default)]
    pub provenance: SpecProvenance,
}

impl InterventionSpec {
    pub fn new(alpha: f32, selector: SelectorKind, entries: Vec<SpecEntry>) -> Result<Self> {
        let spec = InterventionSpec {
            alpha,
            selector,
            entries,
            provenance: SpecProvenance::default(),
        };
        spec.check_basic()?;
        Ok(spec)
    }

    fn check_basic(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidArg(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !(e.sigma >= 0.0) {
                return Err(Error::InvalidArg(format!(
                    "sigma must be >= 0 for head ({}, {})",
                    e.layer, e.head
                )));
            }
            if (norm(&e.direction) - 1.0).abs() > 1e-3 {
                return Err(Error::InvalidArg(format!(
                    "direction for head ({}, {}) is not unit-norm",
                    e.layer, e.head
                )));
            }
            if !seen.insert((e.layer, e.head)) {
                return Err(Error::InvalidArg(format!(
                    "duplicate entry for head ({}, {})",
                    e.layer, e.head
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for e in &self.entries {
            if e.layer >= config.n_layers || e.head >= config.n_heads {
                return Err(Error::DimMismatch(format!(
                    "spec head ({}, {}) out of range for {}x{} model",
                    e.layer, e.head, config.n_layers, config.n_heads
                )));
            }
            if e.direction.len() != config.head_dim {
                return Err(Error::DimMismatch(format!(
                    "spec direction dim {} != head_dim {}",
                    e.direction.len(),
                    config.head_dim
                )));
            }
            if e.direction.iter().any(|x| !x.is_finite()) || !e.sigma.is_finite() {
                return Err(Error::InvalidArg("non-finite spec entry".into()));
            }
        }
        Ok(())
    }

    /// The shift vector `alpha * sigma * theta` for one head, or `None` if
    /// that head is untouched.
    pub fn shift_for(&self, layer: usize, head: usize) -> Option<Vec<f32>> {
        if self.alpha == 0.0 {
            return None;
        }
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.head == head)
            .map(|e| {
                e.direction
                    .iter()
                    .map(|&x| self.alpha * e.sigma * x)
                    .collect()
            })
    }

    pub fn is_noop(&self) -> bool {
        self.alpha == 0.0 || self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArg(format!("spec serialization: {e}")))?;
        crate::provenance::atomic_write(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: InterventionSpec = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArg(format!("spec file {}: {e}", path.display())))?;
        spec.check_basic()?;
        Ok(spec)
    }
}

/// Shift the selected heads of one layer's attention outputs in place.
/// `head_outputs` is H x D, head-major.
pub fn intervene_layer(
    head_outputs: &mut [f32],
    head_dim: usize,
    layer: usize,
    spec: &InterventionSpec,
) -> Result<()> {
    if head_outputs.len() % head_dim != 0 {
        return Err(Error::DimMismatch(format!(
            "head_outputs length {} not a multiple of head_dim {}",
            head_outputs.len(),
            head_dim
        )));
    }
    let n_heads = head_outputs.len() / head_dim;
    for h in 0..n_heads {
        if let Some(shift) = spec.shift_for(layer, h) {
            if shift.len() != head_dim {
                return Err(Error::DimMismatch("spec direction dim".into()));
            }
            for (x, s) in head_outputs[h * head_dim..(h + 1) * head_dim]
                .iter_mut()
                .zip(&shift)
            {
                *x += s;
            }
        }
    }
    Ok(())
}

/// Assemble a spec from a head selection and per-head directions.
/// `directions` is indexed `layer * n_heads + head` and must cover every
/// selected head with a nonzero vector.
pub fn build_spec(
    selection: &HeadSelection,
    directions: &[Direction],
    n_heads: usize,
    head_dim: usize,
    alpha: f32,
) -> Result<InterventionSpec> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArg(format!("alpha must be >= 0, got {alpha}")));
    }
    let n_layers = if n_heads == 0 { 0 } else { directions.len() / n_heads };
    let take = |layer: usize, head: usize| -> Result<&Direction> {
        let idx = layer * n_heads + head;
        let dir = directions.get(idx).ok_or_else(|| {
            Error::InvalidArg(format!("no direction for head ({layer}, {head})"))
        })?;
        if norm(&dir.vector) <= 1e-9 {
            return Err(Error::InvalidArg(format!(
                "zero direction for selected head ({layer}, {head})"
            )));
        }
        Ok(dir)
    };

    let (kind, entries) = match selection {
        HeadSelection::HeadWise(heads) => {
            let mut entries = Vec::with_capacity(heads.len());
            for &(l, h) in heads {
                let dir = take(l, h)?;
                entries.push(SpecEntry {
                    layer: l,
                    head: h,
                    direction: dir.vector.clone(),
                    sigma: dir.sigma,
                });
            }
            (SelectorKind::HeadWise, entries)
        }
        HeadSelection::AllHeads => {
            let mut entries = Vec::new();
            for l in 0..n_layers {
                for h in 0..n_heads {
                    let dir = take(l, h)?;
                    entries.push(SpecEntry {
                        layer: l,
                        head: h,
                        direction: dir.vector.clone(),
                        sigma: dir.sigma,
                    });
                }
            }
            (SelectorKind::AllHeads, entries)
        }
        HeadSelection::PointWise { coords, .. } => {
            // Mask each head's direction to its selected coordinates, then
            // renormalize within the mask; sigma is reused unchanged.
            let mut by_head: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
                std::collections::BTreeMap::new();
            for &c in coords {
                let l = c / (n_heads * head_dim);
                let h = (c / head_dim) % n_heads;
                by_head.entry((l, h)).or_default().push(c % head_dim);
            }
            let mut entries = Vec::with_capacity(by_head.len());
            for ((l, h), dims) in by_head {
                let dir = take(l, h)?;
                let mut masked = vec![0.0f32; head_dim];
                for d in dims {
                    masked[d] = dir.vector[d];
                }
                let unit = normalize(&masked).ok_or_else(|| {
                    Error::Degenerate(format!(
                        "head ({l}, {h}): selected coordinates carry no direction mass"
                    ))
                })?;
                entries.push(SpecEntry {
                    layer: l,
                    head: h,
                    direction: unit,
                    sigma: dir.sigma,
                });
            }
            (SelectorKind::PointWise, entries)
        }
    };
    InterventionSpec::new(alpha, kind, entries)
}

/// Fold the spec's shift into the output-projection biases:
/// `Bias_l += alpha * sum_h Q_l^h (sigma_l^h theta_l^h)`. Returns a new
/// model; the input is untouched.
pub fn bake_bias(model: &Model, spec: &InterventionSpec) -> Result<Model> {
    spec.validate(&model.config)?;
    let mut baked = model.clone();
    let dh = model.config.hidden_dim;
    let d = model.config.head_dim;
    for e in &spec.entries {
        if let Some(shift) = spec.shift_for(e.layer, e.head) {
            let layer = &mut baked.layers[e.layer];
            let mut delta = vec![0.0f32; dh];
            layer.out_project(e.head, dh, d, &shift, &mut delta);
            for (b, x) in layer.out_bias.iter_mut().zip(&delta) {
                *b += x;
            }
        }
    }
    Ok(baked)
}
