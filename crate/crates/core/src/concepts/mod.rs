// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept bottleneck: sigmoid concept weights read from the residual stream,
//! test-time overrides, and the selection procedures that choose which
//! concepts to steer and to what value.

mod select;

pub use select::{
    loo_select_concepts, random_concepts, sparsity_report, tp_targets, ConceptSelection, SelectionScope,
    SparsityReport, TargetMode, DEFAULT_TOP_K, MIN_CATEGORY_POSITIVES,
};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};

/// Concept projections `w` (`n_concepts × d_model`), biases `b` and concept
/// embeddings `e` (`n_concepts × d_model`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptLayer {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    pub e: Array2<f32>,
}

impl ConceptLayer {
    pub fn new(w: Array2<f32>, b: Array1<f32>, e: Array2<f32>) -> Result<Self> {
        if w.nrows() != b.len() || e.nrows() != b.len() || w.ncols() != e.ncols() {
            return Err(SteerError::Input(format!(
                "inconsistent concept layer shapes: w {:?}, b {}, e {:?}",
                w.shape(),
                b.len(),
                e.shape()
            )));
        }
        let layer = Self { w, b, e };
        if !layer
            .w
            .iter()
            .chain(layer.b.iter())
            .chain(layer.e.iter())
            .all(|v| v.is_finite())
        {
            return Err(SteerError::Input("concept layer has non-finite weights".into()));
        }
        Ok(layer)
    }

    pub fn zeros(n_concepts: usize, d_model: usize) -> Self {
        Self {
            w: Array2::zeros((n_concepts, d_model)),
            b: Array1::zeros(n_concepts),
            e: Array2::zeros((n_concepts, d_model)),
        }
    }

    pub fn n_concepts(&self) -> usize {
        self.b.len()
    }

    pub fn d_model(&self) -> usize {
        self.w.ncols()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Concept weights `σ(w_c · h + b_c)` for every concept.
pub fn concept_forward(h: &[f32], layer: &ConceptLayer) -> Result<Vec<f32>> {
    if h.len() != layer.d_model() {
        return Err(SteerError::Input(format!(
            "hidden state has length {}, concept layer expects {}",
            h.len(),
            layer.d_model()
        )));
    }
    Ok(layer
        .w
        .rows()
        .into_iter()
        .zip(layer.b.iter())
        .map(|(row, &b)| sigmoid(row.iter().zip(h).fold(b, |acc, (w, x)| acc + w * x)))
        .collect())
}

/// Target concept weights keyed by concept id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OverrideMap(BTreeMap<usize, f32>);

impl OverrideMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map, rejecting targets outside `[0, 1]`.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f32)>) -> Result<Self> {
        let mut map = Self::new();
        for (id, alpha) in pairs {
            map.insert(id, alpha)?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, id: usize, alpha: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(SteerError::Input(format!(
                "override for concept {id} is {alpha}, outside [0, 1]"
            )));
        }
        self.0.insert(id, alpha);
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<f32> {
        self.0.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    /// Checks ids against the layer width and targets against `[0, 1]`
    /// (the latter matters for maps that came through deserialization).
    pub fn validate(&self, n_concepts: usize) -> Result<()> {
        for (id, alpha) in self.iter() {
            if id >= n_concepts {
                return Err(SteerError::Input(format!(
                    "override concept {id} out of range ({n_concepts} concepts)"
                )));
            }
            if !(0.0..=1.0).contains(&alpha) {
                return Err(SteerError::Input(format!(
                    "override for concept {id} is {alpha}, outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Replaces the overridden entries of `weights` by their targets.
pub fn steer_known(weights: &[f32], overrides: &OverrideMap) -> Result<Vec<f32>> {
    overrides.validate(weights.len())?;
    let mut out = weights.to_vec();
    for (id, alpha) in overrides.iter() {
        out[id] = alpha;
    }
    Ok(out)
}

/// Concept features `Σ_c weight_c · e_c`.
pub fn known_features(weights: &[f32], layer: &ConceptLayer) -> Result<Vec<f32>> {
    if weights.len() != layer.n_concepts() {
        return Err(SteerError::Input(format!(
            "{} concept weights for a layer of {} concepts",
            weights.len(),
            layer.n_concepts()
        )));
    }
    let mut out = vec![0.0f32; layer.d_model()];
    for (row, &wc) in layer.e.rows().into_iter().zip(weights) {
        for (o, &e) in out.iter_mut().zip(row.iter()) {
            *o += wc * e;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
