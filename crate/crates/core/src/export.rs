//! Plot-ready exports: ROC points, channel connectivity, fusion weights.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::Serialize;

use crate::data::TrialSet;
use crate::ensemble::Model;
use crate::error::{LelError, Result};
use crate::metrics::Metrics;
use crate::training::check_compatible;

/// Default weight of attention in the connectivity blend.
pub const DEFAULT_ATTENTION_BLEND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Roc,
    Connectivity,
    FusionWeights,
}

impl fmt::Display for ExportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportKind::Roc => "roc",
            ExportKind::Connectivity => "connectivity",
            ExportKind::FusionWeights => "fusion_weights",
        })
    }
}

impl FromStr for ExportKind {
    type Err = LelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "roc" => Ok(ExportKind::Roc),
            "connectivity" => Ok(ExportKind::Connectivity),
            "fusion_weights" => Ok(ExportKind::FusionWeights),
            _ => Err(LelError::Config(format!(
                "unknown export kind {s:?}; expected roc, connectivity or fusion_weights"
            ))),
        }
    }
}

/// `class<TAB>fpr<TAB>tpr` lines for every class curve.
pub fn roc_tsv(m: &Metrics) -> String {
    let mut out = String::from("class\tfpr\ttpr\n");
    for r in &m.roc {
        for (fpr, tpr) in &r.points {
            out.push_str(&format!("{}\t{fpr}\t{tpr}\n", r.class));
        }
    }
    out
}

/// Absolute Pearson correlation between the rows of `x` (`[C × T]`).
/// Constant channels correlate 0 with everything but themselves.
pub fn abs_pearson(x: &Array2<f64>) -> Array2<f64> {
    let c = x.nrows();
    let centered = x - &x.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
    let norms: Vec<f64> = centered.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    Array2::from_shape_fn((c, c), |(i, j)| {
        if i == j {
            1.0
        } else if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            (centered.row(i).dot(&centered.row(j)) / (norms[i] * norms[j]))
                .abs()
                .min(1.0)
        }
    })
}

/// Blends symmetrized attention with |Pearson|, then rescales to unit
/// diagonal: `M_ij / sqrt(M_ii M_jj)`.
pub fn blend_connectivity(attention: &Array2<f64>, correlation: &Array2<f64>, blend: f64) -> Array2<f64> {
    let sym = (attention + &attention.t()) / 2.0;
    let m = sym * blend + correlation * (1.0 - blend);
    let d: Vec<f64> = m.diag().to_vec();
    Array2::from_shape_fn(m.dim(), |(i, j)| {
        if i == j {
            1.0
        } else if d[i] > 0.0 && d[j] > 0.0 {
            m[[i, j]] / (d[i] * d[j]).sqrt()
        } else {
            0.0
        }
    })
}

/// Per-class `[C × C]` connectivity averaged over the windows of `indices`.
/// Classes without windows are `None`.
pub fn connectivity(model: &Model, set: &TrialSet, indices: &[usize], blend: f64) -> Result<Vec<Option<Array2<f64>>>> {
    check_compatible(model, set)?;
    if !(0.0..=1.0).contains(&blend) {
        return Err(LelError::Config(format!(
            "connectivity blend must lie in [0, 1], got {blend}"
        )));
    }
    let k = model.config.n_classes;
    let c = model.config.n_channels;
    let heads = model.config.heads;
    let batch = set.batch(indices);
    let pred = model.predict_chunked(&batch.data, 256)?;
    // [B·H × C × C] → [B × H × C × C], mean over heads
    let att: Array3<f64> = pred
        .mixer_attention
        .into_shape_with_order((indices.len(), heads, c, c))
        .map_err(|e| LelError::Shape(e.to_string()))?
        .mean_axis(Axis(1))
        .unwrap();
    let mut sums = vec![(Array2::<f64>::zeros((c, c)), Array2::<f64>::zeros((c, c)), 0usize); k];
    for (i, &y) in batch.labels.iter().enumerate() {
        let (a, r, n) = &mut sums[y];
        *a += &att.index_axis(Axis(0), i);
        *r += &abs_pearson(&batch.data.index_axis(Axis(0), i).to_owned());
        *n += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(a, r, n)| (n > 0).then(|| blend_connectivity(&(a / n as f64), &(r / n as f64), blend)))
        .collect())
}

pub fn matrix_tsv(m: &Array2<f64>) -> String {
    m.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\t") + "\n")
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FusionWeights {
    pub branches: Vec<String>,
    pub alpha: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn fusion_weights(model: &Model) -> FusionWeights {
    FusionWeights {
        branches: model.branches.iter().map(|b| b.id.to_string()).collect(),
        alpha: model.store.value(model.alpha).iter().copied().collect(),
        weights: model.fusion_weights(),
    }
}
