//! Causal sliding-window evaluation of a long recording.

use std::time::Instant;

use ndarray::{s, Array2, Axis};
use serde::Serialize;

use crate::autograd::StatAxis;
use crate::ensemble::Model;
use crate::error::{LelError, Result};
use crate::metrics::argmax_rows;

#[derive(Debug, Clone, Serialize)]
pub struct StreamRow {
    pub index: usize,
    /// First sample of the window.
    pub start: usize,
    pub posterior: Vec<f64>,
    pub predicted: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamOutput {
    pub window: usize,
    pub stride: usize,
    pub rows: Vec<StreamRow>,
    pub latency: LatencyStats,
}

impl StreamOutput {
    /// Most frequent predicted class (lowest index on ties).
    pub fn majority(&self) -> Option<usize> {
        let k = self.rows.first()?.posterior.len();
        let mut votes = vec![0usize; k];
        self.rows.iter().for_each(|r| votes[r.predicted] += 1);
        let best = *votes.iter().max()?;
        votes.iter().position(|&v| v == best)
    }

    /// One JSON record per window.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect()
    }
}

/// Number of windows of `window` samples at `stride` that fit in `len`.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || window > len {
        0
    } else {
        (len - window) / stride + 1
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Evaluates window `t` on samples `[t·stride, t·stride + window)` only.
/// `stride < window` gives overlapping windows, `stride == window` a
/// non-overlapping tiling. The window must equal the model's input length
/// and the model must use per-sample normalization statistics.
pub fn stream_evaluate(model: &Model, recording: &Array2<f64>, window: usize, stride: usize) -> Result<StreamOutput> {
    let (c, len) = recording.dim();
    if stride == 0 {
        return Err(LelError::Contract("stride must be positive".into()));
    }
    if window > len {
        return Err(LelError::Contract(format!(
            "window {window} exceeds recording length {len}"
        )));
    }
    if window != model.config.n_samples || c != model.config.n_channels {
        return Err(LelError::Contract(format!(
            "model expects {} channels x {} samples per window, got {c} channels and window {window}",
            model.config.n_channels, model.config.n_samples
        )));
    }
    if model.config.stats == StatAxis::First {
        return Err(LelError::Contract(
            "batch-statistics normalization mixes windows and cannot stream causally".into(),
        ));
    }
    let n = window_count(len, window, stride);
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        let start = t * stride;
        let x = recording
            .slice(s![.., start..start + window])
            .to_owned()
            .insert_axis(Axis(0));
        let clock = Instant::now();
        let pred = model.predict(&x)?;
        let latency_ms = clock.elapsed().as_secs_f64() * 1e3;
        rows.push(StreamRow {
            index: t,
            start,
            posterior: pred.fused.row(0).to_vec(),
            predicted: argmax_rows(&pred.fused)[0],
            latency_ms,
        });
    }
    let mut lat: Vec<f64> = rows.iter().map(|r| r.latency_ms).collect();
    lat.sort_by(f64::total_cmp);
    let latency = if lat.is_empty() {
        LatencyStats::default()
    } else {
        LatencyStats {
            mean_ms: lat.iter().sum::<f64>() / lat.len() as f64,
            p50_ms: percentile(&lat, 0.5),
            p95_ms: percentile(&lat, 0.95),
            max_ms: lat[lat.len() - 1],
        }
    };
    Ok(StreamOutput {
        window,
        stride,
        rows,
        latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ModelConfig;

    fn model(t: usize) -> Model {
        let mut c = ModelConfig::new(2, t, 3, 128.0);
        c.embed_dim = 8;
        c.hidden = 8;
        c.heads = 2;
        Model::new(c).unwrap()
    }

    #[test]
    fn tiling_count() {
        assert_eq!(window_count(1000, 200, 200), 5);
        assert_eq!(window_count(1000, 200, 100), 9);
        assert_eq!(window_count(199, 200, 200), 0);
        for len in 200..260 {
            assert_eq!(window_count(len, 50, 50), len / 50);
        }
    }

    #[test]
    fn future_samples_do_not_change_output() {
        let m = model(64);
        let rec = Array2::from_shape_fn((2, 300), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let full = stream_evaluate(&m, &rec, 64, 64).unwrap();
        let cut = stream_evaluate(&m, &rec.slice(s![.., ..256]).to_owned(), 64, 64).unwrap();
        assert_eq!(cut.rows.len(), 4);
        for (a, b) in cut.rows.iter().zip(&full.rows) {
            assert_eq!(a.posterior, b.posterior);
        }
    }

    #[test]
    fn contract_errors() {
        let m = model(64);
        let rec = Array2::zeros((2, 50));
        assert!(matches!(stream_evaluate(&m, &rec, 64, 64), Err(LelError::Contract(_))));
        let rec = Array2::zeros((2, 200));
        assert!(matches!(stream_evaluate(&m, &rec, 32, 32), Err(LelError::Contract(_))));
        let mut b = model(64);
        b.config.stats = StatAxis::First;
        assert!(matches!(stream_evaluate(&b, &rec, 64, 64), Err(LelError::Contract(_))));
    }
}
