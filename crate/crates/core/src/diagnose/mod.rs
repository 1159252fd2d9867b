//! Online diagnosis: a sliding window over a multichannel stream, the same
//! preprocessing as training, one forward pass per window and a MAP
//! decision.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphio::{window_to_sample, GraphError, NodeMode};
use crate::numkit::Tensor;
use crate::trainer::{argmax, Model, TrainError};

#[derive(Debug, Error)]
pub enum DiagnoseError {
    #[error("stream configuration does not match the checkpoint: {0}")]
    Mismatch(String),
    #[error("time step {step} has {got} channels, expected {expected}")]
    Channels { step: usize, got: usize, expected: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Posterior `softmax(logits)` and its argmax (lowest index on ties).
pub fn map_decision(logits: &[f64]) -> Result<(usize, Vec<f64>), DiagnoseError> {
    if logits.is_empty() {
        return Err(DiagnoseError::Mismatch("no logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DiagnoseError::NonFinite("logits".into()));
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    let posterior: Vec<f64> = exps.iter().map(|e| e / total).collect();
    Ok((argmax(logits), posterior))
}

/// One emitted decision. `t` is the index of the first time step of the
/// window it was made on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub t: usize,
    pub class: usize,
    pub posterior: Vec<f64>,
    pub gate_weights: Vec<f64>,
    #[serde(skip)]
    pub logits: Vec<f64>,
}

/// Window geometry requested by the caller. `window_len` and `k` must
/// match the checkpoint; the stride is free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConfig {
    pub window_len: usize,
    pub stride: usize,
    pub k: usize,
}

impl StreamConfig {
    /// The training-time geometry of a model.
    pub fn from_model(model: &Model) -> Self {
        let p = &model.meta.preprocess;
        Self { window_len: p.window_len, stride: p.stride, k: p.k }
    }
}

/// Channel count a model's input width implies.
fn channels_for(model: &Model) -> Result<usize, DiagnoseError> {
    let p = &model.meta.preprocess;
    let d = model.meta.input_dim;
    let m = match p.node_mode {
        NodeMode::Timesteps => d,
        NodeMode::Segments => {
            let chunk = p.window_len / p.segment_count.max(1);
            if chunk == 0 || !d.is_multiple_of(chunk) {
                return Err(DiagnoseError::Mismatch(format!(
                    "input width {d} is not a multiple of the segment length {chunk}"
                )));
            }
            d / chunk
        }
    };
    if m == 0 {
        return Err(DiagnoseError::Mismatch("model expects zero channels".into()));
    }
    Ok(m)
}

/// Per-stream state: the last `window_len` time steps and the position of
/// the next window.
pub struct StreamState<'m> {
    model: &'m Model,
    cfg: StreamConfig,
    channels: usize,
    buf: VecDeque<Vec<f64>>,
    /// Time steps consumed so far.
    seen: usize,
    /// Start of the next window to emit.
    next_t: usize,
}

impl<'m> StreamState<'m> {
    pub fn new(model: &'m Model, cfg: StreamConfig) -> Result<Self, DiagnoseError> {
        let p = &model.meta.preprocess;
        if cfg.window_len != p.window_len {
            return Err(DiagnoseError::Mismatch(format!(
                "window length {} but the model was trained on {}",
                cfg.window_len, p.window_len
            )));
        }
        if cfg.k != p.k {
            return Err(DiagnoseError::Mismatch(format!("k = {} but the model was trained with k = {}", cfg.k, p.k)));
        }
        if cfg.stride == 0 {
            return Err(DiagnoseError::Mismatch("stride must be at least 1".into()));
        }
        p.validate()?;
        let channels = channels_for(model)?;
        Ok(Self { model, cfg, channels, buf: VecDeque::with_capacity(cfg.window_len), seen: 0, next_t: 0 })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Feeds one time step (one value per channel); returns a decision when
    /// a window completes.
    pub fn push(&mut self, step: &[f64]) -> Result<Option<Decision>, DiagnoseError> {
        if step.len() != self.channels {
            return Err(DiagnoseError::Channels { step: self.seen, got: step.len(), expected: self.channels });
        }
        if step.iter().any(|v| !v.is_finite()) {
            return Err(DiagnoseError::NonFinite(format!("time step {}", self.seen)));
        }
        if self.buf.len() == self.cfg.window_len {
            self.buf.pop_front();
        }
        self.buf.push_back(step.to_vec());
        self.seen += 1;
        if self.seen < self.next_t + self.cfg.window_len {
            return Ok(None);
        }
        let t = self.next_t;
        self.next_t += self.cfg.stride;
        self.decide(t).map(Some)
    }

    fn decide(&self, t: usize) -> Result<Decision, DiagnoseError> {
        let len = self.cfg.window_len;
        let mut data = Vec::with_capacity(self.channels * len);
        for ch in 0..self.channels {
            data.extend(self.buf.iter().map(|row| row[ch]));
        }
        let window = Tensor::matrix(self.channels, len, data).map_err(GraphError::from)?;
        let sample = window_to_sample(&window, &self.model.meta.preprocess, 0)?;
        let inf = self.model.infer(&sample)?;
        let (class, posterior) = map_decision(&inf.logits)?;
        Ok(Decision { t, class, posterior, gate_weights: inf.gate_weights, logits: inf.logits })
    }
}

/// Iterator adapter over [`StreamState`]: pulls time steps from `source`
/// and yields one decision per completed window.
pub struct StreamDiagnose<'m, I> {
    state: StreamState<'m>,
    source: I,
    failed: bool,
}

impl<I> Iterator for StreamDiagnose<'_, I>
where
    I: Iterator<Item = Vec<f64>>,
{
    type Item = Result<Decision, DiagnoseError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        for step in self.source.by_ref() {
            match self.state.push(&step) {
                Ok(None) => continue,
                Ok(Some(d)) => return Some(Ok(d)),
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
        None
    }
}

/// Sliding-window diagnosis of a stream of time steps. Configuration
/// mismatches are reported here, before any data is read.
pub fn stream_diagnose<I>(
    source: I,
    model: &Model,
    cfg: StreamConfig,
) -> Result<StreamDiagnose<'_, I::IntoIter>, DiagnoseError>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    Ok(StreamDiagnose { state: StreamState::new(model, cfg)?, source: source.into_iter(), failed: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_examples() {
        let (c, p) = map_decision(&[2.0, 1.0, 0.0]).unwrap();
        assert_eq!(c, 0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (c, p) = map_decision(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c, 0);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(map_decision(&[f64::NAN]).is_err());
    }
}
