//! Model assembly, loss, Adam, learning-rate schedule, metrics and the
//! offline training loop.

mod fit;
mod metrics;
mod model;
mod optim;

use serde::{Deserialize, Serialize};

use crate::graphio::GraphError;
use crate::mplayers::{Activation, LayerError, Scheme, DEFAULT_EXPERTS};
use crate::numkit::NumError;

pub use fit::{fit, mean_loss, train_step, Augment, EpochLog, TrainReport};
pub use metrics::{argmax, evaluate_metrics, Metrics};
pub use model::{nll_loss, ForwardOut, Inference, Linear, Model, ModelMeta, ModelParams};
pub use optim::{adam_step, step_lr, Adam};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> Self {
        TrainError::Layer(LayerError::Num(e))
    }
}

impl TrainError {
    /// True for failures caused by non-finite numbers during training.
    pub fn is_numeric(&self) -> bool {
        matches!(self, TrainError::Diverged { .. } | TrainError::Layer(LayerError::Num(NumError::NonFinite(_))))
    }
}

/// Architecture, optimizer and schedule hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub scheme: Scheme,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub dropout: f64,
    pub classifier_dims: Vec<usize>,
    pub n_classes: usize,
    /// Activation after the PolaDCA output projection.
    pub pola_activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::PolaDca,
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            n_experts: DEFAULT_EXPERTS,
            dropout: 0.01,
            classifier_dims: vec![128, 64],
            n_classes: 5,
            pola_activation: Activation::Relu,
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 5e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 20,
            patience: 20,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.n_experts == 0 {
            return bad("d_model, n_layers, n_heads and n_experts must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.classifier_dims.contains(&0) {
            return bad("classifier layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.lr_decay_every == 0 {
            return bad("epochs, batch_size, patience and lr_decay_every must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        Ok(())
    }
}
