use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{argmax, evaluate_metrics, Metrics};
use super::model::{nll_value, Model};
use super::optim::{step_lr, Adam};
use super::{ModelConfig, TrainError};
use crate::graphio::{GraphSample, PreprocessConfig, Split};
use crate::mplayers::{GraphCtx, LayerError, Scheme};
use crate::numkit::{NumError, Tape, Var};

/// Produces the node features a training step sees for a sample, e.g. a
/// noise-perturbed copy. Called once per sample per step.
pub type Augment = dyn Fn(&GraphSample, &mut ChaCha8Rng) -> Result<crate::numkit::Tensor, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scheme: Scheme,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub epochs: Vec<EpochLog>,
    /// 0-based epoch whose parameters were restored.
    pub best_epoch: usize,
    /// Number of epochs actually run.
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub test: Metrics,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String, TrainError> {
        serde_json::to_string_pretty(self).map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Confusion matrix as CSV: header `true\pred,0,1,...`, one row per true
    /// class.
    pub fn confusion_csv(&self) -> String {
        let k = self.test.confusion.len();
        let mut s = String::from("true\\pred");
        for c in 0..k {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for (c, row) in self.test.confusion.iter().enumerate() {
            s.push_str(&c.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn diverged(epoch: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Layer(LayerError::Num(NumError::NonFinite(d))) => TrainError::Diverged { epoch, detail: d },
        TrainError::Diverged { detail, .. } => TrainError::Diverged { epoch, detail },
        other => other,
    }
}

/// Mean loss and predictions over `idx`.
fn evaluate(
    model: &Model,
    samples: &[GraphSample],
    ctxs: &[GraphCtx],
    idx: &[usize],
) -> Result<(f64, Vec<usize>), TrainError> {
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(idx.len());
    for &i in idx {
        let logits = model.infer_with(&samples[i], &ctxs[i])?.logits;
        loss += nll_value(&logits, samples[i].label)?;
        preds.push(argmax(&logits));
    }
    Ok((loss / idx.len() as f64, preds))
}

/// One Adam step on the mean NLL of `batch`. Returns the summed (not
/// averaged) batch loss. `dropout` switches training-mode dropout on.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[(&GraphSample, &GraphCtx)],
    lr: f64,
    rng: &mut ChaCha8Rng,
    dropout: bool,
    augment: Option<&Augment>,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let cfg = model.config().clone();
    let mut tape = Tape::new();
    let pv = model.bind(&mut tape, true);
    let mut losses = Vec::with_capacity(batch.len());
    for &(s, ctx) in batch {
        let feats = match augment {
            Some(f) => f(s, rng)?,
            None => s.node_features.clone(),
        };
        let x = tape.constant(feats);
        let drop_rng = if dropout { Some(&mut *rng) } else { None };
        let out = Model::forward(&cfg, &mut tape, &pv, x, ctx, drop_rng)?;
        losses.push(tape.nll(out.logits, s.label)?);
    }
    let mut sum = losses[0];
    for &l in &losses[1..] {
        sum = tape.add(sum, l)?;
    }
    let loss = tape.scale(sum, 1.0 / batch.len() as f64)?;
    let total = tape.value(sum).item()?;
    let grads = tape.backward(loss)?;

    let mut vars: Vec<Var> = Vec::new();
    pv.visit(&mut |_, &v| vars.push(v));
    adam.begin_step();
    let mut slot = 0;
    let mut failure = None;
    model.params.visit_mut(&mut |_, t| {
        if failure.is_some() {
            return;
        }
        let zeros;
        let g = match grads.raw(vars[slot]) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; t.numel()];
                &zeros
            }
        };
        if let Err(e) = adam.update(slot, t, g, lr) {
            failure = Some(e);
        }
        slot += 1;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(total),
    }
}

/// Mean NLL of a model over samples, in inference mode.
pub fn mean_loss(model: &Model, batch: &[(&GraphSample, &GraphCtx)]) -> Result<f64, TrainError> {
    let mut loss = 0.0;
    for &(s, ctx) in batch {
        loss += nll_value(&model.infer_with(s, ctx)?.logits, s.label)?;
    }
    Ok(loss / batch.len() as f64)
}

/// Offline training: shuffled mini-batches, mean batch NLL, Adam with L2,
/// step decay, early stopping on validation loss with best-model restore,
/// then test metrics.
pub fn fit(
    samples: &[GraphSample],
    split: &Split,
    cfg: &ModelConfig,
    preprocess: &PreprocessConfig,
    augment: Option<&Augment>,
) -> Result<(Model, TrainReport), TrainError> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(TrainError::Config("train, validation and test splits must all be non-empty".into()));
    }
    let all = split.train.iter().chain(&split.val).chain(&split.test);
    if let Some(&bad) = all.clone().find(|&&i| i >= samples.len()) {
        return Err(TrainError::Config(format!("split index {bad} out of range")));
    }
    let d = samples[split.train[0]].feature_dim();
    for &i in all {
        let s = &samples[i];
        if s.feature_dim() != d {
            return Err(TrainError::Config(format!("sample {i} has {} features, expected {d}", s.feature_dim())));
        }
        if s.label >= cfg.n_classes {
            return Err(TrainError::Config(format!("sample {i} has label {} >= {}", s.label, cfg.n_classes)));
        }
    }
    let ctxs = samples.iter().map(GraphCtx::from_sample).collect::<Result<Vec<_>, _>>()?;

    let mut model = Model::init(cfg.clone(), preprocess.clone(), d)?;
    let mut adam = Adam::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut best = (f64::INFINITY, model.params.clone(), 0usize);
    let mut wait = 0;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order = split.train.clone();
    let mut early_stopped = false;

    for epoch in 0..cfg.epochs {
        let lr = step_lr(cfg.lr, epoch, cfg.lr_decay_every, cfg.lr_decay_factor);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<(&GraphSample, &GraphCtx)> = batch.iter().map(|&i| (&samples[i], &ctxs[i])).collect();
            total += train_step(&mut model, &mut adam, &items, lr, &mut rng, true, augment).map_err(diverged(epoch))?;
        }
        let train_loss = total / order.len() as f64;
        let (val_loss, preds) = evaluate(&model, samples, &ctxs, &split.val).map_err(diverged(epoch))?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, detail: "non-finite loss".into() });
        }
        let labels: Vec<usize> = split.val.iter().map(|&i| samples[i].label).collect();
        let val_accuracy = evaluate_metrics(&preds, &labels, cfg.n_classes)?.accuracy;
        logs.push(EpochLog { epoch, lr, train_loss, val_loss, val_accuracy });

        if val_loss < best.0 {
            best = (val_loss, model.params.clone(), epoch);
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                early_stopped = true;
                break;
            }
        }
    }

    model.params = best.1;
    let (_, preds) = evaluate(&model, samples, &ctxs, &split.test)?;
    let labels: Vec<usize> = split.test.iter().map(|&i| samples[i].label).collect();
    let test = evaluate_metrics(&preds, &labels, cfg.n_classes)?;
    let report = TrainReport {
        scheme: cfg.scheme,
        n_train: split.train.len(),
        n_val: split.val.len(),
        n_test: split.test.len(),
        stopped_epoch: logs.len(),
        epochs: logs,
        best_epoch: best.2,
        early_stopped,
        test,
    };
    Ok((model, report))
}
