use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, TrainError};
use crate::graphio::{GraphSample, PreprocessConfig};
use crate::mplayers::{
    dca_layer, gat_layer, gcn_layer, poladca_layer, sca_attend, xavier, Activation, GraphCtx, LayerParams,
};
use crate::numkit::{Checkpoint, ParamMap, Tape, Tensor, Var};

/// Dense layer `x·W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<LayerParams<T>>,
    pub head: Vec<Linear<T>>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            head: self.head.iter().map(|l| Linear { w: f(&l.w), b: f(&l.b) }).collect(),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layer{i}/"), f);
        }
        for (i, l) in self.head.iter().enumerate() {
            f(format!("classifier/fc{i}/W"), &l.w);
            f(format!("classifier/fc{i}/b"), &l.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layer{i}/"), f);
        }
        for (i, l) in self.head.iter_mut().enumerate() {
            f(format!("classifier/fc{i}/W"), &mut l.w);
            f(format!("classifier/fc{i}/b"), &mut l.b);
        }
    }
}

/// Self-description stored next to the parameters in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub input_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// `1 × K`.
    pub logits: Var,
    /// Expert routing weights of the last layer, `n × E`, for fused schemes.
    pub routing: Option<Var>,
}

/// Result of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Vec<f64>,
    /// Node-mean of the last layer's expert routing weights.
    pub gate_weights: Vec<f64>,
}

/// `−z_y + logsumexp(z)`.
pub fn nll_loss(tape: &mut Tape, logits: Var, y: usize) -> Result<Var, TrainError> {
    Ok(tape.nll(logits, y)?)
}

/// Plain-value counterpart of [`nll_loss`].
pub(crate) fn nll_value(logits: &[f64], y: usize) -> Result<f64, TrainError> {
    if y >= logits.len() {
        return Err(TrainError::Config(format!("label {y} with {} classes", logits.len())));
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
    Ok(mx + sum.ln() - logits[y])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub meta: ModelMeta,
    pub params: ModelParams<Tensor>,
}

impl Model {
    /// Fresh Glorot-initialized model seeded by `config.seed`.
    pub fn init(config: ModelConfig, preprocess: PreprocessConfig, input_dim: usize) -> Result<Self, TrainError> {
        config.validate()?;
        if input_dim == 0 {
            return Err(TrainError::Config("input_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = config.d_model;
        let layers = (0..config.n_layers)
            .map(|l| {
                let d_in = if l == 0 { input_dim } else { m };
                LayerParams::init(config.scheme, d_in, m, config.n_heads, config.n_experts, &mut rng)
            })
            .collect();
        let mut dims = vec![m];
        dims.extend(&config.classifier_dims);
        dims.push(config.n_classes);
        let head =
            dims.windows(2).map(|w| Linear { w: xavier(w[0], w[1], &mut rng), b: Tensor::zeros(&[1, w[1]]) }).collect();
        Ok(Self { meta: ModelMeta { model: config, preprocess, input_dim }, params: ModelParams { layers, head } })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.meta.model
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.params.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<Var> {
        self.params.map(&mut |t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
    }

    /// Full network on one graph: message-passing layers, mean-pool readout,
    /// classifier MLP. Dropout is applied to every layer output when an RNG
    /// is supplied.
    pub fn forward(
        cfg: &ModelConfig,
        tape: &mut Tape,
        params: &ModelParams<Var>,
        x: Var,
        ctx: &GraphCtx,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOut, TrainError> {
        let heads = cfg.n_heads;
        let mut h = x;
        let mut routing = None;
        for layer in &params.layers {
            h = match layer {
                LayerParams::Gcn(p) => gcn_layer(tape, h, ctx, p, Activation::Relu)?,
                LayerParams::Gat(p) => gat_layer(tape, h, ctx, p, Activation::Relu)?,
                LayerParams::Sca(p) => {
                    let a = sca_attend(tape, h, h, p, heads)?;
                    tape.relu(a)?
                }
                LayerParams::Dca(p) => {
                    let out = dca_layer(tape, h, ctx, p, heads)?;
                    routing = out.routing;
                    out.h
                }
                LayerParams::Pola(p) => {
                    let out = poladca_layer(tape, h, ctx, p, heads, cfg.pola_activation)?;
                    routing = out.routing;
                    out.h
                }
            };
            if let Some(rng) = dropout.as_deref_mut() {
                if cfg.dropout > 0.0 {
                    let (r, c) = tape.value(h).dims2()?;
                    let keep = 1.0 - cfg.dropout;
                    let mask = (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                    let mask = tape.constant(Tensor::matrix(r, c, mask)?);
                    h = tape.hadamard(h, mask)?;
                }
            }
        }
        let n = ctx.n;
        let pool = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
        let mut z = tape.matmul(pool, h)?;
        let last = params.head.len() - 1;
        for (i, lin) in params.head.iter().enumerate() {
            z = tape.matmul(z, lin.w)?;
            z = tape.add_row(z, lin.b)?;
            if i < last {
                z = tape.relu(z)?;
            }
        }
        Ok(ForwardOut { logits: z, routing })
    }

    fn check_input(&self, sample: &GraphSample) -> Result<(), TrainError> {
        if sample.feature_dim() != self.meta.input_dim {
            return Err(TrainError::Config(format!(
                "sample has {} features per node, model expects {}",
                sample.feature_dim(),
                self.meta.input_dim
            )));
        }
        Ok(())
    }

    /// Inference on one sample with a precomputed graph context.
    pub fn infer_with(&self, sample: &GraphSample, ctx: &GraphCtx) -> Result<Inference, TrainError> {
        self.check_input(sample)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(sample.node_features.clone());
        let out = Self::forward(self.config(), &mut tape, &params, x, ctx, None)?;
        let gate_weights = match out.routing {
            Some(w) => {
                let w = tape.value(w);
                let (n, e) = w.dims2()?;
                (0..e).map(|j| (0..n).map(|i| w.get(i, j)).sum::<f64>() / n as f64).collect()
            }
            None => Vec::new(),
        };
        Ok(Inference { logits: tape.value(out.logits).data().to_vec(), gate_weights })
    }

    pub fn infer(&self, sample: &GraphSample) -> Result<Inference, TrainError> {
        self.infer_with(sample, &GraphCtx::from_sample(sample)?)
    }

    pub fn logits(&self, sample: &GraphSample) -> Result<Vec<f64>, TrainError> {
        Ok(self.infer(sample)?.logits)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<ModelMeta> {
        let mut params = ParamMap::new();
        self.params.visit(&mut |k, t| {
            params.insert(k, t.clone());
        });
        Checkpoint::new(self.meta.clone(), params)
    }

    pub fn from_checkpoint(ck: Checkpoint<ModelMeta>) -> Result<Self, TrainError> {
        let meta = ck.meta;
        let mut model = Self::init(meta.model.clone(), meta.preprocess.clone(), meta.input_dim)?;
        model.meta = meta;
        let mut params = ck.params;
        let mut problem = None;
        model.params.visit_mut(&mut |k, t| match params.remove(&k) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => {
                problem.get_or_insert(format!("`{k}` has shape {:?}, expected {:?}", v.shape(), t.shape()));
            }
            None => {
                problem.get_or_insert(format!("missing parameter `{k}`"));
            }
        });
        if let Some(p) = problem {
            return Err(TrainError::Checkpoint(p));
        }
        if let Some(extra) = params.keys().next() {
            return Err(TrainError::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String, TrainError> {
        self.to_checkpoint().to_json().map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let ck = Checkpoint::from_json(s).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ck)
    }
}
