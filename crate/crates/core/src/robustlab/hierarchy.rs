use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{empirical_lipschitz, Correlation, LipschitzEstimate, NoiseSpec, RobustError};
use crate::graphio::{GraphSample, PreprocessConfig, Split};
use crate::mplayers::{Activation, GraphCtx, LayerParams, PolaLayerParams, PolarParams, Scheme};
use crate::numkit::Tensor;
use crate::trainer::{fit, Augment, Model, ModelConfig, TrainError};

/// `ρ = (1 − c)·I + c·s·sᵀ` where `s` is +1 on the first half of the nodes
/// and −1 on the rest: positively correlated within each half,
/// anti-correlated across. PSD for `c ∈ [0, 1]`.
pub fn anti_correlated_rho(n: usize, c: f64) -> Result<Tensor, RobustError> {
    if !(0.0..=1.0).contains(&c) {
        return Err(RobustError::Spec(format!("anti-correlation strength {c} outside [0, 1]")));
    }
    let sign = |i: usize| if i < n / 2 { 1.0 } else { -1.0 };
    let data = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j {
                1.0
            } else {
                c * sign(i) * sign(j)
            }
        })
        .collect();
    Ok(Tensor::matrix(n, n, data)?)
}

/// A PolaDCA model that reproduces a trained DCA model: the same local
/// projections, gate and experts, polarity weights (1, 1, −1, −1),
/// identity output projection and identity activation.
pub fn reduced_poladca(dca: &Model) -> Result<Model, RobustError> {
    let cfg = dca.config();
    if cfg.scheme != Scheme::Dca {
        return Err(RobustError::Spec(format!("reduction needs a DCA model, got {}", cfg.scheme)));
    }
    let m = cfg.d_model;
    let mut out = dca.clone();
    out.meta.model.scheme = Scheme::PolaDca;
    out.meta.model.pola_activation = Activation::Identity;
    for layer in &mut out.params.layers {
        if let LayerParams::Dca(p) = layer {
            *layer = LayerParams::Pola(PolaLayerParams {
                dca: p.clone(),
                polar: PolarParams::reduction(cfg.n_heads, Tensor::identity(m)),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    /// Shared architecture and optimizer settings; the scheme is set per run.
    pub model: ModelConfig,
    /// Feature noise std, for augmentation during training and for the
    /// Lipschitz probes.
    pub sigma_bar: f64,
    /// Strength `c` of the anti-correlated ρ.
    pub anti_correlation: f64,
    /// Noise draws per probed sample.
    pub trials: usize,
    /// Number of held-out test samples probed.
    pub probe_samples: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self { model: ModelConfig::default(), sigma_bar: 0.3, anti_correlation: 0.8, trials: 20, probe_samples: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeLipschitz {
    pub scheme: Scheme,
    pub iid: LipschitzEstimate,
    pub anti_correlated: Option<LipschitzEstimate>,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub schemes: Vec<SchemeLipschitz>,
    /// `|L̂(reduced PolaDCA) − L̂(DCA)|`, worst of mean and max, iid noise.
    pub reduction_gap: Option<f64>,
    /// Schemes that failed to train, with the reason.
    pub failures: Vec<String>,
}

impl SeedResult {
    fn get(&self, s: Scheme) -> Option<&SchemeLipschitz> {
        self.schemes.iter().find(|r| r.scheme == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchySummary {
    pub median_gcn: f64,
    pub median_dca: f64,
    pub median_poladca: f64,
    /// `median L̂_PolaDCA ≤ median L̂_DCA ≤ median L̂_GCN`.
    pub ordering_holds: bool,
    /// Seeds where `L̂_PolaDCA < L̂_DCA` under the anti-correlated noise.
    pub anti_wins: usize,
    pub anti_seeds: usize,
    pub anti_fraction: f64,
    pub max_reduction_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub config: HierarchyConfig,
    pub seeds: Vec<SeedResult>,
    pub summary: HierarchySummary,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pooled perturbation ratios of a model's logits over `probes`, each
/// probe with its own noise stream derived from `spec.seed`. The graph of
/// each sample stays fixed; only node features are perturbed.
fn model_lipschitz(
    model: &Model,
    probes: &[(&GraphSample, GraphCtx)],
    spec: &NoiseSpec,
    trials: usize,
) -> Result<LipschitzEstimate, RobustError> {
    let mut parts = Vec::with_capacity(probes.len());
    for (k, (s, ctx)) in probes.iter().enumerate() {
        let f = |x: &Tensor| -> Result<Tensor, RobustError> {
            let logits = model.infer_with(&s.with_features(x.clone()), ctx)?.logits;
            Ok(Tensor::matrix(1, logits.len(), logits)?)
        };
        let spec_k = spec.with_seed(spec.seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        parts.push(empirical_lipschitz(f, &s.node_features, &spec_k, trials)?);
    }
    Ok(LipschitzEstimate::merge(&parts))
}

/// Trains GCN, DCA and PolaDCA per seed with noise-augmented batches, then
/// probes each network's sensitivity to i.i.d. feature noise, and for the
/// attention models to anti-correlated node noise. Each seed also checks
/// that the PolaDCA reduction of the trained DCA model has the same
/// sensitivity as DCA itself.
pub fn hierarchy_experiment(
    samples: &[GraphSample],
    split: &Split,
    preprocess: &PreprocessConfig,
    cfg: &HierarchyConfig,
    seeds: &[u64],
) -> Result<HierarchyReport, RobustError> {
    if seeds.len() < 5 {
        return Err(RobustError::Spec(format!("at least 5 seeds are required, got {}", seeds.len())));
    }
    if cfg.trials == 0 || cfg.probe_samples == 0 {
        return Err(RobustError::Spec("trials and probe_samples must be positive".into()));
    }
    let probes: Vec<(&GraphSample, GraphCtx)> = split
        .test
        .iter()
        .take(cfg.probe_samples)
        .map(|&i| Ok((&samples[i], GraphCtx::from_sample(&samples[i])?)))
        .collect::<Result<_, RobustError>>()?;
    let n = probes.first().map(|(s, _)| s.n_nodes()).ok_or_else(|| RobustError::Spec("empty test split".into()))?;
    if probes.iter().any(|(s, _)| s.n_nodes() != n) {
        return Err(RobustError::Spec("probe samples must share a node count".into()));
    }
    let rho = anti_correlated_rho(n, cfg.anti_correlation)?;

    let sigma = cfg.sigma_bar;
    let augment = move |s: &GraphSample, rng: &mut ChaCha8Rng| -> Result<Tensor, TrainError> {
        let mut x = s.node_features.clone();
        for v in x.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
        Ok(x)
    };

    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let iid = NoiseSpec::iid(sigma, seed);
        let anti = NoiseSpec { sigma_bar: sigma, correlation: Correlation::Pairwise(rho.clone()), seed };
        let mut res = SeedResult { seed, schemes: Vec::new(), reduction_gap: None, failures: Vec::new() };
        for scheme in [Scheme::Gcn, Scheme::Dca, Scheme::PolaDca] {
            let mc = ModelConfig { scheme, seed, ..cfg.model.clone() };
            let trained = fit(samples, split, &mc, preprocess, Some(&augment as &Augment));
            let (model, report) = match trained {
                Ok(r) => r,
                Err(e) if e.is_numeric() => {
                    res.failures.push(format!("{scheme}: {e}"));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let iid_est = model_lipschitz(&model, &probes, &iid, cfg.trials)?;
            let anti_est =
                if scheme == Scheme::Gcn { None } else { Some(model_lipschitz(&model, &probes, &anti, cfg.trials)?) };
            if scheme == Scheme::Dca {
                let reduced = reduced_poladca(&model)?;
                let red = model_lipschitz(&reduced, &probes, &iid, cfg.trials)?;
                res.reduction_gap = Some((red.mean - iid_est.mean).abs().max((red.max - iid_est.max).abs()));
            }
            res.schemes.push(SchemeLipschitz {
                scheme,
                iid: iid_est,
                anti_correlated: anti_est,
                test_accuracy: report.test.accuracy,
            });
        }
        results.push(res);
    }

    let med = |s: Scheme| median(results.iter().filter_map(|r| r.get(s)).map(|l| l.iid.mean).collect());
    let (mg, md, mp) = (med(Scheme::Gcn), med(Scheme::Dca), med(Scheme::PolaDca));
    let mut anti_wins = 0;
    let mut anti_seeds = 0;
    for r in &results {
        let pair = r.get(Scheme::PolaDca).zip(r.get(Scheme::Dca));
        if let Some((p, d)) = pair {
            if let (Some(pa), Some(da)) = (&p.anti_correlated, &d.anti_correlated) {
                anti_seeds += 1;
                if pa.mean < da.mean {
                    anti_wins += 1;
                }
            }
        }
    }
    let summary = HierarchySummary {
        median_gcn: mg,
        median_dca: md,
        median_poladca: mp,
        ordering_holds: mp <= md && md <= mg,
        anti_wins,
        anti_seeds,
        anti_fraction: if anti_seeds == 0 { 0.0 } else { anti_wins as f64 / anti_seeds as f64 },
        max_reduction_gap: results.iter().filter_map(|r| r.reduction_gap).fold(0.0, f64::max),
    };
    Ok(HierarchyReport { config: cfg.clone(), seeds: results, summary })
}
