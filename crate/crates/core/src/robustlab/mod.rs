//! Noise-robustness experiments: correlated feature perturbations,
//! empirical Lipschitz estimates, the per-node deviation bounds of the
//! local features and attention, noise amplification factors, and the
//! trained-model robustness hierarchy.

mod hierarchy;
mod lemmas;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphio::GraphError;
use crate::mplayers::{flop_count, FlopScheme, LayerError};
use crate::numkit::{NumError, Tensor};
use crate::trainer::TrainError;

pub use hierarchy::{
    anti_correlated_rho, hierarchy_experiment, reduced_poladca, HierarchyConfig, HierarchyReport, HierarchySummary,
    SchemeLipschitz, SeedResult,
};
pub use lemmas::{check_lemma_bounds, lemma_suite, BoundStats, LemmaReport, LEMMA_SLACK};

#[derive(Debug, Error)]
pub enum RobustError {
    #[error("invalid noise specification: {0}")]
    Spec(String),
    #[error("correlation matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Eigenvalues below this are treated as a non-PSD correlation matrix.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    Iid,
    /// `n × n` node correlation matrix.
    Pairwise(Tensor),
}

/// Additive Gaussian feature noise with per-entry std `sigma_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_bar: f64,
    pub correlation: Correlation,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn iid(sigma_bar: f64, seed: u64) -> Self {
        Self { sigma_bar, correlation: Correlation::Iid, seed }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Checks everything except positive semidefiniteness, which the
    /// sampler finds while factorizing.
    pub fn validate(&self) -> Result<(), RobustError> {
        if !self.sigma_bar.is_finite() || self.sigma_bar < 0.0 {
            return Err(RobustError::Spec(format!("sigma_bar {} must be finite and >= 0", self.sigma_bar)));
        }
        if let Correlation::Pairwise(rho) = &self.correlation {
            validate_rho(rho)?;
        }
        Ok(())
    }
}

fn validate_rho(rho: &Tensor) -> Result<usize, RobustError> {
    let (n, c) = rho.dims2()?;
    if n != c {
        return Err(RobustError::Spec(format!("rho must be square, got {n}x{c}")));
    }
    for i in 0..n {
        if (rho.get(i, i) - 1.0).abs() > 1e-12 {
            return Err(RobustError::Spec(format!("rho[{i}][{i}] = {} is not 1", rho.get(i, i))));
        }
        for j in 0..n {
            let v = rho.get(i, j);
            if !(-1.0..=1.0).contains(&v) {
                return Err(RobustError::Spec(format!("rho[{i}][{j}] = {v} outside [-1, 1]")));
            }
            if (v - rho.get(j, i)).abs() > 1e-12 {
                return Err(RobustError::Spec(format!("rho is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(n)
}

/// `L` with `L·Lᵀ = ρ`, from the symmetric eigendecomposition
/// `ρ = V·diag(λ)·Vᵀ` as `L = V·diag(√λ)`.
pub fn correlation_factor(rho: &Tensor) -> Result<Tensor, RobustError> {
    let n = validate_rho(rho)?;
    let m = DMatrix::from_row_slice(n, n, rho.data());
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE {
        return Err(RobustError::NotPsd(min));
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            data[i * n + k] = eig.eigenvectors[(i, k)] * eig.eigenvalues[k].max(0.0).sqrt();
        }
    }
    Ok(Tensor::matrix(n, n, data)?)
}

/// Reusable noise source for one spec: draws `η` for `n × D` feature
/// matrices, seeded by `spec.seed`.
pub struct NoiseSampler {
    sigma: f64,
    factor: Option<Tensor>,
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    pub fn new(spec: &NoiseSpec) -> Result<Self, RobustError> {
        spec.validate()?;
        let factor = match &spec.correlation {
            Correlation::Iid => None,
            Correlation::Pairwise(rho) => Some(correlation_factor(rho)?),
        };
        Ok(Self { sigma: spec.sigma_bar, factor, rng: ChaCha8Rng::seed_from_u64(spec.seed) })
    }

    /// Draws `η` shaped like `x`; returns `(x + η, η)`.
    pub fn draw(&mut self, x: &Tensor) -> Result<(Tensor, Tensor), RobustError> {
        let (n, d) = x.dims2()?;
        let z: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let z = Tensor::matrix(n, d, z)?;
        let mut eta = match &self.factor {
            None => z,
            Some(l) => {
                if l.rows() != n {
                    return Err(RobustError::Spec(format!("rho is {}x{0} for a {n}-node graph", l.rows())));
                }
                l.matmul(&z)?
            }
        };
        eta.data_mut().iter_mut().for_each(|v| *v *= self.sigma);
        let mut noisy = x.clone();
        for (o, e) in noisy.data_mut().iter_mut().zip(eta.data()) {
            *o += e;
        }
        Ok((noisy, eta))
    }
}

/// One draw of `(X + η, η)` under `spec`.
pub fn perturb_features(x: &Tensor, spec: &NoiseSpec) -> Result<(Tensor, Tensor), RobustError> {
    NoiseSampler::new(spec)?.draw(x)
}

/// Perturbation ratios `‖f(X + η) − f(X)‖_F / ‖η‖_F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub mean: f64,
    pub max: f64,
    pub trials: usize,
    /// Trials dropped because `‖η‖_F = 0`.
    pub skipped: usize,
    #[serde(skip)]
    pub ratios: Vec<f64>,
}

impl LipschitzEstimate {
    fn from_ratios(ratios: Vec<f64>, skipped: usize) -> Self {
        let trials = ratios.len();
        let mean = if trials == 0 { 0.0 } else { ratios.iter().sum::<f64>() / trials as f64 };
        let max = ratios.iter().copied().fold(0.0, f64::max);
        Self { mean, max, trials, skipped, ratios }
    }

    /// Pools the trials of several estimates.
    pub fn merge(parts: &[LipschitzEstimate]) -> Self {
        let ratios: Vec<f64> = parts.iter().flat_map(|p| p.ratios.iter().copied()).collect();
        Self::from_ratios(ratios, parts.iter().map(|p| p.skipped).sum())
    }
}

/// Monte-Carlo sensitivity of `f` at `x` under `spec`.
pub fn empirical_lipschitz<F>(
    mut f: F,
    x: &Tensor,
    spec: &NoiseSpec,
    trials: usize,
) -> Result<LipschitzEstimate, RobustError>
where
    F: FnMut(&Tensor) -> Result<Tensor, RobustError>,
{
    if trials == 0 {
        return Err(RobustError::Spec("trials must be at least 1".into()));
    }
    let mut sampler = NoiseSampler::new(spec)?;
    let clean = f(x)?;
    let mut ratios = Vec::with_capacity(trials);
    let mut skipped = 0;
    for _ in 0..trials {
        let (noisy, eta) = sampler.draw(x)?;
        let en = eta.frobenius_norm();
        if en == 0.0 {
            skipped += 1;
            continue;
        }
        let out = f(&noisy)?;
        if out.shape() != clean.shape() {
            return Err(
                NumError::Shape(format!("f changed output shape {:?} -> {:?}", clean.shape(), out.shape())).into()
            );
        }
        let diff: f64 = out.data().iter().zip(clean.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        ratios.push(diff / en);
    }
    Ok(LipschitzEstimate::from_ratios(ratios, skipped))
}

/// Noise amplification of a weighted sum of correlated channels,
/// `γ = sqrt(1 + 2Σ_{i<j} α_i α_j ρ_ij)`, and its polarized counterpart
/// `γ_pol = sqrt(1 − 2Σ_{i<j} |α_i α_j ρ_ij|)`. Negative radicands are
/// clamped to 0 and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amplification {
    pub gamma: f64,
    pub gamma_pol: f64,
    pub gamma_clamped: bool,
    pub gamma_pol_clamped: bool,
}

pub fn amplification_factors(alphas: &[f64], rho: &Tensor) -> Result<Amplification, RobustError> {
    let n = validate_rho(rho)?;
    if n != alphas.len() {
        return Err(RobustError::Spec(format!("{} weights for a {n}x{n} rho", alphas.len())));
    }
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(RobustError::Spec("weights must be finite".into()));
    }
    let mut cross = 0.0;
    let mut cross_abs = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let t = alphas[i] * alphas[j] * rho.get(i, j);
            cross += t;
            cross_abs += t.abs();
        }
    }
    let g = 1.0 + 2.0 * cross;
    let gp = 1.0 - 2.0 * cross_abs;
    Ok(Amplification {
        gamma: g.max(0.0).sqrt(),
        gamma_pol: gp.max(0.0).sqrt(),
        gamma_clamped: g < 0.0,
        gamma_pol_clamped: gp < 0.0,
    })
}

/// Correlation matrix with every off-diagonal entry equal to `r`.
pub fn uniform_rho(n: usize, r: f64) -> Result<Tensor, RobustError> {
    let data = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { r }).collect();
    Ok(Tensor::matrix(n, n, data)?)
}

/// Per-layer FLOPs of the three attention schemes at one size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopRow {
    pub n: u64,
    pub d: u64,
    pub sca: u64,
    pub dca: u64,
    pub poladca: u64,
}

pub fn flop_row(n: u64, d: u64) -> FlopRow {
    FlopRow {
        n,
        d,
        sca: flop_count(FlopScheme::Sca, n, d),
        dca: flop_count(FlopScheme::Dca, n, d),
        poladca: flop_count(FlopScheme::PolaDca, n, d),
    }
}

/// Everything a robustness run produced; suites that were not run are
/// absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lemmas: Option<LemmaReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<HierarchyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplification: Option<Amplification>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flops: Option<Vec<FlopRow>>,
}

impl RobustnessReport {
    pub fn to_json(&self) -> Result<String, RobustError> {
        serde_json::to_string_pretty(self).map_err(|e| NumError::Serde(e.to_string()).into())
    }
}
