use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GraphError, SignalRecord};
use crate::numkit::Tensor;

/// Shape of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    /// Time steps per record.
    pub length: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_classes: 5, samples_per_class: 40, channels: 2, length: 1000 }
    }
}

/// Peak amplitude of the fundamental, against unit-variance noise.
const SIGNAL_AMPLITUDE: f64 = 2.0;

/// Base frequency of class `c` in cycles per sample.
pub(crate) fn base_frequency(c: usize) -> f64 {
    0.02 + 0.015 * c as f64
}

/// Stand-in for bearing vibration data. Class `c` is a sum of harmonics of
/// its own base frequency with a class-specific harmonic mix, plus an
/// amplitude-modulated decaying impulse train with a class-specific period,
/// plus unit Gaussian noise. Phases and small frequency jitter vary per
/// record; everything is driven by `seed`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, seed: u64) -> Result<Vec<SignalRecord>, GraphError> {
    if cfg.n_classes < 2 {
        return Err(GraphError::Config("at least two classes are required".into()));
    }
    if cfg.channels == 0 || cfg.length == 0 || cfg.samples_per_class == 0 {
        return Err(GraphError::Config("channels, length and samples_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    for _ in 0..cfg.samples_per_class {
        for c in 0..cfg.n_classes {
            out.push(SignalRecord::new(one_record(cfg, c, &mut rng)?, c)?);
        }
    }
    Ok(out)
}

fn one_record(cfg: &SynthConfig, c: usize, rng: &mut ChaCha8Rng) -> Result<Tensor, GraphError> {
    let f0 = base_frequency(c) * (1.0 + rng.random_range(-0.02..0.02));
    let harmonics = [1.0, 0.3 + 0.15 * (c % 3) as f64, 0.2 * ((c + 1) % 2) as f64].map(|a| SIGNAL_AMPLITUDE * a);
    let period = 40 + 17 * c;
    let f_mod = 0.003 * (c + 1) as f64;
    let shift = rng.random_range(0..period);
    let mut data = Vec::with_capacity(cfg.channels * cfg.length);
    for ch in 0..cfg.channels {
        let gain = 1.0 + 0.25 * ch as f64;
        let phases: Vec<f64> = (0..harmonics.len()).map(|_| rng.random_range(0.0..TAU)).collect();
        let mod_phase = rng.random_range(0.0..TAU);
        for t in 0..cfg.length {
            let tf = t as f64;
            let mut v = 0.0;
            for (h, (&a, &ph)) in harmonics.iter().zip(&phases).enumerate() {
                v += a * (TAU * f0 * (h + 1) as f64 * tf + ph).sin();
            }
            v *= gain;
            let tau = ((t + period - shift) % period) as f64;
            if tau < 20.0 {
                let envelope = 1.0 + 0.5 * (TAU * f_mod * tf + mod_phase).sin();
                v += 1.5 * envelope * (-0.25 * tau).exp() * (TAU * 0.25 * tau).sin();
            }
            let z: f64 = StandardNormal.sample(rng);
            data.push(v + z);
        }
    }
    Ok(Tensor::matrix(cfg.channels, cfg.length, data)?)
}
