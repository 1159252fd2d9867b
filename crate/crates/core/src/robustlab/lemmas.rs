use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Correlation, NoiseSampler, NoiseSpec, RobustError};
use crate::graphio::{build_knn_graph, GraphSample};
use crate::mplayers::{dca_attend, head_dim, local_features, DcaLayerParams, GraphCtx};
use crate::numkit::{spectral_norm, Tape, Tensor};

/// Absolute slack allowed before a bound counts as violated.
pub const LEMMA_SLACK: f64 = 1e-9;

/// Outcome of one family of per-node inequalities `lhs ≤ rhs`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundStats {
    pub checks: usize,
    pub violations: usize,
    /// Largest `lhs / rhs` seen with `rhs > 0`; 1 means tight.
    pub max_ratio: f64,
    /// Largest `lhs − rhs`.
    pub worst_excess: f64,
}

impl BoundStats {
    fn record(&mut self, lhs: f64, rhs: f64) {
        self.checks += 1;
        if lhs > rhs + LEMMA_SLACK {
            self.violations += 1;
        }
        if rhs > 0.0 {
            self.max_ratio = self.max_ratio.max(lhs / rhs);
        }
        let excess = lhs - rhs;
        if self.checks == 1 || excess > self.worst_excess {
            self.worst_excess = excess;
        }
    }

    fn merge(&mut self, o: &BoundStats) {
        if o.checks == 0 {
            return;
        }
        if self.checks == 0 || o.worst_excess > self.worst_excess {
            self.worst_excess = o.worst_excess;
        }
        self.checks += o.checks;
        self.violations += o.violations;
        self.max_ratio = self.max_ratio.max(o.max_ratio);
    }
}

/// Violation counts of the deviation bounds over a number of noise trials.
///
/// * `consensus`: `‖Δf_y(i)‖ ≤ ‖W_y‖₂ · mean_j ‖η_j‖`
/// * `diversity_sqrt2`: `‖Δf_z(i)‖ ≤ √2 · B_W · sqrt(mean_j ‖η_j‖²)`
/// * `diversity`: `‖Δf_z(i)‖ ≤ 2 · B_W · sqrt(Σ_j ‖η_j‖² / (|N(i)| − 1))`,
///   which holds for the deviation formula as implemented
/// * `attention`: per head and output row of both attention paths,
///   `‖Δo_i‖ ≤ (M/√d_k)·max_j(‖a'_i‖‖Δb_j‖ + ‖b_j‖‖Δa_i‖) + max_j ‖Δc_j‖`
///
/// with `B_W = max(‖W_y‖₂, ‖W_z‖₂)` and `M` the largest row norm among the
/// clean and perturbed query, key and value slices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub trials: usize,
    pub consensus: BoundStats,
    pub diversity_sqrt2: BoundStats,
    pub diversity: BoundStats,
    pub attention: BoundStats,
}

impl LemmaReport {
    pub fn merge(&mut self, o: &LemmaReport) {
        self.trials += o.trials;
        self.consensus.merge(&o.consensus);
        self.diversity_sqrt2.merge(&o.diversity_sqrt2);
        self.diversity.merge(&o.diversity);
        self.attention.merge(&o.attention);
    }

    /// Violations of the bounds that must hold for any parameters.
    pub fn proven_violations(&self) -> usize {
        self.consensus.violations + self.diversity.violations + self.attention.violations
    }
}

struct Features {
    fx: Tensor,
    fy: Tensor,
    fz: Tensor,
    /// Consensus and diversity attention outputs.
    p1: Tensor,
    p2: Tensor,
}

fn features(x: &Tensor, ctx: &GraphCtx, p: &DcaLayerParams<Tensor>, heads: usize) -> Result<Features, RobustError> {
    let mut tape = Tape::new();
    let pv = p.map(&mut |t| tape.constant(t.clone()));
    let xv = tape.constant(x.clone());
    let f = local_features(&mut tape, xv, ctx, &pv)?;
    let p1 = dca_attend(&mut tape, f.fx, f.fy, f.fz, heads)?;
    let p2 = dca_attend(&mut tape, f.fx, f.fz, f.fy, heads)?;
    let v = |t: crate::numkit::Var| tape.value(t).clone();
    Ok(Features { fx: v(f.fx), fy: v(f.fy), fz: v(f.fz), p1: v(p1), p2: v(p2) })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn slice(t: &Tensor, row: usize, h: usize, dk: usize) -> &[f64] {
    &t.row(row)[h * dk..(h + 1) * dk]
}

/// Attention bound for one path `attend(a, b, c)`, clean vs perturbed.
fn attention_bound(
    stats: &mut BoundStats,
    (a, b, c, o): (&Tensor, &Tensor, &Tensor, &Tensor),
    (a2, b2, c2, o2): (&Tensor, &Tensor, &Tensor, &Tensor),
    heads: usize,
    dk: usize,
) {
    let n = a.rows();
    for h in 0..heads {
        let mut m = 0.0f64;
        for t in [a, b, c, a2, b2, c2] {
            for j in 0..n {
                m = m.max(norm(slice(t, j, h, dk)));
            }
        }
        let dc = (0..n).map(|j| diff_norm(slice(c2, j, h, dk), slice(c, j, h, dk))).fold(0.0, f64::max);
        for i in 0..n {
            let a2n = norm(slice(a2, i, h, dk));
            let da = diff_norm(slice(a2, i, h, dk), slice(a, i, h, dk));
            let logit = (0..n)
                .map(|j| a2n * diff_norm(slice(b2, j, h, dk), slice(b, j, h, dk)) + norm(slice(b, j, h, dk)) * da)
                .fold(0.0, f64::max);
            let rhs = m / (dk as f64).sqrt() * logit + dc;
            let lhs = diff_norm(slice(o2, i, h, dk), slice(o, i, h, dk));
            stats.record(lhs, rhs);
        }
    }
}

/// Runs `trials` perturbations of `sample` under `spec` through the local
/// features and both DCA attention paths of one layer and checks every
/// per-node deviation bound.
pub fn check_lemma_bounds(
    sample: &GraphSample,
    params: &DcaLayerParams<Tensor>,
    spec: &NoiseSpec,
    trials: usize,
    heads: usize,
) -> Result<LemmaReport, RobustError> {
    let ctx = GraphCtx::from_sample(sample)?;
    let m = params.width();
    let dk = head_dim(m, heads)?;
    let b_y = spectral_norm(&params.wy, 1e-10)?;
    let b_w = b_y.max(spectral_norm(&params.wz, 1e-10)?);
    let x = &sample.node_features;
    let clean = features(x, &ctx, params, heads)?;
    let mut sampler = NoiseSampler::new(spec)?;
    let mut rep = LemmaReport { trials, ..Default::default() };

    for _ in 0..trials {
        let (xn, eta) = sampler.draw(x)?;
        let noisy = features(&xn, &ctx, params, heads)?;
        let eta_norm: Vec<f64> = (0..eta.rows()).map(|j| norm(eta.row(j))).collect();
        for (i, nb) in sample.neighbors.iter().enumerate() {
            let deg = nb.len() as f64;
            let mean = nb.iter().map(|&j| eta_norm[j]).sum::<f64>() / deg;
            let sq: f64 = nb.iter().map(|&j| eta_norm[j] * eta_norm[j]).sum();

            let dfy = diff_norm(noisy.fy.row(i), clean.fy.row(i));
            rep.consensus.record(dfy, b_y * mean);

            let dfz = diff_norm(noisy.fz.row(i), clean.fz.row(i));
            rep.diversity_sqrt2.record(dfz, 2f64.sqrt() * b_w * (sq / deg).sqrt());
            let corrected = if nb.len() > 1 { 2.0 * b_w * (sq / (deg - 1.0)).sqrt() } else { 0.0 };
            rep.diversity.record(dfz, corrected);
        }
        attention_bound(
            &mut rep.attention,
            (&clean.fx, &clean.fy, &clean.fz, &clean.p1),
            (&noisy.fx, &noisy.fy, &noisy.fz, &noisy.p1),
            heads,
            dk,
        );
        attention_bound(
            &mut rep.attention,
            (&clean.fx, &clean.fz, &clean.fy, &clean.p2),
            (&noisy.fx, &noisy.fz, &noisy.fy, &noisy.p2),
            heads,
            dk,
        );
    }
    Ok(rep)
}

/// Random correlation matrix: normalized Gram matrix of random vectors.
pub(crate) fn random_rho<R: Rng>(n: usize, rng: &mut R) -> Result<Tensor, RobustError> {
    let r = rng.random_range(1..=n);
    let g: Vec<f64> = (0..n * r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rho = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            rho[i * n + j] = (0..r).map(|k| g[i * r + k] * g[j * r + k]).sum();
        }
    }
    let d: Vec<f64> = (0..n).map(|i| rho[i * n + i].sqrt().max(1e-12)).collect();
    for i in 0..n {
        for j in 0..n {
            rho[i * n + j] = if i == j { 1.0 } else { (rho[i * n + j] / (d[i] * d[j])).clamp(-1.0, 1.0) };
        }
    }
    Ok(Tensor::matrix(n, n, rho)?)
}

/// The bound checks over `graphs` random graphs (2 to 8 nodes, 1 to 8
/// features, kNN with random k) with random layer weights, each perturbed
/// `trials_per_graph` times by i.i.d. or randomly correlated noise.
pub fn lemma_suite(graphs: usize, trials_per_graph: usize, seed: u64) -> Result<LemmaReport, RobustError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = LemmaReport::default();
    for g in 0..graphs {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=8);
        let heads = rng.random_range(1..=2);
        let m = heads * rng.random_range(1..=4);
        let scale = rng.random_range(0.1..3.0);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-scale..scale)).collect();
        let x = Tensor::matrix(n, d, x)?;
        let k = rng.random_range(1..n);
        let neighbors = build_knn_graph(&x, k)?;
        let sample = GraphSample { node_features: x, neighbors, label: 0 };
        let mut p = DcaLayerParams::init(d, m, 1, &mut rng);
        let w_scale = rng.random_range(0.2..3.0);
        for w in [&mut p.wx, &mut p.wy, &mut p.wz] {
            w.data_mut().iter_mut().for_each(|v| *v *= w_scale);
        }
        let sigma_bar = rng.random_range(0.01..1.0);
        let correlation =
            if rng.random_bool(0.5) { Correlation::Iid } else { Correlation::Pairwise(random_rho(n, &mut rng)?) };
        let spec = NoiseSpec { sigma_bar, correlation, seed: seed.wrapping_add(g as u64) };
        total.merge(&check_lemma_bounds(&sample, &p, &spec, trials_per_graph, heads)?);
    }
    Ok(total)
}
