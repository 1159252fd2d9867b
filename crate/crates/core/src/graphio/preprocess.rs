use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{GraphError, GraphSample, NodeMode, PreprocessConfig, SignalRecord};
use crate::numkit::Tensor;

/// Cuts a record into full windows starting at `0, stride, 2·stride, ...`.
/// Each window is `m × window_len`.
pub fn segment_signal(rec: &SignalRecord, window_len: usize, stride: usize) -> Result<Vec<Tensor>, GraphError> {
    let (m, total) = rec.channels.dims2()?;
    if window_len == 0 || stride == 0 {
        return Err(GraphError::Config("window_len and stride must be positive".into()));
    }
    if window_len > total {
        return Err(GraphError::Config(format!("window of {window_len} steps does not fit a record of {total}")));
    }
    let count = (total - window_len) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let mut data = Vec::with_capacity(m * window_len);
        for ch in 0..m {
            data.extend_from_slice(&rec.channels.row(ch)[start..start + window_len]);
        }
        out.push(Tensor::matrix(m, window_len, data)?);
    }
    Ok(out)
}

/// Per-channel standardization with the sample (n − 1) standard deviation.
/// Constant channels are only centered.
pub fn zscore(window: &Tensor) -> Tensor {
    let (m, len) = (window.rows(), window.cols());
    let mut out = window.clone();
    for ch in 0..m {
        let row = &mut out.data_mut()[ch * len..(ch + 1) * len];
        let mean = row.iter().sum::<f64>() / len as f64;
        let std =
            if len > 1 { (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (len - 1) as f64).sqrt() } else { 0.0 };
        for v in row.iter_mut() {
            *v -= mean;
            if std > 0.0 {
                *v /= std;
            }
        }
    }
    out
}

/// Union-symmetrized kNN graph under Euclidean distance. Equal distances
/// prefer the lower node index.
pub fn build_knn_graph(features: &Tensor, k: usize) -> Result<Vec<Vec<usize>>, GraphError> {
    let n = features.rows();
    if k == 0 || k >= n {
        return Err(GraphError::Config(format!("k = {k} needs 1 <= k < n = {n}")));
    }
    let mut adj = vec![Vec::with_capacity(2 * k); n];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let xi = features.row(i);
        cand.clear();
        for j in (0..n).filter(|&j| j != i) {
            let d2: f64 = xi.iter().zip(features.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((d2, j));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &cand[..k] {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    Ok(adj)
}

/// Builds nodes from one `m × window_len` window (after optional z-score)
/// and connects them with the kNN graph.
pub fn window_to_sample(window: &Tensor, cfg: &PreprocessConfig, label: usize) -> Result<GraphSample, GraphError> {
    cfg.validate()?;
    let (m, len) = window.dims2()?;
    if len != cfg.window_len {
        return Err(GraphError::Config(format!("window has {len} steps, configuration expects {}", cfg.window_len)));
    }
    let w = if cfg.zscore { zscore(window) } else { window.clone() };
    let node_features = match cfg.node_mode {
        NodeMode::Timesteps => w.transpose()?,
        NodeMode::Segments => {
            let n = cfg.segment_count;
            let chunk = len / n;
            let mut data = Vec::with_capacity(m * len);
            for s in 0..n {
                for ch in 0..m {
                    data.extend_from_slice(&w.row(ch)[s * chunk..(s + 1) * chunk]);
                }
            }
            Tensor::matrix(n, m * chunk, data)?
        }
    };
    let neighbors = build_knn_graph(&node_features, cfg.k)?;
    Ok(GraphSample { node_features, neighbors, label })
}

/// Windows every record and converts each window to a sample carrying the
/// record's label.
pub fn records_to_samples(records: &[SignalRecord], cfg: &PreprocessConfig) -> Result<Vec<GraphSample>, GraphError> {
    let mut out = Vec::new();
    for rec in records {
        for w in segment_signal(rec, cfg.window_len, cfg.stride)? {
            out.push(window_to_sample(&w, cfg, rec.label)?);
        }
    }
    Ok(out)
}

/// Adds white Gaussian noise at `snr_db` relative to each channel's mean
/// power. `f64::INFINITY` means no noise.
pub fn inject_snr_noise(window: &Tensor, snr_db: f64, seed: u64) -> Result<Tensor, GraphError> {
    if snr_db == f64::INFINITY {
        return Ok(window.clone());
    }
    if !snr_db.is_finite() {
        return Err(GraphError::Config(format!("SNR of {snr_db} dB")));
    }
    let (m, len) = window.dims2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = window.clone();
    let scale = 10f64.powf(snr_db / 10.0);
    for ch in 0..m {
        let row = &mut out.data_mut()[ch * len..(ch + 1) * len];
        let power = row.iter().map(|v| v * v).sum::<f64>() / len as f64;
        if power == 0.0 {
            return Err(GraphError::Config(format!("channel {ch} has zero power; SNR {snr_db} dB is undefined")));
        }
        let std = (power / scale).sqrt();
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }
    Ok(out)
}
