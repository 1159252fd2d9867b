//! Signal windows to graph samples: segmentation, z-score, kNN graphs,
//! SNR-controlled noise, a synthetic generator and CSV datasets.

mod csvio;
mod preprocess;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::numkit::{NumError, Tensor};

pub use csvio::{load_csv_dataset, write_csv_dataset, ManifestEntry};
pub use preprocess::{build_knn_graph, inject_snr_noise, records_to_samples, segment_signal, window_to_sample, zscore};
pub use split::{stratified_split, Split, TEST_FRACTION, VAL_FRACTION};
pub use synth::{generate_synthetic_dataset, SynthConfig};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column `{column}`: cannot parse {value:?} as a number")]
    Parse { path: String, line: u64, column: String, value: String },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// A labelled multichannel recording: `channels` is `m × L_total`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub channels: Tensor,
    pub label: usize,
}

impl SignalRecord {
    pub fn new(channels: Tensor, label: usize) -> Result<Self, GraphError> {
        channels.dims2()?;
        Ok(Self { channels, label })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.rows()
    }

    pub fn len(&self) -> usize {
        self.channels.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One graph instance: node features (`n × D`), symmetric sorted neighbor
/// lists without self loops, and the class label.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub node_features: Tensor,
    pub neighbors: Vec<Vec<usize>>,
    pub label: usize,
}

impl GraphSample {
    pub fn n_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    /// Same graph, different node features (e.g. a perturbed copy).
    pub fn with_features(&self, node_features: Tensor) -> Self {
        Self { node_features, neighbors: self.neighbors.clone(), label: self.label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeMode {
    /// Each window is cut into `segment_count` equal chunks per channel; a
    /// node is one chunk across all channels.
    Segments,
    /// Every time step is a node; features are the channel values.
    Timesteps,
}

impl std::str::FromStr for NodeMode {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "segments" => Ok(Self::Segments),
            "timesteps" => Ok(Self::Timesteps),
            other => Err(GraphError::Config(format!("unknown node mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub window_len: usize,
    pub stride: usize,
    pub k: usize,
    pub zscore: bool,
    pub node_mode: NodeMode,
    pub segment_count: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { window_len: 1000, stride: 500, k: 8, zscore: true, node_mode: NodeMode::Segments, segment_count: 20 }
    }
}

impl PreprocessConfig {
    /// Number of graph nodes a window produces.
    pub fn n_nodes(&self) -> usize {
        match self.node_mode {
            NodeMode::Segments => self.segment_count,
            NodeMode::Timesteps => self.window_len,
        }
    }

    /// Node feature width for `m` channels.
    pub fn feature_dim(&self, m: usize) -> usize {
        match self.node_mode {
            NodeMode::Segments => m * self.window_len / self.segment_count.max(1),
            NodeMode::Timesteps => m,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.window_len == 0 {
            return Err(GraphError::Config("window_len must be positive".into()));
        }
        if self.stride == 0 {
            return Err(GraphError::Config("stride must be at least 1".into()));
        }
        if self.node_mode == NodeMode::Segments
            && (self.segment_count == 0 || !self.window_len.is_multiple_of(self.segment_count))
        {
            return Err(GraphError::Config(format!(
                "window_len {} is not divisible into {} segments",
                self.window_len, self.segment_count
            )));
        }
        let n = self.n_nodes();
        if self.k == 0 || self.k >= n {
            return Err(GraphError::Config(format!("k = {} needs 1 <= k < n = {n}", self.k)));
        }
        Ok(())
    }
}
