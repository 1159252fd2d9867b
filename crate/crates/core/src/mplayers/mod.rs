//! Message-passing layers: local consensus/diversity features, direct
//! cross-attention (DCA) and its polarized variant, dual-path gating, expert
//! fusion, the GCN/GAT/SCA baselines and the per-layer FLOP model.
//!
//! Every layer is written once against a [`Tape`]; plain evaluation binds
//! the parameters as constants.

mod attention;
mod baselines;
mod flops;
mod fusion;
mod params;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graphio::GraphSample;
use crate::numkit::{NumError, Tape, Tensor, Var};

pub use attention::{dca_attend, poladca_attend, polar_decompose, polar_scores, sca_attend};
pub use baselines::{gat_layer, gcn_layer};
pub use flops::{flop_count, FlopScheme};
pub use fusion::{dca_layer, dual_path_fuse, expert_fusion, local_features, poladca_layer, LayerOut, LocalFeatures};
pub use params::{
    DcaLayerParams, ExpertParams, GatParams, GcnParams, LayerParams, PolaLayerParams, PolarParams, ScaParams,
};

/// Default number of experts.
pub const DEFAULT_EXPERTS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum LayerError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("node {0} has no neighbors")]
    IsolatedNode(usize),
    #[error("{0}")]
    Config(String),
}

/// Message-passing scheme of a whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Gcn,
    Gat,
    Sca,
    Dca,
    #[serde(rename = "poladca")]
    PolaDca,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Gcn, Scheme::Gat, Scheme::Sca, Scheme::Dca, Scheme::PolaDca];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Gcn => "gcn",
            Scheme::Gat => "gat",
            Scheme::Sca => "sca",
            Scheme::Dca => "dca",
            Scheme::PolaDca => "poladca",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = LayerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LayerError::Config(format!("unknown scheme `{s}` (gcn|gat|sca|dca|poladca)")))
    }
}

/// Activation after a layer's output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, NumError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Graph-dependent constants shared by every layer that sees a sample.
#[derive(Debug, Clone)]
pub struct GraphCtx {
    pub n: usize,
    /// Edge list as (receiving node, neighbor) pairs in row-major order.
    pub dst: Rc<[usize]>,
    pub src: Rc<[usize]>,
    /// `1/|N(i)|` as an `n × 1` column.
    pub inv_deg: Tensor,
    /// `1/(|N(i)| − 1)`, or 0 when `|N(i)| = 1`.
    pub inv_deg_m1: Tensor,
    /// Symmetric-normalized adjacency with self loops, dense `n × n`.
    pub gcn_norm: Tensor,
    /// Neighbor mask for GAT, row-major `n × n`.
    pub mask: Rc<[bool]>,
}

impl GraphCtx {
    pub fn new(neighbors: &[Vec<usize>]) -> Result<Self, LayerError> {
        let n = neighbors.len();
        let mut dst = Vec::new();
        let mut src = Vec::new();
        let mut inv_deg = Vec::with_capacity(n);
        let mut inv_deg_m1 = Vec::with_capacity(n);
        let mut mask = vec![false; n * n];
        for (i, list) in neighbors.iter().enumerate() {
            if list.is_empty() {
                return Err(LayerError::IsolatedNode(i));
            }
            for &j in list {
                if j >= n || j == i {
                    return Err(LayerError::Config(format!("bad neighbor {j} of node {i}")));
                }
                dst.push(i);
                src.push(j);
                mask[i * n + j] = true;
            }
            let d = list.len() as f64;
            inv_deg.push(1.0 / d);
            inv_deg_m1.push(if list.len() > 1 { 1.0 / (d - 1.0) } else { 0.0 });
        }
        let deg: Vec<f64> = neighbors.iter().map(|l| l.len() as f64 + 1.0).collect();
        let mut norm = vec![0.0; n * n];
        for (i, list) in neighbors.iter().enumerate() {
            norm[i * n + i] = 1.0 / deg[i];
            for &j in list {
                norm[i * n + j] = 1.0 / (deg[i] * deg[j]).sqrt();
            }
        }
        Ok(Self {
            n,
            dst: dst.into(),
            src: src.into(),
            inv_deg: Tensor::matrix(n, 1, inv_deg)?,
            inv_deg_m1: Tensor::matrix(n, 1, inv_deg_m1)?,
            gcn_norm: Tensor::matrix(n, n, norm)?,
            mask: mask.into(),
        })
    }

    pub fn from_sample(sample: &GraphSample) -> Result<Self, LayerError> {
        Self::new(&sample.neighbors)
    }
}

/// Glorot-uniform `rows × cols` matrix.
pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("finite by construction")
}

/// `d_k = M / H`, checking divisibility.
pub(crate) fn head_dim(m: usize, heads: usize) -> Result<usize, LayerError> {
    if heads == 0 || !m.is_multiple_of(heads) {
        return Err(LayerError::Config(format!("width {m} is not divisible into {heads} heads")));
    }
    Ok(m / heads)
}
