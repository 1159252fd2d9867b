#![allow(dead_code)]

use poladca_core::graphio::{build_knn_graph, GraphSample};
use poladca_core::mplayers::*;
use poladca_core::numkit::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Random node features with a kNN graph (k = 1 or 2) on top.
pub fn random_graph(n: usize, d: usize, rng: &mut ChaCha8Rng) -> GraphSample {
    let x = random_matrix(n, d, 1.0, rng);
    let k = if n > 2 { rng.random_range(1..=2) } else { 1 };
    let neighbors = build_knn_graph(&x, k).unwrap();
    GraphSample { node_features: x, neighbors, label: 0 }
}

/// Relabels nodes so that old node `i` becomes `perm[i]`.
pub fn permute(sample: &GraphSample, perm: &[usize]) -> GraphSample {
    let n = sample.n_nodes();
    let d = sample.feature_dim();
    let mut data = vec![0.0; n * d];
    let mut nb = vec![Vec::new(); n];
    for i in 0..n {
        data[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(sample.node_features.row(i));
        let mut l: Vec<usize> = sample.neighbors[i].iter().map(|&j| perm[j]).collect();
        l.sort_unstable();
        nb[perm[i]] = l;
    }
    GraphSample { node_features: Tensor::matrix(n, d, data).unwrap(), neighbors: nb, label: sample.label }
}

/// Rebinds a parameter template onto consecutive tape variables.
pub fn rebind(template: &LayerParams<Tensor>, vars: &[Var]) -> LayerParams<Var> {
    let mut it = vars.iter();
    template.map(&mut |_| *it.next().expect("enough vars"))
}

pub fn flatten(p: &LayerParams<Tensor>) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.push(t.clone()));
    out
}

/// Runs one layer of any scheme on `x`.
pub fn run_layer(
    tape: &mut Tape,
    x: Var,
    ctx: &GraphCtx,
    p: &LayerParams<Var>,
    heads: usize,
    act: Activation,
) -> Result<Var, LayerError> {
    Ok(match p {
        LayerParams::Gcn(g) => gcn_layer(tape, x, ctx, g, Activation::Relu)?,
        LayerParams::Gat(g) => gat_layer(tape, x, ctx, g, Activation::Relu)?,
        LayerParams::Sca(s) => {
            let h = sca_attend(tape, x, x, s, heads)?;
            tape.relu(h)?
        }
        LayerParams::Dca(d) => dca_layer(tape, x, ctx, d, heads)?.h,
        LayerParams::Pola(pp) => poladca_layer(tape, x, ctx, pp, heads, act)?.h,
    })
}
