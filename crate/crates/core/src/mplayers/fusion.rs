use super::{
    dca_attend, poladca_attend, Activation, DcaLayerParams, ExpertParams, GraphCtx, LayerError, PolaLayerParams,
};
use crate::numkit::{Tape, Var};

/// Projected node features `Fx`, neighborhood consensus `Fy` and
/// neighborhood diversity `Fz`, each `n × M`.
#[derive(Debug, Clone, Copy)]
pub struct LocalFeatures {
    pub fx: Var,
    pub fy: Var,
    pub fz: Var,
}

/// Output of a fused layer: node embeddings and the per-node expert routing
/// weights `w` (`n × E`).
#[derive(Debug, Clone, Copy)]
pub struct LayerOut {
    pub h: Var,
    pub routing: Option<Var>,
}

/// `Fx = X·Wx`; `Fy[i]` is the mean of `x_j·Wy` over the neighbors of `i`;
/// `Fz[i] = sqrt(Σ_j (x_j·Wz − Fy[i])² / (|N(i)| − 1))` elementwise, and 0
/// for single-neighbor nodes.
pub fn local_features(
    tape: &mut Tape,
    x: Var,
    ctx: &GraphCtx,
    p: &DcaLayerParams<Var>,
) -> Result<LocalFeatures, LayerError> {
    if tape.value(x).rows() != ctx.n {
        return Err(LayerError::Config(format!("{} feature rows for a {}-node graph", tape.value(x).rows(), ctx.n)));
    }
    let fx = tape.matmul(x, p.wx)?;

    let y = tape.matmul(x, p.wy)?;
    let y_nb = tape.gather_rows(y, ctx.src.clone())?;
    let y_sum = tape.scatter_add_rows(y_nb, ctx.dst.clone(), ctx.n)?;
    let inv_deg = tape.constant(ctx.inv_deg.clone());
    let fy = tape.mul_col(y_sum, inv_deg)?;

    let z = tape.matmul(x, p.wz)?;
    let z_nb = tape.gather_rows(z, ctx.src.clone())?;
    let fy_dst = tape.gather_rows(fy, ctx.dst.clone())?;
    let dev = tape.sub(z_nb, fy_dst)?;
    let sq = tape.hadamard(dev, dev)?;
    let ss = tape.scatter_add_rows(sq, ctx.dst.clone(), ctx.n)?;
    let inv = tape.constant(ctx.inv_deg_m1.clone());
    let var = tape.mul_col(ss, inv)?;
    let fz = tape.sqrt(var)?;
    Ok(LocalFeatures { fx, fy, fz })
}

/// Consensus path `attend(Fx, Fy, Fz)` and diversity path
/// `attend(Fx, Fz, Fy)`, mixed by the gate
/// `g = sigmoid(concat(P1, P2)·Wgᵀ + bg)` as `g⊙P1 + (1 − g)⊙P2`.
pub fn dual_path_fuse<F>(tape: &mut Tape, f: &LocalFeatures, wg: Var, bg: Var, mut attend: F) -> Result<Var, LayerError>
where
    F: FnMut(&mut Tape, Var, Var, Var) -> Result<Var, LayerError>,
{
    let p1 = attend(tape, f.fx, f.fy, f.fz)?;
    let p2 = attend(tape, f.fx, f.fz, f.fy)?;
    let both = tape.concat_cols(&[p1, p2])?;
    let wg_t = tape.transpose(wg)?;
    let logits = tape.matmul(both, wg_t)?;
    let logits = tape.add_row(logits, bg)?;
    let g = tape.sigmoid(logits)?;
    // P2 + g⊙(P1 − P2): the same convex combination, exact when P1 == P2
    let diff = tape.sub(p1, p2)?;
    let gated = tape.hadamard(g, diff)?;
    Ok(tape.add(p2, gated)?)
}

/// Routed experts with a residual connection. Per node:
/// `r_e = route_e · fused`, `w = softmax(r)`, `α = sigmoid(mean(r))`, and
/// `out = Fx + α·Σ_e w_e·Expert_e(fused)`. Expert `e` uses the activation
/// identity, relu, tanh for `e mod 3 = 0, 1, 2`.
///
/// Returns the output and `w`.
pub fn expert_fusion(
    tape: &mut Tape,
    fx: Var,
    fused: Var,
    experts: &[ExpertParams<Var>],
) -> Result<(Var, Var), LayerError> {
    if experts.is_empty() {
        return Err(LayerError::Config("at least one expert is required".into()));
    }
    let mut logits = Vec::with_capacity(experts.len());
    for ex in experts {
        let rt = tape.transpose(ex.route)?;
        logits.push(tape.matmul(fused, rt)?);
    }
    let r = if logits.len() == 1 { logits[0] } else { tape.concat_cols(&logits)? };
    let w = tape.row_softmax(r)?;
    let r_mean = tape.row_mean(r)?;
    let alpha = tape.sigmoid(r_mean)?;

    let mut mix: Option<Var> = None;
    for (e, ex) in experts.iter().enumerate() {
        let w1t = tape.transpose(ex.w1)?;
        let hidden = tape.matmul(fused, w1t)?;
        let hidden = tape.add_row(hidden, ex.b1)?;
        let hidden = match e % 3 {
            0 => hidden,
            1 => tape.relu(hidden)?,
            _ => tape.tanh(hidden)?,
        };
        let w2t = tape.transpose(ex.w2)?;
        let out = tape.matmul(hidden, w2t)?;
        let out = tape.add_row(out, ex.b2)?;
        let we = if experts.len() == 1 { w } else { tape.slice_cols(w, e, 1)? };
        let weighted = tape.mul_col(out, we)?;
        mix = Some(match mix {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let scaled = tape.mul_col(mix.expect("non-empty"), alpha)?;
    Ok((tape.add(fx, scaled)?, w))
}

/// Full DCA layer: local features, dual-path DCA with gating, experts.
pub fn dca_layer(
    tape: &mut Tape,
    x: Var,
    ctx: &GraphCtx,
    p: &DcaLayerParams<Var>,
    heads: usize,
) -> Result<LayerOut, LayerError> {
    let f = local_features(tape, x, ctx, p)?;
    let fused = dual_path_fuse(tape, &f, p.wg, p.bg, |t, q, k, v| dca_attend(t, q, k, v, heads))?;
    let (h, w) = expert_fusion(tape, f.fx, fused, &p.experts)?;
    Ok(LayerOut { h, routing: Some(w) })
}

/// Full PolaDCA layer: as [`dca_layer`] with polarized attention on both
/// paths.
pub fn poladca_layer(
    tape: &mut Tape,
    x: Var,
    ctx: &GraphCtx,
    p: &PolaLayerParams<Var>,
    heads: usize,
    act: Activation,
) -> Result<LayerOut, LayerError> {
    let f = local_features(tape, x, ctx, &p.dca)?;
    let fused =
        dual_path_fuse(tape, &f, p.dca.wg, p.dca.bg, |t, q, k, v| poladca_attend(t, q, k, v, &p.polar, heads, act))?;
    let (h, w) = expert_fusion(tape, f.fx, fused, &p.dca.experts)?;
    Ok(LayerOut { h, routing: Some(w) })
}
