use super::{Activation, GatParams, GcnParams, GraphCtx, LayerError};
use crate::numkit::{Tape, Tensor, Var, LEAKY_SLOPE};

/// `act(D̃^{-1/2}(A + I)D̃^{-1/2}·X·W)`.
pub fn gcn_layer(
    tape: &mut Tape,
    x: Var,
    ctx: &GraphCtx,
    p: &GcnParams<Var>,
    act: Activation,
) -> Result<Var, LayerError> {
    let xw = tape.matmul(x, p.w)?;
    let norm = tape.constant(ctx.gcn_norm.clone());
    let agg = tape.matmul(norm, xw)?;
    Ok(act.apply(tape, agg)?)
}

/// Graph attention: `e_ij = leaky_relu(a·[W x_i ‖ W x_j])`, softmax over the
/// neighbors of `i`, then `act(Σ_j α_ij W x_j)`.
pub fn gat_layer(
    tape: &mut Tape,
    x: Var,
    ctx: &GraphCtx,
    p: &GatParams<Var>,
    act: Activation,
) -> Result<Var, LayerError> {
    let wh = tape.matmul(x, p.w)?;
    let m = tape.value(wh).cols();
    if tape.value(p.a).numel() != 2 * m {
        return Err(LayerError::Config(format!("attention vector needs {} entries", 2 * m)));
    }
    let n = ctx.n;
    let a1 = tape.slice_cols(p.a, 0, m)?;
    let a2 = tape.slice_cols(p.a, m, m)?;
    let a1t = tape.transpose(a1)?;
    let a2t = tape.transpose(a2)?;
    let s_self = tape.matmul(wh, a1t)?;
    let s_nb = tape.matmul(wh, a2t)?;
    let ones_row = tape.constant(Tensor::filled(&[1, n], 1.0));
    let ones_col = tape.constant(Tensor::filled(&[n, 1], 1.0));
    let left = tape.matmul(s_self, ones_row)?;
    let s_nb_t = tape.transpose(s_nb)?;
    let right = tape.matmul(ones_col, s_nb_t)?;
    let e = tape.add(left, right)?;
    let e = tape.leaky_relu(e, LEAKY_SLOPE)?;
    let alpha = tape.row_softmax_masked(e, ctx.mask.clone())?;
    let agg = tape.matmul(alpha, wh)?;
    Ok(act.apply(tape, agg)?)
}
