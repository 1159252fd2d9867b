use super::{head_dim, Activation, LayerError, PolarParams, ScaParams};
use crate::numkit::{Tape, Var};

fn check_qkv(tape: &Tape, q: Var, k: Var, v: Var) -> Result<(usize, usize), LayerError> {
    let (_, m) = tape.value(q).dims2()?;
    let (nk, mk) = tape.value(k).dims2()?;
    let (nv, mv) = tape.value(v).dims2()?;
    if mk != m || nv != nk {
        return Err(LayerError::Config(format!(
            "attention shapes: Q {:?}, K {:?}, V {:?}",
            tape.value(q).shape(),
            tape.value(k).shape(),
            tape.value(v).shape()
        )));
    }
    Ok((m, mv))
}

/// Column block `h` of width `w`, or `x` itself for a single head.
fn head(tape: &mut Tape, x: Var, heads: usize, h: usize, w: usize) -> Result<Var, LayerError> {
    if heads == 1 {
        Ok(x)
    } else {
        Ok(tape.slice_cols(x, h * w, w)?)
    }
}

/// Batched scaled dot-product attention over all node pairs:
/// `softmax(Q·Kᵀ/√d_k)·V`, with `d_k = M/H` and the columns of Q, K and V
/// split into `heads` blocks.
pub fn dca_attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, LayerError> {
    let (m, mv) = check_qkv(tape, q, k, v)?;
    let dk = head_dim(m, heads)?;
    let dv = head_dim(mv, heads)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head(tape, q, heads, h, dk)?;
        let kh = head(tape, k, heads, h, dk)?;
        let vh = head(tape, v, heads, h, dv)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale)?;
        let a = tape.row_softmax(s)?;
        outs.push(tape.matmul(a, vh)?);
    }
    concat(tape, &outs)
}

fn concat(tape: &mut Tape, parts: &[Var]) -> Result<Var, LayerError> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        Ok(tape.concat_cols(parts)?)
    }
}

/// `(relu(T), relu(−T))`.
pub fn polar_decompose(tape: &mut Tape, t: Var) -> Result<(Var, Var), LayerError> {
    let pos = tape.relu(t)?;
    let neg = tape.neg(t)?;
    let neg = tape.relu(neg)?;
    Ok((pos, neg))
}

/// The four signed score channels of every head, combined with that head's
/// polarity weights. Returns one `n_q × n_k` matrix per head.
pub fn polar_scores(
    tape: &mut Tape,
    q: Var,
    k: Var,
    polar: &PolarParams<Var>,
    heads: usize,
) -> Result<Vec<Var>, LayerError> {
    let (_, m) = tape.value(q).dims2()?;
    if tape.value(k).cols() != m {
        return Err(LayerError::Config("Q and K widths differ".into()));
    }
    for w in [polar.wpp, polar.wnn, polar.wpn, polar.wnp] {
        if tape.value(w).numel() != heads {
            return Err(LayerError::Config(format!(
                "polarity weights of shape {:?} for {heads} heads",
                tape.value(w).shape()
            )));
        }
    }
    let dk = head_dim(m, heads)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let (qp, qn) = polar_decompose(tape, q)?;
    let (kp, kn) = polar_decompose(tape, k)?;
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let qp_h = head(tape, qp, heads, h, dk)?;
        let qn_h = head(tape, qn, heads, h, dk)?;
        let kp_h = head(tape, kp, heads, h, dk)?;
        let kn_h = head(tape, kn, heads, h, dk)?;
        let kp_t = tape.transpose(kp_h)?;
        let kn_t = tape.transpose(kn_h)?;
        let mut acom: Option<Var> = None;
        for (a, bt, w) in
            [(qp_h, kp_t, polar.wpp), (qn_h, kn_t, polar.wnn), (qp_h, kn_t, polar.wpn), (qn_h, kp_t, polar.wnp)]
        {
            let s = tape.matmul(a, bt)?;
            let s = tape.scale(s, scale)?;
            let wh = if heads == 1 { w } else { tape.slice_cols(w, h, 1)? };
            let s = tape.scale_by(s, wh)?;
            acom = Some(match acom {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        out.push(acom.expect("four channels"));
    }
    Ok(out)
}

/// Polarized attention: per head `softmax(Acom)·V`, heads concatenated,
/// then `act(concat·Woᵀ)`.
pub fn poladca_attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    polar: &PolarParams<Var>,
    heads: usize,
    act: Activation,
) -> Result<Var, LayerError> {
    let (_, mv) = check_qkv(tape, q, k, v)?;
    let dv = head_dim(mv, heads)?;
    let scores = polar_scores(tape, q, k, polar, heads)?;
    let mut outs = Vec::with_capacity(heads);
    for (h, s) in scores.into_iter().enumerate() {
        let a = tape.row_softmax(s)?;
        let vh = head(tape, v, heads, h, dv)?;
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = concat(tape, &outs)?;
    let wo_t = tape.transpose(polar.wo)?;
    let proj = tape.matmul(cat, wo_t)?;
    Ok(act.apply(tape, proj)?)
}

/// Standard cross-attention with learned projections:
/// `softmax(X_E·Wq·(Y_D·Wk)ᵀ/√d_k)·Y_D·Wv`.
pub fn sca_attend(tape: &mut Tape, xe: Var, yd: Var, p: &ScaParams<Var>, heads: usize) -> Result<Var, LayerError> {
    let q = tape.matmul(xe, p.wq)?;
    let k = tape.matmul(yd, p.wk)?;
    let v = tape.matmul(yd, p.wv)?;
    dca_attend(tape, q, k, v, heads)
}
