use super::{NumError, Tensor};

/// Largest singular value of a matrix by power iteration on `AᵀA`.
///
/// Iterates until the relative change of the estimate drops below `tol`
/// (or 100k iterations). The estimate approaches the true value from below.
pub fn spectral_norm(a: &Tensor, tol: f64) -> Result<f64, NumError> {
    let (r, c) = a.dims2()?;
    let d = a.data();
    // deterministic start with no exact orthogonality to typical singular vectors
    let mut v: Vec<f64> = (0..c).map(|j| 1.0 + 0.1 * ((j * 7919) % 13) as f64).collect();
    normalize(&mut v);
    let mut est = 0.0;
    let mut av = vec![0.0; r];
    for _ in 0..100_000 {
        for i in 0..r {
            av[i] = d[i * c..(i + 1) * c].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let mut w = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                w[j] += d[i * c + j] * av[i];
            }
        }
        let norm = normalize(&mut w);
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = norm.sqrt();
        let done = (next - est).abs() <= tol * next;
        est = next;
        v = w;
        if done {
            break;
        }
    }
    // one Rayleigh refinement: ‖A v‖ for the converged unit v
    let refined = (0..r)
        .map(|i| d[i * c..(i + 1) * c].iter().zip(&v).map(|(x, y)| x * y).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(est.max(refined))
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
