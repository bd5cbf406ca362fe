use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_into, Matrix};

use super::{check_batch, check_same_width, LossGrad};

/// Mean softmax cross-entropy over logits `w_j·x_i + b_j`.
///
/// `d_weights` is the full weight gradient; `term1` and `term2` are its
/// split into samples of the row's own class and of every other class, so
/// `term1 + term2 == d_weights` up to rounding. The split ignores the bias,
/// which only enters through the probabilities.
pub fn softmax_ce(x: &Matrix, labels: &[usize], w: &Matrix, bias: Option<&[f64]>) -> Result<LossGrad> {
    let k = w.rows();
    let d = w.cols();
    check_batch(x, labels, k)?;
    check_same_width(x, w, "softmax_ce")?;
    if let Some(b) = bias {
        if b.len() != k {
            return Err(Error::ShapeMismatch {
                context: "softmax_ce bias",
                expected: format!("{k} entries"),
                got: format!("{}", b.len()),
            });
        }
    }

    let n = x.rows();
    let inv_n = 1.0 / n as f64;
    let mut logits = vec![0.0; k];
    let mut probs = vec![0.0; k];
    let mut loss = 0.0;
    // dz[i][j] = (P(j|x_i) - 1{y_i = j}) / n
    let mut dz = Matrix::zeros(n, k);
    let mut term1 = Matrix::zeros(k, d);
    let mut term2 = Matrix::zeros(k, d);

    for (i, &y) in labels.iter().enumerate() {
        let xi = x.row(i);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(w.row(j), xi) + bias.map_or(0.0, |b| b[j]);
        }
        let lse = softmax_into(&logits, &mut probs);
        loss += lse - logits[y];
        let dzi = dz.row_mut(i);
        for j in 0..k {
            dzi[j] = (probs[j] - if j == y { 1.0 } else { 0.0 }) * inv_n;
        }
        for j in 0..k {
            let (target, coef) = if j == y {
                (&mut term1, (probs[j] - 1.0) * inv_n)
            } else {
                (&mut term2, probs[j] * inv_n)
            };
            for (t, &xv) in target.row_mut(j).iter_mut().zip(xi) {
                *t += coef * xv;
            }
        }
    }

    let d_features = dz.matmul(w)?;
    let d_weights = dz.t_matmul(x)?;
    let d_bias = bias.map(|_| {
        (0..k)
            .map(|j| (0..n).map(|i| dz.get(i, j)).sum())
            .collect()
    });

    Ok(LossGrad {
        loss: loss * inv_n,
        d_features,
        d_weights,
        d_bias,
        term1,
        term2,
    })
}
