use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_into, Matrix};

/// Every ordered pair `(i, j)`, `i != j`, sharing a label.
pub fn positive_pairs(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &a) in labels.iter().enumerate() {
        for (j, &b) in labels.iter().enumerate() {
            if i != j && a == b {
                out.push((i, j));
            }
        }
    }
    out
}

/// Multi-class N-pairs loss over inner-product similarities
/// `S_ij = e_i·e_j`. Each positive pair `(i, j)` competes against every
/// `k` with `y_k != y_j`. Returns the mean loss and its gradient w.r.t. the
/// embeddings.
pub fn npairs_loss(e: &Matrix, labels: &[usize], pairs: &[(usize, usize)]) -> Result<(f64, Matrix)> {
    if pairs.is_empty() {
        return Err(Error::Empty("positive pair set"));
    }
    let n = e.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "npairs labels",
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    for &(i, j) in pairs {
        if i >= n || j >= n {
            return Err(Error::invalid("pairs", format!("pair ({i}, {j}) indexes past {n} embeddings")));
        }
        if labels[i] != labels[j] {
            return Err(Error::invalid(
                "pairs",
                format!("pair ({i}, {j}) has labels {} and {}", labels[i], labels[j]),
            ));
        }
    }

    let inv_p = 1.0 / pairs.len() as f64;
    let mut grad = Matrix::zeros(n, e.cols());
    let mut loss = 0.0;
    let mut members = Vec::with_capacity(n);
    let mut sims = Vec::with_capacity(n);
    let mut probs = Vec::new();

    for &(i, j) in pairs {
        members.clear();
        sims.clear();
        members.push(j);
        sims.push(dot(e.row(i), e.row(j)));
        for k in (0..n).filter(|&k| labels[k] != labels[j]) {
            members.push(k);
            sims.push(dot(e.row(i), e.row(k)));
        }
        probs.resize(sims.len(), 0.0);
        let lse = softmax_into(&sims, &mut probs);
        loss += lse - sims[0];

        // dS_{i,m} scattered into both embeddings of the product
        for (slot, &m) in members.iter().enumerate() {
            let g = (probs[slot] - if slot == 0 { 1.0 } else { 0.0 }) * inv_p;
            let (ei, em) = (e.row(i).to_vec(), e.row(m).to_vec());
            for (gv, v) in grad.row_mut(i).iter_mut().zip(&em) {
                *gv += g * v;
            }
            for (gv, v) in grad.row_mut(m).iter_mut().zip(&ei) {
                *gv += g * v;
            }
        }
    }
    Ok((loss * inv_p, grad))
}
