use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, norm};

/// `‖c − x/‖x‖‖²` and its gradient `2(c − x̂)` w.r.t. the center.
///
/// The unit constraint on `c` is restored by renormalizing after a step,
/// so the gradient here is the unconstrained one.
pub fn aux_center_loss(x: &[f64], c: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.len() != c.len() {
        return Err(Error::ShapeMismatch {
            context: "aux_center_loss",
            expected: format!("{} entries", c.len()),
            got: format!("{}", x.len()),
        });
    }
    let cn = norm(c);
    if (cn - 1.0).abs() > 1e-8 {
        return Err(Error::NonUnitRow { row: 0, norm: cn });
    }
    aux_center_unchecked(x, c)
}

/// As [`aux_center_loss`] without the unit-norm check on `c`.
pub(crate) fn aux_center_unchecked(x: &[f64], c: &[f64]) -> Result<(f64, Vec<f64>)> {
    let xhat = l2_normalize(x)?;
    let diff: Vec<f64> = c.iter().zip(&xhat).map(|(a, b)| a - b).collect();
    let value = diff.iter().map(|v| v * v).sum();
    Ok((value, diff.into_iter().map(|v| 2.0 * v).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimum_and_antipode() {
        let (v, g) = aux_center_loss(&[2.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, g) = aux_center_loss(&[0.0, 3.0], &[0.0, -1.0]).unwrap();
        assert!((v - 4.0).abs() < 1e-15);
        assert_eq!(g, vec![0.0, -4.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            aux_center_loss(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateNorm { .. })
        ));
        assert!(aux_center_loss(&[1.0, 0.0], &[2.0, 0.0]).is_err());
    }
}
