//! Loss heads with analytic gradients.
//!
//! Every head reports the mean loss over the batch and gradients of that
//! mean, so the finite-difference harness and the trainer see the same
//! function.

mod angular;
mod aux;
mod npairs;
mod psi;
mod softmax;

pub use angular::{ir_softmax, margin_softmax, AngularHead};
pub use aux::aux_center_loss;
pub(crate) use aux::aux_center_unchecked;
pub use npairs::{npairs_loss, positive_pairs};
pub use psi::{angular_branch, psi_eval, MarginSpec};
pub use softmax::softmax_ce;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Loss value and gradients for one batch.
///
/// `term1`/`term2` split `d_weights` into the own-class pull and the
/// other-class push. Only [`softmax_ce`] fills them; the angular heads
/// leave them zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_features: Matrix,
    pub d_weights: Matrix,
    pub d_bias: Option<Vec<f64>>,
    pub term1: Matrix,
    pub term2: Matrix,
}

pub(crate) fn check_batch(x: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Empty("feature batch"));
    }
    if labels.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            context: "labels",
            expected: format!("{} labels", x.rows()),
            got: format!("{}", labels.len()),
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            classes,
        });
    }
    Ok(())
}

pub(crate) fn check_same_width(x: &Matrix, w: &Matrix, context: &'static str) -> Result<()> {
    if x.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("feature width {}", w.cols()),
            got: format!("{}", x.cols()),
        });
    }
    Ok(())
}
