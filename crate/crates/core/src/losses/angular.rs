use serde::{Deserialize, Serialize};

use crate::centers::CenterBank;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, softmax_into, Matrix, NORM_EPS};

use super::psi::{psi_dcos, psi_unchecked, MarginSpec};
use super::{check_batch, check_same_width, LossGrad};

const UNIT_TOL: f64 = 1e-8;

/// Biasless margin head over unit-norm class directions.
///
/// Target logit is `ρ·ψ(θ_y)` with `ρ = ‖x‖` (or the fixed `feature_scale`);
/// other logits are `w_j·x` (or `s·cos θ_j` under a fixed scale).
///
/// `lambda` blends ψ toward cos θ as `(λ cos θ + ψ) / (1 + λ)`. It is off
/// (zero) unless set explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularHead {
    pub margin: MarginSpec,
    #[serde(default)]
    pub feature_scale: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
}

impl AngularHead {
    pub fn new(margin: MarginSpec) -> Self {
        Self {
            margin,
            feature_scale: None,
            lambda: 0.0,
        }
    }

    pub fn with_feature_scale(mut self, s: f64) -> Self {
        self.feature_scale = Some(s);
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        if let Some(s) = self.feature_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid("feature_scale", format!("must be > 0, got {s}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Margin softmax over weight rows that must already be unit length.
    /// `d_weights` is the tangent (norm-preserving) component.
    pub fn margin_softmax(&self, x: &Matrix, labels: &[usize], w: &Matrix) -> Result<LossGrad> {
        self.validate()?;
        for (row, r) in w.iter_rows().enumerate() {
            let n = norm(r);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::NonUnitRow { row, norm: n });
            }
        }
        let active = vec![true; w.rows()];
        let (loss, d_features, mut d_w) = self.forward_backward(x, labels, w, &active)?;
        project_tangent(&mut d_w, w, None);
        Ok(zero_terms(loss, d_features, d_w))
    }

    /// Margin softmax over raw weight rows, normalized on the fly. The
    /// weight gradient is taken through the normalization, which is what a
    /// trainer holding unconstrained weights needs.
    pub fn margin_softmax_raw(&self, x: &Matrix, labels: &[usize], w_raw: &Matrix) -> Result<LossGrad> {
        self.validate()?;
        let mut w = w_raw.clone();
        let mut norms = Vec::with_capacity(w.rows());
        for r in 0..w.rows() {
            let row = w.row_mut(r);
            let n = norm(row);
            if !(n > NORM_EPS) {
                return Err(Error::DegenerateNorm { norm: n });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let active = vec![true; w.rows()];
        let (loss, d_features, mut d_w) = self.forward_backward(x, labels, &w, &active)?;
        project_tangent(&mut d_w, &w, Some(&norms));
        Ok(zero_terms(loss, d_features, d_w))
    }

    /// IR-Softmax: class centers from the bank stand in for the classifier
    /// weights. Classes flagged degenerate are an error when they appear in
    /// `labels` and are left out of the normalizer otherwise.
    ///
    /// `d_weights` holds ∂J/∂c_j (tangent part) for inspection only;
    /// centers are never moved along it.
    pub fn ir_softmax(&self, x: &Matrix, labels: &[usize], bank: &CenterBank) -> Result<LossGrad> {
        self.validate()?;
        if let Some(&class) = labels.iter().find(|&&l| l < bank.classes() && bank.is_degenerate(l)) {
            return Err(Error::DegenerateCenter { class });
        }
        let active: Vec<bool> = (0..bank.classes()).map(|k| !bank.is_degenerate(k)).collect();
        let c = bank.centers();
        let (loss, d_features, mut d_c) = self.forward_backward(x, labels, c, &active)?;
        project_tangent(&mut d_c, c, None);
        Ok(zero_terms(loss, d_features, d_c))
    }

    /// Mean loss and gradients w.r.t. features and (unconstrained) unit rows.
    fn forward_backward(
        &self,
        x: &Matrix,
        labels: &[usize],
        protos: &Matrix,
        active: &[bool],
    ) -> Result<(f64, Matrix, Matrix)> {
        let k = protos.rows();
        let d = protos.cols();
        check_batch(x, labels, k)?;
        check_same_width(x, protos, "angular head")?;
        let n = x.rows();
        let inv_n = 1.0 / n as f64;
        let lam = self.lambda;

        let mut d_x = Matrix::zeros(n, d);
        let mut d_p = Matrix::zeros(k, d);
        let mut cos = vec![0.0; k];
        let mut logits = Vec::with_capacity(k);
        let mut probs = Vec::with_capacity(k);
        let mut slot = Vec::with_capacity(k);
        let mut xhat = vec![0.0; d];
        let mut loss = 0.0;

        for (i, &y) in labels.iter().enumerate() {
            let xi = x.row(i);
            let r = norm(xi);
            if !(r > NORM_EPS) {
                return Err(Error::DegenerateNorm { norm: r });
            }
            for (h, &v) in xhat.iter_mut().zip(xi) {
                *h = v / r;
            }
            for j in 0..k {
                cos[j] = dot(protos.row(j), &xhat);
            }

            let u = cos[y].clamp(-1.0, 1.0);
            let theta = u.acos();
            let psi = (lam * u + psi_unchecked(self.margin, theta)) / (1.0 + lam);
            let psi_u = (lam + psi_dcos(self.margin, theta, u)) / (1.0 + lam);
            let rho = self.feature_scale.unwrap_or(r);

            logits.clear();
            slot.clear();
            for j in (0..k).filter(|&j| active[j]) {
                let z = if j == y {
                    rho * psi
                } else if let Some(s) = self.feature_scale {
                    s * cos[j]
                } else {
                    r * cos[j]
                };
                logits.push(z);
                slot.push(j);
            }
            probs.resize(logits.len(), 0.0);
            let lse = softmax_into(&logits, &mut probs);
            let target = slot.iter().position(|&j| j == y).expect("target class is active");
            loss += lse - logits[target];

            let dxi = d_x.row_mut(i);
            for (&j, &p) in slot.iter().zip(probs.iter()) {
                let cj = protos.row(j);
                let dpj = d_p.row_mut(j);
                if j == y {
                    let g = (p - 1.0) * inv_n;
                    // d(ρψ)/dx, d(ρψ)/dc_y
                    match self.feature_scale {
                        None => {
                            for t in 0..d {
                                dxi[t] += g * (psi * xhat[t] + psi_u * (cj[t] - u * xhat[t]));
                            }
                        }
                        Some(s) => {
                            for t in 0..d {
                                dxi[t] += g * s * psi_u * (cj[t] - u * xhat[t]) / r;
                            }
                        }
                    }
                    for t in 0..d {
                        dpj[t] += g * rho * psi_u * xhat[t];
                    }
                } else {
                    let g = p * inv_n;
                    match self.feature_scale {
                        None => {
                            for t in 0..d {
                                dxi[t] += g * cj[t];
                                dpj[t] += g * xi[t];
                            }
                        }
                        Some(s) => {
                            for t in 0..d {
                                dxi[t] += g * s * (cj[t] - cos[j] * xhat[t]) / r;
                                dpj[t] += g * s * xhat[t];
                            }
                        }
                    }
                }
            }
        }
        Ok((loss * inv_n, d_x, d_p))
    }
}

/// Margin softmax with default head options (true feature norm, no blend).
pub fn margin_softmax(x: &Matrix, labels: &[usize], w: &Matrix, spec: MarginSpec) -> Result<LossGrad> {
    AngularHead::new(spec).margin_softmax(x, labels, w)
}

/// IR-Softmax with default head options.
pub fn ir_softmax(x: &Matrix, labels: &[usize], bank: &CenterBank, spec: MarginSpec) -> Result<LossGrad> {
    AngularHead::new(spec).ir_softmax(x, labels, bank)
}

/// Replaces each gradient row `g` with `(g - (g·u)u) / scale` where `u` is
/// the matching unit row.
fn project_tangent(grad: &mut Matrix, units: &Matrix, scales: Option<&[f64]>) {
    for r in 0..grad.rows() {
        let u = units.row(r);
        let g = grad.row_mut(r);
        let radial = dot(g, u);
        let s = scales.map_or(1.0, |s| s[r]);
        for (gv, &uv) in g.iter_mut().zip(u) {
            *gv = (*gv - radial * uv) / s;
        }
    }
}

fn zero_terms(loss: f64, d_features: Matrix, d_weights: Matrix) -> LossGrad {
    let (k, d) = d_weights.shape();
    LossGrad {
        loss,
        d_features,
        d_weights,
        d_bias: None,
        term1: Matrix::zeros(k, d),
        term2: Matrix::zeros(k, d),
    }
}
