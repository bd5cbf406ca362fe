//! Central finite-difference check of every analytic loss gradient.
//!
//! Each loss is probed at random points. A point's error is
//! `‖a − f‖ / max(‖a‖, ‖f‖, 1e-8)` over the full gradient vector, with `a`
//! analytic and `f` the central difference at step `h`. Angular-margin
//! points whose target angle lies within [`KNOT_EXCLUSION`] of a knot are
//! redrawn, since ψ is only one-sided differentiable there.

use serde::{Deserialize, Serialize};

use crate::centers::{CenterBank, CenterStrategy};
use crate::error::{Error, Result};
use crate::losses::{aux_center_unchecked, npairs_loss, positive_pairs, softmax_ce, AngularHead, MarginSpec};
use crate::numerics::{cosine_angle, norm, Matrix, RandomStream};

pub const KNOT_EXCLUSION: f64 = 1e-3;

/// Loss names accepted by [`GradcheckOptions::filter`].
pub const LOSS_NAMES: [&str; 8] = [
    "softmax_ce",
    "margin_plain",
    "margin_angular",
    "margin_additive_angle",
    "margin_combined",
    "ir_softmax",
    "npairs",
    "aux_center",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub points: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Substring match on loss names; `None` checks everything.
    pub filter: Option<String>,
    /// Test hook: added to the first analytic gradient entry of every point.
    pub perturb: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            points: 100,
            step: 1e-5,
            tolerance: 1e-6,
            filter: None,
            perturb: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub name: String,
    pub points: usize,
    /// Knot-adjacent draws discarded before reaching `points`.
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

/// `‖a − f‖ / max(‖a‖, ‖f‖, 1e-8)`
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Central differences of `f` at `at`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, at: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut p = at.to_vec();
    let mut g = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p)?;
        p[i] = orig - h;
        let down = f(&p)?;
        p[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

/// One random problem: parameter vector, loss closure inputs and the
/// analytic gradient for the same packing.
struct Problem {
    params: Vec<f64>,
    analytic: Vec<f64>,
    eval: Box<dyn Fn(&[f64]) -> Result<f64>>,
}

fn random_matrix(rows: usize, cols: usize, stream: &mut RandomStream) -> Matrix {
    let data = (0..rows * cols).map(|_| stream.normal()).collect();
    Matrix::new(rows, cols, data).expect("normal draws are finite")
}

fn random_labels(n: usize, k: usize, stream: &mut RandomStream) -> Vec<usize> {
    (0..n).map(|_| stream.below(k)).collect()
}

fn split(p: &[f64], at: usize, rows: usize, cols: usize) -> Result<(Matrix, Matrix)> {
    let x = Matrix::new(rows, cols, p[..at].to_vec())?;
    let rest = p[at..].to_vec();
    let k = rest.len() / cols;
    Ok((x, Matrix::new(k, cols, rest)?))
}

fn softmax_problem(stream: &mut RandomStream) -> Result<Problem> {
    let (n, d, k) = (6, 4, 3);
    let x = random_matrix(n, d, stream);
    let w = random_matrix(k, d, stream);
    let b: Vec<f64> = (0..k).map(|_| stream.normal()).collect();
    let y = random_labels(n, k, stream);
    let g = softmax_ce(&x, &y, &w, Some(&b))?;
    let mut params = x.data().to_vec();
    params.extend_from_slice(w.data());
    params.extend_from_slice(&b);
    let mut analytic = g.d_features.data().to_vec();
    analytic.extend_from_slice(g.d_weights.data());
    analytic.extend_from_slice(g.d_bias.as_deref().unwrap_or_default());
    Ok(Problem {
        params,
        analytic,
        eval: Box::new(move |p| {
            let (x, wb) = split(&p[..n * d + k * d], n * d, n, d)?;
            Ok(softmax_ce(&x, &y, &wb, Some(&p[n * d + k * d..]))?.loss)
        }),
    })
}

fn random_head(spec: MarginSpec, stream: &mut RandomStream) -> AngularHead {
    let mut head = AngularHead::new(spec);
    if stream.uniform(0.0, 1.0) < 0.5 {
        head = head.with_feature_scale(stream.uniform(1.0, 4.0));
    }
    if stream.uniform(0.0, 1.0) < 0.5 {
        head = head.with_lambda(stream.uniform(0.0, 2.0));
    }
    head
}

fn near_knot(spec: MarginSpec, x: &Matrix, y: &[usize], rows: &Matrix) -> Result<bool> {
    let knots = spec.knots();
    if knots.is_empty() {
        return Ok(false);
    }
    for (i, &yi) in y.iter().enumerate() {
        let theta = cosine_angle(x.row(i), rows.row(yi))?;
        if knots.iter().any(|k| (theta - k).abs() < KNOT_EXCLUSION) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Gradient w.r.t. features and raw (unnormalized) weight rows.
fn margin_problem(spec: MarginSpec, stream: &mut RandomStream) -> Result<Option<Problem>> {
    let (n, d, k) = (5, 3, 4);
    let x = random_matrix(n, d, stream);
    let w = random_matrix(k, d, stream);
    let y = random_labels(n, k, stream);
    if near_knot(spec, &x, &y, &w)? {
        return Ok(None);
    }
    let head = random_head(spec, stream);
    let g = head.margin_softmax_raw(&x, &y, &w)?;
    let mut params = x.data().to_vec();
    params.extend_from_slice(w.data());
    let mut analytic = g.d_features.data().to_vec();
    analytic.extend_from_slice(g.d_weights.data());
    Ok(Some(Problem {
        params,
        analytic,
        eval: Box::new(move |p| {
            let (x, w) = split(p, n * d, n, d)?;
            Ok(head.margin_softmax_raw(&x, &y, &w)?.loss)
        }),
    }))
}

/// Gradient w.r.t. features; the bank is held fixed.
fn ir_problem(stream: &mut RandomStream) -> Result<Option<Problem>> {
    let specs = [
        MarginSpec::Plain,
        MarginSpec::Angular { m: 1 + stream.below(4) as u32 },
        MarginSpec::AdditiveAngle { alpha: stream.uniform(0.0, 0.5) },
        MarginSpec::Combined {
            m1: stream.uniform(1.0, 1.5),
            m2: stream.uniform(0.0, 0.5),
            m3: stream.uniform(0.0, 0.4),
        },
    ];
    let spec = specs[stream.below(specs.len())];
    let (n, d, k) = (5, 3, 4);
    let x = random_matrix(n, d, stream);
    let bank = CenterBank::from_rows(&random_matrix(k, d, stream), CenterStrategy::Exact)?;
    let y = random_labels(n, k, stream);
    if near_knot(spec, &x, &y, bank.centers())? {
        return Ok(None);
    }
    let head = random_head(spec, stream);
    let g = head.ir_softmax(&x, &y, &bank)?;
    Ok(Some(Problem {
        params: x.data().to_vec(),
        analytic: g.d_features.data().to_vec(),
        eval: Box::new(move |p| Ok(head.ir_softmax(&Matrix::new(n, d, p.to_vec())?, &y, &bank)?.loss)),
    }))
}

fn npairs_problem(stream: &mut RandomStream) -> Result<Problem> {
    let (n, d) = (6, 3);
    let e = random_matrix(n, d, stream);
    // Three identities, two samples each, so every sample has a positive.
    let mut y = vec![0, 0, 1, 1, 2, 2];
    stream.shuffle(&mut y);
    let pairs = positive_pairs(&y);
    let (_, g) = npairs_loss(&e, &y, &pairs)?;
    Ok(Problem {
        params: e.data().to_vec(),
        analytic: g.data().to_vec(),
        eval: Box::new(move |p| Ok(npairs_loss(&Matrix::new(n, d, p.to_vec())?, &y, &pairs)?.0)),
    })
}

/// Gradient w.r.t. the center, which the check moves off the unit sphere.
fn aux_problem(stream: &mut RandomStream) -> Result<Problem> {
    let d = 4;
    let x: Vec<f64> = (0..d).map(|_| stream.normal()).collect();
    let c = stream.unit_vector(d);
    let (_, g) = aux_center_unchecked(&x, &c)?;
    Ok(Problem {
        params: c,
        analytic: g,
        eval: Box::new(move |p| Ok(aux_center_unchecked(&x, p)?.0)),
    })
}

fn draw(name: &str, stream: &mut RandomStream) -> Result<Option<Problem>> {
    Ok(match name {
        "softmax_ce" => Some(softmax_problem(stream)?),
        "margin_plain" => margin_problem(MarginSpec::Plain, stream)?,
        "margin_angular" => {
            let m = 1 + stream.below(4) as u32;
            margin_problem(MarginSpec::Angular { m }, stream)?
        }
        "margin_additive_angle" => {
            let alpha = stream.uniform(0.0, 0.5);
            margin_problem(MarginSpec::AdditiveAngle { alpha }, stream)?
        }
        "margin_combined" => {
            let spec = MarginSpec::Combined {
                m1: stream.uniform(1.0, 1.5),
                m2: stream.uniform(0.0, 0.5),
                m3: stream.uniform(0.0, 0.4),
            };
            margin_problem(spec, stream)?
        }
        "ir_softmax" => ir_problem(stream)?,
        "npairs" => Some(npairs_problem(stream)?),
        "aux_center" => Some(aux_problem(stream)?),
        other => return Err(Error::invalid("loss", format!("unknown loss `{other}`"))),
    })
}

/// Runs the check for every loss selected by `opts.filter`.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.points == 0 {
        return Err(Error::invalid("points", "must be >= 1"));
    }
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::invalid("step", format!("must be > 0, got {}", opts.step)));
    }
    let selected: Vec<(usize, &str)> = LOSS_NAMES
        .iter()
        .enumerate()
        .filter(|(_, n)| opts.filter.as_deref().is_none_or(|f| n.contains(f)))
        .map(|(i, n)| (i, *n))
        .collect();
    if selected.is_empty() {
        return Err(Error::invalid(
            "filter",
            format!("matches none of {}", LOSS_NAMES.join(", ")),
        ));
    }
    let root = RandomStream::new(opts.seed);
    let mut checks = Vec::new();
    for (i, name) in selected {
        let mut stream = root.fork(i as u64);
        let (mut done, mut redrawn, mut worst) = (0, 0, 0.0f64);
        while done < opts.points {
            let Some(mut prob) = draw(name, &mut stream)? else {
                redrawn += 1;
                continue;
            };
            prob.analytic[0] += opts.perturb;
            let numeric = numeric_gradient(&prob.eval, &prob.params, opts.step)?;
            worst = worst.max(relative_error(&prob.analytic, &numeric));
            done += 1;
        }
        checks.push(LossCheck {
            name: name.to_string(),
            points: done,
            redrawn,
            max_rel_error: worst,
            passed: worst <= opts.tolerance,
        });
    }
    Ok(GradcheckReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((relative_error(&[3.0], &[4.0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(|p| Ok(p[0] * p[0] + 3.0 * p[1]), &[2.0, -1.0], 1e-5).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn filter_selects_one_loss() {
        let opts = GradcheckOptions {
            points: 5,
            filter: Some("npairs".into()),
            ..Default::default()
        };
        let r = gradcheck(&opts).unwrap();
        assert_eq!(r.checks.len(), 1);
        assert_eq!(r.checks[0].name, "npairs");
        assert!(r.passed());
    }

    #[test]
    fn perturbation_fails() {
        let opts = GradcheckOptions {
            points: 5,
            perturb: 1e-3,
            ..Default::default()
        };
        let r = gradcheck(&opts).unwrap();
        assert!(!r.passed());
        assert!(r.checks.iter().all(|c| !c.passed));
    }

    #[test]
    fn unknown_filter_rejected() {
        let opts = GradcheckOptions {
            filter: Some("nope".into()),
            ..Default::default()
        };
        assert!(gradcheck(&opts).is_err());
    }
}
