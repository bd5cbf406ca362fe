//! Fully connected embedder with hand-written reverse mode.
//!
//! Hidden layers are affine + activation; the last layer is affine only, so
//! embeddings can point anywhere on the sphere.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RandomStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn grad(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width first, embedding width last.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid("layer_sizes", "need at least input and embedding widths"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer_sizes", "every width must be > 0"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Weights are stored `out × in`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub activation: Activation,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.activation == other.activation && self.weights == other.weights && self.biases == other.biases
    }
}

/// Activations retained by [`MlpParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input of each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec, stream: &mut RandomStream) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| stream.uniform(-a, a)).collect();
            weights.push(Matrix::new(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            activation: spec.activation,
            weights,
            biases,
            generation: next_generation(),
        })
    }

    pub fn from_parts(activation: Activation, weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("weights", "need one bias vector per weight matrix"));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if b.len() != w.rows() {
                return Err(Error::ShapeMismatch {
                    context: "MlpParams bias",
                    expected: format!("{} entries in layer {l}", w.rows()),
                    got: format!("{}", b.len()),
                });
            }
            if l > 0 && weights[l - 1].rows() != w.cols() {
                return Err(Error::ShapeMismatch {
                    context: "MlpParams layer chain",
                    expected: format!("layer {l} input {}", weights[l - 1].rows()),
                    got: format!("{}", w.cols()),
                });
            }
            if !b.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("biases", format!("layer {l} has non-finite entries")));
            }
        }
        Ok(Self {
            activation,
            weights,
            biases,
            generation: next_generation(),
        })
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.weights.last().expect("non-empty").rows()
    }

    /// Embeddings for each row of `x`, plus the cache [`backward`] needs.
    ///
    /// [`backward`]: MlpParams::backward
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "mlp_forward",
                expected: format!("{} input columns", self.input_dim()),
                got: format!("{}", x.cols()),
            });
        }
        let last = self.layers() - 1;
        let mut inputs = Vec::with_capacity(self.layers());
        let mut pre = Vec::with_capacity(self.layers());
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul_t(w)?;
            for r in 0..z.rows() {
                for (v, bj) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bj;
                }
            }
            let next = if l < last {
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|v| *v = self.activation.apply(*v));
                a
            } else {
                z.clone()
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok((
            h,
            ForwardCache {
                generation: self.generation,
                inputs,
                pre,
            },
        ))
    }

    /// Embeddings only.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Parameter gradients given `d_embeddings = ∂J/∂E`.
    pub fn backward(&self, cache: &ForwardCache, d_embeddings: &Matrix) -> Result<MlpGrads> {
        Ok(self.backward_with_input(cache, d_embeddings)?.0)
    }

    /// As [`backward`](MlpParams::backward), also returning `∂J/∂X`.
    pub fn backward_with_input(&self, cache: &ForwardCache, d_embeddings: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache {
                cache: cache.generation,
                params: self.generation,
            });
        }
        let last = self.layers() - 1;
        if d_embeddings.shape() != cache.pre[last].shape() {
            return Err(Error::ShapeMismatch {
                context: "mlp_backward",
                expected: format!("{:?}", cache.pre[last].shape()),
                got: format!("{:?}", d_embeddings.shape()),
            });
        }
        let mut weights = vec![Matrix::zeros(0, 0); self.layers()];
        let mut biases = vec![Vec::new(); self.layers()];
        let mut delta = d_embeddings.clone();
        for l in (0..self.layers()).rev() {
            if l < last {
                for (dv, &z) in delta.data_mut().iter_mut().zip(cache.pre[l].data()) {
                    *dv *= self.activation.grad(z);
                }
            }
            weights[l] = delta.t_matmul(&cache.inputs[l])?;
            let mut db = vec![0.0; delta.cols()];
            for row in delta.iter_rows() {
                for (b, v) in db.iter_mut().zip(row) {
                    *b += v;
                }
            }
            biases[l] = db;
            delta = delta.matmul(&self.weights[l])?;
        }
        Ok((MlpGrads { weights, biases }, delta))
    }

    /// One classical-momentum step: `v ← μv − lr·g`, `θ ← θ + v`.
    pub fn sgd_step(&mut self, grads: &MlpGrads, state: &mut Momentum) -> Result<()> {
        if grads.weights.len() != self.layers() || grads.biases.len() != self.layers() {
            return Err(Error::ShapeMismatch {
                context: "sgd_step",
                expected: format!("{} layers", self.layers()),
                got: format!("{}", grads.weights.len()),
            });
        }
        for l in 0..self.layers() {
            if grads.weights[l].shape() != self.weights[l].shape() || grads.biases[l].len() != self.biases[l].len() {
                return Err(Error::ShapeMismatch {
                    context: "sgd_step",
                    expected: format!("layer {l} shape {:?}", self.weights[l].shape()),
                    got: format!("{:?}", grads.weights[l].shape()),
                });
            }
            if !grads.weights[l].is_finite() || !grads.biases[l].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: l });
            }
        }
        for l in 0..self.layers() {
            state.apply(2 * l, self.weights[l].data_mut(), grads.weights[l].data());
            state.apply(2 * l + 1, &mut self.biases[l], &grads.biases[l]);
        }
        self.generation = next_generation();
        Ok(())
    }
}

/// Velocity buffers for momentum SGD, keyed by parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("learning_rate", format!("must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", format!("must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Updates `params` in place with gradient `grad`, using slot `slot`'s
    /// velocity buffer.
    pub fn apply(&mut self, slot: usize, params: &mut [f64], grad: &[f64]) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != params.len() {
            *v = vec![0.0; params.len()];
        }
        for ((p, vi), g) in params.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = self.momentum * *vi - self.lr * g;
            *p += *vi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize]) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), Activation::Relu).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Relu).is_err());
        assert_eq!(spec(&[5, 4, 2]).embedding_dim(), 2);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = MlpParams::from_parts(Activation::Relu, vec![Matrix::identity(3)], vec![vec![0.0; 3]]).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, -0.1]]).unwrap();
        assert_eq!(p.embed(&x).unwrap(), x);
    }

    #[test]
    fn zero_input_propagates_biases() {
        let mut rs = RandomStream::new(1);
        let mut p = MlpParams::init(&spec(&[2, 3, 2]), &mut rs).unwrap();
        p.biases[0] = vec![0.5, -1.0, 2.0];
        p.biases[1] = vec![0.1, -0.2];
        let e = p.embed(&Matrix::zeros(1, 2)).unwrap();
        let h = [0.5, 0.0, 2.0];
        for j in 0..2 {
            let want = p.biases[1][j] + (0..3).map(|t| p.weights[1].get(j, t) * h[t]).sum::<f64>();
            assert!((e.get(0, j) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let mut rs = RandomStream::new(1);
        let p = MlpParams::init(&spec(&[2, 3, 2]), &mut rs).unwrap();
        assert!(p.forward(&Matrix::zeros(1, 3)).is_err());
        assert!(MlpParams::from_parts(Activation::Relu, vec![Matrix::zeros(2, 2)], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rs = RandomStream::new(2);
        let p = MlpParams::init(&spec(&[3, 4, 2]), &mut rs).unwrap();
        let x = Matrix::new(2, 3, (0..6).map(|_| rs.normal()).collect()).unwrap();
        let (_, cache) = p.forward(&x).unwrap();
        let g = p.backward(&cache, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rs = RandomStream::new(3);
        let p = MlpParams::init(&spec(&[3, 2]), &mut rs).unwrap();
        let x = Matrix::new(4, 3, (0..12).map(|_| rs.normal()).collect()).unwrap();
        let de = Matrix::new(4, 2, (0..8).map(|_| rs.normal()).collect()).unwrap();
        let (_, cache) = p.forward(&x).unwrap();
        let g = p.backward(&cache, &de).unwrap();
        let want = de.transpose().matmul(&x).unwrap();
        assert!(g.weights[0].max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rs = RandomStream::new(4);
        let mut p = MlpParams::init(&spec(&[2, 2]), &mut rs).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let (_, cache) = p.forward(&x).unwrap();
        let g = p.backward(&cache, &Matrix::from_rows(&[[1.0, 1.0]]).unwrap()).unwrap();
        let mut m = Momentum::new(0.1, 0.0).unwrap();
        p.sgd_step(&g, &mut m).unwrap();
        assert!(matches!(
            p.backward(&cache, &Matrix::from_rows(&[[1.0, 1.0]]).unwrap()),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = MlpParams::from_parts(Activation::Relu, vec![Matrix::from_rows(&[[1.0, 2.0]]).unwrap()], vec![vec![3.0]]).unwrap();
        let g = MlpGrads {
            weights: vec![Matrix::from_rows(&[[0.5, -1.0]]).unwrap()],
            biases: vec![vec![2.0]],
        };
        let mut m = Momentum::new(0.1, 0.0).unwrap();
        p.sgd_step(&g, &mut m).unwrap();
        assert_eq!(p.weights[0].data(), &[1.0 - 0.05, 2.0 + 0.1]);
        assert!((p.biases[0][0] - 2.8).abs() < 1e-15);

        let zero = MlpGrads {
            weights: vec![Matrix::zeros(1, 2)],
            biases: vec![vec![0.0]],
        };
        let before = p.clone();
        let mut m = Momentum::new(0.1, 0.0).unwrap();
        p.sgd_step(&zero, &mut m).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_matches_hand_unroll() {
        let theta0 = 1.0;
        let (g1, g2) = (0.5, -0.25);
        let (lr, mu) = (0.1, 0.9);
        let mut p = [theta0];
        let mut m = Momentum::new(lr, mu).unwrap();
        m.apply(0, &mut p, &[g1]);
        m.apply(0, &mut p, &[g2]);
        // v1 = -lr g1, v2 = mu v1 - lr g2
        let v1 = -lr * g1;
        let v2 = mu * v1 - lr * g2;
        assert!((p[0] - (theta0 + v1 + v2)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut rs = RandomStream::new(5);
        let mut p = MlpParams::init(&spec(&[2, 3, 2]), &mut rs).unwrap();
        let mut g = MlpGrads {
            weights: p.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: p.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        g.biases[1][0] = f64::NAN;
        let mut m = Momentum::new(0.1, 0.0).unwrap();
        assert!(matches!(p.sgd_step(&g, &mut m), Err(Error::NonFiniteGradient { layer: 1 })));
    }

    #[test]
    fn sgd_decreases_convex_quadratic() {
        // f(W) = ½‖W x − t‖² through a single linear layer
        let mut rs = RandomStream::new(6);
        let mut p = MlpParams::init(&spec(&[3, 2]), &mut rs).unwrap();
        let x = Matrix::from_rows(&[[1.0, -0.5, 2.0]]).unwrap();
        let t = [0.3, -0.7];
        let f = |p: &MlpParams| {
            let e = p.embed(&x).unwrap();
            0.5 * ((e.get(0, 0) - t[0]).powi(2) + (e.get(0, 1) - t[1]).powi(2))
        };
        let before = f(&p);
        let (e, cache) = p.forward(&x).unwrap();
        let de = Matrix::from_rows(&[[e.get(0, 0) - t[0], e.get(0, 1) - t[1]]]).unwrap();
        let g = p.backward(&cache, &de).unwrap();
        p.sgd_step(&g, &mut Momentum::new(0.01, 0.0).unwrap()).unwrap();
        assert!(f(&p) < before);
    }
}
