//! Central-difference checks of the MLP backward pass, at initialization
//! and after training has moved the weights.

use irsoftmax::gradcheck::relative_error;
use irsoftmax::model::{Activation, MlpParams, MlpSpec, Momentum};
use irsoftmax::numerics::{Matrix, RandomStream};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random_matrix(rows: usize, cols: usize, s: &mut RandomStream) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| s.normal()).collect()).unwrap()
}

/// J = Σ E ⊙ R, so ∂J/∂E = R.
fn objective(p: &MlpParams, x: &Matrix, r: &Matrix) -> f64 {
    let e = p.embed(x).unwrap();
    e.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Relative error over the stacked weight, bias and input gradients.
fn worst_error(p: &MlpParams, x: &Matrix, r: &Matrix) -> f64 {
    let (_, cache) = p.forward(x).unwrap();
    let (g, dx) = p.backward_with_input(&cache, r).unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for l in 0..p.layers() {
        for i in 0..p.weights[l].data().len() {
            let at = |h: f64| {
                let mut q = p.clone();
                q.weights[l].data_mut()[i] += h;
                objective(&q, x, r)
            };
            let fd = (at(STEP) - at(-STEP)) / (2.0 * STEP);
            analytic.push(g.weights[l].data()[i]);
            numeric.push(fd);
        }
        for i in 0..p.biases[l].len() {
            let at = |h: f64| {
                let mut q = p.clone();
                q.biases[l][i] += h;
                objective(&q, x, r)
            };
            let fd = (at(STEP) - at(-STEP)) / (2.0 * STEP);
            analytic.push(g.biases[l][i]);
            numeric.push(fd);
        }
    }
    for i in 0..x.data().len() {
        let at = |h: f64| {
            let mut y = x.clone();
            y.data_mut()[i] += h;
            objective(p, &y, r)
        };
        let fd = (at(STEP) - at(-STEP)) / (2.0 * STEP);
        analytic.push(dx.data()[i]);
        numeric.push(fd);
    }
    relative_error(&analytic, &numeric)
}

fn fixture(activation: Activation, seed: u64) -> (MlpParams, Matrix, Matrix, RandomStream) {
    let mut s = RandomStream::new(seed);
    let spec = MlpSpec::new(vec![5, 7, 6, 3], activation).unwrap();
    let p = MlpParams::init(&spec, &mut s).unwrap();
    let x = random_matrix(4, 5, &mut s);
    let r = random_matrix(4, 3, &mut s);
    (p, x, r, s)
}

/// 100 momentum steps pulling the embeddings toward random targets.
fn trained(mut p: MlpParams, s: &mut RandomStream) -> MlpParams {
    let x = random_matrix(16, 5, s);
    let target = random_matrix(16, 3, s);
    let mut state = Momentum::new(0.01, 0.9).unwrap();
    for _ in 0..100 {
        let (e, cache) = p.forward(&x).unwrap();
        let mut d = e.clone();
        d.scale(-1.0);
        d.add_assign(&target).unwrap();
        d.scale(-1.0 / 16.0);
        let g = p.backward(&cache, &d).unwrap();
        p.sgd_step(&g, &mut state).unwrap();
    }
    p
}

#[test]
fn tanh_gradients_at_init() {
    let (p, x, r, _) = fixture(Activation::Tanh, 1);
    let e = worst_error(&p, &x, &r);
    assert!(e < TOL, "{e}");
}

#[test]
fn relu_gradients_at_init() {
    let (p, x, r, _) = fixture(Activation::Relu, 2);
    let e = worst_error(&p, &x, &r);
    assert!(e < TOL, "{e}");
}

#[test]
fn gradients_after_100_steps() {
    for (activation, seed) in [(Activation::Tanh, 3), (Activation::Relu, 4)] {
        let (p0, x, r, mut s) = fixture(activation, seed);
        let p = trained(p0.clone(), &mut s);
        assert_ne!(p, p0);
        let e = worst_error(&p, &x, &r);
        assert!(e < TOL, "{activation:?}: {e}");
    }
}

#[test]
fn cache_from_before_a_step_is_rejected() {
    let (p, x, r, mut s) = fixture(Activation::Tanh, 5);
    let (_, stale) = p.forward(&x).unwrap();
    let p = trained(p, &mut s);
    assert!(p.backward(&stale, &r).is_err());
}
