//! Central-difference gradient checking shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between the analytic gradient of
/// `f(x).sum()`-style scalar output and central differences.
pub fn grad_rel_error<F>(x: &Tensor<f64>, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&g, xv);
    let grads = g.backward(y);
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let h = 1e-6;
    let mut num = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let gp = Graph::new();
        let fp = f(&gp, gp.input(plus)).item();
        let gm = Graph::new();
        let fm = f(&gm, gm.input(minus)).item();
        num[i] = (fp - fm) / (2.0 * h);
    }
    rel_error(analytic.data(), &num)
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-12 {
        diff
    } else {
        diff / (na + nb)
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Weighted sum so every output element gets a distinct upstream gradient.
pub fn probe<'g>(g: &'g Graph<f64>, y: Var<'g, f64>) -> Var<'g, f64> {
    let w = randn(&y.shape(), 999);
    (y * g.constant(w)).sum()
}
