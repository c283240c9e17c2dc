//! Central finite-difference checks of tape gradients.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the
    /// probed coordinates.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub probed: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error < FD_TOLERANCE
    }
}

/// Compares the tape gradient of `f` at `x0` with central differences.
///
/// At most `max_coords` coordinates are probed, chosen by a fixed seed
/// when the tensor is larger.
pub fn check_gradient<F>(x0: &Tensor, max_coords: usize, f: F) -> GradCheck
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let eval = |x: Tensor| {
        let mut g = Graph::new();
        let v = g.constant(x);
        let out = f(&mut g, v);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let v = g.param(x0.clone());
    let out = f(&mut g, v);
    let grads = g.backward(out);
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape().to_vec()));

    let coords: Vec<usize> = if x0.len() <= max_coords {
        (0..x0.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        (0..max_coords).map(|_| rng.random_range(0..x0.len())).collect()
    };

    let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
    for &i in &coords {
        let mut plus = x0.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        diff += (a - numeric).powi(2);
        an += a * a;
        nn += numeric * numeric;
    }
    let denom = an.sqrt().max(nn.sqrt()).max(1e-12);
    GradCheck { rel_error: diff.sqrt() / denom, analytic_norm: an.sqrt(), probed: coords.len() }
}

/// Uniform `[0, 1)` grid from a seed.
pub fn random_grid(channels: usize, dims: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = channels * dims[0] * dims[1] * dims[2];
    Tensor::grid(channels, dims, (0..n).map(|_| rng.random::<f64>()).collect())
}
