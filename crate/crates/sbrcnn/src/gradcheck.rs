//! Finite-difference gradient checking.
//!
//! The checker only ever runs forward passes, so it stays independent of the
//! analytic backward implementations it verifies. Central differences in f64
//! with h = 1e-5 give ~1e-10 truncation error, far below the 1e-4 relative
//! tolerance asserted here.

use crate::autograd::{Graph, TensorId};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

/// Max normalized difference between analytic and numeric gradients of a
/// scalar-valued graph function over the given leaf inputs.
///
/// `build` receives a fresh graph plus the leaf ids for `inputs` and must
/// return a scalar node.
pub fn max_grad_error<F>(inputs: &[ArrayD<f64>], build: F) -> f64
where
    F: Fn(&mut Graph, &[TensorId]) -> TensorId,
{
    let run = |vals: &[ArrayD<f64>]| -> (Graph, Vec<TensorId>, TensorId) {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = vals.iter().map(|v| g.leaf(v.clone())).collect();
        let root = build(&mut g, &ids);
        (g, ids, root)
    };

    let (g, ids, root) = run(inputs);
    let loss0 = g.scalar_value(root);
    assert!(loss0.is_finite());
    let grads = g.backward(root);

    let mut worst: f64 = 0.0;
    let mut vals: Vec<ArrayD<f64>> = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(inputs[k].raw_dim()));
        let n = inputs[k].len();
        for flat in 0..n {
            let orig = vals[k].as_slice().unwrap()[flat];
            vals[k].as_slice_mut().unwrap()[flat] = orig + STEP;
            let (gp, _, rp) = run(&vals);
            let fp = gp.scalar_value(rp);
            vals[k].as_slice_mut().unwrap()[flat] = orig - STEP;
            let (gm, _, rm) = run(&vals);
            let fm = gm.scalar_value(rm);
            vals[k].as_slice_mut().unwrap()[flat] = orig;

            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic.as_slice().unwrap()[flat];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Like [`max_grad_error`] but with random inputs of the given shapes, and a
/// pass/fail assertion at [`REL_TOL`].
pub fn check_scalar_fn<F>(shapes: &[&[usize]], build: F)
where
    F: Fn(&mut Graph, &[TensorId]) -> TensorId,
{
    let inputs = random_inputs(shapes, 7);
    let err = max_grad_error(&inputs, build);
    assert!(
        err < REL_TOL,
        "gradient check failed: max relative error {err:.3e} >= {REL_TOL:.0e}"
    );
}

pub fn random_inputs(shapes: &[&[usize]], seed: u64) -> Vec<ArrayD<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ArrayD::from_shape_vec(IxDyn(s), data).unwrap()
        })
        .collect()
}
