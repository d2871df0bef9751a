//! Shared helpers for unit tests: deterministic random data and a central
//! finite-difference gradient oracle, independent of the backward pass it
//! checks.

use crate::tape::{Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn randn_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn assert_close(got: f64, want: f64, tol: f64) {
    assert!((got - want).abs() <= tol, "got {got}, want {want} (tol {tol})");
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Checks analytic gradients of a scalar-valued graph against central finite
/// differences in double precision. All listed inputs are gradient-tracked.
/// Returns the maximum relative error over every input element.
pub fn fd_gradcheck<F>(inputs: &[(Vec<usize>, Vec<f64>)], build: F, h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> crate::error::Result<TensorId>,
{
    let eval = |data: &[Vec<f64>], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .zip(data)
            .map(|((shape, _), d)| tape.input_parts(shape.clone(), d.clone(), true).unwrap())
            .collect();
        let loss = build(&mut tape, &ids).expect("graph builds");
        let value = tape.data(loss)[0];
        let grads = if want_grads {
            tape.backward(loss).unwrap();
            ids.iter()
                .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
                .collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (_, analytic) = eval(&base, true);

    let mut max_rel: f64 = 0.0;
    for (pi, (_, data)) in inputs.iter().enumerate() {
        for ei in 0..data.len() {
            let mut plus = base.clone();
            plus[pi][ei] += h;
            let (lp, _) = eval(&plus, false);
            let mut minus = base.clone();
            minus[pi][ei] -= h;
            let (lm, _) = eval(&minus, false);
            let numeric = (lp - lm) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[pi][ei], numeric));
        }
    }
    max_rel
}

/// Deterministic RNG for test fixtures.
pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
