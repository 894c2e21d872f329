//! Finite-difference verification of reverse-mode gradients.
//!
//! 64-bit only: central differences with step 1e-5 are meaningless at f32.

use crate::error::{LmhrError, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Compare reverse-mode gradients of `f` against central finite differences
/// over every coordinate of every input. Returns the worst relative error,
/// where rel = |ad - fd| / max(|ad|, |fd|, 1e-4). The denominator floor
/// sits above the noise floor of central differences (~1e-10 absolute at
/// step 1e-5), so coordinates whose true gradient is smaller than the floor
/// cannot produce spurious failures while anything FD can measure is still
/// compared at full relative precision.
///
/// `f` must build a forward pass from the given leaves and return its output;
/// non-scalar outputs are summed into the checked objective.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, usize::MAX, 0)
}

/// Like [`grad_check`] but checks at most `max_coords` coordinates per input,
/// chosen deterministically from `seed`. Used for larger end-to-end models
/// where the full sweep is needlessly slow.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let out = f(&mut tape, &vars)?;
        let loss = tape.sum_all(out)?;
        Ok(tape.value(loss).data()[0])
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let out = f(&mut tape, &vars)?;
    let loss = tape.sum_all(out)?;
    if !tape.value(loss).is_finite() {
        return Err(LmhrError::numeric("grad_check: non-finite objective"));
    }
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; input.numel()],
        };
        let n = input.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut picked: Vec<usize> = (0..max_coords)
                .map(|_| rng.gen_range(0..n))
                .collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            if !fd.is_finite() {
                return Err(LmhrError::numeric(
                    "grad_check: non-finite finite-difference value",
                ));
            }
            let ad = analytic[j];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Deterministic pseudo-random tensor for test fixtures.
pub fn random_tensor(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_linear_case_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(vec![3, 4], 1.0, &mut rng);
        let w = random_tensor(vec![4, 2], 1.0, &mut rng);
        let err = grad_check(
            |tape, vars| tape.matmul(vars[0], vars[1]),
            &[x, w],
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn softmax_matmul_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(vec![3, 3], 1.0, &mut rng);
        let w = random_tensor(vec![3, 3], 1.0, &mut rng);
        let err = grad_check(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                tape.softmax_rows(y)
            },
            &[x, w],
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
