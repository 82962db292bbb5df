//! Central finite-difference verification of tape gradients.
//!
//! The checker rebuilds the forward pass from scratch for every probe, so it
//! shares no state with the backward rules it verifies. Checks run in f64
//! with step 1e-5. Callers are responsible for sampling inputs away from
//! non-differentiable points (|x| at 0, interpolation knots, kernel
//! truncation boundaries).

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub n_checked: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Check the gradient of a scalar-valued graph w.r.t. every element of every
/// input (or a random subset of `max_probes_per_input` elements when set).
///
/// `build` receives leaf vars in the order of `inputs` and returns the loss.
pub fn check_loss<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    build: F,
    max_probes_per_input: Option<usize>,
    rng: &mut impl Rng,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    // Analytic gradients from one taped pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut max_err = 0.0f64;
    let mut n_checked = 0usize;
    for (inp_idx, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(vars[inp_idx], input.shape());
        let numel = input.numel();
        let probes: Vec<usize> = match max_probes_per_input {
            Some(k) if k < numel => {
                let mut idx: Vec<usize> = Vec::with_capacity(k);
                while idx.len() < k {
                    let j = rng.gen_range(0..numel);
                    if !idx.contains(&j) {
                        idx.push(j);
                    }
                }
                idx
            }
            _ => (0..numel).collect(),
        };
        for j in probes {
            let mut plus = inputs.to_vec();
            plus[inp_idx].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[inp_idx].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let err = rel_err(analytic.data()[j], fd);
            if err > max_err {
                max_err = err;
            }
            n_checked += 1;
        }
    }

    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
        tolerance: DEFAULT_TOLERANCE,
        n_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checker_accepts_correct_rule_and_rejects_corrupted_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(vec![4], vec![0.3, -0.7, 1.2, 0.9]).unwrap();

        let good = check_loss(
            "scale",
            &[x.clone()],
            |tape, vars| {
                let y = tape.mul_scalar(vars[0], 1.5);
                Ok(tape.sum(y))
            },
            None,
            &mut rng,
        )
        .unwrap();
        assert!(good.passed(), "max err {}", good.max_rel_err);

        let bad = check_loss(
            "scale (corrupted fixture)",
            &[x],
            |tape, vars| {
                let y = tape.scale_with_bugged_backward(vars[0], 1.5);
                Ok(tape.sum(y))
            },
            None,
            &mut rng,
        )
        .unwrap();
        assert!(!bad.passed());
        assert!(bad.name.contains("corrupted"));
    }
}
