//! Central-difference gradient verification.

use rand::Rng as _;

use crate::error::Result;
use crate::params::{BoundParams, Gradients, ParameterStore};
use crate::rng::rng_from_seed;
use crate::tensor::{Tape, TensorRef};

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error over the sampled parameter entries.
    pub max_rel_err: f32,
    /// Number of entries compared.
    pub checked: usize,
    /// (name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f32, f32)>,
    /// Diagnostics for non-finite values; non-empty means the check failed
    /// before any comparison was meaningful.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f32) -> bool {
        self.failures.is_empty() && self.max_rel_err <= tol
    }
}

/// Entries where both analytic and numeric gradients are below this floor
/// are counted as matching; relative error on near-zero pairs is noise.
const ABS_FLOOR: f32 = 1e-4;

/// Central differences at f32 cannot resolve loss changes below a few dozen
/// ULPs of the loss value; residuals under this bound are measurement noise,
/// not gradient defects.
const NOISE_ULPS: f32 = 64.0;

/// Compare analytic gradients of a scalar-valued computation against central
/// finite differences over a random subsample of parameter entries.
///
/// `build` must be deterministic: it records the forward computation for the
/// given parameter values on the provided tape and returns the scalar loss.
pub fn grad_check<F>(
    build: &F,
    params: &ParameterStore,
    h: f32,
    sample_size: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &mut BoundParams, &ParameterStore) -> Result<TensorRef>,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        failures: Vec::new(),
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let mut bound = BoundParams::new(params);
    let loss = build(&mut tape, &mut bound, params)?;
    let base = tape.value(loss)[0];
    if !base.is_finite() {
        report.failures.push(format!("loss is non-finite: {base}"));
        return Ok(report);
    }
    tape.backward(loss)?;
    let mut analytic = Gradients::zeros_like(params);
    bound.grads_into(&tape, &mut analytic, 1.0);
    if !analytic.all_finite() {
        report.failures.push("analytic gradient is non-finite".into());
        return Ok(report);
    }
    drop(tape);

    // Entry universe: all values of parameters that track gradients.
    let mut universe = Vec::new();
    for (pid, _, t) in params.iter() {
        if t.requires_grad() {
            for i in 0..t.numel() {
                universe.push((pid, i));
            }
        }
    }
    let mut rng = rng_from_seed(seed);
    let count = sample_size.min(universe.len());

    let eval = |store: &ParameterStore| -> Result<f32> {
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(store);
        let loss = build(&mut tape, &mut bound, store)?;
        Ok(tape.value(loss)[0])
    };

    for _ in 0..count {
        let (pid, i) = universe[rng.random_range(0..universe.len())];
        let mut perturbed = params.clone();
        let orig = perturbed.get(pid).data()[i];
        perturbed.get_mut(pid).data_mut()[i] = orig + h;
        let up = eval(&perturbed)?;
        perturbed.get_mut(pid).data_mut()[i] = orig - h;
        let down = eval(&perturbed)?;
        if !up.is_finite() || !down.is_finite() {
            report.failures.push(format!(
                "perturbed loss non-finite at {}[{}]",
                params.name(pid),
                i
            ));
            return Ok(report);
        }
        let numeric = (up - down) / (2.0 * h);
        let ana = analytic.get(pid)[i];
        let denom = ana.abs().max(numeric.abs());
        let residual = (ana - numeric).abs();
        let noise_floor =
            NOISE_ULPS * f32::EPSILON * up.abs().max(down.abs()).max(1.0) / (2.0 * h);
        let rel = if denom < ABS_FLOOR || residual <= noise_floor {
            0.0
        } else {
            residual / denom
        };
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((params.name(pid).to_string(), i, ana, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_function_gradient() {
        let mut params = ParameterStore::new();
        let x = params.add("x", Tensor::scalar(3.0));
        let build = |tape: &mut Tape, bound: &mut BoundParams, store: &ParameterStore| {
            let xn = bound.node(tape, store, x);
            let sq = tape.mul(xn, xn)?;
            Ok(tape.sum_elems(sq))
        };
        // analytic derivative is 6.0 at x = 3
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(&params);
        let loss = build(&mut tape, &mut bound, &params).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        bound.grads_into(&tape, &mut grads, 1.0);
        assert!((grads.get(x)[0] - 6.0).abs() < 1e-6);

        let report = grad_check(&build, &params, 1e-3, 8, 7).unwrap();
        assert!(report.passed(1e-3), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut params = ParameterStore::new();
        let x = params.add("x", Tensor::scalar(5.0));
        let build = |tape: &mut Tape, bound: &mut BoundParams, store: &ParameterStore| {
            // Touch the parameter so it participates, then cancel it out.
            let xn = bound.node(tape, store, x);
            let diff = tape.sub(xn, xn)?;
            Ok(tape.sum_elems(diff))
        };
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(&params);
        let loss = build(&mut tape, &mut bound, &params).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        bound.grads_into(&tape, &mut grads, 1.0);
        assert_eq!(grads.get(x)[0], 0.0);

        let report = grad_check(&build, &params, 1e-3, 4, 3).unwrap();
        assert!(report.passed(1e-6));
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        // loss = 2x recorded, but we compare against the gradient of x^2 by
        // perturbing a quadratic path: emulate a broken rule via mismatched
        // build functions is awkward, so instead check that rel err is large
        // when h is absurdly big (numeric estimate diverges from analytic).
        let mut params = ParameterStore::new();
        let x = params.add("x", Tensor::scalar(0.5));
        let build = |tape: &mut Tape, bound: &mut BoundParams, store: &ParameterStore| {
            let xn = bound.node(tape, store, x);
            let sq = tape.mul(xn, xn)?;
            let quad = tape.mul(sq, sq)?; // x^4: strong curvature
            Ok(tape.sum_elems(quad))
        };
        let fine = grad_check(&build, &params, 1e-3, 4, 11).unwrap();
        let coarse = grad_check(&build, &params, 0.9, 4, 11).unwrap();
        assert!(fine.max_rel_err < 1e-2);
        assert!(coarse.max_rel_err > fine.max_rel_err);
    }
}
