use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over inputs and elements of |analytic - numeric| / max(1, |numeric|)
    pub max_relative_error: f64,
    /// (input index, element index) where the maximum occurred
    pub worst: (usize, usize),
}

/// Checks the reverse-mode gradient of `f` against central differences.
///
/// `f` records its computation on the supplied tape and returns the output;
/// the output is scalarized by summation. Each call gets a fresh tape built by
/// `make_tape`, so relaxed (surrogate) forwards can be checked by passing
/// [`Tape::relaxed`].
pub fn grad_check<F>(
    make_tape: fn() -> Tape,
    f: F,
    inputs: &[Tensor],
    epsilon: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = make_tape();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).sum())
    };

    let mut tape = make_tape();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let total = tape.sum(out);
    tape.backward(total)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: (0, 0),
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (analytic[i].data()[e] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (i, e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_functional_is_exact() {
        let w = Tensor::from_fn(&[6], |i| i as f64 * 0.3 - 1.0);
        let x = Tensor::from_fn(&[6], |i| (i as f64).sin());
        let report = grad_check(
            Tape::new,
            |t, v| t.mul(v[0], v[1]),
            &[w, x],
            1e-4,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-9, "{report:?}");
    }

    #[test]
    fn surrogate_spike_matches_relaxed_forward() {
        let v = Tensor::from_fn(&[7], |i| i as f64 * 0.35 - 1.0);
        let report = grad_check(Tape::relaxed, |t, v| Ok(t.spike(v[0], 0.4)), &[v], 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }
}
