//! Central finite-difference verification of tape gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;


use super::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Input name and flat coordinate of the largest error.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|analytic - fd| / max(1e-8, |analytic| + |fd|)`.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`, coordinate by coordinate.
///
/// Rejects points where any relu input lies within `10 h` of its kink.
pub fn grad_check<F>(f: F, inputs: &[(String, Tensor)], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, h, |_| {})
}

/// [`grad_check`] with a hook applied to the tape used for the analytic pass.
pub fn grad_check_with<F, H>(f: F, inputs: &[(String, Tensor)], h: f64, prepare: H) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    H: FnOnce(&mut Tape),
{
    let mut tape = Tape::new();
    prepare(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|(n, t)| tape.leaf(n.clone(), t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.min_relu_margin() < 10.0 * h {
        return Err(Error::NotDifferentiable(format!(
            "relu input within {:e} of zero (need at least {:e})",
            tape.min_relu_margin(),
            10.0 * h
        )));
    }
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item().ok_or(Error::NonScalarLoss(tape.value(loss).shape().to_vec()))
    };

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheck { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for (i, (name, _)) in inputs.iter().enumerate() {
        let analytic = &grads[name];
        for c in 0..values[i].numel() {
            let orig = values[i].data()[c];
            values[i].data_mut()[c] = orig + h;
            let up = eval(&values)?;
            values[i].data_mut()[c] = orig - h;
            let down = eval(&values)?;
            values[i].data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * h);
            if !fd.is_finite() {
                return Err(Error::NonFinite { op: "finite_difference" });
            }
            let err = relative_error(analytic.data()[c], fd);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_layer_passes() {
        let inputs = vec![
            ("x".into(), Tensor::new(vec![3, 2], vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.9]).unwrap()),
            ("w".into(), Tensor::new(vec![2, 2], vec![0.5, -0.1, 1.3, 0.8]).unwrap()),
            ("b".into(), Tensor::new(vec![2], vec![0.05, -0.2]).unwrap()),
        ];
        let probe = Tensor::new(vec![3, 2], vec![1.0, -0.5, 0.25, 2.0, -1.5, 0.75]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                t.weighted_sum(y, &probe)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coordinates, 12);
    }

    #[test]
    fn relu_at_kink_is_rejected() {
        let inputs = vec![("x".into(), Tensor::new(vec![2], vec![0.0, 1.0]).unwrap())];
        let r = grad_check(|t, v| {
            let y = t.relu(v[0])?;
            t.weighted_sum(y, &Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())
        }, &inputs, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::NotDifferentiable(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 0.0) - 1.0).abs() < 1e-15);
    }
}
