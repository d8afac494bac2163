//! Finite-difference gradient verification.
//!
//! The harness rebuilds the computation from scratch for every probe, so it
//! checks the gradient of whatever function the builder closure actually
//! evaluates, including any statistics it freezes.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::invalid("finite_diff_grad: step must be positive"));
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Tolerances for comparing analytic against finite-difference gradients.
/// A coordinate passes when `|a - fd| <= max(abs_tol, rel_tol * max(|a|, |fd|))`.
#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub step: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            step: 1e-5,
        }
    }
}

/// Worst coordinate found by a gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub passed: bool,
    pub coords_checked: usize,
    pub worst_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl CheckReport {
    pub fn describe(&self) -> String {
        format!(
            "{} coords, worst err {:.3e} at input {} coord {} (analytic {:.6e}, numeric {:.6e})",
            self.coords_checked,
            self.worst_error,
            self.worst_input,
            self.worst_coord,
            self.worst_analytic,
            self.worst_numeric
        )
    }
}

/// Compares analytic gradients of a rebuilt scalar function against central
/// differences.
///
/// `build` receives a fresh tape plus one leaf per input tensor and returns
/// the scalar loss node. `check` lists the input indices to differentiate;
/// the rest stay frozen at their given values through every probe.
pub fn check_grads(
    inputs: &[Tensor],
    check: &[usize],
    settings: CheckSettings,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let eval = |tensors: &[Tensor]| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::invalid("check_grads: builder must return a scalar"));
        }
        Ok((tape, loss))
    };

    let (tape, loss) = eval(inputs)?;
    let mut leaf_vars = Vec::with_capacity(inputs.len());
    {
        // Leaves were created first and in order, so their ids are 0..len.
        for i in 0..inputs.len() {
            leaf_vars.push(Var(i));
        }
    }
    let grads = tape.backward(loss)?;

    let mut report = CheckReport {
        passed: true,
        coords_checked: 0,
        worst_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for &idx in check {
        if idx >= inputs.len() {
            return Err(Error::invalid(format!(
                "check_grads: input index {idx} out of range"
            )));
        }
        let analytic = grads.dense(leaf_vars[idx], inputs[idx].shape());
        for coord in 0..inputs[idx].numel() {
            let orig = work[idx].data()[coord];
            work[idx].data_mut()[coord] = orig + settings.step;
            let fp = {
                let (t, l) = eval(&work)?;
                t.value(l).item()
            };
            work[idx].data_mut()[coord] = orig - settings.step;
            let fm = {
                let (t, l) = eval(&work)?;
                t.value(l).item()
            };
            work[idx].data_mut()[coord] = orig;

            let numeric = (fp - fm) / (2.0 * settings.step);
            let a = analytic.data()[coord];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { err / scale } else { 0.0 };
            let ok = err <= settings.abs_tol.max(settings.rel_tol * scale);
            report.coords_checked += 1;
            if rel >= report.worst_error {
                report.worst_error = rel;
                report.worst_input = idx;
                report.worst_coord = coord;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            if !ok {
                report.passed = false;
            }
        }
    }
    Ok(report)
}
