//! Central finite-difference gradient checking in 64-bit.

use crate::error::Result;

use super::{ParamStore, Tape, Tensor, Var};

/// Denominator floor for the relative error, so near-zero gradients are judged
/// on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
    pub max_rel_err: f64,
    /// `(input or parameter index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: (0, 0),
            checked: 0,
        }
    }

    fn record(&mut self, which: usize, elem: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = (which, elem);
        }
        self.checked += 1;
    }
}

/// Compare the tape gradient of `build(inputs)` with central differences of step
/// `h` for every element of every input.
pub fn check_inputs<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck::new();
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[which].len()];
        let analytic = grads.wrt(*var).unwrap_or(&zeros).to_vec();
        for e in 0..inputs[which].len() {
            let orig = work[which].data()[e];
            work[which].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[which].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[which].data_mut()[e] = orig;
            report.record(which, e, analytic[e], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Same as [`check_inputs`] but perturbs every weight of `store`; `loss` must
/// build a scalar from the parameters on a fresh tape.
pub fn check_params<F>(store: &ParamStore<f64>, loss: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck::new();
    let mut work = store.clone();
    for id in 0..store.len() {
        let n = store.get(id).value.len();
        let zeros = vec![0.0; n];
        let analytic = grads.param(id).unwrap_or(&zeros).to_vec();
        for e in 0..n {
            let orig = work.get(id).value.data()[e];
            let at = |x: f64, w: &mut ParamStore<f64>| -> Result<f64> {
                w.get_mut(id).value.data_mut()[e] = x;
                let mut t = Tape::new();
                let v = loss(&mut t, w)?;
                Ok(t.value(v).data()[0])
            };
            let up = at(orig + h, &mut work)?;
            let down = at(orig - h, &mut work)?;
            work.get_mut(id).value.data_mut()[e] = orig;
            report.record(id, e, analytic[e], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
