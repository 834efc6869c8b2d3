//! Central finite-difference oracle for tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Upper bound on coordinates probed per input; `None` probes all of them.
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
}

/// Evenly spaced coordinates, capped at `max`.
pub fn probe_coords(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < numel => (0..m).map(|i| i * numel / m + (numel / m) / 2).collect(),
        _ => (0..numel).collect(),
    }
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::Contract(format!("grad check needs a scalar function, got {:?}", t.shape())));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(TensorError::Numeric("function value is not finite".into()));
    }
    Ok(y)
}

impl GradCheck {
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)?;
        tape.backward(out)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            scalar_of(&tape, out)
        };

        let mut work = inputs.to_vec();
        let mut per_input = Vec::with_capacity(inputs.len());
        let mut coords_checked = 0;
        for i in 0..inputs.len() {
            let mut worst = 0.0f64;
            for c in probe_coords(inputs[i].numel(), self.max_coords) {
                let orig = work[i].data()[c];
                work[i].data_mut()[c] = orig + self.eps;
                let plus = eval(&work)?;
                work[i].data_mut()[c] = orig - self.eps;
                let minus = eval(&work)?;
                work[i].data_mut()[c] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                worst = worst.max(relative_error(analytic[i].data()[c], numeric));
                coords_checked += 1;
            }
            per_input.push(worst);
        }
        Ok(GradReport {
            max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
            per_input,
            coords_checked,
        })
    }
}

/// Max relative error between tape and central-difference gradients of `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let check = GradCheck { eps, max_coords: None };
    Ok(check.run(std::slice::from_ref(x), |tape, vars| f(tape, vars[0]))?.max_rel_error)
}
