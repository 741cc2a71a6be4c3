//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error. Below this gradient magnitude
/// the comparison is effectively absolute.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over every checked coordinate.
    pub max_rel_err: f64,
    /// Per input; `None` for inputs that do not require gradients.
    pub per_input: Vec<Option<f64>>,
    pub checked: usize,
}

/// One input of the checked function.
#[derive(Clone, Debug)]
pub struct CheckInput {
    pub value: Tensor<f64>,
    pub requires_grad: bool,
}

impl CheckInput {
    pub fn grad(value: Tensor<f64>) -> Self {
        CheckInput {
            value,
            requires_grad: true,
        }
    }

    pub fn fixed(value: Tensor<f64>) -> Self {
        CheckInput {
            value,
            requires_grad: false,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward()` against central differences of step `h` on every
/// coordinate of every input that requires gradients. `max_coords` caps the
/// coordinates checked per input (evenly strided) for large parameter sets.
///
/// Only reports; never asserts.
pub fn grad_check<F>(
    f: F,
    inputs: &[CheckInput],
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|v| g.constant(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|inp| g.leaf(inp.value.clone(), inp.requires_grad))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|i| i.value.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        per_input: Vec::with_capacity(inputs.len()),
        checked: 0,
    };
    for (idx, inp) in inputs.iter().enumerate() {
        if !inp.requires_grad {
            report.per_input.push(None);
            continue;
        }
        let n = inp.value.numel();
        let analytic = grads
            .get(vars[idx])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let step = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut worst: f64 = 0.0;
        for j in (0..n).step_by(step) {
            let orig = inp.value.data()[j];
            values[idx] = with_element(&inp.value, j, orig + h);
            let plus = eval(&values)?;
            values[idx] = with_element(&inp.value, j, orig - h);
            let minus = eval(&values)?;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[j], numeric));
            report.checked += 1;
        }
        values[idx] = inp.value.clone();
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_input.push(Some(worst));
    }
    Ok(report)
}

fn with_element(t: &Tensor<f64>, j: usize, v: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[j] = v;
    Tensor::from_parts(t.shape().to_vec(), data)
}
