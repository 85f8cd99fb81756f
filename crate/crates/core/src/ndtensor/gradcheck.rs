//! Central finite-difference gradient checking in double precision.

use super::graph::{Graph, Value};
use super::tensor::Tensor;
use crate::error::Result;

/// Relative error `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero gradients from amplifying round-off.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare the analytic gradient of scalar `f(inputs)` against central
/// differences with step `h`, for every element of every input.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Value]) -> Result<Value>,
{
    let mut g = Graph::new();
    let vals: Vec<Value> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vals)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> =
        vals.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)))).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vals: Vec<Value> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vals)?;
        Ok(g.scalar(out))
    };

    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    let mut xs = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let x0 = t.data()[ei];
            xs[ti].data_mut()[ei] = x0 + h;
            let fp = eval(&xs)?;
            xs[ti].data_mut()[ei] = x0 - h;
            let fm = eval(&xs)?;
            xs[ti].data_mut()[ei] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic[ti].data()[ei], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
