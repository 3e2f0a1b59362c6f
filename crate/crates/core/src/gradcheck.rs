//! Central finite-difference verification of analytic gradients.

use std::collections::HashMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input, in input order.
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of a scalar function built by `build`
/// against central differences with the given `step`.
///
/// `build` receives the graph and one input node per tensor in `inputs` and
/// returns the scalar output node. At most `max_elems` elements per input are
/// probed (evenly strided) so large inputs stay cheap.
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    step: f64,
    tol: f64,
    max_elems: Option<usize>,
) -> Result<GradCheckReport>
where
    F: FnOnce(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(id).to_vec())))
        .collect();

    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (k, base) in inputs.iter().enumerate() {
        let n = base.numel();
        let stride = match max_elems {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        let mut feeds = HashMap::new();
        for e in (0..n).step_by(stride) {
            let mut plus = base.clone();
            plus.data_mut()[e] += step;
            feeds.insert(ids[k], plus);
            g.forward(&feeds)?;
            let f_plus = g.value(out).item();

            let mut minus = base.clone();
            minus.data_mut()[e] -= step;
            feeds.insert(ids[k], minus);
            g.forward(&feeds)?;
            let f_minus = g.value(out).item();

            let numeric = (f_plus - f_minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[k].data()[e], numeric));
        }
        feeds.insert(ids[k], base.clone());
        g.forward(&feeds)?;
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e < tol);
    Ok(GradCheckReport { max_rel_error, tol, passed })
}
