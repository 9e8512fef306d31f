//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Compare the reverse-mode gradient of a scalar graph against central
/// finite differences at `point`.
///
/// `build` receives a fresh graph and one leaf per tensor in `point` and
/// returns the scalar output. The result is the maximum over all
/// coordinates of `|g_ad - g_fd| / max(1, |g_fd|)`.
pub fn gradient_check<F>(build: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let eval = |pt: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = pt.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves)?;
    let f0 = g.scalar(out);
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("function value {f0}")));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.wrt(v)).collect();
    if analytic.iter().any(|t| t.iter().any(|e| !e.is_finite())) {
        return Err(Error::NonFinite("reverse-mode gradient".into()));
    }

    let mut work: Vec<Tensor> = point.to_vec();
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let orig = work[k][[r, c]];
            work[k][[r, c]] = orig + h;
            let plus = eval(&work)?;
            work[k][[r, c]] = orig - h;
            let minus = eval(&work)?;
            work[k][[r, c]] = orig;
            let fd = (plus - minus) / (2.0 * h);
            if !fd.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference at tensor {k} [{r},{c}]"
                )));
            }
            let err = (grad[[r, c]] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
