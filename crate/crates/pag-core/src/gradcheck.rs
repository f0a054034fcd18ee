//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `x`, returning the worst relative error
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over coordinates.
///
/// For functions containing kinks (ReLU, absolute values) the caller must
/// keep `x` at least ~10*eps away from the kink points.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let loss = f(&mut tape, xid)?;
    tape.backward(loss)?;
    let analytic = match tape.grad(xid) {
        Some(g) => g.clone(),
        None => Tensor::zeros(x.dims()),
    };

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(probe.clone());
        let l = f(&mut t, id)?;
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
