//! Central-difference verification of hand-written backward passes.
//!
//! Every differentiable operation in this crate pairs a forward with a
//! vector-Jacobian product. [`check_gradient`] probes a `DiffOp` wrapper
//! around such a pair: it compares the analytic VJP against central
//! differences of `<g, f(x)>` entry by entry and reports the worst relative
//! error. Checks run in `f64`.

use crate::rng::Rng;
use crate::tensor::{dot, Element, Tensor};
use crate::{Error, Result};

type ForwardFn<'a, T> = dyn Fn(&Tensor<T>) -> Tensor<T> + 'a;
type VjpFn<'a, T> = dyn Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T> + 'a;

/// A differentiable operation: a forward map and (optionally) its registered
/// vector-Jacobian product `(x, grad_y) -> grad_x`.
pub struct DiffOp<'a, T: Element> {
    pub name: String,
    forward: Box<ForwardFn<'a, T>>,
    vjp: Option<Box<VjpFn<'a, T>>>,
}

impl<'a, T: Element> DiffOp<'a, T> {
    pub fn new(
        name: impl Into<String>,
        forward: impl Fn(&Tensor<T>) -> Tensor<T> + 'a,
        vjp: impl Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T> + 'a,
    ) -> Self {
        DiffOp {
            name: name.into(),
            forward: Box::new(forward),
            vjp: Some(Box::new(vjp)),
        }
    }

    /// An op with no registered backward; checking it is a contract error.
    pub fn forward_only(name: impl Into<String>, forward: impl Fn(&Tensor<T>) -> Tensor<T> + 'a) -> Self {
        DiffOp {
            name: name.into(),
            forward: Box::new(forward),
            vjp: None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        (self.forward)(x)
    }
}

/// Max relative error between the analytic gradient of `<g, op(x)>` and its
/// central-difference estimate, over all input entries:
/// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
///
/// The cotangent `g` is a fixed pseudo-random vector derived from the op
/// name, so repeated checks are reproducible.
pub fn check_gradient(op: &DiffOp<'_, f64>, x: &Tensor<f64>, eps: f64) -> Result<f64> {
    let vjp = op.vjp.as_ref().ok_or_else(|| {
        Error::contract(format!("operation `{}` has no registered backward", op.name))
    })?;
    let y = (op.forward)(x);
    let mut rng = Rng::from_label(0xC0_7A_46_E7, &op.name);
    let g = rng.tensor_uniform::<f64>(y.shape(), 0.5, 1.5);
    // Keep <g, f(x)> small so central-difference roundoff stays below the
    // 1e-8 denominator floor at entries whose true gradient is ~0. Relative
    // errors at healthy entries are invariant under this scaling.
    let magnitude: f64 = g
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a * b).abs())
        .sum();
    let g = g.scale(1e-3 / magnitude.max(1e-3));
    let analytic = vjp(x, &g);
    if analytic.shape() != x.shape() {
        return Err(Error::contract(format!(
            "vjp of `{}` returned shape {:?} for input {:?}",
            op.name,
            analytic.shape(),
            x.shape()
        )));
    }
    let mut max_rel: f64 = 0.0;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + eps;
        let fp = dot(g.data(), (op.forward)(&xp).data());
        xp.data_mut()[i] = orig - eps;
        let fm = dot(g.data(), (op.forward)(&xp).data());
        xp.data_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
