//! Central finite differences as an independent oracle for [`Tape::backward`].

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Below this magnitude relative errors are measured against the floor
/// instead of the gradient itself, so entries that are zero analytically do
/// not turn round-off into an unbounded ratio.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub coordinates: usize,
    /// Largest analytic gradient magnitude.
    pub max_abs_grad: f64,
}

impl GradCheckReport {
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let mut report = GradCheckReport {
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst_index: 0,
            coordinates: analytic.len(),
            max_abs_grad: 0.0,
        };
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(REL_ERR_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = i;
            }
        }
        report
    }

    /// Combines reports over several tensors into one worst case.
    pub fn merge(self, other: Self) -> Self {
        let (max_rel_err, worst_index) = if other.max_rel_err > self.max_rel_err {
            (other.max_rel_err, self.coordinates + other.worst_index)
        } else {
            (self.max_rel_err, self.worst_index)
        };
        GradCheckReport {
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            max_rel_err,
            worst_index,
            coordinates: self.coordinates + other.coordinates,
            max_abs_grad: self.max_abs_grad.max(other.max_abs_grad),
        }
    }

    /// Worst absolute error over the largest gradient magnitude. Suited to
    /// single precision, where per-coordinate ratios on near-zero entries
    /// are dominated by round-off in the differences.
    pub fn scaled_err(&self) -> f64 {
        self.max_abs_err / self.max_abs_grad.max(REL_ERR_FLOOR)
    }
}

fn eval_scalar<F, G>(f: &G, x: &Tensor<F>) -> Result<f64>
where
    F: Scalar,
    G: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got {:?}", value.shape())));
    }
    let v = value.data()[0].f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("grad_check evaluation"))
    }
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate of `x`.
pub fn finite_difference_grad<F, G>(f: &G, x: &Tensor<F>, h: f64) -> Result<Vec<f64>>
where
    F: Scalar,
    G: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract("finite differences need h > 0".into()));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = F::of(orig.f64() + h);
        let plus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = F::of(orig.f64() - h);
        let minus = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// scalar node.
pub fn grad_check<F, G>(f: G, x: &Tensor<F>, h: f64) -> Result<GradCheckReport>
where
    F: Scalar,
    G: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.get(leaf).to_f64_vec();
    let numeric = finite_difference_grad(&f, x, h)?;
    Ok(GradCheckReport::compare(&analytic, &numeric))
}
