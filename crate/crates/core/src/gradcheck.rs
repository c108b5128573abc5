//! Central finite-difference gradient checking.
//!
//! The numeric side rebuilds the forward pass from scratch for every probe,
//! so it exercises exactly the same code path a fresh evaluation would, while
//! the analytic side comes from one backward sweep.

use crate::error::TensorError;
use crate::tensor::{TResult, Tape, Tensor, Var};

/// Probe step for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all parameter elements.
    pub max_rel_err: f64,
    /// (param index, element index) where the max occurred.
    pub worst: (usize, usize),
}

/// Relative error with a floor so finite-difference noise on near-zero
/// gradients does not dominate.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Check the gradient of `build` (a scalar-loss graph over the given
/// parameter leaves) against central finite differences.
pub fn check<F>(build: F, params: &[Tensor], step: f64) -> TResult<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> TResult<Var>,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::Contract("gradcheck requires a scalar loss".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let eval = |probe: &[Tensor]| -> TResult<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0) };
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let orig = p.data()[ei];
            probe[pi].data_mut()[ei] = orig + step;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ei] = orig - step;
            let down = eval(&probe)?;
            probe[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(analytic[pi].data()[ei], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (pi, ei);
            }
        }
    }
    Ok(report)
}
