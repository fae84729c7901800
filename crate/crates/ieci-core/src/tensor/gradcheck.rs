//! Numerical gradient verification.
//!
//! Compares the tape's analytic gradients against central finite
//! differences. The builder closure must construct the same graph on
//! every call; it is invoked once for the analytic pass and twice per
//! input coordinate for the numeric pass.

use super::{NodeId, Result, Tape, Tensor};

/// Perturbation step for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative-error threshold under which a gradient is considered correct.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Worst relative error between analytic and central-difference gradients
/// over every coordinate of every parameter.
///
/// The error for a coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check_params<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.get_or_zeros(id, p.shape()))
        .collect();

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        tape.value(loss).scalar_value()
    };

    let mut worst = 0.0_f64;
    let mut scratch = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let orig = p.data()[ci];
            scratch[pi].data_mut()[ci] = orig + eps;
            let up = eval(&scratch)?;
            scratch[pi].data_mut()[ci] = orig - eps;
            let down = eval(&scratch)?;
            scratch[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-parameter convenience wrapper around [`finite_diff_check_params`].
pub fn finite_diff_check<F>(build: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    finite_diff_check_params(
        |tape, ids| build(tape, ids[0]),
        std::slice::from_ref(x),
        eps,
    )
}
