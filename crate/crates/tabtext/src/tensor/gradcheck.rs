//! Finite-difference checking for reverse-mode gradients.
//!
//! A candidate function builds a scalar loss from leaf tensors on a provided
//! tape. The checker runs one reverse pass for analytic gradients, then
//! perturbs every input coordinate in both directions and compares against
//! the central difference.

use super::{Tape, Tensor, TensorError, Var};

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Max over all coordinates of
    /// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub max_rel_err: f64,
    /// Input index and flat coordinate where the max occurred.
    pub worst: (usize, usize),
}

/// Compare reverse-mode gradients of `f` at `points` against central
/// differences with step `eps`.
///
/// `f` must be a pure function of the leaf values: it is re-run once for the
/// analytic pass and twice per input coordinate for the numeric pass.
pub fn grad_check<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, TensorError>,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(points)
        .map(|(&l, p)| grads.get_or_zeros(l, p.shape()))
        .collect();

    let eval_loss = |pts: &[Tensor]| -> Result<f64, TensorError> {
        let t = Tape::eval();
        let ls: Vec<Var> = pts.iter().map(|p| t.leaf(p.clone())).collect();
        let out = f(&t, &ls)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for ci in 0..point.len() {
            let orig = point.data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let up = eval_loss(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let down = eval_loss(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ci);
            }
        }
    }
    Ok(report)
}
