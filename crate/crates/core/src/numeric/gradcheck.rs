use super::buffer::NdBuffer;
use super::tape::{Tape, Var};
use crate::error::{HicError, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` attaining the maximum.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the tape gradient of a scalar function against central
/// differences at step [`FD_STEP`].
///
/// `f` receives a fresh tape and the parameter handles in the order of
/// `params`, and must return a scalar. The error of one coordinate is
/// `|analytic − numeric| / max(1, |numeric|)`; the report carries the
/// maximum over all coordinates of all parameters.
pub fn grad_check<F>(f: F, params: &[NdBuffer]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[NdBuffer]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work: Vec<NdBuffer> = params.to_vec();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic.data()[ci] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (pi, ci);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if value.len() != 1 {
        return Err(HicError::dim(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.scalar_value())
}
