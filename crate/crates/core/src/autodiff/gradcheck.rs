//! Central-difference verification of recorded gradients.

use std::error::Error;

use super::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BoxError = Box<dyn Error + Send + Sync>;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Gradients smaller than this are compared on an absolute scale of
    /// `tolerance * floor`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Worst coordinate of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Coordinates whose relative error exceeds the tolerance.
    pub failing_coords: Vec<usize>,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.failing_coords.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub options_tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradCheckEntry::passed)
    }

    /// Indices of parameters with at least one failing coordinate.
    pub fn failing_params(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| !e.passed())
            .map(|e| e.param)
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("objective failed: {0}")]
    Objective(BoxError),
    #[error("objective is not finite when parameter {param} coordinate {coord} is perturbed")]
    NonFinite { param: usize, coord: usize },
    #[error("objective returned a non-scalar value")]
    NotScalar,
    #[error("objective failed when parameter {param} coordinate {coord} is perturbed: {source}")]
    Perturbed {
        param: usize,
        coord: usize,
        source: Box<GradCheckError>,
    },
}

fn evaluate<T, F, E>(f: &mut F, params: &[Tensor<T>]) -> Result<f64, GradCheckError>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var, E>,
    E: Into<BoxError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let root = f(&mut tape, &vars).map_err(|e| GradCheckError::Objective(e.into()))?;
    let v = tape.value(root);
    if v.numel() != 1 {
        return Err(GradCheckError::NotScalar);
    }
    Ok(v.item().as_f64())
}

/// Compares the tape gradient of `f` against central differences for every
/// coordinate of every parameter.
///
/// `f` records a scalar objective on the given tape from the parameter
/// variables. It is called once with trainable leaves for the analytic
/// gradient and twice per coordinate with constant leaves.
pub fn finite_diff_check<T, F, E>(
    mut f: F,
    params: &[Tensor<T>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var, E>,
    E: Into<BoxError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars).map_err(|e| GradCheckError::Objective(e.into()))?;
    if tape.value(root).numel() != 1 {
        return Err(GradCheckError::NotScalar);
    }
    let grads = tape
        .backward(root)
        .map_err(|e| GradCheckError::Objective(e.into()))?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let h = T::of(opts.step);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let mut entry = GradCheckEntry {
            param: pi,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_error: 0.0,
            failing_coords: Vec::new(),
        };
        for ci in 0..param.numel() {
            let x0 = param.data()[ci];
            work[pi].data_mut()[ci] = x0 + h;
            let up = evaluate(&mut f, &work);
            work[pi].data_mut()[ci] = x0 - h;
            let down = evaluate(&mut f, &work);
            work[pi].data_mut()[ci] = x0;
            let at = |e| GradCheckError::Perturbed {
                param: pi,
                coord: ci,
                source: Box::new(e),
            };
            let (up, down) = (up.map_err(at)?, down.map_err(at)?);
            if !up.is_finite() || !down.is_finite() {
                return Err(GradCheckError::NonFinite {
                    param: pi,
                    coord: ci,
                });
            }
            // Use the realised step so the quotient matches what was evaluated.
            let span = ((x0 + h) - (x0 - h)).as_f64();
            let numeric = (up - down) / span;
            let a = analytic[pi].data()[ci].as_f64();
            let scale = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / scale;
            if rel > opts.tolerance {
                entry.failing_coords.push(ci);
            }
            if rel >= entry.rel_error {
                entry.worst_coord = ci;
                entry.analytic = a;
                entry.numeric = numeric;
                entry.rel_error = rel;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport {
        entries,
        options_tolerance: opts.tolerance,
    })
}
