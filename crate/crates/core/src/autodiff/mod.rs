//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records the forward computation; [`Tape::backward`] produces
//! gradients for every parameter in a [`ParamStore`]. All ops are generic
//! over [`Scalar`] so the same model code runs in `f32` for training and in
//! `f64` for finite-difference checks via [`grad_check`].

mod tape;
mod tensor;

pub use tape::{Grads, ParamId, ParamStore, Tape, Var};
pub use tensor::{softmax_in_place, Scalar, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Gradient magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    /// Run the function in training mode (dropout active, fixed masks).
    pub train: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, floor: 1e-5, max_coords_per_param: None, train: false, seed: 0 }
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and element index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub analytic: Grads<f64>,
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences, coordinate by coordinate.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(params: &ParamStore<f64>, opts: GradCheckOptions, f: F) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, AdError>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64, AdError> {
        let mut tape = Tape::new(p, opts.train, 0.1, opts.seed);
        let out = f(&mut tape)?;
        scalar_of(&tape, out)
    };
    let analytic = {
        let mut tape = Tape::new(params, opts.train, 0.1, opts.seed);
        let out = f(&mut tape)?;
        scalar_of(&tape, out)?;
        tape.backward(out)?
    };
    let mut work = params.clone();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut coords_checked = 0;
    for p in 0..params.len() {
        let id = ParamId(p);
        let n = params.get(id).data.len();
        let stride = match opts.max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = params.get(id).data[i];
            work.get_mut(id).data[i] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).data[i] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id).data[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            coords_checked += 1;
            if (rel > max_rel_error || worst.is_none())
                && rel >= max_rel_error {
                    max_rel_error = rel;
                    worst = Some((params.name(id).to_string(), i));
                }
        }
    }
    Ok(GradCheckReport { max_rel_error, worst, coords_checked, analytic })
}

fn scalar_of(tape: &Tape<'_, f64>, v: Var) -> Result<f64, AdError> {
    let t = tape.value(v);
    if t.shape() != (1, 1) {
        return Err(AdError::Shape { op: "grad_check", detail: format!("function output shape {:?}", t.shape()) });
    }
    Ok(t.data[0])
}
