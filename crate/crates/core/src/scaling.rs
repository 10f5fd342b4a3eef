//! Power-law fits of loss against model or data size: ordinary least squares
//! on `(ln x, ln loss)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScalingError {
    #[error("need at least two distinct x values, got {0}")]
    TooFewPoints(usize),
    #[error("point {index}: x and loss must be finite and positive (x = {x}, loss = {loss})")]
    NonPositive { index: usize, x: f64, loss: f64 },
    #[error("line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub x: f64,
    pub loss: f64,
}

/// `ln loss = beta · ln x + alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub beta: f64,
    pub alpha: f64,
    pub r2: f64,
}

/// Least-squares line through `(u, v)` pairs: `(slope, intercept, r²)`.
/// `None` when fewer than two distinct `u` values.
pub fn fit_line(u: &[f64], v: &[f64]) -> Option<(f64, f64, f64)> {
    let n = u.len() as f64;
    if u.len() < 2 {
        return None;
    }
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let suu: f64 = u.iter().map(|a| (a - mu) * (a - mu)).sum();
    if suu <= 0.0 {
        return None;
    }
    let suv: f64 = u.iter().zip(v).map(|(a, b)| (a - mu) * (b - mv)).sum();
    let svv: f64 = v.iter().map(|b| (b - mv) * (b - mv)).sum();
    let slope = suv / suu;
    let intercept = mv - slope * mu;
    let r2 = if svv <= 0.0 { 1.0 } else { (suv * suv / (suu * svv)).clamp(0.0, 1.0) };
    Some((slope, intercept, r2))
}

pub fn fit_power_law(points: &[ScalingPoint]) -> Result<PowerLawFit, ScalingError> {
    for (index, p) in points.iter().enumerate() {
        if !(p.x.is_finite() && p.x > 0.0 && p.loss.is_finite() && p.loss > 0.0) {
            return Err(ScalingError::NonPositive { index, x: p.x, loss: p.loss });
        }
    }
    let u: Vec<f64> = points.iter().map(|p| p.x.ln()).collect();
    let v: Vec<f64> = points.iter().map(|p| p.loss.ln()).collect();
    let distinct = {
        let mut xs: Vec<f64> = points.iter().map(|p| p.x).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs.len()
    };
    let (beta, alpha, r2) = fit_line(&u, &v).ok_or(ScalingError::TooFewPoints(distinct))?;
    Ok(PowerLawFit { beta, alpha, r2 })
}

pub fn predict_loss(fit: &PowerLawFit, x: f64) -> f64 {
    (fit.alpha + fit.beta * x.ln()).exp()
}

/// Parses `x,loss` rows; a non-numeric first line is taken as a header.
pub fn parse_points_csv(text: &str) -> Result<Vec<ScalingPoint>, ScalingError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = (cols.len() == 2).then(|| (cols[0].parse::<f64>(), cols[1].parse::<f64>()));
        match parsed {
            Some((Ok(x), Ok(loss))) => out.push(ScalingPoint { x, loss }),
            _ if i == 0 => continue,
            _ => return Err(ScalingError::Csv { line: i + 1, reason: format!("expected 'x,loss', got '{line}'") }),
        }
    }
    Ok(out)
}

/// Fitted curve sampled at `n` log-spaced points spanning the data range.
pub fn fitted_curve_csv(fit: &PowerLawFit, points: &[ScalingPoint], n: usize) -> String {
    let mut s = String::from("x,loss_fit\n");
    let lo = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.x).fold(0.0, f64::max);
    if !(lo.is_finite() && hi > 0.0) || n == 0 {
        return s;
    }
    for i in 0..n {
        let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        let x = match i {
            0 => lo,
            _ if i + 1 == n => hi,
            _ => (lo.ln() + frac * (hi.ln() - lo.ln())).exp(),
        };
        let _ = writeln!(s, "{x},{}", predict_loss(fit, x));
    }
    s
}
