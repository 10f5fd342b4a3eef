use serde::{Deserialize, Serialize};

use super::measure::Measurement;
use super::MetricsError;

/// Uniform bins over `[lo, hi]`; values outside fall in the end bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Bins {
    pub const fn new(lo: f64, hi: f64, count: usize) -> Self {
        Bins { lo, hi, count }
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.count).map(|i| self.lo + (self.hi - self.lo) * i as f64 / self.count as f64).collect()
    }

    /// Bin of `v`, after snapping it to a 1e-9 grid so that values on a
    /// bin edge (such as an exactly zero rate) land in the same bin after
    /// round-off from rigid transforms.
    pub fn index(&self, v: f64) -> usize {
        let v = (v * 1e9).round() / 1e9;
        let frac = (v - self.lo) / (self.hi - self.lo);
        ((frac * self.count as f64).floor().max(0.0) as usize).min(self.count - 1)
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi && self.count >= 1) {
            return Err(MetricsError::Config(format!("bins [{}, {}] x {} are not strictly increasing", self.lo, self.hi, self.count)));
        }
        Ok(())
    }
}

/// Bin layout per measurement plus the additive smoothing constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramConfig {
    pub alpha: f64,
    /// Indexed by [`Measurement::index`].
    pub bins: Vec<Bins>,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        let bins = Measurement::ALL
            .iter()
            .map(|m| match m {
                Measurement::LinearSpeed => Bins::new(0.0, 30.0, 30),
                Measurement::LinearAccel => Bins::new(-10.0, 10.0, 40),
                Measurement::AngularSpeed => Bins::new(-2.0, 2.0, 40),
                Measurement::AngularAccel => Bins::new(-5.0, 5.0, 40),
                Measurement::DistToNearest => Bins::new(0.0, 50.0, 50),
                Measurement::Ttc => Bins::new(0.0, 10.0, 20),
                Measurement::DistToRoadEdge => Bins::new(-5.0, 5.0, 50),
                Measurement::CollisionFlag | Measurement::OffroadFlag => Bins::new(-0.5, 1.5, 2),
            })
            .collect();
        HistogramConfig { alpha: 1.0, bins }
    }
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.bins.len() != Measurement::ALL.len() {
            return Err(MetricsError::Config(format!("expected {} bin layouts, got {}", Measurement::ALL.len(), self.bins.len())));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(MetricsError::Config("smoothing alpha must be positive".into()));
        }
        self.bins.iter().try_for_each(Bins::validate)
    }

    pub fn bins_of(&self, m: Measurement) -> &Bins {
        &self.bins[m.index()]
    }
}

/// Smoothed bin probabilities of `samples`.
pub fn smoothed_probabilities(samples: &[f64], bins: &Bins, alpha: f64) -> Vec<f64> {
    let mut counts = vec![0usize; bins.count];
    for &s in samples {
        counts[bins.index(s)] += 1;
    }
    let z = samples.len() as f64 + alpha * bins.count as f64;
    counts.into_iter().map(|c| (c as f64 + alpha) / z).collect()
}

/// Likelihood of the ground truth under the smoothed histogram of the
/// simulated samples, relative to a fully concentrated histogram: the
/// geometric mean over GT samples of `p(gt bin) / p_max`, where
/// `p_max = (N + α) / (N + α·B)` is the probability of a bin holding all
/// `N` samples. Equals one exactly when every simulated sample and every GT
/// sample share one bin.
pub fn histogram_score(sim: &[f64], gt: &[f64], bins: &Bins, alpha: f64) -> Result<f64, MetricsError> {
    if gt.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    if sim.is_empty() {
        return Err(MetricsError::NoRollouts);
    }
    let p = smoothed_probabilities(sim, bins, alpha);
    let n = sim.len() as f64;
    let p_max = (n + alpha) / (n + alpha * bins.count as f64);
    let mean_ln = gt.iter().map(|&g| p[bins.index(g)].ln()).sum::<f64>() / gt.len() as f64;
    Ok((mean_ln - p_max.ln()).exp().min(1.0))
}
