//! Min-max scaling between raw flow counts and the model's `[-1, 1]` range.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::grid::FlowTensor;

/// Value range observed on the training flows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn new(min: f64, max: f64) -> Result<NormStats, TrainError> {
        if !min.is_finite() || !max.is_finite() || max <= min {
            return Err(TrainError::DegenerateStats { min, max });
        }
        Ok(NormStats { min, max })
    }

    /// Affine map taking `[min, max]` onto `[-1, 1]`.
    pub fn apply(&self, x: f64) -> f64 {
        2.0 * (x - self.min) / (self.max - self.min) - 1.0
    }

    /// Inverse of [`NormStats::apply`]; values outside `[-1, 1]` (model
    /// outputs near saturation) map outside the original range.
    pub fn invert(&self, y: f64) -> f64 {
        (y + 1.0) / 2.0 * (self.max - self.min) + self.min
    }

    pub fn apply_tensor(&self, t: &FlowTensor) -> FlowTensor {
        t.map(|v| self.apply(v))
    }

    pub fn invert_tensor(&self, t: &FlowTensor) -> FlowTensor {
        t.map(|v| self.invert(v))
    }
}

/// Scans flow tensors for their value range.
pub fn minmax_fit<'a>(flows: impl IntoIterator<Item = &'a FlowTensor>) -> Result<NormStats, TrainError> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for tensor in flows {
        for &v in tensor.data() {
            min = min.min(v);
            max = max.max(v);
        }
    }
    NormStats::new(min, max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn endpoints_map_to_unit_interval() {
        let stats = NormStats::new(2.0, 10.0).unwrap();
        assert_eq!(stats.apply(2.0), -1.0);
        assert_eq!(stats.apply(10.0), 1.0);
    }

    #[test]
    fn round_trip_error_below_1e9th() {
        let stats = NormStats::new(0.0, 371.0).unwrap();
        let mut rng = SplitMix64::new(5);
        for _ in 0..1000 {
            let x = rng.uniform(0.0, 371.0);
            assert!((stats.invert(stats.apply(x)) - x).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_matches_linear_scan() {
        let mut rng = SplitMix64::new(6);
        let tensors: Vec<FlowTensor> = (0..4)
            .map(|_| {
                let data: Vec<f64> = (0..8).map(|_| rng.uniform(-3.0, 40.0).round()).collect();
                FlowTensor::from_data(2, 2, data).unwrap()
            })
            .collect();
        let stats = minmax_fit(tensors.iter()).unwrap();
        let all: Vec<f64> = tensors.iter().flat_map(|t| t.data().to_vec()).collect();
        let want_min = all.iter().copied().fold(f64::INFINITY, f64::min);
        let want_max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(stats.min, want_min);
        assert_eq!(stats.max, want_max);
    }

    #[test]
    fn degenerate_range_is_rejected() {
        assert!(NormStats::new(3.0, 3.0).is_err());
        let t = FlowTensor::zeros(2, 2);
        assert!(minmax_fit([&t]).is_err());
    }
}
