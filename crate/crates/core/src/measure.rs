use nalgebra::DVector;

/// The law argument `mu` passed to the game coefficients.
///
/// Coefficient families that depend on the law only through its first two
/// moments can be fed the cheap [`MeasureArg::Moments`] form; particle
/// methods pass their point clouds directly.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasureArg {
    /// Weighted point cloud. Points are stored row-major, `dim` values each;
    /// `weights == None` means uniform weights.
    Empirical {
        dim: usize,
        points: Vec<f64>,
        weights: Option<Vec<f64>>,
    },
    /// Mean vector and second moment `E|X|^2`.
    Moments {
        mean: DVector<f64>,
        second_moment: f64,
    },
}

impl MeasureArg {
    pub fn dirac(x: &DVector<f64>) -> Self {
        MeasureArg::Moments {
            mean: x.clone(),
            second_moment: x.norm_squared(),
        }
    }

    pub fn uniform(dim: usize, points: Vec<f64>) -> Self {
        assert!(dim > 0 && points.len() % dim == 0 && !points.is_empty());
        MeasureArg::Empirical {
            dim,
            points,
            weights: None,
        }
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Self {
        assert_eq!(points.len(), dim * weights.len());
        MeasureArg::Empirical {
            dim,
            points,
            weights: Some(weights),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MeasureArg::Empirical { dim, .. } => *dim,
            MeasureArg::Moments { mean, .. } => mean.len(),
        }
    }

    /// Number of atoms (`None` for the moment form).
    pub fn atoms(&self) -> Option<usize> {
        match self {
            MeasureArg::Empirical { dim, points, .. } => Some(points.len() / dim),
            MeasureArg::Moments { .. } => None,
        }
    }

    fn weight(&self, k: usize) -> f64 {
        match self {
            MeasureArg::Empirical {
                weights: Some(w), ..
            } => w[k],
            MeasureArg::Empirical { dim, points, .. } => (*dim as f64) / points.len() as f64,
            MeasureArg::Moments { .. } => unreachable!(),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            MeasureArg::Moments { mean, .. } => mean.clone(),
            MeasureArg::Empirical { dim, points, .. } => {
                let mut m = DVector::zeros(*dim);
                for (k, chunk) in points.chunks_exact(*dim).enumerate() {
                    let w = self.weight(k);
                    for (mi, &p) in m.iter_mut().zip(chunk) {
                        *mi += w * p;
                    }
                }
                m
            }
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            MeasureArg::Moments { second_moment, .. } => *second_moment,
            MeasureArg::Empirical { dim, points, .. } => points
                .chunks_exact(*dim)
                .enumerate()
                .map(|(k, c)| self.weight(k) * c.iter().map(|v| v * v).sum::<f64>())
                .sum(),
        }
    }

    /// Total variance `E|X - m|^2`.
    pub fn variance(&self) -> f64 {
        (self.second_moment() - self.mean().norm_squared()).max(0.0)
    }

    /// Checks nonnegative weights summing to one and a finite second moment.
    pub fn is_valid(&self) -> bool {
        match self {
            MeasureArg::Empirical {
                weights: Some(w), ..
            } => {
                w.iter().all(|&v| v >= 0.0)
                    && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-12
                    && self.second_moment().is_finite()
            }
            _ => self.second_moment().is_finite(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_point_clouds() {
        let m = MeasureArg::uniform(1, vec![1.0; 5]);
        assert_eq!(m.mean()[0], 1.0);
        assert_eq!(m.variance(), 0.0);
        let m = MeasureArg::uniform(1, vec![0.0, 2.0]);
        assert_eq!(m.mean()[0], 1.0);
        assert_eq!(m.second_moment(), 2.0);
        let w = MeasureArg::weighted(1, vec![0.0, 4.0], vec![0.75, 0.25]);
        assert_eq!(w.mean()[0], 1.0);
        assert!(w.is_valid());
        assert!(!MeasureArg::weighted(1, vec![0.0, 4.0], vec![0.7, 0.2]).is_valid());
    }
}
