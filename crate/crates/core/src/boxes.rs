//! Axis-aligned boxes `[lb, ub]`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("lower and upper bounds have different lengths ({0} vs {1})")]
    Length(usize, usize),
    #[error("dimension {dim}: lower bound {lb} exceeds upper bound {ub}")]
    Inverted { dim: usize, lb: f64, ub: f64 },
    #[error("dimension {0}: non-finite bound")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBox {
    lb: Vec<f64>,
    ub: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lb: Vec<f64>, ub: Vec<f64>) -> Result<Self, BoxError> {
        if lb.len() != ub.len() {
            return Err(BoxError::Length(lb.len(), ub.len()));
        }
        for (i, (l, u)) in lb.iter().zip(&ub).enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(BoxError::NonFinite(i));
            }
            if l > u {
                return Err(BoxError::Inverted { dim: i, lb: *l, ub: *u });
            }
        }
        Ok(Self { lb, ub })
    }

    pub fn from_center_radius(center: &[f64], radius: &[f64]) -> Result<Self, BoxError> {
        if let Some(i) = radius.iter().position(|r| *r < 0.0) {
            return Err(BoxError::Inverted { dim: i, lb: center[i] - radius[i], ub: center[i] + radius[i] });
        }
        Self::new(
            center.iter().zip(radius).map(|(c, r)| c - r).collect(),
            center.iter().zip(radius).map(|(c, r)| c + r).collect(),
        )
    }

    /// `[lb_i, ub_i]` per dimension.
    pub fn from_intervals(intervals: &[(f64, f64)]) -> Result<Self, BoxError> {
        Self::new(intervals.iter().map(|p| p.0).collect(), intervals.iter().map(|p| p.1).collect())
    }

    pub fn point(x: &[f64]) -> Self {
        Self { lb: x.to_vec(), ub: x.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    pub fn lb(&self) -> &[f64] {
        &self.lb
    }

    pub fn ub(&self) -> &[f64] {
        &self.ub
    }

    pub fn center(&self) -> Vec<f64> {
        self.lb.iter().zip(&self.ub).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn radius(&self) -> Vec<f64> {
        self.lb.iter().zip(&self.ub).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lb.iter().zip(&self.ub).map(|(l, u)| u - l).collect()
    }

    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }

    /// Closed containment with `slack` on every face.
    pub fn contains(&self, x: &[f64], slack: f64) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lb.iter().zip(&self.ub)).all(|(v, (l, u))| *v >= l - slack && *v <= u + slack)
    }

    pub fn contains_box(&self, other: &IntervalBox, slack: f64) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|i| other.lb[i] >= self.lb[i] - slack && other.ub[i] <= self.ub[i] + slack)
    }

    /// Each face pushed outward by `eps`.
    pub fn inflate(&self, eps: f64) -> IntervalBox {
        IntervalBox {
            lb: self.lb.iter().map(|v| v - eps).collect(),
            ub: self.ub.iter().map(|v| v + eps).collect(),
        }
    }

    /// Halves along `dim` at the midpoint; the lower half comes first.
    pub fn bisect(&self, dim: usize) -> (IntervalBox, IntervalBox) {
        let mid = 0.5 * (self.lb[dim] + self.ub[dim]);
        let mut lo = self.clone();
        let mut hi = self.clone();
        lo.ub[dim] = mid;
        hi.lb[dim] = mid;
        (lo, hi)
    }

    /// Uniform sample using `u` in `[0,1)^n`.
    pub fn lerp(&self, u: &[f64]) -> Vec<f64> {
        self.lb.iter().zip(&self.ub).zip(u).map(|((l, h), t)| l + t * (h - l)).collect()
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        self.lb.iter().zip(&self.ub).map(|(l, h)| if h > l { rng.gen_range(*l..*h) } else { *l }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_accessors() {
        let b = IntervalBox::from_center_radius(&[1.0, 0.0], &[0.5, 0.0]).unwrap();
        assert_eq!(b.lb(), &[0.5, 0.0]);
        assert_eq!(b.ub(), &[1.5, 0.0]);
        assert_eq!(b.volume(), 0.0);
        assert!(b.contains(&[1.5, 0.0], 0.0));
        assert!(!b.contains(&[1.6, 0.0], 0.0));
        assert!(matches!(IntervalBox::new(vec![1.0], vec![0.0]), Err(BoxError::Inverted { dim: 0, .. })));
        assert!(matches!(IntervalBox::new(vec![f64::NAN], vec![0.0]), Err(BoxError::NonFinite(0))));
    }

    #[test]
    fn bisect_tiles() {
        let b = IntervalBox::from_intervals(&[(0.0, 1.0), (-1.0, 1.0)]).unwrap();
        let (lo, hi) = b.bisect(1);
        assert_eq!(lo.ub()[1], 0.0);
        assert_eq!(hi.lb()[1], 0.0);
        assert!((lo.volume() + hi.volume() - b.volume()).abs() < 1e-15);
    }
}
