use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in state space. Bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::ShapeMismatch(format!(
                "box bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::Invalid(format!("box with lo > hi: {lo:?} / {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lo: vec![f64::NEG_INFINITY; dim],
            hi: vec![f64::INFINITY; dim],
        }
    }

    pub fn point(p: &[f64]) -> Self {
        Self {
            lo: p.to_vec(),
            hi: p.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    /// True when the closed ball of the given radius around `x` lies in the box.
    pub fn contains_ball(&self, x: &[f64], radius: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| *a <= *v - radius && *v + radius <= *b)
    }

    /// Concatenation `self × other`.
    pub fn product(&self, other: &StateBox) -> StateBox {
        let mut lo = self.lo.clone();
        lo.extend_from_slice(&other.lo);
        let mut hi = self.hi.clone();
        hi.extend_from_slice(&other.hi);
        StateBox { lo, hi }
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> StateBox {
        StateBox {
            lo: self.lo[range.clone()].to_vec(),
            hi: self.hi[range].to_vec(),
        }
    }

    /// Componentwise intersection; `None` when empty or of different dimension.
    pub fn intersect(&self, other: &StateBox) -> Option<StateBox> {
        if self.dim() != other.dim() {
            return None;
        }
        let lo: Vec<f64> = self.lo.iter().zip(&other.lo).map(|(a, b)| a.max(*b)).collect();
        let hi: Vec<f64> = self.hi.iter().zip(&other.hi).map(|(a, b)| a.min(*b)).collect();
        StateBox::new(lo, hi).ok()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (a, b)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*a, *b);
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
    }

    /// All corner points. Degenerate axes contribute a single coordinate.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::with_capacity(self.dim())];
        for (a, b) in self.lo.iter().zip(&self.hi) {
            let choices: &[f64] = if a == b { &[*a][..] } else { &[*a, *b][..] };
            let choices = choices.to_vec();
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    choices.iter().map(move |c| {
                        let mut p = prefix.clone();
                        p.push(*c);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertices_skip_degenerate_axes() {
        let b = StateBox::new(vec![0.0, 1.0, -1.0], vec![2.0, 1.0, 1.0]).unwrap();
        let v = b.vertices();
        assert_eq!(v.len(), 4);
        assert!(v.contains(&vec![2.0, 1.0, -1.0]));
    }

    #[test]
    fn ball_containment() {
        let b = StateBox::new(vec![-1.0], vec![1.0]).unwrap();
        assert!(b.contains_ball(&[0.5], 0.5));
        assert!(!b.contains_ball(&[0.5], 0.6));
        assert!(StateBox::unbounded(2).contains_ball(&[1e9, -1e9], 1.0));
    }

    #[test]
    fn rejects_inverted_bounds() {
        assert!(StateBox::new(vec![1.0], vec![0.0]).is_err());
        assert!(StateBox::new(vec![1.0], vec![0.0, 1.0]).is_err());
    }
}
