//! L-infinity threat-model geometry: feasibility, projection, clipping.
//!
//! The feasible set for an original image `x` is the intersection of the
//! L-infinity ball of radius `epsilon` around `x` with the `[0,1]` box.
//! Because both sets are axis-aligned, projecting onto the intersection is
//! a single coordinate-wise clamp, and clamping to the ball first or the
//! box first gives the same result.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub epsilon: f64,
    pub box_low: f64,
    pub box_high: f64,
}

impl ThreatModel {
    pub fn new(epsilon: f64) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        ThreatModel {
            epsilon,
            box_low: 0.0,
            box_high: 1.0,
        }
    }

    /// Same box, enlarged radius. Used by the outside-inside stage.
    pub fn scaled(&self, factor: f64) -> Self {
        ThreatModel {
            epsilon: self.epsilon * factor,
            ..*self
        }
    }

    /// Feasible interval for one coordinate of the original image.
    #[inline]
    pub fn bounds(&self, orig: f64) -> (f64, f64) {
        (
            (orig - self.epsilon).max(self.box_low),
            (orig + self.epsilon).min(self.box_high),
        )
    }

    /// Clamp a single candidate row to the feasible set around `orig`.
    pub fn project_row(&self, candidate: &mut [f64], orig: ArrayView1<f64>) {
        for (c, &o) in candidate.iter_mut().zip(orig.iter()) {
            let (lo, hi) = self.bounds(o);
            *c = c.clamp(lo, hi);
        }
    }

    /// Clamp every row of `candidates` to the feasible set around the
    /// matching row of `orig`. Idempotent.
    pub fn project(&self, candidates: &ArrayView2<f64>, orig: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(candidates.dim(), orig.dim(), "shape mismatch");
        let mut out = candidates.to_owned();
        for (mut row, orow) in out.rows_mut().into_iter().zip(orig.rows()) {
            self.project_row(row.as_slice_mut().unwrap(), orow);
        }
        out
    }

    /// Per-row feasibility check with tolerance.
    pub fn is_feasible_row(&self, candidate: ArrayView1<f64>, orig: ArrayView1<f64>, tol: f64) -> bool {
        candidate.iter().zip(orig.iter()).all(|(&c, &o)| {
            (c - o).abs() <= self.epsilon + tol
                && c >= self.box_low - tol
                && c <= self.box_high + tol
        })
    }

    pub fn is_feasible(
        &self,
        candidates: &ArrayView2<f64>,
        orig: &ArrayView2<f64>,
        tol: f64,
    ) -> Vec<bool> {
        assert_eq!(candidates.dim(), orig.dim(), "shape mismatch");
        candidates
            .rows()
            .into_iter()
            .zip(orig.rows())
            .map(|(c, o)| self.is_feasible_row(c, o, tol))
            .collect()
    }
}

pub const FEASIBILITY_TOL: f64 = 1e-6;
