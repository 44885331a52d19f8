//! Ground-truth robustness checks for tiny models, used to validate the
//! attack pipelines: an exact oracle for linear classifiers and a dense
//! grid search for low-dimensional models of any architecture.

use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::loss::margin_value;
use crate::model::{argmax, DifferentiableModel, ImageBatch};
use crate::threat::ThreatModel;

#[derive(Debug, Clone, PartialEq)]
pub enum RobustnessVerdict {
    /// A feasible misclassified point exists; the witness is one such point.
    Attackable { witness: Vec<f64> },
    Robust,
}

impl RobustnessVerdict {
    pub fn is_attackable(&self) -> bool {
        matches!(self, RobustnessVerdict::Attackable { .. })
    }
}

/// Exact robustness decision for a linear classifier under the L-inf ball
/// intersected with the value box.
///
/// For each wrong class j the margin z_j - z_y = (w_j - w_y) . x + (b_j - b_y)
/// is linear in x, so its maximum over the feasible rectangle is attained
/// coordinate-wise at whichever bound matches the coefficient sign. The
/// sample is attackable iff some wrong class attains a strictly positive
/// margin there (argmax tie-breaking picks the lower index, so a tie with
/// the true class only misclassifies when j < y; a strictly positive margin
/// is sufficient either way).
pub fn linear_oracle(
    model: &DifferentiableModel,
    x: ArrayView1<f64>,
    y: usize,
    tm: &ThreatModel,
) -> Result<RobustnessVerdict> {
    let (w, b) = match model {
        DifferentiableModel::Linear { w, b } => (w, b),
        _ => {
            return Err(Error::Config(
                "exact oracle only applies to linear models".into(),
            ))
        }
    };
    let (lo, hi) = bound_vectors(tm, x);
    let c = w.nrows();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for j in 0..c {
        if j == y {
            continue;
        }
        let mut margin = (b[j] - b[y]) as f64;
        let mut point = vec![0.0; x.len()];
        for k in 0..x.len() {
            let coef = (w[[j, k]] - w[[y, k]]) as f64;
            let v = if coef >= 0.0 { hi[k] } else { lo[k] };
            margin += coef * v;
            point[k] = v;
        }
        if best.as_ref().map_or(true, |(m, _)| margin > *m) {
            best = Some((margin, point));
        }
    }
    match best {
        Some((m, witness)) if m > 0.0 => Ok(RobustnessVerdict::Attackable { witness }),
        _ => Ok(RobustnessVerdict::Robust),
    }
}

fn bound_vectors(tm: &ThreatModel, x: ArrayView1<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![0.0; x.len()];
    let mut hi = vec![0.0; x.len()];
    for k in 0..x.len() {
        let (l, h) = tm.bounds(x[k]);
        lo[k] = l;
        hi[k] = h;
    }
    (lo, hi)
}

pub const GRID_MAX_DIM: usize = 3;
pub const GRID_DEFAULT_CAP: usize = 2_000_000;

/// Brute-force robustness check on a dense axis-aligned grid over the
/// feasible rectangle. Only a lower bound on attackability (a found witness
/// is genuine; a miss is not a proof of robustness), which is what the
/// false-negative measurements need.
pub fn grid_oracle(
    model: &DifferentiableModel,
    x: ArrayView1<f64>,
    y: usize,
    tm: &ThreatModel,
    resolution: usize,
    point_cap: usize,
) -> Result<RobustnessVerdict> {
    let d = x.len();
    if d > GRID_MAX_DIM {
        return Err(Error::Config(format!(
            "grid oracle supports at most {GRID_MAX_DIM} dimensions, got {d}"
        )));
    }
    if resolution < 2 {
        return Err(Error::Config("grid resolution must be at least 2".into()));
    }
    let points = (resolution as u128).pow(d as u32);
    if points > point_cap as u128 {
        return Err(Error::GridTooLarge {
            points,
            cap: point_cap as u128,
        });
    }
    let (lo, hi) = bound_vectors(tm, x);
    let mut idx = vec![0usize; d];
    let mut point = vec![0.0; d];
    let mut best_margin = f64::NEG_INFINITY;
    let mut best_point = point.clone();
    loop {
        for k in 0..d {
            let f = idx[k] as f64 / (resolution - 1) as f64;
            point[k] = lo[k] + f * (hi[k] - lo[k]);
        }
        let z = model.logits_row(&point);
        if argmax(&z) != y {
            return Ok(RobustnessVerdict::Attackable {
                witness: point.clone(),
            });
        }
        let m = margin_value(&z, y);
        if m > best_margin {
            best_margin = m;
            best_point.copy_from_slice(&point);
        }
        // odometer increment over the grid indices
        let mut k = 0;
        loop {
            if k == d {
                return Ok(RobustnessVerdict::Robust);
            }
            idx[k] += 1;
            if idx[k] < resolution {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FilterError {
    /// Fraction of all samples that were filtered as robust but are
    /// actually attackable per the oracle.
    pub false_negative_rate: f64,
    /// Fraction of all samples reported successful whose stored candidate
    /// does not actually misclassify (should always be zero).
    pub false_positive_rate: f64,
}

/// Compare an attack outcome against per-sample oracle verdicts.
pub fn measure_filter_error(
    model: &DifferentiableModel,
    batch: &ImageBatch,
    candidates: &ndarray::Array2<f64>,
    status: &[crate::budget::SampleStatus],
    verdicts: &[RobustnessVerdict],
) -> FilterError {
    use crate::budget::SampleStatus;
    let n = batch.len();
    assert_eq!(status.len(), n);
    assert_eq!(verdicts.len(), n);
    let mut fn_count = 0usize;
    let mut fp_count = 0usize;
    for i in 0..n {
        match status[i] {
            SampleStatus::FilteredRobust => {
                if verdicts[i].is_attackable() {
                    fn_count += 1;
                }
            }
            SampleStatus::Succeeded => {
                let cand: Vec<f64> = candidates.row(i).to_vec();
                let z = model.logits_row(&cand);
                if argmax(&z) == batch.labels[i] {
                    fp_count += 1;
                }
            }
            _ => {}
        }
    }
    FilterError {
        false_negative_rate: fn_count as f64 / n.max(1) as f64,
        false_positive_rate: fp_count as f64 / n.max(1) as f64,
    }
}
