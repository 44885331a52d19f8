//! Step-size schedules used by the attack pipelines.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Fraction of the base step kept as a floor by the quarter-cosine
/// schedule; the raw cosine would go negative and reverse the ascent.
pub const COS4_FLOOR_FRAC: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Fixed {
        eta: f64,
    },
    /// Warm-restart cosine between `eta_max` and `eta_min` with period `t`.
    SgdrCosine {
        eta_max: f64,
        eta_min: f64,
        t: usize,
    },
    /// `eta_base * max(cos(4i/I), floor)`.
    Cos4 {
        eta_base: f64,
        total: usize,
    },
    /// Large exploratory step for the first five iterations, then small.
    TwoStage {
        epsilon: f64,
    },
    /// `eps` then `eps/3` at `0.25*total` then `eps/8` at `0.5*total`.
    KanraPiecewise {
        epsilon: f64,
        total: usize,
    },
    /// Half-cosine decay from `eta_start` down to `floor` across one
    /// restart of `total` iterations.
    CosinePerRestart {
        eta_start: f64,
        floor: f64,
        total: usize,
    },
}

impl ScheduleSpec {
    /// Step size for iteration `i` (0-based).
    pub fn step_size(&self, i: usize) -> f64 {
        match *self {
            ScheduleSpec::Fixed { eta } => {
                assert!(eta > 0.0);
                eta
            }
            ScheduleSpec::SgdrCosine { eta_max, eta_min, t } => {
                assert!(eta_max >= eta_min && eta_min > 0.0 && t >= 1);
                let phase = (i % t) as f64 / t as f64;
                0.5 * (eta_max - eta_min) * (1.0 + (phase * PI).cos()) + eta_min
            }
            ScheduleSpec::Cos4 { eta_base, total } => {
                assert!(eta_base > 0.0 && total >= 1);
                let c = (4.0 * i as f64 / total as f64).cos();
                eta_base * c.max(COS4_FLOOR_FRAC)
            }
            ScheduleSpec::TwoStage { epsilon } => {
                assert!(epsilon > 0.0);
                if i <= 4 {
                    2.0 * epsilon
                } else {
                    0.25 * epsilon
                }
            }
            ScheduleSpec::KanraPiecewise { epsilon, total } => {
                assert!(epsilon > 0.0 && total >= 1);
                let q = (0.25 * total as f64).round() as usize;
                let h = (0.5 * total as f64).round() as usize;
                if i < q {
                    epsilon
                } else if i < h {
                    epsilon / 3.0
                } else {
                    epsilon / 8.0
                }
            }
            ScheduleSpec::CosinePerRestart {
                eta_start,
                floor,
                total,
            } => {
                assert!(eta_start >= floor && floor > 0.0 && total >= 1);
                let phase = (i.min(total) as f64) / total as f64;
                floor + 0.5 * (eta_start - floor) * (1.0 + (phase * PI).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const EPS: f64 = 8.0 / 255.0;

    #[test]
    fn sgdr_hits_eta_max_at_period_start() {
        let s = ScheduleSpec::SgdrCosine {
            eta_max: EPS,
            eta_min: 0.001 * EPS,
            t: 10,
        };
        assert_abs_diff_eq!(s.step_size(0), EPS, epsilon = 1e-15);
        assert_abs_diff_eq!(s.step_size(10), EPS, epsilon = 1e-15);
        assert_abs_diff_eq!(s.step_size(20), EPS, epsilon = 1e-15);
    }

    #[test]
    fn sgdr_midpoint() {
        let eta_min = 0.001 * EPS;
        let s = ScheduleSpec::SgdrCosine {
            eta_max: EPS,
            eta_min,
            t: 10,
        };
        assert_abs_diff_eq!(
            s.step_size(5),
            (EPS - eta_min) / 2.0 + eta_min,
            epsilon = 1e-12
        );
    }

    #[test]
    fn two_stage_breakpoints() {
        let s = ScheduleSpec::TwoStage { epsilon: EPS };
        assert_eq!(s.step_size(0), 2.0 * EPS);
        assert_eq!(s.step_size(4), 2.0 * EPS);
        assert_eq!(s.step_size(5), 0.25 * EPS);
        assert_eq!(s.step_size(17), 0.25 * EPS);
    }

    #[test]
    fn kanra_breakpoints() {
        let s = ScheduleSpec::KanraPiecewise {
            epsilon: EPS,
            total: 100,
        };
        assert_eq!(s.step_size(24), EPS);
        assert_eq!(s.step_size(25), EPS / 3.0);
        assert_eq!(s.step_size(49), EPS / 3.0);
        assert_eq!(s.step_size(50), EPS / 8.0);
    }

    #[test]
    fn cos4_starts_at_base_and_floors() {
        let s = ScheduleSpec::Cos4 {
            eta_base: EPS,
            total: 10,
        };
        assert_abs_diff_eq!(s.step_size(0), EPS, epsilon = 1e-15);
        // far past pi*I/8 the raw cosine is negative; floor applies
        assert_abs_diff_eq!(s.step_size(9), EPS * COS4_FLOOR_FRAC, epsilon = 1e-15);
    }

    #[test]
    fn cosine_per_restart_endpoints() {
        let s = ScheduleSpec::CosinePerRestart {
            eta_start: EPS,
            floor: EPS / 20.0,
            total: 20,
        };
        assert_abs_diff_eq!(s.step_size(0), EPS, epsilon = 1e-15);
        assert_abs_diff_eq!(s.step_size(20), EPS / 20.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn all_schedules_strictly_positive_and_sgdr_bounded(i in 0usize..400) {
            let specs = [
                ScheduleSpec::Fixed { eta: EPS },
                ScheduleSpec::SgdrCosine { eta_max: EPS, eta_min: 0.001 * EPS, t: 13 },
                ScheduleSpec::Cos4 { eta_base: EPS, total: 37 },
                ScheduleSpec::TwoStage { epsilon: EPS },
                ScheduleSpec::KanraPiecewise { epsilon: EPS, total: 41 },
                ScheduleSpec::CosinePerRestart { eta_start: EPS, floor: EPS / 10.0, total: 29 },
            ];
            for s in &specs {
                prop_assert!(s.step_size(i) > 0.0);
            }
            let sgdr = &specs[1];
            let v = sgdr.step_size(i);
            prop_assert!(v >= 0.001 * EPS - 1e-15 && v <= EPS + 1e-15);
            // periodic with period t
            prop_assert!((sgdr.step_size(i) - sgdr.step_size(i + 13)).abs() < 1e-15);
        }
    }
}
