//! Quota accounting: per-image forward/backward counters, aggregate
//! averages, and budget reallocation among samples.
//!
//! Rules implemented here: every backward charge also consumes one forward
//! charge for the same image; quotas are dataset-level averages (backward
//! 100, forward 200 per image by default); in strict mode a charge past an
//! image's current allocation is an error. Reallocation moves the unspent
//! allocation of finished samples to still-active ones, conserving the
//! total exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaSpec {
    pub backward_per_image: u64,
    pub forward_per_image: u64,
}

impl Default for QuotaSpec {
    fn default() -> Self {
        QuotaSpec {
            backward_per_image: 100,
            forward_per_image: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Active,
    Succeeded,
    FilteredRobust,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReallocPolicy {
    EvenSplit,
    Proportional,
}

#[derive(Debug, Clone)]
pub struct BudgetLedger {
    forward: Vec<u64>,
    backward: Vec<u64>,
    alloc_backward: Vec<u64>,
    alloc_forward: Vec<u64>,
    strict: bool,
    phase: String,
    /// (sum of backward allocations, sum of forward allocations) recorded at
    /// creation and after every reallocation.
    pub alloc_history: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub n: usize,
    pub total_forward: u64,
    pub total_backward: u64,
    pub avg_forward: f64,
    pub avg_backward: f64,
    pub max_forward: u64,
    pub max_backward: u64,
    pub per_image_forward: Vec<u64>,
    pub per_image_backward: Vec<u64>,
}

impl BudgetLedger {
    pub fn new(n: usize, quota: QuotaSpec, strict: bool) -> Self {
        let ledger = BudgetLedger {
            forward: vec![0; n],
            backward: vec![0; n],
            alloc_backward: vec![quota.backward_per_image; n],
            alloc_forward: vec![quota.forward_per_image; n],
            strict,
            phase: String::new(),
            alloc_history: vec![(
                quota.backward_per_image * n as u64,
                quota.forward_per_image * n as u64,
            )],
        };
        ledger
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Label used in strict-mode diagnostics.
    pub fn set_phase(&mut self, phase: &str) {
        self.phase = phase.to_string();
    }

    pub fn phase(&self) -> &str {
        &self.phase
    }

    pub fn charge_forward(&mut self, images: &[usize]) -> Result<()> {
        for &i in images {
            if self.strict && self.forward[i] + 1 > self.alloc_forward[i] {
                return Err(self.exceeded(i, "forward", self.alloc_forward[i]));
            }
            self.forward[i] += 1;
        }
        Ok(())
    }

    pub fn charge_backward(&mut self, images: &[usize]) -> Result<()> {
        for &i in images {
            if self.strict && self.backward[i] + 1 > self.alloc_backward[i] {
                return Err(self.exceeded(i, "backward", self.alloc_backward[i]));
            }
            if self.strict && self.forward[i] + 1 > self.alloc_forward[i] {
                return Err(self.exceeded(i, "forward", self.alloc_forward[i]));
            }
            self.backward[i] += 1;
            self.forward[i] += 1;
        }
        Ok(())
    }

    fn exceeded(&self, image: usize, counter: &'static str, allocation: u64) -> Error {
        Error::BudgetExceeded {
            image,
            counter,
            allocation,
            phase: self.phase.clone(),
        }
    }

    pub fn forward_count(&self, image: usize) -> u64 {
        self.forward[image]
    }

    pub fn backward_count(&self, image: usize) -> u64 {
        self.backward[image]
    }

    pub fn remaining_backward(&self, image: usize) -> u64 {
        self.alloc_backward[image].saturating_sub(self.backward[image])
    }

    pub fn remaining_forward(&self, image: usize) -> u64 {
        self.alloc_forward[image].saturating_sub(self.forward[image])
    }

    /// True when the image can still afford `backward` more gradient steps
    /// plus `extra_forward` forward-only calls.
    pub fn can_afford(&self, image: usize, backward: u64, extra_forward: u64) -> bool {
        self.remaining_backward(image) >= backward
            && self.remaining_forward(image) >= backward + extra_forward
    }

    /// Redistribute the unspent allocation of non-active samples to active
    /// ones. Total allocation is conserved exactly; integer remainders go to
    /// the lowest active sample indices.
    pub fn reallocate(&mut self, status: &[SampleStatus], policy: ReallocPolicy) {
        assert_eq!(status.len(), self.len());
        let active: Vec<usize> = (0..self.len())
            .filter(|&i| status[i] == SampleStatus::Active)
            .collect();
        if active.is_empty() {
            return;
        }
        let mut pool_b = 0u64;
        let mut pool_f = 0u64;
        for i in 0..self.len() {
            if status[i] != SampleStatus::Active {
                pool_b += self.alloc_backward[i].saturating_sub(self.backward[i]);
                pool_f += self.alloc_forward[i].saturating_sub(self.forward[i]);
                self.alloc_backward[i] = self.alloc_backward[i].min(self.backward[i]);
                self.alloc_forward[i] = self.alloc_forward[i].min(self.forward[i]);
            }
        }
        let weights: Vec<u64> = match policy {
            ReallocPolicy::EvenSplit => vec![1; active.len()],
            ReallocPolicy::Proportional => {
                let w: Vec<u64> = active
                    .iter()
                    .map(|&i| self.remaining_backward(i).max(0))
                    .collect();
                if w.iter().all(|&v| v == 0) {
                    vec![1; active.len()]
                } else {
                    w
                }
            }
        };
        distribute(pool_b, &active, &weights, &mut self.alloc_backward);
        distribute(pool_f, &active, &weights, &mut self.alloc_forward);
        self.alloc_history.push((
            self.alloc_backward.iter().sum(),
            self.alloc_forward.iter().sum(),
        ));
    }

    pub fn usage_report(&self) -> UsageReport {
        let n = self.len();
        let total_forward: u64 = self.forward.iter().sum();
        let total_backward: u64 = self.backward.iter().sum();
        UsageReport {
            n,
            total_forward,
            total_backward,
            avg_forward: total_forward as f64 / n.max(1) as f64,
            avg_backward: total_backward as f64 / n.max(1) as f64,
            max_forward: self.forward.iter().copied().max().unwrap_or(0),
            max_backward: self.backward.iter().copied().max().unwrap_or(0),
            per_image_forward: self.forward.clone(),
            per_image_backward: self.backward.clone(),
        }
    }
}

/// Largest-share integer distribution of `pool` over `targets` weighted by
/// `weights`; remainders go to the lowest indices in `targets` order.
fn distribute(pool: u64, targets: &[usize], weights: &[u64], alloc: &mut [u64]) {
    if pool == 0 {
        return;
    }
    let wsum: u64 = weights.iter().sum();
    let mut given = 0u64;
    for (&i, &w) in targets.iter().zip(weights) {
        let share = pool * w / wsum;
        alloc[i] += share;
        given += share;
    }
    let mut rem = pool - given;
    for &i in targets {
        if rem == 0 {
            break;
        }
        alloc[i] += 1;
        rem -= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_charges_both_counters() {
        let mut l = BudgetLedger::new(3, QuotaSpec::default(), false);
        l.charge_backward(&[1]).unwrap();
        assert_eq!(l.backward_count(1), 1);
        assert_eq!(l.forward_count(1), 1);
        assert_eq!(l.forward_count(0), 0);
    }

    #[test]
    fn full_quota_consumption() {
        let mut l = BudgetLedger::new(1, QuotaSpec::default(), true);
        for _ in 0..100 {
            l.charge_backward(&[0]).unwrap();
        }
        for _ in 0..100 {
            l.charge_forward(&[0]).unwrap();
        }
        assert_eq!(l.forward_count(0), 200);
        assert_eq!(l.backward_count(0), 100);
        assert!(l.charge_forward(&[0]).is_err());
        assert!(l.charge_backward(&[0]).is_err());
    }

    #[test]
    fn empty_charge_is_noop() {
        let mut l = BudgetLedger::new(2, QuotaSpec::default(), true);
        l.charge_backward(&[]).unwrap();
        assert_eq!(l.usage_report().total_forward, 0);
    }

    #[test]
    fn fresh_ledger_reports_zero() {
        let l = BudgetLedger::new(4, QuotaSpec::default(), false);
        let r = l.usage_report();
        assert_eq!(r.total_forward, 0);
        assert_eq!(r.avg_backward, 0.0);
        assert_eq!(r.max_backward, 0);
    }

    #[test]
    fn average_counts_all_images() {
        let mut l = BudgetLedger::new(4, QuotaSpec::default(), false);
        for _ in 0..100 {
            l.charge_backward(&[0, 1, 2, 3]).unwrap();
        }
        let r = l.usage_report();
        assert_eq!(r.avg_backward, 100.0);
        assert_eq!(r.avg_forward, 100.0);
    }

    #[test]
    fn reallocate_no_active_is_noop() {
        let mut l = BudgetLedger::new(2, QuotaSpec::default(), false);
        let before = l.alloc_history.clone();
        l.reallocate(
            &[SampleStatus::Succeeded, SampleStatus::FilteredRobust],
            ReallocPolicy::EvenSplit,
        );
        assert_eq!(l.alloc_history, before);
    }

    #[test]
    fn reallocate_all_active_unchanged() {
        let mut l = BudgetLedger::new(2, QuotaSpec::default(), false);
        l.reallocate(
            &[SampleStatus::Active, SampleStatus::Active],
            ReallocPolicy::EvenSplit,
        );
        assert_eq!(l.remaining_backward(0), 100);
        assert_eq!(l.remaining_backward(1), 100);
        assert_eq!(*l.alloc_history.last().unwrap(), (200, 400));
    }

    #[test]
    fn unspent_moves_to_the_active_sample() {
        let mut l = BudgetLedger::new(2, QuotaSpec::default(), false);
        for _ in 0..60 {
            l.charge_backward(&[0]).unwrap();
        }
        l.reallocate(
            &[SampleStatus::Succeeded, SampleStatus::Active],
            ReallocPolicy::EvenSplit,
        );
        assert_eq!(l.remaining_backward(1), 140);
        // totals conserved: backward 200, forward 400
        assert_eq!(*l.alloc_history.last().unwrap(), (200, 400));
    }

    #[test]
    fn remainder_goes_to_lowest_indices() {
        let mut l = BudgetLedger::new(4, QuotaSpec::default(), false);
        for _ in 0..90 {
            l.charge_backward(&[3]).unwrap();
        }
        let status = [
            SampleStatus::Active,
            SampleStatus::Active,
            SampleStatus::Active,
            SampleStatus::Succeeded,
        ];
        l.reallocate(&status, ReallocPolicy::EvenSplit);
        // 10 unspent backward: +4, +3, +3
        assert_eq!(l.remaining_backward(0), 104);
        assert_eq!(l.remaining_backward(1), 103);
        assert_eq!(l.remaining_backward(2), 103);
    }

    #[test]
    fn conservation_across_reallocations() {
        let mut l = BudgetLedger::new(5, QuotaSpec::default(), false);
        for _ in 0..37 {
            l.charge_backward(&[0, 2]).unwrap();
        }
        let status = [
            SampleStatus::Succeeded,
            SampleStatus::Active,
            SampleStatus::FilteredRobust,
            SampleStatus::Active,
            SampleStatus::Active,
        ];
        l.reallocate(&status, ReallocPolicy::Proportional);
        l.reallocate(&status, ReallocPolicy::EvenSplit);
        let sums: Vec<u64> = l.alloc_history.iter().map(|&(b, _)| b).collect();
        assert!(sums.windows(2).all(|w| w[0] == w[1]));
    }
}
