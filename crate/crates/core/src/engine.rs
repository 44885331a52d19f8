//! Shared attack execution state: the instrumented model, the budget
//! ledger, per-sample status and best-candidate tracking.
//!
//! Every model call an attack makes goes through this type so that the
//! ledger and the model-layer shadow counters move in lockstep. Success is
//! only ever declared from logits that were produced by a charged forward
//! pass on the stored candidate. The per-sample "best" candidate is the
//! feasible point with the highest CW margin seen so far, which makes
//! best-loss traces non-decreasing by construction and comparable across
//! phases that optimize different surrogates.

use ndarray::Array2;

use crate::budget::{BudgetLedger, QuotaSpec, SampleStatus, UsageReport};
use crate::error::Result;
use crate::loss::{margin_value, LossSpec};
use crate::model::{argmax, DifferentiableModel, GradEval, ImageBatch, InstrumentedModel};
use crate::threat::ThreatModel;

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Best feasible candidate per sample.
    pub candidates: Array2<f64>,
    pub success: Vec<bool>,
    pub status: Vec<SampleStatus>,
    pub best_margin: Vec<f64>,
    /// Per-sample trace of the best margin after each charged observation.
    pub traces: Vec<Vec<f64>>,
    pub usage: UsageReport,
    pub shadow_forward: Vec<u64>,
    pub shadow_backward: Vec<u64>,
    pub alloc_history: Vec<(u64, u64)>,
}

pub struct Engine<'a> {
    pub imodel: InstrumentedModel<'a>,
    pub ledger: BudgetLedger,
    pub tm: ThreatModel,
    pub x0: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub status: Vec<SampleStatus>,
    pub best: Array2<f64>,
    pub best_margin: Vec<f64>,
    pub traces: Vec<Vec<f64>>,
    pub clean_logits: Vec<Vec<f64>>,
    pub seed: u64,
}

impl<'a> Engine<'a> {
    /// Build the engine and run the charged clean forward pass. Samples the
    /// model already misclassifies are successes with the clean input as
    /// their candidate.
    pub fn new(
        model: &'a DifferentiableModel,
        batch: &ImageBatch,
        tm: ThreatModel,
        quota: QuotaSpec,
        strict: bool,
        seed: u64,
    ) -> Result<Self> {
        let n = batch.len();
        let mut engine = Engine {
            imodel: InstrumentedModel::new(model, n),
            ledger: BudgetLedger::new(n, quota, strict),
            tm,
            x0: batch.data.clone(),
            labels: batch.labels.clone(),
            num_classes: batch.num_classes,
            status: vec![SampleStatus::Active; n],
            best: batch.data.clone(),
            best_margin: vec![f64::NEG_INFINITY; n],
            traces: vec![Vec::new(); n],
            clean_logits: vec![Vec::new(); n],
        seed,
        };
        engine.ledger.set_phase("clean-pass");
        for i in 0..n {
            let x: Vec<f64> = engine.x0.row(i).to_vec();
            let z = engine.forward_obs(i, &x)?;
            engine.clean_logits[i] = z;
        }
        Ok(engine)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0.ncols()
    }

    pub fn active_samples(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.status[i] == SampleStatus::Active)
            .collect()
    }

    pub fn any_active(&self) -> bool {
        self.status.iter().any(|&s| s == SampleStatus::Active)
    }

    /// Record a charged observation of feasible point `x` with logits `z`.
    fn observe(&mut self, i: usize, x: &[f64], z: &[f64]) {
        let m = margin_value(z, self.labels[i]);
        if m > self.best_margin[i] {
            self.best_margin[i] = m;
            for (k, &v) in x.iter().enumerate() {
                self.best[[i, k]] = v;
            }
        }
        self.traces[i].push(self.best_margin[i]);
        if self.status[i] == SampleStatus::Active && argmax(z) != self.labels[i] {
            self.status[i] = SampleStatus::Succeeded;
        }
    }

    /// Charged forward pass with observation (success check).
    pub fn forward_obs(&mut self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.ledger.charge_forward(&[i])?;
        let z = self.imodel.forward_row(i, x);
        self.observe(i, x, &z);
        Ok(z)
    }

    /// Charged gradient (backward + coupled forward) with observation.
    pub fn grad_obs(&mut self, i: usize, x: &[f64], loss: &LossSpec) -> Result<GradEval> {
        self.ledger.charge_backward(&[i])?;
        let eval = self.imodel.grad_row(i, x, self.labels[i], loss);
        self.observe(i, x, &eval.logits);
        Ok(eval)
    }

    /// Charged forward pass without best/status tracking; used when the
    /// evaluated point is outside the nominal threat ball (outer stage).
    pub fn forward_raw(&mut self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.ledger.charge_forward(&[i])?;
        Ok(self.imodel.forward_row(i, x))
    }

    /// Charged gradient without best/status tracking.
    pub fn grad_raw(&mut self, i: usize, x: &[f64], loss: &LossSpec) -> Result<GradEval> {
        self.ledger.charge_backward(&[i])?;
        Ok(self.imodel.grad_row(i, x, self.labels[i], loss))
    }

    /// Mark every still-active sample exhausted and package the run.
    pub fn into_outcome(mut self) -> AttackOutcome {
        for s in &mut self.status {
            if *s == SampleStatus::Active {
                *s = SampleStatus::Exhausted;
            }
        }
        let success: Vec<bool> = self
            .status
            .iter()
            .map(|&s| s == SampleStatus::Succeeded)
            .collect();
        AttackOutcome {
            candidates: self.best,
            success,
            status: self.status,
            best_margin: self.best_margin,
            traces: self.traces,
            usage: self.ledger.usage_report(),
            shadow_forward: self.imodel.calls_forward.clone(),
            shadow_backward: self.imodel.calls_backward.clone(),
            alloc_history: self.ledger.alloc_history.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::model::ArchSpec;

    #[test]
    fn clean_pass_charges_one_forward_each() {
        let batch = synthetic_blobs(8, 4, 2, 0.3, 0.05, 1);
        let model = DifferentiableModel::init(&ArchSpec::Linear, 4, 2, 2);
        let engine = Engine::new(
            &model,
            &batch,
            ThreatModel::new(0.03),
            QuotaSpec::default(),
            true,
            0,
        )
        .unwrap();
        let usage = engine.ledger.usage_report();
        assert!(usage.per_image_forward.iter().all(|&f| f == 1));
        assert!(usage.per_image_backward.iter().all(|&b| b == 0));
        assert_eq!(engine.imodel.calls_forward, vec![1; 8]);
    }

    #[test]
    fn clean_misclassification_is_immediate_success() {
        use ndarray::array;
        let model = DifferentiableModel::Linear {
            w: array![[0.0f32, 0.0], [1.0, 1.0]],
            b: ndarray::Array1::zeros(2),
        };
        let batch = ImageBatch::new(array![[0.5, 0.5]], vec![0], 2).unwrap();
        let engine = Engine::new(
            &model,
            &batch,
            ThreatModel::new(0.03),
            QuotaSpec::default(),
            true,
            0,
        )
        .unwrap();
        assert_eq!(engine.status[0], SampleStatus::Succeeded);
        let out = engine.into_outcome();
        assert!(out.success[0]);
        // stored candidate is the clean input
        assert_eq!(out.candidates.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn best_margin_trace_is_non_decreasing() {
        let batch = synthetic_blobs(4, 3, 3, 0.3, 0.08, 5);
        let model = DifferentiableModel::init(&ArchSpec::Mlp { hidden: vec![6] }, 3, 3, 9);
        let mut engine = Engine::new(
            &model,
            &batch,
            ThreatModel::new(0.05),
            QuotaSpec::default(),
            false,
            0,
        )
        .unwrap();
        let x: Vec<f64> = engine.x0.row(0).to_vec();
        for step in 0..5 {
            let mut probe = x.clone();
            probe[0] = (probe[0] + 0.01 * step as f64).min(1.0);
            engine.tm.clone().project_row(&mut probe, engine.x0.row(0));
            engine.forward_obs(0, &probe).unwrap();
        }
        let trace = &engine.traces[0];
        assert!(trace.windows(2).all(|w| w[1] >= w[0]));
    }
}
