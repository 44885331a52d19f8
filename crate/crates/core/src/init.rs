//! Starting-point generation: uniform noise, output-diversified ascent
//! (plain and biased), real-target cosine ascent, and the restricted
//! variant with a multi-target warm-up.
//!
//! All initializers are deterministic given (engine seed, sample index,
//! restart index) and always return feasible points. Gradient steps taken
//! during initialization are charged like any other backward pass.

use rand::Rng;

use crate::engine::Engine;
use crate::error::Result;
use crate::loss::{best_wrong, LossSpec};
use crate::model::ImageBatch;
use crate::rng::stream;

/// sign with sign(0) = 0, unlike `f64::signum`.
#[inline]
pub fn step_sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clean input plus uniform noise in the epsilon cube, projected.
pub fn uniform_init(engine: &Engine, i: usize, restart: u64) -> Vec<f64> {
    let mut rng = stream(engine.seed, "uniform-init", &[i as u64, restart]);
    let eps = engine.tm.epsilon;
    let orig = engine.x0.row(i);
    let mut x: Vec<f64> = orig.iter().map(|&v| v + rng.gen_range(-eps..=eps)).collect();
    engine.tm.project_row(&mut x, orig);
    x
}

/// Ascend a fixed random direction in logit space for `steps` iterations.
/// `bias_weight` blends the random direction with the clean runner-up
/// direction `e_runner_up - e_y`; 0 is plain output-diversified ascent.
pub fn odi_init(
    engine: &mut Engine,
    i: usize,
    restart: u64,
    start: &[f64],
    steps: usize,
    alpha: f64,
    bias_weight: f64,
) -> Result<Vec<f64>> {
    assert!((0.0..=1.0).contains(&bias_weight));
    let c = engine.num_classes;
    let y = engine.labels[i];
    let mut rng = stream(engine.seed, "odi-init", &[i as u64, restart]);
    let mut w: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    if bias_weight > 0.0 {
        let runner = best_wrong(&engine.clean_logits[i], y);
        for (j, v) in w.iter_mut().enumerate() {
            let bias = if j == runner {
                1.0
            } else if j == y {
                -1.0
            } else {
                0.0
            };
            *v = (1.0 - bias_weight) * *v + bias_weight * bias;
        }
    }
    ascend(engine, i, start, steps, alpha, &LossSpec::LogitDot { direction: w })
}

/// Ascend cosine similarity between the sample's logits and the logits of a
/// real target image with a different label. Costs one forward for the
/// target logits plus one backward per step. Falls back to uniform noise if
/// the logits are degenerate (zero norm).
pub fn rrt_init(
    engine: &mut Engine,
    i: usize,
    restart: u64,
    start: &[f64],
    steps: usize,
    alpha: f64,
    dataset: &ImageBatch,
) -> Result<Vec<f64>> {
    let y = engine.labels[i];
    let candidates: Vec<usize> = (0..dataset.len())
        .filter(|&j| dataset.labels[j] != y)
        .collect();
    if candidates.is_empty() {
        return Ok(uniform_init(engine, i, restart));
    }
    let mut rng = stream(engine.seed, "rrt-target", &[i as u64, restart]);
    let tar = candidates[rng.gen_range(0..candidates.len())];
    let x_tar: Vec<f64> = dataset.data.row(tar).to_vec();
    let z_tar = engine.forward_raw(i, &x_tar)?;
    if z_tar.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
        return Ok(uniform_init(engine, i, restart));
    }
    let loss = LossSpec::RrtCosine { reference: z_tar };
    let mut x = start.to_vec();
    let orig = engine.x0.row(i).to_owned();
    for _ in 0..steps {
        let eval = engine.grad_obs(i, &x, &loss)?;
        if eval.degenerate {
            return Ok(uniform_init(engine, i, restart));
        }
        for (xv, g) in x.iter_mut().zip(&eval.grad_x) {
            *xv += alpha * step_sign(*g);
        }
        engine.tm.project_row(&mut x, orig.view());
    }
    Ok(x)
}

/// Plain output-diversified ascent followed by ascent on the summed
/// targeted margin toward the top-2 non-true classes of the clean logits.
pub fn restricted_odi_init(
    engine: &mut Engine,
    i: usize,
    restart: u64,
    start: &[f64],
    odi_steps: usize,
    mt_steps: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    let x = odi_init(engine, i, restart, start, odi_steps, alpha, 0.0)?;
    let y = engine.labels[i];
    let targets = top_clean_targets(engine, i, 2);
    assert!(targets.len() == 2, "restricted init needs at least 3 classes");
    debug_assert!(targets.iter().all(|&t| t != y));
    ascend(engine, i, &x, mt_steps, alpha, &LossSpec::MultiTargetSum { targets })
}

/// Non-true classes ranked by clean logit, highest first, ties by lowest
/// class index.
pub fn top_clean_targets(engine: &Engine, i: usize, count: usize) -> Vec<usize> {
    multi_target_plan(&engine.clean_logits[i], engine.labels[i], count)
}

/// Ordered target list from clean logits (highest logit first).
pub fn multi_target_plan(clean_logits: &[f64], y: usize, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..clean_logits.len()).filter(|&j| j != y).collect();
    order.sort_by(|&a, &b| {
        clean_logits[b]
            .partial_cmp(&clean_logits[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(count);
    order
}

/// Shared sign-ascent loop used by the initializers.
fn ascend(
    engine: &mut Engine,
    i: usize,
    start: &[f64],
    steps: usize,
    alpha: f64,
    loss: &LossSpec,
) -> Result<Vec<f64>> {
    let mut x = start.to_vec();
    let orig = engine.x0.row(i).to_owned();
    for _ in 0..steps {
        let eval = engine.grad_obs(i, &x, loss)?;
        for (xv, g) in x.iter_mut().zip(&eval.grad_x) {
            *xv += alpha * step_sign(*g);
        }
        engine.tm.project_row(&mut x, orig.view());
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::QuotaSpec;
    use crate::data::synthetic_blobs;
    use crate::model::{ArchSpec, DifferentiableModel};
    use crate::threat::ThreatModel;

    fn setup(seed: u64) -> (DifferentiableModel, ImageBatch) {
        let batch = synthetic_blobs(10, 4, 3, 0.3, 0.08, 3);
        let model = DifferentiableModel::init(&ArchSpec::Mlp { hidden: vec![6] }, 4, 3, seed);
        (model, batch)
    }

    fn engine<'a>(model: &'a DifferentiableModel, batch: &ImageBatch) -> Engine<'a> {
        Engine::new(
            model,
            batch,
            ThreatModel::new(8.0 / 255.0),
            QuotaSpec::default(),
            true,
            7,
        )
        .unwrap()
    }

    #[test]
    fn uniform_init_feasible_and_deterministic() {
        let (model, batch) = setup(5);
        let eng = engine(&model, &batch);
        let a = uniform_init(&eng, 2, 0);
        let b = uniform_init(&eng, 2, 0);
        assert_eq!(a, b);
        assert!(eng
            .tm
            .is_feasible_row(ndarray::ArrayView1::from(&a), eng.x0.row(2), 0.0));
        let c = uniform_init(&eng, 2, 1);
        assert_ne!(a, c);
    }

    #[test]
    fn odi_init_charges_declared_steps() {
        let (model, batch) = setup(5);
        let mut eng = engine(&model, &batch);
        let start: Vec<f64> = eng.x0.row(1).to_vec();
        let eps = eng.tm.epsilon;
        odi_init(&mut eng, 1, 0, &start, 2, eps, 0.0).unwrap();
        assert_eq!(eng.ledger.backward_count(1), 2);
        assert_eq!(eng.imodel.calls_backward[1], 2);
    }

    #[test]
    fn odi_direction_increases_on_linear_model() {
        // w = e_j - e_y on a linear model: the dot loss grows monotonically
        let w = ndarray::array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let model = DifferentiableModel::Linear {
            w,
            b: ndarray::Array1::zeros(2),
        };
        let batch = ImageBatch::new(ndarray::array![[0.5, 0.5, 0.5]], vec![0], 2).unwrap();
        let mut eng = Engine::new(
            &model,
            &batch,
            ThreatModel::new(0.1),
            QuotaSpec::default(),
            true,
            3,
        )
        .unwrap();
        let dir = LossSpec::LogitDot {
            direction: vec![-1.0, 1.0],
        };
        let start: Vec<f64> = eng.x0.row(0).to_vec();
        let mut x = start.clone();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..3 {
            let eval = eng.grad_obs(0, &x, &dir).unwrap();
            assert!(eval.value >= prev);
            prev = eval.value;
            for (xv, g) in x.iter_mut().zip(&eval.grad_x) {
                *xv += 0.02 * step_sign(*g);
            }
            eng.tm.project_row(&mut x, eng.x0.row(0));
        }
    }

    #[test]
    fn biased_zero_weight_matches_plain_odi() {
        let (model, batch) = setup(5);
        let mut e1 = engine(&model, &batch);
        let mut e2 = engine(&model, &batch);
        let start: Vec<f64> = e1.x0.row(0).to_vec();
        let a = odi_init(&mut e1, 0, 3, &start, 2, 0.02, 0.0).unwrap();
        let b = odi_init(&mut e2, 0, 3, &start, 2, 0.02, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fully_biased_direction_decreases_clean_margin_on_linear_model() {
        let w = ndarray::array![[1.0f32, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let model = DifferentiableModel::Linear {
            w,
            b: ndarray::Array1::zeros(3),
        };
        let batch = ImageBatch::new(ndarray::array![[0.7, 0.4]], vec![0], 3).unwrap();
        let mut eng = Engine::new(
            &model,
            &batch,
            ThreatModel::new(0.05),
            QuotaSpec::default(),
            true,
            11,
        )
        .unwrap();
        let clean_margin = crate::loss::margin_value(&eng.clean_logits[0], 0);
        let start: Vec<f64> = eng.x0.row(0).to_vec();
        let x = odi_init(&mut eng, 0, 0, &start, 1, 0.01, 1.0).unwrap();
        let z = model.logits_row(&x);
        // margin toward correct class strictly decreases for small alpha
        assert!(crate::loss::margin_value(&z, 0) > clean_margin);
    }

    #[test]
    fn rrt_init_budget_and_feasibility() {
        let (model, batch) = setup(5);
        let mut eng = engine(&model, &batch);
        let start: Vec<f64> = eng.x0.row(4).to_vec();
        let eps = eng.tm.epsilon;
        let x = rrt_init(&mut eng, 4, 0, &start, 2, eps, &batch).unwrap();
        // 1 clean forward + 1 target forward + 2 coupled forwards
        assert_eq!(eng.ledger.backward_count(4), 2);
        assert_eq!(eng.ledger.forward_count(4), 4);
        assert!(eng
            .tm
            .is_feasible_row(ndarray::ArrayView1::from(&x), eng.x0.row(4), 0.0));
    }

    #[test]
    fn restricted_odi_costs_ten_backward() {
        let (model, batch) = setup(5);
        let mut eng = engine(&model, &batch);
        let start: Vec<f64> = eng.x0.row(0).to_vec();
        let eps = eng.tm.epsilon;
        restricted_odi_init(&mut eng, 0, 0, &start, 5, 5, eps).unwrap();
        assert_eq!(eng.ledger.backward_count(0), 10);
    }

    #[test]
    fn multi_target_plan_ordering() {
        assert_eq!(multi_target_plan(&[0.1, 0.9, 0.5], 0, 2), vec![1, 2]);
        assert_eq!(multi_target_plan(&[0.1, 0.9, 0.5], 0, 2).len(), 2);
        // tie broken by lowest index
        assert_eq!(multi_target_plan(&[0.9, 0.1, 0.5, 0.5], 0, 3), vec![2, 3, 1]);
        // count = C-1 is a permutation of all wrong classes
        let mut all = multi_target_plan(&[0.2, 0.4, 0.1, 0.8], 1, 3);
        all.sort_unstable();
        assert_eq!(all, vec![0, 2, 3]);
    }
}
