//! Benchmark harness: runs attack pipelines against suites of defense
//! models, scores them with an uncharged judge pass, and renders reports.
//!
//! The judge recomputes logits of the stored candidates directly on the
//! model, outside the ledger: scoring is free for the attacker. The
//! aggregate score for an attack against a suite is the fraction of
//! (model, image) cells whose candidate is misclassified, as a percentage.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::budget::{QuotaSpec, SampleStatus};
use crate::data::read_dataset;
use crate::engine::AttackOutcome;
use crate::error::{Error, Result};
use crate::model::{argmax, load_model, DifferentiableModel, ImageBatch};
use crate::rng::stable_hash;
use crate::threat::{ThreatModel, FEASIBILITY_TOL};

/// A named set of defense models evaluated on one dataset.
pub struct DefenseSuite {
    pub name: String,
    pub models: Vec<(String, DifferentiableModel)>,
    pub dataset: ImageBatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub attack: String,
    pub group: String,
    pub model: String,
    pub n: usize,
    pub misclassified: usize,
    pub success_pct: f64,
    pub avg_backward: f64,
    pub avg_forward: f64,
    pub max_backward: u64,
    pub max_forward: u64,
    pub filtered_robust: usize,
    pub exhausted: usize,
    pub feasibility_violations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub attack: String,
    pub group: String,
    pub score_pct: f64,
    pub avg_backward: f64,
    pub avg_forward: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub epsilon: f64,
    pub seed: u64,
    pub strict: bool,
    pub quota: QuotaSpec,
    pub cells: Vec<CellReport>,
    pub aggregates: Vec<AggregateRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

impl BenchReport {
    /// JSON form with volatile fields stripped; byte-identical across
    /// repeated runs with the same configuration and seed.
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.wall_clock_secs = None;
        serde_json::to_string_pretty(&copy).expect("report serialization")
    }
}

fn round_pct(frac: f64) -> f64 {
    (frac * 100.0 * 1000.0).round() / 1000.0
}

/// Uncharged judge pass: how many stored candidates actually fool the model.
pub fn judge_misclassified(
    model: &DifferentiableModel,
    batch: &ImageBatch,
    outcome: &AttackOutcome,
) -> usize {
    (0..batch.len())
        .filter(|&i| {
            let cand: Vec<f64> = outcome.candidates.row(i).to_vec();
            argmax(&model.logits_row(&cand)) != batch.labels[i]
        })
        .count()
}

pub fn count_feasibility_violations(
    batch: &ImageBatch,
    outcome: &AttackOutcome,
    tm: &ThreatModel,
) -> usize {
    (0..batch.len())
        .filter(|&i| !tm.is_feasible_row(outcome.candidates.row(i), batch.data.row(i), FEASIBILITY_TOL))
        .count()
}

/// Seed for one (attack, model) cell, derived so that cells are
/// independent of evaluation order.
pub fn cell_seed(seed: u64, attack_name: &str, model_id: &str) -> u64 {
    seed ^ stable_hash(attack_name).rotate_left(13) ^ stable_hash(model_id).rotate_left(29)
}

#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    attack_name: &str,
    attack: &AttackConfig,
    group: &str,
    model_id: &str,
    model: &DifferentiableModel,
    dataset: &ImageBatch,
    tm: ThreatModel,
    quota: QuotaSpec,
    strict: bool,
    seed: u64,
) -> Result<(CellReport, AttackOutcome)> {
    let outcome = attack.run(
        model,
        dataset,
        tm,
        quota,
        strict,
        cell_seed(seed, attack_name, model_id),
    )?;
    let n = dataset.len();
    let misclassified = judge_misclassified(model, dataset, &outcome);
    let report = CellReport {
        attack: attack_name.to_string(),
        group: group.to_string(),
        model: model_id.to_string(),
        n,
        misclassified,
        success_pct: round_pct(misclassified as f64 / n.max(1) as f64),
        avg_backward: outcome.usage.avg_backward,
        avg_forward: outcome.usage.avg_forward,
        max_backward: outcome.usage.max_backward,
        max_forward: outcome.usage.max_forward,
        filtered_robust: outcome
            .status
            .iter()
            .filter(|&&s| s == SampleStatus::FilteredRobust)
            .count(),
        exhausted: outcome
            .status
            .iter()
            .filter(|&&s| s == SampleStatus::Exhausted)
            .count(),
        feasibility_violations: count_feasibility_violations(dataset, &outcome, &tm),
    };
    Ok((report, outcome))
}

/// Score one attack against every model of a suite; returns the aggregate
/// misclassification percentage and the per-model cells.
pub fn score_suite(
    attack_name: &str,
    attack: &AttackConfig,
    suite: &DefenseSuite,
    tm: ThreatModel,
    quota: QuotaSpec,
    strict: bool,
    seed: u64,
) -> Result<(f64, Vec<CellReport>)> {
    let cells = suite
        .models
        .par_iter()
        .map(|(model_id, model)| {
            run_cell(
                attack_name,
                attack,
                &suite.name,
                model_id,
                model,
                &suite.dataset,
                tm,
                quota,
                strict,
                seed,
            )
            .map(|(report, _)| report)
        })
        .collect::<Result<Vec<_>>>()?;
    let total: usize = cells.iter().map(|c| c.misclassified).sum();
    let denom = suite.dataset.len() * suite.models.len();
    Ok((round_pct(total as f64 / denom.max(1) as f64), cells))
}

// ---------------------------------------------------------------------------
// configuration files

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum EpsilonRaw {
    Number(f64),
    Text(String),
}

/// Accepts either a plain number or a fraction such as "8/255".
pub fn parse_epsilon(text: &str) -> Result<f64> {
    let bad = |t: &str| Error::Config(format!("cannot parse epsilon from {t:?}"));
    let v = if let Some((num, den)) = text.split_once('/') {
        let num: f64 = num.trim().parse().map_err(|_| bad(text))?;
        let den: f64 = den.trim().parse().map_err(|_| bad(text))?;
        if den == 0.0 {
            return Err(bad(text));
        }
        num / den
    } else {
        text.trim().parse().map_err(|_| bad(text))?
    };
    if !v.is_finite() || v <= 0.0 {
        return Err(bad(text));
    }
    Ok(v)
}

#[derive(Debug, Clone, Deserialize)]
pub struct GroupConfig {
    pub name: String,
    pub dataset: PathBuf,
    pub models: Vec<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NamedAttack {
    pub name: String,
    #[serde(flatten)]
    pub config: AttackConfig,
}

#[derive(Debug, Clone, Deserialize)]
pub struct BenchConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_strict")]
    pub strict: bool,
    pub epsilon: EpsilonField,
    #[serde(default)]
    pub quota: QuotaSpec,
    pub groups: Vec<GroupConfig>,
    pub attacks: Vec<NamedAttack>,
}

fn default_strict() -> bool {
    true
}

#[derive(Debug, Clone)]
pub struct EpsilonField(pub f64);

impl<'de> Deserialize<'de> for EpsilonField {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = EpsilonRaw::deserialize(de)?;
        let v = match raw {
            EpsilonRaw::Number(v) if v.is_finite() && v > 0.0 => v,
            EpsilonRaw::Number(v) => {
                return Err(serde::de::Error::custom(format!("invalid epsilon {v}")))
            }
            EpsilonRaw::Text(t) => parse_epsilon(&t).map_err(serde::de::Error::custom)?,
        };
        Ok(EpsilonField(v))
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        if cfg.groups.is_empty() {
            return Err(Error::Config("config needs at least one group".into()));
        }
        if cfg.attacks.is_empty() {
            return Err(Error::Config("config needs at least one attack".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

fn load_group(base: &Path, group: &GroupConfig) -> Result<DefenseSuite> {
    let dataset = read_dataset(&base.join(&group.dataset))?;
    let mut models = Vec::new();
    for dir in &group.models {
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        models.push((id, load_model(&base.join(dir))?));
    }
    Ok(DefenseSuite {
        name: group.name.clone(),
        models,
        dataset,
    })
}

/// Run every configured attack against every group. Cells execute in
/// parallel; results are ordered by (attack, group, model) regardless of
/// completion order.
pub fn run_benchmark(config: &BenchConfig, base_dir: &Path) -> Result<BenchReport> {
    let start = std::time::Instant::now();
    let tm = ThreatModel::new(config.epsilon.0);
    let suites: Vec<DefenseSuite> = config
        .groups
        .iter()
        .map(|g| load_group(base_dir, g))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for ai in 0..config.attacks.len() {
        for (gi, suite) in suites.iter().enumerate() {
            for (mi, _) in suite.models.iter().enumerate() {
                jobs.push((ai, gi, mi));
            }
        }
    }
    let mut cells: Vec<((usize, usize, usize), CellReport)> = jobs
        .par_iter()
        .map(|&(ai, gi, mi)| {
            let attack = &config.attacks[ai];
            let suite = &suites[gi];
            let (model_id, model) = &suite.models[mi];
            run_cell(
                &attack.name,
                &attack.config,
                &suite.name,
                model_id,
                model,
                &suite.dataset,
                tm,
                config.quota,
                config.strict,
                config.seed,
            )
            .map(|(report, _)| ((ai, gi, mi), report))
        })
        .collect::<Result<Vec<_>>>()?;
    cells.sort_by_key(|(key, _)| *key);
    let cells: Vec<CellReport> = cells.into_iter().map(|(_, c)| c).collect();
    let mut aggregates = Vec::new();
    for attack in &config.attacks {
        for suite in &suites {
            let group_cells: Vec<&CellReport> = cells
                .iter()
                .filter(|c| c.attack == attack.name && c.group == suite.name)
                .collect();
            let total: usize = group_cells.iter().map(|c| c.misclassified).sum();
            let denom = suite.dataset.len() * suite.models.len();
            let m = group_cells.len().max(1) as f64;
            aggregates.push(AggregateRow {
                attack: attack.name.clone(),
                group: suite.name.clone(),
                score_pct: round_pct(total as f64 / denom.max(1) as f64),
                avg_backward: group_cells.iter().map(|c| c.avg_backward).sum::<f64>() / m,
                avg_forward: group_cells.iter().map(|c| c.avg_forward).sum::<f64>() / m,
            });
        }
    }
    Ok(BenchReport {
        epsilon: config.epsilon.0,
        seed: config.seed,
        strict: config.strict,
        quota: config.quota,
        cells,
        aggregates,
        wall_clock_secs: Some(start.elapsed().as_secs_f64()),
    })
}

/// Plain-text score table: one row per attack, one column per group.
pub fn render_table(report: &BenchReport) -> String {
    let mut attacks: Vec<&str> = Vec::new();
    let mut groups: Vec<&str> = Vec::new();
    for a in &report.aggregates {
        if !attacks.contains(&a.attack.as_str()) {
            attacks.push(&a.attack);
        }
        if !groups.contains(&a.group.as_str()) {
            groups.push(&a.group);
        }
    }
    let name_w = attacks
        .iter()
        .map(|a| a.len())
        .max()
        .unwrap_or(6)
        .max("attack".len());
    let col_w = groups.iter().map(|g| g.len().max(8)).collect::<Vec<_>>();
    let mut out = String::new();
    out.push_str(&format!("{:name_w$}", "attack"));
    for (g, w) in groups.iter().zip(&col_w) {
        out.push_str(&format!("  {g:>w$}", w = w));
    }
    out.push('\n');
    for a in &attacks {
        out.push_str(&format!("{a:name_w$}"));
        for (g, w) in groups.iter().zip(&col_w) {
            let score = report
                .aggregates
                .iter()
                .find(|row| row.attack == *a && row.group == *g)
                .map(|row| row.score_pct)
                .unwrap_or(f64::NAN);
            out.push_str(&format!("  {score:>w$.3}", w = w));
        }
        out.push('\n');
    }
    out
}
