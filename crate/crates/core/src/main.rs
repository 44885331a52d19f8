use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use advbench::attack::AttackConfig;
use advbench::budget::QuotaSpec;
use advbench::data::{read_dataset, synthetic_blobs, write_dataset};
use advbench::harness::{self, parse_epsilon, BenchConfig};
use advbench::loss::LossSpec;
use advbench::model::{
    clean_accuracy, fd_gradient, load_model, save_model, train_tiny_defense, ArchSpec,
    ImageBatch, TrainConfig,
};
use advbench::oracle::{grid_oracle, linear_oracle, RobustnessVerdict, GRID_DEFAULT_CAP};
use advbench::threat::ThreatModel;

#[derive(Parser)]
#[command(
    name = "advbench",
    about = "Budget-constrained white-box adversarial attack benchmark for tiny classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full benchmark from a TOML configuration.
    Run {
        /// Benchmark configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Base directory for relative dataset/model paths (default: the
        /// config file's directory).
        #[arg(long)]
        base_dir: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack one model with one pipeline.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Pipeline name (see --list).
        #[arg(long, default_value = "pgd")]
        attack: String,
        /// Perturbation radius, e.g. "8/255" or "0.05".
        #[arg(long, default_value = "8/255")]
        epsilon: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        backward_quota: u64,
        #[arg(long, default_value_t = 200)]
        forward_quota: u64,
        /// Abort on any quota violation instead of stopping gracefully.
        #[arg(long)]
        strict: bool,
        /// Directory for the report, adversarial dataset and flags.
        #[arg(long)]
        out: Option<PathBuf>,
        /// List the available pipeline names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Adversarially train a tiny defense model and save the bundle.
    TrainDefense {
        /// Architecture: "linear", "mlp:16" or "mlp:16,8".
        #[arg(long, default_value = "mlp:16")]
        arch: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        pgd_steps: usize,
        #[arg(long, default_value = "8/255")]
        epsilon: String,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a saved model bundle: round-trip integrity, gradient accuracy
    /// and (optionally) clean accuracy on a dataset.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Ground-truth robustness verdicts for a model on a dataset.
    Oracle {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "8/255")]
        epsilon: String,
        /// Grid resolution per axis for non-linear models (input dim <= 3).
        #[arg(long, default_value_t = 101)]
        grid_resolution: usize,
    },
    /// Generate a synthetic Gaussian-blob dataset.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.25)]
        spread: f64,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_arch(text: &str) -> anyhow::Result<ArchSpec> {
    if text == "linear" {
        return Ok(ArchSpec::Linear);
    }
    if let Some(rest) = text.strip_prefix("mlp:") {
        let hidden: Vec<usize> = rest
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("bad hidden sizes in {text:?}"))?;
        if hidden.is_empty() || hidden.len() > 2 || hidden.iter().any(|&h| h == 0) {
            bail!("mlp needs one or two non-zero hidden sizes, got {text:?}");
        }
        return Ok(ArchSpec::Mlp { hidden });
    }
    bail!("unknown architecture {text:?}; use \"linear\" or \"mlp:H[,H2]\"");
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            base_dir,
            out,
        } => {
            let cfg = BenchConfig::load(&config)?;
            let base = base_dir.unwrap_or_else(|| {
                config
                    .parent()
                    .map(|p| p.to_path_buf())
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let report = harness::run_benchmark(&cfg, &base)?;
            print!("{}", harness::render_table(&report));
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("report written to {}", path.display());
            }
        }
        Command::Attack {
            model,
            dataset,
            attack,
            epsilon,
            seed,
            backward_quota,
            forward_quota,
            strict,
            out,
            list,
        } => {
            if list {
                for name in AttackConfig::all_names() {
                    println!("{name}");
                }
                return Ok(());
            }
            let config = AttackConfig::by_name(&attack)
                .with_context(|| format!("unknown attack {attack:?}; try --list"))?;
            let model_obj = load_model(&model)?;
            let batch = read_dataset(&dataset)?;
            let tm = ThreatModel::new(parse_epsilon(&epsilon)?);
            let quota = QuotaSpec {
                backward_per_image: backward_quota,
                forward_per_image: forward_quota,
            };
            let (report, outcome) = harness::run_cell(
                &attack,
                &config,
                "cli",
                &model.display().to_string(),
                &model_obj,
                &batch,
                tm,
                quota,
                strict,
                seed,
            )?;
            println!(
                "{}: {}/{} misclassified ({:.3}%), avg backward {:.2}, avg forward {:.2}",
                attack,
                report.misclassified,
                report.n,
                report.success_pct,
                report.avg_backward,
                report.avg_forward
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(
                    dir.join("report.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
                let adv = ImageBatch::new(
                    outcome.candidates.clone(),
                    batch.labels.clone(),
                    batch.num_classes,
                )?;
                write_dataset(&adv, &dir.join("adversarial.bin"))?;
                let flags = serde_json::json!({
                    "success": outcome.success,
                    "status": outcome.status,
                    "best_margin": outcome.best_margin,
                });
                std::fs::write(dir.join("flags.json"), serde_json::to_string_pretty(&flags)?)?;
                println!("artifacts written to {}", dir.display());
            }
        }
        Command::TrainDefense {
            arch,
            dataset,
            out,
            epochs,
            pgd_steps,
            epsilon,
            lr,
            seed,
        } => {
            let arch = parse_arch(&arch)?;
            let batch = read_dataset(&dataset)?;
            let config = TrainConfig {
                epochs,
                pgd_steps,
                epsilon: parse_epsilon(&epsilon)?,
                lr,
                seed,
            };
            let model = train_tiny_defense(&arch, &batch, &config)?;
            save_model(&model, &out)?;
            println!(
                "trained {arch:?}; clean accuracy {:.3}; saved to {}",
                clean_accuracy(&model, &batch),
                out.display()
            );
        }
        Command::Verify { model, dataset } => {
            let loaded = load_model(&model)?;
            let d = loaded.input_dim();
            // spot-check the analytic gradient at a few interior points
            let probe = synthetic_blobs(8, d, loaded.num_classes(), 0.2, 0.05, 1);
            let mut worst: f64 = 0.0;
            for i in 0..probe.len() {
                let x: Vec<f64> = probe.data.row(i).to_vec();
                let y = probe.labels[i];
                let analytic = loaded.loss_grad_row(&x, y, &LossSpec::CrossEntropy);
                let fd = fd_gradient(&loaded, &x, y, &LossSpec::CrossEntropy, 1e-3);
                let num: f64 = analytic
                    .grad_x
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                worst = worst.max(num / den);
            }
            println!(
                "bundle ok: {:?}, input dim {}, classes {}, worst gradient error {:.2e}",
                loaded.arch(),
                d,
                loaded.num_classes()
            , worst);
            if worst > 1e-4 {
                bail!("gradient check failed: relative error {worst:.2e} > 1e-4");
            }
            if let Some(path) = dataset {
                let batch = read_dataset(&path)?;
                println!("clean accuracy: {:.3}", clean_accuracy(&loaded, &batch));
            }
        }
        Command::Oracle {
            model,
            dataset,
            epsilon,
            grid_resolution,
        } => {
            let loaded = load_model(&model)?;
            let batch = read_dataset(&dataset)?;
            let tm = ThreatModel::new(parse_epsilon(&epsilon)?);
            let mut attackable = 0usize;
            let mut robust = 0usize;
            for i in 0..batch.len() {
                let x = batch.data.row(i);
                let y = batch.labels[i];
                let verdict = if loaded.is_linear() {
                    linear_oracle(&loaded, x, y, &tm)?
                } else {
                    grid_oracle(&loaded, x, y, &tm, grid_resolution, GRID_DEFAULT_CAP)?
                };
                match verdict {
                    RobustnessVerdict::Attackable { .. } => attackable += 1,
                    RobustnessVerdict::Robust => robust += 1,
                }
            }
            println!(
                "{} samples: {} attackable, {} robust (epsilon {})",
                batch.len(),
                attackable,
                robust,
                tm.epsilon
            );
        }
        Command::GenDataset {
            out,
            n,
            dim,
            classes,
            spread,
            sigma,
            seed,
        } => {
            let batch = synthetic_blobs(n, dim, classes, spread, sigma, seed);
            write_dataset(&batch, &out)?;
            println!(
                "wrote {} samples ({} dims, {} classes) to {}",
                n,
                dim,
                classes,
                out.display()
            );
        }
    }
    Ok(())
}
