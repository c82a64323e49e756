//! The `sce` command: pretraining, linear probing, verification, similarity
//! reports and hyperparameter sweeps.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use sce_core::config::RunConfig;
use sce_core::engine::{composite_grad_check, load_trained, pretrain_run, RunOptions, RunSummary};
use sce_core::eval::{linear_probe_train, similarity_shift_histogram, ProbeResult};
use sce_core::models::ParamStore;
use sce_core::objectives::{verify_decomposition, ObjectiveKind, VerifyConfig, VerifyReport};
use sce_core::par;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "sce", version, about = "Similarity contrastive estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain an encoder from a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Config override in `dotted.key = value` form; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run the linear probe after training.
        #[arg(long)]
        probe: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Fit a linear classifier on frozen features of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training images (CIFAR binary); defaults to the run's data.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Held-out images (CIFAR binary); defaults to the run's held-out split.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check the loss decomposition and end-to-end gradients.
    Verify {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Run the decomposition check in double precision.
        #[arg(long = "f64")]
        double: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates perturbed per parameter tensor in the gradient check.
        #[arg(long, default_value_t = 3)]
        grad_coords: usize,
    },
    /// Cosine similarity of embeddings to weak and strong views.
    Simdist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; defaults to `simdist.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain and probe once per value of one config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Config key, or one of the shorthands lambda, tau, tau_m, objective.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = std::env::var("SCE_THREADS").ok().and_then(|v| v.parse().ok()) {
        par::init_threads(n);
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Pretrain { config, overrides, resume, probe, quiet } => {
            let cfg = load_config(&config, &overrides)?;
            let (summary, result) = train_and_maybe_probe(&cfg, resume, probe, !quiet)?;
            print_json(&summary)?;
            if let Some(r) = result {
                print_json(&r)?;
            }
            Ok(())
        }
        Command::Probe { checkpoint, dataset, test, overrides } => {
            let (cfg, state) = load_trained(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let mut cfg = cfg.with_overrides(&overrides)?;
            if let Some(p) = dataset {
                cfg.data.path = p.to_string_lossy().into_owned();
            }
            if let Some(p) = test {
                cfg.data.test_path = p.to_string_lossy().into_owned();
            }
            let result = probe(&cfg, &state.network, &state.online)?;
            write_json(&sibling(&checkpoint, "probe.json"), &result)?;
            print_json(&result)
        }
        Command::Verify { trials, double, seed, grad_coords } => verify(trials, double, seed, grad_coords),
        Command::Simdist { checkpoint, samples, seed, out } => {
            let (cfg, state) = load_trained(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let data = cfg.data.load()?;
            let report = similarity_shift_histogram(
                &state.network,
                &state.online,
                &data,
                samples,
                seed,
                &cfg.augment.weak,
                &cfg.augment.strong,
            )?;
            let out = out.unwrap_or_else(|| sibling(&checkpoint, "simdist.json"));
            write_json(&out, &report)?;
            print_json(&serde_json::json!({
                "samples": report.samples,
                "weak_mean": report.weak_mean,
                "strong_mean": report.strong_mean,
                "report": out,
            }))
        }
        Command::Sweep { config, param, values, seeds, overrides } => sweep(&config, &param, &values, &seeds, &overrides),
    }
}

fn load_config(path: &Path, overrides: &[String]) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load(path)?.with_overrides(overrides)?)
}

/// Pretrains under `cfg` and optionally probes the result.
pub fn train_and_maybe_probe(
    cfg: &RunConfig,
    resume: Option<PathBuf>,
    with_probe: bool,
    verbose: bool,
) -> anyhow::Result<(RunSummary, Option<ProbeResult>)> {
    let data = cfg.data.load()?;
    let (state, summary) = pretrain_run(cfg, &data, &RunOptions { resume, verbose })?;
    let result = if with_probe {
        let r = probe(cfg, &state.network, &state.online)?;
        write_json(&cfg.output_path().join("probe.json"), &r)?;
        Some(r)
    } else {
        None
    };
    Ok((summary, result))
}

fn probe(cfg: &RunConfig, net: &sce_core::models::Network, store: &ParamStore) -> anyhow::Result<ProbeResult> {
    let train = cfg.data.load()?;
    let test = cfg.data.load_test()?;
    Ok(linear_probe_train(net, store, &train, &test, &cfg.probe)?.1)
}

fn verify(trials: usize, double: bool, seed: u64, grad_coords: usize) -> anyhow::Result<()> {
    let cfg = VerifyConfig { trials, seed, ..VerifyConfig::default() };
    let started = std::time::Instant::now();
    let report: VerifyReport = if double {
        verify_decomposition::<f64>(&cfg)?
    } else {
        verify_decomposition::<f32>(&cfg)?
    };
    println!(
        "decomposition [{}]: {} evaluations, max relative residual {:.3e} (tolerance {:.0e}) in {:.1}s: {}",
        report.precision,
        report.evaluations,
        report.max_residual,
        report.tolerance,
        started.elapsed().as_secs_f64(),
        verdict(report.passed)
    );
    if let Some(w) = &report.worst {
        println!("  worst case: N={} M={} D={} lambda={} trial {}", w.n, w.m, w.d, w.lambda, w.trial);
    }
    let mut ok = report.passed;
    for kind in [ObjectiveKind::Sce, ObjectiveKind::Infonce, ObjectiveKind::Ressl, ObjectiveKind::Combined] {
        let g = composite_grad_check(kind, seed, grad_coords)?;
        println!(
            "gradient [{kind}]: {} coordinates ({} skipped at kinks), max relative error {:.3e} (tolerance {:.0e}): {}",
            g.checked(),
            g.skipped(),
            g.max_rel_error,
            g.tol,
            verdict(g.passed)
        );
        ok &= g.passed;
    }
    if !ok {
        bail!("verification failed");
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

/// Full config key for the sweep shorthands.
fn sweep_key(param: &str) -> String {
    match param {
        "lambda" | "mu" | "eta" | "tau" | "tau_m" => format!("objective.{param}"),
        "objective" | "kind" => "objective.kind".into(),
        other => other.into(),
    }
}

/// TOML literal for a command-line value: numbers and booleans as-is, anything else quoted.
fn toml_literal(v: &str) -> String {
    if v.parse::<f64>().is_ok() || v == "true" || v == "false" {
        v.to_string()
    } else {
        format!("{v:?}")
    }
}

#[derive(Serialize)]
struct SweepRow {
    param: String,
    value: String,
    seed: u64,
    steps: u64,
    final_loss: f64,
    train_accuracy: f64,
    test_accuracy: f64,
    output_dir: String,
}

fn sweep(config: &Path, param: &str, values: &[String], seeds: &[u64], overrides: &[String]) -> anyhow::Result<()> {
    let base = load_config(config, overrides)?;
    let key = sweep_key(param);
    let root = base.output_path();
    std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let rows_path = root.join("sweep.jsonl");
    let mut rows_file = std::fs::File::create(&rows_path).with_context(|| format!("creating {}", rows_path.display()))?;
    println!("{:<20} {:>6} {:>10} {:>10} {:>10}", key, "seed", "loss", "train", "test");
    for value in values {
        for &seed in seeds {
            let dir = root.join(format!("{param}={value}")).join(format!("seed{seed}"));
            let cfg = base.with_overrides(&[
                format!("{key} = {}", toml_literal(value)),
                format!("seed = {seed}"),
                format!("output_dir = {:?}", dir.to_string_lossy()),
            ])?;
            let (summary, result) = train_and_maybe_probe(&cfg, None, true, false)?;
            let result = result.expect("probe requested");
            let row = SweepRow {
                param: key.clone(),
                value: value.clone(),
                seed,
                steps: summary.steps,
                final_loss: summary.last_loss,
                train_accuracy: result.train_accuracy,
                test_accuracy: result.test_accuracy,
                output_dir: dir.to_string_lossy().into_owned(),
            };
            println!(
                "{:<20} {:>6} {:>10.4} {:>10.4} {:>10.4}",
                value, seed, row.final_loss, row.train_accuracy, row.test_accuracy
            );
            writeln!(rows_file, "{}", serde_json::to_string(&row)?)?;
        }
    }
    println!("rows written to {}", rows_path.display());
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|p| p.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json<S: Serialize>(value: &S) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_shorthands_expand() {
        assert_eq!(sweep_key("lambda"), "objective.lambda");
        assert_eq!(sweep_key("tau_m"), "objective.tau_m");
        assert_eq!(sweep_key("objective"), "objective.kind");
        assert_eq!(sweep_key("optim.base_lr"), "optim.base_lr");
    }

    #[test]
    fn values_become_toml_literals() {
        assert_eq!(toml_literal("0.5"), "0.5");
        assert_eq!(toml_literal("true"), "true");
        assert_eq!(toml_literal("ressl"), "\"ressl\"");
    }

    #[test]
    fn help_exits_zero_and_bad_subcommand_does_not() {
        assert_eq!(run_cli(["sce", "--help"]), 0);
        assert_eq!(run_cli(["sce", "train"]), 2);
        assert_eq!(run_cli(["sce", "verify", "--trials", "x"]), 2);
    }
}
