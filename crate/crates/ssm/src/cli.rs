//! Command-line front end: data generation, training, evaluation,
//! ablation grids, gradient verification, and mapping export. Every
//! command that produces files also writes a `manifest.json` recording
//! the resolved configuration and the artifact paths.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::{generate_synthetic_world, SyntheticWorld};
use crate::dpm;
use crate::error::{Error, Result};
use crate::model::{grad_check_full, Model};
use crate::numerics::{row_softmax, Tensor};
use crate::trainer::{ablation_suite, train, Grid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(name = "ssm", version, about = "Structured semantic mapping experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default().resolve()?,
        };
        // precedence: --seed flag, then SSM_SEED, then the config file
        let seed = match self.seed {
            Some(s) => Some(s),
            None => match std::env::var("SSM_SEED") {
                Ok(v) => Some(v.parse::<u64>().map_err(|_| {
                    Error::Config(format!("SSM_SEED must be an unsigned integer, got `{v}`"))
                })?),
                Err(_) => None,
            },
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and save it to a data container.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output file for the data container.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write checkpoint, metrics, and manifest.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory for checkpoint.bin, metrics.json, losses.json, manifest.json.
        #[arg(long)]
        out_dir: PathBuf,
        /// Reuse a previously generated data container instead of regenerating.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on the test splits and print metrics JSON.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the metrics to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run one ablation grid over a seed set and write the rows as JSON.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        /// Which grid to sweep.
        #[arg(long, value_enum)]
        grid: GridArg,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', default_value = "11,13,17,19,23")]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Verify analytic gradients against finite differences.
    GradCheck {
        #[command(flatten)]
        config: ConfigArg,
        /// Number of consecutive seeds to check, starting at the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Maximum tolerated relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Export the learned bidirectional mapping as CSV heat-map tables.
    ExportMapping {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Dump raw weights instead of the temperature-softmaxed rows.
        #[arg(long)]
        pre_softmax: bool,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GridArg {
    Component,
    DpmVariant,
    PromptStyle,
    ContextLength,
    DataFraction,
}

impl From<GridArg> for Grid {
    fn from(g: GridArg) -> Grid {
        match g {
            GridArg::Component => Grid::Component,
            GridArg::DpmVariant => Grid::DpmVariant,
            GridArg::PromptStyle => Grid::PromptStyle,
            GridArg::ContextLength => Grid::ContextLength,
            GridArg::DataFraction => Grid::DataFraction,
        }
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "refusing to overwrite `{}` (pass --force)",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    outputs: &[&Path],
    extra: serde_json::Value,
) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    let manifest = serde_json::json!({
        "command": command,
        "config": cfg,
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "extra": extra,
    });
    write_text(&path, &format!("{:#}\n", manifest))?;
    Ok(path)
}

fn load_world(cfg: &ExperimentConfig, data: &Option<PathBuf>) -> Result<SyntheticWorld> {
    match data {
        Some(path) => SyntheticWorld::load(path, &cfg.world, cfg.seed),
        None => generate_synthetic_world(&cfg.world, cfg.seed),
    }
}

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

fn mapping_csv(matrix: &Tensor, row_names: &[String], col_names: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&format!(",{}\n", col_names.join(",")));
    for (i, name) in row_names.iter().enumerate() {
        let cells: Vec<String> = matrix.row(i).iter().map(|&v| sig9(v)).collect();
        out.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    out
}

fn frobenius(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn run_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, force } => {
            let cfg = config.resolve()?;
            refuse_overwrite(&out, force)?;
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            let world = generate_synthetic_world(&cfg.world, cfg.seed)?;
            world.save(&out)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                write_manifest(dir, "gen-data", &cfg, &[&out], serde_json::json!({}))?;
            }
            println!("wrote {}", out.display());
        }
        Command::Train { config, out_dir, data, force } => {
            let cfg = config.resolve()?;
            std::fs::create_dir_all(&out_dir)?;
            let ckpt = out_dir.join("checkpoint.bin");
            let metrics = out_dir.join("metrics.json");
            let losses = out_dir.join("losses.json");
            for p in [&ckpt, &metrics, &losses] {
                refuse_overwrite(p, force)?;
            }
            let world = load_world(&cfg, &data)?;
            let mut out = train(&cfg, &world, None)?;
            let report = out.model.evaluate(&world)?;
            out.model.save_checkpoint(&ckpt)?;
            write_text(&metrics, &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
            write_text(&losses, &format!("{}\n", serde_json::to_string_pretty(&out.epoch_losses)?))?;
            write_manifest(
                &out_dir,
                "train",
                &cfg,
                &[&ckpt, &metrics, &losses],
                serde_json::json!({
                    "steps": out.steps,
                    "fe_batches": out.fe_batches,
                    "au_batches": out.au_batches,
                }),
            )?;
            println!(
                "trained {} steps; expression uar {:.4} war {:.4}; au avg f1 {:.4}",
                out.steps, report.uar, report.war, report.avg_f1
            );
        }
        Command::Evaluate { config, checkpoint, data, out, force } => {
            let cfg = config.resolve()?;
            let world = load_world(&cfg, &data)?;
            let mut model = Model::new(cfg.clone(), None)?;
            model.load_checkpoint(&checkpoint)?;
            let report = model.evaluate(&world)?;
            let text = format!("{}\n", serde_json::to_string_pretty(&report)?);
            if let Some(path) = out {
                refuse_overwrite(&path, force)?;
                write_text(&path, &text)?;
            }
            print!("{text}");
        }
        Command::Ablate { config, grid, seeds, out_dir, force } => {
            let cfg = config.resolve()?;
            std::fs::create_dir_all(&out_dir)?;
            let rows_path = out_dir.join("ablation.json");
            refuse_overwrite(&rows_path, force)?;
            let rows = ablation_suite(&cfg, grid.into(), &seeds)?;
            write_text(&rows_path, &format!("{}\n", serde_json::to_string_pretty(&rows)?))?;
            write_manifest(
                &out_dir,
                "ablate",
                &cfg,
                &[&rows_path],
                serde_json::json!({ "seeds": seeds }),
            )?;
            for row in &rows {
                println!(
                    "{:<24} au-f1 {:.4}  uar {:.4}  war {:.4}",
                    row.label, row.median_avg_f1, row.median_uar, row.median_war
                );
            }
        }
        Command::GradCheck { config, seeds, tolerance } => {
            let cfg = config.resolve()?;
            let mut worst = 0.0f64;
            for s in cfg.seed..cfg.seed + seeds.max(1) {
                let cfg_s = ExperimentConfig { seed: s, ..cfg.clone() };
                let world = generate_synthetic_world(&cfg_s.world, s)?;
                let report = grad_check_full(&cfg_s, &world, 2, 2, 1e-5)?;
                println!(
                    "seed {s}: max relative error {:.3e} at {}",
                    report.max_rel_err, report.worst_param
                );
                worst = worst.max(report.max_rel_err);
            }
            if worst > tolerance {
                return Err(Error::NonFinite(format!(
                    "gradient check exceeded tolerance: {worst:.3e} > {tolerance:.3e}"
                )));
            }
            println!("gradients verified (worst {:.3e} <= {:.3e})", worst, tolerance);
        }
        Command::ExportMapping { config, checkpoint, out_dir, pre_softmax, force } => {
            let cfg = config.resolve()?;
            std::fs::create_dir_all(&out_dir)?;
            let au_to_exp = out_dir.join("au_to_exp.csv");
            let exp_to_au = out_dir.join("exp_to_au.csv");
            for p in [&au_to_exp, &exp_to_au] {
                refuse_overwrite(p, force)?;
            }
            let mut model = Model::new(cfg.clone(), None)?;
            model.load_checkpoint(&checkpoint)?;
            let w_ae = model
                .store
                .by_name(dpm::W_AE)
                .map_err(|_| {
                    Error::Config("this architecture has no mapping matrices to export".into())
                })?
                .value
                .clone();
            let w_ea = match model.store.by_name(dpm::W_EA) {
                Ok(p) => p.value.clone(),
                Err(_) => w_ae.transpose(), // transpose-tied mode
            };
            let frob = {
                let t = w_ae.transpose();
                frobenius(&w_ea, &t)
            };
            let (m_ae, m_ea) = if pre_softmax {
                (w_ae, w_ea)
            } else {
                (row_softmax(&w_ae, cfg.tau_m)?, row_softmax(&w_ea, cfg.tau_m)?)
            };
            let expr_names: Vec<String> =
                crate::facs::EXPR_7.iter().map(|s| s.to_string()).collect();
            let au_names: Vec<String> =
                crate::facs::BP4D_AUS.iter().map(|id| format!("AU{id}")).collect();
            write_text(&au_to_exp, &mapping_csv(&m_ae, &expr_names, &au_names))?;
            write_text(&exp_to_au, &mapping_csv(&m_ea, &au_names, &expr_names))?;
            write_manifest(
                &out_dir,
                "export-mapping",
                &cfg,
                &[&au_to_exp, &exp_to_au],
                serde_json::json!({
                    "pre_softmax": pre_softmax,
                    "frobenius_w_ea_vs_w_ae_transposed": frob,
                }),
            )?;
            println!("wrote {} and {}", au_to_exp.display(), exp_to_au.display());
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Entry point shared by the binary and the integration tests.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
