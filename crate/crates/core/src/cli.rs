//! Command-line interface: data generation, training, evaluation,
//! gradient checking and complexity reporting.
//!
//! Exit codes: 0 success, 2 config/argument error, 3 numeric divergence,
//! 4 I/O error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::complexity::{
    count_flops, count_flops_all_attention, count_params, scaling_report, scaling_text,
    PUBLISHED_COMPARISONS, REFERENCE_FLOPS_EXTENT, REFERENCE_GFLOPS, REFERENCE_PARAMS,
};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::network::{ModelConfig, Network};
use crate::svf::{read_svf, write_svf, SvfPayload, SvfVolume};
use crate::tensor::Tensor;
use crate::training::loss::Labels;
use crate::training::run::{evaluate, train, write_history_csv};
use crate::training::synthetic::generate_synthetic;
use crate::training::{SyntheticDataSpec, TrainConfig};

/// Merged run configuration, parsed from JSON with all defaults
/// materialized. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticDataSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.model.in_channels != self.data.channels {
            return Err(Error::Config(format!(
                "model.in_channels {} != data.channels {}",
                self.model.in_channels, self.data.channels
            )));
        }
        if self.model.num_classes != self.data.classes {
            return Err(Error::Config(format!(
                "model.num_classes {} != data.classes {}",
                self.model.num_classes, self.data.classes
            )));
        }
        Ok(())
    }
}

/// Load a config file, apply `--set path=value` overrides on the
/// defaults-materialized tree, and validate.
pub fn load_run_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sparse: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut value = serde_json::to_value(&sparse).expect("config serializes");
    for set in sets {
        apply_set(&mut value, set)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("override: {e}")))?;
    cfg.train.materialize();
    cfg.validate()?;
    Ok(cfg)
}

fn apply_set(value: &mut serde_json::Value, set: &str) -> Result<()> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("--set expects path=value, got '{set}'")))?;
    let new: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() && !cursor.is_array() {
            *cursor = serde_json::json!({});
        }
        let last = i + 1 == parts.len();
        if let Ok(idx) = part.parse::<usize>() {
            let arr = cursor
                .as_array_mut()
                .ok_or_else(|| Error::Argument(format!("--set: '{part}' is not an array index")))?;
            if idx >= arr.len() {
                return Err(Error::Argument(format!("--set: index {idx} out of range")));
            }
            if last {
                arr[idx] = new.clone();
                return Ok(());
            }
            cursor = &mut arr[idx];
        } else {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| Error::Argument(format!("--set: cannot descend into '{part}'")))?;
            if last {
                obj.insert(part.to_string(), new.clone());
                return Ok(());
            }
            cursor = obj.entry(part.to_string()).or_insert(serde_json::json!({}));
        }
    }
    Ok(())
}

#[derive(Parser)]
#[command(
    name = "hyseg",
    about = "Hybrid state-space / transformer 3D segmentation at desk scale",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run-config file ({} uses all defaults).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. --set train.total_steps=500
    #[arg(long = "set")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic (volume, label) SVF pairs plus a manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a model; writes checkpoints, metrics CSV and the effective
    /// config into --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint (step counter resumes).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class dice of a checkpoint over an SVF data directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV output path (default: <data>/eval.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference verification suite.
    GradCheck {
        /// Restrict to one module (tensor-core, embedding, ssm, attention,
        /// training) or an op-name substring.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Analytic parameter/FLOP report for a config.
    Count {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also count FLOPs for a cubic input of this extent.
        #[arg(long)]
        input_extent: Option<usize>,
        /// Write the machine-readable report here as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    index: u64,
    volume: String,
    labels: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: SyntheticDataSpec,
    entries: Vec<ManifestEntry>,
}

fn cmd_gen_data(cfg: RunConfig, out: &Path, count: usize) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let (vol, lab) = generate_synthetic::<f32>(&cfg.data, i)?;
        let vol_name = format!("vol_{i:04}.svf");
        let lab_name = format!("lab_{i:04}.svf");
        write_svf(
            out.join(&vol_name),
            &SvfVolume::f32_volume(vol.shape().to_vec(), vol.data().to_vec())?,
        )?;
        write_svf(
            out.join(&lab_name),
            &SvfVolume::label_volume(lab.shape.clone(), lab.data.clone())?,
        )?;
        entries.push(ManifestEntry {
            index: i,
            volume: vol_name,
            labels: lab_name,
        });
    }
    let manifest = Manifest {
        spec: cfg.data.clone(),
        entries,
    };
    let path = out.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&path, e))?;
    println!("wrote {count} volume/label pairs + manifest to {}", out.display());
    Ok(())
}

fn persist_effective_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = out.join("effective_config.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(cfg).expect("config serializes"),
    )
    .map_err(|e| Error::io(&path, e))
}

fn cmd_train(cfg: RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    persist_effective_config(&cfg, out)?;
    let (mut net, start_step) = match resume {
        Some(path) => {
            let (net, step) = load_checkpoint::<f32>(path)?;
            if net.config != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            println!("resuming from {} at step {step}", path.display());
            (net, step)
        }
        None => (Network::<f32>::new(cfg.model.clone(), cfg.train.seed)?, 0),
    };
    let ckpt_path = out.join("checkpoint.smfc");
    let outcome = train(&mut net, &cfg.train, &cfg.data, start_step, |row, net| {
        let dice_str = row
            .dice
            .iter()
            .map(|d| format!("{d:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!(
            "step {:>6}  lr {:.3e}  loss {:.4}  val dice [{}]",
            row.step, row.lr, row.loss, dice_str
        );
        save_checkpoint(net, row.step as u64 + 1, &ckpt_path)
    })?;
    save_checkpoint(&mut net, outcome.next_step, &ckpt_path)?;
    write_history_csv(out.join("metrics.csv"), &outcome.history)?;
    println!(
        "done: {} steps, final loss {:.4}, checkpoint {}",
        outcome.next_step,
        outcome.final_loss,
        ckpt_path.display()
    );
    Ok(())
}

fn load_svf_pairs(dir: &Path) -> Result<Vec<(Tensor<f32>, Labels)>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let vol = read_svf(dir.join(&entry.volume))?;
        let lab = read_svf(dir.join(&entry.labels))?;
        let SvfPayload::F32(vdata) = vol.payload else {
            return Err(Error::Data(format!("{} is not an f32 volume", entry.volume)));
        };
        let SvfPayload::U8(ldata) = lab.payload else {
            return Err(Error::Data(format!("{} is not a label volume", entry.labels)));
        };
        out.push((
            Tensor::from_vec(vdata, &vol.extents)?,
            Labels::new(lab.extents, ldata)?,
        ));
    }
    Ok(out)
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (net, _) = load_checkpoint::<f32>(checkpoint)?;
    let pairs = load_svf_pairs(data)?;
    let report = evaluate(&net, &pairs)?;
    let mut csv = String::from("class,dice\n");
    println!("per-class dice over {} volumes:", report.volumes);
    for (c, d) in report.per_class.iter().enumerate() {
        println!("  class {c}: {d:.4}");
        csv.push_str(&format!("{c},{d}\n"));
    }
    let mf = report.mean_foreground();
    println!("  mean foreground: {mf:.4}");
    csv.push_str(&format!("mean_foreground,{mf}\n"));
    let csv_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| data.join("eval.csv"));
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

fn cmd_grad_check(module: Option<&str>, tol: f64) -> Result<bool> {
    let results = gradsuite::run_suite(module, tol)?;
    if results.is_empty() {
        return Err(Error::Argument(format!(
            "no checks match filter '{}'",
            module.unwrap_or("")
        )));
    }
    print!("{}", gradsuite::format_results(&results));
    Ok(results.iter().all(|r| r.pass()))
}

fn cmd_count(cfg: &ModelConfig, input_extent: Option<usize>, csv: Option<&Path>) -> Result<()> {
    let report = match input_extent {
        Some(e) => count_flops(cfg, e)?,
        None => count_params(cfg)?,
    };
    print!("{}", report.to_text());
    let params = report.total_params() as f64;
    println!(
        "\nparameters: {} ({:+.1}% vs published {:.2}M)",
        report.total_params(),
        (params / REFERENCE_PARAMS - 1.0) * 100.0,
        REFERENCE_PARAMS / 1e6
    );
    if let Some(e) = input_extent {
        let flops = report.total_flops() as f64;
        print!(
            "flops at {e}^3: {:.2} GFLOPs",
            flops / 1e9
        );
        if e == REFERENCE_FLOPS_EXTENT {
            println!(
                " ({:+.1}% vs published {REFERENCE_GFLOPS} GFLOPs; published input resolution assumed to be {REFERENCE_FLOPS_EXTENT}^3)",
                (flops / (REFERENCE_GFLOPS * 1e9) - 1.0) * 100.0
            );
        } else {
            println!(" (published reference {REFERENCE_GFLOPS} GFLOPs is quoted at {REFERENCE_FLOPS_EXTENT}^3)");
        }
        let dense = count_flops_all_attention(cfg, e)?.total_flops();
        println!(
            "all-attention variant at {e}^3: {:.2} GFLOPs (x{:.1} the hybrid)",
            dense as f64 / 1e9,
            dense as f64 / flops
        );
    }
    println!("\nscaling (stage-1 sequence mixing):");
    let rows = scaling_report(cfg, &[16, 32, 64])?;
    print!("{}", scaling_text(&rows));
    println!("\npublished comparisons (params M / GFLOPs):");
    for (name, p, f) in PUBLISHED_COMPARISONS {
        println!("  {name:<12} {p:>7.2} / {f:.1}");
    }
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
        println!("\nwrote CSV report to {}", path.display());
    }
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn run() -> u8 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData { cfg, out, count } => {
            load_run_config(&cfg.config, &cfg.sets).and_then(|c| cmd_gen_data(c, &out, count))
        }
        Command::Train { cfg, out, resume } => load_run_config(&cfg.config, &cfg.sets)
            .and_then(|c| cmd_train(c, &out, resume.as_deref())),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&checkpoint, &data, out.as_deref()),
        Command::GradCheck { module, tol } => match cmd_grad_check(module.as_deref(), tol) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient checks failed");
                return 1;
            }
            Err(e) => Err(e),
        },
        Command::Count {
            cfg,
            input_extent,
            csv,
        } => load_run_config(&cfg.config, &cfg.sets)
            .and_then(|c| cmd_count(&c.model, input_extent, csv.as_deref())),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_materializes_all_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, "{}").unwrap();
        let cfg = load_run_config(&path, &[]).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train.warmup_steps, Some(cfg.train.total_steps / 20));
    }

    #[test]
    fn unknown_keys_rejected_with_field_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"train": {"totle_steps": 10}}"#).unwrap();
        let err = load_run_config(&path, &[]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("totle_steps"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn set_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, "{}").unwrap();
        let cfg = load_run_config(
            &path,
            &[
                "train.total_steps=500".into(),
                "train.seed=9".into(),
                "model.stages.0.depth=1".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.total_steps, 500);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.model.stages[0].depth, 1);
    }

    #[test]
    fn mismatched_model_and_data_channels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"data": {"channels": 2}}"#).unwrap();
        let err = load_run_config(&path, &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
