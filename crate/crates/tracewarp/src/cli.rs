//! Command-line surface: dataset synthesis, training, inference,
//! evaluation, gradient checking, and the ablation comparison.
//!
//! Every run writes a `run.json` echoing the fully resolved configuration
//! and seed, so any output can be reproduced from its directory alone.
//! Exit codes: 0 success, 2 usage/config error, 3 data/checkpoint error,
//! 4 numerical failure.

use crate::data::{
    self, dataset_checksum, generate_dataset, load_dataset, load_png, save_dataset, save_png,
    ImagePair, SynthConfig,
};
use crate::deformation::{flow_to_rgb, write_twf};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport};
use crate::gradcheck;
use crate::model::{infer, ModelOutput, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{self, fit_from, load_state, TrainConfig};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// Deformable image translation with a traceable deformation field.
#[derive(Parser, Debug)]
#[command(name = "tracewarp", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired dataset with known ground-truth fields.
    Synth {
        /// SynthConfig file (TOML or JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory (70/30 train/test split by dataset seed).
    Train {
        /// TrainConfig file (TOML or JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, training CSV, run.json.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a checkpoint on one grayscale PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input grayscale PNG; sides must be multiples of 32.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Protocol::Standard)]
        protocol: Protocol,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Finite-difference verification of every operation and composite loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the report and run.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train the three ablation presets on one seed and compare them.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base TrainConfig file; presets override alpha/gamma.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Shared seed for all presets.
        #[arg(long)]
        seed: Option<u64>,
        /// Epoch override for all presets.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Standard,
    Correspondence,
    Traceability,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

pub const TRAIN_FRACTION: f64 = 0.7;

/// Run one parsed command. The binary maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { config, out } => cmd_synth(config.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(config.as_deref(), &data, &out, resume.as_deref()),
        Command::Infer { ckpt, input, out } => cmd_infer(&ckpt, &input, &out),
        Command::Eval {
            ckpt,
            data,
            out,
            protocol,
            split,
        } => cmd_eval(&ckpt, &data, &out, protocol, split),
        Command::Gradcheck { seed, out } => cmd_gradcheck(seed, &out),
        Command::Ablate {
            data,
            out,
            config,
            seed,
            epochs,
        } => cmd_ablate(&data, &out, config.as_deref(), seed, epochs),
    }
}

/// TRACEWARP_THREADS caps internal parallelism. Results are identical for
/// any thread count; only wall time changes.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TRACEWARP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("TRACEWARP_THREADS must be an integer, got {v}")))?;
        if n == 0 {
            return Err(Error::Config("TRACEWARP_THREADS must be >= 1".into()));
        }
        // Ignore failure: the global pool may already exist (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn write_run_json(dir: &Path, command: &str, seed: u64, config: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let run = serde_json::json!({
        "command": command,
        "seed": seed,
        "config": config,
    });
    let text = serde_json::to_string_pretty(&run)
        .map_err(|e| Error::Config(format!("run.json serialization: {e}")))?;
    std::fs::write(dir.join("run.json"), text)?;
    Ok(())
}

fn config_json<T: serde::Serialize>(cfg: &T) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Error::Config(format!("config serialization: {e}")))
}

// ── synth ───────────────────────────────────────────────────────────

fn cmd_synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => SynthConfig::from_file(p)?,
        None => SynthConfig::default(),
    };
    cfg.validate()?;
    let pairs = generate_dataset(&cfg)?;
    std::fs::create_dir_all(out)?;
    let manifest = save_dataset(out, &cfg, &pairs)?;
    write_run_json(out, "synth", cfg.seed, config_json(&cfg)?)?;
    println!(
        "wrote {} pairs to {} (checksum {})",
        manifest.pairs.len(),
        out.display(),
        dataset_checksum(&manifest)
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Config(format!(
            "{what} directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

/// Load a dataset and apply the deterministic 70/30 split keyed by the
/// dataset seed (not the training seed, so every config sees one split).
pub fn load_split(data: &Path) -> Result<(SynthConfig, Vec<ImagePair>, Vec<ImagePair>)> {
    let (synth_cfg, pairs) = load_dataset(data)?;
    let (train, test) = data::split(pairs, TRAIN_FRACTION, synth_cfg.seed)?;
    Ok((synth_cfg, train, test))
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    require_dir(data, "data")?;
    let mut cfg = match config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    let (synth_cfg, train_pairs, _) = load_split(data)?;
    if cfg.image_size != synth_cfg.image_size {
        cfg.image_size = synth_cfg.image_size;
    }
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    write_run_json(out, "train", cfg.seed, config_json(&cfg)?)?;

    let state = match resume {
        Some(ckpt) => {
            let (state, saved_cfg) = load_state(ckpt)?;
            if saved_cfg != cfg {
                println!("note: resuming with the checkpoint's config");
                cfg = saved_cfg;
            }
            state
        }
        None => trainer::init_state(&cfg)?,
    };
    let started = std::time::Instant::now();
    let (_state, log) = fit_from(state, &train_pairs, &cfg, Some(out))?;
    let total_ms: u128 = log.records.iter().map(|r| r.wall_ms).sum();
    println!(
        "trained {} epochs on {} pairs in {:.1}s (wall {:.1}s); checkpoint and log in {}",
        log.records.len(),
        train_pairs.len(),
        total_ms as f64 / 1000.0,
        started.elapsed().as_secs_f64(),
        out.display()
    );
    if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
        println!(
            "train L1: {:.4} -> {:.4}; MAE snapshot: {:.2} -> {:.2}",
            first.means.l1_trans, last.means.l1_trans, first.mae_snapshot, last.mae_snapshot
        );
    }
    Ok(())
}

// ── infer ───────────────────────────────────────────────────────────

fn load_model_for_infer(ckpt: &Path) -> Result<(ModelParams<f32>, TrainConfig)> {
    let (state, cfg) = load_state(ckpt)?;
    Ok((state.params, cfg))
}

fn cmd_infer(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let (params, cfg) = load_model_for_infer(ckpt)?;
    let x = load_png(input)?;
    let (_, _, h, w) = x.dims4()?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Config(format!(
            "input image sides must be multiples of 32, got {h}x{w}"
        )));
    }
    std::fs::create_dir_all(out)?;
    write_run_json(out, "infer", cfg.seed, config_json(&cfg)?)?;
    let outputs = infer(&params, &x, cfg.integration_steps)?;
    save_png(&outputs.y_trans, &out.join("y_trans.png"))?;
    save_png(&outputs.y_warp, &out.join("y_warp.png"))?;
    write_twf(&out.join("field.twf"), outputs.displacement.grid())?;
    flow_to_rgb(outputs.displacement.grid())?.save(out.join("flow.png"))?;
    save_overlay(&outputs, &out.join("overlay.png"))?;
    println!(
        "wrote y_trans.png, y_warp.png, field.twf, flow.png, overlay.png to {}",
        out.display()
    );
    Ok(())
}

/// Edge overlay: edges of the deformed source drawn over the predicted
/// translation, to eyeball the structural agreement of the two streams.
fn save_overlay(outputs: &ModelOutput<f32>, path: &Path) -> Result<()> {
    let edges = eval::sobel_edges(&outputs.y_warp, eval::EDGE_QUANTILE)?;
    let (_, _, h, w) = outputs.y_trans.dims4()?;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = ((outputs.y_trans.at4(0, 0, r, c) + 1.0) * 127.5)
                .round()
                .clamp(0.0, 255.0) as u8;
            let px = if edges.mask[r * w + c] {
                image::Rgb([255u8, 48, 48])
            } else {
                image::Rgb([v, v, v])
            };
            img.put_pixel(c as u32, r as u32, px);
        }
    }
    img.save(path)?;
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

fn select_split(split: Split, train: Vec<ImagePair>, test: Vec<ImagePair>) -> Vec<ImagePair> {
    match split {
        Split::Train => train,
        Split::Test => test,
        Split::All => {
            let mut all = train;
            all.extend(test);
            all.sort_by(|a, b| a.id.cmp(&b.id));
            all
        }
    }
}

fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, protocol: Protocol, split: Split) -> Result<()> {
    require_dir(data, "data")?;
    let (params, cfg) = load_model_for_infer(ckpt)?;
    let (_, train_pairs, test_pairs) = load_split(data)?;
    let pairs = select_split(split, train_pairs, test_pairs);
    let forward = |x: &Tensor<f32>| infer(&params, x, cfg.integration_steps);
    let report = match protocol {
        Protocol::Standard => eval::standard_eval(forward, &pairs)?,
        Protocol::Correspondence => eval::correspondence_eval(forward, &pairs)?,
        Protocol::Traceability => eval::traceability_eval(forward, &pairs)?,
    };
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, report.to_csv_string())?;
    let run_dir = out.parent().unwrap_or(Path::new("."));
    write_run_json(run_dir, "eval", cfg.seed, config_json(&cfg)?)?;
    print_report_summary(&report);
    println!("wrote {}", out.display());
    Ok(())
}

fn print_report_summary(report: &MetricReport) {
    let mut parts = Vec::new();
    for col in &report.columns {
        if let Some(s) = report.summary(&col.name) {
            parts.push(format!("{} {:.4} (±{:.4})", col.name, s.mean, s.std));
        }
    }
    println!("{}", parts.join("  "));
}

// ── gradcheck ───────────────────────────────────────────────────────

fn cmd_gradcheck(seed: u64, out: &Path) -> Result<()> {
    let report = gradcheck::run_sweep(seed)?;
    print!("{}", report.to_table_string());
    write_run_json(out, "gradcheck", seed, serde_json::json!({ "seed": seed }))?;
    std::fs::write(out.join("gradcheck.txt"), report.to_table_string())?;
    if !report.all_passed() {
        return Err(Error::Numeric(format!(
            "gradient check failed: worst relative error {:.3e}",
            report.max_rel_err()
        )));
    }
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────

/// The three ablation presets, in fidelity-table order.
pub fn ablation_presets(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    vec![
        (
            "trans_only",
            TrainConfig {
                alpha: 1.0,
                ..*base
            },
        ),
        (
            "two_stream_gamma0",
            TrainConfig {
                alpha: 0.5,
                gamma: 0.0,
                ..*base
            },
        ),
        (
            "full",
            TrainConfig {
                alpha: 0.5,
                gamma: 1.0,
                ..*base
            },
        ),
    ]
}

pub struct AblationRow {
    pub preset: String,
    pub standard: MetricReport,
    pub correspondence: MetricReport,
    pub traceability: MetricReport,
}

/// Train all presets with a shared seed and evaluate every protocol on the
/// test split. Runs presets in parallel; results are deterministic.
pub fn run_ablation(
    train_pairs: &[ImagePair],
    test_pairs: &[ImagePair],
    base: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let presets = ablation_presets(base);
    presets
        .into_par_iter()
        .map(|(name, cfg)| {
            let preset_dir = match out_dir {
                Some(d) => {
                    let p = d.join(name);
                    std::fs::create_dir_all(&p)?;
                    Some(p)
                }
                None => None,
            };
            let (state, _log) = trainer::fit(train_pairs, &cfg, preset_dir.as_deref())?;
            let forward = |x: &Tensor<f32>| infer(&state.params, x, cfg.integration_steps);
            Ok(AblationRow {
                preset: name.to_string(),
                standard: eval::standard_eval(forward, test_pairs)?,
                correspondence: eval::correspondence_eval(forward, test_pairs)?,
                traceability: eval::traceability_eval(forward, test_pairs)?,
            })
        })
        .collect()
}

/// Summary CSV: one row per preset, fidelity columns first, then
/// correspondence, then traceability.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "preset,mae,ssim_pct,psnr_db,nmi,edge_dice_pct,masked_dice_pct,edge_ssim_pct,\
         edge_psnr_db,edge_nmi,trace_mae,trace_ssim_pct,endpoint_error_px,fold_fraction\n",
    );
    for row in rows {
        let s = |r: &MetricReport, c: &str| format!("{:.6}", r.mean_of(c));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.preset,
            s(&row.standard, "mae"),
            s(&row.standard, "ssim_pct"),
            s(&row.standard, "psnr_db"),
            s(&row.standard, "nmi"),
            s(&row.correspondence, "edge_dice_pct"),
            s(&row.correspondence, "masked_dice_pct"),
            s(&row.correspondence, "edge_ssim_pct"),
            s(&row.correspondence, "edge_psnr_db"),
            s(&row.correspondence, "edge_nmi"),
            s(&row.traceability, "trace_mae"),
            s(&row.traceability, "trace_ssim_pct"),
            s(&row.traceability, "endpoint_error_px"),
            s(&row.traceability, "fold_fraction"),
        ));
    }
    out
}

fn cmd_ablate(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    require_dir(data, "data")?;
    let mut base = match config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        base.seed = s;
    }
    if let Some(e) = epochs {
        base.epochs = e;
    }
    let (synth_cfg, train_pairs, test_pairs) = load_split(data)?;
    base.image_size = synth_cfg.image_size;
    base.validate()?;
    std::fs::create_dir_all(out)?;
    write_run_json(out, "ablate", base.seed, config_json(&base)?)?;

    let rows = run_ablation(&train_pairs, &test_pairs, &base, Some(out))?;
    let csv = ablation_csv(&rows);
    std::fs::write(out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_cover_the_three_configurations() {
        let base = TrainConfig::default();
        let presets = ablation_presets(&base);
        assert_eq!(presets.len(), 3);
        assert_eq!(presets[0].0, "trans_only");
        assert_eq!(presets[0].1.alpha, 1.0);
        assert_eq!(presets[1].0, "two_stream_gamma0");
        assert_eq!((presets[1].1.alpha, presets[1].1.gamma), (0.5, 0.0));
        assert_eq!(presets[2].0, "full");
        assert_eq!((presets[2].1.alpha, presets[2].1.gamma), (0.5, 1.0));
    }

    #[test]
    fn clap_rejects_unknown_flags() {
        let res = Cli::try_parse_from(["tracewarp", "synth", "--out", "x", "--bogus"]);
        assert!(res.is_err());
        // Clap reports usage errors with exit code 2.
        assert_eq!(res.unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_data_dir_is_a_usage_error() {
        let err = cmd_train(
            None,
            Path::new("/nonexistent/dataset"),
            Path::new("/tmp/unused_out"),
            None,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
