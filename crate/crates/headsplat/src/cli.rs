//! The `headsplat` command surface: dataset generation, the two training
//! stages, one-shot reconstruction, reenactment from control tracks,
//! evaluation protocols, the latency benchmark, and the scaling experiment.
//!
//! Conventions: `--config` points at a JSON [`RunConfig`] (unknown keys are
//! rejected); individual flags override file values; the resolved config is
//! logged verbatim to stderr. Bad configuration or missing inputs exit with
//! code 2, runtime failures with 1. All artifacts are written atomically
//! (temp file + rename).

use clap::{Parser, Subcommand};
use ndarray::Array1;
use std::path::{Path, PathBuf};

use crate::config::{default_run_config, RunConfig};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::metrics::{AlphaEstimator, EvalOptions, Protocol};
use crate::model::{Model, ReenactSettings};
use crate::reenact::parse_control_track;
use crate::synth;
use crate::train::{self, Checkpoint, TrainSet};

/// Writes bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp-part");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "headsplat", about = "One-shot Gaussian head avatars with a decoupled drive path")]
pub struct Cli {
    /// JSON run configuration; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Backbone width override (scaling runs).
    #[arg(long, global = true)]
    pub width: Option<usize>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate the synthetic dataset (train + heldout splits).
    Datagen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: global pretraining on a dataset directory.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Step-count override.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Stage 2: finetune the texture restorer only.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// One-shot reconstruction: image + source condition -> avatar file.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source portrait PNG.
        #[arg(long)]
        image: PathBuf,
        /// Control track; line 1 is the source condition.
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive an avatar with a control track; one PNG per track line.
    Reenact {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        track: PathBuf,
        /// Output directory for numbered frames.
        #[arg(long)]
        out: PathBuf,
        /// Skip the texture restorer (ablation).
        #[arg(long)]
        no_restore: bool,
    },
    /// Run an evaluation protocol on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `self` or `cross`.
        #[arg(long, default_value = "self")]
        protocol: String,
        /// Output directory (report.csv + summary.json).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_restore: bool,
    },
    /// Latency benchmark: reconstruction vs the per-frame drive loop.
    Bench {
        /// Optional trained checkpoint; fresh weights otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Backbone-width scaling experiment.
    Scaling {
        /// Comma-separated widths, e.g. `64,256`.
        #[arg(long)]
        widths: String,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failure tagged with the process exit code.
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> CliError {
        CliError { code: 2, message: format!("config error: {e}") }
    }
    fn runtime(e: impl std::fmt::Display) -> CliError {
        CliError { code: 1, message: format!("error: {e}") }
    }
}

fn resolve_config(cli: &Cli) -> std::result::Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text).map_err(CliError::config)?
        }
        None => default_run_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(width) = cli.width {
        cfg.model.backbone.width = width;
    }
    cfg.validate().map_err(CliError::config)?;
    eprintln!(
        "resolved config: {}",
        serde_json::to_string(&cfg).map_err(CliError::config)?
    );
    Ok(cfg)
}

fn require_exists(path: &Path) -> std::result::Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::config(format!("missing input path: {}", path.display())));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt))
}

pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    match &cli.cmd {
        Cmd::Datagen { out } => {
            synth::write_dataset(out, &cfg.dataset, cfg.seed).map_err(CliError::runtime)?;
            println!(
                "wrote dataset: {} train + {} heldout identities, {} frames each",
                cfg.dataset.train_identities, cfg.dataset.heldout_identities, cfg.dataset.frames_per_identity
            );
            Ok(())
        }
        Cmd::Pretrain { dataset, out, log, steps } => {
            require_exists(dataset)?;
            let mut tcfg = cfg.pretrain.clone();
            if let Some(s) = steps {
                tcfg.max_steps = *s;
            }
            let set = TrainSet::load(dataset, &tcfg).map_err(CliError::config)?;
            let mut model = Model::init(cfg.model.clone(), cfg.seed).map_err(CliError::config)?;
            let mut opt = train::Adam::new(&tcfg);
            let tl = train::pretrain_with(&mut model, &set, &tcfg, cfg.seed, &mut opt)
                .map_err(CliError::runtime)?;
            let ckpt = Checkpoint::capture(&model, tcfg.max_steps, Some(&opt));
            ckpt.save(out).map_err(CliError::runtime)?;
            if let Some(log_path) = log {
                write_atomic(log_path, tl.to_csv().as_bytes()).map_err(CliError::runtime)?;
            }
            let last = tl.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!("pretrained {} steps, final loss {last:.6}", tcfg.max_steps);
            Ok(())
        }
        Cmd::Finetune { checkpoint, out, log, steps } => {
            require_exists(checkpoint)?;
            let (mut model, stage1) = load_model(checkpoint).map_err(CliError::config)?;
            let mut tcfg = cfg.finetune.clone();
            if let Some(s) = steps {
                tcfg.max_steps = *s;
            }
            let hash = stage1.content_hash().map_err(CliError::runtime)?;
            let (train_ids, _) = synth::identity_seeds(&cfg.dataset, cfg.seed);
            let set = train::make_restoration_set(&model, &cfg.dataset, &cfg.restoration, &train_ids, cfg.seed, hash)
                .map_err(CliError::runtime)?;
            let (tl, opt) = train::finetune(&mut model, &set, &tcfg, cfg.seed).map_err(CliError::runtime)?;
            let ckpt = Checkpoint::capture(&model, stage1.step + tcfg.max_steps, Some(&opt));
            ckpt.save(out).map_err(CliError::runtime)?;
            if let Some(log_path) = log {
                write_atomic(log_path, tl.to_csv().as_bytes()).map_err(CliError::runtime)?;
            }
            println!("finetuned restorer for {} steps on {} pairs", tcfg.max_steps, set.pairs.len());
            Ok(())
        }
        Cmd::Reconstruct { checkpoint, image, track, out } => {
            require_exists(checkpoint)?;
            require_exists(image)?;
            require_exists(track)?;
            let (model, ckpt) = load_model(checkpoint).map_err(CliError::config)?;
            let img = Image::load_png(image).map_err(CliError::runtime)?;
            let text = std::fs::read_to_string(track).map_err(CliError::runtime)?;
            let lines = parse_control_track(&text, model.cfg.alpha.total()).map_err(CliError::config)?;
            let alpha_s = lines
                .first()
                .ok_or_else(|| CliError::config("track has no frames"))?;
            let hash = ckpt.content_hash().map_err(CliError::runtime)?;
            let avatar = model.build_avatar(&img, alpha_s, hash).map_err(CliError::runtime)?;
            let mut buf = Vec::new();
            avatar.state.write_to(&mut buf).map_err(CliError::runtime)?;
            write_atomic(out, &buf).map_err(CliError::runtime)?;
            println!(
                "reconstructed avatar: {} static + {} dynamic gaussians",
                avatar.state.static_set.len(),
                avatar.state.dyn_appearance.colors.nrows()
            );
            Ok(())
        }
        Cmd::Reenact { avatar, checkpoint, track, out, no_restore } => {
            require_exists(avatar)?;
            require_exists(checkpoint)?;
            require_exists(track)?;
            let (model, _) = load_model(checkpoint).map_err(CliError::config)?;
            let bytes = std::fs::read(avatar).map_err(CliError::runtime)?;
            let state = crate::generator::AvatarState::read_from(&mut bytes.as_slice())
                .map_err(CliError::runtime)?;
            let prepared = model.prepare_avatar(state).map_err(CliError::runtime)?;
            let text = std::fs::read_to_string(track).map_err(CliError::runtime)?;
            let lines = parse_control_track(&text, model.cfg.alpha.total()).map_err(CliError::config)?;
            std::fs::create_dir_all(out).map_err(CliError::runtime)?;
            let settings = ReenactSettings { no_restore: *no_restore, parallel: true };
            for (i, alpha) in lines.iter().enumerate() {
                let cam = synth::camera_for_alpha(&cfg.dataset, alpha);
                let frame = model
                    .reenact_with(&prepared, alpha, &cam, &settings)
                    .map_err(CliError::runtime)?;
                frame
                    .save_png(&out.join(format!("frame_{i:04}.png")))
                    .map_err(CliError::runtime)?;
            }
            println!("rendered {} frames to {}", lines.len(), out.display());
            Ok(())
        }
        Cmd::Eval { checkpoint, dataset, protocol, out, no_restore } => {
            require_exists(checkpoint)?;
            require_exists(dataset)?;
            let proto = match protocol.as_str() {
                "self" => Protocol::SelfReenactment,
                "cross" => Protocol::CrossReenactment,
                other => return Err(CliError::config(format!("unknown protocol {other:?}"))),
            };
            let (model, _) = load_model(checkpoint).map_err(CliError::config)?;
            let held = dataset.join("heldout");
            require_exists(&held)?;
            let mut dirs: Vec<_> = std::fs::read_dir(&held)
                .map_err(CliError::runtime)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            let sequences: Vec<Vec<synth::Frame>> = dirs
                .iter()
                .map(|d| synth::read_identity_dir(d))
                .collect::<Result<_>>()
                .map_err(CliError::runtime)?;
            let estimator = AlphaEstimator::fixture().map_err(CliError::runtime)?;
            let opts = EvalOptions { no_restore: *no_restore, ..Default::default() };
            let report = crate::metrics::run_protocol(&model, &sequences, proto, &estimator, &opts)
                .map_err(CliError::runtime)?;
            write_atomic(&out.join("report.csv"), report.to_csv().as_bytes()).map_err(CliError::runtime)?;
            let summary = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
            write_atomic(&out.join("summary.json"), summary.as_bytes()).map_err(CliError::runtime)?;
            println!(
                "{:?}: mean psnr {:?} dB, csim {:.3}, apc {:.3}, aec {:.3}",
                proto, report.mean_psnr_db, report.mean_csim, report.mean_apc, report.mean_aec
            );
            Ok(())
        }
        Cmd::Bench { checkpoint, frames, out } => {
            let model = match checkpoint {
                Some(path) => {
                    require_exists(path)?;
                    load_model(path).map_err(CliError::config)?.0
                }
                None => Model::init(cfg.model.clone(), cfg.seed).map_err(CliError::config)?,
            };
            let n = frames.unwrap_or(cfg.bench_frames);
            let report = crate::bench::benchmark_latency(&model, &cfg.dataset, cfg.seed, n, cfg.bench_warmup)
                .map_err(CliError::runtime)?;
            print!("{}", report.table());
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
                write_atomic(path, json.as_bytes()).map_err(CliError::runtime)?;
            }
            Ok(())
        }
        Cmd::Scaling { widths, frames, out } => {
            let ws: std::result::Result<Vec<usize>, _> =
                widths.split(',').map(|s| s.trim().parse::<usize>()).collect();
            let ws = ws.map_err(|e| CliError::config(format!("bad width list: {e}")))?;
            if ws.is_empty() {
                return Err(CliError::config("empty width list"));
            }
            let n = frames.unwrap_or(cfg.bench_frames);
            let rows = crate::bench::scaling_experiment(&cfg.model, &cfg.dataset, &ws, cfg.seed, n, cfg.bench_warmup)
                .map_err(CliError::runtime)?;
            let table = crate::bench::scaling_table(&rows);
            print!("{table}");
            if let Some(path) = out {
                write_atomic(path, table.as_bytes()).map_err(CliError::runtime)?;
            }
            Ok(())
        }
    }
}

/// Builds a control track from a dataset frame sequence (convenience used by
/// tests and documented in FORMATS.md).
pub fn track_from_frames(frames: &[synth::Frame]) -> String {
    let alphas: Vec<Array1<f64>> = frames.iter().map(|f| f.alpha.clone()).collect();
    crate::reenact::write_control_track(&alphas)
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::runtime(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        // No temp residue.
        let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }
}
