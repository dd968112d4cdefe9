//! End-to-end commands shared by the CLI and tests: train a metric embedding,
//! evaluate the one-shot protocol, export PNGs and embeddings, and run the
//! miner/weight ablation grid. Evaluation always encodes with the checkpoint's
//! stored config so queries match the trained input shape.

use crate::config::RunSpec;
use crate::encode::{self, EncodeError};
use crate::metric::MinerMode;
use crate::oneshot::{self, EvalReport, OneshotError};
use crate::signal::{load_manifest, load_signal_csv, SignalError};
use crate::train::{self, EpochRecord, TrainError};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("MissingField: the {command} command requires config key {field:?}")]
    MissingField {
        command: &'static str,
        field: &'static str,
    },
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Oneshot(#[from] OneshotError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn required(
    value: &Option<String>,
    command: &'static str,
    field: &'static str,
) -> Result<PathBuf> {
    value
        .as_deref()
        .map(PathBuf::from)
        .ok_or(PipelineError::MissingField { command, field })
}

// ── train ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history_csv: PathBuf,
    pub final_epoch: EpochRecord,
    pub config_digest: String,
}

/// Trains on the protocol's auxiliary classes and writes the checkpoint plus
/// a per-epoch history CSV next to it.
pub fn run_train(spec: &RunSpec, out: Option<&Path>) -> Result<TrainOutcome> {
    let manifest_path = required(&spec.manifest, "train", "manifest")?;
    let protocol_path = required(&spec.protocol, "train", "protocol")?;
    let manifest = load_manifest(manifest_path)?;
    let protocol = oneshot::load_protocol(protocol_path)?;

    let (params, history) = train::train(&manifest, &protocol.aux_classes, &spec.train)?;

    let checkpoint = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("model.ckpt"));
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    train::save_checkpoint(&params, &spec.train, &checkpoint)?;
    let history_csv = checkpoint.with_extension("history.csv");
    history.write_csv(&history_csv)?;

    Ok(TrainOutcome {
        checkpoint,
        history_csv,
        final_epoch: history.epochs.last().expect("at least one epoch").clone(),
        config_digest: spec.digest(),
    })
}

// ── eval ─────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub config_digest: String,
    pub report_path: Option<PathBuf>,
}

/// Loads a checkpoint and runs the one-shot protocol. With `out`, the full
/// report (accuracies, confusion matrix, config digest) is written as JSON.
pub fn run_eval(spec: &RunSpec, out: Option<&Path>) -> Result<EvalOutcome> {
    let manifest_path = required(&spec.manifest, "eval", "manifest")?;
    let protocol_path = required(&spec.protocol, "eval", "protocol")?;
    let checkpoint_path = required(&spec.checkpoint, "eval", "checkpoint")?;
    let manifest = load_manifest(manifest_path)?;
    let protocol = oneshot::load_protocol(protocol_path)?;
    let (params, ckpt_cfg) = train::load_checkpoint(checkpoint_path)?;

    let report = oneshot::evaluate(&params, &manifest, &protocol, &ckpt_cfg)?;
    let config_digest = spec.digest();

    let report_path = match out {
        Some(path) => {
            let mut value = serde_json::to_value(&report).expect("report serializes");
            value
                .as_object_mut()
                .expect("report is an object")
                .insert("config_digest".into(), config_digest.clone().into());
            std::fs::write(path, serde_json::to_string_pretty(&value).expect("serializes"))?;
            Some(path.to_path_buf())
        }
        None => None,
    };

    Ok(EvalOutcome {
        report,
        config_digest,
        report_path,
    })
}

// ── encode ───────────────────────────────────────────────────────────────────

/// Encodes every manifest entry and writes `<out>/<label>/<stem>.png`.
/// Returns the number of images written.
pub fn run_encode(spec: &RunSpec, out: Option<&Path>) -> Result<usize> {
    let manifest_path = required(&spec.manifest, "encode", "manifest")?;
    let manifest = load_manifest(manifest_path)?;
    let out_dir = out.unwrap_or_else(|| Path::new("encoded"));

    let mut written = 0;
    for entry in &manifest.entries {
        let matrix = load_signal_csv(&entry.path)?;
        let image = encode::encode_tagged(
            &matrix,
            spec.train.target_width,
            &entry.path.display().to_string(),
        )?;
        let dir = out_dir.join(&entry.label);
        std::fs::create_dir_all(&dir)?;
        let stem = entry
            .path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("signal");
        let mut target = dir.join(format!("{stem}.png"));
        let mut suffix = 1;
        while target.exists() {
            target = dir.join(format!("{stem}_{suffix}.png"));
            suffix += 1;
        }
        encode::export_png(&image, &target)?;
        written += 1;
    }
    Ok(written)
}

// ── export-embeddings ────────────────────────────────────────────────────────

/// Embeds every evaluation query with a trained checkpoint and writes the TSV
/// (path, label, predicted, distance, 128 embedding values).
pub fn run_export(spec: &RunSpec, out: Option<&Path>) -> Result<PathBuf> {
    let manifest_path = required(&spec.manifest, "export-embeddings", "manifest")?;
    let protocol_path = required(&spec.protocol, "export-embeddings", "protocol")?;
    let checkpoint_path = required(&spec.checkpoint, "export-embeddings", "checkpoint")?;
    let manifest = load_manifest(manifest_path)?;
    let protocol = oneshot::load_protocol(protocol_path)?;
    let (params, ckpt_cfg) = train::load_checkpoint(checkpoint_path)?;

    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("embeddings.tsv"));
    oneshot::export_embeddings(&params, &manifest, &protocol, &ckpt_cfg, &path)?;
    Ok(path)
}

// ── ablate ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub miner: &'static str,
    pub alpha: f64,
    pub beta: f64,
    pub accuracy: f64,
    pub final_total: f64,
}

/// The miner x loss-weight grid, trained and evaluated sequentially with the
/// shared seed. Rows arrive in grid order: standard then literal miner, each
/// with (α,β) ∈ {(1,0), (0,1), (0.5,0.5)}.
pub fn run_ablate(spec: &RunSpec, out: Option<&Path>) -> Result<(Vec<AblationRow>, PathBuf)> {
    let manifest_path = required(&spec.manifest, "ablate", "manifest")?;
    let protocol_path = required(&spec.protocol, "ablate", "protocol")?;
    let manifest = load_manifest(manifest_path)?;
    let protocol = oneshot::load_protocol(protocol_path)?;

    const MINERS: [(MinerMode, &str); 2] = [
        (MinerMode::Standard, "standard"),
        (MinerMode::Literal, "literal-eq3"),
    ];
    const WEIGHTINGS: [(f64, f64); 3] = [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5)];

    let mut rows = Vec::with_capacity(6);
    for (mode, miner) in MINERS {
        for (alpha, beta) in WEIGHTINGS {
            let mut cfg = spec.train.clone();
            cfg.miner_mode = mode;
            cfg.weights.alpha = alpha;
            cfg.weights.beta = beta;
            let (params, history) = train::train(&manifest, &protocol.aux_classes, &cfg)?;
            let report = oneshot::evaluate(&params, &manifest, &protocol, &cfg)?;
            rows.push(AblationRow {
                miner,
                alpha,
                beta,
                accuracy: report.accuracy,
                final_total: history.epochs.last().expect("trained").total,
            });
        }
    }

    let mut csv = String::from("miner,alpha,beta,accuracy\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.miner, r.alpha, r.beta, r.accuracy);
    }
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("ablation.csv"));
    std::fs::write(&path, csv)?;
    Ok((rows, path))
}
