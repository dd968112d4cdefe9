//! One-shot evaluation: a single reference per unseen class defines an
//! embedding bank; queries classify to the nearest reference. Includes the
//! NTU-style split protocol, auxiliary-set reduction, embedding export, and
//! a 2-d PCA projection for plots.

use crate::encode::{self, EncodeError, SignalImage};
use crate::net::{self, EmbeddingVec, ModelParams, NetError};
use crate::signal::{load_signal_csv, DatasetManifest, ManifestEntry, SignalError};
use crate::train::TrainConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum OneshotError {
    #[error("MissingFile: {path}")]
    MissingFile { path: String },
    #[error("MalformedProtocol: {path}: {reason}")]
    MalformedProtocol { path: String, reason: String },
    #[error("ProtocolInvalid: {reason}")]
    ProtocolInvalid { reason: String },
    #[error("ReferenceNotFound: class {class:?} matched no manifest entry")]
    ReferenceNotFound { class: String },
    #[error("AmbiguousReference: class {class:?} matched {count} manifest entries")]
    AmbiguousReference { class: String, count: usize },
    #[error("EmptyBank: the reference bank has no entries")]
    EmptyBank,
    #[error("NoQueries: class {class:?} has no query samples besides its reference")]
    NoQueries { class: String },
    #[error("KeepOutOfRange: keep {keep} is not within 1..={available}")]
    KeepOutOfRange { keep: usize, available: usize },
    #[error("DegenerateData: all vectors are identical, no principal direction exists")]
    DegenerateData,
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, OneshotError>;

// ── Split protocols ──────────────────────────────────────────────────────────

/// How one evaluation class finds its single reference sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReferenceRule {
    /// File basename must start with this prefix (among entries of the class).
    Prefix { prefix: String },
    /// Entry path must end with these path components.
    Path { path: String },
}

/// Which classes train the embedding, which are held out, and where each
/// held-out class's reference comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub aux_classes: Vec<String>,
    pub eval_classes: Vec<String>,
    pub references: BTreeMap<String, ReferenceRule>,
}

impl SplitProtocol {
    /// Checks the structural invariants: disjoint class sets and one
    /// reference rule per evaluation class.
    pub fn validate(&self) -> Result<()> {
        let aux: BTreeSet<&str> = self.aux_classes.iter().map(String::as_str).collect();
        let eval: BTreeSet<&str> = self.eval_classes.iter().map(String::as_str).collect();
        if eval.is_empty() {
            return Err(OneshotError::ProtocolInvalid {
                reason: "eval_classes is empty".into(),
            });
        }
        if let Some(shared) = aux.intersection(&eval).next() {
            return Err(OneshotError::ProtocolInvalid {
                reason: format!("class {shared:?} appears in both aux and eval sets"),
            });
        }
        for class in &eval {
            if !self.references.contains_key(*class) {
                return Err(OneshotError::ProtocolInvalid {
                    reason: format!("eval class {class:?} has no reference rule"),
                });
            }
        }
        Ok(())
    }

    /// Evaluation classes in ascending id order.
    pub fn eval_sorted(&self) -> Vec<String> {
        let mut v = self.eval_classes.clone();
        v.sort();
        v
    }
}

pub fn load_protocol(path: impl AsRef<Path>) -> Result<SplitProtocol> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(OneshotError::MissingFile {
            path: path.display().to_string(),
        });
    }
    let text = std::fs::read_to_string(path)?;
    let protocol: SplitProtocol =
        serde_json::from_str(&text).map_err(|e| OneshotError::MalformedProtocol {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    protocol.validate()?;
    Ok(protocol)
}

pub fn save_protocol(protocol: &SplitProtocol, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(protocol).expect("protocol serializes");
    std::fs::write(path, text)?;
    Ok(())
}

/// The 120-action one-shot split: every sixth action starting at A1 is held
/// out (20 classes), the other 100 train the embedding. References come from
/// the fixed demonstration recording, whose filename prefix depends on
/// whether the action id is below 60.
pub fn ntu_oneshot_split() -> SplitProtocol {
    let eval_ids: Vec<usize> = (0..20).map(|k| 1 + 6 * k).collect();
    let eval_set: BTreeSet<usize> = eval_ids.iter().copied().collect();
    let eval_classes: Vec<String> = eval_ids.iter().map(|id| format!("A{id}")).collect();
    let aux_classes: Vec<String> = (1..=120)
        .filter(|id| !eval_set.contains(id))
        .map(|id| format!("A{id}"))
        .collect();
    let references = eval_ids
        .iter()
        .map(|&id| {
            let prefix = if id < 60 {
                "S001C003P008R001"
            } else {
                "S018C003P008R001"
            };
            (
                format!("A{id}"),
                ReferenceRule::Prefix {
                    prefix: prefix.to_string(),
                },
            )
        })
        .collect();
    SplitProtocol {
        aux_classes,
        eval_classes,
        references,
    }
}

/// Shrinks the auxiliary set to a seeded uniform subset of `keep` classes;
/// evaluation classes and references are untouched.
pub fn reduced_aux_split(base: &SplitProtocol, keep: usize, seed: u64) -> Result<SplitProtocol> {
    let available = base.aux_classes.len();
    if keep == 0 || keep > available {
        return Err(OneshotError::KeepOutOfRange { keep, available });
    }
    let mut sorted = base.aux_classes.clone();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<String> = sorted
        .choose_multiple(&mut rng, keep)
        .cloned()
        .collect();
    kept.sort();
    Ok(SplitProtocol {
        aux_classes: kept,
        eval_classes: base.eval_classes.clone(),
        references: base.references.clone(),
    })
}

// ── Reference banks and classification ───────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub class: String,
    pub embedding: EmbeddingVec,
    pub source: PathBuf,
}

/// One reference embedding per evaluation class, ascending class id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingBank {
    pub entries: Vec<BankEntry>,
}

fn file_name(path: &Path) -> &str {
    path.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

fn resolve_reference<'a>(
    manifest: &'a DatasetManifest,
    class: &str,
    rule: &ReferenceRule,
) -> Result<&'a ManifestEntry> {
    let matches: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.label == class)
        .filter(|e| match rule {
            ReferenceRule::Prefix { prefix } => file_name(&e.path).starts_with(prefix.as_str()),
            ReferenceRule::Path { path } => e.path.ends_with(path),
        })
        .collect();
    match matches.len() {
        0 => Err(OneshotError::ReferenceNotFound {
            class: class.to_string(),
        }),
        1 => Ok(matches[0]),
        count => Err(OneshotError::AmbiguousReference {
            class: class.to_string(),
            count,
        }),
    }
}

fn embed_entry(p: &ModelParams, entry: &ManifestEntry, cfg: &TrainConfig) -> Result<EmbeddingVec> {
    let matrix = load_signal_csv(&entry.path)?;
    let image = encode::encode_tagged(
        &matrix,
        cfg.target_width,
        &entry.path.display().to_string(),
    )?;
    embed_image(p, &image)
}

fn embed_image(p: &ModelParams, image: &SignalImage) -> Result<EmbeddingVec> {
    let mut pass = net::forward(p, &[image], false)?;
    Ok(pass.embeddings.pop().expect("one embedding per image"))
}

/// Encodes and embeds exactly one reference sample per evaluation class.
pub fn build_reference_bank(
    p: &ModelParams,
    manifest: &DatasetManifest,
    protocol: &SplitProtocol,
    cfg: &TrainConfig,
) -> Result<EmbeddingBank> {
    protocol.validate()?;
    let mut entries = Vec::new();
    for class in protocol.eval_sorted() {
        let rule = &protocol.references[&class];
        let entry = resolve_reference(manifest, &class, rule)?;
        entries.push(BankEntry {
            class,
            embedding: embed_entry(p, entry, cfg)?,
            source: entry.path.clone(),
        });
    }
    Ok(EmbeddingBank { entries })
}

/// Nearest reference by Euclidean distance; ties go to the lowest class id
/// (the bank is sorted, and only a strictly smaller distance replaces the
/// current best).
pub fn classify(bank: &EmbeddingBank, query: &[f64]) -> Result<(String, f64)> {
    let mut best: Option<(&BankEntry, f64)> = None;
    for entry in &bank.entries {
        let d = entry
            .embedding
            .iter()
            .zip(query)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if best.as_ref().map_or(true, |(_, bd)| d < *bd) {
            best = Some((entry, d));
        }
    }
    match best {
        Some((entry, d)) => Ok((entry.class.clone(), d)),
        None => Err(OneshotError::EmptyBank),
    }
}

// ── Evaluation ───────────────────────────────────────────────────────────────

/// Query-level and class-level accuracy plus the full confusion matrix.
/// `classes` labels the confusion rows and columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_accuracy: f64,
    pub per_class: BTreeMap<String, f64>,
    pub confusion: Vec<Vec<usize>>,
    pub classes: Vec<String>,
}

fn eval_queries<'a>(
    manifest: &'a DatasetManifest,
    protocol: &SplitProtocol,
    bank: &EmbeddingBank,
) -> Result<Vec<&'a ManifestEntry>> {
    let eval_set: BTreeSet<&str> = protocol.eval_classes.iter().map(String::as_str).collect();
    let reference_paths: BTreeSet<&Path> =
        bank.entries.iter().map(|e| e.source.as_path()).collect();
    let queries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| eval_set.contains(e.label.as_str()))
        .filter(|e| !reference_paths.contains(e.path.as_path()))
        .collect();
    for class in &eval_set {
        if !queries.iter().any(|e| e.label == *class) {
            return Err(OneshotError::NoQueries {
                class: class.to_string(),
            });
        }
    }
    Ok(queries)
}

/// Runs the one-shot protocol: builds the reference bank, classifies every
/// remaining evaluation-class sample, and aggregates accuracies.
pub fn evaluate(
    p: &ModelParams,
    manifest: &DatasetManifest,
    protocol: &SplitProtocol,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let bank = build_reference_bank(p, manifest, protocol, cfg)?;
    let classes = protocol.eval_sorted();
    let index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let queries = eval_queries(manifest, protocol, &bank)?;

    let n = classes.len();
    let mut confusion = vec![vec![0usize; n]; n];
    for entry in &queries {
        let embedding = embed_entry(p, entry, cfg)?;
        let (predicted, _) = classify(&bank, &embedding)?;
        confusion[index[entry.label.as_str()]][index[predicted.as_str()]] += 1;
    }

    let total: usize = confusion.iter().flatten().sum();
    let diag: usize = (0..n).map(|i| confusion[i][i]).sum();
    let mut per_class = BTreeMap::new();
    for (i, class) in classes.iter().enumerate() {
        let row: usize = confusion[i].iter().sum();
        per_class.insert(class.clone(), confusion[i][i] as f64 / row as f64);
    }
    let macro_accuracy = per_class.values().sum::<f64>() / n as f64;
    Ok(EvalReport {
        accuracy: diag as f64 / total as f64,
        macro_accuracy,
        per_class,
        confusion,
        classes,
    })
}

// ── Exports ──────────────────────────────────────────────────────────────────

/// Writes one TSV row per query: path, true label, predicted label, distance
/// to the winning reference, then the 128 embedding values. Nine decimal
/// places keep a text round trip within 1e-6.
pub fn export_embeddings(
    p: &ModelParams,
    manifest: &DatasetManifest,
    protocol: &SplitProtocol,
    cfg: &TrainConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bank = build_reference_bank(p, manifest, protocol, cfg)?;
    let queries = eval_queries(manifest, protocol, &bank)?;

    let mut out = String::from("path\tlabel\tpredicted\tdistance");
    for k in 0..net::EMBED_DIM {
        let _ = write!(out, "\te{k:03}");
    }
    out.push('\n');
    for entry in &queries {
        let embedding = embed_entry(p, entry, cfg)?;
        let (predicted, distance) = classify(&bank, &embedding)?;
        let _ = write!(
            out,
            "{}\t{}\t{}\t{distance:.9}",
            entry.path.display(),
            entry.label,
            predicted
        );
        for v in &embedding {
            let _ = write!(out, "\t{v:.9}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Projects vectors onto their top two principal directions via power
/// iteration with deflation (fixed seed, tolerance 1e-9, at most 1000
/// iterations). Output components are ordered by non-increasing variance.
pub fn pca_project(vectors: &[EmbeddingVec]) -> Result<Vec<[f64; 2]>> {
    assert!(vectors.len() >= 2, "projection needs at least two vectors");
    let n = vectors.len();
    let dim = vectors[0].len();
    if vectors.iter().all(|v| v == &vectors[0]) {
        return Err(OneshotError::DegenerateData);
    }

    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let mut centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0x9E37_79B9);
    let mut axes = Vec::with_capacity(2);
    for _ in 0..2 {
        if let Some(axis) = principal_axis(&centered, &mut rng) {
            // deflate: remove this direction before finding the next
            for row in &mut centered {
                let proj: f64 = row.iter().zip(&axis).map(|(x, a)| x * a).sum();
                for (x, a) in row.iter_mut().zip(&axis) {
                    *x -= proj * a;
                }
            }
            axes.push(axis);
        } else {
            axes.push(vec![0.0; dim]);
        }
    }

    Ok(vectors
        .iter()
        .map(|v| {
            let c: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
            [
                c.iter().zip(&axes[0]).map(|(x, a)| x * a).sum(),
                c.iter().zip(&axes[1]).map(|(x, a)| x * a).sum(),
            ]
        })
        .collect())
}

/// Power iteration on the (implicit) covariance of centered rows. Returns
/// None when the rows carry no remaining variance.
fn principal_axis(rows: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    let dim = rows[0].len();
    let total: f64 = rows.iter().flatten().map(|x| x * x).sum();
    if total <= 1e-24 {
        return None;
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    normalize(&mut v);
    for _ in 0..1000 {
        // w = Cov * v, up to the 1/n factor which cancels in normalization
        let mut w = vec![0.0; dim];
        for row in rows {
            let proj: f64 = row.iter().zip(&v).map(|(x, a)| x * a).sum();
            for (wi, x) in w.iter_mut().zip(row) {
                *wi += proj * x;
            }
        }
        if normalize(&mut w) == 0.0 {
            return None;
        }
        let drift = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let flipped = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (a + b).abs())
            .fold(0.0f64, f64::max);
        v = w;
        if drift.min(flipped) < 1e-9 {
            break;
        }
    }
    Some(v)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}
