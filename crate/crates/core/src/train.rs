//! Training loop: encodes the auxiliary samples once, forms class-balanced
//! batches, and jointly optimizes the embedding and classifier heads with
//! RMSProp. Also owns run configuration, per-epoch history, and the
//! checkpoint container.

use crate::encode::{self, EncodeError, SignalImage};
use crate::metric::{LossWeights, MinerMode};
use crate::net::{self, ModelParams, NetError, OptState};
use crate::signal::{DatasetManifest, SignalError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("InsufficientClassSamples: class {class:?} has {count} samples, need at least 2")]
    InsufficientClassSamples { class: String, count: usize },
    #[error("BatchTooSmall: batch_size {size} must be even and at least 4")]
    BatchTooSmall { size: usize },
    #[error("InvalidConfig: {reason}")]
    InvalidConfig { reason: String },
    #[error("BadMagic: {path} is not a checkpoint file")]
    BadMagic { path: String },
    #[error("VersionUnsupported: checkpoint declares format version {found}, this build reads {supported}")]
    VersionUnsupported { found: u32, supported: u32 },
    #[error("ShapeManifestMismatch: {context}")]
    ShapeManifestMismatch { context: String },
    #[error("HeaderError: {0}")]
    Header(#[from] serde_json::Error),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ── Configuration ────────────────────────────────────────────────────────────

/// Everything a training run depends on. `num_labels = 0` means "derive from
/// the auxiliary class count"; the resolved value is recorded on save.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub target_width: usize,
    pub embedding_dim: usize,
    pub num_labels: usize,
    pub miner_mode: MinerMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            target_width: 64,
            embedding_dim: net::EMBED_DIM,
            num_labels: 0,
            miner_mode: MinerMode::Standard,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(TrainError::InvalidConfig { reason });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive and finite, got {}", self.lr));
        }
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return Err(TrainError::BatchTooSmall {
                size: self.batch_size,
            });
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.target_width < 8 {
            return fail(format!(
                "target_width must be at least 8 for the two stride-2 stages, got {}",
                self.target_width
            ));
        }
        if self.embedding_dim != net::EMBED_DIM {
            return fail(format!(
                "embedding_dim is fixed at {}, got {}",
                net::EMBED_DIM,
                self.embedding_dim
            ));
        }
        let w = &self.weights;
        for (name, v) in [
            ("weights.alpha", w.alpha),
            ("weights.beta", w.beta),
            ("weights.delta", w.delta),
            ("weights.epsilon_mine", w.epsilon_mine),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

// ── History ──────────────────────────────────────────────────────────────────

/// One trained epoch: mean losses over its batches, total mined pair counts,
/// and wall time.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub triplet: f64,
    pub ce: f64,
    pub pos_pairs: usize,
    pub neg_pairs: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    /// Copy with wall times zeroed; determinism checks compare these, since
    /// timing is the one legitimately run-dependent field.
    pub fn without_timing(&self) -> RunHistory {
        RunHistory {
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochRecord {
                    seconds: 0.0,
                    ..e.clone()
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,triplet,ce,pos_pairs,neg_pairs,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                e.epoch, e.total, e.triplet, e.ce, e.pos_pairs, e.neg_pairs, e.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

// ── Batch construction ───────────────────────────────────────────────────────

/// Class-balanced batches: each epoch shuffles every class, chunks it into
/// same-class pairs, and deals batch_size/2 pairs per batch, preferring
/// classes with the most pairs left (random-rank tie break) and not reusing a
/// class within a batch until every class with pairs has been drawn once.
/// Leftover pairs and batches with fewer than two distinct classes are
/// dropped. Deterministic in (seed, epoch).
pub fn make_batches(
    labels: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 4 || batch_size % 2 != 0 {
        return Err(TrainError::BatchTooSmall { size: batch_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9),
    );
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }

    struct ClassQueue {
        rank: u64,
        pairs: VecDeque<(usize, usize)>,
    }
    let mut classes: Vec<ClassQueue> = Vec::with_capacity(by_class.len());
    for (_, mut idxs) in by_class {
        idxs.shuffle(&mut rng);
        classes.push(ClassQueue {
            rank: rng.gen(),
            pairs: idxs.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
        });
    }

    let per_batch = batch_size / 2;
    let order_key = |q: &ClassQueue| (usize::MAX - q.pairs.len(), q.rank);
    let mut batches = Vec::new();
    loop {
        let remaining: usize = classes.iter().map(|q| q.pairs.len()).sum();
        let with_pairs = classes.iter().filter(|q| !q.pairs.is_empty()).count();
        if remaining < per_batch || with_pairs < 2 {
            break;
        }
        let mut used = vec![false; classes.len()];
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..per_batch {
            let fresh = (0..classes.len())
                .filter(|&c| !classes[c].pairs.is_empty() && !used[c])
                .min_by_key(|&c| order_key(&classes[c]));
            let any = || {
                (0..classes.len())
                    .filter(|&c| !classes[c].pairs.is_empty())
                    .min_by_key(|&c| order_key(&classes[c]))
            };
            let c = fresh.or_else(any).expect("remaining count guarantees a pair");
            used[c] = true;
            let (a, b) = classes[c].pairs.pop_front().expect("queue checked non-empty");
            batch.push(a);
            batch.push(b);
        }
        batches.push(batch);
    }
    Ok(batches)
}

// ── Training ─────────────────────────────────────────────────────────────────

/// Auxiliary samples encoded once, with labels mapped to dense indices in
/// ascending class-id order.
#[derive(Debug)]
pub struct EncodedSet {
    pub images: Vec<SignalImage>,
    pub labels: Vec<usize>,
    pub class_ids: Vec<String>,
}

/// Loads and encodes every manifest entry whose label is in `classes`.
/// Requires each class to have at least `min_per_class` samples.
pub fn encode_class_subset(
    manifest: &DatasetManifest,
    classes: &[String],
    target_width: usize,
    min_per_class: usize,
) -> Result<EncodedSet> {
    let mut class_ids: Vec<String> = classes.to_vec();
    class_ids.sort();
    class_ids.dedup();

    let mut counts: BTreeMap<&str, usize> = class_ids.iter().map(|c| (c.as_str(), 0)).collect();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for entry in &manifest.entries {
        let Ok(label) = class_ids.binary_search(&entry.label) else {
            continue;
        };
        *counts.get_mut(entry.label.as_str()).unwrap() += 1;
        let matrix = crate::signal::load_signal_csv(&entry.path)?;
        images.push(encode::encode_tagged(
            &matrix,
            target_width,
            &entry.path.display().to_string(),
        )?);
        labels.push(label);
    }
    for (class, count) in counts {
        if count < min_per_class {
            return Err(TrainError::InsufficientClassSamples {
                class: class.to_string(),
                count,
            });
        }
    }
    Ok(EncodedSet {
        images,
        labels,
        class_ids,
    })
}

/// Trains on the auxiliary classes of `manifest` and returns the final
/// parameters with the per-epoch history. Deterministic in (manifest, cfg).
pub fn train(
    manifest: &DatasetManifest,
    aux_classes: &[String],
    cfg: &TrainConfig,
) -> Result<(ModelParams, RunHistory)> {
    cfg.validate()?;
    let set = encode_class_subset(manifest, aux_classes, cfg.target_width, 2)?;
    if set.class_ids.len() < 2 {
        return Err(TrainError::InvalidConfig {
            reason: format!(
                "training needs at least 2 auxiliary classes, got {}",
                set.class_ids.len()
            ),
        });
    }
    if cfg.num_labels != 0 && cfg.num_labels != set.class_ids.len() {
        return Err(TrainError::InvalidConfig {
            reason: format!(
                "num_labels {} does not match the {} auxiliary classes",
                cfg.num_labels,
                set.class_ids.len()
            ),
        });
    }
    let mut rcfg = cfg.clone();
    rcfg.num_labels = set.class_ids.len();

    let mut params = net::init_params(rcfg.seed, rcfg.num_labels);
    let mut opt = OptState::new(&params);
    let mut history = RunHistory::default();

    for epoch in 0..rcfg.epochs {
        let start = Instant::now();
        let batches = make_batches(&set.labels, rcfg.batch_size, rcfg.seed, epoch)?;
        if epoch == 0 && batches.is_empty() {
            return Err(TrainError::InvalidConfig {
                reason: format!(
                    "batch_size {} exceeds the pairs available from {} samples",
                    rcfg.batch_size,
                    set.labels.len()
                ),
            });
        }
        let mut sums = (0.0, 0.0, 0.0);
        let (mut pos, mut neg) = (0usize, 0usize);
        for batch in &batches {
            let images: Vec<&SignalImage> = batch.iter().map(|&i| &set.images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
            let (loss, grads) = net::loss_and_grads(&params, &images, &labels, &rcfg)?;
            let (next_params, next_opt) = net::rmsprop_step(&params, &grads, &opt, rcfg.lr)?;
            params = next_params;
            opt = next_opt;
            sums.0 += loss.total;
            sums.1 += loss.triplet;
            sums.2 += loss.ce;
            pos += loss.pos_pairs;
            neg += loss.neg_pairs;
        }
        let n = batches.len().max(1) as f64;
        history.epochs.push(EpochRecord {
            epoch,
            total: sums.0 / n,
            triplet: sums.1 / n,
            ce: sums.2 / n,
            pos_pairs: pos,
            neg_pairs: neg,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((params, history))
}

// ── Checkpoints ──────────────────────────────────────────────────────────────

const MAGIC: &[u8; 6] = b"SLDML1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes a self-describing checkpoint: 6 magic bytes, a little-endian u32
/// JSON header length, the header (format version, config, tensor manifest),
/// then raw little-endian f32 tensor data row-major in manifest order.
pub fn save_checkpoint(p: &ModelParams, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut config = cfg.clone();
    config.num_labels = p.num_labels();

    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (name, t) in p.named() {
        let byte_len = (t.len() * 4) as u64;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            byte_offset: offset,
            byte_len,
        });
        offset += byte_len;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        format_version: FORMAT_VERSION,
        config,
        tensors,
    })?;

    let mut out = Vec::with_capacity(6 + 4 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in p.named() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back; values widen from f32 exactly, so
/// save -> load -> save is byte-stable.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, TrainConfig)> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let bytes = std::fs::read(path)?;
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(TrainError::BadMagic { path: display });
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(TrainError::ShapeManifestMismatch {
            context: format!("{display} is truncated before the end of the header"),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[10..data_start])?;
    if header.format_version != FORMAT_VERSION {
        return Err(TrainError::VersionUnsupported {
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }

    let expected = net::expected_shapes(header.config.num_labels);
    if header.tensors.len() != expected.len() {
        return Err(TrainError::ShapeManifestMismatch {
            context: format!(
                "{} tensors declared, expected {}",
                header.tensors.len(),
                expected.len()
            ),
        });
    }
    let mut offset = 0u64;
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        let len: usize = entry.shape.iter().product();
        let mismatch = |context: String| TrainError::ShapeManifestMismatch { context };
        if entry.name != *name {
            return Err(mismatch(format!("tensor {:?}, expected {name:?}", entry.name)));
        }
        if entry.shape != *shape {
            return Err(mismatch(format!(
                "{name} declares shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(mismatch(format!("{name} has dtype {:?}", entry.dtype)));
        }
        if entry.byte_offset != offset || entry.byte_len != (len * 4) as u64 {
            return Err(mismatch(format!("{name} has inconsistent offsets")));
        }
        offset += entry.byte_len;
    }
    let data = &bytes[data_start..];
    if data.len() != offset as usize {
        return Err(TrainError::ShapeManifestMismatch {
            context: format!(
                "data section holds {} bytes, manifest declares {offset}",
                data.len()
            ),
        });
    }

    let mut p = ModelParams::zeros(header.config.num_labels);
    for ((_, t), entry) in p.named_mut().into_iter().zip(&header.tensors) {
        let start = entry.byte_offset as usize;
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            let cell = start + 4 * k;
            *v = f32::from_le_bytes(data[cell..cell + 4].try_into().unwrap()) as f64;
        }
    }
    Ok((p, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{write_signal_csv, ManifestEntry, SignalMatrix};
    use proptest::prelude::*;
    use std::path::PathBuf;

    #[test]
    fn config_defaults_match_contract() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.embedding_dim, 128);
        assert_eq!(c.weights.delta, 0.1);
        assert_eq!(c.weights.epsilon_mine, 0.05);
        assert_eq!((c.weights.alpha, c.weights.beta), (0.5, 0.5));
        assert_eq!(c.miner_mode, MinerMode::Standard);
        c.validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.lr = 0.0;
        assert!(matches!(c.validate(), Err(TrainError::InvalidConfig { .. })));
        let mut c = TrainConfig::default();
        c.batch_size = 7;
        assert!(matches!(c.validate(), Err(TrainError::BatchTooSmall { size: 7 })));
        let mut c = TrainConfig::default();
        c.embedding_dim = 64;
        assert!(matches!(c.validate(), Err(TrainError::InvalidConfig { .. })));
        let mut c = TrainConfig::default();
        c.weights.delta = f64::NAN;
        assert!(matches!(c.validate(), Err(TrainError::InvalidConfig { .. })));
    }

    #[test]
    fn miner_mode_config_tokens() {
        let c: TrainConfig = toml::from_str("miner_mode = \"literal-eq3\"").unwrap();
        assert_eq!(c.miner_mode, MinerMode::Literal);
        let c: TrainConfig = toml::from_str("miner_mode = \"standard\"").unwrap();
        assert_eq!(c.miner_mode, MinerMode::Standard);
    }

    #[test]
    fn batches_four_classes_of_eight() {
        let labels: Vec<usize> = (0..32).map(|i| i / 8).collect();
        let batches = make_batches(&labels, 8, 1, 0).unwrap();
        assert_eq!(batches.len(), 4);
        for batch in &batches {
            assert_eq!(batch.len(), 8);
            let mut counts = [0usize; 4];
            for &i in batch {
                counts[labels[i]] += 1;
            }
            assert_eq!(counts, [2, 2, 2, 2]);
        }
        // every sample appears exactly once per epoch here
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn batches_hundred_classes_of_six() {
        let labels: Vec<usize> = (0..600).map(|i| i / 6).collect();
        let batches = make_batches(&labels, 32, 9, 3).unwrap();
        let emitted: usize = batches.iter().map(Vec::len).sum();
        assert!(emitted <= 600);
        for batch in &batches {
            assert_eq!(batch.len(), 32);
            let mut counts = BTreeMap::new();
            for &i in batch {
                *counts.entry(labels[i]).or_insert(0usize) += 1;
            }
            assert_eq!(counts.len(), 16, "16 distinct classes per batch");
            assert!(counts.values().all(|&c| c == 2));
        }
    }

    #[test]
    fn batches_are_deterministic_and_epoch_sensitive() {
        let labels: Vec<usize> = (0..40).map(|i| i % 5).collect();
        let a = make_batches(&labels, 8, 7, 2).unwrap();
        let b = make_batches(&labels, 8, 7, 2).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&labels, 8, 7, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batches_reject_bad_size() {
        assert!(matches!(
            make_batches(&[0, 0, 1, 1], 5, 0, 0),
            Err(TrainError::BatchTooSmall { size: 5 })
        ));
        assert!(matches!(
            make_batches(&[0, 0, 1, 1], 2, 0, 0),
            Err(TrainError::BatchTooSmall { size: 2 })
        ));
        // even and >= 4 is structurally valid even when no batch can be dealt
        assert_eq!(make_batches(&[0, 0, 1, 1], 6, 0, 0).unwrap(), Vec::<Vec<usize>>::new());
    }

    proptest! {
        #[test]
        fn batches_always_pair_and_mix_classes(
            class_sizes in proptest::collection::vec(1usize..9, 2..7),
            batch_size in (2usize..9).prop_map(|p| p * 2).prop_filter("even >= 4", |&b| b >= 4),
            seed in 0u64..100,
            epoch in 0usize..5,
        ) {
            let labels: Vec<usize> = class_sizes
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
                .collect();
            let batches = make_batches(&labels, batch_size, seed, epoch).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            for batch in &batches {
                prop_assert_eq!(batch.len(), batch_size);
                let mut counts = BTreeMap::new();
                for &i in batch {
                    prop_assert!(i < labels.len());
                    prop_assert!(seen.insert(i), "index {} reused within the epoch", i);
                    *counts.entry(labels[i]).or_insert(0usize) += 1;
                }
                prop_assert!(counts.len() >= 2, "at least two classes per batch");
                for (_, c) in counts {
                    prop_assert!(c % 2 == 0 && c >= 2, "samples arrive in same-class pairs");
                }
            }
        }
    }

    /// Two classes whose signals sit at clearly different levels, written to
    /// disk as a real manifest + CSV corpus.
    fn toy_dataset(dir: &Path, per_class: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for class in 0..2usize {
            for k in 0..per_class {
                let phase = k as f64 * 0.37;
                let rows: Vec<Vec<f64>> = (0..3)
                    .map(|r| {
                        (0..24)
                            .map(|t| {
                                let base = (t as f64 * 0.4 + phase + r as f64).sin();
                                if class == 0 {
                                    base
                                } else {
                                    3.0 + 0.2 * base
                                }
                            })
                            .collect()
                    })
                    .collect();
                let names = (0..3).map(|i| format!("s{i}")).collect();
                let m = SignalMatrix::new(rows, names, "toy", 0.0);
                let path = dir.join(format!("c{class}_{k}.csv"));
                write_signal_csv(&m, &path).unwrap();
                entries.push(ManifestEntry {
                    path,
                    label: format!("class{class}"),
                    subject: format!("subj{}", k % 3),
                    modality: "toy".to_string(),
                });
            }
        }
        DatasetManifest { entries }
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            target_width: 8,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_makes_progress_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 20);
        let classes = vec!["class0".to_string(), "class1".to_string()];
        let cfg = toy_config();
        let (params, history) = train(&manifest, &classes, &cfg).unwrap();
        assert!(params.all_finite());
        assert_eq!(history.epochs.len(), 30);
        let first = history.epochs.first().unwrap().total;
        let last = history.epochs.last().unwrap().total;
        assert!(
            last < first,
            "loss should fall on a separable toy: first {first}, last {last}"
        );
        for (i, e) in history.epochs.iter().enumerate() {
            assert_eq!(e.epoch, i);
            assert!(e.total.is_finite() && e.total >= 0.0);
        }

        let (params2, history2) = train(&manifest, &classes, &cfg).unwrap();
        assert_eq!(params, params2);
        assert_eq!(history.without_timing(), history2.without_timing());
    }

    #[test]
    fn training_rejects_one_sample_class() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_dataset(dir.path(), 3);
        manifest.entries.retain(|e| e.label == "class0" || e.path.to_string_lossy().ends_with("c1_0.csv"));
        let classes = vec!["class0".to_string(), "class1".to_string()];
        match train(&manifest, &classes, &toy_config()) {
            Err(TrainError::InsufficientClassSamples { class, count: 1 }) => {
                assert_eq!(class, "class1");
            }
            other => panic!("expected InsufficientClassSamples, got {other:?}"),
        }
    }

    #[test]
    fn history_csv_layout() {
        let h = RunHistory {
            epochs: vec![EpochRecord {
                epoch: 0,
                total: 1.5,
                triplet: 1.0,
                ce: 2.0,
                pos_pairs: 12,
                neg_pairs: 30,
                seconds: 0.25,
            }],
        };
        let csv = h.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,total,triplet,ce,pos_pairs,neg_pairs,seconds"
        );
        assert_eq!(lines.next().unwrap(), "0,1.5,1,2,12,30,0.250");
    }

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        let p = net::init_params(3, 4);
        let cfg = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, &cfg, &path).unwrap();
        let (p2, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2.num_labels, 4);
        assert_eq!(cfg2.weights, cfg.weights);
        // every loaded value is exactly the f32 rounding of the original
        for ((_, a), (_, b)) in p.named().iter().zip(p2.named()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // a second round trip is bit-stable
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&p2, &cfg2, &path2).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        // headers differ only if configs do; compare data sections and the reloaded params
        let (p3, _) = load_checkpoint(&path2).unwrap();
        assert_eq!(p2, p3);
        assert_eq!(bytes1[bytes1.len() - 100..], bytes2[bytes2.len() - 100..]);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTCKPTxxxxxxx").unwrap();
        match load_checkpoint(&path) {
            Err(TrainError::BadMagic { path: p }) => assert!(p.contains("junk.ckpt")),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_rejects_future_version() {
        let header = serde_json::json!({
            "format_version": 2,
            "config": TrainConfig::default(),
            "tensors": [],
        });
        let hbytes = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(b"SLDML1");
        out.extend_from_slice(&(hbytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&hbytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.ckpt");
        std::fs::write(&path, out).unwrap();
        match load_checkpoint(&path) {
            Err(TrainError::VersionUnsupported { found: 2, supported: 1 }) => {}
            other => panic!("expected VersionUnsupported, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_rejects_tampered_shape() {
        let p = net::init_params(0, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, &TrainConfig::default(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[10..10 + header_len]).unwrap();
        header["tensors"][0]["shape"] = serde_json::json!([16, 3, 5, 5]);
        let hbytes = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(b"SLDML1");
        out.extend_from_slice(&(hbytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&hbytes);
        out.extend_from_slice(&bytes[10 + header_len..]);
        let bad = dir.path().join("tampered.ckpt");
        std::fs::write(&bad, out).unwrap();
        match load_checkpoint(&bad) {
            Err(TrainError::ShapeManifestMismatch { context }) => {
                assert!(context.contains("stem.w"), "context: {context}");
            }
            other => panic!("expected ShapeManifestMismatch, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_label_mismatch_reports_shapes() {
        // a 20-label checkpoint declares config num_labels=100: the manifest
        // no longer matches the expected tensor table
        let p = net::init_params(0, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, &TrainConfig::default(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[10..10 + header_len]).unwrap();
        header["config"]["num_labels"] = serde_json::json!(100);
        let hbytes = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(b"SLDML1");
        out.extend_from_slice(&(hbytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&hbytes);
        out.extend_from_slice(&bytes[10 + header_len..]);
        let bad = dir.path().join("relabel.ckpt");
        std::fs::write(&bad, out).unwrap();
        match load_checkpoint(&bad) {
            Err(TrainError::ShapeManifestMismatch { context }) => {
                assert!(context.contains("classifier.w"), "context: {context}");
            }
            other => panic!("expected ShapeManifestMismatch, got {other:?}"),
        }
    }

    #[test]
    fn encode_subset_skips_other_classes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4);
        let set = encode_class_subset(&manifest, &["class1".to_string()], 8, 2).unwrap();
        assert_eq!(set.images.len(), 4);
        assert!(set.labels.iter().all(|&l| l == 0));
        assert_eq!(set.class_ids, vec!["class1".to_string()]);
    }

    #[test]
    fn missing_signal_file_surfaces_path() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            entries: vec![ManifestEntry {
                path: PathBuf::from(dir.path().join("gone.csv")),
                label: "a".into(),
                subject: "s".into(),
                modality: "m".into(),
            }],
        };
        match encode_class_subset(&manifest, &["a".to_string()], 8, 0) {
            Err(TrainError::Signal(SignalError::MissingFile { path })) => {
                assert!(path.contains("gone.csv"));
            }
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }
}
