//! Synthetic sinusoid dataset: each class owns a fixed frequency, phase, and
//! amplitude per signal row; samples differ only by Gaussian noise. Used by
//! the end-to-end tests and as a quick-start dataset for the CLI.

use crate::oneshot::{OneshotError, ReferenceRule, SplitProtocol};
use crate::signal::{write_signal_csv, SignalError, SignalMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

const CLASS_KEY: u64 = 0x9E37_79B9_7F4A_7C15;
const SAMPLE_KEY: u64 = 0xBF58_476D_1CE4_E5B9;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Protocol(#[from] OneshotError),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

/// Shape and randomness of a generated dataset. `groups * axes` signal rows,
/// each a noisy sinusoid whose frequency/phase/amplitude identify the class.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub aux_classes: usize,
    pub samples_per_class: usize,
    pub groups: usize,
    pub axes: usize,
    pub timesteps: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            aux_classes: 6,
            samples_per_class: 40,
            groups: 3,
            axes: 3,
            timesteps: 64,
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn rows(&self) -> usize {
        self.groups * self.axes
    }

    fn class_name(&self, c: usize) -> String {
        format!("synth{c}")
    }
}

/// Per-row sinusoid parameters for one class.
struct ClassPattern {
    freq: Vec<f64>,
    phase: Vec<f64>,
    amp: Vec<f64>,
}

fn class_pattern(spec: &SynthSpec, class: usize) -> ClassPattern {
    let mut rng =
        ChaCha8Rng::seed_from_u64(spec.seed ^ (class as u64 + 1).wrapping_mul(CLASS_KEY));
    let freq_d = Uniform::new(0.8, 6.0);
    let phase_d = Uniform::new(0.0, TAU);
    let amp_d = Uniform::new(0.5, 1.0);
    let rows = spec.rows();
    ClassPattern {
        freq: (0..rows).map(|_| freq_d.sample(&mut rng)).collect(),
        phase: (0..rows).map(|_| phase_d.sample(&mut rng)).collect(),
        amp: (0..rows).map(|_| amp_d.sample(&mut rng)).collect(),
    }
}

fn row_names(spec: &SynthSpec) -> Vec<String> {
    const AXIS: [&str; 3] = ["x", "y", "z"];
    (0..spec.rows())
        .map(|r| {
            let (g, a) = (r / spec.axes, r % spec.axes);
            if spec.axes <= 3 {
                format!("g{g}_{}", AXIS[a])
            } else {
                format!("g{g}_a{a}")
            }
        })
        .collect()
}

/// One sample of one class: the class waveform plus fresh Gaussian noise.
fn sample_matrix(spec: &SynthSpec, pattern: &ClassPattern, class: usize, k: usize) -> SignalMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed
            ^ (class as u64 + 1).wrapping_mul(CLASS_KEY)
            ^ (k as u64 + 1).wrapping_mul(SAMPLE_KEY),
    );
    let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
    let t_span = (spec.timesteps - 1).max(1) as f64;
    let values: Vec<Vec<f64>> = (0..spec.rows())
        .map(|r| {
            (0..spec.timesteps)
                .map(|t| {
                    let angle = TAU * pattern.freq[r] * t as f64 / t_span + pattern.phase[r];
                    pattern.amp[r] * angle.sin() + noise.sample(&mut rng)
                })
                .collect()
        })
        .collect();
    SignalMatrix::new(values, row_names(spec), "synthetic", 30.0)
}

/// Everything a run needs to point at the generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest_path: PathBuf,
    pub protocol_path: PathBuf,
    pub protocol: SplitProtocol,
}

/// Writes `classes * samples_per_class` CSV files plus `manifest.jsonl` and
/// `protocol.json` into `dir`. The first `aux_classes` classes train the
/// embedding; the rest are held out with sample 0 as their reference.
pub fn write_synthetic_dataset(
    spec: &SynthSpec,
    dir: impl AsRef<Path>,
) -> Result<SynthDataset, SynthError> {
    assert!(spec.classes >= 2, "need at least two classes");
    assert!(
        spec.aux_classes >= 1 && spec.aux_classes < spec.classes,
        "aux_classes must leave at least one eval class"
    );
    assert!(spec.samples_per_class >= 2, "need a reference plus queries");
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let mut manifest_lines = String::new();
    for c in 0..spec.classes {
        let pattern = class_pattern(spec, c);
        let class = spec.class_name(c);
        for k in 0..spec.samples_per_class {
            let matrix = sample_matrix(spec, &pattern, c, k);
            let file = format!("{class}_s{k:02}.csv");
            write_signal_csv(&matrix, dir.join(&file))?;
            let record = serde_json::json!({
                "path": file,
                "label": class,
                "subject": format!("subj{}", k % 4),
                "modality": "synthetic",
            });
            manifest_lines.push_str(&record.to_string());
            manifest_lines.push('\n');
        }
    }
    let manifest_path = dir.join("manifest.jsonl");
    std::fs::write(&manifest_path, manifest_lines)?;

    let aux_classes: Vec<String> = (0..spec.aux_classes).map(|c| spec.class_name(c)).collect();
    let eval_classes: Vec<String> = (spec.aux_classes..spec.classes)
        .map(|c| spec.class_name(c))
        .collect();
    let references: BTreeMap<String, ReferenceRule> = eval_classes
        .iter()
        .map(|class| {
            (
                class.clone(),
                ReferenceRule::Prefix {
                    prefix: format!("{class}_s00"),
                },
            )
        })
        .collect();
    let protocol = SplitProtocol {
        aux_classes,
        eval_classes,
        references,
    };
    protocol.validate()?;
    let protocol_path = dir.join("protocol.json");
    crate::oneshot::save_protocol(&protocol, &protocol_path)?;

    Ok(SynthDataset {
        manifest_path,
        protocol_path,
        protocol,
    })
}
