//! Run configuration files. Training knobs live at the top level of a TOML or
//! JSON file next to the dataset paths; `--override key=value` flags patch the
//! parsed tree by dotted path before deserialization. Relative dataset paths
//! resolve against the config file's directory. A SHA-256 digest of the
//! fully-resolved spec identifies every run.

use crate::train::TrainConfig;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("MissingFile: {path}")]
    MissingFile { path: String },
    #[error("ParseError: {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("BadOverride: {arg:?} is not of the form KEY=VALUE")]
    BadOverride { arg: String },
    #[error("UnknownKey: override key {key:?} does not name a config field")]
    UnknownKey { key: String },
    #[error("InvalidValue: {reason}")]
    InvalidValue { reason: String },
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// A fully-resolved run: where the data lives plus every training knob.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RunSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunSpec {
    /// Hex SHA-256 over the canonical JSON form (sorted keys, defaults
    /// filled in), so cosmetic file differences do not change the digest.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("run spec serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Every known key with its default, as a JSON tree. Path keys start as null
/// so overrides can introduce them.
fn base_tree() -> Value {
    let mut tree = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let obj = tree.as_object_mut().expect("config is an object");
    obj.insert("manifest".into(), Value::Null);
    obj.insert("protocol".into(), Value::Null);
    obj.insert("checkpoint".into(), Value::Null);
    tree
}

/// Recursively lays `patch` over `base`; non-object values replace wholesale.
fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override value: anything valid as a JSON scalar keeps its type,
/// everything else is a string (`alpha=0.5` → number, `miner_mode=literal-eq3`
/// → string).
fn parse_override_value(raw: &str) -> Value {
    match serde_json::from_str::<Value>(raw) {
        Ok(v @ (Value::Null | Value::Bool(_) | Value::Number(_) | Value::String(_))) => v,
        _ => Value::String(raw.to_string()),
    }
}

/// Applies one `KEY=VALUE` flag by dotted path. The key must already exist in
/// the tree: overrides change values, they never invent fields.
fn apply_override(tree: &mut Value, arg: &str) -> Result<()> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| ConfigError::BadOverride {
        arg: arg.to_string(),
    })?;
    if key.is_empty() {
        return Err(ConfigError::BadOverride {
            arg: arg.to_string(),
        });
    }
    let unknown = || ConfigError::UnknownKey {
        key: key.to_string(),
    };
    let mut cursor = &mut *tree;
    let segments: Vec<&str> = key.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        cursor = cursor
            .as_object_mut()
            .and_then(|o| o.get_mut(*segment))
            .ok_or_else(unknown)?;
    }
    let last = segments[segments.len() - 1];
    let slot = cursor
        .as_object_mut()
        .and_then(|o| o.get_mut(last))
        .ok_or_else(unknown)?;
    *slot = parse_override_value(raw);
    Ok(())
}

fn take_path_key(
    obj: &mut serde_json::Map<String, Value>,
    key: &str,
    config_dir: &Path,
) -> Result<Option<String>> {
    match obj.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => {
            let p = Path::new(&s);
            let resolved = if p.is_absolute() {
                p.to_path_buf()
            } else {
                config_dir.join(p)
            };
            Ok(Some(resolved.display().to_string()))
        }
        Some(other) => Err(ConfigError::InvalidValue {
            reason: format!("{key} must be a path string, got {other}"),
        }),
    }
}

/// Loads a config file, applies `--override` flags in order, then an optional
/// `--seed` flag (which wins over everything).
pub fn load_run_spec(
    path: impl AsRef<Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunSpec> {
    let path = path.as_ref();
    let display = path.display().to_string();
    if !path.is_file() {
        return Err(ConfigError::MissingFile { path: display });
    }
    let text = std::fs::read_to_string(path)?;
    let parse_err = |reason: String| ConfigError::Parse {
        path: display.clone(),
        reason,
    };
    let is_json = path
        .extension()
        .map_or(false, |e| e.eq_ignore_ascii_case("json"));
    let file_value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
    } else {
        let toml_value: toml::Value =
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        serde_json::to_value(toml_value).map_err(|e| parse_err(e.to_string()))?
    };
    if !file_value.is_object() {
        return Err(parse_err("top level must be a table/object".into()));
    }

    let mut tree = base_tree();
    deep_merge(&mut tree, file_value);
    for arg in overrides {
        apply_override(&mut tree, arg)?;
    }
    if let Some(seed) = seed {
        tree["seed"] = Value::from(seed);
    }

    let config_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let Value::Object(mut obj) = tree else {
        unreachable!("base tree is an object")
    };
    let manifest = take_path_key(&mut obj, "manifest", config_dir)?;
    let protocol = take_path_key(&mut obj, "protocol", config_dir)?;
    let checkpoint = take_path_key(&mut obj, "checkpoint", config_dir)?;
    let train: TrainConfig = serde_json::from_value(Value::Object(obj))
        .map_err(|e| ConfigError::InvalidValue {
            reason: e.to_string(),
        })?;
    Ok(RunSpec {
        manifest,
        protocol,
        checkpoint,
        train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::MinerMode;
    use std::fs;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn toml_fills_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "run.toml",
            "manifest = \"data/manifest.jsonl\"\nprotocol = \"data/protocol.json\"\nepochs = 3\n\n[weights]\nalpha = 1.0\n",
        );
        let spec = load_run_spec(&p, &[], None).unwrap();
        assert_eq!(
            spec.manifest.as_deref(),
            Some(dir.path().join("data/manifest.jsonl").to_str().unwrap())
        );
        assert_eq!(spec.train.epochs, 3);
        assert_eq!(spec.train.weights.alpha, 1.0);
        assert_eq!(spec.train.weights.delta, 0.1, "unset keys keep defaults");
        assert_eq!(spec.train.batch_size, 32);
        assert_eq!(spec.checkpoint, None);
    }

    #[test]
    fn json_and_toml_agree_on_digest() {
        let dir = tempfile::tempdir().unwrap();
        let t = write(dir.path(), "a.toml", "epochs = 9\nseed = 4\n");
        let j = write(dir.path(), "b.json", "{\"seed\": 4, \"epochs\": 9}");
        let st = load_run_spec(&t, &[], None).unwrap();
        let sj = load_run_spec(&j, &[], None).unwrap();
        assert_eq!(st, sj);
        assert_eq!(st.digest(), sj.digest());
        assert_eq!(st.digest().len(), 64);
    }

    #[test]
    fn overrides_patch_nested_keys_and_change_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.toml", "epochs = 5\n");
        let plain = load_run_spec(&p, &[], None).unwrap();
        let spec = load_run_spec(
            &p,
            &[
                "weights.alpha=1.0".to_string(),
                "miner_mode=literal-eq3".to_string(),
                "epochs=7".to_string(),
                "manifest=data/m.jsonl".to_string(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(spec.train.weights.alpha, 1.0);
        assert_eq!(spec.train.miner_mode, MinerMode::Literal);
        assert_eq!(spec.train.epochs, 7);
        assert_eq!(
            spec.manifest.as_deref(),
            Some(dir.path().join("data/m.jsonl").to_str().unwrap())
        );
        assert_ne!(plain.digest(), spec.digest());
    }

    #[test]
    fn seed_flag_wins_over_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.toml", "seed = 1\n");
        let spec = load_run_spec(&p, &["seed=5".to_string()], Some(9)).unwrap();
        assert_eq!(spec.train.seed, 9);
        let spec = load_run_spec(&p, &["seed=5".to_string()], None).unwrap();
        assert_eq!(spec.train.seed, 5);
    }

    #[test]
    fn malformed_override_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.toml", "epochs = 5\n");
        match load_run_spec(&p, &["weights.alpha".to_string()], None) {
            Err(ConfigError::BadOverride { arg }) => assert_eq!(arg, "weights.alpha"),
            other => panic!("expected BadOverride, got {other:?}"),
        }
        match load_run_spec(&p, &["=3".to_string()], None) {
            Err(ConfigError::BadOverride { .. }) => {}
            other => panic!("expected BadOverride, got {other:?}"),
        }
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.toml", "epochs = 5\n");
        for bad in ["weights.gamma=1", "nope=1", "weights.alpha.x=1"] {
            match load_run_spec(&p, &[bad.to_string()], None) {
                Err(ConfigError::UnknownKey { .. }) => {}
                other => panic!("{bad}: expected UnknownKey, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_file_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.toml", "epochss = 5\n");
        match load_run_spec(&p, &[], None) {
            Err(ConfigError::InvalidValue { reason }) => {
                assert!(reason.contains("epochss"), "reason: {reason}")
            }
            other => panic!("expected InvalidValue, got {other:?}"),
        }
    }

    #[test]
    fn missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        match load_run_spec(dir.path().join("absent.toml"), &[], None) {
            Err(ConfigError::MissingFile { path }) => assert!(path.contains("absent.toml")),
            other => panic!("expected MissingFile, got {other:?}"),
        }
        let p = write(dir.path(), "broken.toml", "epochs = = 5\n");
        assert!(matches!(
            load_run_spec(&p, &[], None),
            Err(ConfigError::Parse { .. })
        ));
        let p = write(dir.path(), "broken.json", "{\"epochs\": }");
        assert!(matches!(
            load_run_spec(&p, &[], None),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn override_value_may_contain_equals_sign() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.toml", "");
        let spec = load_run_spec(&p, &["manifest=odd=name.jsonl".to_string()], None).unwrap();
        assert!(spec.manifest.unwrap().ends_with("odd=name.jsonl"));
    }

    #[test]
    fn digest_is_stable_against_flag_spelling() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.toml", "epochs = 7\nseed = 3\n");
        let b = write(dir.path(), "b.toml", "seed = 1\n");
        let da = load_run_spec(&a, &[], None).unwrap().digest();
        let db = load_run_spec(&b, &["epochs=7".to_string()], Some(3))
            .unwrap()
            .digest();
        assert_eq!(da, db, "same resolved config, same digest");
    }
}
