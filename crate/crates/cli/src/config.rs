//! Experiment configuration files and `CAMALKIT_` environment overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use camalkit::datasets::LoadOptions;
use camalkit::evaluation::DEFAULT_TAU;
use camalkit::training::{Extraction, MaskSource, Method, TrainConfig};
use camalkit::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ENV_PREFIX: &str = "CAMALKIT_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory in the images/masks/labels.csv layout.
    pub root: PathBuf,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_side")]
    pub resize: (usize, usize),
    #[serde(default = "default_side")]
    pub crop: (usize, usize),
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub fold_seed: u64,
}

fn default_side() -> (usize, usize) {
    (64, 64)
}

fn default_folds() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub capture_layer: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { name: "cnn".into(), capture_layer: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub method: Method,
    pub mask_source: MaskSource,
    pub pseudo_mask_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub lambda: f32,
    pub seed: u64,
    pub double_backward: bool,
    pub extraction: Extraction,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            method: t.method,
            mask_source: t.mask_source,
            pseudo_mask_dir: t.pseudo_mask_dir,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            lambda: t.lambda,
            seed: t.seed,
            double_backward: t.double_backward,
            extraction: t.extraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tau: f32,
    pub per_class: usize,
    pub k_step: usize,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, per_class: 1, k_step: 5, bootstrap_resamples: camalkit::stats::DEFAULT_RESAMPLES, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

const KNOWN: &[(&str, &[&str])] = &[
    ("data", &["root", "name", "resize", "crop", "folds", "fold_seed"]),
    ("model", &["name", "capture_layer"]),
    (
        "train",
        &[
            "method",
            "mask_source",
            "pseudo_mask_dir",
            "epochs",
            "batch_size",
            "learning_rate",
            "weight_decay",
            "lambda",
            "seed",
            "double_backward",
            "extraction",
        ],
    ),
    ("eval", &["tau", "per_class", "k_step", "bootstrap_resamples", "seed"]),
];

/// Every `section.key` in `table` that the schema does not know.
pub fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let mut bad = Vec::new();
    for (section, value) in table {
        match KNOWN.iter().find(|(s, _)| s == section) {
            None => bad.push(section.clone()),
            Some((_, keys)) => match value.as_table() {
                Some(t) => bad.extend(t.keys().filter(|k| !keys.contains(&k.as_str())).map(|k| format!("{section}.{k}"))),
                None => bad.push(section.clone()),
            },
        }
    }
    bad
}

fn parse_override(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `CAMALKIT_<SECTION>__<KEY>=value` pairs to `table`.
pub fn apply_overrides(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    for (name, value) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
        let Some((section, key)) = rest.split_once("__") else { continue };
        let (section, key) = (section.to_ascii_lowercase(), key.to_ascii_lowercase());
        let entry = table.entry(section.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let t = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{section}` is not a table")))?;
        t.insert(key.clone(), parse_override(&value));
        applied.push(format!("{section}.{key}"));
    }
    Ok(applied)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let bad = unknown_keys(&table);
        if !bad.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", bad.join(", "))));
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies environment overrides and makes relative paths
    /// absolute with respect to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut table, std::env::vars())?;
        let mut cfg = Self::from_table(table)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.data.root = resolve(&base, &cfg.data.root);
        cfg.train.pseudo_mask_dir = cfg.train.pseudo_mask_dir.map(|p| resolve(&base, &p));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        if let Err(e) = self.train_config().validate() {
            bad.push(e.to_string());
        }
        if self.data.folds < 2 {
            bad.push("data.folds must be at least 2".into());
        }
        if !(self.eval.tau > 0.0 && self.eval.tau < 1.0) {
            bad.push("eval.tau must lie in (0, 1)".into());
        }
        if self.eval.k_step == 0 || 100 % self.eval.k_step != 0 {
            bad.push("eval.k_step must divide 100".into());
        }
        if self.eval.per_class == 0 {
            bad.push("eval.per_class must be positive".into());
        }
        if let Err(e) = self.load_options().validate() {
            bad.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method: t.method,
            mask_source: t.mask_source,
            pseudo_mask_dir: t.pseudo_mask_dir.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            lambda: t.lambda,
            seed: t.seed,
            model: self.model.name.clone(),
            capture_layer: self.model.capture_layer.clone(),
            double_backward: t.double_backward,
            extraction: t.extraction,
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { resize: self.data.resize, crop: self.data.crop }
    }

    pub fn dataset_name(&self) -> String {
        self.data.name.clone().unwrap_or_else(|| self.data.root.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string())
    }

    pub fn k_grid(&self) -> Vec<f64> {
        (0..=100).step_by(self.eval.k_step).map(|k| k as f64).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `3`, `0-2` or `0,3,5-7` into sorted fold indices below `k`.
pub fn parse_folds(spec: &str, k: usize) -> Result<Vec<usize>> {
    let mut out = BTreeSet::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::Config(format!("invalid fold selection `{spec}`"));
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let v: usize = part.parse().map_err(|_| bad())?;
                (v, v)
            }
        };
        if lo > hi || hi >= k {
            return Err(Error::Config(format!("fold selection `{spec}` is outside 0..{k}")));
        }
        out.extend(lo..=hi);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("empty fold selection `{spec}`")));
    }
    Ok(out.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(s: &str) -> toml::Table {
        toml::from_str(s).unwrap()
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_table(table("[data]\nroot = \"d\"\n")).unwrap();
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.model.name, "cnn");
        assert_eq!(cfg.data.folds, 10);
        assert_eq!(cfg.k_grid().len(), 21);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = ExperimentConfig::from_table(table("[data]\nroot = \"d\"\nbogus = 1\n[train]\nepoch = 3\n[extra]\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("data.bogus") && msg.contains("train.epoch") && msg.contains("extra"), "{msg}");
    }

    #[test]
    fn prior_without_directory_is_invalid() {
        let err = ExperimentConfig::from_table(table("[data]\nroot = \"d\"\n[train]\nmethod = \"prior\"\n")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn env_overrides_parse_values() {
        let mut t = table("[data]\nroot = \"d\"\n");
        let applied = apply_overrides(
            &mut t,
            vec![
                ("CAMALKIT_TRAIN__EPOCHS".to_string(), "5".to_string()),
                ("CAMALKIT_TRAIN__METHOD".to_string(), "vanilla".to_string()),
                ("CAMALKIT_SEED".to_string(), "3".to_string()),
                ("HOME".to_string(), "/x".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(applied, vec!["train.epochs", "train.method"]);
        let cfg = ExperimentConfig::from_table(t).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.method, Method::Vanilla);
    }

    #[test]
    fn fold_selections() {
        assert_eq!(parse_folds("0-2", 10).unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_folds("4,1,1-2", 10).unwrap(), vec![1, 2, 4]);
        assert!(parse_folds("9-10", 10).is_err());
        assert!(parse_folds("x", 10).is_err());
    }

    #[test]
    fn hashing_is_stable() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
