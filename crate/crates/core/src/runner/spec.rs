//! Flat `key = value` experiment specs.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys are rejected. Every key has a default that depends on
//! `kind`; the resolved set (defaults plus overrides) is what gets hashed,
//! so two specs that spell out different but equivalent files share outputs.
//! `out` (the output root) is the only key excluded from the hash.
//!
//! Bucket ranges are written `lo:hi` and lists are comma separated.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::{Result, RunError};
use crate::corpus::Side;
use crate::decode::{BeamConfig, Strategy};
use crate::model::{AdamConfig, ModelConfig, TrainConfig, ValidMetric};
use crate::taskgen::TaskSelection;
use crate::BucketRange;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    StringSuite,
    BucketMatrix,
    ConcatMatrix,
    FinetuneMatrix,
    BucketLabels,
}

impl ExperimentKind {
    pub fn label(self) -> &'static str {
        match self {
            ExperimentKind::StringSuite => "string_suite",
            ExperimentKind::BucketMatrix => "bucket_matrix",
            ExperimentKind::ConcatMatrix => "concat_matrix",
            ExperimentKind::FinetuneMatrix => "finetune_matrix",
            ExperimentKind::BucketLabels => "bucket_labels",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ExperimentKind {
    type Err = RunError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "string_suite" | "string_tasks" => ExperimentKind::StringSuite,
            "bucket_matrix" => ExperimentKind::BucketMatrix,
            "concat_matrix" => ExperimentKind::ConcatMatrix,
            "finetune_matrix" => ExperimentKind::FinetuneMatrix,
            "bucket_labels" => ExperimentKind::BucketLabels,
            _ => return Err(RunError::Spec(format!("unknown kind {s:?}"))),
        })
    }
}

const COMMON: &[(&str, &str)] = &[
    ("seed", "1"),
    ("model.dec_layers", "1"),
    ("model.enc_layers", "1"),
    ("model.dropout", "0.3"),
    ("model.max_positions", "256"),
    ("train.lr_max", "5e-4"),
    ("train.warmup_steps", "4000"),
    ("train.batch_tokens", "4096"),
    ("train.patience", "none"),
    ("train.adam_beta1", "0.9"),
    ("train.adam_beta2", "0.98"),
    ("train.adam_eps", "1e-9"),
    ("decode.strategy", "beam"),
    ("decode.beam_size", "4"),
    ("decode.alpha", "0.6"),
    ("decode.max_len_a", "2"),
    ("decode.max_len_b", "10"),
    ("eval.bootstrap", "0"),
];

const STRING_SUITE: &[(&str, &str)] = &[
    ("tasks", "copy,push,pop,shift,unshift,reverse,all"),
    ("train_bucket", "11:15"),
    ("test_buckets", "1:10,11:15,16:20"),
    ("train_count", "28000"),
    ("valid_count", "1000"),
    ("test_count", "1000"),
    ("model.d_model", "128"),
    ("model.d_ff", "512"),
    ("model.heads", "8"),
    ("train.max_epochs", "100"),
    ("train.valid_metric", "loss"),
];

/// Desk-scale surrogate of the translation experiments.
const TRANSLATION: &[(&str, &str)] = &[
    ("data", "surrogate"),
    ("side", "tgt"),
    ("train_buckets", "1:10,11:20,21:30,31:40,41:50,51:60"),
    ("test_buckets", "1:10,11:20,21:30,31:40,41:50,51:60"),
    ("surrogate.words", "24"),
    ("surrogate.max_words", "50"),
    ("surrogate.clause_max", "6"),
    ("surrogate.expand", "0.2"),
    ("surrogate.period_rate", "0"),
    ("surrogate.train_per_bucket", "2000"),
    ("surrogate.valid_per_bucket", "100"),
    ("surrogate.test_per_bucket", "200"),
    ("model.d_model", "64"),
    ("model.d_ff", "256"),
    ("model.heads", "4"),
    ("train.max_epochs", "30"),
    ("train.valid_metric", "loss"),
    ("train.lr_max", "2e-3"),
    ("train.warmup_steps", "400"),
    ("train.batch_tokens", "2048"),
];

fn kind_defaults(kind: ExperimentKind) -> Vec<(&'static str, &'static str)> {
    let mut v: Vec<(&str, &str)> = COMMON.to_vec();
    let (base, extra): (&[(&str, &str)], &[(&str, &str)]) = match kind {
        ExperimentKind::StringSuite => (STRING_SUITE, &[]),
        ExperimentKind::BucketMatrix => (TRANSLATION, &[("include_full", "true")]),
        ExperimentKind::ConcatMatrix => (TRANSLATION, &[("concat.window", "51:60"), ("concat.from", "1:10,11:20,21:30")]),
        ExperimentKind::FinetuneMatrix => (TRANSLATION, &[("finetune.epochs", "30")]),
        ExperimentKind::BucketLabels => (TRANSLATION, &[("label_side", "src")]),
    };
    // later entries override earlier ones
    v.extend_from_slice(base);
    v.extend_from_slice(extra);
    v
}

/// Keys naming a file or directory, resolved against the spec's directory.
const PATH_KEYS: &[&str] = &["data.train", "data.valid", "data.test"];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    values: BTreeMap<String, String>,
    /// Output root; runs land in `out/<hash>/`.
    pub out: PathBuf,
}

impl ExperimentSpec {
    /// Parses spec text; relative paths are taken relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut given = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| RunError::Spec(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if given.insert(k.clone(), v).is_some() {
                return Err(RunError::Spec(format!("line {}: {k} set twice", n + 1)));
            }
        }
        let kind: ExperimentKind = given
            .remove("kind")
            .ok_or_else(|| RunError::Spec("missing kind".into()))?
            .parse()?;
        let out = given.remove("out").map(|o| base_dir.join(o)).unwrap_or_else(|| PathBuf::from("runs"));
        let mut values: BTreeMap<String, String> =
            kind_defaults(kind).into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let translation = kind != ExperimentKind::StringSuite;
        for (k, v) in given {
            let known = values.contains_key(&k) || (translation && PATH_KEYS.contains(&k.as_str()));
            if !known {
                return Err(RunError::Spec(format!("unknown key {k:?} for kind {kind}")));
            }
            let v = if PATH_KEYS.contains(&k.as_str()) { base_dir.join(v).display().to_string() } else { v };
            values.insert(k, v);
        }
        let spec = ExperimentSpec { kind, values, out };
        spec.check()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Io(path.display().to_string(), e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Resolved settings, one `key = value` per line in key order.
    pub fn canonical(&self) -> String {
        let mut s = format!("kind = {}\n", self.kind);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.hash())
    }

    /// Replaces one setting (same validation as in the file).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "out" {
            self.out = PathBuf::from(value);
            return Ok(());
        }
        if !self.values.contains_key(key) && !PATH_KEYS.contains(&key) {
            return Err(RunError::Spec(format!("unknown key {key:?} for kind {}", self.kind)));
        }
        self.values.insert(key.to_string(), value.to_string());
        self.check()
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key).ok_or_else(|| RunError::Spec(format!("missing {key}")))?;
        v.parse().map_err(|_| RunError::Spec(format!("{key} = {v:?} is not valid")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.raw(key).ok_or_else(|| RunError::Spec(format!("missing {key}")))?;
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| RunError::Spec(format!("{key}: bad item {s:?}"))))
            .collect()
    }

    pub fn ranges(&self, key: &str) -> Result<Vec<BucketRange>> {
        let v = self.raw(key).ok_or_else(|| RunError::Spec(format!("missing {key}")))?;
        let out = v.split(',').map(|s| parse_range(s.trim())).collect::<Result<Vec<_>>>()?;
        if out.is_empty() {
            return Err(RunError::Spec(format!("{key} is empty")));
        }
        Ok(out)
    }

    pub fn range(&self, key: &str) -> Result<BucketRange> {
        parse_range(self.raw(key).ok_or_else(|| RunError::Spec(format!("missing {key}")))?)
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").expect("checked at parse time")
    }

    pub fn side(&self, key: &str) -> Result<Side> {
        match self.raw(key) {
            Some("src" | "source") => Ok(Side::Source),
            Some("tgt" | "target") => Ok(Side::Target),
            other => Err(RunError::Spec(format!("{key} must be src or tgt, got {other:?}"))),
        }
    }

    pub fn tasks(&self) -> Result<Vec<TaskSelection>> {
        self.list("tasks")
    }

    /// Model settings; the vocabulary size comes from the data.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d_model: self.get("model.d_model")?,
            d_ff: self.get("model.d_ff")?,
            heads: self.get("model.heads")?,
            enc_layers: self.get("model.enc_layers")?,
            dec_layers: self.get("model.dec_layers")?,
            dropout: self.get("model.dropout")?,
            max_positions: self.get("model.max_positions")?,
            vocab_size,
        };
        cfg.validate().map_err(|e| RunError::Spec(e.to_string()))?;
        Ok(cfg)
    }

    /// Training settings; `seed` is the per-row seed.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let patience = match self.raw("train.patience") {
            Some("none") | None => None,
            Some(_) => Some(self.get("train.patience")?),
        };
        let cfg = TrainConfig {
            lr_max: self.get("train.lr_max")?,
            warmup_steps: self.get("train.warmup_steps")?,
            batch_tokens: self.get("train.batch_tokens")?,
            max_epochs: self.get("train.max_epochs")?,
            patience,
            seed,
            adam: AdamConfig {
                beta1: self.get("train.adam_beta1")?,
                beta2: self.get("train.adam_beta2")?,
                eps: self.get("train.adam_eps")?,
            },
        };
        cfg.validate().map_err(|e| RunError::Spec(e.to_string()))?;
        Ok(cfg)
    }

    pub fn valid_metric(&self) -> Result<ValidMetric> {
        self.raw("train.valid_metric").unwrap_or("loss").parse().map_err(RunError::Spec)
    }

    pub fn strategy(&self) -> Result<Strategy> {
        let beam = BeamConfig {
            beam_size: self.get("decode.beam_size")?,
            alpha: self.get("decode.alpha")?,
            max_len_a: self.get("decode.max_len_a")?,
            max_len_b: self.get("decode.max_len_b")?,
            count_eos: true,
        };
        beam.validate().map_err(RunError::Spec)?;
        match self.raw("decode.strategy") {
            Some("beam") => Ok(Strategy::Beam(beam)),
            Some("greedy") => Ok(Strategy::Greedy),
            other => Err(RunError::Spec(format!("decode.strategy must be beam or greedy, got {other:?}"))),
        }
    }

    /// Validates everything that can be checked without touching data.
    fn check(&self) -> Result<()> {
        self.get::<u64>("seed")?;
        self.model_config(8)?;
        self.train_config(0)?;
        self.valid_metric()?;
        self.strategy()?;
        self.get::<usize>("eval.bootstrap")?;
        match self.kind {
            ExperimentKind::StringSuite => {
                if self.tasks()?.is_empty() {
                    return Err(RunError::Spec("tasks is empty".into()));
                }
                self.range("train_bucket")?;
                self.ranges("test_buckets")?;
                for k in ["train_count", "valid_count", "test_count"] {
                    self.get::<usize>(k)?;
                }
            }
            _ => {
                self.side("side")?;
                self.ranges("train_buckets")?;
                self.ranges("test_buckets")?;
                match self.raw("data") {
                    Some("surrogate") => {
                        for k in ["surrogate.words", "surrogate.max_words", "surrogate.clause_max"] {
                            if self.get::<usize>(k)? == 0 {
                                return Err(RunError::Spec(format!("{k} must be positive")));
                            }
                        }
                        self.get::<f64>("surrogate.expand")?;
                        self.get::<f64>("surrogate.period_rate")?;
                        for k in ["surrogate.train_per_bucket", "surrogate.valid_per_bucket", "surrogate.test_per_bucket"] {
                            self.get::<usize>(k)?;
                        }
                    }
                    Some("files") => {
                        for k in PATH_KEYS {
                            if self.raw(k).is_none() {
                                return Err(RunError::Spec(format!("data = files needs {k}")));
                            }
                        }
                    }
                    other => return Err(RunError::Spec(format!("data must be surrogate or files, got {other:?}"))),
                }
                match self.kind {
                    ExperimentKind::BucketMatrix => {
                        self.get::<bool>("include_full")?;
                    }
                    ExperimentKind::ConcatMatrix => {
                        self.range("concat.window")?;
                        self.ranges("concat.from")?;
                    }
                    ExperimentKind::FinetuneMatrix => {
                        self.get::<usize>("finetune.epochs")?;
                    }
                    ExperimentKind::BucketLabels => {
                        self.side("label_side")?;
                    }
                    ExperimentKind::StringSuite => unreachable!(),
                }
            }
        }
        Ok(())
    }
}

pub fn parse_range(s: &str) -> Result<BucketRange> {
    let bad = || RunError::Spec(format!("bad bucket range {s:?} (expected lo:hi)"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo = lo.trim().parse().map_err(|_| bad())?;
    let hi = hi.trim().parse().map_err(|_| bad())?;
    BucketRange::new(lo, hi).map_err(|_| bad())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let a = ExperimentSpec::parse("kind = string_suite\n", Path::new(".")).unwrap();
        assert_eq!(a.get::<usize>("train_count").unwrap(), 28000);
        assert_eq!(a.model_config(10).unwrap(), ModelConfig::string_tasks(10));
        assert_eq!(a.train_config(3).unwrap(), TrainConfig::string_tasks(3));
        // spelling out a default does not change the hash, `out` never does
        let b = ExperimentSpec::parse("# paper scale\nkind = string_suite\nseed = 1 # default\nout = elsewhere\n", Path::new("."))
            .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentSpec::parse("kind = string_suite\nseed = 2\n", Path::new(".")).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn rejects_bad_specs() {
        let p = |t: &str| ExperimentSpec::parse(t, Path::new("."));
        assert!(p("seed = 1\n").is_err());
        assert!(p("kind = nope\n").is_err());
        assert!(p("kind = string_suite\nconcat.window = 1:3\n").is_err());
        assert!(p("kind = string_suite\nseed = 1\nseed = 2\n").is_err());
        assert!(p("kind = string_suite\ntrain_bucket = 5\n").is_err());
        assert!(p("kind = string_suite\nmodel.heads = 3\n").is_err());
        assert!(p("kind = bucket_matrix\ndata = files\n").is_err());
        assert!(p("kind = concat_matrix\nconcat.window = 17:24\nconcat.from = 5:8\n").is_ok());
    }
}
