//! Experiment configuration: TOML file, defaults for every field, dotted overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DatasetKind;
use crate::error::{Result, SigmaError};

/// Model variant used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Full,
    /// Standard normal prior with its own KL weight.
    UniPrior(f64),
    NoOrth,
    MieOnly,
}

impl Variant {
    pub fn uses_sequence_model(self) -> bool {
        !matches!(self, Variant::MieOnly)
    }

    pub fn uses_interest_model(self) -> bool {
        !matches!(self, Variant::UniPrior(_))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::UniPrior(l) => write!(f, "uni_prior({l})"),
            Variant::NoOrth => write!(f, "no_orth"),
            Variant::MieOnly => write!(f, "mie_only"),
        }
    }
}

impl FromStr for Variant {
    type Err = SigmaError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "full" => return Ok(Variant::Full),
            "no_orth" => return Ok(Variant::NoOrth),
            "mie_only" => return Ok(Variant::MieOnly),
            _ => {}
        }
        if let Some(arg) = s.strip_prefix("uni_prior(").and_then(|r| r.strip_suffix(')')) {
            let l: f64 = arg
                .trim()
                .parse()
                .map_err(|_| SigmaError::Config(format!("bad KL weight in variant `{s}`")))?;
            if !(l > 0.0 && l.is_finite()) {
                return Err(SigmaError::Config(format!("KL weight in `{s}` must be positive")));
            }
            return Ok(Variant::UniPrior(l));
        }
        Err(SigmaError::Config(format!(
            "unknown variant `{s}` (expected full, uni_prior(<weight>), no_orth, mie_only)"
        )))
    }
}

impl TryFrom<String> for Variant {
    type Error = SigmaError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Model and optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Number of interest categories.
    pub k: usize,
    /// Weight of the sequence KL term.
    pub lambda: f64,
    /// Weight of the interest ELBO.
    pub beta1: f64,
    /// Weight of the orthogonality penalty.
    pub beta2: f64,
    pub lr: f64,
    pub dropout: f64,
    pub dim: usize,
    pub max_len: usize,
    pub heads: usize,
    pub blocks: usize,
    /// 0 means `dim`.
    pub ffn_dim: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub category_temperature: f64,
    pub gumbel_temperature: f64,
    pub score_temperature: f64,
    pub decoder_temperature: f64,
    pub abs_orthogonality: bool,
    pub detach_prior: bool,
    /// Linear KL warm-up length in epochs; 0 disables it.
    pub kl_warmup_epochs: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Full,
            k: 4,
            lambda: 1e-4,
            beta1: 1e-2,
            beta2: 1e-2,
            lr: 1e-3,
            dropout: 0.3,
            dim: 128,
            max_len: 100,
            heads: 4,
            blocks: 2,
            ffn_dim: 0,
            batch_size: 256,
            patience: 100,
            max_epochs: 1000,
            seed: 42,
            category_temperature: 0.1,
            gumbel_temperature: 0.5,
            score_temperature: 1.0,
            decoder_temperature: 1.0,
            abs_orthogonality: false,
            detach_prior: false,
            kl_warmup_epochs: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SigmaError::Config(m));
        if self.k == 0 {
            return bad("train.k must be at least 1".into());
        }
        for (name, v) in [("lambda", self.lambda), ("beta1", self.beta1), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("train.{name} must be positive, got {v}"));
            }
        }
        if !(self.beta2 >= 0.0 && self.beta2.is_finite()) {
            return bad(format!("train.beta2 must be nonnegative, got {}", self.beta2));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("train.dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.dim == 0 || self.max_len == 0 || self.batch_size == 0 || self.blocks == 0 {
            return bad("train.dim, max_len, batch_size and blocks must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "train.dim {} not divisible by train.heads {}",
                self.dim, self.heads
            ));
        }
        for (name, v) in [
            ("category_temperature", self.category_temperature),
            ("gumbel_temperature", self.gumbel_temperature),
            ("score_temperature", self.score_temperature),
            ("decoder_temperature", self.decoder_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("train.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    /// Weight on the orthogonality term after applying the variant.
    pub fn effective_beta2(&self) -> f64 {
        match self.variant {
            Variant::NoOrth => 0.0,
            _ => self.beta2,
        }
    }

    /// Weight on the sequence KL term after applying the variant.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::UniPrior(l) => l,
            _ => self.lambda,
        }
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub name: String,
    pub path: Option<PathBuf>,
    pub kind: DatasetKind,
    /// Keep ratings at or above this value; unset keeps everything.
    pub rating_threshold: Option<f64>,
    pub min_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "dataset".into(),
            path: None,
            kind: DatasetKind::Amazon,
            rating_threshold: None,
            min_count: 5,
        }
    }
}

impl DatasetConfig {
    pub fn threshold(&self) -> Option<f64> {
        self.rating_threshold.or(self.kind.default_threshold())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Item → genre labels, used for diversity.
    pub diversity_map: Option<PathBuf>,
    /// Cutoff of the validation recall used for early stopping.
    pub validation_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![20, 40],
            diversity_map: None,
            validation_k: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    pub lambdas: Vec<f64>,
    pub categories: Vec<usize>,
    /// Cutoffs of the accuracy/diversity table of the weight sweep.
    pub diversity_ks: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: vec![
                Variant::Full,
                Variant::UniPrior(1e-4),
                Variant::UniPrior(1.0),
                Variant::NoOrth,
                Variant::MieOnly,
            ],
            lambdas: vec![1e-2, 1e-3, 1e-4],
            categories: vec![2, 4, 8, 16],
            diversity_ks: vec![10, 40],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![42],
        }
    }
}

impl ExperimentConfig {
    /// Defaults, then the optional file, then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match file {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| SigmaError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| SigmaError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| SigmaError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.dataset.min_count == 0 {
            return Err(SigmaError::Config("dataset.min_count must be at least 1".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(SigmaError::Config("eval.ks must list positive cutoffs".into()));
        }
        if self.seeds.is_empty() {
            return Err(SigmaError::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_else(|e| format!("# unprintable config: {e}"))
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| SigmaError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(SigmaError::Config(format!("invalid override key `{key}`")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| SigmaError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Short sha256 of the JSON encoding.
pub fn hash_json<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.train.k, 4);
        assert_eq!(c.train.lambda, 1e-4);
        assert_eq!(c.ablate.categories, vec![2, 4, 8, 16]);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = ExperimentConfig::resolve(
            None,
            &[
                "train.k=8".into(),
                "train.variant=uni_prior(1)".into(),
                "dataset.name=office".into(),
                "eval.ks=[5, 10]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.k, 8);
        assert_eq!(c.train.variant, Variant::UniPrior(1.0));
        assert_eq!(c.dataset.name, "office");
        assert_eq!(c.eval.ks, vec![5, 10]);
        assert!(c.to_toml().contains("k = 8"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for o in [
            "train.kk=3",
            "nope=1",
            "train.k=0",
            "train.variant=bogus",
            "train",
            "train..k=1",
        ] {
            let e = ExperimentConfig::resolve(None, &[o.into()]).unwrap_err();
            assert!(matches!(e, SigmaError::Config(_)), "{o}: {e:?}");
        }
    }

    #[test]
    fn variants_round_trip() {
        for v in [
            Variant::Full,
            Variant::UniPrior(1e-4),
            Variant::NoOrth,
            Variant::MieOnly,
        ] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("uni_prior(-1)".parse::<Variant>().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.k = 8;
        assert_ne!(a.hash(), b.hash());
    }
}
