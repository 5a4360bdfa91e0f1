//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored; unknown keys are errors.
//! Recognized keys:
//!
//! | key | default |
//! |-----|---------|
//! | `preset` | `tiny` (model preset; the fields below override it) |
//! | `encoding_kind` | `ddrp` |
//! | `layers`, `heads`, `hidden`, `max_len`, `r_s`, `r_a`, `group_count`, `dropout`, `init_std` | from preset |
//! | `tie_embeddings`, `per_layer_relative` | from preset |
//! | `objective` | `mth` (`mlm` or `mth`) |
//! | `alpha1`, `alpha2` | `1.0`, `0.01` |
//! | `n_prime`, `m_prime` | `50`, `2` |
//! | `hcd_weight_space` | `pre_softmax` |
//! | `tcd_sampling` | `uniform` (or `strided`) |
//! | `mask_ratio` | `0.15` |
//! | `lr`, `warmup_ratio` | `1e-4`, `0.01` |
//! | `beta1`, `beta2`, `adam_eps` | `0.9`, `0.999`, `1e-6` |
//! | `weight_decay`, `clip_norm` | `0.01`, `1.0` |
//! | `step_max`, `batch_size` | `1000`, `8` |
//! | `log_interval` | `100` |
//! | `checkpoint_interval` | `step_max / 10` |
//! | `log_wall_time` | `false` |
//! | `seed` | `0` |
//! | `corpus` | path to a text corpus (unset) |
//! | `synthetic`, `synthetic_size` | synthetic preset (unset), `2000` |
//! | `vocab_cap`, `min_doc_len` | `8192`, `8` |
//! | `triangle_t`, `triangle_ms`, `triangle_norm` | `0.5`, `64`, `effective_length` |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{SynthPreset, DEFAULT_MIN_DOC_LEN};
use crate::diagnostics::{TriangleNorm, DEFAULT_MS, DEFAULT_TRIANGLE_T};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{WeightSpace, DEFAULT_ALPHA1, DEFAULT_ALPHA2, DEFAULT_MASK_RATIO, DEFAULT_M_PRIME, DEFAULT_N_PRIME};
use crate::relpos::EncodingKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mlm,
    Mth,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSampling {
    #[default]
    Uniform,
    Strided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub objective: Objective,
    pub alpha1: f64,
    pub alpha2: f64,
    pub n_prime: usize,
    pub m_prime: usize,
    pub hcd_weight_space: WeightSpace,
    pub tcd_sampling: TokenSampling,
    pub mask_ratio: f64,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub step_max: u64,
    pub batch_size: usize,
    pub log_interval: u64,
    pub checkpoint_interval: Option<u64>,
    pub log_wall_time: bool,
    pub seed: u64,
    pub corpus: Option<String>,
    pub synthetic: Option<SynthPreset>,
    pub synthetic_size: usize,
    pub vocab_cap: usize,
    pub min_doc_len: usize,
    pub triangle_t: f64,
    pub triangle_ms: usize,
    pub triangle_norm: TriangleNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: "tiny".into(),
            model: ModelConfig::preset("tiny").expect("tiny preset exists"),
            objective: Objective::Mth,
            alpha1: DEFAULT_ALPHA1,
            alpha2: DEFAULT_ALPHA2,
            n_prime: DEFAULT_N_PRIME,
            m_prime: DEFAULT_M_PRIME,
            hcd_weight_space: WeightSpace::PreSoftmax,
            tcd_sampling: TokenSampling::Uniform,
            mask_ratio: DEFAULT_MASK_RATIO,
            lr: 1e-4,
            warmup_ratio: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
            step_max: 1000,
            batch_size: 8,
            log_interval: 100,
            checkpoint_interval: None,
            log_wall_time: false,
            seed: 0,
            corpus: None,
            synthetic: None,
            synthetic_size: 2000,
            vocab_cap: 8192,
            min_doc_len: DEFAULT_MIN_DOC_LEN,
            triangle_t: DEFAULT_TRIANGLE_T,
            triangle_ms: DEFAULT_MS,
            triangle_norm: TriangleNorm::EffectiveLength,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.into()))
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

impl TrainConfig {
    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = TrainConfig::default();
        if let Some(p) = pairs.get("preset") {
            c.set("preset", p)?;
        }
        for (key, value) in pairs.iter().filter(|(k, _)| *k != "preset") {
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies one override. `preset` replaces the whole model configuration, so set it first.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if key == "preset" {
            self.model = ModelConfig::preset(v)?;
            self.preset = v.to_string();
            return Ok(());
        }
        let m = &mut self.model;
        match key {
            "encoding_kind" => m.encoding = v.parse::<EncodingKind>()?,
            "layers" => m.layers = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "max_len" => m.max_len = parse(key, v)?,
            "r_s" => m.r_s = parse(key, v)?,
            "r_a" => m.r_a = parse(key, v)?,
            "group_count" => m.group_count = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "init_std" => m.init_std = parse(key, v)?,
            "tie_embeddings" => m.tie_embeddings = parse_bool(key, v)?,
            "per_layer_relative" => m.per_layer_relative = parse_bool(key, v)?,
            "objective" => self.objective = parse_enum(key, v)?,
            "alpha1" => self.alpha1 = parse(key, v)?,
            "alpha2" => self.alpha2 = parse(key, v)?,
            "n_prime" => self.n_prime = parse(key, v)?,
            "m_prime" => self.m_prime = parse(key, v)?,
            "hcd_weight_space" => self.hcd_weight_space = v.parse()?,
            "tcd_sampling" => self.tcd_sampling = parse_enum(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup_ratio" => self.warmup_ratio = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "step_max" => self.step_max = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "log_interval" => self.log_interval = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = Some(parse(key, v)?),
            "log_wall_time" => self.log_wall_time = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "corpus" => self.corpus = Some(v.to_string()),
            "synthetic" => self.synthetic = Some(v.parse()?),
            "synthetic_size" => self.synthetic_size = parse(key, v)?,
            "vocab_cap" => self.vocab_cap = parse(key, v)?,
            "min_doc_len" => self.min_doc_len = parse(key, v)?,
            "triangle_t" => self.triangle_t = parse(key, v)?,
            "triangle_ms" => self.triangle_ms = parse(key, v)?,
            "triangle_norm" => self.triangle_norm = parse_enum(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.step_max == 0 {
            return bad("step_max must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.log_interval == 0 || self.checkpoint_interval == Some(0) {
            return bad("log and checkpoint intervals must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1]");
        }
        if !(self.lr >= 0.0 && self.clip_norm > 0.0 && self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr, clip_norm, adam_eps and weight_decay must be non-negative (clip_norm, adam_eps positive)");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.alpha1.is_finite() && self.alpha2.is_finite()) {
            return bad("alpha1 and alpha2 must be finite");
        }
        if self.corpus.is_some() && self.synthetic.is_some() {
            return bad("set at most one of corpus and synthetic");
        }
        Ok(())
    }

    pub fn checkpoint_every(&self) -> u64 {
        self.checkpoint_interval.unwrap_or((self.step_max / 10).max(1))
    }

    /// Auxiliary loss weights actually applied (zero for the MLM objective).
    pub fn effective_alphas(&self) -> (f64, f64) {
        match self.objective {
            Objective::Mlm => (0.0, 0.0),
            Objective::Mth => (self.alpha1, self.alpha2),
        }
    }

    /// Canonical `key = value` rendering that [`TrainConfig::parse`] reads back.
    pub fn render(&self) -> String {
        let m = &self.model;
        let enum_str = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        let mut rows: Vec<(&str, String)> = vec![
            ("preset", self.preset.clone()),
            ("encoding_kind", m.encoding.to_string()),
            ("layers", m.layers.to_string()),
            ("heads", m.heads.to_string()),
            ("hidden", m.hidden.to_string()),
            ("max_len", m.max_len.to_string()),
            ("r_s", m.r_s.to_string()),
            ("r_a", m.r_a.to_string()),
            ("group_count", m.group_count.to_string()),
            ("dropout", m.dropout.to_string()),
            ("init_std", m.init_std.to_string()),
            ("tie_embeddings", m.tie_embeddings.to_string()),
            ("per_layer_relative", m.per_layer_relative.to_string()),
            ("objective", enum_str(serde_json::to_value(self.objective).unwrap_or_default())),
            ("alpha1", self.alpha1.to_string()),
            ("alpha2", self.alpha2.to_string()),
            ("n_prime", self.n_prime.to_string()),
            ("m_prime", self.m_prime.to_string()),
            ("hcd_weight_space", self.hcd_weight_space.as_str().to_string()),
            ("tcd_sampling", enum_str(serde_json::to_value(self.tcd_sampling).unwrap_or_default())),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("step_max", self.step_max.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("log_wall_time", self.log_wall_time.to_string()),
            ("seed", self.seed.to_string()),
            ("synthetic_size", self.synthetic_size.to_string()),
            ("vocab_cap", self.vocab_cap.to_string()),
            ("min_doc_len", self.min_doc_len.to_string()),
            ("triangle_t", self.triangle_t.to_string()),
            ("triangle_ms", self.triangle_ms.to_string()),
            ("triangle_norm", enum_str(serde_json::to_value(self.triangle_norm).unwrap_or_default())),
        ];
        if let Some(c) = self.checkpoint_interval {
            rows.push(("checkpoint_interval", c.to_string()));
        }
        if let Some(c) = &self.corpus {
            rows.push(("corpus", c.clone()));
        }
        if let Some(s) = self.synthetic {
            rows.push(("synthetic", s.to_string()));
        }
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.warmup_ratio, c.beta1, c.beta2, c.adam_eps), (1e-4, 0.01, 0.9, 0.999, 1e-6));
        assert_eq!((c.weight_decay, c.clip_norm, c.model.dropout), (0.01, 1.0, 0.1));
        assert_eq!((c.alpha1, c.alpha2, c.n_prime, c.m_prime), (1.0, 0.01, 50, 2));
        assert_eq!(c.checkpoint_every(), 100);
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let c = TrainConfig::parse("encoding_kind = shaw\nheads = 8\npreset = small").unwrap();
        assert_eq!((c.model.encoding, c.model.heads, c.model.hidden), (EncodingKind::Shaw, 8, 128));
        let mut d = TrainConfig::default();
        d.set("preset", "base").unwrap();
        assert_eq!((d.preset.as_str(), d.model.layers), ("base", 12));
        assert!(d.set("preset", "huge").is_err());
    }

    #[test]
    fn parses_overrides_and_comments() {
        let c = TrainConfig::parse(
            "# comment\npreset = gradcheck\nencoding_kind = shaw\n\nobjective = mlm\nalpha2 = 0.1\nsynthetic = copy-both\nhcd_weight_space = post_softmax\ntriangle_norm = max_length\n",
        )
        .unwrap();
        assert_eq!(c.model.hidden, 16);
        assert_eq!(c.model.encoding, EncodingKind::Shaw);
        assert_eq!(c.objective, Objective::Mlm);
        assert_eq!(c.effective_alphas(), (0.0, 0.0));
        assert_eq!(c.alpha2, 0.1);
        assert_eq!(c.synthetic, Some(SynthPreset::CopyBoth));
        assert_eq!(c.hcd_weight_space, WeightSpace::PostSoftmax);
        assert_eq!(c.triangle_norm, TriangleNorm::MaxLength);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "learning_rate = 1",
            "lr 1e-4",
            "lr = fast",
            "objective = rtd",
            "step_max = 0",
            "seed = 1\nseed = 2",
            "preset = enormous",
            "encoding_kind = rope",
            "corpus = a.txt\nsynthetic = copy-forward",
        ] {
            assert!(matches!(TrainConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn render_round_trips() {
        let mut c = TrainConfig::parse("preset = small\nencoding_kind = tupe\ncheckpoint_interval = 7\nsynthetic = bracket-match").unwrap();
        c.alpha1 = 0.123456789;
        assert_eq!(TrainConfig::parse(&c.render()).unwrap(), c);
    }
}
