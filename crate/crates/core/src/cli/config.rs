//! Pipeline configuration: a flat `key = value` file, overridable by
//! environment variables (paths only) and command-line flags.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::ClosedClassPolicy;
use crate::decoder::Scoring;
use crate::melm::ScoreSource;

pub const ENV_DATASET: &str = "CAPGEN_DATASET";
pub const ENV_MODEL_DIR: &str = "CAPGEN_MODEL_DIR";
pub const ENV_REPORT_DIR: &str = "CAPGEN_REPORT_DIR";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("`{0}` must be set")]
    Missing(&'static str),
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: PathBuf, line: usize },
    #[error("cannot read config {path}: {msg}")]
    Read { path: PathBuf, msg: String },
}

/// Which images the `caption` command describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    All,
    Train,
    Val,
    Test,
}

/// Text form used by the config file and by the flags.
pub trait ConfigValue: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(u32, u64, usize, f64, bool);

impl ConfigValue for PathBuf {
    fn parse(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Option<u64> {
    fn parse(s: &str) -> Result<Self, String> {
        u64::parse(s).map(Some)
    }
    fn render(&self) -> String {
        self.map(|v| v.to_string()).unwrap_or_default()
    }
}

impl ConfigValue for [f64; 3] {
    fn parse(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err("expected three comma-separated numbers".into());
        }
        let mut out = [0.0; 3];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = f64::parse(p)?;
        }
        Ok(out)
    }
    fn render(&self) -> String {
        format!("{},{},{}", self[0], self[1], self[2])
    }
}

macro_rules! enum_value {
    ($t:ty { $($name:literal => $v:expr),* $(,)? }) => {
        impl ConfigValue for $t {
            fn parse(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($v),)*
                    _ => Err(format!("expected one of: {}", [$($name),*].join(", "))),
                }
            }
            fn render(&self) -> String {
                $(if *self == $v { return $name.to_string(); })*
                unreachable!()
            }
        }
    };
}

enum_value!(ClosedClassPolicy { "fixed" => ClosedClassPolicy::Fixed, "recompute" => ClosedClassPolicy::Recompute });
enum_value!(ScoreSource { "image_prob" => ScoreSource::ImageProb, "raw_score" => ScoreSource::RawScore });
enum_value!(Scoring { "unnormalized" => Scoring::Unnormalized, "exact" => Scoring::Exact });
enum_value!(SplitChoice {
    "all" => SplitChoice::All,
    "train" => SplitChoice::Train,
    "val" => SplitChoice::Val,
    "test" => SplitChoice::Test,
});

macro_rules! pipeline_config {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr, )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                PipelineConfig { $( $field: $default, )* }
            }
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse(value)
                            .map_err(|msg| ConfigError::Invalid { field: key.to_string(), msg })?;
                    })*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// Every field as a `key = value` line, in declaration order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( s.push_str(&format!("{} = {}\n", stringify!($field), ConfigValue::render(&self.$field))); )*
                s
            }
        }

        /// One flag per config field, taking the same text as the file.
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct ConfigArgs {
            $( $(#[doc = $doc])* #[arg(long, global = true, value_name = "VALUE")] pub $field: Option<String>, )*
        }

        impl ConfigArgs {
            pub fn apply(&self, config: &mut PipelineConfig) -> Result<(), ConfigError> {
                $( if let Some(v) = &self.$field { config.set(stringify!($field), v)?; } )*
                Ok(())
            }
        }
    };
}

pipeline_config! {
    /// Dataset file (JSONL).
    dataset: PathBuf = PathBuf::from("dataset.jsonl"),
    /// Directory for every model artifact.
    model_dir: PathBuf = PathBuf::from("models"),
    /// Directory for captions and evaluation reports.
    report_dir: PathBuf = PathBuf::from("reports"),
    /// Seed for every stochastic stage.
    seed: Option<u64> = None,
    /// Train, val and test fractions.
    split_ratios: [f64; 3] = [0.8, 0.1, 0.1],
    vocab_size: usize = 1000,
    /// Always-allowed decoder extensions (most frequent words).
    frequent_words: usize = 100,
    closed_class: ClosedClassPolicy = ClosedClassPolicy::Fixed,
    /// Precision a word must reach on held-out images to be detected.
    mil_tau: f64 = 0.5,
    mil_learning_rate: f64 = 0.05,
    mil_epochs: usize = 3,
    lm_hash_bits: u32 = 22,
    lm_nce_samples: usize = 15,
    lm_n_max: usize = 4,
    lm_learning_rate: f64 = 0.1,
    lm_epochs: usize = 10,
    use_score_feature: bool = true,
    score_source: ScoreSource = ScoreSource::ImageProb,
    beam_width: usize = 200,
    /// Maximum words per sentence, `</s>` excluded.
    max_len: usize = 19,
    m_best: usize = 500,
    /// Cap on the initial coverage target.
    t_cap: usize = 10,
    scoring: Scoring = Scoring::Unnormalized,
    dmsm_d_sem: usize = 32,
    dmsm_conv_channels: usize = 64,
    dmsm_text_hidden: usize = 64,
    dmsm_image_hidden: usize = 64,
    dmsm_gamma: f64 = 10.0,
    dmsm_negatives: usize = 50,
    dmsm_overflow_buckets: usize = 64,
    dmsm_learning_rate: f64 = 0.01,
    dmsm_epochs: usize = 10,
    use_dmsm: bool = true,
    mert_restarts: usize = 8,
    /// References per image for MERT and evaluation.
    references: usize = 4,
    caption_split: SplitChoice = SplitChoice::Test,
}

fn check(ok: bool, field: &str, msg: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid { field: field.to_string(), msg: msg.to_string() })
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl PipelineConfig {
    /// Reads `key = value` lines; `#` starts a comment.
    pub fn parse_text(&mut self, text: &str, origin: &Path) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { path: origin.to_path_buf(), line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.to_path_buf(), msg: e.to_string() })?;
        self.parse_text(&text, path)
    }

    /// Applies the path overrides from the environment.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        for (var, key) in [(ENV_DATASET, "dataset"), (ENV_MODEL_DIR, "model_dir"), (ENV_REPORT_DIR, "report_dir")] {
            if let Some(v) = get(var) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or(ConfigError::Missing("seed"))
    }

    /// Range checks; the seed is checked separately by the stages that need it.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = self.split_ratios;
        check(r.iter().all(|x| x.is_finite() && *x >= 0.0) && r.iter().sum::<f64>() > 0.0, "split_ratios", "need non-negative fractions with a positive sum")?;
        check(self.vocab_size >= 1, "vocab_size", "must be at least 1")?;
        check(self.mil_tau > 0.0 && self.mil_tau <= 1.0, "mil_tau", "must be in (0, 1]")?;
        check(positive(self.mil_learning_rate), "mil_learning_rate", "must be positive")?;
        check((1..=30).contains(&self.lm_hash_bits), "lm_hash_bits", "must be in 1..=30")?;
        check(self.lm_nce_samples >= 1, "lm_nce_samples", "must be at least 1")?;
        check((1..=crate::melm::MAX_ORDER).contains(&self.lm_n_max), "lm_n_max", "must be in 1..=4")?;
        check(positive(self.lm_learning_rate), "lm_learning_rate", "must be positive")?;
        check(self.beam_width >= 1, "beam_width", "must be at least 1")?;
        check(self.max_len >= 1, "max_len", "must be at least 1")?;
        check(self.m_best >= 1, "m_best", "must be at least 1")?;
        check(self.dmsm_d_sem >= 1, "dmsm_d_sem", "must be at least 1")?;
        check(self.dmsm_conv_channels >= 1, "dmsm_conv_channels", "must be at least 1")?;
        check(self.dmsm_text_hidden >= 1, "dmsm_text_hidden", "must be at least 1")?;
        check(self.dmsm_image_hidden >= 1, "dmsm_image_hidden", "must be at least 1")?;
        check(positive(self.dmsm_gamma), "dmsm_gamma", "must be positive")?;
        check(self.dmsm_negatives >= 1, "dmsm_negatives", "must be at least 1")?;
        check(positive(self.dmsm_learning_rate), "dmsm_learning_rate", "must be positive")?;
        check(self.references >= 1, "references", "must be at least 1")?;
        Ok(())
    }
}
