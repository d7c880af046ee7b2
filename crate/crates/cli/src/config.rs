//! Flat `key = value` experiment configuration.
//!
//! One key per line, `#` starts a comment, lists are comma-separated and
//! `auto` selects the backend-dependent default of an optional key.
//! Relative paths are resolved against the directory of the config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eaaw_core::attacks::AttackKind;
use eaaw_core::embedding::WatermarkLoss;
use eaaw_core::{Backend, MaskScheme, MetricMode, OptimizerKind};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Blobs,
    GlyphGrid,
    TokenCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerKind {
    /// Gaussian pixels pushed away from zero by a fixed floor.
    SignedNoise,
    Noise,
    Tokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    R1,
    Masks,
    Triggers,
    Epsilon,
    Loss,
}

impl SweepKind {
    pub const ALL: [SweepKind; 5] = [
        Self::R1,
        Self::Masks,
        Self::Triggers,
        Self::Epsilon,
        Self::Loss,
    ];
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok(Self::$variant),)*
                    _ => Err(format!(
                        "unknown {} `{s}` (expected one of: {})",
                        stringify!($ty),
                        [$($name),*].join(", ")
                    )),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $(Self::$variant => $name,)*
                })
            }
        }
    };
}

named_enum!(DataKind { Blobs => "blobs", GlyphGrid => "glyph_grid", TokenCorpus => "token_corpus" });
named_enum!(TriggerKind { SignedNoise => "signed_noise", Noise => "noise", Tokens => "tokens" });
named_enum!(SweepKind { R1 => "r1", Masks => "masks", Triggers => "triggers", Epsilon => "epsilon", Loss => "loss" });

/// A config value: parsed from the text after `=` and rendered back in
/// canonical form for hashing.
trait Value: Sized {
    fn parse(s: &str, base: &Path) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($ty:ty),*) => {$(
        impl Value for $ty {
            fn parse(s: &str, _: &Path) -> std::result::Result<Self, String> {
                s.parse::<$ty>().map_err(|e| e.to_string())
            }

            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(
    u64,
    usize,
    f64,
    bool,
    DataKind,
    TriggerKind,
    SweepKind,
    MetricMode,
    OptimizerKind,
    MaskScheme,
    WatermarkLoss,
    AttackKind
);

impl Value for String {
    fn parse(s: &str, _: &Path) -> std::result::Result<Self, String> {
        if s.is_empty() || s.contains(',') {
            return Err(format!("`{s}` must be nonempty and free of commas"));
        }
        Ok(s.to_owned())
    }

    fn render(&self) -> String {
        self.clone()
    }
}

impl Value for Backend {
    fn parse(s: &str, _: &Path) -> std::result::Result<Self, String> {
        match s {
            "classifier" => Ok(Backend::Classifier),
            "lm" => Ok(Backend::CausalLm),
            _ => Err(format!("unknown backend `{s}` (expected classifier or lm)")),
        }
    }

    fn render(&self) -> String {
        match self {
            Backend::Classifier => "classifier",
            Backend::CausalLm => "lm",
        }
        .to_owned()
    }
}

impl Value for PathBuf {
    fn parse(s: &str, base: &Path) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(base.join(s))
    }

    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl<T: Value> Value for Option<T> {
    fn parse(s: &str, base: &Path) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            T::parse(s, base).map(Some)
        }
    }

    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "auto".to_owned(), T::render)
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str, base: &Path) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse(p.trim(), base)).collect()
    }

    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config {
    ($($(#[doc = $doc:literal])* $key:ident: $ty:ty = $default:expr,)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn set(&mut self, key: &str, value: &str, base: &Path) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($key) => self.$key = <$ty as Value>::parse(value, base)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// Every key except `out` with its effective value, in declaration order.
            pub fn canonical(&self) -> String {
                let mut s = String::new();
                $(
                    if stringify!($key) != "out" {
                        s.push_str(stringify!($key));
                        s.push('=');
                        s.push_str(&Value::render(&self.$key));
                        s.push('\n');
                    }
                )*
                s
            }
        }
    };
}

config! {
    seed: u64 = 0,
    /// Output directory; `--out` overrides it.
    out: Option<PathBuf> = None,
    backend: Backend = Backend::Classifier,
    dataset: Option<DataKind> = None,

    samples: usize = 3500,
    classes: usize = 10,
    side: usize = 16,
    sigma: f64 = 1.0,
    spread: f64 = 0.35,
    base: f64 = 3.0,
    cells: usize = 4,
    flip: f64 = 0.1,
    glyph_sigma: f64 = 0.3,
    sequences: usize = 300,
    seq_len: usize = 64,
    vocab: usize = 64,
    branching: usize = 3,
    focus: f64 = 0.9,
    /// Training examples; the next `heldout_size` go to the adversary and
    /// the rest form the test set.
    train_size: Option<usize> = None,
    heldout_size: Option<usize> = None,

    hidden: Option<Vec<usize>> = None,
    context: usize = 32,
    embed_dim: usize = 16,
    train_epochs: usize = 20,
    train_lr: f64 = 1e-3,
    optimizer: OptimizerKind = OptimizerKind::Adam,
    batch_size: usize = 64,

    k: usize = 64,
    r1: f64 = 1.0,
    epsilon: f64 = 0.01,
    loss: WatermarkLoss = WatermarkLoss::Hinge,
    embed_epochs: usize = 30,
    embed_lr: f64 = 3e-4,
    embed_optimizer: OptimizerKind = OptimizerKind::Adam,
    lambda: f64 = 1.0,
    /// `auto`: leave-one-out, except random for label-only verification.
    scheme: Option<MaskScheme> = None,
    /// `auto`: one per bit, or 16 per bit for label-only verification.
    masks: Option<usize> = None,
    mask_seed: Option<u64> = None,
    early_stop: bool = false,
    triggers: usize = 1,
    trigger: Option<TriggerKind> = None,
    /// Token count of a language-model trigger.
    trigger_len: Option<usize> = None,
    trigger_seed: Option<u64> = None,
    watermark_seed: Option<u64> = None,
    mode: MetricMode = MetricMode::Logits,
    alpha: f64 = 0.01,
    /// Row label of verification summaries; defaults to the trigger kind.
    label: Option<String> = None,

    attacks: Vec<AttackKind> = vec![
        AttackKind::Finetune,
        AttackKind::Prune,
        AttackKind::Overwrite,
        AttackKind::Unlearn,
        AttackKind::InputMask,
    ],
    finetune_epochs: usize = 20,
    finetune_lr: f64 = 1e-3,
    prune_rate: f64 = 0.4,
    prune_per_layer: bool = false,
    overwrite_epochs: usize = 30,
    unlearn_epochs: usize = 10,
    unlearn_lr: f64 = 3e-4,
    unlearn_r1: f64 = 1.0,
    mask_rate: f64 = 0.1,
    mask_draws: usize = 1,
    adversary_seed: Option<u64> = None,

    data_dir: Option<PathBuf> = None,
    model: Option<PathBuf> = None,
    watermarked: Option<PathBuf> = None,
    trigger_file: Option<PathBuf> = None,
    watermark_file: Option<PathBuf> = None,
    runs: Option<PathBuf> = None,

    ablate: Vec<SweepKind> = SweepKind::ALL.to_vec(),
    sweep_r1: Vec<f64> = vec![0.0, 0.01, 0.1, 1.0, 10.0],
    sweep_masks: Vec<usize> = vec![16, 32, 64, 256],
    sweep_triggers: Vec<usize> = vec![1, 2, 4],
    sweep_epsilon: Vec<f64> = vec![0.001, 0.01, 0.1],
    sweep_loss: Vec<WatermarkLoss> = vec![WatermarkLoss::Hinge, WatermarkLoss::Ce, WatermarkLoss::Mse],
    sweep_seeds: usize = 1,
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| CliError::Config {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value.trim(), base).map_err(err)?;
            seen.push(key.to_owned());
        }
        cfg.validate().map_err(|msg| CliError::Config {
            path: path.to_path_buf(),
            line: 0,
            msg,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {v}"))
            }
        };
        unit("prune_rate", self.prune_rate)?;
        unit("mask_rate", self.mask_rate)?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.k < eaaw_core::watermark::MIN_BITS {
            return Err(format!(
                "k must be at least {}",
                eaaw_core::watermark::MIN_BITS
            ));
        }
        if self.triggers == 0 || self.mask_draws == 0 || self.sweep_seeds == 0 {
            return Err("triggers, mask_draws and sweep_seeds must be positive".into());
        }
        let lm = self.backend == Backend::CausalLm;
        if lm != (self.dataset() == DataKind::TokenCorpus) {
            return Err(format!(
                "dataset {} does not fit backend {}",
                self.dataset(),
                self.backend.render()
            ));
        }
        if lm != (self.trigger_kind() == TriggerKind::Tokens) {
            return Err(format!(
                "trigger {} does not fit backend {}",
                self.trigger_kind(),
                self.backend.render()
            ));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("run"))
    }

    pub fn dataset(&self) -> DataKind {
        self.dataset.unwrap_or(match self.backend {
            Backend::Classifier => DataKind::Blobs,
            Backend::CausalLm => DataKind::TokenCorpus,
        })
    }

    pub fn trigger_kind(&self) -> TriggerKind {
        self.trigger.unwrap_or(match self.backend {
            Backend::Classifier => TriggerKind::SignedNoise,
            Backend::CausalLm => TriggerKind::Tokens,
        })
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.trigger_kind().to_string())
    }

    pub fn trigger_seed(&self) -> u64 {
        self.trigger_seed.unwrap_or(self.seed + 99)
    }

    pub fn watermark_seed(&self) -> u64 {
        self.watermark_seed.unwrap_or(self.seed + 7)
    }

    pub fn mask_seed(&self) -> u64 {
        self.mask_seed.unwrap_or(self.seed + 11)
    }

    pub fn adversary_seed(&self) -> u64 {
        self.adversary_seed.unwrap_or(self.seed + 5000)
    }

    fn artifact(&self, set: &Option<PathBuf>, name: &str) -> PathBuf {
        set.clone().unwrap_or_else(|| self.out_dir().join(name))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir())
    }

    pub fn model_path(&self) -> PathBuf {
        self.artifact(&self.model, "model.bin")
    }

    pub fn watermarked_path(&self) -> PathBuf {
        self.artifact(&self.watermarked, "watermarked.bin")
    }

    pub fn trigger_path(&self) -> PathBuf {
        self.artifact(&self.trigger_file, "triggers.bin")
    }

    pub fn watermark_path(&self) -> PathBuf {
        self.artifact(&self.watermark_file, "watermark.txt")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.runs.clone().unwrap_or_else(|| self.out_dir())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/cfg/exp.cfg"))
    }

    #[test]
    fn reads_keys_comments_and_lists() {
        let c =
            parse("# run\nk = 128\nr1=0.5 # weight\nhidden = 32, 16\nattacks = prune,unlearn\n\n")
                .unwrap();
        assert_eq!(c.k, 128);
        assert_eq!(c.r1, 0.5);
        assert_eq!(c.hidden, Some(vec![32, 16]));
        assert_eq!(c.attacks, vec![AttackKind::Prune, AttackKind::Unlearn]);
    }

    #[test]
    fn unknown_and_duplicate_keys_name_the_line() {
        match parse("k = 64\nbogus = 1\n") {
            Err(CliError::Config { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse("k=8\nk=16"),
            Err(CliError::Config { line: 2, .. })
        ));
        assert!(matches!(parse("k"), Err(CliError::Config { line: 1, .. })));
        assert!(matches!(
            parse("loss = huber"),
            Err(CliError::Config { line: 1, .. })
        ));
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let c = parse("model = nets/m.bin\nruns = /abs/runs").unwrap();
        assert_eq!(c.model_path(), PathBuf::from("/cfg/nets/m.bin"));
        assert_eq!(c.runs_dir(), PathBuf::from("/abs/runs"));
    }

    #[test]
    fn backend_consistency() {
        assert!(parse("backend = lm\nk = 16").is_ok());
        assert!(matches!(
            parse("backend = lm\ndataset = blobs"),
            Err(CliError::Config { .. })
        ));
        assert!(matches!(
            parse("trigger = tokens"),
            Err(CliError::Config { .. })
        ));
    }

    #[test]
    fn hash_tracks_values_but_not_out() {
        let a = parse("k = 64").unwrap();
        let b = parse("k = 64\nout = elsewhere").unwrap();
        let c = parse("k = 65").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
        assert_eq!(
            a.canonical().lines().count(),
            ExperimentConfig::KEYS.len() - 1
        );
    }
}
