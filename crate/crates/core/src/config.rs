//! Run configuration in flat `section.key = value` form.
//!
//! Lines starting with `#` (and anything after a `#`) are comments. Keys not
//! present in a file keep the value of the preset the file is applied to, so a
//! config file only needs to list overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::{LoadOptions, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluator::{EvalOptions, DEFAULT_BUCKET_EDGES};
use crate::pretrain::PretrainConfig;
use crate::quantizer::OpqParams;
use crate::seqencoder::EncoderConfig;
use crate::transfer::FinetuneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    /// Directory that relative artifact paths are resolved against.
    pub workdir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub pretrain_domains: Vec<u32>,
    pub target_domains: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalConfig {
    pub quantizer: OpqParams,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub transfer: FinetuneConfig,
    pub eval: EvalOptions,
    pub data: LoadOptions,
    pub synth: SynthConfig,
    pub study: StudyConfig,
    pub run: RunConfig,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig::preset(Preset::Desk)
    }
}

trait Value: Sized {
    fn render(&self) -> String;
    fn read(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn render(&self) -> String {
                format!("{self:?}")
            }
            fn read(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, bool);

impl Value for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
    fn read(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
}

impl<T: Value> Value for Vec<T> {
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
    fn read(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::read(p.trim())).collect()
    }
}

impl Value for u32 {
    fn render(&self) -> String {
        self.to_string()
    }
    fn read(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: std::num::ParseIntError| e.to_string())
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        /// Every recognised key, in serialization order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl GlobalConfig {
            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, Value::render(&self.$($field).+))),*]
            }

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = Value::read(value)
                            .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
                }
                Ok(())
            }
        }
    };
}

config_keys! {
    "run.seed" => run.seed,
    "run.threads" => run.threads,
    "run.workdir" => run.workdir,
    "quantizer.num_subspaces" => quantizer.num_subspaces,
    "quantizer.num_centroids" => quantizer.num_centroids,
    "quantizer.outer_iters" => quantizer.outer_iters,
    "quantizer.kmeans_iters" => quantizer.kmeans_iters,
    "encoder.layers" => encoder.layers,
    "encoder.heads" => encoder.heads,
    "encoder.dim" => encoder.dim,
    "encoder.max_len" => encoder.max_len,
    "encoder.dropout" => encoder.dropout,
    "pretrain.batch_size" => pretrain.batch_size,
    "pretrain.tau" => pretrain.tau,
    "pretrain.rho" => pretrain.rho,
    "pretrain.lr" => pretrain.lr,
    "pretrain.max_epochs" => pretrain.max_epochs,
    "pretrain.patience" => pretrain.patience,
    "pretrain.steps_per_epoch" => pretrain.steps_per_epoch,
    "pretrain.disable_semi_synthetic" => pretrain.disable_semi_synthetic,
    "pretrain.valid_cap" => pretrain.valid_cap,
    "transfer.align_epochs" => transfer.align_epochs,
    "transfer.table_epochs" => transfer.table_epochs,
    "transfer.align_lr" => transfer.align_lr,
    "transfer.table_lr" => transfer.table_lr,
    "transfer.batch_size" => transfer.batch_size,
    "transfer.patience" => transfer.patience,
    "transfer.sinkhorn_temp" => transfer.sinkhorn_temp,
    "transfer.sinkhorn_iters" => transfer.sinkhorn_iters,
    "transfer.gumbel_noise_scale" => transfer.gumbel_noise_scale,
    "transfer.theta_init_std" => transfer.theta_init_std,
    "transfer.harden" => transfer.harden,
    "transfer.valid_cap" => transfer.valid_cap,
    "transfer.skip_alignment" => transfer.skip_alignment,
    "transfer.random_code" => transfer.random_code,
    "transfer.reuse_pretrain_codebook" => transfer.reuse_pretrain_codebook,
    "transfer.no_pretrain" => transfer.no_pretrain,
    "eval.ks" => eval.ks,
    "eval.bucket_edges" => eval.bucket_edges,
    "eval.exclude_context" => eval.exclude_context,
    "data.min_user_interactions" => data.min_user_interactions,
    "data.min_item_interactions" => data.min_item_interactions,
    "synth.num_domains" => synth.num_domains,
    "synth.items_per_domain" => synth.items_per_domain,
    "synth.users_per_domain" => synth.users_per_domain,
    "synth.min_len" => synth.min_len,
    "synth.max_len" => synth.max_len,
    "synth.embedding_dim" => synth.embedding_dim,
    "synth.latent_dim" => synth.latent_dim,
    "synth.overlap" => synth.overlap,
    "synth.noise_std" => synth.noise_std,
    "synth.shift_scale" => synth.shift_scale,
    "synth.transition_temp" => synth.transition_temp,
    "synth.taste_weight" => synth.taste_weight,
    "study.pretrain_domains" => study.pretrain_domains,
    "study.target_domains" => study.target_domains,
}

impl GlobalConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = GlobalConfig {
            quantizer: OpqParams::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            transfer: FinetuneConfig::default(),
            eval: EvalOptions {
                bucket_edges: DEFAULT_BUCKET_EDGES.to_vec(),
                ..EvalOptions::default()
            },
            data: LoadOptions::default(),
            synth: SynthConfig::default(),
            study: StudyConfig {
                pretrain_domains: vec![0, 1, 2],
                target_domains: vec![3],
            },
            run: RunConfig {
                seed: 0,
                threads: 1,
                workdir: PathBuf::from("."),
            },
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => GlobalConfig {
                quantizer: OpqParams {
                    num_subspaces: 256,
                    num_centroids: 32,
                    ..desk.quantizer
                },
                encoder: EncoderConfig {
                    dim: 300,
                    ..desk.encoder
                },
                pretrain: PretrainConfig {
                    batch_size: 2048,
                    max_epochs: 300,
                    ..desk.pretrain
                },
                synth: SynthConfig {
                    embedding_dim: 768,
                    ..desk.synth
                },
                ..desk
            },
        }
    }

    /// Applies `section.key = value` lines on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'section.key = value'", idx + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(())
    }

    /// Parses a config on top of the desk preset.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = GlobalConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut cfg = GlobalConfig::preset(preset);
        cfg.apply(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    /// Cross-module consistency checks, run before any stage.
    pub fn validate(&self) -> Result<()> {
        let d = self.quantizer.num_subspaces;
        if d == 0 || self.quantizer.num_centroids < 2 {
            return Err(Error::Config("quantizer.num_subspaces must be positive and num_centroids at least 2".into()));
        }
        if self.synth.embedding_dim % d != 0 {
            return Err(Error::Config(format!(
                "synth.embedding_dim = {} is not divisible by quantizer.num_subspaces = {d}",
                self.synth.embedding_dim
            )));
        }
        if self.encoder.heads == 0 || self.encoder.dim % self.encoder.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.dim = {} is not divisible by encoder.heads = {}",
                self.encoder.dim, self.encoder.heads
            )));
        }
        if self.run.threads == 0 {
            return Err(Error::Config("run.threads must be at least 1".into()));
        }
        self.encoder.validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        self.eval_options().validate()?;
        self.synth.validate()?;
        let s = &self.study;
        if s.pretrain_domains.is_empty() || s.target_domains.is_empty() {
            return Err(Error::Config("study.pretrain_domains and study.target_domains must be non-empty".into()));
        }
        for &dom in s.pretrain_domains.iter().chain(&s.target_domains) {
            if dom as usize >= self.synth.num_domains {
                return Err(Error::Config(format!(
                    "study domain {dom} exceeds synth.num_domains = {}",
                    self.synth.num_domains
                )));
            }
        }
        if s.pretrain_domains.iter().any(|d| s.target_domains.contains(d)) {
            return Err(Error::Config("study.pretrain_domains and study.target_domains overlap".into()));
        }
        Ok(())
    }

    /// Checks an artifact's `(D, M)` against the quantizer settings.
    pub fn check_codes(&self, what: &str, d: usize, m: usize) -> Result<()> {
        let (cd, cm) = (self.quantizer.num_subspaces, self.quantizer.num_centroids);
        if (d, m) != (cd, cm) {
            return Err(Error::Config(format!(
                "{what} has (D={d}, M={m}) but the config expects quantizer.num_subspaces = {cd}, quantizer.num_centroids = {cm}"
            )));
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.run.seed,
            threads: self.run.threads,
            ..self.pretrain.clone()
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.run.seed,
            threads: self.run.threads,
            ..self.transfer.clone()
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            threads: self.run.threads,
            subset: None,
            ..self.eval.clone()
        }
    }

    /// Resolves a relative artifact path against `run.workdir`.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.run.workdir.join(p)
        }
    }
}

impl fmt::Display for GlobalConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut section = "";
        for (key, value) in self.entries() {
            let sec = key.split('.').next().unwrap_or("");
            if sec != section {
                if !section.is_empty() {
                    writeln!(f)?;
                }
                writeln!(f, "# {sec}")?;
                section = sec;
            }
            writeln!(f, "{key} = {value}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_are_valid() {
        GlobalConfig::preset(Preset::Desk).validate().unwrap();
        GlobalConfig::preset(Preset::Paper).validate().unwrap();
        let p = GlobalConfig::preset(Preset::Paper);
        assert_eq!((p.quantizer.num_subspaces, p.quantizer.num_centroids), (256, 32));
        assert_eq!(p.pretrain.batch_size, 2048);
        assert_eq!(p.transfer.sinkhorn_iters, 3);
    }

    #[test]
    fn every_key_is_serialized_once() {
        let text = GlobalConfig::default().to_string();
        for key in KEYS {
            let n = text.lines().filter(|l| l.starts_with(&format!("{key} ="))).count();
            assert_eq!(n, 1, "{key}");
        }
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = GlobalConfig::parse("# a comment\n\nencoder.dim = 32 # trailing\npretrain.tau=0.1\n").unwrap();
        assert_eq!(cfg.encoder.dim, 32);
        assert_eq!(cfg.pretrain.tau, 0.1);
        assert_eq!(cfg.quantizer, OpqParams::default());
    }

    #[test]
    fn bad_lines_name_the_field() {
        let err = GlobalConfig::parse("encoder.dim = abc").unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("encoder.dim"));
        assert!(GlobalConfig::parse("nope.key = 1").unwrap_err().to_string().contains("nope.key"));
        assert!(GlobalConfig::parse("just words").is_err());
    }

    #[test]
    fn cross_module_checks() {
        let mut c = GlobalConfig::default();
        c.synth.embedding_dim = 30;
        assert!(c.validate().unwrap_err().to_string().contains("num_subspaces"));
        let mut c = GlobalConfig::default();
        c.encoder.heads = 3;
        assert!(c.validate().is_err());
        let mut c = GlobalConfig::default();
        c.study.target_domains = vec![2];
        assert!(c.validate().is_err());
        let c = GlobalConfig::default();
        assert!(c.check_codes("codebook", 8, 16).is_ok());
        assert!(c.check_codes("codebook", 4, 16).is_err());
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(
            seed in any::<u64>(),
            dim_heads in 1usize..5,
            tau in 1e-4f64..10.0,
            rho in 0.0f64..=1.0,
            ks in proptest::collection::vec(1usize..200, 1..4),
            harden in any::<bool>(),
            overlap in 0.0f64..=1.0,
        ) {
            let mut c = GlobalConfig::default();
            c.run.seed = seed;
            c.encoder.heads = dim_heads;
            c.encoder.dim = 16 * dim_heads;
            c.pretrain.tau = tau;
            c.pretrain.rho = rho;
            c.eval.ks = ks;
            c.transfer.harden = harden;
            c.synth.overlap = overlap;
            let once = GlobalConfig::parse(&c.to_string()).unwrap();
            prop_assert_eq!(&once, &c);
            let twice = GlobalConfig::parse(&once.to_string()).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
