//! Run configuration: flat `key = value` text, `#` comments, unknown keys
//! rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::anss::{AnchorParams, SelectionMode};
use crate::cvlp::PretrainConfig;
use crate::datasynth::CorpusParams;
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::lgr::{FinetuneConfig, HeadKind};

macro_rules! run_config {
    ($( $key:ident : $ty:ty = $default:expr ; $doc:literal )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $key: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $key: $default, )* }
            }
        }

        impl RunConfig {
            /// Every key with its default value and description.
            pub fn keys() -> Vec<(&'static str, String, &'static str)> {
                let d = RunConfig::default();
                vec![$( (stringify!($key), d.$key.to_string(), $doc), )*]
            }

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = value.trim().parse::<$ty>().map_err(|_| {
                            Error::Config(format!("bad value `{value}` for `{key}`"))
                        })?;
                    } )*
                    other => return Err(Error::Config(format!("unknown config key `{other}`"))),
                }
                Ok(())
            }

            /// Canonical `key = value` text with every key, in declaration order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( writeln!(out, "{} = {}", stringify!($key), self.$key).expect("string write"); )*
                out
            }
        }
    };
}

run_config! {
    seed: u64 = 0; "master seed; every stage derives its own stream from it"
    classes: usize = 20; "number of classes C"
    d_img: usize = 32; "image feature dimension"
    embed_dim: usize = 32; "shared embedding dimension D"
    n_max: usize = 500; "training images in the largest class"
    n_min: usize = 5; "training images in the smallest class"
    alpha: f64 = 6.0; "Pareto shape label of the class-count curve"
    noise_sigma: f64 = 0.25; "per-coordinate Gaussian noise around each class prototype"
    identity_weight: f64 = 1.0; "weight of each prototype's class-specific direction against its attribute directions"
    test_per_class: usize = 100; "balanced test images per class"
    sentences_per_class: usize = 120; "mean descriptive sentences per class"
    prompt_count: usize = 80; "prompt sentences per class"
    noise_fraction: f64 = 0.2; "fraction of descriptive sentences that are distractors"
    max_tokens: usize = 77; "token limit per sentence, markers included"
    teacher_epochs: usize = 4; "epochs of teacher pre-training on the balanced variant"
    pretrain_epochs: usize = 30; "pre-training epochs"
    pretrain_batch: usize = 64; "pre-training batch size N"
    pretrain_lr: f64 = 3e-3; "pre-training peak learning rate"
    init_from_teacher: bool = true; "start the student from the teacher's weights (tau reset to tau_init)"
    lambda: f64 = 0.5; "weight of the contrastive term against distillation"
    tau_init: f64 = 0.07; "initial temperature"
    weight_decay: f64 = 0.05; "AdamW decoupled weight decay"
    anchor_m: usize = 64; "anchor sentences per class M"
    anchor_mode: SelectionMode = SelectionMode::Anss; "anchor selection: anss or cutoff"
    probe_cap: usize = 50; "probe images per class during anchor scoring"
    finetune_epochs: usize = 20; "fine-tuning epochs"
    finetune_batch: usize = 64; "fine-tuning batch size"
    finetune_lr: f64 = 1e-3; "fine-tuning peak learning rate"
    head: HeadKind = HeadKind::Lgr; "recognition head: lgr, fc or knn"
    ablation_seeds: usize = 3; "training seeds per ablation configuration"
}

/// The rates quoted for full-size models; the defaults above are rescaled
/// for the small synthetic task.
pub const PAPER_PRETRAIN_LR: f64 = 5e-5;
pub const PAPER_FINETUNE_LR: f64 = 1e-3;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// The values at which the paper's full-scale runs were configured.
    pub fn paper_profile() -> Self {
        RunConfig {
            pretrain_lr: PAPER_PRETRAIN_LR,
            finetune_lr: PAPER_FINETUNE_LR,
            ..RunConfig::default()
        }
    }

    /// SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// SHA-256 over the keys that shape the generated data alone.
    pub fn data_fingerprint(&self) -> String {
        let keys = [
            "seed", "classes", "d_img", "n_max", "n_min", "alpha", "noise_sigma", "identity_weight",
            "test_per_class", "sentences_per_class", "prompt_count", "noise_fraction", "max_tokens",
        ];
        let text = self.to_text();
        let kept: Vec<&str> = text
            .lines()
            .filter(|l| keys.contains(&l.split(" = ").next().unwrap_or("")))
            .collect();
        sha256_hex(kept.join("\n").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.d_img == 0 || self.embed_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return bad("need 1 <= n_min <= n_max");
        }
        if self.test_per_class == 0 {
            return bad("test_per_class must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return bad("noise_fraction must lie in [0, 1]");
        }
        if !(self.tau_init > 0.0) {
            return bad("tau_init must be positive");
        }
        if self.anchor_m == 0 || self.probe_cap == 0 {
            return bad("anchor_m and probe_cap must be positive");
        }
        if self.pretrain_batch == 0 || self.finetune_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.max_tokens < 4 {
            return bad("max_tokens must be at least 4");
        }
        Ok(())
    }

    pub fn corpus_params(&self) -> CorpusParams {
        CorpusParams {
            sentences_per_class: self.sentences_per_class,
            prompt_count: self.prompt_count,
            noise_fraction: self.noise_fraction,
            max_tokens: self.max_tokens,
            ..CorpusParams::default()
        }
    }

    pub fn pretrain_config(&self, lambda: f64, seed: u64) -> PretrainConfig {
        PretrainConfig {
            lambda,
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            base_lr: self.pretrain_lr,
            min_lr: 0.0,
            weight_decay: self.weight_decay,
            seed,
        }
    }

    pub fn anchor_params(&self, mode: SelectionMode) -> AnchorParams {
        AnchorParams {
            m: self.anchor_m,
            mode,
            probe_cap: self.probe_cap,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self, head: HeadKind, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            head,
            epochs: self.finetune_epochs,
            batch_size: self.finetune_batch,
            base_lr: self.finetune_lr,
            min_lr: 0.0,
            weight_decay: self.weight_decay,
            seed,
        }
    }

    /// `--help` text listing every key with its default.
    pub fn help() -> String {
        let keys = Self::keys();
        let w = keys.iter().map(|k| k.0.len() + k.1.len() + 3).max().unwrap_or(0);
        let mut out = String::from("Config keys (key = default):\n");
        for (k, v, doc) in keys {
            let kv = format!("{k} = {v}");
            writeln!(out, "  {kv:<w$}  {doc}").expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
        assert_eq!(d.prompt_count, 80);
        assert_eq!(d.max_tokens, 77);
        assert_eq!(d.lambda, 0.5);
        assert_eq!(d.tau_init, 0.07);
        assert_eq!(d.anchor_m, 64);
        assert_eq!(d.probe_cap, 50);
        d.validate().unwrap();
    }

    #[test]
    fn comments_overrides_and_unknown_keys() {
        let c = RunConfig::parse("# header\nclasses = 7  # trailing\n\nanchor_mode = cutoff\n").unwrap();
        assert_eq!(c.classes, 7);
        assert_eq!(c.anchor_mode, SelectionMode::Cutoff);
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(RunConfig::parse("classes = many").is_err());
        assert!(RunConfig::parse("classes").is_err());
        let mut c = RunConfig::default();
        c.set_pair("lambda=1").unwrap();
        assert_eq!(c.lambda, 1.0);
        assert_ne!(c.fingerprint(), RunConfig::default().fingerprint());
        assert!(c.set_pair("lambda").is_err());
        assert_eq!(c.data_fingerprint(), RunConfig::default().data_fingerprint());
        c.set_pair("noise_fraction=0.3").unwrap();
        assert_ne!(c.data_fingerprint(), RunConfig::default().data_fingerprint());
    }

    #[test]
    fn help_lists_every_key() {
        let help = RunConfig::help();
        for (k, v, _) in RunConfig::keys() {
            assert!(help.contains(&format!("{k} = {v}")), "{k}");
        }
        assert_eq!(RunConfig::paper_profile().pretrain_lr, 5e-5);
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.lambda = 1.5;
        assert!(c.validate().is_err());
        let c = RunConfig { n_min: 600, ..RunConfig::default() };
        assert!(c.validate().is_err());
    }
}
