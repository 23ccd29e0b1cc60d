//! Flat `key = value` configuration with defaults for every key.
//!
//! Lines are `key = value`, `#` starts a comment, blank lines are ignored,
//! unknown keys are rejected with their line number. Lists use commas.
//! [`Config::serialize`] prints every key, so parse -> serialize -> parse is
//! the identity and each run directory carries its exact settings.

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::loss::LossWeights;
use crate::model::{BackboneConfig, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    // synthetic data
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub noise_sigma: f64,
    pub ir_brightness: f64,
    pub ir_blur: bool,
    // backbone
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub stream_split: usize,
    pub agp_after: Vec<usize>,
    pub agp_k: usize,
    pub parts: usize,
    // losses
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin_cnm: f64,
    pub margin_tri: f64,
    // training
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub init_lr: f64,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub milestone_lrs: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub p_identities: usize,
    pub k_per_modality: usize,
    pub augment_hflip: bool,
    pub use_agp: bool,
    pub use_anm: bool,
    pub use_cnm: bool,
    pub use_local: bool,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    // evaluation
    pub eval_metric: Metric,
    pub camera_filter: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            num_identities: 20,
            images_per_identity: 16,
            image_height: 32,
            image_width: 16,
            noise_sigma: 0.05,
            ir_brightness: 0.6,
            ir_blur: true,
            stage_channels: vec![16, 32, 64, 128],
            stage_strides: vec![2, 2, 2, 1],
            stream_split: 1,
            agp_after: vec![1, 2],
            agp_k: 4,
            parts: 4,
            lambda1: 1.0,
            lambda2: 0.5,
            margin_cnm: 0.2,
            margin_tri: 0.3,
            epochs: 150,
            warmup_epochs: 10,
            init_lr: 1e-2,
            base_lr: 1e-1,
            milestones: vec![20, 80, 120],
            milestone_lrs: vec![1e-2, 1e-3, 1e-4],
            momentum: 0.9,
            weight_decay: 0.0,
            p_identities: 6,
            k_per_modality: 4,
            augment_hflip: true,
            use_agp: true,
            use_anm: true,
            use_cnm: true,
            use_local: true,
            eval_every: 5,
            checkpoint_every: 1,
            eval_metric: Metric::Euclidean,
            camera_filter: false,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, line: usize) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| {
            s.trim().parse::<T>().map_err(|_| Error::Config {
                line,
                msg: format!("bad list element {:?}", s.trim()),
            })
        })
        .collect()
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Config {
    /// Desk-scale preset: the 150-epoch schedule compressed five-fold.
    pub fn apply_desk_preset(&mut self) {
        self.epochs = 30;
        self.warmup_epochs = 2;
        self.milestones = vec![4, 16, 24];
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let bad = |what: &str| Error::Config {
            line,
            msg: format!("bad {what} value {value:?} for key {key}"),
        };
        macro_rules! prim {
            ($field:ident, $what:literal) => {{
                self.$field = value.parse().map_err(|_| bad($what))?;
            }};
        }
        match key {
            "seed" => prim!(seed, "integer"),
            "num_identities" => prim!(num_identities, "integer"),
            "images_per_identity" => prim!(images_per_identity, "integer"),
            "image_height" => prim!(image_height, "integer"),
            "image_width" => prim!(image_width, "integer"),
            "noise_sigma" => prim!(noise_sigma, "float"),
            "ir_brightness" => prim!(ir_brightness, "float"),
            "ir_blur" => prim!(ir_blur, "bool"),
            "stage_channels" => self.stage_channels = parse_list(value, line)?,
            "stage_strides" => self.stage_strides = parse_list(value, line)?,
            "stream_split" => prim!(stream_split, "integer"),
            "agp_after" => {
                self.agp_after = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    parse_list(value, line)?
                }
            }
            "agp_k" => prim!(agp_k, "integer"),
            "parts" => prim!(parts, "integer"),
            "lambda1" => prim!(lambda1, "float"),
            "lambda2" => prim!(lambda2, "float"),
            "margin_cnm" => prim!(margin_cnm, "float"),
            "margin_tri" => prim!(margin_tri, "float"),
            "epochs" => prim!(epochs, "integer"),
            "warmup_epochs" => prim!(warmup_epochs, "integer"),
            "init_lr" => prim!(init_lr, "float"),
            "base_lr" => prim!(base_lr, "float"),
            "milestones" => self.milestones = parse_list(value, line)?,
            "milestone_lrs" => self.milestone_lrs = parse_list(value, line)?,
            "momentum" => prim!(momentum, "float"),
            "weight_decay" => prim!(weight_decay, "float"),
            "p_identities" => prim!(p_identities, "integer"),
            "k_per_modality" => prim!(k_per_modality, "integer"),
            "augment_hflip" => prim!(augment_hflip, "bool"),
            "use_agp" => prim!(use_agp, "bool"),
            "use_anm" => prim!(use_anm, "bool"),
            "use_cnm" => prim!(use_cnm, "bool"),
            "use_local" => prim!(use_local, "bool"),
            "eval_every" => prim!(eval_every, "integer"),
            "checkpoint_every" => prim!(checkpoint_every, "integer"),
            "eval_metric" => self.eval_metric = Metric::parse(value).map_err(|_| bad("metric"))?,
            "camera_filter" => prim!(camera_filter, "bool"),
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Defaults overridden by the given flat text.
    pub fn parse_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected `key = value`, got {content:?}"),
                });
            };
            self.set(key.trim(), value.trim(), line)?;
        }
        self.validate()
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Config::parse_str(&text)
    }

    fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::Config { line: 0, msg };
        if self.milestones.len() != self.milestone_lrs.len() {
            return Err(err("milestones and milestone_lrs must have equal length".into()));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(err("milestones must be strictly increasing".into()));
        }
        if self.init_lr <= 0.0 || self.base_lr <= 0.0 || self.milestone_lrs.iter().any(|l| *l <= 0.0) {
            return Err(err("learning rates must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.margin_cnm < 0.0 || self.margin_tri < 0.0 {
            return Err(err("loss weights and margins must be non-negative".into()));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("num_identities", self.num_identities.to_string());
        kv("images_per_identity", self.images_per_identity.to_string());
        kv("image_height", self.image_height.to_string());
        kv("image_width", self.image_width.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("ir_brightness", self.ir_brightness.to_string());
        kv("ir_blur", self.ir_blur.to_string());
        kv("stage_channels", fmt_list(&self.stage_channels));
        kv("stage_strides", fmt_list(&self.stage_strides));
        kv("stream_split", self.stream_split.to_string());
        kv("agp_after", fmt_list(&self.agp_after));
        kv("agp_k", self.agp_k.to_string());
        kv("parts", self.parts.to_string());
        kv("lambda1", self.lambda1.to_string());
        kv("lambda2", self.lambda2.to_string());
        kv("margin_cnm", self.margin_cnm.to_string());
        kv("margin_tri", self.margin_tri.to_string());
        kv("epochs", self.epochs.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("init_lr", self.init_lr.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv("milestones", fmt_list(&self.milestones));
        kv("milestone_lrs", fmt_list(&self.milestone_lrs));
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("p_identities", self.p_identities.to_string());
        kv("k_per_modality", self.k_per_modality.to_string());
        kv("augment_hflip", self.augment_hflip.to_string());
        kv("use_agp", self.use_agp.to_string());
        kv("use_anm", self.use_anm.to_string());
        kv("use_cnm", self.use_cnm.to_string());
        kv("use_local", self.use_local.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("eval_metric", self.eval_metric.as_str().to_string());
        kv("camera_filter", self.camera_filter.to_string());
        s
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_identities: self.num_identities,
            images_per_identity: self.images_per_identity,
            height: self.image_height,
            width: self.image_width,
            noise_sigma: self.noise_sigma,
            ir_brightness: self.ir_brightness,
            ir_blur: self.ir_blur,
            seed: self.seed,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            stage_channels: self.stage_channels.clone(),
            stage_strides: self.stage_strides.clone(),
            stream_split: self.stream_split,
            agp_after: self.agp_after.clone(),
            agp_k: self.agp_k,
            parts: self.parts,
            embed_dim: *self.stage_channels.last().unwrap_or(&0),
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone(),
            num_classes,
            use_agp: self.use_agp,
            use_anm: self.use_anm,
            use_local: self.use_local,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            margin_cnm: self.margin_cnm,
            margin_tri: self.margin_tri,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity() {
        let mut cfg = Config::default();
        cfg.seed = 42;
        cfg.lambda2 = 0.25;
        cfg.agp_after = vec![2];
        let text = cfg.serialize();
        let back = Config::parse_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_number() {
        let err = Config::parse_str("seed = 1\nnot_a_key = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("not_a_key"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = Config::parse_str("# top\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn empty_agp_after_disables_insertion() {
        let cfg = Config::parse_str("agp_after = \n").unwrap();
        assert!(cfg.agp_after.is_empty());
    }

    #[test]
    fn bad_milestone_order_rejected() {
        assert!(Config::parse_str("milestones = 20,15,120\n").is_err());
    }

    #[test]
    fn desk_preset_rescales_schedule() {
        let mut cfg = Config::default();
        cfg.apply_desk_preset();
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.warmup_epochs, 2);
        assert_eq!(cfg.milestones, vec![4, 16, 24]);
        // Paper-scale learning rates stay untouched.
        assert_eq!(cfg.base_lr, 0.1);
        assert_eq!(cfg.init_lr, 0.01);
    }
}
