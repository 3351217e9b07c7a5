//! Run configuration: presets, layered resolution and validation.
//!
//! Resolution order is preset < config file < `key=value` overrides. Every
//! layer is a flat TOML table; keys are checked against the schema before
//! deserialization so typos are reported with the nearest valid key.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder-side semantic injection strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    None,
    Direct,
    #[serde(alias = "direct-substitution")]
    Substitution,
    Implicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> jointok_autograd::DType {
        match self {
            Precision::F32 => jointok_autograd::DType::F32,
            Precision::F64 => jointok_autograd::DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub precision: Precision,
    pub seed: u64,

    // data
    /// `synthetic` or a directory with one sub-directory per class
    pub dataset: String,
    pub dataset_size: usize,
    pub val_fraction: f64,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub drop_last: bool,

    // tokenizer
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub mlp_ratio: usize,
    pub latent_dim: usize,
    pub num_tokens: usize,
    pub codebook_size: usize,
    pub temperature: f64,

    // generator
    pub ar_layers: usize,
    pub ar_width: usize,
    pub ar_heads: usize,
    pub aux_ar: bool,
    pub aux_layers: usize,
    pub aux_weight: f64,

    // optimization
    pub batch_size: usize,
    pub epochs: usize,
    /// explicit step budget; 0 derives it from `epochs`
    pub steps: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2_tokenizer: f64,
    pub beta2_ar: f64,
    pub disc_lr: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub nested_dropout: f64,
    pub class_dropout: f64,

    // loss weights
    pub lambda_recon_l2: f64,
    pub lambda_recon_perc: f64,
    pub lambda_gan: f64,
    pub lambda_lecam: f64,
    pub lambda_reg: f64,
    pub lambda_entropy: f64,
    pub lambda_ntp: f64,
    pub lambda_apr_l2: f64,
    pub lambda_apr_perc: f64,
    pub lambda_sem: f64,
    pub lambda_dec_align: f64,
    /// let NTP gradients reach the tokenizer through the soft indices
    pub ntp_backprop: bool,
    /// fraction of the step budget with the GAN term disabled
    pub gan_warmup: f64,
    pub lecam_decay: f64,
    pub disc_channels: usize,

    // alignment
    pub align_mode: AlignMode,
    pub decoder_align: bool,
    /// decoder block whose mask-token states are aligned; 0 picks the middle block
    pub decoder_align_layer: usize,
    pub provider: String,
    pub provider_patch: usize,
    pub provider_dim: usize,

    // evaluation
    pub eval_samples: usize,
    pub cfg_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        preset("desk").expect("desk preset exists")
    }
}

pub const PRESETS: [&str; 6] = ["S", "B", "L", "H", "desk", "tiny"];

/// Named configuration presets.
///
/// `S`/`B`/`L`/`H` carry the published model and training settings;
/// `desk` and `tiny` are small configurations for CPU-scale experiments.
pub fn preset(name: &str) -> Result<TrainConfig> {
    let published = |width: usize, heads: usize, layers: usize, ar: (usize, usize, usize), ntp: f64, nested: f64| {
        TrainConfig {
            preset: name.to_string(),
            precision: Precision::F32,
            seed: 0,
            dataset: "synthetic".into(),
            dataset_size: 1_281_167,
            val_fraction: 0.05,
            image_size: 256,
            channels: 3,
            num_classes: 1000,
            drop_last: true,
            patch_size: 16,
            width,
            heads,
            enc_layers: layers,
            dec_layers: layers,
            mlp_ratio: 4,
            latent_dim: 64,
            num_tokens: 256,
            codebook_size: 4096,
            temperature: 1.0,
            ar_layers: ar.0,
            ar_width: ar.1,
            ar_heads: ar.2,
            aux_ar: false,
            aux_layers: 2,
            aux_weight: 0.1,
            batch_size: 256,
            epochs: 400,
            steps: 0,
            lr: 1e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2_tokenizer: 0.999,
            beta2_ar: 0.95,
            disc_lr: 1e-4,
            ema_decay: 0.9999,
            grad_clip: 1.0,
            nested_dropout: nested,
            class_dropout: 0.1,
            lambda_recon_l2: 1.0,
            lambda_recon_perc: 1.0,
            lambda_gan: 0.1,
            lambda_lecam: 0.05,
            lambda_reg: 1e-3,
            lambda_entropy: 0.01,
            lambda_ntp: ntp,
            lambda_apr_l2: 1.0,
            lambda_apr_perc: 1.0,
            lambda_sem: 1.0,
            lambda_dec_align: 1.0,
            ntp_backprop: true,
            gan_warmup: 0.1,
            lecam_decay: 0.99,
            disc_channels: 64,
            align_mode: AlignMode::Implicit,
            decoder_align: false,
            decoder_align_layer: 0,
            provider: "frozen-random-vit".into(),
            provider_patch: 16,
            provider_dim: 256,
            eval_samples: 50_000,
            cfg_scale: 1.0,
        }
    };
    let cfg = match name {
        "S" => published(768, 12, 12, (12, 768, 12), 0.1, 0.5),
        "B" => published(768, 12, 12, (12, 1024, 16), 0.1, 0.5),
        "L" => published(768, 12, 12, (24, 1024, 16), 0.1, 0.5),
        "H" => published(1024, 16, 16, (32, 1280, 20), 0.01, 1.0),
        "desk" => TrainConfig {
            dataset_size: 2048,
            val_fraction: 0.125,
            image_size: 32,
            num_classes: 8,
            patch_size: 8,
            width: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            mlp_ratio: 2,
            latent_dim: 16,
            num_tokens: 16,
            codebook_size: 64,
            ar_layers: 2,
            ar_width: 64,
            ar_heads: 4,
            aux_layers: 1,
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            lr_min: 1e-5,
            ema_decay: 0.99,
            disc_channels: 8,
            provider_patch: 8,
            provider_dim: 32,
            eval_samples: 256,
            ..published(64, 4, 2, (2, 64, 4), 0.1, 0.5)
        },
        "tiny" => TrainConfig {
            dataset_size: 64,
            val_fraction: 0.25,
            image_size: 16,
            num_classes: 4,
            patch_size: 4,
            width: 32,
            heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            mlp_ratio: 2,
            latent_dim: 8,
            num_tokens: 8,
            codebook_size: 32,
            ar_layers: 1,
            ar_width: 32,
            ar_heads: 2,
            aux_layers: 1,
            batch_size: 8,
            epochs: 1,
            lr: 1e-3,
            lr_min: 1e-5,
            ema_decay: 0.9,
            disc_channels: 4,
            provider_patch: 4,
            provider_dim: 16,
            eval_samples: 32,
            ..published(32, 2, 1, (1, 32, 2), 0.1, 0.5)
        },
        other => {
            return Err(Error::InvalidValue {
                key: "preset".into(),
                reason: format!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
            })
        }
    };
    Ok(TrainConfig { preset: name.to_string(), ..cfg })
}

fn known_keys() -> Vec<String> {
    match toml::Value::try_from(TrainConfig::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => unreachable!("config serializes to a table"),
    }
}

fn reject_unknown(table: &toml::Table) -> Result<()> {
    let keys = known_keys();
    for key in table.keys() {
        if !keys.iter().any(|k| k == key) {
            let suggestion = keys
                .iter()
                .map(|k| (strsim::jaro_winkler(key, k), k))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .filter(|(score, _)| *score > 0.7)
                .map(|(_, k)| k.clone());
            return Err(Error::UnknownKey { key: key.clone(), suggestion });
        }
    }
    Ok(())
}

/// Parses `key=value`; the value is read as a TOML literal and falls back to a bare string.
pub fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| Error::ConfigParse(format!("override `{text}` is not of the form key=value")))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

/// Resolves preset < file contents < overrides into a validated config.
///
/// A `preset` key in the file or overrides selects the base layer.
pub fn resolve(base_preset: &str, file: Option<&str>, overrides: &[(String, toml::Value)]) -> Result<TrainConfig> {
    let file_table = match file {
        Some(text) => text.parse::<toml::Table>().map_err(|e| Error::ConfigParse(e.to_string()))?,
        None => toml::Table::new(),
    };
    let mut over_table = toml::Table::new();
    for (k, v) in overrides {
        over_table.insert(k.clone(), v.clone());
    }
    reject_unknown(&file_table)?;
    reject_unknown(&over_table)?;
    let preset_name = over_table
        .get("preset")
        .or_else(|| file_table.get("preset"))
        .and_then(|v| v.as_str())
        .unwrap_or(base_preset)
        .to_string();
    let mut merged = match toml::Value::try_from(preset(&preset_name)?) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("config serializes to a table"),
    };
    for (k, v) in file_table.into_iter().chain(over_table) {
        merged.insert(k, v);
    }
    let cfg: TrainConfig = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| {
        Error::ConfigParse(e.message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl TrainConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table = text.parse::<toml::Table>().map_err(|e| Error::ConfigParse(e.to_string()))?;
        reject_unknown(&table)?;
        let cfg: TrainConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::ConfigParse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn decoder_align_block(&self) -> usize {
        if self.decoder_align_layer == 0 {
            self.dec_layers.div_ceil(2)
        } else {
            self.decoder_align_layer
        }
    }

    pub fn train_size(&self) -> usize {
        self.dataset_size - self.val_size()
    }

    pub fn val_size(&self) -> usize {
        ((self.dataset_size as f64) * self.val_fraction).round() as usize
    }

    /// Total optimizer steps of the run.
    pub fn total_steps(&self) -> usize {
        if self.steps > 0 {
            return self.steps;
        }
        let n = self.train_size();
        let per_epoch = if self.drop_last { n / self.batch_size } else { n.div_ceil(self.batch_size) };
        (per_epoch * self.epochs).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::InvalidValue { key: key.into(), reason });
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
            ("patch_size", self.patch_size),
            ("width", self.width),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("mlp_ratio", self.mlp_ratio),
            ("latent_dim", self.latent_dim),
            ("num_tokens", self.num_tokens),
            ("codebook_size", self.codebook_size),
            ("ar_layers", self.ar_layers),
            ("ar_width", self.ar_width),
            ("ar_heads", self.ar_heads),
            ("batch_size", self.batch_size),
            ("dataset_size", self.dataset_size),
            ("disc_channels", self.disc_channels),
            ("provider_patch", self.provider_patch),
            ("provider_dim", self.provider_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(k, "must be positive".into());
            }
        }
        if self.image_size % self.patch_size != 0 {
            return bad("patch_size", format!("{} does not divide image_size {}", self.patch_size, self.image_size));
        }
        if self.image_size % self.provider_patch != 0 {
            return bad("provider_patch", format!("{} does not divide image_size {}", self.provider_patch, self.image_size));
        }
        if self.width % self.heads != 0 {
            return bad("heads", format!("{} does not divide width {}", self.heads, self.width));
        }
        if self.ar_width % self.ar_heads != 0 {
            return bad("ar_heads", format!("{} does not divide ar_width {}", self.ar_heads, self.ar_width));
        }
        if self.decoder_align_layer > self.dec_layers {
            return bad("decoder_align_layer", format!("exceeds dec_layers {}", self.dec_layers));
        }
        for (k, v) in [
            ("val_fraction", self.val_fraction),
            ("nested_dropout", self.nested_dropout),
            ("class_dropout", self.class_dropout),
            ("ema_decay", self.ema_decay),
            ("gan_warmup", self.gan_warmup),
            ("lecam_decay", self.lecam_decay),
            ("beta1", self.beta1),
            ("beta2_tokenizer", self.beta2_tokenizer),
            ("beta2_ar", self.beta2_ar),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(k, format!("{v} not in [0, 1]"));
            }
        }
        for (k, v) in [
            ("lambda_recon_l2", self.lambda_recon_l2),
            ("lambda_recon_perc", self.lambda_recon_perc),
            ("lambda_gan", self.lambda_gan),
            ("lambda_lecam", self.lambda_lecam),
            ("lambda_reg", self.lambda_reg),
            ("lambda_entropy", self.lambda_entropy),
            ("lambda_ntp", self.lambda_ntp),
            ("lambda_apr_l2", self.lambda_apr_l2),
            ("lambda_apr_perc", self.lambda_apr_perc),
            ("lambda_sem", self.lambda_sem),
            ("lambda_dec_align", self.lambda_dec_align),
            ("aux_weight", self.aux_weight),
            ("grad_clip", self.grad_clip),
            ("lr", self.lr),
            ("lr_min", self.lr_min),
            ("disc_lr", self.disc_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(k, format!("{v} must be finite and >= 0"));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature", "must be > 0".into());
        }
        if self.lr_min > self.lr {
            return bad("lr_min", format!("{} exceeds lr {}", self.lr_min, self.lr));
        }
        if self.val_size() == 0 || self.train_size() == 0 {
            return bad("val_fraction", "split leaves an empty train or validation set".into());
        }
        if self.aux_ar && self.aux_layers == 0 {
            return bad("aux_layers", "must be positive when aux_ar is enabled".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_preset_carries_published_weights() {
        let cfg = resolve("L", None, &[]).unwrap();
        assert_eq!(cfg.lambda_ntp, 0.1);
        assert_eq!(cfg.ar_layers, 24);
        assert_eq!(cfg.codebook_size, 4096);
        assert_eq!((cfg.beta2_tokenizer, cfg.beta2_ar), (0.999, 0.95));
        let h = preset("H").unwrap();
        assert_eq!((h.lambda_ntp, h.nested_dropout), (0.01, 1.0));
    }

    #[test]
    fn override_is_applied() {
        let o = parse_override("nested_dropout=0").unwrap();
        let cfg = resolve("desk", None, &[o]).unwrap();
        assert_eq!(cfg.nested_dropout, 0.0);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let o = parse_override("lambda_ntpp=0.2").unwrap();
        match resolve("desk", None, &[o]) {
            Err(Error::UnknownKey { key, suggestion }) => {
                assert_eq!(key, "lambda_ntpp");
                assert_eq!(suggestion.as_deref(), Some("lambda_ntp"));
            }
            other => panic!("expected unknown key error, got {other:?}"),
        }
    }

    #[test]
    fn type_and_range_errors() {
        assert!(matches!(resolve("desk", None, &[parse_override("batch_size=\"x\"").unwrap()]), Err(Error::ConfigParse(_))));
        assert!(matches!(
            resolve("desk", None, &[parse_override("class_dropout=1.5").unwrap()]),
            Err(Error::InvalidValue { .. })
        ));
    }

    #[test]
    fn bare_strings_and_file_layer() {
        let file = "align_mode = \"direct\"\nseed = 3\n";
        let cfg = resolve("desk", Some(file), &[parse_override("seed=9").unwrap()]).unwrap();
        assert_eq!(cfg.align_mode, AlignMode::Direct);
        assert_eq!(cfg.seed, 9);
        let (_, v) = parse_override("align_mode=implicit").unwrap();
        assert_eq!(v.as_str(), Some("implicit"));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = preset("tiny").unwrap();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
