//! Run configuration: dimensions, loss weights, learning rates, seeds, and
//! behavior flags, loaded from a `key=value` text file with optional
//! command-line overrides. The canonical serialized form (sorted keys) feeds
//! the checkpoint fingerprint.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    // geometry
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub d_prompt: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    /// Trailing thermal blocks that train; everything earlier stays frozen.
    pub trainable_blocks: usize,
    pub decoder_blocks: usize,
    pub vocab_size: usize,
    pub max_prompt_len: usize,
    pub mae_decoder_width: usize,
    pub mae_decoder_blocks: usize,
    // objective
    pub rgb_mask_ratio: f64,
    pub mae_mask_ratio: f64,
    pub lambda_align: f64,
    pub lambda_contr: f64,
    pub lambda_gate: f64,
    pub tau: f64,
    // optimization
    pub lr_thermal: f64,
    pub lr_fusion: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    // pretraining phases
    pub mae_pretrain_steps: usize,
    pub mae_batch: usize,
    pub mae_lr: f64,
    pub lm_pretrain_steps: usize,
    pub lm_lr: f64,
    // behavior flags
    pub no_text_attention: bool,
    pub no_rgb_attention: bool,
    pub direct_fusion: bool,
    pub align_uses_clean_rgb: bool,
    pub infonce_one_direction: bool,
    /// Replace the stream not designated by a sample's modality tag with the
    /// matching null token grid during training, mirroring the evaluation
    /// protocol.
    pub modality_dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_h: 56,
            image_w: 56,
            patch_size: 14,
            d_model: 64,
            d_prompt: 64,
            heads: 4,
            encoder_blocks: 6,
            trainable_blocks: 4,
            decoder_blocks: 2,
            vocab_size: 64,
            max_prompt_len: 12,
            mae_decoder_width: 32,
            mae_decoder_blocks: 2,
            rgb_mask_ratio: 0.10,
            mae_mask_ratio: 0.75,
            lambda_align: 0.1,
            lambda_contr: 0.1,
            lambda_gate: 0.01,
            tau: 0.07,
            lr_thermal: 1e-4,
            lr_fusion: 5e-4,
            weight_decay: 0.01,
            warmup_steps: 0,
            batch_size: 4,
            epochs: 3,
            seed: 42,
            mae_pretrain_steps: 300,
            mae_batch: 8,
            mae_lr: 1e-3,
            lm_pretrain_steps: 800,
            lm_lr: 1e-3,
            no_text_attention: false,
            no_rgb_attention: false,
            direct_fusion: false,
            align_uses_clean_rgb: false,
            infonce_one_direction: false,
            modality_dropout: true,
        }
    }
}

macro_rules! config_fields {
    ($self:ident, $action:ident) => {
        $action!(image_h, usize);
        $action!(image_w, usize);
        $action!(patch_size, usize);
        $action!(d_model, usize);
        $action!(d_prompt, usize);
        $action!(heads, usize);
        $action!(encoder_blocks, usize);
        $action!(trainable_blocks, usize);
        $action!(decoder_blocks, usize);
        $action!(vocab_size, usize);
        $action!(max_prompt_len, usize);
        $action!(mae_decoder_width, usize);
        $action!(mae_decoder_blocks, usize);
        $action!(rgb_mask_ratio, f64);
        $action!(mae_mask_ratio, f64);
        $action!(lambda_align, f64);
        $action!(lambda_contr, f64);
        $action!(lambda_gate, f64);
        $action!(tau, f64);
        $action!(lr_thermal, f64);
        $action!(lr_fusion, f64);
        $action!(weight_decay, f64);
        $action!(warmup_steps, u64);
        $action!(batch_size, usize);
        $action!(epochs, usize);
        $action!(seed, u64);
        $action!(mae_pretrain_steps, usize);
        $action!(mae_batch, usize);
        $action!(mae_lr, f64);
        $action!(lm_pretrain_steps, usize);
        $action!(lm_lr, f64);
        $action!(no_text_attention, bool);
        $action!(no_rgb_attention, bool);
        $action!(direct_fusion, bool);
        $action!(align_uses_clean_rgb, bool);
        $action!(infonce_one_direction, bool);
        $action!(modality_dropout, bool);
    };
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_err = |k: &str, v: &str| Error::Config(format!("bad value '{v}' for key '{k}'"));
        macro_rules! assign {
            ($field:ident, $ty:ty) => {
                if key == stringify!($field) {
                    self.$field = value
                        .parse::<$ty>()
                        .map_err(|_| parse_err(key, value))?;
                    return Ok(());
                }
            };
        }
        config_fields!(self, assign);
        Err(Error::Config(format!("unknown config key '{key}'")))
    }

    /// Sorted `key=value` lines; the canonical form behind the fingerprint.
    pub fn canonical_string(&self) -> String {
        let mut entries: Vec<(String, String)> = Vec::new();
        macro_rules! emit {
            ($field:ident, $ty:ty) => {
                entries.push((stringify!($field).to_string(), format!("{}", self.$field)));
            };
        }
        config_fields!(self, emit);
        entries.sort();
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_string().as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config '{}': {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_align: self.lambda_align,
            lambda_contr: self.lambda_contr,
            lambda_gate: self.lambda_gate,
            tau: self.tau,
        }
    }

    /// Validate every module precondition this configuration feeds.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_h == 0 || self.image_w == 0 || self.patch_size == 0 {
            return fail("image and patch extents must be positive".into());
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return fail(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.mae_decoder_width % self.heads != 0 {
            return fail(format!(
                "mae_decoder_width {} must be divisible by heads {}",
                self.mae_decoder_width, self.heads
            ));
        }
        if self.trainable_blocks > self.encoder_blocks {
            return fail(format!(
                "trainable_blocks {} exceeds encoder_blocks {}",
                self.trainable_blocks, self.encoder_blocks
            ));
        }
        if !(0.0..1.0).contains(&self.rgb_mask_ratio) {
            return fail(format!("rgb_mask_ratio {} outside [0,1)", self.rgb_mask_ratio));
        }
        if !(0.0..1.0).contains(&self.mae_mask_ratio) {
            return fail(format!("mae_mask_ratio {} outside [0,1)", self.mae_mask_ratio));
        }
        self.loss_weights().validate()?;
        if self.lambda_contr > 0.0 && self.d_prompt != self.d_model {
            return fail(format!(
                "contrastive pooling compares prompt and visual embeddings, \
                 so d_prompt {} must equal d_model {} when lambda_contr > 0",
                self.d_prompt, self.d_model
            ));
        }
        let vocab = Vocab::toy();
        if self.vocab_size < vocab.len() {
            return fail(format!(
                "vocab_size {} smaller than the {} fixed words",
                self.vocab_size,
                vocab.len()
            ));
        }
        if self.max_prompt_len < 10 {
            return fail("max_prompt_len must cover the longest template (10 tokens)".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.decoder_blocks == 0 || self.encoder_blocks == 0 {
            return fail("encoder_blocks and decoder_blocks must be positive".into());
        }
        Ok(())
    }
}
