use serde::{Deserialize, Serialize};

use crate::corpus::NUM_SPECIAL;
use crate::error::{Error, Result};

/// Parameter count of the reference model, for comparison in logs.
pub const REFERENCE_PARAM_COUNT: usize = 8_723_914;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub d_ffn: usize,
    pub dropout_pos: f64,
    pub dropout_conv: f64,
    pub dropout_ffn: f64,
    pub dropout_attn: f64,
    pub conv_enabled: bool,
    pub n_conv_layers: usize,
    pub conv_kernel: usize,
    pub mask_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            d_embed: 256,
            d_hidden: 128,
            n_layers: 8,
            n_heads: 8,
            max_seq: 256,
            d_ffn: 512,
            dropout_pos: 0.1,
            dropout_conv: 0.2,
            dropout_ffn: 0.1,
            dropout_attn: 0.1,
            conv_enabled: true,
            n_conv_layers: 3,
            conv_kernel: 5,
            mask_rate: 0.15,
        }
    }
}

impl EncoderConfig {
    /// Full-size profile: 256-wide embeddings, 8 layers of width 128.
    pub fn paper(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            ..Default::default()
        }
    }

    /// Small profile that trains in seconds on a CPU.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_embed: 64,
            d_hidden: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq: 64,
            d_ffn: 256,
            ..Default::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= NUM_SPECIAL {
            return fail(format!("vocab_size {} leaves no regular token", self.vocab_size));
        }
        for (name, v) in [
            ("d_embed", self.d_embed),
            ("d_hidden", self.d_hidden),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.max_seq < 2 {
            return fail("max_seq must hold at least SOS and EOS".into());
        }
        if !self.d_hidden.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_hidden {} not divisible by n_heads {}",
                self.d_hidden, self.n_heads
            ));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return fail(format!("mask_rate {} outside (0,1)", self.mask_rate));
        }
        if self.conv_enabled && (self.n_conv_layers == 0 || self.conv_kernel.is_multiple_of(2)) {
            return fail(format!(
                "conv stack needs at least one layer and an odd kernel, got {} x {}",
                self.n_conv_layers, self.conv_kernel
            ));
        }
        for (name, p) in [
            ("dropout_pos", self.dropout_pos),
            ("dropout_conv", self.dropout_conv),
            ("dropout_ffn", self.dropout_ffn),
            ("dropout_attn", self.dropout_attn),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0,1)"));
            }
        }
        Ok(())
    }

    /// Number of trainable scalars:
    ///
    /// ```text
    /// V·E + S·E                                  token and position tables
    /// + Σ_conv (k·in·out + out)  or  E·H + H     feature layers
    /// + 2H                                       embedding layer norm
    /// + L·(4(H² + H) + 2HF + F + H + 4H)         encoder layers
    /// + H·V + V                                  MLM projection
    /// ```
    pub fn param_count(&self) -> usize {
        let (v, e, h, f, s) = (
            self.vocab_size,
            self.d_embed,
            self.d_hidden,
            self.d_ffn,
            self.max_seq,
        );
        let features = if self.conv_enabled {
            (0..self.n_conv_layers)
                .map(|l| {
                    let input = if l == 0 { e } else { h };
                    self.conv_kernel * input * h + h
                })
                .sum()
        } else {
            e * h + h
        };
        let layer = 4 * (h * h + h) + 2 * h * f + f + h + 4 * h;
        v * e + s * e + features + 2 * h + self.n_layers * layer + h * v + v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Fraction of all optimizer steps spent on the linear warmup.
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Draw fresh MLM masks every epoch instead of once per sequence.
    pub dynamic_masking: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-6,
            warmup_fraction: 0.1,
            epochs: 5,
            batch_size: 96,
            clip_norm: 1.0,
            dynamic_masking: false,
        }
    }
}

impl OptimizerConfig {
    pub fn desk() -> Self {
        OptimizerConfig {
            lr: 0.003,
            batch_size: 8,
            epochs: 10,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas ({}, {}) outside [0,1)", self.beta1, self.beta2));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction {} outside [0,1]", self.warmup_fraction));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return fail("eps must be positive; weight_decay and clip_norm non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        EncoderConfig::paper(17_225).validate().unwrap();
        EncoderConfig::desk(50).validate().unwrap();
        OptimizerConfig::default().validate().unwrap();
        OptimizerConfig::desk().validate().unwrap();
    }

    #[test]
    fn invariants_rejected() {
        let ok = EncoderConfig::desk(50);
        for bad in [
            EncoderConfig { n_heads: 3, ..ok.clone() },
            EncoderConfig { conv_kernel: 4, ..ok.clone() },
            EncoderConfig { mask_rate: 0.0, ..ok.clone() },
            EncoderConfig { mask_rate: 1.0, ..ok.clone() },
            EncoderConfig { vocab_size: 5, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(OptimizerConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn paper_profile_count() {
        // hand-summed: embeddings 4,409,600 + 65,536; conv 163,968 + 2 x 82,048;
        // embedding norm 256; 8 layers x 198,272; projection 2,222,025
        assert_eq!(EncoderConfig::paper(17_225).param_count(), 8_611_657);
    }
}
