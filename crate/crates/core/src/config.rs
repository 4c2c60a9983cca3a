//! Architecture widths and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{HbafError, Result};

/// Layer sizes of the whole network.
///
/// [`ModelConfig::full`] gives the published sizes; [`ModelConfig::reduced`]
/// shrinks every width proportionally so exact numerical checks stay cheap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub text_dim: usize,
    pub num_classes: usize,
    pub d_model: usize,
    pub conv_kernel: usize,
    pub conv_filters: usize,
    pub lstm_units: usize,
    pub lstm_layers: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ff: usize,
    pub attn_hidden: usize,
    pub fusion_ff: usize,
    /// Cross-attention gets its own query/key/value projections instead of
    /// reusing the self-attention ones.
    pub separate_cross_projections: bool,
    pub ln_eps: f64,
    /// Inverted dropout rate on encoder and fusion sublayer outputs during training.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn full(num_classes: usize) -> Self {
        ModelConfig {
            audio_dim: 512,
            text_dim: 1024,
            num_classes,
            d_model: 512,
            conv_kernel: 3,
            conv_filters: 64,
            lstm_units: 256,
            lstm_layers: 2,
            encoder_layers: 3,
            encoder_heads: 8,
            encoder_ff: 1024,
            attn_hidden: 256,
            fusion_ff: 1024,
            separate_cross_projections: false,
            ln_eps: 1e-9,
            dropout: 0.0,
        }
    }

    /// Same depth as [`ModelConfig::full`] with every width derived from `d`.
    pub fn reduced(d: usize, audio_dim: usize, text_dim: usize, num_classes: usize) -> Self {
        let half = (d / 2).max(1);
        ModelConfig {
            audio_dim,
            text_dim,
            num_classes,
            d_model: d,
            conv_filters: half,
            lstm_units: half,
            encoder_heads: if d.is_multiple_of(2) { 2 } else { 1 },
            encoder_ff: 2 * d,
            attn_hidden: half,
            fusion_ff: 2 * d,
            ..ModelConfig::full(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HbafError::Config(m));
        let positive = [
            ("audio_dim", self.audio_dim),
            ("text_dim", self.text_dim),
            ("d_model", self.d_model),
            ("conv_kernel", self.conv_kernel),
            ("conv_filters", self.conv_filters),
            ("lstm_units", self.lstm_units),
            ("lstm_layers", self.lstm_layers),
            ("encoder_heads", self.encoder_heads),
            ("encoder_ff", self.encoder_ff),
            ("attn_hidden", self.attn_hidden),
            ("fusion_ff", self.fusion_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return err(format!("model.{name} must be positive"));
            }
        }
        if self.num_classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return err("model.conv_kernel must be odd for length-preserving padding".into());
        }
        if 2 * self.lstm_units != self.d_model {
            return err(format!(
                "2 x lstm_units ({}) must equal d_model ({})",
                2 * self.lstm_units,
                self.d_model
            ));
        }
        if !self.d_model.is_multiple_of(self.encoder_heads) {
            return err(format!(
                "d_model {} not divisible by encoder_heads {}",
                self.d_model, self.encoder_heads
            ));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return err("model.ln_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("model.dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Component removals used by ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Replace the audio context network by a learned linear map.
    pub no_acn: bool,
    /// Classify `concat(H_a, H_l)` directly, skipping the fusion module.
    pub no_fusion: bool,
    /// Drop the inter-modal contrastive term from the objective.
    pub no_contrastive: bool,
    /// Average self and cross features instead of gating them.
    pub no_gate: bool,
    /// Use the gated features as the fusion output.
    pub no_residual: bool,
    /// Replace bimodal attention outputs by their un-attended inputs.
    pub no_attention: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 6] = [
        "no_acn",
        "no_fusion",
        "no_contrastive",
        "no_gate",
        "no_residual",
        "no_attention",
    ];

    pub fn single(name: &str) -> Result<Self> {
        let mut a = Ablations::default();
        a.set(name)?;
        Ok(a)
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        let slot = match name {
            "no_acn" => &mut self.no_acn,
            "no_fusion" => &mut self.no_fusion,
            "no_contrastive" => &mut self.no_contrastive,
            "no_gate" => &mut self.no_gate,
            "no_residual" => &mut self.no_residual,
            "no_attention" => &mut self.no_attention,
            other => {
                return Err(HbafError::Config(format!(
                    "unknown ablation {other}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *slot = true;
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let flags = [
            self.no_acn,
            self.no_fusion,
            self.no_contrastive,
            self.no_gate,
            self.no_residual,
            self.no_attention,
        ];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_sizes_validate() {
        let c = ModelConfig::full(7);
        c.validate().unwrap();
        assert_eq!(c.encoder_ff, 2 * c.d_model);
        assert_eq!(c.d_model % c.encoder_heads, 0);
    }

    #[test]
    fn reduced_configs_validate() {
        for d in [2, 8, 16, 32] {
            ModelConfig::reduced(d, 5, 7, 4).validate().unwrap();
        }
    }

    #[test]
    fn inconsistent_lstm_width_is_rejected() {
        let mut c = ModelConfig::full(4);
        c.lstm_units = 100;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_names_round_trip() {
        for name in Ablations::NAMES {
            assert_eq!(Ablations::single(name).unwrap().active(), vec![name]);
        }
        assert!(Ablations::single("no_everything").is_err());
    }
}
