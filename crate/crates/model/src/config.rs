use serde::{Deserialize, Serialize};

use crate::ModelError;

/// Convolutional backbone: one 3x3 convolution per stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    /// 1 or 2 per stage.
    pub strides: Vec<usize>,
    /// Leading stages whose weights never change.
    pub frozen_stages: usize,
    /// Trailing stages that are fine-tuned.
    pub trainable_tail: usize,
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(ModelError::Config(
                "encoder needs one stride per stage".into(),
            ));
        }
        if self.frozen_stages + self.trainable_tail != self.stages() {
            return Err(ModelError::Config(format!(
                "frozen ({}) + trainable ({}) stages must equal {}",
                self.frozen_stages,
                self.trainable_tail,
                self.stages()
            )));
        }
        if self.strides.iter().any(|s| !matches!(s, 1 | 2)) || self.widths.contains(&0) {
            return Err(ModelError::Config(
                "strides must be 1 or 2 and widths positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalVariant {
    /// Two-convolution recurrent encoder with a memory/fused channel split.
    BaselineRnn,
    #[serde(rename = "convgru")]
    ConvGru,
    /// Memory is always zero: per-frame ablation.
    None,
}

impl TemporalVariant {
    pub fn name(self) -> &'static str {
        match self {
            TemporalVariant::BaselineRnn => "baseline_rnn",
            TemporalVariant::ConvGru => "convgru",
            TemporalVariant::None => "none",
        }
    }
}

impl std::str::FromStr for TemporalVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline_rnn" | "rnn" | "baseline" => Ok(TemporalVariant::BaselineRnn),
            "convgru" | "conv_gru" | "gru" => Ok(TemporalVariant::ConvGru),
            "none" => Ok(TemporalVariant::None),
            _ => Err(ModelError::Config(format!("unknown temporal variant `{s}`"))),
        }
    }
}

/// How the previous memory is carried into the current frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMode {
    /// Back-project with the current depth, move into the previous camera,
    /// re-project and resample the previous memory grid.
    Geometric,
    /// Treat each group of 16 channels as a 4x4 matrix `F` and replace it by
    /// `M_curr F M_prev^-1`, without spatial resampling.
    Conjugation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TzSource {
    /// Regressed in meters by the translation head.
    Regressed,
    /// Median of the predicted depth map inside the box.
    DepthMedian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of object classes `n`; label maps carry `n + 1` channels.
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    /// Widths of the first two decoder layers; the second is the
    /// penultimate map fused into the ROI features.
    pub decoder_widths: [usize; 2],
    pub roi_size: usize,
    pub memory_channels: usize,
    pub fused_channels: usize,
    pub hidden: usize,
    pub temporal: TemporalVariant,
    pub warp: WarpMode,
    pub tz_source: TzSource,
    /// Initial bias of the depth-map and Tz outputs, in meters.
    pub depth_prior: f64,
}

impl ModelConfig {
    /// Full-width heads over a small four-stage encoder.
    pub fn standard(num_classes: usize) -> Self {
        Self {
            num_classes,
            encoder: EncoderConfig {
                widths: vec![32, 64, 128, 128],
                strides: vec![2, 2, 2, 1],
                frozen_stages: 2,
                trainable_tail: 2,
            },
            decoder_widths: [64, 64],
            roi_size: 7,
            memory_channels: 128,
            fused_channels: 256,
            hidden: 512,
            temporal: TemporalVariant::BaselineRnn,
            warp: WarpMode::Geometric,
            tz_source: TzSource::Regressed,
            depth_prior: 1.0,
        }
    }

    /// Narrow variant for quick experiments: 64-channel backbone output at
    /// stride 8.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                widths: vec![16, 32, 64, 64],
                strides: vec![2, 2, 2, 1],
                frozen_stages: 2,
                trainable_tail: 2,
            },
            decoder_widths: [32, 32],
            memory_channels: 32,
            fused_channels: 64,
            ..Self::standard(num_classes)
        }
    }

    /// Desk-scale setting used for the synthetic comparison runs:
    /// stride-4 backbone so small objects still span several cells.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                widths: vec![16, 32, 32, 32],
                strides: vec![2, 2, 1, 1],
                frozen_stages: 2,
                trainable_tail: 2,
            },
            decoder_widths: [16, 16],
            memory_channels: 16,
            fused_channels: 32,
            depth_prior: 0.6,
            ..Self::standard(num_classes)
        }
    }

    /// Stride of the penultimate decoder map.
    pub fn decoder_stride(&self) -> usize {
        (self.encoder.total_stride() / 2).max(1)
    }

    /// Channels of the ROI feature: backbone plus penultimate decoder map.
    pub fn roi_channels(&self) -> usize {
        self.encoder.out_channels() + self.decoder_widths[1]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(ModelError::Config("num_classes must be in 1..=254".into()));
        }
        if self.roi_size == 0 || self.hidden == 0 || self.fused_channels == 0 {
            return Err(ModelError::Config("roi size, hidden and fused widths must be positive".into()));
        }
        if self.memory_channels == 0 || self.decoder_widths.contains(&0) {
            return Err(ModelError::Config("memory and decoder widths must be positive".into()));
        }
        if self.warp == WarpMode::Conjugation && self.memory_channels % 16 != 0 {
            return Err(ModelError::Config(
                "conjugation warp needs memory channels in groups of 16".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::standard(21), ModelConfig::toy(3), ModelConfig::desk(3)] {
            c.validate().unwrap();
            assert_eq!(c.hidden, 512);
            assert_eq!(c.roi_size, 7);
        }
        let s = ModelConfig::standard(3);
        assert_eq!((s.memory_channels, s.fused_channels), (128, 256));
        assert_eq!(s.decoder_widths[1], 64);
    }

    #[test]
    fn stage_split_must_cover_encoder() {
        let mut c = ModelConfig::toy(3);
        c.encoder.frozen_stages = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [TemporalVariant::BaselineRnn, TemporalVariant::ConvGru, TemporalVariant::None] {
            assert_eq!(v.name().parse::<TemporalVariant>().unwrap(), v);
            let j = serde_json::to_string(&v).unwrap();
            assert_eq!(j, format!("\"{}\"", v.name()));
        }
    }
}
