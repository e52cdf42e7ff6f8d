//! The JSON run configuration: sections for the codec, towers, training
//! stages, sampling, evaluation, and data generation. Every field has a
//! default, unknown keys are rejected, and parse -> serialize -> parse is a
//! fixed point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::ddit::TowerConfig;
use crate::error::{Error, Result};
use crate::training::{Stage, StageSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub codec: CodecConfig,
    pub tower: TowerConfig,
    pub stage: StageSection,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            codec: CodecConfig::desk(),
            tower: TowerConfig::desk(),
            stage: StageSection::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub video: StageSpec,
    pub audio: StageSpec,
    pub joint: StageSpec,
}

impl Default for StageSection {
    fn default() -> StageSection {
        StageSection {
            video: StageSpec::new(Stage::VideoPretrain, 3000),
            audio: StageSpec::new(Stage::AudioAdapt, 2000),
            joint: StageSpec::new(Stage::JointFinetune, 500),
        }
    }
}

impl StageSection {
    pub fn for_stage(&self, stage: Stage) -> &StageSpec {
        match stage {
            Stage::VideoPretrain => &self.video,
            Stage::AudioAdapt => &self.audio,
            Stage::JointFinetune => &self.joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub guidance: f32,
    pub steps: usize,
    pub seed: u64,
    /// Optional raw-pixel target resolution `[height, width]`; when absent
    /// the training resolution applies.
    pub resolution: Option<(usize, usize)>,
}

impl Default for SampleConfig {
    fn default() -> SampleConfig {
        SampleConfig {
            guidance: crate::rfm::DEFAULT_GUIDANCE,
            steps: crate::rfm::DEFAULT_STEPS,
            seed: 0,
            resolution: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub feature_seed: u64,
    pub hit_window_frames: f64,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            feature_seed: 0xE7A1,
            hit_window_frames: crate::eval::DEFAULT_HIT_WINDOW_FRAMES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub master_seed: u64,
    pub sample_rate: u32,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            n_train: 512,
            n_val: 64,
            n_test: 64,
            master_seed: 0x5EED,
            sample_rate: crate::synthdata::SAMPLE_RATE,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Override used by unused-field linting in `StageSpec`: the `stage`
    /// field inside each section must agree with its section name.
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if self.stage.video.stage != Stage::VideoPretrain
            || self.stage.audio.stage != Stage::AudioAdapt
            || self.stage.joint.stage != Stage::JointFinetune
        {
            return Err(Error::config(
                "stage sections must keep their own stage kind".to_string(),
            ));
        }
        for spec in [&self.stage.video, &self.stage.audio, &self.stage.joint] {
            spec.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sample.guidance, 6.0);
        assert_eq!(cfg.sample.steps, 50);
        assert_eq!(cfg.data.n_train, 512);
        assert_eq!(cfg.stage.video.steps, 3000);
        assert_eq!(cfg.stage.audio.steps, 2000);
        assert_eq!(cfg.stage.joint.steps, 500);
        assert_eq!(cfg.stage.audio.text_dropout, 0.10);
    }

    #[test]
    fn parse_serialize_parse_is_fixed_point() {
        let partial = r#"{"sample": {"guidance": 4.0}, "data": {"n_train": 16}}"#;
        let cfg = RunConfig::from_json(partial).unwrap();
        let json = cfg.to_json();
        let cfg2 = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(cfg2.to_json(), json);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"unknown_section": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sample": {"nope": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"codec": {"bogus": 2}}"#).is_err());
    }

    #[test]
    fn stage_kind_mismatch_is_config_error() {
        let cfg =
            RunConfig::from_json(r#"{"stage": {"video": {"stage": "audio-adapt", "steps": 5}}}"#)
                .unwrap();
        assert!(cfg.validate().is_err());
    }
}
