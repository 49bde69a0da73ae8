//! The run configuration file (TOML). Every section and key is optional and
//! defaults as documented on the underlying types; unknown keys are errors.
//!
//! ```toml
//! [backbone]
//! depth = 2
//! base_channels = 8
//!
//! [loss]
//! eps_log = 1e-7
//! eps_div = 1e-7
//! sigma = 1.0
//! radius = 3
//! normalize_bce = false
//!
//! [phases]
//! alpha = 0.99
//! switch_mode = "momentum"      # or "copy"
//! cache_update = "per_step"     # or "per_epoch"
//! crop_margin = 4
//! d2_threshold = 0.5
//! d2_fallback = "whole_image"
//! seed = 0
//!
//! [phases.phase1]               # also phase2, phase3, segmentation
//! algorithm = "adam"            # or "sgd_momentum"
//! learning_rate = 0.001
//! batch_size = 8
//! epochs = 12
//! seed = 0
//!
//! [predict]
//! crop_threshold = 0.5
//! final_threshold = 0.5
//! margin = 4
//! # d_t = 0.95                  # absent: single pass
//! max_iters = 10
//!
//! [gen]
//! count = 200
//! height = 64
//! width = 64
//! fg_ratio_range = [0.01, 0.04]
//! blob_irregularity = 0.35
//! noise_sigma = 0.03
//! empty_slice_fraction = 0.1
//! distractors = 4
//! seed = 0
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::curriculum::PhaseConfig;
use crate::error::{CksError, Result};
use crate::losses::LossSettings;
use crate::predictor::PredictConfig;
use crate::synthdata_io::GenConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub backbone: BackboneSpec,
    pub loss: LossSettings,
    pub phases: PhaseConfig,
    pub predict: PredictConfig,
    pub gen: GenConfig,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = toml::from_str(text).map_err(|e| CksError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CksError::MissingFile(path.to_path_buf()),
            _ => CksError::io(path, e),
        })?;
        Self::parse(&text).map_err(|e| match e {
            CksError::Config(msg) => CksError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CksError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        BackboneSpec::new(self.backbone.depth, self.backbone.base_channels)?;
        self.loss.build()?;
        self.phases.validate()?;
        self.predict.validate()?;
        self.gen.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Algorithm;
    use crate::ema::SwitchMode;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfigFile::parse("").unwrap(), RunConfigFile::default());
    }

    #[test]
    fn documented_example_parses_to_defaults() {
        let doc: String = include_str!("config.rs")
            .lines()
            .take_while(|l| l.starts_with("//!"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .skip_while(|l| !l.starts_with("```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("```"))
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(RunConfigFile::parse(&doc).unwrap(), RunConfigFile::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfigFile::parse(
            "[phases]\nswitch_mode = \"copy\"\n[phases.phase3]\nalgorithm = \"sgd_momentum\"\nepochs = 2\n[predict]\nd_t = 0.95\n",
        )
        .unwrap();
        assert_eq!(cfg.phases.switch_mode, SwitchMode::Copy);
        assert_eq!(cfg.phases.phase3.algorithm, Algorithm::SgdMomentum);
        assert_eq!(cfg.phases.phase3.epochs, 2);
        assert_eq!(cfg.phases.phase3.batch_size, 8);
        assert_eq!(cfg.phases.phase1, crate::backbone::OptimizerConfig::default());
        assert_eq!(cfg.predict.d_t, Some(0.95));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "bogus = 1",
            "[phases]\nalpha_typo = 0.9",
            "[phases.phase1]\nlr = 0.1",
            "[extra]\n",
        ] {
            assert!(matches!(RunConfigFile::parse(text), Err(CksError::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfigFile::parse("[phases]\nalpha = 1.5").is_err());
        assert!(RunConfigFile::parse("[backbone]\ndepth = 0").is_err());
        assert!(RunConfigFile::parse("[predict]\nd_t = 0.0").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfigFile::default();
        cfg.predict.d_t = Some(0.9);
        cfg.phases.seed = 17;
        assert_eq!(RunConfigFile::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
