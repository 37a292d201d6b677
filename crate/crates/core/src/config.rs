//! Run configuration: TOML files layered over named presets.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, GroundTruthConfig, IngestConfig, Normalization};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    /// Region-of-interest mask shared by every image.
    pub roi: Option<PathBuf>,
    pub ingest: IngestConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub groundtruth: GroundTruthConfig,
    pub normalization: Normalization,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    PartA,
    PartB,
    Qnrf,
    Ucsd,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "desk" => Self::Desk,
            "parta" => Self::PartA,
            "partb" => Self::PartB,
            "qnrf" => Self::Qnrf,
            "ucsd" => Self::Ucsd,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset `{s}` (expected desk, parta, partb, qnrf or ucsd)"
                )))
            }
        })
    }
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        let mut c = Self::default();
        match p {
            Preset::Desk => {
                c.model.width_multiplier = 0.125;
                c.augment.crop = (128, 128);
                c.augment.short_side_min = 0;
                c.augment.scale_range = (1.0, 1.0);
                c.augment.gamma_p = 0.0;
                c.train.batch_size = 4;
                c.train.max_steps = Some(2000);
                c.train.eval_every = 0;
            }
            Preset::PartA => c.augment.gray_p = 0.1,
            Preset::PartB => {}
            Preset::Qnrf => c.data.ingest.qnrf = true,
            Preset::Ucsd => c.data.ingest.upscale_to = Some((960, 640)),
        }
        c
    }

    /// Parses TOML text on top of `base`. Keys absent from the text keep
    /// their base values.
    pub fn from_toml_over(text: &str, base: &Config, path: &Path) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|source| Error::Config {
            path: path.to_path_buf(),
            source,
        })?;
        let mut merged = toml::Table::try_from(base).expect("config serializes to TOML");
        merge(&mut merged, overlay);
        let mut cfg: Config = merged.try_into().map_err(|source| Error::Config {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, base: &Config) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_over(&text, base, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.data.train_manifest,
            &mut self.data.val_manifest,
            &mut self.data.roi,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                let joined = base.join(&*p);
                *p = std::path::absolute(&joined).unwrap_or(joined);
            }
        }
    }

    /// Reconciles the two attention switches and validates every section.
    pub fn finish(&mut self) -> Result<()> {
        let amp = self.model.amp_enabled && self.train.amp_enabled;
        self.model.amp_enabled = amp;
        self.train.amp_enabled = amp;
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.groundtruth.density_kernel.validate()?;
        self.groundtruth.attention_kernel.validate()?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_keeps_unset_fields() {
        let base = Config::preset(Preset::Desk);
        let cfg = Config::from_toml_over(
            "[train]\nlr = 0.001\n[model]\nwidth_multiplier = \"1/4\"\n",
            &base,
            Path::new("x.toml"),
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.model.width_multiplier, 0.25);
        assert_eq!(cfg.augment.crop, (128, 128));
    }

    #[test]
    fn presets_round_trip() {
        for p in ["desk", "parta", "partb", "qnrf", "ucsd"] {
            let c = Config::preset(p.parse().unwrap());
            let back =
                Config::from_toml_over(&c.to_toml(), &Config::default(), Path::new("")).unwrap();
            assert_eq!(back, c, "{p}");
        }
        assert_eq!(Config::preset(Preset::PartA).augment.gray_p, 0.1);
        assert_eq!(Config::preset(Preset::PartB).augment.gray_p, 0.0);
    }

    #[test]
    fn unknown_keys_and_missing_files_are_errors() {
        let e = Config::from_toml_over("[train]\nlearning_rate = 1\n", &Config::default(), Path::new("c.toml"))
            .unwrap_err();
        assert!(e.to_string().contains("c.toml"));
        let e = Config::load("/no/such/cfg.toml", &Config::default()).unwrap_err();
        assert!(e.to_string().contains("/no/such/cfg.toml"));
    }

    #[test]
    fn ablation_switch_disables_model_path() {
        let c = Config::from_toml_over("[train]\namp_enabled = false\n", &Config::default(), Path::new(""))
            .unwrap();
        assert!(!c.model.amp_enabled);
    }
}
