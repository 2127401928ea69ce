//! Flat key-value run configuration. Parsed from TOML, merged with
//! `--set key=value` overrides; unknown keys are rejected. The resolved
//! config is persisted into the run directory so later commands cannot
//! drift from the one that generated the data.

use std::path::Path;

use adafocus::error::{AdaFocusError, Result};
use adafocus::nets::ClassifierHead;
use adafocus::pipeline::{BundleSpec, Stage, StageConfig};
use adafocus::synthdata::SynthConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    // data
    pub frame_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub frames_per_video: usize,
    pub glyph_size: usize,
    pub num_distractors: usize,
    pub max_step: usize,
    pub noise_std: f64,
    pub train_samples: usize,
    pub cal_samples: usize,
    pub test_samples: usize,

    // model
    pub patch_size: usize,
    pub grid_k: usize,
    pub classifier_head: String,
    pub classifier_hidden: usize,
    pub adafocus_plus: bool,
    pub reuse_glance: bool,

    // training
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub pretrain_lr: f64,
    /// Glance-probe epochs within pretrain; 0 means the full pretrain_epochs.
    /// The cheap focus probe always runs all pretrain_epochs.
    pub pretrain_glance_epochs: usize,
    pub stage1_lr: f64,
    /// Focus-network learning rate in stages I/III; 0 means follow the
    /// stage learning rate.
    pub f_l_lr: f64,
    pub stage2_lr: f64,
    pub stage3_lr: f64,
    pub stage3_train_f_l: bool,
    pub stage3_argmax: bool,
    pub gamma: f64,
    pub ppo_clip: f64,
    pub eta: f64,
    pub lambda: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let pre = StageConfig::defaults(Stage::Pretrain);
        let s1 = StageConfig::defaults(Stage::Stage1);
        let s2 = StageConfig::defaults(Stage::Stage2);
        let s3 = StageConfig::defaults(Stage::Stage3);
        RunConfig {
            seed: 0,
            frame_size: synth.frame_size,
            channels: synth.channels,
            num_classes: synth.num_classes,
            frames_per_video: synth.frames_per_video,
            glyph_size: synth.glyph_size,
            num_distractors: synth.num_distractors,
            max_step: synth.max_step,
            noise_std: synth.noise_std,
            train_samples: 200,
            cal_samples: 100,
            test_samples: 200,
            patch_size: 16,
            grid_k: 5,
            classifier_head: "recurrent".into(),
            classifier_hidden: 64,
            adafocus_plus: false,
            reuse_glance: true,
            batch_size: s1.batch_size,
            pretrain_epochs: pre.epochs,
            stage1_epochs: s1.epochs,
            stage2_epochs: s2.epochs,
            stage3_epochs: s3.epochs,
            pretrain_lr: pre.learning_rate,
            pretrain_glance_epochs: pre.glance_epochs.unwrap_or(0),
            stage1_lr: s1.learning_rate,
            f_l_lr: s1.f_l_learning_rate.unwrap_or(0.0),
            stage2_lr: s2.learning_rate,
            stage3_lr: s3.learning_rate,
            stage3_train_f_l: s3.train_f_l,
            stage3_argmax: !s3.sample_policy,
            gamma: s2.ppo.gamma,
            ppo_clip: s2.ppo.clip_epsilon,
            eta: 0.7,
            lambda: s2.lambda,
        }
    }
}

fn config_err<E: std::fmt::Display>(e: E) -> AdaFocusError {
    AdaFocusError::Config(e.to_string())
}

impl RunConfig {
    /// Resolve a config from an optional TOML file plus `key=value`
    /// overrides. Unknown keys in either source are a config error.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = toml::Table::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| {
                AdaFocusError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            table = text.parse::<toml::Table>().map_err(config_err)?;
        }
        for kv in overrides {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                AdaFocusError::Config(format!("override `{kv}` is not key=value"))
            })?;
            let parsed: toml::Table = format!("{key} = {value}")
                .parse()
                .or_else(|_| format!("{key} = \"{value}\"").parse())
                .map_err(config_err)?;
            for (k, v) in parsed {
                table.insert(k, v);
            }
        }
        let cfg: RunConfig = toml::Table::try_into(table).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::resolve(Some(path), &[])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(config_err)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.head()?;
        if self.patch_size > self.frame_size {
            return Err(AdaFocusError::Config(format!(
                "patch_size {} exceeds frame_size {}",
                self.patch_size, self.frame_size
            )));
        }
        if !(0.0 < self.eta && self.eta <= 1.0) {
            return Err(AdaFocusError::Config(format!("eta {} outside (0, 1]", self.eta)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn head(&self) -> Result<ClassifierHead> {
        match self.classifier_head.as_str() {
            "recurrent" => Ok(ClassifierHead::Recurrent),
            "averaging" => Ok(ClassifierHead::Averaging),
            other => Err(AdaFocusError::Config(format!(
                "classifier_head `{other}` is not one of recurrent|averaging"
            ))),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_classes: self.num_classes,
            frames_per_video: self.frames_per_video,
            frame_size: self.frame_size,
            glyph_size: self.glyph_size,
            num_distractors: self.num_distractors,
            max_step: self.max_step,
            noise_std: self.noise_std,
            channels: self.channels,
            seed: self.seed,
        }
    }

    pub fn bundle_spec(&self) -> Result<BundleSpec> {
        Ok(BundleSpec {
            frame_size: self.frame_size,
            channels: self.channels,
            num_classes: self.num_classes,
            patch_size: self.patch_size,
            grid_k: self.grid_k,
            classifier_head: self.head()?,
            classifier_hidden: self.classifier_hidden,
            adafocus_plus: self.adafocus_plus,
            reuse_glance: self.reuse_glance,
        })
    }

    pub fn stage_config(&self, stage: Stage) -> StageConfig {
        let mut cfg = StageConfig::defaults(stage);
        cfg.batch_size = self.batch_size;
        cfg.eta = self.eta;
        cfg.lambda = self.lambda;
        cfg.ppo.gamma = self.gamma;
        cfg.ppo.clip_epsilon = self.ppo_clip;
        cfg.ppo.batch_size = self.batch_size;
        match stage {
            Stage::Pretrain => {
                cfg.epochs = self.pretrain_epochs;
                cfg.learning_rate = self.pretrain_lr;
                cfg.glance_epochs =
                    (self.pretrain_glance_epochs > 0).then_some(self.pretrain_glance_epochs);
            }
            Stage::Stage1 => {
                cfg.epochs = self.stage1_epochs;
                cfg.learning_rate = self.stage1_lr;
                cfg.f_l_learning_rate = (self.f_l_lr > 0.0).then_some(self.f_l_lr);
            }
            Stage::Stage2 => {
                cfg.epochs = self.stage2_epochs;
                cfg.learning_rate = self.stage2_lr;
                cfg.ppo.learning_rate = self.stage2_lr;
            }
            Stage::Stage3 => {
                cfg.epochs = self.stage3_epochs;
                cfg.learning_rate = self.stage3_lr;
                cfg.train_f_l = self.stage3_train_f_l;
                cfg.sample_policy = !self.stage3_argmax;
                cfg.f_l_learning_rate = (self.f_l_lr > 0.0).then_some(self.f_l_lr);
            }
        }
        cfg
    }
}
