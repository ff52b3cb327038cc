use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, OcclusionSpec, PkSpec};
use crate::encoder::{EncoderConfig, LocalBranch};
use crate::error::{Error, Result};
use crate::losses::{AnnConfig, MetricLoss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "adam")]
    Adam,
    #[serde(rename = "sgd-momentum")]
    SgdMomentum,
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub ann: AnnConfig,
    pub variant: MetricLoss,
    pub pk: PkSpec,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Random-erase augmentation of training images; each image gets an
    /// area fraction drawn uniformly from `[0, s]`.
    pub occlusion_train: Option<OcclusionSpec>,
    pub occlusion_eval_s: Vec<f64>,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            ann: AnnConfig::default(),
            variant: MetricLoss::Ann,
            pk: PkSpec { p: 8, k: 4 },
            steps_per_epoch: 50,
            epochs: 30,
            learning_rate: 3e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            occlusion_train: None,
            occlusion_eval_s: vec![0.0, 0.3, 0.6],
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ann.validate()?;
        self.pk.validate()?;
        if self.encoder.num_classes != self.data.num_ids {
            return Err(Error::Config(format!(
                "encoder has {} classes but the data has {} identities",
                self.encoder.num_classes, self.data.num_ids
            )));
        }
        if self.encoder.input_shape != self.data.input_shape {
            return Err(Error::Config(format!(
                "encoder input {:?} differs from data shape {:?}",
                self.encoder.input_shape, self.data.input_shape
            )));
        }
        if self.pk.p > self.data.num_ids {
            return Err(Error::Config(format!(
                "P = {} exceeds the {} identities",
                self.pk.p, self.data.num_ids
            )));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "epochs and steps_per_epoch must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(spec) = &self.occlusion_train {
            if !(0.0..=1.0).contains(&spec.s) {
                return Err(Error::Config("occlusion_train.s must lie in [0, 1]".into()));
            }
        }
        if self
            .occlusion_eval_s
            .iter()
            .any(|s| !(0.0..=1.0).contains(s))
        {
            return Err(Error::Config(
                "occlusion_eval_s entries must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// The nine architecture × loss combinations of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "RN_S")]
    RnS,
    #[serde(rename = "RN_A")]
    RnA,
    #[serde(rename = "RNCONV_A")]
    RnConvA,
    #[serde(rename = "RNFC_A")]
    RnFcA,
    #[serde(rename = "RNRNN_A")]
    RnRnnA,
    #[serde(rename = "RNLSTM_S")]
    RnLstmS,
    #[serde(rename = "RNLSTM_C")]
    RnLstmC,
    #[serde(rename = "RNLSTM_T")]
    RnLstmT,
    #[serde(rename = "RNLSTM_A")]
    RnLstmA,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::RnS,
        Variant::RnA,
        Variant::RnConvA,
        Variant::RnFcA,
        Variant::RnRnnA,
        Variant::RnLstmS,
        Variant::RnLstmC,
        Variant::RnLstmT,
        Variant::RnLstmA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RnS => "RN_S",
            Variant::RnA => "RN_A",
            Variant::RnConvA => "RNCONV_A",
            Variant::RnFcA => "RNFC_A",
            Variant::RnRnnA => "RNRNN_A",
            Variant::RnLstmS => "RNLSTM_S",
            Variant::RnLstmC => "RNLSTM_C",
            Variant::RnLstmT => "RNLSTM_T",
            Variant::RnLstmA => "RNLSTM_A",
        }
    }

    pub fn local_branch(self) -> LocalBranch {
        match self {
            Variant::RnS | Variant::RnA => LocalBranch::None,
            Variant::RnConvA => LocalBranch::Conv,
            Variant::RnFcA => LocalBranch::Fc,
            Variant::RnRnnA => LocalBranch::Rnn,
            Variant::RnLstmS | Variant::RnLstmC | Variant::RnLstmT | Variant::RnLstmA => {
                LocalBranch::Lstm
            }
        }
    }

    pub fn loss(self) -> MetricLoss {
        match self {
            Variant::RnS | Variant::RnLstmS => MetricLoss::None,
            Variant::RnLstmC => MetricLoss::Contrastive,
            Variant::RnLstmT => MetricLoss::Triplet,
            _ => MetricLoss::Ann,
        }
    }

    /// The grid row matching `config`'s local branch and loss, if any.
    pub fn of(config: &TrainConfig) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.local_branch() == config.encoder.local_branch && v.loss() == config.variant)
    }

    /// `base` with this variant's local branch and loss.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.encoder.local_branch = self.local_branch();
        cfg.variant = self.loss();
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s}")))
    }
}
