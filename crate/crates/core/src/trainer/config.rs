use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, UgpError};
use crate::fusion::FusionConfig;
use crate::losses::{ContextualConfig, ExtractorConfig, LossWeights};
use crate::restoration::BackboneParams;
use crate::synthesis::SynthesisConfig;

/// Version of the run-config schema.
pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Restoration,
    SynthesisPretrain,
    Synthesis,
    Fusion,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Restoration,
        Stage::SynthesisPretrain,
        Stage::Synthesis,
        Stage::Fusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Restoration => "restoration",
            Stage::SynthesisPretrain => "synthesis-pretrain",
            Stage::Synthesis => "synthesis",
            Stage::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid!("unknown stage `{s}`"))
    }
}

/// Ablation configurations: (a) no structure encoder / merging network,
/// (b) image-domain fusion, (c) the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    A,
    B,
    C,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::A, Preset::B, Preset::C];

    pub fn label(self) -> &'static str {
        match self {
            Preset::A => "(a) w/o R_se and R_mg",
            Preset::B => "(b) w/ image fusion",
            Preset::C => "(c) full",
        }
    }

    pub fn uses_adapter(self) -> bool {
        self != Preset::A
    }

    pub fn image_fusion(self) -> bool {
        self == Preset::B
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: PathBuf::from("data/train.jsonl"),
            test_manifest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorationConfig {
    pub backbone: String,
    pub params: BackboneParams,
    /// Train a direct backbone from scratch instead of taking `init` as is.
    pub skip_pretrained: bool,
    /// Checkpoint whose backbone weights initialize (or, for a direct
    /// backbone without `skip_pretrained`, replace) this stage.
    pub init: Option<PathBuf>,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            backbone: "tiny-residual".into(),
            params: BackboneParams::default(),
            skip_pretrained: true,
            init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub contextual: ContextualConfig,
    pub extractor: ExtractorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    /// Generator/encoder and critic rates in adversarial stages.
    pub lr_adv: f64,
    pub betas_adv: [f64; 2],
    pub save_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 2e-3,
            betas: [0.9, 0.999],
            lr_adv: 2e-3,
            betas_adv: [0.0, 0.99],
            save_every: 0,
        }
    }
}

/// Checkpoints consumed by later stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prerequisites {
    pub restoration: Option<PathBuf>,
    pub synthesis_pretrain: Option<PathBuf>,
    pub synthesis: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub preset: Preset,
    pub data: DataConfig,
    pub restoration: RestorationConfig,
    pub synthesis: SynthesisConfig,
    pub fusion: FusionConfig,
    pub losses: LossConfig,
    pub train: OptimConfig,
    pub prerequisites: Prerequisites,
    pub checkpoint_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Restoration,
            seed: 0,
            preset: Preset::C,
            data: DataConfig::default(),
            restoration: RestorationConfig::default(),
            synthesis: SynthesisConfig::default(),
            fusion: FusionConfig::default(),
            losses: LossConfig::default(),
            train: OptimConfig::default(),
            prerequisites: Prerequisites::default(),
            checkpoint_dir: PathBuf::from("runs"),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid!("bad train config: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => UgpError::NotFound(path.display().to_string()),
            _ => e.into(),
        })?;
        Self::from_json(&text)
    }

    pub fn resolution(&self) -> usize {
        self.synthesis.resolution
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.steps == 0 || t.batch == 0 {
            return Err(invalid!("steps and batch must be at least 1"));
        }
        if !(t.lr > 0.0) || !(t.lr_adv > 0.0) {
            return Err(invalid!("learning rates must be positive"));
        }
        for b in t.betas.iter().chain(&t.betas_adv) {
            if !(0.0..1.0).contains(b) {
                return Err(invalid!("betas must lie in [0, 1)"));
            }
        }
        self.synthesis.validate()?;
        self.losses.weights.validate()?;
        if self.losses.contextual.stage >= self.losses.extractor.channels.len() {
            return Err(invalid!(
                "contextual stage {} outside the extractor",
                self.losses.contextual.stage
            ));
        }
        Ok(())
    }

    /// Seed for a named sub-stream.
    pub fn sub_seed(&self, name: &str) -> u64 {
        crate::data::entry_seed(self.seed, name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        let partial =
            TrainConfig::from_json(r#"{"stage":"synthesis-pretrain","train":{"steps":3}}"#)
                .unwrap();
        assert_eq!(partial.stage, Stage::SynthesisPretrain);
        assert_eq!(partial.train.steps, 3);
        assert_eq!(partial.train.batch, 8);
        assert!(TrainConfig::from_json(r#"{"stages":1}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.train.steps = 0;
        assert!(cfg.validate().is_err());
        cfg.train.steps = 1;
        cfg.train.lr = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
            assert_eq!(serde_json::to_value(s).unwrap(), s.name());
        }
        assert!(Stage::parse("joint").is_err());
    }
}
