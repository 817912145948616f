use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ugp_nn::{Adam, Array, Float, Module};

use crate::error::{Result, UgpError};
use crate::synthesis::SynthesisMeta;
use crate::trainer::{Stage, TrainConfig};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const META_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub step: usize,
    pub config: TrainConfig,
    pub rng: RngState,
    /// Step counters of each optimizer, by prefix.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub synthesis: Option<SynthesisMeta>,
}

/// A saved stage: named weights under module prefixes plus metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
    pub weights: BTreeMap<String, Array<f32>>,
}

pub fn checkpoint_name(stage: Stage, step: usize) -> String {
    format!("stage-{}-step-{step}", stage.name())
}

/// Adds `prefix.`-qualified parameters of `m` into `out`.
pub fn collect<M: Module<f32> + ?Sized>(
    out: &mut BTreeMap<String, Array<f32>>,
    prefix: &str,
    m: &M,
) {
    for (k, v) in m.state_dict() {
        out.insert(format!("{prefix}.{k}"), v);
    }
}

/// Entries under `prefix.` with the prefix stripped.
pub fn section(
    weights: &BTreeMap<String, Array<f32>>,
    prefix: &str,
) -> BTreeMap<String, Array<f32>> {
    let p = format!("{prefix}.");
    weights
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}

pub fn load_section<M: Module<f32> + ?Sized>(
    m: &mut M,
    weights: &BTreeMap<String, Array<f32>>,
    prefix: &str,
) -> Result<()> {
    m.load_state_dict(&section(weights, prefix))?;
    Ok(())
}

pub fn optimizer_state<T: Float>(
    out: &mut BTreeMap<String, Array<T>>,
    steps: &mut BTreeMap<String, u64>,
    prefix: &str,
    opt: &Adam<T>,
) {
    let (n, st) = opt.state();
    steps.insert(prefix.to_string(), n);
    for (k, v) in st {
        out.insert(format!("{prefix}.{k}"), v);
    }
}

impl Checkpoint {
    pub fn save(
        root: &Path,
        meta: CheckpointMeta,
        weights: BTreeMap<String, Array<f32>>,
        optimizer: &BTreeMap<String, Array<f32>>,
    ) -> Result<Self> {
        let dir = root.join(checkpoint_name(meta.stage, meta.step));
        std::fs::create_dir_all(&dir)?;
        ugp_nn::io::save(&dir.join(WEIGHTS_FILE), &weights)?;
        if !optimizer.is_empty() {
            ugp_nn::io::save(&dir.join(OPTIMIZER_FILE), optimizer)?;
        }
        std::fs::write(
            dir.join(META_FILE),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        Ok(Self { dir, meta, weights })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(UgpError::NotFound(format!("checkpoint {}", dir.display())));
        }
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        let weights = ugp_nn::io::load(&dir.join(WEIGHTS_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            weights,
        })
    }

    /// Loads a prerequisite, failing with `Prerequisite` when it is absent or
    /// from a different stage.
    pub fn require(path: Option<&PathBuf>, stage: Stage) -> Result<Self> {
        let path = path.ok_or_else(|| {
            UgpError::Prerequisite(format!("a `{}` checkpoint is required", stage.name()))
        })?;
        let ck = Self::load(path).map_err(|e| match e {
            UgpError::NotFound(m) => {
                UgpError::Prerequisite(format!("missing `{}` checkpoint: {m}", stage.name()))
            }
            other => other,
        })?;
        if ck.meta.stage != stage {
            return Err(UgpError::Prerequisite(format!(
                "{} holds a `{}` checkpoint, expected `{}`",
                path.display(),
                ck.meta.stage.name(),
                stage.name()
            )));
        }
        Ok(ck)
    }

    pub fn optimizer(&self) -> Result<BTreeMap<String, Array<f32>>> {
        let p = self.dir.join(OPTIMIZER_FILE);
        if p.exists() {
            Ok(ugp_nn::io::load(&p)?)
        } else {
            Ok(BTreeMap::new())
        }
    }
}
