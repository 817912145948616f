use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ugp_nn::{no_grad, Var};

use crate::data::{
    build_manifest, generate_toy_faces, split_manifest, stack_images, unstack_images, ImageTensor,
};
use crate::degrade::{generate_kernel_bank_with, save_kernel_bank, DegradationSpec, KernelParams};
use crate::error::{shape_err, Result};
use crate::losses::PerceptualExtractor;
use crate::metrics::{evaluate, EvalReport};
use crate::restoration::RestorationModule;
use crate::synthesis::SynthesisModule;
use crate::trainer::batches::PairedImages;
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::stages::{
    checkpoint_dir_for, fusion_from, restoration_from, synthesis_from, train_stage, upstream_batch,
    FusionHead, StageReport,
};
use crate::trainer::{Preset, Stage, TrainConfig};

/// Intermediate and final images of one restoration.
#[derive(Clone, Debug)]
pub struct Inference {
    pub x_reg: ImageTensor,
    pub x_syn: ImageTensor,
    pub x_hat: ImageTensor,
}

/// The three trained modules, loaded from a fusion checkpoint.
pub struct Pipeline {
    pub restoration: RestorationModule<f32>,
    pub synthesis: SynthesisModule<f32>,
    pub fusion: FusionHead,
    pub preset: Preset,
}

impl Pipeline {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.stage != Stage::Fusion {
            return Err(crate::UgpError::Prerequisite(format!(
                "{} is not a fusion checkpoint",
                ck.dir.display()
            )));
        }
        Ok(Self {
            restoration: restoration_from(ck)?,
            synthesis: synthesis_from(ck)?,
            fusion: fusion_from(ck)?,
            preset: ck.meta.config.preset,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }

    pub fn resolution(&self) -> usize {
        self.synthesis.config().resolution
    }

    pub fn infer_batch(&self, images: &[&ImageTensor]) -> Result<Vec<Inference>> {
        let r = self.resolution();
        if let Some(bad) = images.iter().find(|x| x.height() != r || x.width() != r) {
            return Err(shape_err!(
                "input is {}x{}, the pipeline runs at {r}x{r}",
                bad.height(),
                bad.width()
            ));
        }
        let x = Var::constant(stack_images(images)?);
        let (reg, syn, hat) = no_grad(|| -> Result<_> {
            let up = upstream_batch(&self.restoration, &self.synthesis, &x)?;
            let hat = self.fusion.forward_raw(&up)?.clamp(0.0, 1.0);
            Ok((up.x_reg, up.x_syn, hat))
        })?;
        let (reg, syn, hat) = (
            unstack_images(reg.value())?,
            unstack_images(syn.value())?,
            unstack_images(hat.value())?,
        );
        Ok(reg
            .into_iter()
            .zip(syn)
            .zip(hat)
            .map(|((x_reg, x_syn), x_hat)| Inference {
                x_reg,
                x_syn,
                x_hat,
            })
            .collect())
    }

    pub fn infer(&self, x: &ImageTensor) -> Result<Inference> {
        Ok(self.infer_batch(&[x])?.remove(0))
    }

    /// Runs over `images` in chunks of `batch`.
    pub fn infer_all(&self, images: &[ImageTensor], batch: usize) -> Result<Vec<Inference>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            out.extend(self.infer_batch(&refs)?);
        }
        Ok(out)
    }
}

/// Reports for every image kind against the clean references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineEval {
    pub degraded: EvalReport,
    pub x_reg: EvalReport,
    pub x_syn: EvalReport,
    pub x_hat: EvalReport,
}

pub fn evaluate_pipeline(
    p: &Pipeline,
    data: &PairedImages,
    ext: &PerceptualExtractor<f64>,
) -> Result<PipelineEval> {
    let out = p.infer_all(&data.degraded, 8)?;
    let pick =
        |f: fn(&Inference) -> &ImageTensor| out.iter().map(|o| f(o).clone()).collect::<Vec<_>>();
    Ok(PipelineEval {
        degraded: evaluate(&data.degraded, &data.clean, ext)?,
        x_reg: evaluate(&pick(|o| &o.x_reg), &data.clean, ext)?,
        x_syn: evaluate(&pick(|o| &o.x_syn), &data.clean, ext)?,
        x_hat: evaluate(&pick(|o| &o.x_hat), &data.clean, ext)?,
    })
}

fn stage_config(base: &TrainConfig, root: &Path, stage: Stage) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.stage = stage;
    cfg.checkpoint_dir = checkpoint_dir_for(root, stage);
    cfg
}

/// Reports of a full staged run, in stage order.
pub struct RunOutcome {
    pub stages: Vec<StageReport>,
}

impl RunOutcome {
    pub fn stage(&self, s: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|r| r.stage == s)
    }

    pub fn final_checkpoint(&self) -> &Checkpoint {
        &self.stages.last().expect("at least one stage").checkpoint
    }
}

/// Trains every stage in order under `root/<stage>`, reusing a pretrain
/// checkpoint when one is given.
pub fn run_all(base: &TrainConfig, root: &Path, pretrain: Option<&Path>) -> Result<RunOutcome> {
    let mut stages = Vec::new();
    let rest = train_stage(&stage_config(base, root, Stage::Restoration))?;
    let pre_dir = match pretrain {
        Some(p) => p.to_path_buf(),
        None => {
            let r = train_stage(&stage_config(base, root, Stage::SynthesisPretrain))?;
            let d = r.checkpoint.dir.clone();
            stages.push(r);
            d
        }
    };
    let mut cfg = stage_config(base, root, Stage::Synthesis);
    cfg.prerequisites.restoration = Some(rest.checkpoint.dir.clone());
    cfg.prerequisites.synthesis_pretrain = Some(pre_dir);
    let syn = train_stage(&cfg)?;
    let mut cfg = stage_config(base, root, Stage::Fusion);
    cfg.prerequisites.restoration = Some(rest.checkpoint.dir.clone());
    cfg.prerequisites.synthesis = Some(syn.checkpoint.dir.clone());
    let fus = train_stage(&cfg)?;
    stages.insert(0, rest);
    stages.push(syn);
    stages.push(fus);
    Ok(RunOutcome { stages })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: Preset,
    pub label: String,
    pub report: EvalReport,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| preset | PSNR | SSIM | FID-proxy |\n|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.3} | {:.4} | {:.5} |\n",
                r.label, r.report.psnr, r.report.ssim, r.report.fid_proxy
            ));
        }
        s
    }
}

/// Trains presets (a), (b) and (c) and evaluates each on `test`. One
/// pretrain run is shared by all; (b) reuses the restoration and synthesis
/// stages of (c).
pub fn run_ablation(base: &TrainConfig, root: &Path, test: &PairedImages) -> Result<AblationTable> {
    let ext = PerceptualExtractor::<f64>::new(&base.losses.extractor)?;
    let pre = train_stage(&stage_config(
        base,
        &root.join("shared"),
        Stage::SynthesisPretrain,
    ))?;
    let pre_dir = pre.checkpoint.dir.clone();
    let mut rows = Vec::new();
    let mut eval_row = |preset: Preset, ck: &Checkpoint| -> Result<()> {
        let p = Pipeline::from_checkpoint(ck)?;
        rows.push(AblationRow {
            preset,
            label: preset.label().to_string(),
            report: evaluate_pipeline(&p, test, &ext)?.x_hat,
            checkpoint: ck.dir.clone(),
        });
        Ok(())
    };
    for preset in [Preset::A, Preset::C] {
        let cfg = TrainConfig {
            preset,
            ..base.clone()
        };
        let run = run_all(
            &cfg,
            &root.join(format!("preset-{}", preset_tag(preset))),
            Some(&pre_dir),
        )?;
        eval_row(preset, run.final_checkpoint())?;
        if preset == Preset::C {
            let dir_c = root.join("preset-c");
            let mut fb = stage_config(
                &TrainConfig {
                    preset: Preset::B,
                    ..base.clone()
                },
                &root.join("preset-b"),
                Stage::Fusion,
            );
            fb.prerequisites.restoration = Some(
                run.stage(Stage::Restoration)
                    .map(|r| r.checkpoint.dir.clone())
                    .unwrap_or(dir_c.clone()),
            );
            fb.prerequisites.synthesis = run
                .stage(Stage::Synthesis)
                .map(|r| r.checkpoint.dir.clone());
            let b = train_stage(&fb)?;
            eval_row(Preset::B, &b.checkpoint)?;
        }
    }
    rows.sort_by_key(|r| r.preset);
    Ok(AblationTable { rows })
}

fn preset_tag(p: Preset) -> &'static str {
    match p {
        Preset::A => "a",
        Preset::B => "b",
        Preset::C => "c",
    }
}

/// Layout of a generated toy experiment.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub kernel_bank: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub images: usize,
    pub test_images: usize,
    pub size: usize,
    pub kernels: usize,
    pub kernel_size: usize,
    pub kernel_params: KernelParams,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            images: 64,
            test_images: 16,
            size: 64,
            kernels: 32,
            kernel_size: 9,
            kernel_params: KernelParams::default(),
            seed: 0,
        }
    }
}

/// Renders toy faces, a blur-kernel bank and degraded copies, and writes
/// train and test manifests under `root`.
pub fn prepare_toy_corpus(root: &Path, cfg: &ToyCorpusConfig) -> Result<ToyCorpus> {
    let clean = root.join("clean");
    generate_toy_faces(&clean, cfg.images + cfg.test_images, cfg.size, cfg.seed)?;
    let kernel_bank = root.join("kernels.bin");
    let bank =
        generate_kernel_bank_with(cfg.kernels, cfg.kernel_size, cfg.seed, &cfg.kernel_params)?;
    save_kernel_bank(&kernel_bank, &bank, cfg.seed, &cfg.kernel_params)?;
    let spec = DegradationSpec::Blur {
        kernel_bank_path: kernel_bank.clone(),
    };
    let all = build_manifest(&clean, &root.join("degraded"), &spec, cfg.seed)?;
    all.materialize()?;
    let frac = cfg.test_images as f64 / (cfg.images + cfg.test_images) as f64;
    let (train, test) = split_manifest(&all, frac, cfg.seed)?;
    let train_manifest = root.join("train.jsonl");
    let test_manifest = root.join("test.jsonl");
    train.save(&train_manifest)?;
    test.save(&test_manifest)?;
    Ok(ToyCorpus {
        root: root.to_path_buf(),
        train_manifest,
        test_manifest,
        kernel_bank,
    })
}
