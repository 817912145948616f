use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ugp_nn::{no_grad, Adam, Array, Float, Module, Var};

use crate::error::{Result, UgpError};
use crate::fusion::{FusionNetwork, ImageFusion};
use crate::losses::{
    adv_discriminator_var, adv_generator_var, l1_var, loss_fusion, loss_syn, PerceptualExtractor,
};
use crate::restoration::{BackboneKind, BackboneRegistry, RestorationModule};
use crate::synthesis::{Critic, SynthesisModule};
use crate::trainer::batches::{gather, gather_arrays, PairedImages, Sampler};
use crate::trainer::checkpoint::{
    collect, load_section, optimizer_state, section, Checkpoint, CheckpointMeta,
};
use crate::trainer::{Stage, TrainConfig};

/// Which network an optimizer step updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Update {
    #[serde(rename = "R")]
    Restoration,
    #[serde(rename = "D")]
    Critic,
    #[serde(rename = "G")]
    Generator,
    #[serde(rename = "F")]
    Fusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: Stage,
    pub step: usize,
    pub updates: Vec<Update>,
    pub losses: BTreeMap<String, f64>,
}

pub struct StageReport {
    pub stage: Stage,
    pub checkpoint: Checkpoint,
    pub history: Vec<StepLog>,
    /// `false` when the stage returned its input checkpoint untouched.
    pub trained: bool,
}

impl StageReport {
    /// Name of the loss whose decrease measures progress in this stage.
    pub fn tracked_loss(&self) -> &'static str {
        tracked_loss(self.stage)
    }

    pub fn series(&self, name: &str) -> Vec<f64> {
        self.history
            .iter()
            .filter_map(|l| l.losses.get(name).copied())
            .collect()
    }

    /// Optimizer updates in order.
    pub fn schedule(&self) -> Vec<Update> {
        self.history
            .iter()
            .flat_map(|l| l.updates.iter().copied())
            .collect()
    }
}

pub fn tracked_loss(stage: Stage) -> &'static str {
    match stage {
        Stage::Restoration => "l_res",
        Stage::SynthesisPretrain => "g_adv",
        Stage::Synthesis => "l1",
        Stage::Fusion => "total",
    }
}

/// Builds the restoration module for `cfg`, loading backbone weights from
/// `restoration.init` when set.
pub fn build_restoration(cfg: &TrainConfig) -> Result<RestorationModule<f32>> {
    let reg = BackboneRegistry::<f32>::with_builtins();
    let rc = &cfg.restoration;
    let mut backbone = reg.build(
        &rc.backbone,
        &rc.params,
        cfg.sub_seed("restoration.backbone"),
    )?;
    if let Some(init) = &rc.init {
        let ck = Checkpoint::load(init)?;
        load_section(&mut backbone, &ck.weights, "restoration.backbone")?;
    }
    Ok(RestorationModule::new(
        backbone,
        cfg.preset.uses_adapter(),
        cfg.sub_seed("restoration.adapter"),
    ))
}

/// Restoration module as stored in any checkpoint that carries one.
pub fn restoration_from(ck: &Checkpoint) -> Result<RestorationModule<f32>> {
    let mut cfg = ck.meta.config.clone();
    cfg.restoration.init = None;
    let mut m = build_restoration(&cfg)?;
    load_section(&mut m, &ck.weights, "restoration")?;
    Ok(m)
}

pub fn synthesis_from(ck: &Checkpoint) -> Result<SynthesisModule<f32>> {
    let cfg = &ck.meta.config;
    let mut m = SynthesisModule::new(&cfg.synthesis, cfg.sub_seed("synthesis"))?;
    load_section(&mut m, &ck.weights, "synthesis")?;
    Ok(m)
}

pub fn critic_from(ck: &Checkpoint) -> Result<Critic<f32>> {
    let cfg = &ck.meta.config;
    let mut m = Critic::new(&cfg.synthesis, cfg.sub_seed("critic"))?;
    load_section(&mut m, &ck.weights, "critic")?;
    Ok(m)
}

/// Fusion network of either preset family.
#[derive(Clone, Debug)]
pub enum FusionHead {
    Feature(FusionNetwork<f32>),
    Image(ImageFusion<f32>),
}

impl FusionHead {
    pub fn new(cfg: &TrainConfig, c_syn: usize, c_reg: usize) -> Result<Self> {
        let seed = cfg.sub_seed("fusion");
        Ok(if cfg.preset.image_fusion() {
            FusionHead::Image(ImageFusion::new(&cfg.fusion, seed)?)
        } else {
            FusionHead::Feature(FusionNetwork::new(c_syn, c_reg, &cfg.fusion, seed))
        })
    }

    /// Unclipped output from the four upstream tensors.
    pub fn forward_raw(&self, up: &Upstream) -> Result<Var<f32>> {
        match self {
            FusionHead::Feature(n) => n.forward_raw(&up.f_reg, &up.f_syn),
            FusionHead::Image(n) => {
                let (a, b) = (n.lift.forward(&up.x_reg), n.lift.forward(&up.x_syn));
                n.net.forward_raw(&a, &b)
            }
        }
    }

    fn module_mut(&mut self) -> &mut dyn Module<f32> {
        match self {
            FusionHead::Feature(n) => n,
            FusionHead::Image(n) => n,
        }
    }

    fn module(&self) -> &dyn Module<f32> {
        match self {
            FusionHead::Feature(n) => n,
            FusionHead::Image(n) => n,
        }
    }
}

pub fn fusion_from(ck: &Checkpoint) -> Result<FusionHead> {
    let cfg = &ck.meta.config;
    let rest = restoration_from(ck)?;
    let mut head = FusionHead::new(cfg, cfg.synthesis.syn_channels(), rest.feature_channels())?;
    load_section(head.module_mut(), &ck.weights, "fusion")?;
    Ok(head)
}

/// Outputs of the frozen restoration and synthesis modules for a batch.
#[derive(Clone, Debug)]
pub struct Upstream {
    pub x_reg: Var<f32>,
    pub f_reg: Var<f32>,
    pub x_syn: Var<f32>,
    pub f_syn: Var<f32>,
}

/// `x_reg` clipped to `[0, 1]` and `f_reg`.
pub fn restore_batch(rest: &RestorationModule<f32>, x: &Var<f32>) -> Result<(Var<f32>, Var<f32>)> {
    let (y, f) = rest.forward(x)?;
    Ok((y.clamp(0.0, 1.0), f))
}

pub fn upstream_batch(
    rest: &RestorationModule<f32>,
    syn: &SynthesisModule<f32>,
    x: &Var<f32>,
) -> Result<Upstream> {
    let (x_reg, f_reg) = restore_batch(rest, x)?;
    let (x_syn, f_syn) = syn.synthesize(&x_reg)?;
    Ok(Upstream {
        x_reg,
        f_reg,
        x_syn,
        f_syn,
    })
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(size.max(1))
        .map(move |s| (s..(s + size).min(n)).collect())
}

fn split(batch: &Array<f32>) -> Vec<Array<f32>> {
    (0..batch.shape()[0])
        .map(|i| {
            let s = batch.shape()[1..].to_vec();
            batch.slice0(i, 1).reshape(s)
        })
        .collect()
}

/// Per-sample upstream tensors for the whole corpus.
struct Cache {
    x_reg: Vec<Array<f32>>,
    f_reg: Vec<Array<f32>>,
    x_syn: Vec<Array<f32>>,
    f_syn: Vec<Array<f32>>,
}

impl Cache {
    fn build(
        data: &PairedImages,
        batch: usize,
        rest: &RestorationModule<f32>,
        syn: Option<&SynthesisModule<f32>>,
    ) -> Result<Self> {
        let mut c = Cache {
            x_reg: vec![],
            f_reg: vec![],
            x_syn: vec![],
            f_syn: vec![],
        };
        no_grad(|| -> Result<()> {
            for idx in chunks(data.len(), batch) {
                let x = Var::constant(gather(&data.degraded, &idx)?);
                let (x_reg, f_reg) = restore_batch(rest, &x)?;
                if let Some(s) = syn {
                    let (x_syn, f_syn) = s.synthesize(&x_reg)?;
                    c.x_syn.extend(split(x_syn.value()));
                    c.f_syn.extend(split(f_syn.value()));
                }
                c.x_reg.extend(split(x_reg.value()));
                c.f_reg.extend(split(f_reg.value()));
            }
            Ok(())
        })?;
        Ok(c)
    }

    fn upstream(&self, idx: &[usize]) -> Upstream {
        let g = |v: &[Array<f32>]| Var::constant(gather_arrays(v, idx));
        Upstream {
            x_reg: g(&self.x_reg),
            f_reg: g(&self.f_reg),
            x_syn: g(&self.x_syn),
            f_syn: g(&self.f_syn),
        }
    }
}

/// Writes `config.resolved.json` and appends step logs to `metrics.jsonl`.
struct RunLog {
    file: std::fs::File,
    history: Vec<StepLog>,
}

impl RunLog {
    fn open(cfg: &TrainConfig) -> Result<Self> {
        let dir = &cfg.checkpoint_dir;
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("config.resolved.json"),
            serde_json::to_string_pretty(cfg)? + "\n",
        )?;
        let file = std::fs::File::create(dir.join("metrics.jsonl"))?;
        Ok(Self {
            file,
            history: Vec::new(),
        })
    }

    fn push(&mut self, log: StepLog) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(&log)?)?;
        if log.step == 1 || log.step.is_multiple_of(50) {
            log::info!("{} step {}: {:?}", log.stage.name(), log.step, log.losses);
        }
        self.history.push(log);
        Ok(())
    }
}

fn item(v: &Var<f32>) -> f64 {
    v.item().f64()
}

fn freeze<M: Module<f32> + ?Sized>(m: &mut M) {
    m.set_trainable(false);
}

/// Trains the configured stage and returns its final checkpoint.
pub fn train_stage(cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    match cfg.stage {
        Stage::Restoration => train_restoration(cfg),
        Stage::SynthesisPretrain => train_synthesis_pretrain(cfg),
        Stage::Synthesis => train_synthesis(cfg),
        Stage::Fusion => train_fusion(cfg),
    }
}

struct Saver<'a> {
    cfg: &'a TrainConfig,
    last: Option<Checkpoint>,
}

impl Saver<'_> {
    fn due(&self, step: usize) -> bool {
        let every = self.cfg.train.save_every;
        step == self.cfg.train.steps || (every > 0 && step.is_multiple_of(every))
    }

    fn save(
        &mut self,
        step: usize,
        sampler: &Sampler,
        weights: BTreeMap<String, Array<f32>>,
        optim: &[(&str, &Adam<f32>)],
    ) -> Result<()> {
        let mut state = BTreeMap::new();
        let mut steps = BTreeMap::new();
        for (p, o) in optim {
            optimizer_state(&mut state, &mut steps, p, o);
        }
        let meta = CheckpointMeta {
            stage: self.cfg.stage,
            step,
            config: self.cfg.clone(),
            rng: sampler.state(),
            optimizer_steps: steps,
            synthesis: (self.cfg.stage != Stage::Restoration).then(|| self.cfg.synthesis.meta()),
        };
        self.last = Some(Checkpoint::save(
            &self.cfg.checkpoint_dir,
            meta,
            weights,
            &state,
        )?);
        Ok(())
    }

    fn finish(self, stage: Stage, log: RunLog) -> Result<StageReport> {
        let checkpoint = self
            .last
            .ok_or_else(|| UgpError::Numeric("no checkpoint written".into()))?;
        Ok(StageReport {
            stage,
            checkpoint,
            history: log.history,
            trained: true,
        })
    }
}

fn check_finite(stage: Stage, step: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(UgpError::Numeric(format!(
            "{} loss became {v} at step {step}",
            stage.name()
        )))
    }
}

pub fn train_restoration(cfg: &TrainConfig) -> Result<StageReport> {
    let data = PairedImages::load(&cfg.data.train_manifest, cfg.resolution())?;
    let mut module = build_restoration(cfg)?;
    if module.backbone.kind() == BackboneKind::Direct && !cfg.restoration.skip_pretrained {
        let ck = Checkpoint::require(cfg.restoration.init.as_ref(), Stage::Restoration)?;
        return Ok(StageReport {
            stage: Stage::Restoration,
            checkpoint: ck,
            history: vec![],
            trained: false,
        });
    }
    let t = &cfg.train;
    let mut opt = Adam::new(t.lr, t.betas[0], t.betas[1]);
    let mut sampler = Sampler::new(data.len(), cfg.sub_seed("data.restoration"));
    let mut log = RunLog::open(cfg)?;
    let mut saver = Saver { cfg, last: None };
    for step in 1..=t.steps {
        let idx = sampler.next_batch(t.batch);
        let x = Var::constant(gather(&data.degraded, &idx)?);
        let gt = Var::constant(gather(&data.clean, &idx)?);
        let (y, _) = module.forward(&x)?;
        let loss = l1_var(&y, &gt)?;
        let l = item(&loss);
        check_finite(cfg.stage, step, l)?;
        opt.step(&mut module, &loss.backward());
        log.push(StepLog {
            stage: cfg.stage,
            step,
            updates: vec![Update::Restoration],
            losses: [("l_res".into(), l)].into(),
        })?;
        if saver.due(step) {
            let mut w = BTreeMap::new();
            collect(&mut w, "restoration", &module);
            saver.save(step, &sampler, w, &[("restoration", &opt)])?;
        }
    }
    saver.finish(cfg.stage, log)
}

fn adam_adv(cfg: &TrainConfig) -> Adam<f32> {
    let t = &cfg.train;
    Adam::new(t.lr_adv, t.betas_adv[0], t.betas_adv[1])
}

fn critic_step(
    critic: &mut Critic<f32>,
    opt: &mut Adam<f32>,
    real: &Var<f32>,
    fake: &Var<f32>,
) -> Result<f64> {
    let loss = adv_discriminator_var(&critic.discriminate(real)?, &critic.discriminate(fake)?)?;
    let l = item(&loss);
    opt.step(critic, &loss.backward());
    Ok(l)
}

pub fn train_synthesis_pretrain(cfg: &TrainConfig) -> Result<StageReport> {
    let data = PairedImages::load(&cfg.data.train_manifest, cfg.resolution())?;
    let mut syn = SynthesisModule::<f32>::new(&cfg.synthesis, cfg.sub_seed("synthesis"))?;
    let mut critic = Critic::<f32>::new(&cfg.synthesis, cfg.sub_seed("critic"))?;
    let (mut opt_g, mut opt_d) = (adam_adv(cfg), adam_adv(cfg));
    let mut sampler = Sampler::new(data.len(), cfg.sub_seed("data.synthesis-pretrain"));
    let mut log = RunLog::open(cfg)?;
    let mut saver = Saver { cfg, last: None };
    let b = cfg.train.batch;
    for step in 1..=cfg.train.steps {
        let idx = sampler.next_batch(b);
        let real = Var::constant(gather(&data.clean, &idx)?);
        let z = syn.generator.sample_z(b, sampler.rng());
        let fake = no_grad(|| syn.sample(&z))?.0;
        let d_loss = critic_step(&mut critic, &mut opt_d, &real, &fake)?;

        freeze(&mut critic);
        let z = syn.generator.sample_z(b, sampler.rng());
        let fake = syn.sample(&z)?.0;
        let g_loss = adv_generator_var(&critic.discriminate(&fake)?)?;
        let g = item(&g_loss);
        check_finite(cfg.stage, step, g + d_loss)?;
        opt_g.step(&mut syn.generator, &g_loss.backward());
        critic.set_trainable(true);

        let losses = [("d_adv".to_string(), d_loss), ("g_adv".to_string(), g)].into();
        log.push(StepLog {
            stage: cfg.stage,
            step,
            updates: vec![Update::Critic, Update::Generator],
            losses,
        })?;
        if saver.due(step) {
            let mut w = BTreeMap::new();
            collect(&mut w, "synthesis", &syn);
            collect(&mut w, "critic", &critic);
            saver.save(
                step,
                &sampler,
                w,
                &[("generator", &opt_g), ("critic", &opt_d)],
            )?;
        }
    }
    saver.finish(cfg.stage, log)
}

fn same_synthesis(ck: &Checkpoint, cfg: &TrainConfig) -> Result<()> {
    if ck.meta.config.synthesis != cfg.synthesis {
        return Err(UgpError::Conflict(format!(
            "{} was trained with a different synthesis architecture",
            ck.dir.display()
        )));
    }
    Ok(())
}

pub fn train_synthesis(cfg: &TrainConfig) -> Result<StageReport> {
    let rest_ck = Checkpoint::require(cfg.prerequisites.restoration.as_ref(), Stage::Restoration)?;
    let pre_ck = Checkpoint::require(
        cfg.prerequisites.synthesis_pretrain.as_ref(),
        Stage::SynthesisPretrain,
    )?;
    same_synthesis(&pre_ck, cfg)?;
    let data = PairedImages::load(&cfg.data.train_manifest, cfg.resolution())?;
    let mut rest = restoration_from(&rest_ck)?;
    freeze(&mut rest);
    let mut syn = SynthesisModule::<f32>::new(&cfg.synthesis, cfg.sub_seed("synthesis"))?;
    load_section(&mut syn.generator, &pre_ck.weights, "synthesis.generator")?;
    let mut critic = critic_from(&pre_ck)?;
    let t = &cfg.train;
    let cache = Cache::build(&data, t.batch, &rest, None)?;
    let ext = PerceptualExtractor::<f32>::new(&cfg.losses.extractor)?;
    let (mut opt_g, mut opt_d) = (adam_adv(cfg), adam_adv(cfg));
    let mut sampler = Sampler::new(data.len(), cfg.sub_seed("data.synthesis"));
    let mut log = RunLog::open(cfg)?;
    let mut saver = Saver { cfg, last: None };
    for step in 1..=t.steps {
        let idx = sampler.next_batch(t.batch);
        let x_reg = Var::constant(gather_arrays(&cache.x_reg, &idx));
        let gt = Var::constant(gather(&data.clean, &idx)?);
        let fake = no_grad(|| syn.synthesize(&x_reg))?.0;
        let d_loss = critic_step(&mut critic, &mut opt_d, &gt, &fake)?;

        freeze(&mut critic);
        let out = syn.generate_raw(&syn.encode(&x_reg)?)?;
        let x_syn = out.raw.add_scalar(1.0).scale(0.5);
        let logits = critic.discriminate(&x_syn.clamp(0.0, 1.0))?;
        let parts = loss_syn(&x_syn, &gt, &logits, &cfg.losses.weights, &ext)?;
        let total = item(&parts.total);
        check_finite(cfg.stage, step, total + d_loss)?;
        opt_g.step(&mut syn, &parts.total.backward());
        critic.set_trainable(true);

        let losses = [
            ("l1".to_string(), parts.l1),
            ("per".to_string(), parts.per),
            ("adv".to_string(), parts.adv),
            ("total".to_string(), total),
            ("d_adv".to_string(), d_loss),
        ]
        .into();
        log.push(StepLog {
            stage: cfg.stage,
            step,
            updates: vec![Update::Critic, Update::Generator],
            losses,
        })?;
        if saver.due(step) {
            let mut w = BTreeMap::new();
            collect(&mut w, "restoration", &rest);
            collect(&mut w, "synthesis", &syn);
            collect(&mut w, "critic", &critic);
            saver.save(
                step,
                &sampler,
                w,
                &[("synthesis", &opt_g), ("critic", &opt_d)],
            )?;
        }
    }
    saver.finish(cfg.stage, log)
}

pub fn train_fusion(cfg: &TrainConfig) -> Result<StageReport> {
    let rest_ck = Checkpoint::require(cfg.prerequisites.restoration.as_ref(), Stage::Restoration)?;
    let syn_ck = Checkpoint::require(cfg.prerequisites.synthesis.as_ref(), Stage::Synthesis)?;
    same_synthesis(&syn_ck, cfg)?;
    if section(&syn_ck.weights, "restoration") != section(&rest_ck.weights, "restoration") {
        return Err(UgpError::Conflict(format!(
            "{} was trained on a different restoration checkpoint than {}",
            syn_ck.dir.display(),
            rest_ck.dir.display()
        )));
    }
    let data = PairedImages::load(&cfg.data.train_manifest, cfg.resolution())?;
    let mut rest = restoration_from(&rest_ck)?;
    let mut syn = synthesis_from(&syn_ck)?;
    freeze(&mut rest);
    freeze(&mut syn);
    let t = &cfg.train;
    let cache = Cache::build(&data, t.batch, &rest, Some(&syn))?;
    let ext = PerceptualExtractor::<f32>::new(&cfg.losses.extractor)?;
    let cx = &cfg.losses.contextual;
    let mut head = FusionHead::new(cfg, cfg.synthesis.syn_channels(), rest.feature_channels())?;
    if let (FusionHead::Feature(net), true) = (&mut head, cfg.fusion.warm_start) {
        net.warm_start(rest.output_projection())?;
    }
    let mut opt = Adam::new(t.lr, t.betas[0], t.betas[1]);
    let mut sampler = Sampler::new(data.len(), cfg.sub_seed("data.fusion"));
    let mut log = RunLog::open(cfg)?;
    let mut saver = Saver { cfg, last: None };
    for step in 1..=t.steps {
        let idx = sampler.next_batch(t.batch);
        let up = cache.upstream(&idx);
        let gt = Var::constant(gather(&data.clean, &idx)?);
        let x_hat = head.forward_raw(&up)?;
        let feat_hat = ext.stage(&x_hat, cx.stage)?;
        let feat_syn = no_grad(|| ext.stage(&up.x_syn, cx.stage))?;
        let parts = loss_fusion(
            &x_hat,
            &gt,
            &feat_hat,
            &feat_syn,
            &cfg.losses.weights,
            &ext,
            cx,
        )?;
        let total = item(&parts.total);
        check_finite(cfg.stage, step, total)?;
        opt.step(head.module_mut(), &parts.total.backward());
        let losses = [
            ("l1".to_string(), parts.l1),
            ("per".to_string(), parts.per),
            ("cf".to_string(), parts.cf),
            ("total".to_string(), total),
        ]
        .into();
        log.push(StepLog {
            stage: cfg.stage,
            step,
            updates: vec![Update::Fusion],
            losses,
        })?;
        if saver.due(step) {
            let mut w = BTreeMap::new();
            collect(&mut w, "restoration", &rest);
            collect(&mut w, "synthesis", &syn);
            collect(&mut w, "fusion", head.module());
            saver.save(step, &sampler, w, &[("fusion", &opt)])?;
        }
    }
    saver.finish(cfg.stage, log)
}

/// Mean of the first and last `k` values.
pub fn head_tail_means(v: &[f64], k: usize) -> Option<(f64, f64)> {
    if v.len() < k || k == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&v[..k]), mean(&v[v.len() - k..])))
}

pub fn checkpoint_dir_for(root: &Path, stage: Stage) -> std::path::PathBuf {
    root.join(stage.name())
}
