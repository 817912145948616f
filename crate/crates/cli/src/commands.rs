use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ugp_core::data::{
    build_manifest, list_images, load_image, save_image, split_manifest, tile_grid, ImageTensor,
};
use ugp_core::degrade::{
    generate_kernel_bank_with, save_kernel_bank, upsample_bicubic, DegradationSpec, KernelParams,
};
use ugp_core::losses::{ExtractorConfig, PerceptualExtractor};
use ugp_core::metrics::evaluate as evaluate_sets;
use ugp_core::trainer::{
    head_tail_means, prepare_toy_corpus, run_ablation, train_stage, PairedImages, Pipeline,
    ToyCorpusConfig, TrainConfig,
};

use crate::config::{merge, read_object, required, set_path};

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeArgs {
    /// Directory of clean images.
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    /// Directory receiving the degraded images.
    #[arg(long)]
    degraded_dir: Option<PathBuf>,
    /// Output manifest (JSONL); the spec is written next to it.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Degradation kind: noise, blur or downsample.
    #[arg(long)]
    kind: Option<String>,
    /// Read-noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Photon scale of the shot noise (0 disables it).
    #[arg(long)]
    k: Option<f64>,
    /// Kernel bank written by `ugp kernels`.
    #[arg(long)]
    kernel_bank: Option<PathBuf>,
    /// Integer downsampling factor.
    #[arg(long)]
    factor: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of images held out into a second manifest.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Manifest for the held-out part.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
}

fn degradation_spec(a: &DegradeArgs) -> Result<DegradationSpec> {
    let spec = match required(a.kind.as_deref(), "kind")? {
        "noise" => DegradationSpec::Noise {
            sigma: required(a.sigma, "sigma")?,
            k: required(a.k, "k")?,
        },
        "blur" => DegradationSpec::Blur {
            kernel_bank_path: required(a.kernel_bank.clone(), "kernel_bank")?,
        },
        "downsample" => DegradationSpec::Downsample {
            factor: required(a.factor, "factor")?,
        },
        other => bail!("unknown degradation kind `{other}` (expected noise, blur or downsample)"),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn degrade(flags: DegradeArgs, cfg: Option<&Path>) -> Result<()> {
    let a = merge(&flags, cfg)?;
    let spec = degradation_spec(&a)?;
    let clean_dir = required(a.clean_dir, "clean_dir")?;
    let degraded_dir = required(a.degraded_dir, "degraded_dir")?;
    let manifest = required(a.manifest, "manifest")?;
    let seed = a.seed.unwrap_or(0);
    let all = build_manifest(&clean_dir, &degraded_dir, &spec, seed)?;
    std::fs::create_dir_all(&degraded_dir)?;
    all.materialize()?;
    match a.test_fraction {
        Some(f) => {
            let test_path = required(a.test_manifest, "test_manifest")?;
            let (train, test) = split_manifest(&all, f, seed)?;
            train.save(&manifest)?;
            test.save(&test_path)?;
            println!("{} train and {} test entries", train.len(), test.len());
        }
        None => {
            all.save(&manifest)?;
            println!("{} entries", all.len());
        }
    }
    Ok(())
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsArgs {
    /// Output kernel bank.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    /// Odd kernel side length.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(skip)]
    params: Option<KernelParams>,
}

pub fn kernels(flags: KernelsArgs, cfg: Option<&Path>) -> Result<()> {
    let a = merge(&flags, cfg)?;
    let out = required(a.out, "out")?;
    let (count, size, seed) = (
        a.count.unwrap_or(100),
        a.size.unwrap_or(71),
        a.seed.unwrap_or(0),
    );
    let params = a.params.unwrap_or_default();
    let bank = generate_kernel_bank_with(count, size, seed, &params)?;
    save_kernel_bank(&out, &bank, seed, &params)?;
    println!(
        "{count} kernels of {size}x{size} written to {}",
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// restoration, synthesis-pretrain, synthesis or fusion.
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation preset: a, b or c.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// Root directory for checkpoints and run logs.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Restoration checkpoint directory.
    #[arg(long)]
    restoration: Option<PathBuf>,
    /// Generator-pretraining checkpoint directory.
    #[arg(long)]
    synthesis_pretrain: Option<PathBuf>,
    /// Synthesis checkpoint directory.
    #[arg(long)]
    synthesis: Option<PathBuf>,
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn train_config(a: &TrainArgs, cfg: Option<&Path>) -> Result<TrainConfig> {
    let mut m = read_object(cfg)?;
    let mut put = |keys: &[&str], v: Option<Value>| {
        if let Some(v) = v {
            set_path(&mut m, keys, v);
        }
    };
    put(&["stage"], a.stage.as_ref().map(|s| json!(s)));
    put(&["seed"], a.seed.map(|s| json!(s)));
    put(
        &["preset"],
        a.preset.as_ref().map(|s| json!(s.to_ascii_lowercase())),
    );
    put(&["train", "steps"], a.steps.map(|s| json!(s)));
    put(&["train", "batch"], a.batch.map(|s| json!(s)));
    put(&["train", "lr"], a.lr.map(|s| json!(s)));
    put(
        &["data", "train_manifest"],
        a.train_manifest.as_deref().map(path_value),
    );
    put(
        &["data", "test_manifest"],
        a.test_manifest.as_deref().map(path_value),
    );
    put(
        &["checkpoint_dir"],
        a.checkpoint_dir.as_deref().map(path_value),
    );
    put(
        &["prerequisites", "restoration"],
        a.restoration.as_deref().map(path_value),
    );
    put(
        &["prerequisites", "synthesis_pretrain"],
        a.synthesis_pretrain.as_deref().map(path_value),
    );
    put(
        &["prerequisites", "synthesis"],
        a.synthesis.as_deref().map(path_value),
    );
    let cfg = TrainConfig::from_json(&Value::Object(m).to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs, cfg: Option<&Path>) -> Result<()> {
    let has_stage = a.stage.is_some() || read_object(cfg)?.contains_key("stage");
    ensure!(
        has_stage,
        "missing `stage`: pass --stage or set it in the config file"
    );
    let cfg = train_config(&a, cfg)?;
    info!(
        "training stage {} for {} steps",
        cfg.stage.name(),
        cfg.train.steps
    );
    let report = train_stage(&cfg)?;
    let series = report.series(report.tracked_loss());
    let window = (series.len() / 2).clamp(1, 10);
    let (first, last) = head_tail_means(&series, window)
        .map_or((Value::Null, Value::Null), |(h, t)| (json!(h), json!(t)));
    let summary = json!({
        "stage": cfg.stage.name(),
        "checkpoint": report.checkpoint.dir,
        "trained": report.trained,
        "steps": report.history.len(),
        "tracked_loss": report.tracked_loss(),
        "first_mean": first,
        "last_mean": last,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferArgs {
    /// Fusion-stage checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Degraded image file or directory.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory; receives x_reg/, x_syn/ and x_hat/.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    batch: Option<usize>,
}

fn to_resolution(img: ImageTensor, res: usize) -> Result<ImageTensor> {
    if img.height() == res && img.width() == res {
        return Ok(img);
    }
    ensure!(
        img.height() < res
            && img.width() < res
            && res.is_multiple_of(img.height())
            && res.is_multiple_of(img.width()),
        "image is {}x{}, the checkpoint expects {res}x{res}",
        img.height(),
        img.width()
    );
    Ok(upsample_bicubic(&img, res, res)?)
}

pub fn infer(flags: InferArgs, cfg: Option<&Path>) -> Result<()> {
    let a = merge(&flags, cfg)?;
    let ck = required(a.checkpoint, "checkpoint")?;
    let input = required(a.input, "input")?;
    let out = required(a.out, "out")?;
    let batch = a.batch.unwrap_or(8);
    ensure!(batch > 0, "batch must be at least 1");
    let pipeline = Pipeline::load(&ck)?;
    let res = pipeline.resolution();
    let files: Vec<PathBuf> = if input.is_dir() {
        list_images(&input)?
            .into_iter()
            .map(|n| input.join(n))
            .collect()
    } else {
        vec![input.clone()]
    };
    ensure!(!files.is_empty(), "no images in {}", input.display());
    let images = files
        .iter()
        .map(|f| to_resolution(load_image(f)?, res).with_context(|| f.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let results = pipeline.infer_all(&images, batch)?;
    for (f, r) in files.iter().zip(&results) {
        let name = format!("{}.png", f.file_stem().unwrap().to_string_lossy());
        save_image(&r.x_reg, &out.join("x_reg").join(&name))?;
        save_image(&r.x_syn, &out.join("x_syn").join(&name))?;
        save_image(&r.x_hat, &out.join("x_hat").join(&name))?;
    }
    println!("{} images restored into {}", files.len(), out.display());
    Ok(())
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Directory of predicted images.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Directory of reference images with the same file names.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Optional JSON report file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(skip)]
    extractor: Option<ExtractorConfig>,
}

pub fn evaluate(flags: EvaluateArgs, cfg: Option<&Path>) -> Result<()> {
    let a = merge(&flags, cfg)?;
    let pred_dir = required(a.pred, "pred")?;
    let gt_dir = required(a.gt, "gt")?;
    let names = list_images(&pred_dir)?;
    let gt_names = list_images(&gt_dir)?;
    ensure!(!names.is_empty(), "no images in {}", pred_dir.display());
    ensure!(
        names == gt_names,
        "{} and {} hold different file names",
        pred_dir.display(),
        gt_dir.display()
    );
    let load_all = |dir: &Path| {
        names
            .iter()
            .map(|n| load_image(&dir.join(n)))
            .collect::<ugp_core::Result<Vec<_>>>()
    };
    let (pred, gt) = (load_all(&pred_dir)?, load_all(&gt_dir)?);
    let ext = PerceptualExtractor::<f64>::new(&a.extractor.unwrap_or_default())?;
    let report = evaluate_sets(&pred, &gt, &ext)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        std::fs::write(out, format!("{text}\n")).with_context(|| out.display().to_string())?;
    }
    println!("{text}");
    Ok(())
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridArgs {
    /// Fusion-stage checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Manifest pairing degraded inputs with references.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of samples (rows).
    #[arg(long)]
    count: Option<usize>,
}

pub fn grid(flags: GridArgs, cfg: Option<&Path>) -> Result<()> {
    let a = merge(&flags, cfg)?;
    let pipeline = Pipeline::load(&required(a.checkpoint, "checkpoint")?)?;
    let data = PairedImages::load(&required(a.manifest, "manifest")?, pipeline.resolution())?;
    let out = required(a.out, "out")?;
    let k = a.count.unwrap_or(4).min(data.len());
    ensure!(k > 0, "count must be at least 1");
    let results = pipeline.infer_all(&data.degraded[..k], 8)?;
    let mut cells = Vec::with_capacity(5 * k);
    for (i, r) in results.into_iter().enumerate() {
        cells.extend([
            data.degraded[i].clone(),
            r.x_reg,
            r.x_syn,
            r.x_hat,
            data.clean[i].clone(),
        ]);
    }
    save_image(&tile_grid(&cells, 5)?, &out)?;
    println!("{k}x5 grid written to {}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Root directory for the three runs and the table.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    /// Held-out manifest used for the table.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

pub fn ablate(a: AblateArgs, cfg: Option<&Path>) -> Result<()> {
    let train_args = TrainArgs {
        stage: None,
        seed: a.seed,
        preset: None,
        steps: a.steps,
        batch: a.batch,
        lr: None,
        train_manifest: a.train_manifest,
        test_manifest: a.test_manifest,
        checkpoint_dir: a.out,
        restoration: None,
        synthesis_pretrain: None,
        synthesis: None,
    };
    let base = train_config(&train_args, cfg)?;
    let test_path = base
        .data
        .test_manifest
        .clone()
        .context("missing `test_manifest`: pass --test-manifest")?;
    let test = PairedImages::load(&test_path, base.resolution())?;
    let root = base.checkpoint_dir.clone();
    let table = run_ablation(&base, &root, &test)?;
    let md = table.to_markdown();
    std::fs::write(root.join("ablation.md"), &md)?;
    std::fs::write(
        root.join("ablation.json"),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;
    print!("{md}");
    Ok(())
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of training images.
    #[arg(long)]
    images: Option<usize>,
    /// Number of held-out images.
    #[arg(long)]
    test_images: Option<usize>,
    /// Image side length.
    #[arg(long)]
    size: Option<usize>,
    /// Number of blur kernels.
    #[arg(long)]
    kernels: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(skip)]
    kernel_params: Option<KernelParams>,
}

pub fn toy(flags: ToyArgs, cfg: Option<&Path>) -> Result<()> {
    let a = merge(&flags, cfg)?;
    let out = required(a.out, "out")?;
    let d = ToyCorpusConfig::default();
    let toy_cfg = ToyCorpusConfig {
        images: a.images.unwrap_or(d.images),
        test_images: a.test_images.unwrap_or(d.test_images),
        size: a.size.unwrap_or(d.size),
        kernels: a.kernels.unwrap_or(d.kernels),
        kernel_size: a.kernel_size.unwrap_or(d.kernel_size),
        kernel_params: a.kernel_params.unwrap_or(d.kernel_params),
        seed: a.seed.unwrap_or(d.seed),
    };
    let corpus = prepare_toy_corpus(&out, &toy_cfg)?;
    println!("{}", corpus.train_manifest.display());
    println!("{}", corpus.test_manifest.display());
    Ok(())
}
