use std::fmt;
use std::path::{Path, PathBuf};

use clap::Args;
use maskflow::dit::{DiT, DiTVelocity, HookPlan};
use maskflow::edit::{
    edit as run_edit, ablation_sweep, token_mask_to_pixels, EditModels, MaskMode, MaskSource, Strategy, SweepItem,
};
use maskflow::flow::demo2d::run_demo;
use maskflow::flow::{denoise as run_denoise, invert as run_invert, TimeGrid};
use maskflow::metrics::{psnr, score_report, ssim, ImagePair, ScoreRecord, TAU_EDIT, TAU_PRESERVE};
use maskflow::pasl::{complexity_report, evaluate_iou, train_pasl as fit_pasl, PaslConfig, PaslMode, PaslModel};
use maskflow::pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
use maskflow::synth::{load_split, make_dataset, portrait_seed, read_manifest, render_portrait, Split, REGIONS};
use maskflow::tensor::{read_fstn_as, write_fstn};
use maskflow::{Error, Rng, Tensor, VERSION};
use serde::Serialize;

use crate::config::RunConfig;
use crate::Common;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(Error),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// 2 for usage errors, 4 for numeric or training failures, 3 for bad data.
pub fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Usage(_) => 2,
        Failure::Run(e) if e.is_numeric() => 4,
        Failure::Run(_) => 3,
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a RunConfig,
    result: T,
}

fn write_report<T: Serialize>(dir: Option<&Path>, name: &str, command: &'static str, cfg: &RunConfig, result: T) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = Report {
        command,
        version: VERSION,
        seed: cfg.seed,
        config: cfg,
        result,
    };
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn base_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.out = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.paths.out.clone().ok_or_else(|| usage("--out is required"))
}

fn extension(p: &Path) -> String {
    p.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default()
}

fn read_image(p: &Path) -> Result<Tensor> {
    match extension(p).as_str() {
        "fstn" => Ok(read_fstn_as(p)?),
        "ppm" | "pnm" | "pgm" => Ok(read_ppm(p)?),
        other => Err(usage(format!("unsupported image extension '{other}' (fstn, ppm)"))),
    }
}

fn read_mask(p: &Path) -> Result<Tensor<f64>> {
    match extension(p).as_str() {
        "fstn" => Ok(read_fstn_as(p)?),
        "pgm" | "pnm" | "ppm" => Ok(read_pgm(p)?),
        other => Err(usage(format!("unsupported mask extension '{other}' (fstn, pgm)"))),
    }
}

#[derive(Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    common: Common,
    /// Number of portraits.
    #[arg(long)]
    n: Option<usize>,
    /// Side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Fraction of portraits held out for validation.
    #[arg(long)]
    val_frac: Option<f64>,
}

#[derive(Serialize)]
struct DatasetSummary {
    samples: usize,
    train: usize,
    val: usize,
}

pub fn dataset(a: DatasetArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?.resolve();
    if let Some(v) = a.n {
        cfg.dataset.n = v;
    }
    if let Some(v) = a.size {
        cfg.dataset.size = v;
    }
    if let Some(v) = a.val_frac {
        if !(0.0..1.0).contains(&v) {
            return Err(usage("--val-frac must lie in [0, 1)"));
        }
        cfg.dataset.val_frac = v;
    }
    let out = out_dir(&cfg)?;
    let records = make_dataset(&cfg.dataset, &out)?;
    let val = records.iter().filter(|r| r.split == Split::Val).count();
    let summary = DatasetSummary {
        samples: records.len(),
        train: records.len() - val,
        val,
    };
    println!("{} samples ({} train, {} val) in {}", summary.samples, summary.train, summary.val, out.display());
    write_report(Some(&out), "dataset_report.json", "dataset", &cfg, summary)
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PaslMode>,
    #[arg(long)]
    lr: Option<f64>,
}

fn parse_mode(s: &str) -> std::result::Result<PaslMode, String> {
    match s {
        "toy" => Ok(PaslMode::Toy),
        "paper" => Ok(PaslMode::Paper),
        _ => Err(format!("unknown mode '{s}' (toy | paper)")),
    }
}

fn data_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    flag.clone().or_else(|| cfg.paths.data.clone()).ok_or_else(|| usage("--data is required"))
}

pub fn train_pasl(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(m) = a.mode {
        cfg.pasl_mode = m;
        cfg.pasl = None;
    }
    if let Some(e) = a.epochs {
        if e == 0 {
            return Err(usage("--epochs must be positive"));
        }
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.optim.lr = lr;
    }
    let dir = data_dir(&cfg, &a.data)?;
    cfg.paths.data = Some(dir.clone());
    let cfg = cfg.resolve();
    let out = out_dir(&cfg)?;
    let pasl = cfg.pasl_config();
    let records = read_manifest(&dir)?;
    let train = load_split(&dir, &records, Split::Train, pasl.feature_size())?;
    let (model, report) = fit_pasl(&train, pasl, &cfg.train, &mut Rng::seeded(cfg.stage_seed("pasl/train")))?;
    model.save(&out)?;
    println!(
        "trained {} epochs on {} portraits; final loss {:.4}; checkpoint in {}",
        report.epoch_losses.len(),
        train.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    write_report(Some(&out), "train_report.json", "train-pasl", &cfg, report)
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory written by train-pasl.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

pub fn eval_pasl(a: EvalArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    let dir = data_dir(&cfg, &a.data)?;
    let ckpt = a
        .checkpoint
        .clone()
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| usage("--checkpoint is required"))?;
    cfg.paths.data = Some(dir.clone());
    cfg.paths.checkpoint = Some(ckpt.clone());
    let model = PaslModel::<f32>::load(&ckpt)?;
    cfg.pasl = Some(model.config().clone());
    let records = read_manifest(&dir)?;
    let val = load_split(&dir, &records, Split::Val, model.config().feature_size())?;
    let r = evaluate_iou(&model, &val, a.threshold)?;
    println!("{:<14} {:>8}", "region", "IoU");
    for (k, v) in &r.per_region {
        println!("{k:<14} {v:>8.4}");
    }
    println!(
        "samples {}  mean IoU {:.4}  class mean {:.4}  pooled {:.4}",
        r.samples, r.mean_iou, r.class_mean_iou, r.overall_iou
    );
    write_report(cfg.paths.out.clone().as_deref(), "eval_report.json", "eval-pasl", &cfg, r)
}

#[derive(Args)]
pub struct EditArgs {
    #[command(flatten)]
    common: Common,
    /// Source image (.ppm or .fstn).
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value = "a portrait photo of a person")]
    prompt_src: String,
    #[arg(long)]
    prompt_tgt: String,
    /// Editing mask (.pgm or .fstn); takes precedence over --pasl.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// PASL checkpoint used to predict the mask.
    #[arg(long)]
    pasl: Option<PathBuf>,
    /// Prompt given to PASL; defaults to the target prompt.
    #[arg(long)]
    mask_prompt: Option<String>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long = "N")]
    n: Option<usize>,
    /// Hooked tail blocks.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    binarize: bool,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

pub fn edit(a: EditArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(v) = a.t {
        cfg.edit.t = v;
    }
    if let Some(v) = a.n {
        cfg.edit.n = v;
    }
    if let Some(v) = a.m {
        cfg.edit.m = v;
        cfg.dit.m = v;
    }
    if let Some(s) = a.strategy {
        cfg.edit.strategy = s;
    }
    if a.binarize {
        cfg.edit.mask_mode = MaskMode::Binarized;
    }
    if let Some(p) = &a.image {
        cfg.paths.image = Some(p.clone());
    }
    if let Some(p) = &a.mask {
        cfg.paths.mask = Some(p.clone());
    }
    if let Some(p) = &a.pasl {
        cfg.paths.checkpoint = Some(p.clone());
    }
    cfg.edit.mask_source = if cfg.paths.mask.is_some() {
        MaskSource::File
    } else if cfg.paths.checkpoint.is_some() {
        MaskSource::Pasl
    } else if cfg.edit.strategy == Strategy::None {
        cfg.edit.mask_source
    } else {
        return Err(usage("strategy needs --mask or --pasl"));
    };
    cfg.edit.validate().map_err(|e| usage(e.to_string()))?;
    let cfg = cfg.resolve();
    let out = out_dir(&cfg)?;
    let image_path = cfg.paths.image.clone().ok_or_else(|| usage("--image is required"))?;
    let image = read_image(&image_path)?;
    let dit = DiT::new(cfg.dit)?;
    let pasl = match (&cfg.paths.checkpoint, cfg.edit.mask_source) {
        (Some(p), MaskSource::Pasl) => Some(PaslModel::<f32>::load(p)?),
        _ => None,
    };
    let mask = cfg.paths.mask.as_deref().map(read_mask).transpose()?;
    let models = EditModels {
        dit: &dit,
        pasl: pasl.as_ref(),
        mask,
        mask_prompt: a.mask_prompt.clone(),
    };
    let (outcome, report) = run_edit(&image, &a.prompt_src, &a.prompt_tgt, cfg.edit, models)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_ppm(&out.join("edited.ppm"), &outcome.image)?;
    write_fstn(out.join("edited.fstn"), &outcome.image)?;
    if let Some(m) = outcome_mask(&report, &dit, &image, &a, &cfg, pasl.as_ref())? {
        write_pgm(&out.join("mask.pgm"), &m)?;
    }
    let mm = &report.metrics;
    println!(
        "edited {} with {} (N={}, T={}): PSNR {:.2} dB, SSIM {:.4}, out-of-mask PSNR {}",
        image_path.display(),
        report.normalized.strategy.as_str(),
        cfg.edit.n,
        cfg.edit.t,
        mm.psnr,
        mm.ssim,
        mm.psnr_out_of_mask.map_or("-".to_string(), |v| format!("{v:.2} dB"))
    );
    write_report(Some(&out), "edit_report.json", "edit", &cfg, report)
}

/// The token mask at pixel resolution, recomputed from the same inputs the
/// session used.
fn outcome_mask(
    report: &maskflow::edit::EditReport,
    dit: &DiT,
    image: &Tensor,
    a: &EditArgs,
    cfg: &RunConfig,
    pasl: Option<&PaslModel<f32>>,
) -> Result<Option<Tensor<f64>>> {
    if report.mask.is_none() {
        return Ok(None);
    }
    let mut s = maskflow::edit::EditSession::with_recording(dit, image, &a.prompt_src, &a.prompt_tgt, cfg.edit, 0)?;
    let input = match (cfg.paths.mask.as_deref(), pasl) {
        (Some(p), _) => maskflow::edit::MaskInput::Pixels(read_mask(p)?),
        (None, Some(model)) => maskflow::edit::MaskInput::Pasl {
            model,
            prompt: a.mask_prompt.as_deref().unwrap_or(&a.prompt_tgt),
        },
        (None, None) => return Ok(None),
    };
    let tokens = s.prepare_mask(input)?.clone();
    let c = dit.config();
    Ok(Some(token_mask_to_pixels(&tokens, c.grid(), c.patch)?))
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Number of synthetic portraits.
    #[arg(long, default_value_t = 2)]
    images: usize,
    /// Region to edit.
    #[arg(long, default_value = "hair")]
    region: String,
    #[arg(long, default_value = "a portrait photo of a person")]
    prompt_src: String,
    #[arg(long, default_value = "a portrait photo of a person with dark hair")]
    prompt_tgt: String,
    /// Attribute the edit targets; portraits that already have it are skipped.
    #[arg(long, default_value = "hair_dark")]
    attribute: String,
    #[arg(long = "N")]
    n: Option<usize>,
    /// Comma-separated stage-shift values.
    #[arg(long = "T", value_delimiter = ',')]
    t: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Option<Vec<Strategy>>,
    /// Comma-separated salt-and-pepper rates; 0 disables.
    #[arg(long, value_delimiter = ',')]
    noise: Option<Vec<f64>>,
    #[arg(long)]
    threads: Option<usize>,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(v) = a.n {
        cfg.sweep.n = v;
    }
    if let Some(v) = &a.t {
        cfg.sweep.t_values = v.clone();
    }
    if let Some(v) = &a.strategies {
        cfg.sweep.strategies = v.clone();
    }
    if let Some(v) = &a.noise {
        cfg.sweep.noise_levels = v.iter().copied().filter(|&x| x > 0.0).collect();
    }
    if let Some(v) = a.threads {
        cfg.sweep.threads = v;
    }
    cfg.sweep.m = cfg.dit.m;
    if !REGIONS.contains(&a.region.as_str()) {
        return Err(usage(format!("unknown region '{}'", a.region)));
    }
    if !maskflow::metrics::ATTRIBUTES.contains(&a.attribute.as_str()) {
        return Err(usage(format!("unknown attribute '{}'", a.attribute)));
    }
    if a.images == 0 {
        return Err(usage("--images must be positive"));
    }
    let cfg = cfg.resolve();
    let mut items = Vec::new();
    for i in 0..10_000 {
        if items.len() == a.images {
            break;
        }
        let p = render_portrait(portrait_seed(cfg.dataset.seed, i), cfg.dit.image_size)?;
        if p.attributes[a.attribute.as_str()] {
            continue;
        }
        items.push(SweepItem {
            id: format!("portrait{i}"),
            image: p.image.clone(),
            prompt_src: a.prompt_src.clone(),
            prompt_tgt: a.prompt_tgt.clone(),
            mask: p.regions[a.region.as_str()].clone(),
            regions: Some(p.regions.clone()),
            target_attribute: Some(a.attribute.clone()),
        });
    }
    let dit = DiT::new(cfg.dit)?;
    let report = ablation_sweep(&dit, &items, &cfg.sweep)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &cfg.paths.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join("sweep.txt");
        std::fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
    }
    write_report(cfg.paths.out.as_deref(), "sweep.json", "sweep", &cfg, report)
}

#[derive(Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    common: Common,
    /// JSONL score records.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value_t = TAU_EDIT)]
    tau: f64,
    #[arg(long, default_value_t = TAU_PRESERVE)]
    tau_preserve: f64,
}

#[derive(Serialize)]
struct ImageRow {
    id: String,
    psnr: f64,
    ssim: f64,
    psnr_out_of_mask: Option<f64>,
}

#[derive(Serialize)]
struct MetricsResult {
    scores: maskflow::metrics::ScoreReport,
    images: Vec<ImageRow>,
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    let cfg = base_config(&a.common)?.resolve();
    let text = std::fs::read_to_string(&a.records).map_err(|e| Error::io(&a.records, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ScoreRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: a.records.clone(),
            msg: format!("line {}: {e}", i + 1),
        })?;
        records.push(r);
    }
    let scores = score_report(&records, a.tau, a.tau_preserve)?;
    print!("{}", scores.to_table());
    let base = a.records.parent().unwrap_or(Path::new("."));
    let mut images = Vec::new();
    for r in &records {
        let (Some(s), Some(e)) = (&r.source_path, &r.edited_path) else { continue };
        let (src, ed) = (read_image(&base.join(s))?, read_image(&base.join(e))?);
        let pair = ImagePair::new(&src, &ed)?;
        let out = match &r.mask_path {
            Some(m) => {
                let region = read_mask(&base.join(m))?.map(|v| if v > 0.5 { 0.0 } else { 1.0 });
                (region.sum() > 0.0).then(|| psnr(pair, Some(&region))).transpose()?
            }
            None => None,
        };
        images.push(ImageRow {
            id: r.id.clone(),
            psnr: psnr(pair, None)?,
            ssim: ssim(pair)?,
            psnr_out_of_mask: out,
        });
    }
    if !images.is_empty() {
        println!("{:<16} {:>8} {:>8} {:>9}", "id", "PSNR", "SSIM", "PSNRout");
        for r in &images {
            let o = r.psnr_out_of_mask.map_or("-".to_string(), |v| format!("{v:.3}"));
            println!("{:<16} {:>8.3} {:>8.4} {:>9}", r.id, r.psnr, r.ssim, o);
        }
    }
    write_report(cfg.paths.out.as_deref(), "metrics_report.json", "metrics", &cfg, MetricsResult { scores, images })
}

#[derive(Args)]
pub struct ComplexityArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_mode, default_value = "paper")]
    mode: PaslMode,
}

pub fn complexity(a: ComplexityArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    cfg.pasl_mode = a.mode;
    cfg.pasl = Some(PaslConfig::for_mode(a.mode));
    let cfg = cfg.resolve();
    let r = complexity_report(&cfg.pasl_config());
    print!("{}", r.to_table());
    write_report(cfg.paths.out.as_deref(), "complexity.json", "complexity", &cfg, r)
}

#[derive(Args)]
pub struct Demo2dArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
}

pub fn demo2d(a: Demo2dArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(v) = a.steps {
        cfg.demo2d.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.demo2d.optim.lr = v;
    }
    if let Some(v) = a.hidden {
        cfg.demo2d.hidden = v;
    }
    let cfg = cfg.resolve();
    let r = run_demo(&cfg.demo2d, &mut Rng::seeded(cfg.stage_seed("demo2d")))?;
    println!("{:>6} {:>10}", "step", "loss");
    for (s, l) in &r.curve {
        println!("{s:>6} {l:>10.5}");
    }
    println!(
        "loss ratio {:.4}; straightness {:.5}; mode hits {:.3}; right fraction {:.3}",
        r.loss_ratio, r.straightness, r.mode_hit_rate, r.right_fraction
    );
    write_report(cfg.paths.out.as_deref(), "demo2d.json", "rf-demo2d", &cfg, r)
}

#[derive(Args)]
pub struct InvertArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "a portrait photo of a person")]
    prompt: String,
    #[arg(long = "N")]
    n: Option<usize>,
}

#[derive(Serialize)]
struct FlowSummary {
    prompt: String,
    steps: usize,
    input_norm: f64,
    output_norm: f64,
}

pub fn invert(a: InvertArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(n) = a.n {
        cfg.edit.n = n;
    }
    cfg.paths.image = Some(a.image.clone());
    let cfg = cfg.resolve();
    let out = out_dir(&cfg)?;
    let dit = DiT::new(cfg.dit)?;
    let z0 = dit.patchify(&read_image(&a.image)?)?;
    let p = dit.embed_prompt(&a.prompt)?;
    let grid = TimeGrid::uniform(cfg.edit.n)?;
    let path = run_invert(&z0, &grid, &mut DiTVelocity::new(&dit, &p, HookPlan::None), None)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_fstn(out.join("latent.fstn"), &path.zn)?;
    let s = FlowSummary {
        prompt: a.prompt,
        steps: cfg.edit.n,
        input_norm: z0.norm_l2(),
        output_norm: path.zn.norm_l2(),
    };
    println!("inverted to {} (norm {:.4})", out.join("latent.fstn").display(), s.output_norm);
    write_report(Some(&out), "invert_report.json", "invert", &cfg, s)
}

#[derive(Args)]
pub struct DenoiseArgs {
    #[command(flatten)]
    common: Common,
    /// Latent written by invert.
    #[arg(long)]
    latent: PathBuf,
    #[arg(long, default_value = "a portrait photo of a person")]
    prompt: String,
    #[arg(long = "N")]
    n: Option<usize>,
}

pub fn denoise(a: DenoiseArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(n) = a.n {
        cfg.edit.n = n;
    }
    let cfg = cfg.resolve();
    let out = out_dir(&cfg)?;
    let dit = DiT::new(cfg.dit)?;
    let zn: Tensor = read_fstn_as(&a.latent)?;
    let p = dit.embed_prompt(&a.prompt)?;
    let grid = TimeGrid::uniform(cfg.edit.n)?;
    let z0 = run_denoise(&zn, &grid, &mut DiTVelocity::new(&dit, &p, HookPlan::None), None, None)?;
    let image = dit.unpatchify(&z0)?.map(|v| v.clamp(0.0, 1.0));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_ppm(&out.join("image.ppm"), &image)?;
    write_fstn(out.join("image.fstn"), &image)?;
    let s = FlowSummary {
        prompt: a.prompt,
        steps: cfg.edit.n,
        input_norm: zn.norm_l2(),
        output_norm: z0.norm_l2(),
    };
    println!("denoised to {}", out.join("image.ppm").display());
    write_report(Some(&out), "denoise_report.json", "denoise", &cfg, s)
}
