//! The `ovd` command line.

pub mod draw;
pub mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use ovd_core::curation::io::{curate, load_split, read_records, CurationOptions, LoaderRegistry};
use ovd_core::curation::{SliceSample, SplitManifest};
use ovd_core::encoder::FoundationEncoder;
use ovd_core::geometry::elbow_threshold;
use ovd_core::presence::{Presence, PresenceMatrix};
use ovd_core::synthetic::{SceneConfig, SyntheticCatalog};
use ovd_detector::checkpoint::{self, CheckpointInfo};
use ovd_detector::data::prepare;
use ovd_detector::eval::{evaluate, measure_fps, partition_vocabulary, predict, ClassPartition, EvalOptions};
use ovd_detector::train::{class_pool, read_audit_log, Trainer};
use ovd_detector::{Detector, TrainConfig};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "ovd", version, about = "Open-vocabulary detection for partially annotated medical images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic partially annotated corpus, its presence matrix and a config.
    Synth(SynthArgs),
    /// Slice volumes into 2-D detection records and a volume-level split.
    Curate(CurateArgs),
    /// Presence-matrix tools.
    Matrix {
        #[command(subcommand)]
        action: MatrixCommand,
    },
    /// Train a detector from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on base and novel classes.
    Eval(EvalArgs),
    /// Measure inference throughput.
    Fps(FpsArgs),
    /// Draw elbow-thresholded detections onto images.
    Visualize(VisualizeArgs),
    /// Summarise a per-epoch audit log.
    Audit {
        log: PathBuf,
    },
    /// Print the default configuration.
    Config {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum MatrixCommand {
    /// Check curated records against a matrix. Fails on hard violations.
    Validate {
        #[arg(long)]
        matrix: PathBuf,
        /// Record files (`.jsonl`).
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// Also fail when annotated classes are marked 0.
        #[arg(long)]
        strict: bool,
    },
    /// Matrix with 1 for every annotated (dataset, class) pair and 0 elsewhere.
    Init {
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub datasets: usize,
    #[arg(long, default_value_t = 12)]
    pub volumes: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 160)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub annotated: usize,
    #[arg(long, default_value_t = 1)]
    pub unannotated: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Dataset descriptor files.
    #[arg(long = "descriptor", required = true, num_args = 1..)]
    pub descriptors: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub val_fraction: f64,
    /// Classes kept out of training entirely.
    #[arg(long, value_delimiter = ',')]
    pub holdout: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also keep a checkpoint every N epochs.
    #[arg(long)]
    pub save_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Record file; defaults to `data.val` of the checkpoint's config.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Overrides the encoder and prompt stored with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',')]
    pub base: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub novel: Vec<String>,
    /// Split manifest whose holdout classes become the novel classes.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Structured report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub fps: bool,
}

#[derive(Debug, Args)]
pub struct FpsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 50)]
    pub images: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary; defaults to the classes annotated in the records.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 8)]
    pub limit: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth_cmd(&a),
        Command::Curate(a) => curate_cmd(&a),
        Command::Matrix { action: MatrixCommand::Validate { matrix, records, strict } } => validate_cmd(&matrix, &records, strict),
        Command::Matrix { action: MatrixCommand::Init { records, out } } => init_matrix_cmd(&records, &out),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Fps(a) => fps_cmd(&a),
        Command::Visualize(a) => visualize_cmd(&a),
        Command::Audit { log } => audit_cmd(&log),
        Command::Config { out } => {
            let text = TrainConfig::default().to_toml();
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display())),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let scene = SceneConfig { size: a.size, depth: a.depth, ..Default::default() };
    let opts = synth::SynthOptions { datasets: a.datasets, volumes: a.volumes, scene, annotated: a.annotated, unannotated: a.unannotated, seed: a.seed };
    let out = synth::write_corpus(&a.out, &opts)?;
    out.matrix.save(&a.out.join("matrix.csv"))?;
    let mut cfg = TrainConfig::default();
    cfg.model.input_size = a.size.div_ceil(8) * 8;
    cfg.learning_rate = 2e-3;
    cfg.batch_size = 8;
    cfg.epochs = 20;
    cfg.data.train = Some("curated/train.jsonl".into());
    cfg.data.val = Some("curated/val.jsonl".into());
    cfg.data.matrix = Some("matrix.csv".into());
    cfg.data.manifest = Some("curated/manifest.json".into());
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    println!("wrote {} dataset descriptor(s), matrix.csv and config.toml under {}", out.descriptors.len(), a.out.display());
    let list: Vec<String> = out.descriptors.iter().map(|p| p.display().to_string()).collect();
    println!("next: ovd curate --descriptor {} --out {}", list.join(" "), a.out.join("curated").display());
    Ok(())
}

fn curate_cmd(a: &CurateArgs) -> Result<()> {
    let options = CurationOptions { val_fraction: a.val_fraction, holdout_classes: a.holdout.iter().cloned().collect(), seed: a.seed };
    let summary = curate(&a.descriptors, &a.out, &options, &LoaderRegistry::default())?;
    let m = &summary.manifest;
    println!(
        "train {} samples from {} volumes, val {} samples from {} volumes, {} volume(s) held out",
        summary.train_samples,
        m.train_volume_ids.len(),
        summary.val_samples,
        m.val_volume_ids.len(),
        m.holdout_volume_ids.len()
    );
    Ok(())
}

fn validate_cmd(matrix: &Path, records: &[PathBuf], strict: bool) -> Result<()> {
    let m = PresenceMatrix::load(matrix).with_context(|| format!("reading {}", matrix.display()))?;
    let mut all = Vec::new();
    for r in records {
        all.extend(read_records(r)?);
    }
    let report = m.validate_records(&all);
    for v in &report.violations {
        println!("{}\t{}\t{:?}\t{} annotation(s)", v.dataset, v.class, v.kind, v.annotations);
    }
    let hard = report.hard_violations().count();
    println!("{} record(s), {} violation(s), {} hard", all.len(), report.violations.len(), hard);
    if hard > 0 || (strict && !report.is_clean()) {
        bail!("presence matrix does not match the annotations");
    }
    Ok(())
}

fn init_matrix_cmd(records: &[PathBuf], out: &Path) -> Result<()> {
    let mut all = Vec::new();
    for r in records {
        all.extend(read_records(r)?);
    }
    let datasets: BTreeSet<String> = all.iter().map(|r| r.dataset_id.clone()).collect();
    let classes: BTreeSet<String> = all.iter().flat_map(|r| r.classes.iter().cloned()).collect();
    if datasets.is_empty() || classes.is_empty() {
        bail!("no annotations found");
    }
    let mut m = PresenceMatrix::filled(datasets.into_iter().collect(), classes.into_iter().collect(), Presence::Unannotated)?;
    for r in &all {
        for c in &r.classes {
            m.set(&r.dataset_id, c, Presence::Annotated)?;
        }
    }
    m.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

const LOSS_HEADER: &str = "epoch,total,contrastive,region_text,objectness,iou,dfl,assigned_regions,seconds";

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let train_path = cfg.data.train.clone().context("config has no data.train")?;
    let samples = load_split(&train_path)?;
    if samples.is_empty() {
        bail!("{} holds no samples", train_path.display());
    }
    let matrix = cfg.data.matrix.as_ref().map(|p| PresenceMatrix::load(p).with_context(|| format!("reading {}", p.display()))).transpose()?;
    let mut extra = cfg.data.extra_negatives.clone();
    if let Some(m) = &matrix {
        let report = m.validate_samples(&samples);
        if report.hard_violations().next().is_some() {
            bail!("training annotations contradict the presence matrix; run `ovd matrix validate`");
        }
        extra.extend(m.classes().iter().cloned());
    }
    let pool = class_pool(&samples, &extra);
    let encoder = cfg.encoder.build(Some(&SyntheticCatalog::default()))?;
    let model = Detector::new(&cfg.model, DType::F32, cfg.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    let audit = a.out.join("audit.jsonl");
    if audit.exists() {
        fs::remove_file(&audit)?;
    }
    let mut curve = fs::File::create(a.out.join("loss.csv"))?;
    writeln!(curve, "{LOSS_HEADER}")?;
    log::info!("training on {} samples, {} classes in the pool, {} epochs", samples.len(), pool.len(), cfg.epochs);

    let mut trainer = Trainer::new(model, cfg.clone(), encoder, matrix, pool)?;
    let out = a.out.clone();
    let save_every = a.save_every;
    let cfg_for_ckpt = cfg.clone();
    trainer.fit(&samples, Some(&audit), |s, model| {
        let l = &s.loss;
        log::info!(
            "epoch {:>3}  loss {:.4}  (con {:.4} iou {:.4} dfl {:.4})  injected {} substituted {}  {:.1}s",
            s.epoch, l.total, l.contrastive, l.iou_loss, l.dfl, s.audit.injected, s.audit.substituted, s.seconds
        );
        let io = |e: std::io::Error| ovd_detector::DetectorError::Io(out.join("loss.csv"), e);
        writeln!(
            curve,
            "{},{},{},{},{},{},{},{},{:.3}",
            s.epoch, l.total, l.contrastive, l.region_text, l.objectness, l.iou_loss, l.dfl, l.assigned_regions, s.seconds
        )
        .map_err(io)?;
        checkpoint::save(model, &out.join("last.safetensors"), s.epoch, Some(&cfg_for_ckpt))?;
        if save_every.is_some_and(|k| k > 0 && s.epoch % k == 0) {
            checkpoint::save(model, &out.join(format!("epoch_{:03}.safetensors", s.epoch)), s.epoch, Some(&cfg_for_ckpt))?;
        }
        Ok(())
    })?;
    println!("checkpoint {}", a.out.join("last.safetensors").display());
    Ok(())
}

struct Loaded {
    model: Detector,
    config: TrainConfig,
    encoder: Box<dyn FoundationEncoder>,
    samples: Vec<SliceSample>,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let (model, info): (Detector, CheckpointInfo) = checkpoint::load(&a.checkpoint, None)?;
    let config = match (&a.config, &info.train_config) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(text)) => TrainConfig::from_toml(text)?,
        (None, None) => TrainConfig { model: info.model.clone(), ..Default::default() },
    };
    let records = a.records.clone().or_else(|| config.data.val.clone()).context("no --records and the config has no data.val")?;
    let samples = load_split(&records)?;
    if samples.is_empty() {
        bail!("{} holds no samples", records.display());
    }
    let encoder = config.encoder.build(Some(&SyntheticCatalog::default()))?;
    log::info!("loaded {} (epoch {}), {} samples", a.checkpoint.display(), info.epoch, samples.len());
    Ok(Loaded { model, config, encoder, samples })
}

fn options(cfg: &TrainConfig) -> EvalOptions {
    EvalOptions { nms_iou: cfg.nms_iou, max_detections: cfg.max_detections, prompt: cfg.prompt.clone(), ..Default::default() }
}

fn annotated_classes(samples: &[SliceSample]) -> BTreeSet<String> {
    samples.iter().flat_map(|s| s.classes()).collect()
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    let mut novel = a.novel.clone();
    if let Some(p) = &a.manifest {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let manifest: SplitManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        for c in manifest.holdout_classes {
            if !novel.contains(&c) {
                novel.push(c);
            }
        }
    }
    let base = if a.base.is_empty() {
        annotated_classes(&l.samples).into_iter().filter(|c| !novel.contains(c)).collect()
    } else {
        a.base.clone()
    };
    let partition = ClassPartition { base, novel };
    let opts = options(&l.config);
    let mut report = evaluate(&l.model, &l.samples, &partition, l.encoder.as_ref(), &opts)?;
    if a.fps {
        let vocab = partition_vocabulary(&partition, l.encoder.as_ref(), &opts.prompt)?;
        let warmup = (l.samples.len() / 10).clamp(1, 5).min(l.samples.len().saturating_sub(1));
        report.fps = Some(measure_fps(&l.model, &l.samples, &vocab, warmup, &opts)?);
    }
    print!("{}", report.table());
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
        println!("report {}", out.display());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FpsSummary {
    runs: Vec<f64>,
    mean: f64,
    coefficient_of_variation: f64,
    images: usize,
    warmup: usize,
    hardware: String,
}

/// Mean and coefficient of variation (sample standard deviation over mean).
pub fn mean_and_cv(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / mean)
}

fn fps_cmd(a: &FpsArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    let opts = options(&l.config);
    let classes: Vec<String> = annotated_classes(&l.samples).into_iter().collect();
    let vocab = partition_vocabulary(&ClassPartition { base: classes, novel: vec![] }, l.encoder.as_ref(), &opts.prompt)?;
    let images: Vec<SliceSample> = l.samples.iter().cycle().take(a.images + a.warmup).cloned().collect();
    let mut runs = Vec::new();
    let mut hardware = String::new();
    for i in 0..a.runs.max(1) {
        let r = measure_fps(&l.model, &images, &vocab, a.warmup, &opts)?;
        println!("run {}: {:.1} images/s ({} images in {:.3}s)", i + 1, r.fps, r.images, r.seconds);
        runs.push(r.fps);
        hardware = r.hardware;
    }
    let (mean, cv) = mean_and_cv(&runs);
    println!("mean {mean:.1} images/s, cv {:.1}%, {hardware}", cv * 100.0);
    if let Some(out) = &a.out {
        let s = FpsSummary { runs, mean, coefficient_of_variation: cv, images: a.images, warmup: a.warmup, hardware };
        fs::write(out, serde_json::to_string_pretty(&s)?)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ShownDetection {
    sample_id: String,
    class: String,
    confidence: f64,
    bbox: [f64; 4],
    threshold: f64,
}

fn visualize_cmd(a: &VisualizeArgs) -> Result<()> {
    let l = load_model(&a.model)?;
    let opts = options(&l.config);
    let classes = if a.classes.is_empty() { annotated_classes(&l.samples).into_iter().collect() } else { a.classes.clone() };
    let vocab = partition_vocabulary(&ClassPartition { base: classes.clone(), novel: vec![] }, l.encoder.as_ref(), &opts.prompt)?;
    fs::create_dir_all(&a.out)?;
    let size = l.model.config().input_size;
    let mut shown = Vec::new();
    for sample in l.samples.iter().take(a.limit) {
        let p = prepare(sample, size);
        let dets = predict(&l.model, &[&p], &vocab, &opts)?.pop().unwrap_or_default();
        let (h, w) = (sample.height(), sample.width());
        let raw: Vec<u8> = sample.image.iter().copied().collect();
        let mut img = image::RgbImage::from_raw(w as u32, h as u32, raw).context("sample image is not H x W x 3")?;
        for g in &sample.annotations {
            draw::draw_box(&mut img, &g.bbox, image::Rgb([255, 255, 255]), 1);
        }
        let confidences: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
        if let Ok(threshold) = elbow_threshold(&confidences) {
            let (sx, sy) = (w as f64 / size as f64, h as f64 / size as f64);
            for d in dets.iter().filter(|d| d.confidence >= threshold) {
                let b = d.bbox;
                let bbox = ovd_core::geometry::BBox { x_min: b.x_min * sx, y_min: b.y_min * sy, x_max: b.x_max * sx, y_max: b.y_max * sy };
                let colour = draw::class_colour(d.class_index);
                draw::draw_box(&mut img, &bbox, colour, 2);
                draw::draw_confidence(&mut img, &bbox, d.confidence, colour);
                shown.push(ShownDetection {
                    sample_id: sample.sample_id.clone(),
                    class: vocab.label(d.class_index).unwrap_or("?").to_string(),
                    confidence: d.confidence,
                    bbox: bbox.as_array(),
                    threshold,
                });
            }
        }
        let path = a.out.join(format!("{}.png", sample.sample_id));
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    let mut f = fs::File::create(a.out.join("detections.jsonl"))?;
    for s in &shown {
        writeln!(f, "{}", serde_json::to_string(s)?)?;
    }
    let legend: Vec<String> = classes.iter().enumerate().map(|(i, c)| format!("{c}={:?}", draw::class_colour(i).0)).collect();
    println!("{} image(s), {} detection(s) drawn to {}; colours {}", l.samples.len().min(a.limit), shown.len(), a.out.display(), legend.join(" "));
    Ok(())
}

fn audit_cmd(log: &Path) -> Result<()> {
    let epochs = read_audit_log(log)?;
    println!(
        "{:>5} {:>9} {:>7} {:>9} {:>8} {:>11} {:>8} {:>6} {:>7} {:>10}",
        "epoch", "loss", "unmatch", "injected", "substit", "low_conf", "filtered", "capped", "no_free", "not_class"
    );
    for e in &epochs {
        let a = &e.audit;
        println!(
            "{:>5} {:>9.4} {:>7} {:>9} {:>8} {:>11} {:>8} {:>6} {:>7} {:>10}",
            e.epoch, e.loss.total, a.unmatched, a.injected, a.substituted, a.low_confidence, a.box_filtered, a.cap_reached, a.no_free_negative, a.not_a_class
        );
    }
    Ok(())
}
