//! `spatialgan` command line.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 usage error, 3 invalid
//! configuration, 4 invalid input data or checkpoint, 5 training aborted on a
//! non-finite loss.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatialgan_core::checkpoint::{load_bundle, load_checkpoint, load_segmentor, save_segmentor, save_trainer};
use spatialgan_core::config::{load_config, RunConfig};
use spatialgan_core::data::{
    generate_shapes_dataset, landmarks_to_segmentation, load_dataset, load_index_map, save_rgb_png, template_by_id,
    write_dataset, Dataset, DatasetSpec, ShapesConfig,
};
use spatialgan_core::evaluation::{accuracy_ceiling, accuracy_floor, evaluate_generator, make_eval_set, AccuracyTable};
use spatialgan_core::interpolation::generate_interpolation;
use spatialgan_core::training::pretrain_segmentor;
use spatialgan_core::{
    AttributeLabel, Error, ImageTensor, LandmarkSet, ModelBundle, SegmentationMap, SegmentorMode, TrainHistory, Trainer,
};
use spatialgan_service::wire::{latent_from_seed, FrameRecord, InterpolationRequestSpec};
use spatialgan_service::{bind_address, serve, Limits, Registry};

mod exit {
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const INPUT: u8 = 4;
    pub const ABORTED: u8 = 5;
}

#[derive(Parser)]
#[command(name = "spatialgan", version, about = "Train, evaluate and serve spatially constrained GANs")]
#[command(after_help = "Exit codes: 0 ok, 1 failure, 2 usage, 3 config, 4 input, 5 training aborted")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, history and snapshots to `out_dir`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` applied over the config file, last wins.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a segmentor alone on real images.
    PretrainSeg {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output file (default: `<out_dir>/segmentor.ckpt`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic shapes dataset and its manifest.
    SynthData {
        #[arg(long)]
        shapes_config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print floor, model and ceiling spatial-consistency accuracy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Segmentor used as the judge (default: the model's own segmentor).
        #[arg(long)]
        judge: Option<PathBuf>,
        /// Region template for landmark segmentations in the manifest.
        #[arg(long)]
        template: Option<String>,
        /// Generated samples to score (default: dataset size).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render one image.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// Index PNG, or a landmark file (`.txt`/`.pts`) used with `--template`.
        #[arg(long)]
        seg: PathBuf,
        #[arg(long, default_value = "face68")]
        template: String,
        /// Attribute bits, e.g. `1,0,1` or `101`.
        #[arg(long)]
        attrs: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an interpolation sequence described by a JSON spec.
    Interpolate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve every `*.ckpt` in a directory over HTTP.
    Serve {
        #[arg(long)]
        registry: PathBuf,
        /// Bind address (default: $SPATIALGAN_BIND, else 127.0.0.1:8080).
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        max_body_bytes: Option<usize>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => exit::CONFIG,
            Error::NonFiniteLoss { .. } => exit::ABORTED,
            Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => exit::FAILURE,
            _ => exit::INPUT,
        };
        let message = match &e {
            Error::NonFiniteLoss { iteration, .. } => format!("training aborted at iteration {iteration}: {e}"),
            _ => e.to_string(),
        };
        Self { code, message }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let name = subcommand_name(&cli.command);
    let result = match cli.command {
        Command::Train { config, overrides, resume } => train(&config, &overrides, resume.as_deref()),
        Command::PretrainSeg { config, overrides, out } => pretrain(&config, &overrides, out),
        Command::SynthData { shapes_config, overrides, out } => synth(shapes_config.as_deref(), &overrides, &out),
        Command::Eval { model, dataset, judge, template, samples, seed } => {
            eval(&model, &dataset, judge.as_deref(), template, samples, seed)
        }
        Command::Generate { model, seg, template, attrs, seed, out } => generate(&model, &seg, &template, &attrs, seed, &out),
        Command::Interpolate { model, spec, out } => interpolate(&model, &spec, &out),
        Command::Serve { registry, bind, max_body_bytes } => serve_cmd(&registry, bind.as_deref(), max_body_bytes),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if f.code == exit::CONFIG {
                if let Some(sub) = Cli::command().find_subcommand_mut(name) {
                    eprintln!("\n{}", sub.render_usage());
                }
            }
            ExitCode::from(f.code)
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Train { .. } => "train",
        Command::PretrainSeg { .. } => "pretrain-seg",
        Command::SynthData { .. } => "synth-data",
        Command::Eval { .. } => "eval",
        Command::Generate { .. } => "generate",
        Command::Interpolate { .. } => "interpolate",
        Command::Serve { .. } => "serve",
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Loads and validates a run config. Paths inside it are relative to the
/// working directory.
fn run_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Error> {
    let cfg: RunConfig = load_config(path, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_for(cfg: &RunConfig) -> Result<Dataset, Error> {
    match &cfg.manifest {
        Some(manifest) => load_dataset(&DatasetSpec {
            root: None,
            manifest: manifest.clone(),
            image_size: cfg.image_size,
            n_s: cfg.n_s,
            n_c: cfg.n_c,
            attribute_names: cfg.attribute_names.clone(),
            template: cfg.template.clone(),
        }),
        None => generate_shapes_dataset(&cfg.shapes()),
    }
}

/// Images side by side.
fn tile(images: &[ImageTensor]) -> Result<ImageTensor, Error> {
    let h = images[0].height();
    let w = images[0].width();
    let total = w * images.len();
    let mut data = vec![0.0f32; h * total * 3];
    for (k, img) in images.iter().enumerate() {
        for r in 0..h {
            let src = &img.data()[r * w * 3..(r + 1) * w * 3];
            let dst = (r * total + k * w) * 3;
            data[dst..dst + w * 3].copy_from_slice(src);
        }
    }
    ImageTensor::new(h, total, data)
}

/// Restores a trainer; the run config may only change `epochs` and
/// `max_iterations`. Earlier history records are carried over.
fn resume_trainer(cfg: &RunConfig, path: &Path, ds: &Dataset) -> Result<Trainer, Error> {
    let mut t = load_checkpoint(path)?.into_trainer(ds)?;
    let mut wanted = cfg.train_config();
    wanted.epochs = t.config.epochs;
    wanted.max_iterations = t.config.max_iterations;
    if wanted != t.config {
        return Err(Error::Config(format!(
            "configuration differs from the one stored in {} beyond epochs/max_iterations",
            path.display()
        )));
    }
    t.config.epochs = cfg.epochs;
    t.config.max_iterations = cfg.max_iterations;
    let old = cfg.out_dir.join("history.jsonl");
    if let Ok(text) = fs::read_to_string(&old) {
        let mut h = TrainHistory::from_jsonl(&text)?;
        h.records.retain(|r| r.iteration <= t.iteration);
        t.history.records = h.records;
    }
    Ok(t)
}

fn write_history(t: &Trainer, out: &Path) -> Result<(), Error> {
    write(&out.join("history.csv"), t.history.to_csv())?;
    write(&out.join("history.jsonl"), t.history.to_jsonl())
}

fn train(config: &Path, overrides: &[String], resume: Option<&Path>) -> Outcome {
    let cfg = run_config(config, overrides)?;
    let ds = dataset_for(&cfg)?;
    let out = cfg.out_dir.clone();
    create_dir(&out.join("snapshots"))?;
    write(&out.join("config.toml"), toml::to_string(&cfg).map_err(|e| fail(exit::FAILURE, e.to_string()))?)?;
    let mut trainer = match resume {
        Some(path) => resume_trainer(&cfg, path, &ds)?,
        None => {
            let tc = cfg.train_config();
            let mut init = ChaCha8Rng::seed_from_u64(tc.seed);
            let mut bundle = ModelBundle::new(&tc.arch, &mut init)?;
            if cfg.segmentor_mode == SegmentorMode::PretrainedFrozen {
                let path = cfg.pretrained_segmentor.as_ref().expect("validated");
                let s = load_segmentor(path)?;
                if s.config.image_size != tc.arch.image_size || s.config.n_s != tc.arch.n_s {
                    return Err(fail(
                        exit::CONFIG,
                        format!("{} does not match image_size {} / n_s {}", path.display(), tc.arch.image_size, tc.arch.n_s),
                    ));
                }
                bundle.segmentor = s;
            }
            Trainer::with_bundle(tc, &ds, bundle)?
        }
    };
    let per_epoch = trainer.iterations_per_epoch();
    let every = if cfg.checkpoint_every == 0 { per_epoch } else { cfg.checkpoint_every };
    let planned = trainer.planned_iterations();
    let ckpt = out.join("checkpoint.ckpt");
    let mut written = trainer.history.snapshots.len();
    eprintln!("training {} samples, {planned} outer iterations ({per_epoch} per epoch)", ds.len());
    trainer.run(&ds, |t| {
        if t.iteration % per_epoch == 0 {
            let r = t.history.records.last().expect("record per iteration");
            eprintln!(
                "epoch {} iteration {}/{planned} total_g {:.4} total_d {:.4} {:.0}s",
                t.epoch(),
                t.iteration,
                t.history.mean_total_g(t.epoch() - 1).unwrap_or(r.report.total_g),
                r.report.total_d,
                r.elapsed_secs
            );
        }
        while written < t.history.snapshots.len() {
            let (epoch, images) = &t.history.snapshots[written];
            if !images.is_empty() {
                save_rgb_png(&tile(images)?, &out.join("snapshots").join(format!("epoch_{epoch:03}.png")))?;
            }
            written += 1;
        }
        if t.iteration % every == 0 {
            save_trainer(t, &ckpt)?;
            write_history(t, &out)?;
        }
        Ok(())
    })?;
    save_trainer(&trainer, &out.join("model.ckpt"))?;
    write_history(&trainer, &out)?;
    println!("{}", out.join("model.ckpt").display());
    Ok(())
}

fn pretrain(config: &Path, overrides: &[String], out: Option<PathBuf>) -> Outcome {
    let cfg = run_config(config, overrides)?;
    let ds = dataset_for(&cfg)?;
    let (s, losses) = pretrain_segmentor(&cfg.train_config(), &ds)?;
    let path = out.unwrap_or_else(|| cfg.out_dir.join("segmentor.ckpt"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_segmentor(&s, &path)?;
    let tail = &losses[losses.len().saturating_sub(20)..];
    eprintln!(
        "{} steps, final loss {:.4}",
        losses.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    );
    println!("{}", path.display());
    Ok(())
}

fn synth(shapes_config: Option<&Path>, overrides: &[String], out: &Path) -> Outcome {
    let cfg: ShapesConfig = match shapes_config {
        Some(path) => load_config(path, overrides)?,
        None => spatialgan_core::config::parse_config("", overrides)?,
    };
    cfg.validate()?;
    let ds = generate_shapes_dataset(&cfg)?;
    let manifest = write_dataset(&ds, out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn eval(model: &Path, dataset: &Path, judge: Option<&Path>, template: Option<String>, samples: Option<usize>, seed: u64) -> Outcome {
    let bundle = load_bundle(model)?;
    let arch = bundle.arch().clone();
    let ds = load_dataset(&DatasetSpec {
        root: None,
        manifest: dataset.to_path_buf(),
        image_size: arch.image_size,
        n_s: arch.n_s,
        n_c: arch.n_c,
        attribute_names: Vec::new(),
        template,
    })?;
    let judge = judge.map(load_segmentor).transpose()?;
    let j = judge.as_ref().unwrap_or(&bundle.segmentor);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = accuracy_floor(j, &ds, &mut rng)?;
    let ceiling = accuracy_ceiling(j, &ds)?;
    let set = make_eval_set(&ds, samples.unwrap_or(ds.len()), arch.n_z, &mut rng)?;
    let model_acc = evaluate_generator(&bundle, Some(j), &set)?;
    print!("{}", AccuracyTable { floor, model: model_acc, ceiling }.render());
    Ok(())
}

fn parse_attrs(text: &str) -> Result<AttributeLabel, Error> {
    if !text.contains(',') && text.len() > 1 {
        let spaced: Vec<String> = text.chars().map(String::from).collect();
        return AttributeLabel::parse(&spaced.join(","));
    }
    AttributeLabel::parse(text)
}

fn read_segmentation(path: &Path, template: &str, size: usize, n_s: usize) -> Result<SegmentationMap, Error> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt" | "pts") => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let t = template_by_id(template)?;
            if t.n_s != n_s {
                return Err(Error::Config(format!("template '{}' has {} classes, model has {n_s}", t.id, t.n_s)));
            }
            landmarks_to_segmentation(&LandmarkSet::parse(&text)?, size, size, &t)
        }
        _ => load_index_map(path, size, n_s),
    }
}

fn generate(model: &Path, seg: &Path, template: &str, attrs: &str, seed: u64, out: &Path) -> Outcome {
    let bundle = load_bundle(model)?;
    let arch = bundle.arch();
    let s = read_segmentation(seg, template, arch.image_size, arch.n_s)?;
    let c = parse_attrs(attrs)?;
    if c.len() != arch.n_c {
        return Err(fail(exit::INPUT, format!("model expects {} attribute bits, got {}", arch.n_c, c.len())));
    }
    let z = latent_from_seed(seed, arch.n_z);
    let image = bundle.generator.generate(&[z], &[c], &[s])?.remove(0);
    save_rgb_png(&image, out)?;
    Ok(())
}

fn interpolate(model: &Path, spec: &Path, out: &Path) -> Outcome {
    let bundle = load_bundle(model)?;
    let text = fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    let wire: InterpolationRequestSpec =
        serde_json::from_str(&text).map_err(|e| fail(exit::INPUT, format!("{}: {e}", spec.display())))?;
    let resolved = wire.resolve(bundle.arch()).map_err(|errs| {
        let lines: Vec<String> = errs.iter().map(|e| format!("  {}: {}", e.field, e.message)).collect();
        fail(exit::INPUT, format!("invalid interpolation spec:\n{}", lines.join("\n")))
    })?;
    let frames = generate_interpolation(&bundle, &resolved)?;
    create_dir(out)?;
    let digest = resolved.digest();
    let mut manifest = String::new();
    for f in &frames {
        let name = format!("frame_{:04}.png", f.index);
        save_rgb_png(&f.image, &out.join(&name))?;
        let record = FrameRecord::from_frame(f);
        let mut line = serde_json::json!({"index": record.index, "t": record.t, "spec_digest": digest, "path": name});
        if let Some(t2) = record.t2 {
            line["t2"] = t2.into();
        }
        manifest.push_str(&line.to_string());
        manifest.push('\n');
    }
    write(&out.join("manifest.jsonl"), manifest)?;
    println!("{} frames in {}", frames.len(), out.display());
    Ok(())
}

fn serve_cmd(registry: &Path, bind: Option<&str>, max_body_bytes: Option<usize>) -> Outcome {
    let reg = Registry::load_dir(registry)?;
    if reg.is_empty() {
        return Err(fail(exit::INPUT, format!("no model checkpoints in {}", registry.display())));
    }
    let mut limits = Limits::default();
    if let Some(n) = max_body_bytes {
        limits.max_body_bytes = n;
    }
    let addr = bind_address(bind);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| fail(exit::FAILURE, e.to_string()))?;
    rt.block_on(serve(Arc::new(reg), &addr, limits)).map_err(|e| fail(exit::FAILURE, format!("{addr}: {e}")))
}
