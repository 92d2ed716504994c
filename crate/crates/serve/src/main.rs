use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use galip_core::data::{self, toy, BatchIter, Dataset, DatasetManifest, ManifestRecord};
use galip_core::evaluation::{clipsim_score, feature_stats, frechet_distance, ClipImageFeatures, MetricReport};
use galip_core::trainer::{resume_training, run_training, sample_images, GeneratorCheckpoint};
use galip_core::{TrainConfig, Trainer};
use galip_serve::anchors::DEFAULT_CAPACITY;
use galip_serve::api::{Corner, GridRequest};
use galip_serve::engine::{decode_png, Engine};
use galip_serve::http;
use galip_serve::sheet::{png_bytes, tile};
use tracing::info;

#[derive(Parser)]
#[command(name = "galip", version, about = "Train, sample, evaluate and serve the text-to-image model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Fid,
    Clipsim,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Coco,
    Folder,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file on the `train` split of a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Write `n` images for one prompt as PNG files.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a tiled sheet interpolating between four corner prompts.
    Grid {
        #[arg(long)]
        ckpt: PathBuf,
        /// Top-left, top-right, bottom-left, bottom-right.
        #[arg(long, num_args = 4, value_names = ["TL", "TR", "BL", "BR"])]
        corners: Vec<String>,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw separate noise per cell instead of sharing one.
        #[arg(long)]
        independent_noise: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a manifest split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long, default_value = "val")]
        split: String,
        /// Use at most this many records.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a manifest from a caption annotation file or a captioned folder.
    Convert {
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Image directory relative to the manifest (coco only).
        #[arg(long, default_value = "")]
        image_dir: String,
    },
    /// Write the synthetic shapes dataset with a manifest.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        val: usize,
        #[arg(long, default_value_t = 4)]
        colors: usize,
    },
    /// Serve the HTTP interface.
    Serve {
        /// Without a checkpoint every inference endpoint answers 503.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = DEFAULT_CAPACITY)]
        anchor_capacity: usize,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Train { config, data, out, resume, split } => train(&config, &data, &out, resume.as_deref(), &split),
        Command::Generate { ckpt, prompt, seed, n, out } => generate(&ckpt, &prompt, seed, n, &out),
        Command::Grid { ckpt, corners, rows, cols, seed, independent_noise, out } => {
            grid(&ckpt, corners, rows, cols, seed, !independent_noise, &out)
        }
        Command::Eval { ckpt, data, metric, split, limit, seed, out } => {
            eval(&ckpt, &data, metric, &split, limit, seed, out.as_deref())
        }
        Command::Convert { format, input, out, split, image_dir } => convert(format, &input, &out, &split, &image_dir),
        Command::Toy { out, count, val, colors } => write_toy(&out, count, val, colors),
        Command::Serve { ckpt, port, host, anchor_capacity } => serve(ckpt.as_deref(), &host, port, anchor_capacity),
    }
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>, split: &str) -> Result<()> {
    let cfg = TrainConfig::from_toml(&fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?)?;
    let manifest = data::load_manifest(data)?;
    let dataset = Dataset::from_manifest(&manifest, split, cfg.backbone_config().image_size)?;
    if dataset.is_empty() {
        bail!("split `{split}` of {} is empty", data.display());
    }
    let (mut trainer, mut batches) = match resume {
        Some(ckpt) => {
            let (mut t, b) = resume_training(ckpt, dataset.len())?;
            t.set_max_steps(cfg.max_steps);
            (t, b)
        }
        None => {
            let t = Trainer::from_config(cfg.clone())?;
            let b = BatchIter::new(dataset.len(), cfg.effective_batch_size(), cfg.seed)?;
            (t, b)
        }
    };
    info!(records = dataset.len(), params_g = trainer.generator().parameter_count(), "training");
    let last = run_training(&mut trainer, &dataset, &mut batches, out, |m| {
        if m.step % 50 == 0 {
            info!(
                step = m.step,
                loss_d = m.loss_d,
                loss_g = m.loss_g,
                magp = m.magp,
                similarity = m.similarity,
                "step"
            );
        }
    })?;
    println!("{}", last.display());
    Ok(())
}

fn load_engine(ckpt: &Path) -> Result<Engine> {
    Engine::load(ckpt, DEFAULT_CAPACITY).with_context(|| format!("loading {}", ckpt.display()))
}

fn generate(ckpt: &Path, prompt: &str, seed: u64, n: usize, out: &Path) -> Result<()> {
    let engine = load_engine(ckpt)?;
    let resp = engine.generate(&galip_serve::api::GenerateRequest { prompt: prompt.into(), seed: Some(seed), count: n })?;
    fs::create_dir_all(out)?;
    for (i, (img, sim)) in resp.images.iter().zip(&resp.similarities).enumerate() {
        let path = out.join(format!("{i:03}.png"));
        fs::write(&path, png_bytes(&decode_png(img)?)?)?;
        println!("{}\t{sim:.4}", path.display());
    }
    Ok(())
}

fn grid(ckpt: &Path, corners: Vec<String>, rows: usize, cols: usize, seed: u64, share: bool, out: &Path) -> Result<()> {
    let engine = load_engine(ckpt)?;
    let corners: [Corner; 4] = corners
        .into_iter()
        .map(|prompt| Corner::Prompt { prompt })
        .collect::<Vec<_>>()
        .try_into()
        .map_err(|_| anyhow::anyhow!("exactly four corners are required"))?;
    let resp = engine.grid(&GridRequest { corners, rows, cols, seed: Some(seed), share_noise: share })?;
    let cells = resp.cells.iter().map(|c| decode_png(&c.image)).collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, png_bytes(&tile(&cells, rows, cols, 2))?)?;
    println!("{}", out.display());
    Ok(())
}

fn eval(
    ckpt: &Path,
    data: &Path,
    metric: Metric,
    split: &str,
    limit: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let ck = GeneratorCheckpoint::load(ckpt)?;
    let backbone = ck.load_backbone()?;
    let manifest = data::load_manifest(data)?;
    let mut ds = Dataset::from_manifest(&manifest, split, backbone.config().image_size)?;
    if let Some(n) = limit {
        ds.images.truncate(n);
        ds.captions.truncate(n);
    }
    if ds.len() < 2 {
        bail!("split `{split}` needs at least 2 records, found {}", ds.len());
    }
    let captions: Vec<&str> = ds.captions.iter().map(|c| c[0].as_str()).collect();
    let text = backbone.encode_captions(&captions)?.value().clone();
    let fake = sample_images(&ck.generator, Some(&backbone), &text, seed, 8)?;
    let extractor = ClipImageFeatures::new(&backbone);
    let value = match metric {
        Metric::Fid => {
            let idx: Vec<usize> = (0..ds.len()).collect();
            let real = feature_stats(&ds.stack(&idx), &extractor)?;
            frechet_distance(&real, &feature_stats(&fake, &extractor)?)?
        }
        Metric::Clipsim => clipsim_score(&fake, &text, &backbone)?,
    };
    let name = match metric {
        Metric::Fid => "fid",
        Metric::Clipsim => "clipsim",
    };
    use galip_core::evaluation::FeatureExtractor;
    let report = MetricReport {
        metrics: BTreeMap::from([(name.to_string(), value)]),
        checkpoint_step: ck.step,
        split: split.to_string(),
        extractor: extractor.id(),
    };
    if let Some(path) = out {
        report.write(path)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn convert(format: Format, input: &Path, out: &Path, split: &str, image_dir: &str) -> Result<()> {
    let records = match format {
        Format::Coco => data::convert_coco(input, image_dir, split)?,
        Format::Folder => {
            let mut recs = data::convert_folder(input, split)?;
            // Folder records are relative to the folder; make them relative to the manifest.
            let base = relative_to(input, out.parent().unwrap_or(Path::new("")));
            for r in &mut recs {
                r.image = base.join(&r.image).to_string_lossy().into_owned();
            }
            recs
        }
    };
    DatasetManifest::write(out, &records)?;
    println!("{} records -> {}", records.len(), out.display());
    Ok(())
}

/// `target` expressed relative to `base` when it lies below it, otherwise absolute.
fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (t, b) = (abs(target), abs(if base.as_os_str().is_empty() { Path::new(".") } else { base }));
    t.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(t)
}

fn write_toy(out: &Path, count: usize, val: usize, colors: usize) -> Result<()> {
    if !(1..=toy::COLORS.len()).contains(&colors) {
        bail!("colors must be between 1 and {}", toy::COLORS.len());
    }
    fs::create_dir_all(out.join("images"))?;
    let mut records = Vec::new();
    for (split, n, seed) in [("train", count, 0), ("val", val, 1)] {
        let ds = toy::dataset(toy::ToyConfig { count: n, colors, seed, ..Default::default() });
        for (i, (img, caps)) in ds.images.iter().zip(&ds.captions).enumerate() {
            let name = format!("images/{split}_{i:04}.png");
            fs::write(out.join(&name), png_bytes(&data::to_rgb8(img))?)?;
            records.push(ManifestRecord { image: name, captions: caps.clone(), split: split.into() });
        }
    }
    let manifest = out.join("manifest.jsonl");
    DatasetManifest::write(&manifest, &records)?;
    println!("{}", manifest.display());
    Ok(())
}

fn serve(ckpt: Option<&Path>, host: &str, port: u16, capacity: usize) -> Result<()> {
    let engine = match ckpt {
        Some(p) => {
            let e = Engine::load(p, capacity).with_context(|| format!("loading {}", p.display()))?;
            info!(checkpoint = e.checkpoint_id(), backbone = e.backbone_id(), "loaded");
            Some(Arc::new(e))
        }
        None => None,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        info!(addr = %listener.local_addr()?, "listening");
        http::serve(listener, engine).await
    })?;
    Ok(())
}
