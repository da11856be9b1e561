mod config;
mod dataset;

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use obbseg::boxdet::Detection;
use obbseg::dataio::{
    synth_corpus, write_annotations, write_detections, write_pgm, write_ppm, AngleMode, Manifest, ScaleMeta, Scene,
};
use obbseg::eval::{evaluate, ApMode, EvalConfig};
use obbseg::micronet::{checkpoint, Network};
use obbseg::raster::LabelMap;
use obbseg::targets::{encode_targets, pyramid};
use obbseg::trainer::{detect, draw_detections, Trainer};

use config::{FileConfig, Preset};
use dataset::{Dataset, DirLock, IMAGES, LABELS, MANIFEST};

/// Oriented object detection by multi-scale pixel classification.
#[derive(Parser)]
#[command(name = "obbseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of shapes with oriented boxes.
    GenData(GenData),
    /// Write per-scale training label maps for a dataset.
    Encode(Encode),
    /// Train a network on a dataset.
    Train(Train),
    /// Run a trained network over a dataset's images.
    Detect(Detect),
    /// Score detections against a dataset's annotations.
    Eval(Eval),
    /// Draw annotations and detections onto copies of the images.
    Render(Render),
}

#[derive(Args)]
struct GenData {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Keep every object axis-aligned.
    #[arg(long)]
    axis_aligned: bool,
    /// TOML config file; its `[synth]` section sets generator options.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Encode {
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving `<stem>.s<scale>.pgm` label maps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Seed for weight initialization.
    #[arg(long)]
    net_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Rotated copies per sample (0 disables the rotation term).
    #[arg(long)]
    rotations: Option<usize>,
    /// Seed for shuffling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Disable random flips.
    #[arg(long)]
    no_flips: bool,
    /// Also supervise rotated copies with the objectness and class terms.
    #[arg(long)]
    rotated_supervision: bool,
    /// Continue from the state saved in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct Detect {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file or run directory containing `net.ckpt`.
    #[arg(long)]
    model: PathBuf,
    /// Directory receiving one detection file per image.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// IoU threshold for the finest scale (cells of 2 px).
    #[arg(long)]
    theta1: Option<f64>,
    #[arg(long)]
    theta2: Option<f64>,
    #[arg(long)]
    theta3: Option<f64>,
    #[arg(long)]
    theta4: Option<f64>,
    /// IoU threshold for the coarsest scale (cells of 32 px).
    #[arg(long)]
    theta5: Option<f64>,
    /// Merge duplicates across scales after per-scale suppression.
    #[arg(long, conflicts_with = "per_scale_only")]
    cross_scale_nms: bool,
    /// Per-scale suppression only.
    #[arg(long = "strict-paper-nms")]
    per_scale_only: bool,
    /// IoU threshold of the cross-scale merge.
    #[arg(long)]
    theta_global: Option<f64>,
    /// Overlap between neighbouring tiles in pixels.
    #[arg(long)]
    overlap: Option<usize>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// IoU needed for a true positive.
    #[arg(long)]
    iou: Option<f64>,
    /// Use 11-point interpolated AP.
    #[arg(long)]
    eleven_point: bool,
    /// Also write `key = value` results to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    data: PathBuf,
    /// Detection directory; without it only annotations are drawn.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

const GROUND_TRUTH_COLOR: [u8; 3] = [40, 230, 40];
const DETECTION_COLOR: [u8; 3] = [250, 30, 200];

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Encode(a) => encode(a),
        Command::Train(a) => train(a),
        Command::Detect(a) => run_detect(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn class_names(n: usize) -> Vec<String> {
    const SHAPES: [&str; 3] = ["rect", "ellipse", "triangle"];
    (0..n)
        .map(|i| match i / 3 {
            0 => SHAPES[i % 3].to_string(),
            k => format!("{}{}", SHAPES[i % 3], k + 1),
        })
        .collect()
}

fn stem(i: usize) -> String {
    format!("{i:05}")
}

fn gen_data(a: GenData) -> Result<()> {
    let mut synth = FileConfig::load(a.config.as_deref())?.synth;
    if let Some(s) = a.image_size {
        synth.image_size = s;
    }
    if let Some(c) = a.classes {
        synth.classes = c;
    }
    if a.axis_aligned {
        synth.angles = AngleMode::AxisAligned;
    }
    let _lock = DirLock::acquire(&a.out)?;
    let scenes = synth_corpus(&synth, a.seed, a.count)?;
    let manifest = Manifest {
        classes: class_names(synth.classes),
        tile_size: synth.image_size,
        overlap: 16.min(synth.image_size / 2),
    };
    let classes = manifest.class_list()?;
    fs::create_dir_all(a.out.join(IMAGES))?;
    fs::create_dir_all(a.out.join(LABELS))?;
    dataset::write(&a.out.join(MANIFEST), manifest.to_text())?;
    let mut objects = 0;
    for (i, s) in scenes.iter().enumerate() {
        dataset::write(&a.out.join(IMAGES).join(format!("{}.ppm", stem(i))), write_ppm(&s.image))?;
        dataset::write(
            &a.out.join(LABELS).join(format!("{}.txt", stem(i))),
            write_annotations(&s.annotations, &classes),
        )?;
        objects += s.annotations.len();
    }
    println!(
        "wrote {} scenes ({objects} objects, {}x{} px) to {}",
        scenes.len(),
        synth.image_size,
        synth.image_size,
        a.out.display()
    );
    Ok(())
}

fn encode(a: Encode) -> Result<()> {
    let data = Dataset::open(&a.data)?;
    let _lock = DirLock::acquire(&a.out)?;
    for s in &data.stems {
        let img = data.image(s)?;
        let scales = pyramid(img.width, img.height, 5)?;
        let targets = encode_targets(&data.annotations(s)?, &scales)?;
        for t in &targets.scales {
            let lm = LabelMap {
                width: t.spec.grid_w,
                height: t.spec.grid_h,
                labels: t.classes.clone(),
            };
            let meta = ScaleMeta {
                index: t.spec.index,
                cell: t.spec.cell_size,
            };
            let path = a.out.join(format!("{s}.s{}.pgm", t.spec.index));
            dataset::write(&path, write_pgm(&lm, Some(meta))?)?;
        }
    }
    println!("encoded {} images into {}", data.stems.len(), a.out.display());
    Ok(())
}

fn load_scenes(data: &Dataset) -> Result<Vec<Scene>> {
    data.stems
        .iter()
        .map(|s| {
            Ok(Scene {
                image: data.image(s)?,
                annotations: data.annotations(s)?,
                seed: 0,
            })
        })
        .collect()
}

fn train(a: Train) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut cfg = file.train;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.rotations {
        cfg.rotations = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if a.no_flips {
        cfg.flips = false;
    }
    if a.rotated_supervision {
        cfg.rotated_supervision = true;
    }
    let preset = a.preset.unwrap_or(file.network.preset);
    let net_seed = a.net_seed.unwrap_or(file.network.seed);

    let data = Dataset::open(&a.data)?;
    let scenes = load_scenes(&data)?;
    let _lock = DirLock::acquire(&a.out)?;
    let mut trainer = if a.resume {
        Trainer::resume(&a.out, cfg).context("resuming from the run directory")?
    } else {
        let net = Network::build(&preset.network(data.classes.len()), net_seed)?;
        Trainer::new(net, cfg)?
    };

    let log_path = a.out.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.resume)
        .write(true)
        .truncate(!a.resume)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let per_epoch = trainer.iterations_per_epoch(scenes.len());
    let (mut sum, mut n, mut io_err) = (0.0, 0usize, None);
    let mut epoch = trainer.iteration / per_epoch;
    let history = trainer.train(&scenes, Some(&a.out), |line| {
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
        sum += line.rsplit(' ').next().and_then(|t| t.parse::<f64>().ok()).unwrap_or(f64::NAN);
        n += 1;
        let it: usize = line.split(' ').next().and_then(|t| t.parse().ok()).unwrap_or(0);
        if (it + 1).is_multiple_of(per_epoch) {
            epoch += 1;
            println!("epoch {epoch}: mean loss {:.4} over {n} iterations", sum / n as f64);
            sum = 0.0;
            n = 0;
        }
    })?;
    if let Some(e) = io_err {
        return Err(anyhow::Error::new(e).context(format!("writing {}", log_path.display())));
    }
    println!(
        "trained {} iterations ({} this run); checkpoint in {}",
        trainer.iteration,
        history.len(),
        a.out.display()
    );
    Ok(())
}

fn run_detect(a: Detect) -> Result<()> {
    let mut section = FileConfig::load(a.config.as_deref())?.detect;
    for (slot, v) in [a.theta1, a.theta2, a.theta3, a.theta4, a.theta5].into_iter().enumerate() {
        if let Some(v) = v {
            section.thetas[slot] = v;
        }
    }
    if a.cross_scale_nms {
        section.cross_scale = true;
    }
    if a.per_scale_only {
        section.cross_scale = false;
    }
    if let Some(v) = a.theta_global {
        section.theta_global = v;
    }
    if a.overlap.is_some() {
        section.overlap = a.overlap;
    }

    let model = if a.model.is_dir() { a.model.join("net.ckpt") } else { a.model.clone() };
    let net = checkpoint::load(&model).with_context(|| format!("loading {}", model.display()))?;
    let data = Dataset::open(&a.data)?;
    let cfg = section.to_config(data.manifest.overlap);
    cfg.nms.validate()?;
    if net.classes() != data.classes.len() {
        bail!(
            "model has {} classes but the dataset declares {}",
            net.classes(),
            data.classes.len()
        );
    }
    let _lock = DirLock::acquire(&a.out)?;
    let mut total = 0;
    for s in &data.stems {
        let dets = detect(&net, &data.image(s)?, &cfg)?;
        total += dets.len();
        dataset::write(&a.out.join(format!("{s}.txt")), write_detections(&dets, &data.classes))?;
    }
    println!("{total} detections in {} images written to {}", data.stems.len(), a.out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let section = FileConfig::load(a.config.as_deref())?.eval;
    let cfg = EvalConfig {
        iou_thresh: a.iou.unwrap_or(section.iou),
        mode: if a.eleven_point { ApMode::ElevenPoint } else { section.mode },
    };
    let data = Dataset::open(&a.data)?;
    let images = data
        .stems
        .iter()
        .map(|s| Ok((data.detections(&a.detections, s)?, data.annotations(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&images, &data.classes.ids(), &cfg)?;
    let name = |id| data.classes.label(id);
    print!("{}", report.table(name));
    if let Some(path) = &a.report {
        dataset::write(path, report.key_values(name))?;
    }
    Ok(())
}

fn render(a: Render) -> Result<()> {
    let data = Dataset::open(&a.data)?;
    let _lock = DirLock::acquire(&a.out)?;
    for s in &data.stems {
        let mut img = data.image(s)?;
        for ann in data.annotations(s)? {
            let outline = Detection::new(ann.obb, ann.class_id, 1.0, 1);
            draw_detections(&mut img, &[outline], GROUND_TRUTH_COLOR);
        }
        if let Some(dir) = &a.detections {
            draw_detections(&mut img, &data.detections(dir, s)?, DETECTION_COLOR);
        }
        dataset::write(&a.out.join(format!("{s}.ppm")), write_ppm(&img))?;
    }
    println!("rendered {} images into {}", data.stems.len(), a.out.display());
    Ok(())
}
