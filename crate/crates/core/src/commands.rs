//! The `gfrnet` command-line interface.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::arch::{argmax_labels, upsample_to, Mode, Model};
use crate::autodiff::OpKind;
use crate::checkpoint;
use crate::config::{DatasetSpec, Normalization, RunConfig};
use crate::data::netpbm::{encode_pgm_labels, encode_ppm, encode_ppm_rgb, load_image_ppm, write_bytes};
use crate::data::{self, Palette};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::labels::GroundTruth;
use crate::train::{self, ablation_cells, ablation_csv, loss_csv, Dataset};

#[derive(Parser, Debug)]
#[command(name = "gfrnet", version, about = "Coarse-to-fine refinement networks for dense labeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset as PPM/PGM files with manifests and a palette.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (default: <output_dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoints and a loss curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage-wise evaluation of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label one image; writes a PGM label map and a colorized PPM.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Palette file for colorizing (default: generic colors).
        #[arg(long)]
        palette: Option<PathBuf>,
        /// Run config supplying the normalization (default: ImageNet statistics).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also dump the prediction of every stage.
        #[arg(long)]
        stages: bool,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Scale one op's gradient (negative control), e.g. `relu`.
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Train and evaluate {gfrnet-mul, gfrnet-add, lrn} × {ds, nods} × seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run a single seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = out {
        cfg.output_dir = out.to_path_buf();
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out, seed } => {
            let cfg = load_config(&config, None, seed)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("data"));
            gen_data(&cfg, &dir)
        }
        Command::Train { config, out, seed } => {
            let cfg = load_config(&config, out.as_deref(), seed)?;
            cmd_train(&cfg)
        }
        Command::Eval {
            config,
            checkpoint,
            out,
            seed,
        } => {
            let cfg = load_config(&config, out.as_deref(), seed)?;
            cmd_eval(&cfg, &checkpoint)
        }
        Command::Infer {
            checkpoint,
            image,
            out,
            palette,
            config,
            stages,
        } => {
            let norm = match config {
                Some(c) => RunConfig::load(c)?.normalize,
                None => Normalization::default(),
            };
            cmd_infer(&checkpoint, &image, &out, palette.as_deref(), &norm, stages)
        }
        Command::Gradcheck {
            seed,
            instances,
            tolerance,
            corrupt,
        } => {
            let corrupt = corrupt
                .map(|name| {
                    OpKind::from_name(&name).ok_or_else(|| {
                        let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                        Error::InvalidArgument(format!("unknown op {name:?}; expected one of {}", known.join(", ")))
                    })
                })
                .transpose()?;
            let report = gradcheck::run(seed, instances, tolerance, corrupt)?;
            print!("{}", report.to_text());
            if report.all_passed() {
                Ok(())
            } else {
                let failing: Vec<&str> = report.failing().iter().map(|k| k.name()).collect();
                Err(Error::NumericCheck(format!("gradients of {} disagree with finite differences", failing.join(", "))))
            }
        }
        Command::Ablate { config, out, seed } => {
            let mut cfg = load_config(&config, out.as_deref(), None)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if cfg.seeds.is_empty() {
                return Err(Error::Config("ablate needs a non-empty `seeds` list".into()));
            }
            let data = train::load_dataset(&cfg)?;
            let rows = train::ablate(&cfg, &data, &ablation_cells(), &cfg.seeds)?;
            let path = cfg.output_dir.join("ablation.csv");
            write_bytes(&path, ablation_csv(&rows).as_bytes())?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
    }
}

/// Writes `images/`, `labels/`, `train.txt`, `test.txt` and `palette.txt`
/// under `dir`. Manifest paths are relative to `dir`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    if matches!(cfg.dataset, DatasetSpec::Manifest { .. }) {
        return Err(Error::Config("gen-data needs a synthetic dataset (shapes or ambiguous)".into()));
    }
    let ds = train::load_dataset(cfg)?;
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        let mut manifest = String::new();
        for s in samples.iter() {
            let img = format!("images/{split}_{}.ppm", s.id);
            let lbl = format!("labels/{split}_{}.pgm", s.id);
            write_bytes(dir.join(&img), &encode_ppm(&s.image)?)?;
            write_bytes(dir.join(&lbl), &encode_pgm_labels(&s.gt)?)?;
            writeln!(manifest, "{img} {lbl}").expect("string write");
        }
        write_bytes(dir.join(format!("{split}.txt")), manifest.as_bytes())?;
    }
    write_bytes(dir.join("palette.txt"), ds.palette.to_text().as_bytes())?;
    println!(
        "wrote {} train and {} test samples to {}",
        ds.train.len(),
        ds.test.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = train::load_dataset(cfg)?;
    let dir = &cfg.output_dir;
    write_bytes(dir.join("config.json"), cfg.to_json().as_bytes())?;
    let outcome = train::train(cfg, &data.train, |iter, model| {
        checkpoint::save(model, dir.join("checkpoints").join(format!("iter_{iter:06}.ckpt")))
    })?;
    let stages = cfg.stage_weights.len();
    write_bytes(dir.join("loss.csv"), loss_csv(stages, &outcome.losses).as_bytes())?;
    let path = dir.join("model.ckpt");
    checkpoint::save(&outcome.model, &path)?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!("loss {:.4} -> {:.4} over {} iterations", first.total, last.total, outcome.losses.len());
    }
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    let model: Model<f32> = checkpoint::load(ckpt)?;
    let Dataset { test, palette, .. } = train::load_dataset(cfg)?;
    if model.config.num_classes != palette.len() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, dataset has {}",
            model.config.num_classes,
            palette.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let report = train::evaluate(cfg, &model, &test)?;
    let mut stages = String::from("stage,mean_iou,pixel_acc\n");
    for r in &report {
        writeln!(stages, "{},{},{}", r.stage, r.metrics.mean_iou, r.metrics.pixel_acc).expect("string write");
        println!(
            "{:<8} mean_iou={:.4} pixel_acc={:.4}",
            r.stage, r.metrics.mean_iou, r.metrics.pixel_acc
        );
    }
    let last = report.last().expect("at least one stage");
    let mut classes = String::from("class,name,iou\n");
    for (k, iou) in last.metrics.per_class_iou.iter().enumerate() {
        let v = iou.map_or(String::new(), |v| v.to_string());
        writeln!(classes, "{k},{},{v}", palette.name(k)).expect("string write");
    }
    let dir = &cfg.output_dir;
    write_bytes(dir.join("stages.csv"), stages.as_bytes())?;
    write_bytes(dir.join("per_class.csv"), classes.as_bytes())?;
    Ok(())
}

fn cmd_infer(
    ckpt: &Path,
    image: &Path,
    out: &Path,
    palette: Option<&Path>,
    norm: &Normalization,
    stages: bool,
) -> Result<()> {
    let model: Model<f32> = checkpoint::load(ckpt)?;
    let palette = match palette {
        Some(p) => Palette::load(p)?,
        None => Palette::generic(model.config.num_classes),
    };
    if palette.len() != model.config.num_classes {
        return Err(Error::Config(format!(
            "palette has {} classes, checkpoint predicts {}",
            palette.len(),
            model.config.num_classes
        )));
    }
    let img = load_image_ppm::<f32>(image)?;
    let s = img.shape();
    model.config.check_input(s.h, s.w)?;
    let x = data::normalize(&img, norm.mean, norm.std)?;
    let (session, outputs) = model.forward(&x, Mode::Infer)?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let write_map = |labels: &GroundTruth, name: &str| -> Result<()> {
        write_bytes(out.join(format!("{name}.pgm")), &encode_pgm_labels(labels)?)?;
        write_bytes(
            out.join(format!("{name}_color.ppm")),
            &encode_ppm_rgb(labels.w, labels.h, &palette.colorize(labels)),
        )
    };
    let names = model.config.stage_names();
    for (i, id) in outputs.maps().into_iter().enumerate() {
        let last = i + 1 == names.len();
        if !(stages || last) {
            continue;
        }
        let labels = argmax_labels(&upsample_to(session.graph.value(id), s.h, s.w)?);
        if stages {
            write_map(&labels, &format!("{stem}_stage{}_{}", i + 1, names[i]))?;
        }
        if last {
            write_map(&labels, &stem)?;
        }
    }
    println!("wrote predictions for {} to {}", image.display(), out.display());
    Ok(())
}
