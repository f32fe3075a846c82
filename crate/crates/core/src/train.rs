//! Training loop, dataset assembly and the variant/supervision ablation.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::arch::{Mode, Model, Variant};
use crate::autodiff::GateMode;
use crate::config::{DatasetSpec, RunConfig};
use crate::data::{self, synth, Palette, Sample};
use crate::error::{Error, Result};
use crate::eval::{stage_report, StageRow};
use crate::optim::Sgd;
use crate::rng::Prng;
use crate::supervision::{class_weights, final_stage_only, stage_losses};
use crate::tensor::Tensor;

pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub palette: Palette,
}

/// Materializes the configured dataset. Synthetic splits come from separate
/// streams of the dataset seed, so train and test never share samples.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let split = |seed: Option<u64>, name: &str| Prng::stream(seed.unwrap_or(cfg.seed), name);
    let ds = match &cfg.dataset {
        DatasetSpec::Shapes {
            n_train,
            n_test,
            size,
            seed,
        } => Dataset {
            train: synth::gen_shapes(&mut split(*seed, "train"), *n_train, *size, cfg.num_classes)?,
            test: synth::gen_shapes(&mut split(*seed, "test"), *n_test, *size, cfg.num_classes)?,
            palette: synth::shapes_palette(cfg.num_classes)?,
        },
        DatasetSpec::Ambiguous {
            n_train,
            n_test,
            size,
            seed,
        } => Dataset {
            train: synth::gen_ambiguous(&mut split(*seed, "train"), *n_train, *size)?,
            test: synth::gen_ambiguous(&mut split(*seed, "test"), *n_test, *size)?,
            palette: synth::ambiguous_palette(),
        },
        DatasetSpec::Manifest { train, test, palette } => Dataset {
            train: data::load_manifest(train)?,
            test: data::load_manifest(test)?,
            palette: match palette {
                Some(p) => Palette::load(p)?,
                None => Palette::generic(cfg.num_classes),
            },
        },
    };
    if ds.palette.len() != cfg.num_classes {
        return Err(Error::Data(format!(
            "palette has {} classes, config has {}",
            ds.palette.len(),
            cfg.num_classes
        )));
    }
    for s in ds.train.iter().chain(&ds.test) {
        s.gt.check_classes(cfg.num_classes)?;
    }
    Ok(ds)
}

pub fn preprocess(cfg: &RunConfig, sample: &Sample) -> Result<Tensor<f32>> {
    data::normalize(&sample.image, cfg.normalize.mean, cfg.normalize.std)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub per_stage: Vec<f64>,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub losses: Vec<LossRow>,
}

/// Per-class loss weights: median-frequency balancing over the training
/// labels, or all ones.
pub fn loss_weights(cfg: &RunConfig, train: &[Sample]) -> Result<Vec<f32>> {
    if !cfg.class_balancing {
        return Ok(vec![1.0; cfg.num_classes]);
    }
    let mut counts = vec![0u64; cfg.num_classes];
    for s in train {
        for (c, k) in counts.iter_mut().zip(s.gt.class_counts(cfg.num_classes)?) {
            *c += k;
        }
    }
    Ok(class_weights(&counts)?.into_iter().map(|w| w as f32).collect())
}

/// Runs `max_iter` SGD steps with batch size 1. Samples are visited in a
/// freshly shuffled order each epoch and randomly cropped; every source of
/// randomness is a stream of `cfg.seed`. `on_checkpoint(iter, model)` is
/// called every `checkpoint_every` iterations.
pub fn train(
    cfg: &RunConfig,
    train: &[Sample],
    mut on_checkpoint: impl FnMut(usize, &Model<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model: Model<f32> = Model::init(cfg.arch(), cfg.seed)?;
    let mut sgd = Sgd::new(cfg.sgd(), &model.params)?;
    let weights = loss_weights(cfg, train)?;
    let mut order_rng = Prng::stream(cfg.seed, "order");
    let mut crop_rng = Prng::stream(cfg.seed, "crop");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let [ch, cw] = cfg.crop;
    let mut losses = Vec::with_capacity(cfg.max_iter);
    for iter in 0..cfg.max_iter {
        if cursor == order.len() {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let sample = &train[order[cursor]];
        cursor += 1;
        let crop = data::random_crop(sample, ch, cw, &mut crop_rng)?;
        let image = preprocess(cfg, &crop)?;
        let (grads, stats, breakdown) = {
            let (mut session, out) = model.forward(&image, Mode::Train)?;
            let l = stage_losses(&mut session.graph, &out, &crop.gt, &weights, &cfg.stage_weights)?;
            session.graph.backward(l.total)?;
            (session.param_grads(), session.bn_stats(), l.breakdown(&session.graph))
        };
        let lr = sgd.step(&mut model.params, &grads)?;
        model.update_running_stats(&stats)?;
        losses.push(LossRow {
            iter,
            per_stage: breakdown.per_stage,
            total: breakdown.total,
            lr,
        });
        if let Some(k) = cfg.checkpoint_every {
            if (iter + 1) % k == 0 && iter + 1 < cfg.max_iter {
                on_checkpoint(iter + 1, &model)?;
            }
        }
    }
    Ok(TrainOutcome { model, losses })
}

pub fn loss_csv(stages: usize, rows: &[LossRow]) -> String {
    let mut s = String::from("iter");
    for k in 1..=stages {
        write!(s, ",l_{k}").expect("string write");
    }
    s.push_str(",total,lr\n");
    for r in rows {
        write!(s, "{}", r.iter).expect("string write");
        for v in &r.per_stage {
            write!(s, ",{v}").expect("string write");
        }
        writeln!(s, ",{},{}", r.total, r.lr).expect("string write");
    }
    s
}

pub fn evaluate(cfg: &RunConfig, model: &Model<f32>, samples: &[Sample]) -> Result<Vec<StageRow>> {
    stage_report(model, samples, &|s: &Sample| preprocess(cfg, s))
}

/// One factor combination of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub variant: Variant,
    pub gate_mode: GateMode,
    pub deep_supervision: bool,
}

impl Cell {
    pub fn name(&self) -> &'static str {
        match (self.variant, self.gate_mode) {
            (Variant::Lrn, _) => "lrn",
            (Variant::Gfrnet, GateMode::Mul) => "gfrnet-mul",
            (Variant::Gfrnet, GateMode::Add) => "gfrnet-add",
        }
    }

    pub fn supervision(&self) -> &'static str {
        if self.deep_supervision {
            "ds"
        } else {
            "nods"
        }
    }

    /// The run config for this cell: only the variant, gate mode, seed and
    /// (without deep supervision) the stage weights change.
    pub fn configure(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.variant = self.variant;
        cfg.gate_mode = self.gate_mode;
        cfg.seed = seed;
        if !self.deep_supervision {
            cfg.stage_weights = final_stage_only(cfg.stage_weights.len());
        }
        cfg
    }
}

/// `{gfrnet-mul, gfrnet-add, lrn} × {ds, nods}`.
pub fn ablation_cells() -> Vec<Cell> {
    let mut cells = Vec::new();
    for deep_supervision in [true, false] {
        for (variant, gate_mode) in [
            (Variant::Gfrnet, GateMode::Mul),
            (Variant::Gfrnet, GateMode::Add),
            (Variant::Lrn, GateMode::Mul),
        ] {
            cells.push(Cell {
                variant,
                gate_mode,
                deep_supervision,
            });
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: &'static str,
    pub supervision: &'static str,
    pub seed: u64,
    pub stage: String,
    pub mean_iou: f64,
}

/// Trains and evaluates every `(cell, seed)` pair. Runs are independent and
/// execute in parallel; rows come back in grid order regardless.
pub fn ablate(base: &RunConfig, data: &Dataset, cells: &[Cell], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(Cell, u64)> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (*c, s)))
        .collect();
    let results: Vec<Result<Vec<AblationRow>>> = jobs
        .par_iter()
        .map(|&(cell, seed)| {
            let cfg = cell.configure(base, seed);
            let out = train(&cfg, &data.train, |_, _| Ok(()))?;
            let report = evaluate(&cfg, &out.model, &data.test)?;
            Ok(report
                .into_iter()
                .map(|r| AblationRow {
                    cell: cell.name(),
                    supervision: cell.supervision(),
                    seed,
                    stage: r.stage,
                    mean_iou: r.metrics.mean_iou,
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("cell,supervision,seed,stage,mean_iou\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.cell, r.supervision, r.seed, r.stage, r.mean_iou).expect("string write");
    }
    s
}
