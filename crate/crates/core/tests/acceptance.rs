//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gfrnet::arch::{argmax_labels, Mode, Model, Variant};
use gfrnet::autodiff::{GateMode, OpKind};
use gfrnet::eval::{mean_present, ConfusionMatrix};
use gfrnet::gradcheck;
use gfrnet::labels::GroundTruth;
use gfrnet::optim::{poly_lr, Sgd, SgdConfig};
use gfrnet::params::ParamStore;
use gfrnet::rng::Prng;
use gfrnet::supervision::{resize_gt, stage_losses};
use gfrnet::tensor::Tensor;
use gfrnet::train::{self, ablation_cells, Cell};
use gfrnet::{ArchConfig, RunConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn run_config(value: serde_json::Value) -> RunConfig {
    RunConfig::from_json(&value.to_string(), Path::new(".")).expect("valid config")
}

/// G-FRNet, D=5, C=4, 64×64 shapes with deep supervision.
fn shapes_config(n_train: usize, n_test: usize, max_iter: usize) -> RunConfig {
    run_config(serde_json::json!({
        "seed": 1, "variant": "gfrnet", "gate_mode": "mul", "depth": 5,
        "stage_channels": [8, 16, 16, 16, 16], "num_classes": 4, "gate_channels": null,
        "crop": [64, 64], "base_lr": 0.01, "momentum": 0.9, "weight_decay": 0.0005,
        "power": 0.9, "max_iter": max_iter, "stage_weights": [1.0, 1.0, 1.0, 1.0],
        "class_balancing": false,
        "dataset": {"kind": "shapes", "n_train": n_train, "n_test": n_test, "size": 64, "seed": 7},
        "output_dir": "unused"
    }))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run(2024, 20, 1e-4, None).expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    print!("{}", report.to_text());
    let listed: Vec<OpKind> = report.ops.iter().map(|o| o.op).collect();
    let every_op_once = listed == OpKind::ALL.to_vec();
    let enough = report.ops.iter().all(|o| o.instances >= 20);
    outcome(
        report.all_passed() && every_op_once && enough && secs < 120.0,
        format!("{} ops x 20 instances, all <= 1e-4: {}, {secs:.1}s", listed.len(), report.all_passed()),
    )
}

fn criterion_2() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = Prng::new(77);
    for depth in [4, 5] {
        for classes in [3, 8] {
            let size = 1 << (depth + 1);
            let x = Tensor::from_fn([1, 3, size, size], |_, _, _, _| rng.range(0.0, 1.0));
            let mut shapes = Vec::new();
            for variant in [Variant::Gfrnet, Variant::Lrn] {
                let channels = (0..depth).map(|s| 4 + 2 * s).collect();
                let m = Model::<f64>::init(ArchConfig::new(depth, channels, classes, variant), rng.next_u64()).unwrap();
                let (s, out) = m.forward(&x, Mode::Train).unwrap();
                let maps: Vec<_> = out.maps().iter().map(|&id| s.graph.shape(id)).collect();
                let g = maps[0];
                for (k, sh) in maps.iter().enumerate() {
                    if sh.h != g.h << k || sh.w != g.w << k || sh.c != classes {
                        failures.push(format!("D={depth} C={classes} {variant}: stage {k} is {sh}"));
                    }
                }
                if maps.len() != depth - 1 {
                    failures.push(format!("D={depth}: {} maps", maps.len()));
                }
                shapes.push(maps);
            }
            if shapes[0] != shapes[1] {
                failures.push(format!("D={depth} C={classes}: LRN and G-FRNet shapes differ"));
            }
        }
    }
    // Gating veto through a full forward/backward pass.
    for mode in [GateMode::Mul, GateMode::Add] {
        let mut cfg = ArchConfig::new(4, vec![4, 6, 8, 10], 3, Variant::Gfrnet);
        cfg.gate_mode = mode;
        let mut m = Model::<f64>::init(cfg, 5).unwrap();
        for p in ["gate1.deep.bn.gamma", "gate1.deep.bn.beta"] {
            m.params.get_mut(p).unwrap().data_mut().fill(0.0);
        }
        let x = Tensor::from_fn([1, 3, 32, 32], |_, _, _, _| rng.range(0.0, 1.0));
        let gt = GroundTruth::new(1, 32, 32, (0..1024).map(|_| rng.below(3) as u32).collect()).unwrap();
        let (mut s, out) = m.forward(&x, Mode::Train).unwrap();
        let l = stage_losses(&mut s.graph, &out, &gt, &[1.0; 3], &[1.0; 3]).unwrap();
        s.graph.backward(l.total).unwrap();
        let gate = out.gates[0];
        let m_f = s.graph.value(gate.m);
        let u = s.graph.value(gate.u);
        let u_grad = s.graph.grad_or_zero(gate.u);
        let ok = match mode {
            GateMode::Mul => m_f.max_abs() == 0.0 && u_grad.max_abs() == 0.0,
            GateMode::Add => m_f == u && u_grad == s.graph.grad_or_zero(gate.m) && u.max_abs() > 0.0,
        };
        if !ok {
            failures.push(format!("gate veto check failed in {mode} mode"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "resolution schedule, channels, variant shape equality, mul veto and add residue hold".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn criterion_3() -> Outcome {
    let mut rng = Prng::new(3);
    let classes = 5;
    let mut mismatches = 0;
    for _ in 0..100 {
        let mut draw = || GroundTruth::new(1, 8, 8, (0..64).map(|_| rng.below(classes) as u32).collect()).unwrap();
        let (pred, gt) = (draw(), draw());
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&pred, &gt).unwrap();
        let got = cm.metrics().unwrap().mean_iou;
        let brute: Vec<Option<f64>> = (0..classes as u32)
            .map(|k| {
                let mut tp = 0u64;
                let mut union = 0u64;
                for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
                    tp += (p == k && g == k) as u64;
                    union += (p == k || g == k) as u64;
                }
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = brute.iter().flatten().copied().collect();
        let expect = present.iter().sum::<f64>() / present.len() as f64;
        if got != expect {
            mismatches += 1;
        }
    }
    let camvid = [82.5, 76.8, 92.1, 81.8, 43.0, 94.5, 54.6, 47.1, 33.4, 82.3, 59.4];
    let horse = [91.79, 60.44, 84.37, 64.07, 53.47];
    let reduce = |v: &[f64]| mean_present(&v.iter().map(|&x| Some(x)).collect::<Vec<_>>());
    let (c, h) = (reduce(&camvid), reduce(&horse));
    outcome(
        mismatches == 0 && (c - 68.0).abs() <= 0.05 && (h - 70.83).abs() <= 0.01,
        format!("{mismatches}/100 brute-force mismatches; class-IoU row means {c:.4} and {h:.4}"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let cfg = shapes_config(1, 1, 300);
    let data = train::load_dataset(&cfg).unwrap();
    let out = train::train(&cfg, &data.train, |_, _| Ok(())).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (first, last) = (out.losses[0].total, out.losses.last().unwrap().total);
    let sample = &data.train[0];
    let x = train::preprocess(&cfg, sample).unwrap();
    let (s, maps) = out.model.forward(&x, Mode::Infer).unwrap();
    let scores = s.graph.value(maps.last());
    let sh = scores.shape();
    let target = resize_gt(&sample.gt, sh.h, sh.w).unwrap();
    let pred = argmax_labels(scores);
    let hits = pred.labels.iter().zip(&target.labels).filter(|(p, t)| p == t).count();
    let acc = hits as f64 / target.labels.len() as f64;
    let full = train::evaluate(&cfg, &out.model, &data.train).unwrap();
    let full_acc = full.last().unwrap().metrics.pixel_acc;
    outcome(
        last < 0.1 * first && acc >= 0.99 && secs < 300.0,
        format!(
            "loss {first:.4} -> {last:.5} ({:.2}%), final-stage pixel acc {:.2}% at {}x{} ({:.2}% upsampled to 64x64), {secs:.1}s",
            100.0 * last / first,
            100.0 * acc,
            sh.h,
            sh.w,
            100.0 * full_acc
        ),
    )
}

struct ShapesRuns {
    /// Per seed: (coarse mean IoU, final mean IoU) with deep supervision.
    ds: Vec<(f64, f64)>,
    nods_final: Vec<f64>,
}

fn shapes_runs(seeds: &[u64]) -> ShapesRuns {
    let base = shapes_config(200, 50, 2000);
    let data = train::load_dataset(&base).unwrap();
    let ds_cell = ablation_cells()[0];
    let nods_cell = Cell {
        deep_supervision: false,
        ..ds_cell
    };
    let rows = train::ablate(&base, &data, &[ds_cell, nods_cell], seeds).unwrap();
    let get = |sup: &str, seed: u64, stage: &str| {
        rows.iter()
            .find(|r| r.supervision == sup && r.seed == seed && r.stage == stage)
            .map(|r| r.mean_iou)
            .unwrap()
    };
    let last = base.arch().stage_names().pop().unwrap();
    ShapesRuns {
        ds: seeds.iter().map(|&s| (get("ds", s, "coarse"), get("ds", s, &last))).collect(),
        nods_final: seeds.iter().map(|&s| get("nods", s, &last)).collect(),
    }
}

fn criterion_5(runs: &ShapesRuns) -> Outcome {
    let wins = runs.ds.iter().filter(|(c, f)| f > c).count();
    let detail = runs
        .ds
        .iter()
        .map(|(c, f)| format!("coarse {c:.3} -> final {f:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(wins == runs.ds.len(), format!("{wins}/{} seeds refine: {detail}", runs.ds.len()))
}

fn criterion_6() -> Outcome {
    let base = run_config(serde_json::json!({
        "seed": 1, "variant": "gfrnet", "gate_mode": "mul", "depth": 5,
        "stage_channels": [8, 16, 16, 16, 16], "num_classes": 3, "gate_channels": null,
        "crop": [64, 64], "base_lr": 0.01, "momentum": 0.9, "weight_decay": 0.0005,
        "power": 0.9, "max_iter": 2000, "stage_weights": [1.0, 1.0, 1.0, 1.0],
        "class_balancing": false,
        "dataset": {"kind": "ambiguous", "n_train": 200, "n_test": 50, "size": 64, "seed": 7},
        "output_dir": "unused"
    }));
    let data = train::load_dataset(&base).unwrap();
    let cells: Vec<Cell> = ablation_cells().into_iter().filter(|c| c.deep_supervision).collect();
    let seeds = [1, 2, 3];
    let rows = train::ablate(&base, &data, &cells, &seeds).unwrap();
    print!("{}", train::ablation_csv(&rows));
    let last = base.arch().stage_names().pop().unwrap();
    let mut finals: BTreeMap<(&str, u64), f64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.stage == last) {
        finals.insert((r.cell, r.seed), r.mean_iou);
    }
    let wins = seeds
        .iter()
        .filter(|&&s| finals[&("gfrnet-mul", s)] >= finals[&("lrn", s)])
        .count();
    let fmt = |cell: &str| {
        seeds
            .iter()
            .map(|s| format!("{:.3}", finals[&(cell, *s)]))
            .collect::<Vec<_>>()
            .join("/")
    };
    outcome(
        wins >= 2,
        format!(
            "gfrnet-mul >= lrn in {wins}/3 seeds (mul {}, add {}, lrn {})",
            fmt("gfrnet-mul"),
            fmt("gfrnet-add"),
            fmt("lrn")
        ),
    )
}

fn criterion_7(runs: &ShapesRuns) -> Outcome {
    let pairs: Vec<(f64, f64)> = runs.ds.iter().map(|d| d.1).zip(runs.nods_final.iter().copied()).collect();
    let wins = pairs.iter().filter(|(d, n)| d >= n).count();
    let detail = pairs
        .iter()
        .map(|(d, n)| format!("{d:.3} vs {n:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(wins >= 2, format!("with-DS >= without-DS in {wins}/3 seeds: {detail}"))
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.json");
    let cfg = serde_json::json!({
        "seed": 5, "variant": "gfrnet", "gate_mode": "mul", "depth": 4,
        "stage_channels": [4, 8, 8, 8], "num_classes": 4, "gate_channels": null,
        "crop": [32, 32], "base_lr": 0.01, "momentum": 0.9, "weight_decay": 0.0005,
        "power": 0.9, "max_iter": 25, "stage_weights": [1.0, 1.0, 1.0],
        "class_balancing": true,
        "dataset": {"kind": "shapes", "n_train": 6, "n_test": 2, "size": 48},
        "output_dir": "out"
    });
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let bin = env!("CARGO_BIN_EXE_gfrnet");
    let run = |args: &[&str]| {
        let st = Command::new(bin).args(args).env_remove("GFRNET_OUTPUT_DIR").output().unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    };
    let c = cfg_path.to_str().unwrap();
    let dir = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    run(&["gen-data", "--config", c, "--out", &dir("data_a")]);
    run(&["gen-data", "--config", c, "--out", &dir("data_b")]);
    run(&["train", "--config", c, "--out", &dir("run_a")]);
    run(&["train", "--config", c, "--out", &dir("run_b")]);
    let (da, db) = (files_under(&tmp.path().join("data_a")), files_under(&tmp.path().join("data_b")));
    let ca = fs::read(tmp.path().join("run_a/model.ckpt")).unwrap();
    let cb = fs::read(tmp.path().join("run_b/model.ckpt")).unwrap();
    let la = fs::read(tmp.path().join("run_a/loss.csv")).unwrap();
    let lb = fs::read(tmp.path().join("run_b/loss.csv")).unwrap();
    outcome(
        da == db && !da.is_empty() && ca == cb && la == lb,
        format!(
            "gen-data: {} files identical: {}; checkpoints ({} bytes) identical: {}",
            da.len(),
            da == db,
            ca.len(),
            ca == cb
        ),
    )
}

fn criterion_9() -> Outcome {
    let base = 0.01;
    let start = poly_lr(base, 0, 1000, 0.9).unwrap();
    let end = poly_lr(base, 1000, 1000, 0.9).unwrap();
    let mid = poly_lr(base, 500, 1000, 0.9).unwrap();
    let mid_expect = 0.5f64.powf(0.9) * base;
    let (lr, g, p0) = (0.05, 0.7, 1.5);
    let mut store = ParamStore::new();
    store.insert("w.weight", Tensor::full([1, 1, 1, 1], p0)).unwrap();
    let cfg = SgdConfig {
        weight_decay: 0.0005,
        ..SgdConfig::new(lr, 10)
    };
    let grads = vec![Tensor::full([1, 1, 1, 1], g)];
    let mut sgd = Sgd::new(cfg, &store).unwrap();
    sgd.step_with_lr(&mut store, &grads, lr).unwrap();
    sgd.step_with_lr(&mut store, &grads, lr).unwrap();
    // v1 = g + wd p0; p1 = p0 - lr v1; v2 = μ v1 + g + wd p1; p2 = p1 - lr v2.
    let (mu, wd) = (0.9, 0.0005);
    let v1 = g + wd * p0;
    let p1 = p0 - lr * v1;
    let v2 = mu * v1 + g + wd * p1;
    let p2 = p1 - lr * v2;
    let got = store.get("w.weight").unwrap().data()[0];
    outcome(
        start == base && end == 0.0 && (mid - mid_expect).abs() <= 1e-9 && (got - p2).abs() <= 1e-9,
        format!(
            "lr(0)={start}, lr(max)={end}, lr(mid)={mid:.12} vs {mid_expect:.12}, two-step p={got:.12} vs {p2:.12}"
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        println!(
            "criterion {n} ({name}): {} [{:.1}s] {}",
            if o.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        results.push((n, name, o));
    };
    record(1, "gradient suite", &criterion_1);
    record(2, "architecture invariants", &criterion_2);
    record(3, "metric oracle", &criterion_3);
    record(4, "overfit", &criterion_4);
    record(9, "schedule", &criterion_9);
    record(8, "determinism", &criterion_8);
    let runs = shapes_runs(&[1, 2, 3]);
    record(5, "progressive refinement", &|| criterion_5(&runs));
    record(7, "deep supervision benefit", &|| criterion_7(&runs));
    record(6, "gating benefit", &criterion_6);
    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary:");
    for (n, name, o) in &results {
        println!("  criterion {n} ({name}): {}", if o.passed { "PASS" } else { "FAIL" });
    }
    if results.iter().any(|r| !r.2.passed) {
        std::process::exit(1);
    }
}
