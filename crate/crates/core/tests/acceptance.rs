//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use angiogan::blocks::{BlockVariant, ResidualBlock, ResidualBlockConfig};
use angiogan::checkpoint::collect_tensors;
use angiogan::dataset::{build_samples, load_split, random_crops, Split, CROPS_PER_PAIR, CROP_SIZE};
use angiogan::discriminators::{Discriminator, DiscriminatorConfig, DiscriminatorId, DiscriminatorSetConfig};
use angiogan::evaluation::{frechet_distance, item_id, score_study, EmbeddingStats, Label};
use angiogan::generators::{Generator, GeneratorConfig};
use angiogan::nn::{Mode, Module, Slot, Tensor};
use angiogan::objective::*;
use angiogan::perturb::*;
use angiogan::trainer::*;
use angiogan::ImageTensor;
use common::*;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array3, ArrayD};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome, Duration);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        // Negated so that NaN comparisons fail.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn c1_parameter_counts() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_angiogan"))
        .args(["inspect", "--channels", "32", "--kernel", "3"])
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    let row = |name: &str| text.lines().find(|l| l.trim_start().starts_with(name)).map(str::to_owned);
    let proposed = row("proposed").ok_or("no proposed row")?;
    let original = row("original").ok_or("no original row")?;
    ensure!(proposed.trim_end().ends_with("10,784"), "proposed row: {proposed}");
    ensure!(original.trim_end().ends_with("18,688"), "original row: {original}");
    Ok("proposed 10,784, original 18,688".into())
}

fn c2_patch_sizes() -> Outcome {
    let set = DiscriminatorSetConfig::new(512, 64);
    let sides: Vec<usize> = DiscriminatorId::ALL.iter().map(|id| set.config_for(*id).patch_output_size()).collect();
    ensure!(sides == [64, 32, 32, 16], "patch sides {sides:?}");
    // One real forward pass confirms the arithmetic on the smallest discriminator.
    let cfg = set.config_for(DiscriminatorId::ALL[3]);
    let mut d = Discriminator::build(cfg.clone(), 0).map_err(|e| e.to_string())?;
    let f = random_tensor((1, 3, cfg.input_size, cfg.input_size), 1);
    let a = random_tensor((1, 1, cfg.input_size, cfg.input_size), 2);
    let map = d.judge(&f, &a, Mode::Inference).map_err(|e| e.to_string())?;
    ensure!(map.dim() == (1, 1, 16, 16), "forward map {:?}", map.dim());
    Ok("64x64, 32x32, 32x32, 16x16".into())
}

fn c3_shape_contract() -> Outcome {
    let mut coarse = Generator::build(GeneratorConfig::coarse(), 1).map_err(|e| e.to_string())?;
    let mut fine = Generator::build(GeneratorConfig::fine(), 2).map_err(|e| e.to_string())?;
    let out = coarse.coarse_forward(&random_tensor((1, 3, 256, 256), 3), Mode::Inference).map_err(|e| e.to_string())?;
    ensure!(out.angiogram.dim() == (1, 1, 256, 256), "coarse angiogram {:?}", out.angiogram.dim());
    ensure!(out.feature.dim() == (1, 64, 256, 256), "coarse feature {:?}", out.feature.dim());
    let y = fine.fine_forward(&random_tensor((1, 3, 512, 512), 4), &out.feature, Mode::Inference).map_err(|e| e.to_string())?;
    ensure!(y.dim() == (1, 1, 512, 512), "fine output {:?}", y.dim());
    Ok("256x256x1 + 256x256x64 -> 512x512x1".into())
}

/// Both toy generators wired through the handoff.
struct Pair {
    coarse: Generator,
    fine: Generator,
}

impl Module for Pair {
    fn forward(&mut self, _: &Tensor, _: Mode) -> angiogan::Result<Tensor> {
        unimplemented!()
    }

    fn backward(&mut self, _: &Tensor) -> angiogan::Result<Tensor> {
        unimplemented!()
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.coarse.visit(&format!("{prefix}coarse"), f);
        self.fine.visit(&format!("{prefix}fine"), f);
    }
}

fn c4_gradients() -> Outcome {
    let mut block_worst: f64 = 0.0;
    for variant in [BlockVariant::Proposed, BlockVariant::Original] {
        let mut block = ResidualBlock::new(ResidualBlockConfig::new(variant, 4, 3), &mut rng(3)).map_err(|e| e.to_string())?;
        unit_scale_weights(&mut block, 4);
        let x = random_tensor((2, 4, 8, 8), 1);
        let w = random_tensor((2, 4, 8, 8), 2);
        let entries = all_entries(&mut block);
        block_worst = block_worst.max(check_gradients(
            &mut block,
            &entries,
            &mut |b| weighted_sum(&b.forward(&x, Mode::Frozen).unwrap(), &w),
            &mut |b| {
                b.forward(&x, Mode::Frozen).unwrap();
                b.backward(&w).unwrap();
            },
        ));
    }

    let mut d = Discriminator::build(DiscriminatorConfig::new(32, 4), 5).map_err(|e| e.to_string())?;
    let (f, a, w) = (random_tensor((2, 3, 32, 32), 6), random_tensor((2, 1, 32, 32), 7), random_tensor((2, 1, 4, 4), 8));
    let entries = sample_entries(&mut d, 200, 9);
    let d_worst = check_gradients(
        &mut d,
        &entries,
        &mut |d| weighted_sum(&d.judge(&f, &a, Mode::Frozen).unwrap(), &w),
        &mut |d| {
            d.judge(&f, &a, Mode::Frozen).unwrap();
            d.backward(&w).unwrap();
        },
    );

    let toy = ModelConfig::toy();
    let mut pair = Pair {
        coarse: Generator::build(toy.coarse.clone(), 11).map_err(|e| e.to_string())?,
        fine: Generator::build(toy.fine.clone(), 12).map_err(|e| e.to_string())?,
    };
    unit_scale_weights(&mut pair, 18);
    let xc = random_tensor((2, 3, 32, 32), 13);
    let xf = random_tensor((2, 3, 64, 64), 14);
    let wc = random_tensor((2, 1, 32, 32), 15);
    let wf = random_tensor((2, 1, 64, 64), 16);
    let entries = sample_entries(&mut pair, 50, 17);
    let g_worst = check_gradients(
        &mut pair,
        &entries,
        &mut |p| {
            let c = p.coarse.coarse_forward(&xc, Mode::Frozen).unwrap();
            let y = p.fine.fine_forward(&xf, &c.feature, Mode::Frozen).unwrap();
            weighted_sum(&c.angiogram, &wc) + weighted_sum(&y, &wf)
        },
        &mut |p| {
            let c = p.coarse.coarse_forward(&xc, Mode::Frozen).unwrap();
            p.fine.fine_forward(&xf, &c.feature, Mode::Frozen).unwrap();
            let (_, d_feature) = p.fine.fine_backward(&wf).unwrap();
            p.coarse.coarse_backward(&wc, Some(&d_feature)).unwrap();
        },
    );
    let detail = format!("block {block_worst:.1e}, discriminator {d_worst:.1e}, generator {g_worst:.1e}");
    ensure!(block_worst <= 1e-4 && d_worst <= 1e-4 && g_worst <= 1e-3, "{detail}");
    Ok(detail)
}

fn c5_loss_oracles() -> Outcome {
    let s = |v: f64| Tensor::from_elem((1, 1, 1, 1), v);
    let c = ObjectiveConfig::default();
    let cases = [
        ("d(1,0)", lsgan_d_loss(&[&s(1.0)], &[&s(0.0)], &c), 0.0),
        ("d(0.5,0.25)", lsgan_d_loss(&[&s(0.5)], &[&s(0.25)], &c), 0.3125),
        ("d(0.5,0.5)", lsgan_d_loss(&[&s(0.5)], &[&s(0.5)], &c), 0.5),
        ("g(1)", lsgan_g_loss(&[&s(1.0)], &c), 0.0),
        ("g(0)", lsgan_g_loss(&[&s(0.0)], &c), 1.0),
        ("g(0.5)", lsgan_g_loss(&[&s(0.5)], &c), 0.25),
        ("recon", recon_l2(&s(0.25), &s(0.75)).map_err(|e| e.to_string())?, 0.25),
        ("total", total_generator_objective(0.25, 0.25, 0.1, 0.2, &c), 3.5),
    ];
    for (name, got, want) in cases {
        ensure!((got - want).abs() <= 1e-12, "{name}: {got} vs {want}");
    }
    Ok(format!("{} hand values", cases.len()))
}

fn diag_stats(mean: &[f64], sd: &[f64]) -> EmbeddingStats {
    EmbeddingStats {
        mean: DVector::from_column_slice(mean),
        covariance: DMatrix::from_diagonal(&DVector::from_iterator(sd.len(), sd.iter().map(|s| s * s))),
        count: 100,
    }
}

fn c6_frechet() -> Outcome {
    let mut r = rng(2024);
    let (mut oracle, mut self_dist, mut asym): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let d = r.random_range(1..=8);
        let mut draw = |lo: f64, hi: f64| (0..d).map(|_| r.random_range(lo..hi)).collect::<Vec<f64>>();
        let (ma, mb, sa, sb) = (draw(-3.0, 3.0), draw(-3.0, 3.0), draw(0.05, 3.0), draw(0.05, 3.0));
        let closed: f64 = (0..d).map(|i| (ma[i] - mb[i]).powi(2) + (sa[i] - sb[i]).powi(2)).sum();
        let (x, y) = (diag_stats(&ma, &sa), diag_stats(&mb, &sb));
        let fxy = frechet_distance(&x, &y).map_err(|e| e.to_string())?;
        oracle = oracle.max((fxy - closed).abs());

        let a = DMatrix::from_fn(d, d + 3, |_, _| r.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(d, d + 3, |_, _| r.random_range(-1.0..1.0));
        let full = |m: &DMatrix<f64>, shift: f64| EmbeddingStats {
            mean: DVector::from_element(d, shift),
            covariance: m * m.transpose() / (d + 3) as f64,
            count: 50,
        };
        let (p, q) = (full(&a, 0.3), full(&b, -0.7));
        self_dist = self_dist.max(frechet_distance(&p, &p).map_err(|e| e.to_string())?.abs());
        let pq = frechet_distance(&p, &q).map_err(|e| e.to_string())?;
        let qp = frechet_distance(&q, &p).map_err(|e| e.to_string())?;
        asym = asym.max((pq - qp).abs());
    }
    let detail = format!("oracle {oracle:.1e}, self {self_dist:.1e}, asymmetry {asym:.1e}");
    ensure!(oracle <= 1e-6 && self_dist <= 1e-6 && asym <= 1e-8, "{detail}");
    Ok(detail)
}

fn c7_dataset_law() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_dataset(dir.path(), 17, 1, 576, 720);
    let pairs = load_split(dir.path(), None, Split::Train, 4).map_err(|e| e.to_string())?;
    let samples = build_samples(&pairs, CROPS_PER_PAIR, CROP_SIZE, 0).map_err(|e| e.to_string())?;
    ensure!(pairs.len() == 17 && samples.len() == 850, "{} pairs, {} samples", pairs.len(), samples.len());
    for s in &samples {
        let (r, c) = s.offset;
        let src = s.source();
        ensure!(r + CROP_SIZE <= 576 && c + CROP_SIZE <= 720, "offset {r},{c} out of bounds");
        ensure!(s.fundus_crop() == src.fundus.crop(r, c, CROP_SIZE, CROP_SIZE).unwrap(), "fundus misaligned at {r},{c}");
        ensure!(s.angio_crop() == src.angiogram.crop(r, c, CROP_SIZE, CROP_SIZE).unwrap(), "angiogram misaligned at {r},{c}");
    }
    Ok("17 x 50 = 850 aligned".into())
}

fn c8_perturbations() -> Outcome {
    let img = ImageTensor::from_batch(&random_tensor((1, 3, 41, 47), 1).mapv(|v| v * 0.9), 0);
    for kind in PerturbationKind::ALL {
        let out = apply_perturbation(&img, &PerturbationSpec::new(kind).with_amount(0.0)).map_err(|e| e.to_string())?;
        ensure!(out == img, "{kind} at amount 0 is not the identity");
    }
    let (h, w) = (41usize, 47usize);
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    for (kind, amount) in [(PerturbationKind::Whirl, 2.0), (PerturbationKind::Pinch, 0.6), (PerturbationKind::Pinch, -0.6)] {
        let spec = PerturbationSpec { radius_fraction: 0.7, ..PerturbationSpec::new(kind).with_amount(amount) };
        let out = apply_perturbation(&img, &spec).map_err(|e| e.to_string())?;
        let disk = 0.7 * h.min(w) as f64 / 2.0;
        for y in 0..h {
            for x in 0..w {
                let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                if r >= disk {
                    for c in 0..3 {
                        ensure!(out.data()[[c, y, x]] == img.data()[[c, y, x]], "{kind} moved ({y},{x}) outside the disk");
                    }
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    for sigma in [0.8, 2.0, 3.3] {
        let n = 41;
        let mut data = Array3::zeros((1, n, n));
        data[[0, 20, 20]] = 1.0;
        let out = gaussian_blur(&ImageTensor::new(data), sigma);
        let r = (3.0 * sigma).ceil() as isize;
        let weight = |dy: isize, dx: isize| (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).map(|(dy, dx)| weight(dy, dx)).sum();
        for y in 0..n as isize {
            for x in 0..n as isize {
                let (dy, dx) = (20 - y, 20 - x);
                let expected = if dy.abs() <= r && dx.abs() <= r { weight(dy, dx) / norm } else { 0.0 };
                worst = worst.max((expected - out.data()[[0, y as usize, x as usize]]).abs());
            }
        }
    }
    ensure!(worst <= 1e-6, "blur impulse error {worst:e}");
    Ok(format!("identity exact, locality exact, blur {worst:.1e}"))
}

fn changed(a: &BTreeMap<String, ArrayD<f64>>, b: &BTreeMap<String, ArrayD<f64>>, prefixes: &[&str]) -> bool {
    a.iter().any(|(k, v)| prefixes.iter().any(|p| k.starts_with(p)) && b[k] != *v)
}

fn c9_schedule_contract() -> Outcome {
    let pair = synthetic_pair("p", 80, 96, 0.3);
    let samples = random_crops(&pair, 4, 64, 1).map_err(|e| e.to_string())?;
    let batch = Batch::from_samples(&samples.iter().take(2).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let obj = ObjectiveConfig::default();
    let mut st = TrainingState::new(ModelConfig::toy(), TrainingSchedule::default().adam(), 5).map_err(|e| e.to_string())?;
    let gens = ["coarse.", "fine.", "adam.coarse.", "adam.fine."];
    let discs = ["discriminators.", "adam.discriminators."];

    let s0 = collect_tensors(&mut st);
    st.discriminator_step(&batch, &obj).map_err(|e| e.to_string())?;
    let s1 = collect_tensors(&mut st);
    ensure!(!changed(&s0, &s1, &gens), "discriminator step touched a generator");
    st.coarse_step(&batch, &obj).map_err(|e| e.to_string())?;
    let s2 = collect_tensors(&mut st);
    ensure!(!changed(&s1, &s2, &discs) && !changed(&s1, &s2, &["fine.", "adam.fine."]), "coarse step leaked");
    st.fine_step(&batch, &obj).map_err(|e| e.to_string())?;
    let s3 = collect_tensors(&mut st);
    ensure!(!changed(&s2, &s3, &discs) && !changed(&s2, &s3, &["coarse.", "adam.coarse."]), "fine step leaked");

    let schedule = TrainingSchedule { batch_size: 2, epochs: 2, ..TrainingSchedule::default() };
    let run = |seed: u64| -> Result<Vec<u8>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut st = TrainingState::new(ModelConfig::toy(), schedule.adam(), seed).map_err(|e| e.to_string())?;
        let out = FitOutputs { directory: dir.path().to_path_buf() };
        let written = fit(&mut st, &samples, &schedule, &obj, &out).map_err(|e| e.to_string())?;
        std::fs::read(written.last().ok_or("no checkpoint")?).map_err(|e| e.to_string())
    };
    let (a, b) = (run(7)?, run(7)?);
    ensure!(a == b, "seeded runs produced different checkpoints");
    Ok(format!("freezing holds, {} checkpoint bytes identical", a.len()))
}

fn c10_overfit_probe() -> Outcome {
    let pair = synthetic_pair("p", 80, 96, 0.3);
    let samples = random_crops(&pair, 2, 64, 3).map_err(|e| e.to_string())?;
    let schedule = TrainingSchedule { batch_size: 2, ..TrainingSchedule::default() };
    let obj = ObjectiveConfig::default();
    let mut st = TrainingState::new(ModelConfig::toy(), schedule.adam(), 1).map_err(|e| e.to_string())?;
    let b = Batch::from_samples(&samples.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let batches = CycleBatches {
        discriminator: vec![b.clone(); schedule.d_steps_per_cycle],
        coarse: Some(b.clone()),
        fine: Some(b.clone()),
        joint: Some(b),
    };
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let record = st.train_cycle(&batches, &schedule, &obj, CyclePlan::FULL).map_err(|e| e.to_string())?;
        first.get_or_insert(record.l2_fine);
        last = record.l2_fine;
    }
    let first = first.unwrap();
    let detail = format!("l2_fine {first:.4} -> {last:.4} ({:.0}%)", 100.0 * last / first);
    ensure!(last <= 0.5 * first, "{detail}");
    Ok(detail)
}

fn c11_study_scorer() -> Outcome {
    let key: BTreeMap<String, Label> = (0..40).map(|i| (item_id(i), if i % 2 == 0 { Label::Real } else { Label::Fake })).collect();
    let (mut fakes, mut reals) = (0, 0);
    let responses: BTreeMap<String, Label> = key
        .iter()
        .map(|(id, &l)| {
            let answer = match l {
                Label::Fake => {
                    fakes += 1;
                    if fakes <= 3 { Label::Fake } else { Label::Real }
                }
                Label::Real => {
                    reals += 1;
                    if reals <= 16 { Label::Real } else { Label::Fake }
                }
            };
            (id.clone(), answer)
        })
        .collect();
    let r = score_study(&responses, &key).map_err(|e| e.to_string())?;
    ensure!(r.fake_correct_rate == 15.0 && r.real_correct_rate == 80.0, "rates {} / {}", r.fake_correct_rate, r.real_correct_rate);
    ensure!(r.confusion == 52.5, "confusion {}", r.confusion);
    let mut g = rng(11);
    for half in 1..30 {
        let key: BTreeMap<String, Label> =
            (0..2 * half).map(|i| (item_id(i), if i < half { Label::Real } else { Label::Fake })).collect();
        let resp: BTreeMap<String, Label> =
            key.keys().map(|k| (k.clone(), if g.random_bool(0.5) { Label::Real } else { Label::Fake })).collect();
        let inverted = resp.iter().map(|(k, l)| (k.clone(), l.flipped())).collect();
        let sum = score_study(&resp, &key).unwrap().confusion + score_study(&inverted, &key).unwrap().confusion;
        ensure!(sum == 100.0, "complement law broken at {half} per class: {sum}");
    }
    Ok("confusion 52.5, complement law exact".into())
}

fn c12_not_reproducible() -> Outcome {
    Ok("not reproducible at desk scale: absolute FID values need the full dataset, about 10 h of GPU \
        training, a pretrained Inception embedder and trained baselines; expert percentages need human raters. \
        Covered instead by criteria 6, 10 and 11"
        .into())
}

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "parameter counts", c1_parameter_counts, Duration::from_secs(1)),
        (2, "patch sizes", c2_patch_sizes, Duration::from_secs(10)),
        (3, "shape and handoff contract", c3_shape_contract, Duration::from_secs(10)),
        (4, "gradient verification", c4_gradients, Duration::from_secs(300)),
        (5, "loss oracles", c5_loss_oracles, Duration::from_secs(1)),
        (6, "frechet oracle", c6_frechet, Duration::from_secs(30)),
        (7, "dataset law", c7_dataset_law, Duration::from_secs(60)),
        (8, "perturbation properties", c8_perturbations, Duration::from_secs(60)),
        (9, "training schedule contract", c9_schedule_contract, Duration::from_secs(300)),
        (10, "overfit probe", c10_overfit_probe, Duration::from_secs(900)),
        (11, "study scorer", c11_study_scorer, Duration::from_secs(1)),
        (12, "absolute FID and expert figures", c12_not_reproducible, Duration::from_secs(1)),
    ];
    let mut failed = Vec::new();
    for (n, name, check, budget) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if elapsed > budget => ("FAIL", format!("{d}; over budget {budget:?}")),
            Ok(d) => ("PASS", d),
            Err(e) => ("FAIL", e),
        };
        println!("criterion {n:>2} {status} {name} [{:.2}s]: {detail}", elapsed.as_secs_f64());
        if status == "FAIL" {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
