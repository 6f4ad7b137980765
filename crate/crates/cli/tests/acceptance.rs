//! End-to-end acceptance criteria. Each test prints one `criterion N ...:
//! PASS|FAIL` line to stderr (bypassing output capture) and then asserts.
//! Tests hold a shared lock so timings are not distorted by each other.

#[path = "../../core/tests/gradcheck.rs"]
#[allow(dead_code)]
mod gradcheck;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use dinv_core::data::{gen_shapes, LabeledBatch, Preprocess};
use dinv_core::distill::{
    adaptive_loop_with_stats, continual_train, train_teacher, ContinualConfig, ContinualTask, DistillConfig,
    Evaluation, LrSchedule, TrainConfig,
};
use dinv_core::inversion::{
    r_prior, regularizer, stats_from_images, synthesize, ImageStore, Multires, SynthMode, SynthesisConfig,
};
use dinv_core::nn::{build_model, ArchSpec, FeatureStats, Layer};
use dinv_core::pruning::{
    build_lut, channel_spaces, estimate_latency, insert_gates, set_gate, spearman, taylor_importance, CostModel,
    ImportanceLoss, PruneConfig, PruneTarget, prune_loop,
};
use dinv_core::rng::{stream, Stream};
use dinv_core::{Graph, Mode, Model, Tensor};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {title}: {} | {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn shapes(size: usize) -> &'static (LabeledBatch, LabeledBatch) {
    static S16: OnceLock<(LabeledBatch, LabeledBatch)> = OnceLock::new();
    static S32: OnceLock<(LabeledBatch, LabeledBatch)> = OnceLock::new();
    let cell = if size == 16 { &S16 } else { &S32 };
    cell.get_or_init(|| (gen_shapes(1, 500, 10, size).unwrap(), gen_shapes(2, 50, 10, size).unwrap()))
}

fn spec(arch: &str, classes: usize, size: usize) -> ArchSpec {
    ArchSpec::new(arch.parse().unwrap(), classes, vec![3, size, size])
}

fn teacher_recipe(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 5, lr: 0.1, batch: 32, seed, ..Default::default() }
}

/// A teacher trained on the shapes training split, cached by architecture and size.
fn teacher(arch: &str, size: usize) -> Model {
    static CACHE: Mutex<BTreeMap<(String, usize), Model>> = Mutex::new(BTreeMap::new());
    let mut cache = CACHE.lock().unwrap_or_else(|e| e.into_inner());
    cache
        .entry((arch.to_string(), size))
        .or_insert_with(|| {
            let (train, _) = shapes(size);
            let mut m: Model = build_model(&spec(arch, 10, size), &mut stream(0, Stream::Init)).unwrap();
            train_teacher(&mut m, train, &teacher_recipe(0), None).unwrap();
            m
        })
        .clone()
}

fn test_acc(m: &Model, size: usize) -> f64 {
    let (_, test) = shapes(size);
    m.accuracy(&test.images, &test.labels).unwrap()
}

fn syn_cfg(mode: SynthMode) -> SynthesisConfig {
    SynthesisConfig {
        mode,
        batch: 64,
        iterations: 150,
        lr: 0.1,
        alpha_tv: 1e-4,
        alpha_l2: 0.0,
        alpha_f: 1.0,
        alpha_c: 1.0,
        jitter_px: 2,
        clip: Some(Preprocess::for_dataset("shapes").unwrap()),
        ..Default::default()
    }
}

fn distill_cfg(epochs: usize, seed: u64) -> DistillConfig {
    DistillConfig {
        epochs,
        iters_per_epoch: 20,
        adi_cadence: 20,
        batch: 64,
        lr: 0.1,
        schedule: LrSchedule::Cosine,
        augment_shift: 2,
        seed,
        ..Default::default()
    }
}

/// Fresh student distilled from a growing store of synthesized batches;
/// returns its final test accuracy.
fn student_accuracy(
    teacher: &Model,
    syn: &SynthesisConfig,
    epochs: usize,
    seed: u64,
    size: usize,
    stats: Option<&FeatureStats<f32>>,
) -> f64 {
    let (_, test) = shapes(size);
    let mut student: Model = build_model(&spec("vgg_small:8-16-32", 10, size), &mut stream(7 + seed, Stream::Init)).unwrap();
    let syn = SynthesisConfig { seed: 1000 * seed, ..syn.clone() };
    let mut store = ImageStore::new();
    let eval = Evaluation { test: Some(test), heldout: None };
    let report =
        adaptive_loop_with_stats(teacher, &mut student, &syn, &distill_cfg(epochs, seed), &mut store, eval, stats).unwrap();
    report.epochs.last().unwrap().test_acc.unwrap()
}

#[test]
fn c01_gradients_match_finite_differences() {
    let _g = serial();
    let t = Instant::now();
    let results = gradcheck::all_results();
    let elapsed = t.elapsed();
    let worst = results.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failed: Vec<&str> = results.iter().filter(|r| r.1 >= gradcheck::TOL).map(|r| r.0.as_str()).collect();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(120);
    verdict(
        1,
        "gradients vs central differences",
        pass,
        &format!(
            "{} checks x {} instances, worst {} at {:.2e}, failed {failed:?}, {:.1}s",
            results.len(),
            gradcheck::INSTANCES,
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c02_synthesis_mode_ordering() {
    let _g = serial();
    let t = Instant::now();
    let teacher = teacher("vgg_small:8-16-32", 16);
    let t_acc = test_acc(&teacher, 16);
    let modes = [SynthMode::NoiseOnly, SynthMode::Deepdream, SynthMode::Deepinversion, SynthMode::Adaptive];
    let mut runs: Vec<Vec<f64>> = vec![Vec::new(); modes.len()];
    for seed in 0..3 {
        for (i, &mode) in modes.iter().enumerate() {
            runs[i].push(student_accuracy(&teacher, &syn_cfg(mode), 40, seed, 16, None));
        }
    }
    let m: Vec<f64> = runs.iter().map(|r| median(r.clone())).collect();
    let elapsed = t.elapsed();
    let pass = t_acc >= 0.95
        && m[0] < m[1]
        && m[1] < m[2]
        && m[2] < m[3]
        && m[2] >= m[0] + 0.30
        && m[3] >= m[2]
        && elapsed < Duration::from_secs(30 * 60);
    verdict(
        2,
        "noise < deepdream < DI < ADI",
        pass,
        &format!(
            "teacher {t_acc:.3}; medians noise {:.3} deepdream {:.3} di {:.3} adi {:.3}; runs {runs:.3?}; {:.0}s",
            m[0],
            m[1],
            m[2],
            m[3],
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c03_synthesized_images_transfer() {
    let _g = serial();
    let arch = "vgg_small:16-32-64";
    let teacher = teacher(arch, 16);
    let syn = SynthesisConfig { iterations: 1000, lr: 0.05, ..syn_cfg(SynthMode::Deepinversion) };
    let batch = synthesize(&teacher, &syn, None).unwrap();
    let own = batch.teacher_accuracy();
    let (train, _) = shapes(16);
    let mut other: Model = build_model(&spec(arch, 10, 16), &mut stream(11, Stream::Init)).unwrap();
    train_teacher(&mut other, train, &teacher_recipe(5), None).unwrap();
    let transfer = other.accuracy(&batch.pixels, &batch.targets).unwrap();
    verdict(
        3,
        "teacher and independent model on DI batch",
        own >= 0.95 && transfer >= 0.60,
        &format!(
            "teacher {own:.3} (test {:.3}), independent model {transfer:.3} (test {:.3})",
            test_acc(&teacher, 16),
            test_acc(&other, 16)
        ),
    );
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn c04_regularizer_decompositions() {
    let _g = serial();
    let teacher = teacher("vgg_small:8-16-32", 16);
    let mut prior_exact = 0;
    for k in 0..10u64 {
        let mut rng = stream(k, Stream::Data);
        let x_t = Tensor::<f32>::randn(&[4, 3, 16, 16], 1.0, &mut rng);
        let cfg = SynthesisConfig {
            alpha_f: 0.0,
            alpha_tv: 1e-4 * (k + 1) as f64,
            alpha_l2: 1e-5 * k as f64,
            ..syn_cfg(SynthMode::Deepinversion)
        };
        let mut g = Graph::new();
        let x = g.input(&x_t);
        let fwd = teacher.forward(&mut g, x, Mode::Eval, true).unwrap();
        let r = regularizer(&mut g, x, &fwd.taps, None, &cfg, &teacher.bn_stats()).unwrap();
        let p = r_prior(&mut g, x, cfg.alpha_tv, cfg.alpha_l2).unwrap();
        if g.scalar(r.total).to_bits() == g.scalar(p).to_bits() {
            prior_exact += 1;
        }
    }
    let base = SynthesisConfig { iterations: 40, batch: 16, ..syn_cfg(SynthMode::Deepinversion) };
    let di0 = synthesize(&teacher, &SynthesisConfig { alpha_f: 0.0, ..base.clone() }, None).unwrap();
    let dd = synthesize(&teacher, &SynthesisConfig { mode: SynthMode::Deepdream, ..base.clone() }, None).unwrap();
    let dream_equal = bits(&di0.pixels) == bits(&dd.pixels);

    let student: Model = build_model(&spec("vgg_small:8-16-32", 10, 16), &mut stream(7, Stream::Init)).unwrap();
    let di = synthesize(&teacher, &base, None).unwrap();
    let adi0 = synthesize(&teacher, &SynthesisConfig { mode: SynthMode::Adaptive, alpha_c: 0.0, ..base.clone() }, Some(&student))
        .unwrap();
    let adi_equal = bits(&di.pixels) == bits(&adi0.pixels) && di.targets == adi0.targets;
    let adi1 = synthesize(&teacher, &SynthesisConfig { mode: SynthMode::Adaptive, ..base }, Some(&student)).unwrap();
    let adi_differs = bits(&di.pixels) != bits(&adi1.pixels);
    verdict(
        4,
        "alpha_f=0 gives the prior, alpha_c=0 gives DI",
        prior_exact == 10 && dream_equal && adi_equal && adi_differs,
        &format!(
            "R_DI==R_prior bit-exact {prior_exact}/10; DI(alpha_f=0)==deepdream images {dream_equal}; \
             ADI(alpha_c=0)==DI images {adi_equal}; ADI(alpha_c=1)!=DI {adi_differs}"
        ),
    );
}

#[test]
fn c05_subset_statistics() {
    let _g = serial();
    let teacher = teacher("vgg_small:8-16-32", 16);
    let (train, _) = shapes(16);
    let syn = syn_cfg(SynthMode::Deepinversion);
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut bn = Vec::new();
    for seed in 0..3 {
        for k in [1usize, 10, 100] {
            let rows: Vec<usize> = (0..k).map(|i| (i * 37) % 1000).collect();
            let stats = stats_from_images(&teacher, &train.images.select_outer(&rows).unwrap(), k).unwrap();
            by_k.entry(k).or_default().push(student_accuracy(&teacher, &syn, 20, seed, 16, Some(&stats)));
        }
        bn.push(student_accuracy(&teacher, &syn, 20, seed, 16, None));
    }
    let m: Vec<f64> = by_k.values().map(|v| median(v.clone())).collect();
    let m_bn = median(bn.clone());
    let pass = m[0] <= m[1] && m[1] <= m[2] && (m[2] - m_bn).abs() <= 0.03;
    verdict(
        5,
        "subset statistics vs batch-norm statistics",
        pass,
        &format!(
            "medians k=1 {:.3} k=10 {:.3} k=100 {:.3} bn {m_bn:.3}; runs {by_k:.3?} bn {bn:.3?}",
            m[0], m[1], m[2]
        ),
    );
}

fn mean_ce(m: &Model, b: &LabeledBatch) -> f64 {
    let logits = m.predict(&b.images, 500).unwrap();
    let mut g = Graph::new();
    let shape = logits.shape().to_vec();
    let v = g.constant(&shape, logits.into_data()).unwrap();
    let ce = g.cross_entropy(v, &b.labels).unwrap();
    g.scalar(ce) as f64
}

#[test]
fn c06_taylor_ranking_vs_leave_one_out() {
    let _g = serial();
    let t = Instant::now();
    let teacher = teacher("vgg_small:8-16-32", 16);
    let (train, _) = shapes(16);
    let mut toy: Model = build_model(&spec("vgg_small:4-4", 10, 16), &mut stream(1, Stream::Init)).unwrap();
    train_teacher(&mut toy, train, &teacher_recipe(0), None).unwrap();
    insert_gates(&mut toy).unwrap();
    let spaces = channel_spaces(&toy).unwrap();
    let filters: usize = spaces.iter().map(|s| s.width).sum();
    let batches: Vec<LabeledBatch> =
        (0..100).map(|i| train.select(&(i * 10..(i + 1) * 10).collect::<Vec<_>>()).unwrap()).collect();
    let all = train.select(&(0..1000).collect::<Vec<_>>()).unwrap();
    let ce = taylor_importance(&toy, &spaces, &batches, ImportanceLoss::CeLabels, None, 1, 1.0).unwrap();
    let kl = taylor_importance(&toy, &spaces, &batches, ImportanceLoss::KlTeacher, Some(&teacher), 1, 1.0).unwrap();
    let base = mean_ce(&toy, &all);
    let mut loo = Vec::new();
    for s in &spaces {
        for c in 0..s.width {
            let mut m = toy.clone();
            set_gate(&mut m, s, c, 0.0).unwrap();
            loo.push(mean_ce(&m, &all) - base);
        }
    }
    let (ce, kl) = (ce.scores.concat(), kl.scores.concat());
    let rho_loo = spearman(&ce, &loo);
    let rho_kl = spearman(&ce, &kl);
    let elapsed = t.elapsed();
    verdict(
        6,
        "Taylor ranking vs leave-one-out and label-free ranking",
        filters <= 8 && rho_loo >= 0.7 && rho_kl >= 0.7 && elapsed < Duration::from_secs(300),
        &format!(
            "{filters} filters; rho(ce, loo) {rho_loo:.3}; rho(ce, kl) {rho_kl:.3}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn prune_base() -> PruneConfig {
    PruneConfig { steps_between: 30, finetune_epochs: 5, lr: 0.01, ..Default::default() }
}

fn real_images(n: usize) -> Tensor<f32> {
    let (train, _) = shapes(16);
    train.images.select_outer(&(0..n).collect::<Vec<_>>()).unwrap()
}

#[test]
fn c07_latency_aware_pruning() {
    let _g = serial();
    let teacher = teacher("vgg_small:16-16-32", 16);
    let (_, test) = shapes(16);
    let lut = build_lut(&teacher, &CostModel { per_mac_ms: 1e-5, overhead_ms: 1e-3 }).unwrap();
    let full = estimate_latency(&teacher, &lut).unwrap();
    let budget = 0.4 * full;
    let images = real_images(640);
    let eval = Evaluation { test: Some(test), heldout: None };
    let mut acc: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut met = true;
    for seed in 0..3 {
        for (i, eta) in [0.0, 0.01].into_iter().enumerate() {
            let cfg = PruneConfig { target: PruneTarget::LatencyMs(budget), eta, seed, ..prune_base() };
            let r = prune_loop(&teacher, &teacher, &images, &lut, &cfg, eval).unwrap();
            met &= estimate_latency(&r.model, &lut).unwrap() <= budget;
            acc[i].push(test_acc(&r.model, 16));
        }
    }
    let (m0, m1) = (median(acc[0].clone()), median(acc[1].clone()));
    verdict(
        7,
        "eta=0.01 vs eta=0 at a latency budget",
        met && m1 >= m0,
        &format!(
            "budget {budget:.4} of {full:.4} ms, met {met}; median eta=0 {m0:.3} eta=0.01 {m1:.3}; runs {acc:.3?}"
        ),
    );
}

#[test]
fn c08_data_free_pruning_gap() {
    let _g = serial();
    let teacher = teacher("vgg_small:16-16-32", 16);
    let (_, test) = shapes(16);
    let syn = syn_cfg(SynthMode::Deepinversion);
    let parts: Vec<Tensor<f32>> =
        (0..10).map(|r| synthesize(&teacher, &SynthesisConfig { seed: r, ..syn.clone() }, None).unwrap().pixels).collect();
    let di = Tensor::cat_outer(&parts.iter().collect::<Vec<_>>()).unwrap();
    let real = real_images(di.shape()[0]);
    let lut = build_lut(&teacher, &CostModel { per_mac_ms: 1e-5, overhead_ms: 1e-3 }).unwrap();
    let cfg = PruneConfig { target: PruneTarget::Filters(0.3), ..prune_base() };
    let eval = Evaluation { test: Some(test), heldout: None };
    let run = |images: &Tensor<f32>| {
        let r = prune_loop(&teacher, &teacher, images, &lut, &cfg, eval).unwrap();
        let removed = 1.0 - r.steps.last().unwrap().filters_remaining as f64 / r.initial_filters as f64;
        (test_acc(&r.model, 16), removed)
    };
    let (a_di, removed_di) = run(&di);
    let (a_real, removed_real) = run(&real);
    verdict(
        8,
        "pruning 30% with DI images vs real images",
        removed_di >= 0.3 && removed_real >= 0.3 && a_real - a_di <= 0.05,
        &format!(
            "{} images; DI {a_di:.3} (removed {removed_di:.2}), real {a_real:.3} (removed {removed_real:.2}), gap {:.1} points",
            di.shape()[0],
            100.0 * (a_real - a_di)
        ),
    );
}

fn snapshot(m: &Model) -> Vec<(String, Vec<u32>)> {
    m.named_tensors().into_iter().map(|(n, t)| (n, bits(t))).collect()
}

fn bn_buffers(m: &Model) -> Vec<Vec<u32>> {
    m.layers
        .iter()
        .filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some([bits(&bn.running_mean), bits(&bn.running_var)].concat()),
            _ => None,
        })
        .collect()
}

#[test]
fn c09_class_incremental_replay() {
    let _g = serial();
    let (train, test) = shapes(16);
    let old_train = train.filter_classes(0, 7).unwrap().relabel(0, 7).unwrap();
    let old_test = test.filter_classes(0, 7).unwrap();
    let new_test = test.filter_classes(7, 10).unwrap();
    let new_train = train.filter_classes(7, 10).unwrap().select(&(0..300).collect::<Vec<_>>()).unwrap();
    let mut old: Model = build_model(&spec("vgg_small:8-16-32", 7, 16), &mut stream(0, Stream::Init)).unwrap();
    train_teacher(&mut old, &old_train, &teacher_recipe(0), None).unwrap();
    let old_acc = old.accuracy(&old_test.images, &old_test.labels).unwrap();
    let before = snapshot(&old);

    let per_class: usize = 50;
    let n = 7 * per_class;
    let syn = syn_cfg(SynthMode::Deepinversion);
    let parts: Vec<Tensor<f32>> = (0..n.div_ceil(syn.batch) as u64)
        .map(|r| synthesize(&old, &SynthesisConfig { seed: r, ..syn.clone() }, None).unwrap().pixels)
        .collect();
    let di = Tensor::cat_outer(&parts.iter().collect::<Vec<_>>()).unwrap().slice_outer(0, n).unwrap();
    let real_rows: Vec<usize> = (0..7)
        .flat_map(|c| old_train.labels.iter().enumerate().filter(move |(_, &l)| l == c).map(|(i, _)| i).take(per_class))
        .collect();
    let real = old_train.images.select_outer(&real_rows).unwrap();

    let cfg = ContinualConfig { epochs: 40, lr: 0.2, ..Default::default() };
    let mut results = Vec::new();
    let mut old_intact = true;
    let mut bn_frozen = true;
    for (replay, third) in [(None, false), (Some(di), true), (Some(real), false)] {
        let mut task = ContinualTask::new(&old, 3, replay, new_train.clone(), 0).unwrap();
        let r = continual_train(&mut task, &ContinualConfig { old_slice_term: third, ..cfg.clone() }, &old_test, &new_test)
            .unwrap();
        old_intact &= snapshot(&task.old) == before;
        bn_frozen &= bn_buffers(&task.new) == bn_buffers(&old);
        results.push(r.combined_acc);
    }
    old_intact &= snapshot(&old) == before;
    let (none, di, real) = (results[0], results[1], results[2]);
    verdict(
        9,
        "DI replay vs no replay and real replay",
        di >= none + 0.10 && (real - di).abs() <= 0.05 && old_intact && bn_frozen,
        &format!(
            "old model {old_acc:.3}; combined none {none:.3} di {di:.3} real {real:.3}; \
             old model bit-exact {old_intact}; bn buffers frozen {bn_frozen}"
        ),
    );
}

#[test]
fn c10_multiresolution_synthesis() {
    let _g = serial();
    let teacher = teacher("vgg_small:8-16-32", 32);
    let single = SynthesisConfig { iterations: 150, ..syn_cfg(SynthMode::Deepinversion) };
    let multi = SynthesisConfig {
        multires: Some(Multires { low_res: 16, low_iters: 50, high_iters: 100 }),
        ..single.clone()
    };
    let time = |cfg: &SynthesisConfig| {
        let t = Instant::now();
        for seed in 0..3 {
            synthesize(&teacher, &SynthesisConfig { seed, ..cfg.clone() }, None).unwrap();
        }
        t.elapsed().as_secs_f64()
    };
    let (t_single, t_multi) = (time(&single), time(&multi));
    let a_single = student_accuracy(&teacher, &single, 20, 0, 32, None);
    let a_multi = student_accuracy(&teacher, &multi, 20, 0, 32, None);
    verdict(
        10,
        "16->32 two-phase vs single-phase synthesis",
        t_multi < t_single && (a_multi - a_single).abs() <= 0.03,
        &format!(
            "teacher {:.3}; synthesis time single {t_single:.1}s multires {t_multi:.1}s; \
             student single {a_single:.3} multires {a_multi:.3}",
            test_acc(&teacher, 32)
        ),
    );
}

fn dinv(out: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_dinv"))
        .args(["--seed", "3", "--workers", "1", "--image-size", "16", "--per-class", "30", "--test-per-class", "10"])
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("DINV_OUT")
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "dinv {args:?} failed with {status}");
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn c11_cli_determinism() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let teacher = a.join("teach/teacher.ckpt");
    let old = a.join("old/teacher.ckpt");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("teach", vec!["train-teacher".into(), "--arch".into(), "vgg_small:4-8".into(), "--epochs".into(), "2".into()]),
        (
            "old",
            vec!["train-teacher", "--arch", "vgg_small:4-8", "--epochs", "2", "--first-classes", "7"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "inv",
            vec!["invert", "--teacher", &p(&teacher), "--mode", "di", "--batch", "8", "--iters", "5", "--batches", "2"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "inv_adi",
            ["invert", "--teacher", &p(&teacher), "--student", &p(&teacher), "--mode", "adi", "--batch", "4", "--iters", "3"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "dist",
            [
                "distill", "--teacher", &p(&teacher), "--student-arch", "vgg_small:4-8", "--images",
                &p(&a.join("inv/images.dinv")), "--epochs", "2",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "adapt",
            [
                "distill", "--teacher", &p(&teacher), "--student-arch", "vgg_small:4-8", "--adaptive", "--mode", "adi",
                "--epochs", "2", "--iters-per-epoch", "2", "--cadence", "2", "--syn-batch", "4", "--iters", "3",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        ("lut", ["build-lut", "--model", &p(&teacher)].into_iter().map(String::from).collect()),
        (
            "prune",
            [
                "prune", "--teacher", &p(&teacher), "--real", "--target-filters", "0.25", "--finetune-epochs", "1",
                "--steps-between", "3",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "cont",
            [
                "continual", "--old", &p(&old), "--replay", "di", "--replay-count", "12", "--syn-batch", "8", "--iters", "3",
                "--epochs", "2",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
    ];
    let mut teacher_bytes = None;
    for (dir, args) in &commands {
        for root in [&a, &b] {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            dinv(&root.join(dir), &args);
        }
        if *dir == "teach" {
            teacher_bytes = Some(std::fs::read(&teacher).unwrap());
        }
    }
    let (fa, fb) = (files(&a), files(&b));
    let differing: Vec<&PathBuf> = fa.iter().filter(|(k, v)| fb.get(*k) != Some(v)).map(|(k, _)| k).collect();
    let same_set = fa.keys().eq(fb.keys());
    let untouched = teacher_bytes.as_deref() == Some(&std::fs::read(&teacher).unwrap()[..]);
    verdict(
        11,
        "CLI outputs byte-identical across runs",
        same_set && differing.is_empty() && untouched && fa.len() > 20,
        &format!(
            "{} commands, {} files compared, differing {differing:?}, same file set {same_set}, input checkpoint untouched {untouched}",
            commands.len(),
            fa.len()
        ),
    );
}
