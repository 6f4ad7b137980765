use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dinv_core::data::Preprocess;
use dinv_core::distill::{
    adaptive_loop, append_metrics_csv, continual_train, distill as run_distill, save_replay, train_teacher as run_train,
    ContinualTask, EpochMetrics, Evaluation,
};
use dinv_core::inversion::{
    export_ppm, synthesize, synthesize_multires, ImageBatch, ImageStore, SynthMode, SynthesisConfig,
};
use dinv_core::nn::checkpoint::{StoredTensor, TensorFile};
use dinv_core::nn::{build_model, Arch, ArchSpec};
use dinv_core::pruning::{
    build_lut as make_lut, estimate_latency, prunable_filters, channel_spaces, prune_loop, write_prune_csv, LatencyLut,
    PruneTarget,
};
use dinv_core::rng::{stream, Stream};
use dinv_core::{Model, Tensor};

use crate::config::{RunConfig, Snapshot};
use crate::data::{preprocess_for, Dataset};
use crate::error::{io, usage, CliError};
use crate::{set, BuildLutArgs, ContinualArgs, DistillArgs, InvertArgs, PruneArgs, ReplayArg, SynthArgs, TrainArgs};

pub struct Context {
    pub cfg: RunConfig,
    out: PathBuf,
    workers: usize,
    inputs: Vec<(&'static str, PathBuf)>,
}

impl Context {
    pub fn new(cfg: RunConfig, out: &Path, workers: usize) -> Self {
        Self { cfg, out: out.to_path_buf(), workers, inputs: Vec::new() }
    }

    fn input(&mut self, role: &'static str, path: &Path) -> Result<(), CliError> {
        if !path.exists() {
            return Err(io(path, std::io::ErrorKind::NotFound.into()));
        }
        self.inputs.push((role, path.to_path_buf()));
        Ok(())
    }

    /// Checks that no planned output overwrites an input, creates the output
    /// directory and writes `<command>.toml`.
    fn begin(&self, command: &str, outputs: &[&str]) -> Result<(), CliError> {
        for name in outputs {
            self.output(name)?;
        }
        std::fs::create_dir_all(&self.out).map_err(|e| io(&self.out, e))?;
        let snapshot = Snapshot {
            command,
            inputs: self.inputs.iter().map(|(r, p)| (*r, p.display().to_string())).collect(),
            config: &self.cfg,
        };
        let path = self.output(&format!("{command}.toml"))?;
        write(&path, snapshot.to_toml()?)
    }

    /// Output path, refusing to clobber any input.
    fn output(&self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        if let Ok(target) = path.canonicalize() {
            for (role, input) in &self.inputs {
                if input.canonicalize().is_ok_and(|p| p == target) {
                    return Err(usage(format!("output {} would overwrite the {role} input", path.display())));
                }
            }
        }
        Ok(path)
    }

    /// Output path with any previous file removed, for append-style writers.
    fn fresh_output(&self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.output(name)?;
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| io(&path, e))?;
        }
        Ok(path)
    }
}

fn write(path: &Path, text: String) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Ok(Model::load_checkpoint(path)?.0)
}

fn final_acc(metrics: &[EpochMetrics]) -> f64 {
    metrics.last().and_then(|m| m.test_acc).unwrap_or(f64::NAN)
}

fn apply_synth_args(cfg: &mut SynthesisConfig, a: &SynthArgs, pre: Preprocess) {
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    set(&mut cfg.iterations, a.iters);
    set(&mut cfg.alpha_tv, a.alpha_tv);
    set(&mut cfg.alpha_l2, a.alpha_l2);
    set(&mut cfg.alpha_f, a.alpha_f);
    set(&mut cfg.alpha_c, a.alpha_c);
    set(&mut cfg.jitter_px, a.jitter);
    if a.no_flip {
        cfg.random_flip = false;
    }
    if a.no_clip {
        cfg.clip = None;
    } else if cfg.clip.is_none() {
        cfg.clip = Some(pre);
    }
    if a.multires.is_some() {
        cfg.multires = a.multires;
    }
}

fn check_pair(a: &Model, b: &Model, what: &str) -> Result<(), CliError> {
    if a.classes != b.classes {
        return Err(usage(format!("teacher has {} classes, {what} has {}", a.classes, b.classes)));
    }
    if a.input_shape != b.input_shape {
        return Err(usage(format!("teacher takes {:?} images, {what} takes {:?}", a.input_shape, b.input_shape)));
    }
    Ok(())
}

/// Synthesizes `n` batches, batch `b` with seed `cfg.seed + b`, spread over
/// `workers` threads. The result does not depend on `workers`.
fn synthesize_batches(
    teacher: &Model,
    student: Option<&Model>,
    cfg: &SynthesisConfig,
    n: usize,
    workers: usize,
) -> Result<Vec<ImageBatch>, CliError> {
    let one = |b: usize| -> dinv_core::Result<ImageBatch> {
        let c = SynthesisConfig { seed: cfg.seed.wrapping_add(b as u64), ..cfg.clone() };
        let mut out = match c.multires {
            Some(_) => synthesize_multires(teacher, &c, student)?,
            None => synthesize(teacher, &c, student)?,
        };
        out.round = b;
        Ok(out)
    };
    let workers = workers.clamp(1, n.max(1));
    let mut done: Vec<(usize, dinv_core::Result<ImageBatch>)> = if workers == 1 {
        (0..n).map(|b| (b, one(b))).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let one = &one;
                    s.spawn(move || (w..n).step_by(workers).map(|b| (b, one(b))).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("synthesis worker panicked")).collect()
        })
    };
    done.sort_by_key(|(b, _)| *b);
    Ok(done.into_iter().map(|(_, r)| r).collect::<dinv_core::Result<_>>()?)
}

fn merge_batches(batches: Vec<ImageBatch>) -> Result<ImageBatch, CliError> {
    let pixels: Vec<&Tensor> = batches.iter().map(|b| &b.pixels).collect();
    let pixels = Tensor::cat_outer(&pixels)?;
    let mut merged = ImageBatch { pixels, ..batches[0].clone() };
    merged.targets.clear();
    merged.teacher_top1.clear();
    merged.confidence.clear();
    merged.trace.clear();
    for b in &batches {
        merged.targets.extend(&b.targets);
        merged.teacher_top1.extend(&b.teacher_top1);
        merged.confidence.extend(&b.confidence);
    }
    Ok(merged)
}

fn load_images(path: &Path) -> Result<Tensor, CliError> {
    let file = TensorFile::load(path)?;
    let t = file.get("images").ok_or_else(|| dinv_core::Error::Format {
        source_name: path.display().to_string(),
        reason: "no `images` tensor".into(),
    })?;
    Ok(t.to_tensor()?)
}

fn check_images(images: &Tensor, model: &Model) -> Result<(), CliError> {
    if images.shape().get(1..) != Some(&model.input_shape[..]) {
        return Err(usage(format!(
            "images {:?} do not fit model input {:?}",
            images.shape(),
            model.input_shape
        )));
    }
    Ok(())
}

pub fn train_teacher(ctx: Context, a: TrainArgs) -> Result<(), CliError> {
    let mut ctx = ctx;
    let t = &mut ctx.cfg.train;
    set(&mut t.epochs, a.epochs);
    set(&mut t.lr, a.lr);
    set(&mut t.batch, a.batch);
    let arch: Arch = a.arch.parse().map_err(CliError::Core)?;
    let data = Dataset::load(&ctx.cfg.data, ctx.cfg.seed)?;
    let (train, test) = match a.first_classes {
        Some(k) if k == 0 || k > data.train.classes => {
            return Err(usage(format!("--first-classes {k} outside 1..={}", data.train.classes)))
        }
        Some(k) => (
            data.train.filter_classes(0, k)?.relabel(0, k)?,
            data.test.filter_classes(0, k)?.relabel(0, k)?,
        ),
        None => (data.train.clone(), data.test.clone()),
    };
    ctx.begin("train-teacher", &["teacher.ckpt", "train_metrics.csv"])?;
    let spec = ArchSpec::new(arch.clone(), train.classes, data.image_shape());
    let mut model: Model = build_model(&spec, &mut stream(ctx.cfg.seed, Stream::Init))?;
    let metrics = run_train(&mut model, &train, &ctx.cfg.train, Some(&test))?;
    append_metrics_csv(&ctx.fresh_output("train_metrics.csv")?, "test", &metrics)?;
    model.save_checkpoint(
        &ctx.output("teacher.ckpt")?,
        meta(&[
            ("arch", arch.to_string()),
            ("data", ctx.cfg.data.source.clone()),
            ("seed", ctx.cfg.seed.to_string()),
        ]),
    )?;
    println!("test accuracy {:.4}", final_acc(&metrics));
    Ok(())
}

pub fn invert(mut ctx: Context, a: InvertArgs) -> Result<(), CliError> {
    ctx.input("teacher", &a.teacher)?;
    if let Some(s) = &a.student {
        ctx.input("student", s)?;
    }
    let pre = preprocess_for(&ctx.cfg.data)?;
    let syn = &mut ctx.cfg.synthesis;
    apply_synth_args(syn, &a.syn, pre.clone());
    set(&mut syn.batch, a.batch);
    set(&mut syn.lr, a.lr);
    if a.batches == 0 {
        return Err(usage("--batches must be at least 1"));
    }
    let teacher = load_model(&a.teacher)?;
    let student = match (&a.student, ctx.cfg.synthesis.mode) {
        (None, SynthMode::Adaptive) => return Err(usage("--mode adi needs --student")),
        (Some(p), _) => {
            let s = load_model(p)?;
            check_pair(&teacher, &s, "student")?;
            Some(s)
        }
        (None, _) => None,
    };
    if teacher.input_shape[0] != pre.channels() {
        return Err(usage(format!(
            "teacher takes {} channels, {} has {}",
            teacher.input_shape[0],
            ctx.cfg.data.source,
            pre.channels()
        )));
    }
    ctx.cfg.synthesis.validate()?;
    ctx.begin("invert", &["images.dinv"])?;
    let batches = synthesize_batches(&teacher, student.as_ref(), &ctx.cfg.synthesis, a.batches, ctx.workers)?;
    let all = merge_batches(batches)?;
    export_ppm(&ctx.output("images")?, &all, &pre)?;
    let targets: Vec<f32> = all.targets.iter().map(|&t| t as f32).collect();
    TensorFile {
        descriptor: "images".into(),
        meta: meta(&[("mode", format!("{:?}", ctx.cfg.synthesis.mode)), ("config_hash", all.config_hash.to_string())]),
        tensors: vec![
            StoredTensor::from_tensor("images", &all.pixels),
            StoredTensor::from_tensor("targets", &Tensor::from_vec(&[targets.len()], targets)?),
        ],
    }
    .save(&ctx.output("images.dinv")?)?;
    println!("{} images, teacher top-1 on targets {:.4}", all.len(), all.teacher_accuracy());
    Ok(())
}

pub fn distill(mut ctx: Context, a: DistillArgs) -> Result<(), CliError> {
    ctx.input("teacher", &a.teacher)?;
    if let Some(p) = &a.student {
        ctx.input("student", p)?;
    }
    if let Some(p) = &a.images {
        ctx.input("images", p)?;
    }
    let pre = preprocess_for(&ctx.cfg.data)?;
    let d = &mut ctx.cfg.distill;
    set(&mut d.epochs, a.epochs);
    set(&mut d.lr, a.lr);
    set(&mut d.batch, a.batch);
    set(&mut d.temperature, a.temperature);
    set(&mut d.iters_per_epoch, a.iters_per_epoch);
    set(&mut d.adi_cadence, a.cadence);
    let syn = &mut ctx.cfg.synthesis;
    apply_synth_args(syn, &a.syn, pre);
    set(&mut syn.batch, a.syn_batch);
    set(&mut syn.lr, a.syn_lr);
    ctx.cfg.distill.validate()?;

    let teacher = load_model(&a.teacher)?;
    let data = Dataset::load(&ctx.cfg.data, ctx.cfg.seed)?;
    data.check_model(&teacher, "teacher")?;
    let mut student = match (&a.student, &a.student_arch) {
        (Some(p), _) => load_model(p)?,
        (None, Some(arch)) => {
            let spec = ArchSpec::new(arch.parse().map_err(CliError::Core)?, teacher.classes, teacher.input_shape.clone());
            build_model(&spec, &mut stream(ctx.cfg.seed, Stream::Init))?
        }
        (None, None) => return Err(usage("--student or --student-arch is required")),
    };
    check_pair(&teacher, &student, "student")?;
    let eval = Evaluation { test: Some(&data.test), heldout: None };
    ctx.begin("distill", &["student.ckpt", "distill_metrics.csv", "rounds.csv"])?;
    let metrics = if a.adaptive {
        ctx.cfg.synthesis.validate()?;
        let mut store = ImageStore::new();
        let report = adaptive_loop(&teacher, &mut student, &ctx.cfg.synthesis, &ctx.cfg.distill, &mut store, eval)?;
        let mut rows = String::from("round,iteration,fresh_acc,seen_acc\n");
        for r in &report.rounds {
            let seen = r.seen_acc.map_or(String::new(), |v| format!("{v:.6}"));
            rows.push_str(&format!("{},{},{:.6},{seen}\n", r.round, r.iteration, r.fresh_acc));
        }
        write(&ctx.output("rounds.csv")?, rows)?;
        report.epochs
    } else {
        let images = match &a.images {
            Some(p) => load_images(p)?,
            None => data.train.images_only(),
        };
        check_images(&images, &teacher)?;
        run_distill(&teacher, &mut student, &images, &ctx.cfg.distill, eval)?
    };
    append_metrics_csv(&ctx.fresh_output("distill_metrics.csv")?, "test", &metrics)?;
    student.save_checkpoint(
        &ctx.output("student.ckpt")?,
        meta(&[("teacher", a.teacher.display().to_string()), ("seed", ctx.cfg.seed.to_string())]),
    )?;
    println!("student test accuracy {:.4}", final_acc(&metrics));
    Ok(())
}

pub fn prune(mut ctx: Context, a: PruneArgs) -> Result<(), CliError> {
    ctx.input("teacher", &a.teacher)?;
    if let Some(p) = &a.images {
        ctx.input("images", p)?;
    }
    if let Some(p) = &a.lut {
        ctx.input("lut", p)?;
    }
    let p = &mut ctx.cfg.prune;
    if let Some(f) = a.target_filters {
        p.target = PruneTarget::Filters(f);
    }
    if let Some(ms) = a.target_latency_ms {
        p.target = PruneTarget::LatencyMs(ms);
    }
    set(&mut p.eta, a.eta);
    set(&mut p.finetune_epochs, a.finetune_epochs);
    set(&mut p.lr, a.lr);
    set(&mut p.steps_between, a.steps_between);
    set(&mut p.group_size, a.group_size);
    set(&mut p.filters_per_step, a.filters_per_step);
    p.validate()?;

    let teacher = load_model(&a.teacher)?;
    let data = Dataset::load(&ctx.cfg.data, ctx.cfg.seed)?;
    data.check_model(&teacher, "teacher")?;
    let images = match &a.images {
        Some(p) => load_images(p)?,
        None => data.train.images_only(),
    };
    check_images(&images, &teacher)?;
    let outputs: &[&str] = if a.lut.is_some() { &["pruned.ckpt", "prune.csv"] } else { &["pruned.ckpt", "prune.csv", "lut.txt"] };
    ctx.begin("prune", outputs)?;
    let lut = match &a.lut {
        Some(p) => LatencyLut::load(p)?,
        None => {
            let lut = make_lut(&teacher, &ctx.cfg.prune.cost)?;
            lut.save(&ctx.output("lut.txt")?)?;
            lut
        }
    };
    let eval = Evaluation { test: Some(&data.test), heldout: None };
    let report = prune_loop(&teacher, &teacher, &images, &lut, &ctx.cfg.prune, eval)?;
    write_prune_csv(&ctx.output("prune.csv")?, &report.steps)?;
    let model = &report.model;
    let filters = prunable_filters(&channel_spaces(model)?);
    let latency = estimate_latency(model, &lut)?;
    let acc = model.accuracy(&data.test.images, &data.test.labels)?;
    model.save_checkpoint(
        &ctx.output("pruned.ckpt")?,
        meta(&[("teacher", a.teacher.display().to_string()), ("seed", ctx.cfg.seed.to_string())]),
    )?;
    println!(
        "filters {}/{}, estimated latency {latency:.4} ms, test accuracy {acc:.4}",
        filters, report.initial_filters
    );
    Ok(())
}

pub fn continual(mut ctx: Context, a: ContinualArgs) -> Result<(), CliError> {
    ctx.input("old", &a.old)?;
    let pre = preprocess_for(&ctx.cfg.data)?;
    let c = &mut ctx.cfg.continual;
    set(&mut c.epochs, a.epochs);
    set(&mut c.lr, a.lr);
    set(&mut c.batch, a.batch);
    let syn = &mut ctx.cfg.synthesis;
    apply_synth_args(syn, &a.syn, pre);
    set(&mut syn.batch, a.syn_batch);
    set(&mut syn.lr, a.syn_lr);
    let replay = if a.no_replay { ReplayArg::None } else { a.replay };

    let old = load_model(&a.old)?;
    let data = Dataset::load(&ctx.cfg.data, ctx.cfg.seed)?;
    let (k, total) = (old.classes, data.train.classes);
    if k >= total {
        return Err(usage(format!("old model already has {k} classes, data has {total}")));
    }
    if old.input_shape != data.image_shape() {
        return Err(usage(format!("old model takes {:?}, data has {:?}", old.input_shape, data.image_shape())));
    }
    ctx.begin("continual", &["continual.ckpt", "continual.csv", "replay.dinv"])?;
    let replay_images = match replay {
        ReplayArg::None => None,
        _ if a.replay_count == 0 => return Err(usage("--replay-count must be positive")),
        ReplayArg::Real => {
            let pool = data.train.filter_classes(0, k)?;
            if pool.len() < a.replay_count {
                return Err(usage(format!("only {} old-class images for --replay-count {}", pool.len(), a.replay_count)));
            }
            let rows: Vec<usize> = (0..a.replay_count).collect();
            Some(pool.images.select_outer(&rows)?)
        }
        ReplayArg::Di => {
            let syn = &ctx.cfg.synthesis;
            syn.validate()?;
            if syn.mode == SynthMode::Adaptive {
                return Err(usage("replay synthesis cannot use --mode adi"));
            }
            let n = a.replay_count.div_ceil(syn.batch);
            let all = merge_batches(synthesize_batches(&old, None, syn, n, ctx.workers)?)?;
            let rows: Vec<usize> = (0..a.replay_count).collect();
            Some(all.pixels.select_outer(&rows)?)
        }
    };
    let new_data = data.train.filter_classes(k, total)?;
    let mut task = ContinualTask::new(&old, total - k, replay_images, new_data, ctx.cfg.seed)?;
    if let Some((imgs, soft)) = &task.replay {
        save_replay(&ctx.output("replay.dinv")?, imgs, soft, meta(&[("replay", format!("{replay:?}"))]))?;
    }
    let old_test = data.test.filter_classes(0, k)?;
    let new_test = data.test.filter_classes(k, total)?;
    let report = continual_train(&mut task, &ctx.cfg.continual, &old_test, &new_test)?;
    let mut rows = String::from("epoch,train_loss\n");
    for (e, l) in report.losses.iter().enumerate() {
        rows.push_str(&format!("{e},{l:.6}\n"));
    }
    rows.push_str(&format!(
        "# combined_acc={:.6} old_acc={:.6} new_acc={:.6}\n",
        report.combined_acc, report.old_acc, report.new_acc
    ));
    write(&ctx.output("continual.csv")?, rows)?;
    task.new.save_checkpoint(
        &ctx.output("continual.ckpt")?,
        meta(&[("old", a.old.display().to_string()), ("replay", format!("{replay:?}"))]),
    )?;
    println!(
        "combined accuracy {:.4} (old {:.4}, new {:.4})",
        report.combined_acc, report.old_acc, report.new_acc
    );
    Ok(())
}

pub fn build_lut(mut ctx: Context, a: BuildLutArgs) -> Result<(), CliError> {
    ctx.input("model", &a.model)?;
    let cost = &mut ctx.cfg.prune.cost;
    set(&mut cost.per_mac_ms, a.per_mac_ms);
    set(&mut cost.overhead_ms, a.overhead_ms);
    let model = load_model(&a.model)?;
    ctx.begin("build-lut", &["lut.txt"])?;
    let lut = make_lut(&model, &ctx.cfg.prune.cost)?;
    lut.save(&ctx.output("lut.txt")?)?;
    println!("{} entries, estimated latency {:.4} ms", lut.entries.len(), estimate_latency(&model, &lut)?);
    Ok(())
}
