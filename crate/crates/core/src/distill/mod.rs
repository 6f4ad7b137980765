//! Teacher training, temperature-scaled knowledge distillation, the
//! student-in-the-loop synthesis schedule and class-incremental learning.

mod adaptive;
mod continual;

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use adaptive::{adaptive_loop, adaptive_loop_with_stats, AdaptiveReport, RoundMetrics};
pub use continual::{continual_loss, continual_train, load_replay, save_replay, ContinualConfig, ContinualLossParts, ContinualReport, ContinualTask};

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Forward, Mode, Model};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::real::Real;
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

/// `KL(softmax(t/τ) ‖ softmax(s/τ))` averaged over rows, natural log. The
/// teacher logits are treated as constants.
pub fn kd_loss<T: Real>(g: &mut Graph<T>, teacher_logits: Var, student_logits: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let ts = g.shape(teacher_logits).to_vec();
    if ts.len() != 2 || g.shape(student_logits) != ts.as_slice() {
        return Err(Error::shape("kd_loss", format!("{ts:?} vs {:?}", g.shape(student_logits))));
    }
    let inv = T::lit(1.0 / tau);
    let scaled_t: Vec<T> = g.value(teacher_logits).iter().map(|&v| v * inv).collect();
    let pt_data = crate::graph::softmax_rows(&scaled_t, ts[0], ts[1]);
    let pt = g.constant(&ts, pt_data)?;
    let ss = g.scale(student_logits, inv);
    let log_ps = g.log_softmax(ss)?;
    let self_term = g.xlogy(pt, pt)?;
    let cross = g.mul(pt, log_ps)?;
    let diff = g.sub(self_term, cross)?;
    let total = g.sum(diff);
    Ok(g.scale(total, T::lit(1.0 / ts[0].max(1) as f64)))
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
    /// Multiply by `factor` at each listed fraction of the total epochs.
    Milestones { fractions: Vec<f64>, factor: f64 },
    /// Half-cosine decay to zero.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize, total: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Step { every, factor } => base * factor.powi((epoch / (*every).max(1)) as i32),
            Self::Milestones { fractions, factor } => {
                let passed = fractions.iter().filter(|&&f| epoch as f64 >= f * total as f64).count();
                base * factor.powi(passed as i32)
            }
            Self::Cosine => {
                let t = epoch as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Decay to 20% at 1/3, 1/2, 2/3 and 5/6 of training.
    pub fn incremental() -> Self {
        Self::Milestones {
            fractions: vec![1.0 / 3.0, 0.5, 2.0 / 3.0, 5.0 / 6.0],
            factor: 0.2,
        }
    }
}

/// Per-image random horizontal flip and zero-filled translation by up to
/// `shift` pixels.
pub fn augment_batch<T: Real>(images: &Tensor<T>, shift: usize, rng: &mut Rng) -> Tensor<T> {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![T::zero(); images.numel()];
    let src = images.data();
    let j = shift as i64;
    for i in 0..n {
        let flip = rng.random_bool(0.5);
        let (dy, dx) = if j > 0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0, 0)
        };
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h as i64 {
                let sy = y - dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w as i64 {
                    let xr = if flip { w as i64 - 1 - x } else { x };
                    let sx = xr - dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    out[base + (y as usize) * w + x as usize] = src[base + (sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

/// Shuffled minibatch index lists covering `0..n`.
pub(crate) fn minibatches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Backpropagated gradients to parameters, running-stat update, optional
/// clipping and one optimizer step. Returns the post-clip gradient norm.
pub(crate) fn apply_step<T: Real>(
    model: &mut Model<T>,
    g: &Graph<T>,
    fwd: &Forward<T>,
    opt: &mut Optimizer<T>,
    clip: Option<f64>,
) -> Result<f64> {
    model.zero_grad();
    model.accumulate_grads(g, fwd)?;
    model.update_running_stats(&fwd.bn_stats);
    let mut params: Vec<&mut Tensor<T>> = model.params_mut().into_iter().filter(|p| p.requires_grad()).collect();
    if let Some(max) = clip {
        clip_grad_norm(&mut params, max);
    }
    let norm = crate::optim::grad_norm(&params).to_f64().unwrap();
    opt.step(&mut params)?;
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Max translation for per-image augmentation; flips come with it. 0 disables both.
    pub augment_shift: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.05,
            batch: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine,
            augment_shift: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_acc: Option<f64>,
    /// KD loss on a fixed held-out batch, evaluated after the epoch.
    pub heldout_loss: Option<f64>,
}

/// Trains `model` with cross-entropy and SGD momentum. Returns per-epoch
/// metrics; `test` accuracies are eval-mode.
pub fn train_teacher<T: Real>(
    model: &mut Model<T>,
    data: &LabeledBatch<T>,
    cfg: &TrainConfig,
    test: Option<&LabeledBatch<T>>,
) -> Result<Vec<EpochMetrics>> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if data.classes != model.classes {
        return Err(Error::invalid(format!("data has {} classes, model {}", data.classes, model.classes)));
    }
    let mut rng = stream(cfg.seed, Stream::Shuffle);
    let mut opt = Optimizer::new(
        OptimizerKind::Sgd { momentum: cfg.momentum, weight_decay: cfg.weight_decay },
        cfg.lr,
    );
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        let mut loss_sum = 0.0;
        let batches = minibatches(data.len(), cfg.batch, &mut rng);
        for rows in &batches {
            let b = data.select(rows)?;
            let x_t = if cfg.augment_shift > 0 { augment_batch(&b.images, cfg.augment_shift, &mut rng) } else { b.images };
            let mut g = Graph::new();
            let x = g.input(&x_t);
            let fwd = model.forward(&mut g, x, Mode::Train, false)?;
            let loss = g.cross_entropy(fwd.logits, &b.labels)?;
            let lv = g.scalar(loss).to_f64().unwrap();
            if !lv.is_finite() {
                return Err(Error::Divergence { iteration: epoch });
            }
            loss_sum += lv;
            g.backward(loss)?;
            apply_step(model, &g, &fwd, &mut opt, None)?;
        }
        let test_acc = test.map(|t| model.accuracy(&t.images, &t.labels)).transpose()?;
        out.push(EpochMetrics {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / batches.len() as f64,
            test_acc,
            heldout_loss: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Minibatches per epoch when sampling from a growing store.
    pub iters_per_epoch: usize,
    /// Distillation iterations between new synthesized batches.
    pub adi_cadence: usize,
    pub augment_shift: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 3.0,
            epochs: 20,
            lr: 0.05,
            schedule: LrSchedule::Cosine,
            batch: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            iters_per_epoch: 20,
            adi_cadence: 20,
            augment_shift: 2,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.batch == 0 || self.adi_cadence == 0 || self.iters_per_epoch == 0 {
            return Err(Error::invalid("batch, iters_per_epoch and adi_cadence must be > 0"));
        }
        Ok(())
    }
}

/// Optional evaluation targets for distillation runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct Evaluation<'a, T: Real> {
    pub test: Option<&'a LabeledBatch<T>>,
    pub heldout: Option<&'a Tensor<T>>,
}

pub(crate) struct KdTrainer<T: Real> {
    pub teacher: Model<T>,
    pub opt: Optimizer<T>,
    pub rng: Rng,
}

impl<T: Real> KdTrainer<T> {
    pub fn new(teacher: &Model<T>, cfg: &DistillConfig) -> Self {
        let mut teacher = teacher.clone();
        teacher.set_requires_grad(false);
        Self {
            teacher,
            opt: Optimizer::new(
                OptimizerKind::Sgd { momentum: cfg.momentum, weight_decay: cfg.weight_decay },
                cfg.lr,
            ),
            rng: stream(cfg.seed, Stream::Shuffle),
        }
    }

    /// One KD step on `images`; returns the loss.
    pub fn step(&mut self, student: &mut Model<T>, images: &Tensor<T>, cfg: &DistillConfig) -> Result<f64> {
        let x_t = if cfg.augment_shift > 0 {
            augment_batch(images, cfg.augment_shift, &mut self.rng)
        } else {
            images.clone()
        };
        let t_logits = self.teacher.predict(&x_t, x_t.shape()[0].max(1))?;
        let mut g = Graph::new();
        let tl = g.constant(&t_logits.shape().to_vec(), t_logits.into_data())?;
        let x = g.input(&x_t);
        let fwd = student.forward(&mut g, x, Mode::Train, false)?;
        let loss = kd_loss(&mut g, tl, fwd.logits, cfg.temperature)?;
        let lv = g.scalar(loss).to_f64().unwrap();
        if !lv.is_finite() {
            return Err(Error::Divergence { iteration: self.opt.steps() as usize });
        }
        g.backward(loss)?;
        apply_step(student, &g, &fwd, &mut self.opt, None)?;
        Ok(lv)
    }

    pub fn end_epoch(&self, student: &Model<T>, eval: &Evaluation<'_, T>, cfg: &DistillConfig, m: &mut EpochMetrics) -> Result<()> {
        m.test_acc = eval.test.map(|t| student.accuracy(&t.images, &t.labels)).transpose()?;
        m.heldout_loss = eval.heldout.map(|h| kd_value(&self.teacher, student, h, cfg.temperature)).transpose()?;
        Ok(())
    }
}

/// Eval-mode KD loss value of `student` against `teacher` on `images`.
pub fn kd_value<T: Real>(teacher: &Model<T>, student: &Model<T>, images: &Tensor<T>, tau: f64) -> Result<f64> {
    let t = teacher.predict(images, 256)?;
    let s = student.predict(images, 256)?;
    let mut g = Graph::new();
    let tv = g.constant(&t.shape().to_vec(), t.into_data())?;
    let sv = g.constant(&s.shape().to_vec(), s.into_data())?;
    let l = kd_loss(&mut g, tv, sv, tau)?;
    Ok(g.scalar(l).to_f64().unwrap())
}

/// Distills `teacher` into `student` over unlabeled `images`, one pass per epoch.
pub fn distill<T: Real>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    images: &Tensor<T>,
    cfg: &DistillConfig,
    eval: Evaluation<'_, T>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("empty image source"));
    }
    if teacher.classes != student.classes {
        return Err(Error::invalid(format!(
            "teacher has {} classes, student {}",
            teacher.classes, student.classes
        )));
    }
    let mut tr = KdTrainer::new(teacher, cfg);
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        tr.opt.lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        let batches = minibatches(n, cfg.batch, &mut tr.rng);
        let mut loss = 0.0;
        for rows in &batches {
            let x = images.select_outer(rows)?;
            loss += tr.step(student, &x, cfg)?;
        }
        let mut m = EpochMetrics {
            epoch,
            lr: tr.opt.lr,
            train_loss: loss / batches.len() as f64,
            ..Default::default()
        };
        tr.end_epoch(student, &eval, cfg, &mut m)?;
        out.push(m);
    }
    Ok(out)
}

/// Appends `(epoch, split, accuracy, lr, train_loss, heldout_loss)` rows,
/// writing the header when the file is new.
pub fn append_metrics_csv(path: &Path, split: &str, rows: &[EpochMetrics]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("epoch,split,accuracy,lr,train_loss,heldout_loss\n");
    }
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in rows {
        text.push_str(&format!(
            "{},{split},{},{:.6},{:.6},{}\n",
            r.epoch,
            opt(r.test_acc),
            r.lr,
            r.train_loss,
            opt(r.heldout_loss)
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
