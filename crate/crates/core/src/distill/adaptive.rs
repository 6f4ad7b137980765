use rand::seq::index::sample;

use super::{DistillConfig, EpochMetrics, Evaluation, KdTrainer};
use crate::error::{Error, Result};
use crate::inversion::{synthesize_with_stats, ImageStore, SynthMode, SynthesisConfig};
use crate::nn::{top1_accuracy, FeatureStats, Model};
use crate::real::Real;

/// Student agreement with the teacher when a new batch arrives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub iteration: usize,
    /// On the fresh batch, before training on it.
    pub fresh_acc: f64,
    /// On images already in the store, `None` for the first round.
    pub seen_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct AdaptiveReport {
    pub epochs: Vec<EpochMetrics>,
    pub rounds: Vec<RoundMetrics>,
}

fn agreement<T: Real>(student: &Model<T>, images: &crate::tensor::Tensor<T>, labels: &[usize]) -> Result<f64> {
    let logits = student.predict(images, 256)?;
    Ok(top1_accuracy(logits.data(), student.classes, labels))
}

/// Distillation from a growing store: every `cfg.adi_cadence` iterations a new
/// batch is synthesized (against the current student when `syn.mode` is
/// adaptive) and appended; each step samples a minibatch uniformly from all
/// stored images. Round `r` uses synthesis seed `syn.seed + r`.
pub fn adaptive_loop<T: Real>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    syn: &SynthesisConfig,
    cfg: &DistillConfig,
    store: &mut ImageStore<T>,
    eval: Evaluation<'_, T>,
) -> Result<AdaptiveReport> {
    adaptive_loop_with_stats(teacher, student, syn, cfg, store, eval, None)
}

/// [`adaptive_loop`] matching `stats` (e.g. estimated from a few real images)
/// instead of the teacher's running statistics.
pub fn adaptive_loop_with_stats<T: Real>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    syn: &SynthesisConfig,
    cfg: &DistillConfig,
    store: &mut ImageStore<T>,
    eval: Evaluation<'_, T>,
    stats: Option<&FeatureStats<T>>,
) -> Result<AdaptiveReport> {
    cfg.validate()?;
    syn.validate()?;
    if teacher.classes != student.classes {
        return Err(Error::invalid(format!(
            "teacher has {} classes, student {}",
            teacher.classes, student.classes
        )));
    }
    let running = teacher.bn_stats();
    let stats = stats.unwrap_or(&running);
    let mut tr = KdTrainer::new(teacher, cfg);
    let mut report = AdaptiveReport::default();
    let mut round = 0;
    let mut it = 0;
    for epoch in 0..cfg.epochs {
        tr.opt.lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        let mut loss = 0.0;
        for _ in 0..cfg.iters_per_epoch {
            if it % cfg.adi_cadence == 0 {
                let round_cfg = SynthesisConfig { seed: syn.seed.wrapping_add(round as u64), ..syn.clone() };
                let s = (syn.mode == SynthMode::Adaptive).then_some(&*student);
                let mut batch = synthesize_with_stats(teacher, &round_cfg, s, stats)?;
                batch.round = round;
                let fresh_acc = agreement(student, &batch.pixels, &batch.teacher_top1)?;
                let seen_acc = if store.is_empty() {
                    None
                } else {
                    let total = store.images();
                    let take = total.min(256);
                    let idx = sample(&mut tr.rng, total, take).into_vec();
                    let imgs = store.gather(&idx)?;
                    let labels = tr.teacher.predict(&imgs, 256)?;
                    let labels: Vec<usize> = labels.data().chunks(teacher.classes).map(crate::nn::argmax).collect();
                    Some(agreement(student, &imgs, &labels)?)
                };
                report.rounds.push(RoundMetrics { round, iteration: it, fresh_acc, seen_acc });
                store.push(batch)?;
                round += 1;
            }
            let total = store.images();
            let idx = sample(&mut tr.rng, total, cfg.batch.min(total)).into_vec();
            let x = store.gather(&idx)?;
            loss += tr.step(student, &x, cfg)?;
            it += 1;
        }
        let mut m = EpochMetrics {
            epoch,
            lr: tr.opt.lr,
            train_loss: loss / cfg.iters_per_epoch as f64,
            ..Default::default()
        };
        tr.end_epoch(student, &eval, cfg, &mut m)?;
        report.epochs.push(m);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ArchSpec};
    use crate::rng::{stream, Stream};

    fn models() -> (Model<f32>, Model<f32>) {
        let mut rng = stream(3, Stream::Init);
        let t = build_model(&ArchSpec::new("vgg_small:4-8".parse().unwrap(), 3, vec![3, 16, 16]), &mut rng).unwrap();
        let s = build_model(&ArchSpec::new("vgg_small:4".parse().unwrap(), 3, vec![3, 16, 16]), &mut rng).unwrap();
        (t, s)
    }

    fn run(mode: SynthMode, alpha_c: f64) -> (Model<f32>, AdaptiveReport, ImageStore<f32>) {
        let (t, mut s) = models();
        let syn = SynthesisConfig { mode, alpha_c, batch: 8, iterations: 3, ..Default::default() };
        let cfg = DistillConfig { epochs: 2, iters_per_epoch: 3, adi_cadence: 2, batch: 4, ..Default::default() };
        let mut store = ImageStore::new();
        let r = adaptive_loop(&t, &mut s, &syn, &cfg, &mut store, Evaluation::default()).unwrap();
        (s, r, store)
    }

    #[test]
    fn rounds_follow_cadence() {
        let (_, r, store) = run(SynthMode::Deepinversion, 0.0);
        // iterations 0, 2, 4 of 6
        assert_eq!(r.rounds.len(), 3);
        assert_eq!(store.batches().len(), 3);
        assert_eq!(store.images(), 24);
        assert!(r.rounds[0].seen_acc.is_none() && r.rounds[1].seen_acc.is_some());
    }

    #[test]
    fn zero_competition_matches_deepinversion() {
        let (a, _, sa) = run(SynthMode::Deepinversion, 0.0);
        let (b, _, sb) = run(SynthMode::Adaptive, 0.0);
        assert_eq!(sa.all().unwrap(), sb.all().unwrap());
        assert_eq!(format!("{:?}", a.named_tensors()), format!("{:?}", b.named_tensors()));
    }
}
