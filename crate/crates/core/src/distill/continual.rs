use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{apply_step, kd_loss, minibatches, LrSchedule};
use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::nn::checkpoint::{StoredTensor, TensorFile};
use crate::nn::{Layer, Mode, Model};
use crate::optim::{Optimizer, OptimizerKind};
use crate::real::Real;
use crate::rng::{stream, substream, Stream};
use crate::tensor::Tensor;

/// Old model, extended model and the data used to extend it.
#[derive(Debug, Clone)]
pub struct ContinualTask<T: Real = f32> {
    /// Frozen model over the old classes.
    pub old: Model<T>,
    /// Trainable model over old and new classes.
    pub new: Model<T>,
    pub old_classes: usize,
    pub new_classes: usize,
    /// Replay images with the old model's probabilities `[N, old_classes]`.
    pub replay: Option<(Tensor<T>, Tensor<T>)>,
    /// Labels in `[old_classes, old_classes + new_classes)`.
    pub new_data: LabeledBatch<T>,
}

impl<T: Real> ContinualTask<T> {
    /// Copies `old`, appends `new_classes` randomly initialized output units
    /// and stores the old model's soft labels for `replay_images`.
    pub fn new(
        old: &Model<T>,
        new_classes: usize,
        replay_images: Option<Tensor<T>>,
        new_data: LabeledBatch<T>,
        seed: u64,
    ) -> Result<Self> {
        let old_classes = old.classes;
        if old_classes == 0 || new_classes == 0 {
            return Err(Error::invalid("continual learning needs old and new classes"));
        }
        let total = old_classes + new_classes;
        if new_data.classes != total || new_data.labels.iter().any(|&l| l < old_classes) {
            return Err(Error::invalid(format!(
                "new data must be labeled in [{old_classes}, {total}) over {total} classes"
            )));
        }
        let mut new = old.clone();
        let mut rng = substream(seed, Stream::Init, 0xC0);
        let head = new
            .layers
            .iter_mut()
            .rev()
            .find_map(|l| match l {
                Layer::Linear(lin) => Some(lin),
                _ => None,
            })
            .ok_or_else(|| Error::invalid("model has no linear head"))?;
        let fan_in = head.fan_in();
        let extra = Tensor::<T>::randn(&[new_classes, fan_in], (1.0 / fan_in as f64).sqrt(), &mut rng);
        let mut w = head.weight.data().to_vec();
        w.extend_from_slice(extra.data());
        let mut b = head.bias.data().to_vec();
        b.extend(std::iter::repeat_n(T::zero(), new_classes));
        head.weight = Tensor::from_vec(&[total, fan_in], w)?.with_requires_grad(true);
        head.bias = Tensor::from_vec(&[total], b)?.with_requires_grad(true);
        new.classes = total;
        new.layer_input_shapes()?;

        let mut frozen = old.clone();
        frozen.set_requires_grad(false);
        let replay = match replay_images {
            Some(imgs) => {
                let logits = frozen.predict(&imgs, 256)?;
                let n = imgs.shape()[0];
                let p = softmax_rows(logits.data(), n, old_classes);
                Some((imgs, Tensor::from_vec(&[n, old_classes], p)?))
            }
            None => None,
        };
        Ok(Self { old: frozen, new, old_classes, new_classes, replay, new_data })
    }
}

/// Graph nodes of the three loss terms.
pub struct ContinualLossParts {
    pub total: Var,
    pub replay_kl: Option<Var>,
    pub ce: Var,
    pub old_kl: Option<Var>,
}

/// `KL(p ‖ softmax(q_logits))` for constant probabilities `p`, averaged over rows.
fn kl_to_probs<T: Real>(g: &mut Graph<T>, p: &Tensor<T>, q_logits: Var) -> Result<Var> {
    let s = p.shape().to_vec();
    let pc = g.constant(&s, p.data().to_vec())?;
    let log_q = g.log_softmax(q_logits)?;
    let a = g.xlogy(pc, pc)?;
    let b = g.mul(pc, log_q)?;
    let d = g.sub(a, b)?;
    let t = g.sum(d);
    Ok(g.scale(t, T::lit(1.0 / s[0].max(1) as f64)))
}

/// Class-incremental loss.
///
/// * `replay`: extended-model logits on replay images with the stored old
///   probabilities, zero-padded over the new classes.
/// * `new_logits`, `labels`: extended-model logits on new-class images.
/// * `old_on_new`: old-model logits on the same new-class images; the third
///   term compares them with the extended model's old-class logits
///   (softmax over the old-class slice).
pub fn continual_loss<T: Real>(
    g: &mut Graph<T>,
    replay: Option<(Var, &Tensor<T>)>,
    new_logits: Var,
    labels: &[usize],
    old_on_new: Option<&Tensor<T>>,
    old_classes: usize,
) -> Result<ContinualLossParts> {
    let total_classes = g.shape(new_logits).get(1).copied().unwrap_or(0);
    if old_classes == 0 || old_classes >= total_classes {
        return Err(Error::invalid(format!(
            "need both old and new classes, got {old_classes} old of {total_classes}"
        )));
    }
    let ce = g.cross_entropy(new_logits, labels)?;
    let mut total = ce;
    let mut replay_kl = None;
    if let Some((logits, soft)) = replay {
        let s = soft.shape();
        if s.len() != 2 || s[1] != old_classes || g.shape(logits) != [s[0], total_classes] {
            return Err(Error::shape("continual_loss", format!("soft labels {s:?} vs logits {:?}", g.shape(logits))));
        }
        let mut padded = Vec::with_capacity(s[0] * total_classes);
        for row in soft.data().chunks(old_classes) {
            padded.extend_from_slice(row);
            padded.extend(std::iter::repeat_n(T::zero(), total_classes - old_classes));
        }
        let padded = Tensor::from_vec(&[s[0], total_classes], padded)?;
        let kl = kl_to_probs(g, &padded, logits)?;
        total = g.add(total, kl)?;
        replay_kl = Some(kl);
    }
    let mut old_kl = None;
    if let Some(old) = old_on_new {
        let t = g.constant(old.shape(), old.data().to_vec())?;
        let slice = g.slice(new_logits, 1, 0, old_classes)?;
        let kl = kd_loss(g, t, slice, 1.0)?;
        total = g.add(total, kl)?;
        old_kl = Some(kl);
    }
    Ok(ContinualLossParts { total, replay_kl, ce, old_kl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub freeze_bn: bool,
    /// Whether to add the old-class distillation term on new-class images.
    pub old_slice_term: bool,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 0.05,
            batch: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: 0.1,
            freeze_bn: true,
            old_slice_term: true,
            schedule: LrSchedule::incremental(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContinualReport {
    /// Accuracy over old and new test images, argmax over all classes.
    pub combined_acc: f64,
    pub old_acc: f64,
    pub new_acc: f64,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Largest gradient norm seen after clipping.
    pub max_clipped_norm: f64,
}

/// Trains `task.new` on new-class data plus replay. `old_test` carries labels
/// `< old_classes`, `new_test` the global new-class labels.
pub fn continual_train<T: Real>(
    task: &mut ContinualTask<T>,
    cfg: &ContinualConfig,
    old_test: &LabeledBatch<T>,
    new_test: &LabeledBatch<T>,
) -> Result<ContinualReport> {
    if task.new_data.is_empty() {
        return Err(Error::invalid("no new-class data"));
    }
    if cfg.freeze_bn {
        task.new.freeze_bn();
    }
    let mut opt = Optimizer::new(
        OptimizerKind::Sgd { momentum: cfg.momentum, weight_decay: cfg.weight_decay },
        cfg.lr,
    );
    let mut rng = stream(cfg.seed, Stream::Shuffle);
    let mut report = ContinualReport::default();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        let batches = minibatches(task.new_data.len(), cfg.batch, &mut rng);
        let mut loss_sum = 0.0;
        for rows in &batches {
            let nb = task.new_data.select(rows)?;
            let old_on_new = if cfg.old_slice_term { Some(task.old.predict(&nb.images, 256)?) } else { None };
            let replay_part = match &task.replay {
                Some((imgs, soft)) => {
                    let n = imgs.shape()[0];
                    let idx = sample(&mut rng, n, rows.len().min(n)).into_vec();
                    Some((imgs.select_outer(&idx)?, soft.select_outer(&idx)?))
                }
                None => None,
            };
            let mut g = Graph::new();
            let (x_t, nr) = match &replay_part {
                Some((ri, _)) => (Tensor::cat_outer(&[ri, &nb.images])?, ri.shape()[0]),
                None => (nb.images.clone(), 0),
            };
            let x = g.input(&x_t);
            let fwd = task.new.forward(&mut g, x, Mode::Train, false)?;
            let total_rows = g.shape(fwd.logits)[0];
            let new_logits = g.slice(fwd.logits, 0, nr, total_rows)?;
            let replay = match &replay_part {
                Some((_, soft)) => Some((g.slice(fwd.logits, 0, 0, nr)?, soft)),
                None => None,
            };
            let parts = continual_loss(&mut g, replay, new_logits, &nb.labels, old_on_new.as_ref(), task.old_classes)?;
            let lv = g.scalar(parts.total).to_f64().unwrap();
            if !lv.is_finite() {
                return Err(Error::Divergence { iteration: epoch });
            }
            loss_sum += lv;
            g.backward(parts.total)?;
            let norm = apply_step(&mut task.new, &g, &fwd, &mut opt, Some(cfg.grad_clip))?;
            report.max_clipped_norm = report.max_clipped_norm.max(norm);
        }
        report.losses.push(loss_sum / batches.len() as f64);
    }
    report.old_acc = task.new.accuracy(&old_test.images, &old_test.labels)?;
    report.new_acc = task.new.accuracy(&new_test.images, &new_test.labels)?;
    let (no, nn) = (old_test.len() as f64, new_test.len() as f64);
    report.combined_acc = (report.old_acc * no + report.new_acc * nn) / (no + nn).max(1.0);
    Ok(report)
}

/// Persists replay images and soft labels in the checkpoint tensor format.
pub fn save_replay<T: Real>(path: &Path, images: &Tensor<T>, soft: &Tensor<T>, meta: BTreeMap<String, String>) -> Result<()> {
    TensorFile {
        descriptor: "replay".into(),
        meta,
        tensors: vec![StoredTensor::from_tensor("images", images), StoredTensor::from_tensor("soft_labels", soft)],
    }
    .save(path)
}

pub fn load_replay<T: Real>(path: &Path) -> Result<(Tensor<T>, Tensor<T>, BTreeMap<String, String>)> {
    let f = TensorFile::load(path)?;
    let get = |name: &str| -> Result<Tensor<T>> {
        f.get(name)
            .ok_or_else(|| Error::Format {
                source_name: path.display().to_string(),
                reason: format!("missing tensor `{name}`"),
            })?
            .to_tensor()
    };
    Ok((get("images")?, get("soft_labels")?, f.meta.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ArchSpec};

    fn logsumexp(v: &[f64]) -> f64 {
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let l = logsumexp(v);
        v.iter().map(|x| (x - l).exp()).collect()
    }

    fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn three_class_hand_example() {
        // 2 old classes, 1 new
        let replay_logits = [0.5, -0.2, 0.3];
        let soft = [0.7, 0.3];
        let new_logits = [0.1, 0.4, 1.2];
        let label = 2;
        let old_logits = [1.0, -1.0];
        let expect = kl(&[0.7, 0.3, 0.0], &softmax(&replay_logits))
            + (logsumexp(&new_logits) - new_logits[label])
            + kl(&softmax(&old_logits), &softmax(&new_logits[..2]));

        let mut g = Graph::<f64>::new();
        let rl = g.constant(&[1, 3], replay_logits.to_vec()).unwrap();
        let nl = g.constant(&[1, 3], new_logits.to_vec()).unwrap();
        let soft_t = Tensor::from_vec(&[1, 2], soft.to_vec()).unwrap();
        let old_t = Tensor::from_vec(&[1, 2], old_logits.to_vec()).unwrap();
        let parts = continual_loss(&mut g, Some((rl, &soft_t)), nl, &[label], Some(&old_t), 2).unwrap();
        assert!((g.scalar(parts.total) - expect).abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let rl = g.constant(&[1, 3], replay_logits.to_vec()).unwrap();
        let nl = g.constant(&[1, 3], new_logits.to_vec()).unwrap();
        let without = continual_loss(&mut g, Some((rl, &soft_t)), nl, &[label], None, 2).unwrap();
        let v = g.scalar(without.total);
        assert!(v >= 0.0 && (v - expect).abs() > 1e-6);
    }

    #[test]
    fn vanishes_when_models_agree() {
        // replay logits reproduce the soft labels with a very negative new class,
        // the new-class image is confidently correct and the old slice matches
        let mut g = Graph::<f64>::new();
        let soft = Tensor::from_vec(&[1, 2], softmax(&[0.3, -0.4])).unwrap();
        let rl = g.constant(&[1, 3], vec![0.3, -0.4, -1e3]).unwrap();
        let nl = g.constant(&[1, 3], vec![0.2, 0.9, 1e3]).unwrap();
        let old = Tensor::from_vec(&[1, 2], vec![0.2, 0.9]).unwrap();
        let parts = continual_loss(&mut g, Some((rl, &soft)), nl, &[2], Some(&old), 2).unwrap();
        assert!(g.scalar(parts.total).abs() < 1e-12);
    }

    #[test]
    fn needs_old_and_new_classes() {
        let mut g = Graph::<f64>::new();
        let nl = g.constant(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert!(continual_loss(&mut g, None, nl, &[1], None, 0).is_err());
        assert!(continual_loss(&mut g, None, nl, &[1], None, 2).is_err());
    }

    fn setup() -> (Model<f32>, LabeledBatch<f32>, LabeledBatch<f32>) {
        let mut rng = stream(4, Stream::Init);
        let old: Model<f32> = build_model(&ArchSpec::new("vgg_small:4".parse().unwrap(), 2, vec![3, 16, 16]), &mut rng).unwrap();
        let imgs = Tensor::randn(&[8, 3, 16, 16], 1.0, &mut rng);
        let new_data = LabeledBatch::new(imgs.clone(), vec![2, 3, 2, 3, 2, 3, 2, 3], 4).unwrap();
        let old_test = LabeledBatch::new(imgs.slice_outer(0, 4).unwrap(), vec![0, 1, 0, 1], 4).unwrap();
        (old, new_data, old_test)
    }

    #[test]
    fn old_model_and_frozen_bn_untouched() {
        let (old, new_data, old_test) = setup();
        let replay = Tensor::randn(&[6, 3, 16, 16], 1.0, &mut stream(5, Stream::Synthesis));
        let mut task = ContinualTask::new(&old, 2, Some(replay), new_data.clone(), 1).unwrap();
        assert_eq!(task.new.classes, 4);
        let old_before = format!("{:?}", task.old.named_tensors());
        let bn_before: Vec<_> = task.new.batchnorms().map(|b| (b.running_mean.clone(), b.running_var.clone(), b.gamma.data().to_vec(), b.beta.data().to_vec())).collect();
        let cfg = ContinualConfig { epochs: 2, batch: 4, ..Default::default() };
        let r = continual_train(&mut task, &cfg, &old_test, &new_data).unwrap();
        assert_eq!(old_before, format!("{:?}", task.old.named_tensors()));
        let bn_after: Vec<_> = task.new.batchnorms().map(|b| (b.running_mean.clone(), b.running_var.clone(), b.gamma.data().to_vec(), b.beta.data().to_vec())).collect();
        assert_eq!(bn_before, bn_after);
        assert!(r.max_clipped_norm <= 0.1 + 1e-6);
        assert_eq!(r.losses.len(), 2);
    }

    #[test]
    fn extended_head_keeps_old_weights() {
        let (old, new_data, _) = setup();
        let task = ContinualTask::new(&old, 2, None, new_data, 1).unwrap();
        let x = Tensor::randn(&[3, 3, 16, 16], 1.0, &mut stream(6, Stream::Data));
        let a = old.predict(&x, 8).unwrap();
        let b = task.new.predict(&x, 8).unwrap();
        for r in 0..3 {
            assert_eq!(&a.data()[r * 2..r * 2 + 2], &b.data()[r * 4..r * 4 + 2]);
        }
    }

    #[test]
    fn replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = Tensor::<f32>::randn(&[2, 1, 3, 3], 1.0, &mut stream(1, Stream::Data));
        let soft = Tensor::<f32>::from_vec(&[2, 2], vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        let p = dir.path().join("replay.bin");
        save_replay(&p, &imgs, &soft, BTreeMap::new()).unwrap();
        let (a, b, _) = load_replay::<f32>(&p).unwrap();
        assert_eq!((a, b), (imgs, soft));
    }
}
