//! Gate-based Taylor filter pruning with a latency lookup table.

mod importance;
mod lut;
mod structure;

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

pub use importance::{
    combined_importance, groups, latency_delta, spearman, taylor_importance, ImportanceAccumulator, ImportanceLoss,
    RankedGroup,
};
pub use lut::{build_lut, conv_keys, estimate_latency, CostModel, LatencyLut, LutKey};
pub use structure::{channel_spaces, insert_gates, remove_channels, set_gate, ChannelSpace, Consumer};

use crate::distill::{apply_step, augment_batch, DistillConfig, Evaluation, KdTrainer};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Layer, Mode, Model};
use crate::optim::{Optimizer, OptimizerKind};
use crate::real::Real;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use importance::{importance_forward, Target};

/// When to stop removing filters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneTarget {
    /// Fraction of the initial prunable filters to remove.
    Filters(f64),
    /// Estimated latency to reach, in ms.
    LatencyMs(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub eta: f64,
    pub group_size: usize,
    pub filters_per_step: usize,
    /// Finetuning minibatches between removals; importance is summed over them.
    pub steps_between: usize,
    pub target: PruneTarget,
    pub finetune_epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub augment_shift: usize,
    pub cost: CostModel,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            group_size: 2,
            filters_per_step: 4,
            steps_between: 30,
            target: PruneTarget::Filters(0.3),
            finetune_epochs: 2,
            lr: 0.01,
            batch: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 3.0,
            augment_shift: 0,
            cost: CostModel::default(),
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.eta >= 0.0) {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if self.group_size == 0 || self.filters_per_step == 0 || self.filters_per_step % self.group_size != 0 {
            return bad(format!(
                "filters_per_step ({}) must be a positive multiple of group_size ({})",
                self.filters_per_step, self.group_size
            ));
        }
        if self.steps_between == 0 || self.batch == 0 {
            return bad("steps_between and batch must be positive".into());
        }
        match self.target {
            PruneTarget::Filters(f) if !(0.0..1.0).contains(&f) => bad(format!("filter fraction {f} not in [0, 1)")),
            PruneTarget::LatencyMs(ms) if !(ms >= 0.0) => bad(format!("latency budget {ms} must be >= 0")),
            _ if !(self.lr > 0.0 && self.temperature > 0.0) => bad("lr and temperature must be positive".into()),
            _ => Ok(()),
        }
    }

    fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            temperature: self.temperature,
            lr: self.lr,
            batch: self.batch,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            augment_shift: self.augment_shift,
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// One row of the pruning trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneStep {
    pub step: usize,
    pub filters_remaining: usize,
    pub est_latency_ms: f64,
    pub top1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PruneReport<T: Real> {
    /// Pruned and finetuned model, gates removed.
    pub model: Model<T>,
    pub steps: Vec<PruneStep>,
    pub initial_filters: usize,
}

pub fn prunable_filters(spaces: &[ChannelSpace]) -> usize {
    spaces.iter().map(|s| s.width).sum()
}

fn reached<T: Real>(target: PruneTarget, initial: usize, spaces: &[ChannelSpace], model: &Model<T>, lut: &LatencyLut) -> Result<bool> {
    Ok(match target {
        PruneTarget::Filters(f) => (initial - prunable_filters(spaces)) as f64 >= f * initial as f64 - 1e-9,
        PruneTarget::LatencyMs(ms) => estimate_latency(model, lut)? <= ms,
    })
}

/// Picks up to `want` filters from the ranking without emptying any space.
fn choose(ranked: &[RankedGroup], spaces: &[ChannelSpace], want: usize) -> Vec<Vec<usize>> {
    let mut picks: Vec<Vec<usize>> = vec![Vec::new(); spaces.len()];
    let mut taken = 0;
    for g in ranked {
        if taken >= want {
            break;
        }
        if picks[g.space].len() + g.channels.len() < spaces[g.space].width {
            picks[g.space].extend(&g.channels);
            taken += g.channels.len();
        }
    }
    picks
}

fn strip_gates<T: Real>(model: &mut Model<T>) {
    model.layers.retain(|l| !matches!(l, Layer::Gate(_)));
}

/// Alternates importance accumulation during KD finetuning with removal of
/// the lowest-ranked groups until `cfg.target` holds, then finetunes for
/// `cfg.finetune_epochs` passes over `images`. `student` should start as a copy
/// of `teacher`.
pub fn prune_loop<T: Real>(
    teacher: &Model<T>,
    student: &Model<T>,
    images: &Tensor<T>,
    lut: &LatencyLut,
    cfg: &PruneConfig,
    eval: Evaluation<'_, T>,
) -> Result<PruneReport<T>> {
    cfg.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("empty image source"));
    }
    let dcfg = cfg.distill_config();
    let mut model = student.clone();
    strip_gates(&mut model);
    insert_gates(&mut model)?;
    let mut spaces = channel_spaces(&model)?;
    let initial = prunable_filters(&spaces);
    if initial == 0 {
        return Err(Error::Pruning("model has no prunable filters".into()));
    }
    let mut tr = KdTrainer::new(teacher, &dcfg);
    let accuracy = |m: &Model<T>| eval.test.map(|t| m.accuracy(&t.images, &t.labels)).transpose();
    let mut steps = vec![PruneStep {
        step: 0,
        filters_remaining: initial,
        est_latency_ms: estimate_latency(&model, lut)?,
        top1: accuracy(&model)?,
    }];
    let mut rng = stream(cfg.seed, Stream::Shuffle);
    while !reached(cfg.target, initial, &spaces, &model, lut)? {
        let mut acc = ImportanceAccumulator::new(&spaces, cfg.group_size);
        for _ in 0..cfg.steps_between {
            let idx = sample(&mut rng, n, cfg.batch.min(n)).into_vec();
            let mut x = images.select_outer(&idx)?;
            if cfg.augment_shift > 0 {
                x = augment_batch(&x, cfg.augment_shift, &mut rng);
            }
            let target = Target::Teacher { logits: tr.teacher.predict(&x, x.shape()[0])?, tau: cfg.temperature };
            let mut g = Graph::new();
            let (fwd, loss) = importance_forward(&model, &mut g, &x, &target, Mode::Train)?;
            if !g.scalar(loss).to_f64().unwrap().is_finite() {
                return Err(Error::Divergence { iteration: steps.len() });
            }
            g.backward(loss)?;
            acc.add_batch(&model, &spaces, &g, &fwd)?;
            apply_step(&mut model, &g, &fwd, &mut tr.opt, None)?;
        }
        let ranked = combined_importance(&acc, &model, &spaces, lut, cfg.eta)?;
        let want = match cfg.target {
            PruneTarget::Filters(f) => {
                let goal = (f * initial as f64 - 1e-9).ceil() as usize;
                cfg.filters_per_step.min(goal - (initial - prunable_filters(&spaces)))
            }
            PruneTarget::LatencyMs(_) => cfg.filters_per_step,
        };
        let picks = choose(&ranked, &spaces, want);
        if picks.iter().all(Vec::is_empty) {
            return Err(Error::Pruning(format!(
                "target unreachable: only one filter per layer remains after {} removals",
                initial - prunable_filters(&spaces)
            )));
        }
        for (space, chans) in spaces.iter().zip(&picks) {
            if !chans.is_empty() {
                // spaces keep their layer indices; only widths change
                remove_channels(&mut model, space, chans)?;
            }
        }
        spaces = channel_spaces(&model)?;
        // parameter shapes changed, so momentum buffers restart
        tr.opt = Optimizer::new(
            OptimizerKind::Sgd { momentum: cfg.momentum, weight_decay: cfg.weight_decay },
            cfg.lr,
        );
        steps.push(PruneStep {
            step: steps.len(),
            filters_remaining: prunable_filters(&spaces),
            est_latency_ms: estimate_latency(&model, lut)?,
            top1: accuracy(&model)?,
        });
    }
    strip_gates(&mut model);
    if cfg.finetune_epochs > 0 {
        let ft = DistillConfig { epochs: cfg.finetune_epochs, schedule: crate::distill::LrSchedule::Cosine, ..dcfg };
        crate::distill::distill(teacher, &mut model, images, &ft, Evaluation::default())?;
        steps.push(PruneStep {
            step: steps.len(),
            filters_remaining: prunable_filters(&channel_spaces(&model)?),
            est_latency_ms: estimate_latency(&model, lut)?,
            top1: accuracy(&model)?,
        });
    }
    Ok(PruneReport { model, steps, initial_filters: initial })
}

/// Writes `step,filters_remaining,est_latency_ms,top1`.
pub fn write_prune_csv(path: &Path, steps: &[PruneStep]) -> Result<()> {
    let mut s = String::from("step,filters_remaining,est_latency_ms,top1\n");
    for r in steps {
        s.push_str(&format!(
            "{},{},{:.6},{}\n",
            r.step,
            r.filters_remaining,
            r.est_latency_ms,
            r.top1.map_or(String::new(), |v| format!("{v:.6}"))
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
