use serde::{Deserialize, Serialize};

use super::lut::{conv_keys, LatencyLut};
use super::structure::{ChannelSpace, Consumer};
use crate::data::LabeledBatch;
use crate::distill::kd_loss;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Forward, Layer, Mode, Model};
use crate::real::Real;
use crate::tensor::Tensor;

/// Loss whose gate gradients drive the ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceLoss {
    /// Cross-entropy against ground-truth labels.
    CeLabels,
    /// KL divergence from a frozen teacher's outputs (no labels needed).
    KlTeacher,
}

/// Channels `[g*size, (g+1)*size)` of a space form group `g`; the last group
/// may be smaller.
pub fn groups(width: usize, size: usize) -> Vec<Vec<usize>> {
    (0..width).collect::<Vec<_>>().chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Running sums of squared group gate-gradients, one vector per space.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceAccumulator {
    pub group_size: usize,
    pub scores: Vec<Vec<f64>>,
    pub batches: usize,
}

impl ImportanceAccumulator {
    pub fn new(spaces: &[ChannelSpace], group_size: usize) -> Self {
        Self {
            group_size,
            scores: spaces.iter().map(|s| vec![0.0; groups(s.width, group_size).len()]).collect(),
            batches: 0,
        }
    }

    /// Adds one minibatch: for each group, `(Σ_{s∈group} ∂L/∂gate_s)²`, where a
    /// channel's gate gradient is summed over every gate in its space.
    pub fn add_batch<T: Real>(&mut self, model: &Model<T>, spaces: &[ChannelSpace], g: &Graph<T>, fwd: &Forward<T>) -> Result<()> {
        let gate_layers: Vec<usize> = model
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Gate(_)))
            .map(|(i, _)| i)
            .collect();
        for (k, space) in spaces.iter().enumerate() {
            let mut per_channel = vec![0.0; space.width];
            for layer in space.gates(model) {
                let pos = gate_layers.iter().position(|&i| i == layer).expect("gate listed");
                if let Some(grad) = g.grad(fwd.gates[pos]) {
                    for (acc, v) in per_channel.iter_mut().zip(grad) {
                        *acc += v.to_f64().unwrap();
                    }
                }
            }
            for (score, group) in self.scores[k].iter_mut().zip(groups(space.width, self.group_size)) {
                let s: f64 = group.iter().map(|&c| per_channel[c]).sum();
                *score += s * s;
            }
        }
        self.batches += 1;
        Ok(())
    }

    /// Sum of two accumulators over disjoint batches.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.group_size != other.group_size
            || self.scores.iter().map(Vec::len).ne(other.scores.iter().map(Vec::len))
        {
            return Err(Error::Pruning("accumulators cover different groups".into()));
        }
        for (a, b) in self.scores.iter_mut().zip(&other.scores) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.batches += other.batches;
        Ok(())
    }
}

fn check_prunable(spaces: &[ChannelSpace], model_gates: usize) -> Result<()> {
    if spaces.is_empty() || spaces.iter().all(|s| s.width == 0) {
        return Err(Error::Pruning("model has no prunable filters".into()));
    }
    if model_gates == 0 {
        return Err(Error::Pruning("model has no gate layers; call insert_gates".into()));
    }
    Ok(())
}

/// Loss on one batch for importance estimation; eval-mode batch-norm so the
/// estimate does not perturb running statistics.
pub(crate) fn importance_forward<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    images: &Tensor<T>,
    target: &Target<'_, T>,
    mode: Mode,
) -> Result<(Forward<T>, crate::graph::Var)> {
    let x = g.input(images);
    let fwd = model.forward(g, x, mode, false)?;
    let loss = match target {
        Target::Labels(y) => g.cross_entropy(fwd.logits, y)?,
        Target::Teacher { logits, tau } => {
            let t = g.constant(&logits.shape().to_vec(), logits.data().to_vec())?;
            kd_loss(g, t, fwd.logits, *tau)?
        }
    };
    Ok((fwd, loss))
}

pub(crate) enum Target<'a, T: Real> {
    Labels(&'a [usize]),
    Teacher { logits: Tensor<T>, tau: f64 },
}

/// Accumulates Taylor importance of every filter group over `batches`
/// without changing the model. `teacher` is required for [`ImportanceLoss::KlTeacher`].
pub fn taylor_importance<T: Real>(
    model: &Model<T>,
    spaces: &[ChannelSpace],
    batches: &[LabeledBatch<T>],
    loss: ImportanceLoss,
    teacher: Option<&Model<T>>,
    group_size: usize,
    tau: f64,
) -> Result<ImportanceAccumulator> {
    let gates = model.layers.iter().filter(|l| matches!(l, Layer::Gate(_))).count();
    check_prunable(spaces, gates)?;
    let mut acc = ImportanceAccumulator::new(spaces, group_size);
    for b in batches {
        let target = match loss {
            ImportanceLoss::CeLabels => Target::Labels(&b.labels),
            ImportanceLoss::KlTeacher => {
                let t = teacher.ok_or_else(|| Error::invalid("kl_teacher importance needs a teacher"))?;
                Target::Teacher { logits: t.predict(&b.images, 256)?, tau }
            }
        };
        let mut g = Graph::new();
        let (fwd, l) = importance_forward(model, &mut g, &b.images, &target, Mode::Eval)?;
        g.backward(l)?;
        acc.add_batch(model, spaces, &g, &fwd)?;
    }
    Ok(acc)
}

/// One candidate for removal.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedGroup {
    pub space: usize,
    /// First producing layer of the space.
    pub layer: usize,
    pub channels: Vec<usize>,
    pub err: f64,
    /// Latency change if removed (never positive).
    pub lat: f64,
    pub score: f64,
}

/// Latency change from deleting `n` channels of `space`.
pub fn latency_delta<T: Real>(model: &Model<T>, lut: &LatencyLut, space: &ChannelSpace, n: usize) -> Result<f64> {
    let keys = conv_keys(model)?;
    let mut after = keys.clone();
    for (layer, key) in &mut after {
        if space.producers.contains(layer) {
            key[1] -= n;
        }
        if space.consumers.contains(&Consumer::Conv(*layer)) {
            key[0] -= n;
        }
    }
    Ok(lut.total(&after)? - lut.total(&keys)?)
}

/// Ranks groups by `err + η·lat`, ascending; ties go to the lower
/// `(layer, first channel)`. Groups whose removal would empty a space are
/// left out.
pub fn combined_importance<T: Real>(
    acc: &ImportanceAccumulator,
    model: &Model<T>,
    spaces: &[ChannelSpace],
    lut: &LatencyLut,
    eta: f64,
) -> Result<Vec<RankedGroup>> {
    if !(eta >= 0.0) {
        return Err(Error::invalid(format!("eta must be >= 0, got {eta}")));
    }
    if acc.scores.len() != spaces.len() {
        return Err(Error::Pruning("accumulator does not match the channel spaces".into()));
    }
    let mut out = Vec::new();
    for (k, space) in spaces.iter().enumerate() {
        let gs = groups(space.width, acc.group_size);
        if gs.len() != acc.scores[k].len() {
            return Err(Error::Pruning(format!("space {k} changed width since accumulation")));
        }
        for (group, &err) in gs.into_iter().zip(&acc.scores[k]) {
            if group.len() >= space.width {
                continue;
            }
            let lat = latency_delta(model, lut, space, group.len())?;
            out.push(RankedGroup { space: k, layer: space.first_layer(), channels: group, err, lat, score: err + eta * lat });
        }
    }
    out.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.layer.cmp(&b.layer))
            .then(a.channels[0].cmp(&b.channels[0]))
    });
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ArchSpec, Conv2d, Linear};
    use crate::pruning::lut::{build_lut, estimate_latency, CostModel};
    use crate::pruning::structure::{channel_spaces, insert_gates, remove_channels, set_gate};
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn vgg() -> Model<f64> {
        let spec = ArchSpec::new("vgg_small:4-6".parse().unwrap(), 3, vec![3, 8, 8]);
        let mut m = build_model(&spec, &mut stream(0, Stream::Init)).unwrap();
        insert_gates(&mut m).unwrap();
        m
    }

    fn batch(seed: u64, n: usize) -> LabeledBatch<f64> {
        let x = Tensor::randn(&[n, 3, 8, 8], 1.0, &mut stream(seed, Stream::Data));
        LabeledBatch::new(x, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn constant_loss_gives_zero_importance() {
        let mut m = vgg();
        // zero head: logits constant in the input and gates
        if let Some(Layer::Linear(l)) = m.layers.last_mut() {
            l.weight.data_mut().fill(0.0);
        }
        let s = channel_spaces(&m).unwrap();
        let acc = taylor_importance(&m, &s, &[batch(1, 4)], ImportanceLoss::CeLabels, None, 2, 1.0).unwrap();
        assert!(acc.scores.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn importance_is_nonnegative_and_order_free() {
        let m = vgg();
        let s = channel_spaces(&m).unwrap();
        let bs = [batch(1, 4), batch(2, 4), batch(3, 4)];
        let a = taylor_importance(&m, &s, &bs, ImportanceLoss::CeLabels, None, 2, 1.0).unwrap();
        let rev: Vec<_> = bs.iter().rev().cloned().collect();
        let b = taylor_importance(&m, &s, &rev, ImportanceLoss::CeLabels, None, 2, 1.0).unwrap();
        assert!(a.scores.iter().flatten().all(|&v| v >= 0.0));
        for (x, y) in a.scores.iter().flatten().zip(b.scores.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
        let mut parts = taylor_importance(&m, &s, &bs[..1], ImportanceLoss::CeLabels, None, 2, 1.0).unwrap();
        parts.merge(&taylor_importance(&m, &s, &bs[1..], ImportanceLoss::CeLabels, None, 2, 1.0).unwrap()).unwrap();
        assert_eq!(parts.batches, 3);
        for (x, y) in a.scores.iter().flatten().zip(parts.scores.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn errors_without_prunable_filters_or_teacher() {
        let spec = ArchSpec::new("mlp_bn:4x1".parse().unwrap(), 3, vec![3, 8, 8]);
        let m: Model<f64> = build_model(&spec, &mut stream(0, Stream::Init)).unwrap();
        let s = channel_spaces(&m).unwrap();
        assert!(taylor_importance(&m, &s, &[batch(1, 2)], ImportanceLoss::CeLabels, None, 2, 1.0).is_err());
        let v = vgg();
        let s = channel_spaces(&v).unwrap();
        assert!(taylor_importance(&v, &s, &[batch(1, 2)], ImportanceLoss::KlTeacher, None, 2, 1.0).is_err());
    }

    /// Single-sample squared gate gradient equals the squared finite-difference
    /// slope of the loss along the gate.
    #[test]
    fn group_score_matches_finite_difference() {
        let m = vgg();
        let s = channel_spaces(&m).unwrap();
        let b = batch(4, 3);
        let acc = taylor_importance(&m, &s, std::slice::from_ref(&b), ImportanceLoss::CeLabels, None, 1, 1.0).unwrap();
        let loss = |model: &Model<f64>| {
            let mut g = Graph::new();
            let (_, l) = importance_forward(model, &mut g, &b.images, &Target::Labels(&b.labels), Mode::Eval).unwrap();
            g.scalar(l)
        };
        for (k, space) in s.iter().enumerate() {
            for c in 0..space.width {
                let h = 1e-5;
                let mut up = m.clone();
                set_gate(&mut up, space, c, 1.0 + h).unwrap();
                let mut dn = m.clone();
                set_gate(&mut dn, space, c, 1.0 - h).unwrap();
                let d = (loss(&up) - loss(&dn)) / (2.0 * h);
                let got = acc.scores[k][c];
                assert!((got - d * d).abs() <= 1e-6 * (d * d).max(1e-8), "{k}/{c}: {got} vs {}", d * d);
            }
        }
    }

    #[test]
    fn eta_zero_is_pure_taylor_and_large_eta_is_pure_latency() {
        let m = vgg();
        let s = channel_spaces(&m).unwrap();
        let lut = build_lut(&m, &CostModel::default()).unwrap();
        let acc = taylor_importance(&m, &s, &[batch(1, 6)], ImportanceLoss::CeLabels, None, 1, 1.0).unwrap();
        let r0 = combined_importance(&acc, &m, &s, &lut, 0.0).unwrap();
        let mut by_err: Vec<_> = r0.clone();
        by_err.sort_by(|a, b| a.err.total_cmp(&b.err).then(a.layer.cmp(&b.layer)).then(a.channels[0].cmp(&b.channels[0])));
        assert_eq!(r0, by_err);
        let big = combined_importance(&acc, &m, &s, &lut, 1e12).unwrap();
        let lats: Vec<f64> = big.iter().map(|g| g.lat).collect();
        assert!(lats.windows(2).all(|w| w[0] <= w[1]));
        assert!(big.iter().all(|g| g.lat < 0.0));
    }

    #[test]
    fn equal_error_prefers_larger_feature_map() {
        // two independent single-filter-pair convs on different map sizes
        let mut rng = stream(2, Stream::Init);
        let mut m: Model<f64> = Model {
            layers: vec![
                Layer::Conv2d(Conv2d::new(1, 2, 3, 1, 1, false, &mut rng)),
                Layer::Relu,
                Layer::MaxPool2d { kernel: 2 },
                Layer::Conv2d(Conv2d::new(2, 2, 3, 1, 1, false, &mut rng)),
                Layer::GlobalAvgPool,
                Layer::Linear(Linear::new(2, 2, &mut rng)),
            ],
            input_shape: vec![1, 8, 8],
            classes: 2,
            kind: "toy".into(),
        };
        insert_gates(&mut m).unwrap();
        let s = channel_spaces(&m).unwrap();
        let lut = build_lut(&m, &CostModel::default()).unwrap();
        let acc = ImportanceAccumulator { group_size: 1, scores: vec![vec![0.5, 0.5], vec![0.5, 0.5]], batches: 1 };
        let r = combined_importance(&acc, &m, &s, &lut, 0.01).unwrap();
        assert_eq!(r[0].space, 0);
        // the delta agrees with a removal followed by a fresh estimate
        let before = estimate_latency(&m, &lut).unwrap();
        let mut cut = m.clone();
        remove_channels(&mut cut, &s[0], &[0]).unwrap();
        let after = estimate_latency(&cut, &lut).unwrap();
        assert!((r[0].lat - (after - before)).abs() < 1e-15);
        assert!(r[0].lat < r.last().unwrap().lat);
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // ranks (1,2,3,4) vs (1,3,2,4): 1 - 6*2/(4*15)
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn spearman_is_bounded_and_monotone_invariant(v in proptest::collection::vec(-5.0f64..5.0, 3..12)) {
            let w: Vec<f64> = v.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            let r = spearman(&v, &w);
            prop_assume!(r.is_finite());
            prop_assert!((r - 1.0).abs() < 1e-9);
            let other: Vec<f64> = v.iter().rev().copied().collect();
            let q = spearman(&v, &other);
            prop_assert!(!q.is_finite() || (-1.0 - 1e-9..=1.0 + 1e-9).contains(&q));
        }
    }
}
