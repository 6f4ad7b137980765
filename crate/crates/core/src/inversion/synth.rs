use rand::Rng as _;

use super::regularizers::{r_compete, r_feature, r_l2, r_tv};
use super::{ImageBatch, LossTerms, SynthMode, SynthesisConfig, Targets};
use crate::data::Preprocess;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{argmax, FeatureStats, Mode, Model, Tap};
use crate::optim::Optimizer;
use crate::real::Real;
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

/// Graph nodes of the regularizer for one forward pass.
pub struct RegTerms {
    /// `R` as weighted for the configured mode.
    pub total: Var,
    pub tv: Option<Var>,
    pub l2: Option<Var>,
    pub feature: Option<Var>,
    pub compete: Option<Var>,
}

/// Builds the mode's regularizer on input `x`.
///
/// `taps` are required for feature matching, `logits` (teacher, student) for
/// the adaptive term.
pub fn regularizer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    taps: &[Tap],
    logits: Option<(Var, Var)>,
    cfg: &SynthesisConfig,
    stats: &FeatureStats<T>,
) -> Result<RegTerms> {
    let mut terms = RegTerms {
        total: g.scalar_const(T::zero()),
        tv: None,
        l2: None,
        feature: None,
        compete: None,
    };
    if cfg.mode == SynthMode::NoiseOnly {
        return Ok(terms);
    }
    let tv = r_tv(g, x)?;
    let l2 = r_l2(g, x);
    let a = g.scale(tv, T::lit(cfg.alpha_tv));
    let b = g.scale(l2, T::lit(cfg.alpha_l2));
    terms.total = g.add(a, b)?;
    terms.tv = Some(tv);
    terms.l2 = Some(l2);
    if matches!(cfg.mode, SynthMode::Deepinversion | SynthMode::Adaptive) {
        let f = r_feature(g, taps, stats)?;
        let scaled = g.scale(f, T::lit(cfg.alpha_f));
        terms.total = g.add(terms.total, scaled)?;
        terms.feature = Some(f);
    }
    if cfg.mode == SynthMode::Adaptive {
        let (t, s) = logits.ok_or_else(|| Error::invalid("adaptive regularizer needs teacher and student logits"))?;
        let pt = g.softmax(t)?;
        let ps = g.softmax(s)?;
        let c = r_compete(g, pt, ps)?;
        let scaled = g.scale(c, T::lit(cfg.alpha_c));
        terms.total = g.add(terms.total, scaled)?;
        terms.compete = Some(c);
    }
    Ok(terms)
}

/// Clamps each channel to `[-m/s, (1-m)/s]`.
pub fn clip_images<T: Real>(images: &mut Tensor<T>, p: &Preprocess) -> Result<()> {
    let s = images.shape().to_vec();
    if s.len() != 4 || s[1] != p.channels() {
        return Err(Error::shape("clip_images", format!("{} channels vs images {s:?}", p.channels())));
    }
    let plane = s[2] * s[3];
    let bounds: Vec<(T, T)> = p.bounds().into_iter().map(|(lo, hi)| (T::lit(lo), T::lit(hi))).collect();
    for (i, chunk) in images.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let (lo, hi) = bounds[i % s[1]];
        chunk.iter_mut().for_each(|v| *v = v.max(lo).min(hi));
    }
    Ok(())
}

fn frozen<T: Real>(m: &Model<T>) -> Model<T> {
    let mut m = m.clone();
    m.set_requires_grad(false);
    m
}

/// Random circular shift by up to `jitter` pixels and an optional
/// horizontal flip, shared by the whole batch.
fn augment<T: Real>(g: &mut Graph<T>, x: Var, jitter: usize, flip: bool, rng: &mut Rng) -> Result<Var> {
    let j = jitter as i64;
    let (dy, dx) = if j > 0 {
        (rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        (0, 0)
    };
    let flip = flip && rng.random_bool(0.5);
    if dx == 0 && dy == 0 && !flip {
        return Ok(x);
    }
    let s = g.shape(x).to_vec();
    let (planes, h, w) = (s[0] * s[1], s[2] as i64, s[3] as i64);
    let mut index = Vec::with_capacity(planes * (h * w) as usize);
    for p in 0..planes {
        let base = p * (h * w) as usize;
        for y in 0..h {
            let sy = (y - dy).rem_euclid(h);
            for xx in 0..w {
                let xr = if flip { w - 1 - xx } else { xx };
                let sx = (xr - dx).rem_euclid(w);
                index.push(base + (sy * w + sx) as usize);
            }
        }
    }
    g.gather(x, index, &s)
}

struct Phase<'a, T: Real> {
    teacher: &'a Model<T>,
    student: Option<&'a Model<T>>,
    stats: &'a FeatureStats<T>,
    cfg: &'a SynthesisConfig,
    targets: &'a [usize],
}

impl<T: Real> Phase<'_, T> {
    fn run(&self, pixels: &mut Tensor<T>, iters: usize, offset: usize, rng: &mut Rng, trace: &mut Vec<LossTerms>) -> Result<()> {
        let cfg = self.cfg;
        let want_taps = matches!(cfg.mode, SynthMode::Deepinversion | SynthMode::Adaptive);
        let mut opt = Optimizer::<T>::adam(cfg.lr);
        pixels.set_requires_grad(true);
        for it in 0..iters {
            let mut g = Graph::new();
            let x = g.input(pixels);
            let xa = augment(&mut g, x, cfg.jitter_px, cfg.random_flip, rng)?;
            let fwd = self.teacher.forward(&mut g, xa, Mode::Eval, want_taps)?;
            let ce = g.cross_entropy(fwd.logits, self.targets)?;
            let logits = match self.student {
                Some(s) if cfg.mode == SynthMode::Adaptive => {
                    let sf = s.forward(&mut g, xa, Mode::Eval, false)?;
                    Some((fwd.logits, sf.logits))
                }
                _ => None,
            };
            let reg = regularizer(&mut g, xa, &fwd.taps, logits, cfg, self.stats)?;
            let total = g.add(ce, reg.total)?;
            let value = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).to_f64().unwrap());
            let terms = LossTerms {
                ce: value(Some(ce)),
                tv: value(reg.tv),
                l2: value(reg.l2),
                feature: value(reg.feature),
                compete: value(reg.compete),
                total: value(Some(total)),
            };
            if !terms.total.is_finite() {
                return Err(Error::Divergence { iteration: offset + it });
            }
            trace.push(terms);
            g.backward(total)?;
            let grad = g.grad(x).ok_or(Error::MissingGrad { index: 0 })?;
            pixels.zero_grad();
            pixels.accumulate_grad(grad)?;
            opt.step(&mut [&mut *pixels])?;
            if let Some(p) = &cfg.clip {
                clip_images(pixels, p)?;
            }
        }
        pixels.set_requires_grad(false);
        Ok(())
    }
}

fn upsample<T: Real>(pixels: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.input(pixels);
    let u = g.upsample_nearest(x, factor)?;
    Ok(g.to_tensor(u))
}

/// Synthesizes one batch, matching the teacher's own batch-norm statistics.
/// Dispatches to the coarse-to-fine schedule when `cfg.multires` is set.
pub fn synthesize<T: Real>(teacher: &Model<T>, cfg: &SynthesisConfig, student: Option<&Model<T>>) -> Result<ImageBatch<T>> {
    synthesize_with_stats(teacher, cfg, student, &teacher.bn_stats())
}

/// Coarse-to-fine synthesis; `cfg.multires` must be set.
pub fn synthesize_multires<T: Real>(teacher: &Model<T>, cfg: &SynthesisConfig, student: Option<&Model<T>>) -> Result<ImageBatch<T>> {
    if cfg.multires.is_none() {
        return Err(Error::invalid("synthesize_multires needs a multires schedule"));
    }
    synthesize(teacher, cfg, student)
}

/// Like [`synthesize`] but matching `stats` instead of the stored running statistics.
pub fn synthesize_with_stats<T: Real>(
    teacher: &Model<T>,
    cfg: &SynthesisConfig,
    student: Option<&Model<T>>,
    stats: &FeatureStats<T>,
) -> Result<ImageBatch<T>> {
    cfg.validate()?;
    if (cfg.mode == SynthMode::Adaptive) != student.is_some() {
        return Err(Error::invalid("a student model is required for adaptive mode and only for it"));
    }
    let s = teacher.input_shape.clone();
    if s.len() != 3 {
        return Err(Error::shape("synthesize", format!("teacher input {s:?} is not CHW")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut phases: Vec<(usize, usize, usize)> = Vec::new(); // (h, w, iterations)
    match cfg.multires {
        Some(m) => {
            if m.low_iters > 0 {
                if h != w || m.low_res == 0 || m.low_res > h || h % m.low_res != 0 {
                    return Err(Error::invalid(format!(
                        "low resolution {} must divide the square input size {h}x{w}",
                        m.low_res
                    )));
                }
                phases.push((m.low_res, m.low_res, m.low_iters));
            }
            if m.high_iters == 0 && m.low_iters == 0 {
                return Err(Error::invalid("multires schedule has no iterations"));
            }
            phases.push((h, w, m.high_iters));
        }
        None => phases.push((h, w, cfg.iterations)),
    }

    let mut rng = stream(cfg.seed, Stream::Synthesis);
    let targets: Vec<usize> = match &cfg.targets {
        Targets::Fixed(t) => {
            if let Some(&bad) = t.iter().find(|&&l| l >= teacher.classes) {
                return Err(Error::invalid(format!("target {bad} outside [0, {})", teacher.classes)));
            }
            t.clone()
        }
        Targets::UniformRandom => (0..cfg.batch).map(|_| rng.random_range(0..teacher.classes)).collect(),
    };
    let teacher_full = frozen(teacher);
    let student_full = student.map(frozen);
    let (h0, w0, _) = phases[0];
    let mut pixels = Tensor::<T>::randn(&[cfg.batch, c, h0, w0], 1.0, &mut rng);
    let mut trace = Vec::new();
    let mut offset = 0;
    for (i, &(ph, pw, iters)) in phases.iter().enumerate() {
        if i > 0 {
            let factor = ph / pixels.shape()[2];
            pixels = upsample(&pixels, factor)?;
        }
        let (t, st) = if (ph, pw) == (h, w) {
            (teacher_full.clone(), student_full.clone())
        } else {
            (
                teacher_full.with_input_size(ph, pw)?,
                student_full.as_ref().map(|m| m.with_input_size(ph, pw)).transpose()?,
            )
        };
        let phase = Phase {
            teacher: &t,
            student: st.as_ref(),
            stats,
            cfg,
            targets: &targets,
        };
        phase.run(&mut pixels, iters, offset, &mut rng, &mut trace)?;
        offset += iters;
    }

    let logits = teacher_full.predict(&pixels, 256)?;
    let k = teacher.classes;
    let mut teacher_top1 = Vec::with_capacity(cfg.batch);
    let mut confidence = Vec::with_capacity(cfg.batch);
    for row in logits.data().chunks(k) {
        let best = argmax(row);
        let max = row[best];
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        teacher_top1.push(best);
        confidence.push((T::one() / z).to_f64().unwrap());
    }
    Ok(ImageBatch {
        pixels,
        targets,
        round: 0,
        config_hash: cfg.hash(),
        teacher_top1,
        confidence,
        trace,
    })
}

/// Per-channel mean and biased variance of every batch-norm input over the
/// first `k` images, with batch-norm layers normalizing by running statistics.
pub fn stats_from_images<T: Real>(model: &Model<T>, images: &Tensor<T>, k: usize) -> Result<FeatureStats<T>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if k == 0 || k > n {
        return Err(Error::invalid(format!("subset size {k} must be in 1..={n}")));
    }
    let layers = model.batchnorms().count();
    let mut sum: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut sq: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut count = 0usize;
    let chunk = 128;
    let mut start = 0;
    while start < k {
        let end = (start + chunk).min(k);
        let part = images.slice_outer(start, end)?;
        let mut g = Graph::new();
        let x = g.input(&part);
        let fwd = model.forward(&mut g, x, Mode::Eval, true)?;
        let rows = (end - start) as f64;
        for (l, tap) in fwd.taps.iter().enumerate() {
            let (m, v) = (g.value(tap.mean), g.value(tap.var));
            if sum[l].is_empty() {
                sum[l] = vec![0.0; m.len()];
                sq[l] = vec![0.0; m.len()];
            }
            for ch in 0..m.len() {
                let (mu, var) = (m[ch].to_f64().unwrap(), v[ch].to_f64().unwrap());
                sum[l][ch] += rows * mu;
                sq[l][ch] += rows * (var + mu * mu);
            }
        }
        count += end - start;
        start = end;
    }
    let total = count as f64;
    let mut out = FeatureStats { mean: Vec::new(), var: Vec::new() };
    for l in 0..layers {
        let mean: Vec<f64> = sum[l].iter().map(|s| s / total).collect();
        let var = sq[l].iter().zip(&mean).map(|(q, m)| T::lit((q / total - m * m).max(0.0))).collect();
        out.mean.push(mean.into_iter().map(T::lit).collect());
        out.var.push(var);
    }
    Ok(out)
}
