//! Image priors and feature-matching terms, built as graph nodes so their
//! gradients reach the pixels.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{FeatureStats, Tap};
use crate::real::Real;

fn sum_vars<T: Real>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter().copied();
    let first = it.next().ok_or_else(|| Error::invalid("empty sum"))?;
    it.try_fold(first, |acc, v| g.add(acc, v))
}

/// Sum of ℓ2 norms of one-pixel differences along the horizontal, vertical
/// and both diagonal directions, each over the valid overlap.
pub fn r_tv<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("r_tv", format!("expected NCHW input, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    if h < 2 || w < 2 {
        return Err(Error::shape("r_tv", format!("image {h}x{w} too small for shifts")));
    }
    let crop = |g: &mut Graph<T>, r0: usize, c0: usize| -> Result<Var> {
        let rows = g.slice(x, 2, r0, r0 + h - 1)?;
        g.slice(rows, 3, c0, c0 + w - 1)
    };
    // horizontal and vertical use full extent along the unshifted axis
    let right = g.slice(x, 3, 1, w)?;
    let left = g.slice(x, 3, 0, w - 1)?;
    let down = g.slice(x, 2, 1, h)?;
    let up = g.slice(x, 2, 0, h - 1)?;
    let (br, tl) = (crop(g, 1, 1)?, crop(g, 0, 0)?);
    let (bl, tr) = (crop(g, 1, 0)?, crop(g, 0, 1)?);
    let mut norms = Vec::with_capacity(4);
    for (a, b) in [(right, left), (down, up), (br, tl), (bl, tr)] {
        let d = g.sub(a, b)?;
        norms.push(g.l2_norm(d));
    }
    sum_vars(g, &norms)
}

/// ℓ2 norm (not squared) of the whole batch.
pub fn r_l2<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    g.l2_norm(x)
}

/// `α_tv·R_TV + α_ℓ2·R_ℓ2`.
pub fn r_prior<T: Real>(g: &mut Graph<T>, x: Var, alpha_tv: f64, alpha_l2: f64) -> Result<Var> {
    let tv = r_tv(g, x)?;
    let l2 = r_l2(g, x);
    let a = g.scale(tv, T::lit(alpha_tv));
    let b = g.scale(l2, T::lit(alpha_l2));
    g.add(a, b)
}

/// `Σ_l ‖μ_l − mean_l‖₂ + Σ_l ‖σ²_l − var_l‖₂` between tapped batch moments
/// and reference statistics.
pub fn r_feature<T: Real>(g: &mut Graph<T>, taps: &[Tap], stats: &FeatureStats<T>) -> Result<Var> {
    if taps.len() != stats.layers() || taps.is_empty() {
        return Err(Error::shape(
            "r_feature",
            format!("{} tapped layers vs {} reference layers", taps.len(), stats.layers()),
        ));
    }
    let mut norms = Vec::with_capacity(2 * taps.len());
    for (l, tap) in taps.iter().enumerate() {
        for (batch, reference) in [(tap.mean, &stats.mean[l]), (tap.var, &stats.var[l])] {
            if g.shape(batch) != [reference.len()] {
                return Err(Error::shape(
                    "r_feature",
                    format!("layer {l}: {:?} channels vs {} reference", g.shape(batch), reference.len()),
                ));
            }
            let r = g.constant(&[reference.len()], reference.clone())?;
            let d = g.sub(batch, r)?;
            norms.push(g.l2_norm(d));
        }
    }
    sum_vars(g, &norms)
}

/// Batch mean of `1 − JS(p_T, p_S)` with base-2 logarithms. Inputs are
/// `[N, K]` rows of probabilities.
pub fn r_compete<T: Real>(g: &mut Graph<T>, p_t: Var, p_s: Var) -> Result<Var> {
    let s = g.shape(p_t).to_vec();
    if s.len() != 2 || g.shape(p_s) != s.as_slice() {
        return Err(Error::shape(
            "r_compete",
            format!("{s:?} vs {:?}", g.shape(p_s)),
        ));
    }
    let k = s[1];
    for (name, p) in [("teacher", p_t), ("student", p_s)] {
        for (r, row) in g.value(p).chunks(k).enumerate() {
            let total: f64 = row.iter().map(|v| v.to_f64().unwrap()).sum();
            if (total - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < T::zero()) {
                return Err(Error::invalid(format!(
                    "r_compete: {name} row {r} is not a probability vector (sum {total})"
                )));
            }
        }
    }
    let sum = g.add(p_t, p_s)?;
    let m = g.scale(sum, T::lit(0.5));
    // KL(p‖m) = Σ p ln p − p ln m, for both p_T and p_S
    let mut parts = Vec::with_capacity(4);
    for p in [p_t, p_s] {
        let self_term = g.xlogy(p, p)?;
        let cross = g.xlogy(p, m)?;
        let d = g.sub(self_term, cross)?;
        parts.push(g.sum(d));
    }
    let kl = sum_vars(g, &parts)?;
    let n = s[0].max(1) as f64;
    // JS per row = ½(KL_T + KL_S) / ln 2; averaged over the batch
    let js = g.scale(kl, T::lit(0.5 / (n * std::f64::consts::LN_2)));
    let neg = g.scale(js, T::lit(-1.0));
    Ok(g.add_scalar(neg, T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn tv_of(shape: &[usize], data: Vec<f64>) -> f64 {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(shape, data).unwrap());
        let r = r_tv(&mut g, x).unwrap();
        g.scalar(r)
    }

    /// Independent loop over the four valid-overlap shifts.
    fn tv_loop(n: usize, c: usize, h: usize, w: usize, x: &[f64]) -> f64 {
        let at = |i: usize, ch: usize, y: usize, xx: usize| x[((i * c + ch) * h + y) * w + xx];
        let mut total = 0.0;
        for (dy, dx0, dx1) in [(0usize, 1usize, 0usize), (1, 0, 0), (1, 1, 0), (1, 0, 1)] {
            let mut s = 0.0;
            for i in 0..n {
                for ch in 0..c {
                    for y in 0..h - dy {
                        let wlim = if dx0 + dx1 > 0 { w - 1 } else { w };
                        for xx in 0..wlim {
                            let d = at(i, ch, y + dy, xx + dx0) - at(i, ch, y, xx + dx1);
                            s += d * d;
                        }
                    }
                }
            }
            total += s.sqrt();
        }
        total
    }

    #[test]
    fn tv_constant_image_is_zero() {
        assert_eq!(tv_of(&[1, 2, 3, 3], vec![0.7; 18]), 0.0);
    }

    #[test]
    fn tv_two_by_two_valid_overlap() {
        // horizontal √2, vertical 0, each diagonal a single pixel pair of size 1
        let v = tv_of(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        assert!((v - (2.0 + 2f64.sqrt())).abs() < 1e-12, "{v}");
    }

    #[test]
    fn tv_is_homogeneous() {
        let data: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 * 0.3).collect();
        let a = tv_of(&[1, 1, 4, 4], data.clone());
        let b = tv_of(&[1, 1, 4, 4], data.iter().map(|v| 2.0 * v).collect());
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn prior_degenerate_coefficients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(&t);
        let p = r_prior(&mut g, x, 0.0, 0.3).unwrap();
        let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_eq!(g.scalar(p), 0.3 * norm);
        let mut g = Graph::new();
        let x = g.input(&Tensor::<f64>::zeros(&[1, 3, 4, 4]));
        let p = r_prior(&mut g, x, 1.0, 1.0).unwrap();
        assert_eq!(g.scalar(p), 0.0);
    }

    #[test]
    fn prior_matches_scalar_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(&t);
        let p = r_prior(&mut g, x, 0.25, 0.5).unwrap();
        let l2 = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let expect = 0.25 * tv_loop(2, 2, 4, 4, t.data()) + 0.5 * l2;
        assert!((g.scalar(p) - expect).abs() < 1e-12);
    }

    fn feature_case(mean: [f64; 2], rm: [f64; 2], var: [f64; 2], rv: [f64; 2]) -> f64 {
        let mut g = Graph::<f64>::new();
        let m = g.constant(&[2], mean.to_vec()).unwrap();
        let v = g.constant(&[2], var.to_vec()).unwrap();
        let tap = Tap { input: m, mean: m, var: v };
        let stats = FeatureStats { mean: vec![rm.to_vec()], var: vec![rv.to_vec()] };
        let r = r_feature(&mut g, &[tap], &stats).unwrap();
        g.scalar(r)
    }

    #[test]
    fn feature_zero_when_matching() {
        assert_eq!(feature_case([0.3, -1.0], [0.3, -1.0], [2.0, 0.5], [2.0, 0.5]), 0.0);
    }

    #[test]
    fn feature_hand_value() {
        let v = feature_case([1.0, 2.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]);
        assert!((v - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn feature_structure_mismatch() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(&[2], vec![0.0; 2]).unwrap();
        let tap = Tap { input: m, mean: m, var: m };
        let stats = FeatureStats { mean: vec![vec![0.0; 3]], var: vec![vec![0.0; 3]] };
        assert!(r_feature(&mut g, &[tap], &stats).is_err());
        let empty = FeatureStats::<f64> { mean: vec![], var: vec![] };
        assert!(r_feature(&mut g, &[tap], &empty).is_err());
    }

    fn compete(pt: &[f64], ps: &[f64], k: usize) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let n = pt.len() / k;
        let a = g.constant(&[n, k], pt.to_vec())?;
        let b = g.constant(&[n, k], ps.to_vec())?;
        let r = r_compete(&mut g, a, b)?;
        Ok(g.scalar(r))
    }

    fn js_loop(p: &[f64], q: &[f64]) -> f64 {
        let mut js = 0.0;
        for (&a, &b) in p.iter().zip(q) {
            let m = 0.5 * (a + b);
            if a > 0.0 {
                js += 0.5 * a * (a / m).log2();
            }
            if b > 0.0 {
                js += 0.5 * b * (b / m).log2();
            }
        }
        js
    }

    #[test]
    fn compete_identical_is_one() {
        assert!((compete(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], 3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compete_disjoint_is_zero() {
        assert!(compete(&[1.0, 0.0], &[0.0, 1.0], 2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn compete_rejects_unnormalized() {
        assert!(compete(&[0.5, 0.6], &[0.5, 0.5], 2).is_err());
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, k).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn compete_matches_loop_and_is_bounded(p in simplex(5), q in simplex(5), p2 in simplex(5), q2 in simplex(5)) {
            let pt: Vec<f64> = p.iter().chain(&p2).copied().collect();
            let ps: Vec<f64> = q.iter().chain(&q2).copied().collect();
            let v = compete(&pt, &ps, 5).unwrap();
            let expect = 1.0 - 0.5 * (js_loop(&p, &q) + js_loop(&p2, &q2));
            prop_assert!((v - expect).abs() < 1e-9);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            let same = compete(&pt, &pt, 5).unwrap();
            prop_assert!((same - 1.0).abs() < 1e-9);
        }
    }
}
