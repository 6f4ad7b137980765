//! Procedural ten-class shapes dataset.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{LabeledBatch, Preprocess};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 10] = [
    "circle", "square", "triangle", "cross", "ring", "bar", "checker", "dot-grid", "diagonal", "blob",
];

const NOISE_STD: f64 = 0.04;

struct Params {
    cx: f64,
    cy: f64,
    r: f64,
    period: f64,
}

/// Foreground coverage in `[0, 1]` of pixel center `(x, y)`.
fn coverage(class: usize, x: f64, y: f64, p: &Params) -> f64 {
    let (dx, dy) = (x - p.cx, y - p.cy);
    let d = (dx * dx + dy * dy).sqrt();
    let inside_box = dx.abs() < p.r && dy.abs() < p.r;
    let hit = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => hit(d < p.r),
        1 => hit(dx.abs() < 0.8 * p.r && dy.abs() < 0.8 * p.r),
        2 => {
            // apex up, base at cy + r
            let t = (dy + p.r) / (2.0 * p.r);
            hit((0.0..=1.0).contains(&t) && dx.abs() < t * p.r)
        }
        3 => {
            let arm = 0.3 * p.r;
            hit((dx.abs() < arm && dy.abs() < p.r) || (dy.abs() < arm && dx.abs() < p.r))
        }
        4 => hit(d < p.r && d > 0.55 * p.r),
        5 => hit(dy.abs() < 0.25 * p.r && dx.abs() < 1.3 * p.r),
        6 => {
            let cell = ((dx + p.r) / p.period).floor() as i64 + ((dy + p.r) / p.period).floor() as i64;
            hit(inside_box && cell.rem_euclid(2) == 0)
        }
        7 => {
            let fx = ((dx + p.r) / p.period).fract() - 0.5;
            let fy = ((dy + p.r) / p.period).fract() - 0.5;
            hit(inside_box && (fx * fx + fy * fy).sqrt() < 0.28)
        }
        8 => hit(inside_box && ((dx + dy + 4.0 * p.r) / p.period).fract() < 0.5),
        9 => {
            let s = 0.55 * p.r;
            (-(d * d) / (2.0 * s * s)).exp()
        }
        _ => unreachable!("class checked by caller"),
    }
}

fn contrasting_colors<R: rand::Rng>(rng: &mut R) -> ([f64; 3], [f64; 3]) {
    loop {
        let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let diff: f64 = bg.iter().zip(&fg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if diff > 0.35 {
            return (bg, fg);
        }
    }
}

/// Renders `n_per_class` images of each class with pixels in `[0, 1]`.
/// Classes are interleaved: image `i` has label `i % classes`.
pub fn render_shapes_raw<T: Real>(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    size: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if classes == 0 || classes > SHAPE_NAMES.len() {
        return Err(Error::invalid(format!("shapes supports 1..=10 classes, got {classes}")));
    }
    if size < 16 {
        return Err(Error::invalid(format!("shapes image size must be >= 16, got {size}")));
    }
    let n = n_per_class * classes;
    let plane = size * size;
    let mut data = vec![T::zero(); n * 3 * plane];
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let s = size as f64;
    for (i, img) in data.chunks_mut(3 * plane).enumerate() {
        let class = i % classes;
        let mut rng = substream(seed, Stream::Data, i as u64);
        let (bg, fg) = contrasting_colors(&mut rng);
        let p = Params {
            cx: rng.random_range(0.35 * s..0.65 * s),
            cy: rng.random_range(0.35 * s..0.65 * s),
            r: rng.random_range(0.2 * s..0.3 * s),
            period: rng.random_range(0.09 * s..0.14 * s),
        };
        for y in 0..size {
            for x in 0..size {
                let a = coverage(class, x as f64 + 0.5, y as f64 + 0.5, &p);
                for c in 0..3 {
                    let v = bg[c] * (1.0 - a) + fg[c] * a + noise.sample(&mut rng);
                    img[c * plane + y * size + x] = T::lit(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    let labels = (0..n).map(|i| i % classes).collect();
    Ok((Tensor::from_vec(&[n, 3, size, size], data)?, labels))
}

/// Shapes dataset normalized with the stored `shapes` constants.
pub fn gen_shapes<T: Real>(seed: u64, n_per_class: usize, classes: usize, size: usize) -> Result<LabeledBatch<T>> {
    let (mut images, labels) = render_shapes_raw::<T>(seed, n_per_class, classes, size)?;
    Preprocess::for_dataset("shapes")?.apply(&mut images)?;
    LabeledBatch::new(images, labels, classes)
}
