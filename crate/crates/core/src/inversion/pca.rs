use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Projects `n × d` row-major features onto their first two principal
/// components. Each component's sign is chosen so that its largest-magnitude
/// loading is positive.
pub fn diversity_projection(features: &[f64], n: usize, d: usize) -> Result<Vec<[f64; 2]>> {
    if n < 3 || d < 2 || features.len() != n * d {
        return Err(Error::invalid(format!(
            "projection needs n >= 3, d >= 2 and n*d values; got n={n}, d={d}, {} values",
            features.len()
        )));
    }
    let x = DMatrix::from_row_slice(n, d, features);
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    if cov.trace() <= 1e-300 {
        return Err(Error::invalid("features have zero variance"));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Vec::with_capacity(2);
    for &k in &order[..2] {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    Ok(centered
        .row_iter()
        .map(|row| [row.dot(&axes[0].transpose()), row.dot(&axes[1].transpose())])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
        let n = v.clone().count() as f64;
        let m = v.clone().sum::<f64>() / n;
        v.map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn collinear_points_have_no_second_component() {
        let pts: Vec<f64> = (0..10).flat_map(|i| [i as f64, 2.0 * i as f64 + 1.0]).collect();
        let p = diversity_projection(&pts, 10, 2).unwrap();
        assert!(variance(p.iter().map(|q| q[1])) < 1e-20);
    }

    #[test]
    fn rotated_gaussian_recovers_axis_variances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (sa, sb) = (Normal::new(0.0, 3.0).unwrap(), Normal::new(0.0, 1.0).unwrap());
        let theta = 0.6f64;
        let n = 4000;
        let mut pts = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (a, b) = (sa.sample(&mut rng), sb.sample(&mut rng));
            pts.push(a * theta.cos() - b * theta.sin());
            pts.push(a * theta.sin() + b * theta.cos());
        }
        let p = diversity_projection(&pts, n, 2).unwrap();
        let v1 = variance(p.iter().map(|q| q[0]));
        let v2 = variance(p.iter().map(|q| q[1]));
        assert!((v1 / 9.0 - 1.0).abs() < 0.05, "{v1}");
        assert!((v2 - 1.0).abs() < 0.05, "{v2}");
    }

    #[test]
    fn scaling_preserves_first_component_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<f64> = (0..30).map(|_| nd.sample(&mut rng)).collect();
        let a = diversity_projection(&pts, 10, 3).unwrap();
        let scaled: Vec<f64> = pts.iter().map(|v| v * 2.5).collect();
        let b = diversity_projection(&scaled, 10, 3).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(a[i][0] < a[j][0], b[i][0] < b[j][0]);
            }
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(diversity_projection(&[1.0; 6], 3, 2).is_err());
        assert!(diversity_projection(&[1.0, 2.0, 3.0, 4.0], 2, 2).is_err());
    }
}
