use std::cmp::Ordering;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Largest point set accepted by [`w2_exact`].
pub const W2_EXACT_CAP: usize = 1024;

/// Exact 2-Wasserstein distance between two equal-size empirical measures.
///
/// Solves the assignment problem under squared Euclidean cost with the
/// O(n³) Hungarian method and returns `sqrt(min cost / n)`.
pub fn w2_exact(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b, "w2_exact")?;
    let n = a.rows();
    if n > W2_EXACT_CAP {
        return Err(Error::domain(format!(
            "w2_exact is capped at {W2_EXACT_CAP} points, got {n}"
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let assignment = min_cost_assignment(n, |i, j| sq_dist(a.row(i), b.row(j)));
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| sq_dist(a.row(i), b.row(j)))
        .sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Row `i` is assigned to column `result[i]`.
///
/// Shortest-augmenting-path Hungarian algorithm with row/column potentials.
pub(crate) fn min_cost_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based internally; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_v = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        min_v.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[row_of[j] - 1] = j - 1;
    }
    result
}

/// Squared 1-D W2 between empirical measures of possibly different sizes,
/// via the quantile coupling.
pub fn w2_sq_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return 0.0;
    }
    // Quantile breakpoints are (i+1)/n and (j+1)/m; compare them as integers.
    let (mut i, mut j) = (0, 0);
    let mut last = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let (ni, nj) = ((i + 1) * m, (j + 1) * n);
        let next = ni.min(nj) as f64 / (n * m) as f64;
        acc += (next - last) * (a[i] - b[j]).powi(2);
        last = next;
        match ni.cmp(&nj) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

fn project(x: &Tensor, dir: &[f64]) -> Vec<f64> {
    x.iter_rows()
        .map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect()
}

/// `sqrt(mean_k W2²(⟨a, θ_k⟩, ⟨b, θ_k⟩))` over the given directions, without
/// normalization.
pub fn w2_sliced_along(a: &Tensor, b: &Tensor, directions: &[Vec<f64>]) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::shape("w2_sliced: point dimensions differ"));
    }
    if directions.is_empty() {
        return Err(Error::domain("w2_sliced needs at least one direction"));
    }
    let mut acc = 0.0;
    for dir in directions {
        if dir.len() != a.cols() {
            return Err(Error::shape("w2_sliced: direction has the wrong dimension"));
        }
        acc += w2_sq_1d(&project(a, dir), &project(b, dir));
    }
    Ok((acc / directions.len() as f64).sqrt())
}

/// Sliced W2 over `n_projections` isotropic random directions.
///
/// Because `E_θ[(θ·μ)²] = ‖μ‖²/d` for a uniform unit vector `θ`, the mean squared
/// projected distance is multiplied by the dimension `d`. This puts the
/// estimate on the scale of the exact distance: it is exact for
/// translations of the same distribution.
pub fn w2_sliced<R: Rng + ?Sized>(a: &Tensor, b: &Tensor, n_projections: usize, rng: &mut R) -> Result<f64> {
    let d = a.cols();
    let directions: Vec<Vec<f64>> = (0..n_projections)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    Ok(w2_sliced_along(a, b, &directions)? * (d as f64).sqrt())
}

/// Ranks starting at 1, with ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && x[order[end]] == x[order[k]] {
            end += 1;
        }
        let avg = (k + end + 1) as f64 / 2.0;
        for &idx in &order[k..end] {
            r[idx] = avg;
        }
        k = end;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman: lengths differ"));
    }
    if x.len() < 2 {
        return Err(Error::domain("spearman needs at least two points"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::domain("spearman is undefined for a constant sequence"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cloud(seed: u64, n: usize, shift: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::standard_normal(&[n, 2], &mut rng).map(|v| v + shift)
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = cloud(1, 64, 0.0);
        assert_eq!(w2_exact(&a, &a).unwrap(), 0.0);
        assert_eq!(w2_sliced(&a, &a, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), 0.0);
    }

    #[test]
    fn translation_example() {
        let n = 10;
        let a = Tensor::zeros(&[n, 2]);
        let b = Tensor::from_rows(&vec![vec![3.0, 4.0]; n]).unwrap();
        assert!((w2_exact(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let perms = permutations(4);
        assert_eq!(perms.len(), 24);
        for seed in 0..50 {
            let a = cloud(seed, 4, 0.0);
            let b = cloud(seed + 1000, 4, 0.7);
            let brute = perms
                .iter()
                .map(|p| (0..4).map(|i| sq_dist(a.row(i), b.row(p[i]))).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let exact = w2_exact(&a, &b).unwrap();
            assert!((exact * exact * 4.0 - brute).abs() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn cap_and_shape_enforced() {
        let a = Tensor::zeros(&[W2_EXACT_CAP + 1, 2]);
        assert!(matches!(w2_exact(&a, &a), Err(Error::Domain(_))));
        assert!(matches!(
            w2_exact(&Tensor::zeros(&[3, 2]), &Tensor::zeros(&[4, 2])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sliced_reduces_to_1d_on_embedded_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..3.0)).collect();
        let embed = |v: &[f64]| Tensor::from_rows(&v.iter().map(|&x| vec![x, 0.0]).collect::<Vec<_>>()).unwrap();
        let along = w2_sliced_along(&embed(&xs), &embed(&ys), &[vec![1.0, 0.0]]).unwrap();
        let mut sx = xs.clone();
        let mut sy = ys.clone();
        sx.sort_by(f64::total_cmp);
        sy.sort_by(f64::total_cmp);
        let direct = (sx.iter().zip(&sy).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 50.0).sqrt();
        assert!((along - direct).abs() < 1e-12);
    }

    #[test]
    fn unequal_sizes_use_quantile_coupling() {
        // {0, 1} against {0, 0.5, 1}: quantiles differ on (1/3, 2/3) by 0.5.
        let w = w2_sq_1d(&[0.0, 1.0], &[0.0, 0.5, 1.0]);
        assert!((w - (1.0 / 6.0) * 0.25 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn sliced_tracks_exact_on_shifted_gaussians() {
        let a = cloud(1, 512, 0.0);
        let b = cloud(2, 512, 1.0);
        let exact = w2_exact(&a, &b).unwrap();
        let sliced = w2_sliced(&a, &b, 2000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!((sliced - exact).abs() <= 0.1 * exact, "sliced {sliced} exact {exact}");
    }

    #[test]
    fn sliced_variance_shrinks_with_projections() {
        let a = cloud(1, 128, 0.0);
        let b = cloud(2, 128, 0.5);
        let spread = |k: usize| {
            let v: Vec<f64> = (0..40)
                .map(|s| w2_sliced(&a, &b, k, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let (v4, v64, v512) = (spread(4), spread(64), spread(512));
        assert!(v64 < v4 && v512 < v64, "{v4} {v64} {v512}");
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn w2_exact_is_a_metric(seed in any::<u64>(), n in 1usize..12) {
            let a = cloud(seed, n, 0.0);
            let b = cloud(seed ^ 1, n, 0.3);
            let c = cloud(seed ^ 2, n, -0.2);
            let ab = w2_exact(&a, &b).unwrap();
            let ba = w2_exact(&b, &a).unwrap();
            let bc = w2_exact(&b, &c).unwrap();
            let ac = w2_exact(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!(ab > 0.0);
        }

        #[test]
        fn w2_exact_ignores_row_order(seed in any::<u64>(), n in 2usize..12) {
            let a = cloud(seed, n, 0.0);
            let mut rows: Vec<Vec<f64>> = a.iter_rows().map(<[f64]>::to_vec).collect();
            rows.reverse();
            let b = Tensor::from_rows(&rows).unwrap();
            prop_assert_eq!(w2_exact(&a, &b).unwrap(), 0.0);
        }
    }
}
