//! Numeric helpers shared by every module.

use alloc::vec::Vec;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn log10(x: f64) -> f64 {
    libm::log10(x)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| exp(v - max)).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Top-1 softmax probability and its class.
///
/// Computed as `1 / sum(exp(z - max))`, which can never fall below `1/P` in
/// floating point because every summand is at most one.
pub fn top1(z: &[f64]) -> (f64, usize) {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    let max = z[best];
    let sum: f64 = z.iter().map(|&v| exp(v - max)).sum();
    (1.0 / sum, best)
}

/// Pairwise (cascade) summation. Deterministic for a fixed input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        let mut acc = 0.0;
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Evenly spaced values `0, step, 2*step, ...` up to and including 1.
pub fn unit_grid(step: f64) -> Vec<f64> {
    let count = floor(1.0 / step + 1e-9) as usize;
    (0..=count).map(|i| (round(i as f64 * step * 1e9) / 1e9).min(1.0)).collect()
}

/// Evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace_step(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = floor((hi - lo) / step + 1e-9) as usize;
    (0..=count).map(|i| round((lo + i as f64 * step) * 1e9) / 1e9).collect()
}

/// Calls `visit` on every point of the Cartesian product of `axes`, in
/// lexicographic order (first axis most significant).
pub fn for_each_grid_point(axes: &[Vec<f64>], mut visit: impl FnMut(&[f64])) {
    if axes.iter().any(Vec::is_empty) {
        return;
    }
    let mut idx = alloc::vec![0usize; axes.len()];
    let mut point: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    loop {
        visit(&point);
        let mut d = axes.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                point[d] = axes[d][idx[d]];
                break;
            }
            idx[d] = 0;
            point[d] = axes[d][0];
        }
    }
}

pub fn grid_size(axes: &[Vec<f64>]) -> usize {
    axes.iter().map(Vec::len).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_integers() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, -3.0, 700.0, 2.5]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn top1_of_uniform_is_exactly_inverse_classes() {
        let (c, _) = top1(&[0.3; 7]);
        assert_eq!(c, 1.0 / 7.0);
    }

    #[test]
    fn grids() {
        assert_eq!(unit_grid(0.5), alloc::vec![0.0, 0.5, 1.0]);
        assert_eq!(unit_grid(0.05).len(), 21);
        let g = linspace_step(0.2, 0.9, 0.1);
        assert_eq!(g.len(), 8);
        assert_eq!(g[7], 0.9);
    }

    #[test]
    fn grid_points_are_lexicographic() {
        let axes = alloc::vec![alloc::vec![0.0, 1.0], alloc::vec![0.0, 0.5, 1.0]];
        let mut seen = Vec::new();
        for_each_grid_point(&axes, |p| seen.push(p.to_vec()));
        assert_eq!(seen.len(), grid_size(&axes));
        assert_eq!(seen[0], alloc::vec![0.0, 0.0]);
        assert_eq!(seen[1], alloc::vec![0.0, 0.5]);
        assert_eq!(seen[5], alloc::vec![1.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_symmetric_and_bounded() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-40.0) > 0.0 && sigmoid(40.0) <= 1.0);
    }
}
