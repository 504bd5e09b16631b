//! Dynamic time warping with Euclidean frame cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
    /// Sum of frame costs along the path.
    pub cost: f64,
}

pub fn frame_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Minimum-cost alignment of the rows of `a` and `b`. Backtrace ties go to
/// the diagonal, then to a step in `a` only, then to a step in `b` only.
pub fn dtw_align(a: &Tensor, b: &Tensor) -> Result<DtwPath> {
    let (n, m) = (a.rows(), b.rows());
    if n == 0 || m == 0 {
        return Err(Error::invalid(
            "dtw_align",
            "both sequences need at least one frame",
        ));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "dtw_align",
            format!("{} vs {} coefficients", a.cols(), b.cols()),
        ));
    }
    let idx = |i: usize, j: usize| i * m + j;
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = frame_distance(a.row(i), b.row(j));
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[idx(i - 1, j - 1)]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 {
                    acc[idx(i - 1, j)]
                } else {
                    f64::INFINITY
                };
                let left = if j > 0 {
                    acc[idx(i, j - 1)]
                } else {
                    f64::INFINITY
                };
                diag.min(up).min(left)
            };
            acc[idx(i, j)] = c + best;
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let diag = if i > 0 && j > 0 {
            acc[idx(i - 1, j - 1)]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 {
            acc[idx(i - 1, j)]
        } else {
            f64::INFINITY
        };
        let left = if j > 0 {
            acc[idx(i, j - 1)]
        } else {
            f64::INFINITY
        };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(DtwPath {
        pairs,
        cost: acc[idx(n - 1, m - 1)],
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn brute_force(a: &Tensor, b: &Tensor) -> f64 {
        fn go(a: &Tensor, b: &Tensor, i: usize, j: usize) -> f64 {
            let c = frame_distance(a.row(i), b.row(j));
            if i + 1 == a.rows() && j + 1 == b.rows() {
                return c;
            }
            let mut best = f64::INFINITY;
            for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
                if i + di < a.rows() && j + dj < b.rows() {
                    best = best.min(go(a, b, i + di, j + dj));
                }
            }
            c + best
        }
        go(a, b, 0, 0)
    }

    fn admissible(p: &DtwPath, n: usize, m: usize) -> bool {
        p.pairs.first() == Some(&(0, 0))
            && p.pairs.last() == Some(&(n - 1, m - 1))
            && p.pairs
                .windows(2)
                .all(|w| matches!((w[1].0 - w[0].0, w[1].1 - w[0].1), (1, 1) | (1, 0) | (0, 1)))
    }

    #[test]
    fn identical_sequences_align_diagonally() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(6, 3, 1.0, &mut rng);
        let p = dtw_align(&a, &a).unwrap();
        assert_eq!(p.cost, 0.0);
        assert_eq!(p.pairs, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn single_frame_visits_every_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(1, 3, 1.0, &mut rng);
        let b = Tensor::randn(4, 3, 1.0, &mut rng);
        let p = dtw_align(&a, &b).unwrap();
        assert_eq!(p.pairs, (0..4).map(|j| (0, j)).collect::<Vec<_>>());
    }

    #[test]
    fn ties_prefer_diagonal() {
        let a = Tensor::zeros(3, 2);
        let b = Tensor::zeros(2, 2);
        let p = dtw_align(&a, &b).unwrap();
        assert_eq!(p.pairs, vec![(0, 0), (1, 0), (2, 1)]);
    }

    #[test]
    fn matches_enumeration_on_all_small_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=5 {
            for m in 1..=5 {
                let a = Tensor::randn(n, 3, 1.0, &mut rng);
                let b = Tensor::randn(m, 3, 1.0, &mut rng);
                let p = dtw_align(&a, &b).unwrap();
                assert!(admissible(&p, n, m), "{n}x{m}: {:?}", p.pairs);
                let along: f64 = p
                    .pairs
                    .iter()
                    .map(|&(i, j)| frame_distance(a.row(i), b.row(j)))
                    .sum();
                assert!((along - p.cost).abs() < 1e-12);
                assert!((p.cost - brute_force(&a, &b)).abs() < 1e-12, "{n}x{m}");
            }
        }
    }

    #[test]
    fn rejects_empty_or_mismatched() {
        assert!(dtw_align(&Tensor::zeros(0, 2), &Tensor::zeros(2, 2)).is_err());
        assert!(dtw_align(&Tensor::zeros(2, 3), &Tensor::zeros(2, 2)).is_err());
    }
}
