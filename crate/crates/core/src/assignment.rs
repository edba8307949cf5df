//! Exact linear assignment on square score matrices.

use ndarray::Array2;

use crate::error::{MuviError, Result};

/// Returns `perm` maximizing `Σ_r score[r, perm[r]]` over all permutations.
/// Runs the shortest-augmenting-path Hungarian method in O(n³).
pub fn maximize(score: &Array2<f64>) -> Result<Vec<usize>> {
    let (n, m) = score.dim();
    if n != m {
        return Err(MuviError::Shape(format!(
            "assignment needs a square matrix, got {n} × {m}"
        )));
    }
    if score.iter().any(|v| !v.is_finite()) {
        return Err(MuviError::NonFinite {
            site: "assignment score".into(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let top = score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // 1-based rows/columns; index 0 is the virtual start.
    let cost = |r: usize, c: usize| top - score[[r - 1, c - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for r in 1..=n {
        row_of[0] = r;
        let mut col = 0usize;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col] = true;
            let r0 = row_of[col];
            let mut delta = f64::INFINITY;
            let mut next = 0usize;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let reduced = cost(r0, c) - u[r0] - v[c];
                if reduced < min_to[c] {
                    min_to[c] = reduced;
                    way[c] = col;
                }
                if min_to[c] < delta {
                    delta = min_to[c];
                    next = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[row_of[c]] += delta;
                    v[c] -= delta;
                } else {
                    min_to[c] -= delta;
                }
            }
            col = next;
            if row_of[col] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col];
            row_of[col] = row_of[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for c in 1..=n {
        perm[row_of[c] - 1] = c - 1;
    }
    Ok(perm)
}

pub fn total(score: &Array2<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(r, &c)| score[[r, c]]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_best(score: &Array2<f64>) -> f64 {
        fn rec(score: &Array2<f64>, r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = score.nrows();
            if r == n {
                *best = best.max(acc);
                return;
            }
            for c in 0..n {
                if !used[c] {
                    used[c] = true;
                    rec(score, r + 1, used, acc + score[[r, c]], best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::NEG_INFINITY;
        rec(score, 0, &mut vec![false; score.nrows()], 0.0, &mut best);
        best
    }

    fn is_bijection(p: &[usize]) -> bool {
        let mut seen = vec![false; p.len()];
        p.iter().all(|&c| c < p.len() && !std::mem::replace(&mut seen[c], true))
    }

    #[test]
    fn identity_and_reversal() {
        let id = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 1.0 } else { 0.0 });
        assert_eq!(maximize(&id).unwrap(), vec![0, 1, 2, 3, 4]);
        let rev = Array2::from_shape_fn((5, 5), |(i, j)| if i + j == 4 { 1.0 } else { 0.1 });
        assert_eq!(maximize(&rev).unwrap(), vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(maximize(&Array2::zeros((2, 3))).is_err());
        let mut s = Array2::zeros((2, 2));
        s[[0, 1]] = f64::NAN;
        assert!(maximize(&s).is_err());
        assert!(maximize(&Array2::zeros((0, 0))).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn equals_brute_force(n in 1usize..=6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // coarse integer grid forces ties
            let score = Array2::from_shape_fn((n, n), |_| rng.random_range(0..5) as f64 * 0.25);
            let perm = maximize(&score).unwrap();
            prop_assert!(is_bijection(&perm));
            prop_assert!((total(&score, &perm) - brute_force_best(&score)).abs() < 1e-12);
        }
    }
}
