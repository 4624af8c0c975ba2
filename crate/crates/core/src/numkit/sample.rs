//! Sampling without replacement.

use crate::error::{Error, Result};
use crate::numkit::SeededRng;

/// Weights below this are floored so dead entries keep a vanishing but
/// nonzero probability and renormalization never divides by zero.
pub const WEIGHT_EPSILON: f64 = 1e-12;

/// Draw `n` distinct indices with probability proportional to `weights`,
/// renormalizing after each draw.
pub fn multinomial_without_replacement(
    weights: &[f64],
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    if n > weights.len() {
        return Err(Error::invalid(format!(
            "cannot draw {n} from population of {}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let mut remaining: Vec<f64> = weights.iter().map(|&w| w.max(WEIGHT_EPSILON)).collect();
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = remaining.iter().sum();
        let mut target = rng.uniform() * total;
        let mut chosen = None;
        for (idx, &w) in remaining.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            target -= w;
            if target <= 0.0 {
                chosen = Some(idx);
                break;
            }
        }
        // Floating-point underrun on the last slot: fall back to the last
        // index still in play.
        let idx = chosen
            .or_else(|| {
                remaining
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, &w)| w > 0.0)
                    .map(|(i, _)| i)
            })
            .expect("population exhausted before n draws");
        picked.push(idx);
        remaining[idx] = 0.0;
    }
    Ok(picked)
}

/// Draw `n` distinct indices uniformly from `0..population`.
pub fn uniform_without_replacement(
    population: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    if n > population {
        return Err(Error::invalid(format!(
            "cannot draw {n} from population of {population}"
        )));
    }
    // Partial Fisher-Yates over an index table.
    let mut pool: Vec<usize> = (0..population).collect();
    for i in 0..n {
        let j = i + rng.below(population - i);
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}
