//! Pareto domination and sampling of feasible Pareto sets.
//!
//! A point dominates another when it is no worse in every objective and
//! strictly better in at least one (minimization). Pareto sets of the latent
//! functions are approximated by optimizing sampled function paths over a
//! discrete candidate set.

use crate::gp::FunctionSample;
use rand::seq::SliceRandom;
use rand::Rng;

/// True when `a` dominates `b` under minimization.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    let mut strict = false;
    for (x, y) in a.iter().zip(b.iter()) {
        if x > y {
            return false;
        }
        if x < y {
            strict = true;
        }
    }
    strict
}

/// Indices of the non-dominated points, preserving input order. Exact
/// duplicates are all kept (none dominates the other).
pub fn pareto_front(points: &[Vec<f64>]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !points.iter().any(|p| dominates(p, &points[i])))
        .collect()
}

/// Uniform random candidates inside a box.
pub fn random_candidates(
    bounds: &[(f64, f64)],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            bounds
                .iter()
                .map(|&(lo, hi)| rng.gen_range(lo..=hi))
                .collect()
        })
        .collect()
}

/// Approximates the feasible Pareto set of one joint draw of the latent
/// objectives and constraints by filtering a candidate set.
///
/// Feasible candidates (all sampled constraints >= 0) are reduced to their
/// non-dominated subset; if that subset exceeds `max_size` it is thinned by
/// uniform subsampling. When no candidate is feasible, the single candidate
/// with the smallest total constraint violation is returned so downstream
/// code always has a non-empty Pareto set to condition on.
pub fn sample_pareto_set(
    objectives: &[FunctionSample],
    constraints: &[FunctionSample],
    candidates: &[Vec<f64>],
    max_size: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    assert!(!candidates.is_empty() && max_size > 0);
    let mut feasible: Vec<usize> = Vec::new();
    let mut best_violation = f64::INFINITY;
    let mut least_violating = 0;
    for (i, x) in candidates.iter().enumerate() {
        let violation: f64 = constraints
            .iter()
            .map(|c| (-c.evaluate(x)).max(0.0))
            .sum();
        if violation == 0.0 {
            feasible.push(i);
        } else if violation < best_violation {
            best_violation = violation;
            least_violating = i;
        }
    }
    if feasible.is_empty() {
        return vec![candidates[least_violating].clone()];
    }
    let values: Vec<Vec<f64>> = feasible
        .iter()
        .map(|&i| objectives.iter().map(|f| f.evaluate(&candidates[i])).collect())
        .collect();
    let mut front: Vec<usize> = pareto_front(&values)
        .into_iter()
        .map(|k| feasible[k])
        .collect();
    if front.len() > max_size {
        front.shuffle(rng);
        front.truncate(max_size);
    }
    front.into_iter().map(|i| candidates[i].clone()).collect()
}
