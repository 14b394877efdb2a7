//! Hypervolume computation, recommendation extraction, and the log relative
//! hypervolume gap performance metric.
//!
//! All objectives are minimized; the hypervolume of a front is the area it
//! dominates inside the box bounded above by a reference point.

use std::collections::HashMap;
use std::sync::Mutex;
use std::sync::OnceLock;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::scalar::log_ndtr;
use crate::pareto::{pareto_front, random_candidates};
use crate::problems::Problem;

/// Grid points judged feasible with high probability, with their predicted
/// mean objective vectors (a non-dominated subset).
#[derive(Debug, Clone, Default)]
pub struct Recommendation {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

/// Exact dominated area for two objectives via sort-and-sweep.
///
/// Points not dominating the reference are clipped out. Only K = 2 is
/// supported; every in-scope problem has two objectives.
pub fn hypervolume_2d(front: &[Vec<f64>], reference: &[f64; 2]) -> Result<f64> {
    for p in front {
        if p.len() != 2 {
            return Err(Error::DimMismatch {
                expected: 2,
                got: p.len(),
            });
        }
    }
    let mut pts: Vec<[f64; 2]> = front
        .iter()
        .filter(|p| p[0] <= reference[0] && p[1] <= reference[1])
        .map(|p| [p[0], p[1]])
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut area = 0.0;
    let mut prev_f2 = reference[1];
    for p in pts {
        if p[1] < prev_f2 {
            area += (reference[0] - p[0]) * (prev_f2 - p[1]);
            prev_f2 = p[1];
        }
    }
    Ok(area)
}

/// Per-point feasibility probability for one constraint, averaged over the
/// hyper-parameter samples.
fn feasibility_prob(models: &[GpModel], x: &[f64]) -> f64 {
    let mut p = 0.0;
    for m in models {
        let (mean, var) = m.predict_mean_var(x);
        p += log_ndtr(mean / var.max(1e-300).sqrt()).exp();
    }
    p / models.len() as f64
}

/// Evaluates the hyper-averaged GP means on a grid, keeps the points whose
/// per-constraint feasibility probability reaches the threshold, and returns
/// the non-dominated subset of their mean objective vectors.
///
/// `obj_models[k]` and `con_models[j]` hold one fitted GP per hyper sample.
/// An empty recommendation (no probabilistically feasible grid point) is
/// scored downstream as hypervolume zero.
pub fn recommend(
    obj_models: &[Vec<GpModel>],
    con_models: &[Vec<GpModel>],
    grid: &[Vec<f64>],
    feasibility_threshold: f64,
) -> Recommendation {
    let mut points = Vec::new();
    let mut values = Vec::new();
    for x in grid {
        let feasible = con_models
            .iter()
            .all(|ms| feasibility_prob(ms, x) >= feasibility_threshold);
        if !feasible {
            continue;
        }
        let mean_vec: Vec<f64> = obj_models
            .iter()
            .map(|ms| {
                ms.iter().map(|m| m.predict_mean_var(x).0).sum::<f64>() / ms.len() as f64
            })
            .collect();
        points.push(x.clone());
        values.push(mean_vec);
    }
    let keep = pareto_front(&values);
    Recommendation {
        points: keep.iter().map(|&i| points[i].clone()).collect(),
        values: keep.iter().map(|&i| values[i].clone()).collect(),
    }
}

/// The default recommendation grid: uniform random points plus the
/// observations made so far.
pub fn recommendation_grid(
    bounds: &[(f64, f64)],
    grid_size: usize,
    observed: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let mut grid = random_candidates(bounds, grid_size, rng);
    grid.extend(observed.iter().cloned());
    grid
}

/// log((hv_truth - hv_rec)/hv_truth + 1e-12), with hv_rec clipped into
/// [0, hv_truth].
pub fn log_relative_hv_gap(hv_truth: f64, hv_rec: f64) -> Result<f64> {
    if hv_truth <= 0.0 {
        return Err(Error::InvalidArgument(
            "hv_truth must be positive".into(),
        ));
    }
    let rec = hv_rec.clamp(0.0, hv_truth);
    Ok(((hv_truth - rec) / hv_truth + 1e-12).ln())
}

/// The true solution of a problem found by exhaustive grid search.
#[derive(Debug, Clone)]
pub struct TrueSolution {
    pub hypervolume: f64,
    pub reference: [f64; 2],
    pub front: Vec<Vec<f64>>,
}

fn dense_grid(problem: &Problem, grid_size: usize) -> Vec<Vec<f64>> {
    let d = problem.dim();
    let axis = |dim: usize| -> Vec<f64> {
        let (lo, hi) = problem.bounds[dim];
        (0..grid_size)
            .map(|i| lo + (hi - lo) * i as f64 / (grid_size - 1).max(1) as f64)
            .collect()
    };
    if grid_size.pow(d as u32) <= 10_000_000 && d <= 3 {
        let mut pts = vec![Vec::with_capacity(d)];
        for dim in 0..d {
            let ax = axis(dim);
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    ax.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        pts
    } else {
        // high-dimensional fallback: seeded quasi-exhaustive random search
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        random_candidates(&problem.bounds, grid_size * grid_size, &mut rng)
    }
}

/// Exhaustive-search solution: dense-grid feasibility filtering,
/// non-domination, and [`hypervolume_2d`] against a reference point set to
/// the componentwise maximum of the objectives over the unconstrained grid
/// plus a 1% range margin. Cached per problem name and grid size.
pub fn true_hypervolume(problem: &Problem, grid_size: usize) -> Result<TrueSolution> {
    static CACHE: OnceLock<Mutex<HashMap<(String, usize), TrueSolution>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (problem.name.clone(), grid_size);
    if let Some(sol) = cache.lock().unwrap().get(&key) {
        return Ok(sol.clone());
    }
    if problem.num_objectives != 2 {
        return Err(Error::InvalidArgument(
            "true_hypervolume supports two objectives only".into(),
        ));
    }
    let grid = dense_grid(problem, grid_size);
    let mut reference = [f64::NEG_INFINITY; 2];
    let mut mins = [f64::INFINITY; 2];
    let mut feasible_objs = Vec::new();
    for x in &grid {
        let e = problem.evaluate(x)?;
        for k in 0..2 {
            reference[k] = reference[k].max(e.objectives[k]);
            mins[k] = mins[k].min(e.objectives[k]);
        }
        if e.is_feasible() {
            feasible_objs.push(e.objectives);
        }
    }
    for k in 0..2 {
        reference[k] += 0.01 * (reference[k] - mins[k]).max(1e-9);
    }
    let keep = pareto_front(&feasible_objs);
    let front: Vec<Vec<f64>> = keep.iter().map(|&i| feasible_objs[i].clone()).collect();
    let hypervolume = hypervolume_2d(&front, &reference)?;
    let sol = TrueSolution {
        hypervolume,
        reference,
        front,
    };
    cache.lock().unwrap().insert(key, sol.clone());
    Ok(sol)
}
