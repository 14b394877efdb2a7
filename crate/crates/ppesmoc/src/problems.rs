//! Constrained multi-objective benchmark problems.
//!
//! Every problem is expressed in a canonical slack form: all objectives are
//! minimized and a point is feasible if and only if every constraint value
//! satisfies c_j(x) >= 0. Evaluations can optionally be corrupted with
//! additive Gaussian noise whose scale is a fraction of each output's
//! empirical range.

use crate::error::{Error, Result};
use crate::gp::{sample_function, FunctionSample, GpModel, KernelParams};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;

/// Noiseless outputs of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objectives: Vec<f64>,
    pub constraints: Vec<f64>,
}

impl Evaluation {
    pub fn is_feasible(&self) -> bool {
        self.constraints.iter().all(|&c| c >= 0.0)
    }

    /// Outputs flattened as objectives followed by constraints.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.objectives.clone();
        v.extend_from_slice(&self.constraints);
        v
    }
}

type EvalFn = Arc<dyn Fn(&[f64]) -> Evaluation + Send + Sync>;

#[derive(Clone)]
pub struct Problem {
    pub name: String,
    pub bounds: Vec<(f64, f64)>,
    pub num_objectives: usize,
    pub num_constraints: usize,
    /// Per-output observation noise std (objectives then constraints).
    pub noise_std: Vec<f64>,
    eval_fn: EvalFn,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("bounds", &self.bounds)
            .field("num_objectives", &self.num_objectives)
            .field("num_constraints", &self.num_constraints)
            .field("noise_std", &self.noise_std)
            .finish()
    }
}

impl Problem {
    fn new(
        name: &str,
        bounds: Vec<(f64, f64)>,
        num_objectives: usize,
        num_constraints: usize,
        eval_fn: EvalFn,
    ) -> Self {
        Problem {
            name: name.to_string(),
            bounds,
            num_objectives,
            num_constraints,
            noise_std: vec![0.0; num_objectives + num_constraints],
            eval_fn,
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.num_objectives + self.num_constraints
    }

    /// Noiseless evaluation. Points must lie inside the box (with a small
    /// tolerance for round-off at the boundary).
    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        for (i, (&xi, &(lo, hi))) in x.iter().zip(self.bounds.iter()).enumerate() {
            if !(lo - 1e-9..=hi + 1e-9).contains(&xi) {
                return Err(Error::OutOfBounds { dim: i, value: xi });
            }
        }
        Ok((self.eval_fn)(x))
    }

    /// Evaluation with additive Gaussian noise on every output.
    pub fn evaluate_noisy(&self, x: &[f64], rng: &mut impl Rng) -> Result<Evaluation> {
        let mut e = self.evaluate(x)?;
        let k = self.num_objectives;
        for (i, o) in e.objectives.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *o += self.noise_std[i] * z;
        }
        for (j, c) in e.constraints.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *c += self.noise_std[k + j] * z;
        }
        Ok(e)
    }

    /// Sets the noise std of every output to `fraction` of its empirical
    /// range, estimated from a fixed probe of uniform random points.
    pub fn with_relative_noise(mut self, fraction: f64) -> Self {
        if fraction <= 0.0 {
            self.noise_std = vec![0.0; self.num_outputs()];
            return self;
        }
        let ranges = self.output_ranges(100_000);
        self.noise_std = ranges.iter().map(|r| fraction * r).collect();
        self
    }

    /// Empirical min-to-max range of each output over a uniform probe.
    pub fn output_ranges(&self, n_probe: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9_7f4a_7c15);
        let m = self.num_outputs();
        let mut lo = vec![f64::INFINITY; m];
        let mut hi = vec![f64::NEG_INFINITY; m];
        let mut x = vec![0.0; self.dim()];
        for _ in 0..n_probe {
            for (xi, &(a, b)) in x.iter_mut().zip(self.bounds.iter()) {
                *xi = rng.gen_range(a..=b);
            }
            let e = (self.eval_fn)(&x);
            for (i, v) in e.flat().iter().enumerate() {
                if v.is_finite() {
                    lo[i] = lo[i].min(*v);
                    hi[i] = hi[i].max(*v);
                }
            }
        }
        lo.iter().zip(hi.iter()).map(|(a, b)| b - a).collect()
    }
}

/// BNH: two quadratic objectives, one disc and one annulus constraint.
pub fn bnh() -> Problem {
    Problem::new(
        "bnh",
        vec![(0.0, 5.0), (0.0, 3.0)],
        2,
        2,
        Arc::new(|x| {
            let (x1, x2) = (x[0], x[1]);
            Evaluation {
                objectives: vec![
                    4.0 * x1 * x1 + 4.0 * x2 * x2,
                    (x1 - 5.0).powi(2) + (x2 - 5.0).powi(2),
                ],
                constraints: vec![
                    25.0 - ((x1 - 5.0).powi(2) + x2 * x2),
                    ((x1 - 8.0).powi(2) + (x2 + 3.0).powi(2)) - 7.7,
                ],
            }
        }),
    )
}

/// SRN: quadratic objectives with a disc and a linear constraint.
pub fn srn() -> Problem {
    Problem::new(
        "srn",
        vec![(-20.0, 20.0), (-20.0, 20.0)],
        2,
        2,
        Arc::new(|x| {
            let (x1, x2) = (x[0], x[1]);
            Evaluation {
                objectives: vec![
                    2.0 + (x1 - 2.0).powi(2) + (x2 - 2.0).powi(2),
                    9.0 * x1 - (x2 - 1.0).powi(2),
                ],
                constraints: vec![
                    225.0 - (x1 * x1 + x2 * x2),
                    -(x1 - 3.0 * x2 + 10.0),
                ],
            }
        }),
    )
}

/// TNK: identity objectives with an oscillating ring constraint.
pub fn tnk() -> Problem {
    Problem::new(
        "tnk",
        vec![(0.0, std::f64::consts::PI), (0.0, std::f64::consts::PI)],
        2,
        2,
        Arc::new(|x| {
            let (x1, x2) = (x[0], x[1]);
            let ratio = if x2 == 0.0 {
                if x1 == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                x1 / x2
            };
            Evaluation {
                objectives: vec![x1, x2],
                constraints: vec![
                    x1 * x1 + x2 * x2 - 1.0 - 0.1 * (16.0 * ratio.atan()).cos(),
                    0.5 - ((x1 - 0.5).powi(2) + (x2 - 0.5).powi(2)),
                ],
            }
        }),
    )
}

/// OSY: six variables, two objectives, six constraints.
pub fn osy() -> Problem {
    Problem::new(
        "osy",
        vec![
            (0.0, 10.0),
            (0.0, 10.0),
            (1.0, 5.0),
            (0.0, 6.0),
            (1.0, 5.0),
            (0.0, 10.0),
        ],
        2,
        6,
        Arc::new(|x| {
            let f1 = -(25.0 * (x[0] - 2.0).powi(2)
                + (x[1] - 2.0).powi(2)
                + (x[2] - 1.0).powi(2)
                + (x[3] - 4.0).powi(2)
                + (x[4] - 1.0).powi(2));
            let f2 = x.iter().map(|v| v * v).sum();
            Evaluation {
                objectives: vec![f1, f2],
                constraints: vec![
                    x[0] + x[1] - 2.0,
                    6.0 - x[0] - x[1],
                    2.0 - x[1] + x[0],
                    2.0 - x[0] + 3.0 * x[1],
                    4.0 - (x[2] - 3.0).powi(2) - x[3],
                    (x[4] - 3.0).powi(2) + x[5] - 4.0,
                ],
            }
        }),
    )
}

/// CONSTR: two linear constraints cutting the convex front.
pub fn constr() -> Problem {
    Problem::new(
        "constr",
        vec![(0.1, 10.0), (0.0, 5.0)],
        2,
        2,
        Arc::new(|x| {
            let (x1, x2) = (x[0], x[1]);
            Evaluation {
                objectives: vec![x1, (1.0 + x2) / x1],
                constraints: vec![x2 + 9.0 * x1 - 6.0, -x2 + 9.0 * x1 - 1.0],
            }
        }),
    )
}

/// Two-bar truss design: weight vs. maximal stress, one stress constraint.
pub fn two_bar_truss() -> Problem {
    Problem::new(
        "two_bar_truss",
        vec![(0.0, 0.01), (0.0, 0.01), (1.0, 3.0)],
        2,
        1,
        Arc::new(|x| {
            // Cross-sections of zero area would make the stress infinite;
            // clamp just above the lower bound.
            let x1 = x[0].max(1e-9);
            let x2 = x[1].max(1e-9);
            let x3 = x[2];
            let f1 = x1 * (16.0 + x3 * x3).sqrt() + x2 * (1.0 + x3 * x3).sqrt();
            let s1 = 20.0 * (16.0 + x3).sqrt() / (x1 * x3);
            let s2 = 80.0 * (1.0 + x3 * x3).sqrt() / (x2 * x3);
            let f2 = s1.max(s2);
            Evaluation {
                objectives: vec![f1, f2],
                constraints: vec![1e5 - f2],
            }
        }),
    )
}

/// Names of all analytic benchmarks, in a stable order.
pub fn benchmark_names() -> Vec<&'static str> {
    vec!["bnh", "srn", "tnk", "osy", "constr", "two_bar_truss"]
}

/// Looks a benchmark up by name (case-insensitive).
pub fn by_name(name: &str) -> Result<Problem> {
    match name.to_ascii_lowercase().as_str() {
        "bnh" => Ok(bnh()),
        "srn" => Ok(srn()),
        "tnk" => Ok(tnk()),
        "osy" => Ok(osy()),
        "constr" => Ok(constr()),
        "two_bar_truss" | "truss" => Ok(two_bar_truss()),
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}

/// A synthetic problem whose objectives and constraints are independent
/// draws from a GP prior over the unit cube, useful for controlled
/// experiments where the surrogate model is well specified.
pub fn synthetic_gp(
    dim: usize,
    num_objectives: usize,
    num_constraints: usize,
    kernel: KernelParams,
    num_features: usize,
    seed: u64,
) -> Result<Problem> {
    if kernel.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: kernel.dim(),
        });
    }
    let prior = GpModel::fit(vec![], vec![], kernel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<FunctionSample> = (0..num_objectives + num_constraints)
        .map(|_| sample_function(&prior, num_features, &mut rng))
        .collect::<Result<_>>()?;
    let k = num_objectives;
    Ok(Problem::new(
        &format!("synthetic_gp_{seed}"),
        vec![(0.0, 1.0); dim],
        num_objectives,
        num_constraints,
        Arc::new(move |x| Evaluation {
            objectives: samples[..k].iter().map(|s| s.evaluate(x)).collect(),
            constraints: samples[k..].iter().map(|s| s.evaluate(x)).collect(),
        }),
    ))
}
