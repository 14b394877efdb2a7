//! The PPESMOC batch acquisition function: expected reduction in the
//! entropy of the predictive distribution at a candidate batch caused by
//! conditioning on the feasible Pareto set.
//!
//! For each Pareto-set sample (with its converged EP approximation) the
//! acquisition compares log-determinants of the batch predictive
//! covariances before and after conditioning; constants cancel. Gradients
//! are computed with forward-mode dual numbers flowing through the kernel
//! evaluations, the one-shot batch factor refinement, and the
//! log-determinants, while the converged factor parameters stay fixed.

use crate::ep::{cpd_at_batch, run_ep, EpOptions, FactorStore, JointGauss, Priors};
use crate::error::{Error, Result};
use crate::gp::{
    kernel_matern52, kernel_matern52_generic, kernel_matern52_gg, sample_function, GpModel,
    HyperPosterior,
};
use crate::linalg::Mat;
use crate::opt::maximize_box;
use crate::pareto::{random_candidates, sample_pareto_set};
use crate::scalar::{Dual, Scalar, LANES};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::{digamma, ln_gamma};

const DUPLICATE_EPS: f64 = 1e-6;
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Training data in model space: inputs normalized to the unit cube,
/// outputs standardized (objectives) or scale-normalized (constraints).
#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub x: Vec<Vec<f64>>,
    /// per objective, length-N targets
    pub y_obj: Vec<Vec<f64>>,
    /// per constraint, length-N targets
    pub y_con: Vec<Vec<f64>>,
}

/// One GP fitted under one hyper-parameter sample, with the projection
/// matrix `w = K(points, train) (K + sigma^2 I)^{-1}` cached for fast
/// batch extensions.
#[derive(Debug, Clone)]
pub struct ConditionedModel {
    pub model: GpModel,
    w: Mat<f64>,
}

/// One Pareto-set sample together with its paired hyper-parameter sample
/// and converged EP factors.
#[derive(Debug, Clone)]
pub struct ParetoCondition {
    pub obj: Vec<ConditionedModel>,
    pub con: Vec<ConditionedModel>,
    /// Pareto points followed by the observed inputs
    pub points: Vec<Vec<f64>>,
    pub num_pareto: usize,
    pub priors: Priors<f64>,
    pub store: FactorStore<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct ContextConfig {
    /// number of Pareto-set samples S (each paired with a hyper sample)
    pub num_conditions: usize,
    /// cap on the size of each sampled Pareto set
    pub max_pareto: usize,
    /// random candidates used when discretizing the Pareto-set search
    pub num_candidates: usize,
    /// random features per sampled function path
    pub num_features: usize,
    pub ep: EpOptions,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            num_conditions: 10,
            max_pareto: 50,
            num_candidates: 1000,
            num_features: 500,
            ep: EpOptions::default(),
        }
    }
}

/// Everything needed to evaluate the acquisition, immutable once built.
#[derive(Debug, Clone)]
pub struct AcquisitionContext {
    pub bounds: Vec<(f64, f64)>,
    pub batch_size: usize,
    pub conditions: Vec<ParetoCondition>,
}

/// A candidate batch with its acquisition value and gradient.
#[derive(Debug, Clone)]
pub struct BatchProposal {
    pub x: Vec<Vec<f64>>,
    pub value: f64,
    pub gradient: Vec<Vec<f64>>,
}

fn fit_black_boxes(
    data: &TrainingData,
    obj_hypers: &[HyperPosterior],
    con_hypers: &[HyperPosterior],
    hyper_idx: usize,
) -> Result<(Vec<GpModel>, Vec<GpModel>)> {
    let pick = |h: &HyperPosterior| h.samples[hyper_idx % h.samples.len()].clone();
    let obj = data
        .y_obj
        .iter()
        .zip(obj_hypers.iter())
        .map(|(y, h)| GpModel::fit(data.x.clone(), y.clone(), pick(h)))
        .collect::<Result<Vec<_>>>()?;
    let con = data
        .y_con
        .iter()
        .zip(con_hypers.iter())
        .map(|(y, h)| GpModel::fit(data.x.clone(), y.clone(), pick(h)))
        .collect::<Result<Vec<_>>>()?;
    Ok((obj, con))
}

fn condition_model(model: GpModel, points: &[Vec<f64>]) -> ConditionedModel {
    let t = points.len();
    let n = model.n();
    let kpt = Mat::from_fn(t, n, |i, j| {
        kernel_matern52(&points[i], &model.x_train[j], &model.kernel)
    });
    let w = kpt.matmul(&model.k_inv);
    ConditionedModel { model, w }
}

/// Builds the acquisition context: S Pareto-set samples, each paired
/// round-robin with a hyper-parameter sample, with EP run to convergence.
pub fn build_context(
    data: &TrainingData,
    obj_hypers: &[HyperPosterior],
    con_hypers: &[HyperPosterior],
    bounds: &[(f64, f64)],
    batch_size: usize,
    cfg: &ContextConfig,
    rng: &mut impl Rng,
) -> Result<AcquisitionContext> {
    if cfg.num_conditions == 0 {
        return Err(Error::InvalidArgument("need at least one condition".into()));
    }
    // Re-selected batch points leave near-duplicate observations in the
    // dataset; duplicates would contribute identical EP factors while making
    // the joint prior over the conditioning points numerically singular, so
    // only one representative of each cluster is conditioned on.
    let obs = dedup_points(&data.x, DUPLICATE_EPS);
    let mut conditions = Vec::with_capacity(cfg.num_conditions);
    for s in 0..cfg.num_conditions {
        let (obj_models, con_models) = fit_black_boxes(data, obj_hypers, con_hypers, s)?;
        let obj_draws = obj_models
            .iter()
            .map(|m| sample_function(m, cfg.num_features, rng))
            .collect::<Result<Vec<_>>>()?;
        let con_draws = con_models
            .iter()
            .map(|m| sample_function(m, cfg.num_features, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut candidates = random_candidates(bounds, cfg.num_candidates, rng);
        candidates.extend(obs.iter().cloned());
        let mut pareto =
            sample_pareto_set(&obj_draws, &con_draws, &candidates, cfg.max_pareto, rng);
        separate_points(&mut pareto, &obs, bounds);
        let num_pareto = pareto.len();
        let mut points = pareto;
        points.extend(obs.iter().cloned());
        let joint = |models: &[GpModel]| -> Vec<JointGauss<f64>> {
            models
                .iter()
                .map(|m| {
                    let (mean, cov) = m.predict(&points);
                    JointGauss { mean, cov }
                })
                .collect()
        };
        let priors = Priors {
            obj: joint(&obj_models),
            con: joint(&con_models),
        };
        let ep = run_ep(&priors, num_pareto, &cfg.ep)?;
        conditions.push(ParetoCondition {
            obj: obj_models
                .into_iter()
                .map(|m| condition_model(m, &points))
                .collect(),
            con: con_models
                .into_iter()
                .map(|m| condition_model(m, &points))
                .collect(),
            points,
            num_pareto,
            priors,
            store: ep.store,
            converged: ep.converged,
        });
    }
    Ok(AcquisitionContext {
        bounds: bounds.to_vec(),
        batch_size,
        conditions,
    })
}

/// Keeps the first representative of every cluster of points closer than
/// `tol` in the max norm.
fn dedup_points(points: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for p in points {
        let dup = out.iter().any(|q| {
            p.iter()
                .zip(q.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
                < tol
        });
        if !dup {
            out.push(p.clone());
        }
    }
    out
}

/// Nudges Pareto points that collide with observations (or each other) so
/// the joint prior stays comfortably positive definite.
fn separate_points(pareto: &mut [Vec<f64>], obs: &[Vec<f64>], bounds: &[(f64, f64)]) {
    for i in 0..pareto.len() {
        let collides = |p: &[f64], others: &[Vec<f64>], skip: Option<usize>| {
            others.iter().enumerate().any(|(q, o)| {
                Some(q) != skip
                    && p.iter()
                        .zip(o.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f64, f64::max)
                        < 1e-8
            })
        };
        let mut guard = 0;
        while (collides(&pareto[i], obs, None) || {
            let (head, tail) = pareto.split_at(i);
            collides(&tail[0], head, None)
        }) && guard < 50
        {
            for (c, &(lo, hi)) in pareto[i].iter_mut().zip(bounds.iter()) {
                let width = hi - lo;
                *c = (*c + DUPLICATE_EPS * width * (guard + 1) as f64).clamp(lo, hi);
            }
            guard += 1;
        }
    }
}

/// Gaussian differential entropy: `n_blocks` independent blocks sharing the
/// same covariance.
pub fn entropy_gaussian(cov: &Mat<f64>, n_blocks: usize) -> Result<f64> {
    let (chol, _) = cov.cholesky_jittered(JITTER_START, JITTER_MAX)?;
    let n = chol.n() as f64;
    let one = 0.5 * (n * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + chol.logdet());
    Ok(one * n_blocks as f64)
}

/// Log-determinant of a small covariance block that is positive definite in
/// exact arithmetic but may carry cancellation noise. The diagonal is lifted
/// to at least `floor` (derivative lanes untouched) and the jitter ladder is
/// scaled to the block's magnitude.
fn logdet_spd<S: Scalar>(blk: &Mat<S>, floor: f64) -> Result<S> {
    let n = blk.nrows;
    let mut m = blk.clone();
    let mut scale = 0.0f64;
    for i in 0..n {
        let d = m[(i, i)].re();
        if d < floor {
            m[(i, i)] += S::from_f64(floor - d);
        }
        scale = scale.max(m[(i, i)].re());
    }
    let (chol, _) = m.cholesky_jittered(JITTER_START, JITTER_MAX * scale.max(1.0))?;
    Ok(chol.logdet())
}

/// Entropy-difference contribution of a single Pareto condition at a batch,
/// generic so it can carry dual-number derivatives.
fn condition_value<S: Scalar>(cond: &ParetoCondition, batch: &[Vec<S>]) -> Result<S> {
    let b = batch.len();
    let t = cond.points.len();
    let ext = extended_priors(cond, batch);
    let noise_obj: Vec<f64> = cond.obj.iter().map(|c| c.model.kernel.noise_var).collect();
    let noise_con: Vec<f64> = cond.con.iter().map(|c| c.model.kernel.noise_var).collect();
    let mut before = S::zero();
    for (g, &nv) in ext
        .obj
        .iter()
        .zip(noise_obj.iter())
        .chain(ext.con.iter().zip(noise_con.iter()))
    {
        let mut blk = Mat::from_fn(b, b, |i, j| g.cov[(t + i, t + j)]);
        for i in 0..b {
            blk[(i, i)] += S::from_f64(nv);
        }
        before += logdet_spd(&blk, nv)?;
    }
    // A conditioning failure here means the extended prior is numerically
    // degenerate (batch collapsed onto conditioned points); the honest
    // degraded answer is "no entropy reduction" rather than an abort.
    let after = (|| -> Result<S> {
        let cpd = cpd_at_batch(&cond.store, &ext, b, &noise_obj, &noise_con)?;
        let mut acc = S::zero();
        for (m, &nv) in cpd
            .obj
            .iter()
            .zip(noise_obj.iter())
            .chain(cpd.con.iter().zip(noise_con.iter()))
        {
            acc += logdet_spd(m, nv)?;
        }
        Ok(acc)
    })()
    .unwrap_or(before);
    Ok(S::from_f64(0.5) * (before - after))
}

/// Joint GP posterior over the condition's fixed points plus the batch.
fn extended_priors<S: Scalar>(cond: &ParetoCondition, batch: &[Vec<S>]) -> Priors<S> {
    let build = |cm: &ConditionedModel, prior: &JointGauss<f64>| -> JointGauss<S> {
        let t = cond.points.len();
        let b = batch.len();
        let n = cm.model.n();
        let params = &cm.model.kernel;
        let total = t + b;
        let mut cov = Mat::zeros(total, total);
        let mut mean = vec![S::zero(); total];
        for i in 0..t {
            mean[i] = S::from_f64(prior.mean[i]);
            for j in 0..t {
                cov[(i, j)] = S::from_f64(prior.cov[(i, j)]);
            }
        }
        // kernel vectors against the training set, one per batch point
        let kb: Vec<Vec<S>> = batch
            .iter()
            .map(|x| {
                (0..n)
                    .map(|i| kernel_matern52_generic(x, &cm.model.x_train[i], params))
                    .collect()
            })
            .collect();
        for (q, x) in batch.iter().enumerate() {
            let mut m = S::zero();
            for i in 0..n {
                m += kb[q][i] * S::from_f64(cm.model.alpha[i]);
            }
            mean[t + q] = m;
            for p in 0..t {
                let mut c = kernel_matern52_generic(x, &cond.points[p], params);
                for i in 0..n {
                    c -= S::from_f64(cm.w[(p, i)]) * kb[q][i];
                }
                cov[(p, t + q)] = c;
                cov[(t + q, p)] = c;
            }
        }
        // batch-by-batch posterior block
        for q in 0..batch.len() {
            // A k_q once per column
            let akq: Vec<S> = (0..n)
                .map(|i| {
                    let mut acc = S::zero();
                    for j in 0..n {
                        acc += S::from_f64(cm.model.k_inv[(i, j)]) * kb[q][j];
                    }
                    acc
                })
                .collect();
            for r in 0..=q {
                let mut c = kernel_matern52_gg(&batch[r], &batch[q], params);
                for i in 0..n {
                    c -= kb[r][i] * akq[i];
                }
                cov[(t + r, t + q)] = c;
                cov[(t + q, t + r)] = c;
            }
        }
        JointGauss { mean, cov }
    };
    Priors {
        obj: cond
            .obj
            .iter()
            .zip(cond.priors.obj.iter())
            .map(|(cm, p)| build(cm, p))
            .collect(),
        con: cond
            .con
            .iter()
            .zip(cond.priors.con.iter())
            .map(|(cm, p)| build(cm, p))
            .collect(),
    }
}

/// Pushes apart batch points closer than `DUPLICATE_EPS` so the batch
/// covariance keeps a finite log-determinant.
fn perturb_duplicates(batch: &mut [Vec<f64>], bounds: &[(f64, f64)]) {
    for i in 1..batch.len() {
        let mut guard = 0;
        while guard < 50
            && batch[..i].iter().any(|o| {
                batch[i]
                    .iter()
                    .zip(o.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
                    < DUPLICATE_EPS
            })
        {
            for (c, &(lo, hi)) in batch[i].iter_mut().zip(bounds.iter()) {
                *c = (*c + 2.0 * DUPLICATE_EPS * (hi - lo)).clamp(lo, hi);
            }
            guard += 1;
        }
    }
}

/// Sorts batch rows lexicographically so evaluation is exactly invariant
/// under row permutations; returns the permutation applied.
fn canonical_order(batch: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.sort_by(|&a, &b| {
        batch[a]
            .iter()
            .zip(batch[b].iter())
            .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    (idx.iter().map(|&i| batch[i].clone()).collect(), idx)
}

/// The acquisition value at a batch (higher is better).
pub fn alpha(ctx: &AcquisitionContext, batch: &[Vec<f64>]) -> Result<f64> {
    let (mut batch, _) = canonical_order(batch);
    perturb_duplicates(&mut batch, &ctx.bounds);
    let mut total = 0.0;
    for cond in &ctx.conditions {
        total += condition_value::<f64>(cond, &batch)?;
    }
    Ok(total / ctx.conditions.len() as f64)
}

/// The acquisition and its gradient with respect to every batch coordinate,
/// via forward-mode dual numbers in chunks of [`LANES`] directions.
pub fn alpha_with_grad(
    ctx: &AcquisitionContext,
    batch: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (mut batch, perm) = canonical_order(batch);
    perturb_duplicates(&mut batch, &ctx.bounds);
    let b = batch.len();
    let d = if b > 0 { batch[0].len() } else { 0 };
    let n_coords = b * d;
    let mut grad = vec![vec![0.0; d]; b];
    let mut value = 0.0;
    let mut chunk_start = 0;
    while chunk_start < n_coords.max(1) {
        let width = LANES.min(n_coords.saturating_sub(chunk_start)).max(0);
        let dual_batch: Vec<Vec<Dual>> = batch
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        let coord = i * d + j;
                        if coord >= chunk_start && coord < chunk_start + width {
                            Dual::variable(x, coord - chunk_start)
                        } else {
                            Dual::constant(x)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut total = Dual::constant(0.0);
        for cond in &ctx.conditions {
            total += condition_value::<Dual>(cond, &dual_batch)?;
        }
        let scale = 1.0 / ctx.conditions.len() as f64;
        if chunk_start == 0 {
            value = total.re * scale;
        }
        for lane in 0..width {
            let coord = chunk_start + lane;
            grad[coord / d][coord % d] = total.dx[lane] * scale;
        }
        chunk_start += width.max(1);
    }
    // undo the canonical row ordering
    let mut out = vec![vec![0.0; d]; b];
    for (sorted_pos, &orig) in perm.iter().enumerate() {
        out[orig] = grad[sorted_pos].clone();
    }
    Ok((value, out))
}

/// The B = 1 (sequential) acquisition.
pub fn alpha_sequential(ctx: &AcquisitionContext, x: &[f64]) -> Result<f64> {
    alpha(ctx, std::slice::from_ref(&x.to_vec()))
}

/// Multi-start projected L-BFGS maximization of the batch acquisition.
pub fn optimize_batch(
    ctx: &AcquisitionContext,
    n_restarts: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> Result<BatchProposal> {
    if n_restarts == 0 {
        return Err(Error::InvalidArgument("n_restarts must be >= 1".into()));
    }
    let b = ctx.batch_size;
    let d = ctx.bounds.len();
    let flat_bounds: Vec<(f64, f64)> = (0..b * d).map(|i| ctx.bounds[i % d]).collect();
    let unflatten = |z: &[f64]| -> Vec<Vec<f64>> {
        (0..b).map(|i| z[i * d..(i + 1) * d].to_vec()).collect()
    };
    let mut best: Option<BatchProposal> = None;
    for _ in 0..n_restarts {
        // The acquisition is multimodal, so a bare random start wastes most
        // L-BFGS runs in shallow basins: pre-screen a pool of random batches
        // by value (cheap, EP is already done) and ascend from the best one.
        let mut z0: Vec<f64> = flat_bounds
            .iter()
            .map(|&(lo, hi)| rng.gen_range(lo..=hi))
            .collect();
        let mut v0 = alpha(ctx, &unflatten(&z0)).unwrap_or(f64::NEG_INFINITY);
        for _ in 1..PRESCREEN_STARTS {
            let z: Vec<f64> = flat_bounds
                .iter()
                .map(|&(lo, hi)| rng.gen_range(lo..=hi))
                .collect();
            if let Ok(v) = alpha(ctx, &unflatten(&z)) {
                if v > v0 {
                    v0 = v;
                    z0 = z;
                }
            }
        }
        let mut eval = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (v, g) = alpha_with_grad(ctx, &unflatten(z))?;
            Ok((v, g.into_iter().flatten().collect()))
        };
        let run = maximize_box(&mut eval, &flat_bounds, &z0, max_iters);
        let candidate = match run {
            Ok(r) => BatchProposal {
                x: unflatten(&r.x),
                value: r.value,
                gradient: unflatten(&r.grad),
            },
            Err(_) => continue,
        };
        if best
            .as_ref()
            .map(|p| candidate.value > p.value)
            .unwrap_or(true)
        {
            best = Some(candidate);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("all acquisition restarts failed".into()))
}

/// Kozachenko-Leonenko nearest-neighbor entropy estimate (natural log).
pub fn knn_entropy(samples: &[Vec<f64>], k: usize) -> f64 {
    let n = samples.len();
    assert!(n > k && k >= 1);
    let d = samples[0].len();
    let mut sum_log_r = 0.0;
    for (i, a) in samples.iter().enumerate() {
        let mut dists: Vec<f64> = samples
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
        sum_log_r += dists[k - 1].max(1e-12).ln();
    }
    let df = d as f64;
    let log_unit_ball = 0.5 * df * std::f64::consts::PI.ln() - ln_gamma(0.5 * df + 1.0);
    digamma(n as f64) - digamma(k as f64) + log_unit_ball + df * sum_log_r / n as f64
}

/// Expensive Monte Carlo estimate of the acquisition on a discretized
/// domain, used purely as a validation oracle.
///
/// For every Pareto condition, joint function values are sampled on a grid
/// (plus the condition points and the batch); samples incompatible with the
/// Pareto-set indicator are rejected, and the entropy of the noisy batch
/// values is estimated by nearest neighbors before and after rejection.
pub fn exact_alpha_mc(
    ctx: &AcquisitionContext,
    batch: &[Vec<f64>],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    const GRID: usize = 20;
    const KNN: usize = 3;
    const SUBSAMPLE: usize = 2000;
    let d = ctx.bounds.len();
    let b = batch.len();
    let mut batch = batch.to_vec();
    perturb_duplicates(&mut batch, &ctx.bounds);
    let mut total = 0.0;
    for cond in &ctx.conditions {
        let m = cond.num_pareto;
        let mut pts = cond.points.clone();
        let t = pts.len();
        pts.extend(batch.iter().cloned());
        // grid completion of the discretized domain
        let grid: Vec<Vec<f64>> = if d == 1 {
            let (lo, hi) = ctx.bounds[0];
            (0..GRID)
                .map(|i| vec![lo + (hi - lo) * (i as f64 + 0.5) / GRID as f64])
                .collect()
        } else {
            random_candidates(&ctx.bounds, 2 * GRID, rng)
        };
        for gpt in grid {
            let close = pts.iter().any(|p| {
                p.iter()
                    .zip(gpt.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
                    < 1e-6
            });
            if !close {
                pts.push(gpt);
            }
        }
        let g = pts.len();
        // per black-box sampling machinery
        let prep = |cm: &ConditionedModel| {
            let (mean, cov) = cm.model.predict(&pts);
            let chol = cov.cholesky_jittered(JITTER_START, JITTER_MAX).unwrap().0;
            (mean, chol)
        };
        let obj_s: Vec<_> = cond.obj.iter().map(prep).collect();
        let con_s: Vec<_> = cond.con.iter().map(prep).collect();
        let mut before: Vec<Vec<f64>> = Vec::with_capacity(n_samples);
        let mut after: Vec<Vec<f64>> = Vec::new();
        let mut fvals = vec![vec![0.0; g]; obj_s.len()];
        let mut cvals = vec![vec![0.0; g]; con_s.len()];
        for _ in 0..n_samples {
            let draw = |mean: &Vec<f64>, chol: &crate::linalg::Chol<f64>,
                        out: &mut Vec<f64>,
                        rng: &mut dyn rand::RngCore| {
                let z: Vec<f64> = (0..g).map(|_| StandardNormal.sample(rng)).collect();
                for i in 0..g {
                    let mut acc = mean[i];
                    for j in 0..=i {
                        acc += chol.l[(i, j)] * z[j];
                    }
                    out[i] = acc;
                }
            };
            for (k, (mean, chol)) in obj_s.iter().enumerate() {
                draw(mean, chol, &mut fvals[k], rng);
            }
            for (j, (mean, chol)) in con_s.iter().enumerate() {
                draw(mean, chol, &mut cvals[j], rng);
            }
            // noisy values at the batch form the entropy sample
            let mut v = Vec::with_capacity((obj_s.len() + con_s.len()) * b);
            for (k, cm) in cond.obj.iter().enumerate() {
                let sd = cm.model.kernel.noise_var.sqrt();
                for q in 0..b {
                    let e: f64 = StandardNormal.sample(rng);
                    v.push(fvals[k][t + q] + sd * e);
                }
            }
            for (j, cm) in cond.con.iter().enumerate() {
                let sd = cm.model.kernel.noise_var.sqrt();
                for q in 0..b {
                    let e: f64 = StandardNormal.sample(rng);
                    v.push(cvals[j][t + q] + sd * e);
                }
            }
            // indicator: Pareto points feasible, everything else infeasible
            // or dominated by a Pareto point
            let mut ok = (0..m).all(|i| cvals.iter().all(|c| c[i] >= 0.0));
            if ok {
                'outer: for o in m..g {
                    if cvals.iter().all(|c| c[o] >= 0.0) {
                        let dominated = (0..m).any(|i| fvals.iter().all(|f| f[i] <= f[o]));
                        if !dominated {
                            ok = false;
                            break 'outer;
                        }
                    }
                }
            }
            if ok {
                after.push(v.clone());
            }
            before.push(v);
        }
        let rate = after.len() as f64 / n_samples as f64;
        if rate < 1e-4 || after.len() <= KNN {
            return Err(Error::InsufficientSamples(rate));
        }
        if before.len() > SUBSAMPLE {
            before.shuffle(rng);
            before.truncate(SUBSAMPLE);
        }
        if after.len() > SUBSAMPLE {
            after.shuffle(rng);
            after.truncate(SUBSAMPLE);
        }
        total += knn_entropy(&before, KNN) - knn_entropy(&after, KNN);
    }
    Ok(total / ctx.conditions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{KernelParams, PriorSpec};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_data(n: usize, k: usize, j: usize, seed: u64) -> TrainingData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
        let f = |x: f64, p: usize| (3.0 * x + p as f64).sin();
        TrainingData {
            y_obj: (0..k)
                .map(|p| x.iter().map(|v| f(v[0], p)).collect())
                .collect(),
            y_con: (0..j)
                .map(|p| x.iter().map(|v| f(v[0], p + 5) + 0.3).collect())
                .collect(),
            x,
        }
    }

    fn toy_context(
        n: usize,
        k: usize,
        j: usize,
        batch: usize,
        s: usize,
        seed: u64,
    ) -> AcquisitionContext {
        let data = toy_data(n, k, j, seed);
        let params = KernelParams::isotropic(1.0, 0.3, 1, 1e-4);
        let hyper = HyperPosterior {
            samples: vec![params],
        };
        let cfg = ContextConfig {
            num_conditions: s,
            max_pareto: 6,
            num_candidates: 100,
            num_features: 100,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        build_context(
            &data,
            &vec![hyper.clone(); k],
            &vec![hyper; j],
            &[(0.0, 1.0)],
            batch,
            &cfg,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn entropy_gaussian_closed_forms() {
        let one = Mat::identity(1);
        let h = entropy_gaussian(&one, 1).unwrap();
        assert_relative_eq!(h, 1.4189385332046727, epsilon = 1e-10);
        let eye3 = Mat::identity(3);
        assert_relative_eq!(entropy_gaussian(&eye3, 1).unwrap(), 3.0 * h, epsilon = 1e-9);
        assert_relative_eq!(entropy_gaussian(&one, 4).unwrap(), 4.0 * h, epsilon = 1e-10);
        let mut scaled = Mat::identity(3);
        for i in 0..3 {
            scaled[(i, i)] = 2.5;
        }
        assert_relative_eq!(
            entropy_gaussian(&scaled, 1).unwrap(),
            3.0 * h + 0.5 * 3.0 * 2.5f64.ln(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn alpha_is_permutation_invariant() {
        let ctx = toy_context(5, 2, 1, 2, 2, 11);
        let batch = vec![vec![0.21], vec![0.67]];
        let swapped = vec![vec![0.67], vec![0.21]];
        let a = alpha(&ctx, &batch).unwrap();
        let b = alpha(&ctx, &swapped).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn duplicated_condition_equals_single() {
        let mut ctx = toy_context(5, 1, 1, 2, 1, 13);
        let batch = vec![vec![0.3], vec![0.8]];
        let single = alpha(&ctx, &batch).unwrap();
        let cond = ctx.conditions[0].clone();
        ctx.conditions.push(cond.clone());
        ctx.conditions.push(cond);
        let tripled = alpha(&ctx, &batch).unwrap();
        assert_relative_eq!(single, tripled, epsilon = 1e-12);
    }

    #[test]
    fn sequential_equals_batch_of_one() {
        let ctx = toy_context(5, 1, 1, 1, 2, 17);
        let x = vec![0.45];
        assert_eq!(
            alpha_sequential(&ctx, &x).unwrap(),
            alpha(&ctx, &[x.clone()]).unwrap()
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ctx = toy_context(4, 1, 1, 2, 2, 19);
        let batch = vec![vec![0.33], vec![0.71]];
        let (_, grad) = alpha_with_grad(&ctx, &batch).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let mut bp = batch.clone();
            bp[i][0] += h;
            let mut bm = batch.clone();
            bm[i][0] -= h;
            let fd = (alpha(&ctx, &bp).unwrap() - alpha(&ctx, &bm).unwrap()) / (2.0 * h);
            assert_relative_eq!(grad[i][0], fd, max_relative = 1e-3, epsilon = 1e-8);
        }
    }

    #[test]
    fn gradient_rows_swap_with_batch_rows() {
        let ctx = toy_context(4, 1, 1, 2, 2, 23);
        let batch = vec![vec![0.2], vec![0.6]];
        let swapped = vec![vec![0.6], vec![0.2]];
        let (_, g1) = alpha_with_grad(&ctx, &batch).unwrap();
        let (_, g2) = alpha_with_grad(&ctx, &swapped).unwrap();
        assert_relative_eq!(g1[0][0], g2[1][0], epsilon = 1e-8);
        assert_relative_eq!(g1[1][0], g2[0][0], epsilon = 1e-8);
    }

    #[test]
    fn near_duplicate_batches_stay_finite() {
        let ctx = toy_context(4, 1, 1, 2, 1, 29);
        let batch = vec![vec![0.5], vec![0.5]];
        let v = alpha(&ctx, &batch).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn optimizer_beats_its_random_starts() {
        let ctx = toy_context(5, 1, 1, 2, 2, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let starts: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| vec![vec![rng.gen_range(0.0..1.0)], vec![rng.gen_range(0.0..1.0)]])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prop = optimize_batch(&ctx, 3, 50, &mut rng).unwrap();
        for s in &starts {
            assert!(prop.value + 1e-12 >= alpha(&ctx, s).unwrap());
        }
        for row in &prop.x {
            assert!((0.0..=1.0).contains(&row[0]));
        }
    }

    #[test]
    fn zero_iterations_returns_start_value() {
        let ctx = toy_context(5, 1, 1, 1, 1, 37);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prop = optimize_batch(&ctx, 1, 0, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = vec![vec![rng.gen_range(0.0f64..=1.0)]];
        assert_relative_eq!(prop.x[0][0], x0[0][0], epsilon = 1e-12);
        assert_relative_eq!(prop.value, alpha(&ctx, &x0).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn knn_entropy_matches_gaussian_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let sigma = 1.7;
        let samples: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                vec![sigma * z]
            })
            .collect();
        let h = knn_entropy(&samples, 3);
        let exact = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + sigma.ln();
        assert!(
            (h - exact).abs() / exact.abs() < 0.02,
            "knn {h} vs exact {exact}"
        );
    }

    #[test]
    fn knn_entropy_matches_2d_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let samples: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                vec![a, 0.5 * a + 0.8 * b]
            })
            .collect();
        // cov = [[1, .5], [.5, .89]], |cov| = 0.64
        let h = knn_entropy(&samples, 3);
        let exact = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + 0.5 * 0.64f64.ln();
        assert!((h - exact).abs() / exact.abs() < 0.02, "{h} vs {exact}");
    }

    #[test]
    fn mc_oracle_is_near_zero_without_conditioning() {
        // identical before/after distributions: estimate entropy difference
        // of the same Gaussian cloud twice
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let cloud: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                vec![z]
            })
            .collect();
        let diff = knn_entropy(&cloud, 3) - knn_entropy(&cloud, 3);
        assert_relative_eq!(diff, 0.0);
    }

    #[test]
    fn mc_oracle_runs_and_correlates_in_sign() {
        let ctx = toy_context(5, 1, 1, 1, 2, 53);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = exact_alpha_mc(&ctx, &[vec![0.4]], 2000, &mut rng).unwrap();
        assert!(v.is_finite());
    }

    fn point_mass_hyper(dim: usize) -> HyperPosterior {
        HyperPosterior {
            samples: vec![KernelParams::isotropic(1.0, 0.3, dim, 1e-4)],
        }
    }

    #[test]
    fn build_context_with_sampled_hypers_is_deterministic() {
        let data = toy_data(5, 1, 1, 59);
        let prior = PriorSpec::point_mass(KernelParams::isotropic(1.0, 0.3, 1, 1e-4));
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let h = crate::gp::slice_sample_hypers(&data.x, &data.y_obj[0], &prior, 2, 0, &mut r1)
            .unwrap();
        let _ = (h, point_mass_hyper(1));
        let cfg = ContextConfig {
            num_conditions: 2,
            num_candidates: 50,
            num_features: 50,
            ..Default::default()
        };
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            build_context(
                &data,
                &[point_mass_hyper(1)],
                &[point_mass_hyper(1)],
                &[(0.0, 1.0)],
                2,
                &cfg,
                &mut rng,
            )
            .unwrap()
        };
        let c1 = build();
        let c2 = build();
        let batch = vec![vec![0.25], vec![0.75]];
        assert_eq!(alpha(&c1, &batch).unwrap(), alpha(&c2, &batch).unwrap());
    }
}
