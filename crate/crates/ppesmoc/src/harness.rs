//! Experiment runner: the batch Bayesian optimization loop with
//! configuration, seeding, persistence, and aggregation of repetitions.
//!
//! Inputs are normalized to the unit cube for modeling; objective
//! observations are z-scored and constraint observations are scaled by
//! their standard deviation only, so that feasibility signs survive.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{build_context, optimize_batch, AcquisitionContext, ContextConfig, TrainingData};
use crate::baselines::{parallel_sequential, random_batch};
use crate::error::{Error, Result};
use crate::gp::{slice_sample_hypers, GpModel, HyperPosterior, PriorSpec};
use crate::metrics::{
    hypervolume_2d, log_relative_hv_gap, recommend, recommendation_grid, true_hypervolume,
};
use crate::problems::{self, Problem};

/// Batch selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ppesmoc,
    PsPesmoc,
    Random,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Ppesmoc => "ppesmoc",
            Method::PsPesmoc => "ps_pesmoc",
            Method::Random => "random",
        };
        f.write_str(s)
    }
}

fn default_repetitions() -> usize { 1 }
fn default_num_conditions() -> usize { 10 }
fn default_max_pareto() -> usize { 50 }
fn default_num_candidates() -> usize { 1000 }
fn default_num_features() -> usize { 500 }
fn default_hyper_samples() -> usize { 10 }
fn default_burn_in() -> usize { 30 }
fn default_n_restarts() -> usize { 2 }
fn default_max_opt_iters() -> usize { 50 }
fn default_rec_grid() -> usize { 10_000 }
fn default_true_grid() -> usize { 400 }
fn default_threshold() -> f64 { 0.95 }
fn default_output_dir() -> String { "out".into() }

/// Flat experiment configuration, read from a TOML file with the same keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: String,
    pub method: Method,
    /// batch size B
    pub batch_size: usize,
    /// number of batches T
    pub budget: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// observation noise std as a fraction of each output's range (0 = noiseless)
    #[serde(default)]
    pub noise_fraction: f64,
    /// number of Pareto-set samples S
    #[serde(default = "default_num_conditions")]
    pub num_conditions: usize,
    #[serde(default = "default_max_pareto")]
    pub max_pareto: usize,
    #[serde(default = "default_num_candidates")]
    pub num_candidates: usize,
    #[serde(default = "default_num_features")]
    pub num_features: usize,
    #[serde(default = "default_hyper_samples")]
    pub hyper_samples: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_n_restarts")]
    pub n_restarts: usize,
    #[serde(default = "default_max_opt_iters")]
    pub max_opt_iters: usize,
    #[serde(default = "default_rec_grid")]
    pub recommendation_grid_size: usize,
    #[serde(default = "default_true_grid")]
    pub true_grid_size: usize,
    #[serde(default = "default_threshold")]
    pub feasibility_threshold: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.budget == 0 || self.repetitions == 0 {
            return Err(Error::Config(
                "batch_size, budget, and repetitions must all be >= 1".into(),
            ));
        }
        problems::by_name(&self.problem)?;
        Ok(())
    }

    fn context_config(&self) -> ContextConfig {
        ContextConfig {
            num_conditions: self.num_conditions,
            max_pareto: self.max_pareto,
            num_candidates: self.num_candidates,
            num_features: self.num_features,
            ..Default::default()
        }
    }
}

/// One row of a repetition's trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iter: usize,
    pub seconds: f64,
    pub hv: f64,
    pub log_gap: f64,
    /// batch points in the problem's original input space
    pub batch: Vec<Vec<f64>>,
    /// per batch point: K objectives then J constraints, as observed
    pub observations: Vec<Vec<f64>>,
    /// GP refit cycles spent selecting this batch
    pub refit_cycles: usize,
}

/// The full trace of one repetition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub rows: Vec<IterationRow>,
}

/// Raw (original-space) dataset gathered so far.
#[derive(Debug, Clone, Default)]
struct Dataset {
    x: Vec<Vec<f64>>,
    /// per point: K objectives then J constraints
    y: Vec<Vec<f64>>,
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt().max(1e-12)
}

fn standardize(data: &Dataset, problem: &Problem) -> TrainingData {
    let k = problem.num_objectives;
    let j = problem.num_constraints;
    let n = data.x.len();
    let col = |c: usize| -> Vec<f64> { (0..n).map(|i| data.y[i][c]).collect() };
    let mut y_obj = Vec::with_capacity(k);
    for c in 0..k {
        let raw = col(c);
        let mean = raw.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { std_dev(&raw) } else { 1.0 };
        y_obj.push(raw.iter().map(|v| (v - mean) / sd).collect());
    }
    let mut y_con = Vec::with_capacity(j);
    for c in 0..j {
        let raw = col(k + c);
        // scale only: feasibility is a sign condition
        let sd = if n > 1 { std_dev(&raw) } else { 1.0 };
        y_con.push(raw.iter().map(|v| v / sd).collect());
    }
    let x = data
        .x
        .iter()
        .map(|p| {
            p.iter()
                .zip(problem.bounds.iter())
                .map(|(&v, &(lo, hi))| (v - lo) / (hi - lo))
                .collect()
        })
        .collect();
    TrainingData { x, y_obj, y_con }
}

fn denormalize(x: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter()
        .zip(bounds.iter())
        .map(|(&u, &(lo, hi))| lo + u * (hi - lo))
        .collect()
}

fn sample_all_hypers(
    data: &TrainingData,
    n_samples: usize,
    burn_in: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<HyperPosterior>, Vec<HyperPosterior>)> {
    // The noise floor keeps K + sigma^2 I well conditioned on noiseless data,
    // and the amplitude cap rules out near-singular rank-one kernels: outputs
    // are z-scored, so a signal standard deviation far above one is spurious.
    let prior = PriorSpec {
        ln_amp_range: ((1e-2f64).ln(), (1e1f64).ln()),
        ln_noise_range: ((1e-4f64).ln(), 0.0),
        ..PriorSpec::default()
    };
    let draw = |y: &Vec<f64>, rng: &mut dyn rand::RngCore| {
        let mut rng = rng;
        slice_sample_hypers(&data.x, y, &prior, n_samples, burn_in, &mut rng)
    };
    let obj = data
        .y_obj
        .iter()
        .map(|y| draw(y, rng))
        .collect::<Result<Vec<_>>>()?;
    let con = data
        .y_con
        .iter()
        .map(|y| draw(y, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((obj, con))
}

fn fit_per_hyper(data: &TrainingData, hypers: &[HyperPosterior], ys: &[Vec<f64>]) -> Result<Vec<Vec<GpModel>>> {
    ys.iter()
        .zip(hypers.iter())
        .map(|(y, h)| {
            h.samples
                .iter()
                .map(|p| GpModel::fit(data.x.clone(), y.clone(), p.clone()))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Scores the current dataset: recommendation hypervolume and log relative
/// gap against the problem's exhaustive-search solution.
fn score(
    cfg: &ExperimentConfig,
    problem: &Problem,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let train = standardize(data, problem);
    let (obj_h, con_h) = sample_all_hypers(&train, cfg.hyper_samples, cfg.burn_in, rng)?;
    let obj_models = fit_per_hyper(&train, &obj_h, &train.y_obj)?;
    let con_models = fit_per_hyper(&train, &con_h, &train.y_con)?;
    let unit: Vec<(f64, f64)> = vec![(0.0, 1.0); problem.dim()];
    let grid = recommendation_grid(&unit, cfg.recommendation_grid_size, &train.x, rng);
    let rec = recommend(&obj_models, &con_models, &grid, cfg.feasibility_threshold);
    let truth = true_hypervolume(problem, cfg.true_grid_size)?;
    // The recommendation is judged by what it actually delivers: the true
    // objective values at the recommended inputs, with the hypervolume set
    // to zero whenever any recommended point is truly infeasible.
    let mut front = Vec::with_capacity(rec.points.len());
    let mut infeasible = false;
    for p in &rec.points {
        let out = problem.evaluate(&denormalize(p, &problem.bounds))?;
        if out.constraints.iter().any(|&c| c < 0.0) {
            infeasible = true;
            break;
        }
        front.push(out.objectives);
    }
    let hv = if infeasible || front.is_empty() {
        0.0
    } else {
        hypervolume_2d(&front, &truth.reference)?
    };
    let gap = log_relative_hv_gap(truth.hypervolume, hv)?;
    Ok((hv, gap))
}

/// Selects the next batch in the unit cube, returning it together with the
/// number of GP refit cycles spent.
fn select_batch(
    cfg: &ExperimentConfig,
    problem: &Problem,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let unit: Vec<(f64, f64)> = vec![(0.0, 1.0); problem.dim()];
    match cfg.method {
        Method::Random => Ok((random_batch(&unit, cfg.batch_size, rng), 0)),
        Method::Ppesmoc => {
            let train = standardize(data, problem);
            let (obj_h, con_h) = sample_all_hypers(&train, cfg.hyper_samples, cfg.burn_in, rng)?;
            let ctx = build_context(
                &train,
                &obj_h,
                &con_h,
                &unit,
                cfg.batch_size,
                &cfg.context_config(),
                rng,
            )?;
            let proposal = optimize_batch(&ctx, cfg.n_restarts, cfg.max_opt_iters, rng)?;
            Ok((proposal.x, 1))
        }
        Method::PsPesmoc => {
            let train = standardize(data, problem);
            // hyper-parameters stay fixed across the hallucination loop
            let (obj_h, con_h) = sample_all_hypers(&train, cfg.hyper_samples, cfg.burn_in, rng)?;
            let ccfg = cfg.context_config();
            let builder = |d: &TrainingData, rng: &mut ChaCha8Rng| -> Result<AcquisitionContext> {
                build_context(d, &obj_h, &con_h, &unit, 1, &ccfg, rng)
            };
            let ps = parallel_sequential(
                &train,
                builder,
                cfg.batch_size,
                cfg.n_restarts,
                cfg.max_opt_iters,
                rng,
            )?;
            Ok((ps.x, ps.refits))
        }
    }
}

/// Runs one repetition of the batch BO loop (Algorithm 1 at batch
/// granularity): iteration 1 selects a uniform-random batch; later
/// iterations refit the surrogates and select via the configured method.
/// Fully deterministic given `cfg.seed + rep`.
pub fn run_experiment(cfg: &ExperimentConfig, rep: usize) -> Result<RunRecord> {
    cfg.validate()?;
    let mut problem = problems::by_name(&cfg.problem)?;
    if cfg.noise_fraction > 0.0 {
        problem = problem.with_relative_noise(cfg.noise_fraction);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(rep as u64));
    let unit: Vec<(f64, f64)> = vec![(0.0, 1.0); problem.dim()];
    let mut data = Dataset::default();
    let mut record = RunRecord::default();
    for iter in 1..=cfg.budget {
        let start = Instant::now();
        let (batch_unit, refit_cycles) = if iter == 1 {
            (random_batch(&unit, cfg.batch_size, &mut rng), 0)
        } else {
            select_batch(cfg, &problem, &data, &mut rng)?
        };
        let seconds = start.elapsed().as_secs_f64();
        let batch: Vec<Vec<f64>> = batch_unit
            .iter()
            .map(|u| denormalize(u, &problem.bounds))
            .collect();
        // coupled evaluation: every black-box at every batch point
        let mut observations = Vec::with_capacity(batch.len());
        for x in &batch {
            let e = if cfg.noise_fraction > 0.0 {
                problem.evaluate_noisy(x, &mut rng)?
            } else {
                problem.evaluate(x)?
            };
            observations.push(e.flat());
        }
        data.x.extend(batch.iter().cloned());
        data.y.extend(observations.iter().cloned());
        let (hv, log_gap) = score(cfg, &problem, &data, &mut rng)?;
        record.rows.push(IterationRow {
            iter,
            seconds,
            hv,
            log_gap,
            batch,
            observations,
            refit_cycles,
        });
    }
    Ok(record)
}

/// CSV header for a run trace.
fn csv_header(problem: &Problem, batch_size: usize) -> String {
    let mut cols = vec![
        "iter".to_string(),
        "seconds".to_string(),
        "hv".to_string(),
        "log_gap".to_string(),
    ];
    for b in 0..batch_size {
        for d in 0..problem.dim() {
            cols.push(format!("x{b}_{d}"));
        }
    }
    for b in 0..batch_size {
        for o in 0..problem.num_outputs() {
            cols.push(format!("y{b}_{o}"));
        }
    }
    cols.join(",")
}

/// Serializes one repetition trace as CSV.
pub fn record_to_csv(problem: &Problem, batch_size: usize, record: &RunRecord) -> String {
    let mut out = csv_header(problem, batch_size);
    out.push('\n');
    for row in &record.rows {
        let mut cols = vec![
            row.iter.to_string(),
            format!("{:.6}", row.seconds),
            format!("{:.17e}", row.hv),
            format!("{:.17e}", row.log_gap),
        ];
        for p in &row.batch {
            for v in p {
                cols.push(format!("{v:.17e}"));
            }
        }
        for o in &row.observations {
            for v in o {
                cols.push(format!("{v:.17e}"));
            }
        }
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// One aggregate row across repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub iter: usize,
    pub mean_log_gap: f64,
    pub stderr_log_gap: f64,
    pub median_seconds: f64,
    pub mad_seconds: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-iteration mean and standard error of the log gap, and median and
/// median absolute deviation of the selection wall-time.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to aggregate".into()));
    }
    let t = records.iter().map(|r| r.rows.len()).min().unwrap_or(0);
    let n = records.len() as f64;
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let gaps: Vec<f64> = records.iter().map(|r| r.rows[i].log_gap).collect();
        let mean = gaps.iter().sum::<f64>() / n;
        let stderr = if records.len() > 1 {
            let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        let mut secs: Vec<f64> = records.iter().map(|r| r.rows[i].seconds).collect();
        let med = median(&mut secs);
        let mut devs: Vec<f64> = secs.iter().map(|s| (s - med).abs()).collect();
        let mad = median(&mut devs);
        out.push(AggregateRow {
            iter: records[0].rows[i].iter,
            mean_log_gap: mean,
            stderr_log_gap: stderr,
            median_seconds: med,
            mad_seconds: mad,
        });
    }
    Ok(out)
}

pub fn aggregate_to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("iter,mean_log_gap,stderr_log_gap,median_seconds,mad_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.6},{:.6}\n",
            r.iter, r.mean_log_gap, r.stderr_log_gap, r.median_seconds, r.mad_seconds
        ));
    }
    out
}

/// Parses a run-trace CSV back into a [`RunRecord`] (batch and observation
/// columns are retained verbatim; widths are inferred from the header).
pub fn record_from_csv(text: &str) -> Result<RunRecord> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let n_x = cols.iter().filter(|c| c.starts_with('x')).count();
    let n_y = cols.iter().filter(|c| c.starts_with('y')).count();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 4 + n_x + n_y {
            return Err(Error::Config("CSV row width mismatch".into()));
        }
        rows.push(IterationRow {
            iter: vals[0] as usize,
            seconds: vals[1],
            hv: vals[2],
            log_gap: vals[3],
            batch: vec![vals[4..4 + n_x].to_vec()],
            observations: vec![vals[4 + n_x..].to_vec()],
            refit_cycles: 0,
        });
    }
    Ok(RunRecord { rows })
}

/// Runs every repetition, writing one CSV per repetition plus a JSON
/// manifest into `cfg.output_dir`. A failed repetition is logged and
/// skipped; others are unaffected.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let problem = problems::by_name(&cfg.problem)?;
    let dir = Path::new(&cfg.output_dir);
    fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({
        "config": cfg,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "total_evaluations": cfg.budget * cfg.batch_size,
    });
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    let mut records = Vec::new();
    for rep in 0..cfg.repetitions {
        match run_experiment(cfg, rep) {
            Ok(record) => {
                fs::write(
                    dir.join(format!("rep_{rep:03}.csv")),
                    record_to_csv(&problem, cfg.batch_size, &record),
                )?;
                records.push(record);
            }
            Err(e) => {
                eprintln!("repetition {rep} failed: {e}");
            }
        }
    }
    Ok(records)
}

/// Reads all `rep_*.csv` traces in a directory and writes `aggregate.csv`.
pub fn aggregate_dir(dir: &Path) -> Result<Vec<AggregateRow>> {
    let mut records = Vec::new();
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("rep_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    names.sort();
    for path in names {
        records.push(record_from_csv(&fs::read_to_string(&path)?)?);
    }
    let rows = aggregate(&records)?;
    fs::write(dir.join("aggregate.csv"), aggregate_to_csv(&rows))?;
    Ok(rows)
}
