//! Expectation propagation for the Pareto-conditioned predictive
//! distribution (CPD).
//!
//! The joint GP posterior over a set of points (sampled Pareto set first,
//! then the observed inputs, then optionally a candidate batch) is
//! multiplied by two kinds of non-Gaussian factors and each is replaced by
//! a Gaussian approximation refined by moment matching:
//!
//! * `Phi` factors: every Pareto point must be feasible, one step factor
//!   per constraint and Pareto point.
//! * `Omega` factors: no other point may be feasible and dominate a Pareto
//!   point; for a pair (Pareto point, other point) this couples the two
//!   values of each objective (bivariate factors, Pareto value first) and
//!   the constraint values at the other point (univariate factors).
//!
//! Everything is generic over the scalar type so the once-refined batch
//! extension can be differentiated with forward-mode dual numbers.

use crate::error::{Error, Result};
use crate::linalg::{inv2, matvec2, Mat};
use crate::scalar::{norm_logpdf, Scalar};

pub const CONVERGENCE_TOL: f64 = 1e-4;
pub const MAX_SWEEPS: usize = 200;
const DAMPING_INIT: f64 = 0.5;
const DAMPING_DECAY: f64 = 0.99;
const MAX_HALVINGS: usize = 30;
const JITTER_START: f64 = 1e-10;

/// Natural parameters (m/v, 1/v) of an unnormalized univariate Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct NatGauss1<S = f64> {
    pub nat_mean: S,
    pub nat_prec: S,
}

impl<S: Scalar> NatGauss1<S> {
    pub fn zero() -> Self {
        NatGauss1 {
            nat_mean: S::zero(),
            nat_prec: S::zero(),
        }
    }

    fn lift(src: &NatGauss1<f64>) -> Self {
        NatGauss1 {
            nat_mean: S::from_f64(src.nat_mean),
            nat_prec: S::from_f64(src.nat_prec),
        }
    }
}

/// Natural parameters of an unnormalized bivariate Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct NatGauss2<S = f64> {
    pub nat_mean: [S; 2],
    pub nat_prec: [[S; 2]; 2],
}

impl<S: Scalar> NatGauss2<S> {
    pub fn zero() -> Self {
        NatGauss2 {
            nat_mean: [S::zero(); 2],
            nat_prec: [[S::zero(); 2]; 2],
        }
    }

    fn lift(src: &NatGauss2<f64>) -> Self {
        NatGauss2 {
            nat_mean: [S::from_f64(src.nat_mean[0]), S::from_f64(src.nat_mean[1])],
            nat_prec: [
                [S::from_f64(src.nat_prec[0][0]), S::from_f64(src.nat_prec[0][1])],
                [S::from_f64(src.nat_prec[1][0]), S::from_f64(src.nat_prec[1][1])],
            ],
        }
    }
}

/// Joint Gaussian (mean vector, covariance matrix) over the point set.
#[derive(Debug, Clone)]
pub struct JointGauss<S = f64> {
    pub mean: Vec<S>,
    pub cov: Mat<S>,
}

/// Per-black-box joint Gaussians: objectives first, then constraints.
#[derive(Debug, Clone)]
pub struct Priors<S = f64> {
    pub obj: Vec<JointGauss<S>>,
    pub con: Vec<JointGauss<S>>,
}

impl<S: Scalar> Priors<S> {
    pub fn num_points(&self) -> usize {
        self.obj
            .first()
            .or_else(|| self.con.first())
            .map(|g| g.mean.len())
            .unwrap_or(0)
    }
}

/// Moment-form CPD after factor accumulation; same layout as the priors.
pub type CpdState<S> = Priors<S>;

/// All Gaussian approximate factors.
///
/// `pairs` enumerates the Omega conditioning pairs (Pareto index, other
/// point index); self-pairs are excluded. `omega_obj[k][p]` is the
/// bivariate factor of objective `k` for pair `p` with the Pareto value in
/// slot 0; `omega_con[j][p]` the univariate factor on constraint `j` at the
/// pair's other point. `phi[j][i]` is the feasibility factor of Pareto
/// point `i` under constraint `j`.
#[derive(Debug, Clone)]
pub struct FactorStore<S = f64> {
    pub num_pareto: usize,
    pub num_points: usize,
    pub pairs: Vec<(usize, usize)>,
    pub phi: Vec<Vec<NatGauss1<S>>>,
    pub omega_obj: Vec<Vec<NatGauss2<S>>>,
    pub omega_con: Vec<Vec<NatGauss1<S>>>,
}

impl<S: Scalar> FactorStore<S> {
    pub fn zeros(
        num_pareto: usize,
        num_points: usize,
        num_objectives: usize,
        num_constraints: usize,
    ) -> Self {
        let mut pairs = Vec::new();
        for star in 0..num_pareto {
            for other in 0..num_points {
                if other != star {
                    pairs.push((star, other));
                }
            }
        }
        FactorStore {
            num_pareto,
            num_points,
            phi: vec![vec![NatGauss1::zero(); num_pareto]; num_constraints],
            omega_obj: vec![vec![NatGauss2::zero(); pairs.len()]; num_objectives],
            omega_con: vec![vec![NatGauss1::zero(); pairs.len()]; num_constraints],
            pairs,
        }
    }

    /// Lifts a converged store into a larger point set that appends `extra`
    /// points, adding zero-initialized Omega factors pairing every Pareto
    /// point with every new point.
    pub fn lift_extended(src: &FactorStore<f64>, extra: usize) -> Self {
        let mut pairs = src.pairs.clone();
        let mut omega_obj: Vec<Vec<NatGauss2<S>>> = src
            .omega_obj
            .iter()
            .map(|fs| fs.iter().map(NatGauss2::lift).collect())
            .collect();
        let mut omega_con: Vec<Vec<NatGauss1<S>>> = src
            .omega_con
            .iter()
            .map(|fs| fs.iter().map(NatGauss1::lift).collect())
            .collect();
        for star in 0..src.num_pareto {
            for q in 0..extra {
                pairs.push((star, src.num_points + q));
                for fs in omega_obj.iter_mut() {
                    fs.push(NatGauss2::zero());
                }
                for fs in omega_con.iter_mut() {
                    fs.push(NatGauss1::zero());
                }
            }
        }
        FactorStore {
            num_pareto: src.num_pareto,
            num_points: src.num_points + extra,
            pairs,
            phi: src
                .phi
                .iter()
                .map(|fs| fs.iter().map(NatGauss1::lift).collect())
                .collect(),
            omega_obj,
            omega_con,
        }
    }
}

impl FactorStore<f64> {
    /// Largest absolute difference across all natural parameters.
    pub fn max_change(&self, other: &FactorStore<f64>) -> f64 {
        let mut m: f64 = 0.0;
        for (a, b) in self.phi.iter().flatten().zip(other.phi.iter().flatten()) {
            m = m.max((a.nat_mean - b.nat_mean).abs());
            m = m.max((a.nat_prec - b.nat_prec).abs());
        }
        for (a, b) in self
            .omega_con
            .iter()
            .flatten()
            .zip(other.omega_con.iter().flatten())
        {
            m = m.max((a.nat_mean - b.nat_mean).abs());
            m = m.max((a.nat_prec - b.nat_prec).abs());
        }
        for (a, b) in self
            .omega_obj
            .iter()
            .flatten()
            .zip(other.omega_obj.iter().flatten())
        {
            for i in 0..2 {
                m = m.max((a.nat_mean[i] - b.nat_mean[i]).abs());
                for j in 0..2 {
                    m = m.max((a.nat_prec[i][j] - b.nat_prec[i][j]).abs());
                }
            }
        }
        m
    }
}

/// Cavity of a univariate marginal (moments in, moments out). `None`
/// signals an unusable (non-positive precision) cavity: skip the update.
pub fn cavity_1d<S: Scalar>(mean: S, var: S, factor: &NatGauss1<S>) -> Option<(S, S)> {
    if var.re() <= 0.0 {
        return None;
    }
    let prec = S::one() / var;
    let cav_prec = prec - factor.nat_prec;
    if cav_prec.re() <= 0.0 {
        return None;
    }
    let cav_var = S::one() / cav_prec;
    let cav_mean = cav_var * (mean * prec - factor.nat_mean);
    Some((cav_mean, cav_var))
}

/// Bivariate cavity; `None` when the cavity precision is not positive
/// definite.
pub fn cavity_2d<S: Scalar>(
    mean: [S; 2],
    cov: [[S; 2]; 2],
    factor: &NatGauss2<S>,
) -> Option<([S; 2], [[S; 2]; 2])> {
    let prec = inv2(cov).ok()?;
    let cav_prec = [
        [prec[0][0] - factor.nat_prec[0][0], prec[0][1] - factor.nat_prec[0][1]],
        [prec[1][0] - factor.nat_prec[1][0], prec[1][1] - factor.nat_prec[1][1]],
    ];
    let cav_cov = inv2(cav_prec).ok()?;
    let nu = [
        matvec2(prec, mean)[0] - factor.nat_mean[0],
        matvec2(prec, mean)[1] - factor.nat_mean[1],
    ];
    let cav_mean = matvec2(cav_cov, nu);
    Some((cav_mean, cav_cov))
}

/// log Z = log Phi(m/sqrt(v)) for the step factor, with first and second
/// derivatives with respect to the cavity mean.
pub fn logz_phi<S: Scalar>(cav_mean: S, cav_var: S) -> (S, S, S) {
    let sd = cav_var.sqrt();
    let a = cav_mean / sd;
    let log_z = a.norm_logcdf();
    let hazard = (norm_logpdf(a) - log_z).exp();
    let g1 = hazard / sd;
    let g2 = -(hazard * (a + hazard)) / cav_var;
    (log_z, g1, g2)
}

/// Output of [`logz_omega`]: the log normalizer and, per black-box,
/// derivatives with respect to the corresponding cavity means.
#[derive(Debug, Clone)]
pub struct OmegaLogZ<S> {
    pub log_z: S,
    /// per objective: gradient and Hessian w.r.t. the bivariate cavity mean
    pub obj: Vec<([S; 2], [[S; 2]; 2])>,
    /// per constraint: (d logZ / dm, d^2 logZ / dm^2)
    pub con: Vec<(S, S)>,
}

/// Normalization constant of the pair factor
/// `Omega = 1 - prod_j Phi(beta_j) * prod_k Phi(alpha_k)` against the
/// cavity, where `alpha_k` compares the Pareto value with the other point's
/// value and `beta_j` is the other point's constraint feasibility margin.
///
/// Returns `None` when the update must be skipped: a degenerate pair
/// variance, or Z numerically zero (the condition is violated with
/// certainty under the cavity).
pub fn logz_omega<S: Scalar>(
    obj_cav: &[([S; 2], [[S; 2]; 2])],
    con_cav: &[(S, S)],
) -> Option<OmegaLogZ<S>> {
    let mut alphas = Vec::with_capacity(obj_cav.len());
    let mut log_gp = S::zero(); // log(g * p), sum of all log Phi terms
    for (m, v) in obj_cav {
        let s = v[0][0] + v[1][1] - v[0][1] - v[1][0];
        if s.re() <= 0.0 {
            return None;
        }
        let sq = s.sqrt();
        let alpha = (m[0] - m[1]) / sq;
        log_gp += alpha.norm_logcdf();
        alphas.push((alpha, sq, s));
    }
    let mut betas = Vec::with_capacity(con_cav.len());
    for &(m, v) in con_cav {
        if v.re() <= 0.0 {
            return None;
        }
        let sq = v.sqrt();
        let beta = m / sq;
        log_gp += beta.norm_logcdf();
        betas.push((beta, sq, v));
    }
    if log_gp.re() > -1e-12 {
        // Z = 1 - exp(log_gp) vanishes: the pair condition cannot hold.
        return None;
    }
    let log_z = (-(log_gp.exp())).ln_1p();

    let mut obj = Vec::with_capacity(alphas.len());
    for &(alpha, sq, s) in &alphas {
        // rho = d logZ / d alpha = -exp(log N(alpha) + log_gp - log Phi(alpha) - logZ)
        let rho = -((norm_logpdf(alpha) + log_gp - alpha.norm_logcdf() - log_z).exp());
        let g = rho / sq;
        let grad = [g, -g];
        let h = -(rho * (alpha + rho)) / s;
        let hess = [[h, -h], [-h, h]];
        obj.push((grad, hess));
    }
    let mut con = Vec::with_capacity(betas.len());
    for &(beta, sq, v) in &betas {
        let omega = -((norm_logpdf(beta) + log_gp - beta.norm_logcdf() - log_z).exp());
        con.push((omega / sq, -(omega * (beta + omega)) / v));
    }
    Some(OmegaLogZ { log_z, obj, con })
}

/// Moment-matched, damped update of a univariate factor. Returns `None`
/// when the tilted distribution is degenerate or non-finite.
pub fn update_1d<S: Scalar>(
    cav_mean: S,
    cav_var: S,
    g1: S,
    g2: S,
    theta: f64,
    old: &NatGauss1<S>,
) -> Option<NatGauss1<S>> {
    let tilted_mean = cav_mean + cav_var * g1;
    let tilted_var = cav_var + cav_var * cav_var * g2;
    if tilted_var.re() <= 0.0 {
        return None;
    }
    let tp = S::one() / tilted_var;
    let cp = S::one() / cav_var;
    let new_prec = tp - cp;
    let new_mean = tilted_mean * tp - cav_mean * cp;
    if !new_prec.re().is_finite() || !new_mean.re().is_finite() {
        return None;
    }
    let th = S::from_f64(theta);
    let keep = S::from_f64(1.0 - theta);
    Some(NatGauss1 {
        nat_mean: th * new_mean + keep * old.nat_mean,
        nat_prec: th * new_prec + keep * old.nat_prec,
    })
}

/// Moment-matched, damped update of a bivariate factor.
pub fn update_2d<S: Scalar>(
    cav_mean: [S; 2],
    cav_cov: [[S; 2]; 2],
    grad: [S; 2],
    hess: [[S; 2]; 2],
    theta: f64,
    old: &NatGauss2<S>,
) -> Option<NatGauss2<S>> {
    let vg = matvec2(cav_cov, grad);
    let tilted_mean = [cav_mean[0] + vg[0], cav_mean[1] + vg[1]];
    // V~ = V + V H V
    let mut hv = [[S::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            hv[i][j] = hess[i][0] * cav_cov[0][j] + hess[i][1] * cav_cov[1][j];
        }
    }
    let mut tilted_cov = cav_cov;
    for i in 0..2 {
        for j in 0..2 {
            tilted_cov[i][j] = cav_cov[i][j]
                + cav_cov[i][0] * hv[0][j]
                + cav_cov[i][1] * hv[1][j];
        }
    }
    let tp = inv2(tilted_cov).ok()?;
    let cp = inv2(cav_cov).ok()?;
    let nu_t = matvec2(tp, tilted_mean);
    let nu_c = matvec2(cp, cav_mean);
    let th = S::from_f64(theta);
    let keep = S::from_f64(1.0 - theta);
    let mut out = NatGauss2::zero();
    for i in 0..2 {
        let nm = nu_t[i] - nu_c[i];
        if !nm.re().is_finite() {
            return None;
        }
        out.nat_mean[i] = th * nm + keep * old.nat_mean[i];
        for j in 0..2 {
            let np = tp[i][j] - cp[i][j];
            if !np.re().is_finite() {
                return None;
            }
            out.nat_prec[i][j] = th * np + keep * old.nat_prec[i][j];
        }
    }
    Some(out)
}

/// Multiplies the joint priors by all Gaussian factors (natural-parameter
/// accumulation: univariate factors on diagonals, bivariate factors on
/// their 2x2 blocks) and converts back to moment form.
pub fn reconstruct_cpd<S: Scalar>(
    priors: &Priors<S>,
    store: &FactorStore<S>,
) -> Result<CpdState<S>> {
    let t = priors.num_points();
    if t != store.num_points {
        return Err(Error::DimMismatch {
            expected: store.num_points,
            got: t,
        });
    }
    let mut out = Priors {
        obj: Vec::with_capacity(priors.obj.len()),
        con: Vec::with_capacity(priors.con.len()),
    };
    for (k, prior) in priors.obj.iter().enumerate() {
        let mut dp = Mat::zeros(t, t);
        let mut dnu = vec![S::zero(); t];
        for (p, &(star, other)) in store.pairs.iter().enumerate() {
            let f = &store.omega_obj[k][p];
            dp[(star, star)] += f.nat_prec[0][0];
            dp[(star, other)] += f.nat_prec[0][1];
            dp[(other, star)] += f.nat_prec[1][0];
            dp[(other, other)] += f.nat_prec[1][1];
            dnu[star] += f.nat_mean[0];
            dnu[other] += f.nat_mean[1];
        }
        out.obj.push(posterior_from_deltas(prior, &dp, &dnu)?);
    }
    for (j, prior) in priors.con.iter().enumerate() {
        let mut dp = Mat::zeros(t, t);
        let mut dnu = vec![S::zero(); t];
        for (i, f) in store.phi[j].iter().enumerate() {
            dp[(i, i)] += f.nat_prec;
            dnu[i] += f.nat_mean;
        }
        for (p, &(_, other)) in store.pairs.iter().enumerate() {
            let f = &store.omega_con[j][p];
            dp[(other, other)] += f.nat_prec;
            dnu[other] += f.nat_mean;
        }
        out.con.push(posterior_from_deltas(prior, &dp, &dnu)?);
    }
    Ok(out)
}

fn posterior_from_deltas<S: Scalar>(
    prior: &JointGauss<S>,
    dp: &Mat<S>,
    dnu: &[S],
) -> Result<JointGauss<S>> {
    let t = prior.mean.len();
    // Near-duplicate points can leave the prior covariance numerically
    // singular even though its Cholesky succeeds with tiny pivots; the
    // implied precision then fails to factorize. Escalate a scale-aware
    // jitter on the prior until the whole chain goes through.
    let scale = {
        let mut s = 0.0;
        for i in 0..t {
            s += prior.cov[(i, i)].re();
        }
        (s / t.max(1) as f64).max(1.0)
    };
    let mut jitter = 0.0;
    loop {
        let attempt = (|| -> Result<JointGauss<S>> {
            let mut cov0 = prior.cov.clone();
            for i in 0..t {
                cov0[(i, i)] += S::from_f64(jitter);
            }
            let prior_chol = cov0.cholesky()?;
            let prior_prec = prior_chol.inverse();
            let nu0 = prior_chol.solve_vec(&prior.mean);
            let mut post_prec = Mat::zeros(t, t);
            for i in 0..t {
                for j in 0..t {
                    post_prec[(i, j)] = prior_prec[(i, j)] + dp[(i, j)];
                }
            }
            post_prec.symmetrize();
            let chol = post_prec.cholesky()?;
            let nu: Vec<S> = nu0.iter().zip(dnu.iter()).map(|(a, b)| *a + *b).collect();
            let mean = chol.solve_vec(&nu);
            let mut cov = chol.inverse();
            cov.symmetrize();
            Ok(JointGauss { mean, cov })
        })();
        match attempt {
            Ok(out) => return Ok(out),
            // the ceiling sits above the usual ladder: failing here aborts
            // the whole EP run, so a distorted-but-PD prior is preferable
            Err(_) if jitter < 1e-2 * scale => {
                jitter = if jitter == 0.0 {
                    JITTER_START * scale
                } else {
                    jitter * 10.0
                };
            }
            Err(e) => return Err(e),
        }
    }
}

/// One parallel-style sweep: every factor update uses cavities computed
/// from the same CPD snapshot. Updated factors are written to a copy of the
/// store, which the caller then tries to reconstruct.
fn sweep<S: Scalar>(
    cpd: &CpdState<S>,
    store: &FactorStore<S>,
    theta: f64,
) -> FactorStore<S> {
    let mut new = store.clone();
    // Phi feasibility factors on Pareto points
    for (j, cons) in cpd.con.iter().enumerate() {
        for i in 0..store.num_pareto {
            let old = &store.phi[j][i];
            if let Some((cm, cv)) = cavity_1d(cons.mean[i], cons.cov[(i, i)], old) {
                let (_, g1, g2) = logz_phi(cm, cv);
                if let Some(f) = update_1d(cm, cv, g1, g2, theta, old) {
                    new.phi[j][i] = f;
                }
            }
        }
    }
    // Omega pair factors
    for (p, &(star, other)) in store.pairs.iter().enumerate() {
        update_pair(cpd, store, &mut new, p, star, other, theta);
    }
    new
}

/// Computes all cavities for one pair, evaluates the shared log-normalizer
/// and writes the damped factor updates. Skips the whole pair atomically if
/// any piece is unusable.
fn update_pair<S: Scalar>(
    cpd: &CpdState<S>,
    store: &FactorStore<S>,
    new: &mut FactorStore<S>,
    p: usize,
    star: usize,
    other: usize,
    theta: f64,
) {
    let k_count = cpd.obj.len();
    let j_count = cpd.con.len();
    let mut obj_cav = Vec::with_capacity(k_count);
    for (k, objective) in cpd.obj.iter().enumerate() {
        let mean = [objective.mean[star], objective.mean[other]];
        let cov = [
            [objective.cov[(star, star)], objective.cov[(star, other)]],
            [objective.cov[(other, star)], objective.cov[(other, other)]],
        ];
        match cavity_2d(mean, cov, &store.omega_obj[k][p]) {
            Some(c) => obj_cav.push(c),
            None => return,
        }
    }
    let mut con_cav = Vec::with_capacity(j_count);
    for (j, cons) in cpd.con.iter().enumerate() {
        match cavity_1d(
            cons.mean[other],
            cons.cov[(other, other)],
            &store.omega_con[j][p],
        ) {
            Some(c) => con_cav.push(c),
            None => return,
        }
    }
    let Some(lz) = logz_omega(&obj_cav, &con_cav) else {
        return;
    };
    let mut staged_obj = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let (m, v) = obj_cav[k];
        let (grad, hess) = lz.obj[k];
        match update_2d(m, v, grad, hess, theta, &store.omega_obj[k][p]) {
            Some(f) => staged_obj.push(f),
            None => return,
        }
    }
    let mut staged_con = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let (m, v) = con_cav[j];
        let (g1, g2) = lz.con[j];
        match update_1d(m, v, g1, g2, theta, &store.omega_con[j][p]) {
            Some(f) => staged_con.push(f),
            None => return,
        }
    }
    for k in 0..k_count {
        new.omega_obj[k][p] = staged_obj[k];
    }
    for j in 0..j_count {
        new.omega_con[j][p] = staged_con[j];
    }
}

#[derive(Debug, Clone)]
pub struct EpOptions {
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for EpOptions {
    fn default() -> Self {
        EpOptions {
            max_sweeps: MAX_SWEEPS,
            tol: CONVERGENCE_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpResult {
    pub store: FactorStore<f64>,
    pub cpd: CpdState<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

/// Runs damped parallel EP to convergence. The priors must be laid out as
/// Pareto points (0..M) followed by observed inputs.
pub fn run_ep(priors: &Priors<f64>, num_pareto: usize, opts: &EpOptions) -> Result<EpResult> {
    let t = priors.num_points();
    if num_pareto == 0 || num_pareto > t {
        return Err(Error::InvalidArgument(format!(
            "num_pareto {num_pareto} out of range for {t} points"
        )));
    }
    let mut store = FactorStore::zeros(num_pareto, t, priors.obj.len(), priors.con.len());
    let mut cpd = reconstruct_cpd(priors, &store)?;
    let mut theta = DAMPING_INIT;
    let mut converged = false;
    let mut sweeps = 0;
    for _ in 0..opts.max_sweeps {
        let mut theta_eff = theta;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = sweep(&cpd, &store, theta_eff);
            match reconstruct_cpd(priors, &candidate) {
                Ok(new_cpd) => {
                    accepted = Some((candidate, new_cpd));
                    break;
                }
                Err(_) => theta_eff *= 0.5,
            }
        }
        sweeps += 1;
        let Some((new_store, new_cpd)) = accepted else {
            // every damping level failed; keep the previous state
            break;
        };
        let change = new_store.max_change(&store);
        store = new_store;
        cpd = new_cpd;
        if change < opts.tol {
            converged = true;
            break;
        }
        theta *= DAMPING_DECAY;
    }
    Ok(EpResult {
        store,
        cpd,
        converged,
        sweeps,
    })
}

/// Batch covariance blocks of the CPD per black-box, including observation
/// noise on the diagonal.
#[derive(Debug, Clone)]
pub struct BatchCpd<S> {
    pub obj: Vec<Mat<S>>,
    pub con: Vec<Mat<S>>,
}

/// Extends a converged EP state with `num_batch` candidate points, refines
/// only the new pair factors (exactly once, undamped), and returns the
/// batch covariance blocks of every black-box with observation noise added.
///
/// `priors_ext` is the joint GP posterior over the original points plus the
/// batch. If the refined reconstruction fails the PSD check, the state with
/// zero batch factors (pure GP extension) is used instead.
pub fn cpd_at_batch<S: Scalar>(
    store: &FactorStore<f64>,
    priors_ext: &Priors<S>,
    num_batch: usize,
    noise_obj: &[f64],
    noise_con: &[f64],
) -> Result<BatchCpd<S>> {
    let t = store.num_points;
    if priors_ext.num_points() != t + num_batch {
        return Err(Error::DimMismatch {
            expected: t + num_batch,
            got: priors_ext.num_points(),
        });
    }
    let ext: FactorStore<S> = FactorStore::lift_extended(store, num_batch);
    let snapshot = reconstruct_cpd(priors_ext, &ext)?;
    let mut refined = ext.clone();
    let first_new_pair = store.pairs.len();
    for p in first_new_pair..ext.pairs.len() {
        let (star, other) = ext.pairs[p];
        update_pair(&snapshot, &ext, &mut refined, p, star, other, 1.0);
    }
    let cpd = match reconstruct_cpd(priors_ext, &refined) {
        Ok(c) => c,
        Err(_) => snapshot,
    };
    let block = |g: &JointGauss<S>, noise: f64| {
        let mut m = Mat::from_fn(num_batch, num_batch, |i, j| g.cov[(t + i, t + j)]);
        for i in 0..num_batch {
            m[(i, i)] += S::from_f64(noise);
        }
        m
    };
    Ok(BatchCpd {
        obj: cpd
            .obj
            .iter()
            .zip(noise_obj.iter())
            .map(|(g, &nv)| block(g, nv))
            .collect(),
        con: cpd
            .con
            .iter()
            .zip(noise_con.iter())
            .map(|(g, &nv)| block(g, nv))
            .collect(),
    })
}
