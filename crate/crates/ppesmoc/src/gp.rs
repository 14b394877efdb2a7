//! Gaussian process surrogates: one independent GP per black-box.
//!
//! Matern 5/2 kernel with ARD lengthscales, exact predictive distributions
//! at point sets, slice sampling of the hyper-parameters and random-feature
//! function sampling for drawing Pareto sets.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct KernelParams {
    /// Signal variance (amplitude squared).
    pub amplitude2: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl KernelParams {
    pub fn new(amplitude2: f64, lengthscales: Vec<f64>, noise_var: f64) -> Result<Self> {
        if amplitude2 <= 0.0 || lengthscales.iter().any(|&l| l <= 0.0) || noise_var < 0.0 {
            return Err(Error::InvalidArgument(
                "kernel parameters must be positive (noise_var >= 0)".into(),
            ));
        }
        Ok(KernelParams {
            amplitude2,
            lengthscales,
            noise_var,
        })
    }

    pub fn isotropic(amplitude2: f64, lengthscale: f64, dim: usize, noise_var: f64) -> Self {
        KernelParams::new(amplitude2, vec![lengthscale; dim], noise_var).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// Matern 5/2 kernel between two points, generic over the scalar type so the
/// acquisition gradient can flow through kernel evaluations. The second
/// point is always a constant.
pub fn kernel_matern52_generic<S: Scalar>(x: &[S], y: &[f64], params: &KernelParams) -> S {
    debug_assert_eq!(x.len(), y.len());
    let mut r2 = S::zero();
    for i in 0..x.len() {
        let d = (x[i] - S::from_f64(y[i])) / S::from_f64(params.lengthscales[i]);
        r2 += d * d;
    }
    matern52_of_r2(r2, params.amplitude2)
}

fn matern52_of_r2<S: Scalar>(r2: S, amplitude2: f64) -> S {
    // The 1e-300 shift keeps the sqrt differentiable when the two points
    // coincide (derivative of r2 is exactly zero there).
    let r = (r2 + S::from_f64(1e-300)).sqrt();
    let sqrt5 = S::from_f64(5.0f64.sqrt());
    let poly = S::one() + sqrt5 * r + S::from_f64(5.0 / 3.0) * r2;
    S::from_f64(amplitude2) * poly * (-(sqrt5 * r)).exp()
}

pub fn kernel_matern52(x: &[f64], y: &[f64], params: &KernelParams) -> f64 {
    kernel_matern52_generic::<f64>(x, y, params)
}

/// Matern 5/2 between two generic points (both may carry derivatives).
pub fn kernel_matern52_gg<S: Scalar>(x: &[S], y: &[S], params: &KernelParams) -> S {
    let mut r2 = S::zero();
    for i in 0..x.len() {
        let d = (x[i] - y[i]) / S::from_f64(params.lengthscales[i]);
        r2 += d * d;
    }
    matern52_of_r2(r2, params.amplitude2)
}

/// GP with cached factorization of K + sigma^2 I.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub kernel: KernelParams,
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    /// (K + sigma^2 I + jitter I)^{-1}, explicit; empty when N = 0.
    pub k_inv: Mat<f64>,
    /// k_inv * y
    pub alpha: Vec<f64>,
    /// log marginal likelihood of the training data
    log_ml: f64,
    pub jitter: f64,
}

impl GpModel {
    pub fn fit(x_train: Vec<Vec<f64>>, y_train: Vec<f64>, kernel: KernelParams) -> Result<Self> {
        if x_train.len() != y_train.len() {
            return Err(Error::DimMismatch {
                expected: x_train.len(),
                got: y_train.len(),
            });
        }
        let n = x_train.len();
        if n == 0 {
            return Ok(GpModel {
                kernel,
                x_train,
                y_train,
                k_inv: Mat::zeros(0, 0),
                alpha: vec![],
                log_ml: 0.0,
                jitter: 0.0,
            });
        }
        let mut k = Mat::from_fn(n, n, |i, j| {
            kernel_matern52(&x_train[i], &x_train[j], &kernel)
        });
        for i in 0..n {
            k[(i, i)] += kernel.noise_var;
        }
        let (chol, jitter) = k.cholesky_jittered(JITTER_START, JITTER_MAX)?;
        let alpha = chol.solve_vec(&y_train);
        let k_inv = chol.inverse();
        let yt_alpha: f64 = y_train.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
        let log_ml = -0.5 * yt_alpha
            - 0.5 * chol.logdet()
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(GpModel {
            kernel,
            x_train,
            y_train,
            k_inv,
            alpha,
            log_ml,
            jitter,
        })
    }

    pub fn n(&self) -> usize {
        self.x_train.len()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_ml
    }

    /// Predictive mean and covariance of the latent function at `xs`.
    /// The covariance is symmetrized and its diagonal clamped to >= 0.
    pub fn predict(&self, xs: &[Vec<f64>]) -> (Vec<f64>, Mat<f64>) {
        let b = xs.len();
        let n = self.n();
        let mut kss = Mat::from_fn(b, b, |i, j| {
            if i == j {
                self.kernel.amplitude2
            } else {
                kernel_matern52(&xs[i], &xs[j], &self.kernel)
            }
        });
        if n == 0 {
            return (vec![0.0; b], kss);
        }
        // K_* is N x B
        let ks = Mat::from_fn(n, b, |i, j| {
            kernel_matern52(&self.x_train[i], &xs[j], &self.kernel)
        });
        let mut mean = vec![0.0; b];
        for j in 0..b {
            let mut acc = 0.0;
            for i in 0..n {
                acc += ks[(i, j)] * self.alpha[i];
            }
            mean[j] = acc;
        }
        // V = K** - K*^T Kinv K*
        let kinv_ks = self.k_inv.matmul(&ks);
        for p in 0..b {
            for q in 0..b {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += ks[(i, p)] * kinv_ks[(i, q)];
                }
                kss[(p, q)] -= acc;
            }
        }
        kss.symmetrize();
        for i in 0..b {
            if kss[(i, i)] < 0.0 {
                kss[(i, i)] = 0.0;
            }
        }
        (mean, kss)
    }

    pub fn predict_mean_var(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict(std::slice::from_ref(&x.to_vec()));
        (m[0], v[(0, 0)])
    }
}

/// Hyper-prior: log-normal on amplitude and lengthscales, uniform on the log
/// noise variance. A point mass is supported for testing.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    pub ln_amp_mu: f64,
    pub ln_amp_sigma: f64,
    pub ln_ls_mu: f64,
    pub ln_ls_sigma: f64,
    pub ln_amp_range: (f64, f64),
    pub ln_noise_range: (f64, f64),
    pub point_mass: Option<KernelParams>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            ln_amp_mu: 0.0,
            ln_amp_sigma: 1.0,
            ln_ls_mu: 0.0,
            ln_ls_sigma: 1.0,
            ln_amp_range: (-10.0, 10.0),
            ln_noise_range: ((1e-8f64).ln(), 0.0),
            point_mass: None,
        }
    }
}

impl PriorSpec {
    pub fn point_mass(params: KernelParams) -> Self {
        PriorSpec {
            point_mass: Some(params),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct HyperPosterior {
    pub samples: Vec<KernelParams>,
}

fn params_from_z(z: &[f64], dim: usize) -> KernelParams {
    let amp = z[0].exp();
    let ls: Vec<f64> = (0..dim).map(|i| z[1 + i].exp()).collect();
    let noise_var = z[1 + dim].exp();
    KernelParams {
        amplitude2: amp * amp,
        lengthscales: ls,
        noise_var,
    }
}

/// Draws `n_samples` kernel hyper-parameter samples from the posterior
/// (marginal likelihood times prior) with coordinate-wise slice sampling.
pub fn slice_sample_hypers(
    x_train: &[Vec<f64>],
    y_train: &[f64],
    prior: &PriorSpec,
    n_samples: usize,
    burn_in: usize,
    rng: &mut impl Rng,
) -> Result<HyperPosterior> {
    if let Some(p) = &prior.point_mass {
        return Ok(HyperPosterior {
            samples: vec![p.clone(); n_samples],
        });
    }
    if x_train.is_empty() {
        return Err(Error::InvalidArgument(
            "slice sampling requires at least one observation".into(),
        ));
    }
    let dim = x_train[0].len();
    let log_post = |z: &[f64]| -> f64 {
        let ln_noise = z[1 + dim];
        if ln_noise < prior.ln_noise_range.0 || ln_noise > prior.ln_noise_range.1 {
            return f64::NEG_INFINITY;
        }
        if z[0] < prior.ln_amp_range.0 || z[0] > prior.ln_amp_range.1 {
            return f64::NEG_INFINITY;
        }
        let mut lp = -0.5 * ((z[0] - prior.ln_amp_mu) / prior.ln_amp_sigma).powi(2);
        for i in 0..dim {
            lp += -0.5 * ((z[1 + i] - prior.ln_ls_mu) / prior.ln_ls_sigma).powi(2);
        }
        let params = params_from_z(z, dim);
        match GpModel::fit(x_train.to_vec(), y_train.to_vec(), params) {
            Ok(m) => {
                let lml = m.log_marginal_likelihood();
                if lml.is_finite() {
                    lp + lml
                } else {
                    f64::NEG_INFINITY
                }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };

    let mut z = vec![0.0; dim + 2];
    z[1 + dim] = 0.5 * (prior.ln_noise_range.0 + prior.ln_noise_range.1);
    let mut lp = log_post(&z);
    // If the start is infeasible, nudge the noise up until it is.
    let mut tries = 0;
    while !lp.is_finite() && tries < 20 {
        z[1 + dim] = rng.gen_range(prior.ln_noise_range.0..prior.ln_noise_range.1);
        lp = log_post(&z);
        tries += 1;
    }

    let mut samples = Vec::with_capacity(n_samples);
    let total = burn_in + n_samples;
    for it in 0..total {
        for coord in 0..z.len() {
            lp = slice_step(&mut z, coord, lp, &log_post, rng);
        }
        if it >= burn_in {
            samples.push(params_from_z(&z, dim));
        }
    }
    Ok(HyperPosterior { samples })
}

/// One univariate slice-sampling update (stepping out, Neal 2003).
fn slice_step(
    z: &mut [f64],
    coord: usize,
    lp: f64,
    log_post: &impl Fn(&[f64]) -> f64,
    rng: &mut impl Rng,
) -> f64 {
    const W: f64 = 1.0;
    const MAX_STEPS: usize = 10;
    let x0 = z[coord];
    let log_y = lp + rng.gen_range(0.0f64..1.0).ln();
    let mut lo = x0 - W * rng.gen_range(0.0..1.0);
    let mut hi = lo + W;
    let eval = |z: &mut [f64], v: f64| {
        z[coord] = v;
        let l = log_post(z);
        z[coord] = x0;
        l
    };
    let mut steps = MAX_STEPS;
    while steps > 0 && eval(z, lo) > log_y {
        lo -= W;
        steps -= 1;
    }
    let mut steps = MAX_STEPS;
    while steps > 0 && eval(z, hi) > log_y {
        hi += W;
        steps -= 1;
    }
    loop {
        let cand = rng.gen_range(lo..hi);
        let l = eval(z, cand);
        if l > log_y {
            z[coord] = cand;
            return l;
        }
        if cand < x0 {
            lo = cand;
        } else {
            hi = cand;
        }
        if (hi - lo) < 1e-12 {
            // shrunk to the current point; keep it
            z[coord] = x0;
            return lp;
        }
    }
}

/// Random-feature approximation of one GP sample path:
/// f(x) = scale * sum_f theta_f cos(w_f . x + b_f).
#[derive(Debug, Clone)]
pub struct FunctionSample {
    pub freqs: Mat<f64>, // F x d
    pub phases: Vec<f64>,
    pub weights: Vec<f64>,
    pub scale: f64,
}

impl FunctionSample {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let f = self.freqs.nrows;
        let d = self.freqs.ncols;
        debug_assert_eq!(d, x.len());
        let mut acc = 0.0;
        for r in 0..f {
            let mut arg = self.phases[r];
            for c in 0..d {
                arg += self.freqs[(r, c)] * x[c];
            }
            acc += self.weights[r] * arg.cos();
        }
        self.scale * acc
    }
}

/// Draws an approximate posterior function sample from the model using
/// random Fourier features of the Matern 5/2 kernel (spectral density is a
/// multivariate Student-t with 5 degrees of freedom).
pub fn sample_function(
    model: &GpModel,
    num_features: usize,
    rng: &mut impl Rng,
) -> Result<FunctionSample> {
    if num_features == 0 {
        return Err(Error::InvalidArgument("num_features must be >= 1".into()));
    }
    let d = model.kernel.dim();
    let f = num_features;
    let chi2 = ChiSquared::new(5.0).unwrap();
    let mut freqs = Mat::zeros(f, d);
    for r in 0..f {
        let g: f64 = chi2.sample(rng);
        let t_scale = (5.0 / g).sqrt();
        for c in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            freqs[(r, c)] = z * t_scale / model.kernel.lengthscales[c];
        }
    }
    let phases: Vec<f64> = (0..f)
        .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
        .collect();
    let scale = (2.0 * model.kernel.amplitude2 / f as f64).sqrt();
    let mut theta: Vec<f64> = (0..f).map(|_| StandardNormal.sample(rng)).collect();

    let n = model.n();
    if n > 0 {
        // Matheron update in feature space: theta | y = theta0 +
        // Phi^T (Phi Phi^T + sigma^2 I)^{-1} (y - Phi theta0 - eps)
        let noise = model.kernel.noise_var.max(1e-10);
        let mut phi = Mat::zeros(n, f);
        for i in 0..n {
            for r in 0..f {
                let mut arg = phases[r];
                for c in 0..d {
                    arg += freqs[(r, c)] * model.x_train[i][c];
                }
                phi[(i, r)] = scale * arg.cos();
            }
        }
        let mut v = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for r in 0..f {
                    acc += phi[(i, r)] * phi[(j, r)];
                }
                v[(i, j)] = acc + if i == j { noise } else { 0.0 };
            }
        }
        let (chol, _) = v.cholesky_jittered(JITTER_START, JITTER_MAX)?;
        let mut resid = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for r in 0..f {
                acc += phi[(i, r)] * theta[r];
            }
            let eps: f64 = StandardNormal.sample(rng);
            resid[i] = model.y_train[i] - acc - eps * noise.sqrt();
        }
        let s = chol.solve_vec(&resid);
        for r in 0..f {
            let mut acc = 0.0;
            for i in 0..n {
                acc += phi[(i, r)] * s[i];
            }
            theta[r] += acc;
        }
    }

    Ok(FunctionSample {
        freqs,
        phases,
        weights: theta,
        scale,
    })
}
