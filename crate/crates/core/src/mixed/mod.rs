//! Bivariate linear mixed model fitted by maximum marginal likelihood.
//!
//! F1 and F2 are stacked per token with a 2×2 residual covariance whose
//! standard deviations may depend on the variance-model design
//! (`log σ_f = v·γ_f`) and whose correlation `ρ` is shared. Random effects:
//! by-speaker intercepts and slopes for vowel, context and their interaction
//! (both formants, cross-formant covariance allowed), word intercepts and,
//! in the expanded structure, following-segment intercepts.
//!
//! In univariate mode F1 and F2 are fitted as two independent models and
//! assembled with zero cross-formant blocks.

mod engine;
mod optim;
mod theta;

#[cfg(test)]
mod tests;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{DesignMatrices, ModelSpec, Response};
use crate::error::{MmoError, Result};
use crate::linalg::{back_solve_t, inverse_from_cholesky, psd_factor};
use engine::{Params, Problem, Term};
use theta::{TermPattern, ThetaMap};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Number of by-speaker random coefficients per formant.
pub const SPEAKER_COEFS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Zero the cross-formant blocks of the by-speaker covariance.
    pub block_diagonal_speaker: bool,
    /// Zero every cross-formant covariance and the residual correlation.
    pub independent_formants: bool,
    /// Drop all random effects (generalized least squares only).
    pub random_effects: bool,
    /// Starting value of every standard deviation.
    pub start_sd: f64,
    /// Step for the finite-difference curvature.
    pub hessian_step: f64,
    /// Fix the non-intercept variance-model coefficients at 0.
    pub variance_intercept_only: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iter: 500,
            grad_tol: 1e-6,
            block_diagonal_speaker: false,
            independent_formants: false,
            random_effects: true,
            start_sd: 0.5,
            hessian_step: 1e-4,
            variance_intercept_only: false,
        }
    }
}

/// Conditional modes of the random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectEstimates {
    pub speaker_labels: Vec<String>,
    /// levels × 8: `[F1 intercept, vowel, context, interaction | F2 ...]`.
    #[serde(with = "crate::matser")]
    pub speaker: DMatrix<f64>,
    pub word_labels: Vec<String>,
    /// levels × 2.
    #[serde(with = "crate::matser")]
    pub word: DMatrix<f64>,
    pub following_labels: Vec<String>,
    #[serde(with = "crate::matser::option")]
    pub following: Option<DMatrix<f64>>,
}

impl RandomEffectEstimates {
    pub fn speaker_effect(&self, label: &str) -> Option<Vec<f64>> {
        let i = self.speaker_labels.iter().position(|l| l == label)?;
        Some(self.speaker.row(i).iter().copied().collect())
    }
}

/// One set of model parameters (the estimate or a draw).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDraw {
    /// p × 2.
    #[serde(with = "crate::matser")]
    pub beta: DMatrix<f64>,
    /// 8 × 8, formant-major.
    #[serde(with = "crate::matser")]
    pub g_speaker: DMatrix<f64>,
    #[serde(with = "crate::matser")]
    pub g_word: DMatrix<f64>,
    #[serde(with = "crate::matser::option")]
    pub g_following: Option<DMatrix<f64>>,
    /// m × 2 log-sd coefficients.
    #[serde(with = "crate::matser")]
    pub gamma: DMatrix<f64>,
    pub rho: f64,
}

impl ParamDraw {
    /// Residual covariance for a variance-model row.
    pub fn sigma(&self, v_row: &[f64]) -> DMatrix<f64> {
        residual_cov(&self.gamma, self.rho, v_row)
    }
}

pub fn residual_cov(gamma: &DMatrix<f64>, rho: f64, v_row: &[f64]) -> DMatrix<f64> {
    let sd: Vec<f64> = (0..2)
        .map(|f| v_row.iter().enumerate().map(|(a, v)| v * gamma[(a, f)]).sum::<f64>().exp())
        .collect();
    let c = rho * sd[0] * sd[1];
    DMatrix::from_row_slice(2, 2, &[sd[0] * sd[0], c, c, sd[1] * sd[1]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub config: FitConfig,
    #[serde(with = "crate::matser")]
    pub beta: DMatrix<f64>,
    /// 2p × 2p covariance of `vec(beta)` (F1 column first) at the estimate.
    #[serde(with = "crate::matser")]
    pub beta_cov: DMatrix<f64>,
    #[serde(with = "crate::matser")]
    pub g_speaker: DMatrix<f64>,
    #[serde(with = "crate::matser")]
    pub g_word: DMatrix<f64>,
    #[serde(with = "crate::matser::option")]
    pub g_following: Option<DMatrix<f64>>,
    /// Residual covariance when the variance model is homogeneous.
    #[serde(with = "crate::matser::option")]
    pub sigma: Option<DMatrix<f64>>,
    #[serde(with = "crate::matser")]
    pub gamma: DMatrix<f64>,
    pub rho: f64,
    pub theta_hat: Vec<f64>,
    /// `θ = θ̂ + F z` with `z ~ N(0, I)` gives the Laplace draws of θ.
    #[serde(with = "crate::matser")]
    pub laplace_factor: DMatrix<f64>,
    /// θ entries held fixed in draws (on a bound or in a flat direction).
    pub held: Vec<usize>,
    /// True when some curvature direction was dropped from the draws.
    pub curvature_degenerate: bool,
    pub loglik: f64,
    pub deviance: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub random_effects: RandomEffectEstimates,
}

impl FittedModel {
    pub fn estimate(&self) -> ParamDraw {
        ParamDraw {
            beta: self.beta.clone(),
            g_speaker: self.g_speaker.clone(),
            g_word: self.g_word.clone(),
            g_following: self.g_following.clone(),
            gamma: self.gamma.clone(),
            rho: self.rho,
        }
    }

    /// Standard errors of `beta` (p × 2).
    pub fn beta_se(&self) -> DMatrix<f64> {
        let p = self.beta.nrows();
        DMatrix::from_fn(p, 2, |j, f| self.beta_cov[(f * p + j, f * p + j)].sqrt())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: FittedModel = serde_json::from_str(s)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(MmoError::InvalidModel(format!(
                "format version {} (expected {MODEL_FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// Draws from the approximate sampling distribution of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDraws {
    pub draws: Vec<ParamDraw>,
    /// Every draw equals the estimate (no usable curvature).
    pub point_mass: bool,
    pub held: Vec<usize>,
}

/// One independently optimized block of the model: both formants jointly,
/// or a single formant in univariate mode.
struct Sub {
    formants: Vec<usize>,
    problem: Problem,
    map: ThetaMap,
    /// Term order inside `problem`: speaker, word, following.
    has_following: bool,
}

fn submodels(design: &DesignMatrices, config: &FitConfig) -> Vec<Sub> {
    let groups: Vec<Vec<usize>> = match design.spec.response {
        Response::Multivariate => vec![vec![0, 1]],
        Response::Univariate => vec![vec![0], vec![1]],
    };
    groups.into_iter().map(|f| sub(design, config, f)).collect()
}

fn sub(design: &DesignMatrices, config: &FitConfig, formants: Vec<usize>) -> Sub {
    let n = design.n();
    let d = formants.len();
    let p = design.p();
    let m = design.v.ncols();
    let y: Vec<f64> = (0..n).flat_map(|i| formants.iter().map(move |&f| design.y[(i, f)])).collect();
    let x: Vec<f64> = (0..n).flat_map(|i| (0..p).map(move |j| design.x[(i, j)])).collect();
    let v: Vec<f64> = (0..n).flat_map(|i| (0..m).map(move |j| design.v[(i, j)])).collect();
    let within = config.independent_formants || config.block_diagonal_speaker;
    let mut terms = Vec::new();
    let mut patterns = Vec::new();
    let mut has_following = false;
    if config.random_effects {
        let k = SPEAKER_COEFS;
        terms.push(Term {
            name: "speaker".into(),
            levels: design.speaker.n_levels(),
            k,
            index: design.speaker.index.clone(),
            z: (0..n).flat_map(|i| (0..k).map(move |j| design.z_speaker[(i, j)])).collect(),
        });
        patterns.push(TermPattern::new(k, d, within));
        let mut intercept = |name: &str, g: &crate::design::Grouping| {
            terms.push(Term {
                name: name.into(),
                levels: g.n_levels(),
                k: 1,
                index: g.index.clone(),
                z: vec![1.0; n],
            });
            patterns.push(TermPattern::new(1, d, config.independent_formants));
        };
        intercept("word", &design.word);
        if let Some(fol) = &design.following {
            intercept("following", fol);
            has_following = true;
        }
    }
    Sub {
        map: ThetaMap {
            terms: patterns,
            d,
            m,
            rho_free: d == 2 && !config.independent_formants,
            gamma_intercept_only: config.variance_intercept_only,
        },
        problem: Problem::new(d, p, m, y, x, v, terms),
        formants,
        has_following,
    }
}

impl Sub {
    fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let params = self.map.params(theta);
        let fac = self.problem.factor(&params)?;
        let g = self.problem.gradient(&params, &fac);
        Ok((fac.deviance, self.map.gradient(theta, &g)))
    }

    /// Central-difference Hessian of the analytic gradient, symmetrized.
    /// Falls back to one-sided differences where a side cannot be
    /// evaluated, and to a zero column where neither can.
    fn hessian(&self, theta: &[f64], h: f64) -> Result<DMatrix<f64>> {
        let n = theta.len();
        let (_, g0) = self.eval(theta)?;
        let mut hess = DMatrix::zeros(n, n);
        let mut t = theta.to_vec();
        for i in 0..n {
            t[i] = theta[i] + h;
            let gp = self.eval(&t).ok().map(|r| r.1);
            t[i] = theta[i] - h;
            let gm = self.eval(&t).ok().map(|r| r.1);
            t[i] = theta[i];
            let (hi, lo, span) = match (&gp, &gm) {
                (Some(a), Some(b)) => (a, b, 2.0 * h),
                (Some(a), None) => (a, &g0, h),
                (None, Some(b)) => (&g0, b, h),
                (None, None) => continue,
            };
            for j in 0..n {
                hess[(j, i)] = (hi[j] - lo[j]) / span;
            }
        }
        Ok((&hess + hess.transpose()) * 0.5)
    }

    fn n_theta(&self) -> usize {
        self.map.len()
    }
}

fn theta_slices<'a>(subs: &[Sub], theta: &'a [f64]) -> Result<Vec<&'a [f64]>> {
    let total: usize = subs.iter().map(Sub::n_theta).sum();
    if theta.len() != total {
        return Err(MmoError::Config(format!("theta has {} entries, expected {total}", theta.len())));
    }
    let mut out = Vec::new();
    let mut o = 0;
    for s in subs {
        out.push(&theta[o..o + s.n_theta()]);
        o += s.n_theta();
    }
    Ok(out)
}

/// `−2 log L` at the unconstrained variance parameters, with the fixed
/// effects profiled out.
pub fn profiled_deviance(theta: &[f64], design: &DesignMatrices, config: &FitConfig) -> Result<f64> {
    let subs = submodels(design, config);
    let slices = theta_slices(&subs, theta)?;
    let mut total = 0.0;
    for (s, t) in subs.iter().zip(slices) {
        total += s.problem.factor(&s.map.params(t))?.deviance;
    }
    Ok(total)
}

/// Gradient of [`profiled_deviance`] with respect to θ.
pub fn profiled_deviance_gradient(theta: &[f64], design: &DesignMatrices, config: &FitConfig) -> Result<Vec<f64>> {
    let subs = submodels(design, config);
    let slices = theta_slices(&subs, theta)?;
    let mut out = Vec::with_capacity(theta.len());
    for (s, t) in subs.iter().zip(slices) {
        out.extend(s.eval(t)?.1);
    }
    Ok(out)
}

/// The deterministic starting point of [`fit`].
pub fn start_theta(design: &DesignMatrices, config: &FitConfig) -> Vec<f64> {
    submodels(design, config).iter().flat_map(|s| s.map.start(config.start_sd)).collect()
}

/// θ whose variance components equal those of `draw`, for any draw whose
/// factors fit the configured pattern (e.g. a generator's truth).
pub fn theta_for(draw: &ParamDraw, design: &DesignMatrices, config: &FitConfig) -> Vec<f64> {
    submodels(design, config)
        .iter()
        .flat_map(|s| s.map.theta(&params_from_draw(s, draw)))
        .collect()
}

struct SubFit {
    theta: Vec<f64>,
    deviance: f64,
    grad: Vec<f64>,
    iterations: usize,
    hessian: DMatrix<f64>,
}

fn optimize(s: &Sub, config: &FitConfig) -> Result<SubFit> {
    let (lo, hi) = s.map.bounds();
    let mut start = s.map.start(config.start_sd);
    if s.problem.fixed_effects_interpolate() {
        // exact fit: every standard deviation belongs on its floor
        for i in s.map.log_sd_indices() {
            start[i] = lo[i];
        }
    }
    // surface a start-point failure as its own error
    s.eval(&start)?;
    let coarse = config.grad_tol.max(COARSE_GRAD_TOL);
    let res = optim::minimize(|t| s.eval(t).ok(), &start, &lo, &hi, coarse, config.max_iter)
        .ok_or_else(|| MmoError::SingularSystem("start point".into()))?;
    let mut iterations = res.iterations;
    let (mut x, mut f, mut g) = (res.x, res.f, res.grad);
    let mut hess = s.hessian(&x, config.hessian_step)?;
    let mut hess_at = x.clone();
    newton(s, config, &lo, &hi, (&mut x, &mut f, &mut g), (&mut hess, &mut hess_at))?;

    if optim::norm(&optim::projected(&x, &g, &lo, &hi)) >= config.grad_tol {
        let res = optim::minimize(|t| s.eval(t).ok(), &x, &lo, &hi, config.grad_tol, config.max_iter)
            .ok_or_else(|| MmoError::SingularSystem("restart point".into()))?;
        iterations += res.iterations;
        (x, f, g) = (res.x, res.f, res.grad);
        newton(s, config, &lo, &hi, (&mut x, &mut f, &mut g), (&mut hess, &mut hess_at))?;
    }
    if x.iter().zip(&hess_at).any(|(a, b)| (a - b).abs() > HESSIAN_REUSE_DISTANCE) {
        hess = s.hessian(&x, config.hessian_step)?;
    }
    Ok(SubFit {
        theta: x,
        deviance: f,
        grad: g,
        iterations,
        hessian: hess,
    })
}

/// Gradient level at which the quasi-Newton phase hands over to Newton steps.
const COARSE_GRAD_TOL: f64 = 1e-3;
/// Largest coordinate move before the curvature is recomputed.
const HESSIAN_REUSE_DISTANCE: f64 = 1e-3;

/// Below this log-sd a standard deviation still pushed downwards is tried at
/// its floor, where the vanishing gradient would otherwise stall progress.
const SNAP_LOG_SD: f64 = -8.0;

fn snap_to_floor(s: &Sub, lo: &[f64], (x, f, g): (&mut Vec<f64>, &mut f64, &mut Vec<f64>)) {
    let drifting: Vec<usize> = s
        .map
        .log_sd_indices()
        .into_iter()
        .filter(|&i| x[i] < SNAP_LOG_SD && x[i] > lo[i] && g[i] > 0.0)
        .collect();
    if drifting.is_empty() {
        return;
    }
    let mut xn = x.clone();
    for &i in &drifting {
        xn[i] = lo[i];
    }
    if let Ok((fnew, gnew)) = s.eval(&xn) {
        if fnew <= *f + 1e-9 * f.abs().max(1.0) {
            *x = xn;
            *f = fnew;
            *g = gnew;
        }
    }
}

/// Newton steps on the free coordinates with eigenvalue-regularized curvature.
/// The curvature is refreshed only when a step with the stale one fails.
fn newton(
    s: &Sub,
    config: &FitConfig,
    lo: &[f64],
    hi: &[f64],
    (x, f, g): (&mut Vec<f64>, &mut f64, &mut Vec<f64>),
    (hess, hess_at): (&mut DMatrix<f64>, &mut Vec<f64>),
) -> Result<()> {
    for _ in 0..20 {
        snap_to_floor(s, lo, (x, f, g));
        let pg = optim::projected(x, g, lo, hi);
        if optim::norm(&pg) < config.grad_tol {
            break;
        }
        let free: Vec<usize> = (0..x.len()).filter(|&i| pg[i] != 0.0 || (x[i] > lo[i] && x[i] < hi[i])).collect();
        let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
        let eig = hf.symmetric_eigen();
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let gf = DMatrix::from_fn(free.len(), 1, |a, _| g[free[a]]);
        let proj = eig.eigenvectors.transpose() * gf;
        let scaled = DMatrix::from_fn(free.len(), 1, |a, _| proj[(a, 0)] / eig.eigenvalues[a].abs().max(1e-10 * top.max(1e-300)));
        let step = &eig.eigenvectors * scaled;
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut xn = x.clone();
            for (a, &i) in free.iter().enumerate() {
                xn[i] = (x[i] - t * step[(a, 0)]).clamp(lo[i], hi[i]);
            }
            if let Ok((fnew, gnew)) = s.eval(&xn) {
                let pgn = optim::norm(&optim::projected(&xn, &gnew, lo, hi));
                if fnew < *f || (fnew <= *f + 1e-9 * f.abs().max(1.0) && pgn < optim::norm(&pg)) {
                    *x = xn;
                    *f = fnew;
                    *g = gnew;
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            if hess_at == x {
                break;
            }
            *hess = s.hessian(x, config.hessian_step)?;
            *hess_at = x.clone();
        }
    }
    Ok(())
}

/// Laplace draw factor for one block: `(F, held, degenerate)`.
fn laplace(map: &ThetaMap, theta: &[f64], hess: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>, bool) {
    let n = theta.len();
    let (lo, hi) = map.bounds();
    let at_bound = |i: usize| theta[i] <= lo[i] + 1e-8 || theta[i] >= hi[i] - 1e-8;
    let free: Vec<usize> = (0..n).filter(|&i| !at_bound(i)).collect();
    let mut held: Vec<usize> = (0..n).filter(|&i| at_bound(i)).collect();
    let mut factor = DMatrix::zeros(n, n);
    let mut degenerate = !held.is_empty();
    if free.is_empty() {
        return (factor, held, degenerate);
    }
    let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
    let eig = hf.symmetric_eigen();
    let mut kept = 0;
    for k in 0..free.len() {
        let lam = eig.eigenvalues[k];
        // unit-scale or wider on the unconstrained scale: not identified
        if !(lam >= 2.0) {
            degenerate = true;
            continue;
        }
        kept += 1;
        let s = (2.0 / lam).sqrt();
        for (a, &i) in free.iter().enumerate() {
            factor[(i, k)] = eig.eigenvectors[(a, k)] * s;
        }
    }
    if kept < free.len() {
        // coordinates that no kept direction moves are held too
        for &i in &free {
            if factor.row(i).iter().all(|v| *v == 0.0) {
                held.push(i);
            }
        }
        held.sort_unstable();
    }
    (factor, held, degenerate)
}

/// Maximum-likelihood fit from the deterministic start.
pub fn fit(design: &DesignMatrices, config: &FitConfig) -> Result<FittedModel> {
    if design.n() <= design.p() {
        return Err(MmoError::Config(format!("{} rows for {} fixed effects", design.n(), design.p())));
    }
    if design.y.iter().any(|v| !v.is_finite()) {
        return Err(MmoError::Config("non-finite response".into()));
    }
    let subs = submodels(design, config);
    let fits: Vec<SubFit> = subs.iter().map(|s| optimize(s, config)).collect::<Result<_>>()?;

    let total: usize = subs.iter().map(Sub::n_theta).sum();
    let mut theta_hat = Vec::with_capacity(total);
    let mut laplace_factor = DMatrix::zeros(total, total);
    let mut held = Vec::new();
    let mut curvature_degenerate = false;
    let mut gnorm2 = 0.0;
    let mut converged = true;
    let mut iterations = 0;
    let mut deviance = 0.0;
    let mut o = 0;
    for (s, f) in subs.iter().zip(&fits) {
        let (lo, hi) = s.map.bounds();
        let pg = optim::projected(&f.theta, &f.grad, &lo, &hi);
        let gn = optim::norm(&pg);
        gnorm2 += gn * gn;
        converged &= gn < config.grad_tol;
        iterations = iterations.max(f.iterations);
        deviance += f.deviance;
        let (fac, h, deg) = laplace(&s.map, &f.theta, &f.hessian);
        laplace_factor.view_mut((o, o), (s.n_theta(), s.n_theta())).copy_from(&fac);
        held.extend(h.into_iter().map(|i| i + o));
        curvature_degenerate |= deg;
        theta_hat.extend_from_slice(&f.theta);
        o += s.n_theta();
    }
    let gradient_norm = gnorm2.sqrt();
    if !converged {
        log::warn!(
            "{}: not converged after {iterations} iterations (projected gradient norm {gradient_norm:.3e})",
            design.spec.variant_name()
        );
    }

    let slices = theta_slices(&subs, &theta_hat)?;
    let p = design.p();
    let mut beta_cov = DMatrix::zeros(2 * p, 2 * p);
    let mut est = empty_draw(design);
    let mut modes = Vec::new();
    for (s, t) in subs.iter().zip(slices) {
        let params = s.map.params(t);
        let fac = s.problem.factor(&params)?;
        place_components(s, &params, &s.problem.beta(&fac), &mut est);
        let q = p * s.formants.len();
        let cov = inverse_from_cholesky(&s.problem.beta_precision_factor(&fac), q);
        for (a, &fa) in s.formants.iter().enumerate() {
            for (b, &fb) in s.formants.iter().enumerate() {
                for j in 0..p {
                    for k in 0..p {
                        beta_cov[(fa * p + j, fb * p + k)] = cov[(a * p + j) * q + b * p + k];
                    }
                }
            }
        }
        modes.push(s.problem.random_effects(&params, &fac));
    }
    let random_effects = assemble_modes(design, &subs, &modes);
    let sigma = (design.v.ncols() == 1).then(|| est.sigma(&[1.0]));

    Ok(FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        spec: design.spec.clone(),
        config: config.clone(),
        beta: est.beta,
        beta_cov,
        g_speaker: est.g_speaker,
        g_word: est.g_word,
        g_following: est.g_following,
        sigma,
        gamma: est.gamma,
        rho: est.rho,
        theta_hat,
        laplace_factor,
        held,
        curvature_degenerate,
        loglik: -0.5 * deviance,
        deviance,
        converged,
        iterations,
        gradient_norm,
        random_effects,
    })
}

fn empty_draw(design: &DesignMatrices) -> ParamDraw {
    let q = 2 * SPEAKER_COEFS;
    ParamDraw {
        beta: DMatrix::zeros(design.p(), 2),
        g_speaker: DMatrix::zeros(q, q),
        g_word: DMatrix::zeros(2, 2),
        g_following: design.following.as_ref().map(|_| DMatrix::zeros(2, 2)),
        gamma: DMatrix::zeros(design.v.ncols(), 2),
        rho: 0.0,
    }
}

/// Writes one block's parameters (and `beta`, formant-major) into `out`.
fn place_components(s: &Sub, params: &Params, beta: &[f64], out: &mut ParamDraw) {
    let d = s.formants.len();
    let p = out.beta.nrows();
    let m = out.gamma.nrows();
    for (a, &f) in s.formants.iter().enumerate() {
        for j in 0..p {
            out.beta[(j, f)] = beta[a * p + j];
        }
        for k in 0..m {
            out.gamma[(k, f)] = params.gamma[a * m + k];
        }
    }
    if d == 2 {
        out.rho = params.rho;
    }
    let gram = |lam: &[f64], b: usize| {
        let l = DMatrix::from_row_slice(b, b, lam);
        &l * l.transpose()
    };
    let place = |target: &mut DMatrix<f64>, g: &DMatrix<f64>, k: usize| {
        for (a, &fa) in s.formants.iter().enumerate() {
            for (b, &fb) in s.formants.iter().enumerate() {
                for i in 0..k {
                    for j in 0..k {
                        target[(fa * k + i, fb * k + j)] = g[(a * k + i, b * k + j)];
                    }
                }
            }
        }
    };
    if !params.lambda.is_empty() {
        let k = SPEAKER_COEFS;
        place(&mut out.g_speaker, &gram(&params.lambda[0], k * d), k);
        place(&mut out.g_word, &gram(&params.lambda[1], d), 1);
        if s.has_following {
            let mut g = out.g_following.take().unwrap_or_else(|| DMatrix::zeros(2, 2));
            place(&mut g, &gram(&params.lambda[2], d), 1);
            out.g_following = Some(g);
        }
    }
}

/// Engine parameters for one block from a full parameter set.
fn params_from_draw(s: &Sub, draw: &ParamDraw) -> Params {
    let d = s.formants.len();
    let m = draw.gamma.nrows();
    let sub_block = |g: &DMatrix<f64>, k: usize| {
        DMatrix::from_fn(k * d, k * d, |r, c| g[(s.formants[r / k] * k + r % k, s.formants[c / k] * k + c % k)])
    };
    let flat = |l: DMatrix<f64>| l.transpose().iter().copied().collect::<Vec<f64>>();
    let mut lambda = Vec::new();
    if !s.problem.terms.is_empty() {
        lambda.push(flat(psd_factor(&sub_block(&draw.g_speaker, SPEAKER_COEFS))));
        lambda.push(flat(psd_factor(&sub_block(&draw.g_word, 1))));
        if s.has_following {
            let g = draw.g_following.clone().unwrap_or_else(|| DMatrix::zeros(2, 2));
            lambda.push(flat(psd_factor(&sub_block(&g, 1))));
        }
    }
    let gamma = s
        .formants
        .iter()
        .flat_map(|&f| (0..m).map(move |k| draw.gamma[(k, f)]))
        .collect();
    Params {
        lambda,
        gamma,
        rho: if d == 2 { draw.rho } else { 0.0 },
    }
}

fn assemble_modes(design: &DesignMatrices, subs: &[Sub], modes: &[Vec<Vec<f64>>]) -> RandomEffectEstimates {
    let k = SPEAKER_COEFS;
    let ns = design.speaker.n_levels();
    let nw = design.word.n_levels();
    let mut speaker = DMatrix::zeros(ns, 2 * k);
    let mut word = DMatrix::zeros(nw, 2);
    let mut following = design.following.as_ref().map(|g| DMatrix::zeros(g.n_levels(), 2));
    for (s, u) in subs.iter().zip(modes) {
        if u.is_empty() {
            continue;
        }
        let d = s.formants.len();
        for l in 0..ns {
            for (a, &f) in s.formants.iter().enumerate() {
                for j in 0..k {
                    speaker[(l, f * k + j)] = u[0][l * k * d + a * k + j];
                }
            }
        }
        for l in 0..nw {
            for (a, &f) in s.formants.iter().enumerate() {
                word[(l, f)] = u[1][l * d + a];
            }
        }
        if let (true, Some(fm)) = (s.has_following, following.as_mut()) {
            for l in 0..fm.nrows() {
                for (a, &f) in s.formants.iter().enumerate() {
                    fm[(l, f)] = u[2][l * d + a];
                }
            }
        }
    }
    RandomEffectEstimates {
        speaker_labels: design.speaker.labels.clone(),
        speaker,
        word_labels: design.word.labels.clone(),
        word,
        following_labels: design.following.as_ref().map(|g| g.labels.clone()).unwrap_or_default(),
        following,
    }
}

fn check_design(model: &FittedModel, design: &DesignMatrices) -> Result<()> {
    if design.spec.structure != model.spec.structure
        || design.spec.response != model.spec.response
        || design.p() != model.beta.nrows()
    {
        return Err(MmoError::InvalidModel("design does not match the fitted model".into()));
    }
    Ok(())
}

/// Joint conditional modes of all random effects at the model's parameters.
pub fn conditional_modes(model: &FittedModel, design: &DesignMatrices) -> Result<RandomEffectEstimates> {
    check_design(model, design)?;
    let subs = submodels(design, &model.config);
    let est = model.estimate();
    let mut modes = Vec::new();
    for s in &subs {
        let params = params_from_draw(s, &est);
        let fac = s.problem.factor(&params)?;
        modes.push(s.problem.random_effects(&params, &fac));
    }
    Ok(assemble_modes(design, &subs, &modes))
}

/// Laplace draws of the variance parameters, each paired with a draw of
/// `beta` from its exact conditional Gaussian given those parameters.
pub fn draw_parameters(model: &FittedModel, design: &DesignMatrices, n_draws: usize, seed: u64) -> Result<ParameterDraws> {
    check_design(model, design)?;
    let subs = submodels(design, &model.config);
    let total: usize = subs.iter().map(Sub::n_theta).sum();
    if model.theta_hat.len() != total || model.laplace_factor.nrows() != total {
        return Err(MmoError::InvalidModel("theta dimension does not match the design".into()));
    }
    let point_mass = model.laplace_factor.iter().all(|v| *v == 0.0);
    if point_mass {
        log::warn!("no usable curvature; parameter draws are a point mass at the estimate");
    }
    let bounds: Vec<(Vec<f64>, Vec<f64>)> = subs.iter().map(|s| s.map.bounds()).collect();
    let lo: Vec<f64> = bounds.iter().flat_map(|b| b.0.clone()).collect();
    let hi: Vec<f64> = bounds.iter().flat_map(|b| b.1.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = design.p();
    let mut draws = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let mut accepted = None;
        for _attempt in 0..20 {
            let z = DMatrix::from_fn(total, 1, |_, _| StandardNormal.sample(&mut rng));
            let shift = &model.laplace_factor * z;
            let theta: Vec<f64> = (0..total)
                .map(|i| (model.theta_hat[i] + shift[(i, 0)]).clamp(lo[i], hi[i]))
                .collect();
            if let Ok(d) = draw_at(&subs, &theta, design, p, &mut rng) {
                accepted = Some(d);
                break;
            }
        }
        let draw = match accepted {
            Some(d) => d,
            None => draw_at(&subs, &model.theta_hat, design, p, &mut rng)?,
        };
        draws.push(draw);
    }
    Ok(ParameterDraws {
        draws,
        point_mass,
        held: model.held.clone(),
    })
}

fn draw_at(subs: &[Sub], theta: &[f64], design: &DesignMatrices, p: usize, rng: &mut ChaCha8Rng) -> Result<ParamDraw> {
    let mut out = empty_draw(design);
    for (s, t) in subs.iter().zip(theta_slices(subs, theta)?) {
        let params = s.map.params(t);
        let fac = s.problem.factor(&params)?;
        let q = p * s.formants.len();
        let lx = s.problem.beta_precision_factor(&fac);
        let mut z: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut *rng)).collect();
        back_solve_t(&lx, q, &mut z);
        let beta: Vec<f64> = s.problem.beta(&fac).iter().zip(&z).map(|(b, e)| b + e).collect();
        place_components(s, &params, &beta, &mut out);
    }
    Ok(out)
}
