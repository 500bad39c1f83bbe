//! Reverse-process samplers: ancestral and DDIM, both with optional
//! classifier guidance, plus reverse-ODE encoding, latent interpolation,
//! and the two temperature variants.
//!
//! Chains are driven by per-chain random streams derived from
//! `(seed, chain index)`, so results are bit-reproducible and independent of
//! batching. Draw order per chain: the initial `x_T` (d values), then d
//! transition-noise values at every ancestral step above the final one.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifiers::NoisyClassifier;
use crate::error::{Error, Result};
use crate::models::Denoiser;
use crate::process::{check_t, Point};
use crate::schedules::{NoiseSchedule, RespacingSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Ancestral,
    Ddim,
}

/// Which variance the ancestral sampler draws with (DDIM ignores this).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    LearnedV,
    /// The upper bound `beta_t`. For near-unit-variance data this is close
    /// to the exact reverse variance, so it is the default.
    #[default]
    FixedBeta,
    FixedBetaTilde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TemperatureMode {
    #[default]
    None,
    /// Multiply each transition's Gaussian noise by tau.
    NoiseScale,
    /// Divide the predicted noise by tau (equivalently, scale up the score).
    EpsScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Temperature {
    pub mode: TemperatureMode,
    pub tau: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self { mode: TemperatureMode::None, tau: 1.0 }
    }
}

impl Temperature {
    fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::invalid("tau must be finite"));
        }
        match self.mode {
            // Dividing eps by zero is meaningless; scaling noise by zero is
            // the legitimate deterministic limit.
            TemperatureMode::EpsScale if self.tau <= 0.0 => {
                Err(Error::invalid("eps-scale temperature needs tau > 0"))
            }
            TemperatureMode::NoiseScale if self.tau < 0.0 => {
                Err(Error::invalid("noise-scale temperature needs tau >= 0"))
            }
            _ => Ok(()),
        }
    }

    /// Apply the eps-scale variant to a noise prediction.
    pub fn apply_to_eps(&self, eps: &mut Array1<f64>) {
        if self.mode == TemperatureMode::EpsScale {
            eps.mapv_inplace(|e| e / self.tau);
        }
    }

    /// Apply the noise-scale variant to a transition-noise draw.
    pub fn apply_to_noise(&self, z: &mut Array1<f64>) {
        if self.mode == TemperatureMode::NoiseScale {
            z.mapv_inplace(|v| v * self.tau);
        }
    }
}

/// Everything a sampling run needs besides the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub guidance_scale: f64,
    pub temperature: Temperature,
    pub respacing: RespacingSpec,
    pub seed: u64,
    pub variance_mode: VarianceMode,
    /// Guidance combined with temperature is untested territory; it is
    /// rejected unless explicitly enabled.
    pub allow_experimental: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ancestral,
            guidance_scale: 0.0,
            temperature: Temperature::default(),
            respacing: RespacingSpec::Full,
            seed: 0,
            variance_mode: VarianceMode::FixedBeta,
            allow_experimental: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::invalid("guidance scale must be finite and >= 0"));
        }
        self.temperature.validate()?;
        if self.guidance_scale > 0.0
            && self.temperature.mode != TemperatureMode::None
            && !self.allow_experimental
        {
            return Err(Error::invalid(
                "guidance combined with temperature requires allow_experimental",
            ));
        }
        Ok(())
    }
}

/// Diagnostic record of one chain.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `x_T` down to `x_0`; length is the retained step count plus one.
    pub states: Vec<Point>,
}

impl Trajectory {
    pub fn final_x0(&self) -> &Point {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// Output of [`sample`].
#[derive(Debug, Clone)]
pub struct SampleResult {
    /// Final samples, one row per chain.
    pub samples: Array2<f64>,
    /// Target classes, present for guided or class-conditional runs.
    pub classes: Option<Vec<usize>>,
    pub trajectories: Option<Vec<Trajectory>>,
    /// Denoiser evaluations per chain (equals the retained step count).
    pub denoiser_evals_per_chain: usize,
    pub classifier_evals_per_chain: usize,
}

fn per_dim_variance(
    cfg: &SamplerConfig,
    t: usize,
    sched: &NoiseSchedule,
    v: Option<&ArrayView1<f64>>,
    dim: usize,
) -> Result<Array1<f64>> {
    match cfg.variance_mode {
        VarianceMode::FixedBeta => Ok(Array1::from_elem(dim, sched.beta(t))),
        VarianceMode::FixedBetaTilde => Ok(Array1::from_elem(dim, sched.beta_tilde(t))),
        VarianceMode::LearnedV => {
            let v = v.ok_or_else(|| {
                Error::invalid("learned-v variance mode needs a model with a variance head")
            })?;
            crate::process::sigma_from_v(&v.to_owned(), t, sched)
        }
    }
}

/// One ancestral transition given the model outputs: optional temperature on
/// eps, the reverse mean, the optional guidance shift `s * Sigma * g`, and —
/// above the final step — Gaussian noise at the chosen variance.
#[allow(clippy::too_many_arguments)]
fn ancestral_transition(
    xt: &ArrayView1<f64>,
    eps: &ArrayView1<f64>,
    v: Option<&ArrayView1<f64>>,
    grad: Option<&ArrayView1<f64>>,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Point> {
    let mut eps = eps.to_owned();
    cfg.temperature.apply_to_eps(&mut eps);
    let mut mean = crate::process::mu_from_eps(&xt.to_owned(), t, &eps, sched)?;
    let var = per_dim_variance(cfg, t, sched, v, xt.len())?;
    if let Some(g) = grad {
        for i in 0..mean.len() {
            mean[i] += cfg.guidance_scale * var[i] * g[i];
        }
    }
    if t == 0 {
        return Ok(mean);
    }
    let mut z = Array1::from_iter((0..xt.len()).map(|_| StandardNormal.sample(rng)));
    cfg.temperature.apply_to_noise(&mut z);
    for i in 0..mean.len() {
        mean[i] += var[i].sqrt() * z[i];
    }
    Ok(mean)
}

/// The deterministic DDIM update from `t` toward `t_prev` (`None` lands on
/// `x_0`), given an already-adjusted noise prediction.
fn ddim_transition(
    xt: &ArrayView1<f64>,
    eps_hat: &ArrayView1<f64>,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<Point> {
    check_t(t, sched)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = match t_prev {
        Some(p) => {
            if p >= t {
                return Err(Error::invalid("t_prev must be below t"));
            }
            sched.alpha_bar(p)
        }
        None => 1.0,
    };
    let x0_pred = (xt - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt();
    Ok(x0_pred * ab_prev.sqrt() + eps_hat * (1.0 - ab_prev).sqrt())
}

/// Single unguided ancestral step (Gaussian reverse transition).
pub fn ancestral_step(
    model: &dyn Denoiser,
    xt: &ArrayView1<f64>,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Point> {
    cfg.validate()?;
    let out = model.predict(xt, t, sched, None)?;
    ancestral_transition(xt, &out.eps.view(), out.v.as_ref().map(|v| v.view()).as_ref(), None, t, sched, cfg, rng)
}

/// Single guided ancestral step: the transition mean is shifted by
/// `s * Sigma * grad log p(y | x_t)` with the same Sigma the step samples with.
#[allow(clippy::too_many_arguments)]
pub fn guided_ancestral_step(
    model: &dyn Denoiser,
    classifier: &dyn NoisyClassifier,
    class: usize,
    xt: &ArrayView1<f64>,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Point> {
    cfg.validate()?;
    let out = model.predict(xt, t, sched, model_class(model, class))?;
    let grad = classifier.classify(xt, t, sched, class)?.grad_log_prob_selected;
    ancestral_transition(
        xt,
        &out.eps.view(),
        out.v.as_ref().map(|v| v.view()).as_ref(),
        Some(&grad.view()),
        t,
        sched,
        cfg,
        rng,
    )
}

fn model_class(model: &dyn Denoiser, class: usize) -> Option<usize> {
    model.is_conditional().then_some(class)
}

/// Single deterministic DDIM step from `t` to `t_prev`.
pub fn ddim_step(
    model: &dyn Denoiser,
    xt: &ArrayView1<f64>,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Point> {
    cfg.validate()?;
    let out = model.predict(xt, t, sched, None)?;
    let mut eps = out.eps;
    cfg.temperature.apply_to_eps(&mut eps);
    ddim_transition(xt, &eps.view(), t, t_prev, sched)
}

/// Single guided DDIM step: the prediction is shifted to
/// `eps - sqrt(1 - abar_t) * s * grad log p(y | x_t)` before the update.
#[allow(clippy::too_many_arguments)]
pub fn guided_ddim_step(
    model: &dyn Denoiser,
    classifier: &dyn NoisyClassifier,
    class: usize,
    xt: &ArrayView1<f64>,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Point> {
    cfg.validate()?;
    let out = model.predict(xt, t, sched, model_class(model, class))?;
    let mut eps = out.eps;
    cfg.temperature.apply_to_eps(&mut eps);
    let grad = classifier.classify(xt, t, sched, class)?.grad_log_prob_selected;
    let shift = (1.0 - sched.alpha_bar(t)).sqrt() * cfg.guidance_scale;
    for i in 0..eps.len() {
        eps[i] -= shift * grad[i];
    }
    ddim_transition(xt, &eps.view(), t, t_prev, sched)
}

/// Run `n` chains from `x_T ~ N(0, I)` down the (possibly respaced) schedule.
///
/// `classes` drives both a class-conditional model and the classifier, and is
/// required when either is in play. Guidance (`guidance_scale > 0`) requires
/// the classifier.
pub fn sample(
    model: &dyn Denoiser,
    base_sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
    classifier: Option<&dyn NoisyClassifier>,
    classes: Option<&[usize]>,
    record_trajectories: bool,
) -> Result<SampleResult> {
    cfg.validate()?;
    let guided = cfg.guidance_scale > 0.0;
    if guided && classifier.is_none() {
        return Err(Error::invalid("guided sampling needs a classifier"));
    }
    if (guided || model.is_conditional()) && classes.is_none() {
        return Err(Error::invalid("guided or conditional sampling needs target classes"));
    }
    if let Some(cs) = classes {
        if cs.len() != n {
            return Err(Error::invalid("need one target class per chain"));
        }
    }
    if cfg.variance_mode == VarianceMode::LearnedV
        && cfg.kind == SamplerKind::Ancestral
        && !model.has_variance_head()
    {
        return Err(Error::invalid(
            "learned-v variance mode needs a model with a variance head",
        ));
    }

    let sched = cfg.respacing.apply(base_sched)?;
    let steps = sched.num_steps();
    let d = model.data_dim();

    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(c as u64);
            r
        })
        .collect();

    let mut x = Array2::zeros((n, d));
    for (c, rng) in rngs.iter_mut().enumerate() {
        for j in 0..d {
            x[(c, j)] = StandardNormal.sample(rng);
        }
    }

    let mut trajectories: Option<Vec<Trajectory>> = record_trajectories.then(|| {
        (0..n)
            .map(|c| Trajectory { states: vec![x.row(c).to_owned()] })
            .collect()
    });

    let model_classes = model.is_conditional().then(|| classes.unwrap()).map(|c| &c[..]);
    let mut classifier_evals = 0usize;

    for t in (0..steps).rev() {
        let out = model.predict_batch(&x.view(), t, &sched, model_classes)?;
        let grads = if guided {
            classifier_evals += 1;
            Some(classifier.unwrap().grad_log_prob_batch(&x.view(), t, &sched, classes.unwrap())?)
        } else {
            None
        };

        for c in 0..n {
            let xt = x.row(c).to_owned();
            let eps_row = out.eps.row(c);
            let next = match cfg.kind {
                SamplerKind::Ancestral => ancestral_transition(
                    &xt.view(),
                    &eps_row,
                    out.v.as_ref().map(|v| v.row(c)).as_ref(),
                    grads.as_ref().map(|g| g.row(c)).as_ref(),
                    t,
                    &sched,
                    cfg,
                    &mut rngs[c],
                )?,
                SamplerKind::Ddim => {
                    let mut eps = eps_row.to_owned();
                    cfg.temperature.apply_to_eps(&mut eps);
                    if let Some(g) = grads.as_ref().map(|g| g.row(c)) {
                        let shift = (1.0 - sched.alpha_bar(t)).sqrt() * cfg.guidance_scale;
                        for i in 0..eps.len() {
                            eps[i] -= shift * g[i];
                        }
                    }
                    ddim_transition(&xt.view(), &eps.view(), t, t.checked_sub(1), &sched)?
                }
            };
            x.row_mut(c).assign(&next);
            if let Some(trajs) = trajectories.as_mut() {
                trajs[c].states.push(next);
            }
        }
    }

    Ok(SampleResult {
        samples: x,
        classes: classes.map(|c| c.to_vec()),
        trajectories,
        denoiser_evals_per_chain: steps,
        classifier_evals_per_chain: classifier_evals,
    })
}

/// Run the DDIM ODE in the noising direction for `reverse_steps` steps
/// (default: all but the last, which would need the out-of-range
/// `alpha_bar(T)`), returning latents at signal level `alpha_bar(R)`.
pub fn ddim_encode(
    model: &dyn Denoiser,
    x0s: &ArrayView2<f64>,
    sched: &NoiseSchedule,
    reverse_steps: Option<usize>,
    classes: Option<&[usize]>,
) -> Result<Array2<f64>> {
    let t_max = sched.num_steps();
    let steps = reverse_steps.unwrap_or(t_max - 1);
    if steps == 0 || steps > t_max - 1 {
        return Err(Error::invalid(format!(
            "reverse_steps must be in 1..={} for this schedule",
            t_max - 1
        )));
    }
    if x0s.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("encode inputs must be finite"));
    }
    let mut x = x0s.to_owned();
    for t in 0..steps {
        let out = model.predict_batch(&x.view(), t, sched, classes)?;
        let ab = sched.alpha_bar(t);
        let ab_next = sched.alpha_bar(t + 1);
        for c in 0..x.nrows() {
            for i in 0..x.ncols() {
                let eps = out.eps[(c, i)];
                let x0_pred = (x[(c, i)] - (1.0 - ab).sqrt() * eps) / ab.sqrt();
                x[(c, i)] = ab_next.sqrt() * x0_pred + (1.0 - ab_next).sqrt() * eps;
            }
        }
    }
    Ok(x)
}

/// Deterministic DDIM decoding from latents at position `start` (default:
/// the top of the chain) down to `x_0`.
pub fn ddim_decode(
    model: &dyn Denoiser,
    latents: &ArrayView2<f64>,
    sched: &NoiseSchedule,
    start: Option<usize>,
    classes: Option<&[usize]>,
) -> Result<Array2<f64>> {
    let start = start.unwrap_or(sched.num_steps() - 1);
    check_t(start, sched)?;
    let mut x = latents.to_owned();
    for t in (0..=start).rev() {
        let out = model.predict_batch(&x.view(), t, sched, classes)?;
        for c in 0..x.nrows() {
            let next = ddim_transition(
                &x.row(c).to_owned().view(),
                &out.eps.row(c),
                t,
                t.checked_sub(1),
                sched,
            )?;
            x.row_mut(c).assign(&next);
        }
    }
    Ok(x)
}

/// Spherical-ish latent interpolation `cos(theta) z0 + sin(theta) z1`.
pub fn latent_interpolate(z0: &ArrayView1<f64>, z1: &ArrayView1<f64>, theta: f64) -> Result<Point> {
    if z0.len() != z1.len() {
        return Err(Error::invalid("latents must have equal dimensions"));
    }
    Ok(z0 * theta.cos() + z1 * theta.sin())
}
