//! Objectives and optimization: the mean-squared noise loss, the hybrid
//! objective with its stop-gradient wiring, Adam with optional decoupled
//! weight decay, EMA, and the diffusion/classifier training loops.
//!
//! Training is bit-reproducible: all randomness comes from ChaCha streams
//! derived from the config seed (stream 0 initializes parameters, stream 1
//! draws data, stream 2 draws the per-sample timesteps and noise, in that
//! per-sample order: t first, then the noise vector).

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifiers::{log_softmax, ClassifierSpec, MlpClassifier, NoisyClassifier};
use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::models::{DenoiserSpec, MlpDenoiser};
use crate::process;
use crate::schedules::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub ema_rate: f64,
    /// Weight of the variational-bound term in the hybrid objective. Zero
    /// trains with the plain noise-prediction loss.
    pub lambda_vlb: f64,
    /// Decoupled weight decay; used for classifier training.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            iterations: 10_000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            ema_rate: 0.999,
            lambda_vlb: 0.001,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::invalid("batch size and iterations must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::invalid("ema rate must be in [0, 1)"));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("adam {name} must be in [0, 1)")));
            }
        }
        if self.lambda_vlb < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("lambda_vlb and weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// First/second-moment accumulators for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self { m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }
}

/// Bias-corrected Adam update with decoupled weight decay.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("parameter/gradient/state sizes disagree"));
    }
    state.step += 1;
    let b1 = cfg.adam_beta1;
    let b2 = cfg.adam_beta2;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        if cfg.weight_decay > 0.0 {
            params[i] -= cfg.learning_rate * cfg.weight_decay * params[i];
        }
    }
    Ok(())
}

/// `ema <- rate * ema + (1 - rate) * params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], rate: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = rate * *e + (1.0 - rate) * p;
    }
}

/// Loss value(s) and the flat parameter gradient.
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub total: f64,
    pub l_simple: f64,
    pub l_vlb: f64,
    pub grads: Vec<f64>,
}

/// Per-sample draws shared by the losses: `t ~ U{0..T-1}` then `eps ~ N(0,I)`.
fn draw_noising(
    x0s: &ArrayView2<f64>,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Array2<f64>, Array2<f64>) {
    let (n, d) = x0s.dim();
    let t_max = sched.num_steps();
    let mut ts = Vec::with_capacity(n);
    let mut eps = Array2::zeros((n, d));
    let mut xts = Array2::zeros((n, d));
    for i in 0..n {
        let t = rng.gen_range(0..t_max);
        ts.push(t);
        let ab = sched.alpha_bar(t);
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            eps[(i, j)] = e;
            xts[(i, j)] = ab.sqrt() * x0s[(i, j)] + (1.0 - ab).sqrt() * e;
        }
    }
    (ts, eps, xts)
}

/// Mean-squared noise-prediction loss over batch and dimensions, with
/// gradients for every parameter.
pub fn simple_loss(
    model: &MlpDenoiser,
    x0s: &ArrayView2<f64>,
    classes: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
    sched: &NoiseSchedule,
) -> Result<LossAndGrads> {
    hybrid_loss_impl(model, x0s, classes, rng, sched, 0.0)
}

/// `L_simple + lambda * L_vlb` at the sampled timestep. The bound term sees a
/// stop-gradient on the mean, so only the variance head trains through it.
pub fn hybrid_loss(
    model: &MlpDenoiser,
    x0s: &ArrayView2<f64>,
    classes: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
    sched: &NoiseSchedule,
    lambda: f64,
) -> Result<LossAndGrads> {
    if !model.learned_variance() {
        return Err(Error::invalid("the hybrid loss needs a variance head"));
    }
    hybrid_loss_impl(model, x0s, classes, rng, sched, lambda)
}

fn hybrid_loss_impl(
    model: &MlpDenoiser,
    x0s: &ArrayView2<f64>,
    classes: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
    sched: &NoiseSchedule,
    lambda: f64,
) -> Result<LossAndGrads> {
    let (n, d) = x0s.dim();
    if n == 0 {
        return Err(Error::invalid("loss needs a non-empty batch"));
    }
    let (ts, eps, xts) = draw_noising(x0s, sched, rng);
    let (out, cache) = model.forward_raw(&xts.view(), &ts, classes)?;
    let learned = model.learned_variance();

    let mut d_out = Array2::zeros(out.raw_dim());
    let scale = 1.0 / (n * d) as f64;
    let mut l_simple = 0.0;
    for i in 0..n {
        for j in 0..d {
            let diff = out[(i, j)] - eps[(i, j)];
            l_simple += diff * diff * scale;
            d_out[(i, j)] = 2.0 * diff * scale;
        }
    }

    let mut l_vlb = 0.0;
    if lambda > 0.0 {
        for i in 0..n {
            let t = ts[i];
            let x0 = x0s.row(i).to_owned();
            let xt = xts.row(i).to_owned();
            // Stop-gradient: the mean is a constant input to the bound term.
            let eps_hat = Array1::from_iter((0..d).map(|j| out[(i, j)]));
            let v = Array1::from_iter((0..d).map(|j| out[(i, d + j)]));
            let mean = process::mu_from_eps(&xt, t, &eps_hat, sched)?;
            let var = process::sigma_from_v(&v, t, sched)?;
            let term = process::vlb_term(&x0, &xt, t, &mean, &var, sched)?;
            l_vlb += term / n as f64;

            // d term / d var, per dimension.
            let log_ratio = sched.beta(t).ln() - sched.beta_tilde_clipped(t).ln();
            if t == 0 {
                for j in 0..d {
                    let dm = x0[j] - mean[j];
                    let dvar = 0.5 * (1.0 / var[j] - dm * dm / (var[j] * var[j]));
                    d_out[(i, d + j)] += lambda / n as f64 * dvar * var[j] * log_ratio;
                }
            } else {
                let post = process::q_posterior(&x0, &xt, t, sched)?;
                for j in 0..d {
                    let dm = post.mean[j] - mean[j];
                    let dvar = 0.5
                        * (1.0 / var[j] - (post.var[j] + dm * dm) / (var[j] * var[j]));
                    d_out[(i, d + j)] += lambda / n as f64 * dvar * var[j] * log_ratio;
                }
            }
        }
    } else if learned {
        // Variance head present but untrained by this loss: zero gradient.
    }

    let grads = model.mlp().backward(&cache, &d_out.view(), true)?.params;
    Ok(LossAndGrads { total: l_simple + lambda * l_vlb, l_simple, l_vlb, grads })
}

/// Cross-entropy of the noisy classifier on `(x_t, t) -> y`.
pub fn classifier_loss(
    model: &MlpClassifier,
    x0s: &ArrayView2<f64>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
    sched: &NoiseSchedule,
) -> Result<LossAndGrads> {
    let (n, _) = x0s.dim();
    if n == 0 {
        return Err(Error::invalid("loss needs a non-empty batch"));
    }
    if labels.len() != n {
        return Err(Error::invalid("labels must match batch size"));
    }
    let (ts, _eps, xts) = draw_noising(x0s, sched, rng);
    let (logits, cache) = model.mlp().forward(&xts.view(), &ts, None)?;
    let log_probs = log_softmax(&logits);
    let mut loss = 0.0;
    let mut d_out = log_probs.mapv(|lp| lp.exp() / n as f64);
    for (i, &y) in labels.iter().enumerate() {
        if y >= model.num_classes() {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        loss -= log_probs[(i, y)] / n as f64;
        d_out[(i, y)] -= 1.0 / n as f64;
    }
    let grads = model.mlp().backward(&cache, &d_out.view(), true)?.params;
    Ok(LossAndGrads { total: loss, l_simple: loss, l_vlb: 0.0, grads })
}

/// One row of the persisted loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub l_simple: f64,
    pub l_vlb: f64,
    pub total: f64,
}

/// A finished training run: final weights, their EMA, and the loss curve.
#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub model: MlpDenoiser,
    pub ema: MlpDenoiser,
    pub loss_log: Vec<LossRow>,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: MlpClassifier,
    pub ema: MlpClassifier,
    pub loss_log: Vec<LossRow>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Train an MLP denoiser on a seeded mixture stream.
pub fn train_diffusion(
    mixture: &GaussianMixture,
    spec: &DenoiserSpec,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainedDenoiser> {
    cfg.validate()?;
    if cfg.lambda_vlb > 0.0 && !spec.learned_variance {
        return Err(Error::invalid("lambda_vlb > 0 needs learned_variance"));
    }
    let mut init_rng = stream_rng(cfg.seed, 0);
    let mut data_rng = stream_rng(cfg.seed, 1);
    let mut loss_rng = stream_rng(cfg.seed, 2);

    let mut model = MlpDenoiser::new(spec, mixture.dim(), mixture.num_classes(), &mut init_rng)?;
    let mut adam = AdamState::new(model.mlp().params().len());
    let mut ema_params = model.mlp().params().to_vec();
    let mut loss_log = Vec::with_capacity(cfg.iterations as usize);

    for it in 1..=cfg.iterations {
        let (x0s, ys) = mixture.sample_batch(&mut data_rng, cfg.batch_size);
        let classes = spec.conditional.then_some(&ys[..]);
        let out = if cfg.lambda_vlb > 0.0 {
            hybrid_loss(&model, &x0s.view(), classes, &mut loss_rng, sched, cfg.lambda_vlb)?
        } else {
            simple_loss(&model, &x0s.view(), classes, &mut loss_rng, sched)?
        };
        if !out.total.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        adam_step(model.mlp_mut().params_mut(), &out.grads, &mut adam, cfg)?;
        ema_update(&mut ema_params, model.mlp().params(), cfg.ema_rate);
        loss_log.push(LossRow {
            iteration: it,
            l_simple: out.l_simple,
            l_vlb: out.l_vlb,
            total: out.total,
        });
    }

    let mut ema = model.clone();
    ema.mlp_mut().set_params(ema_params)?;
    Ok(TrainedDenoiser { model, ema, loss_log })
}

/// Train the noisy classifier on the same noising distribution.
pub fn train_classifier(
    mixture: &GaussianMixture,
    spec: &ClassifierSpec,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    let mut init_rng = stream_rng(cfg.seed, 0);
    let mut data_rng = stream_rng(cfg.seed, 1);
    let mut loss_rng = stream_rng(cfg.seed, 2);

    let mut model =
        MlpClassifier::new(spec, mixture.dim(), mixture.num_classes(), &mut init_rng)?;
    let mut adam = AdamState::new(model.mlp().params().len());
    let mut ema_params = model.mlp().params().to_vec();
    let mut loss_log = Vec::with_capacity(cfg.iterations as usize);

    for it in 1..=cfg.iterations {
        let (x0s, ys) = mixture.sample_batch(&mut data_rng, cfg.batch_size);
        let out = classifier_loss(&model, &x0s.view(), &ys, &mut loss_rng, sched)?;
        if !out.total.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        adam_step(model.mlp_mut().params_mut(), &out.grads, &mut adam, cfg)?;
        ema_update(&mut ema_params, model.mlp().params(), cfg.ema_rate);
        loss_log.push(LossRow {
            iteration: it,
            l_simple: out.total,
            l_vlb: 0.0,
            total: out.total,
        });
    }

    let mut ema = model.clone();
    ema.mlp_mut().set_params(ema_params)?;
    Ok(TrainedClassifier { model, ema, loss_log })
}

/// Monte Carlo estimate of the noise-prediction loss for the exact analytic
/// predictor — the irreducible floor every trained model is measured against.
pub fn oracle_simple_loss(
    mixture: &GaussianMixture,
    sched: &NoiseSchedule,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = stream_rng(seed, 0);
    let d = mixture.dim();
    let t_max = sched.num_steps();
    let mut acc = 0.0;
    for _ in 0..samples {
        let (x0, _) = mixture.sample(&mut rng);
        let t = rng.gen_range(0..t_max);
        let ab = sched.alpha_bar(t);
        let noised = mixture.noised(ab);
        let scale = -(1.0 - ab).sqrt();
        let mut se = 0.0;
        let mut xt = Array1::zeros(d);
        let mut eps = Array1::zeros(d);
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            eps[j] = e;
            xt[j] = ab.sqrt() * x0[j] + (1.0 - ab).sqrt() * e;
        }
        let score = noised.score(&xt.view());
        for j in 0..d {
            let diff = eps[j] - scale * score[j];
            se += diff * diff;
        }
        acc += se / d as f64;
    }
    acc / samples as f64
}

/// Noise-prediction loss of a trained model on fresh draws (EMA weights are
/// usually what you pass here).
pub fn evaluate_simple_loss(
    model: &MlpDenoiser,
    mixture: &GaussianMixture,
    sched: &NoiseSchedule,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let conditional = model.mlp().config().class_conditioning.is_some();
    let mut rng = stream_rng(seed, 0);
    let batch = 1024usize;
    let mut remaining = samples;
    let mut acc = 0.0;
    while remaining > 0 {
        let n = remaining.min(batch);
        let (x0s, ys) = mixture.sample_batch(&mut rng, n);
        let (ts, eps, xts) = draw_noising(&x0s.view(), sched, &mut rng);
        let classes = conditional.then_some(&ys[..]);
        let (out, _) = model.forward_raw(&xts.view(), &ts, classes)?;
        let d = x0s.ncols();
        for i in 0..n {
            for j in 0..d {
                let diff = out[(i, j)] - eps[(i, j)];
                acc += diff * diff / d as f64;
            }
        }
        remaining -= n;
    }
    Ok(acc / samples as f64)
}
