//! The forward noising process, its posteriors, the reverse-step
//! parameterization, the score relation, and the variational-bound terms.
//!
//! Everything here is a pure function of its inputs. Timestep arguments are
//! 0-based indices into the schedule (see [`crate::schedules`]).

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::schedules::NoiseSchedule;

/// A point of the data space; d is typically 1 or 2.
pub type Point = Array1<f64>;

/// A diagonal Gaussian over the data space.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseGaussian {
    pub mean: Point,
    /// Per-dimension variance.
    pub var: Array1<f64>,
}

pub(crate) fn check_t(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t >= sched.num_steps() {
        return Err(Error::invalid(format!(
            "timestep {t} out of range for T = {}",
            sched.num_steps()
        )));
    }
    Ok(())
}

fn check_dims(a: &Point, b: &Point) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Draw position of the forward marginal: `sqrt(abar_t) x0 + sqrt(1-abar_t) eps`.
pub fn q_sample(x0: &Point, t: usize, eps: &Point, sched: &NoiseSchedule) -> Result<Point> {
    check_t(t, sched)?;
    check_dims(x0, eps)?;
    let ab = sched.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Gaussian posterior of the forward process given endpoints:
/// mean per Bayes rule, variance `beta_tilde_t` (zero at `t == 0`).
pub fn q_posterior(
    x0: &Point,
    xt: &Point,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ReverseGaussian> {
    check_t(t, sched)?;
    check_dims(x0, xt)?;
    let ab = sched.alpha_bar(t);
    let abp = sched.alpha_bar_prev(t);
    let c0 = abp.sqrt() * sched.beta(t) / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab);
    Ok(ReverseGaussian {
        mean: x0 * c0 + xt * ct,
        var: Array1::from_elem(x0.len(), sched.beta_tilde(t)),
    })
}

/// Invert the forward marginal: `(xt - sqrt(1-abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0_from_eps(
    xt: &Point,
    t: usize,
    eps: &Point,
    sched: &NoiseSchedule,
) -> Result<Point> {
    check_t(t, sched)?;
    check_dims(xt, eps)?;
    let ab = sched.alpha_bar(t);
    Ok((xt - &(eps * (1.0 - ab).sqrt())) / ab.sqrt())
}

/// Reverse-step mean from a noise prediction:
/// `(xt - (1-alpha_t)/sqrt(1-abar_t) eps) / sqrt(alpha_t)`.
pub fn mu_from_eps(xt: &Point, t: usize, eps: &Point, sched: &NoiseSchedule) -> Result<Point> {
    check_t(t, sched)?;
    check_dims(xt, eps)?;
    let coef = (1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok((xt - &(eps * coef)) / sched.alpha(t).sqrt())
}

/// Score of the noised marginal implied by a noise prediction:
/// `-eps / sqrt(1-abar_t)`.
pub fn score_from_eps(eps: &Point, t: usize, sched: &NoiseSchedule) -> Result<Point> {
    check_t(t, sched)?;
    let one_minus = 1.0 - sched.alpha_bar(t);
    if one_minus <= 0.0 {
        return Err(Error::invalid(
            "score is undefined where alpha_bar reaches 1",
        ));
    }
    Ok(eps * (-1.0 / one_minus.sqrt()))
}

/// Learned-variance interpolation `exp(v log beta_t + (1-v) log beta_tilde_t)`
/// per dimension. `v` outside [0, 1] extrapolates. At `t == 0` the substituted
/// posterior variance keeps the logarithm finite.
pub fn sigma_from_v(v: &Array1<f64>, t: usize, sched: &NoiseSchedule) -> Result<Array1<f64>> {
    check_t(t, sched)?;
    let log_beta = sched.beta(t).ln();
    let log_beta_tilde = sched.beta_tilde_clipped(t).ln();
    Ok(v.mapv(|vi| (vi * log_beta + (1.0 - vi) * log_beta_tilde).exp()))
}

/// KL divergence between diagonal Gaussians, in nats, summed over dimensions.
pub fn gaussian_kl(
    mean1: &Array1<f64>,
    var1: &Array1<f64>,
    mean2: &Array1<f64>,
    var2: &Array1<f64>,
) -> Result<f64> {
    if var1.iter().chain(var2.iter()).any(|&v| v <= 0.0) {
        return Err(Error::invalid("gaussian_kl needs positive variances"));
    }
    let mut total = 0.0;
    for i in 0..mean1.len() {
        let dm = mean1[i] - mean2[i];
        total += 0.5 * ((var2[i] / var1[i]).ln() + (var1[i] + dm * dm) / var2[i] - 1.0);
    }
    Ok(total)
}

/// Log-density of a diagonal Gaussian, summed over dimensions.
pub fn gaussian_log_density(x: &Array1<f64>, mean: &Array1<f64>, var: &Array1<f64>) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    let mut total = 0.0;
    for i in 0..x.len() {
        let d = x[i] - mean[i];
        total += -0.5 * (LN_2PI + var[i].ln() + d * d / var[i]);
    }
    total
}

/// One term of the variational bound, in nats.
///
/// `t` is the 0-based index of the reverse transition: `t == 0` yields the
/// decoder term `-log p(x0 | x1)` evaluated as a continuous Gaussian density,
/// `1 <= t < T` the KL between the forward posterior and the model's reverse
/// Gaussian, and `t == T` the prior term `KL(q(x_T | x0) || N(0, I))` (which
/// ignores the model arguments).
pub fn vlb_term(
    x0: &Point,
    xt: &Point,
    t: usize,
    model_mean: &Point,
    model_var: &Array1<f64>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let t_max = sched.num_steps();
    if t > t_max {
        return Err(Error::invalid(format!(
            "vlb term index {t} out of range for T = {t_max}"
        )));
    }
    if t == t_max {
        let ab = sched.alpha_bar(t_max - 1);
        let mean = x0 * ab.sqrt();
        let var = Array1::from_elem(x0.len(), 1.0 - ab);
        let zero = Array1::zeros(x0.len());
        let one = Array1::ones(x0.len());
        return gaussian_kl(&mean, &var, &zero, &one);
    }
    if t == 0 {
        return Ok(-gaussian_log_density(x0, model_mean, model_var));
    }
    let post = q_posterior(x0, xt, t, sched)?;
    gaussian_kl(&post.mean, &post.var, model_mean, model_var)
}
