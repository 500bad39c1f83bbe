//! Labeled Gaussian mixtures: the data distribution and, because the forward
//! process maps Gaussians to Gaussians, every oracle the engine is checked
//! against — noised marginals, exact noise predictions, and exact class
//! posteriors at any noise level.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::Point;
use crate::schedules::NoiseSchedule;

/// Mixture of diagonal Gaussians with component weights acting as class
/// priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Array1<f64>>,
    variances: Vec<Array1<f64>>,
}

/// Serialized form: one `[[component]]` table per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureSpec {
    component: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentSpec {
    weight: f64,
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        GaussianMixture::new(
            spec.component.iter().map(|c| c.weight).collect(),
            spec.component
                .iter()
                .map(|c| Array1::from_vec(c.mean.clone()))
                .collect(),
            spec.component
                .iter()
                .map(|c| Array1::from_vec(c.variance.clone()))
                .collect(),
        )
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(m: GaussianMixture) -> Self {
        MixtureSpec {
            component: (0..m.num_classes())
                .map(|k| ComponentSpec {
                    weight: m.weights[k],
                    mean: m.means[k].to_vec(),
                    variance: m.variances[k].to_vec(),
                })
                .collect(),
        }
    }
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Array1<f64>>,
        variances: Vec<Array1<f64>>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(Error::invalid("mixture needs matching weights/means/variances"));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::invalid("mixture dimension must be >= 1"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
        }
        for (k, w) in weights.iter().enumerate() {
            if !(*w > 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("weight[{k}] must be positive")));
            }
            if means[k].len() != d || variances[k].len() != d {
                return Err(Error::invalid("mixture components disagree on dimension"));
            }
            if means[k].iter().any(|m| !m.is_finite()) {
                return Err(Error::invalid(format!("mean[{k}] must be finite")));
            }
            if variances[k].iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::invalid(format!("variance[{k}] must be positive")));
            }
        }
        Ok(Self { weights, means, variances })
    }

    /// The in-repo benchmark dataset: four equally weighted components in 2D
    /// at (+-2, +-2) with per-dimension variance 0.3. Classes overlap enough
    /// that guidance visibly trades recall for precision.
    pub fn benchmark() -> Self {
        let m = |x: f64, y: f64| ndarray::array![x, y];
        Self::new(
            vec![0.25; 4],
            vec![m(2.0, 2.0), m(2.0, -2.0), m(-2.0, 2.0), m(-2.0, -2.0)],
            vec![ndarray::Array1::from_elem(2, 0.3); 4],
        )
        .expect("benchmark mixture is valid")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &Array1<f64> {
        &self.means[k]
    }

    pub fn variance(&self, k: usize) -> &Array1<f64> {
        &self.variances[k]
    }

    /// Draw one labeled sample.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Point, usize) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut class = self.num_classes() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                class = k;
                break;
            }
        }
        let x = Array1::from_iter((0..self.dim()).map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            self.means[class][i] + self.variances[class][i].sqrt() * z
        }));
        (x, class)
    }

    /// Draw `n` labeled samples as rows of a matrix.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, n: usize) -> (Array2<f64>, Vec<usize>) {
        let mut xs = Array2::zeros((n, self.dim()));
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = self.sample(rng);
            xs.row_mut(i).assign(&x);
            ys.push(y);
        }
        (xs, ys)
    }

    /// Component parameters after noising to signal level `alpha_bar`:
    /// each Gaussian stays Gaussian with mean `sqrt(abar) mu` and variance
    /// `abar sigma^2 + (1 - abar)`.
    pub fn noised(&self, alpha_bar: f64) -> NoisedMixture {
        let d = self.dim();
        let sq = alpha_bar.sqrt();
        let means: Vec<Array1<f64>> = self.means.iter().map(|m| m * sq).collect();
        let vars: Vec<Array1<f64>> = self
            .variances
            .iter()
            .map(|v| v.mapv(|s| alpha_bar * s + (1.0 - alpha_bar)))
            .collect();
        let log_norms: Vec<f64> = (0..self.num_classes())
            .map(|k| {
                let ln_det: f64 = vars[k].iter().map(|v| (2.0 * std::f64::consts::PI * v).ln()).sum();
                self.weights[k].ln() - 0.5 * ln_det
            })
            .collect();
        NoisedMixture { dim: d, means, vars, log_norms }
    }

    /// Exact class posterior on clean data (the `t = 0` classifier analog).
    pub fn clean_class_log_probs(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        self.noised(1.0).class_log_probs(x)
    }
}

/// A mixture evaluated at a fixed noise level; precomputes the per-component
/// constants so batch queries stay cheap.
pub struct NoisedMixture {
    dim: usize,
    means: Vec<Array1<f64>>,
    vars: Vec<Array1<f64>>,
    log_norms: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

impl NoisedMixture {
    /// Per-component log joint `ln pi_k + ln N(x; m_k, v_k)`.
    fn log_joints(&self, x: &ArrayView1<f64>) -> Vec<f64> {
        (0..self.means.len())
            .map(|k| {
                let mut quad = 0.0;
                for i in 0..self.dim {
                    let d = x[i] - self.means[k][i];
                    quad += d * d / self.vars[k][i];
                }
                self.log_norms[k] - 0.5 * quad
            })
            .collect()
    }

    /// Marginal log-density of the noised mixture.
    pub fn log_density(&self, x: &ArrayView1<f64>) -> f64 {
        log_sum_exp(&self.log_joints(x))
    }

    /// Score of the noised marginal, in closed form via responsibilities.
    pub fn score(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        let lj = self.log_joints(x);
        let lse = log_sum_exp(&lj);
        let mut out = Array1::zeros(self.dim);
        for k in 0..self.means.len() {
            let r = (lj[k] - lse).exp();
            for i in 0..self.dim {
                out[i] -= r * (x[i] - self.means[k][i]) / self.vars[k][i];
            }
        }
        out
    }

    /// Log class posterior over all components.
    pub fn class_log_probs(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        let lj = self.log_joints(x);
        let lse = log_sum_exp(&lj);
        Array1::from_iter(lj.iter().map(|l| l - lse))
    }

    /// Gradient of `log p(y | x)` with respect to `x`.
    pub fn class_log_prob_grad(&self, x: &ArrayView1<f64>, y: usize) -> Array1<f64> {
        let score = self.score(x);
        let mut out = Array1::zeros(self.dim);
        for i in 0..self.dim {
            out[i] = -(x[i] - self.means[y][i]) / self.vars[y][i] - score[i];
        }
        out
    }
}

/// Marginal log-density of the mixture noised to step `t`.
pub fn analytic_marginal_log_density(
    mix: &GaussianMixture,
    xt: &ArrayView1<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<f64> {
    crate::process::check_t(t, sched)?;
    Ok(mix.noised(sched.alpha_bar(t)).log_density(xt))
}
