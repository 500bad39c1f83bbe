//! Noisy classifiers `p(y | x_t, t)`: the exact Bayes posterior for mixture
//! data, the trainable MLP classifier, and gradient scaling for guidance.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::models::{Mlp, MlpConfig};
use crate::process::Point;
use crate::schedules::NoiseSchedule;

/// Posterior and guidance gradient for one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyClassifierOutput {
    /// Log probabilities over all classes; logsumexp is zero.
    pub log_probs: Array1<f64>,
    /// `grad_{x_t} log p(y | x_t)` for the queried class.
    pub grad_log_prob_selected: Point,
}

/// A classifier over noised inputs, differentiable in its input.
pub trait NoisyClassifier: Sync {
    fn num_classes(&self) -> usize;

    /// Log posterior rows for a batch, all at the same schedule position.
    fn log_probs_batch(
        &self,
        xs: &ArrayView2<f64>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Array2<f64>>;

    /// `grad_{x} log p(y_i | x_i)` rows for a batch.
    fn grad_log_prob_batch(
        &self,
        xs: &ArrayView2<f64>,
        t: usize,
        sched: &NoiseSchedule,
        classes: &[usize],
    ) -> Result<Array2<f64>>;

    fn classify(
        &self,
        x: &ArrayView1<f64>,
        t: usize,
        sched: &NoiseSchedule,
        class: usize,
    ) -> Result<NoisyClassifierOutput> {
        if class >= self.num_classes() {
            return Err(Error::invalid(format!(
                "class {class} out of range ({} classes)",
                self.num_classes()
            )));
        }
        let xs = x
            .to_owned()
            .into_shape_with_order((1, x.len()))
            .expect("row reshape");
        let lp = self.log_probs_batch(&xs.view(), t, sched)?;
        let g = self.grad_log_prob_batch(&xs.view(), t, sched, &[class])?;
        Ok(NoisyClassifierOutput {
            log_probs: lp.row(0).to_owned(),
            grad_log_prob_selected: g.row(0).to_owned(),
        })
    }
}

/// Classifier-gradient scaling: returns `s * g`. Sharpening the classifier
/// to `p(y|x)^s` shifts its log-gradient by exactly this factor.
pub fn scale_gradient(g: &ArrayView1<f64>, scale: f64) -> Point {
    g.mapv(|x| scale * x)
}

/// Exact class posterior under the noised mixture:
/// `p(y | x_t) ∝ pi_y N(x_t; sqrt(abar) mu_y, abar sigma_y^2 + 1 - abar)`.
///
/// Consumes only `x_t`: the posterior of the conditional noising process
/// does not depend on the noisier `x_{t+1}`.
#[derive(Debug, Clone)]
pub struct AnalyticClassifier {
    mixture: GaussianMixture,
}

impl AnalyticClassifier {
    pub fn new(mixture: GaussianMixture) -> Self {
        Self { mixture }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl NoisyClassifier for AnalyticClassifier {
    fn num_classes(&self) -> usize {
        self.mixture.num_classes()
    }

    fn log_probs_batch(
        &self,
        xs: &ArrayView2<f64>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Array2<f64>> {
        crate::process::check_t(t, sched)?;
        let noised = self.mixture.noised(sched.alpha_bar(t));
        let mut out = Array2::zeros((xs.nrows(), self.num_classes()));
        for (i, row) in xs.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&noised.class_log_probs(&row));
        }
        Ok(out)
    }

    fn grad_log_prob_batch(
        &self,
        xs: &ArrayView2<f64>,
        t: usize,
        sched: &NoiseSchedule,
        classes: &[usize],
    ) -> Result<Array2<f64>> {
        crate::process::check_t(t, sched)?;
        if classes.len() != xs.nrows() {
            return Err(Error::invalid("class labels must match batch size"));
        }
        if let Some(&y) = classes.iter().find(|&&y| y >= self.num_classes()) {
            return Err(Error::invalid(format!("class {y} out of range")));
        }
        let noised = self.mixture.noised(sched.alpha_bar(t));
        let mut out = Array2::zeros(xs.raw_dim());
        for (i, row) in xs.rows().into_iter().enumerate() {
            out.row_mut(i)
                .assign(&noised.class_log_prob_grad(&row, classes[i]));
        }
        Ok(out)
    }
}

/// Spec of a trainable classifier, as written in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub group_size: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self { hidden: vec![128, 128, 128], embedding_dim: 64, group_size: 32 }
    }
}

impl ClassifierSpec {
    pub fn mlp_config(&self, data_dim: usize, num_classes: usize) -> MlpConfig {
        MlpConfig {
            input_dim: data_dim,
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding_dim,
            group_size: self.group_size,
            output_dim: num_classes,
            class_conditioning: None,
        }
    }
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// The trainable noisy classifier: the same modulated-MLP trunk as the
/// denoiser with a K-way log-softmax head.
#[derive(Debug, Clone)]
pub struct MlpClassifier {
    mlp: Mlp,
    num_classes: usize,
}

impl MlpClassifier {
    pub fn new(
        spec: &ClassifierSpec,
        data_dim: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        let mlp = Mlp::random(spec.mlp_config(data_dim, num_classes), rng)?;
        Ok(Self { mlp, num_classes })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.config().class_conditioning.is_some() {
            return Err(Error::invalid("classifier trunk cannot be class-conditioned"));
        }
        let num_classes = mlp.config().output_dim;
        Ok(Self { mlp, num_classes })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    /// Log-softmax outputs with per-sample model timesteps, for training.
    pub fn forward_raw(
        &self,
        xs: &ArrayView2<f64>,
        ts: &[usize],
    ) -> Result<(Array2<f64>, crate::models::ForwardCache)> {
        let (logits, cache) = self.mlp.forward(xs, ts, None)?;
        Ok((log_softmax(&logits), cache))
    }
}

impl NoisyClassifier for MlpClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn log_probs_batch(
        &self,
        xs: &ArrayView2<f64>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Array2<f64>> {
        crate::process::check_t(t, sched)?;
        let ts = vec![sched.model_timestep(t); xs.nrows()];
        let (logits, _) = self.mlp.forward(xs, &ts, None)?;
        Ok(log_softmax(&logits))
    }

    fn grad_log_prob_batch(
        &self,
        xs: &ArrayView2<f64>,
        t: usize,
        sched: &NoiseSchedule,
        classes: &[usize],
    ) -> Result<Array2<f64>> {
        crate::process::check_t(t, sched)?;
        if classes.len() != xs.nrows() {
            return Err(Error::invalid("class labels must match batch size"));
        }
        if let Some(&y) = classes.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::invalid(format!("class {y} out of range")));
        }
        let ts = vec![sched.model_timestep(t); xs.nrows()];
        let (logits, cache) = self.mlp.forward(xs, &ts, None)?;
        // d log p(y|x) / d logits = onehot(y) - softmax(logits)
        let mut d_out = log_softmax(&logits);
        d_out.mapv_inplace(|lp| -lp.exp());
        for (i, &y) in classes.iter().enumerate() {
            d_out[(i, y)] += 1.0;
        }
        Ok(self.mlp.backward(&cache, &d_out.view(), false)?.input)
    }
}

/// Mean probability-gap between two classifiers on a grid of evaluation
/// points spanning the data range and the timestep range. Used to measure
/// how closely a trained classifier tracks the analytic posterior.
pub fn mean_probability_gap(
    a: &dyn NoisyClassifier,
    b: &dyn NoisyClassifier,
    grid: &ArrayView2<f64>,
    timesteps: &[usize],
    sched: &NoiseSchedule,
) -> Result<f64> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::invalid("classifiers disagree on class count"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for &t in timesteps {
        let pa = a.log_probs_batch(grid, t, sched)?;
        let pb = b.log_probs_batch(grid, t, sched)?;
        for (ra, rb) in pa.rows().into_iter().zip(pb.rows()) {
            for (la, lb) in ra.iter().zip(rb.iter()) {
                total += (la.exp() - lb.exp()).abs();
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Rectangular evaluation grid covering `[lo, hi]^d` with `per_axis` points
/// per axis (d must be 1 or 2 at desk scale).
pub fn evaluation_grid(dim: usize, lo: f64, hi: f64, per_axis: usize) -> Result<Array2<f64>> {
    let axis = |i: usize| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64;
    match dim {
        1 => Ok(Array2::from_shape_fn((per_axis, 1), |(i, _)| axis(i))),
        2 => {
            let mut g = Array2::zeros((per_axis * per_axis, 2));
            for i in 0..per_axis {
                for j in 0..per_axis {
                    g[(i * per_axis + j, 0)] = axis(i);
                    g[(i * per_axis + j, 1)] = axis(j);
                }
            }
            Ok(g)
        }
        _ => Err(Error::invalid("evaluation grids support d = 1 or 2")),
    }
}
