//! Denoisers: the exact analytic oracle for mixture data and the trainable
//! conditioned MLP with an optional learned-variance head.

mod adagn;
mod embedding;
mod mlp;

pub use adagn::{adagn, VAR_FLOOR};
pub use embedding::timestep_embedding;
pub use mlp::{ForwardCache, Gradients, Mlp, MlpConfig, ParamEntry, ParamLayout};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::process::Point;
use crate::schedules::NoiseSchedule;

/// A denoiser's prediction for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps: Point,
    /// Variance-interpolation output, present iff the model has a variance
    /// head.
    pub v: Option<Array1<f64>>,
}

/// Batched predictions, one row per input point.
#[derive(Debug, Clone)]
pub struct BatchDenoiserOutput {
    pub eps: Array2<f64>,
    pub v: Option<Array2<f64>>,
}

/// Anything that predicts the noise component of `x_t`.
///
/// `t` is an index into `sched`, which may be a respaced chain; trained
/// models are fed the original-chain timestep recorded there.
pub trait Denoiser: Sync {
    fn data_dim(&self) -> usize;

    fn is_conditional(&self) -> bool {
        false
    }

    fn has_variance_head(&self) -> bool {
        false
    }

    /// Predict for a batch of rows, all at the same schedule position.
    fn predict_batch(
        &self,
        xs: &ArrayView2<f64>,
        t: usize,
        sched: &NoiseSchedule,
        classes: Option<&[usize]>,
    ) -> Result<BatchDenoiserOutput>;

    fn predict(
        &self,
        x: &ArrayView1<f64>,
        t: usize,
        sched: &NoiseSchedule,
        class: Option<usize>,
    ) -> Result<DenoiserOutput> {
        let xs = x
            .to_owned()
            .into_shape_with_order((1, x.len()))
            .expect("row reshape");
        let ys = class.map(|c| vec![c]);
        let out = self.predict_batch(&xs.view(), t, sched, ys.as_deref())?;
        Ok(DenoiserOutput {
            eps: out.eps.row(0).to_owned(),
            v: out.v.map(|v| v.row(0).to_owned()),
        })
    }
}

/// Exact noise prediction for Gaussian-mixture data:
/// `eps*(x_t) = -sqrt(1 - abar_t) * grad log q_t(x_t)`, with the score in
/// closed form. Pairs with the fixed reverse variances (no variance head).
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    mixture: GaussianMixture,
}

impl AnalyticDenoiser {
    pub fn new(mixture: GaussianMixture) -> Self {
        Self { mixture }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl Denoiser for AnalyticDenoiser {
    fn data_dim(&self) -> usize {
        self.mixture.dim()
    }

    fn predict_batch(
        &self,
        xs: &ArrayView2<f64>,
        t: usize,
        sched: &NoiseSchedule,
        classes: Option<&[usize]>,
    ) -> Result<BatchDenoiserOutput> {
        if classes.is_some() {
            return Err(Error::invalid("the analytic denoiser is unconditional"));
        }
        crate::process::check_t(t, sched)?;
        let ab = sched.alpha_bar(t);
        let noised = self.mixture.noised(ab);
        let scale = -(1.0 - ab).sqrt();
        let mut eps = Array2::zeros(xs.raw_dim());
        for (i, row) in xs.rows().into_iter().enumerate() {
            let score = noised.score(&row);
            eps.row_mut(i).assign(&(score * scale));
        }
        Ok(BatchDenoiserOutput { eps, v: None })
    }
}

/// Exact analytic noise prediction for one point (the closed-form oracle).
pub fn analytic_eps(
    mixture: &GaussianMixture,
    xt: &ArrayView1<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<DenoiserOutput> {
    AnalyticDenoiser::new(mixture.clone()).predict(xt, t, sched, None)
}

/// Spec of a trainable denoiser, as written in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSpec {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub group_size: usize,
    /// Class-conditional models add a learned class embedding.
    pub conditional: bool,
    /// Adds the variance-interpolation head (required by the hybrid loss).
    pub learned_variance: bool,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            embedding_dim: 64,
            group_size: 32,
            conditional: false,
            learned_variance: true,
        }
    }
}

impl DenoiserSpec {
    pub fn mlp_config(&self, data_dim: usize, num_classes: usize) -> MlpConfig {
        MlpConfig {
            input_dim: data_dim,
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding_dim,
            group_size: self.group_size,
            output_dim: if self.learned_variance { 2 * data_dim } else { data_dim },
            class_conditioning: self.conditional.then_some(num_classes),
        }
    }
}

/// The trainable denoiser: an embedding-modulated MLP whose head emits the
/// noise prediction and, optionally, the per-dimension variance interpolant.
#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    mlp: Mlp,
    data_dim: usize,
    learned_variance: bool,
}

impl MlpDenoiser {
    pub fn new(spec: &DenoiserSpec, data_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mlp = Mlp::random(spec.mlp_config(data_dim, num_classes), rng)?;
        Ok(Self { mlp, data_dim, learned_variance: spec.learned_variance })
    }

    pub fn from_mlp(mlp: Mlp, data_dim: usize, learned_variance: bool) -> Result<Self> {
        let expected = if learned_variance { 2 * data_dim } else { data_dim };
        if mlp.config().input_dim != data_dim || mlp.config().output_dim != expected {
            return Err(Error::invalid("mlp shape does not match denoiser spec"));
        }
        Ok(Self { mlp, data_dim, learned_variance })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn learned_variance(&self) -> bool {
        self.learned_variance
    }

    /// Raw forward with per-sample model timesteps, for training.
    pub fn forward_raw(
        &self,
        xs: &ArrayView2<f64>,
        ts: &[usize],
        classes: Option<&[usize]>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.mlp.forward(xs, ts, classes)
    }

    /// Split raw head outputs into (eps, v).
    pub fn split_output(&self, out: &Array2<f64>) -> BatchDenoiserOutput {
        let d = self.data_dim;
        if self.learned_variance {
            BatchDenoiserOutput {
                eps: out.slice(ndarray::s![.., ..d]).to_owned(),
                v: Some(out.slice(ndarray::s![.., d..]).to_owned()),
            }
        } else {
            BatchDenoiserOutput { eps: out.to_owned(), v: None }
        }
    }
}

impl Denoiser for MlpDenoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn is_conditional(&self) -> bool {
        self.mlp.config().class_conditioning.is_some()
    }

    fn has_variance_head(&self) -> bool {
        self.learned_variance
    }

    fn predict_batch(
        &self,
        xs: &ArrayView2<f64>,
        t: usize,
        sched: &NoiseSchedule,
        classes: Option<&[usize]>,
    ) -> Result<BatchDenoiserOutput> {
        crate::process::check_t(t, sched)?;
        let ts = vec![sched.model_timestep(t); xs.nrows()];
        let (out, _) = self.mlp.forward(xs, &ts, classes)?;
        Ok(self.split_output(&out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn analytic_eps_single_standard_gaussian() {
        // With a standard normal component and abar = 0.5 the noised marginal
        // is standard normal, so eps* = sqrt(0.5) * x.
        let mix = GaussianMixture::new(vec![1.0], vec![array![0.0]], vec![array![1.0]]).unwrap();
        // A two-step schedule with abar(1) = 0.5: beta = (0.25, 1/3).
        let sched = NoiseSchedule::from_betas(vec![0.25, 1.0 / 3.0]).unwrap();
        assert_relative_eq!(sched.alpha_bar(1), 0.5, max_relative = 1e-12);
        for &x in &[-2.0, -0.3, 0.0, 1.7] {
            let out = analytic_eps(&mix, &array![x].view(), 1, &sched).unwrap();
            assert_relative_eq!(out.eps[0], 0.5f64.sqrt() * x, max_relative = 1e-12);
            assert!(out.v.is_none());
        }
    }

    #[test]
    fn analytic_eps_vanishes_at_symmetry_point() {
        let mix = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![array![-1.0], array![1.0]],
            vec![array![0.4], array![0.4]],
        )
        .unwrap();
        let sched = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let out = analytic_eps(&mix, &array![0.0].view(), 1, &sched).unwrap();
        assert_relative_eq!(out.eps[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn analytic_eps_matches_finite_difference_of_log_density() {
        let mix = GaussianMixture::benchmark();
        let sched = NoiseSchedule::linear(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for _ in 0..100 {
            let t = rand::Rng::gen_range(&mut rng, 0..100usize);
            let x = array![
                rand::Rng::gen_range(&mut rng, -3.0..3.0),
                rand::Rng::gen_range(&mut rng, -3.0..3.0)
            ];
            let eps = analytic_eps(&mix, &x.view(), t, &sched).unwrap().eps;
            let noised = mix.noised(sched.alpha_bar(t));
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (noised.log_density(&xp.view()) - noised.log_density(&xm.view()))
                    / (2.0 * h);
                let expect = -(1.0 - sched.alpha_bar(t)).sqrt() * fd;
                assert_relative_eq!(eps[i], expect, max_relative = 1e-4, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn mlp_denoiser_splits_eps_and_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = DenoiserSpec {
            hidden: vec![8, 8],
            embedding_dim: 8,
            group_size: 4,
            conditional: true,
            learned_variance: true,
        };
        let model = MlpDenoiser::new(&spec, 2, 3, &mut rng).unwrap();
        assert!(model.has_variance_head());
        assert!(model.is_conditional());
        let sched = NoiseSchedule::linear(100).unwrap();
        let out = model
            .predict(&array![0.1, -0.2].view(), 5, &sched, Some(1))
            .unwrap();
        assert_eq!(out.eps.len(), 2);
        assert_eq!(out.v.as_ref().unwrap().len(), 2);
        // Missing label is an error for a conditional model.
        assert!(model.predict(&array![0.1, -0.2].view(), 5, &sched, None).is_err());
    }

    #[test]
    fn respaced_schedule_feeds_source_timesteps() {
        // A model evaluated through a respaced schedule must see the original
        // chain's timestep; equality with the base-schedule call checks that.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = DenoiserSpec {
            hidden: vec![8],
            embedding_dim: 8,
            group_size: 4,
            conditional: false,
            learned_variance: false,
        };
        let model = MlpDenoiser::new(&spec, 1, 0, &mut rng).unwrap();
        let base = NoiseSchedule::linear(100).unwrap();
        let sub = base.respace(&[0, 30, 60, 90]).unwrap();
        let x = array![0.37];
        let via_sub = model.predict(&x.view(), 2, &sub, None).unwrap();
        let via_base = model.predict(&x.view(), 60, &base, None).unwrap();
        assert_eq!(via_sub.eps, via_base.eps);
    }
}
