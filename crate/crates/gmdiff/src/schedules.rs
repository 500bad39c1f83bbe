//! Noise schedules: construction, derived per-step quantities, and respacing.
//!
//! Timesteps are stored 0-indexed: index `t` holds the quantities for math
//! step `t+1` of a `T`-step chain. The cumulative product before the first
//! step is defined as 1, so `beta_tilde(0) == 0` exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All per-timestep quantities derived from a beta schedule.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    alpha_bar_prev: Vec<f64>,
    beta_tildes: Vec<f64>,
    /// Original-chain indices, present iff this schedule was respaced.
    source_timesteps: Option<Vec<usize>>,
}

impl NoiseSchedule {
    /// Build a schedule from raw per-step variances.
    ///
    /// Every beta must lie strictly inside (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!(
                    "beta[{i}] = {b} is outside (0, 1)"
                )));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let mut alpha_bar_prev = Vec::with_capacity(betas.len());
        alpha_bar_prev.push(1.0);
        alpha_bar_prev.extend_from_slice(&alpha_bars[..alpha_bars.len() - 1]);
        let beta_tildes: Vec<f64> = (0..betas.len())
            .map(|t| (1.0 - alpha_bar_prev[t]) / (1.0 - alpha_bars[t]) * betas[t])
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            alpha_bar_prev,
            beta_tildes,
            source_timesteps: None,
        })
    }

    /// Linear schedule: betas interpolated from `1e-4 * 1000/T` to
    /// `0.02 * 1000/T`. The scaling keeps total noise comparable across
    /// chain lengths; it also means `T < 21` would push the endpoint past 1
    /// and is rejected.
    pub fn linear(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("num_steps must be >= 1"));
        }
        let scale = 1000.0 / num_steps as f64;
        let start = 1e-4 * scale;
        let end = 0.02 * scale;
        let betas = if num_steps == 1 {
            vec![start]
        } else {
            (0..num_steps)
                .map(|i| start + (end - start) * i as f64 / (num_steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Squared-cosine schedule with offset `s = 0.008` and betas clipped
    /// at 0.999.
    pub fn cosine(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("num_steps must be >= 1"));
        }
        const S: f64 = 0.008;
        let f = |t: f64| {
            let u = (t / num_steps as f64 + S) / (1.0 + S);
            (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(num_steps);
        let mut prev = 1.0;
        for t in 1..=num_steps {
            let ab = f(t as f64) / f0;
            betas.push((1.0 - ab / prev).min(0.999));
            prev = ab;
        }
        Self::from_betas(betas)
    }

    /// Restrict the chain to `timesteps` (strictly ascending indices into
    /// this schedule), rebuilding betas so the kept-step marginals are
    /// preserved: `beta'_i = 1 - abar[s_i] / abar[s_{i-1}]`.
    ///
    /// The kept cumulative products are carried over bit-for-bit rather than
    /// re-derived from the new betas, so samplers see exactly the base
    /// marginals (re-deriving would cancel catastrophically for sparse keeps
    /// deep in the chain).
    pub fn respace(&self, timesteps: &[usize]) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::invalid("respacing needs at least one timestep"));
        }
        let mut prev_idx = None;
        for &s in timesteps {
            if s >= self.num_steps() {
                return Err(Error::invalid(format!(
                    "timestep {s} out of range for T = {}",
                    self.num_steps()
                )));
            }
            if let Some(p) = prev_idx {
                if s <= p {
                    return Err(Error::invalid("timesteps must be strictly ascending"));
                }
            }
            prev_idx = Some(s);
        }
        let alpha_bars: Vec<f64> = timesteps.iter().map(|&s| self.alpha_bars[s]).collect();
        let mut alpha_bar_prev = Vec::with_capacity(timesteps.len());
        alpha_bar_prev.push(1.0);
        alpha_bar_prev.extend_from_slice(&alpha_bars[..alpha_bars.len() - 1]);
        let alphas: Vec<f64> = (0..alpha_bars.len())
            .map(|i| alpha_bars[i] / alpha_bar_prev[i])
            .collect();
        let betas: Vec<f64> = alphas.iter().map(|a| 1.0 - a).collect();
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!(
                    "respaced beta[{i}] = {b} is outside (0, 1)"
                )));
            }
        }
        let beta_tildes: Vec<f64> = (0..betas.len())
            .map(|t| (1.0 - alpha_bar_prev[t]) / (1.0 - alpha_bars[t]) * betas[t])
            .collect();
        let source_timesteps = Some(match &self.source_timesteps {
            Some(src) => timesteps.iter().map(|&s| src[s]).collect(),
            None => timesteps.to_vec(),
        });
        Ok(Self { betas, alphas, alpha_bars, alpha_bar_prev, beta_tildes, source_timesteps })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Cumulative product one step earlier, with the convention
    /// `alpha_bar_prev(0) == 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        self.alpha_bar_prev[t]
    }

    /// Posterior variance of the forward process. Zero at `t == 0`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tildes[t]
    }

    /// Posterior variance with the first entry substituted by the second,
    /// so its logarithm is finite. Used by the learned-variance
    /// interpolation and the VLB terms.
    pub fn beta_tilde_clipped(&self, t: usize) -> f64 {
        if t == 0 {
            if self.beta_tildes.len() > 1 {
                self.beta_tildes[1]
            } else {
                // One-step chain has no second entry to substitute.
                self.betas[0]
            }
        } else {
            self.beta_tildes[t]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn source_timesteps(&self) -> Option<&[usize]> {
        self.source_timesteps.as_deref()
    }

    /// Timestep fed to a trained model at local index `t`: the original-chain
    /// index when this schedule is a respacing, otherwise `t` itself.
    pub fn model_timestep(&self, t: usize) -> usize {
        match &self.source_timesteps {
            Some(src) => src[t],
            None => t,
        }
    }
}

/// Schedule family named in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Linear,
    Cosine,
}

/// Schedule spec as it appears in config files:
/// `{ family = "linear", steps = 1000 }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub family: ScheduleFamily,
    pub steps: usize,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.family {
            ScheduleFamily::Linear => NoiseSchedule::linear(self.steps),
            ScheduleFamily::Cosine => NoiseSchedule::cosine(self.steps),
        }
    }
}

/// Step budget split over the five fifths of the original chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSchedule {
    pub counts: [usize; 5],
}

impl SegmentSchedule {
    pub fn new(counts: [usize; 5]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Expand into original-chain timesteps. Within each fifth the allocated
    /// count is placed at a floor-of-uniform stride, always starting at the
    /// segment's first index. Output is ascending with no duplicates.
    pub fn to_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        if num_steps == 0 || num_steps % 5 != 0 {
            return Err(Error::invalid(format!(
                "segment schedules need T divisible by 5, got {num_steps}"
            )));
        }
        let width = num_steps / 5;
        let mut out = Vec::with_capacity(self.total());
        for (seg, &count) in self.counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            if count > width {
                return Err(Error::invalid(format!(
                    "segment {seg} allocates {count} steps but is only {width} wide"
                )));
            }
            let stride = width / count;
            let start = seg * width;
            out.extend((0..count).map(|k| start + k * stride));
        }
        if out.is_empty() {
            return Err(Error::invalid("segment schedule allocates zero steps"));
        }
        Ok(out)
    }
}

impl std::str::FromStr for SegmentSchedule {
    type Err = Error;

    /// Parse the `a,b,c,d,e` form used on the command line.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::invalid(format!(
                "expected five comma-separated counts, got {}",
                parts.len()
            )));
        }
        let mut counts = [0usize; 5];
        for (i, p) in parts.iter().enumerate() {
            counts[i] = p
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("segment count {:?}: {e}", p)))?;
        }
        Ok(Self { counts })
    }
}

/// Uniform selection of `count` timesteps out of `num_steps`, at a floor
/// stride starting from index 0. Matches the segment expansion rule, so a
/// uniform segment allocation expands to exactly this selection.
pub fn uniform_timesteps(num_steps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::invalid("respacing count must be >= 1"));
    }
    if count > num_steps {
        return Err(Error::invalid(format!(
            "cannot keep {count} of {num_steps} timesteps"
        )));
    }
    let stride = num_steps / count;
    Ok((0..count).map(|k| k * stride).collect())
}

/// Respacing spec as it appears in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RespacingSpec {
    /// Keep the full chain.
    #[default]
    Full,
    Uniform {
        count: usize,
    },
    Segments {
        counts: [usize; 5],
    },
}

impl RespacingSpec {
    /// Apply to a base schedule, returning the (possibly identical) sampling
    /// schedule.
    pub fn apply(&self, base: &NoiseSchedule) -> Result<NoiseSchedule> {
        match self {
            RespacingSpec::Full => Ok(base.clone()),
            RespacingSpec::Uniform { count } => {
                base.respace(&uniform_timesteps(base.num_steps(), *count)?)
            }
            RespacingSpec::Segments { counts } => {
                base.respace(&SegmentSchedule::new(*counts).to_timesteps(base.num_steps())?)
            }
        }
    }
}
