//! Desk-scale sample-quality metrics: Fréchet distance between Gaussian
//! fits in raw coordinates, k-NN-manifold precision/recall, and a
//! classifier-based class-fidelity score, plus the guidance-scale sweep.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifiers::NoisyClassifier;
use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::models::Denoiser;
use crate::samplers::{sample, SamplerConfig};
use crate::schedules::NoiseSchedule;

/// All metrics for one sample batch against one reference batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub class_fidelity: f64,
    pub sample_count: usize,
    pub reference_count: usize,
    /// Set when a covariance was rank-deficient beyond the eigenvalue clamp.
    pub degenerate_covariance: bool,
}

/// Metric knobs shared by eval and sweep runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Neighbor count for the manifold radii.
    pub k: usize,
    /// Size of the fresh seeded reference draw.
    pub ref_count: usize,
    pub ref_seed: u64,
    /// Optional fixed random projection applied before the Fréchet fit
    /// (exercises the matrix square root on non-trivial covariances).
    pub projection_dim: Option<usize>,
    pub projection_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { k: 3, ref_count: 10_000, ref_seed: 0, projection_dim: None, projection_seed: 0 }
    }
}

fn mean_and_cov(points: &ArrayView2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let (n, d) = points.dim();
    let mut mean = Array1::zeros(d);
    for row in points.rows() {
        mean += &row;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in points.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// (-1e-10, 0) clamp to zero silently; anything more negative flags the
/// input as degenerate (and still clamps).
fn sym_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(m.clone());
    let mut warn = false;
    let d = m.nrows();
    let mut root = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut lam = eig.eigenvalues[k];
        if lam < 0.0 {
            if lam < -1e-10 {
                warn = true;
            }
            lam = 0.0;
        }
        let s = lam.sqrt();
        let v = eig.eigenvectors.column(k);
        for i in 0..d {
            for j in 0..d {
                root[(i, j)] += s * v[i] * v[j];
            }
        }
    }
    (root, warn)
}

/// Fréchet distance between the Gaussian fits of two point sets:
/// `|mu_r - mu_g|^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2})`.
///
/// Returns the distance and a degenerate-covariance flag.
pub fn frechet_distance(
    reference: &ArrayView2<f64>,
    generated: &ArrayView2<f64>,
) -> Result<(f64, bool)> {
    let d = reference.ncols();
    if d == 0 || generated.ncols() != d {
        return Err(Error::invalid("point sets must share a positive dimension"));
    }
    if reference.nrows() < d + 1 || generated.nrows() < d + 1 {
        return Err(Error::invalid(format!(
            "need at least d + 1 = {} points per set",
            d + 1
        )));
    }
    let (mu_r, cov_r) = mean_and_cov(reference);
    let (mu_g, cov_g) = mean_and_cov(generated);

    let mean_term: f64 = (0..d).map(|i| (mu_r[i] - mu_g[i]).powi(2)).sum();

    // Tr((S_r S_g)^{1/2}) through the symmetric form (A S_g A)^{1/2} with
    // A = S_r^{1/2}, which keeps the eigenproblem symmetric.
    let (a, warn_a) = sym_sqrt(&cov_r);
    let mut inner = &a * &cov_g * &a;
    // Guard symmetry against accumulated round-off.
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (inner[(i, j)] + inner[(j, i)]);
            inner[(i, j)] = s;
            inner[(j, i)] = s;
        }
    }
    let eig = SymmetricEigen::new(inner);
    let mut warn = warn_a;
    let mut tr_sqrt = 0.0;
    for k in 0..d {
        let lam = eig.eigenvalues[k];
        if lam < 0.0 {
            if lam < -1e-10 {
                warn = true;
            }
            continue;
        }
        tr_sqrt += lam.sqrt();
    }
    let trace = cov_r.trace() + cov_g.trace();
    Ok((mean_term + trace - 2.0 * tr_sqrt, warn))
}

/// Fixed seeded Gaussian projection to `dim` dimensions.
pub fn random_projection(points: &ArrayView2<f64>, dim: usize, seed: u64) -> Array2<f64> {
    let d = points.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Array2::from_shape_fn((d, dim), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z / (d as f64).sqrt()
    });
    points.dot(&m)
}

fn sq_dist(a: &ArrayView2<f64>, i: usize, b: &ArrayView2<f64>, j: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..a.ncols() {
        let d = a[(i, c)] - b[(j, c)];
        acc += d * d;
    }
    acc
}

/// Squared radius of each point's manifold ball: distance to its k-th
/// nearest neighbor within the same set.
fn knn_sq_radii(points: &ArrayView2<f64>, k: usize) -> Vec<f64> {
    let n = points.nrows();
    let mut radii = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for i in 0..n {
        dists.clear();
        for j in 0..n {
            if j != i {
                dists.push(sq_dist(points, i, points, j));
            }
        }
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        radii.push(*kth);
    }
    radii
}

fn fraction_covered(queries: &ArrayView2<f64>, manifold: &ArrayView2<f64>, sq_radii: &[f64]) -> f64 {
    let n = queries.nrows();
    let mut inside = 0usize;
    for q in 0..n {
        for (m, &r2) in sq_radii.iter().enumerate() {
            if sq_dist(queries, q, manifold, m) <= r2 {
                inside += 1;
                break;
            }
        }
    }
    inside as f64 / n as f64
}

/// Improved precision/recall: the manifold of a set is the union of balls
/// reaching each point's k-th nearest neighbor (boundary inclusive).
/// Precision is the generated fraction inside the reference manifold, recall
/// the reference fraction inside the generated manifold.
pub fn precision_recall(
    reference: &ArrayView2<f64>,
    generated: &ArrayView2<f64>,
    k: usize,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if reference.ncols() != generated.ncols() {
        return Err(Error::invalid("point sets must share a dimension"));
    }
    if k >= reference.nrows() || k >= generated.nrows() {
        return Err(Error::invalid(format!(
            "k = {k} needs sets larger than k (got {} and {})",
            reference.nrows(),
            generated.nrows()
        )));
    }
    if reference.nrows() == 0 || generated.nrows() == 0 {
        return Err(Error::invalid("point sets must be non-empty"));
    }
    let ref_radii = knn_sq_radii(reference, k);
    let gen_radii = knn_sq_radii(generated, k);
    let precision = fraction_covered(generated, reference, &ref_radii);
    let recall = fraction_covered(reference, generated, &gen_radii);
    Ok((precision, recall))
}

/// Class-fidelity score `exp(E_x KL(p(y|x) || pbar))` where `p(y|x)` is the
/// exact clean-data posterior and `pbar` its average over the sample set.
/// Always >= 1; equals 1 iff the posterior is constant over the samples.
pub fn class_fidelity(mixture: &GaussianMixture, samples: &ArrayView2<f64>) -> Result<f64> {
    let n = samples.nrows();
    if n == 0 {
        return Err(Error::invalid("class fidelity needs a non-empty sample set"));
    }
    let k = mixture.num_classes();
    let mut probs = Array2::zeros((n, k));
    let mut marginal = vec![0.0; k];
    for (i, row) in samples.rows().into_iter().enumerate() {
        let lp = mixture.clean_class_log_probs(&row);
        for y in 0..k {
            let p = lp[y].exp();
            probs[(i, y)] = p;
            marginal[y] += p / n as f64;
        }
    }
    let mut mean_kl = 0.0;
    for i in 0..n {
        for y in 0..k {
            let p = probs[(i, y)];
            if p > 0.0 && marginal[y] > 0.0 {
                mean_kl += p * (p.ln() - marginal[y].ln()) / n as f64;
            }
        }
    }
    Ok(mean_kl.exp())
}

/// Full report for one generated batch against a reference batch.
pub fn evaluate(
    mixture: &GaussianMixture,
    reference: &ArrayView2<f64>,
    generated: &ArrayView2<f64>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    let (frechet, degenerate) = match cfg.projection_dim {
        Some(dim) => {
            let r = random_projection(reference, dim, cfg.projection_seed);
            let g = random_projection(generated, dim, cfg.projection_seed);
            frechet_distance(&r.view(), &g.view())?
        }
        None => frechet_distance(reference, generated)?,
    };
    let (precision, recall) = precision_recall(reference, generated, cfg.k)?;
    let fidelity = class_fidelity(mixture, generated)?;
    Ok(MetricsReport {
        frechet,
        precision,
        recall,
        class_fidelity: fidelity,
        sample_count: generated.nrows(),
        reference_count: reference.nrows(),
        degenerate_covariance: degenerate,
    })
}

/// One row of a guidance-scale sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    #[serde(flatten)]
    pub report: MetricsReport,
    /// Mean clean-data probability of each sample's target class.
    pub mean_target_prob: f64,
}

/// Sample `n` chains per scale (same seeds and target classes across scales)
/// and evaluate each batch against a fresh seeded reference draw.
pub fn sweep_guidance_scale(
    model: &dyn Denoiser,
    classifier: &dyn NoisyClassifier,
    mixture: &GaussianMixture,
    base_sched: &NoiseSchedule,
    template: &SamplerConfig,
    scales: &[f64],
    n: usize,
    cfg: &MetricsConfig,
) -> Result<Vec<SweepRow>> {
    if scales.is_empty() {
        return Err(Error::invalid("sweep needs at least one scale"));
    }
    let mut ref_rng = ChaCha8Rng::seed_from_u64(cfg.ref_seed);
    let (reference, _) = mixture.sample_batch(&mut ref_rng, cfg.ref_count);

    // Target classes drawn once from the priors so every scale guides the
    // same chains toward the same classes.
    let mut class_rng = ChaCha8Rng::seed_from_u64(template.seed);
    class_rng.set_stream(u64::MAX);
    let classes: Vec<usize> = (0..n).map(|_| mixture.sample(&mut class_rng).1).collect();

    let mut rows = Vec::with_capacity(scales.len());
    for &scale in scales {
        let run_cfg = SamplerConfig { guidance_scale: scale, ..template.clone() };
        let out = sample(
            model,
            base_sched,
            &run_cfg,
            n,
            (scale > 0.0).then_some(classifier),
            Some(&classes),
            false,
        )?;
        let report = evaluate(mixture, &reference.view(), &out.samples.view(), cfg)?;
        let mut mean_target_prob = 0.0;
        for (i, row) in out.samples.rows().into_iter().enumerate() {
            mean_target_prob +=
                mixture.clean_class_log_probs(&row)[classes[i]].exp() / n as f64;
        }
        rows.push(SweepRow { scale, report, mean_target_prob });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    /// Independent brute-force precision/recall: full sorts over true
    /// (non-squared) distances and linear membership scans.
    pub(crate) fn brute_force_pr(
        reference: &Array2<f64>,
        generated: &Array2<f64>,
        k: usize,
    ) -> (f64, f64) {
        fn dist(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
            (0..a.ncols())
                .map(|c| (a[(i, c)] - b[(j, c)]).powi(2))
                .sum::<f64>()
                .sqrt()
        }
        fn radii(set: &Array2<f64>, k: usize) -> Vec<f64> {
            (0..set.nrows())
                .map(|i| {
                    let mut ds: Vec<f64> = (0..set.nrows())
                        .filter(|&j| j != i)
                        .map(|j| dist(set, i, set, j))
                        .collect();
                    ds.sort_by(|a, b| a.total_cmp(b));
                    ds[k - 1]
                })
                .collect()
        }
        fn covered(queries: &Array2<f64>, manifold: &Array2<f64>, radii: &[f64]) -> f64 {
            let mut hits = 0;
            for q in 0..queries.nrows() {
                let inside = (0..manifold.nrows())
                    .any(|m| dist(queries, q, manifold, m) <= radii[m]);
                if inside {
                    hits += 1;
                }
            }
            hits as f64 / queries.nrows() as f64
        }
        let rr = radii(reference, k);
        let rg = radii(generated, k);
        (covered(generated, reference, &rr), covered(reference, generated, &rg))
    }

    fn seeded_points(n: usize, d: usize, seed: u64, shift: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z + shift
        })
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let a = seeded_points(300, 2, 1, 0.0);
        let (fd, warn) = frechet_distance(&a.view(), &a.view()).unwrap();
        assert!(fd.abs() < 1e-9, "fd = {fd}");
        assert!(!warn);
    }

    #[test]
    fn frechet_closed_form_1d() {
        // Sets with exact sample mean/variance (0, 1) and (2, 1): distance 4.
        let a = array![[-1.0], [0.0], [1.0]];
        let b = array![[1.0], [2.0], [3.0]];
        let (fd, _) = frechet_distance(&a.view(), &b.view()).unwrap();
        assert_relative_eq!(fd, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn frechet_closed_form_2d() {
        // Four points engineered to have exactly identity sample covariance;
        // shifting by (1, 1) gives distance 2.
        let s = (1.5f64).sqrt();
        let a = array![[s, 0.0], [-s, 0.0], [0.0, s], [0.0, -s]];
        let mut b = a.clone();
        b.mapv_inplace(|v| v);
        for mut row in b.rows_mut() {
            row[0] += 1.0;
            row[1] += 1.0;
        }
        let (fd, _) = frechet_distance(&a.view(), &b.view()).unwrap();
        assert_relative_eq!(fd, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn frechet_is_symmetric() {
        let a = seeded_points(200, 2, 3, 0.0);
        let b = seeded_points(250, 2, 4, 0.7);
        let (ab, _) = frechet_distance(&a.view(), &b.view()).unwrap();
        let (ba, _) = frechet_distance(&b.view(), &a.view()).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn frechet_rejects_tiny_sets() {
        let a = array![[0.0, 0.0], [1.0, 1.0]];
        assert!(frechet_distance(&a.view(), &a.view()).is_err());
    }

    #[test]
    fn projected_rank_deficient_covariance_flags_but_computes() {
        // 2D data projected to 8 dims has rank-2 covariances; the clamp path
        // must produce a finite distance.
        let a = random_projection(&seeded_points(300, 2, 5, 0.0).view(), 8, 9);
        let b = random_projection(&seeded_points(300, 2, 6, 0.5).view(), 8, 9);
        let (fd, _warn) = frechet_distance(&a.view(), &b.view()).unwrap();
        assert!(fd.is_finite() && fd >= -1e-9);
    }

    #[test]
    fn precision_recall_self_is_perfect() {
        let a = seeded_points(120, 2, 7, 0.0);
        let (p, r) = precision_recall(&a.view(), &a.view(), 3).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn precision_recall_disjoint_sets_is_zero() {
        let a = seeded_points(100, 2, 8, 0.0);
        let b = seeded_points(100, 2, 9, 1e6);
        let (p, r) = precision_recall(&a.view(), &b.view(), 3).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
    }

    #[test]
    fn precision_recall_matches_brute_force() {
        // Includes the uniform-offset construction: ref on [0,1], gen on
        // [0.5, 1.5], k = 3.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let uniform = |n: usize, lo: f64, seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            Array2::from_shape_fn((n, 1), |_| lo + r.gen::<f64>())
        };
        let a = uniform(200, 0.0, 11);
        let b = uniform(200, 0.5, 12);
        let fast = precision_recall(&a.view(), &b.view(), 3).unwrap();
        let brute = brute_force_pr(&a, &b, 3);
        assert_eq!(fast, brute);

        for trial in 0..5 {
            let n = rng.gen_range(20..120);
            let m = rng.gen_range(20..120);
            let k = rng.gen_range(1..6).min(n - 1).min(m - 1);
            let a = seeded_points(n, 2, 100 + trial, 0.0);
            let b = seeded_points(m, 2, 200 + trial, rng.gen_range(-1.0..1.0));
            let fast = precision_recall(&a.view(), &b.view(), k).unwrap();
            let brute = brute_force_pr(&a, &b, k);
            assert_eq!(fast, brute, "trial {trial} with k = {k}");
        }
    }

    #[test]
    fn precision_recall_rejects_large_k() {
        let a = seeded_points(10, 2, 13, 0.0);
        assert!(precision_recall(&a.view(), &a.view(), 10).is_err());
        assert!(precision_recall(&a.view(), &a.view(), 0).is_err());
    }

    #[test]
    fn class_fidelity_bounds_and_limits() {
        let mix = GaussianMixture::benchmark();
        // All samples at the symmetric origin: posterior uniform, score 1.
        let at_origin = Array2::zeros((50, 2));
        let s = class_fidelity(&mix, &at_origin.view()).unwrap();
        assert_relative_eq!(s, 1.0, max_relative = 1e-12);

        // Samples dead-centered on each class in equal numbers: confident
        // posteriors matching a uniform marginal approach K = 4.
        let mut separated = Array2::zeros((40, 2));
        for i in 0..40 {
            let m = mix.mean(i % 4);
            separated[(i, 0)] = m[0] * 3.0;
            separated[(i, 1)] = m[1] * 3.0;
        }
        let s = class_fidelity(&mix, &separated.view()).unwrap();
        assert!(s > 3.9 && s <= 4.0 + 1e-9, "separated fidelity {s}");

        assert!(class_fidelity(&mix, &Array2::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn fidelity_is_at_least_one_on_random_sets() {
        let mix = GaussianMixture::benchmark();
        for seed in 0..5 {
            let pts = seeded_points(200, 2, 40 + seed, seed as f64 - 2.0);
            let s = class_fidelity(&mix, &pts.view()).unwrap();
            assert!(s >= 1.0 - 1e-12, "fidelity {s} below 1");
        }
    }
}
