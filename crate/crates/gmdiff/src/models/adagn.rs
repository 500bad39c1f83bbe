//! Adaptive group normalization: normalize per group, then scale and shift
//! with embedding-projected modulation `y_s * norm(h) + y_b`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Group variances below this floor are treated as constant, so degenerate
/// groups normalize to zero instead of blowing up.
pub const VAR_FLOOR: f64 = 1e-5;

/// Per-(sample, group) statistics needed to run the backward pass.
pub(crate) struct GroupNormCache {
    /// 1 / sqrt(max(var, floor))
    pub inv_std: Array2<f64>,
    /// Whether the variance exceeded the floor (the denominator then depends
    /// on the inputs and contributes to the gradient).
    pub active: Array2<bool>,
}

/// Normalize each length-`group_size` slice of every row to zero mean and
/// (floored) unit variance, in place. Returns the stats for backward.
pub(crate) fn group_normalize(h: &mut Array2<f64>, group_size: usize) -> Result<GroupNormCache> {
    let (n, width) = h.dim();
    if group_size == 0 || width % group_size != 0 {
        return Err(Error::invalid(format!(
            "width {width} is not divisible by group size {group_size}"
        )));
    }
    let groups = width / group_size;
    let mut inv_std = Array2::zeros((n, groups));
    let mut active = Array2::from_elem((n, groups), false);
    for i in 0..n {
        let mut row = h.row_mut(i);
        for g in 0..groups {
            let lo = g * group_size;
            let hi = lo + group_size;
            let mut mean = 0.0;
            for j in lo..hi {
                mean += row[j];
            }
            mean /= group_size as f64;
            let mut var = 0.0;
            for j in lo..hi {
                let d = row[j] - mean;
                var += d * d;
            }
            var /= group_size as f64;
            let is_active = var > VAR_FLOOR;
            let s = 1.0 / var.max(VAR_FLOOR).sqrt();
            for j in lo..hi {
                row[j] = (row[j] - mean) * s;
            }
            inv_std[(i, g)] = s;
            active[(i, g)] = is_active;
        }
    }
    Ok(GroupNormCache { inv_std, active })
}

/// Gradient of the normalization with respect to its input, given the
/// gradient on the normalized output and the cached stats.
pub(crate) fn group_normalize_backward(
    d_norm: &ArrayView2<f64>,
    norm: &ArrayView2<f64>,
    cache: &GroupNormCache,
    group_size: usize,
) -> Array2<f64> {
    let (n, width) = d_norm.dim();
    let groups = width / group_size;
    let mut out = Array2::zeros((n, width));
    for i in 0..n {
        for g in 0..groups {
            let lo = g * group_size;
            let hi = lo + group_size;
            let mut mean_d = 0.0;
            let mut proj = 0.0;
            for j in lo..hi {
                mean_d += d_norm[(i, j)];
                proj += d_norm[(i, j)] * norm[(i, j)];
            }
            mean_d /= group_size as f64;
            proj /= group_size as f64;
            let s = cache.inv_std[(i, g)];
            if cache.active[(i, g)] {
                for j in lo..hi {
                    out[(i, j)] = s * (d_norm[(i, j)] - mean_d - norm[(i, j)] * proj);
                }
            } else {
                for j in lo..hi {
                    out[(i, j)] = s * (d_norm[(i, j)] - mean_d);
                }
            }
        }
    }
    out
}

/// The conditioning layer on a single activation vector.
pub fn adagn(
    h: &ArrayView1<f64>,
    y_s: &ArrayView1<f64>,
    y_b: &ArrayView1<f64>,
    group_size: usize,
) -> Result<Array1<f64>> {
    if h.len() != y_s.len() || h.len() != y_b.len() {
        return Err(Error::invalid("adagn inputs must have equal lengths"));
    }
    let mut m = h
        .to_owned()
        .into_shape_with_order((1, h.len()))
        .expect("row reshape");
    group_normalize(&mut m, group_size)?;
    let norm = m.row(0);
    Ok(Array1::from_iter(
        (0..h.len()).map(|j| y_s[j] * norm[j] + y_b[j]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn identity_modulation_is_plain_group_norm() {
        let h = array![1.0, 2.0, 3.0, 4.0];
        let out = adagn(&h.view(), &Array1::from_elem(4, 1.0).view(), &Array1::from_elem(4, 0.0).view(), 2).unwrap();
        // Each group of two normalizes to (-1, 1).
        assert_relative_eq!(out[0], -1.0, max_relative = 1e-9);
        assert_relative_eq!(out[1], 1.0, max_relative = 1e-9);
        assert_relative_eq!(out[2], -1.0, max_relative = 1e-9);
        assert_relative_eq!(out[3], 1.0, max_relative = 1e-9);
    }

    #[test]
    fn zero_scale_yields_shift_exactly() {
        let h = array![0.3, -1.2, 5.0, 0.01];
        let y_b = array![7.0, -2.0, 0.5, 0.0];
        let out = adagn(&h.view(), &Array1::from_elem(4, 0.0).view(), &y_b.view(), 4).unwrap();
        assert_eq!(out, y_b);
    }

    #[test]
    fn constant_group_normalizes_to_zero() {
        let h = array![2.5, 2.5, 2.5, 2.5];
        let y_b = array![1.0, 2.0, 3.0, 4.0];
        let out = adagn(&h.view(), &Array1::from_elem(4, 3.0).view(), &y_b.view(), 4).unwrap();
        assert_eq!(out, y_b);
    }

    #[test]
    fn indivisible_width_rejected() {
        let h = array![1.0, 2.0, 3.0];
        assert!(adagn(&h.view(), &Array1::from_elem(3, 1.0).view(), &Array1::from_elem(3, 0.0).view(), 2).is_err());
    }

    #[test]
    fn normalized_stats_are_zero_one() {
        let mut h = Array2::from_shape_fn((5, 32), |(i, j)| ((i * 37 + j * 11) as f64).sin() * 3.0);
        group_normalize(&mut h, 8).unwrap();
        for i in 0..5 {
            for g in 0..4 {
                let slice = h.row(i);
                let vals: Vec<f64> = (g * 8..(g + 1) * 8).map(|j| slice[j]).collect();
                let mean: f64 = vals.iter().sum::<f64>() / 8.0;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
                assert!(mean.abs() < 1e-6, "group mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "group var {var}");
            }
        }
    }
}
