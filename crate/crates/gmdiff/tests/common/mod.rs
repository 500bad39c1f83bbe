//! Shared helpers for integration tests: an independent brute-force
//! precision/recall oracle (full sorts over true distances, linear scans)
//! kept deliberately separate from the library implementation.

use ndarray::Array2;

pub fn brute_force_precision_recall(
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
        let mut hits = 0usize;
        for q in 0..queries.nrows() {
            if (0..manifold.nrows()).any(|m| dist(queries, q, manifold, m) <= radii[m]) {
                hits += 1;
            }
        }
        hits as f64 / queries.nrows() as f64
    }
    let rr = radii(reference, k);
    let rg = radii(generated, k);
    (covered(generated, reference, &rr), covered(reference, generated, &rg))
}
