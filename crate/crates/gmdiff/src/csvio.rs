//! CSV formats: point sets, sample batches, loss logs, metric tables.
//!
//! Samples: header `x0,..,x{d-1},class,seed,chain`; the class column is
//! empty for unguided, unconditional runs. Points: header `x0,..,x{d-1}`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::metrics::SweepRow;
use crate::training::LossRow;

fn fmt(v: f64) -> String {
    // Round-trippable f64 formatting keeps rewrites byte-identical.
    format!("{v:?}")
}

/// Write a bare point set.
pub fn points_to_csv(points: &Array2<f64>) -> String {
    let d = points.ncols();
    let mut out = String::new();
    out.push_str(&header_coords(d));
    out.push('\n');
    for row in points.rows() {
        let cells: Vec<String> = row.iter().map(|&v| fmt(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn header_coords(d: usize) -> String {
    (0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",")
}

/// Parse a bare point set (`x0,..` header, one point per row).
pub fn points_from_csv(bytes: &[u8]) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let d = headers.len();
    if d == 0 || !headers.iter().enumerate().all(|(i, h)| h == format!("x{i}")) {
        return Err(Error::Csv(format!(
            "expected x0..x{{d-1}} header, found {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != d {
            return Err(Error::Csv(format!("row {}: expected {d} fields", line + 2)));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| Error::Csv(format!("row {}: {e}", line + 2)))?;
            if !v.is_finite() {
                return Err(Error::Csv(format!("row {}: non-finite value", line + 2)));
            }
            data.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, d), data).map_err(|e| Error::Csv(e.to_string()))
}

/// Write a sample batch with its provenance columns.
pub fn samples_to_csv(samples: &Array2<f64>, classes: Option<&[usize]>, seed: u64) -> String {
    let d = samples.ncols();
    let mut out = String::new();
    out.push_str(&header_coords(d));
    out.push_str(",class,seed,chain\n");
    for (chain, row) in samples.rows().into_iter().enumerate() {
        let coords: Vec<String> = row.iter().map(|&v| fmt(v)).collect();
        let class = classes.map(|c| c[chain].to_string()).unwrap_or_default();
        out.push_str(&format!("{},{class},{seed},{chain}\n", coords.join(",")));
    }
    out
}

/// Parsed sample batch.
pub struct SampleCsv {
    pub points: Array2<f64>,
    /// Present iff every row carried a class.
    pub classes: Option<Vec<usize>>,
    pub seed: Option<u64>,
}

/// Parse a sample batch; also accepts a bare point set for convenience.
pub fn samples_from_csv(bytes: &[u8]) -> Result<SampleCsv> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let d = names.iter().take_while(|h| h.starts_with('x')).count();
    if d == 0 {
        return Err(Error::Csv("no coordinate columns (x0, x1, ...)".into()));
    }
    let plain = names.len() == d;
    if !plain && names[d..] != ["class", "seed", "chain"] {
        return Err(Error::Csv(format!("unexpected columns {:?}", &names[d..])));
    }

    let mut data = Vec::new();
    let mut classes: Vec<Option<usize>> = Vec::new();
    let mut seed = None;
    let mut rows = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != names.len() {
            return Err(Error::Csv(format!("row {}: wrong field count", line + 2)));
        }
        for field in record.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| Error::Csv(format!("row {}: {e}", line + 2)))?;
            if !v.is_finite() {
                return Err(Error::Csv(format!("row {}: non-finite value", line + 2)));
            }
            data.push(v);
        }
        if !plain {
            let class_field = record.get(d).unwrap_or("").trim();
            classes.push(if class_field.is_empty() {
                None
            } else {
                Some(
                    class_field
                        .parse()
                        .map_err(|e| Error::Csv(format!("row {}: class: {e}", line + 2)))?,
                )
            });
            let s: u64 = record
                .get(d + 1)
                .unwrap_or("0")
                .trim()
                .parse()
                .map_err(|e| Error::Csv(format!("row {}: seed: {e}", line + 2)))?;
            seed.get_or_insert(s);
        }
        rows += 1;
    }
    let points =
        Array2::from_shape_vec((rows, d), data).map_err(|e| Error::Csv(e.to_string()))?;
    let classes = if classes.iter().all(|c| c.is_some()) && !classes.is_empty() {
        Some(classes.into_iter().map(|c| c.unwrap()).collect())
    } else {
        None
    };
    Ok(SampleCsv { points, classes, seed })
}

/// Loss log: `iteration,l_simple,l_vlb,total`.
pub fn loss_log_to_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("iteration,l_simple,l_vlb,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration,
            fmt(r.l_simple),
            fmt(r.l_vlb),
            fmt(r.total)
        ));
    }
    out
}

/// Sweep table: one row per guidance scale.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "scale,frechet,precision,recall,class_fidelity,mean_target_prob,samples,references,degenerate_covariance\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            fmt(r.scale),
            fmt(r.report.frechet),
            fmt(r.report.precision),
            fmt(r.report.recall),
            fmt(r.report.class_fidelity),
            fmt(r.mean_target_prob),
            r.report.sample_count,
            r.report.reference_count,
            r.report.degenerate_covariance,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn points_round_trip() {
        let pts = array![[0.1, -2.5], [3.0, 4.125], [-0.0, 1e-17]];
        let csv = points_to_csv(&pts);
        let back = points_from_csv(csv.as_bytes()).unwrap();
        assert_eq!(pts, back);
    }

    #[test]
    fn samples_round_trip_with_classes() {
        let pts = array![[0.5, 1.5], [-1.0, 2.0]];
        let csv = samples_to_csv(&pts, Some(&[3, 1]), 42);
        assert!(csv.starts_with("x0,x1,class,seed,chain\n"));
        let back = samples_from_csv(csv.as_bytes()).unwrap();
        assert_eq!(back.points, pts);
        assert_eq!(back.classes, Some(vec![3, 1]));
        assert_eq!(back.seed, Some(42));
    }

    #[test]
    fn unguided_samples_have_empty_class_column() {
        let pts = array![[0.5], [1.5]];
        let csv = samples_to_csv(&pts, None, 7);
        let back = samples_from_csv(csv.as_bytes()).unwrap();
        assert_eq!(back.classes, None);
        // Bare point sets parse through the same entry point.
        let bare = samples_from_csv(points_to_csv(&pts).as_bytes()).unwrap();
        assert_eq!(bare.points, pts);
    }

    #[test]
    fn malformed_inputs_error_with_row_numbers() {
        assert!(points_from_csv(b"").is_err());
        assert!(points_from_csv(b"y0\n1.0\n").is_err());
        let err = points_from_csv(b"x0\n1.0\nnot-a-number\n").unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
        assert!(points_from_csv(b"x0,x1\n1.0\n").is_err());
        assert!(points_from_csv(b"x0\nNaN\n").is_err());
    }

    #[test]
    fn loss_log_format() {
        let rows = vec![LossRow { iteration: 1, l_simple: 0.5, l_vlb: 0.25, total: 0.75 }];
        let csv = loss_log_to_csv(&rows);
        assert_eq!(csv, "iteration,l_simple,l_vlb,total\n1,0.5,0.25,0.75\n");
    }
}
