//! Native SVG line plots (paths and axes only, no external renderer).
//!
//! Element order is fixed — background, frame, x ticks, y ticks, series
//! polyline, point markers, axis labels, title — and floats are written with
//! a fixed precision, so identical inputs produce byte-identical files.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const TICKS: usize = 5;

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Render one series as a line plot.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (x_lo, x_hi) = padded_range(points.iter().map(|p| p.0));
    let (y_lo, y_hi) = padded_range(points.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
    let sy = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(WIDTH - MARGIN_L - MARGIN_R),
        fmt(HEIGHT - MARGIN_T - MARGIN_B)
    ));

    for i in 0..TICKS {
        let frac = i as f64 / (TICKS - 1) as f64;
        let xv = x_lo + frac * (x_hi - x_lo);
        let px = sx(xv);
        s.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n",
            fmt(px),
            fmt(HEIGHT - MARGIN_B),
            fmt(HEIGHT - MARGIN_B + 5.0)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            fmt(px),
            fmt(HEIGHT - MARGIN_B + 20.0),
            fmt_tick(xv)
        ));
    }
    for i in 0..TICKS {
        let frac = i as f64 / (TICKS - 1) as f64;
        let yv = y_lo + frac * (y_hi - y_lo);
        let py = sy(yv);
        s.push_str(&format!(
            "<line x1=\"{1}\" y1=\"{0}\" x2=\"{2}\" y2=\"{0}\" stroke=\"black\"/>\n",
            fmt(py),
            fmt(MARGIN_L - 5.0),
            fmt(MARGIN_L)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_L - 8.0),
            fmt(py + 4.0),
            fmt_tick(yv)
        ));
    }

    if !points.is_empty() {
        let path: Vec<String> =
            points.iter().map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y)))).collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in points {
            s.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"steelblue\"/>\n",
                fmt(sx(x)),
                fmt(sy(y))
            ));
        }
    }

    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        fmt(WIDTH / 2.0),
        fmt(HEIGHT - 12.0),
        escape(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        fmt(HEIGHT / 2.0),
        fmt(HEIGHT / 2.0),
        escape(y_label)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        fmt(WIDTH / 2.0),
        escape(title)
    ));
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_is_deterministic() {
        let pts = [(0.0, 1.0), (1.0, 0.5), (2.0, 0.8)];
        let a = line_plot("frechet vs scale", "scale", "frechet", &pts);
        let b = line_plot("frechet vs scale", "scale", "frechet", &pts);
        assert_eq!(a, b);
    }

    #[test]
    fn element_order_is_stable() {
        let pts = [(0.0, 1.0), (5.0, 2.0)];
        let svg = line_plot("t", "x", "y", &pts);
        let idx = |needle: &str| svg.find(needle).unwrap_or_else(|| panic!("missing {needle}"));
        assert!(idx("<rect width=\"100%\"") < idx("<rect x="));
        assert!(idx("<rect x=") < idx("<line "));
        assert!(idx("<line ") < idx("<polyline "));
        assert!(idx("<polyline ") < idx("<circle "));
        assert!(idx("<circle ") < idx("</svg>"));
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        let svg = line_plot("t", "x", "y", &[]);
        assert!(svg.contains("</svg>"));
        let svg = line_plot("t", "x", "y", &[(1.0, 1.0)]);
        assert!(svg.contains("<circle"));
    }

    #[test]
    fn labels_are_escaped() {
        let svg = line_plot("a < b", "x & y", "z", &[(0.0, 0.0), (1.0, 1.0)]);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.contains("x &amp; y"));
    }
}
