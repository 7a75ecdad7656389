//! Minimal deterministic SVG plots: log-log scatter/line charts with a
//! fitted-line or sigmoid overlay. No timestamps, no randomness — the same
//! inputs always produce the same bytes.

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub draw_line: bool,
}

pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const COLORS: [&str; 6] = ["#1f6fb2", "#c0392b", "#1e8449", "#8e44ad", "#b7950b", "#566573"];

fn fmt(v: f64) -> String {
    // fixed 3-decimal formatting keeps coordinates stable
    format!("{v:.3}")
}

pub fn render(spec: &PlotSpec) -> String {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in &spec.series {
        for &(x, y) in &s.points {
            xs.push(if spec.log_x { x.ln() } else { x });
            ys.push(if spec.log_y { y.ln() } else { y });
        }
    }
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let px = |x: f64| {
        let t = if spec.log_x { x.ln() } else { x };
        MARGIN_L + (t - x0) / (x1 - x0) * (W - MARGIN_L - MARGIN_R)
    };
    let py = |y: f64| {
        let t = if spec.log_y { y.ln() } else { y };
        H - MARGIN_B - (t - y0) / (y1 - y0) * (H - MARGIN_T - MARGIN_B)
    };

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(&spec.title)
    ));
    // axes
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(H - MARGIN_B),
        fmt(W - MARGIN_R),
        fmt(H - MARGIN_B)
    ));
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(H - MARGIN_B)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        H - 12.0,
        escape(&spec.x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        escape(&spec.y_label)
    ));
    // tick labels at the corners of the data range
    let tick = |t: f64, log: bool| -> String {
        let v = if log { t.exp() } else { t };
        if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
            format!("{v:.2e}")
        } else {
            format!("{v:.3}")
        }
    };
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\">{}</text>\n",
        fmt(MARGIN_L),
        fmt(H - MARGIN_B + 16.0),
        tick(x0, spec.log_x)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
        fmt(W - MARGIN_R),
        fmt(H - MARGIN_B + 16.0),
        tick(x1, spec.log_x)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
        fmt(MARGIN_L - 4.0),
        fmt(H - MARGIN_B),
        tick(y0, spec.log_y)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
        fmt(MARGIN_L - 4.0),
        fmt(MARGIN_T + 4.0),
        tick(y1, spec.log_y)
    ));

    for (si, s) in spec.series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        if s.draw_line && s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{},{}", fmt(px(x)), fmt(py(y))))
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                pts.join(" ")
            ));
        } else {
            for &(x, y) in &s.points {
                out.push_str(&format!(
                    "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>\n",
                    fmt(px(x)),
                    fmt(py(y))
                ));
            }
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            fmt(W - MARGIN_R - 180.0),
            fmt(MARGIN_T + 16.0 * (si as f64 + 1.0)),
            escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_input_same_bytes() {
        let spec = PlotSpec {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_x: true,
            log_y: true,
            series: vec![Series {
                label: "s".into(),
                points: vec![(1.0, 10.0), (10.0, 1.0), (100.0, 0.1)],
                draw_line: true,
            }],
        };
        assert_eq!(render(&spec), render(&spec));
        assert!(render(&spec).starts_with("<svg"));
    }
}
