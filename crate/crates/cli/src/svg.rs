//! Minimal static SVG charts. Output depends only on the input values.

use std::fmt::Write;

const PALETTE: [&str; 6] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Blue-scale matrix with values in [0, 1]; NaN cells are grey.
pub fn heatmap(rows: &[String], cols: &[String], values: &[Vec<f64>]) -> String {
    let (cell_w, cell_h, left, top) = (80.0, 24.0, 170.0, 30.0);
    let w = left + cell_w * cols.len() as f64 + 10.0;
    let h = top + cell_h * rows.len() as f64 + 10.0;
    let mut s = open(w, h);
    for (j, c) in cols.iter().enumerate() {
        let x = left + cell_w * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"20\" text-anchor=\"middle\">{}</text>",
            escape(c)
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let y = top + cell_h * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            y + 16.0,
            escape(r)
        );
        for (j, v) in values[i].iter().enumerate() {
            let x = left + cell_w * j as f64;
            let (fill, label) = if v.is_finite() {
                let t = v.clamp(0.0, 1.0);
                let shade = (255.0 - 200.0 * t).round() as u8;
                (format!("rgb({shade},{shade},255)"), format!("{v:.2}"))
            } else {
                ("#cccccc".to_string(), "n/a".to_string())
            };
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell_w:.1}\" height=\"{cell_h:.1}\" fill=\"{fill}\" stroke=\"white\"/>\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>",
                x + cell_w / 2.0,
                y + 16.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// ROC curves on the unit square with a chance diagonal.
pub fn roc(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let (size, left, top) = (300.0, 40.0, 20.0);
    let legend_h = 16.0 * curves.len() as f64;
    let mut s = open(left + size + 20.0, top + size + 40.0 + legend_h);
    let px = |x: f64| left + x * size;
    let py = |y: f64| top + (1.0 - y) * size;
    let _ = writeln!(
        s,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"black\"/>\
         <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for (k, (name, pts)) in curves.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"/>",
            path.join(" ")
        );
        let ly = top + size + 30.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{left}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{colour}\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            ly - 9.0,
            left + 14.0,
            ly,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Horizontal bars; negative or NaN values draw no bar.
pub fn bars(labels: &[String], values: &[f64], unit: &str) -> String {
    let (left, bar_h, width, top) = (220.0, 16.0, 300.0, 10.0);
    let max = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut s = open(
        left + width + 80.0,
        top * 2.0 + (bar_h + 4.0) * labels.len() as f64,
    );
    for (i, (l, v)) in labels.iter().zip(values).enumerate() {
        let y = top + (bar_h + 4.0) * i as f64;
        let len = if v.is_finite() && *v > 0.0 {
            width * v / max
        } else {
            0.0
        };
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\
             <rect x=\"{left}\" y=\"{y:.1}\" width=\"{len:.2}\" height=\"{bar_h}\" fill=\"{}\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\">{v:.2}{unit}</text>",
            left - 6.0,
            y + 12.0,
            escape(l),
            PALETTE[0],
            left + len + 4.0,
            y + 12.0
        );
    }
    s.push_str("</svg>\n");
    s
}
