//! Minimal static SVG line charts for sweep output. No dependencies; the
//! output is deterministic for identical input.

const PALETTE: [&str; 7] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Panel<'a> {
    title: &'a str,
    series: &'a [Series],
}

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_B: f64 = 45.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_R: f64 = 15.0;

fn panel_svg(panel: &Panel, x_off: f64, x_label: &str, y_label: &str) -> String {
    let mut out = String::new();
    let xs: Vec<f64> = panel
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let ys: Vec<f64> = panel
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .collect();
    if xs.is_empty() {
        return out;
    }
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let sx = |x: f64| x_off + MARGIN_L + (x - x_min) / (x_max - x_min).max(1e-12) * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - y_min) / (y_max - y_min).max(1e-12) * plot_h;

    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"18\" font-size=\"13\" font-family=\"sans-serif\" text-anchor=\"middle\">{}</text>\n",
        x_off + PANEL_W / 2.0,
        panel.title
    ));
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        sx(x_min),
        sy(y_min),
        sx(x_max),
        sy(y_min)
    ));
    out.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        sx(x_min),
        sy(y_min),
        sx(x_min),
        sy(y_max)
    ));
    // Extremal tick labels.
    for (v, anchor) in [(x_min, "start"), (x_max, "end")] {
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"{anchor}\">{v:.0}</text>\n",
            sx(v),
            sy(y_min) + 14.0
        ));
    }
    for v in [y_min, y_max] {
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"end\">{v:.0}</text>\n",
            sx(x_min) - 4.0,
            sy(v) + 3.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"middle\">{x_label}</text>\n",
        x_off + MARGIN_L + plot_w / 2.0,
        PANEL_H - 10.0
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"middle\" transform=\"rotate(-90 {:.1} {:.1})\">{y_label}</text>\n",
        x_off + 14.0,
        MARGIN_T + plot_h / 2.0,
        x_off + 14.0,
        MARGIN_T + plot_h / 2.0
    ));

    for (i, series) in panel.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut sorted = series.points.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = sorted
            .iter()
            .map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for (x, y) in &sorted {
            out.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>\n",
                sx(*x),
                sy(*y)
            ));
        }
    }
    out
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        (min - 1.0, max + 1.0)
    } else {
        (min, max)
    }
}

/// Render one chart row: a panel per percentile, shared legend. Every y axis
/// is labeled as modeled TTFT; nothing here is a wall-clock measurement.
pub fn sweep_chart(title: &str, panels: &[(&str, Vec<Series>)]) -> String {
    let width = PANEL_W * panels.len() as f64;
    let legend_h = 22.0 * panels.first().map_or(0, |(_, s)| s.len()) as f64;
    let height = PANEL_H + legend_h + 30.0;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"middle\">{title}</text>\n",
        width / 2.0,
        PANEL_H + 18.0
    ));
    for (i, (name, series)) in panels.iter().enumerate() {
        out.push_str(&panel_svg(
            &Panel { title: name, series },
            i as f64 * PANEL_W,
            "cache capacity (blocks)",
            "modeled TTFT, linear alpha model (ms)",
        ));
    }
    if let Some((_, series)) = panels.first() {
        for (i, s) in series.iter().enumerate() {
            let y = PANEL_H + 36.0 + 22.0 * i as f64;
            let color = PALETTE[i % PALETTE.len()];
            out.push_str(&format!(
                "<rect x=\"20\" y=\"{:.1}\" width=\"16\" height=\"10\" fill=\"{color}\"/>\n",
                y - 9.0
            ));
            out.push_str(&format!(
                "<text x=\"42\" y=\"{y:.1}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
                s.label
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}
