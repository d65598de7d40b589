//! Static SVG charts rendered in-process. Everything is a pure function of
//! the data: fixed canvas, fixed decimal formatting, no timestamps — the
//! same series always yields byte-identical markup.

pub const W: f64 = 640.0;
pub const H: f64 = 400.0;
pub const MARGIN_L: f64 = 56.0;
pub const MARGIN_R: f64 = 16.0;
pub const MARGIN_T: f64 = 36.0;
pub const MARGIN_B: f64 = 44.0;

/// Map a data value into pixel space; shared by the renderer and the
/// report's parse-back check.
pub fn px_x(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    MARGIN_L + (v - lo) / span * (W - MARGIN_L - MARGIN_R)
}

pub fn px_y(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    H - MARGIN_B - (v - lo) / span * (H - MARGIN_T - MARGIN_B)
}

pub fn fmt_px(v: f64) -> String {
    format!("{v:.3}")
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        esc(title)
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    format!(
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{by}\" text-anchor=\"middle\">{xl}</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy})\">{yl}</text>\n",
        l = MARGIN_L,
        r = W - MARGIN_R,
        t = MARGIN_T,
        b = H - MARGIN_B,
        cx = (MARGIN_L + W - MARGIN_R) / 2.0,
        by = H - 10.0,
        cy = (MARGIN_T + H - MARGIN_B) / 2.0,
        xl = esc(x_label),
        yl = esc(y_label),
    )
}

fn ticks(xlo: f64, xhi: f64, ylo: f64, yhi: f64) -> String {
    let mut out = String::new();
    for i in 0..=4 {
        let fx = i as f64 / 4.0;
        let xv = xlo + fx * (xhi - xlo);
        let yv = ylo + fx * (yhi - ylo);
        let xp = px_x(xv, xlo, xhi);
        let yp = px_y(yv, ylo, yhi);
        out.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b2}\" stroke=\"black\"/>\n\
             <text x=\"{x}\" y=\"{ty}\" text-anchor=\"middle\">{lv:.2}</text>\n",
            x = fmt_px(xp),
            b = H - MARGIN_B,
            b2 = H - MARGIN_B + 5.0,
            ty = H - MARGIN_B + 18.0,
            lv = xv,
        ));
        out.push_str(&format!(
            "<line x1=\"{l}\" y1=\"{y}\" x2=\"{l2}\" y2=\"{y}\" stroke=\"black\"/>\n\
             <text x=\"{tx}\" y=\"{y2}\" text-anchor=\"end\">{lv:.2}</text>\n",
            l = MARGIN_L,
            l2 = MARGIN_L - 5.0,
            y = fmt_px(yp),
            tx = MARGIN_L - 8.0,
            y2 = fmt_px(yp + 4.0),
            lv = yv,
        ));
    }
    out
}

/// Multi-series line chart. Each series: (name, color, points). The y-range
/// is fixed by the caller so related charts stay comparable.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    y_range: (f64, f64),
    series: &[(&str, &str, Vec<(f64, f64)>)],
) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|(_, _, p)| p.iter().map(|q| q.0)).collect();
    let xlo = xs.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let xhi = xs.iter().cloned().fold(0.0, f64::max).max(xlo + 1.0);
    let (ylo, yhi) = y_range;
    let mut out = header(title);
    out.push_str(&axes(x_label, y_label));
    out.push_str(&ticks(xlo, xhi, ylo, yhi));
    for (i, (name, color, pts)) in series.iter().enumerate() {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt_px(px_x(x, xlo, xhi)), fmt_px(px_y(y, ylo, yhi))))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        let ly = MARGIN_T + 14.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{ly}\" x2=\"{x1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\">{n}</text>\n",
            x0 = W - MARGIN_R - 120.0,
            x1 = W - MARGIN_R - 100.0,
            tx = W - MARGIN_R - 94.0,
            ty = fmt_px(ly + 4.0),
            n = esc(name),
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bar chart for small categorical counts.
pub fn bar_chart(title: &str, x_label: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let yhi = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1.0);
    let mut out = header(title);
    out.push_str(&axes(x_label, y_label));
    let n = bars.len().max(1) as f64;
    let plot_w = W - MARGIN_L - MARGIN_R;
    let slot = plot_w / n;
    let bw = slot * 0.6;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN_L + slot * i as f64 + (slot - bw) / 2.0;
        let y = px_y(*v, 0.0, yhi);
        out.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"steelblue\" \
             data-value=\"{v}\"/>\n\
             <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">{l}</text>\n\
             <text x=\"{cx}\" y=\"{vy}\" text-anchor=\"middle\">{v}</text>\n",
            x = fmt_px(x),
            y = fmt_px(y),
            w = fmt_px(bw),
            h = fmt_px((H - MARGIN_B - y).max(0.0)),
            cx = fmt_px(x + bw / 2.0),
            ty = H - MARGIN_B + 18.0,
            vy = fmt_px(y - 6.0),
            l = esc(label),
        ));
    }
    for g in 0..=4 {
        let yv = yhi * g as f64 / 4.0;
        let yp = px_y(yv, 0.0, yhi);
        out.push_str(&format!(
            "<line x1=\"{l}\" y1=\"{y}\" x2=\"{l2}\" y2=\"{y}\" stroke=\"black\"/>\n\
             <text x=\"{tx}\" y=\"{y2}\" text-anchor=\"end\">{lv:.1}</text>\n",
            l = MARGIN_L,
            l2 = MARGIN_L - 5.0,
            y = fmt_px(yp),
            tx = MARGIN_L - 8.0,
            y2 = fmt_px(yp + 4.0),
            lv = yv,
        ));
    }
    out.push_str("</svg>\n");
    out
}
