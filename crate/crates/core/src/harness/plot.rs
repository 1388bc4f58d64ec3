use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::records::{ExperimentRecord, Metric};
use crate::encoder::xml_escape;
use crate::error::{Error, Result};

/// One line of a plot: `(x, mean, min, max)` points in ascending x.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / count as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|s| s * mag).find(|&s| s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Renders series as an SVG line chart with a shaded min–max band per
/// series. With `log_y` the y axis is base-10 logarithmic and non-positive
/// values are clipped to the smallest positive one.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> Result<String> {
    let pts: Vec<&(f64, f64, f64, f64)> = series.iter().flat_map(|s| &s.points).collect();
    if pts.is_empty() {
        return Err(Error::validation("series", "nothing to plot"));
    }
    let floor = pts
        .iter()
        .flat_map(|p| [p.1, p.2, p.3])
        .filter(|v| *v > 0.0 && v.is_finite())
        .fold(f64::INFINITY, f64::min);
    let ty = |v: f64| -> f64 {
        if log_y {
            let v = if v > 0.0 { v } else { floor };
            v.log10()
        } else {
            v
        }
    };
    let finite = |v: &f64| v.is_finite();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).filter(finite).collect();
    let ys: Vec<f64> = pts.iter().flat_map(|p| [ty(p.2), ty(p.3), ty(p.1)]).filter(finite).collect();
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Numerical("no finite values to plot".into()));
    }
    let (mut x0, mut x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (mut y0, mut y1) = (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    if x1 - x0 < 1e-12 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if log_y {
        y0 = y0.floor();
        y1 = y1.ceil();
        if y1 - y0 < 1.0 {
            y1 = y0 + 1.0;
        }
    } else {
        let pad = if y1 - y0 < 1e-12 { 0.5 * y0.abs().max(1.0) } else { 0.05 * (y1 - y0) };
        y0 -= pad;
        y1 += pad;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, xml_escape(title));
    let _ = writeln!(s, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    for t in nice_ticks(x0, x1, 8) {
        let x = sx(t);
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="#ddd"/>"##, TOP, TOP + ph);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, fmt_tick(t));
    }
    let yticks: Vec<f64> = if log_y { (y0 as i64..=y1 as i64).map(|e| e as f64).collect() } else { nice_ticks(y0, y1, 6) };
    for t in yticks {
        let y = sy(t);
        let label = if log_y { fmt_tick(10f64.powf(t)) } else { fmt_tick(t) };
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{label}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 14.0, xml_escape(x_label));
    let y_text = if log_y { format!("{y_label} (log scale)") } else { y_label.to_string() };
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0:.1}" text-anchor="middle" transform="rotate(-90 18 {0:.1})">{1}</text>"#,
        TOP + ph / 2.0,
        xml_escape(&y_text)
    );
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<_> = ser.points.iter().filter(|p| p.0.is_finite() && ty(p.1).is_finite()).collect();
        if pts.len() > 1 {
            let upper = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(ty(p.3))));
            let lower = pts.iter().rev().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(ty(p.2))));
            let band: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(s, r#"<polygon points="{}" fill="{c}" fill-opacity="0.15" stroke="none"/>"#, band.join(" "));
            let line: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(ty(p.1)))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, line.join(" "));
        }
        for p in &pts {
            let (x, y) = (sx(p.0), sy(ty(p.1)));
            if pts.len() == 1 {
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{c}"/>"#,
                    sy(ty(p.2)),
                    sy(ty(p.3))
                );
            }
            let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{c}"/>"#);
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, xml_escape(&ser.name));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Mean, min and max over seeds of each `(series, x)` group.
fn aggregate<'a>(records: impl Iterator<Item = &'a ExperimentRecord>, key: impl Fn(&ExperimentRecord) -> (String, f64)) -> Vec<Series> {
    let mut groups: BTreeMap<String, BTreeMap<i64, (f64, Vec<f64>)>> = BTreeMap::new();
    for r in records {
        let (name, x) = key(r);
        let e = groups.entry(name).or_default().entry((x * 1000.0).round() as i64).or_insert((x, Vec::new()));
        e.1.push(r.value);
    }
    groups
        .into_iter()
        .map(|(name, pts)| Series {
            name,
            points: pts
                .into_values()
                .map(|(x, v)| {
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    (x, mean, lo, hi)
                })
                .collect(),
        })
        .collect()
}

/// Plots one experiment/metric pair versus SNR. Budgets get separate
/// series when more than one is present.
pub fn emit_plot(records: &[ExperimentRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::validation("records", "nothing to plot"));
    }
    let metric = records[0].metric;
    let multi_budget = records.iter().any(|r| r.n_pilots != records[0].n_pilots);
    let series = aggregate(records.iter(), |r| {
        let name = if multi_budget { format!("{} N_p={}", r.method, r.n_pilots) } else { r.method.to_string() };
        (name, r.snr_db)
    });
    let title = format!("{} {}", records[0].experiment, metric);
    let svg = line_plot_svg(&title, "SNR (dB)", metric.name(), &series, metric == Metric::MaeBins)?;
    fs::write(path, svg)?;
    Ok(())
}

/// One SNR plot per experiment and metric, plus a metric-versus-budget plot
/// for experiments that vary the pilot count. Returns the written paths.
pub fn emit_plots(records: &[ExperimentRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::validation("records", "nothing to plot"));
    }
    fs::create_dir_all(out_dir)?;
    let mut groups: BTreeMap<(String, Metric), Vec<ExperimentRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.experiment.clone(), r.metric)).or_default().push(r.clone());
    }
    let mut written = Vec::new();
    for ((exp, metric), recs) in groups {
        let path = out_dir.join(format!("{exp}_{metric}.svg"));
        emit_plot(&recs, &path)?;
        written.push(path);
        let budgets: std::collections::BTreeSet<usize> = recs.iter().map(|r| r.n_pilots).collect();
        if budgets.len() > 1 {
            let series = aggregate(recs.iter(), |r| (format!("{} {} dB", r.method, r.snr_db), r.n_pilots as f64));
            let svg = line_plot_svg(&format!("{exp} {metric}"), "pilot budget N_p", metric.name(), &series, metric == Metric::MaeBins)?;
            let path = out_dir.join(format!("{exp}_{metric}_vs_budget.svg"));
            fs::write(&path, svg)?;
            written.push(path);
        }
    }
    Ok(written)
}
