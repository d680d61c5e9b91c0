//! SVG and PNG figures from a [`LeakageReport`], each with a CSV of the
//! plotted values next to it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use fedleak_core::fl_sim::n_iterations;
use fedleak_core::metrics::mean;
use plotters::coord::Shift;
use plotters::prelude::*;

use crate::error::{CliError, Result};
use crate::report::LeakageReport;

pub const FONT_ENV: &str = "FEDLEAK_FONT";
const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];
const SIZE: (u32, u32) = (720, 480);

fn err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("plot: {e}"))
}

/// Registers a TrueType font for text rendering (once per process).
fn ensure_font() -> Result<()> {
    static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    FONT.get_or_init(|| {
        let candidates: Vec<PathBuf> = std::env::var_os(FONT_ENV)
            .map(PathBuf::from)
            .into_iter()
            .chain(FONT_CANDIDATES.iter().map(PathBuf::from))
            .collect();
        for p in &candidates {
            if let Ok(bytes) = std::fs::read(p) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                    return Ok(());
                }
            }
        }
        Err(format!("no usable TrueType font found; set {FONT_ENV}"))
    })
    .clone()
    .map_err(CliError::Runtime)
}

#[derive(Clone, Debug, Default)]
pub struct Series {
    pub name: String,
    /// `(x, y, lo, hi)`; `lo`/`hi` equal `y` when there is no band.
    pub points: Vec<(f64, f64, f64, f64)>,
    pub band: bool,
}

#[derive(Clone, Debug, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Drawn against a right-hand `[0, 1]` axis.
    pub overlay: Option<Series>,
    pub overlay_label: String,
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    if !(lo.is_finite() && hi.is_finite()) {
        return 0.0..1.0;
    }
    let span = hi - lo;
    let pad = if span > 0.0 { 0.05 * span } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad)..(hi + pad)
}

fn draw_line_chart<DB: DrawingBackend>(root: &DrawingArea<DB, Shift>, c: &LineChart) -> Result<()> {
    root.fill(&WHITE).map_err(err)?;
    let all = c.series.iter().flat_map(|s| &s.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, _, lo, hi) in all.clone() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    if let Some(o) = &c.overlay {
        for &(x, ..) in &o.points {
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    let mut chart = ChartBuilder::on(root)
        .caption(&c.title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .right_y_label_area_size(if c.overlay.is_some() { 55 } else { 0 })
        .build_cartesian_2d(padded(x0, x1), padded(y0, y1))
        .map_err(err)?
        .set_secondary_coord(padded(x0, x1), 0.0..1.05);
    chart
        .configure_mesh()
        .x_desc(&c.x_label)
        .y_desc(&c.y_label)
        .light_line_style(WHITE)
        .draw()
        .map_err(err)?;
    for (i, s) in c.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        if s.band && s.points.len() > 1 {
            let mut poly: Vec<(f64, f64)> = s.points.iter().map(|p| (p.0, p.3)).collect();
            poly.extend(s.points.iter().rev().map(|p| (p.0, p.2)));
            chart
                .draw_series(std::iter::once(Polygon::new(poly, color.mix(0.2).filled())))
                .map_err(err)?;
        }
        if s.band {
            chart
                .draw_series(s.points.iter().map(|p| PathElement::new(vec![(p.0, p.2), (p.0, p.3)], color)))
                .map_err(err)?;
        }
        chart
            .draw_series(LineSeries::new(s.points.iter().map(|p| (p.0, p.1)), color.stroke_width(2)))
            .map_err(err)?
            .label(&s.name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(s.points.iter().map(|p| Circle::new((p.0, p.1), 3, color.filled())))
            .map_err(err)?;
    }
    if let Some(o) = &c.overlay {
        chart
            .configure_secondary_axes()
            .y_desc(&c.overlay_label)
            .draw()
            .map_err(err)?;
        chart
            .draw_secondary_series(LineSeries::new(
                o.points.iter().map(|p| (p.0, p.1)),
                BLACK.stroke_width(1),
            ))
            .map_err(err)?
            .label(&o.name)
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLACK));
        chart
            .draw_secondary_series(o.points.iter().map(|p| TriangleMarker::new((p.0, p.1), 4, BLACK.filled())))
            .map_err(err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

fn write_chart_csv(path: &Path, c: &LineChart) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series", "x", "y", "lo", "hi"])?;
    for s in c.series.iter().chain(&c.overlay) {
        for &(x, y, lo, hi) in &s.points {
            w.serialize((&s.name, x, y, lo, hi))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn render_line_chart(dir: &Path, name: &str, c: &LineChart) -> Result<Vec<PathBuf>> {
    let svg = dir.join(format!("{name}.svg"));
    let png = dir.join(format!("{name}.png"));
    let data = dir.join(format!("{name}.csv"));
    draw_line_chart(&SVGBackend::new(&svg, SIZE).into_drawing_area(), c)?;
    draw_line_chart(&BitMapBackend::new(&png, SIZE).into_drawing_area(), c)?;
    write_chart_csv(&data, c)?;
    Ok(vec![svg, png, data])
}

fn draw_scatter<DB: DrawingBackend>(root: &DrawingArea<DB, Shift>, report: &LeakageReport) -> Result<()> {
    root.fill(&WHITE).map_err(err)?;
    let pts = &report.embedding;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let mut chart = ChartBuilder::on(root)
        .caption("Embedding of reconstructions and originals", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(padded(x0, x1), padded(y0, y1))
        .map_err(err)?;
    chart.configure_mesh().light_line_style(WHITE).draw().map_err(err)?;
    let mut sigmas: Vec<f64> = pts.iter().filter(|p| !p.is_original).map(|p| p.sigma0).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    for (i, &s) in sigmas.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(
                pts.iter()
                    .filter(|p| !p.is_original && p.sigma0 == s)
                    .map(|p| Circle::new((p.x, p.y), 4, color.filled())),
            )
            .map_err(err)?
            .label(format!("σ0 = {s}"))
            .legend(move |(x, y)| Circle::new((x + 8, y), 4, color.filled()));
    }
    chart
        .draw_series(pts.iter().filter(|p| p.is_original).map(|p| Cross::new((p.x, p.y), 5, BLACK.stroke_width(2))))
        .map_err(err)?
        .label("original")
        .legend(|(x, y)| Cross::new((x + 8, y), 5, BLACK.stroke_width(2)));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

fn render_scatter(dir: &Path, report: &LeakageReport) -> Result<Vec<PathBuf>> {
    let svg = dir.join("embedding.svg");
    let png = dir.join("embedding.png");
    let data = dir.join("embedding.csv");
    draw_scatter(&SVGBackend::new(&svg, SIZE).into_drawing_area(), report)?;
    draw_scatter(&BitMapBackend::new(&png, SIZE).into_drawing_area(), report)?;
    let mut w = csv::Writer::from_path(&data)?;
    w.write_record(["x", "y", "client", "sigma0", "is_original"])?;
    for p in &report.embedding {
        w.serialize((p.x, p.y, &p.client_id, p.sigma0, p.is_original))?;
    }
    w.flush()?;
    Ok(vec![svg, png, data])
}

fn point(x: f64, y: f64) -> (f64, f64, f64, f64) {
    (x, y, y, y)
}

/// Series family on the σ0 axis: DP-SGD runs are drawn apart from the
/// undefended and Gaussian runs.
fn family(defense: &str) -> &'static str {
    if defense.starts_with("dpsgd") {
        "dp-sgd"
    } else {
        "gaussian"
    }
}

fn lowest_noise_defense(report: &LeakageReport) -> Option<String> {
    report
        .accuracy
        .iter()
        .min_by(|a, b| a.sigma0.total_cmp(&b.sigma0))
        .map(|a| a.defense.clone())
}

pub fn ssim_vs_round(report: &LeakageReport) -> LineChart {
    let mut by: BTreeMap<(String, String), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in &report.records {
        by.entry((r.leakage.client_id.clone(), r.leakage.defense.clone()))
            .or_default()
            .entry(r.leakage.round)
            .or_default()
            .push(r.mean_ssim);
    }
    LineChart {
        title: "SSIM vs FL round".into(),
        x_label: "round".into(),
        y_label: "SSIM".into(),
        series: by
            .into_iter()
            .map(|((client, defense), rounds)| Series {
                name: format!("{client} ({defense})"),
                points: rounds.into_iter().map(|(r, v)| point(r as f64, mean(&v))).collect(),
                band: false,
            })
            .collect(),
        ..Default::default()
    }
}

/// Mean SSIM of the least-noised run per client, keyed by a client
/// property.
fn ssim_by_client_property(report: &LeakageReport, key: impl Fn(usize, usize) -> usize) -> Vec<(f64, f64)> {
    let Some(def) = lowest_noise_defense(report) else {
        return Vec::new();
    };
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in report.records.iter().filter(|r| r.leakage.defense == def) {
        if let Some(c) = report.config.plan.clients.iter().find(|c| c.id == r.leakage.client_id) {
            by.entry(key(c.batch_size, c.n_train)).or_default().push(r.mean_ssim);
        }
    }
    by.into_iter().map(|(k, v)| (k as f64, mean(&v))).collect()
}

pub fn ssim_vs_batch_size(report: &LeakageReport) -> LineChart {
    LineChart {
        title: "SSIM vs local batch size".into(),
        x_label: "batch size".into(),
        y_label: "SSIM".into(),
        series: vec![Series {
            name: "mean SSIM".into(),
            points: ssim_by_client_property(report, |bs, _| bs)
                .into_iter()
                .map(|(x, y)| point(x, y))
                .collect(),
            band: false,
        }],
        ..Default::default()
    }
}

pub fn ssim_vs_iterations(report: &LeakageReport) -> LineChart {
    LineChart {
        title: "SSIM vs local iterations".into(),
        x_label: "local iterations".into(),
        y_label: "SSIM".into(),
        series: vec![Series {
            name: "mean SSIM".into(),
            points: ssim_by_client_property(report, |bs, n| n_iterations(n, bs))
                .into_iter()
                .map(|(x, y)| point(x, y))
                .collect(),
            band: false,
        }],
        ..Default::default()
    }
}

pub fn rdlv_vs_sigma0(report: &LeakageReport) -> LineChart {
    let mut by: BTreeMap<(String, &str), BTreeMap<u64, Vec<(f64, f64, f64)>>> = BTreeMap::new();
    for r in &report.records {
        let l = &r.leakage;
        by.entry((l.client_id.clone(), family(&l.defense)))
            .or_default()
            .entry(l.sigma0.to_bits())
            .or_default()
            .push((l.rdlv_mean, l.rdlv_lo, l.rdlv_hi));
    }
    let series = by
        .into_iter()
        .map(|((client, fam), xs)| {
            let mut points: Vec<(f64, f64, f64, f64)> = xs
                .into_iter()
                .map(|(bits, v)| {
                    let n = v.len() as f64;
                    let m = v.iter().map(|t| t.0).sum::<f64>() / n;
                    let lo = v.iter().map(|t| t.1).sum::<f64>() / n;
                    let hi = v.iter().map(|t| t.2).sum::<f64>() / n;
                    (f64::from_bits(bits), m, lo.min(m), hi.max(m))
                })
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name: if fam == "gaussian" { client } else { format!("{client} ({fam})") },
                points,
                band: true,
            }
        })
        .collect();
    let mut acc: Vec<(f64, f64, f64, f64)> = report
        .accuracy
        .iter()
        .filter(|a| family(&a.defense) == "gaussian")
        .filter_map(|a| a.best_test_accuracy.or(a.best_valid_accuracy).map(|v| point(a.sigma0, v)))
        .collect();
    acc.sort_by(|a, b| a.0.total_cmp(&b.0));
    LineChart {
        title: "RDLV vs DP noise".into(),
        x_label: "σ0".into(),
        y_label: "RDLV".into(),
        series,
        overlay: (!acc.is_empty()).then(|| Series {
            name: "best-model accuracy".into(),
            points: acc,
            band: false,
        }),
        overlay_label: "test accuracy".into(),
    }
}

pub fn iip_vs_sigma0(report: &LeakageReport) -> LineChart {
    let mut by: BTreeMap<(String, &str), Vec<(f64, f64, f64, f64)>> = BTreeMap::new();
    for e in &report.iip {
        by.entry((e.client_id.clone(), family(&e.defense)))
            .or_default()
            .push(point(e.sigma0, e.score));
    }
    LineChart {
        title: "IIP vs DP noise".into(),
        x_label: "σ0".into(),
        y_label: "IIP".into(),
        series: by
            .into_iter()
            .map(|((client, fam), mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name: if fam == "gaussian" { client } else { format!("{client} ({fam})") },
                    points,
                    band: false,
                }
            })
            .collect(),
        ..Default::default()
    }
}

/// Renders every figure into `dir`; returns the files written.
pub fn plot(report: &LeakageReport, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_font()?;
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    files.extend(render_line_chart(dir, "ssim_vs_round", &ssim_vs_round(report))?);
    files.extend(render_line_chart(dir, "ssim_vs_batch_size", &ssim_vs_batch_size(report))?);
    files.extend(render_line_chart(dir, "ssim_vs_iterations", &ssim_vs_iterations(report))?);
    files.extend(render_line_chart(dir, "rdlv_vs_sigma0", &rdlv_vs_sigma0(report))?);
    files.extend(render_line_chart(dir, "iip_vs_sigma0", &iip_vs_sigma0(report))?);
    files.extend(render_scatter(dir, report)?);
    Ok(files)
}
