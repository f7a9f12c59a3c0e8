//! Deterministic standalone SVG figures: training curves, 2-D scatters and
//! distance bar charts. Output depends only on the input values.

use std::collections::BTreeMap;
use std::fmt::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Deserialize;

use crate::dataset::{DomainDataset, DomainTag};
use crate::divergence::{BridgeVerdict, DistanceReport};
use crate::error::{Error, Result};
use crate::pipelines::MetricRecord;

const WIDTH: f64 = 640.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const PANEL: f64 = 140.0;
const GAP: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(w: f64, h: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" \
         font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, body: &str) {
    let _ = writeln!(out, "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\">{}</text>", escape(body));
}

fn vtext(out: &mut String, x: f64, y: f64, body: &str) {
    let _ = writeln!(
        out,
        "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 {x:.2} {y:.2})\">{}</text>",
        escape(body)
    );
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo > 1e-12 * lo.abs().max(hi.abs()).max(1e-300) {
        (lo, hi)
    } else {
        let pad = 0.5 * lo.abs().max(1.0);
        (lo - pad, hi + pad)
    }
}

/// One panel per loss or accuracy series, iteration on the x axis.
pub fn curves_svg(records: &[MetricRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Validation("empty metrics log".into()));
    }
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        let it = r.iteration as f64;
        for (k, &v) in &r.losses {
            if v.is_finite() {
                series.entry(k.clone()).or_default().push((it, v));
            }
        }
        for (k, &v) in &r.accuracy {
            if v.is_finite() {
                series.entry(format!("accuracy/{k}")).or_default().push((it, v));
            }
        }
    }
    if series.is_empty() {
        return Err(Error::Validation("metrics log has no finite values".into()));
    }
    let (x0, x1) = range(records.iter().map(|r| r.iteration as f64));
    let plot_w = WIDTH - LEFT - RIGHT;
    let height = series.len() as f64 * (PANEL + GAP) + GAP / 2.0;
    let mut out = open(WIDTH, height);
    for (i, (name, pts)) in series.iter().enumerate() {
        let top = GAP / 2.0 + i as f64 * (PANEL + GAP);
        let (y0, y1) = range(pts.iter().map(|p| p.1));
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
        let py = |y: f64| top + PANEL - (y - y0) / (y1 - y0) * PANEL;
        let _ = writeln!(
            out,
            "<g class=\"panel\" data-series=\"{}\">\n<rect x=\"{LEFT}\" y=\"{top:.2}\" width=\"{plot_w}\" height=\"{PANEL}\" fill=\"none\" stroke=\"#444\"/>",
            escape(name)
        );
        text(&mut out, LEFT + plot_w / 2.0, top - 6.0, "middle", name);
        text(&mut out, LEFT - 4.0, top + 10.0, "end", &format!("{y1:.4}"));
        text(&mut out, LEFT - 4.0, top + PANEL, "end", &format!("{y0:.4}"));
        text(&mut out, LEFT, top + PANEL + 14.0, "start", &format!("{x0}"));
        text(&mut out, LEFT + plot_w, top + PANEL + 14.0, "end", &format!("{x1}"));
        text(&mut out, LEFT + plot_w / 2.0, top + PANEL + 26.0, "middle", "iteration");
        vtext(&mut out, LEFT - 50.0, top + PANEL / 2.0, name);
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.2\" points=\"{}\"/>",
            coords.join(" ")
        );
        if pts.len() == 1 {
            let _ = writeln!(out, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#1f77b4\"/>", px(pts[0].0), py(pts[0].1));
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Projects rows onto the two leading principal components. Each component
/// is signed so that its largest-magnitude entry is positive.
pub fn principal_components_2d(x: &[f64], dim: usize) -> Result<Vec<[f64; 2]>> {
    if dim < 2 {
        return Err(Error::Validation(format!("scatter needs at least 2 features, found {dim}")));
    }
    let n = x.len() / dim;
    if n == 0 {
        return Err(Error::Validation("scatter of an empty dataset".into()));
    }
    let m = DMatrix::from_row_slice(n, dim, x);
    let mean = m.row_mean();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2);
    for &k in &order[..2] {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let peak = v.iter().copied().fold(0.0f64, |p, c| if c.abs() > p.abs() { c } else { p });
        if peak < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    Ok(centered
        .row_iter()
        .map(|r| [r.dot(&axes[0].transpose()), r.dot(&axes[1].transpose())])
        .collect())
}

fn marker(out: &mut String, tag: DomainTag, x: f64, y: f64) {
    let _ = match tag {
        DomainTag::Source => writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"#1f77b4\"/>"),
        DomainTag::Bridge => writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"5\" height=\"5\" fill=\"#2ca02c\"/>",
            x - 2.5,
            y - 2.5
        ),
        DomainTag::Target => writeln!(
            out,
            "<polygon points=\"{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}\" fill=\"#d62728\"/>",
            x,
            y - 3.0,
            x - 3.0,
            y + 2.5,
            x + 3.0,
            y + 2.5
        ),
    };
}

/// Scatter of a dataset: raw features when 2-D, otherwise the first two
/// principal components. One marker shape per domain.
pub fn scatter_svg(dataset: &DomainDataset) -> Result<String> {
    let dim = dataset.dim;
    let flat = dataset.feature_matrix();
    let (pts, labels): (Vec<[f64; 2]>, [&str; 2]) = if dim == 2 {
        (flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(), ["f0", "f1"])
    } else {
        (principal_components_2d(&flat, dim)?, ["PC1", "PC2"])
    };
    if pts.is_empty() {
        return Err(Error::Validation("scatter of an empty dataset".into()));
    }
    let size = 480.0;
    let (x0, x1) = range(pts.iter().map(|p| p[0]));
    let (y0, y1) = range(pts.iter().map(|p| p[1]));
    let top = 30.0;
    let mut out = open(LEFT + size + 130.0, top + size + 50.0);
    let _ = writeln!(out, "<rect x=\"{LEFT}\" y=\"{top}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"#444\"/>");
    text(&mut out, LEFT + size / 2.0, top + size + 36.0, "middle", labels[0]);
    vtext(&mut out, LEFT - 48.0, top + size / 2.0, labels[1]);
    text(&mut out, LEFT, top + size + 14.0, "start", &format!("{x0:.3}"));
    text(&mut out, LEFT + size, top + size + 14.0, "end", &format!("{x1:.3}"));
    text(&mut out, LEFT - 4.0, top + size, "end", &format!("{y0:.3}"));
    text(&mut out, LEFT - 4.0, top + 10.0, "end", &format!("{y1:.3}"));
    for tag in DomainTag::ALL {
        let _ = writeln!(out, "<g class=\"domain\" data-domain=\"{}\">", tag.as_str());
        for (s, p) in dataset.samples.iter().zip(&pts) {
            if s.domain == tag {
                let x = LEFT + (p[0] - x0) / (x1 - x0) * size;
                let y = top + size - (p[1] - y0) / (y1 - y0) * size;
                marker(&mut out, tag, x, y);
            }
        }
        out.push_str("</g>\n");
    }
    out.push_str("<g class=\"legend\">\n");
    for (i, tag) in dataset.domains().into_iter().enumerate() {
        let (x, y) = (LEFT + size + 20.0, top + 10.0 + 18.0 * i as f64);
        marker(&mut out, tag, x, y);
        text(&mut out, x + 10.0, y + 4.0, "start", tag.as_str());
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

/// Bar per report. Each bar is drawn in data units inside a scaling group,
/// so its `height` attribute is the raw proxy A-distance.
pub fn distance_bars_svg(reports: &[DistanceReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Validation("no distance reports to plot".into()));
    }
    let plot_h = 300.0;
    let top = 30.0;
    let ymax = reports.iter().map(|r| r.a_distance).fold(2.0f64, f64::max);
    let scale = plot_h / ymax;
    let slot = 120.0;
    let bar = 60.0;
    let plot_w = slot * reports.len() as f64;
    let base = top + plot_h;
    let mut out = open(LEFT + plot_w + RIGHT, base + 50.0);
    let _ = writeln!(out, "<line x1=\"{LEFT}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"#444\"/>", LEFT + plot_w);
    let _ = writeln!(out, "<line x1=\"{LEFT}\" y1=\"{top}\" x2=\"{LEFT}\" y2=\"{base}\" stroke=\"#444\"/>");
    text(&mut out, LEFT - 4.0, base, "end", "0");
    text(&mut out, LEFT - 4.0, top + 10.0, "end", &format!("{ymax:.3}"));
    vtext(&mut out, LEFT - 40.0, top + plot_h / 2.0, "proxy A-distance");
    text(&mut out, LEFT + plot_w / 2.0, base + 40.0, "middle", "domain pair");
    for (i, r) in reports.iter().enumerate() {
        let x = LEFT + slot * i as f64 + (slot - bar) / 2.0;
        let name = format!("{}-{}", r.pair.0.as_str(), r.pair.1.as_str());
        let _ = writeln!(
            out,
            "<g class=\"bar\" data-pair=\"{name}\" transform=\"translate({x:.2} {base}) scale({bar} {})\">\
             <rect x=\"0\" y=\"0\" width=\"1\" height=\"{}\" fill=\"#1f77b4\" transform=\"scale(1 -1)\"/></g>",
            scale,
            r.a_distance
        );
        text(&mut out, x + bar / 2.0, base + 16.0, "middle", &name);
        text(&mut out, x + bar / 2.0, base - r.a_distance * scale - 4.0, "middle", &format!("{:.3}", r.a_distance));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Accepted inputs for distance bar charts.
#[derive(Deserialize)]
#[serde(untagged)]
pub enum DistanceInput {
    Verdict(BridgeVerdict),
    Many(Vec<DistanceReport>),
    One(DistanceReport),
}

impl DistanceInput {
    pub fn reports(&self) -> Vec<DistanceReport> {
        match self {
            DistanceInput::Verdict(v) => v.reports().into_iter().cloned().collect(),
            DistanceInput::Many(r) => r.clone(),
            DistanceInput::One(r) => vec![r.clone()],
        }
    }
}
