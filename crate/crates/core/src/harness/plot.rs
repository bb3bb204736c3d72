use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::RunReport;
use crate::{Error, Result};

pub const SVG_WIDTH: f64 = 800.0;
pub const SVG_HEIGHT: f64 = 500.0;

const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const CAP: f64 = 4.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Copy)]
struct Point {
    bias: f64,
    mean: f64,
    std: f64,
}

fn metric_names(r: &RunReport) -> BTreeSet<&str> {
    r.aggregates.iter().map(|a| a.metric.as_str()).collect()
}

/// SVG of `metric` against bias, one polyline per objective with ±std error
/// bars. Output bytes depend only on the inputs.
pub fn plot_curves(reports: &[RunReport], metric: &str) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(Error::Domain("no reports to plot".into()));
    };
    let names = metric_names(first);
    if let Some(bad) = reports.iter().find(|r| metric_names(r) != names) {
        return Err(Error::Schema(format!(
            "metric sets differ across reports: {:?} vs {:?}",
            names,
            metric_names(bad)
        )));
    }
    if !names.contains(metric) {
        return Err(Error::Schema(format!("reports carry no metric `{metric}`")));
    }

    let modes: BTreeSet<&str> = reports
        .iter()
        .flat_map(|r| r.aggregates.iter().map(|a| a.shift_mode.as_str()))
        .collect();
    let mut series: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    for a in reports.iter().flat_map(|r| &r.aggregates).filter(|a| a.metric == metric) {
        let name = if modes.len() > 1 {
            format!("{} ({})", a.objective, a.shift_mode)
        } else {
            a.objective.clone()
        };
        let pts = series.entry(name.clone()).or_default();
        if pts.iter().any(|p| p.bias == a.bias) {
            return Err(Error::Schema(format!("{name} has two points at bias {}", a.bias)));
        }
        pts.push(Point {
            bias: a.bias,
            mean: a.mean,
            std: a.std,
        });
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.bias.total_cmp(&b.bias));
    }
    let all: Vec<Point> = series.values().flatten().copied().collect();
    let biases: BTreeSet<u64> = all.iter().map(|p| p.bias.to_bits()).collect();
    if biases.len() < 2 {
        return Err(Error::Domain("need at least two bias points".into()));
    }

    let (x_lo, x_hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.bias), h.max(p.bias)));
    let (mut y_lo, mut y_hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| {
        (l.min(p.mean - p.std), h.max(p.mean + p.std))
    });
    let pad = if y_hi > y_lo { 0.05 * (y_hi - y_lo) } else { 0.5 };
    y_lo -= pad;
    y_hi += pad;

    let plot_w = SVG_WIDTH - LEFT - RIGHT;
    let plot_h = SVG_HEIGHT - TOP - BOTTOM;
    let sx = |b: f64| LEFT + (b - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |v: f64| TOP + (y_hi - v) / (y_hi - y_lo) * plot_h;

    let mut s = String::new();
    let w = &mut s;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    )
    .unwrap();
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        w,
        r#"<text x="{:.3}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{metric} vs bias</text>"#,
        LEFT + plot_w / 2.0
    )
    .unwrap();
    writeln!(
        w,
        r#"<g id="plot-area" data-y-min="{y_lo}" data-y-max="{y_hi}" data-height="{plot_h}">"#
    )
    .unwrap();
    // axes
    writeln!(
        w,
        r#"<line x1="{LEFT}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    )
    .unwrap();
    writeln!(
        w,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.3}" stroke="black"/>"#,
        TOP + plot_h
    )
    .unwrap();
    for bits in &biases {
        let b = f64::from_bits(*bits);
        let x = sx(b);
        writeln!(
            w,
            r#"<text x="{x:.3}" y="{:.3}" text-anchor="middle" font-family="sans-serif" font-size="12">{b:.2}</text>"#,
            TOP + plot_h + 18.0
        )
        .unwrap();
    }
    for i in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let y = sy(v);
        writeln!(
            w,
            r#"<line x1="{:.3}" y1="{y:.3}" x2="{LEFT}" y2="{y:.3}" stroke="black"/><text x="{:.3}" y="{:.3}" text-anchor="end" font-family="sans-serif" font-size="12">{v:.3}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        w,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" font-family="sans-serif" font-size="13">bias</text>"#,
        LEFT + plot_w / 2.0,
        SVG_HEIGHT - 15.0
    )
    .unwrap();

    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        writeln!(w, r#"<g class="series" data-name="{name}">"#).unwrap();
        let coords: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.3},{:.3}", sx(p.bias), sy(p.mean)))
            .collect();
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        )
        .unwrap();
        for p in pts {
            let (x, y0, y1) = (sx(p.bias), sy(p.mean - p.std), sy(p.mean + p.std));
            writeln!(
                w,
                r#"<line class="errbar" data-std="{}" x1="{x:.3}" y1="{y0:.3}" x2="{x:.3}" y2="{y1:.3}" stroke="{color}"/>"#,
                p.std
            )
            .unwrap();
            for y in [y0, y1] {
                writeln!(
                    w,
                    r#"<line x1="{:.3}" y1="{y:.3}" x2="{:.3}" y2="{y:.3}" stroke="{color}"/>"#,
                    x - CAP,
                    x + CAP
                )
                .unwrap();
            }
            writeln!(
                w,
                r#"<circle cx="{x:.3}" cy="{:.3}" r="3" fill="{color}"/>"#,
                sy(p.mean)
            )
            .unwrap();
        }
        let ly = TOP + 20.0 * i as f64 + 10.0;
        let lx = SVG_WIDTH - RIGHT + 20.0;
        writeln!(
            w,
            r#"<line x1="{lx:.3}" y1="{ly:.3}" x2="{:.3}" y2="{ly:.3}" stroke="{color}" stroke-width="2"/><text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="12">{name}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        )
        .unwrap();
        writeln!(w, "</g>").unwrap();
    }
    writeln!(w, "</g>").unwrap();
    writeln!(w, "</svg>").unwrap();
    Ok(s)
}
