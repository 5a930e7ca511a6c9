//! Plain SVG charts. Output depends only on the report, so files are
//! byte-stable across runs.

use std::fmt::Write as _;

use super::{AccuracyReport, Column};
use crate::editor::EditMethod;
use crate::kg_store::MAX_NEIGHBOR_HOPS;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f",
];
const PLOT_H: f64 = 200.0;
const TOP: f64 = 40.0;
const LEFT: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn y(acc: f64) -> f64 {
    TOP + PLOT_H * (1.0 - acc)
}

fn frame(svg: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{LEFT:.0}" y="20" font-size="14">{}</text>"#,
        esc(title)
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT:.0}" y1="{yy:.1}" x2="{x2:.0}" y2="{yy:.1}" stroke="#ddd"/><text x="{tx:.0}" y="{ty:.1}" text-anchor="end">{v:.2}</text>"##,
            yy = y(v),
            x2 = width - 10.0,
            tx = LEFT - 5.0,
            ty = y(v) + 4.0,
        );
    }
}

fn series_label(model: &str, domain: &str, column: Column) -> String {
    format!("{model} / {domain} / {}", column.name())
}

/// Grouped bars: one group per (model, domain, column), left vs right method.
pub fn pair_chart(report: &AccuracyReport, left: EditMethod, right: EditMethod) -> String {
    let rows: Vec<_> = report
        .comparisons
        .iter()
        .filter(|r| r.left == left && r.right == right)
        .collect();
    let group_w = 60.0;
    let width = LEFT + 20.0 + group_w * rows.len().max(1) as f64 + 160.0;
    let height = TOP + PLOT_H + 30.0 + 14.0 * rows.len() as f64 + 10.0;
    let mut svg = String::new();
    frame(&mut svg, width, height, &format!("{left} vs {right}"));
    for (i, r) in rows.iter().enumerate() {
        let gx = LEFT + 10.0 + group_w * i as f64;
        for (j, (acc, color)) in [(r.left_accuracy, PALETTE[0]), (r.right_accuracy, PALETTE[1])]
            .into_iter()
            .enumerate()
        {
            let x = gx + 22.0 * j as f64;
            match acc {
                Some(a) => {
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{x:.1}" y="{top:.1}" width="20" height="{h:.1}" fill="{color}"><title>{a:.4}</title></rect>"#,
                        top = y(a),
                        h = PLOT_H * a,
                    );
                }
                None => {
                    let _ = writeln!(
                        svg,
                        r#"<text x="{tx:.1}" y="{ty:.1}" text-anchor="middle" font-size="9">n/a</text>"#,
                        tx = x + 10.0,
                        ty = y(0.0) - 3.0,
                    );
                }
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{tx:.1}" y="{ty:.1}" text-anchor="middle">{n}</text>"#,
            tx = gx + 21.0,
            ty = y(0.0) + 14.0,
            n = i + 1,
        );
        let _ = writeln!(
            svg,
            r#"<text x="{LEFT:.0}" y="{ty:.1}">{n}: {label}</text>"#,
            ty = TOP + PLOT_H + 40.0 + 14.0 * i as f64,
            n = i + 1,
            label = esc(&series_label(&r.model, &r.domain, r.column)),
        );
    }
    let lx = width - 150.0;
    for (k, (m, color)) in [(left, PALETTE[0]), (right, PALETTE[1])].into_iter().enumerate() {
        let ly = TOP + 14.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.0}" y="{ry:.0}" width="10" height="10" fill="{color}"/><text x="{tx:.0}" y="{ty:.0}">{m}</text>"#,
            ry = ly,
            tx = lx + 14.0,
            ty = ly + 9.0,
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// One line per (model, domain, column) over hops 1..=5.
pub fn hop_chart(report: &AccuracyReport, method: EditMethod) -> String {
    let mut series = Vec::new();
    for (model, mr) in &report.models {
        for (domain, dr) in &mr.domains {
            for (column, cr) in &dr.columns {
                if let Some(hops) = cr.hops.get(&method) {
                    let pts: Vec<Option<f64>> = (1..=MAX_NEIGHBOR_HOPS)
                        .map(|h| hops.get(&h).and_then(|c| c.accuracy))
                        .collect();
                    series.push((series_label(model, domain, *column), pts));
                }
            }
        }
    }
    let step = 80.0;
    let width = LEFT + 20.0 + step * (MAX_NEIGHBOR_HOPS as f64 - 1.0) + 40.0;
    let height = TOP + PLOT_H + 40.0 + 14.0 * series.len() as f64 + 10.0;
    let mut svg = String::new();
    frame(&mut svg, width, height, &format!("{method} accuracy by hop"));
    let x = |h: usize| LEFT + 20.0 + step * h as f64;
    for h in 0..MAX_NEIGHBOR_HOPS as usize {
        let _ = writeln!(
            svg,
            r#"<text x="{tx:.1}" y="{ty:.1}" text-anchor="middle">{n}</text>"#,
            tx = x(h),
            ty = y(0.0) + 14.0,
            n = h + 1,
        );
    }
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, svg: &mut String| {
            if run.len() > 1 {
                let _ = writeln!(
                    svg,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    run.join(" ")
                );
            }
            run.clear();
        };
        for (h, p) in pts.iter().enumerate() {
            match p {
                Some(a) => {
                    run.push(format!("{:.1},{:.1}", x(h), y(*a)));
                    let _ = writeln!(
                        svg,
                        r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"><title>{a:.4}</title></circle>"#,
                        x(h),
                        y(*a)
                    );
                }
                None => flush(&mut run, &mut svg),
            }
        }
        flush(&mut run, &mut svg);
        let ly = TOP + PLOT_H + 30.0 + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{LEFT:.0}" y="{ly:.0}" width="10" height="10" fill="{color}"/><text x="{tx:.0}" y="{ty:.0}">{}</text>"#,
            esc(label),
            tx = LEFT + 14.0,
            ty = ly + 9.0,
        );
    }
    svg.push_str("</svg>\n");
    svg
}
