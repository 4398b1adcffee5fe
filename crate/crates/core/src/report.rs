//! Plain-text summaries and static SVG figures: a confusion-matrix heat map
//! and metric-versus-labeled-size line charts.

use std::fmt::Write;

use crate::baselines::Curve;
use crate::error::Result;
use crate::evaluation::{clustering_alignment, ConfusionMatrix, ExperimentReport};

pub fn render_text(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "instances            {}", report.instances);
    let _ = writeln!(out, "qs accuracy          {:.4}", report.qs_accuracy);
    let _ = writeln!(
        out,
        "ae precision/recall  {:.4} / {:.4}",
        report.ae.precision, report.ae.recall
    );
    let _ = writeln!(
        out,
        "ae f1                {:.4}  (tp {} fp {} fn {})",
        report.ae.f1, report.ae.tp, report.ae.fp, report.ae.fn_
    );
    let _ = writeln!(
        out,
        "qs rejection @ {:.2}   {:.4}",
        report.p_th, report.qs_rejection_rate
    );
    let _ = writeln!(
        out,
        "ae acceptance @ {:.2}  {:.4}",
        report.p_th, report.ae_acceptance_rate
    );
    out.push('\n');
    out.push_str(&render_matrix(&report.confusion, &names(report)));
    out
}

fn names(report: &ExperimentReport) -> Vec<String> {
    report.categories.iter().map(|c| c.to_string()).collect()
}

/// Rows are gold labels, columns predictions.
pub fn render_matrix(m: &ConfusionMatrix, labels: &[String]) -> String {
    let width = labels.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut out = format!("{:>width$}", "gold\\pred");
    for (i, _) in labels.iter().enumerate() {
        let _ = write!(out, " {i:>6}");
    }
    out.push('\n');
    for (label, row) in labels.iter().zip(&m.counts) {
        let _ = write!(out, "{label:>width$}");
        for c in row {
            let _ = write!(out, " {c:>6}");
        }
        out.push('\n');
    }
    out
}

/// Raw and alignment-corrected cluster summary.
pub fn render_clusters(m: &ConfusionMatrix, labels: &[String]) -> Result<String> {
    let alignment = clustering_alignment(m)?;
    let mut out = String::new();
    let _ = writeln!(out, "raw accuracy      {:.4}", m.accuracy());
    let _ = writeln!(out, "aligned accuracy  {:.4}", alignment.accuracy);
    let _ = writeln!(out, "cluster assigned to each gold category:");
    for (g, &c) in alignment.permutation.iter().enumerate() {
        let _ = writeln!(
            out,
            "  {:<14} -> {:<14} top-2 share {:.3}",
            labels[g],
            labels[c],
            m.top_share(g, 2)
        );
    }
    out.push_str("\nraw\n");
    out.push_str(&render_matrix(m, labels));
    out.push_str("\naligned\n");
    out.push_str(&render_matrix(&m.permuted(&alignment.permutation), labels));
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heat map with cell shade proportional to the row-normalised count.
pub fn confusion_svg(m: &ConfusionMatrix, labels: &[String], title: &str) -> String {
    let n = m.size();
    let cell = 48;
    let left = 120;
    let top = 60;
    let w = left + n * cell + 20;
    let h = top + n * cell + 110;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2,
        escape(title)
    );
    let sums = m.row_sums();
    for (r, row) in m.counts.iter().enumerate() {
        let y = top + r * cell;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6,
            y + cell / 2 + 4,
            escape(&labels[r])
        );
        for (c, &count) in row.iter().enumerate() {
            let x = left + c * cell;
            let frac = if sums[r] == 0 {
                0.0
            } else {
                count as f64 / sums[r] as f64
            };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#999"/>"##
            );
            let color = if frac > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{color}">{count}</text>"#,
                x + cell / 2,
                y + cell / 2 + 4
            );
        }
    }
    for (c, label) in labels.iter().enumerate() {
        let x = left + c * cell + cell / 2;
        let y = top + n * cell + 10;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" transform="rotate(45 {x} {y})">{}</text>"#,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">predicted</text>"#,
        left + n * cell / 2,
        h - 8
    );
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Metric against labeled-set size (log-scaled x axis), one line per curve.
pub fn curves_svg(curves: &[Curve], title: &str) -> String {
    let (w, h) = (560.0, 380.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let sizes: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| (p.0.max(1)) as f64))
        .collect();
    let lo = sizes.iter().copied().fold(f64::INFINITY, f64::min).max(1.0).log2();
    let hi = sizes.iter().copied().fold(0.0, f64::max).max(2.0).log2();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |n: usize| left + ((n.max(1) as f64).log2() - lo) / span * (w - left - right);
    let py = |v: f64| top + (1.0 - v.clamp(0.0, 1.0)) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
            w - right,
            left - 6.0,
            y + 4.0
        );
    }
    let mut ticks: Vec<usize> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for t in ticks {
        let x = px(t);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{t}</text>"#,
            h - bottom + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">labeled sentences</text>"#,
        left + (w - left - right) / 2.0,
        h - 10.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(n, v)| format!("{:.1},{:.1}", px(n), py(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for &(n, v) in &c.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                px(n),
                py(v)
            );
        }
        let ly = top + 16.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{} ({})</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            c.kind,
            c.preset
        );
    }
    s.push_str("</svg>\n");
    s
}
