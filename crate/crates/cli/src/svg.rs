//! Minimal bar chart of relevance scores by layer.

use std::fmt::Write;

use relactrl_core::relevance::RelevanceRecord;

const BAR: f64 = 18.0;
const GAP: f64 = 4.0;
const PLOT_H: f64 = 200.0;
const LEFT: f64 = 40.0;
const TOP: f64 = 20.0;

pub fn crs_chart(records: &[RelevanceRecord], selected: &[usize]) -> String {
    let width = LEFT + records.len() as f64 * (BAR + GAP) + 20.0;
    let height = TOP + PLOT_H + 50.0;
    let base = TOP + PLOT_H;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        width - 10.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="black"/>"#
    );
    for tick in [0.0, 0.5, 1.0] {
        let y = base - tick * PLOT_H;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{tick:.1}</text>"#,
            LEFT - 4.0,
            y + 3.0
        );
    }
    for (i, r) in records.iter().enumerate() {
        let x = LEFT + GAP + i as f64 * (BAR + GAP);
        let h = r.crs * PLOT_H;
        let fill = if selected.contains(&r.layer_index) {
            "#1f4e79"
        } else {
            "#9fb8d0"
        };
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="{BAR}" height="{h}" fill="{fill}"><title>layer {}: {:.4}</title></rect>"#,
            base - h,
            r.layer_index,
            r.crs
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x + BAR / 2.0,
            base + 12.0,
            r.layer_index
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">layer index</text>"#,
        LEFT + (width - LEFT) / 2.0,
        base + 32.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">relevance score</text>"#,
        TOP + PLOT_H / 2.0,
        TOP + PLOT_H / 2.0
    );
    s.push_str("</svg>\n");
    s
}
