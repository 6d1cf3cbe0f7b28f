//! Static renderings of evaluation results.

use std::fmt::Write;

use sha2::{Digest, Sha256};

use super::RetrievalReport;

/// First 12 hex digits of the SHA-256 of `text`; used to tag report file names.
pub fn config_hash(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Recall@1 matrix as a self-contained SVG heatmap (white 0 → dark blue 1).
pub fn recall_heatmap_svg(report: &RetrievalReport) -> String {
    const CELL: usize = 56;
    const MARGIN: usize = 70;
    let m = report.modalities.len();
    let side = MARGIN + m * CELL + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{}" font-family="sans-serif" font-size="12">"#,
        side + 24
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}">recall@1, pool {} (rows: query, columns: candidate), mean {:.3}</text>"#,
        side + 16,
        report.pool_size,
        report.mean
    );
    for (i, q) in report.modalities.iter().enumerate() {
        let y = MARGIN + i * CELL;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{q}</text>"#, MARGIN - 6, y + CELL / 2 + 4);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{q}</text>"#,
            MARGIN + i * CELL + CELL / 2,
            MARGIN - 8
        );
        for (j, v) in report.recall[i].iter().enumerate() {
            let v = v.clamp(0.0, 1.0);
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * v).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0));
            let ink = if v > 0.5 { "white" } else { "black" };
            let x = MARGIN + j * CELL;
            let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#ccc"/>"##);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{:.2}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4,
                v
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
