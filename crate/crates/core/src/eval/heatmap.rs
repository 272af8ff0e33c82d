use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;

use crate::error::{Error, Result};

const CELL: usize = 36;
const MARGIN: usize = 90;

/// Lightest to darkest blue, linearly interpolated.
const LIGHT: [f64; 3] = [247.0, 251.0, 255.0];
const DARK: [f64; 3] = [8.0, 48.0, 107.0];

/// Fill colour for `v` on a `[0, scale]` range, darker for larger values.
pub fn shade(v: f64, scale: f64) -> String {
    let t = if scale > 0.0 { (v / scale).clamp(0.0, 1.0) } else { 0.0 };
    let c: Vec<u8> = (0..3).map(|i| (LIGHT[i] + t * (DARK[i] - LIGHT[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

pub(crate) fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Colour scale: probabilities map onto `[0, 1]`, larger values onto their maximum.
fn scale_of(matrix: ArrayView2<'_, f64>) -> f64 {
    matrix.fold(1.0f64, |m, &v| m.max(v))
}

pub fn matrix_csv(matrix: ArrayView2<'_, f64>) -> String {
    let mut out = String::new();
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Standalone SVG grid; row labels on the left, column labels on top.
pub fn matrix_svg(matrix: ArrayView2<'_, f64>, row_labels: &[String], col_labels: &[String], title: &str) -> String {
    let (rows, cols) = matrix.dim();
    let scale = scale_of(matrix);
    let width = MARGIN + cols * CELL + 10;
    let height = MARGIN + rows * CELL + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="16" font-size="13">{}</text>"#, escape(title));
    for (c, label) in col_labels.iter().enumerate().take(cols) {
        let x = MARGIN + c * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, MARGIN - 8, escape(label));
    }
    for r in 0..rows {
        let y = MARGIN + r * CELL;
        if let Some(label) = row_labels.get(r) {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 6, y + CELL / 2 + 4, escape(label));
        }
        for c in 0..cols {
            let v = matrix[[r, c]];
            let x = MARGIN + c * CELL;
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#cccccc"><title>{v}</title></rect>"##,
                shade(v, scale)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.csv` (raw values, no header) and `<stem>.svg`.
pub fn export_heatmap(
    matrix: ArrayView2<'_, f64>,
    row_labels: &[String],
    col_labels: &[String],
    stem: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("heatmap entries must be finite".into()));
    }
    let stem = stem.as_ref();
    let csv = stem.with_extension("csv");
    let svg = stem.with_extension("svg");
    let title = stem.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write(&csv, &matrix_csv(matrix))?;
    write(&svg, &matrix_svg(matrix, row_labels, col_labels, &title))?;
    Ok((csv, svg))
}

/// Parses a headerless numeric CSV written by [`export_heatmap`].
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<ndarray::Array2<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Format("ragged matrix CSV".into()));
    }
    Ok(ndarray::Array2::from_shape_fn((rows.len(), cols), |(r, c)| rows[r][c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("L{i}")).collect()
    }

    #[test]
    fn identity_heatmap() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::<f64>::eye(2);
        let (csv, svg) = export_heatmap(m.view(), &labels(2), &labels(2), dir.path().join("eye")).unwrap();
        assert_eq!(std::fs::read_to_string(csv).unwrap(), "1,0\n0,1\n");
        let svg = std::fs::read_to_string(svg).unwrap();
        assert_eq!(svg.matches(&format!("fill=\"{}\"", shade(1.0, 1.0))).count(), 2);
        assert_eq!(svg.matches(&format!("fill=\"{}\"", shade(0.0, 1.0))).count(), 2);
    }

    #[test]
    fn zero_matrix_is_uniformly_light() {
        let svg = matrix_svg(Array2::<f64>::zeros((3, 3)).view(), &labels(3), &labels(3), "z");
        assert_eq!(svg.matches("fill=\"#f7fbff\"").count(), 9);
    }

    #[test]
    fn shading_is_monotone() {
        let lum = |hex: String| u32::from_str_radix(&hex[1..], 16).unwrap();
        assert!(lum(shade(0.2, 1.0)) > lum(shade(0.8, 1.0)));
    }

    #[test]
    fn deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = array![[0.1, 1.0 / 3.0], [2.0e-17, 0.9999999999999]];
        let (csv, svg) = export_heatmap(m.view(), &labels(2), &labels(2), dir.path().join("a")).unwrap();
        let first = std::fs::read(&svg).unwrap();
        export_heatmap(m.view(), &labels(2), &labels(2), dir.path().join("a")).unwrap();
        assert_eq!(first, std::fs::read(&svg).unwrap());
        let back = read_matrix_csv(csv).unwrap();
        assert!((&back - &m).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let m = array![[f64::NAN]];
        assert!(export_heatmap(m.view(), &labels(1), &labels(1), dir.path().join("x")).is_err());
    }
}
