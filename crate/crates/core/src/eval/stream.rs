use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::heatmap::{escape, shade};
use crate::autoencoder::AutoencoderModel;
use crate::error::{Error, Result};
use crate::peephole::PeepholePipeline;
use crate::telemetry::{chunk_stream, Stream, WINDOW};

/// One sliding window of the stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    /// First sample of the window.
    pub origin: u64,
    pub score: f64,
    pub flagged: bool,
    /// `argmax p`; `None` for unflagged placeholder rows.
    pub tag_pred: Option<usize>,
    /// Peephole, all zeros for unflagged rows.
    pub p: Array1<f64>,
    pub d_argmax: Option<usize>,
}

/// A maximal run of consecutive flagged windows.
#[derive(Clone, Debug, PartialEq)]
pub struct FlaggedRegion {
    pub first_row: usize,
    pub last_row: usize,
    /// First sample covered by any window of the run.
    pub start_sample: u64,
    /// Last sample covered (inclusive).
    pub end_sample: u64,
    /// `argmax Σ p` over the run.
    pub dominant_tag: usize,
}

impl FlaggedRegion {
    /// Whether the samples `[start, start + len)` intersect the region.
    pub fn overlaps(&self, start: u64, len: u64) -> bool {
        start <= self.end_sample && start + len > self.start_sample
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamTrace {
    pub vocabulary: Vec<String>,
    pub threshold: f64,
    pub stride: usize,
    pub rows: Vec<TraceRow>,
    pub regions: Vec<FlaggedRegion>,
}

impl StreamTrace {
    pub fn flagged_fraction(&self) -> f64 {
        self.rows.iter().filter(|r| r.flagged).count() as f64 / self.rows.len().max(1) as f64
    }

    /// `T × windows` matrix of peepholes, zero columns for unflagged windows.
    pub fn heatmap(&self) -> Array2<f64> {
        let t = self.vocabulary.len();
        Array2::from_shape_fn((t, self.rows.len()), |(i, j)| self.rows[j].p[i])
    }

    /// `origin,score,flag,tag_pred,p_0..p_{T-1},d_argmax`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("origin,score,flag,tag_pred");
        for i in 0..self.vocabulary.len() {
            let _ = write!(s, ",p_{i}");
        }
        s.push_str(",d_argmax\n");
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{}",
                r.origin,
                r.score,
                u8::from(r.flagged),
                r.tag_pred.map(|t| self.vocabulary[t].clone()).unwrap_or_default()
            );
            for v in &r.p {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", r.d_argmax.map(|d| d.to_string()).unwrap_or_default());
        }
        s
    }
}

fn regions(rows: &[TraceRow]) -> Vec<FlaggedRegion> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        if !rows[i].flagged {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < rows.len() && rows[j + 1].flagged {
            j += 1;
        }
        let mut total = rows[i].p.clone();
        for r in &rows[i + 1..=j] {
            total += &r.p;
        }
        out.push(FlaggedRegion {
            first_row: i,
            last_row: j,
            start_sample: rows[i].origin,
            end_sample: rows[j].origin + WINDOW as u64 - 1,
            dominant_tag: crate::peephole::argmax(total.view()),
        });
        i = j + 1;
    }
    out
}

/// Slides the detector over `stream` and attaches peepholes to flagged windows.
pub fn explain_stream(
    model: &AutoencoderModel,
    pipeline: &PeepholePipeline,
    stream: &Stream,
    stride: usize,
) -> Result<StreamTrace> {
    let threshold = model
        .threshold
        .ok_or_else(|| Error::Input("the detector threshold is not set".into()))?;
    let windows = chunk_stream(stream, stride)?;
    let t = pipeline.vocabulary().len();
    let rows: Vec<TraceRow> = pipeline
        .explain_chunks(model, &windows)?
        .into_iter()
        .map(|e| match e.report {
            Some(r) => TraceRow {
                origin: e.origin,
                score: e.score,
                flagged: true,
                tag_pred: Some(r.predicted),
                d_argmax: Some(r.cluster()),
                p: r.p,
            },
            None => TraceRow {
                origin: e.origin,
                score: e.score,
                flagged: false,
                tag_pred: None,
                p: Array1::zeros(t),
                d_argmax: None,
            },
        })
        .collect();
    Ok(StreamTrace {
        vocabulary: pipeline.vocabulary().to_vec(),
        threshold,
        stride,
        regions: regions(&rows),
        rows,
    })
}

const FIG_WIDTH: f64 = 1000.0;
const LEFT: f64 = 70.0;
const BAND: f64 = 160.0;
const GAP: f64 = 30.0;

fn polyline(points: &[(f64, f64)], colour: &str) -> String {
    let mut s = String::from("<polyline fill=\"none\" stroke-width=\"0.8\" stroke=\"");
    s.push_str(colour);
    s.push_str("\" points=\"");
    for (i, (x, y)) in points.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.2},{y:.2}");
    }
    s.push_str("\"/>\n");
    s
}

/// Three stacked bands: telemetry, score against `τ`, and the peephole heatmap.
pub fn stream_figure(stream: &Stream, trace: &StreamTrace) -> String {
    let plot_w = FIG_WIDTH - LEFT - 10.0;
    let n = stream.len().max(1) as f64;
    let x_of = |sample: f64| LEFT + plot_w * (sample - stream.start_index as f64) / n;
    let t = trace.vocabulary.len();
    let heat_h = (t as f64 * 18.0).max(40.0);
    let height = GAP + BAND + GAP + BAND + GAP + heat_h + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{FIG_WIDTH}" height="{height}" viewBox="0 0 {FIG_WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{FIG_WIDTH}" height="{height}" fill="white"/>"#);

    // Telemetry band.
    let top = GAP;
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}">telemetry</text>"#, top - 8.0);
    let (lo, hi) = stream.samples.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];
    for (ch, col) in stream.samples.columns().into_iter().enumerate() {
        let pts: Vec<(f64, f64)> = col
            .iter()
            .enumerate()
            .map(|(i, &v)| (x_of(stream.start_index as f64 + i as f64), top + BAND * (1.0 - (v - lo) / span)))
            .collect();
        s.push_str(&polyline(&pts, palette[ch / 4 % palette.len()]));
    }

    // Score band, log scale.
    let top = GAP + BAND + GAP;
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}">score (log10) and threshold</text>"#, top - 8.0);
    let logs: Vec<f64> = trace.rows.iter().map(|r| r.score.max(1e-12).log10()).collect();
    let tau = trace.threshold.max(1e-12).log10();
    let (lo, hi) = logs.iter().fold((tau, tau), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y_of = |v: f64| top + BAND * (1.0 - (v - lo) / span);
    let centre = WINDOW as f64 / 2.0;
    let pts: Vec<(f64, f64)> = trace
        .rows
        .iter()
        .zip(&logs)
        .map(|(r, &l)| (x_of(r.origin as f64 + centre), y_of(l)))
        .collect();
    s.push_str(&polyline(&pts, "#333333"));
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="#d62728" stroke-dasharray="4 3"/>"##,
        LEFT + plot_w,
        y_of(tau),
        y_of(tau)
    );

    // Peephole heatmap band.
    let top = GAP + BAND + GAP + BAND + GAP;
    let row_h = heat_h / t.max(1) as f64;
    for (i, label) in trace.vocabulary.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            top + row_h * (i as f64 + 0.7),
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{top}" width="{plot_w:.2}" height="{heat_h:.2}" fill="{}"/>"#,
        shade(0.0, 1.0)
    );
    let cell_w = (plot_w * trace.stride as f64 / n).max(0.5);
    for r in trace.rows.iter().filter(|r| r.flagged) {
        for (i, &v) in r.p.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell_w:.2}" height="{row_h:.2}" fill="{}"/>"#,
                x_of(r.origin as f64 + centre),
                top + row_h * i as f64,
                shade(v, 1.0)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `stream_trace.csv` and `stream_report.svg` into `dir`.
pub fn write_stream_report(dir: impl AsRef<Path>, stream: &Stream, trace: &StreamTrace) -> Result<()> {
    let dir = dir.as_ref();
    let csv = dir.join("stream_trace.csv");
    std::fs::write(&csv, trace.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let svg = dir.join("stream_report.svg");
    std::fs::write(&svg, stream_figure(stream, trace)).map_err(|e| Error::io(&svg, e))
}
