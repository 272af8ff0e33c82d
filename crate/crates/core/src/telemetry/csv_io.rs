//! Telemetry CSV: header `sample_index,ch00,...,ch15`, optionally followed by
//! `tag_kind,tag_wheel,tag_param_json` for labeled datasets.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, Split, Stream, TelemetryChunk, N_CHANNELS, WINDOW};
use crate::anomaly::AnomalyTag;
use crate::error::{Error, Result};

fn channel_names() -> Vec<String> {
    (0..N_CHANNELS).map(|c| format!("ch{c:02}")).collect()
}

const TAG_COLUMNS: [&str; 3] = ["tag_kind", "tag_wheel", "tag_param_json"];

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Column indices of `sample_index` and the sixteen channels (plus tag columns when requested).
fn locate_columns(header: &csv::StringRecord, labeled: bool) -> Result<Vec<usize>> {
    let mut wanted = vec!["sample_index".to_string()];
    wanted.extend(channel_names());
    if labeled {
        wanted.extend(TAG_COLUMNS.iter().map(|s| s.to_string()));
    }
    wanted
        .iter()
        .map(|name| {
            header.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("missing column `{name}`"),
            })
        })
        .collect()
}

struct Row {
    index: u64,
    values: [f64; N_CHANNELS],
    tag: Option<(String, String, String)>,
    line: usize,
}

fn read_rows<R: Read>(path: &Path, reader: R, labeled: bool) -> Result<Vec<Row>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols = locate_columns(&header, labeled)?;
    let mut rows: Vec<Row> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let cell = |i: usize| record.get(cols[i]).unwrap_or("").trim();
        let index: u64 = cell(0).parse().map_err(|_| Error::Parse {
            line,
            msg: format!("sample_index `{}` is not a non-negative integer", cell(0)),
        })?;
        if let Some(prev) = rows.last() {
            if index <= prev.index {
                return Err(Error::Parse {
                    line,
                    msg: format!("sample_index {index} does not increase (previous {})", prev.index),
                });
            }
        }
        let mut values = [0.0f64; N_CHANNELS];
        for (c, v) in values.iter_mut().enumerate() {
            let raw = cell(c + 1);
            *v = raw.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("ch{c:02} value `{raw}` is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("ch{c:02} value `{raw}` is not finite"),
                });
            }
        }
        let tag = labeled.then(|| {
            (
                cell(N_CHANNELS + 1).to_string(),
                cell(N_CHANNELS + 2).to_string(),
                cell(N_CHANNELS + 3).to_string(),
            )
        });
        rows.push(Row {
            index,
            values,
            tag,
            line,
        });
    }
    Ok(rows)
}

/// Reads a telemetry stream. Rows must be consecutive sample indices.
pub fn read_stream_csv(path: impl AsRef<Path>) -> Result<Stream> {
    let path = path.as_ref();
    let rows = read_rows(path, open(path)?, false)?;
    let start = rows.first().map_or(0, |r| r.index);
    for (i, r) in rows.iter().enumerate() {
        if r.index != start + i as u64 {
            return Err(Error::Parse {
                line: r.line,
                msg: format!("gap in sample_index: expected {}, found {}", start + i as u64, r.index),
            });
        }
    }
    let mut samples = Array2::zeros((rows.len(), N_CHANNELS));
    for (i, r) in rows.iter().enumerate() {
        samples.row_mut(i).assign(&ndarray::ArrayView1::from(&r.values));
    }
    Stream::new(start, samples)
}

pub fn write_stream_csv(path: impl AsRef<Path>, stream: &Stream) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(create(path)?);
    let mut text = String::from("sample_index");
    for name in channel_names() {
        text.push(',');
        text.push_str(&name);
    }
    text.push('\n');
    for (r, row) in stream.samples.rows().into_iter().enumerate() {
        text.push_str(&(stream.start_index + r as u64).to_string());
        for v in row {
            text.push(',');
            // shortest representation that round-trips exactly
            text.push_str(&format!("{v:?}"));
        }
        text.push('\n');
        if text.len() > 1 << 16 {
            out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
            text.clear();
        }
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes a tagged dataset, repeating each chunk's tag on its 16 rows.
pub fn write_labeled_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Input("dataset carries no labels".into()))?;
    let mut wtr = csv::Writer::from_writer(std::io::BufWriter::new(create(path)?));
    let mut header = vec!["sample_index".to_string()];
    header.extend(channel_names());
    header.extend(TAG_COLUMNS.iter().map(|s| s.to_string()));
    wtr.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (chunk, tag) in ds.chunks().iter().zip(labels) {
        let (kind, wheel, params) = tag.to_columns();
        for (r, row) in chunk.values().rows().into_iter().enumerate() {
            let mut rec = Vec::with_capacity(N_CHANNELS + 4);
            rec.push((chunk.origin() + r as u64).to_string());
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            rec.push(kind.clone());
            rec.push(wheel.clone());
            rec.push(params.clone());
            wtr.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Reads a tagged dataset written by [`write_labeled_csv`]: blocks of 16 consecutive rows sharing one tag.
pub fn read_labeled_csv(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let rows = read_rows(path, open(path)?, true)?;
    if rows.len() % WINDOW != 0 {
        return Err(Error::Parse {
            line: rows.last().map_or(1, |r| r.line),
            msg: format!("{} rows is not a whole number of {WINDOW}-row chunks", rows.len()),
        });
    }
    let mut chunks = Vec::with_capacity(rows.len() / WINDOW);
    let mut labels = Vec::with_capacity(rows.len() / WINDOW);
    for block in rows.chunks(WINDOW) {
        let first = &block[0];
        for (r, row) in block.iter().enumerate() {
            if row.index != first.index + r as u64 || row.tag != first.tag {
                return Err(Error::Parse {
                    line: row.line,
                    msg: "chunk rows must be consecutive and share one tag".into(),
                });
            }
        }
        let (kind, wheel, params) = first.tag.as_ref().expect("labeled rows carry tags");
        let tag = AnomalyTag::from_columns(kind, wheel, params).map_err(|msg| Error::Parse {
            line: first.line,
            msg,
        })?;
        let mut values = Array2::zeros((WINDOW, N_CHANNELS));
        for (r, row) in block.iter().enumerate() {
            values.row_mut(r).assign(&ndarray::ArrayView1::from(&row.values));
        }
        chunks.push(TelemetryChunk::new(values, first.index)?);
        labels.push(tag);
    }
    Dataset::new(chunks, split, Some(labels))
}
