//! On-disk formats: the trajectory CSV and the `FLW1` flow-series binary.
//!
//! Trajectory CSV: UTF-8, header `object_id,timestamp,lon,lat`, one point per
//! row, timestamp in integer seconds. Malformed rows (wrong field count,
//! unparseable numbers, coordinates outside valid ranges) are counted and
//! skipped rather than failing the whole ingest.
//!
//! `FLW1` stores one contiguous run of flow tensors: magic `FLW1`, then
//! little-endian `u32 rows`, `u32 cols`, `i64 epoch_start`,
//! `u32 interval_seconds`, `u32 n_tensors`, `u64 first_interval_index`,
//! followed by `n_tensors * 2 * rows * cols` little-endian `u32` counts in
//! channel-major, row-major order. A file may hold several consecutive blocks
//! (one per segment of a gapped series); all blocks must agree on the grid
//! fields. The format carries no geographic bounding box, so a series read
//! back from `FLW1` uses a unit bbox placeholder; callers that need geography
//! supply the original grid spec for validation.

use std::io::{BufRead, Read, Write};

use crate::error::FormatError;
use crate::grid::{FlowSeries, FlowTensor, GeoPoint, GridSpec};

pub const TRAJECTORY_HEADER: &str = "object_id,timestamp,lon,lat";
const FLW1_MAGIC: [u8; 4] = *b"FLW1";

/// Summary of a CSV ingest: parsed and skipped row counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub points: usize,
    pub malformed: usize,
}

pub fn read_trajectory_csv(
    reader: impl BufRead,
) -> Result<(Vec<GeoPoint>, IngestReport), FormatError> {
    let mut points = Vec::new();
    let mut report = IngestReport::default();
    let mut lines = reader.lines();
    match lines.next() {
        Some(header) => {
            let header = header?;
            if header.trim_end() != TRAJECTORY_HEADER {
                return Err(FormatError::Malformed {
                    context: "trajectory csv header",
                    reason: format!("expected `{TRAJECTORY_HEADER}`, got `{header}`"),
                });
            }
        }
        None => {
            return Err(FormatError::Malformed {
                context: "trajectory csv",
                reason: "empty input".to_string(),
            })
        }
    }
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        match parse_point(&line) {
            Some(p) => {
                points.push(p);
                report.points += 1;
            }
            None => report.malformed += 1,
        }
    }
    Ok((points, report))
}

fn parse_point(line: &str) -> Option<GeoPoint> {
    let mut fields = line.split(',');
    let object_id = fields.next()?.to_string();
    let timestamp: i64 = fields.next()?.trim().parse().ok()?;
    let lon: f64 = fields.next()?.trim().parse().ok()?;
    let lat: f64 = fields.next()?.trim().parse().ok()?;
    if fields.next().is_some() || object_id.is_empty() {
        return None;
    }
    let point = GeoPoint {
        object_id,
        timestamp,
        lon,
        lat,
    };
    point.in_valid_range().then_some(point)
}

pub fn write_trajectory_csv(
    mut writer: impl Write,
    points: &[GeoPoint],
) -> Result<(), FormatError> {
    writeln!(writer, "{TRAJECTORY_HEADER}")?;
    for p in points {
        writeln!(writer, "{},{},{},{}", p.object_id, p.timestamp, p.lon, p.lat)?;
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes every segment of the series as one `FLW1` block.
pub fn write_flw1(mut writer: impl Write, series: &FlowSeries) -> Result<(), FormatError> {
    let bytes = flw1_bytes(series)?;
    writer.write_all(&bytes)?;
    Ok(())
}

/// In-memory `FLW1` encoding of a series (used for cache values).
pub fn flw1_bytes(series: &FlowSeries) -> Result<Vec<u8>, FormatError> {
    let grid = &series.grid;
    let mut out = Vec::new();
    for segment in series.segments() {
        if segment.start < 0 {
            return Err(FormatError::NegativeInterval {
                index: segment.start,
            });
        }
        out.extend_from_slice(&FLW1_MAGIC);
        put_u32(&mut out, grid.rows as u32);
        put_u32(&mut out, grid.cols as u32);
        out.extend_from_slice(&grid.epoch_start.to_le_bytes());
        put_u32(&mut out, grid.interval_seconds);
        put_u32(&mut out, segment.tensors.len() as u32);
        out.extend_from_slice(&(segment.start as u64).to_le_bytes());
        for tensor in &segment.tensors {
            for (offset, &v) in tensor.data().iter().enumerate() {
                if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                    return Err(FormatError::NonIntegralCount { value: v, offset });
                }
                put_u32(&mut out, v as u32);
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.data.len() {
            return Err(FormatError::Truncated { context });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn i64(&mut self, context: &'static str) -> Result<i64, FormatError> {
        Ok(i64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Reads all `FLW1` blocks from the input. The returned series carries a
/// unit-bbox grid spec; see [`read_flw1_with_grid`] to attach real geography.
pub fn read_flw1(mut reader: impl Read) -> Result<FlowSeries, FormatError> {
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;
    flw1_from_bytes(&data)
}

pub fn flw1_from_bytes(data: &[u8]) -> Result<FlowSeries, FormatError> {
    let mut cursor = Cursor { data, pos: 0 };
    let mut series: Option<FlowSeries> = None;
    loop {
        if cursor.done() {
            break;
        }
        let magic: [u8; 4] = cursor.take(4, "magic")?.try_into().unwrap();
        if magic != FLW1_MAGIC {
            return Err(FormatError::BadMagic {
                expected: FLW1_MAGIC,
                got: magic,
            });
        }
        let rows = cursor.u32("rows")? as usize;
        let cols = cursor.u32("cols")? as usize;
        let epoch_start = cursor.i64("epoch_start")?;
        let interval_seconds = cursor.u32("interval_seconds")?;
        let n_tensors = cursor.u32("n_tensors")? as usize;
        let first_interval = cursor.u64("first_interval_index")? as i64;
        if rows == 0 || cols == 0 || interval_seconds == 0 {
            return Err(FormatError::Malformed {
                context: "flw1 header",
                reason: format!("rows={rows} cols={cols} interval={interval_seconds}"),
            });
        }
        let grid = GridSpec {
            lon_min: 0.0,
            lon_max: 1.0,
            lat_min: 0.0,
            lat_max: 1.0,
            rows,
            cols,
            interval_seconds,
            epoch_start,
        };
        let series = match &mut series {
            Some(existing) => {
                if existing.grid.rows != rows
                    || existing.grid.cols != cols
                    || existing.grid.epoch_start != epoch_start
                    || existing.grid.interval_seconds != interval_seconds
                {
                    return Err(FormatError::Malformed {
                        context: "flw1 block",
                        reason: "blocks disagree on grid fields".to_string(),
                    });
                }
                existing
            }
            None => {
                series = Some(FlowSeries::new(grid));
                series.as_mut().unwrap()
            }
        };
        let plane = 2 * rows * cols;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let raw = cursor.take(4 * plane, "flow counts")?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push(FlowTensor::from_data(rows, cols, data).expect("sized above"));
        }
        series
            .push_segment(first_interval, tensors)
            .map_err(|e| FormatError::Malformed {
                context: "flw1 block",
                reason: e.to_string(),
            })?;
    }
    series.ok_or(FormatError::Truncated {
        context: "flw1 (empty input)",
    })
}

/// Reads `FLW1` and validates the temporal/grid fields against a full grid
/// spec, returning a series that carries the supplied geography.
pub fn read_flw1_with_grid(reader: impl Read, grid: &GridSpec) -> Result<FlowSeries, FormatError> {
    let series = read_flw1(reader)?;
    if series.grid.rows != grid.rows
        || series.grid.cols != grid.cols
        || series.grid.epoch_start != grid.epoch_start
        || series.grid.interval_seconds != grid.interval_seconds
    {
        return Err(FormatError::Malformed {
            context: "flw1 grid",
            reason: format!(
                "file has {}x{} grid at interval {}s, spec has {}x{} at {}s",
                series.grid.rows,
                series.grid.cols,
                series.grid.interval_seconds,
                grid.rows,
                grid.cols,
                grid.interval_seconds
            ),
        });
    }
    let mut attached = FlowSeries::new(grid.clone());
    for segment in series.segments() {
        attached
            .push_segment(segment.start, segment.tensors.clone())
            .expect("segments already valid");
    }
    Ok(attached)
}
