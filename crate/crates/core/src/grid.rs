//! Grid partitioning of a bounding box and aggregation of GPS trajectories
//! into per-interval inflow/outflow tensors.
//!
//! A trajectory contributes one inflow to cell `(i, j)` for every consecutive
//! point pair that crosses into the cell, and one outflow for every pair that
//! crosses out. Points outside the bounding box count as "not in any cell",
//! so entering the covered area from outside registers as inflow. Trajectories
//! are scoped to a single interval: transitions across interval boundaries are
//! not counted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::tensor::Tensor;

/// A single GPS fix belonging to a moving object.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoPoint {
    pub object_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn in_valid_range(&self) -> bool {
        (-180.0..=180.0).contains(&self.lon) && (-90.0..=90.0).contains(&self.lat)
    }
}

/// Geographic bounding box split into `rows x cols` cells, plus the time
/// discretization. Row index follows latitude (south to north), column index
/// follows longitude (west to east).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub rows: usize,
    pub cols: usize,
    pub interval_seconds: u32,
    /// Timestamp at which interval index 0 begins.
    pub epoch_start: i64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        let mut problems = Vec::new();
        let lon_ok = self.lon_min.is_finite() && self.lon_max.is_finite() && self.lon_min < self.lon_max;
        if !lon_ok {
            problems.push("lon_min must be < lon_max");
        }
        let lat_ok = self.lat_min.is_finite() && self.lat_max.is_finite() && self.lat_min < self.lat_max;
        if !lat_ok {
            problems.push("lat_min must be < lat_max");
        }
        if self.rows == 0 {
            problems.push("rows must be >= 1");
        }
        if self.cols == 0 {
            problems.push("cols must be >= 1");
        }
        if self.interval_seconds == 0 {
            problems.push("interval_seconds must be > 0");
        }
        if let Some(first) = problems.first() {
            return Err(GridError::InvalidSpec {
                reason: first.to_string(),
            });
        }
        Ok(())
    }

    /// Cell containing the coordinate, if any. Cells are half-open
    /// `[lo, hi)` boxes except that the maximum boundary folds into the last
    /// row/column, so no in-bbox point is dropped.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<(usize, usize)> {
        if !(self.lon_min..=self.lon_max).contains(&lon)
            || !(self.lat_min..=self.lat_max).contains(&lat)
        {
            return None;
        }
        let j = ((lon - self.lon_min) / (self.lon_max - self.lon_min) * self.cols as f64) as usize;
        let i = ((lat - self.lat_min) / (self.lat_max - self.lat_min) * self.rows as f64) as usize;
        Some((i.min(self.rows - 1), j.min(self.cols - 1)))
    }

    pub fn locate_point(&self, point: &GeoPoint) -> Option<(usize, usize)> {
        self.locate(point.lon, point.lat)
    }

    /// Interval index containing the timestamp (floor division, so times
    /// before `epoch_start` yield negative indices).
    pub fn interval_of(&self, timestamp: i64) -> i64 {
        (timestamp - self.epoch_start).div_euclid(self.interval_seconds as i64)
    }

    pub fn interval_start(&self, interval: i64) -> i64 {
        self.epoch_start + interval * self.interval_seconds as i64
    }

    /// Center coordinate of a cell, used by the synthetic generator.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let lon = self.lon_min
            + (self.lon_max - self.lon_min) * (j as f64 + 0.5) / self.cols as f64;
        let lat = self.lat_min
            + (self.lat_max - self.lat_min) * (i as f64 + 0.5) / self.rows as f64;
        (lon, lat)
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Inflow/outflow observation for one interval: channel 0 is inflow, channel
/// 1 is outflow, each a `rows x cols` plane in row-major order. Raw tensors
/// hold integer counts; normalized tensors hold reals in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub const INFLOW: usize = 0;
pub const OUTFLOW: usize = 1;

impl FlowTensor {
    pub fn zeros(rows: usize, cols: usize) -> FlowTensor {
        FlowTensor {
            rows,
            cols,
            data: vec![0.0; 2 * rows * cols],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<FlowTensor, GridError> {
        if data.len() != 2 * rows * cols {
            return Err(GridError::TensorGridMismatch {
                rows,
                cols,
                grid_rows: rows,
                grid_cols: data.len() / (2 * cols.max(1)),
            });
        }
        Ok(FlowTensor { rows, cols, data })
    }

    /// Reinterpret a `2 x I x J` tensor as a flow observation.
    pub fn from_tensor(t: &Tensor) -> Option<FlowTensor> {
        match t.shape() {
            [2, i, j] => Some(FlowTensor {
                rows: *i,
                cols: *j,
                data: t.data().to_vec(),
            }),
            _ => None,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![2, self.rows, self.cols], self.data.clone()).expect("consistent shape")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.data[(channel * self.rows + i) * self.cols + j]
    }

    pub fn set(&mut self, channel: usize, i: usize, j: usize, value: f64) {
        self.data[(channel * self.rows + i) * self.cols + j] = value;
    }

    pub fn bump(&mut self, channel: usize, i: usize, j: usize) {
        self.data[(channel * self.rows + i) * self.cols + j] += 1.0;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let plane = self.rows * self.cols;
        &self.data[channel * plane..(channel + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FlowTensor {
        FlowTensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise sum with another observation of the same shape.
    pub fn merge(&self, other: &FlowTensor) -> Result<FlowTensor, GridError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(GridError::TensorGridMismatch {
                rows: other.rows,
                cols: other.cols,
                grid_rows: self.rows,
                grid_cols: self.cols,
            });
        }
        Ok(FlowTensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// True when every entry is a nonnegative integer (raw count form).
    pub fn is_raw_counts(&self) -> bool {
        self.data
            .iter()
            .all(|&v| v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64)
    }
}

/// A contiguous run of per-interval observations starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: i64,
    pub tensors: Vec<FlowTensor>,
}

impl Segment {
    pub fn end(&self) -> i64 {
        self.start + self.tensors.len() as i64
    }
}

/// Time-indexed flow observations: disjoint, sorted, internally gap-free
/// segments over a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSeries {
    pub grid: GridSpec,
    segments: Vec<Segment>,
}

impl FlowSeries {
    pub fn new(grid: GridSpec) -> FlowSeries {
        FlowSeries {
            grid,
            segments: Vec::new(),
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn push_segment(&mut self, start: i64, tensors: Vec<FlowTensor>) -> Result<(), GridError> {
        if tensors.is_empty() {
            return Ok(());
        }
        for t in &tensors {
            if t.rows() != self.grid.rows || t.cols() != self.grid.cols {
                return Err(GridError::TensorGridMismatch {
                    rows: t.rows(),
                    cols: t.cols(),
                    grid_rows: self.grid.rows,
                    grid_cols: self.grid.cols,
                });
            }
        }
        if let Some(last) = self.segments.last() {
            if start < last.end() {
                return Err(GridError::SegmentOverlap { interval: start });
            }
            if start == last.end() {
                // Contiguous with the previous segment: extend it.
                let last = self.segments.last_mut().expect("checked");
                last.tensors.extend(tensors);
                return Ok(());
            }
        }
        self.segments.push(Segment { start, tensors });
        Ok(())
    }

    /// Appends a single observation at `t`, extending the last segment when
    /// contiguous and opening a new one otherwise.
    pub fn append(&mut self, t: i64, tensor: FlowTensor) -> Result<(), GridError> {
        self.push_segment(t, vec![tensor])
    }

    pub fn get(&self, t: i64) -> Option<&FlowTensor> {
        for seg in &self.segments {
            if t >= seg.start && t < seg.end() {
                return Some(&seg.tensors[(t - seg.start) as usize]);
            }
        }
        None
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.tensors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn first_interval(&self) -> Option<i64> {
        self.segments.first().map(|s| s.start)
    }

    pub fn last_interval(&self) -> Option<i64> {
        self.segments.last().map(|s| s.end() - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &FlowTensor)> {
        self.segments.iter().flat_map(|seg| {
            seg.tensors
                .iter()
                .enumerate()
                .map(move |(k, t)| (seg.start + k as i64, t))
        })
    }

    /// Minimum and maximum over all stored values; `None` when empty.
    pub fn value_range(&self) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        for (_, tensor) in self.iter() {
            for &v in tensor.data() {
                range = Some(match range {
                    None => (v, v),
                    Some((lo, hi)) => (lo.min(v), hi.max(v)),
                });
            }
        }
        range
    }
}

/// Points of one interval grouped by object, sorted by timestamp.
pub type IntervalTrajectories = BTreeMap<String, Vec<GeoPoint>>;

/// Splits points into per-interval, per-object trajectories. Within one
/// object and interval, points are ordered by timestamp with input order as
/// the tie-break (stable sort).
pub fn segment_by_interval(
    grid: &GridSpec,
    points: &[GeoPoint],
) -> BTreeMap<i64, IntervalTrajectories> {
    let mut map: BTreeMap<i64, IntervalTrajectories> = BTreeMap::new();
    for p in points {
        let t = grid.interval_of(p.timestamp);
        map.entry(t)
            .or_default()
            .entry(p.object_id.clone())
            .or_default()
            .push(p.clone());
    }
    for trajectories in map.values_mut() {
        for traj in trajectories.values_mut() {
            traj.sort_by_key(|p| p.timestamp);
        }
    }
    map
}

/// Counts inflow/outflow transitions for the trajectories of one interval.
/// Each trajectory must already be sorted by timestamp.
pub fn compute_flows(grid: &GridSpec, trajectories: &IntervalTrajectories) -> FlowTensor {
    let mut flow = FlowTensor::zeros(grid.rows, grid.cols);
    for traj in trajectories.values() {
        add_trajectory_flows(grid, traj, &mut flow);
    }
    flow
}

fn add_trajectory_flows(grid: &GridSpec, traj: &[GeoPoint], flow: &mut FlowTensor) {
    for pair in traj.windows(2) {
        let prev = grid.locate_point(&pair[0]);
        let cur = grid.locate_point(&pair[1]);
        if prev == cur {
            continue;
        }
        if let Some((i, j)) = cur {
            flow.bump(INFLOW, i, j);
        }
        if let Some((i, j)) = prev {
            flow.bump(OUTFLOW, i, j);
        }
    }
}

/// Declared coverage of an input stream: intervals `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageSpan {
    pub start: i64,
    pub end: i64,
}

/// Builds a [`FlowSeries`] from raw points. With declared coverage, one
/// segment is emitted per span and intervals without points yield zero
/// tensors; without coverage, a single span from the first to the last
/// populated interval is inferred.
pub fn build_series(
    grid: &GridSpec,
    points: &[GeoPoint],
    coverage: &[CoverageSpan],
) -> Result<FlowSeries, GridError> {
    grid.validate()?;
    let by_interval = segment_by_interval(grid, points);
    let spans: Vec<CoverageSpan> = if coverage.is_empty() {
        match (by_interval.keys().next(), by_interval.keys().next_back()) {
            (Some(&lo), Some(&hi)) => vec![CoverageSpan {
                start: lo,
                end: hi + 1,
            }],
            _ => Vec::new(),
        }
    } else {
        let mut spans = coverage.to_vec();
        spans.sort_by_key(|s| s.start);
        spans
    };

    let mut series = FlowSeries::new(grid.clone());
    let empty = IntervalTrajectories::new();
    for span in spans {
        if span.end <= span.start {
            continue;
        }
        let tensors: Vec<FlowTensor> = (span.start..span.end)
            .map(|t| compute_flows(grid, by_interval.get(&t).unwrap_or(&empty)))
            .collect();
        series.push_segment(span.start, tensors)?;
    }
    Ok(series)
}
