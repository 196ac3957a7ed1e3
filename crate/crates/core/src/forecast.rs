//! Multi-step look-ahead prediction and the retention-bounded forecast cache.
//!
//! The rollout keeps a window of normalized tensors covering the model's
//! lookback, runs one forward pass per step, and appends each prediction to
//! the window so later steps consume earlier ones. Feedback happens in
//! normalized space; inversion to raw scale happens once per emitted record.
//! Negative raw values are clamped to zero only on export, so the internal
//! rollout stays faithful to the model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::ForecastError;
use crate::external::{day_of_week, is_weekend, ExternalRecord, ExternalSchema, HolidayCalendar};
use crate::grid::{FlowSeries, FlowTensor, GridSpec};
use crate::model::{forward, Branch, ModelInput};
use crate::tensor::Tensor;

/// Number of look-ahead steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon(pub usize);

impl Horizon {
    pub fn new(k: usize) -> Option<Horizon> {
        (k >= 1).then_some(Horizon(k))
    }
}

/// One predicted interval in raw flow units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub interval: i64,
    /// Raw-scale prediction; may contain small negative values.
    pub tensor: FlowTensor,
    pub produced_at: i64,
    pub checkpoint_id: String,
}

impl ForecastRecord {
    /// Export form: rounded to the nearest nonnegative integer count.
    pub fn export_tensor(&self) -> FlowTensor {
        self.tensor.map(|v| v.round().max(0.0))
    }
}

/// Interval indices read while producing one step of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAccess {
    pub target: i64,
    pub flow_reads: Vec<i64>,
    pub external_read: Option<i64>,
}

pub struct Rollout {
    pub records: Vec<ForecastRecord>,
    pub audit: Vec<StepAccess>,
}

/// Runs the k-step rollout. `history` must contain every interval in
/// `[n - lookback, n)` where `n` follows the last observed interval;
/// `externals` supplies encoded vectors for the k target intervals when the
/// model has an external branch.
pub fn predict_multi(
    checkpoint: &Checkpoint,
    history: &FlowSeries,
    externals: &[Vec<f64>],
    horizon: Horizon,
    produced_at: i64,
) -> Result<Vec<ForecastRecord>, ForecastError> {
    predict_multi_audited(checkpoint, history, externals, horizon, produced_at)
        .map(|rollout| rollout.records)
}

pub fn predict_multi_audited(
    checkpoint: &Checkpoint,
    history: &FlowSeries,
    externals: &[Vec<f64>],
    horizon: Horizon,
    produced_at: i64,
) -> Result<Rollout, ForecastError> {
    let config = &checkpoint.meta.model;
    let stats = &checkpoint.meta.stats;
    let k = horizon.0;
    let n = match history.last_interval() {
        Some(last) => last + 1,
        None => {
            return Err(ForecastError::InsufficientHistory { missing: 0 });
        }
    };
    let lookback = config.max_lookback() as i64;
    // Normalized window the rollout reads from and appends to.
    let mut window: BTreeMap<i64, Tensor> = BTreeMap::new();
    for t in n - lookback..n {
        match history.get(t) {
            Some(flow) => {
                window.insert(t, stats.apply_tensor(flow).to_tensor());
            }
            None => return Err(ForecastError::InsufficientHistory { missing: t }),
        }
    }
    if config.ext_dim > 0 && externals.len() < k {
        return Err(ForecastError::MissingExternals {
            needed: k,
            got: externals.len(),
        });
    }

    let checkpoint_id = checkpoint.id();
    let mut records = Vec::with_capacity(k);
    let mut audit = Vec::with_capacity(k);
    #[allow(clippy::needless_range_loop)] // externals may be legitimately empty
    for step in 0..k {
        let t = n + step as i64;
        let mut flow_reads = Vec::new();
        let gather = |branch: Branch, reads: &mut Vec<i64>| -> Vec<Tensor> {
            let len = branch.window_len(config) as i64;
            let stride = branch.stride(config) as i64;
            (1..=len)
                .rev()
                .map(|i| {
                    let idx = t - i * stride;
                    reads.push(idx);
                    window[&idx].clone()
                })
                .collect()
        };
        let input = ModelInput {
            closeness: gather(Branch::Closeness, &mut flow_reads),
            period: gather(Branch::Period, &mut flow_reads),
            trend: gather(Branch::Trend, &mut flow_reads),
            external: (config.ext_dim > 0).then(|| {
                Tensor::new(vec![config.ext_dim], externals[step].clone())
                    .expect("length validated by forward")
            }),
        };
        let prediction = forward(config, &checkpoint.params, &input)?;
        window.insert(t, prediction.clone());
        let raw = FlowTensor::from_tensor(&prediction.map(|v| stats.invert(v)))
            .expect("prediction is 2 x I x J");
        records.push(ForecastRecord {
            interval: t,
            tensor: raw,
            produced_at,
            checkpoint_id: checkpoint_id.clone(),
        });
        audit.push(StepAccess {
            target: t,
            flow_reads,
            external_read: (config.ext_dim > 0).then_some(t),
        });
    }
    Ok(Rollout { records, audit })
}

/// Where the externals for future intervals come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExternalPolicy {
    /// Use forecast records supplied by the caller.
    #[default]
    ForecastSupplied,
    /// Repeat the last observed weather while advancing the calendar fields.
    HoldLast,
}

/// Builds encoded external vectors for intervals `n .. n+k-1`.
#[allow(clippy::too_many_arguments)]
pub fn future_externals(
    grid: &GridSpec,
    schema: &ExternalSchema,
    policy: ExternalPolicy,
    observed: &[ExternalRecord],
    supplied: &[ExternalRecord],
    holidays: &HolidayCalendar,
    n: i64,
    k: usize,
) -> Result<Vec<Vec<f64>>, ForecastError> {
    match policy {
        ExternalPolicy::ForecastSupplied => {
            let mut out = Vec::with_capacity(k);
            for t in n..n + k as i64 {
                let record = supplied
                    .iter()
                    .find(|r| r.interval == t)
                    .ok_or(ForecastError::MissingExternals {
                        needed: k,
                        got: out.len(),
                    })?;
                out.push(schema.encode(record));
            }
            Ok(out)
        }
        ExternalPolicy::HoldLast => {
            let last = observed
                .iter()
                .filter(|r| r.interval < n)
                .max_by_key(|r| r.interval)
                .ok_or(ForecastError::MissingExternals { needed: k, got: 0 })?;
            let mut out = Vec::with_capacity(k);
            for t in n..n + k as i64 {
                let ts = grid.interval_start(t);
                let dow = day_of_week(ts);
                let record = ExternalRecord {
                    interval: t,
                    day_of_week: dow,
                    is_weekend: is_weekend(dow),
                    is_holiday: holidays.contains(ts),
                    weather_code: last.weather_code,
                    temperature: last.temperature,
                    wind_speed: last.wind_speed,
                };
                out.push(schema.encode(&record));
            }
            Ok(out)
        }
    }
}

/// Retention-bounded store of forecast records keyed by interval. A record
/// survives while `now - interval <= retention_intervals`; eviction never
/// resurrects anything.
#[derive(Debug, Clone, Default)]
pub struct ForecastCache {
    retention_intervals: i64,
    records: BTreeMap<i64, ForecastRecord>,
}

/// Two days expressed in interval counts (96 at a 30-minute interval).
pub fn two_day_retention(interval_seconds: u32) -> i64 {
    (2 * 86_400 / interval_seconds as i64).max(1)
}

impl ForecastCache {
    pub fn new(retention_intervals: i64) -> ForecastCache {
        ForecastCache {
            retention_intervals,
            records: BTreeMap::new(),
        }
    }

    /// Stores a record; an existing record for the same interval is replaced
    /// only by a newer production.
    pub fn put(&mut self, record: ForecastRecord) {
        match self.records.get(&record.interval) {
            Some(existing) if existing.produced_at > record.produced_at => {}
            _ => {
                self.records.insert(record.interval, record);
            }
        }
    }

    pub fn get(&self, interval: i64) -> Option<&ForecastRecord> {
        self.records.get(&interval)
    }

    /// Drops every record older than the retention window relative to `now`.
    pub fn evict(&mut self, now_interval: i64) {
        let cutoff = now_interval - self.retention_intervals;
        self.records.retain(|&t, _| t >= cutoff);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn retention(&self) -> i64 {
        self.retention_intervals
    }
}
