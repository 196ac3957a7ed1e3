//! The pull -> convert -> predict -> push loop around the cache.
//!
//! Each tick processes the latest completed interval: its trajectory batch is
//! pulled from `traj:<interval>`, converted into a flow tensor, appended to
//! the in-memory series tail, rolled out `horizon` steps, and the forecasts
//! are pushed back under `flow:pred:<t>` as single-tensor FLW1 blocks with a
//! retention TTL. Every processed tick reports the four stage durations.
//! HTTP handlers read an atomically swapped immutable snapshot; the tick
//! thread is the only writer.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use cityflow_core::checkpoint::{load_checkpoint, Checkpoint};
use cityflow_core::error::FormatError;
use cityflow_core::external::{ExternalRecord, ExternalTable};
use cityflow_core::forecast::{
    future_externals, predict_multi, two_day_retention, ExternalPolicy, ForecastCache,
    ForecastRecord, Horizon,
};
use cityflow_core::grid::{compute_flows, segment_by_interval, FlowSeries, FlowTensor, GridSpec};
use cityflow_core::io::{flw1_bytes, read_trajectory_csv};

use crate::kv::{KvError, KvStore, MemoryKv, RespClient};

pub const ENV_CACHE_URL: &str = "CITYFLOW_CACHE_URL";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cache: {0}")]
    Kv(#[from] KvError),
    #[error("format: {0}")]
    Format(#[from] FormatError),
    #[error("forecast: {0}")]
    Forecast(#[from] cityflow_core::error::ForecastError),
    #[error("grid: {0}")]
    Grid(#[from] cityflow_core::error::GridError),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CacheBackend {
    #[default]
    Memory,
    Tcp {
        addr: String,
    },
}

fn default_tick_seconds() -> u64 {
    60
}
fn default_timeout_ms() -> u64 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub checkpoint_path: PathBuf,
    /// Look-ahead steps pushed per tick.
    pub horizon: usize,
    #[serde(default = "default_tick_seconds")]
    pub tick_interval_seconds: u64,
    /// Records older than this many intervals are dropped; defaults to the
    /// two-day equivalent for the grid's interval length.
    #[serde(default)]
    pub retention_intervals: Option<i64>,
    #[serde(default)]
    pub cache: CacheBackend,
    /// Observed/forecast external records; required when the model uses the
    /// external branch.
    #[serde(default)]
    pub externals_path: Option<PathBuf>,
    #[serde(default)]
    pub external_policy: ExternalPolicy,
    #[serde(default = "default_timeout_ms")]
    pub cache_timeout_ms: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.horizon == 0 {
            return Err(PipelineError::Config("horizon must be >= 1".to_string()));
        }
        if self.tick_interval_seconds == 0 {
            return Err(PipelineError::Config(
                "tick interval must be > 0".to_string(),
            ));
        }
        Ok(())
    }

    pub fn retention(&self) -> i64 {
        self.retention_intervals
            .unwrap_or_else(|| two_day_retention(self.grid.interval_seconds))
    }

    /// Opens the configured cache backend; `CITYFLOW_CACHE_URL` overrides the
    /// configured endpoint.
    pub fn open_cache(&self) -> Result<Box<dyn KvStore>, PipelineError> {
        let timeout = Duration::from_millis(self.cache_timeout_ms);
        if let Ok(url) = std::env::var(ENV_CACHE_URL) {
            return Ok(Box::new(RespClient::connect(&url, timeout)?));
        }
        match &self.cache {
            CacheBackend::Memory => Ok(Box::new(MemoryKv::new())),
            CacheBackend::Tcp { addr } => Ok(Box::new(RespClient::connect(addr, timeout)?)),
        }
    }
}

/// FLW1 encoding of one forecast record (rounded, nonnegative export form).
pub fn forecast_flw1(grid: &GridSpec, record: &ForecastRecord) -> Result<Vec<u8>, FormatError> {
    let mut series = FlowSeries::new(grid.clone());
    series
        .append(record.interval, record.export_tensor())
        .expect("single segment");
    flw1_bytes(&series)
}

pub fn traj_key(interval: i64) -> String {
    format!("traj:{interval}")
}

pub fn forecast_key(interval: i64) -> String {
    format!("flow:pred:{interval}")
}

/// Immutable state published to HTTP readers after each successful tick.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub ticks: u64,
    pub latest: Option<(i64, FlowTensor)>,
    /// Recent observed intervals, oldest first, bounded by the retention.
    pub window: Vec<(i64, FlowTensor)>,
    pub forecasts: Vec<ForecastRecord>,
    pub horizon: usize,
    pub checkpoint_id: String,
}

pub type SharedSnapshot = Arc<RwLock<Arc<Snapshot>>>;

#[derive(Debug, Clone, PartialEq)]
pub enum TickOutcome {
    /// Forecasts for `steps` intervals were pushed.
    Processed { steps: usize, malformed_rows: usize },
    NoNewData,
    /// The rollout could not run; the earliest missing interval is named.
    InsufficientHistory { missing: i64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickReport {
    pub now: i64,
    pub interval: Option<i64>,
    /// `(stage name, wall time in ms)`; exactly four entries on a processed
    /// tick: pull, convert, predict, push.
    pub stages: Vec<(String, f64)>,
    pub outcome: TickOutcome,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    checkpoint: Checkpoint,
    checkpoint_id: String,
    kv: Box<dyn KvStore>,
    series: FlowSeries,
    externals: ExternalTable,
    cache: ForecastCache,
    last_processed: Option<i64>,
    ticks: u64,
    snapshot: SharedSnapshot,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Pipeline, PipelineError> {
        config.validate()?;
        let checkpoint = load_checkpoint(&config.checkpoint_path)?;
        let kv = config.open_cache()?;
        Pipeline::with_parts(config, checkpoint, kv)
    }

    /// Injects the cache and checkpoint directly (tests, embedded use).
    pub fn with_parts(
        config: PipelineConfig,
        checkpoint: Checkpoint,
        kv: Box<dyn KvStore>,
    ) -> Result<Pipeline, PipelineError> {
        config.validate()?;
        let externals = match &config.externals_path {
            Some(path) => {
                let file = std::fs::File::open(path).map_err(FormatError::Io)?;
                cityflow_core::external::read_externals_csv(std::io::BufReader::new(file))?
            }
            None => ExternalTable::default(),
        };
        if checkpoint.meta.model.ext_dim > 0 && externals.is_empty() {
            return Err(PipelineError::Config(
                "model uses externals but no externals_path configured".to_string(),
            ));
        }
        let retention = config.retention();
        let series = FlowSeries::new(config.grid.clone());
        let checkpoint_id = checkpoint.id();
        Ok(Pipeline {
            config,
            checkpoint,
            checkpoint_id,
            kv,
            series,
            externals,
            cache: ForecastCache::new(retention),
            last_processed: None,
            ticks: 0,
            snapshot: Arc::new(RwLock::new(Arc::new(Snapshot::default()))),
        })
    }

    pub fn snapshot_handle(&self) -> SharedSnapshot {
        Arc::clone(&self.snapshot)
    }

    pub fn series(&self) -> &FlowSeries {
        &self.series
    }

    pub fn forecast_cache(&self) -> &ForecastCache {
        &self.cache
    }

    /// Seeds the series tail from already-observed history (startup).
    pub fn preload_series(&mut self, series: &FlowSeries) -> Result<(), PipelineError> {
        for (t, tensor) in series.iter() {
            self.series.append(t, tensor.clone())?;
        }
        self.last_processed = self.series.last_interval();
        Ok(())
    }

    fn kv_get_with_retry(&mut self, key: &str) -> Result<Option<Vec<u8>>, PipelineError> {
        match self.kv.get(key) {
            Ok(v) => Ok(v),
            Err(_first) => Ok(self.kv.get(key)?),
        }
    }

    fn kv_set_with_retry(
        &mut self,
        key: &str,
        value: &[u8],
        ttl: Option<u64>,
    ) -> Result<(), PipelineError> {
        match self.kv.set(key, value, ttl) {
            Ok(()) => Ok(()),
            Err(_first) => Ok(self.kv.set(key, value, ttl)?),
        }
    }

    /// Encoded external vectors for the `k` intervals starting at `n`.
    fn future_external_vectors(&self, n: i64, k: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
        let config = &self.checkpoint.meta.model;
        if config.ext_dim == 0 {
            return Ok(Vec::new());
        }
        let schema = self
            .checkpoint
            .meta
            .ext_schema
            .as_ref()
            .ok_or_else(|| PipelineError::Config("checkpoint lacks external schema".into()))?;
        let records: Vec<ExternalRecord> = self.externals.records().to_vec();
        Ok(future_externals(
            &self.config.grid,
            schema,
            self.config.external_policy,
            &records,
            &records,
            &cityflow_core::external::HolidayCalendar::default(),
            n,
            k,
        )?)
    }

    /// One pass of the loop at wall-clock time `now` (unix seconds).
    pub fn tick(&mut self, now: i64) -> Result<TickReport, PipelineError> {
        let target = self.config.grid.interval_of(now) - 1;
        if self.last_processed.is_some_and(|last| last >= target) {
            return Ok(TickReport {
                now,
                interval: None,
                stages: Vec::new(),
                outcome: TickOutcome::NoNewData,
            });
        }
        let mut stages = Vec::with_capacity(4);

        let t0 = Instant::now();
        let batch = self.kv_get_with_retry(&traj_key(target))?;
        stages.push(("pull".to_string(), ms(t0)));
        let batch = match batch {
            Some(bytes) => bytes,
            None => {
                return Ok(TickReport {
                    now,
                    interval: Some(target),
                    stages,
                    outcome: TickOutcome::NoNewData,
                })
            }
        };

        let t1 = Instant::now();
        let (points, ingest) = read_trajectory_csv(batch.as_slice())?;
        let by_interval = segment_by_interval(&self.config.grid, &points);
        let empty = Default::default();
        let trajectories = by_interval.get(&target).unwrap_or(&empty);
        let flow = compute_flows(&self.config.grid, trajectories);
        self.series.append(target, flow)?;
        self.last_processed = Some(target);
        stages.push(("convert".to_string(), ms(t1)));

        let t2 = Instant::now();
        let n = target + 1;
        let vectors = self.future_external_vectors(n, self.config.horizon)?;
        let records = match predict_multi(
            &self.checkpoint,
            &self.series,
            &vectors,
            Horizon(self.config.horizon),
            now,
        ) {
            Ok(records) => records,
            Err(cityflow_core::error::ForecastError::InsufficientHistory { missing }) => {
                stages.push(("predict".to_string(), ms(t2)));
                return Ok(TickReport {
                    now,
                    interval: Some(target),
                    stages,
                    outcome: TickOutcome::InsufficientHistory { missing },
                });
            }
            Err(e) => return Err(e.into()),
        };
        stages.push(("predict".to_string(), ms(t2)));

        let t3 = Instant::now();
        let ttl = self.config.retention() as u64 * self.config.grid.interval_seconds as u64;
        for record in &records {
            let bytes = forecast_flw1(&self.config.grid, record)?;
            self.kv_set_with_retry(&forecast_key(record.interval), &bytes, Some(ttl))?;
            self.cache.put(record.clone());
        }
        self.cache.evict(target);
        stages.push(("push".to_string(), ms(t3)));

        self.ticks += 1;
        self.publish(target, &records);
        Ok(TickReport {
            now,
            interval: Some(target),
            stages,
            outcome: TickOutcome::Processed {
                steps: records.len(),
                malformed_rows: ingest.malformed,
            },
        })
    }

    fn publish(&mut self, latest: i64, forecasts: &[ForecastRecord]) {
        let retention = self.config.retention();
        let mut window = Vec::new();
        for t in (latest - retention + 1).max(
            self.series.first_interval().unwrap_or(latest),
        )..=latest
        {
            if let Some(tensor) = self.series.get(t) {
                window.push((t, tensor.clone()));
            }
        }
        let snapshot = Snapshot {
            ticks: self.ticks,
            latest: self.series.get(latest).map(|f| (latest, f.clone())),
            window,
            forecasts: forecasts.to_vec(),
            horizon: self.config.horizon,
            checkpoint_id: self.checkpoint_id.clone(),
        };
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snapshot);
    }

    /// Blocking loop: one tick per configured interval, forever (or until
    /// `max_ticks`).
    pub fn run(&mut self, max_ticks: Option<u64>) -> Result<(), PipelineError> {
        let mut done = 0u64;
        loop {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .expect("clock after epoch")
                .as_secs() as i64;
            match self.tick(now) {
                Ok(report) => {
                    eprintln!("tick at {now}: {:?}", report.outcome);
                }
                Err(e) => eprintln!("tick at {now} failed: {e}"),
            }
            done += 1;
            if let Some(max) = max_ticks {
                if done >= max {
                    return Ok(());
                }
            }
            std::thread::sleep(Duration::from_secs(self.config.tick_interval_seconds));
        }
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use cityflow_core::checkpoint::CheckpointMeta;
    use cityflow_core::io::write_trajectory_csv;
    use cityflow_core::model::{init_params, FusionKind, ModelConfig};
    use cityflow_core::norm::NormStats;
    use cityflow_core::rng::SplitMix64;

    fn grid() -> GridSpec {
        GridSpec {
            lon_min: 0.0,
            lon_max: 1.0,
            lat_min: 0.0,
            lat_max: 1.0,
            rows: 2,
            cols: 2,
            interval_seconds: 600,
            epoch_start: 0,
        }
    }

    fn checkpoint() -> Checkpoint {
        let config = ModelConfig {
            rows: 2,
            cols: 2,
            closeness_len: 2,
            period_len: 0,
            trend_len: 0,
            period: 4,
            trend_span: 8,
            residual_units: 1,
            filters: 3,
            kernel: 3,
            use_batch_norm: false,
            convs_per_unit: 2,
            relu_after_conv1: true,
            fusion: FusionKind::Parametric,
            ext_dim: 0,
            ext_hidden: 4,
            bn_epsilon: 1e-5,
            bn_momentum: 0.99,
        };
        Checkpoint {
            meta: CheckpointMeta {
                model: config.clone(),
                stats: NormStats::new(0.0, 10.0).unwrap(),
                ext_schema: None,
            },
            params: init_params(&config, 5).unwrap(),
        }
    }

    fn pipeline_config() -> PipelineConfig {
        PipelineConfig {
            grid: grid(),
            checkpoint_path: PathBuf::from("unused"),
            horizon: 2,
            tick_interval_seconds: 600,
            retention_intervals: Some(5),
            cache: CacheBackend::Memory,
            externals_path: None,
            external_policy: ExternalPolicy::ForecastSupplied,
            cache_timeout_ms: 500,
        }
    }

    fn csv_batch(interval: i64, seed: u64) -> Vec<u8> {
        let g = grid();
        let mut rng = SplitMix64::new(seed);
        let mut points = Vec::new();
        for obj in 0..6 {
            for s in 0..4 {
                points.push(cityflow_core::grid::GeoPoint {
                    object_id: format!("o{obj}"),
                    timestamp: g.interval_start(interval) + s * 120 + 1,
                    lon: rng.uniform(0.0, 1.0),
                    lat: rng.uniform(0.0, 1.0),
                });
            }
        }
        let mut out = Vec::new();
        write_trajectory_csv(&mut out, &points).unwrap();
        out
    }

    #[test]
    fn tick_with_no_data_is_a_noop() {
        let mut pipeline =
            Pipeline::with_parts(pipeline_config(), checkpoint(), Box::new(MemoryKv::new()))
                .unwrap();
        let report = pipeline.tick(1230).unwrap();
        assert_eq!(report.outcome, TickOutcome::NoNewData);
        assert_eq!(report.interval, Some(1));
        // Only the pull stage ran.
        assert_eq!(report.stages.len(), 1);
    }

    #[test]
    fn insufficient_history_is_reported_and_skipped() {
        let mut kv = MemoryKv::new();
        kv.set(&traj_key(0), &csv_batch(0, 1), None).unwrap();
        let mut pipeline =
            Pipeline::with_parts(pipeline_config(), checkpoint(), Box::new(kv)).unwrap();
        let report = pipeline.tick(610).unwrap();
        assert!(matches!(
            report.outcome,
            TickOutcome::InsufficientHistory { missing: -1 }
        ));
        assert_eq!(report.stages.len(), 3);
    }

    #[test]
    fn processed_tick_reports_exactly_four_stages() {
        let mut kv = MemoryKv::new();
        for t in 0..3 {
            kv.set(&traj_key(t), &csv_batch(t, t as u64 + 1), None)
                .unwrap();
        }
        let mut pipeline =
            Pipeline::with_parts(pipeline_config(), checkpoint(), Box::new(kv)).unwrap();
        let mut processed = None;
        for t in 0..3i64 {
            let now = (t + 1) * 600 + 10;
            let report = pipeline.tick(now).unwrap();
            if matches!(report.outcome, TickOutcome::Processed { .. }) {
                processed = Some(report);
            }
        }
        let report = processed.expect("lookback of 2 is satisfied by the third tick");
        let names: Vec<&str> = report.stages.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["pull", "convert", "predict", "push"]);
        assert!(report.stages.iter().all(|(_, ms)| *ms >= 0.0));
    }

    #[test]
    fn pushed_bytes_match_offline_export() {
        let mut kv = MemoryKv::new();
        for t in 0..4 {
            kv.set(&traj_key(t), &csv_batch(t, 100 + t as u64), None)
                .unwrap();
        }
        let mut pipeline =
            Pipeline::with_parts(pipeline_config(), checkpoint(), Box::new(kv)).unwrap();
        for t in 0..4i64 {
            pipeline.tick((t + 1) * 600 + 5).unwrap();
        }
        // Offline: same history, same model, direct rollout.
        let records = predict_multi(
            &checkpoint(),
            pipeline.series(),
            &[],
            Horizon(2),
            4 * 600 + 5,
        )
        .unwrap();
        for record in &records {
            let offline = forecast_flw1(&grid(), record).unwrap();
            let pushed = pipeline
                .kv
                .get(&forecast_key(record.interval))
                .unwrap()
                .expect("forecast pushed");
            assert_eq!(pushed, offline, "interval {}", record.interval);
        }
    }

    #[test]
    fn snapshot_is_published_after_processing() {
        let mut kv = MemoryKv::new();
        for t in 0..3 {
            kv.set(&traj_key(t), &csv_batch(t, 7 + t as u64), None)
                .unwrap();
        }
        let mut pipeline =
            Pipeline::with_parts(pipeline_config(), checkpoint(), Box::new(kv)).unwrap();
        let handle = pipeline.snapshot_handle();
        assert_eq!(handle.read().unwrap().ticks, 0);
        for t in 0..3i64 {
            pipeline.tick((t + 1) * 600 + 5).unwrap();
        }
        let snap = handle.read().unwrap().clone();
        assert_eq!(snap.ticks, 2);
        assert_eq!(snap.latest.as_ref().unwrap().0, 2);
        assert_eq!(snap.forecasts.len(), 2);
        assert_eq!(snap.horizon, 2);
    }
}
