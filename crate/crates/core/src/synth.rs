//! Deterministic synthetic trajectory generator.
//!
//! Agents live in `home_cells` and work in `office_cells`. On weekdays each
//! participating agent commutes home -> office in a morning window and back
//! in an evening window; weekends see sparser leisure trips between random
//! cells. Participation carries a multiplicative week-over-week trend, and
//! scheduled weather events multiply movement probability by a suppression
//! factor. Trips are emitted as teleport-free point sequences (consecutive
//! points share a cell or are edge-adjacent) inside a single interval, so
//! the flow counts they induce are directly interpretable.
//!
//! All randomness comes from one `SplitMix64` stream consumed in a fixed
//! order, so a config is reproducible byte for byte.

use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::external::{day_of_week, is_weekend, ExternalRecord, HolidayCalendar};
use crate::grid::{build_series, CoverageSpan, FlowSeries, GeoPoint, GridSpec};
use crate::io::{read_trajectory_csv, write_trajectory_csv};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherEvent {
    pub start_interval: i64,
    /// Exclusive end.
    pub end_interval: i64,
    /// Multiplies movement probability inside the event, in `[0, 1]`.
    pub suppression: f64,
}

impl WeatherEvent {
    pub fn covers(&self, interval: i64) -> bool {
        (self.start_interval..self.end_interval).contains(&interval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid: GridSpec,
    pub n_agents: usize,
    pub n_intervals: usize,
    /// Daily cycle length in intervals; must tile a calendar day so weekday
    /// structure lines up with real timestamps.
    pub intervals_per_day: usize,
    pub home_cells: Vec<(usize, usize)>,
    pub office_cells: Vec<(usize, usize)>,
    /// Weekday commute participation probability per agent.
    pub commute_probability: f64,
    /// Weekend leisure-trip probability per agent per day.
    pub weekend_activity: f64,
    /// Multiplicative participation growth per week.
    pub trend_growth_per_week: f64,
    pub weather_events: Vec<WeatherEvent>,
    /// Probability of skipping a commute / adding a wander trip per day.
    pub noise: f64,
    /// Fraction of agents walking a fixed personal loop every day (two trips
    /// at fixed time slots drawn once per agent). Background volume scales
    /// with the weekly trend through deterministic thinning, so it adds
    /// dense, almost noise-free daily structure across the grid.
    #[serde(default)]
    pub background_fraction: f64,
    /// Holiday day indices (days since the epoch); holidays suppress
    /// commuting like weekends.
    #[serde(default)]
    pub holiday_days: Vec<i64>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        self.grid.validate()?;
        let fail = |reason: String| Err(GridError::InvalidSpec { reason });
        if self.intervals_per_day < 2 {
            return fail("intervals_per_day must be >= 2".to_string());
        }
        if self.intervals_per_day as i64 * self.grid.interval_seconds as i64 != 86_400 {
            return fail(format!(
                "intervals_per_day ({}) x interval_seconds ({}) must cover one day",
                self.intervals_per_day, self.grid.interval_seconds
            ));
        }
        if self.home_cells.is_empty() || self.office_cells.is_empty() {
            return fail("home and office cell sets must be non-empty".to_string());
        }
        for &(i, j) in self.home_cells.iter().chain(&self.office_cells) {
            if i >= self.grid.rows || j >= self.grid.cols {
                return fail(format!("cell ({i}, {j}) outside the grid"));
            }
        }
        for event in &self.weather_events {
            if !(0.0..=1.0).contains(&event.suppression) {
                return fail(format!("suppression {} outside [0, 1]", event.suppression));
            }
        }
        Ok(())
    }

    fn suppression_at(&self, interval: i64) -> f64 {
        self.weather_events
            .iter()
            .filter(|e| e.covers(interval))
            .map(|e| e.suppression)
            .fold(1.0, f64::min)
    }
}

pub struct SynthOutput {
    /// Points in emission order; writing them as CSV is byte-deterministic.
    pub points: Vec<GeoPoint>,
    pub externals: Vec<ExternalRecord>,
    /// Flow aggregation of the emitted points over `[0, n_intervals)`.
    pub series: FlowSeries,
}

/// Rectilinear cell path from `from` to `to`: rows first, then columns, one
/// step per cell.
fn manhattan_path(from: (usize, usize), to: (usize, usize)) -> Vec<(usize, usize)> {
    let mut path = vec![from];
    let (mut i, mut j) = from;
    while i != to.0 {
        i = if to.0 > i { i + 1 } else { i - 1 };
        path.push((i, j));
    }
    while j != to.1 {
        j = if to.1 > j { j + 1 } else { j - 1 };
        path.push((i, j));
    }
    path
}

struct Agent {
    home: (usize, usize),
    office: (usize, usize),
    /// Fixed background loop: route endpoints and the two daily time slots.
    loop_route: ((usize, usize), (usize, usize)),
    loop_slots: (i64, i64),
}

fn emit_trip(
    config: &SynthConfig,
    points: &mut Vec<GeoPoint>,
    agent_id: usize,
    interval: i64,
    from: (usize, usize),
    to: (usize, usize),
) {
    let path = manhattan_path(from, to);
    let start = config.grid.interval_start(interval) + 1;
    let step = ((config.grid.interval_seconds as i64 - 2) / path.len() as i64).max(1);
    for (idx, (i, j)) in path.into_iter().enumerate() {
        let (lon, lat) = config.grid.cell_center(i, j);
        points.push(GeoPoint {
            object_id: format!("a{agent_id}"),
            timestamp: start + idx as i64 * step,
            lon,
            lat,
        });
    }
}

/// Generates trajectories, per-interval externals, and the ground-truth flow
/// series for a config.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput, GridError> {
    config.validate()?;
    let mut rng = SplitMix64::new(config.seed);
    let holidays = HolidayCalendar::from_days(config.holiday_days.iter().copied());

    let ipd = config.intervals_per_day as i64;
    let agents: Vec<Agent> = (0..config.n_agents)
        .map(|_| Agent {
            home: config.home_cells[rng.next_below(config.home_cells.len() as u64) as usize],
            office: config.office_cells[rng.next_below(config.office_cells.len() as u64) as usize],
            loop_route: (
                (
                    rng.next_below(config.grid.rows as u64) as usize,
                    rng.next_below(config.grid.cols as u64) as usize,
                ),
                (
                    rng.next_below(config.grid.rows as u64) as usize,
                    rng.next_below(config.grid.cols as u64) as usize,
                ),
            ),
            loop_slots: (
                rng.next_below(ipd as u64 / 2) as i64,
                ipd / 2 + rng.next_below(ipd as u64 / 2) as i64,
            ),
        })
        .collect();
    let n_days = (config.n_intervals as i64 + ipd - 1) / ipd;
    let morning_base = ipd / 4;
    let evening_base = 3 * ipd / 4;
    let phase_spread = (ipd / 16).max(1) as u64;

    let mut points = Vec::new();
    for day in 0..n_days {
        let day_start_ts = config.grid.interval_start(day * ipd);
        let dow = day_of_week(day_start_ts);
        let weekend = is_weekend(dow);
        let holiday = holidays.contains(day_start_ts);
        let week = day / 7;
        let trend = (1.0 + config.trend_growth_per_week).powi(week as i32);
        let commute_p = (config.commute_probability * trend).min(1.0);

        // Background loops: the first `active` agents walk their fixed route
        // at their fixed slots. Thinning (trend growth, weather suppression)
        // is deterministic, so this layer carries daily structure with no
        // sampling noise.
        let active = ((config.n_agents as f64 * config.background_fraction * trend).round()
            as usize)
            .min(config.n_agents);
        for (agent_id, agent) in agents.iter().take(active).enumerate() {
            let (a, b) = agent.loop_route;
            for (slot, from, to) in [
                (agent.loop_slots.0, a, b),
                (agent.loop_slots.1, b, a),
            ] {
                let interval = day * ipd + slot;
                if interval >= config.n_intervals as i64 {
                    continue;
                }
                let suppression = config.suppression_at(interval);
                let keep_bucket =
                    (agent_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 54;
                if (keep_bucket as f64) < suppression * 1024.0 {
                    emit_trip(config, &mut points, agent_id, interval, from, to);
                }
            }
        }

        for (agent_id, agent) in agents.iter().enumerate() {
            if weekend || holiday {
                if rng.next_bool(config.weekend_activity) {
                    let interval = day * ipd
                        + morning_base
                        + rng.next_below((evening_base - morning_base) as u64) as i64;
                    let from = (
                        rng.next_below(config.grid.rows as u64) as usize,
                        rng.next_below(config.grid.cols as u64) as usize,
                    );
                    let to = (
                        rng.next_below(config.grid.rows as u64) as usize,
                        rng.next_below(config.grid.cols as u64) as usize,
                    );
                    if interval < config.n_intervals as i64
                        && rng.next_bool(config.suppression_at(interval))
                    {
                        emit_trip(config, &mut points, agent_id, interval, from, to);
                    }
                }
                continue;
            }

            let commutes = rng.next_bool(commute_p) && !rng.next_bool(config.noise);
            if commutes {
                let morning = day * ipd + morning_base + rng.next_below(phase_spread) as i64;
                let evening = day * ipd + evening_base + rng.next_below(phase_spread) as i64;
                if morning < config.n_intervals as i64
                    && rng.next_bool(config.suppression_at(morning))
                {
                    emit_trip(config, &mut points, agent_id, morning, agent.home, agent.office);
                }
                if evening < config.n_intervals as i64
                    && rng.next_bool(config.suppression_at(evening))
                {
                    emit_trip(config, &mut points, agent_id, evening, agent.office, agent.home);
                }
            }
            if rng.next_bool(config.noise) {
                let interval = day * ipd + rng.next_below(ipd as u64) as i64;
                let from = (
                    rng.next_below(config.grid.rows as u64) as usize,
                    rng.next_below(config.grid.cols as u64) as usize,
                );
                let to = (
                    rng.next_below(config.grid.rows as u64) as usize,
                    rng.next_below(config.grid.cols as u64) as usize,
                );
                if interval < config.n_intervals as i64
                    && rng.next_bool(config.suppression_at(interval))
                {
                    emit_trip(config, &mut points, agent_id, interval, from, to);
                }
            }
        }
    }

    let externals = (0..config.n_intervals as i64)
        .map(|t| {
            let ts = config.grid.interval_start(t);
            let day_fraction =
                (t.rem_euclid(ipd)) as f64 / ipd as f64 * std::f64::consts::TAU;
            let under_event = config.suppression_at(t) < 1.0;
            let weather_code = if under_event { 1 } else { 0 };
            let temperature =
                15.0 + 8.0 * (day_fraction - std::f64::consts::FRAC_PI_2).sin()
                    - if under_event { 4.0 } else { 0.0 };
            let wind_speed = 3.0
                + 2.0 * (day_fraction * 2.0).sin().abs()
                + if under_event { 4.0 } else { 0.0 };
            ExternalRecord::for_timestamp(t, ts, &holidays, weather_code, temperature, wind_speed)
        })
        .collect();

    let coverage = [CoverageSpan {
        start: 0,
        end: config.n_intervals as i64,
    }];
    let series = build_series(&config.grid, &points, &coverage)?;
    Ok(SynthOutput {
        points,
        externals,
        series,
    })
}

/// Result of replaying a config's CSV through the flow pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub intervals_checked: usize,
    pub first_mismatch: Option<i64>,
}

impl ConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Regenerates the config, serializes the trajectories to CSV, parses them
/// back, recomputes flows, and compares with the bundled ground truth.
pub fn verify_consistency(config: &SynthConfig) -> Result<ConsistencyReport, GridError> {
    let output = generate(config)?;
    let mut csv = Vec::new();
    write_trajectory_csv(&mut csv, &output.points).map_err(|e| GridError::InvalidSpec {
        reason: format!("csv serialization failed: {e}"),
    })?;
    let (points, report) =
        read_trajectory_csv(csv.as_slice()).map_err(|e| GridError::InvalidSpec {
            reason: format!("csv parse failed: {e}"),
        })?;
    debug_assert_eq!(report.malformed, 0);
    let coverage = [CoverageSpan {
        start: 0,
        end: config.n_intervals as i64,
    }];
    let rebuilt = build_series(&config.grid, &points, &coverage)?;
    Ok(compare_series(&output.series, &rebuilt))
}

/// Interval-by-interval comparison, reporting the first mismatch.
pub fn compare_series(expected: &FlowSeries, actual: &FlowSeries) -> ConsistencyReport {
    let mut checked = 0;
    for (t, tensor) in expected.iter() {
        checked += 1;
        if actual.get(t) != Some(tensor) {
            return ConsistencyReport {
                intervals_checked: checked,
                first_mismatch: Some(t),
            };
        }
    }
    ConsistencyReport {
        intervals_checked: checked,
        first_mismatch: None,
    }
}
