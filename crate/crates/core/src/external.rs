//! External factors: calendar fields, weather, and their feature encoding.
//!
//! A raw [`ExternalRecord`] carries one interval's metadata; an
//! [`ExternalSchema`] turns it into the model's input vector:
//! `[day-of-week one-hot (7), weekend flag, holiday flag, weather one-hot
//! (n_weather), scaled temperature, scaled wind]`, so the encoded length is
//! `11 + n_weather`. The last weather slot doubles as the reserved "other"
//! category: any code at or beyond it folds into that slot. Temperature and
//! wind are min-max scaled into `[0, 1]` against the schema's fitted ranges
//! and clamped outside them.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, TrainError};

pub const EXTERNALS_HEADER: &str =
    "interval,day_of_week,is_weekend,is_holiday,weather_code,temperature,wind_speed";

const SECONDS_PER_DAY: i64 = 86_400;
// The Unix epoch fell on a Thursday; day-of-week 0 is Monday.
const EPOCH_DOW: i64 = 3;

/// Day of week for a timestamp, 0 = Monday through 6 = Sunday.
pub fn day_of_week(timestamp: i64) -> u8 {
    (timestamp.div_euclid(SECONDS_PER_DAY) + EPOCH_DOW).rem_euclid(7) as u8
}

pub fn is_weekend(dow: u8) -> bool {
    dow >= 5
}

/// Seconds into the day for a timestamp.
pub fn time_of_day(timestamp: i64) -> i64 {
    timestamp.rem_euclid(SECONDS_PER_DAY)
}

/// Day index since the Unix epoch, used to key holiday calendars.
pub fn day_index(timestamp: i64) -> i64 {
    timestamp.div_euclid(SECONDS_PER_DAY)
}

/// Set of holiday days (day indices since the epoch).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HolidayCalendar {
    days: BTreeSet<i64>,
}

impl HolidayCalendar {
    pub fn from_days(days: impl IntoIterator<Item = i64>) -> HolidayCalendar {
        HolidayCalendar {
            days: days.into_iter().collect(),
        }
    }

    pub fn contains(&self, timestamp: i64) -> bool {
        self.days.contains(&day_index(timestamp))
    }
}

/// Raw external metadata for one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub interval: i64,
    pub day_of_week: u8,
    pub is_weekend: bool,
    pub is_holiday: bool,
    pub weather_code: u32,
    pub temperature: f64,
    pub wind_speed: f64,
}

impl ExternalRecord {
    /// Fills the calendar fields from the interval's start timestamp.
    pub fn for_timestamp(
        interval: i64,
        timestamp: i64,
        holidays: &HolidayCalendar,
        weather_code: u32,
        temperature: f64,
        wind_speed: f64,
    ) -> ExternalRecord {
        let dow = day_of_week(timestamp);
        ExternalRecord {
            interval,
            day_of_week: dow,
            is_weekend: is_weekend(dow),
            is_holiday: holidays.contains(timestamp),
            weather_code,
            temperature,
            wind_speed,
        }
    }
}

/// Encoding schema: number of weather slots (last one reserved for unknown
/// codes) and the fitted scaling ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSchema {
    pub n_weather: usize,
    pub temp_min: f64,
    pub temp_max: f64,
    pub wind_min: f64,
    pub wind_max: f64,
}

impl ExternalSchema {
    /// Encoded vector length: 7 + 1 + 1 + n_weather + 2.
    pub fn dim(&self) -> usize {
        11 + self.n_weather
    }

    /// Fits temperature/wind ranges over a set of records.
    pub fn fit<'a>(
        records: impl IntoIterator<Item = &'a ExternalRecord>,
        n_weather: usize,
    ) -> Result<ExternalSchema, TrainError> {
        let mut temp = (f64::INFINITY, f64::NEG_INFINITY);
        let mut wind = (f64::INFINITY, f64::NEG_INFINITY);
        let mut any = false;
        for r in records {
            any = true;
            temp = (temp.0.min(r.temperature), temp.1.max(r.temperature));
            wind = (wind.0.min(r.wind_speed), wind.1.max(r.wind_speed));
        }
        if !any {
            return Err(TrainError::EmptyDataset);
        }
        Ok(ExternalSchema {
            n_weather,
            temp_min: temp.0,
            temp_max: temp.1,
            wind_min: wind.0,
            wind_max: wind.1,
        })
    }

    fn scale(lo: f64, hi: f64, v: f64) -> f64 {
        if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn encode(&self, record: &ExternalRecord) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        v[record.day_of_week.min(6) as usize] = 1.0;
        v[7] = record.is_weekend as u8 as f64;
        v[8] = record.is_holiday as u8 as f64;
        let slot = (record.weather_code as usize).min(self.n_weather - 1);
        v[9 + slot] = 1.0;
        v[9 + self.n_weather] = Self::scale(self.temp_min, self.temp_max, record.temperature);
        v[10 + self.n_weather] = Self::scale(self.wind_min, self.wind_max, record.wind_speed);
        v
    }
}

/// Externals table keyed by interval index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalTable {
    records: Vec<ExternalRecord>,
}

impl ExternalTable {
    pub fn new(mut records: Vec<ExternalRecord>) -> ExternalTable {
        records.sort_by_key(|r| r.interval);
        ExternalTable { records }
    }

    pub fn get(&self, interval: i64) -> Option<&ExternalRecord> {
        self.records
            .binary_search_by_key(&interval, |r| r.interval)
            .ok()
            .map(|idx| &self.records[idx])
    }

    pub fn records(&self) -> &[ExternalRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn write_externals_csv(
    mut writer: impl Write,
    records: &[ExternalRecord],
) -> Result<(), FormatError> {
    writeln!(writer, "{EXTERNALS_HEADER}")?;
    for r in records {
        writeln!(
            writer,
            "{},{},{},{},{},{},{}",
            r.interval,
            r.day_of_week,
            r.is_weekend as u8,
            r.is_holiday as u8,
            r.weather_code,
            r.temperature,
            r.wind_speed
        )?;
    }
    Ok(())
}

pub fn read_externals_csv(reader: impl BufRead) -> Result<ExternalTable, FormatError> {
    let mut lines = reader.lines();
    match lines.next() {
        Some(header) => {
            let header = header?;
            if header.trim_end() != EXTERNALS_HEADER {
                return Err(FormatError::Malformed {
                    context: "externals csv header",
                    reason: format!("expected `{EXTERNALS_HEADER}`, got `{header}`"),
                });
            }
        }
        None => {
            return Err(FormatError::Malformed {
                context: "externals csv",
                reason: "empty input".to_string(),
            })
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = (|| -> Option<ExternalRecord> {
            if fields.len() != 7 {
                return None;
            }
            Some(ExternalRecord {
                interval: fields[0].trim().parse().ok()?,
                day_of_week: fields[1].trim().parse().ok()?,
                is_weekend: fields[2].trim() == "1",
                is_holiday: fields[3].trim() == "1",
                weather_code: fields[4].trim().parse().ok()?,
                temperature: fields[5].trim().parse().ok()?,
                wind_speed: fields[6].trim().parse().ok()?,
            })
        })();
        match parsed {
            Some(r) => records.push(r),
            None => {
                return Err(FormatError::Malformed {
                    context: "externals csv row",
                    reason: format!("line {}: `{line}`", lineno + 2),
                })
            }
        }
    }
    Ok(ExternalTable::new(records))
}
