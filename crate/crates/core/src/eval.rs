//! Baselines, the RMSE metric, the experiment runner, and fusion-weight
//! analysis.
//!
//! The historical average keys every interval by (weekday, time-of-day) and
//! predicts the elementwise mean over all strictly earlier intervals sharing
//! the key; a time-of-day-only keying is available behind a flag. RMSE is
//! always computed in raw flow units.



use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::EvalError;
use crate::external::{time_of_day, day_of_week, ExternalSchema, ExternalTable};
use crate::forecast::{predict_multi, Horizon};
use crate::grid::{FlowSeries, FlowTensor};
use crate::model::ModelConfig;
use crate::synth::{generate, SynthConfig};
use crate::tensor::Tensor;
use crate::train::{make_instances, train, Dataset, ExternalVectors, TrainHyper, TrainingInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HaKeying {
    #[default]
    WeekdayTimeOfDay,
    TimeOfDayOnly,
}

fn ha_key(series: &FlowSeries, t: i64, keying: HaKeying) -> (u8, i64) {
    let ts = series.grid.interval_start(t);
    match keying {
        HaKeying::WeekdayTimeOfDay => (day_of_week(ts), time_of_day(ts)),
        HaKeying::TimeOfDayOnly => (0, time_of_day(ts)),
    }
}

/// Historical average: elementwise mean over every strictly earlier interval
/// sharing the target's (weekday, time-of-day) key.
pub fn ha_predict(
    series: &FlowSeries,
    t: i64,
    keying: HaKeying,
) -> Result<FlowTensor, EvalError> {
    let key = ha_key(series, t, keying);
    let mut acc: Option<FlowTensor> = None;
    let mut count = 0.0;
    for (s, tensor) in series.iter() {
        if s >= t || ha_key(series, s, keying) != key {
            continue;
        }
        count += 1.0;
        acc = Some(match acc {
            None => tensor.clone(),
            Some(a) => a.merge(tensor).expect("series tensors share a grid"),
        });
    }
    match acc {
        Some(sum) => Ok(sum.map(|v| v / count)),
        None => Err(EvalError::NoMatchingHistory { interval: t }),
    }
}

/// Persistence baseline: repeats the previous interval's observation.
pub fn persistence_predict(series: &FlowSeries, t: i64) -> Result<FlowTensor, EvalError> {
    series
        .get(t - 1)
        .cloned()
        .ok_or(EvalError::MissingInterval { interval: t - 1 })
}

/// Root mean squared elementwise error over all prediction/truth pairs.
pub fn rmse(pairs: &[(&FlowTensor, &FlowTensor)]) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pred, truth) in pairs {
        if pred.data().len() != truth.data().len() {
            return Err(EvalError::CountMismatch {
                preds: pred.data().len(),
                truths: truth.data().len(),
            });
        }
        for (p, t) in pred.data().iter().zip(truth.data()) {
            sum += (p - t) * (p - t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(EvalError::CountMismatch {
            preds: 0,
            truths: 0,
        });
    }
    Ok((sum / count as f64).sqrt())
}

/// Per-branch share of regions whose fusion weight sits below the threshold,
/// plus an exportable per-region magnitude map. Full-shape weights are
/// reduced to a region value by averaging |w| over the two channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeightStats {
    /// (branch name, fraction of regions below threshold).
    pub fractions: Vec<(String, f64)>,
    /// (branch name, per-region magnitude map shaped `I x J`).
    pub maps: Vec<(String, Tensor)>,
    pub threshold: f64,
}

pub fn fusion_weight_stats(
    weights: &[(&str, &Tensor)],
    threshold: f64,
) -> Result<FusionWeightStats, EvalError> {
    let mut fractions = Vec::new();
    let mut maps = Vec::new();
    for (name, w) in weights {
        let (rows, cols, channels) = match w.shape() {
            [2, i, j] => (*i, *j, 2usize),
            [i, j] => (*i, *j, 1usize),
            other => {
                return Err(EvalError::InvalidSpec {
                    reason: format!("fusion weight {name} has shape {other:?}"),
                })
            }
        };
        let plane = rows * cols;
        let mut map = vec![0.0; plane];
        for ch in 0..channels {
            for (idx, slot) in map.iter_mut().enumerate() {
                *slot += w.data()[ch * plane + idx].abs() / channels as f64;
            }
        }
        let below = map.iter().filter(|&&v| v < threshold).count();
        fractions.push((name.to_string(), below as f64 / plane as f64));
        maps.push((
            name.to_string(),
            Tensor::new(vec![rows, cols], map).expect("sized above"),
        ));
    }
    Ok(FusionWeightStats {
        fractions,
        maps,
        threshold,
    })
}

/// Where the experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    Files {
        flows: String,
        #[serde(default)]
        externals: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelExperiment {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub seeds: Vec<u64>,
}

fn default_horizon() -> usize {
    1
}
fn default_n_weather() -> usize {
    2
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub data: DataSource,
    /// Number of trailing intervals held out as the test span.
    pub test_intervals: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    pub models: Vec<ModelExperiment>,
    #[serde(default = "default_true")]
    pub include_ha: bool,
    #[serde(default)]
    pub ha_keying: HaKeying,
    #[serde(default = "default_true")]
    pub include_persistence: bool,
    /// Weather one-hot slots used when encoding externals.
    #[serde(default = "default_n_weather")]
    pub n_weather: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub seed: Option<u64>,
    /// One-step-ahead RMSE in raw flow units.
    pub rmse: f64,
    /// Per-step RMSE curve for multi-step specs (index 0 = one step ahead).
    pub per_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spec_name: String,
    pub config_hash: String,
    /// Number of evaluated ground-truth values per step.
    pub truths_per_step: usize,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let steps = self
            .rows
            .first()
            .map(|r| r.per_step.len())
            .unwrap_or(1);
        let mut out = String::from("model,seed");
        for s in 1..=steps {
            out.push_str(&format!(",rmse_step{s}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.model);
            out.push(',');
            if let Some(seed) = row.seed {
                out.push_str(&seed.to_string());
            }
            for v in &row.per_step {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn row(&self, model: &str, seed: Option<u64>) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.seed == seed)
    }

    /// Mean 1-step RMSE over all seeds of a model.
    pub fn mean_rmse(&self, model: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.model == model)
            .map(|r| r.rmse)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn fnv1a_hash(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Prepared experiment data: the full series, encoded externals, and the
/// fitted schema.
pub struct ExperimentData {
    pub series: FlowSeries,
    pub externals: Option<ExternalTable>,
    pub schema: Option<ExternalSchema>,
    pub test_start: i64,
}

impl ExperimentData {
    pub fn encoded_externals(&self) -> Option<ExternalVectors> {
        let (table, schema) = (self.externals.as_ref()?, self.schema.as_ref()?);
        Some(
            table
                .records()
                .iter()
                .map(|r| (r.interval, schema.encode(r)))
                .collect(),
        )
    }
}

/// Loads/generates the data and computes the test split boundary.
pub fn prepare_data(spec: &ExperimentSpec) -> Result<ExperimentData, EvalError> {
    let (series, externals) = match &spec.data {
        DataSource::Synth(config) => {
            let out = generate(config).map_err(|e| EvalError::InvalidSpec {
                reason: format!("synth config: {e}"),
            })?;
            (out.series, Some(ExternalTable::new(out.externals)))
        }
        DataSource::Files { flows, externals } => {
            let file = std::fs::File::open(flows).map_err(|e| {
                EvalError::Format(crate::error::FormatError::Io(e))
            })?;
            let series = crate::io::read_flw1(std::io::BufReader::new(file))?;
            let table = match externals {
                Some(path) => {
                    let file = std::fs::File::open(path)
                        .map_err(|e| EvalError::Format(crate::error::FormatError::Io(e)))?;
                    Some(crate::external::read_externals_csv(std::io::BufReader::new(file))?)
                }
                None => None,
            };
            (series, table)
        }
    };
    let last = series.last_interval().ok_or(EvalError::InvalidSpec {
        reason: "series is empty".to_string(),
    })?;
    let test_start = last + 1 - spec.test_intervals as i64;
    if test_start <= series.first_interval().unwrap_or(0) {
        return Err(EvalError::InvalidSpec {
            reason: "test span covers the whole series".to_string(),
        });
    }
    // Schema ranges are fitted on the training span only.
    let schema = externals.as_ref().map(|table| {
        let train_records: Vec<_> = table
            .records()
            .iter()
            .filter(|r| r.interval < test_start)
            .cloned()
            .collect();
        ExternalSchema::fit(train_records.iter(), spec.n_weather)
    });
    let schema = match schema {
        Some(Ok(s)) => Some(s),
        Some(Err(e)) => return Err(EvalError::Train(e)),
        None => None,
    };
    Ok(ExperimentData {
        series,
        externals,
        schema,
        test_start,
    })
}

/// Splits instances at the test boundary.
fn split_dataset(dataset: Dataset, test_start: i64) -> (Dataset, Vec<TrainingInstance>) {
    let (train_part, test_part): (Vec<_>, Vec<_>) = dataset
        .instances
        .into_iter()
        .partition(|inst| inst.target_interval < test_start);
    (
        Dataset {
            instances: train_part,
            normalized: false,
        },
        test_part,
    )
}

/// Trains one configuration and returns the checkpoint.
pub fn train_model(
    data: &ExperimentData,
    experiment: &ModelExperiment,
    seed: u64,
) -> Result<(Checkpoint, crate::train::TrainingHistory), EvalError> {
    let externals = if experiment.model.ext_dim > 0 {
        Some(data.encoded_externals().ok_or(EvalError::InvalidSpec {
            reason: "model wants externals but the data source has none".to_string(),
        })?)
    } else {
        None
    };
    let dataset = make_instances(&data.series, externals.as_ref(), &experiment.model)?;
    let (train_set, _) = split_dataset(dataset, data.test_start);
    if train_set.is_empty() {
        return Err(EvalError::InvalidSpec {
            reason: "no training instances before the test span".to_string(),
        });
    }
    let out = train(&train_set, &experiment.model, &experiment.train, seed)?;
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            model: experiment.model.clone(),
            stats: out.stats,
            ext_schema: data.schema.clone(),
        },
        params: out.params,
    };
    Ok((checkpoint, out.history))
}

/// Per-step RMSE of a trained model over the test span. Step 1 predictions
/// use true history; later steps consume earlier predictions (rolling-origin
/// multi-step evaluation).
pub fn evaluate_checkpoint(
    data: &ExperimentData,
    checkpoint: &Checkpoint,
    horizon: usize,
) -> Result<Vec<f64>, EvalError> {
    let config = &checkpoint.meta.model;
    let series = &data.series;
    let externals = data.encoded_externals();
    let lookback = config.max_lookback() as i64;
    let last = series.last_interval().expect("non-empty");
    let mut per_step_pairs: Vec<Vec<(FlowTensor, FlowTensor)>> = vec![Vec::new(); horizon];
    for anchor in data.test_start..=last + 1 - horizon as i64 {
        // Mini-series holding exactly the lookback window before the anchor.
        let mut window = FlowSeries::new(series.grid.clone());
        let mut complete = true;
        for t in anchor - lookback..anchor {
            match series.get(t) {
                Some(tensor) => window.append(t, tensor.clone()).expect("contiguous"),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            continue;
        }
        let step_externals: Vec<Vec<f64>> = if config.ext_dim > 0 {
            let table = externals.as_ref().ok_or(EvalError::InvalidSpec {
                reason: "externals required".to_string(),
            })?;
            let mut vs = Vec::with_capacity(horizon);
            for t in anchor..anchor + horizon as i64 {
                match table.get(&t) {
                    Some(v) => vs.push(v.clone()),
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if !complete {
                continue;
            }
            vs
        } else {
            Vec::new()
        };
        let records = predict_multi(
            checkpoint,
            &window,
            &step_externals,
            Horizon(horizon),
            0,
        )?;
        for (step, record) in records.iter().enumerate() {
            if let Some(truth) = series.get(record.interval) {
                per_step_pairs[step].push((record.tensor.clone(), truth.clone()));
            }
        }
    }
    let mut out = Vec::with_capacity(horizon);
    for pairs in &per_step_pairs {
        let borrowed: Vec<(&FlowTensor, &FlowTensor)> =
            pairs.iter().map(|(p, t)| (p, t)).collect();
        out.push(rmse(&borrowed)?);
    }
    Ok(out)
}

/// Baseline RMSE over the test span (single-step only).
fn baseline_rmse(
    data: &ExperimentData,
    predict: impl Fn(&FlowSeries, i64) -> Result<FlowTensor, EvalError>,
) -> Result<(f64, usize), EvalError> {
    let series = &data.series;
    let last = series.last_interval().expect("non-empty");
    let mut pairs = Vec::new();
    for t in data.test_start..=last {
        let pred = predict(series, t)?;
        let truth = series.get(t).ok_or(EvalError::MissingInterval { interval: t })?;
        pairs.push((pred, truth.clone()));
    }
    let borrowed: Vec<(&FlowTensor, &FlowTensor)> = pairs.iter().map(|(p, t)| (p, t)).collect();
    Ok((rmse(&borrowed)?, pairs.len()))
}

/// Runs every configuration in the spec and assembles the report.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<EvalReport, EvalError> {
    if spec.horizon == 0 {
        return Err(EvalError::InvalidSpec {
            reason: "horizon must be >= 1".to_string(),
        });
    }
    let data = prepare_data(spec)?;
    let mut rows = Vec::new();
    let mut truths_per_step = 0;

    for experiment in &spec.models {
        for &seed in &experiment.seeds {
            let (checkpoint, _) = train_model(&data, experiment, seed)?;
            let per_step = evaluate_checkpoint(&data, &checkpoint, spec.horizon)?;
            rows.push(ReportRow {
                model: experiment.name.clone(),
                seed: Some(seed),
                rmse: per_step[0],
                per_step,
            });
        }
    }
    if spec.include_ha {
        let (value, n) = baseline_rmse(&data, |s, t| ha_predict(s, t, spec.ha_keying))?;
        truths_per_step = n;
        rows.push(ReportRow {
            model: "ha".to_string(),
            seed: None,
            rmse: value,
            per_step: vec![value],
        });
    }
    if spec.include_persistence {
        let (value, n) = baseline_rmse(&data, persistence_predict)?;
        truths_per_step = truths_per_step.max(n);
        rows.push(ReportRow {
            model: "persistence".to_string(),
            seed: None,
            rmse: value,
            per_step: vec![value],
        });
    }
    let hash = fnv1a_hash(&serde_json::to_vec(spec).expect("spec serializes"));
    Ok(EvalReport {
        spec_name: spec.name.clone(),
        config_hash: format!("{hash:016x}"),
        truths_per_step,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn grid() -> GridSpec {
        GridSpec {
            lon_min: 0.0,
            lon_max: 1.0,
            lat_min: 0.0,
            lat_max: 1.0,
            rows: 2,
            cols: 2,
            interval_seconds: 21_600, // 4 intervals per day
            epoch_start: 4 * 86_400,  // a Monday
        }
    }

    fn series_from(values: impl IntoIterator<Item = f64>) -> FlowSeries {
        let mut series = FlowSeries::new(grid());
        let tensors: Vec<FlowTensor> = values
            .into_iter()
            .map(|v| FlowTensor::from_data(2, 2, vec![v; 8]).unwrap())
            .collect();
        series.push_segment(0, tensors).unwrap();
        series
    }

    #[test]
    fn ha_on_constant_series_returns_the_constant() {
        let series = series_from((0..56).map(|_| 3.0));
        let pred = ha_predict(&series, 40, HaKeying::WeekdayTimeOfDay).unwrap();
        assert!(pred.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn ha_averages_matching_weekday_slots() {
        // 4 intervals/day; value = day number. Two Mondays at t=0..4 and
        // t=28..32 hold values 0 and 7; predicting the third Monday slot
        // averages them to 3.5.
        let series = series_from((0..60).map(|t| (t / 4) as f64));
        let pred = ha_predict(&series, 56, HaKeying::WeekdayTimeOfDay).unwrap();
        assert!(pred.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn ha_ignores_non_matching_weekdays() {
        let mut series = series_from((0..56).map(|t| (t / 4) as f64));
        // Perturb a Wednesday (day 2): Tuesday predictions must not move.
        let base = ha_predict(&series, 33, HaKeying::WeekdayTimeOfDay).unwrap();
        let mut tensors: Vec<FlowTensor> = series.iter().map(|(_, t)| t.clone()).collect();
        tensors[8] = FlowTensor::from_data(2, 2, vec![999.0; 8]).unwrap();
        series = FlowSeries::new(grid());
        series.push_segment(0, tensors).unwrap();
        let after = ha_predict(&series, 33, HaKeying::WeekdayTimeOfDay).unwrap();
        assert_eq!(base, after);
    }

    #[test]
    fn ha_without_matching_history_errors() {
        let series = series_from((0..4).map(|_| 1.0));
        assert!(matches!(
            ha_predict(&series, 4, HaKeying::WeekdayTimeOfDay),
            Err(EvalError::NoMatchingHistory { .. })
        ));
    }

    #[test]
    fn ha_matches_brute_force_average() {
        let series = series_from((0..100).map(|t| ((t * 13) % 17) as f64));
        for t in [60i64, 77, 99] {
            let got = ha_predict(&series, t, HaKeying::WeekdayTimeOfDay).unwrap();
            // Brute force with explicit timestamp keys.
            let ts = series.grid.interval_start(t);
            let key = (day_of_week(ts), time_of_day(ts));
            let mut sum = 0.0;
            let mut n = 0.0;
            for (s, tensor) in series.iter() {
                let sts = series.grid.interval_start(s);
                if s < t && (day_of_week(sts), time_of_day(sts)) == key {
                    sum += tensor.data()[0];
                    n += 1.0;
                }
            }
            assert_eq!(got.data()[0], sum / n);
        }
    }

    #[test]
    fn persistence_returns_previous_interval() {
        let series = series_from((0..10).map(|t| t as f64));
        let pred = persistence_predict(&series, 5).unwrap();
        assert!(pred.data().iter().all(|&v| v == 4.0));
        assert!(persistence_predict(&series, 0).is_err());
    }

    #[test]
    fn rmse_identities() {
        let a = FlowTensor::from_data(1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rmse(&[(&a, &a)]).unwrap(), 0.0);
        let b = a.map(|v| v + 2.0);
        assert_eq!(rmse(&[(&b, &a)]).unwrap(), 2.0);
    }

    #[test]
    fn rmse_is_order_invariant() {
        let a = FlowTensor::from_data(1, 2, vec![1.0, 5.0, -2.0, 0.0]).unwrap();
        let b = FlowTensor::from_data(1, 2, vec![0.0, 4.0, 1.0, 2.0]).unwrap();
        let c = FlowTensor::from_data(1, 2, vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        let d = FlowTensor::from_data(1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fwd = rmse(&[(&a, &b), (&c, &d)]).unwrap();
        let rev = rmse(&[(&c, &d), (&a, &b)]).unwrap();
        assert_eq!(fwd, rev);
        // Against a flat elementwise loop oracle.
        let mut sum = 0.0;
        for (p, t) in a.data().iter().zip(b.data()) {
            sum += (p - t) * (p - t);
        }
        for (p, t) in c.data().iter().zip(d.data()) {
            sum += (p - t) * (p - t);
        }
        assert!((fwd - (sum / 8.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fusion_stats_identities() {
        let ones = Tensor::ones(&[2, 3, 3]);
        let zeros = Tensor::zeros(&[2, 3, 3]);
        let stats = fusion_weight_stats(
            &[("closeness", &ones), ("trend", &zeros)],
            0.3,
        )
        .unwrap();
        assert_eq!(stats.fractions[0], ("closeness".to_string(), 0.0));
        assert_eq!(stats.fractions[1], ("trend".to_string(), 1.0));
        assert_eq!(stats.maps[0].1.shape(), &[3, 3]);
    }

    #[test]
    fn fusion_stats_match_counting_oracle() {
        let mut rng = crate::rng::SplitMix64::new(31);
        let data: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w = Tensor::new(vec![2, 4, 4], data.clone()).unwrap();
        let stats = fusion_weight_stats(&[("period", &w)], 0.3).unwrap();
        let mut below = 0;
        for region in 0..16 {
            let mag = (data[region].abs() + data[16 + region].abs()) / 2.0;
            if mag < 0.3 {
                below += 1;
            }
        }
        assert_eq!(stats.fractions[0].1, below as f64 / 16.0);
    }
}
