//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers (visible with `--nocapture`).
//!
//! Tests serialize on a global lock so wall-clock limits are measured
//! without interference; expensive artifacts (the trained experiment) are
//! computed once and shared. Run with:
//!
//! ```text
//! cargo test -p cityflow-service --test acceptance -- --test-threads=1 --nocapture
//! ```

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use cityflow_core::checkpoint::{Checkpoint, CheckpointMeta};
use cityflow_core::eval::{
    evaluate_checkpoint, ha_predict, prepare_data, rmse, run_experiment, train_model, DataSource,
    EvalReport, ExperimentData, ExperimentSpec, HaKeying, ModelExperiment,
};
use cityflow_core::external::{day_of_week, time_of_day};
use cityflow_core::forecast::{
    predict_multi, two_day_retention, ForecastCache, ForecastRecord, Horizon,
};
use cityflow_core::grid::{
    compute_flows, segment_by_interval, FlowSeries, FlowTensor, GeoPoint, GridSpec, INFLOW,
    OUTFLOW,
};
use cityflow_core::io::{flw1_bytes, flw1_from_bytes, write_trajectory_csv};
use cityflow_core::model::{
    branch_forward, build_forward, forward, init_params, BatchInput, Branch, FusionKind, Mode,
    ModelConfig, ModelInput, ParameterSet,
};
use cityflow_core::norm::NormStats;
use cityflow_core::rng::SplitMix64;
use cityflow_core::synth::{SynthConfig, WeatherEvent};
use cityflow_core::tensor::Tensor;
use cityflow_core::train::{AdamConfig, SplitKind, TrainHyper};
use cityflow_service::kv::{KvStore, SharedMemoryKv};
use cityflow_service::pipeline::{
    forecast_flw1, forecast_key, traj_key, CacheBackend, Pipeline, PipelineConfig, TickOutcome,
};
use cityflow_testkit::flows as flow_oracle;
use cityflow_testkit::grad::{central_diff, max_rel_error};

/// Criteria run one at a time so their wall-clock limits are meaningful.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn rng_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Criterion 1: flow aggregation equals the brute-force enumeration of the
// inflow/outflow definition on 50 random configurations, exactly, in < 10 s.

#[test]
fn criterion_01_flow_oracle_equivalence() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = SplitMix64::new(0xC1);
    let mut points_total = 0usize;
    for case in 0..50 {
        let rows = 1 + rng.next_below(16) as usize;
        let cols = 1 + rng.next_below(16) as usize;
        let lon_min = rng.uniform(-120.0, 100.0);
        let lat_min = rng.uniform(-60.0, 50.0);
        let grid = GridSpec {
            lon_min,
            lon_max: lon_min + rng.uniform(0.5, 15.0),
            lat_min,
            lat_max: lat_min + rng.uniform(0.5, 15.0),
            rows,
            cols,
            interval_seconds: 300 + rng.next_below(3300) as u32,
            epoch_start: 0,
        };
        let n_objects = 1 + rng.next_below(25) as usize;
        let n_points = (500 + rng.next_below(4500) as usize).min(5000);
        points_total += n_points;
        let margin_lon = (grid.lon_max - grid.lon_min) * 0.2;
        let margin_lat = (grid.lat_max - grid.lat_min) * 0.2;
        let points: Vec<GeoPoint> = (0..n_points)
            .map(|k| GeoPoint {
                object_id: format!("o{}", k % n_objects),
                timestamp: rng.next_below(4 * grid.interval_seconds as u64) as i64,
                lon: rng.uniform(grid.lon_min - margin_lon, grid.lon_max + margin_lon),
                lat: rng.uniform(grid.lat_min - margin_lat, grid.lat_max + margin_lat),
            })
            .collect();
        let by_interval = segment_by_interval(&grid, &points);
        for (interval, trajectories) in &by_interval {
            let got = compute_flows(&grid, trajectories);
            let trajs: Vec<Vec<GeoPoint>> = trajectories.values().cloned().collect();
            let (inflow, outflow) = flow_oracle::brute_force_flows(&grid, &trajs);
            for i in 0..rows {
                for j in 0..cols {
                    assert_eq!(
                        got.get(INFLOW, i, j),
                        inflow[i * cols + j] as f64,
                        "case {case} interval {interval} cell ({i},{j}) inflow"
                    );
                    assert_eq!(
                        got.get(OUTFLOW, i, j),
                        outflow[i * cols + j] as f64,
                        "case {case} interval {interval} cell ({i},{j}) outflow"
                    );
                }
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:.1?}");
    println!(
        "ACCEPTANCE C1 PASS: 50 random configs ({points_total} points) match the \
         brute-force flow oracle exactly in {elapsed:.1?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: analytic gradients of the training loss match central finite
// differences (h = 1e-5) within 1e-4 relative error on the tiny model, < 60 s.

fn tiny_config() -> ModelConfig {
    ModelConfig {
        rows: 4,
        cols: 4,
        closeness_len: 2,
        period_len: 1,
        trend_len: 1,
        period: 4,
        trend_span: 8,
        residual_units: 1,
        filters: 4,
        kernel: 3,
        use_batch_norm: false,
        convs_per_unit: 2,
        relu_after_conv1: true,
        fusion: FusionKind::Parametric,
        ext_dim: 6,
        ext_hidden: 5,
        bn_epsilon: 1e-5,
        bn_momentum: 0.99,
    }
}

fn random_model_input(config: &ModelConfig, rng: &mut SplitMix64) -> ModelInput {
    let shape = [2, config.rows, config.cols];
    ModelInput {
        closeness: (0..config.closeness_len)
            .map(|_| rng_tensor(rng, &shape, -0.9, 0.9))
            .collect(),
        period: (0..config.period_len)
            .map(|_| rng_tensor(rng, &shape, -0.9, 0.9))
            .collect(),
        trend: (0..config.trend_len)
            .map(|_| rng_tensor(rng, &shape, -0.9, 0.9))
            .collect(),
        external: (config.ext_dim > 0).then(|| rng_tensor(rng, &[config.ext_dim], 0.0, 1.0)),
    }
}

#[test]
fn criterion_02_gradient_correctness() {
    let _guard = serial();
    let start = Instant::now();
    let config = tiny_config();
    let params = init_params(&config, 2024).unwrap();
    let mut rng = SplitMix64::new(99);
    let input = random_model_input(&config, &mut rng);
    let target = rng_tensor(&mut rng, &[2, 4, 4], -0.9, 0.9);
    let batch = BatchInput::from_instances(&config, &[&input]).unwrap();
    let batched_target = Tensor::stack(&[&target]).unwrap();

    let loss_of = |probe: &ParameterSet| -> f64 {
        let mut model = build_forward(&config, probe, &batch, Mode::Train).unwrap();
        let t = model.graph.constant(batched_target.clone());
        let loss = model.graph.mse_loss(model.prediction, t).unwrap();
        model.graph.value(loss).item().unwrap()
    };

    let mut model = build_forward(&config, &params, &batch, Mode::Train).unwrap();
    let t = model.graph.constant(batched_target.clone());
    let loss = model.graph.mse_loss(model.prediction, t).unwrap();
    let grads = model.graph.backward(loss).unwrap();

    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (name, tensor) in params.iter() {
        if !ParameterSet::is_trainable(name) {
            continue;
        }
        let analytic = grads.get(model.leaves[name], &model.graph);
        let fd = central_diff(tensor, 1e-5, |perturbed| {
            let mut probe = params.clone();
            probe.set(name, perturbed.clone()).unwrap();
            loss_of(&probe)
        });
        let err = max_rel_error(analytic.data(), fd.data());
        worst = worst.max(err);
        assert!(err < 1e-4, "parameter {name}: relative error {err:.3e}");
        checked += tensor.len();
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:.1?}");
    println!(
        "ACCEPTANCE C2 PASS: {checked} parameter gradients within 1e-4 of central \
         differences (worst {worst:.2e}) in {elapsed:.1?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: with all residual-function weights zeroed, branch output
// equals Conv2(ReLU(Conv1(x))) bit-exactly for L in {1, 4, 8}.

#[test]
fn criterion_03_residual_identity() {
    let _guard = serial();
    for units in [1usize, 4, 8] {
        let mut config = tiny_config();
        config.ext_dim = 0;
        config.residual_units = units;
        let mut params = init_params(&config, 90 + units as u64).unwrap();
        for name in params.names().map(String::from).collect::<Vec<_>>() {
            if name.contains(".unit") {
                let shape = params.get(&name).unwrap().shape().to_vec();
                params.set(&name, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut rng = SplitMix64::new(units as u64);
        let input = rng_tensor(&mut rng, &[2 * config.closeness_len, 4, 4], -1.0, 1.0);
        let got = branch_forward(&config, &params, Branch::Closeness, &input).unwrap();

        let mut g = cityflow_core::autodiff::Graph::new();
        let x = g.constant(input);
        let w1 = g.constant(params.get("closeness.conv1.weight").unwrap().clone());
        let b1 = g.constant(params.get("closeness.conv1.bias").unwrap().clone());
        let c1 = g.conv2d_same(x, w1, b1).unwrap();
        let r = g.relu(c1);
        let w2 = g.constant(params.get("closeness.conv2.weight").unwrap().clone());
        let b2 = g.constant(params.get("closeness.conv2.bias").unwrap().clone());
        let c2 = g.conv2d_same(r, w2, b2).unwrap();
        assert_eq!(&got, g.value(c2), "L = {units}");
    }
    println!(
        "ACCEPTANCE C3 PASS: zeroed residual units leave Conv2(ReLU(Conv1(x))) \
         bit-exact for L in {{1, 4, 8}}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: 10^4 random forward passes all land strictly inside (-1, 1).

#[test]
fn criterion_04_output_range() {
    let _guard = serial();
    let config = tiny_config();
    let mut rng = SplitMix64::new(0xC4);
    let mut passes = 0usize;
    for round in 0..100u64 {
        let params = init_params(&config, round).unwrap();
        for _ in 0..100 {
            let input = random_model_input(&config, &mut rng);
            let out = forward(&config, &params, &input).unwrap();
            assert!(
                out.data().iter().all(|v| v.abs() < 1.0 && v.is_finite()),
                "output left (-1, 1)"
            );
            passes += 1;
        }
    }
    assert_eq!(passes, 10_000);
    println!("ACCEPTANCE C4 PASS: 10000 forward passes stayed strictly inside (-1, 1)");
}

// ---------------------------------------------------------------------------
// Criterion 5: scaled-down ablation reproduction on the synthetic city.
// Noise level: commute participation noise 0.06 (skip/wander probability per
// agent-day), morning/evening phase jitter of up to 3 intervals.

fn experiment_synth_config() -> SynthConfig {
    SynthConfig {
        grid: GridSpec {
            lon_min: 116.2,
            lon_max: 116.6,
            lat_min: 39.8,
            lat_max: 40.1,
            rows: 16,
            cols: 16,
            interval_seconds: 1800,
            epoch_start: 1_704_067_200, // 2024-01-01, a Monday
        },
        n_agents: 1200,
        n_intervals: 48 * 30,
        intervals_per_day: 48,
        home_cells: vec![
            (1, 1),
            (1, 2),
            (2, 2),
            (13, 2),
            (14, 2),
            (13, 13),
            (14, 14),
            (2, 13),
        ],
        office_cells: vec![(7, 7), (7, 8), (8, 8), (8, 9), (4, 11), (11, 4)],
        commute_probability: 0.5,
        weekend_activity: 0.25,
        trend_growth_per_week: 0.14,
        weather_events: vec![
            WeatherEvent {
                start_interval: 48 * 9,
                end_interval: 48 * 9 + 24,
                suppression: 0.3,
            },
            WeatherEvent {
                start_interval: 48 * 16 + 12,
                end_interval: 48 * 17,
                suppression: 0.4,
            },
            WeatherEvent {
                start_interval: 48 * 28 + 8,
                end_interval: 48 * 28 + 40,
                suppression: 0.35,
            },
            WeatherEvent {
                start_interval: 48 * 29 + 14,
                end_interval: 48 * 29 + 22,
                suppression: 0.5,
            },
        ],
        noise: 0.06,
        background_fraction: 0.55,
        holiday_days: vec![],
        seed: 1,
    }
}

fn experiment_model(closeness: usize, period: usize, trend: usize, fusion: FusionKind) -> ModelConfig {
    ModelConfig {
        rows: 16,
        cols: 16,
        closeness_len: closeness,
        period_len: period,
        trend_len: trend,
        period: 48,
        trend_span: 336,
        residual_units: 1,
        filters: 6,
        kernel: 3,
        use_batch_norm: false,
        convs_per_unit: 2,
        relu_after_conv1: true,
        fusion,
        ext_dim: 13,
        ext_hidden: 10,
        bn_epsilon: 1e-5,
        bn_momentum: 0.99,
    }
}

fn experiment_hyper() -> TrainHyper {
    TrainHyper {
        batch_size: 16,
        max_epochs: 55,
        patience: 12,
        finetune_epochs: 2,
        validation_fraction: 0.1,
        split: SplitKind::Chronological,
        adam: AdamConfig::default(),
    }
}

const EXPERIMENT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct ExperimentArtifacts {
    report: EvalReport,
    data: ExperimentData,
    /// Checkpoints for the multi-step comparison: (model name, seed, ckpt).
    checkpoints: Vec<(String, u64, Checkpoint)>,
    train_seconds: f64,
}

fn experiment() -> &'static ExperimentArtifacts {
    static ARTIFACTS: OnceLock<ExperimentArtifacts> = OnceLock::new();
    ARTIFACTS.get_or_init(|| {
        let start = Instant::now();
        let spec = ExperimentSpec {
            name: "scaled ablation".to_string(),
            data: DataSource::Synth(experiment_synth_config()),
            test_intervals: 96,
            horizon: 1,
            models: vec![],
            include_ha: true,
            ha_keying: HaKeying::WeekdayTimeOfDay,
            include_persistence: true,
            n_weather: 2,
        };
        let data = prepare_data(&spec).unwrap();
        let variants = [
            ("full", experiment_model(3, 1, 1, FusionKind::Parametric)),
            ("closeness_only", experiment_model(3, 0, 0, FusionKind::Parametric)),
            ("plain_sum", experiment_model(3, 1, 1, FusionKind::PlainSum)),
        ];
        let mut rows = Vec::new();
        let mut checkpoints = Vec::new();
        for (name, model) in &variants {
            for &seed in &EXPERIMENT_SEEDS {
                let experiment = ModelExperiment {
                    name: name.to_string(),
                    model: model.clone(),
                    train: experiment_hyper(),
                    seeds: vec![seed],
                };
                let (ckpt, _history) = train_model(&data, &experiment, seed).unwrap();
                let per_step = evaluate_checkpoint(&data, &ckpt, 1).unwrap();
                rows.push(cityflow_core::eval::ReportRow {
                    model: name.to_string(),
                    seed: Some(seed),
                    rmse: per_step[0],
                    per_step,
                });
                if *name != "plain_sum" {
                    checkpoints.push((name.to_string(), seed, ckpt));
                }
            }
        }
        // Baselines through the standard runner (no models to retrain).
        let baseline_report = run_experiment(&spec).unwrap();
        rows.extend(baseline_report.rows.clone());
        let report = EvalReport {
            spec_name: spec.name.clone(),
            config_hash: baseline_report.config_hash.clone(),
            truths_per_step: baseline_report.truths_per_step,
            rows,
        };
        ExperimentArtifacts {
            report,
            data,
            checkpoints,
            train_seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_05_scaled_ablation_reproduction() {
    let _guard = serial();
    let artifacts = experiment();
    let report = &artifacts.report;
    let ha = report.row("ha", None).expect("ha row").rmse;
    let full_mean = report.mean_rmse("full").expect("full rows");

    // (a) full model at least 20% below the historical average.
    let improvement = 1.0 - full_mean / ha;
    assert!(
        improvement >= 0.20,
        "full mean {full_mean:.3} vs ha {ha:.3}: only {:.1}% better",
        improvement * 100.0
    );

    // (b) full beats closeness-only on at least 4 of 5 seeds.
    let mut b_wins = 0;
    // (c) parametric fusion beats the plain sum on at least 4 of 5 seeds.
    let mut c_wins = 0;
    for &seed in &EXPERIMENT_SEEDS {
        let full = report.row("full", Some(seed)).unwrap().rmse;
        let closeness = report.row("closeness_only", Some(seed)).unwrap().rmse;
        let plain = report.row("plain_sum", Some(seed)).unwrap().rmse;
        if full < closeness {
            b_wins += 1;
        }
        if full < plain {
            c_wins += 1;
        }
    }
    assert!(b_wins >= 4, "full < closeness-only on only {b_wins}/5 seeds");
    assert!(c_wins >= 4, "parametric < plain-sum on only {c_wins}/5 seeds");

    assert!(
        artifacts.train_seconds < 900.0,
        "experiment took {:.0} s",
        artifacts.train_seconds
    );
    println!(
        "ACCEPTANCE C5 PASS: full {full_mean:.3} vs HA {ha:.3} ({:.1}% better); \
         full<closeness on {b_wins}/5 seeds; parametric<plain-sum on {c_wins}/5 seeds; \
         {:.0} s total",
        improvement * 100.0,
        artifacts.train_seconds
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: multi-step consistency and the multi-step ablation echo.

#[test]
fn criterion_06_multi_step_consistency() {
    let _guard = serial();
    // Bit-exactness on a small standalone model.
    let config = ModelConfig {
        ext_dim: 0,
        ..tiny_config()
    };
    let params = init_params(&config, 7).unwrap();
    let stats = NormStats::new(0.0, 40.0).unwrap();
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            model: config.clone(),
            stats,
            ext_schema: None,
        },
        params,
    };
    let grid = GridSpec {
        lon_min: 0.0,
        lon_max: 1.0,
        lat_min: 0.0,
        lat_max: 1.0,
        rows: 4,
        cols: 4,
        interval_seconds: 1800,
        epoch_start: 0,
    };
    let mut series = FlowSeries::new(grid.clone());
    let mut rng = SplitMix64::new(0xC6);
    let tensors: Vec<FlowTensor> = (0..12)
        .map(|_| {
            FlowTensor::from_data(4, 4, (0..32).map(|_| rng.next_below(40) as f64).collect())
                .unwrap()
        })
        .collect();
    series.push_segment(0, tensors).unwrap();

    // k = 1 is bit-identical to a single forward pass.
    let one = predict_multi(&ckpt, &series, &[], Horizon(1), 0).unwrap();
    let norm = |t: i64| ckpt.meta.stats.apply_tensor(series.get(t).unwrap()).to_tensor();
    let manual_input = ModelInput {
        closeness: vec![norm(10), norm(11)],
        period: vec![norm(8)],
        trend: vec![norm(4)],
        external: None,
    };
    let manual = forward(&config, &ckpt.params, &manual_input).unwrap();
    let manual_raw = manual.map(|v| ckpt.meta.stats.invert(v));
    assert_eq!(one[0].tensor.data(), manual_raw.data());

    // k = 4 equals a hand-composed rollout.
    let four = predict_multi(&ckpt, &series, &[], Horizon(4), 0).unwrap();
    let mut window: BTreeMap<i64, Tensor> = (4..12).map(|t| (t, norm(t))).collect();
    for (step, record) in four.iter().enumerate() {
        let t = 12 + step as i64;
        let input = ModelInput {
            closeness: vec![window[&(t - 2)].clone(), window[&(t - 1)].clone()],
            period: vec![window[&(t - 4)].clone()],
            trend: vec![window[&(t - 8)].clone()],
            external: None,
        };
        let pred = forward(&config, &ckpt.params, &input).unwrap();
        let raw = pred.map(|v| ckpt.meta.stats.invert(v));
        assert_eq!(record.tensor.data(), raw.data(), "step {}", step + 1);
        window.insert(t, pred);
    }

    // Directional echo: the model with period and trend beats closeness-only
    // at 4 steps ahead on the synthetic dataset (mean over seeds).
    let artifacts = experiment();
    let mean_4step = |name: &str| -> f64 {
        let values: Vec<f64> = artifacts
            .checkpoints
            .iter()
            .filter(|(n, _, _)| n == name)
            .map(|(_, _, ckpt)| {
                let per_step = evaluate_checkpoint(&artifacts.data, ckpt, 4).unwrap();
                per_step[3]
            })
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    };
    let full = mean_4step("full");
    let closeness = mean_4step("closeness_only");
    assert!(
        full < closeness,
        "4-step RMSE: full {full:.3} vs closeness-only {closeness:.3}"
    );
    println!(
        "ACCEPTANCE C6 PASS: k=1 bit-identical to a single pass; k=4 matches the \
         hand rollout; 4-step RMSE full {full:.3} < closeness-only {closeness:.3}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: HA exactness and zero RMSE on exact weekly repetition.

#[test]
fn criterion_07_ha_exactness() {
    let _guard = serial();
    let grid = GridSpec {
        lon_min: 0.0,
        lon_max: 1.0,
        lat_min: 0.0,
        lat_max: 1.0,
        rows: 2,
        cols: 2,
        interval_seconds: 21_600, // 4 intervals per day
        epoch_start: 4 * 86_400,  // a Monday
    };
    // Random series: HA must equal the brute-force same-(weekday, slot) mean.
    let mut rng = SplitMix64::new(0xC7);
    let mut series = FlowSeries::new(grid.clone());
    let tensors: Vec<FlowTensor> = (0..120)
        .map(|_| {
            FlowTensor::from_data(2, 2, (0..8).map(|_| rng.next_below(50) as f64).collect())
                .unwrap()
        })
        .collect();
    series.push_segment(0, tensors).unwrap();
    for t in 60..120i64 {
        let got = ha_predict(&series, t, HaKeying::WeekdayTimeOfDay).unwrap();
        let ts = grid.interval_start(t);
        let key = (day_of_week(ts), time_of_day(ts));
        let mut sum = FlowTensor::zeros(2, 2);
        let mut count = 0.0;
        for (s, tensor) in series.iter() {
            let sts = grid.interval_start(s);
            if s < t && (day_of_week(sts), time_of_day(sts)) == key {
                sum = sum.merge(tensor).unwrap();
                count += 1.0;
            }
        }
        let want = sum.map(|v| v / count);
        assert_eq!(got, want, "interval {t}");
    }

    // Exact weekly repetition: HA is perfect on the final week.
    let weekly = 28usize; // 7 days x 4 intervals
    let mut repeating = FlowSeries::new(grid);
    let tensors: Vec<FlowTensor> = (0..weekly * 4)
        .map(|t| {
            let phase = (t % weekly) as f64;
            FlowTensor::from_data(2, 2, (0..8).map(|c| phase * 3.0 + c as f64).collect()).unwrap()
        })
        .collect();
    repeating.push_segment(0, tensors).unwrap();
    let mut pairs = Vec::new();
    for t in (weekly * 3) as i64..(weekly * 4) as i64 {
        let pred = ha_predict(&repeating, t, HaKeying::WeekdayTimeOfDay).unwrap();
        pairs.push((pred, repeating.get(t).unwrap().clone()));
    }
    let borrowed: Vec<(&FlowTensor, &FlowTensor)> = pairs.iter().map(|(p, t)| (p, t)).collect();
    let value = rmse(&borrowed).unwrap();
    assert_eq!(value, 0.0);
    println!(
        "ACCEPTANCE C7 PASS: HA equals the brute-force keyed mean on 60 intervals \
         and scores RMSE 0 on exact weekly repetition"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: round trips (min-max, STRN, FLW1).

#[test]
fn criterion_08_round_trips() {
    let _guard = serial();
    // Min-max round trip below 1e-9.
    let stats = NormStats::new(0.0, 977.0).unwrap();
    let mut rng = SplitMix64::new(0xC8);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let x = rng.uniform(0.0, 977.0);
        worst = worst.max((stats.invert(stats.apply(x)) - x).abs());
    }
    assert!(worst < 1e-9, "round-trip error {worst:.2e}");

    // STRN checkpoint: bit-exact bytes and equal contents.
    let config = tiny_config();
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            model: config.clone(),
            stats,
            ext_schema: None,
        },
        params: init_params(&config, 0xC8).unwrap(),
    };
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);

    // FLW1: bit-exact bytes through a write/read/write cycle.
    let grid = GridSpec {
        lon_min: 0.0,
        lon_max: 1.0,
        lat_min: 0.0,
        lat_max: 1.0,
        rows: 5,
        cols: 3,
        interval_seconds: 900,
        epoch_start: 1_700_000_000,
    };
    let mut series = FlowSeries::new(grid);
    for (start, len) in [(2i64, 6usize), (12, 4)] {
        let tensors: Vec<FlowTensor> = (0..len)
            .map(|_| {
                FlowTensor::from_data(5, 3, (0..30).map(|_| rng.next_below(999) as f64).collect())
                    .unwrap()
            })
            .collect();
        series.push_segment(start, tensors).unwrap();
    }
    let bytes = flw1_bytes(&series).unwrap();
    let back = flw1_from_bytes(&bytes).unwrap();
    assert_eq!(flw1_bytes(&back).unwrap(), bytes);
    println!(
        "ACCEPTANCE C8 PASS: min-max round trip worst error {worst:.1e}; STRN and \
         FLW1 byte-exact"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: pipeline ticks push exactly what the offline forecaster
// exports, across 20 ticks of a synthetic feed.

#[test]
fn criterion_09_pipeline_equivalence() {
    let _guard = serial();
    let grid = GridSpec {
        lon_min: 0.0,
        lon_max: 1.0,
        lat_min: 0.0,
        lat_max: 1.0,
        rows: 3,
        cols: 3,
        interval_seconds: 600,
        epoch_start: 0,
    };
    let config = ModelConfig {
        rows: 3,
        cols: 3,
        closeness_len: 2,
        period_len: 1,
        trend_len: 0,
        period: 3,
        trend_span: 6,
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
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            model: config.clone(),
            stats: NormStats::new(0.0, 30.0).unwrap(),
            ext_schema: None,
        },
        params: init_params(&config, 0xC9).unwrap(),
    };
    let horizon = 3usize;

    // Synthetic feed: one CSV batch per interval, kept by the test and also
    // stored in the shared cache the pipeline reads from.
    let mut rng = SplitMix64::new(0x99);
    let mut feed = SharedMemoryKv::new();
    let n_ticks = 20i64;
    let mut batches: Vec<Vec<u8>> = Vec::new();
    for t in 0..n_ticks {
        let mut points = Vec::new();
        for obj in 0..8 {
            for s in 0..5 {
                points.push(GeoPoint {
                    object_id: format!("o{obj}"),
                    timestamp: grid.interval_start(t) + s * 100 + 3,
                    lon: rng.uniform(0.0, 1.0),
                    lat: rng.uniform(0.0, 1.0),
                });
            }
        }
        let mut csv = Vec::new();
        write_trajectory_csv(&mut csv, &points).unwrap();
        feed.set(&traj_key(t), &csv, None).unwrap();
        batches.push(csv);
    }

    let pipeline_config = PipelineConfig {
        grid: grid.clone(),
        checkpoint_path: "unused".into(),
        horizon,
        tick_interval_seconds: 600,
        retention_intervals: Some(96),
        cache: CacheBackend::Memory,
        externals_path: None,
        external_policy: Default::default(),
        cache_timeout_ms: 500,
    };
    let mut pipeline =
        Pipeline::with_parts(pipeline_config, ckpt.clone(), Box::new(feed.clone())).unwrap();

    // Independent offline assembly of the same feed.
    let mut offline = FlowSeries::new(grid.clone());
    let empty = Default::default();
    let mut processed = 0usize;
    for t in 0..n_ticks {
        let now = grid.interval_start(t + 1) + 5;
        let report = pipeline.tick(now).unwrap();
        let (points, _) =
            cityflow_core::io::read_trajectory_csv(batches[t as usize].as_slice()).unwrap();
        let by_interval = segment_by_interval(&grid, &points);
        let flow = compute_flows(&grid, by_interval.get(&t).unwrap_or(&empty));
        offline.append(t, flow).unwrap();
        match report.outcome {
            TickOutcome::Processed { steps, .. } => {
                assert_eq!(steps, horizon);
                processed += 1;
                let names: Vec<&str> =
                    report.stages.iter().map(|(n, _)| n.as_str()).collect();
                assert_eq!(names, ["pull", "convert", "predict", "push"]);
                // Offline forecast from the independently assembled history.
                let records =
                    predict_multi(&ckpt, &offline, &[], Horizon(horizon), now).unwrap();
                for record in &records {
                    let offline_bytes = forecast_flw1(&grid, record).unwrap();
                    let pushed = feed
                        .get(&forecast_key(record.interval))
                        .unwrap()
                        .expect("forecast pushed");
                    assert_eq!(
                        pushed, offline_bytes,
                        "tick {t}, interval {}",
                        record.interval
                    );
                }
            }
            TickOutcome::InsufficientHistory { .. } => {}
            ref other => panic!("unexpected outcome at tick {t}: {other:?}"),
        }
    }
    assert!(processed >= 17, "only {processed} of 20 ticks processed");
    println!(
        "ACCEPTANCE C9 PASS: {processed} processed ticks pushed bit-exact offline \
         forecasts with the four-stage report"
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: cache retention at the two-day interval count.

#[test]
fn criterion_10_cache_retention() {
    let _guard = serial();
    // 96 intervals at a 30-minute interval length is exactly two days.
    let retention = two_day_retention(1800);
    assert_eq!(retention, 96);
    let mut cache = ForecastCache::new(retention);
    let record = |t: i64| ForecastRecord {
        interval: t,
        tensor: FlowTensor::zeros(1, 1),
        produced_at: t,
        checkpoint_id: "c".to_string(),
    };
    for t in 0..200 {
        cache.put(record(t));
    }
    let mut evicted: Vec<i64> = Vec::new();
    for now in (100..400).step_by(7) {
        cache.evict(now);
        for t in 0..200i64 {
            let age = now - t;
            if age > retention {
                assert!(cache.get(t).is_none(), "interval {t} should be gone at {now}");
                if !evicted.contains(&t) {
                    evicted.push(t);
                }
            }
        }
        // Nothing previously evicted ever returns.
        for &t in &evicted {
            assert!(cache.get(t).is_none());
        }
    }
    assert!(cache.is_empty(), "everything ages out eventually");
    println!(
        "ACCEPTANCE C10 PASS: records older than {retention} intervals (two days at \
         30-minute intervals) never return after eviction"
    );
}
