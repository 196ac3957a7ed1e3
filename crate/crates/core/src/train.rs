//! Training-instance construction and the optimization loop.
//!
//! Instances pair the three lagged input windows and the external vector
//! with the target observation. Training runs seeded mini-batch Adam with a
//! chronological 90/10 train/validation split, early stopping on validation
//! RMSE, best-parameter restore, and a final fine-tuning phase over the full
//! data. Normalization statistics come from the training split only and a
//! fixed seed makes the whole run bitwise reproducible.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::TrainError;
use crate::grid::FlowSeries;
use crate::model::{
    build_forward, init_params, BatchInput, Branch, Mode, ModelConfig, ModelInput, ParameterSet,
};
use crate::norm::NormStats;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// One supervised example: lagged windows plus external features against the
/// observation at `target_interval`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub target_interval: i64,
    pub input: ModelInput,
    pub target: Tensor,
    /// Every interval the windows read from, for leakage audits.
    pub dependencies: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<TrainingInstance>,
    pub normalized: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Applies min-max scaling to every window and target tensor. External
    /// vectors are already encoded into `[0, 1]` and stay untouched.
    pub fn normalize(&self, stats: &NormStats) -> Dataset {
        let scale = |t: &Tensor| t.map(|v| stats.apply(v));
        let instances = self
            .instances
            .iter()
            .map(|inst| TrainingInstance {
                target_interval: inst.target_interval,
                input: ModelInput {
                    closeness: inst.input.closeness.iter().map(&scale).collect(),
                    period: inst.input.period.iter().map(&scale).collect(),
                    trend: inst.input.trend.iter().map(&scale).collect(),
                    external: inst.input.external.clone(),
                },
                target: scale(&inst.target),
                dependencies: inst.dependencies.clone(),
            })
            .collect();
        Dataset {
            instances,
            normalized: true,
        }
    }

    /// Min-max range over all window and target tensors of these instances.
    pub fn fit_stats(&self) -> Result<NormStats, TrainError> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for inst in &self.instances {
            for tensor in inst
                .input
                .closeness
                .iter()
                .chain(&inst.input.period)
                .chain(&inst.input.trend)
                .chain(std::iter::once(&inst.target))
            {
                min = min.min(tensor.min());
                max = max.max(tensor.max());
            }
        }
        NormStats::new(min, max)
    }
}

/// Encoded external vectors keyed by interval.
pub type ExternalVectors = BTreeMap<i64, Vec<f64>>;

/// Builds the dataset: for every interval `t` whose full dependency set lies
/// inside one contiguous segment, emit `(windows ending before t, E_t, X_t)`.
/// Gaps between segments simply reduce the instance count.
pub fn make_instances(
    series: &FlowSeries,
    externals: Option<&ExternalVectors>,
    config: &ModelConfig,
) -> Result<Dataset, TrainError> {
    config.validate()?;
    let lookback = config.max_lookback() as i64;
    let mut instances = Vec::new();
    for segment in series.segments() {
        for t in segment.start + lookback..segment.end() {
            let gather = |branch: Branch| -> Vec<Tensor> {
                let len = branch.window_len(config) as i64;
                let stride = branch.stride(config) as i64;
                // Oldest first: X_{t - len*stride} .. X_{t - stride}.
                (1..=len)
                    .rev()
                    .map(|i| {
                        let idx = (t - i * stride - segment.start) as usize;
                        segment.tensors[idx].to_tensor()
                    })
                    .collect()
            };
            let external = if config.ext_dim > 0 {
                let table = externals.ok_or(TrainError::MissingExternal { interval: t })?;
                let vec = table
                    .get(&t)
                    .ok_or(TrainError::MissingExternal { interval: t })?;
                if vec.len() != config.ext_dim {
                    return Err(TrainError::ExternalLength {
                        interval: t,
                        expected: config.ext_dim,
                        got: vec.len(),
                    });
                }
                Some(Tensor::new(vec![config.ext_dim], vec.clone()).expect("length checked"))
            } else {
                None
            };
            let mut dependencies = Vec::new();
            for branch in crate::model::BRANCHES {
                let len = branch.window_len(config) as i64;
                let stride = branch.stride(config) as i64;
                for i in 1..=len {
                    dependencies.push(t - i * stride);
                }
            }
            instances.push(TrainingInstance {
                target_interval: t,
                input: ModelInput {
                    closeness: gather(Branch::Closeness),
                    period: gather(Branch::Period),
                    trend: gather(Branch::Trend),
                    external,
                },
                target: segment.tensors[(t - segment.start) as usize].to_tensor(),
                dependencies,
            });
        }
    }
    Ok(Dataset {
        instances,
        normalized: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates per trainable parameter.
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> AdamState {
        let moments = params
            .iter()
            .filter(|(name, _)| ParameterSet::is_trainable(name))
            .map(|(name, tensor)| {
                (
                    name.to_string(),
                    (Tensor::zeros(tensor.shape()), Tensor::zeros(tensor.shape())),
                )
            })
            .collect();
        AdamState {
            config,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction over every trainable parameter.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &HashMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<(), TrainError> {
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let names: Vec<String> = params
        .names()
        .filter(|n| ParameterSet::is_trainable(n))
        .map(String::from)
        .collect();
    for name in names {
        let grad = match grads.get(&name) {
            Some(g) => g,
            None => continue,
        };
        let (m, v) = state
            .moments
            .get_mut(&name)
            .expect("state initialized from the same parameter set");
        let current = params.require(&name)?;
        let mut updated = current.clone();
        for i in 0..grad.len() {
            let g = grad.data()[i];
            m.data_mut()[i] = c.beta1 * m.data()[i] + (1.0 - c.beta1) * g;
            v.data_mut()[i] = c.beta2 * v.data()[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m.data()[i] / bc1;
            let v_hat = v.data()[i] / bc2;
            updated.data_mut()[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        if !updated.all_finite() {
            return Err(TrainError::Tensor(
                crate::error::TensorError::NonFinite {
                    context: format!("adam update of {name}"),
                },
            ));
        }
        params.set(&name, updated)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    #[default]
    Chronological,
    Random,
}

fn default_batch_size() -> usize {
    32
}
fn default_patience() -> usize {
    10
}
fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub finetune_epochs: usize,
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub split: SplitKind,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainHyper {
    fn default() -> TrainHyper {
        TrainHyper {
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            finetune_epochs: 0,
            validation_fraction: 0.1,
            split: SplitKind::Chronological,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    EarlyStop,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_rmse: Option<f64>,
}

impl TrainingHistory {
    /// CSV rendering: `epoch,train_loss,val_rmse` (blank when no validation).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_rmse\n");
        for r in &self.records {
            let val = r
                .val_rmse
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, val));
        }
        out
    }
}

pub struct TrainOutput {
    pub params: ParameterSet,
    pub stats: NormStats,
    pub history: TrainingHistory,
}

/// Predictions for a set of normalized instances, evaluated in inference
/// mode in bounded-size chunks. Returns one tensor per instance.
fn predict_batchwise(
    config: &ModelConfig,
    params: &ParameterSet,
    instances: &[TrainingInstance],
) -> Result<Vec<Tensor>, TrainError> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(256) {
        let inputs: Vec<&ModelInput> = chunk.iter().map(|i| &i.input).collect();
        let batch = BatchInput::from_instances(config, &inputs)?;
        let model = build_forward(config, params, &batch, Mode::Infer)?;
        let pred = model.graph.value(model.prediction);
        let plane = 2 * config.rows * config.cols;
        for b in 0..chunk.len() {
            out.push(
                Tensor::new(
                    vec![2, config.rows, config.cols],
                    pred.data()[b * plane..(b + 1) * plane].to_vec(),
                )
                .expect("consistent shape"),
            );
        }
    }
    Ok(out)
}

/// Validation RMSE in raw flow units for normalized instances.
fn validation_rmse(
    config: &ModelConfig,
    params: &ParameterSet,
    stats: &NormStats,
    instances: &[TrainingInstance],
) -> Result<f64, TrainError> {
    let preds = predict_batchwise(config, params, instances)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pred, inst) in preds.iter().zip(instances) {
        for (p, t) in pred.data().iter().zip(inst.target.data()) {
            let diff = stats.invert(*p) - stats.invert(*t);
            sum += diff * diff;
            count += 1;
        }
    }
    Ok((sum / count as f64).sqrt())
}

/// Runs one optimization epoch over the given instance order and returns the
/// mean batch loss.
fn run_epoch(
    config: &ModelConfig,
    params: &mut ParameterSet,
    instances: &[TrainingInstance],
    order: &[usize],
    batch_size: usize,
    adam: &mut AdamState,
) -> Result<f64, TrainError> {
    let mut losses = Vec::new();
    for batch_idx in order.chunks(batch_size.max(1)) {
        let inputs: Vec<&ModelInput> = batch_idx.iter().map(|&i| &instances[i].input).collect();
        let targets: Vec<&Tensor> = batch_idx.iter().map(|&i| &instances[i].target).collect();
        let batch = BatchInput::from_instances(config, &inputs)?;
        let mut model = build_forward(config, params, &batch, Mode::Train)?;
        let target = Tensor::stack(&targets).expect("targets share a shape");
        let t = model.graph.constant(target);
        let loss_node = model.graph.mse_loss(model.prediction, t)?;
        let loss = model.graph.value(loss_node).item()?;
        if !loss.is_finite() {
            return Err(TrainError::Tensor(crate::error::TensorError::NonFinite {
                context: "batch loss".to_string(),
            }));
        }
        losses.push(loss);
        let grads: Gradients = model.graph.backward(loss_node)?;
        let mut by_name = HashMap::new();
        for (name, &leaf) in &model.leaves {
            if ParameterSet::is_trainable(name) {
                by_name.insert(name.clone(), grads.get(leaf, &model.graph));
            }
        }
        adam_step(params, &by_name, adam)?;
        // Fold batch statistics into the running estimates.
        for update in model.bn_updates {
            let momentum = config.bn_momentum;
            for (name, batch_stat) in [
                (update.mean_name, update.stats.mean),
                (update.var_name, update.stats.var),
            ] {
                let old = params.require(&name)?;
                let merged = old
                    .zip(&batch_stat, |o, b| momentum * o + (1.0 - momentum) * b)
                    .expect("stat shapes match");
                params.set(&name, merged)?;
            }
        }
    }
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Full training procedure. The dataset must be in raw scale; normalization
/// statistics are fitted on the training split and applied to both splits.
pub fn train(
    dataset: &Dataset,
    config: &ModelConfig,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutput, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    config.validate()?;
    let n = dataset.len();
    let n_val = ((n as f64 * hyper.validation_fraction).round() as usize).min(n - 1);

    let root = SplitMix64::new(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    if hyper.split == SplitKind::Random {
        let mut split_rng = root.fork(0x511);
        split_rng.shuffle(&mut indices);
    }
    let (train_idx, val_idx) = indices.split_at(n - n_val);

    let train_raw = Dataset {
        instances: train_idx.iter().map(|&i| dataset.instances[i].clone()).collect(),
        normalized: false,
    };
    let val_raw: Vec<TrainingInstance> =
        val_idx.iter().map(|&i| dataset.instances[i].clone()).collect();

    let stats = train_raw.fit_stats()?;
    let train_set = train_raw.normalize(&stats);
    let val_set = Dataset {
        instances: val_raw,
        normalized: false,
    }
    .normalize(&stats);

    let mut params = init_params(config, seed).map_err(TrainError::Model)?;
    let mut adam = AdamState::new(hyper.adam, &params);
    let mut shuffle_rng = root.fork(0xba7c4);

    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..hyper.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let train_loss = run_epoch(
            config,
            &mut params,
            &train_set.instances,
            &order,
            hyper.batch_size,
            &mut adam,
        )?;
        let val_rmse = if val_set.instances.is_empty() {
            None
        } else {
            Some(validation_rmse(config, &params, &stats, &val_set.instances)?)
        };
        history.records.push(EpochRecord {
            epoch,
            phase: Phase::EarlyStop,
            train_loss,
            val_rmse,
        });
        if let Some(v) = val_rmse {
            let improved = best.as_ref().map(|(b, _, _)| v < *b).unwrap_or(true);
            if improved {
                best = Some((v, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= hyper.patience {
                    break;
                }
            }
        }
    }

    if let Some((v, e, p)) = &best {
        params = p.clone();
        history.best_epoch = Some(*e);
        history.best_val_rmse = Some(*v);
    }

    if hyper.finetune_epochs > 0 {
        // Continue on the full data (train + validation) with fresh moments.
        let mut full = train_set.instances.clone();
        full.extend(val_set.instances.iter().cloned());
        let mut adam = AdamState::new(hyper.adam, &params);
        let mut order: Vec<usize> = (0..full.len()).collect();
        for epoch in 0..hyper.finetune_epochs {
            shuffle_rng.shuffle(&mut order);
            let train_loss = run_epoch(
                config,
                &mut params,
                &full,
                &order,
                hyper.batch_size,
                &mut adam,
            )?;
            let val_rmse = if val_set.instances.is_empty() {
                None
            } else {
                Some(validation_rmse(config, &params, &stats, &val_set.instances)?)
            };
            history.records.push(EpochRecord {
                epoch,
                phase: Phase::Finetune,
                train_loss,
                val_rmse,
            });
        }
    }

    Ok(TrainOutput {
        params,
        stats,
        history,
    })
}

/// Recomputes the validation RMSE of a parameter set against the dataset's
/// chronological validation split, mirroring the split made by [`train`].
pub fn recompute_validation_rmse(
    dataset: &Dataset,
    config: &ModelConfig,
    hyper: &TrainHyper,
    params: &ParameterSet,
    stats: &NormStats,
) -> Result<Option<f64>, TrainError> {
    let n = dataset.len();
    let n_val = ((n as f64 * hyper.validation_fraction).round() as usize).min(n.saturating_sub(1));
    if n_val == 0 || hyper.split != SplitKind::Chronological {
        return Ok(None);
    }
    let val = Dataset {
        instances: dataset.instances[n - n_val..].to_vec(),
        normalized: false,
    }
    .normalize(stats);
    Ok(Some(validation_rmse(config, params, stats, &val.instances)?))
}
