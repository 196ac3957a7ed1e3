//! The spatio-temporal residual network: three convolutional residual
//! branches over the closeness / period / trend input windows, a two-layer
//! fully-connected external branch, learned elementwise fusion of the branch
//! outputs, and a tanh head that keeps predictions inside `(-1, 1)`.
//!
//! Branch structure: `Conv1` (optionally followed by ReLU), `L` residual
//! units computing `X + F(X)` where `F` chains `convs_per_unit` repetitions
//! of `[BN] -> ReLU -> Conv`, then `Conv2` down to the two flow channels.
//! With all residual-function weights at zero every unit passes its input
//! through unchanged, so depth does not perturb the signal path.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, NodeId};
use crate::error::ModelError;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// How branch outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Learned weight tensor per branch, shaped `2 x I x J`.
    #[default]
    Parametric,
    /// Learned weights shared across the two channels, shaped `I x J`.
    ChannelShared,
    /// Fixed all-ones weights: a plain sum of branch outputs.
    PlainSum,
}

fn default_filters() -> usize {
    64
}
fn default_kernel() -> usize {
    3
}
fn default_convs_per_unit() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_ext_hidden() -> usize {
    10
}
fn default_bn_epsilon() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub rows: usize,
    pub cols: usize,
    /// Closeness window length (recent intervals).
    pub closeness_len: usize,
    /// Period window length (daily-lagged intervals).
    pub period_len: usize,
    /// Trend window length (weekly-lagged intervals).
    pub trend_len: usize,
    /// Period lag in intervals (one day).
    pub period: usize,
    /// Trend lag in intervals (one week).
    pub trend_span: usize,
    /// Residual units per branch.
    pub residual_units: usize,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub use_batch_norm: bool,
    /// Convolutions inside each residual function (1 or 2).
    #[serde(default = "default_convs_per_unit")]
    pub convs_per_unit: usize,
    /// Apply ReLU between Conv1 and the first residual unit.
    #[serde(default = "default_true")]
    pub relu_after_conv1: bool,
    #[serde(default)]
    pub fusion: FusionKind,
    /// External feature vector length; 0 disables the external branch.
    #[serde(default)]
    pub ext_dim: usize,
    #[serde(default = "default_ext_hidden")]
    pub ext_hidden: usize,
    #[serde(default = "default_bn_epsilon")]
    pub bn_epsilon: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Closeness,
    Period,
    Trend,
}

pub const BRANCHES: [Branch; 3] = [Branch::Closeness, Branch::Period, Branch::Trend];

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Closeness => "closeness",
            Branch::Period => "period",
            Branch::Trend => "trend",
        }
    }

    pub fn window_len(self, config: &ModelConfig) -> usize {
        match self {
            Branch::Closeness => config.closeness_len,
            Branch::Period => config.period_len,
            Branch::Trend => config.trend_len,
        }
    }

    /// Lag between consecutive window entries, in intervals.
    pub fn stride(self, config: &ModelConfig) -> usize {
        match self {
            Branch::Closeness => 1,
            Branch::Period => config.period,
            Branch::Trend => config.trend_span,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: &str| {
            Err(ModelError::InvalidConfig {
                reason: reason.to_string(),
            })
        };
        if self.rows == 0 || self.cols == 0 {
            return fail("grid dims must be >= 1");
        }
        if self.closeness_len == 0 && self.period_len == 0 && self.trend_len == 0 {
            return fail("at least one of the temporal windows must be non-empty");
        }
        if self.period == 0 || self.trend_span == 0 {
            return fail("period and trend span must be >= 1");
        }
        if self.filters == 0 {
            return fail("filters must be >= 1");
        }
        if self.kernel == 0 {
            return fail("kernel must be >= 1");
        }
        if !(1..=2).contains(&self.convs_per_unit) {
            return fail("convs_per_unit must be 1 or 2");
        }
        if self.ext_dim > 0 && self.ext_hidden == 0 {
            return fail("ext_hidden must be >= 1 when the external branch is enabled");
        }
        Ok(())
    }

    pub fn active_branches(&self) -> Vec<Branch> {
        BRANCHES
            .into_iter()
            .filter(|b| b.window_len(self) > 0)
            .collect()
    }

    /// Longest lookback any window needs, in intervals.
    pub fn max_lookback(&self) -> usize {
        BRANCHES
            .into_iter()
            .map(|b| b.window_len(self) * b.stride(self))
            .max()
            .unwrap_or(0)
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [2, self.rows, self.cols]
    }
}

/// Named parameter tensors in a canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> ParameterSet {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), i))
            .collect();
        ParameterSet { entries, index }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.get(name).ok_or_else(|| ModelError::MissingParameter {
            name: name.to_string(),
        })
    }

    /// Replaces a tensor; the shape must match the existing entry.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), ModelError> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| ModelError::MissingParameter {
                name: name.to_string(),
            })?;
        if self.entries[idx].1.shape() != tensor.shape() {
            return Err(ModelError::ParameterShape {
                name: name.to_string(),
                expected: self.entries[idx].1.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        self.entries[idx].1 = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Batch-norm running statistics are state, not trainable weights.
    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with(".running_mean") && !name.ends_with(".running_var")
    }
}

/// Expected parameter names and shapes for a config, in canonical order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    let k = config.kernel;
    let f = config.filters;
    for branch in config.active_branches() {
        let name = branch.name();
        let in_ch = 2 * branch.window_len(config);
        layout.push((format!("{name}.conv1.weight"), vec![f, in_ch, k, k]));
        layout.push((format!("{name}.conv1.bias"), vec![f]));
        for unit in 0..config.residual_units {
            for conv in 0..config.convs_per_unit {
                if config.use_batch_norm {
                    layout.push((format!("{name}.unit{unit}.bn{conv}.gamma"), vec![f]));
                    layout.push((format!("{name}.unit{unit}.bn{conv}.beta"), vec![f]));
                    layout.push((format!("{name}.unit{unit}.bn{conv}.running_mean"), vec![f]));
                    layout.push((format!("{name}.unit{unit}.bn{conv}.running_var"), vec![f]));
                }
                layout.push((
                    format!("{name}.unit{unit}.conv{conv}.weight"),
                    vec![f, f, k, k],
                ));
                layout.push((format!("{name}.unit{unit}.conv{conv}.bias"), vec![f]));
            }
        }
        layout.push((format!("{name}.conv2.weight"), vec![2, f, k, k]));
        layout.push((format!("{name}.conv2.bias"), vec![2]));
    }
    match config.fusion {
        FusionKind::Parametric => {
            for branch in config.active_branches() {
                layout.push((
                    format!("fusion.{}", branch.name()),
                    vec![2, config.rows, config.cols],
                ));
            }
        }
        FusionKind::ChannelShared => {
            for branch in config.active_branches() {
                layout.push((
                    format!("fusion.{}", branch.name()),
                    vec![config.rows, config.cols],
                ));
            }
        }
        FusionKind::PlainSum => {}
    }
    if config.ext_dim > 0 {
        layout.push((
            "external.fc1.weight".to_string(),
            vec![config.ext_hidden, config.ext_dim],
        ));
        layout.push(("external.fc1.bias".to_string(), vec![config.ext_hidden]));
        layout.push((
            "external.fc2.weight".to_string(),
            vec![2 * config.rows * config.cols, config.ext_hidden],
        ));
        layout.push((
            "external.fc2.bias".to_string(),
            vec![2 * config.rows * config.cols],
        ));
    }
    layout
}

/// Uniform Glorot bound for a weight tensor: conv weights use
/// `fan = channels x kernel area`, fully-connected weights use the matrix
/// dims.
fn glorot_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [co, ci, kh, kw] => (ci * kh * kw, co * kh * kw),
        [m, n] => (*n, *m),
        _ => (shape.iter().product(), shape.iter().product()),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fresh parameters: weights from `Uniform(-s, s)` with the Glorot bound,
/// biases and batch-norm shifts at zero, batch-norm scales and running
/// variances at one, and fusion weights at `1 / (number of active branches)`.
/// Deterministic for a given seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let active = config.active_branches().len() as f64;
    let mut entries = Vec::new();
    for (name, shape) in parameter_layout(config) {
        let n: usize = shape.iter().product();
        let tensor = if name.starts_with("fusion.") {
            Tensor::filled(&shape, 1.0 / active)
        } else if name.ends_with(".weight") {
            let s = glorot_bound(&shape);
            Tensor::new(shape, (0..n).map(|_| rng.uniform(-s, s)).collect())
                .expect("layout shapes are consistent")
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            Tensor::ones(&shape)
        } else {
            Tensor::zeros(&shape)
        };
        entries.push((name, tensor));
    }
    Ok(ParameterSet::from_entries(entries))
}

/// Validates that a parameter set matches the config's layout exactly.
pub fn check_params(config: &ModelConfig, params: &ParameterSet) -> Result<(), ModelError> {
    let layout = parameter_layout(config);
    for (name, shape) in &layout {
        let tensor = params.require(name)?;
        if tensor.shape() != shape.as_slice() {
            return Err(ModelError::ParameterShape {
                name: name.clone(),
                expected: shape.clone(),
                got: tensor.shape().to_vec(),
            });
        }
    }
    if layout.len() != params.len() {
        let expected: Vec<&String> = layout.iter().map(|(n, _)| n).collect();
        let extra = params
            .names()
            .find(|n| !expected.iter().any(|e| e == n))
            .unwrap_or("?");
        return Err(ModelError::InvalidConfig {
            reason: format!("unexpected parameter `{extra}` for this config"),
        });
    }
    Ok(())
}

/// One model input: the three stacked windows (oldest first, matching the
/// lag order) and the external feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `l_c` tensors of shape `2 x I x J`.
    pub closeness: Vec<Tensor>,
    pub period: Vec<Tensor>,
    pub trend: Vec<Tensor>,
    /// Length `ext_dim`, absent when the external branch is disabled.
    pub external: Option<Tensor>,
}

impl ModelInput {
    pub fn window(&self, branch: Branch) -> &[Tensor] {
        match branch {
            Branch::Closeness => &self.closeness,
            Branch::Period => &self.period,
            Branch::Trend => &self.trend,
        }
    }

    fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        for branch in BRANCHES {
            let window = self.window(branch);
            if window.len() != branch.window_len(config) {
                return Err(ModelError::InstanceMismatch {
                    reason: format!(
                        "{} window has {} tensors, config wants {}",
                        branch.name(),
                        window.len(),
                        branch.window_len(config)
                    ),
                });
            }
            for t in window {
                if t.shape() != config.output_shape() {
                    return Err(ModelError::InstanceMismatch {
                        reason: format!(
                            "{} window tensor has shape {:?}",
                            branch.name(),
                            t.shape()
                        ),
                    });
                }
            }
        }
        match (&self.external, config.ext_dim) {
            (None, 0) => {}
            (Some(e), d) if d > 0 && e.shape() == [d] => {}
            (ext, d) => {
                return Err(ModelError::InstanceMismatch {
                    reason: format!(
                        "external vector {:?} does not match ext_dim {d}",
                        ext.as_ref().map(|e| e.shape().to_vec())
                    ),
                });
            }
        }
        Ok(())
    }

    /// Stacks a window into the branch input `2l x I x J`.
    pub fn branch_input(&self, branch: Branch) -> Option<Tensor> {
        let window = self.window(branch);
        if window.is_empty() {
            return None;
        }
        let refs: Vec<&Tensor> = window.iter().collect();
        Some(Tensor::concat(&refs).expect("windows are same-shaped"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Pending running-statistics update from one train-mode batch norm.
pub struct BnUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub stats: BatchStats,
}

/// A forward pass recorded on a fresh graph: parameter leaves by name, the
/// prediction node, and any batch-norm statistics gathered in train mode.
pub struct ModelGraph {
    pub graph: Graph,
    pub leaves: HashMap<String, NodeId>,
    pub prediction: NodeId,
    pub bn_updates: Vec<BnUpdate>,
}

/// Batched inputs: branch windows stacked to `B x 2l x I x J` and externals
/// to `B x ext_dim`.
pub struct BatchInput {
    pub closeness: Option<Tensor>,
    pub period: Option<Tensor>,
    pub trend: Option<Tensor>,
    pub external: Option<Tensor>,
}

impl BatchInput {
    /// Stacks per-instance inputs into batch tensors.
    pub fn from_instances(config: &ModelConfig, inputs: &[&ModelInput]) -> Result<BatchInput, ModelError> {
        for input in inputs {
            input.check(config)?;
        }
        let stack_branch = |branch: Branch| -> Option<Tensor> {
            if branch.window_len(config) == 0 {
                return None;
            }
            let per_instance: Vec<Tensor> = inputs
                .iter()
                .map(|i| i.branch_input(branch).expect("checked non-empty"))
                .collect();
            let refs: Vec<&Tensor> = per_instance.iter().collect();
            Some(Tensor::stack(&refs).expect("uniform shapes"))
        };
        let external = if config.ext_dim > 0 {
            let per_instance: Vec<&Tensor> = inputs
                .iter()
                .map(|i| i.external.as_ref().expect("checked present"))
                .collect();
            Some(Tensor::stack(&per_instance).expect("uniform shapes"))
        } else {
            None
        };
        Ok(BatchInput {
            closeness: stack_branch(Branch::Closeness),
            period: stack_branch(Branch::Period),
            trend: stack_branch(Branch::Trend),
            external,
        })
    }

    fn branch(&self, branch: Branch) -> Option<&Tensor> {
        match branch {
            Branch::Closeness => self.closeness.as_ref(),
            Branch::Period => self.period.as_ref(),
            Branch::Trend => self.trend.as_ref(),
        }
    }
}

/// Records the full forward pass for a batch on a fresh graph. In train mode
/// parameters become gradient-carrying leaves and batch norm uses batch
/// statistics; in infer mode parameters are constants and batch norm uses the
/// stored running statistics.
pub fn build_forward(
    config: &ModelConfig,
    params: &ParameterSet,
    batch: &BatchInput,
    mode: Mode,
) -> Result<ModelGraph, ModelError> {
    check_params(config, params)?;
    let mut graph = Graph::new();
    let mut leaves = HashMap::new();
    for (name, tensor) in params.iter() {
        let id = if mode == Mode::Train && ParameterSet::is_trainable(name) {
            graph.parameter(tensor.clone())
        } else {
            graph.constant(tensor.clone())
        };
        leaves.insert(name.to_string(), id);
    }
    let mut bn_updates = Vec::new();

    let mut fused: Option<NodeId> = None;
    for branch in config.active_branches() {
        let input = batch.branch(branch).ok_or_else(|| ModelError::InstanceMismatch {
            reason: format!("batch is missing the {} window", branch.name()),
        })?;
        let x = graph.constant(input.clone());
        let out = branch_forward_on(
            &mut graph,
            &leaves,
            config,
            branch,
            x,
            mode,
            &mut bn_updates,
            params,
        )?;
        let weighted = match config.fusion {
            FusionKind::PlainSum => out,
            _ => {
                let w = leaves[&format!("fusion.{}", branch.name())];
                graph.hadamard(out, w)?
            }
        };
        fused = Some(match fused {
            None => weighted,
            Some(acc) => graph.add(acc, weighted)?,
        });
    }
    let mut combined = fused.expect("config has at least one branch");

    if config.ext_dim > 0 {
        let e = batch
            .external
            .as_ref()
            .ok_or_else(|| ModelError::InstanceMismatch {
                reason: "batch is missing the external vector".to_string(),
            })?;
        let batch_rows = match e.shape() {
            [_, d] if *d == config.ext_dim => e.shape()[0],
            [d] if *d == config.ext_dim => 1,
            other => {
                return Err(ModelError::InstanceMismatch {
                    reason: format!("external batch has shape {other:?}"),
                })
            }
        };
        let e = graph.constant(e.clone());
        let h = graph.fully_connected(e, leaves["external.fc1.weight"], leaves["external.fc1.bias"])?;
        let h = graph.relu(h);
        let o = graph.fully_connected(h, leaves["external.fc2.weight"], leaves["external.fc2.bias"])?;
        let target_shape: Vec<usize> = if graph.value(combined).rank() == 4 {
            vec![batch_rows, 2, config.rows, config.cols]
        } else {
            vec![2, config.rows, config.cols]
        };
        let ext = graph.reshape(o, &target_shape)?;
        combined = graph.add(combined, ext)?;
    }

    let prediction = graph.tanh(combined);
    Ok(ModelGraph {
        graph,
        leaves,
        prediction,
        bn_updates,
    })
}

#[allow(clippy::too_many_arguments)]
fn branch_forward_on(
    graph: &mut Graph,
    leaves: &HashMap<String, NodeId>,
    config: &ModelConfig,
    branch: Branch,
    input: NodeId,
    mode: Mode,
    bn_updates: &mut Vec<BnUpdate>,
    params: &ParameterSet,
) -> Result<NodeId, ModelError> {
    let name = branch.name();
    let mut x = graph.conv2d_same(
        input,
        leaves[&format!("{name}.conv1.weight")],
        leaves[&format!("{name}.conv1.bias")],
    )?;
    if config.relu_after_conv1 {
        x = graph.relu(x);
    }
    for unit in 0..config.residual_units {
        let mut f = x;
        for conv in 0..config.convs_per_unit {
            if config.use_batch_norm {
                let gamma = leaves[&format!("{name}.unit{unit}.bn{conv}.gamma")];
                let beta = leaves[&format!("{name}.unit{unit}.bn{conv}.beta")];
                let mean_name = format!("{name}.unit{unit}.bn{conv}.running_mean");
                let var_name = format!("{name}.unit{unit}.bn{conv}.running_var");
                f = match mode {
                    Mode::Train => {
                        let (out, stats) =
                            graph.batch_norm_train(f, gamma, beta, config.bn_epsilon)?;
                        bn_updates.push(BnUpdate {
                            mean_name: mean_name.clone(),
                            var_name: var_name.clone(),
                            stats,
                        });
                        out
                    }
                    Mode::Infer => graph.batch_norm_infer(
                        f,
                        gamma,
                        beta,
                        params.require(&mean_name)?,
                        params.require(&var_name)?,
                        config.bn_epsilon,
                    )?,
                };
            }
            f = graph.relu(f);
            f = graph.conv2d_same(
                f,
                leaves[&format!("{name}.unit{unit}.conv{conv}.weight")],
                leaves[&format!("{name}.unit{unit}.conv{conv}.bias")],
            )?;
        }
        x = graph.add(x, f)?;
    }
    Ok(graph.conv2d_same(
        x,
        leaves[&format!("{name}.conv2.weight")],
        leaves[&format!("{name}.conv2.bias")],
    )?)
}

/// Single-branch inference on one stacked input `2l x I x J`.
pub fn branch_forward(
    config: &ModelConfig,
    params: &ParameterSet,
    branch: Branch,
    input: &Tensor,
) -> Result<Tensor, ModelError> {
    check_params(config, params)?;
    let expected_ch = 2 * branch.window_len(config);
    if input.shape() != [expected_ch, config.rows, config.cols] {
        return Err(ModelError::InstanceMismatch {
            reason: format!(
                "branch input shape {:?}, expected [{}, {}, {}]",
                input.shape(),
                expected_ch,
                config.rows,
                config.cols
            ),
        });
    }
    let mut graph = Graph::new();
    let mut leaves = HashMap::new();
    for (name, tensor) in params.iter() {
        leaves.insert(name.to_string(), graph.constant(tensor.clone()));
    }
    let x = graph.constant(input.clone());
    let out = branch_forward_on(
        &mut graph,
        &leaves,
        config,
        branch,
        x,
        Mode::Infer,
        &mut Vec::new(),
        params,
    )?;
    Ok(graph.value(out).clone())
}

/// External-branch inference on one feature vector.
pub fn external_forward(
    config: &ModelConfig,
    params: &ParameterSet,
    features: &Tensor,
) -> Result<Tensor, ModelError> {
    check_params(config, params)?;
    if features.shape() != [config.ext_dim] {
        return Err(ModelError::InstanceMismatch {
            reason: format!(
                "external vector shape {:?}, expected [{}]",
                features.shape(),
                config.ext_dim
            ),
        });
    }
    let mut graph = Graph::new();
    let e = graph.constant(features.clone());
    let w1 = graph.constant(params.require("external.fc1.weight")?.clone());
    let b1 = graph.constant(params.require("external.fc1.bias")?.clone());
    let w2 = graph.constant(params.require("external.fc2.weight")?.clone());
    let b2 = graph.constant(params.require("external.fc2.bias")?.clone());
    let h = graph.fully_connected(e, w1, b1)?;
    let h = graph.relu(h);
    let o = graph.fully_connected(h, w2, b2)?;
    let o = graph.reshape(o, &[2, config.rows, config.cols])?;
    Ok(graph.value(o).clone())
}

/// Elementwise fusion of branch outputs: `sum_b W_b . X_b`, with absent
/// branches contributing exact zeros.
pub fn fuse(parts: &[(&Tensor, &Tensor)]) -> Result<Tensor, ModelError> {
    let first = parts
        .first()
        .ok_or_else(|| ModelError::InstanceMismatch {
            reason: "fuse needs at least one branch".to_string(),
        })?;
    let mut acc = Tensor::zeros(first.0.shape());
    for (out, weight) in parts {
        let weighted = out.zip(weight, |x, w| x * w).map_err(ModelError::Tensor)?;
        acc = acc.zip(&weighted, |a, b| a + b).map_err(ModelError::Tensor)?;
    }
    Ok(acc)
}

/// Full single-instance inference: `tanh(fused branches + external)`.
pub fn forward(
    config: &ModelConfig,
    params: &ParameterSet,
    input: &ModelInput,
) -> Result<Tensor, ModelError> {
    input.check(config)?;
    let batch = BatchInput {
        closeness: input.branch_input(Branch::Closeness),
        period: input.branch_input(Branch::Period),
        trend: input.branch_input(Branch::Trend),
        external: input.external.clone(),
    };
    let model = build_forward(config, params, &batch, Mode::Infer)?;
    Ok(model.graph.value(model.prediction).clone())
}

/// Mean squared error of the single-instance prediction against a target in
/// the same normalized scale.
pub fn loss(
    config: &ModelConfig,
    params: &ParameterSet,
    input: &ModelInput,
    target: &Tensor,
) -> Result<f64, ModelError> {
    input.check(config)?;
    let batch = BatchInput {
        closeness: input.branch_input(Branch::Closeness),
        period: input.branch_input(Branch::Period),
        trend: input.branch_input(Branch::Trend),
        external: input.external.clone(),
    };
    let mut model = build_forward(config, params, &batch, Mode::Infer)?;
    let t = model.graph.constant(target.clone());
    let l = model.graph.mse_loss(model.prediction, t)?;
    Ok(model.graph.value(l).item()?)
}
