//! Full-model gradient check: the analytic gradient of the training loss for
//! every parameter matches central finite differences on a tiny network.

use std::time::Instant;

use cityflow_core::model::{
    build_forward, init_params, BatchInput, FusionKind, Mode, ModelConfig, ModelInput,
    ParameterSet,
};
use cityflow_core::rng::SplitMix64;
use cityflow_core::tensor::Tensor;
use cityflow_testkit::grad::{central_diff, max_rel_error};

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

fn rng_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

fn batch_loss(config: &ModelConfig, params: &ParameterSet, batch: &BatchInput, target: &Tensor) -> f64 {
    let mut model = build_forward(config, params, batch, Mode::Train).unwrap();
    let t = model.graph.constant(target.clone());
    let loss = model.graph.mse_loss(model.prediction, t).unwrap();
    model.graph.value(loss).item().unwrap()
}

#[test]
fn every_parameter_gradient_matches_central_differences() {
    let start = Instant::now();
    let config = tiny_config();
    let params = init_params(&config, 2024).unwrap();
    let mut rng = SplitMix64::new(99);
    let shape = [2, config.rows, config.cols];
    let input = ModelInput {
        closeness: (0..2).map(|_| rng_tensor(&mut rng, &shape, -0.9, 0.9)).collect(),
        period: vec![rng_tensor(&mut rng, &shape, -0.9, 0.9)],
        trend: vec![rng_tensor(&mut rng, &shape, -0.9, 0.9)],
        external: Some(rng_tensor(&mut rng, &[6], 0.0, 1.0)),
    };
    let target = rng_tensor(&mut rng, &shape, -0.9, 0.9);
    let batch = BatchInput::from_instances(&config, &[&input]).unwrap();
    let batched_target = Tensor::stack(&[&target]).unwrap();

    let mut model = build_forward(&config, &params, &batch, Mode::Train).unwrap();
    let t = model.graph.constant(batched_target.clone());
    let loss = model.graph.mse_loss(model.prediction, t).unwrap();
    let grads = model.graph.backward(loss).unwrap();

    let mut checked = 0usize;
    let mut worst = (0.0f64, String::new());
    for (name, tensor) in params.iter() {
        if !ParameterSet::is_trainable(name) {
            continue;
        }
        let analytic = grads.get(model.leaves[name], &model.graph);
        let fd = central_diff(tensor, 1e-5, |perturbed| {
            let mut probe = params.clone();
            probe.set(name, perturbed.clone()).unwrap();
            batch_loss(&config, &probe, &batch, &batched_target)
        });
        let err = max_rel_error(analytic.data(), fd.data());
        if err > worst.0 {
            worst = (err, name.to_string());
        }
        assert!(
            err < 1e-4,
            "parameter {name}: max relative error {err}"
        );
        checked += tensor.len();
    }
    println!(
        "checked {checked} parameter entries in {:.1?}, worst {:.3e} at {}",
        start.elapsed(),
        worst.0,
        worst.1
    );
    assert!(checked > 1000);
}
