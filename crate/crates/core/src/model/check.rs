//! Finite-difference check of the whole encoder-decoder on random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward, ModelConfig, ModelError, ModelInput, ModelParams};
use crate::autodiff::{grad_check, GradCheckReport, Tensor};

/// Random single-sample inputs, 0/1 graphs and a symmetric geographic graph.
pub fn random_problem(cfg: &ModelConfig, seed: u64) -> (ModelInput, Tensor, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_airports;
    let steps = cfg.encoder_steps + 1;
    let graph = |rng: &mut ChaCha8Rng| {
        let d = (0..n * n)
            .map(|k| if k % (n + 1) != 0 && rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![n, n], d).expect("n × n")
    };
    let inputs = (0..steps)
        .map(|_| {
            let d = (0..n * cfg.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            Tensor::new(vec![1, n, cfg.input_dim], d).expect("1 × n × d")
        })
        .collect();
    let encoder_graphs: Vec<[Tensor; 4]> = (0..steps).map(|_| std::array::from_fn(|_| graph(&mut rng))).collect();
    let decoder_graphs = encoder_graphs[steps - 1].clone();
    let mut geo = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let w = rng.random::<f64>();
            geo[i * n + j] = w;
            geo[j * n + i] = w;
        }
    }
    let targets = (0..cfg.horizon)
        .map(|_| Tensor::new(vec![1, n, 1], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("1 × n × 1"))
        .collect();
    let input = ModelInput {
        inputs,
        encoder_graphs,
        decoder_graphs,
    };
    (input, Tensor::new(vec![n, n], geo).expect("n × n"), targets)
}

/// Compares backpropagated gradients of a squared-error loss with central
/// differences for every scalar parameter.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<GradCheckReport, ModelError> {
    cfg.validate()?;
    let params = ModelParams::init(cfg, seed)?;
    let (input, geo, targets) = random_problem(cfg, seed.wrapping_add(1));
    // surfaces input errors before the closure, which can only report tensor errors
    let tape = crate::autodiff::Tape::new();
    forward(&tape, &params.bind(&tape), cfg, &geo, &input)?;
    let report = grad_check(
        |tape, vars| {
            let p = params.bind_vars(vars);
            let out = forward(tape, &p, cfg, &geo, &input).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => unreachable!("inputs validated above: {other}"),
            })?;
            let mut loss = None;
            for (&y, t) in out.predictions.iter().zip(&targets) {
                let d = tape.sub(y, tape.constant(t.clone()))?;
                let term = tape.sum(tape.mul(d, d)?);
                loss = Some(match loss {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            Ok(loss.expect("horizon >= 1"))
        },
        &params.tensors(),
        eps,
    )?;
    Ok(report)
}
