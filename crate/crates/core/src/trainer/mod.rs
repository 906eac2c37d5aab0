//! Training with Adam and early stopping, evaluation in minutes, ablation
//! runs and the two post-hoc analyses (correction distances and adaptive
//! fusion weights).

mod adam;
mod metrics;

pub use adam::Adam;
pub use metrics::{
    analyze_correction, evaluate, frobenius_distance, persistence_baseline, rank_correlation, report_adaptive_weights,
    write_history_csv, write_metrics_csv, AirportWeight, EpochRecord, ForecastResult, MetricRow,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::granger::{CausalGraphSet, GraphSchedule};
use crate::ingest::{split_windows, DelayMatrix, IngestError, Sample, SampleSets, SplitFractions, ZScoreParams};
use crate::model::{forward, ModelConfig, ModelError, ModelInput, ModelParams, Variant};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("loss became {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("every entry is masked")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no samples for {0}")]
    NoSamples(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay_factor: 0.6,
            decay_every: 5,
            max_epochs: 150,
            batch_size: 64,
            patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so the loop can run frozen.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(TrainError::Config("decay_factor must be positive".into()));
        }
        let counts = [
            ("decay_every", self.decay_every),
            ("max_epochs", self.max_epochs),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::Config(format!("{name} must be at least 1")));
        }
        Ok(())
    }

    /// `lr0 · decay^⌊epoch / decay_every⌋`, epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.decay_every) as i32;
        self.learning_rate * self.decay_factor.powi(k)
    }
}

/// Standardized data, windows, graphs and the geographic graph of one run.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub airports: Vec<String>,
    pub zscore: ZScoreParams,
    pub samples: SampleSets,
    pub schedule: GraphSchedule,
    /// Raw `N × N` geographic weights.
    pub geo: Tensor,
}

impl Dataset {
    /// Standardizes `delays` with statistics of the training segment and
    /// cuts all three segments into windows.
    pub fn prepare(
        delays: &DelayMatrix,
        schedule: GraphSchedule,
        geo: Tensor,
        fractions: SplitFractions,
        r: usize,
        horizon: usize,
    ) -> Result<Self, TrainError> {
        let n = delays.n_airports();
        if geo.shape() != [n, n] {
            return Err(TrainError::ShapeMismatch(format!("geographic graph {:?} for {n} airports", geo.shape())));
        }
        let ranges = crate::ingest::split_ranges(delays.hours(), fractions, r, horizon)?;
        let zscore = ZScoreParams::fit(&delays.slice_hours(ranges.train.clone()))?;
        let standardized = zscore.apply_matrix(delays);
        let samples = split_windows(&standardized, fractions, r, horizon)?;
        Ok(Self {
            airports: delays.airports().to_vec(),
            zscore,
            samples,
            schedule,
            geo,
        })
    }

    pub fn n_airports(&self) -> usize {
        self.airports.len()
    }
}

/// Model inputs plus per-horizon targets and masks, each `(B, N, 1)`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: ModelInput,
    pub targets: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub observed: usize,
}

fn graph_tensors(sets: &[Option<&CausalGraphSet>], n: usize) -> [Tensor; 4] {
    let b = sets.len();
    // a batch whose samples share one set passes a single (N, N) graph
    let shared = sets.windows(2).all(|w| match (w[0], w[1]) {
        (Some(x), Some(y)) => x.anchor == y.anchor,
        (None, None) => true,
        _ => false,
    });
    std::array::from_fn(|s| {
        if shared {
            return match sets[0] {
                Some(set) => Tensor::new(vec![n, n], set.graphs[s].adjacency.clone()).expect("n × n"),
                None => Tensor::zeros(&[n, n]),
            };
        }
        let mut data = Vec::with_capacity(b * n * n);
        for set in sets {
            match set {
                Some(set) => data.extend_from_slice(&set.graphs[s].adjacency),
                None => data.extend(std::iter::repeat_n(0.0, n * n)),
            }
        }
        Tensor::new(vec![b, n, n], data).expect("b × n × n")
    })
}

/// Assembles a batch; encoder step `k` of a sample ending at `t` sees the
/// latest graph set at hour `t − r + k`, the decoder the set at `t`.
pub fn make_batch(samples: &[&Sample], schedule: &GraphSchedule, n: usize) -> Batch {
    let b = samples.len();
    let steps = samples[0].inputs.len();
    let r = steps - 1;
    let horizon = samples[0].targets.len();
    let stack = |rows: &dyn Fn(&Sample) -> &[f64]| {
        let data: Vec<f64> = samples.iter().flat_map(|s| rows(s).iter().copied()).collect();
        Tensor::new(vec![b, n, 1], data).expect("b × n × 1")
    };
    let inputs = (0..steps).map(|k| stack(&|s: &Sample| &s.inputs[k])).collect();
    let targets = (0..horizon).map(|h| stack(&|s: &Sample| &s.targets[h])).collect();
    let mut observed = 0;
    let masks = (0..horizon)
        .map(|h| {
            let data: Vec<f64> = samples
                .iter()
                .flat_map(|s| s.target_mask[h].iter().map(|&ok| if ok { 1.0 } else { 0.0 }))
                .collect();
            observed += data.iter().filter(|&&v| v > 0.0).count();
            Tensor::new(vec![b, n, 1], data).expect("b × n × 1")
        })
        .collect();
    let encoder_graphs = (0..steps)
        .map(|k| {
            let sets: Vec<_> = samples.iter().map(|s| schedule.latest_ref(s.t - r + k)).collect();
            graph_tensors(&sets, n)
        })
        .collect();
    let decoder_sets: Vec<_> = samples.iter().map(|s| schedule.latest_ref(s.t)).collect();
    Batch {
        input: ModelInput {
            inputs,
            encoder_graphs,
            decoder_graphs: graph_tensors(&decoder_sets, n),
        },
        targets,
        masks,
        observed,
    }
}

fn check_dims(cfg: &ModelConfig, data: &Dataset) -> Result<(), TrainError> {
    let Some(first) = data.samples.train.first() else {
        return Err(TrainError::NoSamples("training"));
    };
    if cfg.n_airports != data.n_airports() || cfg.encoder_steps + 1 != first.inputs.len() || cfg.horizon != first.targets.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "model expects N={}, r={}, m={}; data has N={}, r={}, m={}",
            cfg.n_airports,
            cfg.encoder_steps,
            cfg.horizon,
            data.n_airports(),
            first.inputs.len() - 1,
            first.targets.len()
        )));
    }
    Ok(())
}

/// Loss and parameter gradients of one batch: masked MAE over all horizons
/// in standardized units.
pub fn batch_gradients(params: &ModelParams, geo: &Tensor, batch: &Batch) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward(&tape, &bound, params.config(), geo, &batch.input)?;
    let mut total = None;
    for ((&pred, y), mask) in out.predictions.iter().zip(&batch.targets).zip(&batch.masks) {
        let err = tape.abs(tape.sub(pred, tape.constant(y.clone()))?);
        let term = tape.sum(tape.mul(err, tape.constant(mask.clone()))?);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let loss = tape.scale(total.expect("horizon >= 1"), 1.0 / batch.observed.max(1) as f64);
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let mut named = BTreeMap::new();
    for (name, &var) in bound.iter() {
        if let Some(g) = grads.take(var) {
            named.insert(name.clone(), g);
        }
    }
    Ok((value, named))
}

/// Standardized predictions `[horizon][sample][airport]`.
pub fn predict(params: &ModelParams, data: &Dataset, samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
    let cfg = params.config();
    let n = cfg.n_airports;
    let mut out = vec![Vec::with_capacity(samples.len()); cfg.horizon];
    let refs: Vec<&Sample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, &data.schedule, n);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let fwd = forward(&tape, &bound, cfg, &data.geo, &batch.input)?;
        for (h, &p) in fwd.predictions.iter().enumerate() {
            let v = tape.value(p);
            out[h].extend(v.data().chunks(n).map(<[f64]>::to_vec));
        }
    }
    Ok(out)
}

/// Forecast of `samples` in minutes with per-horizon errors.
pub fn forecast(params: &ModelParams, data: &Dataset, samples: &[Sample], batch_size: usize) -> Result<ForecastResult, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::NoSamples("evaluation"));
    }
    ForecastResult::score(predict(params, data, samples, batch_size)?, samples, &data.zscore)
}

fn mean_mae(result: &ForecastResult) -> f64 {
    result.mae.iter().sum::<f64>() / result.mae.len() as f64
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MAE.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Trains from a fresh initialisation seeded by `train_cfg.seed`.
pub fn train(model_cfg: &ModelConfig, data: &Dataset, train_cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let params = ModelParams::init(model_cfg, train_cfg.seed)?;
    train_from(params, data, train_cfg)
}

/// Trains starting from `params`.
///
/// Batch order is a fresh permutation per epoch from a generator seeded by
/// `train_cfg.seed`. The validation MAE (minutes, averaged over horizons)
/// only selects the returned parameters and drives early stopping.
pub fn train_from(mut params: ModelParams, data: &Dataset, train_cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    let cfg = params.config().clone();
    cfg.validate()?;
    check_dims(&cfg, data)?;
    if data.samples.val.is_empty() {
        return Err(TrainError::NoSamples("validation"));
    }
    let n = cfg.n_airports;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..data.samples.train.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0, params.clone());
    let mut stale = 0;
    for epoch in 0..train_cfg.max_epochs {
        let lr = train_cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.samples.train[i]).collect();
            let batch = make_batch(&samples, &data.schedule, n);
            if batch.observed == 0 {
                continue;
            }
            let (loss, mut grads) = batch_gradients(&params, &data.geo, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi, loss });
            }
            grads.retain(|name, _| params.is_trainable(name));
            adam.step(&mut params, &grads, lr)?;
            loss_sum += loss * batch.observed as f64;
            weight += batch.observed;
        }
        let val = forecast(&params, data, &data.samples.val, train_cfg.batch_size)?;
        let val_mae = mean_mae(&val);
        history.push(EpochRecord {
            epoch,
            train_loss: if weight > 0 { loss_sum / weight as f64 } else { f64::NAN },
            val_mae,
            lr,
        });
        if val_mae < best.0 {
            best = (val_mae, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= train_cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        history,
        best_epoch: best.1,
    })
}

/// Trains `variant` with everything else fixed and scores it on the test
/// segment.
pub fn ablate(
    variant: Variant,
    model_cfg: &ModelConfig,
    data: &Dataset,
    train_cfg: &TrainConfig,
) -> Result<(TrainOutcome, ForecastResult), TrainError> {
    let cfg = ModelConfig {
        variant,
        ..model_cfg.clone()
    };
    let outcome = train(&cfg, data, train_cfg)?;
    let result = forecast(&outcome.params, data, &data.samples.test, train_cfg.batch_size)?;
    Ok((outcome, result))
}

/// One graph per scale, year to day.
pub type GraphQuad = [Tensor; 4];

/// Raw and corrected graphs at the last encoder step, one pair per distinct
/// graph anchor among `samples` (first sample per anchor).
pub fn correction_pairs(params: &ModelParams, data: &Dataset, samples: &[Sample]) -> Result<(Vec<GraphQuad>, Vec<GraphQuad>), TrainError> {
    let n = params.config().n_airports;
    let mut seen = std::collections::BTreeSet::new();
    let (mut raw, mut corrected) = (Vec::new(), Vec::new());
    for s in samples {
        let Some(set) = data.schedule.latest_ref(s.t) else { continue };
        if !seen.insert(set.anchor) {
            continue;
        }
        let batch = make_batch(&[s], &data.schedule, n);
        let tape = Tape::new();
        let out = forward(&tape, &params.bind(&tape), params.config(), &data.geo, &batch.input)?;
        let last = params.config().encoder_steps;
        let take = |vars: &[crate::autodiff::Var; 4]| -> [Tensor; 4] {
            std::array::from_fn(|k| {
                let v = tape.value(vars[k]);
                Tensor::new(vec![n, n], v.data()[..n * n].to_vec()).expect("n × n")
            })
        };
        raw.push(take(&out.raw[last]));
        corrected.push(take(&out.corrected[last]));
    }
    Ok((raw, corrected))
}
