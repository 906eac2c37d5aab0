//! The forecasting network: learned correction of the causality graphs,
//! two-way K-hop fusion convolution over causal and geographic graphs, and a
//! gated recurrent encoder-decoder.
//!
//! All tensors carry a leading batch axis: features are `(B, N, D)`, hidden
//! states `(B, N, W)` and graphs `(B, N, N)` (or `(N, N)` when shared by the
//! whole batch).

pub mod check;
pub mod layers;
pub mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
pub use check::{model_grad_check, random_problem};
pub use layers::{
    correction_from_rho, correction_mask, gru_cell, khop_gcn, lgru_cell, normalize_causal, normalize_causal_tensor,
    normalize_geo, two_way_gcn, ScaleVars, TwoWayGraphs,
};
pub use params::{param_specs, BoundParams, Init, ModelParams, ParamSpec};

/// Scale order shared with the graph sets.
pub const SCALE_NAMES: [&str; 4] = ["year", "month", "week", "day"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected graph sets for {expected} encoder steps, got {got}")]
    MissingGraphs { expected: usize, got: usize },
    #[error("bad model input: {0}")]
    Input(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name} has shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Correction, causal graphs and the recurrent cell described above.
    #[default]
    Full,
    /// No causal graphs and no correction; geographic graph only.
    Nc,
    /// Raw causal graphs without correction.
    Nmc,
    /// Plain graph-convolutional GRU cell.
    Gru,
    /// Fusion weights frozen at ones.
    Nf,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::Nc, Variant::Nmc, Variant::Gru, Variant::Nf];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Nc => "nc",
            Variant::Nmc => "nmc",
            Variant::Gru => "gru",
            Variant::Nf => "nf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    fn corrects(self) -> bool {
        !matches!(self, Variant::Nc | Variant::Nmc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_airports: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub hops: usize,
    /// Past steps `r`; the encoder reads `r + 1` inputs.
    pub encoder_steps: usize,
    /// Forecast steps `m`.
    pub horizon: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Graph convolutions applied inside the correction module.
    pub correction_hops: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_airports: 10,
            input_dim: 1,
            hidden_dim: 64,
            embed_dim: 40,
            hops: 2,
            encoder_steps: 11,
            horizon: 3,
            alpha: 0.5,
            beta: 0.5,
            correction_hops: 1,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("n_airports", self.n_airports),
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("hops", self.hops),
            ("horizon", self.horizon),
            ("correction_hops", self.correction_hops),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(ModelError::Config("alpha and beta must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.input_dim + self.hidden_dim
    }
}

/// One forward pass worth of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `r + 1` feature tensors `(B, N, D)`, oldest first.
    pub inputs: Vec<Tensor>,
    /// Raw 0/1 causal graphs per encoder step, in scale order.
    pub encoder_graphs: Vec<[Tensor; 4]>,
    /// Graphs used for every decoder step.
    pub decoder_graphs: [Tensor; 4],
}

/// Everything the forward pass records that callers may inspect.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One `(B, N, 1)` prediction per horizon step.
    pub predictions: Vec<Var>,
    /// Hidden state after every cell, encoder then decoder.
    pub hidden: Vec<Var>,
    /// Graphs fed to the convolution before normalisation, per cell.
    pub corrected: Vec<ScaleVars>,
    /// Raw graphs per cell, matching `corrected`.
    pub raw: Vec<ScaleVars>,
}

fn check_input(cfg: &ModelConfig, input: &ModelInput) -> Result<usize, ModelError> {
    let steps = cfg.encoder_steps + 1;
    if input.encoder_graphs.len() != steps {
        return Err(ModelError::MissingGraphs {
            expected: steps,
            got: input.encoder_graphs.len(),
        });
    }
    if input.inputs.len() != steps {
        return Err(ModelError::Input(format!("expected {steps} input steps, got {}", input.inputs.len())));
    }
    let n = cfg.n_airports;
    let b = match input.inputs[0].shape() {
        [b, nn, d] if *nn == n && *d == cfg.input_dim => *b,
        s => return Err(ModelError::Input(format!("input shape {s:?}, expected (B, {n}, {})", cfg.input_dim))),
    };
    if let Some(bad) = input.inputs.iter().find(|x| x.shape() != [b, n, cfg.input_dim]) {
        return Err(ModelError::Input(format!("inconsistent input shape {:?}", bad.shape())));
    }
    for g in input.encoder_graphs.iter().flatten().chain(&input.decoder_graphs) {
        let ok = g.shape() == [n, n] || g.shape() == [b, n, n];
        if !ok {
            return Err(ModelError::Input(format!("graph shape {:?}, expected ({n}, {n}) or ({b}, {n}, {n})", g.shape())));
        }
    }
    Ok(b)
}

/// Runs encoder and decoder on `tape`.
///
/// `geo` is the raw `N × N` geographic graph; it is row-normalised here.
pub fn forward(
    tape: &Tape,
    params: &BoundParams,
    cfg: &ModelConfig,
    geo: &Tensor,
    input: &ModelInput,
) -> Result<ForwardOutput, ModelError> {
    let b = check_input(cfg, input)?;
    let n = cfg.n_airports;
    if geo.shape() != [n, n] {
        return Err(ModelError::Input(format!("geographic graph shape {:?}, expected ({n}, {n})", geo.shape())));
    }
    let geo_norm = normalize_geo(geo);
    let geo_var = tape.constant(geo_norm.clone());
    let geo_t = tape.transpose(geo_var)?;

    let mut h = tape.constant(Tensor::zeros(&[b, n, cfg.hidden_dim]));
    let decoder_x = Tensor::zeros(&[b, n, cfg.input_dim]);
    let mut out = ForwardOutput {
        predictions: Vec::with_capacity(cfg.horizon),
        hidden: Vec::new(),
        corrected: Vec::new(),
        raw: Vec::new(),
    };
    let steps = input
        .inputs
        .iter()
        .zip(&input.encoder_graphs)
        .map(|(x, g)| (x, g, false))
        .chain((0..cfg.horizon).map(|_| (&decoder_x, &input.decoder_graphs, true)));
    for (x, graphs, decoding) in steps {
        let x = tape.constant(x.clone());
        let raw: ScaleVars = match cfg.variant {
            Variant::Nc => {
                let zero = tape.constant(Tensor::zeros(&[n, n]));
                [zero; 4]
            }
            _ => std::array::from_fn(|s| tape.constant(graphs[s].clone())),
        };
        let corrected = if cfg.variant.corrects() {
            let z = tape.concat(x, h)?;
            let mut ca = raw;
            for s in 0..4 {
                let c_hat = tape.constant(normalize_causal_tensor(&graphs[s]));
                let cm = correction_mask(tape, params, cfg, z, c_hat, s)?;
                ca[s] = tape.add(raw[s], cm)?;
            }
            ca
        } else {
            raw
        };
        let two_way = TwoWayGraphs::build(tape, &corrected, geo_var, geo_t)?;
        h = match cfg.variant {
            Variant::Gru => gru_cell(tape, params, cfg, x, h, &two_way)?,
            _ => lgru_cell(tape, params, cfg, x, h, &two_way)?,
        };
        out.hidden.push(h);
        out.corrected.push(corrected);
        out.raw.push(raw);
        if decoding {
            out.predictions.push(tape.affine(h, params.var("out.w"), params.var("out.b"))?);
        }
    }
    Ok(out)
}
