//! Correction, graph normalisation, K-hop graph convolution and the
//! recurrent cells.

use super::params::{BoundParams, DIRECTIONS};
use super::{ModelConfig, ModelError, SCALE_NAMES};
use crate::autodiff::{Tape, Tensor, Var};

type Result<T> = std::result::Result<T, ModelError>;

/// The four per-scale graphs of one step, each `(B, N, N)` or `(N, N)`.
pub type ScaleVars = [Var; 4];

/// `D⁻¹(C + I)` with `D = 1 + row sums of C`, on plain tensors.
pub fn normalize_causal_tensor(c: &Tensor) -> Tensor {
    let shape = c.shape().to_vec();
    let n = shape[shape.len() - 1];
    let mut out = c.clone();
    for block in out.data_mut().chunks_mut(n * n) {
        for (i, row) in block.chunks_mut(n).enumerate() {
            row[i] += 1.0;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

/// Row-normalised geographic graph; all-zero rows stay zero.
pub fn normalize_geo(a: &Tensor) -> Tensor {
    let n = a.shape()[a.rank() - 1];
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

/// Differentiable `D⁻¹(CA + I)` for a `(B, N, N)` or `(N, N)` variable.
pub fn normalize_causal(tape: &Tape, ca: Var) -> Result<Var> {
    let n = *tape.shape(ca).last().expect("graph has rank >= 2");
    let with_loops = tape.add(ca, tape.constant(Tensor::eye(n)))?;
    let degree = tape.sum_last(with_loops)?;
    Ok(tape.div(with_loops, degree)?)
}

/// `relu(tanh(ρ1ρ2ᵀ − ρ2ρ1ᵀ))`.
pub fn correction_from_rho(tape: &Tape, rho1: Var, rho2: Var) -> Result<Var> {
    let a = tape.matmul(rho1, tape.transpose(rho2)?)?;
    let b = tape.matmul(rho2, tape.transpose(rho1)?)?;
    Ok(tape.relu(tape.tanh(tape.sub(a, b)?)))
}

/// Correction mask for one scale.
///
/// `z` is `X‖H` of shape `(B, N, F)`; `c_hat` the normalised raw graph.
pub fn correction_mask(tape: &Tape, p: &BoundParams, cfg: &ModelConfig, z: Var, c_hat: Var, scale: usize) -> Result<Var> {
    let theta = p.var(&format!("corr.theta.{}", SCALE_NAMES[scale]));
    let mut h = z;
    for _ in 0..cfg.correction_hops {
        h = tape.matmul(tape.matmul(c_hat, h)?, theta)?;
    }
    let hc = tape.add(tape.scale(z, cfg.alpha), tape.scale(h, cfg.beta))?;
    let fc = tape.affine(hc, p.var("corr.fc.w"), p.var("corr.fc.b"))?;
    let rho1 = tape.tanh(tape.mul(fc, p.var("corr.e1"))?);
    let rho2 = tape.tanh(tape.mul(fc, p.var("corr.e2"))?);
    correction_from_rho(tape, rho1, rho2)
}

/// One direction of the K-hop fusion convolution.
///
/// `graphs` are the four normalised causal graphs and `geo` the normalised
/// geographic graph, already oriented for this direction.
pub fn khop_gcn(
    tape: &Tape,
    p: &BoundParams,
    prefix: &str,
    h_in: Var,
    graphs: &ScaleVars,
    geo: Var,
    hops: usize,
) -> Result<Var> {
    let omega = |o: &str| p.var(&format!("{prefix}.omega.{o}"));
    let (fit1, fit2) = (p.var("cell.fit1"), p.var("cell.fit2"));
    let skip = tape.mul(h_in, omega("in"))?;
    let mut h = h_in;
    let mut out: Option<Var> = None;
    for k in 1..=hops {
        let mut fc = skip;
        for (s, &g) in graphs.iter().enumerate() {
            let theta = p.var(&format!("{prefix}.theta.{}", SCALE_NAMES[s]));
            let term = tape.matmul(tape.matmul(g, h)?, theta)?;
            fc = tape.add(fc, tape.mul(term, omega(SCALE_NAMES[s]))?)?;
        }
        let fa = tape.matmul(tape.matmul(geo, h)?, p.var(&format!("{prefix}.theta.geo")))?;
        let fa = tape.mul(fa, omega("geo"))?;
        h = tape.add(tape.mul(fit1, fc)?, tape.mul(fit2, fa)?)?;
        let y = tape.matmul(h, p.var(&format!("{prefix}.w{k}")))?;
        out = Some(match out {
            None => y,
            Some(acc) => tape.add(acc, y)?,
        });
    }
    Ok(out.expect("hops >= 1"))
}

/// Graphs for both directions of the two-way convolution.
#[derive(Clone, Copy, Debug)]
pub struct TwoWayGraphs {
    pub forward: ScaleVars,
    pub forward_geo: Var,
    pub backward: ScaleVars,
    pub backward_geo: Var,
}

impl TwoWayGraphs {
    /// Normalises corrected graphs and pairs them with their transposes.
    pub fn build(tape: &Tape, corrected: &ScaleVars, geo: Var, geo_t: Var) -> Result<Self> {
        let mut forward = *corrected;
        let mut backward = *corrected;
        for s in 0..4 {
            forward[s] = normalize_causal(tape, corrected[s])?;
            backward[s] = tape.transpose(forward[s])?;
        }
        Ok(Self {
            forward,
            forward_geo: geo,
            backward,
            backward_geo: geo_t,
        })
    }
}

/// Sum of both directions plus the gate bias, width `W`.
pub fn two_way_gcn(tape: &Tape, p: &BoundParams, gate: &str, h_in: Var, g: &TwoWayGraphs, hops: usize) -> Result<Var> {
    let [fwd, bwd] = DIRECTIONS;
    let a = khop_gcn(tape, p, &format!("cell.{gate}.{fwd}"), h_in, &g.forward, g.forward_geo, hops)?;
    let b = khop_gcn(tape, p, &format!("cell.{gate}.{bwd}"), h_in, &g.backward, g.backward_geo, hops)?;
    Ok(tape.add(tape.add(a, b)?, p.var(&format!("cell.{gate}.bias")))?)
}

/// `H = o ⊙ tanh(z ⊙ H_prev + re ⊙ lm)` with all four gates read from `X‖H_prev`.
pub fn lgru_cell(tape: &Tape, p: &BoundParams, cfg: &ModelConfig, x: Var, h_prev: Var, g: &TwoWayGraphs) -> Result<Var> {
    let z_in = tape.concat(x, h_prev)?;
    let re = tape.sigmoid(two_way_gcn(tape, p, "re", z_in, g, cfg.hops)?);
    let z = tape.sigmoid(two_way_gcn(tape, p, "z", z_in, g, cfg.hops)?);
    let o = tape.sigmoid(two_way_gcn(tape, p, "o", z_in, g, cfg.hops)?);
    let lm = tape.tanh(two_way_gcn(tape, p, "lm", z_in, g, cfg.hops)?);
    let inner = tape.add(tape.mul(z, h_prev)?, tape.mul(re, lm)?)?;
    Ok(tape.mul(o, tape.tanh(inner))?)
}

/// Graph-convolutional GRU: `H = u ⊙ H_prev + (1 − u) ⊙ c`, candidate from `X‖(r ⊙ H_prev)`.
pub fn gru_cell(tape: &Tape, p: &BoundParams, cfg: &ModelConfig, x: Var, h_prev: Var, g: &TwoWayGraphs) -> Result<Var> {
    let z_in = tape.concat(x, h_prev)?;
    let r = tape.sigmoid(two_way_gcn(tape, p, "r", z_in, g, cfg.hops)?);
    let u = tape.sigmoid(two_way_gcn(tape, p, "u", z_in, g, cfg.hops)?);
    let reset = tape.concat(x, tape.mul(r, h_prev)?)?;
    let c = tape.tanh(two_way_gcn(tape, p, "c", reset, g, cfg.hops)?);
    let keep = tape.mul(u, h_prev)?;
    let one_minus_u = tape.sub(tape.constant(Tensor::ones(&[1])), u)?;
    Ok(tape.add(keep, tape.mul(one_minus_u, c)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_examples() {
        let c = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(normalize_causal_tensor(&c).data(), &[0.5, 0.5, 0.0, 1.0]);
        assert_eq!(normalize_causal_tensor(&Tensor::zeros(&[3, 3])), Tensor::eye(3));
        let a = Tensor::from_rows(&[vec![0.0, 2.0, 2.0], vec![0.0, 0.0, 0.0], vec![1.0, 3.0, 0.0]]).unwrap();
        assert_eq!(normalize_geo(&a).data(), &[0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.25, 0.75, 0.0]);
    }

    #[test]
    fn tape_normalisation_matches_tensor_version() {
        let c = Tensor::new(vec![2, 2, 2], vec![0.0, 1.0, 0.0, 0.0, 0.3, 0.0, 2.0, 1.0]).unwrap();
        let tape = Tape::new();
        let v = normalize_causal(&tape, tape.constant(c.clone())).unwrap();
        assert_eq!(*tape.value(v), normalize_causal_tensor(&c));
    }

    #[test]
    fn hand_computed_mask() {
        let tape = Tape::new();
        let r1 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let r2 = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let cm = correction_from_rho(&tape, r1, r2).unwrap();
        assert_eq!(tape.value(cm).data(), &[0.0, 1f64.tanh(), 0.0, 0.0]);
        assert!((1f64.tanh() - 0.76159).abs() < 1e-5);
    }
}
