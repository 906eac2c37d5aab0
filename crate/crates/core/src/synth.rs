//! Synthetic airport networks with planted delay propagation.
//!
//! Each airport's hourly delay is a base level plus daily and weekly cycles,
//! lagged contributions from upstream airports, Gaussian noise and rare
//! positive spikes, floored at zero.

use std::f64::consts::PI;

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DelayMatrix;

/// Target spectral radius for randomly drawn propagation weights.
pub const STABLE_RADIUS: f64 = 0.95;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("propagation system is unstable: spectral radius {0:.4} >= 1")]
    Unstable(f64),
}

/// A directed propagation edge `from → to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
    pub lag: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_airports: usize,
    pub hours: usize,
    /// Probability of each ordered pair carrying an edge.
    pub edge_density: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub lag_min: usize,
    pub lag_max: usize,
    /// Mean delay level; each airport draws its base from `[0.5, 1.5]` times this.
    pub base_level: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub noise_std: f64,
    /// Per-airport noise std; overrides `noise_std` when non-empty.
    pub noise_std_per_airport: Vec<f64>,
    /// Per-hour, per-airport spike probability.
    pub spike_rate: f64,
    /// Mean of the exponential spike size.
    pub spike_magnitude: f64,
    /// Explicit edges; replace the random draw when non-empty. These are
    /// never rescaled, so an unstable set is an error.
    pub edges: Vec<PlantedEdge>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_airports: 8,
            hours: 2000,
            edge_density: 0.15,
            weight_min: 0.5,
            weight_max: 0.9,
            lag_min: 1,
            lag_max: 2,
            base_level: 15.0,
            daily_amplitude: 5.0,
            weekly_amplitude: 2.0,
            noise_std: 1.0,
            noise_std_per_airport: Vec::new(),
            spike_rate: 0.0,
            spike_magnitude: 0.0,
            edges: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_airports < 2 {
            return bad("n_airports must be at least 2");
        }
        if self.hours < 500 {
            return bad("hours must be at least 500");
        }
        if !(0.0..=1.0).contains(&self.edge_density) {
            return bad("edge_density must lie in [0, 1]");
        }
        if self.lag_min < 1 || self.lag_max < self.lag_min {
            return bad("lags must satisfy 1 <= lag_min <= lag_max");
        }
        if !(self.weight_min <= self.weight_max) {
            return bad("weight_min must not exceed weight_max");
        }
        let nonneg = [
            self.base_level,
            self.daily_amplitude,
            self.weekly_amplitude,
            self.noise_std,
            self.spike_rate,
            self.spike_magnitude,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("levels, amplitudes, stds and spike parameters must be finite and >= 0");
        }
        if self.spike_rate > 1.0 {
            return bad("spike_rate must not exceed 1");
        }
        if !self.noise_std_per_airport.is_empty() {
            if self.noise_std_per_airport.len() != self.n_airports {
                return bad("noise_std_per_airport must list one std per airport");
            }
            if self.noise_std_per_airport.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return bad("per-airport noise stds must be finite and >= 0");
            }
        }
        for e in &self.edges {
            if e.from >= self.n_airports || e.to >= self.n_airports || e.from == e.to {
                return bad("explicit edges must join two distinct airports in range");
            }
            if e.lag < 1 || !e.weight.is_finite() {
                return bad("explicit edges need lag >= 1 and a finite weight");
            }
        }
        Ok(())
    }

    fn noise_std_of(&self, i: usize) -> f64 {
        self.noise_std_per_airport.get(i).copied().unwrap_or(self.noise_std)
    }
}

/// Known structure behind a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub airports: Vec<String>,
    pub edges: Vec<PlantedEdge>,
    /// Sum of inbound weights per airport.
    pub susceptibility: Vec<f64>,
    /// `(latitude, longitude)` in degrees.
    pub coords: Vec<(f64, f64)>,
}

impl GroundTruth {
    /// `N × N` weights, row = target, column = source; zero diagonal.
    pub fn weight_matrix(&self) -> Vec<f64> {
        let n = self.airports.len();
        let mut w = vec![0.0; n * n];
        for e in &self.edges {
            w[e.to * n + e.from] += e.weight;
        }
        w
    }

    /// 0/1 adjacency in the same orientation as the causality graphs.
    pub fn adjacency(&self) -> Vec<f64> {
        self.weight_matrix().iter().map(|&w| if w != 0.0 { 1.0 } else { 0.0 }).collect()
    }
}

/// Precision, recall and F1 of a recovered 0/1 graph against the truth,
/// ignoring the diagonal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recovery {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn score_recovery(truth: &[f64], found: &[f64], n: usize) -> Recovery {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for a in 0..n {
        for b in (0..n).filter(|&b| b != a) {
            match (truth[a * n + b] != 0.0, found[a * n + b] != 0.0) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = ratio(2 * tp, 2 * tp + fp + fneg);
    Recovery {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
        precision,
        recall,
        f1,
    }
}

pub fn airport_names(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(2);
    (0..n).map(|i| format!("AP{i:0width$}")).collect()
}

/// First hour of every generated dataset.
pub fn synth_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 6, 0, 0, 0).single().expect("valid date")
}

/// Spectral radius of the lag-companion matrix of the propagation system.
pub fn companion_radius(n: usize, edges: &[PlantedEdge]) -> f64 {
    let p = edges.iter().map(|e| e.lag).max().unwrap_or(0);
    if p == 0 {
        return 0.0;
    }
    let dim = n * p;
    let mut m = vec![0.0; dim * dim];
    for e in edges {
        m[e.to * dim + (e.lag - 1) * n + e.from] += e.weight;
    }
    for k in 1..p {
        for i in 0..n {
            m[(k * n + i) * dim + (k - 1) * n + i] = 1.0;
        }
    }
    spectral_radius(&m, dim)
}

/// Gelfand's formula `ρ = lim ‖Aᵏ‖^{1/k}` with `k = 2^j`, renormalising
/// after each squaring to avoid overflow.
fn spectral_radius(a: &[f64], dim: usize) -> f64 {
    const SQUARINGS: u32 = 40;
    let norm = |m: &[f64]| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut m = a.to_vec();
    let mut log_scale = 0.0;
    let mut buf = vec![0.0; dim * dim];
    for j in 0..SQUARINGS {
        let s = norm(&m);
        if s == 0.0 {
            return 0.0;
        }
        m.iter_mut().for_each(|v| *v /= s);
        // m currently holds A^(2^j) / exp(log_scale)
        log_scale += s.ln() / f64::from(2u32).powi(j as i32);
        buf.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..dim {
            for k in 0..dim {
                let x = m[i * dim + k];
                if x == 0.0 {
                    continue;
                }
                for c in 0..dim {
                    buf[i * dim + c] += x * m[k * dim + c];
                }
            }
        }
        std::mem::swap(&mut m, &mut buf);
    }
    let s = norm(&m);
    if s == 0.0 {
        return 0.0;
    }
    (log_scale + s.ln() / f64::from(2u32).powi(SQUARINGS as i32)).exp()
}

fn draw_edges(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<PlantedEdge> {
    let n = cfg.n_airports;
    let mut edges = Vec::new();
    for to in 0..n {
        for from in (0..n).filter(|&f| f != to) {
            if rng.random::<f64>() < cfg.edge_density {
                let weight = cfg.weight_min + (cfg.weight_max - cfg.weight_min) * rng.random::<f64>();
                let lag = rng.random_range(cfg.lag_min..=cfg.lag_max);
                edges.push(PlantedEdge { from, to, weight, lag });
            }
        }
    }
    if companion_radius(n, &edges) < STABLE_RADIUS {
        return edges;
    }
    // The lag-shift blocks of the companion matrix do not scale with the
    // weights, so the largest stable factor is found by bisection.
    let scaled = |s: f64| -> Vec<PlantedEdge> {
        edges
            .iter()
            .map(|e| PlantedEdge {
                weight: e.weight * s,
                ..e.clone()
            })
            .collect()
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if companion_radius(n, &scaled(mid)) < STABLE_RADIUS {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    scaled(lo)
}

/// Generates `hours` of delays for `n_airports` airports with known structure.
pub fn generate(cfg: &SynthConfig) -> Result<(DelayMatrix, GroundTruth), SynthError> {
    cfg.validate()?;
    let n = cfg.n_airports;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let edges = if cfg.edges.is_empty() {
        draw_edges(cfg, &mut rng)
    } else {
        let radius = companion_radius(n, &cfg.edges);
        if radius >= 1.0 {
            return Err(SynthError::Unstable(radius));
        }
        cfg.edges.clone()
    };
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(20.0..45.0), rng.random_range(95.0..125.0)))
        .collect();
    let base: Vec<f64> = (0..n).map(|_| cfg.base_level * rng.random_range(0.5..1.5)).collect();
    let daily_phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let weekly_phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let spike = (cfg.spike_magnitude > 0.0).then(|| Exp::new(1.0 / cfg.spike_magnitude).expect("positive rate"));
    let mut inbound: Vec<Vec<&PlantedEdge>> = vec![Vec::new(); n];
    for e in &edges {
        inbound[e.to].push(e);
    }

    let hours = cfg.hours;
    let mut y = vec![vec![0.0; hours]; n];
    for t in 0..hours {
        let th = t as f64;
        for i in 0..n {
            let mut v = base[i]
                + cfg.daily_amplitude * (2.0 * PI * th / 24.0 + daily_phase[i]).sin()
                + cfg.weekly_amplitude * (2.0 * PI * th / 168.0 + weekly_phase[i]).sin();
            for e in &inbound[i] {
                if t >= e.lag {
                    v += e.weight * y[e.from][t - e.lag];
                }
            }
            // draw noise and spikes unconditionally so the stream layout
            // does not depend on the signal
            let z: f64 = std_normal.sample(&mut rng);
            v += cfg.noise_std_of(i) * z;
            let u: f64 = rng.random();
            if let Some(dist) = &spike {
                let size: f64 = dist.sample(&mut rng);
                if u < cfg.spike_rate {
                    v += size;
                }
            }
            y[i][t] = v.max(0.0);
        }
    }

    let airports = airport_names(n);
    let mut susceptibility = vec![0.0; n];
    for e in &edges {
        susceptibility[e.to] += e.weight;
    }
    let matrix = DelayMatrix::from_series(airports.clone(), synth_start(), &y)
        .map_err(|e| SynthError::Config(e.to_string()))?;
    Ok((
        matrix,
        GroundTruth {
            airports,
            edges,
            susceptibility,
            coords,
        },
    ))
}

const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in kilometres between `(lat, lon)` degree pairs.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1) = (a.0.to_radians(), a.1.to_radians());
    let (la2, lo2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Symmetric Gaussian-kernel distance graph, `N × N` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoGraph {
    pub n: usize,
    pub weights: Vec<f64>,
}

/// Standard deviation of all pairwise distances, a common kernel width.
pub fn distance_std(coords: &[(f64, f64)]) -> f64 {
    let mut d = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            d.push(haversine_km(coords[i], coords[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
}

/// `A_ij = exp(-d_ij² / σ_d²)` for `d_ij ≤ cutoff`, else 0; zero diagonal.
pub fn geo_graph(coords: &[(f64, f64)], sigma_d: f64, cutoff_km: f64) -> Result<GeoGraph, SynthError> {
    let n = coords.len();
    if n < 2 {
        return Err(SynthError::Config("geo_graph needs at least 2 coordinates".into()));
    }
    if !(sigma_d > 0.0 && sigma_d.is_finite()) {
        return Err(SynthError::Config(format!("sigma_d must be positive, got {sigma_d}")));
    }
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = haversine_km(coords[i], coords[j]);
            let w = if d <= cutoff_km { (-(d * d) / (sigma_d * sigma_d)).exp() } else { 0.0 };
            weights[i * n + j] = w;
            weights[j * n + i] = w;
        }
    }
    Ok(GeoGraph { n, weights })
}
