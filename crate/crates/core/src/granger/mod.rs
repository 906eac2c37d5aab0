//! Multi-scale Granger causality graphs between airport delay series.
//!
//! For every ordered airport pair the source's lagged values are tested for
//! additional explanatory power over the target's own lags. The test runs on
//! differenced trailing windows at four time scales, yielding one directed
//! 0/1 graph per scale.

mod fdist;
mod ols;

pub use fdist::{beta_reg, f_pvalue, ln_gamma};
pub use ols::{ols_rss, OlsError, OlsFit};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DelayMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum GrangerError {
    #[error("interval must be at least 1")]
    ZeroInterval,
    #[error("series of length {len} is too short for interval {interval}")]
    SeriesTooShort { len: usize, interval: usize },
    #[error("lagged regression needs at least {need} observations, got {got}")]
    TooFewObservations { got: usize, need: usize },
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("graph construction needs at least 2 airports, got {0}")]
    TooFewAirports(usize),
    #[error("anchor hour {anchor} precedes the shortest window ({min_window} hours) or exceeds the data ({hours} hours)")]
    BadAnchor {
        anchor: usize,
        min_window: usize,
        hours: usize,
    },
    #[error("invalid granger config: {0}")]
    Config(String),
}

/// Time scales of the graph set, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Year,
    Month,
    Week,
    Day,
}

impl Scale {
    pub const ALL: [Scale; 4] = [Scale::Year, Scale::Month, Scale::Week, Scale::Day];

    pub fn name(self) -> &'static str {
        match self {
            Scale::Year => "year",
            Scale::Month => "month",
            Scale::Week => "week",
            Scale::Day => "day",
        }
    }
}

/// Trailing window and differencing interval for one scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleWindow {
    /// Hours of history ending at the anchor; 0 means all available history.
    pub window_hours: usize,
    pub diff_interval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrangerConfig {
    pub lag: usize,
    pub significance: f64,
    /// Graph sets are recomputed every this many hours.
    pub cadence_hours: usize,
    pub year: ScaleWindow,
    pub month: ScaleWindow,
    pub week: ScaleWindow,
    pub day: ScaleWindow,
}

impl Default for GrangerConfig {
    fn default() -> Self {
        Self {
            lag: 2,
            significance: 0.05,
            cadence_hours: 24,
            year: ScaleWindow {
                window_hours: 0,
                diff_interval: 24,
            },
            month: ScaleWindow {
                window_hours: 720,
                diff_interval: 24,
            },
            week: ScaleWindow {
                window_hours: 168,
                diff_interval: 24,
            },
            day: ScaleWindow {
                window_hours: 24,
                diff_interval: 1,
            },
        }
    }
}

impl GrangerConfig {
    pub fn window(&self, scale: Scale) -> ScaleWindow {
        match scale {
            Scale::Year => self.year,
            Scale::Month => self.month,
            Scale::Week => self.week,
            Scale::Day => self.day,
        }
    }

    /// Fewest differenced observations a regression may run on.
    pub fn min_observations(&self) -> usize {
        2 * self.lag + 10
    }

    /// Shortest finite window; anchors must be at least this far in.
    pub fn min_window(&self) -> usize {
        Scale::ALL
            .iter()
            .map(|&s| self.window(s).window_hours)
            .filter(|&w| w > 0)
            .min()
            .unwrap_or(self.min_observations() + 1)
    }

    pub fn validate(&self) -> Result<(), GrangerError> {
        let bad = |m: String| Err(GrangerError::Config(m));
        if self.lag < 1 {
            return bad("lag must be at least 1".into());
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return bad(format!("significance {} outside (0, 1)", self.significance));
        }
        if self.cadence_hours < 1 {
            return bad("cadence_hours must be at least 1".into());
        }
        for s in Scale::ALL {
            let w = self.window(s);
            if w.diff_interval < 1 {
                return bad(format!("{} diff_interval must be at least 1", s.name()));
            }
            if w.window_hours > 0 && w.window_hours < w.diff_interval + self.min_observations() {
                return bad(format!(
                    "{} window of {} hours leaves fewer than {} observations after differencing",
                    s.name(),
                    w.window_hours,
                    self.min_observations()
                ));
            }
        }
        Ok(())
    }
}

/// `out[k] = series[k + interval] - series[k]`.
pub fn difference(series: &[f64], interval: usize) -> Result<Vec<f64>, GrangerError> {
    if interval == 0 {
        return Err(GrangerError::ZeroInterval);
    }
    if series.len() <= interval {
        return Err(GrangerError::SeriesTooShort {
            len: series.len(),
            interval,
        });
    }
    Ok(series[interval..].iter().zip(series).map(|(a, b)| a - b).collect())
}

/// Outcome of one pairwise test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrangerTest {
    pub f: f64,
    pub p_value: f64,
    pub df1: usize,
    pub df2: usize,
    /// Rank-deficient or perfectly fitted regression; reported as no edge.
    pub degenerate: bool,
}

impl GrangerTest {
    fn no_edge(df1: usize, df2: usize) -> Self {
        Self {
            f: 0.0,
            p_value: 1.0,
            df1,
            df2,
            degenerate: true,
        }
    }
}

/// Lagged design rows for target `ya`; optionally appends lags of `yb`.
fn design(ya: &[f64], yb: Option<&[f64]>, lag: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let cols = 1 + lag + if yb.is_some() { lag } else { 0 };
    let n = ya.len() - lag;
    let mut x = Vec::with_capacity(n * cols);
    let mut y = Vec::with_capacity(n);
    for t in lag..ya.len() {
        y.push(ya[t]);
        x.push(1.0);
        x.extend((1..=lag).map(|i| ya[t - i]));
        if let Some(b) = yb {
            x.extend((1..=lag).map(|i| b[t - i]));
        }
    }
    (y, x, cols)
}

/// RSS of the restricted (own-lags-only) regression of `ya`.
fn restricted_rss(ya: &[f64], lag: usize) -> Option<f64> {
    let (y, x, cols) = design(ya, None, lag);
    ols_rss(&y, &x, cols).ok().map(|f| f.rss)
}

fn test_with_restricted(ya: &[f64], yb: &[f64], lag: usize, rss_r: Option<f64>) -> GrangerTest {
    let n = ya.len() - lag;
    let df1 = lag;
    let df2 = n - 2 * lag - 1;
    let Some(rss_r) = rss_r else {
        return GrangerTest::no_edge(df1, df2);
    };
    let (y, x, cols) = design(ya, Some(yb), lag);
    let rss_u = match ols_rss(&y, &x, cols) {
        Ok(fit) if fit.rss > 0.0 => fit.rss,
        _ => return GrangerTest::no_edge(df1, df2),
    };
    debug_assert!(rss_r >= rss_u * (1.0 - 1e-9), "nested fit has larger RSS");
    let f = (((rss_r - rss_u) / df1 as f64) / (rss_u / df2 as f64)).max(0.0);
    GrangerTest {
        f,
        p_value: f_pvalue(f, df1 as f64, df2 as f64),
        df1,
        df2,
        degenerate: false,
    }
}

/// Tests whether lags `1..=lag` of `yb` help predict `ya` beyond its own lags.
///
/// Both series should already be differenced. Uses `n - 2·lag - 1`
/// denominator degrees of freedom where `n = len - lag`.
pub fn granger_test(ya: &[f64], yb: &[f64], lag: usize) -> Result<GrangerTest, GrangerError> {
    if ya.len() != yb.len() {
        return Err(GrangerError::LengthMismatch(ya.len(), yb.len()));
    }
    let need = 2 * lag + 10;
    if lag == 0 || ya.len() < need {
        return Err(GrangerError::TooFewObservations { got: ya.len(), need });
    }
    Ok(test_with_restricted(ya, yb, lag, restricted_rss(ya, lag)))
}

/// One directed graph with its p-values, `N × N` row-major. Entry `(a, b)`
/// is 1 when airport `b` Granger-causes airport `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleGraph {
    pub scale: Scale,
    pub adjacency: Vec<f64>,
    pub p_values: Vec<f64>,
}

/// The four scale graphs anchored at one hour.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalGraphSet {
    pub anchor: usize,
    pub n: usize,
    pub graphs: [ScaleGraph; 4],
}

/// JSON record for one scale of a graph set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub anchor_time: usize,
    pub scale: Scale,
    pub adjacency: Vec<Vec<u8>>,
    pub p_values: Vec<Vec<f64>>,
}

impl CausalGraphSet {
    /// Graph set with no edges, used before the first anchor.
    pub fn empty(n: usize, anchor: usize) -> Self {
        let graphs = Scale::ALL.map(|scale| ScaleGraph {
            scale,
            adjacency: vec![0.0; n * n],
            p_values: vec![1.0; n * n],
        });
        Self { anchor, n, graphs }
    }

    pub fn graph(&self, scale: Scale) -> &ScaleGraph {
        &self.graphs[Scale::ALL.iter().position(|&s| s == scale).expect("all scales")]
    }

    pub fn edge_count(&self, scale: Scale) -> usize {
        self.graph(scale).adjacency.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn to_export(&self) -> Vec<GraphExport> {
        let n = self.n;
        self.graphs
            .iter()
            .map(|g| GraphExport {
                anchor_time: self.anchor,
                scale: g.scale,
                adjacency: g.adjacency.chunks(n).map(|r| r.iter().map(|&v| v as u8).collect()).collect(),
                p_values: g.p_values.chunks(n).map(<[f64]>::to_vec).collect(),
            })
            .collect()
    }

    pub fn from_export(records: &[GraphExport]) -> Option<Self> {
        let first = records.first()?;
        let n = first.adjacency.len();
        let anchor = first.anchor_time;
        let mut set = Self::empty(n, anchor);
        for (slot, scale) in set.graphs.iter_mut().zip(Scale::ALL) {
            let rec = records.iter().find(|r| r.scale == scale && r.anchor_time == anchor)?;
            if rec.adjacency.len() != n || rec.p_values.len() != n {
                return None;
            }
            slot.adjacency = rec.adjacency.iter().flatten().map(|&v| f64::from(v)).collect();
            slot.p_values = rec.p_values.iter().flatten().copied().collect();
            if slot.adjacency.len() != n * n || slot.p_values.len() != n * n {
                return None;
            }
        }
        Some(set)
    }
}

/// Differenced trailing window of every airport for one scale, or `None`
/// when too little history remains for a regression.
fn scale_inputs(delays: &DelayMatrix, anchor: usize, w: ScaleWindow, cfg: &GrangerConfig) -> Option<Vec<Vec<f64>>> {
    let end = anchor + 1;
    let start = if w.window_hours == 0 {
        0
    } else {
        end.saturating_sub(w.window_hours)
    };
    (0..delays.n_airports())
        .map(|i| {
            let d = difference(&delays.series(i)[start..end], w.diff_interval).ok()?;
            (d.len() >= cfg.min_observations()).then_some(d)
        })
        .collect()
}

/// Runs the pairwise tests `(target, source)` listed in `pairs` for one scale.
///
/// Each result depends only on its own pair, so the order of `pairs` does
/// not affect any entry.
pub fn pair_tests(
    delays: &DelayMatrix,
    anchor: usize,
    scale: Scale,
    cfg: &GrangerConfig,
    pairs: &[(usize, usize)],
) -> Vec<GrangerTest> {
    let df = |len: usize| (cfg.lag, len.saturating_sub(3 * cfg.lag + 1));
    let Some(series) = scale_inputs(delays, anchor, cfg.window(scale), cfg) else {
        return pairs.iter().map(|_| GrangerTest::no_edge(cfg.lag, 0)).collect();
    };
    let mut restricted: Vec<Option<Option<f64>>> = vec![None; series.len()];
    pairs
        .iter()
        .map(|&(a, b)| {
            if a == b {
                let (d1, d2) = df(series[a].len());
                return GrangerTest::no_edge(d1, d2);
            }
            let rss_r = *restricted[a].get_or_insert_with(|| restricted_rss(&series[a], cfg.lag));
            test_with_restricted(&series[a], &series[b], cfg.lag, rss_r)
        })
        .collect()
}

/// Builds the four scale graphs from data up to and including hour `anchor`.
///
/// Scales whose window exceeds the available history use all of it; scales
/// left with too few observations have no edges.
pub fn build_graph_set(delays: &DelayMatrix, anchor: usize, cfg: &GrangerConfig) -> Result<CausalGraphSet, GrangerError> {
    cfg.validate()?;
    let n = delays.n_airports();
    if n < 2 {
        return Err(GrangerError::TooFewAirports(n));
    }
    let min_window = cfg.min_window();
    if anchor + 1 < min_window || anchor >= delays.hours() {
        return Err(GrangerError::BadAnchor {
            anchor,
            min_window,
            hours: delays.hours(),
        });
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).collect();
    let mut set = CausalGraphSet::empty(n, anchor);
    for graph in set.graphs.iter_mut() {
        let tests = pair_tests(delays, anchor, graph.scale, cfg, &pairs);
        for (&(a, b), t) in pairs.iter().zip(&tests) {
            graph.p_values[a * n + b] = t.p_value;
            graph.adjacency[a * n + b] = if t.p_value < cfg.significance { 1.0 } else { 0.0 };
        }
    }
    Ok(set)
}

/// Graph sets precomputed every `cadence_hours`; each hour uses the most
/// recent set at or before it.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSchedule {
    n: usize,
    sets: Vec<CausalGraphSet>,
}

impl GraphSchedule {
    /// Anchors at every multiple of the cadence from the shortest window on.
    pub fn precompute(delays: &DelayMatrix, cfg: &GrangerConfig) -> Result<Self, GrangerError> {
        cfg.validate()?;
        let first = cfg.min_window().div_ceil(cfg.cadence_hours).max(1) * cfg.cadence_hours;
        let sets = (first..delays.hours())
            .step_by(cfg.cadence_hours)
            .map(|t| build_graph_set(delays, t, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            n: delays.n_airports(),
            sets,
        })
    }

    pub fn from_sets(n: usize, mut sets: Vec<CausalGraphSet>) -> Self {
        sets.sort_by_key(|s| s.anchor);
        Self { n, sets }
    }

    pub fn sets(&self) -> &[CausalGraphSet] {
        &self.sets
    }

    /// Latest set anchored at or before `hour`; an edgeless set before the
    /// first anchor.
    pub fn latest_at(&self, hour: usize) -> CausalGraphSet {
        let idx = self.sets.partition_point(|s| s.anchor <= hour);
        match idx {
            0 => CausalGraphSet::empty(self.n, hour),
            i => self.sets[i - 1].clone(),
        }
    }

    /// Like [`GraphSchedule::latest_at`] but borrowing; `None` before the
    /// first anchor.
    pub fn latest_ref(&self, hour: usize) -> Option<&CausalGraphSet> {
        let idx = self.sets.partition_point(|s| s.anchor <= hour);
        idx.checked_sub(1).map(|i| &self.sets[i])
    }
}
