use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use causalnet::autodiff::Tensor;
use causalnet::granger::{CausalGraphSet, GraphExport, GraphSchedule, Scale};
use causalnet::ingest::{bin_delays, read_flights, remove_outliers, DelayMatrix};
use causalnet::model::{model_grad_check, ModelConfig, ModelError, ModelParams};
use causalnet::synth::{companion_radius, distance_std, generate, geo_graph, GroundTruth};
use causalnet::trainer::{
    ablate, analyze_correction, correction_pairs, evaluate, forecast, persistence_baseline, rank_correlation,
    report_adaptive_weights, train, write_history_csv, write_metrics_csv, Dataset, ForecastResult, MetricRow, TrainConfig,
};
use chrono::{DateTime, DurationRound, TimeDelta, Utc};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "causalnet", version, about = "Airport delay forecasting with causality graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic delay matrix with planted propagation.
    Synth(Common),
    /// Bin flight records into an hourly delay matrix and clip outliers.
    Ingest(Common),
    /// Precompute the multi-scale causality graph sets.
    Graphs(Common),
    /// Train a model and score it on the test segment.
    Train(Common),
    /// Score a checkpoint, or a predictions CSV against a truth CSV.
    Eval(EvalArgs),
    /// Train every configured variant for every repetition seed.
    Ablate(Common),
    /// Finite-difference check of the model gradients on a toy problem.
    Gradcheck(Common),
    /// Correction distances and adaptive fusion weights of a checkpoint.
    Analyze(Common),
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.max_epochs=20`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// One column per horizon, one row per (sample, airport).
    #[arg(long, requires = "truth")]
    pub predictions: Option<PathBuf>,
    /// Same layout as the predictions; empty cells are masked.
    #[arg(long, requires = "predictions")]
    pub truth: Option<PathBuf>,
}

pub fn run(command: &Command, out: &mut dyn Write) -> Result<()> {
    let load = |c: &Common| RunConfig::load(&c.config, &c.overrides);
    match command {
        Command::Synth(c) => synth(&load(c)?, out),
        Command::Ingest(c) => ingest(&load(c)?, out),
        Command::Graphs(c) => graphs(&load(c)?, out),
        Command::Train(c) => train_cmd(&load(c)?, out),
        Command::Eval(e) => eval(&load(&e.common)?, e.predictions.as_deref().zip(e.truth.as_deref()), out),
        Command::Ablate(c) => ablate_cmd(&load(c)?, out),
        Command::Gradcheck(c) => gradcheck(&load(c)?, out),
        Command::Analyze(c) => analyze(&load(c)?, out),
        Command::Defaults => {
            out.write_all(RunConfig::default().to_toml().as_bytes())
                .map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::from_io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::from_io(path, e))
}

fn finish(mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

/// Prints the summary line and records it under `command` in `dir/summary.json`.
fn emit(out: &mut dyn Write, dir: &Path, command: &str, summary: Value) -> Result<()> {
    let path = dir.join("summary.json");
    let mut all: BTreeMap<String, Value> = fs::read_to_string(&path)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    all.insert(command.to_string(), summary.clone());
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &all)?;
    writeln!(w).map_err(|e| CliError::Io(e.to_string()))?;
    finish(w)?;
    let mut line = serde_json::Map::new();
    line.insert("command".into(), json!(command));
    if let Value::Object(map) = summary {
        line.extend(map);
    }
    writeln!(out, "{}", Value::Object(line)).map_err(|e| CliError::Io(e.to_string()))
}

fn read_delays(dir: &Path) -> Result<DelayMatrix> {
    let values = open(&dir.join("delays.csv"))?;
    let mask_path = dir.join("mask.csv");
    let mask = if mask_path.exists() { Some(open(&mask_path)?) } else { None };
    Ok(DelayMatrix::read_csv(values, mask)?)
}

fn write_delays(dir: &Path, m: &DelayMatrix) -> Result<()> {
    let mut w = create(&dir.join("delays.csv"))?;
    m.write_csv(&mut w)?;
    finish(w)?;
    let mut w = create(&dir.join("mask.csv"))?;
    m.write_mask_csv(&mut w)?;
    finish(w)
}

fn read_ground_truth(cfg: &RunConfig) -> Result<Option<GroundTruth>> {
    let path = cfg.paths.data_dir().join("ground_truth.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_reader(open(&path)?)?))
}

fn load_coords(cfg: &RunConfig, airports: &[String]) -> Result<Vec<(f64, f64)>> {
    if let Some(path) = cfg.paths.coords() {
        let mut rdr = csv::Reader::from_reader(open(&path)?);
        let mut table = BTreeMap::new();
        for rec in rdr.deserialize::<(String, f64, f64)>() {
            let (id, lat, lon) = rec?;
            table.insert(id, (lat, lon));
        }
        return airports
            .iter()
            .map(|a| {
                table
                    .get(a)
                    .copied()
                    .ok_or_else(|| CliError::Malformed(format!("{}: no coordinates for {a}", path.display())))
            })
            .collect();
    }
    match read_ground_truth(cfg)? {
        Some(gt) if gt.airports == airports => Ok(gt.coords),
        Some(_) => Err(CliError::Malformed("ground_truth.json lists different airports than delays.csv".into())),
        None => Err(CliError::MissingFile(
            "airport coordinates: set paths.coords or provide ground_truth.json in the data directory".into(),
        )),
    }
}

fn geo_tensor(cfg: &RunConfig, coords: &[(f64, f64)]) -> Result<Tensor> {
    let sigma = match cfg.data.geo_sigma_km {
        s if s > 0.0 => s,
        _ => Some(distance_std(coords)).filter(|&s| s > 0.0).unwrap_or(1.0),
    };
    let g = geo_graph(coords, sigma, cfg.data.geo_cutoff_km)?;
    Ok(Tensor::new(vec![g.n, g.n], g.weights).expect("n × n"))
}

fn graphs_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir().join("graphs")
}

fn write_graphs(dir: &Path, schedule: &GraphSchedule) -> Result<()> {
    for set in schedule.sets() {
        let mut w = create(&dir.join(format!("anchor_{:06}.json", set.anchor)))?;
        serde_json::to_writer_pretty(&mut w, &set.to_export())?;
        writeln!(w).map_err(|e| CliError::Io(e.to_string()))?;
        finish(w)?;
    }
    Ok(())
}

/// Graph sets previously written to `dir`, if any.
fn read_graphs(dir: &Path, n: usize) -> Result<Option<GraphSchedule>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(None);
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    if files.is_empty() {
        return Ok(None);
    }
    files.sort();
    let mut sets = Vec::with_capacity(files.len());
    for f in &files {
        let records: Vec<GraphExport> = serde_json::from_reader(open(f)?)?;
        let set = CausalGraphSet::from_export(&records)
            .ok_or_else(|| CliError::Malformed(format!("{}: incomplete graph set", f.display())))?;
        if set.n != n {
            return Err(CliError::Malformed(format!("{}: graphs over {} airports, data has {n}", f.display(), set.n)));
        }
        sets.push(set);
    }
    Ok(Some(GraphSchedule::from_sets(n, sets)))
}

fn schedule_for(cfg: &RunConfig, delays: &DelayMatrix) -> Result<GraphSchedule> {
    let dir = graphs_dir(cfg);
    if let Some(s) = read_graphs(&dir, delays.n_airports())? {
        return Ok(s);
    }
    let schedule = GraphSchedule::precompute(delays, &cfg.granger)?;
    write_graphs(&dir, &schedule)?;
    Ok(schedule)
}

fn load_dataset(cfg: &RunConfig, r: usize, horizon: usize) -> Result<Dataset> {
    let delays = read_delays(&cfg.paths.data_dir())?;
    let schedule = schedule_for(cfg, &delays)?;
    let coords = load_coords(cfg, delays.airports())?;
    let geo = geo_tensor(cfg, &coords)?;
    Ok(Dataset::prepare(&delays, schedule, geo, cfg.data.split, r, horizon)?)
}

/// The configured model sized to the data.
fn model_config(cfg: &RunConfig, data: &Dataset) -> ModelConfig {
    ModelConfig {
        n_airports: data.n_airports(),
        ..cfg.model.clone()
    }
}

fn load_checkpoint(cfg: &RunConfig) -> Result<ModelParams> {
    let path = cfg.paths.checkpoint();
    ModelParams::load(open(&path)?).map_err(|e| match e {
        ModelError::Io(io) => CliError::Malformed(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = create(path)?;
    write_metrics_csv(&mut w, rows)?;
    finish(w)
}

fn result_json(r: &ForecastResult) -> Value {
    json!({ "mae": r.mae, "rmse": r.rmse })
}

fn synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (m, truth) = generate(&cfg.synth)?;
    let dir = cfg.paths.data_dir();
    write_delays(&dir, &m)?;
    let mut w = create(&dir.join("ground_truth.json"))?;
    serde_json::to_writer_pretty(&mut w, &truth)?;
    writeln!(w).map_err(|e| CliError::Io(e.to_string()))?;
    finish(w)?;
    let summary = json!({
        "airports": m.n_airports(),
        "hours": m.hours(),
        "edges": truth.edges.len(),
        "spectral_radius": companion_radius(m.n_airports(), &truth.edges),
        "seed": cfg.synth.seed,
    });
    emit(out, &dir, "synth", summary)
}

fn parse_time(s: &str, key: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| CliError::Config(format!("data.{key}: {e}")))
}

fn ingest(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let path = PathBuf::from(&cfg.paths.flights);
    let records = read_flights(open(&path)?)?;
    let airports = if cfg.data.airports.is_empty() {
        let mut ids: Vec<String> = records.iter().map(|r| r.airport.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    } else {
        cfg.data.airports.clone()
    };
    let hour = TimeDelta::hours(1);
    let floor = |t: DateTime<Utc>| t.duration_trunc(hour).expect("hour truncation");
    let start = match cfg.data.start.as_str() {
        "" => records.iter().map(|r| floor(r.scheduled)).min(),
        s => Some(parse_time(s, "start")?),
    };
    let end = match cfg.data.end.as_str() {
        "" => records.iter().map(|r| floor(r.scheduled) + hour).max(),
        s => Some(parse_time(s, "end")?),
    };
    let (Some(start), Some(end)) = (start, end) else {
        return Err(CliError::Malformed(format!("{}: no flight records", path.display())));
    };
    let binned = bin_delays(&records, &airports, start, end, cfg.data.cancellation_delay)?;
    let (clean, clipped) = remove_outliers(&binned, cfg.data.outlier_quantile)?;
    let dir = cfg.paths.data_dir();
    write_delays(&dir, &clean)?;
    let summary = json!({
        "records": records.len(),
        "airports": airports,
        "hours": clean.hours(),
        "start": start.to_rfc3339(),
        "end": end.to_rfc3339(),
        "clipped_fraction": clipped,
    });
    emit(out, &dir, "ingest", summary)
}

fn graphs(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let delays = read_delays(&cfg.paths.data_dir())?;
    let schedule = GraphSchedule::precompute(&delays, &cfg.granger)?;
    let dir = graphs_dir(cfg);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::from_io(&dir, e))?;
    }
    write_graphs(&dir, &schedule)?;
    let latest = schedule.sets().last();
    let edges: BTreeMap<&str, usize> = Scale::ALL
        .iter()
        .map(|&s| (s.name(), latest.map_or(0, |set| set.edge_count(s))))
        .collect();
    let summary = json!({
        "sets": schedule.sets().len(),
        "first_anchor": schedule.sets().first().map(|s| s.anchor),
        "last_anchor": latest.map(|s| s.anchor),
        "latest_edges": edges,
    });
    emit(out, &cfg.paths.out_dir(), "graphs", summary)
}

fn train_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(cfg, cfg.model.encoder_steps, cfg.model.horizon)?;
    let model = model_config(cfg, &data);
    let outcome = train(&model, &data, &cfg.train)?;
    let dir = cfg.paths.out_dir();
    let mut w = create(&cfg.paths.checkpoint())?;
    outcome.params.save(&mut w)?;
    finish(w)?;
    let mut w = create(&dir.join("history.csv"))?;
    write_history_csv(&mut w, &outcome.history)?;
    finish(w)?;
    let test = forecast(&outcome.params, &data, &data.samples.test, cfg.train.batch_size)?;
    let base = persistence_baseline(&data.samples.test, &data.zscore, model.horizon)?;
    let seed = cfg.train.seed;
    let mut rows = MetricRow::from_result(&test, model.variant.name(), seed);
    rows.extend(MetricRow::from_result(&base, "persistence", seed));
    write_metrics(&dir.join("metrics.csv"), &rows)?;
    let summary = json!({
        "variant": model.variant,
        "seed": seed,
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_mae": outcome.history.get(outcome.best_epoch).map(|h| h.val_mae),
        "parameters": outcome.params.scalar_count(),
        "test": result_json(&test),
        "persistence": result_json(&base),
        "zscore": { "mean": data.zscore.mean, "std": data.zscore.std },
    });
    emit(out, &dir, "train", summary)
}

/// Numeric columns of a CSV with a header; empty cells become `None`.
fn read_columns(path: &Path) -> Result<Vec<Vec<Option<f64>>>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let width = rdr.headers()?.len();
    let mut cols = vec![Vec::new(); width];
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (c, field) in rec.iter().enumerate() {
            let field = field.trim();
            let v = if field.is_empty() {
                None
            } else {
                Some(field.parse::<f64>().map_err(|e| {
                    CliError::Malformed(format!("{} line {}: {field:?}: {e}", path.display(), k + 2))
                })?)
            };
            cols[c].push(v);
        }
    }
    Ok(cols)
}

fn eval(cfg: &RunConfig, files: Option<(&Path, &Path)>, out: &mut dyn Write) -> Result<()> {
    let dir = cfg.paths.out_dir();
    let seed = cfg.train.seed;
    let (rows, source) = match files {
        Some((pred_path, truth_path)) => {
            let preds = read_columns(pred_path)?;
            let truth = read_columns(truth_path)?;
            if preds.len() != truth.len() || preds.iter().zip(&truth).any(|(p, t)| p.len() != t.len()) {
                return Err(CliError::Malformed("predictions and truth differ in shape".into()));
            }
            let mut result = ForecastResult {
                predictions: Vec::new(),
                mae: Vec::new(),
                rmse: Vec::new(),
            };
            for (c, (p, t)) in preds.iter().zip(&truth).enumerate() {
                let p: Vec<f64> = p
                    .iter()
                    .map(|v| v.ok_or_else(|| CliError::Malformed(format!("empty prediction in column {}", c + 1))))
                    .collect::<Result<_>>()?;
                let mask: Vec<bool> = t.iter().map(Option::is_some).collect();
                let t: Vec<f64> = t.iter().map(|v| v.unwrap_or(0.0)).collect();
                let (mae, rmse) = evaluate(&p, &t, &mask)?;
                result.mae.push(mae);
                result.rmse.push(rmse);
            }
            (MetricRow::from_result(&result, "external", seed), "files")
        }
        None => {
            let params = load_checkpoint(cfg)?;
            let pc = params.config().clone();
            let data = load_dataset(cfg, pc.encoder_steps, pc.horizon)?;
            if pc.n_airports != data.n_airports() {
                return Err(CliError::Config(format!(
                    "checkpoint covers {} airports, data has {}",
                    pc.n_airports,
                    data.n_airports()
                )));
            }
            let test = forecast(&params, &data, &data.samples.test, cfg.train.batch_size)?;
            (MetricRow::from_result(&test, pc.variant.name(), seed), "checkpoint")
        }
    };
    write_metrics(&dir.join("eval_metrics.csv"), &rows)?;
    let summary = json!({
        "source": source,
        "mae": rows.iter().map(|r| r.mae).collect::<Vec<_>>(),
        "rmse": rows.iter().map(|r| r.rmse).collect::<Vec<_>>(),
    });
    emit(out, &dir, "eval", summary)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ablate_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(cfg, cfg.model.encoder_steps, cfg.model.horizon)?;
    let model = model_config(cfg, &data);
    let dir = cfg.paths.out_dir();
    let base = persistence_baseline(&data.samples.test, &data.zscore, model.horizon)?;
    let mut rows = Vec::new();
    let seeds: Vec<u64> = (0..cfg.run.repetitions as u64).map(|k| cfg.train.seed + k).collect();
    for &seed in &seeds {
        rows.extend(MetricRow::from_result(&base, "persistence", seed));
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        for &variant in &cfg.run.variants {
            let (outcome, result) = ablate(variant, &model, &data, &tcfg)?;
            let mut w = create(&dir.join("ablation").join(format!("{}_seed{seed}_history.csv", variant.name())))?;
            write_history_csv(&mut w, &outcome.history)?;
            finish(w)?;
            rows.extend(MetricRow::from_result(&result, variant.name(), seed));
        }
    }
    write_metrics(&dir.join("metrics.csv"), &rows)?;
    let mut medians: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let names = std::iter::once("persistence").chain(cfg.run.variants.iter().map(|v| v.name()));
    for name in names {
        let per_h = (1..=model.horizon)
            .map(|h| median(rows.iter().filter(|r| r.variant == name && r.horizon == h).map(|r| r.mae).collect()))
            .collect();
        medians.insert(name.to_string(), per_h);
    }
    let summary = json!({ "seeds": seeds, "median_mae": medians });
    emit(out, &dir, "ablate", summary)
}

fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let g = &cfg.gradcheck;
    let model = ModelConfig {
        n_airports: g.n_airports,
        encoder_steps: g.encoder_steps,
        horizon: g.horizon,
        hidden_dim: g.hidden_dim,
        embed_dim: g.embed_dim,
        variant: g.variant,
        ..cfg.model.clone()
    };
    let report = model_grad_check(&model, g.seed, g.epsilon).map_err(|e| match e {
        ModelError::Tensor(t) => CliError::Numerical(t.to_string()),
        other => other.into(),
    })?;
    let passed = report.max_relative_error < g.tolerance;
    let summary = json!({
        "max_relative_error": report.max_relative_error,
        "checked": report.checked,
        "excluded": report.excluded,
        "tolerance": g.tolerance,
        "passed": passed,
    });
    emit(out, &cfg.paths.out_dir(), "gradcheck", summary)?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "max relative gradient error {} exceeds {}",
            report.max_relative_error, g.tolerance
        )))
    }
}

fn analyze(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let params = load_checkpoint(cfg)?;
    let pc = params.config().clone();
    let data = load_dataset(cfg, pc.encoder_steps, pc.horizon)?;
    if pc.n_airports != data.n_airports() {
        return Err(CliError::Config(format!(
            "checkpoint covers {} airports, data has {}",
            pc.n_airports,
            data.n_airports()
        )));
    }
    let dir = cfg.paths.out_dir();
    let (raw, corrected) = correction_pairs(&params, &data, &data.samples.test)?;
    let distances = analyze_correction(&raw, &corrected)?;
    let mut w = create(&dir.join("analysis").join("correction.csv"))?;
    {
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record(["scale", "distance"])?;
        for (s, d) in Scale::ALL.iter().zip(distances) {
            c.write_record([s.name().to_string(), d.to_string()])?;
        }
        c.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    finish(w)?;

    let weights = report_adaptive_weights(&params, &data.airports)?;
    let truth = read_ground_truth(cfg)?.filter(|gt| gt.airports == data.airports);
    let mut w = create(&dir.join("analysis").join("adaptive_weights.csv"))?;
    {
        let mut c = csv::Writer::from_writer(&mut w);
        let mut header = vec!["airport", "score", "rank"];
        if truth.is_some() {
            header.push("susceptibility");
        }
        c.write_record(&header)?;
        for (i, aw) in weights.iter().enumerate() {
            let mut rec = vec![aw.airport.clone(), aw.score.to_string(), aw.rank.to_string()];
            if let Some(gt) = &truth {
                rec.push(gt.susceptibility[i].to_string());
            }
            c.write_record(&rec)?;
        }
        c.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    finish(w)?;
    let scores: Vec<f64> = weights.iter().map(|w| w.score).collect();
    let correlation = truth.as_ref().and_then(|gt| rank_correlation(&scores, &gt.susceptibility));
    let summary = json!({
        "anchors": raw.len(),
        "correction_distance": Scale::ALL.iter().map(|s| s.name()).zip(distances).collect::<BTreeMap<_, _>>(),
        "adaptive_weights": weights,
        "susceptibility_rank_correlation": correlation,
    });
    emit(out, &dir, "analyze", summary)
}
