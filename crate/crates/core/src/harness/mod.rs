//! Experiment orchestration: configuration, library pre-learning, the
//! three-way comparison (DP, transfer RL, conventional RL) and the plot-data
//! files consumed by external plotting tools.
//!
//! Output layout written by [`emit_plot_data`]:
//!
//! | file | columns / content |
//! |---|---|
//! | `report.json` | [`ComparisonReport`] |
//! | `<method>/trace.csv` | `t,v,mode,engine_torque,engine_speed,p_req,p_engine,p_battery,p_brake,soc,fuel_g,reward,feasible` |
//! | `<method>/summary.json` | trace totals and final SOC |
//! | `soc.csv` | `t` then one SOC column per method |
//! | `imn.csv` | `t,imn,updated` |
//! | `engine_points.csv` | `method,t,engine_speed,engine_torque,fuel_g` (engine on only) |
//! | `q_convergence.csv` | `series,sweep,sweep_cost,mean_discrepancy,greedy_cost` |
//!
//! Wall-clock timings go to `timing.json` via [`write_timing`], kept apart so
//! the files above are byte-reproducible.

pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::{
    adapt_online, nearest_entry, train, transfer_q_calls, AdaptConfig, AdaptOutcome, LearningConfig, PowertrainEnv,
    SourceLibrary, StateSpace, TrainLog, WindowRecord,
};
use crate::cycle::DrivingCycle;
use crate::dpbench::{self, DpOptions};
use crate::error::{Error, Result};
use crate::markov::cycle_tpm;
use crate::powertrain::{PolicyTrace, PowertrainParams, StepRecord};

use synth::Recipe;

pub const DP: &str = "dp";
pub const TRANSFER_RL: &str = "transfer-rl";
pub const CONVENTIONAL_RL: &str = "conventional-rl";

/// A cycle given either as a CSV file or as a synthetic recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CycleSource {
    Csv(PathBuf),
    Synthetic { recipe: Recipe, duration: usize, seed: u64 },
}

impl CycleSource {
    pub fn load(&self, params: &PowertrainParams) -> Result<DrivingCycle> {
        match self {
            CycleSource::Csv(path) => DrivingCycle::load_csv(path),
            CycleSource::Synthetic { recipe, duration, seed } => synth::generate(*recipe, *duration, *seed, params),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Cycles pre-learned into the source library.
    pub sources: Vec<CycleSource>,
    /// Cycle driven in the comparison.
    pub stream: Option<CycleSource>,
    pub imn_threshold: f64,
    /// IMN window, s.
    pub window: f64,
    pub transfer_factor: f64,
    pub fine_tune_sweeps: usize,
    pub seed: u64,
    pub learning: LearningConfig,
    pub space: StateSpace,
    pub dp: DpOptions,
    pub powertrain: PowertrainParams,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let adapt = AdaptConfig::default();
        Self {
            sources: Vec::new(),
            stream: None,
            imn_threshold: adapt.threshold,
            window: adapt.window,
            transfer_factor: adapt.transfer_factor,
            fine_tune_sweeps: adapt.fine_tune_sweeps,
            seed: 0,
            learning: LearningConfig::default(),
            space: StateSpace::default(),
            dp: DpOptions::default(),
            powertrain: PowertrainParams::default(),
            output: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.imn_threshold > 0.0) {
            return Err(Error::Config(format!("imn_threshold must be positive, got {}", self.imn_threshold)));
        }
        if !(self.window.is_finite() && self.window > 0.0) {
            return Err(Error::Config(format!("window must be positive, got {}", self.window)));
        }
        if !(self.transfer_factor >= 0.0) {
            return Err(Error::Config("transfer_factor must be nonnegative".into()));
        }
        self.learning.validate()?;
        self.space.validate()?;
        self.powertrain.validate()
    }

    /// Window check against the sampling interval of a loaded cycle.
    pub fn validate_for(&self, dt: f64) -> Result<()> {
        self.validate()?;
        if self.window < 2.0 * dt {
            return Err(Error::Config(format!("window {} s is shorter than two samples", self.window)));
        }
        Ok(())
    }

    pub fn from_config_str(text: &str, is_json: bool) -> Result<Self> {
        let cfg: Self = if is_json {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a `.json` or `.toml` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::from_config_str(&text, is_json)
    }

    pub fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            threshold: self.imn_threshold,
            window: self.window,
            transfer_factor: self.transfer_factor,
            fine_tune_sweeps: self.fine_tune_sweeps,
        }
    }

    /// Learning settings for the `index`-th library source.
    pub fn source_learning(&self, index: usize) -> LearningConfig {
        LearningConfig {
            seed: mix_seed(self.seed, index as u64 + 1),
            ..self.learning
        }
    }

    /// Learning settings for the online arm.
    pub fn online_learning(&self) -> LearningConfig {
        LearningConfig {
            seed: self.seed,
            ..self.learning
        }
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Library plus the training log of every entry.
#[derive(Debug, Clone)]
pub struct Prelearned {
    pub library: SourceLibrary,
    pub logs: Vec<(String, TrainLog)>,
}

fn library_id(name: &str, taken: &[String]) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    let base = if clean.is_empty() { "source".to_string() } else { clean };
    let mut id = base.clone();
    let mut n = 1;
    while taken.contains(&id) {
        n += 1;
        id = format!("{base}-{n}");
    }
    id
}

/// Estimate a TPM and train a Q-table for each cycle, one thread per cycle.
pub fn prelearn(cycles: &[DrivingCycle], params: &PowertrainParams, config: &ExperimentConfig) -> Result<Prelearned> {
    if cycles.is_empty() {
        return Err(Error::EmptySequence("prelearn needs at least one cycle".into()));
    }
    params.validate()?;
    config.space.validate()?;
    let results: Vec<Result<_>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cycles
            .iter()
            .enumerate()
            .map(|(i, cycle)| {
                scope.spawn(move || {
                    let tpm = cycle_tpm(cycle, &params.body, &config.space.grid)?;
                    let (q, log) = train(cycle, params, &config.space, &config.source_learning(i))?;
                    Ok((tpm, q, log))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("prelearn worker panicked")).collect()
    });
    let mut library = SourceLibrary::new();
    let mut logs = Vec::new();
    let mut taken = Vec::new();
    for (cycle, res) in cycles.iter().zip(results) {
        let (tpm, q, log) = res?;
        let id = library_id(cycle.name(), &taken);
        library.push(id.clone(), tpm, q)?;
        logs.push((format!("source:{id}"), log));
        taken.push(id);
    }
    Ok(Prelearned { library, logs })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub total_fuel: f64,
    pub total_cost: f64,
    pub final_soc: f64,
    pub infeasible_steps: usize,
    /// Increase over the lowest fuel among the methods, %.
    pub fuel_increase_pct: f64,
    /// Increase over the lowest cost among the methods, %.
    pub cost_increase_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub cycle: String,
    pub steps: usize,
    pub imn_threshold: f64,
    /// Library entry the learned policies start from.
    pub initial_entry: String,
    pub methods: Vec<MethodSummary>,
    pub update_times: Vec<f64>,
    pub imn_series: Vec<WindowRecord>,
}

/// `100 (value - best) / best`; zero when `best` is not positive.
pub fn relative_increase(value: f64, best: f64) -> f64 {
    if best > 0.0 {
        100.0 * (value - best) / best
    } else {
        0.0
    }
}

impl ComparisonReport {
    pub fn new(cycle: &str, imn_threshold: f64, traces: &[PolicyTrace], adapt: Option<&AdaptOutcome>) -> Self {
        let best_fuel = traces.iter().map(|t| t.total_fuel).fold(f64::INFINITY, f64::min);
        let best_cost = traces.iter().map(|t| t.total_cost).fold(f64::INFINITY, f64::min);
        Self {
            cycle: cycle.to_string(),
            steps: traces.first().map_or(0, |t| t.len()),
            imn_threshold,
            initial_entry: adapt.map(|a| a.initial_entry.clone()).unwrap_or_default(),
            methods: traces
                .iter()
                .map(|t| MethodSummary {
                    method: t.name.clone(),
                    total_fuel: t.total_fuel,
                    total_cost: t.total_cost,
                    final_soc: t.final_soc,
                    infeasible_steps: t.infeasible_steps,
                    fuel_increase_pct: relative_increase(t.total_fuel, best_fuel),
                    cost_increase_pct: relative_increase(t.total_cost, best_cost),
                })
                .collect(),
            update_times: adapt.map(|a| a.update_times()).unwrap_or_default(),
            imn_series: adapt.map(|a| a.windows.clone()).unwrap_or_default(),
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Wall-clock seconds per arm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub dp: f64,
    pub transfer_rl: f64,
    pub conventional_rl: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: ComparisonReport,
    /// DP, transfer RL and conventional RL, in that order.
    pub traces: Vec<PolicyTrace>,
    pub adapt: AdaptOutcome,
    pub timing: Timing,
}

impl Comparison {
    pub fn trace(&self, name: &str) -> Option<&PolicyTrace> {
        self.traces.iter().find(|t| t.name == name)
    }

    /// Plot data with the fine-tuning logs plus any extra series.
    pub fn plot_data(&self, mut convergence: Vec<(String, TrainLog)>) -> PlotData {
        convergence.extend(self.adapt.updates.iter().map(|u| (format!("update@{}", u.t), u.fine_tune.clone())));
        PlotData {
            report: self.report.clone(),
            traces: self.traces.clone(),
            convergence,
        }
    }
}

/// The library's nearest policy held fixed over the whole cycle.
fn conventional_arm(cycle: &DrivingCycle, library: &SourceLibrary, config: &ExperimentConfig) -> Result<PolicyTrace> {
    let params = &config.powertrain;
    let calls = transfer_q_calls();
    let q = library.q(nearest_entry(cycle, library, params, config.window)?);
    let env = PowertrainEnv::new(cycle, q.space(), params, params.soc_init);
    let trace = env.rollout(q, CONVENTIONAL_RL);
    assert_eq!(transfer_q_calls(), calls, "conventional arm must not transfer tables");
    Ok(trace)
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Run DP, transfer RL and conventional RL on `cycle` concurrently.
pub fn compare(cycle: &DrivingCycle, library: &SourceLibrary, config: &ExperimentConfig) -> Result<Comparison> {
    if library.is_empty() {
        return Err(Error::EmptySequence("source library is empty".into()));
    }
    config.validate_for(cycle.dt())?;
    let params = &config.powertrain;
    let adapt_cfg = config.adapt();
    let learning = config.online_learning();
    let (dp, transfer, conventional) = std::thread::scope(|scope| {
        let dp = scope.spawn(|| timed(|| dpbench::solve(cycle, params, &config.dp, params.soc_init)));
        let transfer = scope.spawn(|| timed(|| adapt_online(cycle, library, &adapt_cfg, params, &learning)));
        let conventional = scope.spawn(|| timed(|| conventional_arm(cycle, library, config)));
        (
            dp.join().expect("dp arm panicked"),
            transfer.join().expect("transfer arm panicked"),
            conventional.join().expect("conventional arm panicked"),
        )
    });
    let (dp, dp_s) = dp?;
    let (adapt, transfer_s) = transfer?;
    let (conventional, conventional_s) = conventional?;

    let mut dp_trace = dp.trace;
    dp_trace.name = DP.into();
    let mut transfer_trace = adapt.trace.clone();
    transfer_trace.name = TRANSFER_RL.into();
    let traces = vec![dp_trace, transfer_trace, conventional];
    Ok(Comparison {
        report: ComparisonReport::new(cycle.name(), config.imn_threshold, &traces, Some(&adapt)),
        traces,
        adapt,
        timing: Timing {
            dp: dp_s,
            transfer_rl: transfer_s,
            conventional_rl: conventional_s,
        },
    })
}

/// Everything [`emit_plot_data`] writes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotData {
    pub report: ComparisonReport,
    /// One per report method, same order.
    pub traces: Vec<PolicyTrace>,
    pub convergence: Vec<(String, TrainLog)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceSummary {
    name: String,
    final_soc: f64,
    total_fuel: f64,
    total_cost: f64,
    infeasible_steps: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header)?;
    for row in rows {
        wtr.write_record(&row)?;
    }
    wtr.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

fn check_method_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
        return Err(Error::InvalidParams(format!("method name {name:?} is not a directory name")));
    }
    Ok(())
}

/// Write the report, per-method traces and plot series under `outdir`.
/// Returns the written paths.
pub fn emit_plot_data(data: &PlotData, outdir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let outdir = outdir.as_ref();
    let names: Vec<&str> = data.traces.iter().map(|t| t.name.as_str()).collect();
    let methods: Vec<&str> = data.report.methods.iter().map(|m| m.method.as_str()).collect();
    if names != methods {
        return Err(Error::InvalidParams("traces must match the report methods".into()));
    }
    let mut written = Vec::new();
    let mut put = |rel: PathBuf, bytes: Vec<u8>| -> Result<()> {
        let path = outdir.join(rel);
        write_file(&path, &bytes)?;
        written.push(path);
        Ok(())
    };

    put("report.json".into(), serde_json::to_string_pretty(&data.report)?.into_bytes())?;

    for trace in &data.traces {
        check_method_name(&trace.name)?;
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        put(Path::new(&trace.name).join("trace.csv"), buf)?;
        let summary = TraceSummary {
            name: trace.name.clone(),
            final_soc: trace.final_soc,
            total_fuel: trace.total_fuel,
            total_cost: trace.total_cost,
            infeasible_steps: trace.infeasible_steps,
        };
        put(Path::new(&trace.name).join("summary.json"), serde_json::to_string_pretty(&summary)?.into_bytes())?;
    }

    let mut header = vec!["t"];
    header.extend(names.iter().copied());
    let steps = data.traces.iter().map(|t| t.len()).max().unwrap_or(0);
    let soc_rows = (0..steps).map(|k| {
        let t = data.traces.iter().find_map(|tr| tr.records.get(k)).map_or(0.0, |r| r.t);
        let mut row = vec![t.to_string()];
        row.extend(data.traces.iter().map(|tr| tr.records.get(k).map_or(String::new(), |r| r.soc.to_string())));
        row
    });
    put("soc.csv".into(), csv_bytes(&header, soc_rows)?)?;

    let imn_rows = data
        .report
        .imn_series
        .iter()
        .map(|w| vec![w.t.to_string(), w.imn.to_string(), w.updated.to_string()]);
    put("imn.csv".into(), csv_bytes(&["t", "imn", "updated"], imn_rows)?)?;

    let engine_rows = data.traces.iter().flat_map(|tr| {
        tr.records.iter().filter(|r| r.engine_torque > 0.0).map(|r| {
            vec![
                tr.name.clone(),
                r.t.to_string(),
                r.engine_speed.to_string(),
                r.engine_torque.to_string(),
                r.fuel_g.to_string(),
            ]
        })
    });
    put(
        "engine_points.csv".into(),
        csv_bytes(&["method", "t", "engine_speed", "engine_torque", "fuel_g"], engine_rows)?,
    )?;

    let conv_rows = data.convergence.iter().flat_map(|(series, log)| {
        log.sweep_cost.iter().zip(&log.mean_discrepancy).enumerate().map(move |(i, (c, d))| {
            let sweep = i + 1;
            let greedy = log.greedy_cost.iter().find(|(s, _)| *s == sweep).map_or(String::new(), |(_, g)| g.to_string());
            vec![series.clone(), sweep.to_string(), c.to_string(), d.to_string(), greedy]
        })
    });
    put(
        "q_convergence.csv".into(),
        csv_bytes(&["series", "sweep", "sweep_cost", "mean_discrepancy", "greedy_cost"], conv_rows)?,
    )?;
    Ok(written)
}

fn read_csv_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file).records().map(|r| r.map_err(Error::from)).collect()
}

fn parse<T: std::str::FromStr>(field: &str, path: &Path) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::InvalidParams(format!("{}: cannot parse {field:?}", path.display())))
}

/// Read back what [`emit_plot_data`] wrote.
pub fn load_plot_data(outdir: impl AsRef<Path>) -> Result<PlotData> {
    let outdir = outdir.as_ref();
    let report_path = outdir.join("report.json");
    let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let report: ComparisonReport = serde_json::from_str(&text)?;

    let mut traces = Vec::new();
    for m in &report.methods {
        check_method_name(&m.method)?;
        let dir = outdir.join(&m.method);
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let summary: TraceSummary = serde_json::from_str(&text)?;
        let path = dir.join("trace.csv");
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let records: Vec<StepRecord> = csv::Reader::from_reader(file).deserialize().collect::<std::result::Result<_, _>>()?;
        traces.push(PolicyTrace {
            name: summary.name,
            records,
            final_soc: summary.final_soc,
            total_fuel: summary.total_fuel,
            total_cost: summary.total_cost,
            infeasible_steps: summary.infeasible_steps,
        });
    }

    let path = outdir.join("q_convergence.csv");
    let mut convergence: Vec<(String, TrainLog)> = Vec::new();
    for row in read_csv_rows(&path)? {
        let series = row.get(0).unwrap_or_default().to_string();
        if convergence.last().is_none_or(|(s, _)| *s != series) {
            convergence.push((series, TrainLog::default()));
        }
        let log = &mut convergence.last_mut().expect("series pushed").1;
        let sweep: usize = parse(row.get(1).unwrap_or_default(), &path)?;
        log.sweep_cost.push(parse(row.get(2).unwrap_or_default(), &path)?);
        log.mean_discrepancy.push(parse(row.get(3).unwrap_or_default(), &path)?);
        let greedy = row.get(4).unwrap_or_default();
        if !greedy.is_empty() {
            log.greedy_cost.push((sweep, parse(greedy, &path)?));
        }
    }
    Ok(PlotData { report, traces, convergence })
}

pub fn write_timing(timing: &Timing, outdir: impl AsRef<Path>) -> Result<PathBuf> {
    let path = outdir.as_ref().join("timing.json");
    write_file(&path, serde_json::to_string_pretty(timing)?.as_bytes())?;
    Ok(path)
}

/// Result of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub prelearned: Prelearned,
    pub comparison: Comparison,
    pub files: Vec<PathBuf>,
}

/// Pre-learn the configured sources, compare on the stream and write all
/// outputs (library included) under `config.output`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let params = &config.powertrain;
    let stream = config
        .stream
        .as_ref()
        .ok_or_else(|| Error::Config("no stream cycle configured".into()))?
        .load(params)?;
    let cycles = config.sources.iter().map(|s| s.load(params)).collect::<Result<Vec<_>>>()?;
    let prelearned = prelearn(&cycles, params, config)?;
    let comparison = compare(&stream, &prelearned.library, config)?;
    let data = comparison.plot_data(prelearned.logs.clone());
    let mut files = emit_plot_data(&data, &config.output)?;
    files.push(write_timing(&comparison.timing, &config.output)?);
    prelearned.library.save_dir(config.output.join("library"))?;
    Ok(RunOutput {
        prelearned,
        comparison,
        files,
    })
}
