use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hevrl::agent::{adapt_online, nearest_entry, train, transfer_q, transfer_weights, PowertrainEnv};
use hevrl::cycle::{classify_modes, mtf_components};
use hevrl::harness::synth::{generate, Recipe};
use hevrl::harness::{compare, emit_plot_data, prelearn, run, write_timing, ExperimentConfig, DP};
use hevrl::markov::{cycle_tpm, imn};
use hevrl::transform::transform_cycle;
use hevrl::{dpbench, DrivingCycle, Mode, QTable, SourceLibrary, TransformOptions, TransformTargets, TransitionModel};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hevrl", version, about = "Adaptive energy management for a parallel hybrid powertrain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (.toml or .json) supplying model, grids and learning settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory; stdout for single documents when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cycle as CSV.
    GenCycle {
        #[arg(long)]
        recipe: Recipe,
        /// Seconds.
        #[arg(long, default_value_t = 1000)]
        duration: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Mode partition summary and MTF components of a cycle.
    Mtf {
        #[arg(long)]
        cycle: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reshape a cycle to target MTF components. Unset targets keep the cycle's own.
    Transform {
        #[arg(long)]
        cycle: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the transition probability matrix of a cycle.
    Tpm {
        #[arg(long)]
        cycle: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Induced matrix norm between two TPMs (TPM JSON or cycle CSV).
    Imn {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a Q-table on a cycle.
    Train {
        #[arg(long)]
        cycle: PathBuf,
        #[arg(long)]
        sweeps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Build a source library from cycles (or the config's sources).
    Prelearn {
        #[arg(long = "cycle")]
        cycles: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Blend a library into a Q-table for a new cycle.
    Transfer {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        cycle: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Globally optimal benchmark on a known cycle.
    Dp {
        #[arg(long)]
        cycle: PathBuf,
        /// Trace CSV; defaults next to the solution file.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Drive a cycle with online policy transfer.
    Adapt {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        cycle: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// DP, transfer RL and conventional RL on one cycle. Without --library the
    /// config's sources are pre-learned first.
    Compare {
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long)]
        cycle: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// A run that completed but violated a numerical constraint or check.
#[derive(Debug)]
struct ConstraintFailure(String);

impl fmt::Display for ConstraintFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConstraintFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConstraintFailure>().is_some() {
        return 2;
    }
    match err.downcast_ref::<hevrl::Error>() {
        Some(
            hevrl::Error::ZeroDistance
            | hevrl::Error::InvalidTargets(_)
            | hevrl::Error::NoFeasiblePath
            | hevrl::Error::OutOfEnvelope { .. }
            | hevrl::Error::InfeasiblePower(_)
            | hevrl::Error::PowerLimit(_)
            | hevrl::Error::CurrentLimit(_)
            | hevrl::Error::SocLimit(_),
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    /// Write `text` to `--out`, or stdout.
    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => write_file(path, text.as_bytes()),
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(text.as_bytes())?;
                Ok(())
            }
        }
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn load_cycle(path: &Path) -> Result<DrivingCycle> {
    DrivingCycle::load_csv(path).with_context(|| format!("loading cycle {}", path.display()))
}

fn load_library(path: &Path) -> Result<SourceLibrary> {
    SourceLibrary::load_dir(path).with_context(|| format!("loading library {}", path.display()))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenCycle { recipe, duration, common } => {
            let cfg = common.experiment()?;
            let cycle = generate(recipe, duration, common.seed.unwrap_or(1), &cfg.powertrain)?;
            let mut buf = Vec::new();
            cycle.write_csv(&mut buf)?;
            common.emit(std::str::from_utf8(&buf)?)
        }
        Command::Mtf { cycle, common } => mtf(&load_cycle(&cycle)?, &common),
        Command::Transform {
            cycle,
            alpha,
            beta,
            gamma,
            report,
            common,
        } => transform(&load_cycle(&cycle)?, [alpha, beta, gamma], report.as_deref(), &common),
        Command::Tpm { cycle, common } => {
            let cfg = common.experiment()?;
            let tpm = cycle_tpm(&load_cycle(&cycle)?, &cfg.powertrain.body, &cfg.space.grid)?;
            common.emit(&tpm.to_json_string()?)
        }
        Command::Imn { a, b, common } => {
            let cfg = common.experiment()?;
            let (a, b) = (tpm_input(&a, &cfg)?, tpm_input(&b, &cfg)?);
            common.emit(&json(&imn(&a, &b)?)?)
        }
        Command::Train { cycle, sweeps, common } => train_cmd(&load_cycle(&cycle)?, sweeps, &common),
        Command::Prelearn { cycles, common } => prelearn_cmd(&cycles, &common),
        Command::Transfer { library, cycle, common } => transfer(&load_library(&library)?, &load_cycle(&cycle)?, &common),
        Command::Dp { cycle, trace, common } => dp(&load_cycle(&cycle)?, trace, &common),
        Command::Adapt { library, cycle, common } => adapt(&load_library(&library)?, &load_cycle(&cycle)?, &common),
        Command::Compare { library, cycle, common } => compare_cmd(library.as_deref(), cycle.as_deref(), &common),
    }
}

#[derive(Serialize)]
struct MtfSummary {
    cycle: String,
    steps: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    distance: f64,
    traction: usize,
    coasting: usize,
    braking: usize,
    idle: usize,
}

fn mtf(cycle: &DrivingCycle, common: &Common) -> Result<()> {
    let cfg = common.experiment()?;
    let partition = classify_modes(cycle, &cfg.powertrain.body);
    let m = mtf_components(cycle, &partition)?;
    common.emit(&json(&MtfSummary {
        cycle: cycle.name().to_string(),
        steps: cycle.len(),
        alpha: m.alpha,
        beta: m.beta,
        gamma: m.gamma,
        distance: m.distance,
        traction: partition.count(Mode::Traction),
        coasting: partition.count(Mode::Coasting),
        braking: partition.count(Mode::Braking),
        idle: partition.count(Mode::Idle),
    })?)
}

fn transform(cycle: &DrivingCycle, targets: [Option<f64>; 3], report: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = common.experiment()?;
    let body = &cfg.powertrain.body;
    let own = mtf_components(cycle, &classify_modes(cycle, body))?;
    let targets = TransformTargets::new(
        targets[0].unwrap_or(own.alpha),
        targets[1].unwrap_or(own.beta),
        targets[2].unwrap_or(own.gamma),
    )?;
    let res = transform_cycle(cycle, body, &targets, &TransformOptions::default())?;
    let mut buf = Vec::new();
    res.transformed.write_csv(&mut buf)?;
    common.emit(std::str::from_utf8(&buf)?)?;
    let summary = res.report(cycle, body, &targets)?;
    match report {
        Some(path) => write_file(path, json(&summary)?.as_bytes())?,
        None => eprint!("{}", json(&summary)?),
    }
    if !res.converged {
        bail!(ConstraintFailure(format!(
            "transformation did not converge after {} iterations (residuals {:?})",
            res.iterations, res.residuals
        )));
    }
    Ok(())
}

/// A TPM from its JSON file, or estimated from a cycle CSV.
fn tpm_input(path: &Path, cfg: &ExperimentConfig) -> Result<TransitionModel> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        Ok(cycle_tpm(&load_cycle(path)?, &cfg.powertrain.body, &cfg.space.grid)?)
    } else {
        TransitionModel::load_json(path).with_context(|| format!("loading TPM {}", path.display()))
    }
}

#[derive(Serialize)]
struct PolicySummary {
    source: String,
    iterations: u64,
    total_fuel: f64,
    total_cost: f64,
    final_soc: f64,
}

fn policy_summary(cycle: &DrivingCycle, q: &QTable, cfg: &ExperimentConfig) -> PolicySummary {
    let params = &cfg.powertrain;
    let trace = PowertrainEnv::new(cycle, q.space(), params, params.soc_init).rollout(q, "greedy");
    PolicySummary {
        source: q.source.clone(),
        iterations: q.iterations,
        total_fuel: trace.total_fuel,
        total_cost: trace.total_cost,
        final_soc: trace.final_soc,
    }
}

fn train_cmd(cycle: &DrivingCycle, sweeps: Option<usize>, common: &Common) -> Result<()> {
    let cfg = common.experiment()?;
    let mut learning = cfg.online_learning();
    if let Some(sweeps) = sweeps {
        learning.sweeps = sweeps;
    }
    let (q, _) = train(cycle, &cfg.powertrain, &cfg.space, &learning)?;
    let path = common.out_or("qtable.json");
    q.save_json(&path).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", json(&policy_summary(cycle, &q, &cfg))?);
    Ok(())
}

fn prelearn_cmd(paths: &[PathBuf], common: &Common) -> Result<()> {
    let cfg = common.experiment()?;
    let cycles = if paths.is_empty() {
        cfg.sources
            .iter()
            .map(|s| s.load(&cfg.powertrain))
            .collect::<hevrl::Result<Vec<_>>>()?
    } else {
        paths.iter().map(|p| load_cycle(p)).collect::<Result<Vec<_>>>()?
    };
    if cycles.is_empty() {
        bail!("no cycles given (use --cycle or a config with sources)");
    }
    let pre = prelearn(&cycles, &cfg.powertrain, &cfg)?;
    let dir = common.out_or("library");
    pre.library.save_dir(&dir)?;
    for id in pre.library.ids() {
        println!("{id}");
    }
    Ok(())
}

#[derive(Serialize)]
struct TransferSummary<'a> {
    entries: Vec<&'a str>,
    deltas: &'a [f64],
    distances: &'a [f64],
    transfer_factor: f64,
}

fn transfer(library: &SourceLibrary, cycle: &DrivingCycle, common: &Common) -> Result<()> {
    let cfg = common.experiment()?;
    if library.is_empty() {
        bail!("library is empty");
    }
    let tpm = cycle_tpm(cycle, &cfg.powertrain.body, library.tpm(0).grid())?;
    let weights = transfer_weights(library, &tpm, cfg.transfer_factor)?;
    let q = transfer_q(library, &weights)?;
    let path = common.out_or("transferred.q.json");
    q.save_json(&path).with_context(|| format!("writing {}", path.display()))?;
    print!(
        "{}",
        json(&TransferSummary {
            entries: library.ids(),
            deltas: &weights.deltas,
            distances: &weights.distances,
            transfer_factor: weights.transfer_factor,
        })?
    );
    Ok(())
}

#[derive(Serialize)]
struct DpSummary {
    cycle: String,
    stages: usize,
    soc_nodes: Vec<f64>,
    /// Optimal cost-to-go from every node at the first stage.
    initial_values: Vec<f64>,
    total_fuel: f64,
    total_cost: f64,
    final_soc: f64,
    infeasible_steps: usize,
}

fn dp(cycle: &DrivingCycle, trace: Option<PathBuf>, common: &Common) -> Result<()> {
    let cfg = common.experiment()?;
    let params = &cfg.powertrain;
    let sol = dpbench::solve(cycle, params, &cfg.dp, params.soc_init)?;
    let nodes = sol.soc_nodes.len();
    let summary = DpSummary {
        cycle: cycle.name().to_string(),
        stages: sol.stages,
        soc_nodes: sol.soc_nodes.clone(),
        initial_values: (0..nodes).map(|i| sol.value_at(0, i)).collect(),
        total_fuel: sol.total_fuel,
        total_cost: sol.total_cost,
        final_soc: sol.trace.final_soc,
        infeasible_steps: sol.trace.infeasible_steps,
    };
    let out = common.out_or("solution.json");
    write_file(&out, json(&summary)?.as_bytes())?;
    let trace_path = trace.unwrap_or_else(|| out.with_extension("trace.csv"));
    let mut buf = Vec::new();
    sol.trace.write_csv(&mut buf)?;
    write_file(&trace_path, &buf)
}

#[derive(Serialize)]
struct AdaptSummary<'a> {
    cycle: &'a str,
    initial_entry: &'a str,
    total_fuel: f64,
    total_cost: f64,
    final_soc: f64,
    update_times: Vec<f64>,
    windows: &'a [hevrl::agent::WindowRecord],
    weights: Vec<&'a [f64]>,
}

fn adapt(library: &SourceLibrary, cycle: &DrivingCycle, common: &Common) -> Result<()> {
    let cfg = common.experiment()?;
    cfg.validate_for(cycle.dt())?;
    let outcome = adapt_online(cycle, library, &cfg.adapt(), &cfg.powertrain, &cfg.online_learning())?;
    let dir = common.out_or("adapt");
    let mut buf = Vec::new();
    outcome.trace.write_csv(&mut buf)?;
    write_file(&dir.join("trace.csv"), &buf)?;
    let summary = AdaptSummary {
        cycle: cycle.name(),
        initial_entry: &outcome.initial_entry,
        total_fuel: outcome.trace.total_fuel,
        total_cost: outcome.trace.total_cost,
        final_soc: outcome.trace.final_soc,
        update_times: outcome.update_times(),
        windows: &outcome.windows,
        weights: outcome.updates.iter().map(|u| u.weights.deltas.as_slice()).collect(),
    };
    let text = json(&summary)?;
    write_file(&dir.join("adapt.json"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn compare_cmd(library: Option<&Path>, cycle: Option<&Path>, common: &Common) -> Result<()> {
    let mut cfg = common.experiment()?;
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    let report = match library {
        Some(lib) => {
            let library = load_library(lib)?;
            let stream = match (cycle, &cfg.stream) {
                (Some(path), _) => load_cycle(path)?,
                (None, Some(source)) => source.load(&cfg.powertrain)?,
                (None, None) => bail!("no cycle given (use --cycle or a config with a stream)"),
            };
            cfg.validate_for(stream.dt())?;
            // Sanity check that the library matches the configured grids.
            nearest_entry(&stream, &library, &cfg.powertrain, cfg.window)?;
            let cmp = compare(&stream, &library, &cfg)?;
            emit_plot_data(&cmp.plot_data(Vec::new()), &cfg.output)?;
            write_timing(&cmp.timing, &cfg.output)?;
            cmp.report
        }
        None => {
            if let Some(path) = cycle {
                cfg.stream = Some(hevrl::harness::CycleSource::Csv(path.to_path_buf()));
            }
            if cfg.sources.is_empty() {
                bail!("no library given and the config lists no sources");
            }
            run(&cfg)?.comparison.report
        }
    };
    println!("{:<16} {:>12} {:>12} {:>8} {:>8}", "method", "fuel [g]", "cost", "fuel +%", "cost +%");
    for m in &report.methods {
        println!(
            "{:<16} {:>12.1} {:>12.1} {:>8.2} {:>8.2}",
            m.method, m.total_fuel, m.total_cost, m.fuel_increase_pct, m.cost_increase_pct
        );
    }
    println!("updates at {:?} s; outputs in {}", report.update_times, cfg.output.display());
    let dp_cost = report.method(DP).map(|m| m.total_cost);
    if let Some(dp_cost) = dp_cost {
        if let Some(m) = report.methods.iter().find(|m| m.total_cost < dp_cost * (1.0 - 1e-9)) {
            bail!(ConstraintFailure(format!("{} undercuts the DP benchmark", m.method)));
        }
    }
    Ok(())
}
