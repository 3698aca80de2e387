//! Tabular Q-learning over the powertrain, Q-table persistence, IMN-weighted
//! transfer between source tables, and the windowed online adaptation loop.

use std::cell::Cell;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cycle::DrivingCycle;
use crate::error::{Error, Result};
use crate::markov::{estimate_tpm, imn, power_request_series, QuantizerGrid, TransitionModel};
use crate::powertrain::{ActionGrid, CycleProfile, PolicyTrace, PowertrainParams};

/// Discretized RL state (SOC node, power level, speed bin) and action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StateSpace {
    pub soc_nodes: Vec<f64>,
    pub grid: QuantizerGrid,
    pub actions: ActionGrid,
}

impl Default for StateSpace {
    fn default() -> Self {
        Self {
            soc_nodes: (0..13).map(|i| f64::from(30 + 5 * i) / 100.0).collect(),
            grid: QuantizerGrid::default(),
            actions: ActionGrid::default(),
        }
    }
}

impl StateSpace {
    pub fn validate(&self) -> Result<()> {
        if self.soc_nodes.is_empty() || self.soc_nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParams("SOC nodes must be strictly increasing".into()));
        }
        if self.actions.is_empty() {
            return Err(Error::InvalidParams("action set is empty".into()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.soc_nodes.len() * self.grid.levels() * self.grid.speed_bins()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// Nearest SOC node, ties toward the lower node.
    pub fn soc_index(&self, soc: f64) -> usize {
        let nodes = &self.soc_nodes;
        let upper = nodes.partition_point(|n| *n < soc);
        if upper == 0 {
            0
        } else if upper == nodes.len() {
            nodes.len() - 1
        } else if soc - nodes[upper - 1] <= nodes[upper] - soc {
            upper - 1
        } else {
            upper
        }
    }

    pub fn state(&self, soc_index: usize, power_index: usize, speed_index: usize) -> usize {
        (soc_index * self.grid.levels() + power_index) * self.grid.speed_bins() + speed_index
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    space: StateSpace,
    values: Vec<f64>,
    /// Identifier of the cycle or transfer the table came from.
    pub source: String,
    /// Training sweeps represented by the table.
    pub iterations: u64,
}

const QTABLE_FORMAT: &str = "hevrl-qtable/1";

#[derive(Serialize, Deserialize)]
struct QTableFile {
    format: String,
    source: String,
    iterations: u64,
    space: StateSpace,
    sha256: String,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(space: StateSpace, source: impl Into<String>) -> Self {
        let n = space.n_states() * space.n_actions();
        Self {
            space,
            values: vec![0.0; n],
            source: source.into(),
            iterations: 0,
        }
    }

    pub fn from_values(space: StateSpace, values: Vec<f64>, source: impl Into<String>, iterations: u64) -> Result<Self> {
        space.validate()?;
        let n = space.n_states() * space.n_actions();
        if values.len() != n {
            return Err(Error::ShapeMismatch(format!("expected {n} values, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("Q-values must be finite".into()));
        }
        Ok(Self {
            space,
            values,
            source: source.into(),
            iterations,
        })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_states(&self) -> usize {
        self.space.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.space.n_actions()
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.n_actions() + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let a = self.n_actions();
        &self.values[state * a..(state + 1) * a]
    }

    fn min_row(&self, state: usize) -> f64 {
        self.row(state).iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Lowest-cost action, ties toward the lowest index.
    pub fn argmin(&self, state: usize) -> usize {
        let row = self.row(state);
        let mut best = 0;
        for (a, q) in row.iter().enumerate().skip(1) {
            if *q < row[best] {
                best = a;
            }
        }
        best
    }

    /// Hex SHA-256 over the little-endian bytes of the values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = QTableFile {
            format: QTABLE_FORMAT.into(),
            source: self.source.clone(),
            iterations: self.iterations,
            space: self.space.clone(),
            sha256: self.content_hash(),
            values: self.values.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: QTableFile = serde_json::from_str(text)?;
        if file.format != QTABLE_FORMAT {
            return Err(Error::Integrity(format!("unknown Q-table format {:?}", file.format)));
        }
        let q = Self::from_values(file.space, file.values, file.source, file.iterations)
            .map_err(|e| Error::Integrity(e.to_string()))?;
        if q.content_hash() != file.sha256 {
            return Err(Error::Integrity("Q-table content hash mismatch".into()));
        }
        Ok(q)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    pub discount: f64,
    /// Sweeps over the training cycle.
    pub sweeps: usize,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    pub seed: u64,
    /// Offset added to the sweep index in the learning-rate and
    /// exploration schedules.
    pub sweep_offset: usize,
    /// Log the greedy-policy cost every this many sweeps (0 disables).
    pub eval_every: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            discount: 0.96,
            sweeps: 10_000,
            epsilon_start: 0.5,
            epsilon_decay: 0.999,
            epsilon_min: 0.05,
            seed: 0,
            sweep_offset: 0,
            eval_every: 0,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::InvalidParams(format!("discount must be in (0, 1), got {}", self.discount)));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_min) {
            return Err(Error::InvalidParams("exploration rates must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn learning_rate(k: usize) -> f64 {
        1.0 / ((k + 2) as f64).sqrt()
    }

    pub fn epsilon(&self, k: usize) -> f64 {
        (self.epsilon_start * self.epsilon_decay.powi(k.min(i32::MAX as usize) as i32)).max(self.epsilon_min)
    }
}

/// One temporal-difference update; `next` is `None` on the terminal step.
/// Returns the new entry.
pub fn q_update(
    q: &mut QTable,
    state: usize,
    action: usize,
    cost: f64,
    next: Option<usize>,
    k: usize,
    config: &LearningConfig,
) -> Result<f64> {
    let (ns, na) = (q.n_states(), q.n_actions());
    if state >= ns || action >= na || next.is_some_and(|s| s >= ns) {
        return Err(Error::IndexOutOfRange(format!(
            "state {state}/{ns}, action {action}/{na}, next {next:?}"
        )));
    }
    Ok(update_entry(q, state, action, cost, next, LearningConfig::learning_rate(k), config.discount))
}

fn update_entry(q: &mut QTable, state: usize, action: usize, cost: f64, next: Option<usize>, tau: f64, discount: f64) -> f64 {
    let target = cost + next.map_or(0.0, |s| discount * q.min_row(s));
    let i = state * q.n_actions() + action;
    q.values[i] += tau * (target - q.values[i]);
    q.values[i]
}

/// A finite-horizon episode replayed once per sweep.
pub trait Environment {
    type Obs: Copy;
    fn horizon(&self) -> usize;
    fn initial(&self) -> Self::Obs;
    fn state(&self, step: usize, obs: Self::Obs) -> usize;
    /// Cost and next observation of taking `action`.
    fn step(&self, step: usize, obs: Self::Obs, action: usize) -> (f64, Self::Obs);
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Accumulated cost of each exploring sweep.
    pub sweep_cost: Vec<f64>,
    /// Mean absolute change of all table entries over each sweep.
    pub mean_discrepancy: Vec<f64>,
    /// `(sweeps completed, greedy-policy cost)` samples.
    pub greedy_cost: Vec<(usize, f64)>,
}

/// Replay `env` for `config.sweeps` sweeps with ε-greedy exploration.
pub fn learn<E, F>(env: &E, q: &mut QTable, config: &LearningConfig, mut evaluate: F) -> TrainLog
where
    E: Environment,
    F: FnMut(&QTable) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let horizon = env.horizon();
    let n_actions = q.n_actions();
    let mut snapshot = q.values.clone();
    for sweep in 0..config.sweeps {
        let k = config.sweep_offset + sweep;
        let tau = LearningConfig::learning_rate(k);
        let eps = config.epsilon(k);
        snapshot.copy_from_slice(&q.values);
        let mut obs = env.initial();
        let mut total = 0.0;
        if horizon > 0 {
            let mut state = env.state(0, obs);
            for t in 0..horizon {
                // Both draws happen every step so streams stay aligned across
                // tables.
                let u: f64 = rng.random();
                let random_action = rng.random_range(0..n_actions);
                let action = if u < eps { random_action } else { q.argmin(state) };
                let (cost, next_obs) = env.step(t, obs, action);
                let next = (t + 1 < horizon).then(|| env.state(t + 1, next_obs));
                update_entry(q, state, action, cost, next, tau, config.discount);
                total += cost;
                obs = next_obs;
                if let Some(s) = next {
                    state = s;
                }
            }
        }
        let diff: f64 = q.values.iter().zip(&snapshot).map(|(a, b)| (a - b).abs()).sum();
        log.sweep_cost.push(total);
        log.mean_discrepancy.push(diff / q.values.len().max(1) as f64);
        if config.eval_every > 0 && (sweep + 1) % config.eval_every == 0 {
            log.greedy_cost.push((sweep + 1, evaluate(q)));
        }
    }
    q.iterations += config.sweeps as u64;
    log
}

/// The powertrain replayed over a fixed cycle from a fixed initial SOC.
#[derive(Debug, Clone)]
pub struct PowertrainEnv<'a> {
    pub profile: CycleProfile,
    power_bins: Vec<usize>,
    speed_bins: Vec<usize>,
    space: &'a StateSpace,
    params: &'a PowertrainParams,
    pub soc_init: f64,
}

impl<'a> PowertrainEnv<'a> {
    pub fn new(cycle: &DrivingCycle, space: &'a StateSpace, params: &'a PowertrainParams, soc_init: f64) -> Self {
        let powers = power_request_series(cycle, &params.body);
        Self {
            profile: CycleProfile::new(cycle, params),
            power_bins: powers.iter().map(|p| space.grid.power_index(*p)).collect(),
            speed_bins: cycle.speeds().iter().map(|v| space.grid.speed_index(*v)).collect(),
            space,
            params,
            soc_init,
        }
    }

    /// Drive the cycle with the greedy policy of `q`.
    pub fn rollout(&self, q: &QTable, name: &str) -> PolicyTrace {
        crate::powertrain::simulate(name, &self.profile, self.params, self.soc_init, |k, soc| {
            self.space.actions.torque(q.argmin(self.state(k, soc)))
        })
    }
}

impl Environment for PowertrainEnv<'_> {
    type Obs = f64;

    fn horizon(&self) -> usize {
        self.profile.len()
    }

    fn initial(&self) -> f64 {
        self.soc_init
    }

    fn state(&self, step: usize, soc: f64) -> usize {
        self.space.state(self.space.soc_index(soc), self.power_bins[step], self.speed_bins[step])
    }

    fn step(&self, step: usize, soc: f64, action: usize) -> (f64, f64) {
        let out = self.profile.step(step, soc, self.space.actions.torque(action), self.params);
        (out.reward, out.soc_next)
    }
}

/// Continue training `q` on `cycle` starting from `soc_init`.
pub fn train_from(
    q: &mut QTable,
    cycle: &DrivingCycle,
    params: &PowertrainParams,
    soc_init: f64,
    config: &LearningConfig,
) -> Result<TrainLog> {
    config.validate()?;
    let space = q.space.clone();
    let env = PowertrainEnv::new(cycle, &space, params, soc_init);
    Ok(learn(&env, q, config, |table| env.rollout(table, "eval").total_cost))
}

/// Train a fresh table on `cycle`.
pub fn train(
    cycle: &DrivingCycle,
    params: &PowertrainParams,
    space: &StateSpace,
    config: &LearningConfig,
) -> Result<(QTable, TrainLog)> {
    params.validate()?;
    space.validate()?;
    let mut q = QTable::zeros(space.clone(), cycle.name());
    let log = train_from(&mut q, cycle, params, params.soc_init, config)?;
    Ok((q, log))
}

/// Per-state greedy action indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedyPolicy {
    pub actions: Vec<usize>,
}

pub fn greedy_policy(q: &QTable) -> GreedyPolicy {
    GreedyPolicy {
        actions: (0..q.n_states()).map(|s| q.argmin(s)).collect(),
    }
}

/// Source TPMs and Q-tables with aligned grids.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceLibrary {
    entries: Vec<(String, TransitionModel, QTable)>,
}

#[derive(Serialize, Deserialize)]
struct LibraryIndex {
    entries: Vec<String>,
}

impl SourceLibrary {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, tpm: TransitionModel, q: QTable) -> Result<()> {
        let id = id.into();
        if id.is_empty() || id.contains(['/', '\\']) || self.entries.iter().any(|e| e.0 == id) {
            return Err(Error::InvalidParams(format!("bad or duplicate library id {id:?}")));
        }
        if q.space.grid != *tpm.grid() {
            return Err(Error::GridMismatch);
        }
        if let Some((_, t0, q0)) = self.entries.first() {
            if t0.grid() != tpm.grid() || q0.space != q.space {
                return Err(Error::GridMismatch);
            }
        }
        self.entries.push((id, tpm, q));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tpm(&self, i: usize) -> &TransitionModel {
        &self.entries[i].1
    }

    pub fn q(&self, i: usize) -> &QTable {
        &self.entries[i].2
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.0.as_str()).collect()
    }

    /// Write `library.json` plus one `<id>.tpm.json` and `<id>.q.json` per entry.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, tpm, q) in &self.entries {
            tpm.save_json(dir.join(format!("{id}.tpm.json")))?;
            q.save_json(dir.join(format!("{id}.q.json")))?;
        }
        let index = LibraryIndex {
            entries: self.entries.iter().map(|e| e.0.clone()).collect(),
        };
        let path = dir.join("library.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("library.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: LibraryIndex = serde_json::from_str(&text)?;
        let mut lib = Self::new();
        for id in index.entries {
            let tpm = TransitionModel::load_json(dir.join(format!("{id}.tpm.json")))?;
            let q = QTable::load_json(dir.join(format!("{id}.q.json")))?;
            lib.push(id, tpm, q)?;
        }
        Ok(lib)
    }
}

impl Default for SourceLibrary {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferWeights {
    pub deltas: Vec<f64>,
    pub distances: Vec<f64>,
    pub transfer_factor: f64,
}

/// Transfer coefficients from IMN distances. A vanishing denominator (all
/// distances equal with no transfer factor) yields uniform weights.
pub fn weights_from_distances(distances: &[f64], transfer_factor: f64) -> Result<Vec<f64>> {
    let n = distances.len();
    if n == 0 {
        return Err(Error::EmptySequence("no source distances".into()));
    }
    if !(transfer_factor.is_finite() && transfer_factor >= 0.0) {
        return Err(Error::InvalidParams(format!("transfer factor must be >= 0, got {transfer_factor}")));
    }
    if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::InvalidParams("IMN distances must be finite and non-negative".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let max = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let numerators: Vec<f64> = distances.iter().map(|d| (transfer_factor + max) - d).collect();
    let denom: f64 = numerators.iter().sum();
    if denom <= 0.0 {
        return Ok(vec![1.0 / n as f64; n]);
    }
    Ok(numerators.iter().map(|x| x / denom).collect())
}

pub fn transfer_weights(library: &SourceLibrary, p_new: &TransitionModel, transfer_factor: f64) -> Result<TransferWeights> {
    if library.is_empty() {
        return Err(Error::EmptySequence("source library is empty".into()));
    }
    let distances = library
        .entries
        .iter()
        .map(|(_, tpm, _)| imn(tpm, p_new).map(|r| r.aggregate))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferWeights {
        deltas: weights_from_distances(&distances, transfer_factor)?,
        distances,
        transfer_factor,
    })
}

thread_local! {
    static TRANSFER_Q_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`transfer_q`] calls made on the current thread.
pub fn transfer_q_calls() -> usize {
    TRANSFER_Q_CALLS.with(Cell::get)
}

/// Entrywise convex combination of the library tables.
pub fn transfer_q(library: &SourceLibrary, weights: &TransferWeights) -> Result<QTable> {
    TRANSFER_Q_CALLS.with(|c| c.set(c.get() + 1));
    if library.is_empty() || weights.deltas.len() != library.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} sources",
            weights.deltas.len(),
            library.len()
        )));
    }
    let first = library.q(0);
    let mut values = vec![0.0; first.values.len()];
    let mut iterations = 0.0;
    for ((_, _, q), delta) in library.entries.iter().zip(&weights.deltas) {
        for (acc, v) in values.iter_mut().zip(&q.values) {
            *acc += delta * v;
        }
        iterations += delta * q.iterations as f64;
    }
    Ok(QTable {
        space: first.space.clone(),
        values,
        source: "transfer".into(),
        iterations: iterations.round() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub threshold: f64,
    /// Seconds between TPM comparisons.
    pub window: f64,
    pub transfer_factor: f64,
    pub fine_tune_sweeps: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            window: 1000.0,
            transfer_factor: 0.1,
            fine_tune_sweeps: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    /// Boundary time, s.
    pub t: f64,
    pub imn: f64,
    pub updated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub t: f64,
    pub imn: f64,
    pub weights: TransferWeights,
    pub fine_tune: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub trace: PolicyTrace,
    /// Library entry whose policy was active at the start.
    pub initial_entry: String,
    pub windows: Vec<WindowRecord>,
    pub updates: Vec<UpdateRecord>,
}

impl AdaptOutcome {
    pub fn update_times(&self) -> Vec<f64> {
        self.updates.iter().map(|u| u.t).collect()
    }
}

fn window_steps(stream: &DrivingCycle, window: f64) -> Result<usize> {
    let steps = (window / stream.dt()).round();
    if !(steps >= 2.0) {
        return Err(Error::InvalidParams(format!("window {window} s must span at least two samples")));
    }
    Ok(steps as usize)
}

fn window_tpm(stream: &DrivingCycle, powers: &[f64], start: usize, end: usize, grid: &QuantizerGrid) -> Result<TransitionModel> {
    let end = end.min(stream.len() - 1);
    estimate_tpm(&powers[start..=end], &stream.speeds()[start..=end], grid)
}

/// Library entry closest (aggregate IMN) to the first window of `stream`.
pub fn nearest_entry(stream: &DrivingCycle, library: &SourceLibrary, params: &PowertrainParams, window: f64) -> Result<usize> {
    if library.is_empty() {
        return Err(Error::EmptySequence("source library is empty".into()));
    }
    if stream.len() < 2 {
        return Err(Error::EmptySequence("stream needs at least two samples".into()));
    }
    let powers = power_request_series(stream, &params.body);
    let first = window_tpm(stream, &powers, 0, window_steps(stream, window)?, library.tpm(0).grid())?;
    let mut best = (0, f64::INFINITY);
    for i in 0..library.len() {
        let d = imn(library.tpm(i), &first)?.aggregate;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// Greedy control of `stream` with the transferred policy, re-deriving the
/// table whenever a window's TPM drifts beyond the threshold from the TPM
/// behind the active policy.
pub fn adapt_online(
    stream: &DrivingCycle,
    library: &SourceLibrary,
    adapt: &AdaptConfig,
    params: &PowertrainParams,
    config: &LearningConfig,
) -> Result<AdaptOutcome> {
    if !(adapt.threshold > 0.0) {
        return Err(Error::InvalidParams("IMN threshold must be positive".into()));
    }
    config.validate()?;
    let window = window_steps(stream, adapt.window)?;
    let start = nearest_entry(stream, library, params, adapt.window)?;
    let space = library.q(start).space.clone();
    let grid = space.grid.clone();
    let powers = power_request_series(stream, &params.body);
    let env = PowertrainEnv::new(stream, &space, params, params.soc_init);

    let mut active = library.q(start).clone();
    let mut reference = library.tpm(start).clone();
    let mut trace = PolicyTrace::new(format!("transfer-rl:{}", stream.name()), params.soc_init);
    let mut windows = Vec::new();
    let mut updates = Vec::new();
    let mut soc = params.soc_init;
    for k in 0..stream.len() {
        if k > 0 && k % window == 0 {
            let tpm = window_tpm(stream, &powers, k - window, k, &grid)?;
            let d = imn(&reference, &tpm)?.aggregate;
            let t = k as f64 * stream.dt();
            let fire = d > adapt.threshold;
            windows.push(WindowRecord { t, imn: d, updated: fire });
            if fire {
                let weights = transfer_weights(library, &tpm, adapt.transfer_factor)?;
                let mut q_new = transfer_q(library, &weights)?;
                q_new.source = format!("transfer@{t}");
                let segment = stream.slice(k - window, k + 1)?;
                // The blended table resumes the schedules where its sources
                // left off.
                let tune = LearningConfig {
                    sweeps: adapt.fine_tune_sweeps,
                    sweep_offset: q_new.iterations as usize,
                    eval_every: 0,
                    seed: config.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    ..*config
                };
                let log = train_from(&mut q_new, &segment, params, soc, &tune)?;
                active = q_new;
                reference = tpm;
                updates.push(UpdateRecord { t, imn: d, weights, fine_tune: log });
            }
        }
        let torque = space.actions.torque(active.argmin(env.state(k, soc)));
        let out = env.profile.step(k, soc, torque, params);
        trace.push(k as f64 * stream.dt(), env.profile.modes[k], env.profile.speeds[k], soc, &out);
        soc = out.soc_next;
    }
    Ok(AdaptOutcome {
        trace,
        initial_entry: library.id(start).to_string(),
        windows,
        updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three states in a ring; action 0 stays, action 1 advances.
    struct Ring {
        costs: [[f64; 2]; 3],
        horizon: usize,
    }

    impl Environment for Ring {
        type Obs = usize;
        fn horizon(&self) -> usize {
            self.horizon
        }
        fn initial(&self) -> usize {
            0
        }
        fn state(&self, _: usize, s: usize) -> usize {
            s
        }
        fn step(&self, _: usize, s: usize, a: usize) -> (f64, usize) {
            (self.costs[s][a], if a == 0 { s } else { (s + 1) % 3 })
        }
    }

    fn toy_space() -> StateSpace {
        StateSpace {
            soc_nodes: vec![0.5],
            grid: QuantizerGrid::new(vec![0.0, 1.0, 2.0], vec![0.0, f64::INFINITY]).unwrap(),
            actions: ActionGrid::from_torques(vec![0.0, 100.0]).unwrap(),
        }
    }

    fn value_iteration(env: &Ring, discount: f64) -> Vec<usize> {
        let mut v = [0.0f64; 3];
        for _ in 0..5000 {
            let mut next = [0.0; 3];
            for s in 0..3 {
                next[s] = (0..2)
                    .map(|a| {
                        let (c, n) = env.step(0, s, a);
                        c + discount * v[n]
                    })
                    .fold(f64::INFINITY, f64::min);
            }
            v = next;
        }
        (0..3)
            .map(|s| {
                let q: Vec<f64> = (0..2)
                    .map(|a| {
                        let (c, n) = env.step(0, s, a);
                        c + discount * v[n]
                    })
                    .collect();
                usize::from(q[1] < q[0])
            })
            .collect()
    }

    #[test]
    fn update_rule_examples() {
        let cfg = LearningConfig::default();
        let mut q = QTable::zeros(toy_space(), "t");
        let v = q_update(&mut q, 0, 1, 1.0, Some(2), 1, &cfg).unwrap();
        assert!((v - 0.577_350_269_189_625_8).abs() < 1e-12);

        let mut q = QTable::zeros(toy_space(), "t");
        q.values = vec![5.0, 7.0, 3.0, 4.0, 9.0, 9.0];
        let fixed = 0.96 * 3.0;
        q.values[0] = fixed;
        let v = q_update(&mut q, 0, 0, 0.0, Some(1), 3, &cfg).unwrap();
        assert!((v - fixed).abs() < 1e-15);

        let mut q = QTable::zeros(toy_space(), "t");
        q.values[2] = 4.0;
        let v = update_entry(&mut q, 1, 0, 10.0, None, 0.0, 0.96);
        assert_eq!(v, 4.0);
        assert!(matches!(q_update(&mut q, 3, 0, 0.0, None, 0, &cfg), Err(Error::IndexOutOfRange(_))));
        assert!(matches!(q_update(&mut q, 0, 2, 0.0, None, 0, &cfg), Err(Error::IndexOutOfRange(_))));
        assert!(matches!(q_update(&mut q, 0, 0, 0.0, Some(9), 0, &cfg), Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn toy_mdp_matches_value_iteration() {
        let env = Ring {
            costs: [[3.0, 1.0], [2.0, 4.0], [5.0, 0.5]],
            horizon: 300,
        };
        let cfg = LearningConfig {
            sweeps: 400,
            seed: 11,
            ..Default::default()
        };
        let mut q = QTable::zeros(toy_space(), "ring");
        learn(&env, &mut q, &cfg, |_| 0.0);
        assert_eq!(greedy_policy(&q).actions, value_iteration(&env, cfg.discount));
    }

    #[test]
    fn zero_sweeps_and_determinism() {
        let env = Ring {
            costs: [[1.0, 2.0], [2.0, 1.0], [0.5, 3.0]],
            horizon: 50,
        };
        let cfg = LearningConfig {
            sweeps: 0,
            ..Default::default()
        };
        let mut q = QTable::zeros(toy_space(), "t");
        let log = learn(&env, &mut q, &cfg, |_| 0.0);
        assert_eq!(q, QTable::zeros(toy_space(), "t"));
        assert!(log.sweep_cost.is_empty());

        let cfg = LearningConfig {
            sweeps: 20,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut q = QTable::zeros(toy_space(), "t");
            learn(&env, &mut q, &cfg, |_| 0.0);
            q
        };
        let (a, b) = (run(), run());
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.iterations, 20);
    }

    #[test]
    fn greedy_tie_rule_and_scaling() {
        let q = QTable::zeros(StateSpace::default(), "z");
        assert!(greedy_policy(&q).actions.iter().all(|a| *a == 0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..q.values.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q = QTable::from_values(StateSpace::default(), values.clone(), "r", 0).unwrap();
        let p = greedy_policy(&q);
        for s in [0, 17, 999] {
            let row = q.row(s);
            let m = row.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(row[p.actions[s]], m);
        }
        for c in [0.5, 3.0, 1e3] {
            let scaled = QTable::from_values(StateSpace::default(), values.iter().map(|v| v * c).collect(), "s", 0).unwrap();
            assert_eq!(greedy_policy(&scaled), p);
        }
    }

    #[test]
    fn soc_nodes_and_state_index() {
        let s = StateSpace::default();
        assert_eq!(s.soc_nodes.len(), 13);
        assert_eq!(s.soc_index(0.1), 0);
        assert_eq!(s.soc_index(0.61), 6);
        assert_eq!(s.soc_index(0.625), 6);
        assert_eq!(s.soc_index(0.63), 7);
        assert_eq!(s.soc_index(2.0), 12);
        assert_eq!(s.n_states(), 13 * 20 * 5);
        assert_eq!(s.state(12, 19, 4), s.n_states() - 1);
    }

    #[test]
    fn weight_examples() {
        let d = weights_from_distances(&[0.1, 0.3], 0.0).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
        assert_eq!(weights_from_distances(&[0.4, 0.4, 0.4], 0.0).unwrap(), vec![1.0 / 3.0; 3]);
        let d = weights_from_distances(&[0.1, 0.3], 100.0).unwrap();
        assert!((d[0] - 100.2 / 200.2).abs() < 1e-12);
        assert_eq!(weights_from_distances(&[0.7], 5.0).unwrap(), vec![1.0]);
        let flat = weights_from_distances(&[0.0, 0.5, 1.0, 1.5], 1e6).unwrap();
        assert!(flat.iter().all(|x| (x - 0.25).abs() < 1e-4));
        assert!(weights_from_distances(&[], 0.0).is_err());
        assert!(weights_from_distances(&[0.1], -1.0).is_err());
    }

    #[test]
    fn transfer_q_examples() {
        let space = toy_space();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let tpm = estimate_tpm(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0], &space.grid).unwrap();
        let mut lib = SourceLibrary::new();
        lib.push("a", tpm.clone(), QTable::from_values(space.clone(), a.clone(), "a", 10).unwrap()).unwrap();
        lib.push("b", tpm.clone(), QTable::from_values(space.clone(), neg, "b", 30).unwrap()).unwrap();
        let w = |d: Vec<f64>| TransferWeights {
            deltas: d,
            distances: vec![0.0, 0.0],
            transfer_factor: 0.0,
        };
        let before = transfer_q_calls();
        assert_eq!(transfer_q(&lib, &w(vec![1.0, 0.0])).unwrap().values, a);
        let zero = transfer_q(&lib, &w(vec![0.5, 0.5])).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        assert_eq!(zero.iterations, 20);
        assert!(transfer_q(&lib, &w(vec![1.0])).is_err());
        assert_eq!(transfer_q_calls(), before + 3);
        assert!(lib.push("a", tpm, QTable::zeros(space, "x")).is_err());
    }

    #[test]
    fn q_table_json_round_trip_and_tamper() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let space = StateSpace::default();
        let n = space.n_states() * space.n_actions();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1e6..1e6)).collect();
        let q = QTable::from_values(space, values, "x", 42).unwrap();
        let text = q.to_json_string().unwrap();
        let back = QTable::from_json_str(&text).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.content_hash(), q.content_hash());
        let hash = q.content_hash();
        let tampered = text.replace(&hash, &"0".repeat(64));
        assert!(matches!(QTable::from_json_str(&tampered), Err(Error::Integrity(_))));
    }
}
