//! Deterministic dynamic programming over a SOC grid: the optimality
//! yardstick for the learned controllers on a fully known cycle.

use serde::{Deserialize, Serialize};

use crate::cycle::DrivingCycle;
use crate::error::{Error, Result};
use crate::powertrain::{ActionGrid, CycleProfile, PolicyTrace, PowertrainParams, StepOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpOptions {
    pub soc_nodes: Vec<f64>,
    pub actions: ActionGrid,
    pub interpolation: Interpolation,
}

impl Default for DpOptions {
    fn default() -> Self {
        Self::uniform(0.3, 0.9, 121)
    }
}

impl DpOptions {
    pub fn uniform(lo: f64, hi: f64, nodes: usize) -> Self {
        assert!(nodes >= 2);
        let step = (hi - lo) / (nodes - 1) as f64;
        Self {
            soc_nodes: (0..nodes).map(|i| if i + 1 == nodes { hi } else { lo + step * i as f64 }).collect(),
            actions: ActionGrid::default(),
            interpolation: Interpolation::Linear,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.soc_nodes.is_empty() || self.soc_nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParams("DP SOC nodes must be nonempty and increasing".into()));
        }
        if self.actions.is_empty() {
            return Err(Error::InvalidParams("DP action grid is empty".into()));
        }
        Ok(())
    }
}

/// Cost-to-go lookup between grid nodes; flat beyond the ends.
pub fn interpolate(nodes: &[f64], values: &[f64], soc: f64, mode: Interpolation) -> f64 {
    let n = nodes.len();
    if soc <= nodes[0] {
        return values[0];
    }
    if soc >= nodes[n - 1] {
        return values[n - 1];
    }
    let hi = nodes.partition_point(|x| *x < soc);
    if nodes[hi] == soc {
        return values[hi];
    }
    let lo = hi - 1;
    match mode {
        Interpolation::Nearest => {
            if soc - nodes[lo] <= nodes[hi] - soc {
                values[lo]
            } else {
                values[hi]
            }
        }
        Interpolation::Linear => {
            let w = (soc - nodes[lo]) / (nodes[hi] - nodes[lo]);
            values[lo] + w * (values[hi] - values[lo])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSolution {
    pub soc_nodes: Vec<f64>,
    pub stages: usize,
    /// Row-major `(stages + 1) × nodes` cost-to-go.
    pub value: Vec<f64>,
    /// Row-major `stages × nodes` optimal action indices.
    pub policy: Vec<usize>,
    pub trace: PolicyTrace,
    pub total_fuel: f64,
    pub total_cost: f64,
}

impl DpSolution {
    pub fn value_at(&self, stage: usize, node: usize) -> f64 {
        self.value[stage * self.soc_nodes.len() + node]
    }

    pub fn action_at(&self, stage: usize, node: usize) -> usize {
        self.policy[stage * self.soc_nodes.len() + node]
    }
}

/// Backward induction for `stages` steps. `stage(k, soc, action)` evaluates
/// one transition. Returns the value and policy tables.
pub fn backward<F>(stages: usize, nodes: &[f64], n_actions: usize, interpolation: Interpolation, stage: F) -> (Vec<f64>, Vec<usize>)
where
    F: Fn(usize, f64, usize) -> StepOutcome,
{
    let n = nodes.len();
    let mut value = vec![0.0; (stages + 1) * n];
    let mut policy = vec![0; stages * n];
    for k in (0..stages).rev() {
        let (head, tail) = value.split_at_mut((k + 1) * n);
        let next = &tail[..n];
        let row = &mut head[k * n..];
        for (i, soc) in nodes.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for a in 0..n_actions {
                let out = stage(k, *soc, a);
                let total = out.reward + interpolate(nodes, next, out.soc_next, interpolation);
                if total < best.1 {
                    best = (a, total);
                }
            }
            row[i] = best.1;
            policy[k * n + i] = best.0;
        }
    }
    (value, policy)
}

/// Globally optimal torque schedule for `cycle` from `soc_init`.
pub fn solve(cycle: &DrivingCycle, params: &PowertrainParams, opts: &DpOptions, soc_init: f64) -> Result<DpSolution> {
    params.validate()?;
    opts.validate()?;
    let b = &params.battery;
    if !(b.soc_min..=b.soc_max).contains(&soc_init) {
        return Err(Error::InvalidParams(format!("initial SOC {soc_init} outside battery window")));
    }
    let profile = CycleProfile::new(cycle, params);
    solve_profile(&profile, params, opts, soc_init)
}

pub fn solve_profile(profile: &CycleProfile, params: &PowertrainParams, opts: &DpOptions, soc_init: f64) -> Result<DpSolution> {
    let stages = profile.len();
    let nodes = &opts.soc_nodes;
    let torques = opts.actions.torques();
    let stage = |k: usize, soc: f64, a: usize| profile.step(k, soc, torques[a], params);
    let (value, policy) = backward(stages, nodes, torques.len(), opts.interpolation, stage);

    let n = nodes.len();
    let mut trace = PolicyTrace::new("dp", soc_init);
    let mut soc = soc_init;
    for k in 0..stages {
        let next = &value[(k + 1) * n..(k + 2) * n];
        let mut best: Option<(f64, StepOutcome)> = None;
        let mut any_feasible = false;
        for a in 0..torques.len() {
            let out = stage(k, soc, a);
            any_feasible |= out.feasible;
            let total = out.reward + interpolate(nodes, next, out.soc_next, opts.interpolation);
            if best.as_ref().is_none_or(|(v, _)| total < *v) {
                best = Some((total, out));
            }
        }
        if k == 0 && !any_feasible {
            return Err(Error::NoFeasiblePath);
        }
        let (_, out) = best.expect("action grid is nonempty");
        trace.push(k as f64 * profile.dt, profile.modes[k], profile.speeds[k], soc, &out);
        soc = out.soc_next;
    }
    Ok(DpSolution {
        soc_nodes: nodes.clone(),
        stages,
        total_fuel: trace.total_fuel,
        total_cost: trace.total_cost,
        value,
        policy,
        trace,
    })
}
