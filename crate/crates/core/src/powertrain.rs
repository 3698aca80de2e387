//! Quasi-static parallel hybrid powertrain: gear schedule, engine fuel rate,
//! internal-resistance battery, the power split for a commanded engine
//! torque, and the per-step cost used by both the learner and DP.
//!
//! Efficiencies follow the direction of power flow. The transmission delivers
//! `eta_t * P` to the wheels and returns `eta_t * |P|` to the shaft when the
//! wheels drive it. The motor draws `P_m / eta_mot` from the battery when
//! motoring and returns `eta_mot * |P_m|` when generating. Traction with a
//! discharging battery reduces to `P_req = P_e * eta_t + P_bat * eta_mot * eta_t`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cycle::{classify_modes, DrivingCycle, Mode, VehicleBodyParams};
use crate::error::{Error, Result};

const RPM: f64 = std::f64::consts::PI / 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineParams {
    /// N·m
    pub max_torque: f64,
    /// W
    pub rated_power: f64,
    /// rad/s, lowest clutched operating speed
    pub min_speed: f64,
    /// rad/s
    pub max_speed: f64,
    /// Willans indicated efficiency.
    pub indicated_efficiency: f64,
    /// Lower heating value, J/g.
    pub lower_heating_value: f64,
    /// Friction power per unit speed, W·s/rad.
    pub friction_coeff: f64,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            max_torque: 900.0,
            rated_power: 155_000.0,
            min_speed: 350.0 * RPM,
            max_speed: 2200.0 * RPM,
            indicated_efficiency: 0.40,
            lower_heating_value: 42_500.0,
            friction_coeff: 800.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotorParams {
    pub max_torque: f64,
    pub max_power: f64,
    /// rad/s
    pub max_speed: f64,
}

impl Default for MotorParams {
    fn default() -> Self {
        Self {
            max_torque: 600.0,
            max_power: 90_000.0,
            max_speed: 2400.0 * RPM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatteryParams {
    pub capacity_ah: f64,
    pub open_circuit_voltage: f64,
    pub internal_resistance: f64,
    /// Most negative (charging) terminal power, W.
    pub power_min: f64,
    pub power_max: f64,
    pub current_min: f64,
    pub current_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            capacity_ah: 60.0,
            open_circuit_voltage: 312.5,
            internal_resistance: 0.1,
            power_min: -60_000.0,
            power_max: 90_000.0,
            current_min: -200.0,
            current_max: 200.0,
            soc_min: 0.3,
            soc_max: 0.9,
        }
    }
}

impl BatteryParams {
    pub fn capacity_coulombs(&self) -> f64 {
        self.capacity_ah * 3600.0
    }

    /// Terminal power at current `i`.
    fn power_at_current(&self, i: f64) -> f64 {
        self.open_circuit_voltage * i - self.internal_resistance * i * i
    }

    /// Current drawn for terminal power `p`, if the discriminant allows it.
    pub fn current(&self, p: f64) -> Option<f64> {
        let (v, r) = (self.open_circuit_voltage, self.internal_resistance);
        let disc = v * v - 4.0 * r * p;
        (disc >= 0.0).then(|| (v - disc.sqrt()) / (2.0 * r))
    }

    /// Admissible terminal power range at `soc` over `dt` seconds.
    pub fn power_window(&self, soc: f64, dt: f64) -> (f64, f64) {
        let q = self.capacity_coulombs();
        let i_hi = self.current_max.min((soc - self.soc_min).max(0.0) * q / dt);
        let i_lo = self.current_min.max((soc - self.soc_max).min(0.0) * q / dt);
        let peak = self.open_circuit_voltage / (2.0 * self.internal_resistance);
        let hi = self.power_max.min(self.power_at_current(i_hi.min(peak)));
        let lo = self.power_min.max(self.power_at_current(i_lo));
        (lo.min(0.0), hi.max(0.0))
    }
}

/// Stepped ratios selected by vehicle speed; the engine is declutched below
/// `launch_speed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GearSchedule {
    pub ratios: Vec<f64>,
    /// Speeds (m/s) at which the next ratio engages; one fewer than `ratios`.
    pub upshift_speeds: Vec<f64>,
    pub launch_speed: f64,
}

impl Default for GearSchedule {
    fn default() -> Self {
        Self {
            ratios: vec![10.0, 6.0, 4.0, 2.8],
            upshift_speeds: vec![4.0, 9.0, 15.0],
            launch_speed: 2.0,
        }
    }
}

impl GearSchedule {
    pub fn ratio(&self, v: f64) -> f64 {
        let gear = self.upshift_speeds.iter().filter(|s| v >= **s).count();
        self.ratios[gear.min(self.ratios.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowertrainParams {
    pub body: VehicleBodyParams,
    pub eta_transmission: f64,
    pub eta_motor: f64,
    pub engine: EngineParams,
    pub motor: MotorParams,
    pub battery: BatteryParams,
    pub gears: GearSchedule,
    /// Charge-sustenance weight.
    pub sigma: f64,
    pub soc_ref: f64,
    pub soc_init: f64,
    /// Cost added to a step whose power balance violates a limit.
    pub infeasible_penalty: f64,
}

impl Default for PowertrainParams {
    fn default() -> Self {
        Self {
            body: VehicleBodyParams::default(),
            eta_transmission: 0.9,
            eta_motor: 0.95,
            engine: EngineParams::default(),
            motor: MotorParams::default(),
            battery: BatteryParams::default(),
            gears: GearSchedule::default(),
            sigma: 10_000.0,
            soc_ref: 0.6,
            soc_init: 0.70,
            infeasible_penalty: 1e6,
        }
    }
}

impl PowertrainParams {
    pub fn validate(&self) -> Result<()> {
        self.body.validate()?;
        for (name, eta) in [("eta_transmission", self.eta_transmission), ("eta_motor", self.eta_motor)] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::InvalidParams(format!("{name} must be in (0, 1], got {eta}")));
            }
        }
        let b = &self.battery;
        if !(b.soc_min < b.soc_max && b.power_min < b.power_max && b.current_min < b.current_max) {
            return Err(Error::InvalidParams("battery bounds must be ordered".into()));
        }
        if !(b.soc_min..=b.soc_max).contains(&self.soc_init) {
            return Err(Error::InvalidParams(format!("initial SOC {} outside bounds", self.soc_init)));
        }
        let g = &self.gears;
        if g.ratios.is_empty() || g.upshift_speeds.len() + 1 != g.ratios.len() {
            return Err(Error::InvalidParams("need one upshift speed fewer than ratios".into()));
        }
        if self.engine.min_speed >= self.engine.max_speed {
            return Err(Error::InvalidParams("engine speed range must be ordered".into()));
        }
        Ok(())
    }

    /// Parse a TOML or JSON document; missing fields take the defaults.
    pub fn from_config_str(text: &str, is_json: bool) -> Result<Self> {
        let params: Self = if is_json {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        Self::from_config_str(&text, is_json)
    }
}

/// Engine speed for a given ratio, rad/s.
pub fn engine_speed_at_ratio(v: f64, ratio: f64, tire_radius: f64) -> f64 {
    v * ratio / tire_radius
}

/// Gearbox input shaft speed, rad/s. The motor always turns with it.
pub fn shaft_speed(v: f64, params: &PowertrainParams) -> f64 {
    if v <= 0.0 {
        0.0
    } else {
        engine_speed_at_ratio(v, params.gears.ratio(v), params.body.tire_radius)
    }
}

/// Engine speed, rad/s; zero while declutched below the launch speed.
pub fn engine_speed(v: f64, params: &PowertrainParams) -> f64 {
    if v < params.gears.launch_speed {
        0.0
    } else {
        shaft_speed(v, params)
    }
}

/// Willans-line fuel rate, g/s. The engine is off (no fuel) at zero torque or
/// zero speed.
pub fn fuel_rate(torque: f64, speed: f64, params: &PowertrainParams) -> Result<f64> {
    let e = &params.engine;
    if torque < 0.0 || torque > e.max_torque || speed < 0.0 {
        return Err(Error::OutOfEnvelope { torque, speed });
    }
    if torque == 0.0 || speed == 0.0 {
        return Ok(0.0);
    }
    if torque * speed > e.rated_power * (1.0 + 1e-12) || speed > e.max_speed {
        return Err(Error::OutOfEnvelope { torque, speed });
    }
    Ok((e.friction_coeff * speed + torque * speed / e.indicated_efficiency) / e.lower_heating_value)
}

/// SOC after drawing terminal power `p_bat` for `dt` seconds.
pub fn battery_step(p_bat: f64, soc: f64, dt: f64, params: &PowertrainParams) -> Result<f64> {
    let b = &params.battery;
    if p_bat < b.power_min || p_bat > b.power_max {
        return Err(Error::PowerLimit(p_bat));
    }
    let current = b.current(p_bat).ok_or(Error::InfeasiblePower(p_bat))?;
    if current < b.current_min || current > b.current_max {
        return Err(Error::CurrentLimit(current));
    }
    let next = soc - current * dt / b.capacity_coulombs();
    if next < b.soc_min - 1e-12 || next > b.soc_max + 1e-12 {
        return Err(Error::SocLimit(next));
    }
    Ok(next.clamp(b.soc_min, b.soc_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub soc: f64,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub p_req: f64,
    /// Torque actually produced after the rated-power cap, N·m.
    pub engine_torque: f64,
    pub engine_speed: f64,
    pub p_engine: f64,
    /// Motor shaft power, positive when motoring.
    pub p_motor: f64,
    pub p_battery: f64,
    /// Power dissipated by the friction brakes, ≥ 0.
    pub p_brake_friction: f64,
    pub fuel_g: f64,
    pub soc_next: f64,
    pub reward: f64,
    pub feasible: bool,
    /// Wheel power the powertrain failed to supply, W.
    pub deficit: f64,
}

impl StepOutcome {
    /// Wheel power actually delivered by engine, motor and brakes.
    pub fn delivered_power(&self, params: &PowertrainParams) -> f64 {
        to_wheel(self.p_engine + self.p_motor, params.eta_transmission) - self.p_brake_friction
    }

    pub fn violation(&self) -> Option<String> {
        (!self.feasible).then(|| format!("traction deficit of {:.1} W", self.deficit))
    }
}

fn to_wheel(shaft: f64, eta: f64) -> f64 {
    if shaft >= 0.0 {
        shaft * eta
    } else {
        shaft / eta
    }
}

/// Charge-sustenance penalty on the SOC reached by a step.
pub fn soc_penalty(soc: f64, params: &PowertrainParams) -> f64 {
    let delta = if soc < params.soc_ref { soc - params.soc_ref } else { 0.0 };
    params.sigma * delta * delta
}

/// One quasi-static step at speed `v` with acceleration `accel` and
/// commanded engine torque `torque`.
pub fn step_with_accel(
    soc: f64,
    torque: f64,
    v: f64,
    accel: f64,
    dt: f64,
    params: &PowertrainParams,
) -> StepOutcome {
    let eta_t = params.eta_transmission;
    let eta_m = params.eta_motor;
    let p_req = params.body.force(v, accel) * v;

    let w_e = engine_speed(v, params);
    let w_m = shaft_speed(v, params);
    let engine = &params.engine;
    let engine_torque = if w_e > 0.0 && torque > 0.0 {
        torque.min(engine.max_torque).min(engine.rated_power / w_e)
    } else {
        0.0
    };
    let p_engine = engine_torque * w_e;
    let fuel_g = fuel_rate(engine_torque, w_e, params).unwrap_or(0.0) * dt;

    let motor_cap = if w_m > 0.0 && w_m <= params.motor.max_speed {
        params.motor.max_power.min(params.motor.max_torque * w_m)
    } else {
        0.0
    };
    let (bat_lo, bat_hi) = params.battery.power_window(soc, dt);
    let motor_hi = motor_cap.min(bat_hi * eta_m);
    let motor_lo = (-motor_cap).max(bat_lo / eta_m);

    let shaft_demand = if p_req >= 0.0 { p_req / eta_t } else { p_req * eta_t };
    let wanted = shaft_demand - p_engine;
    let p_motor = wanted.clamp(motor_lo, motor_hi);
    let delivered = to_wheel(p_engine + p_motor, eta_t);
    let (p_brake_friction, deficit) = if delivered >= p_req {
        (delivered - p_req, 0.0)
    } else {
        (0.0, p_req - delivered)
    };
    let feasible = deficit <= 1.0;

    let p_battery = if p_motor >= 0.0 { p_motor / eta_m } else { p_motor * eta_m };
    let b = &params.battery;
    let current = b.current(p_battery).unwrap_or(b.current_max);
    let soc_next = (soc - current * dt / b.capacity_coulombs()).clamp(b.soc_min, b.soc_max);

    let mut reward = fuel_g + soc_penalty(soc_next, params);
    if !feasible {
        reward += params.infeasible_penalty;
    }
    StepOutcome {
        p_req,
        engine_torque,
        engine_speed: w_e,
        p_engine,
        p_motor,
        p_battery,
        p_brake_friction,
        fuel_g,
        soc_next,
        reward,
        feasible,
        deficit,
    }
}

/// Step from `v` to `v_next` over `dt` (forward-difference acceleration).
pub fn step(
    state: VehicleState,
    torque: f64,
    v: f64,
    v_next: f64,
    dt: f64,
    params: &PowertrainParams,
) -> StepOutcome {
    step_with_accel(state.soc, torque, v, (v_next - v) / dt, dt, params)
}

/// The discrete engine-torque action set, uniform over `[0, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    torques: Vec<f64>,
}

impl Default for ActionGrid {
    fn default() -> Self {
        Self::uniform(900.0, 10)
    }
}

impl ActionGrid {
    pub fn uniform(max_torque: f64, count: usize) -> Self {
        assert!(count >= 1);
        let step = if count > 1 { max_torque / (count - 1) as f64 } else { 0.0 };
        Self {
            torques: (0..count).map(|i| step * i as f64).collect(),
        }
    }

    pub fn from_torques(torques: Vec<f64>) -> Result<Self> {
        if torques.is_empty() || torques.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::InvalidParams("action torques must be non-negative".into()));
        }
        Ok(Self { torques })
    }

    pub fn torques(&self) -> &[f64] {
        &self.torques
    }

    pub fn len(&self) -> usize {
        self.torques.len()
    }

    pub fn is_empty(&self) -> bool {
        self.torques.is_empty()
    }

    pub fn torque(&self, action: usize) -> f64 {
        self.torques[action]
    }
}

/// Speeds, accelerations and power requests of a cycle, precomputed once.
#[derive(Debug, Clone)]
pub struct CycleProfile {
    pub dt: f64,
    pub speeds: Vec<f64>,
    pub accels: Vec<f64>,
    pub powers: Vec<f64>,
    pub modes: Vec<Mode>,
}

impl CycleProfile {
    pub fn new(cycle: &DrivingCycle, params: &PowertrainParams) -> Self {
        let accels = cycle.accelerations();
        let powers = cycle
            .speeds()
            .iter()
            .zip(&accels)
            .map(|(v, a)| params.body.force(*v, *a) * v)
            .collect();
        Self {
            dt: cycle.dt(),
            speeds: cycle.speeds().to_vec(),
            accels,
            powers,
            modes: classify_modes(cycle, &params.body).modes().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    pub fn step(&self, k: usize, soc: f64, torque: f64, params: &PowertrainParams) -> StepOutcome {
        step_with_accel(soc, torque, self.speeds[k], self.accels[k], self.dt, params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub v: f64,
    pub mode: Mode,
    pub engine_torque: f64,
    pub engine_speed: f64,
    pub p_req: f64,
    pub p_engine: f64,
    pub p_battery: f64,
    pub p_brake: f64,
    /// SOC at the start of the step.
    pub soc: f64,
    pub fuel_g: f64,
    pub reward: f64,
    pub feasible: bool,
}

/// Per-step log of a policy driven over a cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrace {
    pub name: String,
    pub records: Vec<StepRecord>,
    pub final_soc: f64,
    pub total_fuel: f64,
    pub total_cost: f64,
    pub infeasible_steps: usize,
}

impl PolicyTrace {
    pub fn new(name: impl Into<String>, soc_init: f64) -> Self {
        Self {
            name: name.into(),
            records: Vec::new(),
            final_soc: soc_init,
            total_fuel: 0.0,
            total_cost: 0.0,
            infeasible_steps: 0,
        }
    }

    pub fn push(&mut self, t: f64, mode: Mode, v: f64, soc: f64, out: &StepOutcome) {
        self.records.push(StepRecord {
            t,
            v,
            mode,
            engine_torque: out.engine_torque,
            engine_speed: out.engine_speed,
            p_req: out.p_req,
            p_engine: out.p_engine,
            p_battery: out.p_battery,
            p_brake: out.p_brake_friction,
            soc,
            fuel_g: out.fuel_g,
            reward: out.reward,
            feasible: out.feasible,
        });
        self.final_soc = out.soc_next;
        self.total_fuel += out.fuel_g;
        self.total_cost += out.reward;
        self.infeasible_steps += usize::from(!out.feasible);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn soc_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.soc).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "t", "v", "mode", "engine_torque", "engine_speed", "p_req", "p_engine", "p_battery",
            "p_brake", "soc", "fuel_g", "reward", "feasible",
        ])?;
        for r in &self.records {
            wtr.write_record([
                r.t.to_string(),
                r.v.to_string(),
                r.mode.as_str().to_string(),
                r.engine_torque.to_string(),
                r.engine_speed.to_string(),
                r.p_req.to_string(),
                r.p_engine.to_string(),
                r.p_battery.to_string(),
                r.p_brake.to_string(),
                r.soc.to_string(),
                r.fuel_g.to_string(),
                r.reward.to_string(),
                r.feasible.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn total_fuel(trace: &PolicyTrace) -> f64 {
    trace.records.iter().map(|r| r.fuel_g).sum()
}

/// Drive `profile` from `soc_init`, asking `policy(step, soc)` for the
/// engine torque at every step.
pub fn simulate<F>(
    name: &str,
    profile: &CycleProfile,
    params: &PowertrainParams,
    soc_init: f64,
    mut policy: F,
) -> PolicyTrace
where
    F: FnMut(usize, f64) -> f64,
{
    let mut trace = PolicyTrace::new(name, soc_init);
    let mut soc = soc_init;
    for k in 0..profile.len() {
        let out = profile.step(k, soc, policy(k, soc), params);
        trace.push(k as f64 * profile.dt, profile.modes[k], profile.speeds[k], soc, &out);
        soc = out.soc_next;
    }
    trace
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn power_balance_and_bounds(
            soc in 0.3f64..0.9,
            torque in 0.0f64..900.0,
            v in 0.0f64..35.0,
            accel in -1.5f64..1.0,
        ) {
            let p = PowertrainParams::default();
            let out = step_with_accel(soc, torque, v, accel, 1.0, &p);
            prop_assert!(out.fuel_g >= 0.0);
            prop_assert!(out.soc_next >= p.battery.soc_min && out.soc_next <= p.battery.soc_max);
            if out.feasible {
                prop_assert!((out.delivered_power(&p) - out.p_req).abs() <= 1.0);
                prop_assert!(out.p_brake_friction >= 0.0);
                let fuel_only = out.reward - out.fuel_g;
                prop_assert!(fuel_only >= -1e-9);
                if out.soc_next >= p.soc_ref {
                    prop_assert!(fuel_only.abs() < 1e-9);
                }
            }
            if out.p_req >= 0.0 && out.p_motor >= 0.0 && out.p_brake_friction == 0.0 && out.feasible {
                let eq13 = out.p_engine * p.eta_transmission + out.p_battery * p.eta_motor * p.eta_transmission;
                prop_assert!((eq13 - out.p_req).abs() <= 1.0);
            }
        }
    }
}
