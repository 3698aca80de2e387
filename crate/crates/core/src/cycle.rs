//! Driving cycles, longitudinal force, operating-mode partition and the
//! mean-tractive-force components `(alpha, beta, gamma)`.
//!
//! Accelerations use a forward difference, `a[k] = (v[k+1] - v[k]) / dt`,
//! and the last sample reuses the previous acceleration.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speeds at or below this are idle (m/s).
pub const V_IDLE: f64 = 0.05;
/// Band around the coasting velocity that counts as coasting (m/s).
pub const TOL_COAST: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingCycle {
    name: String,
    dt: f64,
    speeds: Vec<f64>,
}

impl DrivingCycle {
    pub fn new(name: impl Into<String>, dt: f64, speeds: Vec<f64>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidCycle(format!("dt must be positive, got {dt}")));
        }
        if speeds.len() < 2 {
            return Err(Error::InvalidCycle(format!(
                "need at least 2 samples, got {}",
                speeds.len()
            )));
        }
        if let Some((i, v)) = speeds
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::InvalidCycle(format!("speed {v} at sample {i}")));
        }
        Ok(Self {
            name: name.into(),
            dt,
            speeds,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.speeds.len() as f64
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Forward-difference acceleration at `step`; the last sample reuses the
    /// previous one.
    pub fn acceleration(&self, step: usize) -> f64 {
        let n = self.speeds.len();
        assert!(step < n, "step {step} out of range for cycle of {n}");
        let k = step.min(n - 2);
        (self.speeds[k + 1] - self.speeds[k]) / self.dt
    }

    pub fn accelerations(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.acceleration(k)).collect()
    }

    /// Sub-cycle over samples `start..end` (clamped, at least two samples).
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.len());
        if end < start + 2 {
            return Err(Error::InvalidCycle(format!("slice {start}..{end} too short")));
        }
        Self::new(
            format!("{}[{start}..{end}]", self.name),
            self.dt,
            self.speeds[start..end].to_vec(),
        )
    }

    /// Concatenate cycles sharing the same sample time.
    pub fn concat(name: impl Into<String>, parts: &[&DrivingCycle]) -> Result<Self> {
        let dt = parts
            .first()
            .ok_or_else(|| Error::InvalidCycle("nothing to concatenate".into()))?
            .dt;
        if parts.iter().any(|c| (c.dt - dt).abs() > 1e-12) {
            return Err(Error::InvalidCycle("sample times differ".into()));
        }
        let speeds = parts.iter().flat_map(|c| c.speeds.iter().copied()).collect();
        Self::new(name, dt, speeds)
    }

    /// Load the `t,v` CSV format: integer timestamps, uniformly spaced.
    pub fn from_csv_reader<R: Read>(name: impl Into<String>, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "v" {
            return Err(Error::InvalidCycle(format!(
                "expected header `t,v`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut times: Vec<i64> = Vec::new();
        let mut speeds = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let t: f64 = rec[0]
                .parse()
                .map_err(|_| Error::InvalidCycle(format!("row {}: bad time `{}`", row + 1, &rec[0])))?;
            if t.fract() != 0.0 {
                return Err(Error::InvalidCycle(format!(
                    "row {}: timestamp {t} is not an integer",
                    row + 1
                )));
            }
            let v: f64 = rec[1]
                .parse()
                .map_err(|_| Error::InvalidCycle(format!("row {}: bad speed `{}`", row + 1, &rec[1])))?;
            times.push(t as i64);
            speeds.push(v);
        }
        if times.len() < 2 {
            return Err(Error::InvalidCycle("need at least 2 rows".into()));
        }
        let step = times[1] - times[0];
        if step <= 0 {
            return Err(Error::InvalidCycle("timestamps must increase".into()));
        }
        if let Some(w) = times.windows(2).position(|w| w[1] - w[0] != step) {
            return Err(Error::InvalidCycle(format!(
                "non-uniform timestamps at row {}",
                w + 2
            )));
        }
        Self::new(name, step as f64, speeds)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cycle".into());
        Self::from_csv_reader(name, file)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["t", "v"])?;
        for (i, v) in self.speeds.iter().enumerate() {
            let t = i as f64 * self.dt;
            wtr.write_record([format!("{t}"), format!("{v}")])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleBodyParams {
    /// kg
    pub mass: f64,
    /// m²
    pub frontal_area: f64,
    pub drag_coeff: f64,
    pub rolling_coeff: f64,
    /// kg/m³
    pub air_density: f64,
    /// m/s²
    pub gravity: f64,
    /// m
    pub tire_radius: f64,
}

impl Default for VehicleBodyParams {
    fn default() -> Self {
        Self {
            mass: 16_000.0,
            frontal_area: 1.8,
            drag_coeff: 0.55,
            rolling_coeff: 0.021,
            air_density: 1.293,
            gravity: 9.81,
            tire_radius: 0.508,
        }
    }
}

impl VehicleBodyParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mass", self.mass),
            ("frontal_area", self.frontal_area),
            ("drag_coeff", self.drag_coeff),
            ("rolling_coeff", self.rolling_coeff),
            ("air_density", self.air_density),
            ("gravity", self.gravity),
            ("tire_radius", self.tire_radius),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }

    /// `k1 = sqrt(rho Cd A / 2m)`, `k2 = sqrt(f g)`.
    fn coast_constants(&self) -> (f64, f64) {
        let k1 = (self.air_density * self.drag_coeff * self.frontal_area / (2.0 * self.mass)).sqrt();
        let k2 = (self.rolling_coeff * self.gravity).sqrt();
        (k1, k2)
    }

    /// Aerodynamic drag plus rolling resistance plus inertia at speed `v` and
    /// acceleration `a`. No rolling resistance at standstill.
    pub fn force(&self, v: f64, a: f64) -> f64 {
        let aero = 0.5 * self.air_density * self.drag_coeff * self.frontal_area * v * v;
        let rolling = if v > 0.0 {
            self.mass * self.gravity * self.rolling_coeff
        } else {
            0.0
        };
        aero + rolling + self.mass * a
    }
}

/// Longitudinal force (N) required to follow `cycle` at `step`.
pub fn longitudinal_force(cycle: &DrivingCycle, params: &VehicleBodyParams, step: usize) -> f64 {
    params.force(cycle.speeds[step], cycle.acceleration(step))
}

/// Speed reached after coasting for `dt` seconds from `v_prev` with no
/// propulsive force, clipped at zero.
pub fn coasting_velocity(v_prev: f64, dt: f64, params: &VehicleBodyParams) -> f64 {
    let (k1, k2) = params.coast_constants();
    let angle = (k1 / k2 * v_prev).atan() - k1 * k2 * dt;
    if angle <= 0.0 {
        0.0
    } else {
        (k2 / k1 * angle.tan()).max(0.0)
    }
}

/// Derivative of [`coasting_velocity`] with respect to `v_prev`.
pub(crate) fn coasting_velocity_slope(v_prev: f64, dt: f64, params: &VehicleBodyParams) -> f64 {
    let (k1, k2) = params.coast_constants();
    let c = k1 / k2;
    let angle = (c * v_prev).atan() - k1 * k2 * dt;
    if angle <= 0.0 {
        0.0
    } else {
        let t = angle.tan();
        (1.0 + t * t) / (1.0 + c * c * v_prev * v_prev)
    }
}

/// Smallest previous speed from which coasting reaches `v_coast` after `dt`.
pub(crate) fn coasting_velocity_inverse(v_coast: f64, dt: f64, params: &VehicleBodyParams) -> f64 {
    let (k1, k2) = params.coast_constants();
    let c = k1 / k2;
    let angle = (c * v_coast.max(0.0)).atan() + k1 * k2 * dt;
    if angle >= std::f64::consts::FRAC_PI_2 {
        f64::INFINITY
    } else {
        angle.tan() / c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Traction,
    Coasting,
    Braking,
    Idle,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Traction => "traction",
            Mode::Coasting => "coasting",
            Mode::Braking => "braking",
            Mode::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModePartition {
    modes: Vec<Mode>,
}

impl ModePartition {
    pub fn from_modes(modes: Vec<Mode>) -> Self {
        Self { modes }
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn is_traction(&self, step: usize) -> bool {
        self.modes[step] == Mode::Traction
    }

    /// Maximal runs of consecutive traction samples as inclusive `(first, last)`.
    pub fn traction_regions(&self) -> Vec<(usize, usize)> {
        let mut regions = Vec::new();
        let mut start = None;
        for (k, m) in self.modes.iter().enumerate() {
            match (*m == Mode::Traction, start) {
                (true, None) => start = Some(k),
                (false, Some(s)) => {
                    regions.push((s, k - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            regions.push((s, self.modes.len() - 1));
        }
        regions
    }

    pub fn count(&self, mode: Mode) -> usize {
        self.modes.iter().filter(|m| **m == mode).count()
    }
}

/// Classify one non-initial sample against the coasting velocity reached
/// from its predecessor.
pub(crate) fn classify_step(v: f64, v_prev: f64, dt: f64, params: &VehicleBodyParams) -> Mode {
    if v <= V_IDLE {
        return Mode::Idle;
    }
    let v_coast = coasting_velocity(v_prev, dt, params);
    if (v - v_coast).abs() <= TOL_COAST {
        Mode::Coasting
    } else if v > v_coast {
        Mode::Traction
    } else {
        Mode::Braking
    }
}

pub fn classify_modes(cycle: &DrivingCycle, params: &VehicleBodyParams) -> ModePartition {
    let v = cycle.speeds();
    let mut modes = Vec::with_capacity(v.len());
    // The first sample has no predecessor: use the sign of the force.
    modes.push(if v[0] <= V_IDLE {
        Mode::Idle
    } else {
        let f = longitudinal_force(cycle, params, 0);
        if f.abs() <= 1e-9 {
            Mode::Coasting
        } else if f > 0.0 {
            Mode::Traction
        } else {
            Mode::Braking
        }
    });
    for k in 1..v.len() {
        modes.push(classify_step(v[k], v[k - 1], cycle.dt(), params));
    }
    ModePartition { modes }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtfComponents {
    /// m²/s²
    pub alpha: f64,
    pub beta: f64,
    /// m/s²
    pub gamma: f64,
    /// Total distance, m.
    pub distance: f64,
}

/// Sample index closing a traction region for the telescoped gamma sum: the
/// first sample after the region, or the last sample of the cycle.
pub(crate) fn region_end(last: usize, len: usize) -> usize {
    (last + 1).min(len - 1)
}

pub(crate) fn mtf_from_speeds(speeds: &[f64], dt: f64, partition: &ModePartition) -> Result<MtfComponents> {
    if partition.len() != speeds.len() {
        return Err(Error::ShapeMismatch(format!(
            "partition has {} samples, cycle {}",
            partition.len(),
            speeds.len()
        )));
    }
    let distance: f64 = speeds.iter().map(|v| v * dt).sum();
    if !(distance > 0.0) {
        return Err(Error::ZeroDistance);
    }
    let (mut cubed, mut linear) = (0.0, 0.0);
    for (v, m) in speeds.iter().zip(partition.modes()) {
        if *m == Mode::Traction {
            cubed += v * v * v * dt;
            linear += v * dt;
        }
    }
    let kinetic: f64 = partition
        .traction_regions()
        .into_iter()
        .map(|(first, last)| {
            let end = region_end(last, speeds.len());
            0.5 * (speeds[end] * speeds[end] - speeds[first] * speeds[first])
        })
        .sum();
    Ok(MtfComponents {
        alpha: cubed / distance,
        beta: linear / distance,
        gamma: kinetic / distance,
        distance,
    })
}

pub fn mtf_components(cycle: &DrivingCycle, partition: &ModePartition) -> Result<MtfComponents> {
    mtf_from_speeds(cycle.speeds(), cycle.dt(), partition)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64, n: usize) -> DrivingCycle {
        DrivingCycle::new("const", 1.0, vec![v; n]).unwrap()
    }

    /// Integrate dv/dt = -k1² v² - k2² with classical RK4.
    fn coast_rk4(v0: f64, dt: f64, p: &VehicleBodyParams) -> f64 {
        let k1sq = p.air_density * p.drag_coeff * p.frontal_area / (2.0 * p.mass);
        let k2sq = p.rolling_coeff * p.gravity;
        let f = |v: f64| -k1sq * v * v - k2sq;
        let n = 1000;
        let h = dt / n as f64;
        let mut v = v0;
        for _ in 0..n {
            let a = f(v);
            let b = f(v + 0.5 * h * a);
            let c = f(v + 0.5 * h * b);
            let d = f(v + h * c);
            v += h / 6.0 * (a + 2.0 * b + 2.0 * c + d);
        }
        v
    }

    #[test]
    fn force_examples() {
        let p = VehicleBodyParams::default();
        assert!((p.force(10.0, 0.0) - 3360.1635).abs() < 1e-3);
        assert_eq!(p.force(0.0, 0.0), 0.0);
        assert!((p.force(10.0, -1.0) - (-12639.8365)).abs() < 1e-3);
        let c = DrivingCycle::new("c", 1.0, vec![10.0, 9.0, 9.0]).unwrap();
        assert!((longitudinal_force(&c, &p, 0) - (-12639.8365)).abs() < 1e-3);
        // Last sample reuses the previous acceleration.
        assert_eq!(c.acceleration(2), c.acceleration(1));
    }

    #[test]
    fn coasting_matches_rk4() {
        let p = VehicleBodyParams::default();
        let closed = coasting_velocity(20.0, 1.0, &p);
        let rk4 = coast_rk4(20.0, 1.0, &p);
        assert!((closed - rk4).abs() < 1e-9, "{closed} vs {rk4}");
        assert!((closed - 19.78).abs() < 0.01, "{closed}");
        assert_eq!(coasting_velocity(0.0, 1.0, &p), 0.0);
        assert_eq!(coasting_velocity(20.0, 0.0, &p), 20.0);
        // Small speeds clip instead of going negative.
        assert_eq!(coasting_velocity(0.1, 1.0, &p), 0.0);
    }

    #[test]
    fn coasting_inverse_and_slope() {
        let p = VehicleBodyParams::default();
        for v in [0.5, 3.0, 12.0, 30.0] {
            let vc = coasting_velocity(v, 1.0, &p);
            assert!((coasting_velocity_inverse(vc, 1.0, &p) - v).abs() < 1e-9);
            let h = 1e-6;
            let fd = (coasting_velocity(v + h, 1.0, &p) - coasting_velocity(v - h, 1.0, &p)) / (2.0 * h);
            assert!((fd - coasting_velocity_slope(v, 1.0, &p)).abs() < 1e-6);
        }
    }

    #[test]
    fn coasting_monotone_on_grid() {
        let p = VehicleBodyParams::default();
        for i in 0..60 {
            let v = i as f64 * 0.5;
            for j in 0..10 {
                let dt = 0.25 * j as f64;
                let here = coasting_velocity(v, dt, &p);
                assert!(coasting_velocity(v + 0.5, dt, &p) >= here);
                assert!(coasting_velocity(v, dt + 0.25, &p) <= here);
            }
        }
    }

    #[test]
    fn classification_examples() {
        let p = VehicleBodyParams::default();
        let part = classify_modes(&constant(10.0, 50), &p);
        assert!(part.modes().iter().all(|m| *m == Mode::Traction));
        let part = classify_modes(&constant(0.0, 20), &p);
        assert!(part.modes().iter().all(|m| *m == Mode::Idle));
        let c = DrivingCycle::new("b", 1.0, vec![20.0, 19.0, 18.0]).unwrap();
        assert_eq!(classify_modes(&c, &p).modes()[1], Mode::Braking);
        let vc = coasting_velocity(20.0, 1.0, &p);
        let c = DrivingCycle::new("co", 1.0, vec![20.0, vc, vc]).unwrap();
        assert_eq!(classify_modes(&c, &p).modes()[1], Mode::Coasting);
    }

    #[test]
    fn mtf_constant_cycle() {
        let p = VehicleBodyParams::default();
        let c = constant(10.0, 100);
        let mtf = mtf_components(&c, &classify_modes(&c, &p)).unwrap();
        assert!((mtf.alpha - 100.0).abs() < 1e-12);
        assert!((mtf.beta - 1.0).abs() < 1e-12);
        assert_eq!(mtf.gamma, 0.0);
        assert!((mtf.distance - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn mtf_all_idle_is_error() {
        let p = VehicleBodyParams::default();
        let c = constant(0.0, 10);
        assert!(matches!(
            mtf_components(&c, &classify_modes(&c, &p)),
            Err(Error::ZeroDistance)
        ));
    }

    /// Term-by-term discrete sums written independently of the region helper.
    fn mtf_oracle(v: &[f64], dt: f64, modes: &[Mode]) -> (f64, f64, f64) {
        let xl: f64 = v.iter().sum::<f64>() * dt;
        let mut a = 0.0;
        let mut b = 0.0;
        let mut g = 0.0;
        for i in 0..v.len() {
            if modes[i] != Mode::Traction {
                continue;
            }
            a += v[i].powi(3) * dt;
            b += v[i] * dt;
            if i + 1 < v.len() {
                // a·v̄·dt with forward acceleration and midpoint speed.
                let acc = (v[i + 1] - v[i]) / dt;
                g += acc * 0.5 * (v[i] + v[i + 1]) * dt;
            }
        }
        (a / xl, b / xl, g / xl)
    }

    fn sawtooth() -> DrivingCycle {
        let mut v = Vec::new();
        for _ in 0..3 {
            v.extend([0.0, 0.0, 0.0]);
            v.extend((1..=40).map(|i| 0.5 * i as f64));
            v.extend((0..20).rev().map(|i| i as f64));
        }
        DrivingCycle::new("saw", 1.0, v).unwrap()
    }

    #[test]
    fn mtf_sawtooth_matches_oracle() {
        let p = VehicleBodyParams::default();
        let c = sawtooth();
        let part = classify_modes(&c, &p);
        assert!(part.count(Mode::Braking) > 0 && part.count(Mode::Idle) > 0);
        let mtf = mtf_components(&c, &part).unwrap();
        let (a, b, g) = mtf_oracle(c.speeds(), c.dt(), part.modes());
        assert!((mtf.alpha - a).abs() <= 1e-10 * a.abs());
        assert!((mtf.beta - b).abs() <= 1e-10 * b.abs());
        assert!((mtf.gamma - g).abs() <= 1e-10 * g.abs().max(1e-12));
        assert!(mtf.beta > 0.0 && mtf.beta <= 1.0);
    }

    #[test]
    fn time_refinement_keeps_alpha_beta() {
        let p = VehicleBodyParams::default();
        let c = sawtooth();
        let part = classify_modes(&c, &p);
        let mtf = mtf_components(&c, &part).unwrap();
        let fine = DrivingCycle::new(
            "fine",
            c.dt() / 2.0,
            c.speeds().iter().flat_map(|v| [*v, *v]).collect(),
        )
        .unwrap();
        let fine_part =
            ModePartition::from_modes(part.modes().iter().flat_map(|m| [*m, *m]).collect());
        let fine_mtf = mtf_components(&fine, &fine_part).unwrap();
        assert!((fine_mtf.alpha - mtf.alpha).abs() <= 1e-9 * mtf.alpha);
        assert!((fine_mtf.beta - mtf.beta).abs() <= 1e-9 * mtf.beta);
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let c = sawtooth();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = DrivingCycle::from_csv_reader("saw", buf.as_slice()).unwrap();
        assert_eq!(back, c);
        let bad = "t,v\n0,1\n2,1\n3,1\n";
        assert!(DrivingCycle::from_csv_reader("x", bad.as_bytes()).is_err());
        let bad = "t,v\n0,1\n0.5,1\n";
        assert!(DrivingCycle::from_csv_reader("x", bad.as_bytes()).is_err());
        let bad = "time,speed\n0,1\n1,1\n";
        assert!(DrivingCycle::from_csv_reader("x", bad.as_bytes()).is_err());
        assert!(DrivingCycle::new("neg", 1.0, vec![1.0, -1.0]).is_err());
        assert!(DrivingCycle::new("short", 1.0, vec![1.0]).is_err());
        assert!(DrivingCycle::new("dt", 0.0, vec![1.0, 1.0]).is_err());
    }
}
