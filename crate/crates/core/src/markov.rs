//! Power-request Markov chains conditioned on speed, and the induced
//! 2-norm distance between two of them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cycle::{longitudinal_force, DrivingCycle, VehicleBodyParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerGrid {
    power_levels: Vec<f64>,
    speed_edges: Vec<f64>,
}

impl Default for QuantizerGrid {
    /// 20 levels over [-150 kW, 300 kW]; speed bins split at 5, 10, 15, 20 m/s.
    fn default() -> Self {
        Self::uniform(-150_000.0, 300_000.0, 20, vec![0.0, 5.0, 10.0, 15.0, 20.0, f64::INFINITY])
            .expect("default grid is valid")
    }
}

impl QuantizerGrid {
    pub fn new(power_levels: Vec<f64>, speed_edges: Vec<f64>) -> Result<Self> {
        if power_levels.len() < 2 {
            return Err(Error::InvalidParams("need at least 2 power levels".into()));
        }
        if speed_edges.len() < 2 {
            return Err(Error::InvalidParams("need at least one speed bin".into()));
        }
        let increasing = |xs: &[f64]| xs.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&power_levels) || power_levels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParams("power levels must be finite and increasing".into()));
        }
        if !increasing(&speed_edges) || speed_edges[0].is_nan() {
            return Err(Error::InvalidParams("speed edges must be increasing".into()));
        }
        Ok(Self {
            power_levels,
            speed_edges,
        })
    }

    pub fn uniform(p_min: f64, p_max: f64, levels: usize, speed_edges: Vec<f64>) -> Result<Self> {
        if levels < 2 || !(p_max > p_min) {
            return Err(Error::InvalidParams("bad power range".into()));
        }
        let step = (p_max - p_min) / (levels - 1) as f64;
        Self::new((0..levels).map(|i| p_min + step * i as f64).collect(), speed_edges)
    }

    pub fn power_levels(&self) -> &[f64] {
        &self.power_levels
    }

    pub fn speed_edges(&self) -> &[f64] {
        &self.speed_edges
    }

    /// Number of power levels `M`.
    pub fn levels(&self) -> usize {
        self.power_levels.len()
    }

    /// Number of speed bins `K`.
    pub fn speed_bins(&self) -> usize {
        self.speed_edges.len() - 1
    }

    /// Nearest power level; ties go to the lower level.
    pub fn power_index(&self, power: f64) -> usize {
        let levels = &self.power_levels;
        let upper = levels.partition_point(|c| *c < power);
        if upper == 0 {
            0
        } else if upper == levels.len() {
            levels.len() - 1
        } else if power - levels[upper - 1] <= levels[upper] - power {
            upper - 1
        } else {
            upper
        }
    }

    /// Speed bin `[e_i, e_{i+1})`, clamped to the outer bins.
    pub fn speed_index(&self, speed: f64) -> usize {
        let edges = &self.speed_edges;
        edges
            .partition_point(|e| *e <= speed)
            .saturating_sub(1)
            .min(self.speed_bins() - 1)
    }
}

pub fn power_request_series(cycle: &DrivingCycle, params: &VehicleBodyParams) -> Vec<f64> {
    (0..cycle.len())
        .map(|k| longitudinal_force(cycle, params, k) * cycle.speeds()[k])
        .collect()
}

/// Speed-binned transition probability matrices over quantized power request,
/// stored row-major as `[speed_bin][from][to]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    grid: QuantizerGrid,
    counts: Vec<u64>,
    tpm: Vec<f64>,
}

impl TransitionModel {
    /// Build from raw counts; rows without counts stay on their own level.
    pub fn from_counts(grid: QuantizerGrid, counts: Vec<u64>) -> Result<Self> {
        let (k, m) = (grid.speed_bins(), grid.levels());
        if counts.len() != k * m * m {
            return Err(Error::ShapeMismatch(format!(
                "expected {} counts, got {}",
                k * m * m,
                counts.len()
            )));
        }
        let mut tpm = vec![0.0; counts.len()];
        for (row, (c, p)) in counts.chunks(m).zip(tpm.chunks_mut(m)).enumerate() {
            let total: u64 = c.iter().sum();
            if total == 0 {
                p[row % m] = 1.0;
            } else {
                for (pj, cj) in p.iter_mut().zip(c) {
                    *pj = *cj as f64 / total as f64;
                }
            }
        }
        Ok(Self { grid, counts, tpm })
    }

    pub fn grid(&self) -> &QuantizerGrid {
        &self.grid
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.tpm
    }

    /// The `M × M` matrix of speed bin `bin`, row-major.
    pub fn matrix(&self, bin: usize) -> &[f64] {
        let m = self.grid.levels();
        &self.tpm[bin * m * m..(bin + 1) * m * m]
    }

    pub fn probability(&self, bin: usize, from: usize, to: usize) -> f64 {
        let m = self.grid.levels();
        self.tpm[(bin * m + from) * m + to]
    }

    pub fn count(&self, bin: usize, from: usize, to: usize) -> u64 {
        let m = self.grid.levels();
        self.counts[(bin * m + from) * m + to]
    }

    /// Transitions observed in speed bin `bin`.
    pub fn bin_total(&self, bin: usize) -> u64 {
        let m = self.grid.levels();
        self.counts[bin * m * m..(bin + 1) * m * m].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &TransitionModelFile::from(self))?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&TransitionModelFile::from(self))?)
    }

    /// Parse the persisted form, recompute probabilities from counts and
    /// cross-check them against the stored ones.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: TransitionModelFile = serde_json::from_str(text)?;
        let grid = QuantizerGrid::new(file.grid.power_levels, file.grid.speed_edges)?;
        let model = Self::from_counts(grid, file.counts)?;
        if file.probabilities.len() != model.tpm.len() {
            return Err(Error::Integrity("probability table has the wrong size".into()));
        }
        if let Some(i) = file
            .probabilities
            .iter()
            .zip(&model.tpm)
            .position(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(Error::Integrity(format!(
                "stored probability {i} disagrees with counts"
            )));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    power_levels: Vec<f64>,
    // Infinity is not representable in JSON.
    #[serde(with = "edges_serde")]
    speed_edges: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransitionModelFile {
    grid: GridFile,
    speed_bins: usize,
    levels: usize,
    counts: Vec<u64>,
    probabilities: Vec<f64>,
}

impl From<&TransitionModel> for TransitionModelFile {
    fn from(m: &TransitionModel) -> Self {
        Self {
            grid: GridFile {
                power_levels: m.grid.power_levels.clone(),
                speed_edges: m.grid.speed_edges.clone(),
            },
            speed_bins: m.grid.speed_bins(),
            levels: m.grid.levels(),
            counts: m.counts.clone(),
            probabilities: m.tpm.clone(),
        }
    }
}

pub(crate) mod edges_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(edges: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mapped: Vec<Option<f64>> = edges.iter().map(|e| e.is_finite().then_some(*e)).collect();
        s.collect_seq(mapped)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|e| e.unwrap_or(f64::INFINITY)).collect())
    }
}

impl Serialize for QuantizerGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GridFile {
            power_levels: self.power_levels.clone(),
            speed_edges: self.speed_edges.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for QuantizerGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let g = GridFile::deserialize(d)?;
        QuantizerGrid::new(g.power_levels, g.speed_edges).map_err(serde::de::Error::custom)
    }
}

/// Maximum-likelihood TPM: each pair `P[k] -> P[k+1]` is counted in the
/// speed bin of `v[k]`.
pub fn estimate_tpm(powers: &[f64], speeds: &[f64], grid: &QuantizerGrid) -> Result<TransitionModel> {
    if powers.len() != speeds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} powers vs {} speeds",
            powers.len(),
            speeds.len()
        )));
    }
    if powers.len() < 2 {
        return Err(Error::EmptySequence("need at least two samples".into()));
    }
    let m = grid.levels();
    let mut counts = vec![0u64; grid.speed_bins() * m * m];
    let levels: Vec<usize> = powers.iter().map(|p| grid.power_index(*p)).collect();
    for k in 0..powers.len() - 1 {
        let bin = grid.speed_index(speeds[k]);
        counts[(bin * m + levels[k]) * m + levels[k + 1]] += 1;
    }
    TransitionModel::from_counts(grid.clone(), counts)
}

/// TPM of a whole cycle under the given body parameters.
pub fn cycle_tpm(cycle: &DrivingCycle, params: &VehicleBodyParams, grid: &QuantizerGrid) -> Result<TransitionModel> {
    estimate_tpm(&power_request_series(cycle, params), cycle.speeds(), grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterationOptions {
    pub max_iterations: usize,
    pub rel_tol: f64,
    /// Seed of the random start vector.
    pub seed: u64,
}

impl Default for PowerIterationOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            rel_tol: 1e-12,
            seed: 0x1d_2e_3f,
        }
    }
}

// Repeated squaring of DᵀD before iterating; raises the eigenvalue ratio to
// the 2^SQUARINGS power so near-degenerate leading pairs still separate.
const SQUARINGS: usize = 6;

/// Largest singular value of the `m × m` row-major matrix `d`.
pub fn spectral_norm(d: &[f64], m: usize, opts: &PowerIterationOptions) -> f64 {
    assert_eq!(d.len(), m * m, "matrix must be {m}×{m}");
    // Gram matrix DᵀD.
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let s: f64 = (0..m).map(|r| d[r * m + i] * d[r * m + j]).sum();
            gram[i * m + j] = s;
            gram[j * m + i] = s;
        }
    }
    if gram.iter().all(|g| *g == 0.0) {
        return 0.0;
    }

    let mut accel = gram.clone();
    for _ in 0..SQUARINGS {
        let mut sq = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                sq[i * m + j] = (0..m).map(|r| accel[i * m + r] * accel[r * m + j]).sum();
            }
        }
        let scale = sq.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if scale == 0.0 || !scale.is_finite() {
            break;
        }
        sq.iter_mut().for_each(|x| *x /= scale);
        accel = sq;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.5).collect();
    normalize(&mut x);
    let rayleigh = |x: &[f64]| -> f64 {
        (0..m)
            .map(|i| x[i] * (0..m).map(|j| gram[i * m + j] * x[j]).sum::<f64>())
            .sum()
    };
    let mut lambda = rayleigh(&x);
    for _ in 0..opts.max_iterations {
        let mut y: Vec<f64> = (0..m)
            .map(|i| (0..m).map(|j| accel[i * m + j] * x[j]).sum())
            .collect();
        if normalize(&mut y) == 0.0 {
            break;
        }
        x = y;
        let next = rayleigh(&x);
        let done = (next - lambda).abs() <= opts.rel_tol * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    lambda.max(0.0).sqrt()
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Spectral norm of `a - b` for two row-major `m × m` matrices.
pub fn matrix_imn(a: &[f64], b: &[f64], m: usize) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    spectral_norm(&d, m, &PowerIterationOptions::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImnReport {
    /// Per speed bin distance; `None` when neither model visited the bin.
    pub per_bin: Vec<Option<f64>>,
    /// Visit-count weighted mean over visited bins.
    pub aggregate: f64,
}

pub fn imn(a: &TransitionModel, b: &TransitionModel) -> Result<ImnReport> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch);
    }
    let m = a.grid.levels();
    let mut per_bin = Vec::with_capacity(a.grid.speed_bins());
    let (mut weighted, mut weight) = (0.0, 0.0);
    for bin in 0..a.grid.speed_bins() {
        let visits = a.bin_total(bin) + b.bin_total(bin);
        if visits == 0 {
            per_bin.push(None);
            continue;
        }
        let value = matrix_imn(a.matrix(bin), b.matrix(bin), m);
        weighted += visits as f64 * value;
        weight += visits as f64;
        per_bin.push(Some(value));
    }
    let aggregate = if weight > 0.0 { weighted / weight } else { 0.0 };
    Ok(ImnReport { per_bin, aggregate })
}
