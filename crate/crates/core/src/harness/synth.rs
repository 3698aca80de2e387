//! Seeded synthetic driving cycles. Each recipe draws one 500 s block of
//! microtrips and tiles it, so every aligned window of a stream has the
//! same transition statistics.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cycle::DrivingCycle;
use crate::error::{Error, Result};
use crate::powertrain::{step_with_accel, PowertrainParams};

pub const BLOCK_SECONDS: usize = 500;
/// Default change point of the stitched recipe, s.
pub const CHANGE_POINT: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    Urban,
    Suburban,
    Highway,
    /// Urban until the change point, highway afterwards.
    Stitched,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [Recipe::Urban, Recipe::Suburban, Recipe::Highway, Recipe::Stitched];

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Urban => "urban",
            Recipe::Suburban => "suburban",
            Recipe::Highway => "highway",
            Recipe::Stitched => "stitched",
        }
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown recipe {s:?}")))
    }
}

struct TripShape {
    cruise: (f64, f64),
    accel: (f64, f64),
    decel: (f64, f64),
    cruise_time: (f64, f64),
    dwell: (f64, f64),
    ripple: f64,
    hold_steps: (usize, usize),
}

fn shape(recipe: Recipe) -> TripShape {
    match recipe {
        Recipe::Urban | Recipe::Stitched => TripShape {
            cruise: (6.0, 13.0),
            accel: (0.5, 0.9),
            decel: (0.6, 1.1),
            cruise_time: (15.0, 45.0),
            dwell: (8.0, 25.0),
            ripple: 2.0,
            hold_steps: (2, 8),
        },
        Recipe::Suburban => TripShape {
            cruise: (12.0, 19.0),
            accel: (0.4, 0.7),
            decel: (0.5, 0.9),
            cruise_time: (40.0, 100.0),
            dwell: (10.0, 20.0),
            ripple: 2.5,
            hold_steps: (3, 12),
        },
        Recipe::Highway => TripShape {
            cruise: (19.0, 24.0),
            accel: (0.3, 0.6),
            decel: (0.4, 0.7),
            cruise_time: (150.0, 300.0),
            dwell: (5.0, 10.0),
            ripple: 2.0,
            hold_steps: (5, 20),
        },
    }
}

/// Largest acceleration at `v` the powertrain can follow with full engine
/// torque at moderate charge, derated by `margin`.
pub fn acceleration_cap(v: f64, params: &PowertrainParams, margin: f64) -> f64 {
    let feasible = |a: f64| step_with_accel(0.55, params.engine.max_torque, v, a, 1.0, params).feasible;
    let (mut lo, mut hi) = (0.0, 3.0);
    if !feasible(lo) {
        return 0.0;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo * margin
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// One block of microtrips, starting and ending at standstill.
fn block(recipe: Recipe, seed: u64, params: &PowertrainParams) -> Vec<f64> {
    let s = shape(recipe);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (recipe as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    let mut v = Vec::with_capacity(BLOCK_SECONDS);
    let push_idle = |v: &mut Vec<f64>, n: usize| v.extend(std::iter::repeat_n(0.0, n));
    push_idle(&mut v, uniform(&mut rng, s.dwell).round() as usize);
    loop {
        let cruise = uniform(&mut rng, s.cruise);
        let accel = uniform(&mut rng, s.accel);
        let decel = uniform(&mut rng, s.decel);
        let hold = uniform(&mut rng, s.cruise_time);
        let dwell = uniform(&mut rng, s.dwell).round() as usize;
        let amp = s.ripple.min(0.3 * cruise);

        let mut trip = vec![0.0];
        let mut x = 0.0;
        while x < cruise {
            x = (x + accel.min(acceleration_cap(x, params, 0.85))).min(cruise);
            trip.push(x);
        }
        // Wander between sub-targets around the cruise speed: capped climbs,
        // braking descents, short holds.
        let mut target = cruise;
        let mut x = cruise;
        let mut wait = 0usize;
        for _ in 0..hold.round() as usize {
            if x == target {
                if wait == 0 {
                    target = cruise + amp * (2.0 * rng.random::<f64>() - 1.0);
                    wait = rng.random_range(s.hold_steps.0..=s.hold_steps.1);
                } else {
                    wait -= 1;
                }
            }
            x = if target > x {
                (x + (0.6 * accel).min(acceleration_cap(x, params, 0.85))).min(target)
            } else {
                (x - 0.7 * decel).max(target)
            };
            trip.push(x);
        }
        let mut x = *trip.last().expect("trip has samples");
        while x > 0.0 {
            x = (x - decel).max(0.0);
            trip.push(x);
        }
        // The trip's leading zero belongs to the preceding dwell.
        let body = &trip[1..];
        if v.len() + body.len() + dwell.max(2) > BLOCK_SECONDS {
            break;
        }
        v.extend_from_slice(body);
        push_idle(&mut v, dwell);
    }
    let short = BLOCK_SECONDS - v.len().min(BLOCK_SECONDS);
    push_idle(&mut v, short);
    v.truncate(BLOCK_SECONDS);
    v
}

fn tile(block: &[f64], len: usize) -> Vec<f64> {
    block.iter().copied().cycle().take(len).collect()
}

/// A `duration`-second cycle (1 s sampling) from `recipe`.
pub fn generate(recipe: Recipe, duration: usize, seed: u64, params: &PowertrainParams) -> Result<DrivingCycle> {
    if duration < 2 {
        return Err(Error::InvalidParams("duration must be at least 2 s".into()));
    }
    let speeds = match recipe {
        Recipe::Stitched => {
            let head = CHANGE_POINT.min(duration);
            let mut v = tile(&block(Recipe::Urban, seed, params), head);
            v.extend(tile(&block(Recipe::Highway, seed, params), duration - head));
            v
        }
        r => tile(&block(r, seed, params), duration),
    };
    DrivingCycle::new(format!("{}-s{seed}", recipe.as_str()), 1.0, speeds)
}
