//! Exact answers for finite chains by dynamic programming over
//! `(step, state, running sum)`.
//!
//! Increments must lie on a common rational lattice `h * Z` (denominators up
//! to 10^4) and the table may hold at most [`LATTICE_LIMIT`] cells summed
//! over steps. A single-state chain with a Gaussian increment and a
//! fixed-time event is answered from the normal distribution instead; every
//! other continuous case is rejected.

use libm::erfc;

use super::finite::{FiniteChain, FiniteChainSpec, IncrementLaw};
use super::{EventSpec, MarkovRandomWalk, TiltParams};
use crate::error::{Error, Result};

/// Upper bound on `steps * states * lattice width`.
pub const LATTICE_LIMIT: usize = 10_000_000;

const MAX_DENOM: i64 = 10_000;

/// `P(F = 1)` under the original measure.
pub fn exact_probability(spec: &FiniteChainSpec, event: &EventSpec) -> Result<f64> {
    spec.validate()?;
    event.validate(1)?;
    if let Some(v) = gaussian_fixed_time(spec, event, 0.0)? {
        return Ok(v);
    }
    let ones = |_: usize, _: usize, _: f64| 1.0;
    lattice_dp(spec, event, &ones)
}

/// `G(theta, eta) = E[F exp(-theta S_tau + sum(psi - k + phi))]` under the
/// original measure, for `chain` with whatever link it carries.
pub fn exact_second_moment(chain: &FiniteChain, tilt: &TiltParams, event: &EventSpec) -> Result<f64> {
    let spec = chain.spec();
    event.validate(1)?;
    chain.check_domain(tilt)?;
    let eta_on = tilt.eta.iter().any(|&e| e != 0.0);
    if !eta_on || spec.states() == 1 {
        if let Some(v) = gaussian_fixed_time(spec, event, tilt.theta[0])? {
            return Ok(v);
        }
    }
    let theta = tilt.theta[0];
    let factor = |i: usize, j: usize, y: f64| -> f64 {
        let mut lw = chain.psi(&i, &j, &tilt.theta) - theta * y;
        if eta_on {
            lw -= chain.transition_log_ratio(&i, &j, &tilt.eta);
        }
        lw.exp()
    };
    lattice_dp(spec, event, &factor)
}

fn norm_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// `E[1{S_n rel c} exp(-theta S_n + n psi(theta))]` for i.i.d. Gaussian steps.
fn gaussian_fixed_time(spec: &FiniteChainSpec, event: &EventSpec, theta: f64) -> Result<Option<f64>> {
    let IncrementLaw::Gaussian { mean, var } = spec.increments[0][0] else {
        return Ok(None);
    };
    if spec.states() != 1 {
        return Err(Error::UnsupportedOracle(
            "gaussian increments are only supported for single-state chains".into(),
        ));
    }
    let EventSpec::FixedTimeThreshold {
        n,
        threshold,
        direction,
        ..
    } = *event
    else {
        return Err(Error::UnsupportedOracle(
            "gaussian increments are only supported for fixed-time events".into(),
        ));
    };
    let nf = n as f64;
    let (m, v) = (nf * mean, nf * var);
    if v == 0.0 {
        let hit = direction.holds(m, threshold);
        return Ok(Some(if hit { 1.0 } else { 0.0 }));
    }
    let psi = theta * mean + 0.5 * theta * theta * var;
    // exp(-theta S) turns N(m, v) into N(m - theta v, v) with mass exp(-theta m + theta^2 v / 2)
    let shifted = m - theta * v;
    let mass = (-theta * m + 0.5 * theta * theta * v + nf * psi).exp();
    let z = (threshold - shifted) / v.sqrt();
    let p = match direction {
        super::Direction::Above => norm_sf(z),
        super::Direction::Below => norm_sf(-z),
    };
    Ok(Some(mass * p))
}

fn rational(v: f64) -> Option<(i64, i64)> {
    for q in 1..=MAX_DENOM {
        let p = (v * q as f64).round();
        if (v * q as f64 - p).abs() <= 1e-9 * q as f64 {
            return Some((p as i64, q));
        }
    }
    None
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Per-edge support as `(lattice index, probability)`, plus the lattice step.
type Support = Vec<Vec<Vec<(i64, f64)>>>;

fn lattice(spec: &FiniteChainSpec) -> Result<(Support, f64)> {
    let mut den = 1i64;
    for row in &spec.increments {
        for law in row {
            match law {
                IncrementLaw::Discrete { values, .. } => {
                    for v in values {
                        let (_, q) = rational(*v).ok_or_else(|| {
                            Error::UnsupportedOracle(format!("increment {v} is not on a rational lattice"))
                        })?;
                        den = den / gcd(den, q) * q;
                        if den > MAX_DENOM {
                            return Err(Error::UnsupportedOracle("lattice denominator too large".into()));
                        }
                    }
                }
                IncrementLaw::Gaussian { .. } => {
                    return Err(Error::UnsupportedOracle("continuous increments".into()));
                }
            }
        }
    }
    let h = 1.0 / den as f64;
    let support = spec
        .increments
        .iter()
        .map(|row| {
            row.iter()
                .map(|law| match law {
                    IncrementLaw::Discrete { values, probs } => values
                        .iter()
                        .zip(probs)
                        .filter(|(_, p)| **p > 0.0)
                        .map(|(v, p)| ((v * den as f64).round() as i64, *p))
                        .collect(),
                    IncrementLaw::Gaussian { .. } => unreachable!(),
                })
                .collect()
        })
        .collect();
    Ok((support, h))
}

/// Forward DP carrying `(passed flag, state, sum index)` masses, with an
/// optional per-edge multiplier `factor(i, j, y)`.
fn lattice_dp<F>(spec: &FiniteChainSpec, event: &EventSpec, factor: &F) -> Result<f64>
where
    F: Fn(usize, usize, f64) -> f64,
{
    let k = spec.states();
    let (support, h) = lattice(spec)?;
    let n = event.horizon();
    let (lo_step, hi_step) = support
        .iter()
        .flatten()
        .flatten()
        .fold((0i64, 0i64), |(lo, hi), (v, _)| (lo.min(*v), hi.max(*v)));
    let lo = lo_step * n as i64;
    let width = ((hi_step - lo_step) as usize) * n + 1;
    if n.saturating_mul(k).saturating_mul(width) > LATTICE_LIMIT {
        return Err(Error::UnsupportedOracle(format!(
            "lattice of {n} x {k} x {width} exceeds {LATTICE_LIMIT}"
        )));
    }
    let value = |idx: usize| (idx as i64 + lo) as f64 * h;
    // tolerance for comparing lattice sums against real thresholds
    let slack = 1e-9 * h;
    let holds = |dir: super::Direction, s: f64, c: f64| match dir {
        super::Direction::Above => s >= c - slack,
        super::Direction::Below => s <= c + slack,
    };
    let layers = if matches!(event, EventSpec::JointPassageAndTerminal { .. }) { 2 } else { 1 };
    let at = |layer: usize, st: usize, idx: usize| (layer * k + st) * width + idx;
    let mut cur = vec![0.0; layers * k * width];
    let zero_idx = (-lo) as usize;
    for (st, p) in spec.initial_distribution().iter().enumerate() {
        cur[at(0, st, zero_idx)] += p;
    }
    let mut hit_mass = 0.0;
    let passage = event.passage();
    // step 0 passage check
    if let Some(ps) = passage {
        if holds(ps.direction, 0.0, ps.barrier) {
            match event {
                EventSpec::FirstPassageBeforeT { .. } => return Ok(1.0),
                _ => {
                    for st in 0..k {
                        let m = cur[at(0, st, zero_idx)];
                        cur[at(0, st, zero_idx)] = 0.0;
                        cur[at(1, st, zero_idx)] += m;
                    }
                }
            }
        }
    }
    for _step in 1..=n {
        let mut next = vec![0.0; layers * k * width];
        for layer in 0..layers {
            for i in 0..k {
                for idx in 0..width {
                    let m = cur[at(layer, i, idx)];
                    if m == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        let pij = spec.transition[i][j];
                        if pij == 0.0 {
                            continue;
                        }
                        for &(v, pv) in &support[i][j] {
                            let ni = (idx as i64 + v) as usize;
                            let y = v as f64 * h;
                            let w = m * pij * pv * factor(i, j, y);
                            let s = value(ni);
                            match (event, passage) {
                                (EventSpec::FirstPassageBeforeT { .. }, Some(ps)) => {
                                    if holds(ps.direction, s, ps.barrier) {
                                        hit_mass += w;
                                    } else {
                                        next[at(0, j, ni)] += w;
                                    }
                                }
                                (EventSpec::JointPassageAndTerminal { .. }, Some(ps)) => {
                                    let l = if layer == 1 || holds(ps.direction, s, ps.barrier) { 1 } else { 0 };
                                    next[at(l, j, ni)] += w;
                                }
                                _ => next[at(0, j, ni)] += w,
                            }
                        }
                    }
                }
            }
        }
        cur = next;
    }
    match event {
        EventSpec::FirstPassageBeforeT { .. } => Ok(hit_mass),
        EventSpec::FixedTimeThreshold {
            threshold, direction, ..
        } => Ok((0..k)
            .flat_map(|st| (0..width).map(move |idx| (st, idx)))
            .filter(|&(_, idx)| holds(*direction, value(idx), *threshold))
            .map(|(st, idx)| cur[at(0, st, idx)])
            .sum()),
        EventSpec::JointPassageAndTerminal { terminal, .. } => Ok((0..k)
            .flat_map(|st| (0..width).map(move |idx| (st, idx)))
            .filter(|&(_, idx)| holds(terminal.direction, value(idx), terminal.threshold))
            .map(|(st, idx)| cur[at(1, st, idx)])
            .sum()),
    }
}
