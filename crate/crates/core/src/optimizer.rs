//! Stage 1: projected stochastic approximation on `log G(theta, eta)`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrw::{map_paths, walk, Direction, EventSpec, MarkovRandomWalk, StepObserver, TiltParams};
use crate::rng::{derive_seed, label};
use crate::tilting::{evaluate_objective, ObjectiveOptions};

const MAX_BATCH: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    /// Plain normalized gradient, `-grad log G`.
    Identity,
    /// Damped Newton direction from the sampled Hessian of `log G`.
    #[default]
    Newton,
}

/// Coordinates the search runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Free,
    /// `theta = u / sqrt(n)`, `eta = u / sqrt(n) + v / n` for a walk of
    /// length `n`; needs `theta_dim == eta_dim`.
    LanConstrained { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub initial: Option<TiltParams>,
    pub iterations: usize,
    pub batch_size: usize,
    pub a0: f64,
    pub kappa: f64,
    pub gamma: f64,
    /// Relative margin used to keep iterates inside the tilt domain.
    pub margin: f64,
    pub preconditioner: Preconditioner,
    pub parameterization: Parameterization,
    /// Stop once the gradient is within twice its standard error this many
    /// times in a row (0 disables).
    pub patience: usize,
    pub min_iterations: usize,
    /// Measure for the objective batches; the original one when absent.
    pub pilot: Option<TiltParams>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            initial: None,
            iterations: 500,
            batch_size: 1024,
            a0: 0.1,
            kappa: 100.0,
            gamma: 1.0,
            margin: 1e-6,
            preconditioner: Preconditioner::Newton,
            parameterization: Parameterization::Free,
            patience: 3,
            min_iterations: 200,
            pilot: None,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.5 && self.gamma <= 1.0) {
            return Err(Error::Validation(format!("gamma must lie in (0.5, 1], got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(Error::Validation("batch_size must be at least 2".into()));
        }
        if !(self.a0 > 0.0) || !(self.kappa > 0.0) {
            return Err(Error::Validation("a0 and kappa must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Validation("iterations must be positive".into()));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::Validation("margin must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn step_size(&self, k: usize) -> f64 {
        self.a0 / (1.0 + k as f64 / self.kappa).powf(self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub g_estimate: f64,
    pub g_se: f64,
    pub grad_norm: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub tilt: TiltParams,
    pub trace: Vec<TraceRow>,
    /// Paths simulated in total, skipped batches included.
    pub samples_used: usize,
    pub converged: bool,
}

impl SearchResult {
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.trace {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn trace_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.trace {
            w.serialize(r)?;
        }
        let mut buf = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        buf.flush()?;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }
}

/// Linear map from search coordinates `u` to the tilt vector `J u`.
fn coordinates(cfg: &SgdConfig, td: usize, ed: usize) -> Result<DMatrix<f64>> {
    let p = td + ed;
    match cfg.parameterization {
        Parameterization::Free => Ok(DMatrix::identity(p, p)),
        Parameterization::LanConstrained { n } => {
            if td != ed || td == 0 || n == 0 {
                return Err(Error::Validation(
                    "the constrained parameterization needs theta_dim == eta_dim > 0 and n > 0".into(),
                ));
            }
            let (s, r) = (1.0 / (n as f64).sqrt(), 1.0 / n as f64);
            let mut j = DMatrix::zeros(p, p);
            for i in 0..td {
                j[(i, i)] = s;
                j[(td + i, i)] = s;
                j[(td + i, td + i)] = r;
            }
            Ok(j)
        }
    }
}

fn project(v: &mut [f64], bounds: &[(f64, f64)]) {
    for (x, &(lo, hi)) in v.iter_mut().zip(bounds) {
        *x = x.clamp(lo, hi);
    }
}

/// `-H^{-1} g` with the spectrum of `H` floored for stability.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let top = e.eigenvalues.amax();
    let floor = (top * 1e-6).max(1e-12);
    let inv = e.eigenvalues.map(|l| 1.0 / l.max(floor));
    let q = &e.eigenvectors;
    -(q * DMatrix::from_diagonal(&inv) * q.transpose() * g)
}

/// Minimizes `G` over the tilt domain by projected stochastic approximation
/// with fresh paths at every iteration, returning the last iterate.
pub fn search_tilt<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    event: &EventSpec,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<SearchResult> {
    cfg.validate()?;
    let (td, ed) = (model.theta_dim(), model.eta_dim());
    let p = td + ed;
    let domain = model.tilt_domain();
    let bounds = domain.projection_box(cfg.margin);
    let j = coordinates(cfg, td, ed)?;
    let j_inv = j
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Validation("degenerate parameterization".into()))?;

    let start = cfg.initial.clone().unwrap_or_else(|| TiltParams::zeros(td, ed));
    if start.theta.len() != td || start.eta.len() != ed {
        return Err(Error::Contract(format!(
            "initial tilt has dimensions ({}, {}), model expects ({td}, {ed})",
            start.theta.len(),
            start.eta.len()
        )));
    }
    let mut x = start.to_vec();
    project(&mut x, &bounds);
    model.check_domain(&TiltParams::from_slice(&x, td))?;

    let mut batch = cfg.batch_size;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut samples_used = 0usize;
    let mut streak = 0usize;
    let mut updated = 0usize;
    let mut converged = false;
    let base = derive_seed(seed, label("stage1"));

    for k in 0..cfg.iterations {
        let tilt = TiltParams::from_slice(&x, td);
        let opts = ObjectiveOptions {
            batch_size: batch,
            seed: derive_seed(base, k as u64),
            sampling: cfg.pilot.clone(),
            with_hessian: cfg.preconditioner == Preconditioner::Newton,
        };
        let est = evaluate_objective(model, &tilt, event, &opts)?;
        samples_used += batch;
        let newton = est.log_hessian.is_some();
        if est.no_hits() || (newton && est.hits < p + 2) {
            if batch == MAX_BATCH && updated == 0 {
                return Err(Error::SearchFailed(format!(
                    "{} event hits in {batch} paths at iteration {k}; supply a pilot tilt",
                    est.hits
                )));
            }
            log::debug!("iteration {k}: {} hits in {batch} paths, doubling the batch", est.hits);
            batch = (batch * 2).min(MAX_BATCH);
            continue;
        }
        let a = cfg.step_size(k);
        let g_u = j.transpose() * DVector::from_column_slice(&est.log_grad);
        let dir = match &est.log_hessian {
            Some(h) => {
                let h_u = j.transpose() * DMatrix::from_row_slice(p, p, h) * &j;
                newton_direction(&h_u, &g_u)
            }
            None => -g_u,
        };
        let u = &j_inv * DVector::from_column_slice(&x) + dir * a;
        let mut next: Vec<f64> = (&j * u).iter().copied().collect();
        project(&mut next, &bounds);
        if next.iter().all(|v| v.is_finite()) {
            x = next;
        }
        updated += 1;
        if batch > cfg.batch_size && est.hits >= 20 * (p + 2) {
            batch = (batch / 2).max(cfg.batch_size);
        }
        trace.push(TraceRow {
            iteration: k,
            g_estimate: est.value,
            g_se: est.std_error,
            grad_norm: est.grad_norm(),
            step_size: a,
        });
        if cfg.patience > 0 {
            if est.grad_norm() < 2.0 * est.grad_se_norm() {
                streak += 1;
            } else {
                streak = 0;
            }
            if streak >= cfg.patience && k + 1 >= cfg.min_iterations {
                converged = true;
                break;
            }
        }
    }
    if updated == 0 {
        return Err(Error::SearchFailed(format!(
            "no event hits in any of {} iterations (last batch {batch}); supply a pilot tilt",
            cfg.iterations
        )));
    }
    let tilt = TiltParams::from_slice(&x, td);
    model.check_domain(&tilt)?;
    Ok(SearchResult {
        tilt,
        trace,
        samples_used,
        converged,
    })
}

/// Intermediate levels for events too rare to hit from the starting tilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelSchedule {
    /// Fraction of pilot paths that should reach each intermediate level.
    pub rho: f64,
    pub pilot_paths: usize,
    pub max_levels: usize,
}

impl Default for LevelSchedule {
    fn default() -> Self {
        Self {
            rho: 0.1,
            pilot_paths: 4096,
            max_levels: 40,
        }
    }
}

impl LevelSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Validation(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.pilot_paths < 10 || self.max_levels == 0 {
            return Err(Error::Validation("pilot_paths must be at least 10 and max_levels positive".into()));
        }
        Ok(())
    }
}

/// Records the most extreme value of one partial-sum component.
struct Extreme {
    component: usize,
    sign: f64,
    sum: f64,
    best: f64,
}

impl<S> StepObserver<S> for Extreme {
    fn step(&mut self, _: usize, _: &S, _: &S, y: &[f64]) -> Result<()> {
        self.sum += y[self.component];
        self.best = self.best.max(self.sign * self.sum);
        Ok(())
    }
}

fn with_level(event: &EventSpec, level: f64) -> EventSpec {
    let mut e = *event;
    match &mut e {
        EventSpec::FixedTimeThreshold { threshold, .. } => *threshold = level,
        EventSpec::FirstPassageBeforeT { passage } => passage.barrier = level,
        EventSpec::JointPassageAndTerminal { passage, .. } => passage.barrier = level,
    }
    e
}

/// Runs [`search_tilt`] on a sequence of levels that ends at the event's own.
/// Each level is the `1 - rho` quantile of the path extremes under the
/// previous tilt, which then serves as the pilot measure for the next search.
/// Iteration settings in `cfg` apply per level.
pub fn search_tilt_multilevel<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    event: &EventSpec,
    cfg: &SgdConfig,
    schedule: &LevelSchedule,
    seed: u64,
) -> Result<SearchResult> {
    schedule.validate()?;
    event.validate(model.incr_dim())?;
    let (component, target, direction, fixed) = match event {
        EventSpec::FixedTimeThreshold {
            component,
            threshold,
            direction,
            ..
        } => (*component, *threshold, *direction, true),
        EventSpec::FirstPassageBeforeT { passage } | EventSpec::JointPassageAndTerminal { passage, .. } => {
            (passage.component, passage.barrier, passage.direction, false)
        }
    };
    let sign = match direction {
        Direction::Above => 1.0,
        Direction::Below => -1.0,
    };
    let goal = sign * target;
    let free_run = with_level(event, sign * f64::MAX);
    let mut tilt = cfg.initial.clone().unwrap_or_else(|| TiltParams::zeros_for(model));
    let mut trace = Vec::new();
    let mut samples_used = 0usize;
    let mut reached = f64::NEG_INFINITY;

    for level_idx in 0..schedule.max_levels {
        let pilot_seed = derive_seed(seed, label(&format!("level{level_idx}")));
        let extremes: Vec<Result<f64>> = map_paths(schedule.pilot_paths, pilot_seed, |_, rng| {
            let mut obs = Extreme {
                component,
                sign,
                sum: 0.0,
                best: if fixed { f64::NEG_INFINITY } else { 0.0 },
            };
            let out = walk(model, &tilt, &free_run, rng, &mut obs)?;
            Ok(if fixed { sign * out.terminal_sum[component] } else { obs.best })
        });
        let mut extremes: Vec<f64> = extremes.into_iter().collect::<Result<_>>()?;
        samples_used += schedule.pilot_paths;
        extremes.sort_by(f64::total_cmp);
        let idx = ((1.0 - schedule.rho) * extremes.len() as f64).floor() as usize;
        let q = extremes[idx.min(extremes.len() - 1)];
        let last = q >= goal;
        let level = if last { goal } else { q };
        if !last && level <= reached {
            return Err(Error::SearchFailed(format!(
                "level sequence stalled at {} after {level_idx} levels",
                sign * reached
            )));
        }
        reached = level;
        log::info!("level {level_idx}: {}", sign * level);
        let rung = SgdConfig {
            initial: Some(tilt.clone()),
            pilot: (!tilt.is_zero()).then(|| tilt.clone()),
            ..cfg.clone()
        };
        let res = search_tilt(model, &with_level(event, sign * level), &rung, derive_seed(seed, level_idx as u64))?;
        let offset = trace.len();
        trace.extend(res.trace.into_iter().map(|mut r| {
            r.iteration += offset;
            r
        }));
        samples_used += res.samples_used;
        tilt = res.tilt;
        if last {
            return Ok(SearchResult {
                tilt,
                trace,
                samples_used,
                converged: res.converged,
            });
        }
    }
    Err(Error::SearchFailed(format!(
        "target level {target} not reached within {} levels (last {})",
        schedule.max_levels,
        sign * reached
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrw::{build_finite_chain, FiniteChainSpec, IncrementLaw};

    fn gaussian_walk() -> crate::mrw::FiniteChain {
        let spec = FiniteChainSpec {
            transition: vec![vec![1.0]],
            increments: vec![vec![IncrementLaw::Gaussian { mean: 0.0, var: 1.0 }]],
            initial: None,
        };
        build_finite_chain(spec).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = SgdConfig::default();
        c.gamma = 0.5;
        assert!(c.validate().is_err());
        c.gamma = 1.0;
        c.batch_size = 1;
        assert!(c.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }

    #[test]
    fn step_schedule() {
        let c = SgdConfig::default();
        assert_eq!(c.step_size(0), 0.1);
        assert!((c.step_size(100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn newton_direction_on_quadratic() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = DVector::from_vec(vec![1.0, -1.0]);
        let d = newton_direction(&h, &g);
        let back = &h * d + g;
        assert!(back.amax() < 1e-12);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let m = gaussian_walk();
        let ev = EventSpec::fixed_time(4, 0, 4.0, Direction::Above);
        let cfg = SgdConfig {
            iterations: 30,
            batch_size: 512,
            ..SgdConfig::default()
        };
        let a = search_tilt(&m, &ev, &cfg, 11).unwrap();
        let b = search_tilt(&m, &ev, &cfg, 11).unwrap();
        assert_eq!(a.tilt, b.tilt);
        assert_eq!(a.trace, b.trace);
        let csv = a.trace_csv_string().unwrap();
        assert!(csv.starts_with("iteration,g_estimate,g_se,grad_norm,step_size"));
    }

    #[test]
    fn all_skipped_is_a_search_failure() {
        let m = gaussian_walk();
        let ev = EventSpec::fixed_time(1, 0, 40.0, Direction::Above);
        let cfg = SgdConfig {
            iterations: 3,
            batch_size: 16,
            ..SgdConfig::default()
        };
        assert!(matches!(search_tilt(&m, &ev, &cfg, 1), Err(Error::SearchFailed(_))));
    }
}
