//! Markov random walks `S_n = Y_1 + ... + Y_n` driven by a latent chain `X_n`,
//! simulated under any member of the duo-exponential tilting family.
//!
//! A model bundles the latent kernel `p(x, dx')`, the increment law
//! `rho(y | x, x')`, their cumulants `psi(x, x', theta)` and
//! `phi(x, eta) = log E_x[exp k(x, X_1, eta)]`, and the link function `k`.
//! Under tilt `(theta, eta)` the one-step law is
//! `exp(theta'y + k - psi - phi) p(x, dx') rho(y | x, x') dy`.

mod batch;
mod event;
pub mod finite;
pub mod oracle;
mod path;

pub use batch::map_paths;
pub use event::{Direction, EventSpec, FirstPassage, TerminalThreshold};
pub use finite::{build_finite_chain, FiniteChain, FiniteChainSpec, IncrementLaw};
pub use oracle::{exact_probability, exact_second_moment};
pub use path::{event_value, simulate_path, PathRecord};
pub(crate) use path::{walk, NoObserver, StepObserver};

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::rng::PathRng;
use crate::tilting::LinkKind;

/// Tilting parameters `(theta, eta)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TiltParams {
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
}

impl TiltParams {
    pub fn new(theta: Vec<f64>, eta: Vec<f64>) -> Self {
        Self { theta, eta }
    }

    pub fn zeros(theta_dim: usize, eta_dim: usize) -> Self {
        Self {
            theta: vec![0.0; theta_dim],
            eta: vec![0.0; eta_dim],
        }
    }

    pub fn zeros_for<M: MarkovRandomWalk + ?Sized>(model: &M) -> Self {
        Self::zeros(model.theta_dim(), model.eta_dim())
    }

    pub fn is_zero(&self) -> bool {
        self.theta.iter().chain(&self.eta).all(|&v| v == 0.0)
    }

    pub fn dim(&self) -> usize {
        self.theta.len() + self.eta.len()
    }

    /// `theta` followed by `eta`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.eta).copied().collect()
    }

    pub fn from_slice(v: &[f64], theta_dim: usize) -> Self {
        Self {
            theta: v[..theta_dim].to_vec(),
            eta: v[theta_dim..].to_vec(),
        }
    }
}

impl fmt::Display for TiltParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "theta={:?} eta={:?}", self.theta, self.eta)
    }
}

/// Open interval `(lo, hi)`; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const REAL_LINE: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn below(hi: f64) -> Self {
        Interval {
            lo: f64::NEG_INFINITY,
            hi,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v > self.lo && v < self.hi
    }

    /// Closed interval strictly inside this one, pulled in by `margin`
    /// relative to the magnitude of each finite end.
    pub fn shrink(&self, margin: f64) -> (f64, f64) {
        let lo = if self.lo.is_finite() {
            self.lo + margin * self.lo.abs().max(1.0)
        } else {
            f64::NEG_INFINITY
        };
        let hi = if self.hi.is_finite() {
            self.hi - margin * self.hi.abs().max(1.0)
        } else {
            f64::INFINITY
        };
        (lo, hi)
    }
}

/// Coordinate-wise description of `Theta x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltDomain {
    pub theta: Vec<Interval>,
    pub eta: Vec<Interval>,
}

impl TiltDomain {
    pub fn unbounded(theta_dim: usize, eta_dim: usize) -> Self {
        Self {
            theta: vec![Interval::REAL_LINE; theta_dim],
            eta: vec![Interval::REAL_LINE; eta_dim],
        }
    }

    pub fn check(&self, tilt: &TiltParams) -> Result<()> {
        if tilt.theta.len() != self.theta.len() || tilt.eta.len() != self.eta.len() {
            return Err(Error::Domain(format!(
                "expected dims ({}, {}), got ({}, {})",
                self.theta.len(),
                self.eta.len(),
                tilt.theta.len(),
                tilt.eta.len()
            )));
        }
        for (name, vals, ivs) in [
            ("theta", &tilt.theta, &self.theta),
            ("eta", &tilt.eta, &self.eta),
        ] {
            for (i, (&v, iv)) in vals.iter().zip(ivs.iter()).enumerate() {
                if !v.is_finite() || !iv.contains(v) {
                    return Err(Error::Domain(format!(
                        "{name}[{i}] = {v} not in ({}, {})",
                        iv.lo, iv.hi
                    )));
                }
            }
        }
        Ok(())
    }

    /// Projection box as `(lo, hi)` per coordinate of `TiltParams::to_vec`.
    pub fn projection_box(&self, margin: f64) -> Vec<(f64, f64)> {
        self.theta
            .iter()
            .chain(&self.eta)
            .map(|iv| iv.shrink(margin))
            .collect()
    }
}

/// A Markov random walk together with its tilting structure.
///
/// Increments with a deterministic conditional law (the additive part is a
/// function of `(x, x')`) report `theta_dim() == 0`: the increment tilt
/// cancels exactly in the likelihood ratio, so it is not a free parameter.
pub trait MarkovRandomWalk: Send + Sync {
    type State: Clone + Send + Sync + fmt::Debug + Serialize;

    /// Dimension `d` of the increments `Y`.
    fn incr_dim(&self) -> usize;
    /// Dimension of `theta`; either `d` or `0` for degenerate increments.
    fn theta_dim(&self) -> usize;
    /// Dimension `m` of `eta`.
    fn eta_dim(&self) -> usize;
    fn link_kind(&self) -> LinkKind;
    fn tilt_domain(&self) -> TiltDomain;

    fn check_domain(&self, tilt: &TiltParams) -> Result<()> {
        self.tilt_domain().check(tilt)
    }

    fn initial_state(&self, rng: &mut PathRng) -> Self::State;

    /// Paths stop (keeping their weight so far) once an absorbing state is
    /// reached.
    fn is_absorbing(&self, _x: &Self::State) -> bool {
        false
    }

    /// Draws `X'` from `p_eta(x, .)`. Errors carry a description; the walker
    /// attaches the step index.
    fn sample_transition(
        &self,
        x: &Self::State,
        eta: &[f64],
        rng: &mut PathRng,
    ) -> std::result::Result<Self::State, String>;

    /// Draws `Y` from `rho_theta(. | x, x')` into `out` (length `d`).
    fn sample_increment(
        &self,
        x: &Self::State,
        next: &Self::State,
        theta: &[f64],
        rng: &mut PathRng,
        out: &mut [f64],
    );

    fn psi(&self, x: &Self::State, next: &Self::State, theta: &[f64]) -> f64;
    fn dpsi_dtheta(&self, x: &Self::State, next: &Self::State, theta: &[f64], out: &mut [f64]);
    /// Row-major `theta_dim x theta_dim` Hessian of `psi`.
    fn d2psi_dtheta2(&self, x: &Self::State, next: &Self::State, theta: &[f64], out: &mut [f64]);

    fn link(&self, x: &Self::State, next: &Self::State, eta: &[f64]) -> f64;
    fn dlink_deta(&self, x: &Self::State, next: &Self::State, eta: &[f64], out: &mut [f64]);
    fn phi(&self, x: &Self::State, eta: &[f64]) -> f64;
    fn dphi_deta(&self, x: &Self::State, eta: &[f64], out: &mut [f64]);

    /// Row-major `m x m` Hessian in `eta` of `phi(x, eta) - k(x, x', eta)`.
    fn transition_hessian(&self, x: &Self::State, next: &Self::State, eta: &[f64], out: &mut [f64]);

    /// `k(x, x', eta) - phi(x, eta)`, the log density ratio of the tilted
    /// kernel. Models override this when the two terms cancel badly.
    fn transition_log_ratio(&self, x: &Self::State, next: &Self::State, eta: &[f64]) -> f64 {
        self.link(x, next, eta) - self.phi(x, eta)
    }

    /// Gradient in `eta` of [`Self::transition_log_ratio`].
    fn transition_log_ratio_grad(
        &self,
        x: &Self::State,
        next: &Self::State,
        eta: &[f64],
        out: &mut [f64],
    ) {
        let m = out.len();
        let mut dphi = vec![0.0; m];
        self.dlink_deta(x, next, eta, out);
        self.dphi_deta(x, eta, &mut dphi);
        for (o, p) in out.iter_mut().zip(dphi) {
            *o -= p;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
