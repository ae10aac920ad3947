//! Heston stochastic volatility on a time grid: the variance follows the
//! exact CIR transition and the log-price increment is Gaussian given the
//! variance at both ends of the step.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::affine::AffineSpec;
use crate::error::{Error, Result};
use crate::mrw::{Direction, EventSpec, Interval, MarkovRandomWalk, TiltDomain};
use crate::rng::PathRng;
use crate::tilting::LinkKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HestonParams {
    pub mu: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub rho: f64,
    pub dt: f64,
    /// Starting variance; the long-run level `alpha` when absent.
    #[serde(default)]
    pub x0: Option<f64>,
}

impl HestonParams {
    pub fn table1() -> Self {
        Self {
            mu: 0.02,
            kappa: 3.0,
            alpha: 0.015,
            sigma: 0.25,
            rho: 0.05,
            dt: 1.0 / 120.0,
            x0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [("kappa", self.kappa), ("alpha", self.alpha), ("sigma", self.sigma), ("dt", self.dt)];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("heston {name} must be positive, got {v}")));
            }
        }
        if !self.mu.is_finite() || !(self.rho.abs() < 1.0) {
            return Err(Error::Validation("heston needs finite mu and |rho| < 1".into()));
        }
        if 2.0 * self.kappa * self.alpha < self.sigma * self.sigma {
            return Err(Error::Validation(format!(
                "Feller condition fails: 2 kappa alpha = {} < sigma^2 = {}",
                2.0 * self.kappa * self.alpha,
                self.sigma * self.sigma
            )));
        }
        if let Some(x0) = self.x0 {
            if !(x0 > 0.0) {
                return Err(Error::Validation("heston x0 must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Heston {
    p: HestonParams,
    /// `C = sigma^2 (1 - e^{-kappa dt}) / (4 kappa)`
    big_c: f64,
    /// `c = 4 kappa e^{-kappa dt} / (sigma^2 (1 - e^{-kappa dt}))`
    small_c: f64,
    /// `d = 4 kappa alpha / sigma^2`
    dof: f64,
    gamma0: Gamma<f64>,
}

pub fn build_heston(p: HestonParams) -> Result<Heston> {
    p.validate()?;
    let e = (-p.kappa * p.dt).exp();
    let big_c = p.sigma * p.sigma * (1.0 - e) / (4.0 * p.kappa);
    let small_c = 4.0 * p.kappa * e / (p.sigma * p.sigma * (1.0 - e));
    let dof = 4.0 * p.kappa * p.alpha / (p.sigma * p.sigma);
    let gamma0 = Gamma::new(dof / 2.0, 2.0).map_err(|e| Error::Validation(e.to_string()))?;
    Ok(Heston {
        p,
        big_c,
        small_c,
        dof,
        gamma0,
    })
}

impl Heston {
    pub fn params(&self) -> &HestonParams {
        &self.p
    }

    pub fn constants(&self) -> (f64, f64, f64) {
        (self.big_c, self.small_c, self.dof)
    }

    /// Upper end of the `eta` domain, `1 / (2C)`.
    pub fn eta_sup(&self) -> f64 {
        1.0 / (2.0 * self.big_c)
    }

    /// `P(S_n > log(b / S_0))` over `n` steps.
    pub fn tail_event(&self, n: usize, b_over_s0: f64) -> EventSpec {
        EventSpec::fixed_time(n, 0, b_over_s0.ln(), Direction::Above)
    }

    /// Conditional mean of `Y` under the original measure.
    pub fn increment_mean(&self, x: f64, next: f64) -> f64 {
        let p = &self.p;
        (p.mu - 0.5 * x - p.rho / p.sigma * p.kappa * (p.alpha - x)) * p.dt + p.rho / p.sigma * (next - x)
    }

    pub fn increment_var(&self, x: f64) -> f64 {
        x * (1.0 - self.p.rho * self.p.rho) * self.p.dt
    }

    /// Moments of the untilted transition: `C (d + c x)` and `C^2 (2d + 4cx)`.
    pub fn transition_moments(&self, x: f64) -> (f64, f64) {
        let (cc, c, d) = (self.big_c, self.small_c, self.dof);
        (cc * (d + c * x), cc * cc * (2.0 * d + 4.0 * c * x))
    }
}

impl MarkovRandomWalk for Heston {
    type State = f64;

    fn incr_dim(&self) -> usize {
        1
    }
    fn theta_dim(&self) -> usize {
        1
    }
    fn eta_dim(&self) -> usize {
        1
    }
    fn link_kind(&self) -> LinkKind {
        LinkKind::LinearInState
    }
    fn tilt_domain(&self) -> TiltDomain {
        TiltDomain {
            theta: vec![Interval::REAL_LINE],
            eta: vec![Interval::below(self.eta_sup())],
        }
    }

    fn initial_state(&self, _rng: &mut PathRng) -> f64 {
        self.p.x0.unwrap_or(self.p.alpha)
    }

    fn sample_transition(&self, &x: &f64, eta: &[f64], rng: &mut PathRng) -> std::result::Result<f64, String> {
        let e = eta[0];
        let q = 1.0 - 2.0 * e * self.big_c;
        if !(q > 0.0) {
            return Err(format!("eta = {e} outside the transition domain"));
        }
        let lambda = self.small_c * x / (2.0 * q);
        let n = if lambda > 0.0 {
            Poisson::new(lambda).map_err(|err| err.to_string())?.sample(rng)
        } else {
            0.0
        };
        let g = if n == 0.0 && e == 0.0 {
            self.gamma0.sample(rng)
        } else {
            Gamma::new(self.dof / 2.0 + n, 1.0 / (0.5 - e * self.big_c))
                .map_err(|err| err.to_string())?
                .sample(rng)
        };
        let next = self.big_c * g;
        if !next.is_finite() || next < 0.0 {
            return Err(format!("variance draw {next}"));
        }
        Ok(next)
    }

    fn sample_increment(&self, &x: &f64, &next: &f64, theta: &[f64], rng: &mut PathRng, out: &mut [f64]) {
        let v = self.increment_var(x);
        let z: f64 = StandardNormal.sample(rng);
        out[0] = self.increment_mean(x, next) + theta[0] * v + v.sqrt() * z;
    }

    fn psi(&self, &x: &f64, &next: &f64, theta: &[f64]) -> f64 {
        let t = theta[0];
        self.increment_mean(x, next) * t + 0.5 * self.increment_var(x) * t * t
    }

    fn dpsi_dtheta(&self, &x: &f64, &next: &f64, theta: &[f64], out: &mut [f64]) {
        out[0] = self.increment_mean(x, next) + self.increment_var(x) * theta[0];
    }

    fn d2psi_dtheta2(&self, &x: &f64, _next: &f64, _theta: &[f64], out: &mut [f64]) {
        out[0] = self.increment_var(x);
    }

    fn link(&self, _x: &f64, &next: &f64, eta: &[f64]) -> f64 {
        eta[0] * next
    }

    fn dlink_deta(&self, _x: &f64, &next: &f64, _eta: &[f64], out: &mut [f64]) {
        out[0] = next;
    }

    fn phi(&self, &x: &f64, eta: &[f64]) -> f64 {
        let e = eta[0];
        if e == 0.0 {
            return 0.0;
        }
        let q = 1.0 - 2.0 * e * self.big_c;
        self.small_c * self.big_c * e * x / q - 0.5 * self.dof * q.ln()
    }

    fn dphi_deta(&self, &x: &f64, eta: &[f64], out: &mut [f64]) {
        let q = 1.0 - 2.0 * eta[0] * self.big_c;
        out[0] = self.small_c * self.big_c * x / (q * q) + self.dof * self.big_c / q;
    }

    fn transition_hessian(&self, &x: &f64, _next: &f64, eta: &[f64], out: &mut [f64]) {
        let cc = self.big_c;
        let q = 1.0 - 2.0 * eta[0] * cc;
        out[0] = 4.0 * self.small_c * cc * cc * x / (q * q * q) + 2.0 * self.dof * cc * cc / (q * q);
    }
}

impl AffineSpec for Heston {
    fn state_dim(&self) -> usize {
        1
    }
    fn incr_dim(&self) -> usize {
        1
    }
    fn eta_domain(&self) -> Vec<Interval> {
        vec![Interval::below(self.eta_sup())]
    }
    fn c1(&self, eta: &[f64]) -> Vec<f64> {
        let e = eta[0];
        vec![self.small_c * self.big_c * e / (1.0 - 2.0 * e * self.big_c)]
    }
    fn c1_jacobian(&self, eta: &[f64]) -> DMatrix<f64> {
        let q = 1.0 - 2.0 * eta[0] * self.big_c;
        DMatrix::from_element(1, 1, self.small_c * self.big_c / (q * q))
    }
    fn c2(&self, eta: &[f64]) -> f64 {
        -0.5 * self.dof * (1.0 - 2.0 * eta[0] * self.big_c).ln()
    }
    fn c2_grad(&self, eta: &[f64]) -> Vec<f64> {
        vec![self.dof * self.big_c / (1.0 - 2.0 * eta[0] * self.big_c)]
    }
    fn d0(&self, theta: &[f64]) -> Vec<f64> {
        vec![self.p.rho / self.p.sigma * theta[0]]
    }
    fn d1(&self, theta: &[f64]) -> Vec<f64> {
        let p = &self.p;
        let t = theta[0];
        vec![(-0.5 + p.rho * p.kappa / p.sigma) * p.dt * t - p.rho / p.sigma * t
            + 0.5 * (1.0 - p.rho * p.rho) * p.dt * t * t]
    }
    fn d2(&self, theta: &[f64]) -> f64 {
        let p = &self.p;
        (p.mu - p.rho * p.kappa * p.alpha / p.sigma) * p.dt * theta[0]
    }
    fn d0_jacobian(&self, _theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.p.rho / self.p.sigma)
    }
    fn d1_jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let p = &self.p;
        DMatrix::from_element(
            1,
            1,
            (-0.5 + p.rho * p.kappa / p.sigma) * p.dt - p.rho / p.sigma + (1.0 - p.rho * p.rho) * p.dt * theta[0],
        )
    }
    fn d2_grad(&self, _theta: &[f64]) -> Vec<f64> {
        let p = &self.p;
        vec![(p.mu - p.rho * p.kappa * p.alpha / p.sigma) * p.dt]
    }
}
