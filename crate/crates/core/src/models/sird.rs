//! Stochastic SIRD epidemic on a daily Euler grid, tilted through a
//! diffusion basis that re-parameterizes the drift rates.

use nalgebra::{DMatrix, DVector, Matrix3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrw::{Direction, EventSpec, MarkovRandomWalk, TiltDomain};
use crate::rng::PathRng;
use crate::tilting::LinkKind;

/// A diffusion `dX = b dt + sigma dW` with a state-dependent basis for the
/// drift control: under `eta` the drift becomes `b + sigma sigma' B eta`.
pub trait DiffusionBasis {
    fn state_dim(&self) -> usize;
    fn basis_dim(&self) -> usize;
    fn dt(&self) -> f64;
    fn drift(&self, x: &[f64]) -> DVector<f64>;
    fn diffusion_factor(&self, x: &[f64]) -> DMatrix<f64>;
    /// `state_dim x basis_dim`.
    fn basis(&self, x: &[f64]) -> DMatrix<f64>;

    fn tilted_drift(&self, x: &[f64], eta: &[f64]) -> DVector<f64> {
        let s = self.diffusion_factor(x);
        self.drift(x) + &s * s.transpose() * self.basis(x) * DVector::from_column_slice(eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SirdParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub n0: f64,
    pub i0: f64,
    #[serde(default = "one")]
    pub dt: f64,
    /// Overflow level as a fraction of `n0`.
    pub barrier_fraction: f64,
    /// Horizon in steps.
    pub horizon: usize,
}

fn one() -> f64 {
    1.0
}

impl SirdParams {
    pub fn table2() -> Self {
        Self {
            alpha: 0.319,
            beta: 0.1,
            gamma: 0.00147,
            n0: 5e6,
            i0: 100.0,
            dt: 1.0,
            barrier_fraction: 0.3325,
            horizon: 100,
        }
    }

    pub fn barrier(&self) -> f64 {
        self.barrier_fraction * self.n0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("dt", self.dt)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("sird {name} must be positive, got {v}")));
            }
        }
        if !(self.n0 > 0.0) || !(self.i0 >= 0.0) || self.i0 >= self.n0 {
            return Err(Error::Validation(format!(
                "sird needs 0 <= i0 < n0, got i0 = {}, n0 = {}",
                self.i0, self.n0
            )));
        }
        if !(self.barrier_fraction > 0.0) {
            return Err(Error::Validation("sird barrier_fraction must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Validation("sird horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Compartment sizes. `raw` holds the Euler draw of `(S, I, R)` before the
/// zero floor was applied; the likelihood ratio is written in terms of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirdState {
    pub s: f64,
    pub i: f64,
    pub r: f64,
    pub d: f64,
    pub raw: [f64; 3],
}

impl SirdState {
    pub fn sir(&self) -> [f64; 3] {
        [self.s, self.i, self.r]
    }

    pub fn total(&self) -> f64 {
        self.s + self.i + self.r + self.d
    }
}

#[derive(Debug, Clone)]
pub struct Sird {
    p: SirdParams,
}

pub fn build_sird(p: SirdParams) -> Result<Sird> {
    p.validate()?;
    Ok(Sird { p })
}

/// Per-state quantities shared by the weight and sampler.
struct Local {
    /// `S I / N`
    sin: f64,
    i: f64,
    /// entries of the diffusion factor: `sqrt(alpha SI/N)`, `sqrt(beta I)`, `sqrt(gamma I)`
    a: f64,
    b: f64,
    g: f64,
    drift: [f64; 3],
}

impl Sird {
    pub fn params(&self) -> &SirdParams {
        &self.p
    }

    /// `P(tau_c < T)` with `c = barrier_fraction * n0`, expressed on the
    /// increment sums `S_n = I_n - I_0`.
    pub fn overflow_event(&self) -> EventSpec {
        EventSpec::first_passage(1, self.p.barrier() - self.p.i0, self.p.horizon, Direction::Above)
    }

    fn local(&self, x: &SirdState) -> Local {
        let (s, i, r) = (x.s, x.i, x.r);
        let n = s + i + r;
        let sin = if n > 0.0 { s * i / n } else { 0.0 };
        let p = &self.p;
        Local {
            sin,
            i,
            a: (p.alpha * sin).sqrt(),
            b: (p.beta * i).sqrt(),
            g: (p.gamma * i).sqrt(),
            drift: [-p.alpha * sin, p.alpha * sin - (p.beta + p.gamma) * i, p.beta * i],
        }
    }

    /// `M eta`, the drift shift produced by the rate perturbation `eta`.
    fn shift(l: &Local, eta: &[f64]) -> [f64; 3] {
        [
            -l.sin * eta[0],
            l.sin * eta[1] - l.i * (eta[2] + eta[3]),
            l.i * eta[4],
        ]
    }

    /// `M' v`.
    fn shift_adjoint(l: &Local, v: &[f64; 3]) -> [f64; 5] {
        [-l.sin * v[0], l.sin * v[1], -l.i * v[1], -l.i * v[1], l.i * v[2]]
    }

    fn sigma_sigma_t(l: &Local) -> Matrix3<f64> {
        let (a2, b2, g2) = (l.a * l.a, l.b * l.b, l.g * l.g);
        Matrix3::new(a2, -a2, 0.0, -a2, a2 + b2 + g2, -b2, 0.0, -b2, b2)
    }

    /// Solves `sigma sigma' u = v`, through the factor when it is well
    /// conditioned and by a Tikhonov-regularized inverse otherwise.
    fn solve(l: &Local, v: &[f64; 3]) -> [f64; 3] {
        let sig = Self::sigma_sigma_t(l);
        let tr = sig.trace();
        let floor = 1e-12 * tr;
        if l.a * l.a > floor && l.b * l.b > floor && l.g * l.g > floor {
            let w1 = -v[0] / l.a;
            let w2 = v[2] / l.b;
            let w3 = -(v[0] + v[1] + v[2]) / l.g;
            let u2 = -w3 / l.g;
            let u3 = u2 + w2 / l.b;
            let u1 = u2 - w1 / l.a;
            return [u1, u2, u3];
        }
        let reg = sig + Matrix3::identity() * floor.max(f64::MIN_POSITIVE);
        match reg.try_inverse() {
            Some(inv) => {
                let u = inv * nalgebra::Vector3::new(v[0], v[1], v[2]);
                [u[0], u[1], u[2]]
            }
            None => [0.0; 3],
        }
    }

    fn residual(&self, x: &SirdState, l: &Local, next: &SirdState) -> [f64; 3] {
        let dt = self.p.dt;
        let cur = x.sir();
        std::array::from_fn(|j| next.raw[j] - cur[j] - l.drift[j] * dt)
    }
}

impl DiffusionBasis for Sird {
    fn state_dim(&self) -> usize {
        3
    }
    fn basis_dim(&self) -> usize {
        5
    }
    fn dt(&self) -> f64 {
        self.p.dt
    }
    fn drift(&self, x: &[f64]) -> DVector<f64> {
        let l = self.local(&state_from(x));
        DVector::from_column_slice(&l.drift)
    }
    fn diffusion_factor(&self, x: &[f64]) -> DMatrix<f64> {
        let l = self.local(&state_from(x));
        DMatrix::from_row_slice(3, 3, &[-l.a, 0.0, 0.0, l.a, -l.b, -l.g, 0.0, l.b, 0.0])
    }
    fn basis(&self, x: &[f64]) -> DMatrix<f64> {
        let l = self.local(&state_from(x));
        let mut out = DMatrix::zeros(3, 5);
        for k in 0..5 {
            let mut e = [0.0; 5];
            e[k] = 1.0;
            let u = Self::solve(&l, &Self::shift(&l, &e));
            for j in 0..3 {
                out[(j, k)] = u[j];
            }
        }
        out
    }
}

fn state_from(x: &[f64]) -> SirdState {
    SirdState {
        s: x[0],
        i: x[1],
        r: x[2],
        d: 0.0,
        raw: [x[0], x[1], x[2]],
    }
}

impl MarkovRandomWalk for Sird {
    type State = SirdState;

    fn incr_dim(&self) -> usize {
        3
    }
    fn theta_dim(&self) -> usize {
        0
    }
    fn eta_dim(&self) -> usize {
        5
    }
    fn link_kind(&self) -> LinkKind {
        LinkKind::DiffusionBasis
    }
    fn tilt_domain(&self) -> TiltDomain {
        TiltDomain::unbounded(0, 5)
    }

    fn initial_state(&self, _rng: &mut PathRng) -> SirdState {
        let p = &self.p;
        let s = p.n0 - p.i0;
        SirdState {
            s,
            i: p.i0,
            r: 0.0,
            d: 0.0,
            raw: [s, p.i0, 0.0],
        }
    }

    fn is_absorbing(&self, x: &SirdState) -> bool {
        x.i <= 0.0
    }

    fn sample_transition(&self, x: &SirdState, eta: &[f64], rng: &mut PathRng) -> std::result::Result<SirdState, String> {
        let l = self.local(x);
        let dt = self.p.dt;
        let h = dt.sqrt();
        let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let m = if eta.iter().any(|&v| v != 0.0) {
            Self::shift(&l, eta)
        } else {
            [0.0; 3]
        };
        let raw = [
            x.s + (l.drift[0] + m[0]) * dt - h * l.a * e[0],
            x.i + (l.drift[1] + m[1]) * dt + h * (l.a * e[0] - l.b * e[1] - l.g * e[2]),
            x.r + (l.drift[2] + m[2]) * dt + h * l.b * e[1],
        ];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err("non-finite compartment".into());
        }
        let d = x.d - (raw[0] - x.s) - (raw[1] - x.i) - (raw[2] - x.r);
        Ok(SirdState {
            s: raw[0].max(0.0),
            i: raw[1].max(0.0),
            r: raw[2].max(0.0),
            d,
            raw,
        })
    }

    fn sample_increment(&self, x: &SirdState, next: &SirdState, _theta: &[f64], _rng: &mut PathRng, out: &mut [f64]) {
        out[0] = next.s - x.s;
        out[1] = next.i - x.i;
        out[2] = next.r - x.r;
    }

    fn psi(&self, _x: &SirdState, _next: &SirdState, _theta: &[f64]) -> f64 {
        0.0
    }
    fn dpsi_dtheta(&self, _x: &SirdState, _next: &SirdState, _theta: &[f64], _out: &mut [f64]) {}
    fn d2psi_dtheta2(&self, _x: &SirdState, _next: &SirdState, _theta: &[f64], _out: &mut [f64]) {}

    fn link(&self, x: &SirdState, next: &SirdState, eta: &[f64]) -> f64 {
        let l = self.local(x);
        let u = Self::solve(&l, &Self::shift(&l, eta));
        u.iter().zip(&next.raw).map(|(a, b)| a * b).sum()
    }

    fn dlink_deta(&self, x: &SirdState, next: &SirdState, _eta: &[f64], out: &mut [f64]) {
        let l = self.local(x);
        let z = Self::solve(&l, &next.raw);
        out.copy_from_slice(&Self::shift_adjoint(&l, &z));
    }

    fn phi(&self, x: &SirdState, eta: &[f64]) -> f64 {
        let l = self.local(x);
        let m = Self::shift(&l, eta);
        let u = Self::solve(&l, &m);
        let dt = self.p.dt;
        let cur = x.sir();
        (0..3).map(|j| u[j] * (cur[j] + l.drift[j] * dt) + 0.5 * dt * u[j] * m[j]).sum()
    }

    fn dphi_deta(&self, x: &SirdState, eta: &[f64], out: &mut [f64]) {
        let l = self.local(x);
        let dt = self.p.dt;
        let cur = x.sir();
        let m = Self::shift(&l, eta);
        let v: [f64; 3] = std::array::from_fn(|j| cur[j] + l.drift[j] * dt + dt * m[j]);
        let z = Self::solve(&l, &v);
        out.copy_from_slice(&Self::shift_adjoint(&l, &z));
    }

    fn transition_hessian(&self, x: &SirdState, _next: &SirdState, _eta: &[f64], out: &mut [f64]) {
        let l = self.local(x);
        let dt = self.p.dt;
        for k in 0..5 {
            let mut e = [0.0; 5];
            e[k] = 1.0;
            let z = Self::solve(&l, &Self::shift(&l, &e));
            let col = Self::shift_adjoint(&l, &z);
            for j in 0..5 {
                out[j * 5 + k] = dt * col[j];
            }
        }
    }

    fn transition_log_ratio(&self, x: &SirdState, next: &SirdState, eta: &[f64]) -> f64 {
        let l = self.local(x);
        let m = Self::shift(&l, eta);
        let u = Self::solve(&l, &m);
        let r = self.residual(x, &l, next);
        let dt = self.p.dt;
        (0..3).map(|j| u[j] * r[j] - 0.5 * dt * u[j] * m[j]).sum()
    }

    fn transition_log_ratio_grad(&self, x: &SirdState, next: &SirdState, eta: &[f64], out: &mut [f64]) {
        let l = self.local(x);
        let dt = self.p.dt;
        let m = Self::shift(&l, eta);
        let r = self.residual(x, &l, next);
        let v: [f64; 3] = std::array::from_fn(|j| r[j] - dt * m[j]);
        let z = Self::solve(&l, &v);
        out.copy_from_slice(&Self::shift_adjoint(&l, &z));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrw::{simulate_path, TiltParams};
    use crate::rng::path_rng;

    fn model() -> Sird {
        build_sird(SirdParams::table2()).unwrap()
    }

    fn at(s: f64, i: f64, r: f64) -> SirdState {
        SirdState { s, i, r, d: 0.0, raw: [s, i, r] }
    }

    #[test]
    fn basis_reproduces_alpha_minus_shift() {
        let m = model();
        let x = [4.9e6, 1e5, 0.0];
        let eta = [0.01, 0.0, 0.0, 0.0, 0.0];
        let diff = m.tilted_drift(&x, &eta) - m.drift(&x);
        let sin = 4.9e6 * 1e5 / 5e6;
        assert!((diff[0] + 0.01 * sin).abs() < 1e-8 * sin);
        assert!(diff[1].abs() < 1e-8 * sin);
        assert!(diff[2].abs() < 1e-8 * sin);
    }

    #[test]
    fn tilted_drift_matches_perturbed_rates() {
        let m = model();
        let p = m.params();
        let (s, i, r) = (3.0e6, 4.0e5, 1.6e6);
        let n = s + i + r;
        let eta = [0.002, -0.003, 0.01, 0.0004, -0.02];
        let (am, ap, bm, gm, bp) = (p.alpha + eta[0], p.alpha + eta[1], p.beta + eta[2], p.gamma + eta[3], p.beta + eta[4]);
        let want = [-am * s * i / n, ap * s * i / n - (bm + gm) * i, bp * i];
        let got = m.tilted_drift(&[s, i, r], &eta);
        for j in 0..3 {
            assert!((got[j] - want[j]).abs() < 1e-7 * want[j].abs().max(1.0), "{j}");
        }
    }

    #[test]
    fn phi_matches_basis_form() {
        let m = model();
        let x = at(4.0e6, 2.0e5, 8.0e5);
        let eta = [0.001, 0.002, -0.001, 0.0001, 0.003];
        let xs = [x.s, x.i, x.r];
        let b = m.basis(&xs);
        let s = m.diffusion_factor(&xs);
        let be = &b * DVector::from_column_slice(&eta);
        let mean = DVector::from_column_slice(&xs) + m.drift(&xs) * m.dt();
        let want = be.dot(&mean) + 0.5 * m.dt() * (be.transpose() * &s * s.transpose() * &be)[(0, 0)];
        let got = m.phi(&x, &eta);
        assert!((got - want).abs() < 1e-8 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn stable_ratio_equals_link_minus_phi() {
        let m = model();
        let x = at(4.0e6, 2.0e5, 8.0e5);
        let eta = [0.001, 0.002, -0.001, 0.0001, 0.003];
        let next = m.sample_transition(&x, &eta, &mut path_rng(1, 0)).unwrap();
        let a = m.transition_log_ratio(&x, &next, &eta);
        let b = m.link(&x, &next, &eta) - m.phi(&x, &eta);
        assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn log_ratio_gradient_matches_finite_differences() {
        let m = model();
        let x = at(4.0e6, 2.0e5, 8.0e5);
        let eta = [0.001, 0.002, -0.001, 0.0001, 0.003];
        let next = m.sample_transition(&x, &eta, &mut path_rng(2, 0)).unwrap();
        let mut g = [0.0; 5];
        m.transition_log_ratio_grad(&x, &next, &eta, &mut g);
        let mut hess = [0.0; 25];
        m.transition_hessian(&x, &next, &eta, &mut hess);
        for k in 0..5 {
            let h = 1e-7;
            let mut ep = eta;
            ep[k] += h;
            let mut em = eta;
            em[k] -= h;
            let fd = (m.transition_log_ratio(&x, &next, &ep) - m.transition_log_ratio(&x, &next, &em)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5 * g[k].abs().max(1.0), "grad {k}: {fd} vs {}", g[k]);
            let (mut gp, mut gm) = ([0.0; 5], [0.0; 5]);
            m.transition_log_ratio_grad(&x, &next, &ep, &mut gp);
            m.transition_log_ratio_grad(&x, &next, &em, &mut gm);
            for j in 0..5 {
                let fdh = -(gp[j] - gm[j]) / (2.0 * h);
                assert!((fdh - hess[j * 5 + k]).abs() < 1e-4 * hess[j * 5 + k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_tilt_is_plain_euler() {
        let m = model();
        let e = m.overflow_event();
        let rec = simulate_path(&m, &TiltParams::zeros(0, 5), &e, &mut path_rng(5, 0)).unwrap();
        assert_eq!(rec.log_weight, 0.0);
    }

    #[test]
    fn conservation_before_clamping() {
        let m = model();
        let e = m.overflow_event();
        let eta = TiltParams::new(vec![], vec![0.0005, 0.001, -0.002, 0.0, 0.001]);
        for i in 0..20 {
            let rec = simulate_path(&m, &eta, &e, &mut path_rng(9, i)).unwrap();
            for st in &rec.states {
                if st.raw.iter().all(|&v| v >= 0.0) {
                    assert!((st.total() - 5e6).abs() < 1e-9 * 5e6);
                } else {
                    break;
                }
            }
        }
    }

    #[test]
    fn zero_infected_absorbs_immediately() {
        let mut p = SirdParams::table2();
        p.i0 = 0.0;
        let m = build_sird(p).unwrap();
        let rec = simulate_path(&m, &TiltParams::new(vec![], vec![0.01; 5]), &m.overflow_event(), &mut path_rng(1, 1)).unwrap();
        assert!(rec.absorbed);
        assert_eq!(rec.stop_step, 0);
        assert!(!rec.event_hit());
    }

    #[test]
    fn validation_rejects_bad_rates() {
        let mut p = SirdParams::table2();
        p.beta = 0.0;
        assert!(build_sird(p).is_err());
        let mut p = SirdParams::table2();
        p.i0 = p.n0;
        assert!(build_sird(p).is_err());
    }
}
