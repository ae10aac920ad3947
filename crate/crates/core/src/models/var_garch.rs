//! Trivariate VAR(1) returns with diagonal-form GARCH(1,1) covariances.
//! The chain is `(y_t, H_{t+1})`; increments are the returns themselves.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrw::{Direction, EventSpec, FirstPassage, MarkovRandomWalk, TerminalThreshold, TiltDomain};
use crate::rng::PathRng;
use crate::tilting::LinkKind;

const PSD_TOL: f64 = 1e-10;

type M3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarGarchParams {
    pub mu: [f64; 3],
    /// Row-major.
    pub rho: M3,
    pub w: M3,
    pub a: M3,
    pub b: M3,
    pub horizon: usize,
}

fn scaled(m: M3, s: f64) -> M3 {
    m.map(|r| r.map(|v| v * s))
}

pub(crate) fn mat(m: &M3) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

fn arr(m: &Matrix3<f64>) -> M3 {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

impl VarGarchParams {
    pub fn table3() -> Self {
        let k = 1.0 / 360.0;
        Self {
            mu: [0.0; 3],
            rho: scaled([[0.3, 0.05, 0.1], [0.1, 0.2, 0.3], [0.1, 0.3, 0.2]], k),
            w: scaled([[0.2, 0.1, 0.01], [0.1, 0.4, 0.0], [0.01, 0.0, 0.9]], k),
            a: scaled(
                [[0.0815, 0.091, 0.0203], [0.091, 0.0632, 0.0322], [0.0203, 0.0322, 0.0958]],
                k,
            ),
            b: scaled(
                [[0.193, 0.1115, 0.1112], [0.1115, 0.0971, 0.1222], [0.1112, 0.1222, 0.1831]],
                k,
            ),
            horizon: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.mu.iter().chain(self.rho.iter().flatten()).chain(
            self.w.iter().flatten().chain(self.a.iter().flatten()).chain(self.b.iter().flatten()),
        );
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("var-garch parameters must be finite".into()));
        }
        for (name, m) in [("W", &self.w), ("A", &self.a), ("B", &self.b)] {
            let mm = mat(m);
            if (mm - mm.transpose()).abs().max() > 1e-14 {
                return Err(Error::Validation(format!("{name} must be symmetric")));
            }
        }
        if mat(&self.w).cholesky().is_none() {
            return Err(Error::Validation("W must be positive definite".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Validation("var-garch horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Coefficient matrix `G` of the Poisson solution `g(y, H) = G y`,
    /// `G = rho (I - rho)^{-1}`.
    pub fn poisson_coefficient(&self) -> Result<Matrix3<f64>> {
        let rho = mat(&self.rho);
        let radius = rho.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
        if radius >= 1.0 {
            return Err(Error::Spectral(format!("spectral radius of rho is {radius:.6}")));
        }
        let inv = (Matrix3::identity() - rho)
            .try_inverse()
            .ok_or_else(|| Error::Spectral("I - rho is singular".into()))?;
        Ok(rho * inv)
    }

    /// Stationary mean of `y`, `(I - rho)^{-1} mu`.
    pub fn stationary_mean(&self) -> Result<Vector3<f64>> {
        let inv = (Matrix3::identity() - mat(&self.rho))
            .try_inverse()
            .ok_or_else(|| Error::Spectral("I - rho is singular".into()))?;
        Ok(inv * Vector3::from(self.mu))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarGarchState {
    pub y: [f64; 3],
    /// Covariance of the next innovation.
    pub h: M3,
}

#[derive(Debug, Clone)]
pub struct VarGarch {
    p: VarGarchParams,
    rho: Matrix3<f64>,
    w: Matrix3<f64>,
    a: Matrix3<f64>,
    b: Matrix3<f64>,
}

pub fn build_var_garch(p: VarGarchParams) -> Result<VarGarch> {
    p.validate()?;
    Ok(VarGarch {
        rho: mat(&p.rho),
        w: mat(&p.w),
        a: mat(&p.a),
        b: mat(&p.b),
        p,
    })
}

/// Square-root factor of a covariance: Cholesky, falling back to the
/// eigen decomposition for matrices that are PSD only up to `PSD_TOL`.
fn factor(h: &Matrix3<f64>) -> std::result::Result<Matrix3<f64>, String> {
    if let Some(c) = h.cholesky() {
        return Ok(c.l());
    }
    let e = SymmetricEigen::new(*h);
    let min = e.eigenvalues.min();
    if min < -PSD_TOL {
        return Err(format!("H lost positive semidefiniteness (min eigenvalue {min:.3e})"));
    }
    let sq = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(e.eigenvectors * Matrix3::from_diagonal(&sq))
}

pub fn min_eigenvalue(h: &M3) -> f64 {
    SymmetricEigen::new(mat(h)).eigenvalues.min()
}

impl VarGarch {
    pub fn params(&self) -> &VarGarchParams {
        &self.p
    }

    fn predicted(&self, x: &VarGarchState) -> Vector3<f64> {
        Vector3::from(self.p.mu) + self.rho * Vector3::from(x.y)
    }

    /// `{S^0 hits b0 by T}`.
    pub fn distress_event(&self, b0: f64) -> EventSpec {
        EventSpec::first_passage(0, b0, self.p.horizon, Direction::Below)
    }

    /// `{S^j_T <= b, S^0 hits b0 by T}`.
    pub fn joint_event(&self, j: usize, b: f64, b0: f64) -> EventSpec {
        EventSpec::JointPassageAndTerminal {
            passage: FirstPassage {
                component: 0,
                barrier: b0,
                horizon: self.p.horizon,
                direction: Direction::Below,
            },
            terminal: TerminalThreshold {
                component: j,
                threshold: b,
                direction: Direction::Below,
            },
        }
    }

    /// `{S^j_T <= b}`.
    pub fn terminal_event(&self, j: usize, b: f64) -> EventSpec {
        EventSpec::fixed_time(self.p.horizon, j, b, Direction::Below)
    }
}

impl MarkovRandomWalk for VarGarch {
    type State = VarGarchState;

    fn incr_dim(&self) -> usize {
        3
    }
    fn theta_dim(&self) -> usize {
        0
    }
    fn eta_dim(&self) -> usize {
        3
    }
    fn link_kind(&self) -> LinkKind {
        LinkKind::LinearInState
    }
    fn tilt_domain(&self) -> TiltDomain {
        TiltDomain::unbounded(0, 3)
    }

    fn initial_state(&self, _rng: &mut PathRng) -> VarGarchState {
        VarGarchState {
            y: [0.0; 3],
            h: self.p.w,
        }
    }

    fn sample_transition(
        &self,
        x: &VarGarchState,
        eta: &[f64],
        rng: &mut PathRng,
    ) -> std::result::Result<VarGarchState, String> {
        let h = mat(&x.h);
        let l = factor(&h)?;
        let eps = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let mut z = l * eps;
        if eta.iter().any(|&v| v != 0.0) {
            z += h * Vector3::new(eta[0], eta[1], eta[2]);
        }
        let y = self.predicted(x) + z;
        let next_h = self.w + self.a.component_mul(&(z * z.transpose())) + self.b.component_mul(&h);
        if y.iter().chain(next_h.iter()).any(|v| !v.is_finite()) {
            return Err("non-finite return or covariance".into());
        }
        let next_h = arr(&next_h);
        let min = min_eigenvalue(&next_h);
        if min < -PSD_TOL {
            return Err(format!("H lost positive semidefiniteness (min eigenvalue {min:.3e})"));
        }
        Ok(VarGarchState { y: y.into(), h: next_h })
    }

    fn sample_increment(&self, _x: &VarGarchState, next: &VarGarchState, _theta: &[f64], _rng: &mut PathRng, out: &mut [f64]) {
        out.copy_from_slice(&next.y);
    }

    fn psi(&self, _x: &VarGarchState, _next: &VarGarchState, _theta: &[f64]) -> f64 {
        0.0
    }
    fn dpsi_dtheta(&self, _x: &VarGarchState, _next: &VarGarchState, _theta: &[f64], _out: &mut [f64]) {}
    fn d2psi_dtheta2(&self, _x: &VarGarchState, _next: &VarGarchState, _theta: &[f64], _out: &mut [f64]) {}

    fn link(&self, _x: &VarGarchState, next: &VarGarchState, eta: &[f64]) -> f64 {
        crate::mrw::dot(eta, &next.y)
    }

    fn dlink_deta(&self, _x: &VarGarchState, next: &VarGarchState, _eta: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&next.y);
    }

    fn phi(&self, x: &VarGarchState, eta: &[f64]) -> f64 {
        let e = Vector3::new(eta[0], eta[1], eta[2]);
        e.dot(&self.predicted(x)) + 0.5 * e.dot(&(mat(&x.h) * e))
    }

    fn dphi_deta(&self, x: &VarGarchState, eta: &[f64], out: &mut [f64]) {
        let e = Vector3::new(eta[0], eta[1], eta[2]);
        let g = self.predicted(x) + mat(&x.h) * e;
        out.copy_from_slice(g.as_slice());
    }

    fn transition_hessian(&self, x: &VarGarchState, _next: &VarGarchState, _eta: &[f64], out: &mut [f64]) {
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = x.h[i][j];
            }
        }
    }

    fn transition_log_ratio(&self, x: &VarGarchState, next: &VarGarchState, eta: &[f64]) -> f64 {
        let e = Vector3::new(eta[0], eta[1], eta[2]);
        let z = Vector3::from(next.y) - self.predicted(x);
        e.dot(&z) - 0.5 * e.dot(&(mat(&x.h) * e))
    }

    fn transition_log_ratio_grad(&self, x: &VarGarchState, next: &VarGarchState, eta: &[f64], out: &mut [f64]) {
        let e = Vector3::new(eta[0], eta[1], eta[2]);
        let g = Vector3::from(next.y) - self.predicted(x) - mat(&x.h) * e;
        out.copy_from_slice(g.as_slice());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrw::{map_paths, simulate_path, TiltParams};
    use crate::rng::path_rng;

    fn model() -> VarGarch {
        build_var_garch(VarGarchParams::table3()).unwrap()
    }

    #[test]
    fn rejects_indefinite_w() {
        let mut p = VarGarchParams::table3();
        p.w[0][1] = 1.0;
        p.w[1][0] = 1.0;
        assert!(matches!(build_var_garch(p), Err(Error::Validation(_))));
    }

    #[test]
    fn scalar_poisson_coefficient_is_one() {
        let mut p = VarGarchParams::table3();
        p.rho = [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]];
        let g = p.poisson_coefficient().unwrap();
        assert!((g - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn unit_root_is_a_spectral_error() {
        let mut p = VarGarchParams::table3();
        p.rho = [[1.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]];
        assert!(matches!(p.poisson_coefficient(), Err(Error::Spectral(_))));
    }

    #[test]
    fn poisson_residual_vanishes() {
        let mut p = VarGarchParams::table3();
        p.mu = [0.001, -0.002, 0.0005];
        let g = p.poisson_coefficient().unwrap();
        let rho = mat(&p.rho);
        let mu = Vector3::from(p.mu);
        let pi = p.stationary_mean().unwrap();
        for k in 0..10 {
            let y = Vector3::new(0.1 * k as f64 - 0.3, 0.05 * k as f64, -0.02 * k as f64);
            let ey1 = mu + rho * y;
            let r = g * y - g * ey1 - (ey1 - pi);
            assert!(r.abs().max() < 1e-10);
        }
    }

    #[test]
    fn zero_tilt_recursion_and_weight() {
        let m = model();
        let e = m.distress_event(-0.15);
        let rec = simulate_path(&m, &TiltParams::zeros(0, 3), &e, &mut path_rng(1, 0)).unwrap();
        assert_eq!(rec.log_weight, 0.0);
        let x = &rec.states[0];
        assert_eq!(x.y, [0.0; 3]);
        assert_eq!(x.h, m.p.w);
    }

    #[test]
    fn phi_is_the_gaussian_log_mgf() {
        let m = model();
        let x = VarGarchState { y: [0.01, -0.02, 0.03], h: m.p.w };
        let eta = [3.0, -1.0, 2.0];
        let n = 200_000;
        let vals = map_paths(n, 77, |_, rng| {
            let nx = m.sample_transition(&x, &[0.0; 3], rng).unwrap();
            crate::mrw::dot(&eta, &nx.y).exp()
        });
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let want = m.phi(&x, &eta).exp();
        assert!((mean - want).abs() < 4.0 * se, "{mean} vs {want} (se {se})");
    }

    #[test]
    fn covariances_stay_psd() {
        let m = model();
        let e = m.terminal_event(1, -10.0);
        for i in 0..2000 {
            let rec = simulate_path(&m, &TiltParams::new(vec![], vec![-5.0, 2.0, 1.0]), &e, &mut path_rng(4, i)).unwrap();
            for s in &rec.states {
                assert!(min_eigenvalue(&s.h) >= -1e-10);
            }
        }
    }

    #[test]
    fn tilt_shifts_innovation_mean() {
        let m = model();
        let x = VarGarchState { y: [0.0; 3], h: m.p.w };
        let eta = [-20.0, 0.0, 0.0];
        let n = 100_000;
        let ys = map_paths(n, 5, |_, rng| m.sample_transition(&x, &eta, rng).unwrap().y[0]);
        let mean = ys.iter().sum::<f64>() / n as f64;
        let want = -20.0 * m.p.w[0][0];
        let se = (m.p.w[0][0] / n as f64).sqrt();
        assert!((mean - want).abs() < 4.0 * se);
    }
}
