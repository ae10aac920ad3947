//! Affine Markov random walks: `log E_x[e^{eta'X_1}] = C1(eta)'x + C2(eta)`
//! and `psi(x, x', theta) = D0(theta)'x' + D1(theta)'x + D2(theta)`.
//!
//! For these the eigenfunction of the tilted kernel is `r(x) = e^{A'x}` with
//! `A = C1(A + D0) + D1` and `Lambda = C2(A + D0) + D2`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mrw::Interval;

pub trait AffineSpec: Send + Sync {
    /// Dimension `p` of the latent state.
    fn state_dim(&self) -> usize;
    /// Dimension `d` of the increments.
    fn incr_dim(&self) -> usize;
    /// Domain of the argument of `C1`, `C2`.
    fn eta_domain(&self) -> Vec<Interval>;

    fn c1(&self, eta: &[f64]) -> Vec<f64>;
    /// `p x p`, entry `(i, j) = dC1_i / d eta_j`.
    fn c1_jacobian(&self, eta: &[f64]) -> DMatrix<f64>;
    fn c2(&self, eta: &[f64]) -> f64;
    fn c2_grad(&self, eta: &[f64]) -> Vec<f64>;

    fn d0(&self, theta: &[f64]) -> Vec<f64>;
    fn d1(&self, theta: &[f64]) -> Vec<f64>;
    fn d2(&self, theta: &[f64]) -> f64;
    /// `p x d`.
    fn d0_jacobian(&self, theta: &[f64]) -> DMatrix<f64>;
    /// `p x d`.
    fn d1_jacobian(&self, theta: &[f64]) -> DMatrix<f64>;
    fn d2_grad(&self, theta: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineEigen {
    pub theta: Vec<f64>,
    /// Eigenfunction exponent, `r(x) = exp(A'x)`.
    pub a: Vec<f64>,
    pub lambda: f64,
    /// `A + D0`, the matching link parameter of the embedding.
    pub eta: Vec<f64>,
}

const TOL: f64 = 1e-12;
const MAX_ITER: usize = 10_000;

fn in_domain(dom: &[Interval], v: &[f64]) -> bool {
    v.iter().zip(dom).all(|(x, iv)| x.is_finite() && iv.contains(*x))
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `T(A) - A`, or `None` outside the domain of `C1`.
fn residual<S: AffineSpec + ?Sized>(spec: &S, d0: &[f64], d1: &[f64], a: &[f64]) -> Option<Vec<f64>> {
    let arg = add(a, d0);
    if !in_domain(&spec.eta_domain(), &arg) {
        return None;
    }
    let t = spec.c1(&arg);
    Some(t.iter().zip(d1).zip(a).map(|((t, d), a)| t + d - a).collect())
}

fn newton_step<S: AffineSpec + ?Sized>(spec: &S, d0: &[f64], a: &[f64], r: &[f64]) -> Option<Vec<f64>> {
    let p = a.len();
    let j = spec.c1_jacobian(&add(a, d0));
    let m = DMatrix::<f64>::identity(p, p) - j;
    let step = m.lu().solve(&DVector::from_column_slice(r))?;
    Some(step.iter().copied().collect())
}

fn damped_fixed_point<S: AffineSpec + ?Sized>(spec: &S, d0: &[f64], d1: &[f64]) -> Option<Vec<f64>> {
    let p = spec.state_dim();
    let mut a = vec![0.0; p];
    let mut r = residual(spec, d0, d1, &a)?;
    let mut omega = 1.0;
    for _ in 0..MAX_ITER {
        let rn = inf_norm(&r);
        if rn <= TOL * inf_norm(&a).max(1.0) {
            return Some(a);
        }
        let cand: Vec<f64> = a.iter().zip(&r).map(|(x, d)| x + omega * d).collect();
        match residual(spec, d0, d1, &cand) {
            Some(rc) if inf_norm(&rc) < rn || omega <= 1.0 / 64.0 => {
                a = cand;
                r = rc;
                omega = (omega * 1.5).min(1.0);
            }
            _ => {
                omega *= 0.5;
                if omega < 1e-6 {
                    return None;
                }
            }
        }
    }
    None
}

/// Newton's method along `s theta`, `s` from 0 to 1, tracking the root
/// that starts at `A(0) = 0`.
fn continuation<S: AffineSpec + ?Sized>(spec: &S, theta: &[f64]) -> Option<Vec<f64>> {
    let p = spec.state_dim();
    let mut a = vec![0.0; p];
    let mut s = 0.0f64;
    let mut ds = 0.05f64;
    while s < 1.0 {
        let s_next = (s + ds).min(1.0);
        let th: Vec<f64> = theta.iter().map(|t| t * s_next).collect();
        let (d0, d1) = (spec.d0(&th), spec.d1(&th));
        let mut cand = a.clone();
        let mut ok = false;
        for _ in 0..50 {
            let Some(r) = residual(spec, &d0, &d1, &cand) else { break };
            if inf_norm(&r) <= TOL * inf_norm(&cand).max(1.0) {
                ok = true;
                break;
            }
            let Some(step) = newton_step(spec, &d0, &cand, &r) else { break };
            cand.iter_mut().zip(&step).for_each(|(c, d)| *c += d);
        }
        if ok {
            a = cand;
            s = s_next;
            ds = (ds * 2.0).min(0.25);
        } else {
            ds *= 0.5;
            if ds < 1e-8 {
                return None;
            }
        }
    }
    Some(a)
}

/// Solves the affine eigen problem at `theta` on the branch with
/// `A(0) = 0`: damped fixed-point iteration first, Newton continuation in
/// `theta` as the fallback, then Newton polishing to machine precision.
pub fn solve_affine_eigen<S: AffineSpec + ?Sized>(spec: &S, theta: &[f64]) -> Result<AffineEigen> {
    if theta.len() != spec.incr_dim() {
        return Err(Error::Contract(format!(
            "theta has length {}, expected {}",
            theta.len(),
            spec.incr_dim()
        )));
    }
    let (d0, d1) = (spec.d0(theta), spec.d1(theta));
    let mut a = damped_fixed_point(spec, &d0, &d1)
        .or_else(|| continuation(spec, theta))
        .ok_or_else(|| Error::NoEigen(format!("no root connected to A(0) = 0 at theta = {theta:?}")))?;
    // polish: Newton until the residual stops shrinking
    let mut rn = residual(spec, &d0, &d1, &a).map(|r| inf_norm(&r)).unwrap_or(f64::INFINITY);
    for _ in 0..8 {
        let Some(r) = residual(spec, &d0, &d1, &a) else { break };
        let Some(step) = newton_step(spec, &d0, &a, &r) else { break };
        let cand: Vec<f64> = a.iter().zip(&step).map(|(x, d)| x + d).collect();
        match residual(spec, &d0, &d1, &cand) {
            Some(rc) if inf_norm(&rc) < rn => {
                rn = inf_norm(&rc);
                a = cand;
            }
            _ => break,
        }
    }
    if !(rn <= TOL * inf_norm(&a).max(1.0)) {
        return Err(Error::NoEigen(format!("residual {rn:.3e} at theta = {theta:?}")));
    }
    let eta = add(&a, &d0);
    let lambda = spec.c2(&eta) + spec.d2(theta);
    Ok(AffineEigen {
        theta: theta.to_vec(),
        a,
        lambda,
        eta,
    })
}

/// `A_bar = dA/dtheta(0)` (a `p x d` matrix) from
/// `(I - J_C1(0)) A_bar = J_C1(0) J_D0(0) + J_D1(0)`.
pub fn affine_abar<S: AffineSpec + ?Sized>(spec: &S) -> Result<DMatrix<f64>> {
    let p = spec.state_dim();
    let d = spec.incr_dim();
    let z_eta = vec![0.0; p];
    let z_theta = vec![0.0; d];
    let j = spec.c1_jacobian(&z_eta);
    let rhs = &j * spec.d0_jacobian(&z_theta) + spec.d1_jacobian(&z_theta);
    let m = DMatrix::<f64>::identity(p, p) - j;
    m.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Spectral("I - dC1/deta(0) is singular".into()))
}

/// Stationary mean of the latent state, from `m = J_C1(0)' m + grad C2(0)`.
pub fn affine_stationary_mean<S: AffineSpec + ?Sized>(spec: &S) -> Result<Vec<f64>> {
    let p = spec.state_dim();
    let z = vec![0.0; p];
    let m = DMatrix::<f64>::identity(p, p) - spec.c1_jacobian(&z).transpose();
    let b = DVector::from_vec(spec.c2_grad(&z));
    m.lu()
        .solve(&b)
        .map(|v| v.iter().copied().collect())
        .ok_or_else(|| Error::Spectral("latent chain has no stationary mean".into()))
}

/// `E_x[X_1]` and `E_x[Y_1]`.
pub fn affine_conditional_means<S: AffineSpec + ?Sized>(spec: &S, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = spec.state_dim();
    let d = spec.incr_dim();
    let (ze, zt) = (vec![0.0; p], vec![0.0; d]);
    let xv = DVector::from_column_slice(x);
    let ex1 = spec.c1_jacobian(&ze).transpose() * &xv + DVector::from_vec(spec.c2_grad(&ze));
    let ey = spec.d0_jacobian(&zt).transpose() * &ex1
        + spec.d1_jacobian(&zt).transpose() * &xv
        + DVector::from_vec(spec.d2_grad(&zt));
    (ex1.iter().copied().collect(), ey.iter().copied().collect())
}

/// The affine AR(1) pair
/// `log E[e^{eta X'} | x] = (alpha + beta x) eta + (iota + gamma x) sx^2 eta^2 / 2`,
/// `log E[e^{theta Y} | x, x'] = (a1 x + a2 x' + a3) theta + (b1 x + b2 x' + b3) sy^2 theta^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineAr1 {
    pub alpha: f64,
    pub beta: f64,
    pub iota: f64,
    pub gamma: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl AffineAr1 {
    /// `A_bar = (a1 + a2 beta) / (1 - beta)` in closed form.
    pub fn abar_closed_form(&self) -> f64 {
        (self.a1 + self.a2 * self.beta) / (1.0 - self.beta)
    }
}

impl AffineSpec for AffineAr1 {
    fn state_dim(&self) -> usize {
        1
    }
    fn incr_dim(&self) -> usize {
        1
    }
    fn eta_domain(&self) -> Vec<Interval> {
        vec![Interval::REAL_LINE]
    }
    fn c1(&self, eta: &[f64]) -> Vec<f64> {
        let e = eta[0];
        vec![self.beta * e + 0.5 * self.gamma * self.sigma_x.powi(2) * e * e]
    }
    fn c1_jacobian(&self, eta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.beta + self.gamma * self.sigma_x.powi(2) * eta[0])
    }
    fn c2(&self, eta: &[f64]) -> f64 {
        let e = eta[0];
        self.alpha * e + 0.5 * self.iota * self.sigma_x.powi(2) * e * e
    }
    fn c2_grad(&self, eta: &[f64]) -> Vec<f64> {
        vec![self.alpha + self.iota * self.sigma_x.powi(2) * eta[0]]
    }
    fn d0(&self, theta: &[f64]) -> Vec<f64> {
        let t = theta[0];
        vec![self.a2 * t + 0.5 * self.b2 * self.sigma_y.powi(2) * t * t]
    }
    fn d1(&self, theta: &[f64]) -> Vec<f64> {
        let t = theta[0];
        vec![self.a1 * t + 0.5 * self.b1 * self.sigma_y.powi(2) * t * t]
    }
    fn d2(&self, theta: &[f64]) -> f64 {
        let t = theta[0];
        self.a3 * t + 0.5 * self.b3 * self.sigma_y.powi(2) * t * t
    }
    fn d0_jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.a2 + self.b2 * self.sigma_y.powi(2) * theta[0])
    }
    fn d1_jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.a1 + self.b1 * self.sigma_y.powi(2) * theta[0])
    }
    fn d2_grad(&self, theta: &[f64]) -> Vec<f64> {
        vec![self.a3 + self.b3 * self.sigma_y.powi(2) * theta[0]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> AffineAr1 {
        AffineAr1 {
            alpha: 0.1,
            beta: 0.5,
            iota: 1.0,
            gamma: 0.2,
            a1: 0.3,
            a2: 0.2,
            a3: 0.0,
            b1: 0.1,
            b2: 0.1,
            b3: 1.0,
            sigma_x: 0.2,
            sigma_y: 0.3,
        }
    }

    #[test]
    fn zero_theta_gives_trivial_eigen() {
        let e = solve_affine_eigen(&fixture(), &[0.0]).unwrap();
        assert_eq!(e.a, vec![0.0]);
        assert_eq!(e.lambda, 0.0);
    }

    #[test]
    fn quadratic_fixed_point_residual() {
        let s = fixture();
        let t = 0.1;
        let e = solve_affine_eigen(&s, &[t]).unwrap();
        let a = e.a[0];
        let sy2 = s.sigma_y.powi(2);
        let u = a + s.a2 * t + s.b2 * t * t * sy2 / 2.0;
        let rhs = s.a1 * t + s.b1 * t * t * sy2 / 2.0 + s.beta * u + s.gamma * s.sigma_x.powi(2) / 2.0 * u * u;
        assert!((a - rhs).abs() <= 1e-10);
        let lam = s.a3 * t + s.b3 * t * t * sy2 / 2.0 + s.alpha * u + s.iota * s.sigma_x.powi(2) / 2.0 * u * u;
        assert!((e.lambda - lam).abs() <= 1e-12);
    }

    #[test]
    fn abar_matches_closed_form() {
        let s = fixture();
        let abar = affine_abar(&s).unwrap()[(0, 0)];
        assert_eq!(s.abar_closed_form(), 0.8);
        assert!((abar - 0.8).abs() < 1e-15);
    }

    #[test]
    fn lemma3_finite_difference() {
        let s = fixture();
        let h = 1e-5;
        let ap = solve_affine_eigen(&s, &[h]).unwrap().a[0];
        let am = solve_affine_eigen(&s, &[-h]).unwrap().a[0];
        let fd = (ap - am) / (2.0 * h);
        assert!((fd - affine_abar(&s).unwrap()[(0, 0)]).abs() <= 1e-6);
    }

    #[test]
    fn poisson_residual_vanishes() {
        let s = fixture();
        let abar = affine_abar(&s).unwrap()[(0, 0)];
        let m = affine_stationary_mean(&s).unwrap();
        let (_, ey_pi) = affine_conditional_means(&s, &m);
        for x in [-1.0, 0.0, 0.4, 2.5] {
            let (ex1, ey) = affine_conditional_means(&s, &[x]);
            let r = abar * x - abar * ex1[0] - (ey[0] - ey_pi[0]);
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn continuation_recovers_when_fixed_point_diverges() {
        // beta close to one makes the plain iteration crawl; the continuation
        // path must land on the same root.
        let mut s = fixture();
        s.beta = 0.999_99;
        s.gamma = 0.0;
        let t = 0.01;
        let e = solve_affine_eigen(&s, &[t]).unwrap();
        let expect = (s.a1 * t + s.b1 * t * t * s.sigma_y.powi(2) / 2.0
            + s.beta * (s.a2 * t + s.b2 * t * t * s.sigma_y.powi(2) / 2.0))
            / (1.0 - s.beta);
        assert!((e.a[0] - expect).abs() < 1e-9 * expect.abs());
    }
}
