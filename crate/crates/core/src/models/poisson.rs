//! Solutions of the Poisson equation `(I - P) g = E_x[Y_1] - E_pi[Y_1]`
//! for the model classes where it is available in closed or linear-algebra
//! form.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use super::affine::{affine_abar, AffineSpec};
use super::var_garch::VarGarchParams;
use crate::error::{Error, Result};
use crate::mrw::FiniteChainSpec;

/// Regime-switching AR(1): `Y' = mu(X') + beta(X') Y + sigma(X') eps` with a
/// finite Markov chain `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeAr1 {
    pub transition: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl RegimeAr1 {
    fn chain(&self) -> Result<FiniteChainSpec> {
        let k = self.transition.len();
        if k == 0 || self.mu.len() != k || self.beta.len() != k || self.sigma.len() != k {
            return Err(Error::Validation("regime AR(1) vectors must match the chain size".into()));
        }
        if self.beta.iter().any(|b| !(b.abs() < 1.0)) {
            return Err(Error::Validation("regime AR(1) needs |beta| < 1 in every regime".into()));
        }
        let spec = FiniteChainSpec::with_destination_laws(
            self.transition.clone(),
            (0..k).map(|j| crate::mrw::IncrementLaw::constant(self.mu[j])).collect(),
        );
        spec.validate()?;
        Ok(spec)
    }

    fn p(&self) -> DMatrix<f64> {
        let k = self.transition.len();
        DMatrix::from_fn(k, k, |i, j| self.transition[i][j])
    }

    /// Stationary mean of `Y`, from the regime-split means
    /// `m_j = pi_j mu_j + beta_j sum_i m_i P_ij`.
    pub fn stationary_mean(&self) -> Result<f64> {
        let pi = self.chain()?.stationary()?;
        let k = pi.len();
        let lhs = DMatrix::identity(k, k) - DMatrix::from_diagonal(&DVector::from_column_slice(&self.beta)) * self.p().transpose();
        let rhs = DVector::from_fn(k, |j, _| pi[j] * self.mu[j]);
        let m = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Spectral("regime AR(1) has no stationary mean".into()))?;
        Ok(m.sum())
    }

    /// `g(x, y) = gbar(x) + A(x) y` with `A - P diag(beta) A = P beta` and
    /// `gbar - P gbar = P mu - E_pi[Y] + P diag(mu) A`, pinned by
    /// `pi' gbar = 0`.
    pub fn poisson_solution(&self) -> Result<RegimePoisson> {
        let pi = self.chain()?.stationary()?;
        let k = pi.len();
        let p = self.p();
        let beta = DVector::from_column_slice(&self.beta);
        let mu = DVector::from_column_slice(&self.mu);
        let a = (DMatrix::identity(k, k) - &p * DMatrix::from_diagonal(&beta))
            .lu()
            .solve(&(&p * &beta))
            .ok_or_else(|| Error::Spectral("I - P diag(beta) is singular".into()))?;
        let c = self.stationary_mean()?;
        let rhs = &p * &mu - DVector::from_element(k, c) + &p * DMatrix::from_diagonal(&mu) * &a;
        let mut m = DMatrix::zeros(k + 1, k);
        let mut b = DVector::zeros(k + 1);
        for i in 0..k {
            for j in 0..k {
                m[(i, j)] = f64::from(u8::from(i == j)) - p[(i, j)];
            }
            m[(k, i)] = pi[i];
            b[i] = rhs[i];
        }
        let gbar = m
            .clone()
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::NoSolution(e.to_string()))?;
        let res = (&m * &gbar - &b).amax();
        if res > 1e-9 * (1.0 + b.amax()) {
            return Err(Error::NoSolution(format!("Poisson system is inconsistent (residual {res:.3e})")));
        }
        Ok(RegimePoisson {
            gbar: gbar.iter().copied().collect(),
            a: a.iter().copied().collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimePoisson {
    pub gbar: Vec<f64>,
    pub a: Vec<f64>,
}

pub enum PoissonProblem<'a> {
    Affine(&'a dyn AffineSpec),
    VarGarch(&'a VarGarchParams),
    Finite(&'a FiniteChainSpec),
    RegimeAr1(&'a RegimeAr1),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PoissonSolution {
    /// `g(x) = Abar' x`, `Abar` of shape `p x d`.
    Linear(DMatrix<f64>),
    /// `g(y, H) = G y`.
    VarGarch(Matrix3<f64>),
    /// One value per state, `pi' g = 0`.
    Finite(Vec<f64>),
    RegimeAr1(RegimePoisson),
}

pub fn solve_poisson(problem: PoissonProblem<'_>) -> Result<PoissonSolution> {
    match problem {
        PoissonProblem::Affine(s) => affine_abar(s).map(PoissonSolution::Linear),
        PoissonProblem::VarGarch(p) => p.poisson_coefficient().map(PoissonSolution::VarGarch),
        PoissonProblem::Finite(s) => s.poisson_solution().map(PoissonSolution::Finite),
        PoissonProblem::RegimeAr1(r) => r.poisson_solution().map(PoissonSolution::RegimeAr1),
    }
}
