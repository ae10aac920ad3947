//! Finite-state Markov random walks with exact cumulants. These serve as the
//! test oracle: every quantity the engine estimates can be computed exactly
//! for them (see [`super::oracle`]).

use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Interval, MarkovRandomWalk, TiltDomain};
use crate::error::{Error, Result};
use crate::rng::PathRng;
use crate::tilting::{LinkFunction, LinkKind};

const SUM_TOL: f64 = 1e-12;

/// Conditional law of `Y` given an edge `(x, x')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum IncrementLaw {
    Discrete { values: Vec<f64>, probs: Vec<f64> },
    Gaussian { mean: f64, var: f64 },
}

impl IncrementLaw {
    pub fn constant(v: f64) -> Self {
        IncrementLaw::Discrete {
            values: vec![v],
            probs: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            IncrementLaw::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::Validation("discrete law needs matching nonempty values/probs".into()));
                }
                if values.iter().any(|v| !v.is_finite()) || probs.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::Validation("discrete law has invalid entries".into()));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > SUM_TOL {
                    return Err(Error::Validation(format!("support probabilities sum to {s}")));
                }
                Ok(())
            }
            IncrementLaw::Gaussian { mean, var } => {
                if !mean.is_finite() || !var.is_finite() || *var < 0.0 {
                    return Err(Error::Validation("gaussian law needs finite mean and var >= 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            IncrementLaw::Discrete { values, probs } => values.iter().zip(probs).map(|(v, p)| v * p).sum(),
            IncrementLaw::Gaussian { mean, .. } => *mean,
        }
    }

    /// `log E[exp(theta Y)]`.
    pub fn psi(&self, theta: f64) -> f64 {
        if theta == 0.0 {
            return 0.0;
        }
        match self {
            IncrementLaw::Discrete { values, probs } => {
                log_sum_exp(values.iter().zip(probs).filter(|(_, p)| **p > 0.0).map(|(v, p)| p.ln() + theta * v))
            }
            IncrementLaw::Gaussian { mean, var } => theta * mean + 0.5 * theta * theta * var,
        }
    }

    /// Mean and variance of `Y` under the `theta`-tilted law.
    pub fn tilted_moments(&self, theta: f64) -> (f64, f64) {
        match self {
            IncrementLaw::Discrete { values, probs } => {
                let psi = self.psi(theta);
                let (mut m1, mut m2) = (0.0, 0.0);
                for (v, p) in values.iter().zip(probs) {
                    if *p > 0.0 {
                        let w = (p.ln() + theta * v - psi).exp();
                        m1 += w * v;
                        m2 += w * v * v;
                    }
                }
                (m1, (m2 - m1 * m1).max(0.0))
            }
            IncrementLaw::Gaussian { mean, var } => (mean + theta * var, *var),
        }
    }

    pub fn sample(&self, theta: f64, rng: &mut PathRng) -> f64 {
        match self {
            IncrementLaw::Discrete { values, probs } => {
                if values.len() == 1 {
                    return values[0];
                }
                let psi = self.psi(theta);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    if *p > 0.0 {
                        acc += if theta == 0.0 { *p } else { (p.ln() + theta * v - psi).exp() };
                        if u < acc {
                            return *v;
                        }
                    }
                }
                // round-off: fall back to the last supported value
                values
                    .iter()
                    .zip(probs)
                    .rev()
                    .find(|(_, p)| **p > 0.0)
                    .map(|(v, _)| *v)
                    .unwrap_or(values[0])
            }
            IncrementLaw::Gaussian { mean, var } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + theta * var + var.sqrt() * z
            }
        }
    }
}

pub(crate) fn log_sum_exp<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `K` states, transition matrix `P`, and one increment law per edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteChainSpec {
    pub transition: Vec<Vec<f64>>,
    pub increments: Vec<Vec<IncrementLaw>>,
    /// Initial distribution; defaults to starting in state 0.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
}

impl FiniteChainSpec {
    pub fn states(&self) -> usize {
        self.transition.len()
    }

    /// Same increment law on every edge into state `j`.
    pub fn with_destination_laws(transition: Vec<Vec<f64>>, laws: Vec<IncrementLaw>) -> Self {
        let k = transition.len();
        Self {
            transition,
            increments: (0..k).map(|_| laws.clone()).collect(),
            initial: None,
        }
    }

    pub fn initial_distribution(&self) -> Vec<f64> {
        match &self.initial {
            Some(v) => v.clone(),
            None => {
                let mut v = vec![0.0; self.states()];
                if !v.is_empty() {
                    v[0] = 1.0;
                }
                v
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.states();
        if k == 0 {
            return Err(Error::Validation("chain needs at least one state".into()));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Validation(format!("row {i} of P has length {}", row.len())));
            }
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::Validation(format!("row {i} of P has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(Error::Validation(format!("row {i} of P sums to {s}")));
            }
        }
        if self.increments.len() != k || self.increments.iter().any(|r| r.len() != k) {
            return Err(Error::Validation("increment laws must form a K x K table".into()));
        }
        for row in &self.increments {
            for law in row {
                law.validate()?;
            }
        }
        let init = self.initial_distribution();
        if init.len() != k || init.iter().any(|p| !(*p >= 0.0)) || (init.iter().sum::<f64>() - 1.0).abs() > SUM_TOL {
            return Err(Error::Validation("initial distribution is not a probability vector".into()));
        }
        Ok(())
    }

    /// Stationary distribution from `pi (I - P) = 0`, `sum(pi) = 1`.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        let k = self.states();
        let mut a = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                a[(j, i)] = f64::from(u8::from(i == j)) - self.transition[i][j];
            }
        }
        for j in 0..k {
            a[(k - 1, j)] = 1.0;
        }
        let mut b = DVector::<f64>::zeros(k);
        b[k - 1] = 1.0;
        let sol = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::NoSolution("stationary distribution is not unique".into()))?;
        Ok(sol.iter().copied().collect())
    }

    /// `E_x[Y_1]` for each state.
    pub fn mean_increment(&self) -> Vec<f64> {
        (0..self.states())
            .map(|i| {
                self.transition[i]
                    .iter()
                    .zip(&self.increments[i])
                    .map(|(p, law)| p * law.mean())
                    .sum()
            })
            .collect()
    }

    /// Solution of `(I - P) g = E_x[Y_1] - E_pi[Y_1]` normalised by
    /// `sum(pi g) = 0`.
    pub fn poisson_solution(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let k = self.states();
        let pi = self.stationary()?;
        let h = self.mean_increment();
        let h_pi: f64 = pi.iter().zip(&h).map(|(a, b)| a * b).sum();
        let mut a = DMatrix::<f64>::zeros(k + 1, k);
        let mut rhs = DVector::<f64>::zeros(k + 1);
        for i in 0..k {
            for j in 0..k {
                a[(i, j)] = f64::from(u8::from(i == j)) - self.transition[i][j];
            }
            a[(k, i)] = pi[i];
            rhs[i] = h[i] - h_pi;
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        if svd.singular_values.min() <= 1e-12 * smax.max(1.0) {
            return Err(Error::NoSolution("Poisson system is rank deficient beyond its known nullspace".into()));
        }
        let g = svd
            .solve(&rhs, 1e-14)
            .map_err(|e| Error::NoSolution(e.to_string()))?;
        let resid = (&a * &g - &rhs).amax();
        if resid > 1e-8 * (1.0 + rhs.amax()) {
            return Err(Error::NoSolution(format!("Poisson residual {resid:.3e}")));
        }
        Ok(g.iter().copied().collect())
    }
}

struct ChainData {
    spec: FiniteChainSpec,
    log_p: Vec<Vec<f64>>,
    initial_cdf: Vec<f64>,
}

/// A finite-state chain bound to a link function on the state index.
#[derive(Clone)]
pub struct FiniteChain {
    data: Arc<ChainData>,
    link: LinkFunction<usize>,
}

impl std::fmt::Debug for FiniteChain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FiniteChain")
            .field("spec", &self.data.spec)
            .field("link", &self.link)
            .finish()
    }
}

/// Validates `spec` and binds it to the indicator link
/// `k(x, x', eta) = eta[x']`.
pub fn build_finite_chain(spec: FiniteChainSpec) -> Result<FiniteChain> {
    spec.validate()?;
    let k = spec.states();
    let link = LinkFunction::linear(LinkKind::LinearGeneral, k, |_: &usize, &j: &usize, out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[j] = 1.0;
    });
    let log_p = spec
        .transition
        .iter()
        .map(|r| r.iter().map(|p| if *p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect())
        .collect();
    let mut acc = 0.0;
    let initial_cdf = spec
        .initial_distribution()
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    Ok(FiniteChain {
        data: Arc::new(ChainData {
            spec,
            log_p,
            initial_cdf,
        }),
        link,
    })
}

/// Perron root and right eigenvector of `M(theta)[i][j] = P[i][j] E[e^{theta Y} | i, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerronEigen {
    /// `Lambda(theta) = log` of the Perron root.
    pub lambda: f64,
    /// `log r(x, theta)`, normalised to mean zero.
    pub log_r: Vec<f64>,
}

impl FiniteChain {
    pub fn spec(&self) -> &FiniteChainSpec {
        &self.data.spec
    }

    pub fn link_function(&self) -> &LinkFunction<usize> {
        &self.link
    }

    /// The same chain bound to another link on the state index.
    pub fn with_link(&self, link: LinkFunction<usize>) -> Self {
        Self {
            data: Arc::clone(&self.data),
            link,
        }
    }

    fn law(&self, x: usize, j: usize) -> &IncrementLaw {
        &self.data.spec.increments[x][j]
    }

    /// Tilted transition probabilities from `x` under `eta`.
    pub fn tilted_row(&self, x: usize, eta: &[f64]) -> Vec<f64> {
        let phi = self.phi(&x, eta);
        self.data.log_p[x]
            .iter()
            .enumerate()
            .map(|(j, lp)| {
                if lp.is_finite() {
                    (lp + self.link.k(&x, &j, eta) - phi).exp()
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Perron eigenpair by shifted power iteration (the shift handles
    /// periodic chains).
    pub fn perron(&self, theta: f64) -> Result<PerronEigen> {
        let k = self.data.spec.states();
        let m: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let p = self.data.spec.transition[i][j];
                        if p > 0.0 {
                            p * self.law(i, j).psi(theta).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let mut r = vec![1.0; k];
        let mut rho = 0.0;
        for _ in 0..100_000 {
            let mut next: Vec<f64> = (0..k)
                .map(|i| r[i] + (0..k).map(|j| m[i][j] * r[j]).sum::<f64>())
                .collect();
            let norm = next.iter().copied().fold(0.0, f64::max);
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::NoEigen(format!("power iteration degenerated at theta={theta}")));
            }
            next.iter_mut().for_each(|v| *v /= norm);
            let diff = next.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            r = next;
            rho = norm - 1.0;
            if diff < 1e-15 {
                break;
            }
        }
        if r.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::NoEigen("Perron vector is not strictly positive".into()));
        }
        // refine the root with a Rayleigh-type ratio
        let mr: Vec<f64> = (0..k).map(|i| (0..k).map(|j| m[i][j] * r[j]).sum()).collect();
        let rho_ref = mr.iter().sum::<f64>() / r.iter().sum::<f64>();
        let rho = if rho_ref > 0.0 { rho_ref } else { rho };
        let mut log_r: Vec<f64> = r.iter().map(|v| v.ln()).collect();
        let mean = log_r.iter().sum::<f64>() / k as f64;
        log_r.iter_mut().for_each(|v| *v -= mean);
        Ok(PerronEigen {
            lambda: rho.ln(),
            log_r,
        })
    }

    /// `k(x, x', eta) = psi(x, x', eta) + log r(x', eta)` with a one-entry
    /// cache of the eigenvector. Requires scalar increments.
    pub fn classical_link(&self) -> LinkFunction<usize> {
        let cache: Arc<RwLock<Option<(u64, Vec<f64>)>>> = Arc::new(RwLock::new(None));
        let chain = self.clone();
        let log_r = move |eta: f64| -> Vec<f64> {
            if let Some((key, v)) = cache.read().expect("cache poisoned").as_ref() {
                if *key == eta.to_bits() {
                    return v.clone();
                }
            }
            let v = chain
                .perron(eta)
                .map(|e| e.log_r)
                .unwrap_or_else(|_| vec![f64::NAN; chain.data.spec.states()]);
            *cache.write().expect("cache poisoned") = Some((eta.to_bits(), v.clone()));
            v
        };
        let log_r = Arc::new(log_r);
        let (c1, c2, c3) = (self.clone(), self.clone(), self.clone());
        let (l1, l2, l3) = (Arc::clone(&log_r), Arc::clone(&log_r), log_r);
        const H: f64 = 1e-5;
        LinkFunction::nonlinear(
            LinkKind::ClassicalEmbedding,
            1,
            move |&x: &usize, &j: &usize, eta: &[f64]| {
                if eta[0] == 0.0 {
                    return 0.0;
                }
                c1.law(x, j).psi(eta[0]) + l1(eta[0])[j]
            },
            move |&x: &usize, &j: &usize, eta: &[f64], out: &mut [f64]| {
                let e = eta[0];
                let dr = (l2(e + H)[j] - l2(e - H)[j]) / (2.0 * H);
                out[0] = c2.law(x, j).tilted_moments(e).0 + dr;
            },
            move |&x: &usize, &j: &usize, eta: &[f64], out: &mut [f64]| {
                let e = eta[0];
                let d2r = (l3(e + H)[j] - 2.0 * l3(e)[j] + l3(e - H)[j]) / (H * H);
                out[0] = c3.law(x, j).tilted_moments(e).1 + d2r;
            },
        )
    }
}

impl MarkovRandomWalk for FiniteChain {
    type State = usize;

    fn incr_dim(&self) -> usize {
        1
    }

    fn theta_dim(&self) -> usize {
        1
    }

    fn eta_dim(&self) -> usize {
        self.link.dim()
    }

    fn link_kind(&self) -> LinkKind {
        self.link.kind()
    }

    fn tilt_domain(&self) -> TiltDomain {
        TiltDomain {
            theta: vec![Interval::REAL_LINE],
            eta: vec![Interval::REAL_LINE; self.link.dim()],
        }
    }

    fn initial_state(&self, rng: &mut PathRng) -> usize {
        let cdf = &self.data.initial_cdf;
        if cdf.len() == 1 || cdf[0] >= 1.0 {
            return 0;
        }
        let u: f64 = rng.random();
        cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
    }

    fn sample_transition(&self, &x: &usize, eta: &[f64], rng: &mut PathRng) -> std::result::Result<usize, String> {
        let k = self.data.spec.states();
        if k == 1 {
            return Ok(0);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row: std::borrow::Cow<'_, [f64]> = if eta.iter().all(|&e| e == 0.0) {
            std::borrow::Cow::Borrowed(&self.data.spec.transition[x])
        } else {
            std::borrow::Cow::Owned(self.tilted_row(x, eta))
        };
        if row.iter().any(|p| !p.is_finite()) {
            return Err(format!("tilted transition row from state {x} is not finite"));
        }
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(j);
            }
        }
        Ok(row.iter().rposition(|&p| p > 0.0).unwrap_or(k - 1))
    }

    fn sample_increment(&self, &x: &usize, &next: &usize, theta: &[f64], rng: &mut PathRng, out: &mut [f64]) {
        out[0] = self.law(x, next).sample(theta[0], rng);
    }

    fn psi(&self, &x: &usize, &next: &usize, theta: &[f64]) -> f64 {
        self.law(x, next).psi(theta[0])
    }

    fn dpsi_dtheta(&self, &x: &usize, &next: &usize, theta: &[f64], out: &mut [f64]) {
        out[0] = self.law(x, next).tilted_moments(theta[0]).0;
    }

    fn d2psi_dtheta2(&self, &x: &usize, &next: &usize, theta: &[f64], out: &mut [f64]) {
        out[0] = self.law(x, next).tilted_moments(theta[0]).1;
    }

    fn link(&self, x: &usize, next: &usize, eta: &[f64]) -> f64 {
        self.link.k(x, next, eta)
    }

    fn dlink_deta(&self, x: &usize, next: &usize, eta: &[f64], out: &mut [f64]) {
        self.link.grad(x, next, eta, out)
    }

    fn phi(&self, &x: &usize, eta: &[f64]) -> f64 {
        if eta.iter().all(|&e| e == 0.0) {
            return 0.0;
        }
        log_sum_exp(
            self.data.log_p[x]
                .iter()
                .enumerate()
                .filter(|(_, lp)| lp.is_finite())
                .map(|(j, lp)| lp + self.link.k(&x, &j, eta)),
        )
    }

    fn dphi_deta(&self, &x: &usize, eta: &[f64], out: &mut [f64]) {
        let w = self.tilted_row(x, eta);
        let m = out.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut g = vec![0.0; m];
        for (j, wj) in w.iter().enumerate() {
            if *wj > 0.0 {
                self.link.grad(&x, &j, eta, &mut g);
                for (o, gi) in out.iter_mut().zip(&g) {
                    *o += wj * gi;
                }
            }
        }
    }

    fn transition_hessian(&self, &x: &usize, &next: &usize, eta: &[f64], out: &mut [f64]) {
        let m = self.link.dim();
        let w = self.tilted_row(x, eta);
        let mut mean = vec![0.0; m];
        let mut g = vec![0.0; m];
        let mut h = vec![0.0; m * m];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, wj) in w.iter().enumerate() {
            if *wj > 0.0 {
                self.link.grad(&x, &j, eta, &mut g);
                self.link.hess(&x, &j, eta, &mut h);
                for a in 0..m {
                    mean[a] += wj * g[a];
                    for b in 0..m {
                        out[a * m + b] += wj * (g[a] * g[b] + h[a * m + b]);
                    }
                }
            }
        }
        self.link.hess(&x, &next, eta, &mut h);
        for a in 0..m {
            for b in 0..m {
                out[a * m + b] -= mean[a] * mean[b] + h[a * m + b];
            }
        }
    }
}
