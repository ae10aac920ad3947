use crate::error::{Error, Result};
use crate::mrw::{dot, map_paths, walk, EventSpec, MarkovRandomWalk, StepObserver, TiltParams};
use crate::stats::CompensatedSum;

/// One realization of the second-moment integrand and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSample {
    pub value: f64,
    pub grad_theta: Vec<f64>,
    pub grad_eta: Vec<f64>,
}

/// Per-path exponent `E = -theta'S + sum(psi - k + phi)` with its
/// derivatives, accumulated while the path is drawn.
struct ExponentObserver<'a, M: MarkovRandomWalk + ?Sized> {
    model: &'a M,
    eval: &'a TiltParams,
    theta_on: bool,
    eta_on: bool,
    log_e: f64,
    grad: Vec<f64>,
    hess: Option<Vec<f64>>,
    buf: Vec<f64>,
    hbuf: Vec<f64>,
}

impl<'a, M: MarkovRandomWalk + ?Sized> ExponentObserver<'a, M> {
    fn new(model: &'a M, eval: &'a TiltParams, with_hessian: bool) -> Self {
        let p = eval.dim();
        let mx = eval.theta.len().max(eval.eta.len());
        Self {
            model,
            eval,
            theta_on: eval.theta.iter().any(|&t| t != 0.0),
            eta_on: eval.eta.iter().any(|&e| e != 0.0),
            log_e: 0.0,
            grad: vec![0.0; p],
            hess: with_hessian.then(|| vec![0.0; p * p]),
            buf: vec![0.0; mx],
            hbuf: vec![0.0; mx * mx],
        }
    }
}

impl<M: MarkovRandomWalk + ?Sized> StepObserver<M::State> for ExponentObserver<'_, M> {
    fn step(&mut self, step: usize, x: &M::State, next: &M::State, _y: &[f64]) -> Result<()> {
        let td = self.eval.theta.len();
        let ed = self.eval.eta.len();
        let p = td + ed;
        if td > 0 {
            if self.theta_on {
                self.log_e += self.model.psi(x, next, &self.eval.theta);
            }
            let g = &mut self.buf[..td];
            self.model.dpsi_dtheta(x, next, &self.eval.theta, g);
            for (a, b) in self.grad[..td].iter_mut().zip(g.iter()) {
                *a += b;
            }
            if let Some(h) = self.hess.as_mut() {
                let hb = &mut self.hbuf[..td * td];
                self.model.d2psi_dtheta2(x, next, &self.eval.theta, hb);
                for i in 0..td {
                    for j in 0..td {
                        h[i * p + j] += hb[i * td + j];
                    }
                }
            }
        }
        if ed > 0 {
            if self.eta_on {
                self.log_e -= self.model.transition_log_ratio(x, next, &self.eval.eta);
            }
            let g = &mut self.buf[..ed];
            self.model.transition_log_ratio_grad(x, next, &self.eval.eta, g);
            for (a, b) in self.grad[td..].iter_mut().zip(g.iter()) {
                *a -= b;
            }
            if let Some(h) = self.hess.as_mut() {
                let hb = &mut self.hbuf[..ed * ed];
                self.model.transition_hessian(x, next, &self.eval.eta, hb);
                for i in 0..ed {
                    for j in 0..ed {
                        h[(td + i) * p + td + j] += hb[i * ed + j];
                    }
                }
            }
        }
        if !self.log_e.is_finite() || self.grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::overflow(step, "objective exponent"));
        }
        Ok(())
    }
}

/// How a batch of objective paths is drawn.
#[derive(Debug, Clone)]
pub struct ObjectiveOptions {
    pub batch_size: usize,
    pub seed: u64,
    /// Measure the paths are drawn from; `None` is the original measure.
    /// A non-zero pilot tilt multiplies the integrand by its own likelihood
    /// ratio, so the estimate still targets `G(theta, eta)`.
    pub sampling: Option<TiltParams>,
    pub with_hessian: bool,
}

impl ObjectiveOptions {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size,
            seed,
            sampling: None,
            with_hessian: false,
        }
    }
}

/// Batch estimate of `G` at one tilt.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEstimate {
    pub value: f64,
    pub std_error: f64,
    /// `log G`, finite whenever some path hit the event.
    pub log_value: f64,
    /// Gradient of `G`, `theta` coordinates first.
    pub grad: Vec<f64>,
    pub grad_se: Vec<f64>,
    /// Gradient of `log G`.
    pub log_grad: Vec<f64>,
    /// Row-major Hessian of `log G`, when requested.
    pub log_hessian: Option<Vec<f64>>,
    pub hits: usize,
    pub n: usize,
    pub theta_dim: usize,
}

impl ObjectiveEstimate {
    pub fn no_hits(&self) -> bool {
        self.hits == 0
    }

    pub fn sample(&self) -> ObjectiveSample {
        ObjectiveSample {
            value: self.value,
            grad_theta: self.grad[..self.theta_dim].to_vec(),
            grad_eta: self.grad[self.theta_dim..].to_vec(),
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn grad_se_norm(&self) -> f64 {
        self.grad_se.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

struct PathTerm {
    log_integrand: f64,
    grad: Vec<f64>,
    hess: Option<Vec<f64>>,
}

/// Evaluates `G(theta, eta)`, its gradient and optionally the Hessian of
/// `log G` at `eval` from one batch of paths.
pub fn evaluate_objective<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    eval: &TiltParams,
    event: &EventSpec,
    opts: &ObjectiveOptions,
) -> Result<ObjectiveEstimate> {
    if opts.batch_size < 2 {
        return Err(Error::Contract("objective batch size must be at least 2".into()));
    }
    model.check_domain(eval)?;
    event.validate(model.incr_dim())?;
    let zero = TiltParams::zeros_for(model);
    let sampling = opts.sampling.as_ref().unwrap_or(&zero);
    model.check_domain(sampling)?;
    let td = eval.theta.len();
    let p = eval.dim();

    let terms: Vec<Result<PathTerm>> = map_paths(opts.batch_size, opts.seed, |_, rng| {
        let mut obs = ExponentObserver::new(model, eval, opts.with_hessian);
        let out = walk(model, sampling, event, rng, &mut obs)?;
        let s = &out.terminal_sum[..td];
        let mut log_e = obs.log_e;
        if td > 0 {
            log_e -= dot(&eval.theta, s);
            for (g, v) in obs.grad[..td].iter_mut().zip(s) {
                *g -= v;
            }
        }
        let log_integrand = if out.value == 0.0 {
            f64::NEG_INFINITY
        } else {
            log_e + out.log_weight + out.value.ln()
        };
        if log_integrand.is_nan() || log_integrand == f64::INFINITY {
            return Err(Error::overflow(out.stop_step, "objective integrand"));
        }
        Ok(PathTerm {
            log_integrand,
            grad: obs.grad,
            hess: obs.hess,
        })
    });
    let terms: Vec<PathTerm> = terms.into_iter().collect::<Result<_>>()?;
    let n = terms.len();
    let nf = n as f64;
    let hits = terms.iter().filter(|t| t.log_integrand > f64::NEG_INFINITY).count();
    if hits == 0 {
        log::warn!("objective batch of {n} paths has no event hits; gradient is uninformative");
        return Ok(ObjectiveEstimate {
            value: 0.0,
            std_error: 0.0,
            log_value: f64::NEG_INFINITY,
            grad: vec![0.0; p],
            grad_se: vec![0.0; p],
            log_grad: vec![0.0; p],
            log_hessian: opts.with_hessian.then(|| vec![0.0; p * p]),
            hits,
            n,
            theta_dim: td,
        });
    }
    let shift = terms
        .iter()
        .map(|t| t.log_integrand)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut s1 = CompensatedSum::new();
    let mut s2 = CompensatedSum::new();
    let mut g1 = vec![CompensatedSum::new(); p];
    let mut g2 = vec![CompensatedSum::new(); p];
    let mut outer = vec![CompensatedSum::new(); if opts.with_hessian { p * p } else { 0 }];
    for t in &terms {
        if t.log_integrand == f64::NEG_INFINITY {
            continue;
        }
        let w = (t.log_integrand - shift).exp();
        s1.add(w);
        s2.add(w * w);
        for i in 0..p {
            let v = w * t.grad[i];
            g1[i].add(v);
            g2[i].add(v * v);
        }
        if let Some(h) = &t.hess {
            for i in 0..p {
                for j in 0..p {
                    outer[i * p + j].add(w * (t.grad[i] * t.grad[j] + h[i * p + j]));
                }
            }
        }
    }
    let scale = shift.exp();
    let sum_w = s1.value();
    let m = sum_w / nf;
    let var = ((s2.value() / nf - m * m) * nf / (nf - 1.0)).max(0.0);
    let log_value = shift + m.ln();
    let log_grad: Vec<f64> = g1.iter().map(|g| g.value() / sum_w).collect();
    let grad: Vec<f64> = g1.iter().map(|g| g.value() / nf * scale).collect();
    let grad_se: Vec<f64> = g1
        .iter()
        .zip(&g2)
        .map(|(a, b)| {
            let ma = a.value() / nf;
            let v = ((b.value() / nf - ma * ma) * nf / (nf - 1.0)).max(0.0);
            (v / nf).sqrt() * scale
        })
        .collect();
    let log_hessian = opts.with_hessian.then(|| {
        let mut h = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                h[i * p + j] = outer[i * p + j].value() / sum_w - log_grad[i] * log_grad[j];
            }
        }
        h
    });
    Ok(ObjectiveEstimate {
        value: m * scale,
        std_error: (var / nf).sqrt() * scale,
        log_value,
        grad,
        grad_se,
        log_grad,
        log_hessian,
        hits,
        n,
        theta_dim: td,
    })
}

/// Monte Carlo estimate of `G(theta, eta)` with paths from the original
/// measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondMoment {
    pub mean: f64,
    pub std_error: f64,
    pub hits: usize,
    /// Set when the batch had no event hits: the estimate is `0` and carries
    /// no gradient information.
    pub no_hits: bool,
}

pub fn second_moment_estimate<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    tilt: &TiltParams,
    event: &EventSpec,
    batch_size: usize,
    seed: u64,
) -> Result<SecondMoment> {
    let est = evaluate_objective(model, tilt, event, &ObjectiveOptions::new(batch_size, seed))?;
    Ok(SecondMoment {
        mean: est.value,
        std_error: est.std_error,
        hits: est.hits,
        no_hits: est.no_hits(),
    })
}

/// Value and gradient of `G` from a single pass over the same paths.
pub fn grad_second_moment<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    tilt: &TiltParams,
    event: &EventSpec,
    batch_size: usize,
    seed: u64,
) -> Result<ObjectiveEstimate> {
    evaluate_objective(model, tilt, event, &ObjectiveOptions::new(batch_size, seed))
}
