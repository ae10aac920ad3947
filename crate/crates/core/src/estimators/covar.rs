use std::time::Instant;

use serde::Serialize;

use super::{importance_estimate, two_stage_estimate, EstimateSummary};
use crate::error::{Error, Result};
use crate::mrw::{map_paths, walk, Direction, EventSpec, FirstPassage, MarkovRandomWalk, NoObserver, TerminalThreshold, TiltParams};
use crate::optimizer::{search_tilt, SgdConfig};
use crate::rng::{derive_seed, label};

const MAX_DOUBLINGS: usize = 60;
const MAX_BISECTIONS: usize = 100;

#[derive(Debug, Clone)]
pub struct CovarConfig {
    pub sgd: SgdConfig,
    pub n_per_eval: usize,
    /// Accepted distance between the estimated conditional CDF and `1 - q`.
    pub tolerance: f64,
    /// Re-optimize the numerator tilt every this many evaluations.
    pub refresh_every: usize,
}

impl Default for CovarConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            n_per_eval: 100_000,
            tolerance: 1e-3,
            refresh_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarResult {
    /// `-b*`.
    pub covar: f64,
    pub level: f64,
    pub conditional_cdf: f64,
    pub conditional_se: f64,
    pub denominator: EstimateSummary,
    pub evaluations: usize,
    pub elapsed_seconds: f64,
}

struct Numerator<'a, M: MarkovRandomWalk + ?Sized> {
    model: &'a M,
    passage: FirstPassage,
    component: usize,
    cfg: &'a CovarConfig,
    seed: u64,
    tilt: TiltParams,
    evals: usize,
    den: f64,
    den_se: f64,
}

impl<M: MarkovRandomWalk + ?Sized> Numerator<'_, M> {
    fn event(&self, b: f64) -> EventSpec {
        EventSpec::JointPassageAndTerminal {
            passage: self.passage,
            terminal: TerminalThreshold {
                component: self.component,
                threshold: b,
                direction: Direction::Below,
            },
        }
    }

    /// Conditional CDF at `b` and its delta-method standard error. The same
    /// seed is used at every `b` so the estimate is monotone in `b` between
    /// tilt refreshes.
    fn cdf(&mut self, b: f64) -> Result<(f64, f64)> {
        let ev = self.event(b);
        if self.evals % self.cfg.refresh_every.max(1) == 0 {
            let sgd = SgdConfig {
                initial: Some(self.tilt.clone()),
                ..self.cfg.sgd.clone()
            };
            match search_tilt(self.model, &ev, &sgd, derive_seed(self.seed, self.evals as u64)) {
                Ok(r) => self.tilt = r.tilt,
                Err(Error::SearchFailed(msg)) => log::warn!("numerator search at b = {b}: {msg}"),
                Err(e) => return Err(e),
            }
        }
        self.evals += 1;
        let s = importance_estimate(self.model, &self.tilt, &ev, self.cfg.n_per_eval, derive_seed(self.seed, label("numerator")))?;
        let r = s.mean / self.den;
        let se = (s.std_error.powi(2) / self.den.powi(2) + (s.mean * self.den_se).powi(2) / self.den.powi(4)).sqrt();
        Ok((r, se))
    }
}

/// `-b*` where `P(S^j_T <= b* | passage before T) = 1 - q`, by bisection on
/// `b` with importance-sampled numerators and a shared denominator.
pub fn covar_bisection<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    passage: FirstPassage,
    component: usize,
    q: f64,
    cfg: &CovarConfig,
    seed: u64,
) -> Result<CovarResult> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Validation(format!("quantile level must lie in (0, 1), got {q}")));
    }
    if component >= model.incr_dim() || passage.component >= model.incr_dim() {
        return Err(Error::Contract("component index out of range".into()));
    }
    let t0 = Instant::now();
    let level = 1.0 - q;
    let n = cfg.n_per_eval;
    let cond = EventSpec::FirstPassageBeforeT { passage };
    let (mut den, search) = two_stage_estimate(model, &cond, &cfg.sgd, n, derive_seed(seed, label("denominator")))?;
    den.method = "covar_denominator".into();
    let floor = 10.0 / n as f64;
    if den.mean < floor {
        return Err(Error::ConditioningTooRare { prob: den.mean, floor });
    }

    // unconditional empirical quantile of S^j_T as the starting point
    let horizon = passage.horizon;
    let terminal = EventSpec::fixed_time(horizon, component, 0.0, Direction::Below);
    let zero = TiltParams::zeros_for(model);
    let mut finals: Vec<f64> = map_paths(n.min(100_000), derive_seed(seed, label("quantile")), |_, rng| {
        walk(model, &zero, &terminal, rng, &mut NoObserver).map(|o| o.terminal_sum[component])
    })
    .into_iter()
    .collect::<Result<_>>()?;
    finals.sort_by(f64::total_cmp);
    let idx = ((level * finals.len() as f64) as usize).min(finals.len() - 1);
    let start = finals[idx];
    let spread = (finals[finals.len() * 3 / 4] - finals[finals.len() / 4]).abs().max(1e-12);

    let mut num = Numerator {
        model,
        passage,
        component,
        cfg,
        seed: derive_seed(seed, label("numerator")),
        tilt: search.tilt.clone(),
        evals: 0,
        den: den.mean,
        den_se: den.std_error,
    };

    let (f_start, se_start) = num.cdf(start)?;
    if (f_start - level).abs() <= cfg.tolerance {
        return Ok(CovarResult {
            covar: -start,
            level,
            conditional_cdf: f_start,
            conditional_se: se_start,
            denominator: den,
            evaluations: num.evals,
            elapsed_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let up = f_start < level;
    let (mut lo, mut hi) = (start, start);
    let mut step = spread;
    let mut found = false;
    for _ in 0..MAX_DOUBLINGS {
        let b = if up { start + step } else { start - step };
        let (f, _) = num.cdf(b)?;
        if (f >= level) == up {
            if up {
                hi = b;
            } else {
                lo = b;
            }
            found = true;
            break;
        }
        if up {
            lo = b;
        } else {
            hi = b;
        }
        step *= 2.0;
    }
    if !found {
        return Err(Error::Bracket(MAX_DOUBLINGS));
    }
    let (mut b, mut f, mut se) = (0.5 * (lo + hi), f64::NAN, f64::NAN);
    for _ in 0..MAX_BISECTIONS {
        b = 0.5 * (lo + hi);
        (f, se) = num.cdf(b)?;
        if (f - level).abs() <= cfg.tolerance || (hi - lo) <= 1e-12 * b.abs().max(1.0) {
            break;
        }
        if f < level {
            lo = b;
        } else {
            hi = b;
        }
    }
    Ok(CovarResult {
        covar: -b,
        level,
        conditional_cdf: f,
        conditional_se: se,
        denominator: den,
        evaluations: num.evals,
        elapsed_seconds: t0.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrw::{build_finite_chain, FiniteChainSpec, IncrementLaw};

    #[test]
    fn unconditioned_gaussian_var() {
        // passage at step 0 always holds, so the CDF is unconditional
        let m = build_finite_chain(FiniteChainSpec {
            transition: vec![vec![1.0]],
            increments: vec![vec![IncrementLaw::Gaussian { mean: 0.1, var: 1.0 }]],
            initial: None,
        })
        .unwrap();
        let passage = FirstPassage {
            component: 0,
            barrier: 0.0,
            horizon: 4,
            direction: Direction::Below,
        };
        let cfg = CovarConfig {
            sgd: SgdConfig {
                iterations: 10,
                batch_size: 512,
                ..SgdConfig::default()
            },
            n_per_eval: 20_000,
            tolerance: 2e-3,
            refresh_every: 5,
        };
        let q = 0.95;
        let r = covar_bisection(&m, passage, 0, q, &cfg, 3).unwrap();
        // VaR = -(T mu + sqrt(T) sigma z_{1-q}), z_{0.05} = -1.6448536
        let want = -(0.4 + 2.0 * -1.644_853_626_951_472_2);
        assert!((r.covar - want).abs() < 0.05, "{} vs {want}", r.covar);
        assert!((r.conditional_cdf - 0.05).abs() <= cfg.tolerance + 3.0 * r.conditional_se);
    }

    #[test]
    fn rejects_bad_quantile() {
        let m = build_finite_chain(FiniteChainSpec {
            transition: vec![vec![1.0]],
            increments: vec![vec![IncrementLaw::Gaussian { mean: 0.0, var: 1.0 }]],
            initial: None,
        })
        .unwrap();
        let p = FirstPassage {
            component: 0,
            barrier: -1.0,
            horizon: 3,
            direction: Direction::Below,
        };
        assert!(covar_bisection(&m, p, 0, 1.0, &CovarConfig::default(), 1).is_err());
    }
}
