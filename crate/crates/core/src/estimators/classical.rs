use std::sync::Arc;
use std::time::Instant;

use super::{summarize, EstimateSummary};
use crate::error::{Error, Result};
use crate::models::{solve_affine_eigen, Heston};
use crate::mrw::{map_paths, walk, EventSpec, FiniteChain, MarkovRandomWalk, StepObserver, TiltParams};

/// One member of the classical one-parameter family: the tilt that realizes
/// it on the duo family, `Lambda(theta)` and `log r(., theta)`.
pub struct ClassicalTilt<S> {
    pub theta: f64,
    pub lambda: f64,
    pub tilt: TiltParams,
    pub log_r: Arc<dyn Fn(&S) -> f64 + Send + Sync>,
}

impl<S> std::fmt::Debug for ClassicalTilt<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassicalTilt")
            .field("theta", &self.theta)
            .field("lambda", &self.lambda)
            .field("tilt", &self.tilt)
            .finish()
    }
}

/// Models with a computable eigen solution for scalar `theta`.
pub trait ClassicalFamily {
    type Walk: MarkovRandomWalk;
    /// The walk whose `(theta, eta)` tilts include the classical family.
    fn classical_walk(&self) -> Self::Walk;
    fn classical_tilt(&self, theta: f64) -> Result<ClassicalTilt<<Self::Walk as MarkovRandomWalk>::State>>;
}

impl ClassicalFamily for Heston {
    type Walk = Heston;

    fn classical_walk(&self) -> Heston {
        self.clone()
    }

    fn classical_tilt(&self, theta: f64) -> Result<ClassicalTilt<f64>> {
        let e = solve_affine_eigen(self, &[theta])?;
        let a = e.a[0];
        Ok(ClassicalTilt {
            theta,
            lambda: e.lambda,
            tilt: TiltParams::new(vec![theta], e.eta),
            log_r: Arc::new(move |x: &f64| a * x),
        })
    }
}

impl ClassicalFamily for FiniteChain {
    type Walk = FiniteChain;

    fn classical_walk(&self) -> FiniteChain {
        self.with_link(self.classical_link())
    }

    fn classical_tilt(&self, theta: f64) -> Result<ClassicalTilt<usize>> {
        let e = self.perron(theta)?;
        let log_r = e.log_r;
        Ok(ClassicalTilt {
            theta,
            lambda: e.lambda,
            tilt: TiltParams::new(vec![theta], vec![theta]),
            log_r: Arc::new(move |x: &usize| log_r[*x]),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdTilt {
    pub theta: f64,
    /// `c / n`.
    pub target: f64,
    /// `Lambda'` is constant and equal to the target, so every `theta`
    /// solves; `theta = 0` is returned.
    pub degenerate: bool,
}

const FD_H: f64 = 1e-6;
const ROOT_TOL: f64 = 1e-10;

fn dlambda<C: ClassicalFamily + ?Sized>(family: &C, theta: f64) -> Option<f64> {
    let up = family.classical_tilt(theta + FD_H).ok()?.lambda;
    let down = family.classical_tilt(theta - FD_H).ok()?.lambda;
    let d = (up - down) / (2.0 * FD_H);
    d.is_finite().then_some(d)
}

/// Large-deviation tilt for `{S_n > c}`: the root of `Lambda'(theta) = c/n`.
/// Points where the eigen problem has no solution are treated as lying
/// beyond the root, where `Lambda'` has already blown up.
pub fn ld_tilt_param<C: ClassicalFamily + ?Sized>(family: &C, event: &EventSpec) -> Result<LdTilt> {
    let EventSpec::FixedTimeThreshold { n, component, threshold, .. } = *event else {
        return Err(Error::Unsupported("the large-deviation tilt needs a fixed-time threshold event".into()));
    };
    if component != 0 {
        return Err(Error::Unsupported("the large-deviation tilt needs scalar increments".into()));
    }
    let target = threshold / n as f64;
    let d0 = dlambda(family, 0.0).ok_or_else(|| Error::NoEigen("no eigen solution at theta = 0".into()))?;
    let f0 = d0 - target;
    let flat = [-1.0, 1.0]
        .iter()
        .all(|&t| dlambda(family, t).is_some_and(|d| (d - d0).abs() < 1e-9 * d0.abs().max(1.0)));
    if f0.abs() <= ROOT_TOL * target.abs().max(1.0) || flat {
        if f0.abs() <= 1e-9 * target.abs().max(1.0) {
            return Ok(LdTilt {
                theta: 0.0,
                target,
                degenerate: flat,
            });
        }
        if flat {
            return Err(Error::NoSolution(format!(
                "Lambda' is constant at {d0}, target c/n = {target}"
            )));
        }
    }
    let dir = if f0 < 0.0 { 1.0 } else { -1.0 };
    let same_side = |t: f64| dlambda(family, t).is_some_and(|d| (d - target).signum() == f0.signum());
    let (mut a, mut b) = (0.0, f64::NAN);
    let mut delta = 0.5;
    for _ in 0..60 {
        let t = dir * delta;
        if same_side(t) {
            a = t;
            delta *= 2.0;
        } else {
            b = t;
            break;
        }
    }
    if b.is_nan() {
        return Err(Error::NoSolution(format!("c/n = {target} is outside the range of Lambda'")));
    }
    while (b - a).abs() > ROOT_TOL {
        let m = 0.5 * (a + b);
        if same_side(m) {
            a = m;
        } else {
            b = m;
        }
    }
    if dlambda(family, a).is_none() {
        return Err(Error::NoSolution(format!("c/n = {target} is outside the range of Lambda'")));
    }
    Ok(LdTilt {
        theta: a,
        target,
        degenerate: false,
    })
}

struct Endpoints<S> {
    first: Option<S>,
    last: Option<S>,
}

impl<S: Clone> StepObserver<S> for Endpoints<S> {
    fn start(&mut self, x0: &S) {
        self.first = Some(x0.clone());
        self.last = Some(x0.clone());
    }

    fn step(&mut self, _: usize, _: &S, next: &S, _: &[f64]) -> Result<()> {
        self.last = Some(next.clone());
        Ok(())
    }
}

/// One-parameter classical tilting with the telescoped likelihood ratio
/// `r(X_0) / r(X_tau) e^{-theta S_tau + tau Lambda}`. `theta` defaults to
/// the large-deviation choice.
pub fn classical_estimate<C: ClassicalFamily + ?Sized>(
    family: &C,
    event: &EventSpec,
    theta: Option<f64>,
    n: usize,
    seed: u64,
) -> Result<EstimateSummary> {
    super::check_n(n)?;
    let t0 = Instant::now();
    let theta = match theta {
        Some(t) => t,
        None => ld_tilt_param(family, event)?.theta,
    };
    let ct = family.classical_tilt(theta)?;
    let walker = family.classical_walk();
    if walker.theta_dim() != 1 {
        return Err(Error::Unsupported("classical tilting needs scalar increments".into()));
    }
    walker.check_domain(&ct.tilt)?;
    event.validate(walker.incr_dim())?;
    let pairs: Vec<(f64, f64)> = map_paths(n, seed, |_, rng| {
        let mut ends = Endpoints { first: None, last: None };
        let out = walk(&walker, &ct.tilt, event, rng, &mut ends)?;
        let (x0, xt) = (ends.first.expect("start called"), ends.last.expect("start called"));
        let lw = if theta == 0.0 {
            0.0
        } else {
            (ct.log_r)(&x0) - (ct.log_r)(&xt) - theta * out.terminal_sum[0] + out.stop_step as f64 * ct.lambda
        };
        Ok((out.value, lw))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(summarize("classical", event, &pairs, Some(ct.tilt.clone()), t0.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{plain_mc, weighted_paths};
    use crate::models::{build_heston, HestonParams};
    use crate::mrw::{build_finite_chain, exact_probability, Direction, FiniteChainSpec, IncrementLaw};
    use crate::rng::path_rng;

    fn gaussian(mean: f64, var: f64) -> IncrementLaw {
        IncrementLaw::Gaussian { mean, var }
    }

    fn disc(v: f64, p: f64) -> IncrementLaw {
        IncrementLaw::Discrete {
            values: vec![v, v + 1.0],
            probs: vec![p, 1.0 - p],
        }
    }

    #[test]
    fn gaussian_ld_tilt_is_c_over_n() {
        let m = build_finite_chain(FiniteChainSpec {
            transition: vec![vec![1.0]],
            increments: vec![vec![gaussian(0.0, 1.0)]],
            initial: None,
        })
        .unwrap();
        let ev = EventSpec::fixed_time(10, 0, 5.0, Direction::Above);
        let t = ld_tilt_param(&m, &ev).unwrap();
        assert!((t.theta - 0.5).abs() < 1e-8);
        assert!(!t.degenerate);
    }

    #[test]
    fn deterministic_walk_is_degenerate() {
        let m = build_finite_chain(FiniteChainSpec {
            transition: vec![vec![1.0]],
            increments: vec![vec![IncrementLaw::constant(1.0)]],
            initial: None,
        })
        .unwrap();
        let t = ld_tilt_param(&m, &EventSpec::fixed_time(4, 0, 4.0, Direction::Above)).unwrap();
        assert!(t.degenerate);
        assert!(ld_tilt_param(&m, &EventSpec::fixed_time(4, 0, 6.0, Direction::Above)).is_err());
    }

    #[test]
    fn heston_ld_tilt_residual() {
        let m = build_heston(HestonParams::table1()).unwrap();
        let ev = m.tail_event(10, 1.08);
        let t = ld_tilt_param(&m, &ev).unwrap();
        let d = dlambda(&m, t.theta).unwrap();
        assert!((d - t.target).abs() <= 1e-8, "{d} vs {}", t.target);
        assert!(t.theta > 5.0 && t.theta < 12.0);
    }

    #[test]
    fn theta_zero_matches_plain() {
        let m = build_heston(HestonParams::table1()).unwrap();
        let ev = m.tail_event(10, 1.08);
        let a = plain_mc(&m, &ev, 4000, 9).unwrap();
        let b = classical_estimate(&m, &ev, Some(0.0), 4000, 9).unwrap();
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn telescoped_weight_matches_duo_weight_heston() {
        let m = build_heston(HestonParams::table1()).unwrap();
        let ev = m.tail_event(10, 1.08);
        let ct = m.classical_tilt(6.0).unwrap();
        for i in 0..50 {
            let mut ends = Endpoints { first: None, last: None };
            let out = walk(&m, &ct.tilt, &ev, &mut path_rng(3, i), &mut ends).unwrap();
            let tele = (ct.log_r)(&ends.first.unwrap()) - (ct.log_r)(&ends.last.unwrap()) - 6.0 * out.terminal_sum[0]
                + 10.0 * ct.lambda;
            assert!((tele - out.log_weight).abs() < 1e-10 * (1.0 + tele.abs()), "{tele} vs {}", out.log_weight);
        }
    }

    #[test]
    fn telescoped_weight_matches_duo_weight_finite_chain() {
        let m = build_finite_chain(FiniteChainSpec {
            transition: vec![vec![0.6, 0.4], vec![0.3, 0.7]],
            increments: vec![vec![disc(-1.0, 0.7), disc(1.0, 0.4)], vec![disc(-1.0, 0.7), disc(1.0, 0.4)]],
            initial: None,
        })
        .unwrap();
        let ev = EventSpec::fixed_time(6, 0, 3.0, Direction::Above);
        let ct = m.classical_tilt(0.7).unwrap();
        let w = m.classical_walk();
        for i in 0..50 {
            let mut ends = Endpoints { first: None, last: None };
            let out = walk(&w, &ct.tilt, &ev, &mut path_rng(4, i), &mut ends).unwrap();
            let tele = (ct.log_r)(&ends.first.unwrap()) - (ct.log_r)(&ends.last.unwrap()) - 0.7 * out.terminal_sum[0]
                + 6.0 * ct.lambda;
            assert!((tele - out.log_weight).abs() < 1e-10 * (1.0 + tele.abs()));
        }
        let p = exact_probability(m.spec(), &ev).unwrap();
        let s = classical_estimate(&m, &ev, None, 20_000, 8).unwrap();
        assert!((s.mean - p).abs() < 4.0 * s.std_error, "{} vs {p}", s.mean);
        let duo = weighted_paths(&w, &ct.tilt, &ev, 10, 8).unwrap();
        assert_eq!(duo.len(), 10);
    }
}
