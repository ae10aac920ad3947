use serde::{Deserialize, Serialize};

use super::event::{EventTracker, Flow};
use super::{dot, EventSpec, MarkovRandomWalk, TiltParams};
use crate::error::{Error, Result};
use crate::rng::PathRng;

/// Per-step hook used by the objective evaluator and the path recorder.
pub(crate) trait StepObserver<S> {
    fn start(&mut self, _x0: &S) {}
    fn step(&mut self, step: usize, x: &S, next: &S, y: &[f64]) -> Result<()>;
}

pub(crate) struct NoObserver;

impl<S> StepObserver<S> for NoObserver {
    #[inline]
    fn step(&mut self, _: usize, _: &S, _: &S, _: &[f64]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct WalkOutcome {
    pub value: f64,
    pub log_weight: f64,
    pub stop_step: usize,
    pub terminal_sum: Vec<f64>,
    pub absorbed: bool,
}

/// Simulates one path under `sample_tilt` and accumulates the likelihood
/// ratio `-theta'S + sum(psi - k + phi)` in log space.
pub(crate) fn walk<M, O>(
    model: &M,
    tilt: &TiltParams,
    event: &EventSpec,
    rng: &mut PathRng,
    obs: &mut O,
) -> Result<WalkOutcome>
where
    M: MarkovRandomWalk + ?Sized,
    O: StepObserver<M::State>,
{
    let d = model.incr_dim();
    let theta_on = tilt.theta.iter().any(|&t| t != 0.0);
    let eta_on = tilt.eta.iter().any(|&e| e != 0.0);
    let horizon = event.horizon();

    let mut x = model.initial_state(rng);
    obs.start(&x);
    let mut sum = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut log_w = 0.0;
    let mut tracker = EventTracker::new(event);
    let mut step = 0usize;
    let mut absorbed = false;

    if tracker.observe(0, &sum) == Flow::Continue {
        loop {
            if model.is_absorbing(&x) {
                absorbed = true;
                break;
            }
            step += 1;
            let next = model
                .sample_transition(&x, &tilt.eta, rng)
                .map_err(|e| Error::overflow(step, e))?;
            model.sample_increment(&x, &next, &tilt.theta, rng, &mut y);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::overflow(step, "increment"));
            }
            if theta_on {
                let t = model.psi(&x, &next, &tilt.theta);
                if !t.is_finite() {
                    return Err(Error::overflow(step, "psi"));
                }
                log_w += t;
            }
            if eta_on {
                let t = model.transition_log_ratio(&x, &next, &tilt.eta);
                if !t.is_finite() {
                    return Err(Error::overflow(step, "link log ratio"));
                }
                log_w -= t;
            }
            for (s, v) in sum.iter_mut().zip(&y) {
                *s += v;
            }
            obs.step(step, &x, &next, &y)?;
            x = next;
            if tracker.observe(step, &sum) == Flow::Stop || step >= horizon {
                break;
            }
        }
    }
    if theta_on {
        log_w -= dot(&tilt.theta, &sum[..tilt.theta.len()]);
    }
    if !log_w.is_finite() {
        return Err(Error::overflow(step, "log weight"));
    }
    Ok(WalkOutcome {
        value: tracker.value(&sum),
        log_weight: log_w,
        stop_step: step,
        terminal_sum: sum,
        absorbed,
    })
}

/// One simulated trajectory, serializable as a JSON line for debugging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord<S> {
    pub states: Vec<S>,
    pub increments: Vec<Vec<f64>>,
    pub terminal_sum: Vec<f64>,
    pub stop_step: usize,
    pub log_weight: f64,
    pub event: f64,
    pub absorbed: bool,
}

impl<S> PathRecord<S> {
    pub fn event_hit(&self) -> bool {
        self.event != 0.0
    }

    /// `S_0, S_1, ..., S_tau`.
    pub fn running_sums(&self) -> Vec<Vec<f64>> {
        let d = self.terminal_sum.len();
        let mut out = Vec::with_capacity(self.increments.len() + 1);
        let mut s = vec![0.0; d];
        out.push(s.clone());
        for y in &self.increments {
            for (a, b) in s.iter_mut().zip(y) {
                *a += b;
            }
            out.push(s.clone());
        }
        out
    }
}

impl<S: Serialize> PathRecord<S> {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

struct Recorder<S> {
    states: Vec<S>,
    increments: Vec<Vec<f64>>,
}

impl<S: Clone> StepObserver<S> for Recorder<S> {
    fn start(&mut self, x0: &S) {
        self.states.push(x0.clone());
    }

    fn step(&mut self, _: usize, _: &S, next: &S, y: &[f64]) -> Result<()> {
        self.states.push(next.clone());
        self.increments.push(y.to_vec());
        Ok(())
    }
}

/// Simulates one path under `P_{theta,eta}` and records it in full.
pub fn simulate_path<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    tilt: &TiltParams,
    event: &EventSpec,
    rng: &mut PathRng,
) -> Result<PathRecord<M::State>> {
    model.check_domain(tilt)?;
    event.validate(model.incr_dim())?;
    let mut rec = Recorder {
        states: Vec::new(),
        increments: Vec::new(),
    };
    let out = walk(model, tilt, event, rng, &mut rec)?;
    Ok(PathRecord {
        states: rec.states,
        increments: rec.increments,
        terminal_sum: out.terminal_sum,
        stop_step: out.stop_step,
        log_weight: out.log_weight,
        event: out.value,
        absorbed: out.absorbed,
    })
}

/// `F(S_tau)` for a recorded path. Fails when the path was not stopped by a
/// rule compatible with `event`.
pub fn event_value<S>(event: &EventSpec, path: &PathRecord<S>) -> Result<f64> {
    let d = path.terminal_sum.len();
    event.validate(d)?;
    let incompatible = |why: &str| Err(Error::Contract(format!("path incompatible with event: {why}")));
    if !path.increments.is_empty() && path.increments.len() != path.stop_step {
        return incompatible("increment count differs from stop step");
    }
    let sums = if path.increments.is_empty() && path.stop_step > 0 {
        None
    } else {
        Some(path.running_sums())
    };
    match event {
        EventSpec::FixedTimeThreshold {
            n,
            component,
            threshold,
            direction,
        } => {
            if path.stop_step != *n && !path.absorbed {
                return incompatible("fixed-time event needs the path at step n");
            }
            Ok(f64::from(u8::from(
                direction.holds(path.terminal_sum[*component], *threshold),
            )))
        }
        EventSpec::FirstPassageBeforeT { passage } => {
            let Some(sums) = sums else {
                return incompatible("first-passage event needs the increments");
            };
            let hit = sums
                .iter()
                .position(|s| passage.direction.holds(s[passage.component], passage.barrier));
            match hit {
                Some(t) if t <= passage.horizon => {
                    if t != path.stop_step {
                        return incompatible("path did not stop at the passage time");
                    }
                    Ok(1.0)
                }
                _ => {
                    if path.stop_step != passage.horizon && !path.absorbed {
                        return incompatible("path stopped before the horizon without passage");
                    }
                    Ok(0.0)
                }
            }
        }
        EventSpec::JointPassageAndTerminal { passage, terminal } => {
            let Some(sums) = sums else {
                return incompatible("joint event needs the increments");
            };
            if path.stop_step != passage.horizon && !path.absorbed {
                return incompatible("joint event needs the path run to the horizon");
            }
            let passed = sums
                .iter()
                .any(|s| passage.direction.holds(s[passage.component], passage.barrier));
            let term = terminal
                .direction
                .holds(path.terminal_sum[terminal.component], terminal.threshold);
            Ok(f64::from(u8::from(passed && term)))
        }
    }
}
