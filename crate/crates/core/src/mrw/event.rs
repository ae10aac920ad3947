use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `S >= level`
    Above,
    /// `S <= level`
    Below,
}

impl Direction {
    pub fn holds(self, value: f64, level: f64) -> bool {
        match self {
            Direction::Above => value >= level,
            Direction::Below => value <= level,
        }
    }
}

/// `tau_b = min{n >= 0 : S_n[component] relation barrier}` checked against `horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstPassage {
    pub component: usize,
    pub barrier: f64,
    pub horizon: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalThreshold {
    pub component: usize,
    pub threshold: f64,
    pub direction: Direction,
}

/// Indicator events `F(S_tau)` with their stopping rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventSpec {
    /// `1{S_n[component] relation threshold}`.
    FixedTimeThreshold {
        n: usize,
        component: usize,
        threshold: f64,
        direction: Direction,
    },
    /// `1{tau_b <= T}`; the path stops at `min(tau_b, T)`.
    FirstPassageBeforeT {
        #[serde(flatten)]
        passage: FirstPassage,
    },
    /// `1{tau_b <= T} * 1{S_T[j] relation threshold}`; always runs to `T`.
    JointPassageAndTerminal {
        passage: FirstPassage,
        terminal: TerminalThreshold,
    },
}

impl EventSpec {
    pub fn fixed_time(n: usize, component: usize, threshold: f64, direction: Direction) -> Self {
        EventSpec::FixedTimeThreshold {
            n,
            component,
            threshold,
            direction,
        }
    }

    pub fn first_passage(component: usize, barrier: f64, horizon: usize, direction: Direction) -> Self {
        EventSpec::FirstPassageBeforeT {
            passage: FirstPassage {
                component,
                barrier,
                horizon,
                direction,
            },
        }
    }

    /// Maximum number of steps a path may take.
    pub fn horizon(&self) -> usize {
        match self {
            EventSpec::FixedTimeThreshold { n, .. } => *n,
            EventSpec::FirstPassageBeforeT { passage } => passage.horizon,
            EventSpec::JointPassageAndTerminal { passage, .. } => passage.horizon,
        }
    }

    pub fn validate(&self, incr_dim: usize) -> Result<()> {
        let comps: Vec<usize> = match self {
            EventSpec::FixedTimeThreshold { component, .. } => vec![*component],
            EventSpec::FirstPassageBeforeT { passage } => vec![passage.component],
            EventSpec::JointPassageAndTerminal { passage, terminal } => {
                vec![passage.component, terminal.component]
            }
        };
        if let Some(c) = comps.iter().find(|&&c| c >= incr_dim) {
            return Err(Error::Contract(format!(
                "event component {c} out of range for increment dimension {incr_dim}"
            )));
        }
        if self.horizon() == 0 {
            return Err(Error::Contract("event horizon must be positive".into()));
        }
        let levels = match self {
            EventSpec::FixedTimeThreshold { threshold, .. } => vec![*threshold],
            EventSpec::FirstPassageBeforeT { passage } => vec![passage.barrier],
            EventSpec::JointPassageAndTerminal { passage, terminal } => {
                vec![passage.barrier, terminal.threshold]
            }
        };
        if levels.iter().any(|l| !l.is_finite()) {
            return Err(Error::Contract("event levels must be finite".into()));
        }
        Ok(())
    }

    /// The passage part alone, for conditioning events.
    pub fn passage(&self) -> Option<FirstPassage> {
        match self {
            EventSpec::FixedTimeThreshold { .. } => None,
            EventSpec::FirstPassageBeforeT { passage } => Some(*passage),
            EventSpec::JointPassageAndTerminal { passage, .. } => Some(*passage),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Flow {
    Continue,
    Stop,
}

/// Tracks the stopping rule and the indicator along one path.
#[derive(Debug)]
pub(crate) struct EventTracker<'a> {
    event: &'a EventSpec,
    passed: bool,
}

impl<'a> EventTracker<'a> {
    pub fn new(event: &'a EventSpec) -> Self {
        Self {
            event,
            passed: false,
        }
    }

    /// Observes `S_step`; `step == 0` is the starting point.
    pub fn observe(&mut self, step: usize, sum: &[f64]) -> Flow {
        match self.event {
            EventSpec::FixedTimeThreshold { n, .. } => {
                if step >= *n {
                    Flow::Stop
                } else {
                    Flow::Continue
                }
            }
            EventSpec::FirstPassageBeforeT { passage } => {
                if passage.direction.holds(sum[passage.component], passage.barrier) {
                    self.passed = true;
                    Flow::Stop
                } else if step >= passage.horizon {
                    Flow::Stop
                } else {
                    Flow::Continue
                }
            }
            EventSpec::JointPassageAndTerminal { passage, .. } => {
                if passage.direction.holds(sum[passage.component], passage.barrier) {
                    self.passed = true;
                }
                if step >= passage.horizon {
                    Flow::Stop
                } else {
                    Flow::Continue
                }
            }
        }
    }

    /// `F` for a path that stopped with running sum `sum`.
    pub fn value(&self, sum: &[f64]) -> f64 {
        let hit = match self.event {
            EventSpec::FixedTimeThreshold {
                component,
                threshold,
                direction,
                ..
            } => direction.holds(sum[*component], *threshold),
            EventSpec::FirstPassageBeforeT { .. } => self.passed,
            EventSpec::JointPassageAndTerminal { terminal, .. } => {
                self.passed && terminal.direction.holds(sum[terminal.component], terminal.threshold)
            }
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}
