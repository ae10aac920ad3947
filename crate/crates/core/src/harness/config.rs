use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::estimators::CovarConfig;
use crate::models::{HestonParams, SirdParams, VarGarchParams};
use crate::mrw::{Direction, EventSpec, FiniteChainSpec};
use crate::optimizer::{LevelSchedule, SgdConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const PRESETS: [&str; 3] = ["heston-t1", "sird-t2", "vargarch-t3"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Plain,
    Classical,
    TwoStage,
    Covar,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Plain => "plain",
            Method::Classical => "classical",
            Method::TwoStage => "two_stage",
            Method::Covar => "covar",
        }
    }
}

/// Fully resolved model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Heston(HestonParams),
    Sird(SirdParams),
    VarGarch(VarGarchParams),
    FiniteChain(FiniteChainSpec),
}

impl ModelParams {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "heston-t1" => Ok(ModelParams::Heston(HestonParams::table1())),
            "sird-t2" => Ok(ModelParams::Sird(SirdParams::table2())),
            "vargarch-t3" => Ok(ModelParams::VarGarch(VarGarchParams::table3())),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Replaces one top-level numeric field, e.g. `alpha` for SIRD.
    pub fn set(&mut self, field: &str, value: f64) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| Error::Config("model parameters are not a table".into()))?;
        if field == "kind" || !obj.contains_key(field) {
            return Err(Error::Config(format!("model has no parameter {field:?}")));
        }
        obj.insert(field.into(), Value::from(value));
        *self = serde_json::from_value(v).map_err(|e| Error::Config(format!("setting {field}: {e}")))?;
        Ok(())
    }
}

/// `[model]`: a preset, or exactly one inline parameter table, plus
/// optional `[model.set]` overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Option<String>,
    pub heston: Option<HestonParams>,
    pub sird: Option<SirdParams>,
    pub var_garch: Option<VarGarchParams>,
    pub finite_chain: Option<FiniteChainSpec>,
    pub set: BTreeMap<String, f64>,
}

impl ModelConfig {
    pub fn from_preset(name: &str) -> Self {
        Self {
            preset: Some(name.into()),
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> Result<ModelParams> {
        let mut found = Vec::new();
        if let Some(name) = &self.preset {
            found.push(ModelParams::preset(name)?);
        }
        if let Some(p) = self.heston {
            found.push(ModelParams::Heston(p));
        }
        if let Some(p) = self.sird {
            found.push(ModelParams::Sird(p));
        }
        if let Some(p) = &self.var_garch {
            found.push(ModelParams::VarGarch(p.clone()));
        }
        if let Some(p) = &self.finite_chain {
            found.push(ModelParams::FiniteChain(p.clone()));
        }
        if found.len() != 1 {
            return Err(Error::Config(format!(
                "[model] needs exactly one of preset, heston, sird, var_garch, finite_chain (found {})",
                found.len()
            )));
        }
        let mut m = found.pop().unwrap_or_else(|| unreachable!());
        for (k, v) in &self.set {
            m.set(k, *v)?;
        }
        Ok(m)
    }
}

/// `[event]`: a model-specific shorthand or a raw event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventConfig {
    /// Heston: `S_steps > log(b_over_s0)`.
    Tail { steps: usize, b_over_s0: f64 },
    /// SIRD: infections reach the model's barrier before its horizon.
    Overflow,
    /// VAR-GARCH: `tau^0_{b0} <= T`.
    Distress { b0: f64 },
    /// VAR-GARCH: `S^component_T <= b` and `tau^0_{b0} <= T`.
    Joint { component: usize, b: f64, b0: f64 },
    FixedTime {
        n: usize,
        component: usize,
        threshold: f64,
        direction: Direction,
    },
    FirstPassage {
        component: usize,
        barrier: f64,
        horizon: usize,
        direction: Direction,
    },
}

impl EventConfig {
    pub fn default_for(model: &ModelParams) -> Result<Self> {
        match model {
            ModelParams::Heston(_) => Ok(EventConfig::Tail {
                steps: 10,
                b_over_s0: 1.08,
            }),
            ModelParams::Sird(_) => Ok(EventConfig::Overflow),
            ModelParams::VarGarch(_) => Ok(EventConfig::Joint {
                component: 1,
                b: -0.25,
                b0: -0.15,
            }),
            ModelParams::FiniteChain(_) => Err(Error::Config("finite-chain models need an explicit [event]".into())),
        }
    }

    /// Replaces one numeric field, e.g. `b_over_s0`.
    pub fn set(&mut self, field: &str, value: f64) -> Result<()> {
        let mut v = serde_json::to_value(*self)?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| Error::Config("event is not a table".into()))?;
        if field == "kind" || !obj.contains_key(field) {
            return Err(Error::Config(format!("event has no field {field:?}")));
        }
        let old = &obj[field];
        let new = if old.is_u64() {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!("event.{field} needs a non-negative integer, got {value}")));
            }
            Value::from(value as u64)
        } else {
            Value::from(value)
        };
        obj.insert(field.into(), new);
        *self = serde_json::from_value(v).map_err(|e| Error::Config(format!("setting event.{field}: {e}")))?;
        Ok(())
    }
}

/// Builds the event for `model`; shorthands must match the model kind.
pub fn resolve_event(cfg: &EventConfig, model: &ModelParams) -> Result<EventSpec> {
    let mismatch = |what: &str| Err(Error::Config(format!("event kind {what:?} does not apply to this model")));
    match (*cfg, model) {
        (EventConfig::Tail { steps, b_over_s0 }, ModelParams::Heston(_)) => {
            if !(b_over_s0 > 0.0) {
                return Err(Error::Config("b_over_s0 must be positive".into()));
            }
            Ok(EventSpec::fixed_time(steps, 0, b_over_s0.ln(), Direction::Above))
        }
        (EventConfig::Tail { .. }, _) => mismatch("tail"),
        (EventConfig::Overflow, ModelParams::Sird(p)) => {
            Ok(EventSpec::first_passage(1, p.barrier() - p.i0, p.horizon, Direction::Above))
        }
        (EventConfig::Overflow, _) => mismatch("overflow"),
        (EventConfig::Distress { b0 }, ModelParams::VarGarch(p)) => {
            Ok(EventSpec::first_passage(0, b0, p.horizon, Direction::Below))
        }
        (EventConfig::Distress { .. }, _) => mismatch("distress"),
        (EventConfig::Joint { component, b, b0 }, ModelParams::VarGarch(p)) => Ok(EventSpec::JointPassageAndTerminal {
            passage: crate::mrw::FirstPassage {
                component: 0,
                barrier: b0,
                horizon: p.horizon,
                direction: Direction::Below,
            },
            terminal: crate::mrw::TerminalThreshold {
                component,
                threshold: b,
                direction: Direction::Below,
            },
        }),
        (EventConfig::Joint { .. }, _) => mismatch("joint"),
        (
            EventConfig::FixedTime {
                n,
                component,
                threshold,
                direction,
            },
            _,
        ) => Ok(EventSpec::fixed_time(n, component, threshold, direction)),
        (
            EventConfig::FirstPassage {
                component,
                barrier,
                horizon,
                direction,
            },
            _,
        ) => Ok(EventSpec::first_passage(component, barrier, horizon, direction)),
    }
}

/// `[covar]`: quantile search on a terminal component given the passage
/// part of the event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovarSettings {
    pub component: usize,
    pub q: f64,
    /// Paths per conditional-CDF evaluation; `samples` when absent.
    pub n_per_eval: Option<usize>,
    pub tolerance: f64,
    pub refresh_every: usize,
}

impl Default for CovarSettings {
    fn default() -> Self {
        let d = CovarConfig::default();
        Self {
            component: 1,
            q: 0.985,
            n_per_eval: None,
            tolerance: d.tolerance,
            refresh_every: d.refresh_every,
        }
    }
}

/// `[sweep]`: one parameter over a grid. `param` names a model field or
/// `event.<field>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: String,
    pub values: Vec<f64>,
    /// Start each Stage 1 search from the previous point's tilt.
    #[serde(default = "yes")]
    pub warm_start: bool,
}

fn yes() -> bool {
    true
}

fn default_samples() -> usize {
    100_000
}

fn default_output() -> PathBuf {
    PathBuf::from("raresim-out")
}

fn default_replications() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub event: Option<EventConfig>,
    pub methods: Vec<Method>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Independent repetitions per job; with more than one, the reported
    /// standard error is the spread of the repetition means.
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Run Stage 1 through intermediate levels.
    #[serde(default)]
    pub levels: Option<LevelSchedule>,
    #[serde(default)]
    pub covar: Option<CovarSettings>,
    #[serde(default)]
    pub seed: u64,
    /// Thread count; all available cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

impl ExperimentConfig {
    /// Defaults for a named preset: plain and two-stage at 10^5 paths, with
    /// a level schedule for `vargarch-t3`.
    pub fn for_preset(name: &str) -> Result<Self> {
        ModelParams::preset(name)?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::from_preset(name),
            event: None,
            methods: vec![Method::Plain, Method::TwoStage],
            samples: default_samples(),
            replications: 1,
            sgd: SgdConfig::default(),
            levels: (name == "vargarch-t3").then(LevelSchedule::default),
            covar: None,
            seed: 0,
            workers: None,
            output: default_output(),
            sweep: None,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must list at least one of plain, classical, two_stage, covar".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("methods contains duplicates".into()));
        }
        if self.samples < 100 {
            return Err(Error::Config(format!("samples must be at least 100, got {}", self.samples)));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        if let Some(c) = &self.covar {
            if c.n_per_eval.is_some_and(|n| n < 100) {
                return Err(Error::Config("covar.n_per_eval must be at least 100".into()));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep.values must not be empty".into()));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("sweep.values must be finite".into()));
            }
        }
        self.sgd.validate().map_err(|e| Error::Config(format!("[sgd]: {e}")))?;
        if let Some(l) = &self.levels {
            l.validate().map_err(|e| Error::Config(format!("[levels]: {e}")))?;
        }
        let model = self.model.resolve()?;
        let event = match self.event {
            Some(e) => e,
            None => EventConfig::default_for(&model)?,
        };
        resolve_event(&event, &model)?;
        Ok(())
    }

    /// Model and event at one sweep point (`None` for the base config).
    pub fn resolve_point(&self, value: Option<f64>) -> Result<(ModelParams, EventSpec)> {
        let mut model = self.model.resolve()?;
        let mut event = match self.event {
            Some(e) => e,
            None => EventConfig::default_for(&model)?,
        };
        if let (Some(s), Some(v)) = (&self.sweep, value) {
            match s.param.strip_prefix("event.") {
                Some(field) => event.set(field, v)?,
                None => model.set(&s.param, v)?,
            }
        }
        let spec = resolve_event(&event, &model)?;
        Ok((model, spec))
    }

    pub fn covar_config(&self) -> (CovarSettings, CovarConfig) {
        let s = self.covar.clone().unwrap_or_default();
        let cfg = CovarConfig {
            sgd: self.sgd.clone(),
            n_per_eval: s.n_per_eval.unwrap_or(self.samples),
            tolerance: s.tolerance,
            refresh_every: s.refresh_every,
        };
        (s, cfg)
    }
}
