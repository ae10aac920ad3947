//! Stage 2 estimators, the plain and classical baselines, CoVaR bisection
//! and efficiency reporting.

mod classical;
mod covar;

pub use classical::{classical_estimate, ld_tilt_param, ClassicalFamily, ClassicalTilt, LdTilt};
pub use covar::{covar_bisection, CovarConfig, CovarResult};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrw::{map_paths, walk, EventSpec, MarkovRandomWalk, NoObserver, TiltParams};
use crate::optimizer::{search_tilt, search_tilt_multilevel, LevelSchedule, SearchResult, SgdConfig};
use crate::rng::{derive_seed, label};
use crate::stats::weighted_moments;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub method: String,
    pub event_id: String,
    pub mean: f64,
    pub std_error: f64,
    pub sample_variance: f64,
    pub n: usize,
    pub hits: usize,
    pub elapsed_seconds: f64,
    pub tilt: Option<TiltParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub sd_reduction_ratio: f64,
    pub time_consumption_ratio: f64,
    pub efficiency_ratio: f64,
}

impl EfficiencyReport {
    pub fn from_ratios(sd_reduction_ratio: f64, time_consumption_ratio: f64) -> Self {
        Self {
            sd_reduction_ratio,
            time_consumption_ratio,
            efficiency_ratio: sd_reduction_ratio / time_consumption_ratio.sqrt(),
        }
    }
}

/// Compact identifier of an event, used to match summaries.
pub fn event_id(event: &EventSpec) -> String {
    serde_json::to_string(event).unwrap_or_else(|_| format!("{event:?}"))
}

/// Ratios of `candidate` against `baseline`: standard deviation reduction,
/// time consumption and their combination `sd / sqrt(time)`.
pub fn efficiency_report(candidate: &EstimateSummary, baseline: &EstimateSummary) -> Result<EfficiencyReport> {
    if candidate.n != baseline.n || candidate.event_id != baseline.event_id {
        return Err(Error::Contract(format!(
            "efficiency needs matching runs: n {} vs {}, events {} vs {}",
            candidate.n, baseline.n, candidate.event_id, baseline.event_id
        )));
    }
    let sd = if candidate.std_error == baseline.std_error {
        1.0
    } else {
        baseline.std_error / candidate.std_error
    };
    let time = if candidate.elapsed_seconds == baseline.elapsed_seconds {
        1.0
    } else {
        candidate.elapsed_seconds / baseline.elapsed_seconds
    };
    Ok(EfficiencyReport::from_ratios(sd, time))
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub event_id: String,
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    pub elapsed_s: f64,
    pub sd_reduction: Option<f64>,
    pub time_ratio: Option<f64>,
    pub efficiency_ratio: Option<f64>,
    pub tilt_theta: String,
    pub tilt_eta: String,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

impl SummaryRow {
    pub fn new(s: &EstimateSummary, report: Option<&EfficiencyReport>) -> Self {
        let (theta, eta) = s
            .tilt
            .as_ref()
            .map(|t| (join(&t.theta), join(&t.eta)))
            .unwrap_or_default();
        Self {
            method: s.method.clone(),
            event_id: s.event_id.clone(),
            mean: s.mean,
            std_error: s.std_error,
            n: s.n,
            elapsed_s: s.elapsed_seconds,
            sd_reduction: report.map(|r| r.sd_reduction_ratio),
            time_ratio: report.map(|r| r.time_consumption_ratio),
            efficiency_ratio: report.map(|r| r.efficiency_ratio),
            tilt_theta: theta,
            tilt_eta: eta,
        }
    }
}

/// `(F, log weight)` for `n` paths simulated under `tilt`.
pub(crate) fn weighted_paths<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    tilt: &TiltParams,
    event: &EventSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    model.check_domain(tilt)?;
    event.validate(model.incr_dim())?;
    map_paths(n, seed, |_, rng| {
        walk(model, tilt, event, rng, &mut NoObserver).map(|o| (o.value, o.log_weight))
    })
    .into_iter()
    .collect()
}

pub(crate) fn summarize(
    method: &str,
    event: &EventSpec,
    pairs: &[(f64, f64)],
    tilt: Option<TiltParams>,
    elapsed: f64,
) -> EstimateSummary {
    let m = weighted_moments(pairs);
    EstimateSummary {
        method: method.into(),
        event_id: event_id(event),
        mean: m.mean,
        std_error: m.std_error(),
        sample_variance: m.variance,
        n: m.n,
        hits: m.nonzero,
        elapsed_seconds: elapsed,
        tilt,
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Contract(format!("sample size must be at least 2, got {n}")));
    }
    Ok(())
}

/// Untilted simulation; the estimate is the hit fraction.
pub fn plain_mc<M: MarkovRandomWalk + ?Sized>(model: &M, event: &EventSpec, n: usize, seed: u64) -> Result<EstimateSummary> {
    check_n(n)?;
    let t0 = Instant::now();
    let zero = TiltParams::zeros_for(model);
    let pairs = weighted_paths(model, &zero, event, n, seed)?;
    Ok(summarize("plain", event, &pairs, None, t0.elapsed().as_secs_f64()))
}

/// Mean of `F e^{log weight}` over paths drawn under `tilt`.
pub fn importance_estimate<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    tilt: &TiltParams,
    event: &EventSpec,
    n: usize,
    seed: u64,
) -> Result<EstimateSummary> {
    check_n(n)?;
    let t0 = Instant::now();
    let pairs = weighted_paths(model, tilt, event, n, seed)?;
    Ok(summarize("importance", event, &pairs, Some(tilt.clone()), t0.elapsed().as_secs_f64()))
}

/// Stage 1 search followed by Stage 2 sampling at the returned tilt.
/// The elapsed time covers both stages.
pub fn two_stage_estimate<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    event: &EventSpec,
    sgd: &SgdConfig,
    n: usize,
    seed: u64,
) -> Result<(EstimateSummary, SearchResult)> {
    check_n(n)?;
    let t0 = Instant::now();
    let search = search_tilt(model, event, sgd, seed)?;
    let pairs = weighted_paths(model, &search.tilt, event, n, derive_seed(seed, label("stage2")))?;
    let s = summarize("two_stage", event, &pairs, Some(search.tilt.clone()), t0.elapsed().as_secs_f64());
    Ok((s, search))
}

/// [`two_stage_estimate`] with Stage 1 run through a sequence of easier
/// levels, for events the starting tilt almost never reaches.
pub fn two_stage_multilevel_estimate<M: MarkovRandomWalk + ?Sized>(
    model: &M,
    event: &EventSpec,
    sgd: &SgdConfig,
    schedule: &LevelSchedule,
    n: usize,
    seed: u64,
) -> Result<(EstimateSummary, SearchResult)> {
    check_n(n)?;
    let t0 = Instant::now();
    let search = search_tilt_multilevel(model, event, sgd, schedule, seed)?;
    let pairs = weighted_paths(model, &search.tilt, event, n, derive_seed(seed, label("stage2")))?;
    let s = summarize("two_stage", event, &pairs, Some(search.tilt.clone()), t0.elapsed().as_secs_f64());
    Ok((s, search))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrw::{build_finite_chain, exact_probability, Direction, FiniteChainSpec, IncrementLaw};

    fn disc(values: &[f64], probs: &[f64]) -> IncrementLaw {
        IncrementLaw::Discrete {
            values: values.to_vec(),
            probs: probs.to_vec(),
        }
    }

    fn chain() -> crate::mrw::FiniteChain {
        let spec = FiniteChainSpec {
            transition: vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            increments: vec![
                vec![disc(&[-1.0, 1.0], &[0.6, 0.4]), disc(&[0.0, 2.0], &[0.5, 0.5])],
                vec![disc(&[-1.0, 0.5], &[0.3, 0.7]), disc(&[-2.0, 1.0], &[0.5, 0.5])],
            ],
            initial: None,
        };
        build_finite_chain(spec).unwrap()
    }

    fn summary(se: f64, t: f64) -> EstimateSummary {
        EstimateSummary {
            method: "x".into(),
            event_id: "e".into(),
            mean: 0.1,
            std_error: se,
            sample_variance: se * se * 100.0,
            n: 100,
            hits: 10,
            elapsed_seconds: t,
            tilt: None,
        }
    }

    #[test]
    fn efficiency_arithmetic() {
        let r = EfficiencyReport::from_ratios(4.22, 1.09);
        assert!((r.efficiency_ratio - 4.04).abs() < 5e-3);
        let r = EfficiencyReport::from_ratios(2.69, 1.88);
        assert!((r.efficiency_ratio - 1.962).abs() < 1e-3);
        let same = efficiency_report(&summary(0.01, 2.0), &summary(0.01, 2.0)).unwrap();
        assert_eq!(same, EfficiencyReport::from_ratios(1.0, 1.0));
        assert_eq!(same.efficiency_ratio, 1.0);
        let mut other = summary(0.01, 2.0);
        other.n = 50;
        assert!(matches!(efficiency_report(&other, &summary(0.01, 2.0)), Err(Error::Contract(_))));
        let r = efficiency_report(&summary(0.002, 3.0), &summary(0.01, 2.0)).unwrap();
        assert!((r.efficiency_ratio - r.sd_reduction_ratio / r.time_consumption_ratio.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn always_hit_event_has_zero_error() {
        let m = chain();
        let e = EventSpec::first_passage(0, 0.0, 5, Direction::Above);
        let s = plain_mc(&m, &e, 1000, 1).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.std_error, 0.0);
    }

    #[test]
    fn zero_tilt_importance_equals_plain() {
        let m = chain();
        let e = EventSpec::fixed_time(6, 0, 2.0, Direction::Above);
        let a = plain_mc(&m, &e, 5000, 3).unwrap();
        let b = importance_estimate(&m, &TiltParams::zeros(1, 2), &e, 5000, 3).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
    }

    #[test]
    fn estimators_agree_with_exact_probability() {
        let m = chain();
        let e = EventSpec::fixed_time(6, 0, 3.0, Direction::Above);
        let p = exact_probability(m.spec(), &e).unwrap();
        let plain = plain_mc(&m, &e, 20_000, 5).unwrap();
        assert!((plain.mean - p).abs() < 4.0 * plain.std_error);
        let is = importance_estimate(&m, &TiltParams::new(vec![0.4], vec![0.3, -0.2]), &e, 20_000, 6).unwrap();
        assert!((is.mean - p).abs() < 4.0 * is.std_error, "{} vs {p}", is.mean);
        let cfg = SgdConfig {
            iterations: 60,
            batch_size: 2048,
            ..SgdConfig::default()
        };
        let (ts, _) = two_stage_estimate(&m, &e, &cfg, 20_000, 7).unwrap();
        assert!((ts.mean - p).abs() < 4.0 * ts.std_error);
        assert!(ts.std_error < plain.std_error);
    }

    #[test]
    fn summary_row_carries_report() {
        let mut s = summary(0.01, 1.0);
        s.tilt = Some(TiltParams::new(vec![0.5], vec![1.0, -2.0]));
        let r = EfficiencyReport::from_ratios(2.0, 1.0);
        let row = SummaryRow::new(&s, Some(&r));
        assert_eq!(row.efficiency_ratio, Some(2.0));
        assert_eq!(row.tilt_eta, "1e0 -2e0");
    }
}
