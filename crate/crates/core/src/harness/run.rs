use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Method, ModelParams};
use crate::error::{Error, Result};
use crate::estimators::{
    classical_estimate, covar_bisection, efficiency_report, plain_mc, two_stage_estimate, two_stage_multilevel_estimate,
    ClassicalFamily, CovarResult, EstimateSummary, SummaryRow,
};
use crate::models::{build_heston, build_sird, build_var_garch, Heston, Sird, VarGarch};
use crate::mrw::{build_finite_chain, EventSpec, FiniteChain, MarkovRandomWalk, TiltParams};
use crate::optimizer::SgdConfig;
use crate::rng::{derive_seed, label};

enum Built {
    Heston(Heston),
    Sird(Sird),
    VarGarch(VarGarch),
    Finite(FiniteChain),
}

impl Built {
    fn new(p: &ModelParams) -> Result<Self> {
        Ok(match p {
            ModelParams::Heston(h) => Built::Heston(build_heston(*h)?),
            ModelParams::Sird(s) => Built::Sird(build_sird(*s)?),
            ModelParams::VarGarch(v) => Built::VarGarch(build_var_garch(v.clone())?),
            ModelParams::FiniteChain(f) => Built::Finite(build_finite_chain(f.clone())?),
        })
    }

    fn walk(&self) -> &dyn MarkovRandomWalkDyn {
        match self {
            Built::Heston(m) => m,
            Built::Sird(m) => m,
            Built::VarGarch(m) => m,
            Built::Finite(m) => m,
        }
    }
}

/// Object-safe front for the estimators the harness dispatches to.
trait MarkovRandomWalkDyn {
    fn plain(&self, event: &EventSpec, n: usize, seed: u64) -> Result<EstimateSummary>;
    fn two_stage(&self, event: &EventSpec, cfg: &ExperimentConfig, sgd: &SgdConfig, seed: u64) -> Result<(EstimateSummary, SearchInfo)>;
    fn covar(&self, event: &EventSpec, cfg: &ExperimentConfig, seed: u64) -> Result<CovarResult>;
}

impl<M: MarkovRandomWalk> MarkovRandomWalkDyn for M {
    fn plain(&self, event: &EventSpec, n: usize, seed: u64) -> Result<EstimateSummary> {
        plain_mc(self, event, n, seed)
    }

    fn two_stage(&self, event: &EventSpec, cfg: &ExperimentConfig, sgd: &SgdConfig, seed: u64) -> Result<(EstimateSummary, SearchInfo)> {
        let (s, r) = match &cfg.levels {
            Some(levels) => two_stage_multilevel_estimate(self, event, sgd, levels, cfg.samples, seed)?,
            None => two_stage_estimate(self, event, sgd, cfg.samples, seed)?,
        };
        let info = SearchInfo {
            tilt: r.tilt.clone(),
            iterations: r.trace.len(),
            samples_used: r.samples_used,
            converged: r.converged,
            trace_csv: r.trace_csv_string()?,
        };
        Ok((s, info))
    }

    fn covar(&self, event: &EventSpec, cfg: &ExperimentConfig, seed: u64) -> Result<CovarResult> {
        let passage = event
            .passage()
            .ok_or_else(|| Error::Config("covar needs an event with a first-passage part".into()))?;
        let (s, c) = cfg.covar_config();
        covar_bisection(self, passage, s.component, s.q, &c, seed)
    }
}

fn classical<C: ClassicalFamily>(family: &C, event: &EventSpec, n: usize, seed: u64) -> Result<EstimateSummary> {
    classical_estimate(family, event, None, n, seed)
}

#[derive(Debug, Clone, Serialize)]
struct SearchInfo {
    tilt: TiltParams,
    iterations: usize,
    samples_used: usize,
    converged: bool,
    /// Stage 1 trace in CSV form.
    trace_csv: String,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum JobResult {
    Estimate {
        summary: EstimateSummary,
        #[serde(skip_serializing_if = "Option::is_none")]
        search: Option<SearchInfo>,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        replicate_means: Vec<f64>,
    },
    Covar {
        result: CovarResult,
    },
    Error {
        error: String,
    },
}

#[derive(Debug, Clone, Serialize)]
struct Job {
    method: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep_value: Option<f64>,
    seed: u64,
    #[serde(flatten)]
    result: JobResult,
}

/// What a run produced, in memory and on disk.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub summary: Vec<SummaryRow>,
    /// `(method, sweep value, summary)` for every successful estimate.
    pub estimates: Vec<(String, Option<f64>, EstimateSummary)>,
    pub covar: Vec<CovarResult>,
    pub failures: Vec<String>,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    config_sha256: String,
    seed: u64,
    workers: usize,
    crate_version: &'static str,
    model: &'a ModelParams,
    jobs: usize,
    failed_jobs: usize,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct SweepRow {
    param: f64,
    mean: f64,
    std_error: f64,
    n: usize,
    elapsed_s: f64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn job_seed(master: u64, method: Method, point: usize) -> u64 {
    derive_seed(derive_seed(master, label(method.name())), point as u64)
}

/// Mean of the repetition means and their standard deviation.
fn merge_replicates(reps: &[EstimateSummary]) -> EstimateSummary {
    let mut out = reps[0].clone();
    let k = reps.len() as f64;
    let means: Vec<f64> = reps.iter().map(|r| r.mean).collect();
    let m = means.iter().sum::<f64>() / k;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0);
    out.mean = m;
    out.std_error = var.sqrt();
    out.sample_variance = var * out.n as f64;
    out.hits = reps.iter().map(|r| r.hits).sum();
    out.elapsed_seconds = reps.iter().map(|r| r.elapsed_seconds).sum::<f64>() / k;
    out
}

fn run_job(
    built: &Built,
    method: Method,
    event: &EventSpec,
    cfg: &ExperimentConfig,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<(JobResult, Option<TiltParams>)> {
    let m = built.walk();
    if method == Method::Covar {
        return Ok((JobResult::Covar { result: m.covar(event, cfg, seed)? }, None));
    }
    let mut reps = Vec::with_capacity(cfg.replications);
    let mut search = None;
    for r in 0..cfg.replications {
        let s = if cfg.replications == 1 { seed } else { derive_seed(seed, r as u64) };
        let summary = match method {
            Method::Plain => m.plain(event, cfg.samples, s)?,
            Method::TwoStage => {
                let (summary, info) = m.two_stage(event, cfg, sgd, s)?;
                search.get_or_insert(info);
                summary
            }
            Method::Classical => match built {
                Built::Heston(h) => classical(h, event, cfg.samples, s)?,
                Built::Finite(f) => classical(f, event, cfg.samples, s)?,
                _ => {
                    return Err(Error::Unsupported(
                        "classical tilting needs an eigenfunction (Heston or finite-chain models)".into(),
                    ))
                }
            },
            Method::Covar => unreachable!(),
        };
        reps.push(summary);
    }
    let replicate_means = if reps.len() > 1 { reps.iter().map(|r| r.mean).collect() } else { Vec::new() };
    let summary = if reps.len() > 1 { merge_replicates(&reps) } else { reps.remove(0) };
    let tilt = search.as_ref().map(|s| s.tilt.clone());
    Ok((
        JobResult::Estimate {
            summary,
            search,
            replicate_means,
        },
        tilt,
    ))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every (sweep point, method) job of `cfg` on a pool of `cfg.workers`
/// threads and writes the reports into `cfg.output`. A failing job is
/// recorded and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let workers = cfg
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| run_inner(cfg, workers))
}

fn run_inner(cfg: &ExperimentConfig, workers: usize) -> Result<RunReport> {
    let out = &cfg.output;
    fs::create_dir_all(out)?;
    let points: Vec<Option<f64>> = match &cfg.sweep {
        Some(s) => s.values.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    let warm = cfg.sweep.as_ref().is_some_and(|s| s.warm_start);

    let mut jobs: Vec<Job> = Vec::new();
    let mut summary = Vec::new();
    let mut estimates = Vec::new();
    let mut covar = Vec::new();
    let mut failures = Vec::new();
    let mut last_tilt: Option<TiltParams> = None;
    let mut base_model = None;

    for (idx, &point) in points.iter().enumerate() {
        let resolved = cfg.resolve_point(point).and_then(|(p, e)| Built::new(&p).map(|b| (p, b, e)));
        let (params, built, event) = match resolved {
            Ok(x) => x,
            Err(e) => {
                for &method in &cfg.methods {
                    let msg = e.to_string();
                    failures.push(format!("{} at {point:?}: {msg}", method.name()));
                    jobs.push(Job {
                        method: method.name(),
                        sweep_value: point,
                        seed: job_seed(cfg.seed, method, idx),
                        result: JobResult::Error { error: msg },
                    });
                }
                continue;
            }
        };
        base_model.get_or_insert(params);
        let mut point_rows: Vec<(Method, EstimateSummary)> = Vec::new();
        for &method in &cfg.methods {
            let seed = job_seed(cfg.seed, method, idx);
            let mut sgd = cfg.sgd.clone();
            if warm && last_tilt.is_some() && sgd.initial.is_none() {
                sgd.initial = last_tilt.clone();
            }
            log::info!("running {} at {point:?}", method.name());
            let result = match run_job(&built, method, &event, cfg, &sgd, seed) {
                Ok((r, tilt)) => {
                    if tilt.is_some() {
                        last_tilt = tilt;
                    }
                    r
                }
                Err(e) => {
                    log::warn!("{} at {point:?} failed: {e}", method.name());
                    failures.push(format!("{} at {point:?}: {e}", method.name()));
                    JobResult::Error { error: e.to_string() }
                }
            };
            match &result {
                JobResult::Estimate { summary: s, .. } => {
                    point_rows.push((method, s.clone()));
                    estimates.push((method.name().to_string(), point, s.clone()));
                }
                JobResult::Covar { result } => covar.push(result.clone()),
                JobResult::Error { .. } => {}
            }
            jobs.push(Job {
                method: method.name(),
                sweep_value: point,
                seed,
                result,
            });
        }
        let plain = point_rows.iter().find(|(m, _)| *m == Method::Plain).map(|(_, s)| s.clone());
        for (method, s) in &point_rows {
            let report = match (&plain, method) {
                (Some(p), m) if *m != Method::Plain => efficiency_report(s, p).ok(),
                _ => None,
            };
            summary.push(SummaryRow::new(s, report.as_ref()));
        }
    }

    let mut files = Vec::new();
    let path = out.join("summary.csv");
    write_csv(&path, &summary)?;
    files.push(path);

    for &method in &cfg.methods {
        let mine: Vec<&Job> = jobs.iter().filter(|j| j.method == method.name()).collect();
        let path = out.join(format!("{}.json", method.name()));
        fs::write(&path, serde_json::to_string_pretty(&mine)?)?;
        files.push(path);
    }

    if cfg.sweep.is_some() {
        let estimating: Vec<Method> = cfg.methods.iter().copied().filter(|m| *m != Method::Covar).collect();
        for &method in &estimating {
            let rows: Vec<SweepRow> = estimates
                .iter()
                .filter(|(m, _, _)| m == method.name())
                .filter_map(|(_, v, s)| {
                    v.map(|param| SweepRow {
                        param,
                        mean: s.mean,
                        std_error: s.std_error,
                        n: s.n,
                        elapsed_s: s.elapsed_seconds,
                    })
                })
                .collect();
            let name = if estimating.len() == 1 {
                "sweep.csv".to_string()
            } else {
                format!("sweep_{}.csv", method.name())
            };
            let path = out.join(name);
            write_csv(&path, &rows)?;
            files.push(path);
        }
    }

    let model = match base_model {
        Some(m) => m,
        None => cfg.model.resolve()?,
    };
    let canonical = serde_json::to_vec(cfg)?;
    let manifest = Manifest {
        schema_version: cfg.schema_version,
        config_sha256: hex(&Sha256::digest(&canonical)),
        seed: cfg.seed,
        workers,
        crate_version: env!("CARGO_PKG_VERSION"),
        model: &model,
        jobs: jobs.len(),
        failed_jobs: failures.len(),
        config: cfg,
    };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    files.push(path);

    Ok(RunReport {
        output_dir: out.clone(),
        summary,
        estimates,
        covar,
        failures,
        files,
    })
}
