//! Seeded Monte Carlo harness.
//!
//! Replication `r` draws its sample from `derive_seed(base_seed, r)` and runs
//! every configured estimator on it, so each row of the output depends only
//! on `(base_seed, r)` and runs are reproducible regardless of thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{perturb_constraint, rate_experiment, ApproxEstimator, Family, Rate, RateTable};
use crate::bounds::{gmm_bound, plugin_bounds, population_bounds};
use crate::error::{Error, Result};
use crate::gel::{divergence, gel_estimate, Divergence, GelConfig, DIVERGENCE_IDS};
use crate::gmm::{cue, gmm_fixed, gmm_two_step, matrix_rows, EstimateResult, EstimatorConfig};
use crate::moment::{MomentModel, MomentProblem, Sample};
use crate::optim::OptimizerConfig;
use crate::registry;

/// Share of failed replications above which an experiment aborts.
pub const MAX_FAILURE_PCT: u32 = 20;
/// Draws used for plug-in bounds when a problem has no population moments.
pub const PLUGIN_DRAWS: usize = 100_000;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seed of replication `r`: SplitMix64 finalizer applied to
/// `base ^ (r + 1)·γ`.
pub fn derive_seed(base: u64, r: u64) -> u64 {
    let mut z = base ^ r.wrapping_add(1).wrapping_mul(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Round-trip representation used in every CSV (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Weighting of a fixed-weight GMM entry: `"identity"` or an explicit matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightingSpec {
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

impl Default for WeightingSpec {
    fn default() -> Self {
        WeightingSpec::Named("identity".into())
    }
}

/// One estimator of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EstimatorSpec {
    GmmFixed {
        #[serde(default)]
        weighting: WeightingSpec,
    },
    TwoStep,
    Cue,
    Gel {
        divergence: String,
    },
}

impl EstimatorSpec {
    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::GmmFixed {
                weighting: WeightingSpec::Named(name),
            } => format!("gmm-fixed({name})"),
            EstimatorSpec::GmmFixed { .. } => "gmm-fixed(matrix)".into(),
            EstimatorSpec::TwoStep => "two-step".into(),
            EstimatorSpec::Cue => "cue".into(),
            EstimatorSpec::Gel { divergence } => format!("gel({divergence})"),
        }
    }
}

/// Approximation block used by rate experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproximationSpec {
    pub family: String,
    pub rate: Rate,
    pub m_grid: Vec<u64>,
}

/// Experiment description, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem_id: String,
    pub n: usize,
    pub replications: usize,
    pub base_seed: u64,
    pub estimators: Vec<EstimatorSpec>,
    pub output_path: PathBuf,
    #[serde(default)]
    pub uncentered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approximation: Option<ApproximationSpec>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

enum Prepared {
    Fixed(DMatrix<f64>),
    TwoStep,
    Cue,
    Gel(Divergence<f64>),
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            optimizer: self.optimizer,
            uncentered: self.uncentered,
            ..EstimatorConfig::default()
        }
    }

    fn problem(&self) -> Result<MomentProblem<f64>> {
        registry::problem(&self.problem_id).map_err(|e| match e {
            Error::UnknownId { kind, id, .. } => Error::UnknownId {
                kind,
                id,
                field: "problem_id".into(),
            },
            other => other,
        })
    }

    fn prepare(&self, k: usize) -> Result<Vec<(String, Prepared)>> {
        if self.estimators.is_empty() {
            return Err(config_err("estimators", "at least one estimator is required"));
        }
        self.estimators
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let prepared = match spec {
                    EstimatorSpec::GmmFixed { weighting } => {
                        let field = format!("estimators[{i}].weighting");
                        let m = match weighting {
                            WeightingSpec::Named(name) if name == "identity" => DMatrix::identity(k, k),
                            WeightingSpec::Named(name) => {
                                return Err(config_err(
                                    field,
                                    format!("unknown weighting {name:?}; use \"identity\" or a matrix"),
                                ))
                            }
                            WeightingSpec::Matrix(rows) => {
                                if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                                    return Err(config_err(field, format!("expected a {k}x{k} matrix")));
                                }
                                DMatrix::from_fn(k, k, |a, b| rows[a][b])
                            }
                        };
                        crate::gmm::WeightingScheme::Fixed(m.clone())
                            .validate(k)
                            .map_err(|e| config_err(format!("estimators[{i}].weighting"), e.to_string()))?;
                        Prepared::Fixed(m)
                    }
                    EstimatorSpec::TwoStep => Prepared::TwoStep,
                    EstimatorSpec::Cue => Prepared::Cue,
                    EstimatorSpec::Gel { divergence: id } => {
                        Prepared::Gel(divergence(id).map_err(|_| Error::UnknownId {
                            kind: "divergence",
                            id: id.clone(),
                            field: format!("estimators[{i}].divergence"),
                        })?)
                    }
                };
                Ok((spec.label(), prepared))
            })
            .collect()
    }

    /// Checks every invariant of the configuration; errors name the field.
    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(config_err("replications", "must be at least 1"));
        }
        let problem = self.problem()?;
        let min_n = 2.max(problem.k() + 1);
        if self.n < min_n {
            return Err(config_err(
                "n",
                format!("sample size {} below max(2, k + 1) = {min_n}", self.n),
            ));
        }
        if !problem.has_sampler() {
            return Err(config_err(
                "problem_id",
                format!("problem {} has no sampler", self.problem_id),
            ));
        }
        self.prepare(problem.k())?;
        if let Some(a) = &self.approximation {
            Family::from_id(&a.family).map_err(|_| Error::UnknownId {
                kind: "perturbation family",
                id: a.family.clone(),
                field: "approximation.family".into(),
            })?;
            if a.m_grid.is_empty() || a.m_grid[0] == 0 || a.m_grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(config_err(
                    "approximation.m_grid",
                    "must be a nonempty strictly increasing list of positive levels",
                ));
            }
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of a configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub output_path: Option<PathBuf>,
    pub no_timestamp: bool,
    pub uncentered: bool,
}

impl RunOptions {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            config.base_seed = seed;
        }
        if let Some(out) = &self.output_path {
            config.output_path = out.clone();
        }
        config.uncentered |= self.uncentered;
    }
}

/// Outcome of one estimator on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub estimator: String,
    pub replication: usize,
    pub seed: u64,
    pub outcome: std::result::Result<EstimateOutcome, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOutcome {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// All records of an experiment, ordered by replication, then estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationTable {
    pub labels: Vec<String>,
    pub d: usize,
    pub n: usize,
    pub records: Vec<ReplicationRecord>,
}

fn run_one(
    problem: &MomentProblem<f64>,
    est: &Prepared,
    sample: &Sample<f64>,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult<f64>> {
    match est {
        Prepared::Fixed(m) => gmm_fixed(problem, sample, m, cfg),
        Prepared::TwoStep => gmm_two_step(problem, sample, cfg),
        Prepared::Cue => cue(problem, sample, cfg),
        Prepared::Gel(div) => {
            let gcfg = GelConfig {
                estimator: *cfg,
                ..GelConfig::default()
            };
            gel_estimate(problem, sample, div, &gcfg).map(|g| g.estimate)
        }
    }
}

/// Runs every estimator on `config.replications` seeded samples.
///
/// Individual failures are recorded; more than [`MAX_FAILURE_PCT`] percent
/// failures for any estimator is an error.
pub fn replicate(config: &ExperimentConfig) -> Result<ReplicationTable> {
    config.validate()?;
    let problem = config.problem()?;
    let estimators = config.prepare(problem.k())?;
    let cfg = config.estimator_config();
    let per_rep: Vec<Vec<ReplicationRecord>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(config.base_seed, r as u64);
            let sample = problem.sample(config.n, seed);
            estimators
                .iter()
                .map(|(label, est)| {
                    let outcome = sample
                        .as_ref()
                        .map_err(|e| e.to_string())
                        .and_then(|s| run_one(&problem, est, s, &cfg).map_err(|e| e.to_string()))
                        .map(|e| EstimateOutcome {
                            theta: e.theta_hat,
                            objective: e.objective,
                            iterations: e.iterations,
                        });
                    ReplicationRecord {
                        estimator: label.clone(),
                        replication: r,
                        seed,
                        outcome,
                    }
                })
                .collect()
        })
        .collect();
    let table = ReplicationTable {
        labels: estimators.into_iter().map(|(l, _)| l).collect(),
        d: problem.d(),
        n: config.n,
        records: per_rep.into_iter().flatten().collect(),
    };
    for label in &table.labels {
        let failed = table.failures(label);
        if failed as f64 * 100.0 > MAX_FAILURE_PCT as f64 * config.replications as f64 {
            return Err(Error::TooManyFailures {
                estimator: label.clone(),
                failed,
                total: config.replications,
                limit_pct: MAX_FAILURE_PCT,
            });
        }
    }
    Ok(table)
}

impl ReplicationTable {
    pub fn estimates(&self, label: &str) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .filter(|r| r.estimator == label)
            .filter_map(|r| r.outcome.as_ref().ok().map(|o| o.theta.clone()))
            .collect()
    }

    pub fn failures(&self, label: &str) -> usize {
        self.records
            .iter()
            .filter(|r| r.estimator == label && r.outcome.is_err())
            .count()
    }

    /// Columns: `estimator, replication, seed, status, theta_1..theta_d,
    /// objective, iterations, error`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "estimator".to_string(),
            "replication".into(),
            "seed".into(),
            "status".into(),
        ];
        header.extend((1..=self.d).map(|j| format!("theta_{j}")));
        header.extend(["objective".to_string(), "iterations".into(), "error".into()]);
        w.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![rec.estimator.clone(), rec.replication.to_string(), rec.seed.to_string()];
            match &rec.outcome {
                Ok(o) => {
                    row.push("ok".into());
                    row.extend(o.theta.iter().map(|v| fmt_f64(*v)));
                    row.push(fmt_f64(o.objective));
                    row.push(o.iterations.to_string());
                    row.push(String::new());
                }
                Err(msg) => {
                    row.push("failed".into());
                    row.extend(std::iter::repeat_n(String::new(), self.d + 2));
                    row.push(msg.clone());
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `n` times the unbiased replication covariance, with normal-theory
/// standard errors `√((s_ii s_jj + s_ij²)/R)` (i.e. `value·√(2/R)` on the
/// diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalVariance {
    pub value: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub replications: usize,
}

pub fn empirical_variance(estimates: &[Vec<f64>], n: usize) -> Result<EmpiricalVariance> {
    let r = estimates.len();
    if r < 2 {
        return Err(Error::TooFewReplications(r));
    }
    let d = estimates[0].len();
    if estimates.iter().any(|e| e.len() != d) {
        return Err(Error::Dimension("estimates of differing lengths".into()));
    }
    let rf = r as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| estimates.iter().map(|e| e[j]).sum::<f64>() / rf)
        .collect();
    let value = DMatrix::from_fn(d, d, |a, b| {
        n as f64
            * estimates
                .iter()
                .map(|e| (e[a] - mean[a]) * (e[b] - mean[b]))
                .sum::<f64>()
            / (rf - 1.0)
    });
    let std_error = DMatrix::from_fn(d, d, |a, b| {
        ((value[(a, a)] * value[(b, b)] + value[(a, b)].powi(2)) / rf).sqrt()
    });
    Ok(EmpiricalVariance {
        value,
        std_error,
        mean,
        replications: r,
    })
}

/// Per-estimator part of a [`MonteCarloReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimator: String,
    pub successes: usize,
    pub failures: usize,
    pub mean_theta: Vec<f64>,
    /// `n · Var(θ̂)` across replications; absent with fewer than two successes.
    pub n_var: Option<Vec<Vec<f64>>>,
    pub n_var_se: Option<Vec<Vec<f64>>>,
    /// Sandwich bound of a fixed-weight estimator.
    #[serde(rename = "bound_B_M", skip_serializing_if = "Option::is_none")]
    pub bound_b_m: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub problem_id: String,
    pub n: usize,
    pub replications: usize,
    pub base_seed: u64,
    pub uncentered: bool,
    /// `"population"` or `"plug-in"`.
    pub bound_source: String,
    #[serde(rename = "bound_B")]
    pub bound_b: Vec<Vec<f64>>,
    pub estimators: Vec<EstimatorReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_unix_secs: Option<u64>,
}

impl MonteCarloReport {
    pub fn estimator(&self, label: &str) -> Option<&EstimatorReport> {
        self.estimators.iter().find(|e| e.estimator == label)
    }
}

fn reference_moments(problem: &MomentProblem<f64>, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>, &'static str)> {
    if let Ok(rep) = population_bounds(problem, None) {
        return Ok((rep.d_mat, rep.v_mat, "population"));
    }
    let theta = problem
        .true_theta()
        .ok_or_else(|| {
            Error::InvalidProblem(format!(
                "problem {} has neither population moments nor a true theta",
                problem.name()
            ))
        })?
        .to_vec();
    let sample = problem.sample(PLUGIN_DRAWS, derive_seed(seed, u64::MAX))?;
    let rep = plugin_bounds(problem, &theta, &sample, None)?;
    Ok((rep.d_mat, rep.v_mat, "plug-in"))
}

/// Aggregates a [`ReplicationTable`] against the efficiency bounds.
pub fn summarize(config: &ExperimentConfig, table: &ReplicationTable, timestamp: bool) -> Result<MonteCarloReport> {
    let problem = config.problem()?;
    let prepared = config.prepare(problem.k())?;
    let (d_mat, v_mat, source) = reference_moments(&problem, config.base_seed)?;
    let b = crate::bounds::efficiency_bound(&d_mat, &v_mat)?;
    let estimators = prepared
        .iter()
        .map(|(label, est)| {
            let estimates = table.estimates(label);
            let var = match empirical_variance(&estimates, config.n) {
                Ok(v) => Some(v),
                Err(Error::TooFewReplications(_)) => None,
                Err(e) => return Err(e),
            };
            let bound_b_m = match est {
                Prepared::Fixed(m) => Some(matrix_rows(&gmm_bound(&d_mat, &v_mat, m)?)),
                _ => None,
            };
            Ok(EstimatorReport {
                estimator: label.clone(),
                successes: estimates.len(),
                failures: table.failures(label),
                mean_theta: mean_of(&estimates, problem.d()),
                n_var: var.as_ref().map(|v| matrix_rows(&v.value)),
                n_var_se: var.as_ref().map(|v| matrix_rows(&v.std_error)),
                bound_b_m,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MonteCarloReport {
        problem_id: config.problem_id.clone(),
        n: config.n,
        replications: config.replications,
        base_seed: config.base_seed,
        uncentered: config.uncentered,
        bound_source: source.into(),
        bound_b: matrix_rows(&b),
        estimators,
        generated_unix_secs: timestamp.then(unix_now),
    })
}

fn mean_of(estimates: &[Vec<f64>], d: usize) -> Vec<f64> {
    let r = estimates.len() as f64;
    (0..d)
        .map(|j| estimates.iter().map(|e| e[j]).sum::<f64>() / r)
        .collect()
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutputs {
    pub report: MonteCarloReport,
    pub report_path: PathBuf,
    pub csv_path: PathBuf,
}

/// Runs an experiment and writes `report.json` and `estimates.csv` under
/// the configured output directory.
pub fn run_experiment(mut config: ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutputs> {
    opts.apply(&mut config);
    let table = replicate(&config)?;
    let report = summarize(&config, &table, !opts.no_timestamp)?;
    fs::create_dir_all(&config.output_path)?;
    let csv_path = config.output_path.join("estimates.csv");
    table.write_csv(fs::File::create(&csv_path)?)?;
    let report_path = config.output_path.join("report.json");
    write_json(&report_path, &report)?;
    Ok(ExperimentOutputs {
        report,
        report_path,
        csv_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub problem_id: String,
    pub family: String,
    pub rate: Rate,
    pub tables: Vec<RateTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_unix_secs: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RateOutputs {
    pub report: RateReport,
    pub report_path: PathBuf,
    pub csv_paths: Vec<PathBuf>,
}

/// Runs [`rate_experiment`] for every (two-step or CUE) estimator of a
/// configuration with an `approximation` block. Writes `rate_<estimator>.csv`
/// and `rate_report.json`.
pub fn run_rate_experiment(mut config: ExperimentConfig, opts: &RunOptions) -> Result<RateOutputs> {
    opts.apply(&mut config);
    config.validate()?;
    let approx = config
        .approximation
        .clone()
        .ok_or_else(|| config_err("approximation", "rate experiments need an approximation block"))?;
    let kinds = config
        .estimators
        .iter()
        .enumerate()
        .map(|(i, spec)| match spec {
            EstimatorSpec::TwoStep => Ok(ApproxEstimator::TwoStep),
            EstimatorSpec::Cue => Ok(ApproxEstimator::Cue),
            other => Err(config_err(
                format!("estimators[{i}].kind"),
                format!(
                    "{} is not supported for rate experiments (use two-step or cue)",
                    other.label()
                ),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    let problem = config.problem()?;
    let aproblem = perturb_constraint(&problem, &approx.family, approx.rate)?;
    let cfg = config.estimator_config();
    let tables = kinds
        .iter()
        .map(|kind| {
            rate_experiment(
                &aproblem,
                *kind,
                config.n,
                &approx.m_grid,
                config.replications,
                config.base_seed,
                &cfg,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&config.output_path)?;
    let mut csv_paths = Vec::new();
    for t in &tables {
        let path = config.output_path.join(format!("rate_{}.csv", t.estimator.label()));
        t.write_csv(fs::File::create(&path)?)?;
        csv_paths.push(path);
    }
    let report = RateReport {
        problem_id: config.problem_id.clone(),
        family: approx.family,
        rate: approx.rate,
        tables,
        generated_unix_secs: (!opts.no_timestamp).then(unix_now),
    };
    let report_path = config.output_path.join("rate_report.json");
    write_json(&report_path, &report)?;
    Ok(RateOutputs {
        report,
        report_path,
        csv_paths,
    })
}

/// Divergence ids accepted in `estimators[i].divergence`.
pub fn divergence_ids() -> &'static [&'static str] {
    DIVERGENCE_IDS
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "problem_id": "normal-mean",
                "n": 100,
                "replications": 12,
                "base_seed": 9,
                "estimators": [
                    {{"kind": "gmm-fixed", "weighting": "identity"}},
                    {{"kind": "two-step"}},
                    {{"kind": "cue"}},
                    {{"kind": "gel", "divergence": "et"}}
                ],
                "output_path": {:?}
            }}"#,
            dir.to_str().unwrap()
        ))
        .unwrap()
    }

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let seeds: std::collections::HashSet<u64> = (0..10_000).map(|r| derive_seed(42, r)).collect();
        assert_eq!(seeds.len(), 10_000);
        assert_eq!(derive_seed(42, 3), derive_seed(42, 3));
        assert_ne!(derive_seed(42, 3), derive_seed(43, 3));
    }

    #[test]
    fn config_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = smoke(dir.path());
        c.replications = 0;
        assert!(c.validate().unwrap_err().to_string().contains("replications"));
        let mut c = smoke(dir.path());
        c.n = 2;
        assert!(c.validate().unwrap_err().to_string().contains("`n`"));
        let mut c = smoke(dir.path());
        c.problem_id = "nope".into();
        assert!(c.validate().unwrap_err().to_string().contains("problem_id"));
        let mut c = smoke(dir.path());
        c.estimators.push(EstimatorSpec::Gel {
            divergence: "hellinger".into(),
        });
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("estimators[4].divergence"));
        let mut c = smoke(dir.path());
        c.estimators[0] = EstimatorSpec::GmmFixed {
            weighting: WeightingSpec::Matrix(vec![vec![1.0, 2.0], vec![2.0, 1.0]]),
        };
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("estimators[0].weighting"));
        let e = ExperimentConfig::from_json(r#"{"problem_id": "normal-mean", "n": 10}"#).unwrap_err();
        assert!(e.to_string().contains("replications"), "{e}");
        let e = ExperimentConfig::from_json(
            r#"{"problem_id": "normal-mean", "n": 10, "replications": 1, "base_seed": 1, "estimators": [], "output_path": "x", "bogus": 1}"#,
        )
        .unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn replications_are_deterministic_and_independent_of_count() {
        let dir = tempfile::tempdir().unwrap();
        let c = smoke(dir.path());
        let a = replicate(&c).unwrap();
        let b = replicate(&c).unwrap();
        assert_eq!(a, b);
        let mut short = c.clone();
        short.replications = 5;
        let s = replicate(&short).unwrap();
        assert_eq!(s.records[..], a.records[..s.records.len()]);
    }

    #[test]
    fn run_writes_identical_csv_without_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            no_timestamp: true,
            ..RunOptions::default()
        };
        let first = run_experiment(smoke(dir.path()), &opts).unwrap();
        let csv1 = fs::read(&first.csv_path).unwrap();
        let json1 = fs::read(&first.report_path).unwrap();
        let second = run_experiment(smoke(dir.path()), &opts).unwrap();
        assert_eq!(csv1, fs::read(&second.csv_path).unwrap());
        assert_eq!(json1, fs::read(&second.report_path).unwrap());
        assert!(!String::from_utf8(json1).unwrap().contains("generated_unix_secs"));
        let r = &first.report;
        assert_eq!(r.estimators.len(), 4);
        assert!(r.estimator("gmm-fixed(identity)").unwrap().bound_b_m.is_some());
        assert!((r.bound_b[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seed_override_changes_output() {
        let dir = tempfile::tempdir().unwrap();
        let c = smoke(dir.path());
        let a = replicate(&c).unwrap();
        let opts = RunOptions {
            seed: Some(10),
            ..RunOptions::default()
        };
        let mut c2 = c.clone();
        opts.apply(&mut c2);
        assert_ne!(replicate(&c2).unwrap().records, a.records);
    }

    #[test]
    fn empirical_variance_matches_hand_computation() {
        let est = vec![vec![1.0], vec![2.0], vec![4.0]];
        let v = empirical_variance(&est, 10).unwrap();
        // sample variance of {1, 2, 4} is 7/3
        assert!((v.value[(0, 0)] - 70.0 / 3.0).abs() < 1e-12);
        assert!((v.std_error[(0, 0)] - v.value[(0, 0)] * (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(matches!(
            empirical_variance(&est[..1], 10),
            Err(Error::TooFewReplications(1))
        ));
    }

    #[test]
    fn too_many_failures_abort() {
        // n = 3 with k = 2 routinely yields singular covariances for the
        // two-step weighting on the variance model
        let dir = tempfile::tempdir().unwrap();
        let mut c = smoke(dir.path());
        c.problem_id = "normal-mean-var".into();
        c.n = 4;
        c.replications = 30;
        c.estimators = vec![EstimatorSpec::Gel {
            divergence: "el".into(),
        }];
        match replicate(&c) {
            Err(Error::TooManyFailures { limit_pct, .. }) => assert_eq!(limit_pct, 20),
            Ok(t) => assert!(t.failures("gel(el)") * 5 <= 30),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn single_replication_of_exact_toy_is_sample_mean() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = smoke(dir.path());
        c.problem_id = "scalar-mean".into();
        c.replications = 1;
        c.n = 20;
        c.estimators = vec![EstimatorSpec::TwoStep];
        let t = replicate(&c).unwrap();
        assert_eq!(t.records.len(), 1);
        let s = registry::problem::<f64>("scalar-mean")
            .unwrap()
            .sample(20, t.records[0].seed)
            .unwrap();
        let mean = s.as_slice().iter().sum::<f64>() / 20.0;
        assert!((t.estimates("two-step")[0][0] - mean).abs() < 1e-10);
        let out = run_experiment(c, &RunOptions::default()).unwrap();
        assert!(out.report.estimators[0].n_var.is_none());
        assert!(out.csv_path.exists() && out.report_path.exists());
    }

    #[test]
    fn empirical_variance_trivial_cases() {
        let v = empirical_variance(&vec![vec![0.5, 2.0]; 7], 100).unwrap();
        assert!(v.value.iter().all(|x| *x == 0.0));
        let v = empirical_variance(&[vec![1.25], vec![2.0]], 8).unwrap();
        assert!((v.value[(0, 0)] - 8.0 * 0.75f64.powi(2) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn report_bounds_equal_bounds_module() {
        let dir = tempfile::tempdir().unwrap();
        let c = smoke(dir.path());
        let t = replicate(&c).unwrap();
        let r = summarize(&c, &t, false).unwrap();
        let p = registry::problem::<f64>("normal-mean").unwrap();
        let b = population_bounds(&p, Some(&DMatrix::identity(2, 2))).unwrap().summary();
        assert_eq!(r.bound_b, b.b);
        assert_eq!(r.estimator("gmm-fixed(identity)").unwrap().bound_b_m, b.b_m);
    }

    #[test]
    fn fmt_is_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
