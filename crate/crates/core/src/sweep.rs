//! Replicated end-to-end simulations over a parameter grid, paired with the
//! closed-form predictions.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ProblemConfig};
use crate::error::{Error, Result};
use crate::geometry::GroupGeometry;
use crate::ridgeless::{exact_excess_risk, fit_min_norm, holdout_excess_risk, predict, Estimator};
use crate::rng::{derive_seed, stream};
use crate::synth_data::{draw_beta_star, features, sample_dataset, GroupMode, Role};
use crate::theory;

pub const CSV_HEADER: &str =
    "axis,value,theory_teacher,theory_student,theory_gain,emp_gain_mean,emp_gain_se,replicates,cross_term";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "eta_u")]
    EtaU,
    #[serde(rename = "nu_z")]
    NuZ,
    #[serde(rename = "mu_S_sq")]
    MuSSq,
    #[serde(rename = "xi_frob_sq")]
    XiFrobSq,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::EtaU => "eta_u",
            SweepAxis::NuZ => "nu_z",
            SweepAxis::MuSSq => "mu_S_sq",
            SweepAxis::XiFrobSq => "xi_frob_sq",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(self, SweepAxis::MuSSq | SweepAxis::XiFrobSq)
    }

    /// Returns `base` with the axis set to `value`, rejecting inadmissible values.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = *base;
        let bad = |why: &str| Err(Error::Precondition(format!("{} = {value} {why}", self.name())));
        match self {
            SweepAxis::EtaU => {
                if !(0.0..=0.5).contains(&value) {
                    return bad("outside [0, 1/2]");
                }
                cfg.problem.eta_u = value;
            }
            SweepAxis::NuZ => {
                if !(value > 0.0 && value < 1.0 / cfg.problem.p_s as f64) {
                    return bad("outside (0, 1/p_S)");
                }
                cfg.problem.n_unlabeled = ProblemConfig::count_for_ratio(cfg.problem.d_z, value);
            }
            SweepAxis::MuSSq => {
                if !(value >= 0.0 && value.is_finite()) {
                    return bad("must be non-negative");
                }
                cfg.targets.mu_s_sq = value;
            }
            SweepAxis::XiFrobSq => {
                if !(0.0..=(cfg.problem.p_s - 1) as f64).contains(&value) {
                    return bad("outside [0, p_S − 1]");
                }
                cfg.targets.xi_frob_sq = value;
            }
        }
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta_u" => Ok(SweepAxis::EtaU),
            "nu_z" => Ok(SweepAxis::NuZ),
            "mu_S_sq" => Ok(SweepAxis::MuSSq),
            "xi_frob_sq" => Ok(SweepAxis::XiFrobSq),
            other => Err(Error::Precondition(format!(
                "unknown axis `{other}` (expected eta_u, nu_z, mu_S_sq or xi_frob_sq)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMode {
    #[default]
    Exact,
    Holdout,
}

impl FromStr for RiskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(RiskMode::Exact),
            "holdout" => Ok(RiskMode::Holdout),
            other => Err(Error::Precondition(format!("unknown risk mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOptions {
    pub risk_mode: RiskMode,
    pub group_mode: GroupMode,
    /// Test-set size in holdout mode.
    pub test_count: usize,
}

impl Default for ReplicateOptions {
    fn default() -> Self {
        ReplicateOptions {
            risk_mode: RiskMode::Exact,
            group_mode: GroupMode::Bernoulli,
            test_count: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub teacher_risk: f64,
    pub student_risk: f64,
    pub gain: f64,
}

/// Everything one replicate produces, for artifact dumps.
#[derive(Debug, Clone)]
pub struct ReplicateArtifacts {
    pub outcome: ReplicateOutcome,
    pub teacher: Estimator,
    pub student: Estimator,
    pub labeled: crate::synth_data::Dataset,
    pub unlabeled: crate::synth_data::Dataset,
}

fn risk_of(
    est: &Estimator,
    beta: &nalgebra::DVector<f64>,
    config: &ProblemConfig,
    geom: &GroupGeometry,
    test: Option<&crate::synth_data::Dataset>,
) -> Result<f64> {
    Ok(match test {
        Some(t) => holdout_excess_risk(est, t, geom)?.excess_risk,
        None => exact_excess_risk(est, beta, config, geom, config.eta_t)?.excess_risk,
    })
}

fn draw_test(
    config: &ProblemConfig,
    geom: &GroupGeometry,
    seed: u64,
    opts: &ReplicateOptions,
    beta: &nalgebra::DVector<f64>,
) -> Result<Option<crate::synth_data::Dataset>> {
    match opts.risk_mode {
        RiskMode::Exact => Ok(None),
        RiskMode::Holdout => sample_dataset(
            config,
            geom,
            config.eta_t,
            opts.test_count,
            opts.group_mode,
            derive_seed(seed, &[stream::TEST]),
            false,
            Some(beta),
        )
        .map(Some),
    }
}

/// SFT on a labeled draw at `η_ℓ`, pseudolabels on an unlabeled draw at
/// `η_u`, W2S fit, and both risks at `η_t`.
pub fn run_replicate_full(
    config: &ProblemConfig,
    geom: &GroupGeometry,
    seed: u64,
    opts: &ReplicateOptions,
) -> Result<ReplicateArtifacts> {
    let beta = draw_beta_star(config.d_z, config.beta_star_norm, derive_seed(seed, &[stream::BETA_STAR]));
    let labeled = sample_dataset(
        config,
        geom,
        config.eta_l,
        config.n,
        opts.group_mode,
        derive_seed(seed, &[stream::LABELED]),
        false,
        Some(&beta),
    )?;
    let teacher = fit_min_norm(&features(&labeled, geom, Role::Teacher)?, &labeled.y)?;

    let mut unlabeled = sample_dataset(
        config,
        geom,
        config.eta_u,
        config.n_unlabeled,
        opts.group_mode,
        derive_seed(seed, &[stream::UNLABELED]),
        false,
        Some(&beta),
    )?;
    unlabeled.y = predict(&teacher, &unlabeled, geom)?;
    let student = fit_min_norm(&features(&unlabeled, geom, Role::Student)?, &unlabeled.y)?;

    let test = draw_test(config, geom, seed, opts, &beta)?;
    let teacher_risk = risk_of(&teacher, &beta, config, geom, test.as_ref())?;
    let student_risk = risk_of(&student, &beta, config, geom, test.as_ref())?;
    Ok(ReplicateArtifacts {
        outcome: ReplicateOutcome {
            teacher_risk,
            student_risk,
            gain: teacher_risk - student_risk,
        },
        teacher,
        student,
        labeled,
        unlabeled,
    })
}

pub fn run_replicate(
    config: &ProblemConfig,
    geom: &GroupGeometry,
    seed: u64,
    opts: &ReplicateOptions,
) -> Result<ReplicateOutcome> {
    run_replicate_full(config, geom, seed, opts).map(|a| a.outcome)
}

/// Teacher excess risk alone; draws the same labeled set as [`run_replicate`].
pub fn run_teacher_replicate(
    config: &ProblemConfig,
    geom: &GroupGeometry,
    seed: u64,
    opts: &ReplicateOptions,
) -> Result<f64> {
    let beta = draw_beta_star(config.d_z, config.beta_star_norm, derive_seed(seed, &[stream::BETA_STAR]));
    let labeled = sample_dataset(
        config,
        geom,
        config.eta_l,
        config.n,
        opts.group_mode,
        derive_seed(seed, &[stream::LABELED]),
        false,
        Some(&beta),
    )?;
    let teacher = fit_min_norm(&features(&labeled, geom, Role::Teacher)?, &labeled.y)?;
    let test = draw_test(config, geom, seed, opts, &beta)?;
    risk_of(&teacher, &beta, config, geom, test.as_ref())
}

/// Mean and standard error (`sample std / √n`). Values are summed in sorted
/// order so the result does not depend on the order they arrive in.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub replicates: usize,
    pub master_seed: u64,
    pub options: ReplicateOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub theory_teacher: f64,
    pub theory_student: f64,
    pub theory_gain: f64,
    pub emp_gain_mean: f64,
    pub emp_gain_se: f64,
    pub replicates: usize,
    pub cross_term: f64,
    pub emp_teacher_mean: f64,
    pub emp_teacher_se: f64,
    pub emp_student_mean: f64,
    pub emp_student_se: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

struct GridPoint {
    config: ProblemConfig,
    geom: GroupGeometry,
    prediction: theory::GainPrediction,
}

fn prepare_point(spec: &SweepSpec, value: f64, shared: Option<&GroupGeometry>) -> Result<GridPoint> {
    let cfg = spec.axis.apply(&spec.base, value)?;
    let geom = match shared {
        Some(g) => g.clone(),
        None => GroupGeometry::from_targets(&cfg.problem, &cfg.targets, derive_seed(spec.master_seed, &[stream::FRAMES]))?,
    };
    let prediction = theory::w2s_risk(&cfg.problem, &geom)?;
    Ok(GridPoint {
        config: cfg.problem,
        geom,
        prediction,
    })
}

/// Runs every `(grid point, replicate)` pair on the current rayon pool.
/// Replicate `r` of grid point `i` uses seed `derive_seed(master, [i, r])`.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    if spec.grid.is_empty() {
        return Err(Error::Precondition("sweep grid is empty".into()));
    }
    if spec.replicates == 0 {
        return Err(Error::Precondition("replicates must be at least 1".into()));
    }
    let shared = if spec.axis.is_geometric() {
        None
    } else {
        Some(GroupGeometry::from_targets(
            &spec.base.problem,
            &spec.base.targets,
            derive_seed(spec.master_seed, &[stream::FRAMES]),
        )?)
    };
    let points: Vec<Result<GridPoint>> = spec
        .grid
        .iter()
        .map(|&v| prepare_point(spec, v, shared.as_ref()))
        .collect();

    let jobs: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_ok())
        .flat_map(|(i, _)| (0..spec.replicates).map(move |r| (i, r)))
        .collect();
    let outcomes: Vec<((usize, usize), Result<ReplicateOutcome>)> = jobs
        .into_par_iter()
        .map(|(i, r)| {
            let p = points[i].as_ref().expect("filtered above");
            let seed = derive_seed(spec.master_seed, &[i as u64, r as u64]);
            ((i, r), run_replicate(&p.config, &p.geom, seed, &spec.options))
        })
        .collect();

    let mut rows = Vec::with_capacity(spec.grid.len());
    for (i, (&value, point)) in spec.grid.iter().zip(&points).enumerate() {
        let nan_row = |error: String, pred: Option<&theory::GainPrediction>, cross: f64| SweepRow {
            axis: spec.axis,
            value,
            theory_teacher: pred.map_or(f64::NAN, |p| p.teacher_risk),
            theory_student: pred.map_or(f64::NAN, |p| p.student_risk),
            theory_gain: pred.map_or(f64::NAN, |p| p.gain),
            emp_gain_mean: f64::NAN,
            emp_gain_se: f64::NAN,
            replicates: 0,
            cross_term: cross,
            emp_teacher_mean: f64::NAN,
            emp_teacher_se: f64::NAN,
            emp_student_mean: f64::NAN,
            emp_student_se: f64::NAN,
            error: Some(error),
        };
        let p = match point {
            Ok(p) => p,
            Err(e) => {
                rows.push(nan_row(e.to_string(), None, f64::NAN));
                continue;
            }
        };
        let mine: Vec<&Result<ReplicateOutcome>> =
            outcomes.iter().filter(|((gi, _), _)| *gi == i).map(|(_, o)| o).collect();
        if let Some(Err(e)) = mine.iter().find(|o| o.is_err()) {
            rows.push(nan_row(e.to_string(), Some(&p.prediction), p.geom.cross_term()));
            continue;
        }
        let ok: Vec<&ReplicateOutcome> = mine.iter().filter_map(|o| o.as_ref().ok()).collect();
        let (gm, gs) = mean_se(&ok.iter().map(|o| o.gain).collect::<Vec<_>>());
        let (tm, ts) = mean_se(&ok.iter().map(|o| o.teacher_risk).collect::<Vec<_>>());
        let (sm, ss) = mean_se(&ok.iter().map(|o| o.student_risk).collect::<Vec<_>>());
        rows.push(SweepRow {
            axis: spec.axis,
            value,
            theory_teacher: p.prediction.teacher_risk,
            theory_student: p.prediction.student_risk,
            theory_gain: p.prediction.gain,
            emp_gain_mean: gm,
            emp_gain_se: gs,
            replicates: ok.len(),
            cross_term: p.geom.cross_term(),
            emp_teacher_mean: tm,
            emp_teacher_se: ts,
            emp_student_mean: sm,
            emp_student_se: ss,
            error: None,
        });
    }
    rows.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(SweepResult { axis: spec.axis, rows })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.axis,
                r.value,
                r.theory_teacher,
                r.theory_student,
                r.theory_gain,
                r.emp_gain_mean,
                r.emp_gain_se,
                r.replicates,
                r.cross_term
            );
        }
        out
    }
}

pub fn export_csv(result: &SweepResult, destination: impl AsRef<Path>) -> Result<()> {
    if result.rows.is_empty() {
        return Err(Error::Precondition("sweep result has no rows".into()));
    }
    std::fs::write(destination, result.to_csv())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowCheck {
    pub value: f64,
    pub deviation: f64,
    pub allowed: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<RowCheck>,
    pub passed: usize,
}

impl ComparisonReport {
    pub fn pass_fraction(&self) -> f64 {
        self.passed as f64 / self.rows.len() as f64
    }
}

/// A row passes when `|emp − theory| ≤ max(abs_tol, 3·se)`. Error rows fail.
pub fn compare_to_theory(result: &SweepResult, abs_tol: f64) -> Result<ComparisonReport> {
    if result.rows.is_empty() {
        return Err(Error::Precondition("sweep result has no rows".into()));
    }
    let rows: Vec<RowCheck> = result
        .rows
        .iter()
        .map(|r| {
            let deviation = (r.emp_gain_mean - r.theory_gain).abs();
            let allowed = abs_tol.max(3.0 * r.emp_gain_se);
            RowCheck {
                value: r.value,
                deviation,
                allowed,
                pass: r.error.is_none() && deviation <= allowed,
            }
        })
        .collect();
    let passed = rows.iter().filter(|r| r.pass).count();
    Ok(ComparisonReport { rows, passed })
}

/// `a,b,c` or inclusive `start:stop:step`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |why: String| Error::Precondition(format!("bad grid `{text}`: {why}"));
    let num = |s: &str| -> Result<f64> {
        let v: f64 = s.trim().parse().map_err(|_| bad(format!("`{}` is not a number", s.trim())))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(bad("non-finite value".into()))
        }
    };
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [a, b, s] = parts[..] else {
            return Err(bad("expected start:stop:step".into()));
        };
        let (start, stop, step) = (num(a)?, num(b)?, num(s)?);
        if !(step > 0.0) || stop < start {
            return Err(bad("need step > 0 and stop ≥ start".into()));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        if count > 1_000_000 {
            return Err(bad("too many points".into()));
        }
        Ok((0..count)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect())
    } else {
        let v: Vec<f64> = text.split(',').filter(|s| !s.trim().is_empty()).map(num).collect::<Result<_>>()?;
        if v.is_empty() {
            return Err(bad("no values".into()));
        }
        Ok(v)
    }
}
