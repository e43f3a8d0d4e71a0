//! Least-squares fits in the Kronecker feature space and their excess risk.

use faer::linalg::solvers::{Qr, SolveLstsq};
use faer::MatRef;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::ProblemConfig;
use crate::error::{Error, Result};
use crate::geometry::GroupGeometry;
use crate::synth_data::{group_block, Dataset, FeatureMatrix, Role};
use crate::theory;

pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// `max |r_ii| / min |r_ii|` of the triangular factor.
    pub condition_estimate: f64,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "EstimatorRecord", try_from = "EstimatorRecord")]
pub struct Estimator {
    /// Block `k` (entries `k·width .. (k+1)·width`) multiplies `z_k`.
    pub beta: DVector<f64>,
    pub role: Role,
    pub block_width: usize,
    pub diagnostics: Option<FitDiagnostics>,
}

#[derive(Serialize, Deserialize)]
struct EstimatorRecord {
    role: Role,
    block_width: usize,
    d_z: usize,
    beta: Vec<f64>,
    #[serde(default)]
    diagnostics: Option<FitDiagnostics>,
}

impl From<Estimator> for EstimatorRecord {
    fn from(e: Estimator) -> Self {
        EstimatorRecord {
            role: e.role,
            block_width: e.block_width,
            d_z: e.d_z(),
            beta: e.beta.as_slice().to_vec(),
            diagnostics: e.diagnostics,
        }
    }
}

impl TryFrom<EstimatorRecord> for Estimator {
    type Error = Error;

    fn try_from(r: EstimatorRecord) -> Result<Self> {
        if r.block_width == 0 || r.beta.len() != r.block_width * r.d_z {
            return Err(Error::Format(format!(
                "beta has {} entries, expected block_width·d_z = {}·{}",
                r.beta.len(),
                r.block_width,
                r.d_z
            )));
        }
        if r.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Format("beta has non-finite entries".into()));
        }
        Ok(Estimator {
            beta: DVector::from_vec(r.beta),
            role: r.role,
            block_width: r.block_width,
            diagnostics: r.diagnostics,
        })
    }
}

impl Estimator {
    pub fn d_z(&self) -> usize {
        self.beta.len() / self.block_width
    }

    /// `block_width × d_z` view with block `k` as column `k`.
    pub fn blocks(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.block_width, self.d_z(), self.beta.as_slice())
    }

    pub fn zeros(role: Role, block_width: usize, d_z: usize) -> Self {
        Estimator {
            beta: DVector::zeros(block_width * d_z),
            role,
            block_width,
            diagnostics: None,
        }
    }
}

/// Least-squares coefficients for an overdetermined, full-rank design.
pub fn fit_min_norm(features: &FeatureMatrix, targets: &DVector<f64>) -> Result<Estimator> {
    let (n, d) = (features.count(), features.dim());
    if targets.len() != n {
        return Err(Error::Dimension(format!("{} targets for {n} rows", targets.len())));
    }
    if n <= d {
        return Err(Error::Precondition(format!(
            "need more samples than features, got {n} ≤ {d}"
        )));
    }

    let a = MatRef::from_column_major_slice(features.values.as_slice(), n, d);
    let b = MatRef::from_column_major_slice(targets.as_slice(), n, 1);
    let qr = Qr::new(a);

    let r = qr.thin_R();
    let diag: Vec<f64> = (0..d).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min < RANK_TOL * max {
        let rank = diag.iter().filter(|&&v| v > RANK_TOL * max).count();
        return Err(Error::RankDeficient {
            rank,
            dim: d,
            tol: RANK_TOL,
        });
    }

    let x = qr.solve_lstsq(b);
    let beta = DVector::from_fn(d, |i, _| x[(i, 0)]);
    let residual_norm = (&features.values * &beta - targets).norm();
    Ok(Estimator {
        beta,
        role: features.role,
        block_width: features.block_width,
        diagnostics: Some(FitDiagnostics {
            condition_estimate: max / min,
            residual_norm,
        }),
    })
}

/// `β_* ⊗ e_1`: only the constant coordinate of each block is active.
pub fn population_optimum(beta_star: &DVector<f64>, config: &ProblemConfig, role: Role) -> Estimator {
    let width = role.width(config);
    let mut e = Estimator::zeros(role, width, beta_star.len());
    for (k, &b) in beta_star.iter().enumerate() {
        e.beta[k * width] = b;
    }
    e
}

/// `Φβ`.
pub fn pseudolabel(teacher: &Estimator, unlabeled: &FeatureMatrix) -> Result<DVector<f64>> {
    if unlabeled.dim() != teacher.beta.len() {
        return Err(Error::Dimension(format!(
            "feature dimension {} differs from estimator dimension {}",
            unlabeled.dim(),
            teacher.beta.len()
        )));
    }
    Ok(&unlabeled.values * &teacher.beta)
}

/// `φ(x_i)ᵀβ` without forming `Φ`: row `i` of `Z ∘ (W B)` summed, where
/// `B` holds the blocks of `β` as columns.
pub fn predict(est: &Estimator, dataset: &Dataset, geom: &GroupGeometry) -> Result<DVector<f64>> {
    let frame = match est.role {
        Role::Teacher => &geom.t,
        Role::Student => &geom.s,
    };
    if frame.ncols() + 1 != est.block_width || dataset.z.ncols() != est.d_z() {
        return Err(Error::Dimension(format!(
            "estimator is {}×{}, data has d_z = {} and frame width {}",
            est.block_width,
            est.d_z(),
            dataset.z.ncols(),
            frame.ncols() + 1
        )));
    }
    let w = group_block(&dataset.group_feats, frame);
    let wb = w * est.blocks();
    Ok(DVector::from_fn(dataset.count(), |i, _| {
        dataset.z.row(i).iter().zip(wb.row(i).iter()).map(|(a, b)| a * b).sum()
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskReport {
    pub excess_risk: f64,
    pub eta_t: f64,
    pub role: Role,
    /// Closed form against the population covariance, as opposed to a
    /// held-out estimate.
    pub exact: bool,
    pub std_error: Option<f64>,
}

/// `Σ_k δ_kᵀ M(η_t) δ_k` with `δ = β − β_*⊗e_1` and `M` the second moment of
/// the role's group block under the test mixture.
pub fn exact_excess_risk(
    est: &Estimator,
    beta_star: &DVector<f64>,
    config: &ProblemConfig,
    geom: &GroupGeometry,
    eta_t: f64,
) -> Result<RiskReport> {
    if beta_star.len() != est.d_z() {
        return Err(Error::Dimension(format!(
            "β_* has length {}, estimator has d_z = {}",
            beta_star.len(),
            est.d_z()
        )));
    }
    let c = match est.role {
        Role::Teacher => theory::mixture_moment(&geom.mu_t, config.sigma_xi, eta_t)?,
        Role::Student => theory::mixture_moment(&geom.mu_s, config.sigma_xi, eta_t)?,
    };
    if c.nrows() != est.block_width {
        return Err(Error::Dimension(format!(
            "covariance is {}×{}, estimator block width is {}",
            c.nrows(),
            c.ncols(),
            est.block_width
        )));
    }
    let mut delta = est.blocks();
    for (k, &b) in beta_star.iter().enumerate() {
        delta[(0, k)] -= b;
    }
    let risk = (&c * &delta).component_mul(&delta).sum();
    Ok(RiskReport {
        excess_risk: risk.max(0.0),
        eta_t,
        role: est.role,
        exact: true,
        std_error: None,
    })
}

/// Mean of `(φᵀβ − zᵀβ_*)²` over a test set drawn at `η_t`.
pub fn holdout_excess_risk(est: &Estimator, test: &Dataset, geom: &GroupGeometry) -> Result<RiskReport> {
    let err = predict(est, test, geom)? - test.f_star();
    let sq = err.map(|e| e * e);
    let n = sq.len() as f64;
    let mean = sq.mean();
    let std_error = if sq.len() > 1 {
        Some((sq.map(|v| (v - mean).powi(2)).sum() / (n - 1.0) / n).sqrt())
    } else {
        None
    };
    Ok(RiskReport {
        excess_risk: mean,
        eta_t: test.eta,
        role: est.role,
        exact: false,
        std_error,
    })
}
