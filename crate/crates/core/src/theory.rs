//! Closed-form population covariances and limiting risk predictions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::ProblemConfig;
use crate::error::{Error, Result};
use crate::geometry::GroupGeometry;

pub const DEGENERATE_TOL: f64 = 1e-12;

fn check_sigma(sigma_xi: f64) -> Result<()> {
    if sigma_xi > 0.0 && sigma_xi.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("sigma_xi = {sigma_xi} must be positive")))
    }
}

/// `[[1, ημᵀ], [ημ, σ²I + η²μμᵀ]]`, the second moment of `[1; Fᵀξ]` under `D(η)`.
pub fn block_cov(mu: &DVector<f64>, sigma_xi: f64, eta: f64) -> Result<DMatrix<f64>> {
    check_sigma(sigma_xi)?;
    let k = mu.len();
    let mut c = DMatrix::zeros(k + 1, k + 1);
    c[(0, 0)] = 1.0;
    let em = mu * eta;
    c.view_mut((0, 1), (1, k)).copy_from(&em.transpose());
    c.view_mut((1, 0), (k, 1)).copy_from(&em);
    let mut lower = &em * em.transpose();
    for i in 0..k {
        lower[(i, i)] += sigma_xi * sigma_xi;
    }
    c.view_mut((1, 1), (k, k)).copy_from(&lower);
    Ok(c)
}

/// Block inverse `[[1 + ‖ημ‖²/σ², −ημᵀ/σ²], [−ημ/σ², I/σ²]]`.
pub fn block_cov_inv(mu: &DVector<f64>, sigma_xi: f64, eta: f64) -> Result<DMatrix<f64>> {
    check_sigma(sigma_xi)?;
    let k = mu.len();
    let s2 = sigma_xi * sigma_xi;
    let em = mu * eta;
    let mut c = DMatrix::zeros(k + 1, k + 1);
    c[(0, 0)] = 1.0 + em.norm_squared() / s2;
    c.view_mut((0, 1), (1, k)).copy_from(&(-&em / s2).transpose());
    c.view_mut((1, 0), (k, 1)).copy_from(&(-&em / s2));
    for i in 0..k {
        c[(i + 1, i + 1)] = 1.0 / s2;
    }
    Ok(c)
}

/// `C_T(η)`. Differs from [`mixture_moment`] of `μ_T` by `η(1−η)μ_Tμ_Tᵀ`
/// in the lower block.
pub fn cov_teacher(geom: &GroupGeometry, sigma_xi: f64, eta: f64) -> Result<DMatrix<f64>> {
    block_cov(&geom.mu_t, sigma_xi, eta)
}

pub fn cov_teacher_inv(geom: &GroupGeometry, sigma_xi: f64, eta: f64) -> Result<DMatrix<f64>> {
    block_cov_inv(&geom.mu_t, sigma_xi, eta)
}

/// `C_S(η)`.
pub fn cov_student(geom: &GroupGeometry, sigma_xi: f64, eta: f64) -> Result<DMatrix<f64>> {
    block_cov(&geom.mu_s, sigma_xi, eta)
}

pub fn cov_student_inv(geom: &GroupGeometry, sigma_xi: f64, eta: f64) -> Result<DMatrix<f64>> {
    block_cov_inv(&geom.mu_s, sigma_xi, eta)
}

/// `A(η) = E[ψ wᵀ] = [[1, ημ_Tᵀ], [ημ_S, σ²SᵀT + η²μ_Sμ_Tᵀ]]`, shape `p_S × p_T`.
pub fn cross_cov(geom: &GroupGeometry, sigma_xi: f64, eta: f64) -> Result<DMatrix<f64>> {
    check_sigma(sigma_xi)?;
    let (kt, ks) = (geom.mu_t.len(), geom.mu_s.len());
    let mut a = DMatrix::zeros(ks + 1, kt + 1);
    a[(0, 0)] = 1.0;
    a.view_mut((0, 1), (1, kt)).copy_from(&(&geom.mu_t * eta).transpose());
    a.view_mut((1, 0), (ks, 1)).copy_from(&(&geom.mu_s * eta));
    let lower = geom.xi.transpose() * (sigma_xi * sigma_xi)
        + (&geom.mu_s * (eta * eta)) * geom.mu_t.transpose();
    a.view_mut((1, 1), (ks, kt)).copy_from(&lower);
    Ok(a)
}

/// `E[w wᵀ]` for `w = [1; Fᵀξ]` when `ξ ~ N(gμ_ξ, σ²I)`, `g ~ Bernoulli(η)`:
/// `[[1, ημᵀ], [ημ, σ²I + ημμᵀ]]`.
pub fn mixture_moment(mu: &DVector<f64>, sigma_xi: f64, eta: f64) -> Result<DMatrix<f64>> {
    let mut c = block_cov(mu, sigma_xi, eta)?;
    let k = mu.len();
    let extra = (mu * mu.transpose()) * (eta * (1.0 - eta));
    let mut lower = c.view_mut((1, 1), (k, k));
    lower += extra;
    Ok(c)
}

/// `E[ψ wᵀ]` under the mixture: `[[1, ημ_Tᵀ], [ημ_S, σ²SᵀT + ημ_Sμ_Tᵀ]]`.
pub fn mixture_cross_moment(geom: &GroupGeometry, sigma_xi: f64, eta: f64) -> Result<DMatrix<f64>> {
    let mut a = cross_cov(geom, sigma_xi, eta)?;
    let (kt, ks) = (geom.mu_t.len(), geom.mu_s.len());
    let extra = (&geom.mu_s * geom.mu_t.transpose()) * (eta * (1.0 - eta));
    let mut lower = a.view_mut((1, 1), (ks, kt));
    lower += extra;
    Ok(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovBlocks {
    pub c_t: DMatrix<f64>,
    pub c_s: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub eta: f64,
}

pub fn cov_blocks(geom: &GroupGeometry, sigma_xi: f64, eta: f64) -> Result<CovBlocks> {
    Ok(CovBlocks {
        c_t: cov_teacher(geom, sigma_xi, eta)?,
        c_s: cov_student(geom, sigma_xi, eta)?,
        a: cross_cov(geom, sigma_xi, eta)?,
        eta,
    })
}

/// `C_{T,S}(η_t, η_u) = A(η_u)ᵀ C_S(η_u)⁻¹ C_S(η_t) C_S(η_u)⁻¹ A(η_u)`.
pub fn cov_w2s(geom: &GroupGeometry, sigma_xi: f64, eta_t: f64, eta_u: f64) -> Result<DMatrix<f64>> {
    let a = cross_cov(geom, sigma_xi, eta_u)?;
    let cs_inv = cov_student_inv(geom, sigma_xi, eta_u)?;
    let cs_t = cov_student(geom, sigma_xi, eta_t)?;
    let m = &cs_inv * &a;
    Ok(m.transpose() * cs_t * m)
}

/// `tr(C_T(η_t) C_T(η_ℓ)⁻¹) = p_T + (η_t − η_ℓ)²‖μ_T‖²/σ²`.
pub fn trace_identity_teacher(geom: &GroupGeometry, sigma_xi: f64, eta_t: f64, eta_l: f64) -> Result<f64> {
    check_sigma(sigma_xi)?;
    let d = eta_t - eta_l;
    Ok(geom.p_t() as f64 + d * d * geom.mu_t.norm_squared() / (sigma_xi * sigma_xi))
}

/// `tr(C_{T,S}(η_t, η_u) C_T(η_ℓ)⁻¹) = p_∧ + ‖(η_u − η_ℓ)μ_T + (η_t − η_u)Ξμ_S‖²/σ²`.
pub fn trace_identity_w2s(
    geom: &GroupGeometry,
    sigma_xi: f64,
    eta_t: f64,
    eta_u: f64,
    eta_l: f64,
) -> Result<f64> {
    check_sigma(sigma_xi)?;
    let v = &geom.mu_t * (eta_u - eta_l) + geom.xi_mu_s() * (eta_t - eta_u);
    Ok(geom.p_wedge + v.norm_squared() / (sigma_xi * sigma_xi))
}

/// `tr(C_S(η_t) C_S(η_u)⁻¹) = p_S + (η_t − η_u)²‖μ_S‖²/σ²`.
pub fn trace_identity_student(geom: &GroupGeometry, sigma_xi: f64, eta_t: f64, eta_u: f64) -> Result<f64> {
    check_sigma(sigma_xi)?;
    let d = eta_t - eta_u;
    Ok(geom.p_s() as f64 + d * d * geom.mu_s.norm_squared() / (sigma_xi * sigma_xi))
}

/// Limiting teacher excess risk `σ_y²γ_z(p_T + ‖(η_t − η_ℓ)μ_T‖²/σ_ξ²)`.
pub fn sft_risk(config: &ProblemConfig, geom: &GroupGeometry) -> Result<f64> {
    let tr = trace_identity_teacher(geom, config.sigma_xi, config.eta_t, config.eta_l)?;
    Ok(config.sigma_y.powi(2) * config.gamma_z() * tr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainPrediction {
    pub teacher_risk: f64,
    pub student_risk: f64,
    pub gain: f64,
    pub v_t0: f64,
    pub v_t1: f64,
    pub v_s0: f64,
    pub v_s1: f64,
    pub e_s: f64,
}

/// Limiting teacher and student excess risks and their difference.
pub fn w2s_risk(config: &ProblemConfig, geom: &GroupGeometry) -> Result<GainPrediction> {
    let c = config;
    let scale = c.sigma_y.powi(2) * c.gamma_z();
    let teacher_risk = sft_risk(c, geom)?;
    let v_t0 = geom.p_t() as f64;
    let v_t1 = trace_identity_teacher(geom, c.sigma_xi, c.eta_t, c.eta_l)? - v_t0;
    let v_s0 = geom.p_wedge;
    let v_s1 = trace_identity_w2s(geom, c.sigma_xi, c.eta_t, c.eta_u, c.eta_l)? - v_s0;
    let e_s = c.nu_z()
        * (geom.p_t() as f64 - geom.p_wedge)
        * trace_identity_student(geom, c.sigma_xi, c.eta_t, c.eta_u)?;
    let student_risk = scale * (v_s0 + v_s1 + e_s);
    Ok(GainPrediction {
        teacher_risk,
        student_risk,
        gain: teacher_risk - student_risk,
        v_t0,
        v_t1,
        v_s0,
        v_s1,
        e_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimalEtaU {
    /// Unconstrained maximizer of the `ν_z → 0` gain.
    pub value: f64,
    /// `value` clamped to the admissible training range `[0, 1/2]`.
    pub clamped: f64,
    pub in_range: bool,
}

/// `η_u⋆ = (η_ℓ‖μ_T‖² − (η_t + η_ℓ)μ_TᵀΞμ_S + η_t‖Ξμ_S‖²) / ‖μ_T − Ξμ_S‖²`.
///
/// This maximizes the gain with the `E_S` term dropped; at finite `ν_z`
/// the true maximizer shifts slightly.
pub fn optimal_eta_u(config: &ProblemConfig, geom: &GroupGeometry) -> Result<OptimalEtaU> {
    let xms = geom.xi_mu_s();
    let diff = (&geom.mu_t - &xms).norm();
    if diff < DEGENERATE_TOL {
        return Err(Error::Degenerate(format!(
            "‖μ_T − Ξμ_S‖ = {diff:e}; the gain does not depend on η_u at leading order"
        )));
    }
    let (el, et) = (config.eta_l, config.eta_t);
    let num = el * geom.mu_t.norm_squared() - (et + el) * geom.mu_t.dot(&xms) + et * xms.norm_squared();
    let value = num / (diff * diff);
    Ok(OptimalEtaU {
        value,
        clamped: value.clamp(0.0, 0.5),
        in_range: (0.0..=0.5).contains(&value),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FailureReport {
    pub gain: f64,
    pub gain_negative: bool,
    /// `‖μ_T‖²/σ_ξ²`.
    pub separation: f64,
    /// With `Ξ = 0` and `|η_u − η_ℓ| > |η_t − η_ℓ|`, the gain is negative for
    /// every `ν_z` once `separation` exceeds this value.
    pub threshold: Option<f64>,
    pub condition_applies: bool,
}

/// Sign of the predicted gain and whether the orthogonal-frame sufficient
/// condition for a negative gain holds.
///
/// For `Ξ = 0` the `ν_z → 0` gain is
/// `σ_y²γ_z[(p_T − 1) − ((η_u − η_ℓ)² − (η_t − η_ℓ)²)·‖μ_T‖²/σ_ξ²]` and `E_S ≥ 0`,
/// so the gain is negative for all `ν_z` above the threshold
/// `(p_T − 1)/((η_u − η_ℓ)² − (η_t − η_ℓ)²)`. At `(η_ℓ, η_u, η_t) = (0.4, 0.1, 0.5)`
/// this is `12.5(p_T − 1)`.
pub fn failure_criterion(config: &ProblemConfig, geom: &GroupGeometry) -> Result<FailureReport> {
    let pred = w2s_risk(config, geom)?;
    let separation = geom.mu_t.norm_squared() / config.sigma_xi.powi(2);
    let du = config.eta_u - config.eta_l;
    let dt = config.eta_t - config.eta_l;
    let spread = du * du - dt * dt;
    let threshold = (geom.xi.norm() < DEGENERATE_TOL && spread > 0.0)
        .then(|| (geom.p_t() as f64 - 1.0) / spread);
    Ok(FailureReport {
        gain: pred.gain,
        gain_negative: pred.gain < 0.0,
        separation,
        threshold,
        condition_applies: threshold.is_some_and(|t| separation > t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, GeometryTargets};
    use crate::geometry::{build_frames, build_mu_xi};
    use crate::rng::rng_for;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_geometry(seed: u64) -> (GroupGeometry, f64) {
        let mut rng = rng_for(seed);
        let p_s = rng.random_range(2..5usize);
        let p_t = p_s + rng.random_range(0..3usize);
        let p = (p_t - 1) + (p_s - 1) + rng.random_range(1..3usize);
        let target = rng.random::<f64>() * 0.95 * (p_s - 1) as f64;
        let (t, s) = build_frames(p, p_t, p_s, target, seed).unwrap();
        let mt = DVector::from_fn(p_t - 1, |_, _| rng.random_range(-3.0..3.0));
        let ms = DVector::from_fn(p_s - 1, |_, _| rng.random_range(-1.0..1.0));
        let mu = build_mu_xi(&t, &s, &mt, &ms).unwrap();
        let sigma = rng.random_range(0.5..2.0);
        (GroupGeometry::from_parts(t, s, mu).unwrap(), sigma)
    }

    fn fig_config(eta_l: f64, eta_u: f64, eta_t: f64, nu_z: f64) -> (ProblemConfig, GroupGeometry) {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.problem.eta_l = eta_l;
        cfg.problem.eta_u = eta_u;
        cfg.problem.eta_t = eta_t;
        cfg.problem.n = 2560;
        cfg.problem.n_unlabeled = (256.0 / nu_z).round() as usize;
        let g = GroupGeometry::from_targets(&cfg.problem, &cfg.targets, 0).unwrap();
        (cfg.problem, g)
    }

    #[test]
    fn eta_zero_blocks_are_diagonal() {
        let (g, sigma) = random_geometry(1);
        let c = cov_teacher(&g, sigma, 0.0).unwrap();
        let ci = cov_teacher_inv(&g, sigma, 0.0).unwrap();
        let k = g.p_t();
        let mut d = DMatrix::identity(k, k) * sigma * sigma;
        d[(0, 0)] = 1.0;
        assert_eq!(c, d);
        let mut di = DMatrix::identity(k, k) / (sigma * sigma);
        di[(0, 0)] = 1.0;
        assert!((ci - di).amax() < 1e-15);
    }

    #[test]
    fn zero_mean_cov_is_eta_free() {
        let (g, sigma) = random_geometry(2);
        let g = GroupGeometry::from_parts(g.t, g.s, DVector::zeros(g.mu_xi.len())).unwrap();
        assert_eq!(cov_teacher(&g, sigma, 0.1).unwrap(), cov_teacher(&g, sigma, 0.9).unwrap());
    }

    #[test]
    fn non_positive_sigma_rejected() {
        let (g, _) = random_geometry(3);
        assert!(matches!(cov_teacher(&g, 0.0, 0.1), Err(Error::Domain(_))));
        assert!(matches!(cov_student_inv(&g, -1.0, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_cov_orthogonal_frames_at_eta_zero() {
        let (t, s) = build_frames(5, 3, 2, 0.0, 7).unwrap();
        let g = GroupGeometry::from_parts(t, s, DVector::zeros(5)).unwrap();
        let a = cross_cov(&g, 1.3, 0.0).unwrap();
        let mut expect = DMatrix::zeros(2, 3);
        expect[(0, 0)] = 1.0;
        assert!((a - expect).amax() < 1e-15);
    }

    #[test]
    fn oracle_suite_over_random_geometries() {
        for seed in 0..100 {
            let (g, sigma) = random_geometry(seed);
            let mut rng = rng_for(seed + 1000);
            let (et, eu, el): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            for (c, ci) in [
                (cov_teacher(&g, sigma, et).unwrap(), cov_teacher_inv(&g, sigma, et).unwrap()),
                (cov_student(&g, sigma, eu).unwrap(), cov_student_inv(&g, sigma, eu).unwrap()),
            ] {
                let k = c.nrows();
                assert!((&ci * &c - DMatrix::identity(k, k)).amax() < 1e-12);
                // generic LU inverse as an independent oracle
                let lu = c.clone().lu().try_inverse().unwrap();
                assert!((lu - &ci).amax() < 1e-9 * (1.0 + ci.amax()));
            }

            let dense_t = (cov_teacher(&g, sigma, et).unwrap() * cov_teacher_inv(&g, sigma, el).unwrap()).trace();
            assert!((dense_t - trace_identity_teacher(&g, sigma, et, el).unwrap()).abs() < 1e-8);

            let a = cross_cov(&g, sigma, eu).unwrap();
            let csu_inv = cov_student(&g, sigma, eu).unwrap().try_inverse().unwrap();
            let five = a.transpose()
                * &csu_inv
                * cov_student(&g, sigma, et).unwrap()
                * &csu_inv
                * a.clone()
                * cov_teacher(&g, sigma, el).unwrap().try_inverse().unwrap();
            assert!((five.trace() - trace_identity_w2s(&g, sigma, et, eu, el).unwrap()).abs() < 1e-8);

            let dense_s = (cov_student(&g, sigma, et).unwrap() * &csu_inv).trace();
            assert!((dense_s - trace_identity_student(&g, sigma, et, eu).unwrap()).abs() < 1e-8);

            let e1 = cov_student_inv(&g, sigma, eu).unwrap() * a.column(0);
            let mut basis = DVector::zeros(g.p_s());
            basis[0] = 1.0;
            assert!((e1 - basis).amax() < 1e-12);
        }
    }

    #[test]
    fn teacher_trace_examples() {
        let (_, g) = fig_config(0.1, 0.1, 0.5, 0.05);
        assert_abs_diff_eq!(trace_identity_teacher(&g, 1.0, 0.5, 0.1).unwrap(), 4.6, epsilon = 1e-12);
        assert_abs_diff_eq!(trace_identity_teacher(&g, 1.0, 0.3, 0.3).unwrap(), 3.0, epsilon = 1e-15);
    }

    #[test]
    fn w2s_trace_special_cases() {
        let (_, g) = fig_config(0.1, 0.1, 0.5, 0.05);
        assert_abs_diff_eq!(trace_identity_w2s(&g, 1.0, 0.2, 0.2, 0.2).unwrap(), g.p_wedge, epsilon = 1e-15);
        let (t, s) = build_frames(4, 3, 2, 0.0, 3).unwrap();
        let mu = build_mu_xi(&t, &s, &DVector::from_vec(vec![3.0, 1.0]), &DVector::from_vec(vec![0.4])).unwrap();
        let g0 = GroupGeometry::from_parts(t, s, mu).unwrap();
        let v = trace_identity_w2s(&g0, 1.0, 0.5, 0.3, 0.1).unwrap();
        assert_abs_diff_eq!(v, 1.0 + 0.04 * 10.0, epsilon = 1e-10);
    }

    #[test]
    fn sft_example() {
        let (mut cfg, g) = fig_config(0.1, 0.1, 0.5, 0.05);
        cfg.n = 2560;
        assert_abs_diff_eq!(cfg.gamma_z(), 0.1, epsilon = 1e-15);
        let r = sft_risk(&cfg, &g).unwrap();
        assert_abs_diff_eq!(r, 0.46, epsilon = 1e-12);
        assert_abs_diff_eq!(r, cfg.gamma_z() * trace_identity_teacher(&g, 1.0, 0.5, 0.1).unwrap(), epsilon = 1e-15);
        cfg.sigma_y = 0.0;
        assert_eq!(sft_risk(&cfg, &g).unwrap(), 0.0);
        cfg.sigma_y = 1.0;
        cfg.eta_t = cfg.eta_l;
        assert_abs_diff_eq!(sft_risk(&cfg, &g).unwrap(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn w2s_example() {
        let (cfg, g) = fig_config(0.1, 0.1, 0.5, 0.05);
        assert_abs_diff_eq!(g.xi_mu_s().norm_squared(), 0.02, epsilon = 1e-12);
        let pred = w2s_risk(&cfg, &g).unwrap();
        let expect = 0.1 * (1.2 + 0.16 * 0.02 + 0.05 * 1.8 * 2.016);
        assert_abs_diff_eq!(pred.student_risk, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(pred.student_risk, 0.13846, epsilon = 1e-5);
        // V_S1 through the dense five-matrix product
        let dense = (cov_w2s(&g, 1.0, 0.5, 0.1).unwrap() * cov_teacher_inv(&g, 1.0, 0.1).unwrap()).trace();
        assert_abs_diff_eq!(pred.v_s1, dense - g.p_wedge, epsilon = 1e-10);
        assert_eq!(pred.gain, pred.teacher_risk - pred.student_risk);
        assert!(pred.v_s0 <= pred.v_t0);
    }

    #[test]
    fn no_spurious_limit() {
        let (t, s) = build_frames(4, 3, 2, 0.0, 3).unwrap();
        let g = GroupGeometry::from_parts(t, s, DVector::zeros(4)).unwrap();
        let mut cfg = ExperimentConfig::desk_default().problem;
        cfg.eta_l = 0.3;
        cfg.eta_u = 0.3;
        cfg.eta_t = 0.3;
        cfg.n_unlabeled = 1_000_000_000;
        let pred = w2s_risk(&cfg, &g).unwrap();
        assert_abs_diff_eq!(pred.student_risk, cfg.gamma_z(), epsilon = 1e-6);
        assert_abs_diff_eq!(pred.gain, cfg.gamma_z() * 2.0, epsilon = 1e-6);
    }

    #[test]
    fn full_alignment_correction_coefficient() {
        let (t, s) = build_frames(5, 3, 2, 1.0, 5).unwrap();
        let mu = &t * DVector::from_vec(vec![1.0, 2.0]);
        let g = GroupGeometry::from_parts(t, s, mu).unwrap();
        assert_abs_diff_eq!(g.p_wedge, 2.0, epsilon = 1e-12);
        let mut cfg = ExperimentConfig::desk_default().problem;
        cfg.p = 5;
        let pred = w2s_risk(&cfg, &g).unwrap();
        let tr = trace_identity_student(&g, cfg.sigma_xi, cfg.eta_t, cfg.eta_u).unwrap();
        assert_abs_diff_eq!(pred.e_s / (cfg.nu_z() * tr), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn eta_u_star_examples() {
        let (mut cfg, g) = fig_config(0.5, 0.5, 0.5, 0.05);
        assert_abs_diff_eq!(optimal_eta_u(&cfg, &g).unwrap().value, 0.5, epsilon = 1e-12);

        let (t, s) = build_frames(4, 3, 2, 0.0, 1).unwrap();
        let mu = build_mu_xi(&t, &s, &DVector::from_vec(vec![2.0, 0.0]), &DVector::from_vec(vec![0.5])).unwrap();
        let g0 = GroupGeometry::from_parts(t, s, mu).unwrap();
        cfg.eta_l = 0.17;
        assert_abs_diff_eq!(optimal_eta_u(&cfg, &g0).unwrap().value, 0.17, epsilon = 1e-12);
    }

    #[test]
    fn eta_u_star_matches_grid_search() {
        let (cfg, g) = fig_config(0.1, 0.1, 0.5, 0.05);
        let star = optimal_eta_u(&cfg, &g).unwrap();
        assert_abs_diff_eq!(star.value, 0.0813, epsilon = 1e-4);
        assert!(star.in_range);
        let mut limit = cfg;
        limit.n_unlabeled = usize::MAX / 4;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=5000 {
            let mut c = limit;
            c.eta_u = i as f64 * 1e-4;
            let gain = w2s_risk(&c, &g).unwrap().gain;
            if gain > best.0 {
                best = (gain, c.eta_u);
            }
        }
        assert!((best.1 - star.value).abs() <= 1e-4, "{} vs {}", best.1, star.value);
    }

    #[test]
    fn eta_u_star_degenerate() {
        let (t, s) = build_frames(3, 2, 2, 0.5, 1).unwrap();
        let mu = DVector::zeros(3);
        let g = GroupGeometry::from_parts(t, s, mu).unwrap();
        let cfg = ExperimentConfig::desk_default().problem;
        assert!(matches!(optimal_eta_u(&cfg, &g), Err(Error::Degenerate(_))));
    }

    fn orthogonal(mu_t_sq: f64, mu_s_sq: f64) -> GroupGeometry {
        let (t, s) = build_frames(4, 3, 2, 0.0, 9).unwrap();
        let mu = build_mu_xi(
            &t,
            &s,
            &DVector::from_vec(vec![mu_t_sq.sqrt(), 0.0]),
            &DVector::from_vec(vec![mu_s_sq.sqrt()]),
        )
        .unwrap();
        GroupGeometry::from_parts(t, s, mu).unwrap()
    }

    #[test]
    fn failure_condition_strong_separation() {
        let g = orthogonal(30.0, 0.1);
        let mut cfg = ExperimentConfig::desk_default().problem;
        (cfg.eta_l, cfg.eta_u, cfg.eta_t) = (0.4, 0.1, 0.5);
        for nu in [0.01, 0.02, 0.05, 0.1, 0.2, 0.49] {
            cfg.n_unlabeled = (cfg.d_z as f64 / nu).ceil() as usize;
            let r = failure_criterion(&cfg, &g).unwrap();
            assert!(r.gain_negative, "ν_z = {nu}");
            assert!(r.condition_applies);
            assert_abs_diff_eq!(r.threshold.unwrap(), 25.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn failure_condition_weak_separation() {
        let g = orthogonal(20.0, 0.01);
        let mut cfg = ExperimentConfig::desk_default().problem;
        (cfg.eta_l, cfg.eta_u, cfg.eta_t) = (0.4, 0.1, 0.5);
        cfg.n = 2560;
        cfg.n_unlabeled = 12_800;
        let r = failure_criterion(&cfg, &g).unwrap();
        assert!(!r.condition_applies);
        assert!(r.gain > 0.0);
        let eps = 0.16 * 0.01 / 2.0;
        assert_abs_diff_eq!(r.gain, 0.1 * (0.4 - 4.0 * 0.02 * (1.0 + eps)), epsilon = 1e-12);
    }

    #[test]
    fn matched_fractions_never_trigger() {
        let g = orthogonal(50.0, 0.1);
        let mut cfg = ExperimentConfig::desk_default().problem;
        (cfg.eta_l, cfg.eta_u, cfg.eta_t) = (0.3, 0.3, 0.5);
        cfg.n_unlabeled = usize::MAX / 4;
        let r = failure_criterion(&cfg, &g).unwrap();
        assert!(r.threshold.is_none());
        assert!(r.gain >= 0.0);
    }

    #[test]
    fn gain_nonincreasing_in_similarity() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.problem.n_unlabeled = 6400;
        assert_abs_diff_eq!(cfg.problem.nu_z(), 0.04, epsilon = 1e-15);
        let mut last = f64::INFINITY;
        for xi in [0.0, 0.2, 0.4, 0.6, 0.8] {
            let targets = GeometryTargets { xi_frob_sq: xi, ..cfg.targets };
            let g = GroupGeometry::from_targets(&cfg.problem, &targets, 0).unwrap();
            let gain = w2s_risk(&cfg.problem, &g).unwrap().gain;
            assert!(gain <= last, "‖Ξ‖² = {xi}");
            last = gain;
        }
    }

    #[test]
    fn mixture_moment_lower_block() {
        let (g, sigma) = random_geometry(4);
        let eta = 0.3;
        let m = mixture_moment(&g.mu_t, sigma, eta).unwrap();
        let c = cov_teacher(&g, sigma, eta).unwrap();
        let k = g.mu_t.len();
        let diff = (m - c).view((1, 1), (k, k)).into_owned();
        assert!((diff - &g.mu_t * g.mu_t.transpose() * 0.21).amax() < 1e-12);
        for eta in [0.0, 1.0] {
            assert!((mixture_moment(&g.mu_s, sigma, eta).unwrap() - cov_student(&g, sigma, eta).unwrap()).amax() < 1e-15);
        }
        let a = mixture_cross_moment(&g, sigma, 0.4).unwrap();
        let e1 = mixture_moment(&g.mu_s, sigma, 0.4).unwrap().try_inverse().unwrap() * a.column(0);
        assert!((e1[0] - 1.0).abs() < 1e-12 && e1.rows(1, e1.len() - 1).amax() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn spurious_gap_nonnegative_for_weaker_student_mean(
            xi in 0.0f64..1.0,
            mu_t_sq in 0.0f64..20.0,
            frac in 0.0f64..=1.0,
            el in 0.0f64..0.5,
            et in 0.0f64..1.0,
        ) {
            let mut cfg = ExperimentConfig::desk_default();
            cfg.targets = GeometryTargets { xi_frob_sq: xi * 0.99, mu_t_sq, mu_s_sq: frac * mu_t_sq };
            (cfg.problem.eta_l, cfg.problem.eta_u, cfg.problem.eta_t) = (el, el, et);
            let g = GroupGeometry::from_targets(&cfg.problem, &cfg.targets, 3).unwrap();
            let pred = w2s_risk(&cfg.problem, &g).unwrap();
            prop_assert!(pred.v_t1 - pred.v_s1 >= -1e-9);
        }

        #[test]
        fn decomposition_and_spurious_gap(
            seed in 0u64..10_000,
            el in 0.0f64..0.5,
            et in 0.0f64..1.0,
            nu in 0.001f64..0.49,
        ) {
            let (g, sigma) = random_geometry(seed);
            let mut cfg = ExperimentConfig::desk_default().problem;
            cfg.sigma_xi = sigma;
            (cfg.eta_l, cfg.eta_u, cfg.eta_t) = (el, el, et);
            cfg.n_unlabeled = (cfg.d_z as f64 / nu).ceil() as usize;
            let pred = w2s_risk(&cfg, &g).unwrap();
            prop_assert_eq!(sft_risk(&cfg, &g).unwrap() - pred.student_risk, pred.gain);
            let gap = (et - el).powi(2) * (g.mu_t.norm_squared() - g.xi_mu_s().norm_squared()) / (sigma * sigma);
            prop_assert!((pred.v_t1 - pred.v_s1 - gap).abs() < 1e-9 * (1.0 + gap.abs()));
            prop_assert!(pred.v_s0 <= pred.v_t0);
        }
    }
}
