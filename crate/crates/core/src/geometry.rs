//! Group-feature geometry: orthonormal frames `T`, `S`, their overlap
//! `Ξ = TᵀS`, and a mean vector `μ_ξ` with prescribed projections.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{GeometryTargets, ProblemConfig};
use crate::error::{Error, Result};
use crate::io::Container;
use crate::rng::rng_for;

pub const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupGeometry {
    /// `p × (p_T − 1)`, orthonormal columns.
    pub t: DMatrix<f64>,
    /// `p × (p_S − 1)`, orthonormal columns.
    pub s: DMatrix<f64>,
    pub mu_xi: DVector<f64>,
    /// `Tᵀμ_ξ`.
    pub mu_t: DVector<f64>,
    /// `Sᵀμ_ξ`.
    pub mu_s: DVector<f64>,
    /// `TᵀS`.
    pub xi: DMatrix<f64>,
    /// `1 + ‖Ξ‖_F²`.
    pub p_wedge: f64,
}

impl GroupGeometry {
    /// Derives `μ_T`, `μ_S`, `Ξ` and `p_∧` from the frames and mean.
    pub fn from_parts(t: DMatrix<f64>, s: DMatrix<f64>, mu_xi: DVector<f64>) -> Result<Self> {
        if t.nrows() != s.nrows() || t.nrows() != mu_xi.len() {
            return Err(Error::Dimension(format!(
                "T is {}×{}, S is {}×{}, μ_ξ has length {}",
                t.nrows(),
                t.ncols(),
                s.nrows(),
                s.ncols(),
                mu_xi.len()
            )));
        }
        let mu_t = t.tr_mul(&mu_xi);
        let mu_s = s.tr_mul(&mu_xi);
        let xi = t.tr_mul(&s);
        let p_wedge = 1.0 + xi.norm_squared();
        Ok(GroupGeometry {
            t,
            s,
            mu_xi,
            mu_t,
            mu_s,
            xi,
            p_wedge,
        })
    }

    /// Frames from `build_frames`, with `μ_T` and `μ_S` both pointing along
    /// the first frame coordinate at the requested norms.
    pub fn from_targets(config: &ProblemConfig, targets: &GeometryTargets, seed: u64) -> Result<Self> {
        let (t, s) = build_frames(config.p, config.p_t, config.p_s, targets.xi_frob_sq, seed)?;
        let mut mu_t = DVector::zeros(config.p_t - 1);
        mu_t[0] = targets.mu_t_sq.sqrt();
        let mut mu_s = DVector::zeros(config.p_s - 1);
        mu_s[0] = targets.mu_s_sq.sqrt();
        let mu_xi = build_mu_xi(&t, &s, &mu_t, &mu_s)?;
        Self::from_parts(t, s, mu_xi)
    }

    pub fn ambient(&self) -> usize {
        self.t.nrows()
    }

    pub fn p_t(&self) -> usize {
        self.t.ncols() + 1
    }

    pub fn p_s(&self) -> usize {
        self.s.ncols() + 1
    }

    /// `Ξμ_S`.
    pub fn xi_mu_s(&self) -> DVector<f64> {
        &self.xi * &self.mu_s
    }

    /// `μ_TᵀΞμ_S`.
    pub fn cross_term(&self) -> f64 {
        self.mu_t.dot(&self.xi_mu_s())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("geometry");
        c.set("p", self.ambient());
        c.set("p_T", self.p_t());
        c.set("p_S", self.p_s());
        c.set("p_wedge", format!("{:?}", self.p_wedge));
        c.push("T", self.t.clone());
        c.push("S", self.s.clone());
        c.push("mu_xi", DMatrix::from_column_slice(self.mu_xi.len(), 1, self.mu_xi.as_slice()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get("kind") != Some("geometry") {
            return Err(Error::Format("container is not a geometry".into()));
        }
        let mu = c.block("mu_xi")?;
        let g = Self::from_parts(
            c.block("T")?.clone(),
            c.block("S")?.clone(),
            DVector::from_column_slice(mu.as_slice()),
        )?;
        let (p, p_t, p_s): (usize, usize, usize) = (c.require("p")?, c.require("p_T")?, c.require("p_S")?);
        if (p, p_t, p_s) != (g.ambient(), g.p_t(), g.p_s()) {
            return Err(Error::Format("header dimensions disagree with blocks".into()));
        }
        Ok(g)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_for(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Random frames `T` (`p × (p_T−1)`) and `S` (`p × (p_S−1)`) with
/// `‖TᵀS‖_F² = target`.
///
/// `S` is a random orthonormal frame; the first `p_S − 1` columns of `T` are
/// `cos θ·s_i + sin θ·r_i` for an orthonormal set `r_i ⟂ span(S)`, and the
/// rest of `T` is filled orthogonally to both.
pub fn build_frames(
    p: usize,
    p_t: usize,
    p_s: usize,
    target: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if p_s < 2 || p_t < p_s {
        return Err(Error::Dimension(format!(
            "need 2 ≤ p_S ≤ p_T, got p_S = {p_s}, p_T = {p_t}"
        )));
    }
    let (kt, ks) = (p_t - 1, p_s - 1);
    if !(0.0..=ks as f64).contains(&target) || !target.is_finite() {
        return Err(Error::Domain(format!(
            "‖Ξ‖_F² target {target} outside [0, {ks}]"
        )));
    }
    if p < kt + ks {
        return Err(Error::Dimension(format!(
            "ambient p = {p} < (p_T − 1) + (p_S − 1) = {}",
            kt + ks
        )));
    }

    let q = gaussian_matrix(p, kt + ks, seed).qr().q();
    let cos = (target / ks as f64).sqrt().min(1.0);
    let sin = (1.0 - cos * cos).max(0.0).sqrt();

    let s = q.columns(0, ks).into_owned();
    let mut t = DMatrix::zeros(p, kt);
    for i in 0..ks {
        let col = q.column(i) * cos + q.column(ks + i) * sin;
        t.set_column(i, &col);
    }
    for j in ks..kt {
        t.set_column(j, &q.column(ks + j));
    }
    Ok((t, s))
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Solves `[I Ξ; Ξᵀ I][a; b] = [μ_T; μ_S]` and returns `T a + S b`.
pub fn build_mu_xi(
    t: &DMatrix<f64>,
    s: &DMatrix<f64>,
    mu_t_target: &DVector<f64>,
    mu_s_target: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (kt, ks) = (t.ncols(), s.ncols());
    if mu_t_target.len() != kt || mu_s_target.len() != ks || t.nrows() != s.nrows() {
        return Err(Error::Dimension(format!(
            "targets of length {} and {} for frames of width {kt} and {ks}",
            mu_t_target.len(),
            mu_s_target.len()
        )));
    }
    let xi = t.tr_mul(s);
    let xi_norm = spectral_norm(&xi);
    if xi_norm >= 1.0 - ORTHO_TOL {
        return Err(Error::Singular(format!(
            "‖Ξ‖₂ = {xi_norm} is 1 within tolerance; μ_T and μ_S cannot be set independently"
        )));
    }

    let mut m = DMatrix::identity(kt + ks, kt + ks);
    m.view_mut((0, kt), (kt, ks)).copy_from(&xi);
    m.view_mut((kt, 0), (ks, kt)).copy_from(&xi.transpose());
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Singular("coupled mean system is not positive definite".into()))?;

    let mut rhs = DVector::zeros(kt + ks);
    rhs.rows_mut(0, kt).copy_from(mu_t_target);
    rhs.rows_mut(kt, ks).copy_from(mu_s_target);

    let assemble = |sol: &DVector<f64>| t * sol.rows(0, kt) + s * sol.rows(kt, ks);
    let mut sol = chol.solve(&rhs);
    let mut mu = assemble(&sol);
    // one step of iterative refinement against the realized projections
    let mut resid = rhs.clone();
    resid.rows_mut(0, kt).axpy(-1.0, &t.tr_mul(&mu), 1.0);
    resid.rows_mut(kt, ks).axpy(-1.0, &s.tr_mul(&mu), 1.0);
    sol += chol.solve(&resid);
    mu = assemble(&sol);
    Ok(mu)
}

/// `‖MᵀM − I‖` in Frobenius and spectral norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StiefelDefect {
    pub frobenius: f64,
    pub spectral: f64,
}

pub fn stiefel_defect(m: &DMatrix<f64>) -> StiefelDefect {
    let gram = m.tr_mul(m) - DMatrix::<f64>::identity(m.ncols(), m.ncols());
    StiefelDefect {
        frobenius: gram.norm(),
        spectral: spectral_norm(&gram),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Lists every violated invariant of `(config, geometry)`.
pub fn validate(config: &ProblemConfig, geom: &GroupGeometry) -> ValidationReport {
    let mut issues = Vec::new();
    let c = config;

    if c.d_z == 0 || c.p == 0 || c.n == 0 || c.n_unlabeled == 0 {
        issues.push("d_z, p, n and N must be positive".to_string());
    }
    if c.p_t < 2 || c.p_t > c.p {
        issues.push(format!("p_T = {} outside [2, p = {}]", c.p_t, c.p));
    }
    if c.p_s < 2 || c.p_s > c.p_t {
        issues.push(format!("p_S = {} outside [2, p_T = {}]", c.p_s, c.p_t));
    }
    if c.p_t >= 1 && c.p_s >= 1 && c.p < (c.p_t - 1) + (c.p_s - 1) {
        issues.push(format!(
            "p = {} < (p_T − 1) + (p_S − 1) = {}",
            c.p,
            (c.p_t - 1) + (c.p_s - 1)
        ));
    }
    if c.sigma_y < 0.0 || !c.sigma_y.is_finite() {
        issues.push(format!("sigma_y = {} must be non-negative", c.sigma_y));
    }
    if c.sigma_xi <= 0.0 || !c.sigma_xi.is_finite() {
        issues.push(format!("sigma_xi = {} must be positive", c.sigma_xi));
    }
    for (name, v) in [("eta_l", c.eta_l), ("eta_u", c.eta_u)] {
        if !(0.0..=0.5).contains(&v) {
            issues.push(format!("{name} = {v} outside [0, 1/2]"));
        }
    }
    if !(0.0..=1.0).contains(&c.eta_t) {
        issues.push(format!("eta_t = {} outside [0, 1]", c.eta_t));
    }
    if c.n <= c.d_teacher() {
        issues.push(format!("n > d_T violated (n = {}, d_T = {})", c.n, c.d_teacher()));
    }
    if c.n_unlabeled <= c.d_student() {
        issues.push(format!(
            "N > d_S violated (N = {}, d_S = {})",
            c.n_unlabeled,
            c.d_student()
        ));
    }
    if c.n > 0 && c.p_t > 0 && !(c.gamma_z() > 0.0 && c.gamma_z() < 1.0 / c.p_t as f64) {
        issues.push(format!("gamma_z = {} outside (0, 1/p_T)", c.gamma_z()));
    }
    if c.n_unlabeled > 0 && c.p_s > 0 && !(c.nu_z() > 0.0 && c.nu_z() < 1.0 / c.p_s as f64) {
        issues.push(format!("nu_z = {} outside (0, 1/p_S)", c.nu_z()));
    }

    let g = geom;
    if g.t.nrows() != c.p || g.s.nrows() != c.p || g.mu_xi.len() != c.p {
        issues.push(format!(
            "ambient dimension mismatch: config p = {}, T has {} rows, S has {} rows, μ_ξ has length {}",
            c.p,
            g.t.nrows(),
            g.s.nrows(),
            g.mu_xi.len()
        ));
    }
    if g.t.ncols() + 1 != c.p_t {
        issues.push(format!("T has {} columns, expected p_T − 1 = {}", g.t.ncols(), c.p_t.saturating_sub(1)));
    }
    if g.s.ncols() + 1 != c.p_s {
        issues.push(format!("S has {} columns, expected p_S − 1 = {}", g.s.ncols(), c.p_s.saturating_sub(1)));
    }
    for (name, frame) in [("T", &g.t), ("S", &g.s)] {
        let d = stiefel_defect(frame);
        if d.frobenius > ORTHO_TOL {
            issues.push(format!(
                "{name} Stiefel defect: ‖{name}ᵀ{name} − I‖_F = {:.6e}, ‖{name}ᵀ{name} − I‖₂ = {:.6e}",
                d.frobenius, d.spectral
            ));
        }
    }
    if g.t.nrows() == g.s.nrows() && g.t.nrows() == g.mu_xi.len() {
        let tol = ORTHO_TOL * (1.0 + g.mu_xi.norm());
        if (g.t.tr_mul(&g.s) - &g.xi).norm() > ORTHO_TOL {
            issues.push("stored Ξ differs from TᵀS".to_string());
        }
        if (g.t.tr_mul(&g.mu_xi) - &g.mu_t).norm() > tol {
            issues.push("stored μ_T differs from Tᵀμ_ξ".to_string());
        }
        if (g.s.tr_mul(&g.mu_xi) - &g.mu_s).norm() > tol {
            issues.push("stored μ_S differs from Sᵀμ_ξ".to_string());
        }
    }
    let xi_frob_sq = g.xi.norm_squared();
    if xi_frob_sq > g.s.ncols() as f64 + ORTHO_TOL {
        issues.push(format!("‖Ξ‖_F² = {xi_frob_sq} exceeds p_S − 1 = {}", g.s.ncols()));
    }
    let xi_spec = spectral_norm(&g.xi);
    if xi_spec > 1.0 + ORTHO_TOL {
        issues.push(format!("‖Ξ‖₂ = {xi_spec} exceeds 1"));
    }
    if (g.p_wedge - (1.0 + xi_frob_sq)).abs() > ORTHO_TOL
        || g.p_wedge < 1.0 - ORTHO_TOL
        || g.p_wedge > g.p_s() as f64 + ORTHO_TOL
    {
        issues.push(format!("p_wedge = {} inconsistent or outside [1, p_S]", g.p_wedge));
    }

    ValidationReport { issues }
}
