//! Sampling from the group mixture and building Kronecker feature matrices.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ProblemConfig;
use crate::error::{Error, Result};
use crate::geometry::GroupGeometry;
use crate::io::Container;
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn width(self, config: &ProblemConfig) -> usize {
        match self {
            Role::Teacher => config.p_t,
            Role::Student => config.p_s,
        }
    }

    fn frame(self, geom: &GroupGeometry) -> &DMatrix<f64> {
        match self {
            Role::Teacher => &geom.t,
            Role::Student => &geom.s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupMode {
    /// Each row is minority with probability `η`.
    #[default]
    Bernoulli,
    /// Exactly `⌊η·count⌋` minority rows at random positions.
    Quota,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `count × d_z`.
    pub z: DMatrix<f64>,
    /// `count × p`.
    pub group_feats: DMatrix<f64>,
    pub g: Vec<u8>,
    pub y: DVector<f64>,
    pub beta_star: DVector<f64>,
    pub eta: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn count(&self) -> usize {
        self.z.nrows()
    }

    pub fn minority_count(&self) -> usize {
        self.g.iter().filter(|&&g| g == 1).count()
    }

    /// `Zβ_*`, the noiseless regression function.
    pub fn f_star(&self) -> DVector<f64> {
        &self.z * &self.beta_star
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("dataset");
        c.set("count", self.count());
        c.set("d_z", self.z.ncols());
        c.set("p", self.group_feats.ncols());
        c.set("eta", format!("{:?}", self.eta));
        c.set("seed", self.seed);
        let n = self.count();
        c.push("Z", self.z.clone());
        c.push("Xi", self.group_feats.clone());
        c.push("g", DMatrix::from_iterator(n, 1, self.g.iter().map(|&g| g as f64)));
        c.push("y", DMatrix::from_column_slice(n, 1, self.y.as_slice()));
        c.push(
            "beta_star",
            DMatrix::from_column_slice(self.beta_star.len(), 1, self.beta_star.as_slice()),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get("kind") != Some("dataset") {
            return Err(Error::Format("container is not a dataset".into()));
        }
        let z = c.block("Z")?.clone();
        let group_feats = c.block("Xi")?.clone();
        let count: usize = c.require("count")?;
        if z.nrows() != count || group_feats.nrows() != count {
            return Err(Error::Format("row counts disagree with header".into()));
        }
        let col = |name: &str| -> Result<DVector<f64>> {
            let m = c.block(name)?;
            Ok(DVector::from_column_slice(m.as_slice()))
        };
        Ok(Dataset {
            z,
            group_feats,
            g: col("g")?.iter().map(|&v| v as u8).collect(),
            y: col("y")?,
            beta_star: col("beta_star")?,
            eta: c.require("eta")?,
            seed: c.require("seed")?,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Uniform on the sphere of radius `norm` in `R^{d_z}`.
pub fn draw_beta_star(d_z: usize, norm: f64, seed: u64) -> DVector<f64> {
    let mut rng = rng_for(seed);
    let v = DVector::<f64>::from_fn(d_z, |_, _| StandardNormal.sample(&mut rng));
    let len = v.norm();
    v * (norm / len)
}

pub(crate) fn draw_groups<R: Rng>(rng: &mut R, eta: f64, count: usize, mode: GroupMode) -> Vec<u8> {
    match mode {
        GroupMode::Bernoulli => (0..count).map(|_| u8::from(rng.random::<f64>() < eta)).collect(),
        GroupMode::Quota => {
            let minority = (eta * count as f64 + 1e-9).floor() as usize;
            let mut g: Vec<u8> = (0..count).map(|i| u8::from(i < minority)).collect();
            g.shuffle(rng);
            g
        }
    }
}

pub(crate) fn draw_gaussian_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)),
    )
}

/// `ξ_i = g_i μ_ξ + σ_ξ·N(0, I_p)`.
pub(crate) fn draw_group_feats<R: Rng>(
    rng: &mut R,
    g: &[u8],
    mu_xi: &DVector<f64>,
    sigma_xi: f64,
) -> DMatrix<f64> {
    let mut xi = draw_gaussian_rows(rng, g.len(), mu_xi.len()) * sigma_xi;
    for (i, &gi) in g.iter().enumerate() {
        if gi == 1 {
            for j in 0..mu_xi.len() {
                xi[(i, j)] += mu_xi[j];
            }
        }
    }
    xi
}

/// Draws `count` rows from `D(η)`.
///
/// With `beta = None` a fresh `β_*` is drawn from `seed`. `noiseless`
/// zeroes the label noise.
#[allow(clippy::too_many_arguments)]
pub fn sample_dataset(
    config: &ProblemConfig,
    geom: &GroupGeometry,
    eta: f64,
    count: usize,
    mode: GroupMode,
    seed: u64,
    noiseless: bool,
    beta: Option<&DVector<f64>>,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Precondition("count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Precondition(format!("eta = {eta} outside [0, 1]")));
    }
    if geom.ambient() != config.p {
        return Err(Error::Dimension(format!(
            "geometry ambient dimension {} differs from p = {}",
            geom.ambient(),
            config.p
        )));
    }
    let beta_star = match beta {
        Some(b) if b.len() != config.d_z => {
            return Err(Error::Dimension(format!(
                "β_* has length {}, expected d_z = {}",
                b.len(),
                config.d_z
            )))
        }
        Some(b) => b.clone(),
        None => draw_beta_star(config.d_z, config.beta_star_norm, derive_seed(seed, &[stream::BETA_STAR])),
    };

    let mut rng = rng_for(seed);
    let g = draw_groups(&mut rng, eta, count, mode);
    let z = draw_gaussian_rows(&mut rng, count, config.d_z);
    let group_feats = draw_group_feats(&mut rng, &g, &geom.mu_xi, config.sigma_xi);
    let mut y = &z * &beta_star;
    if !noiseless {
        for yi in y.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *yi += config.sigma_y * e;
        }
    }
    Ok(Dataset {
        z,
        group_feats,
        g,
        y,
        beta_star,
        eta,
        seed,
    })
}

/// Rows of `φ = z ⊗ [1; Fᵀξ]`, stored column-major with one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub block_width: usize,
    pub role: Role,
}

impl FeatureMatrix {
    pub fn count(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn d_z(&self) -> usize {
        self.dim() / self.block_width
    }
}

/// `count × width` matrix with rows `[1; Fᵀξ_i]`.
pub fn group_block(group_feats: &DMatrix<f64>, frame: &DMatrix<f64>) -> DMatrix<f64> {
    let proj = group_feats * frame;
    let mut w = DMatrix::from_element(group_feats.nrows(), frame.ncols() + 1, 1.0);
    w.columns_mut(1, frame.ncols()).copy_from(&proj);
    w
}

/// Row-wise Kronecker product: entry `(i, k·width + j)` is `z_ik · w_ij`.
pub fn row_kron(z: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.nrows() != w.nrows() {
        return Err(Error::Dimension(format!(
            "{} core rows but {} group rows",
            z.nrows(),
            w.nrows()
        )));
    }
    let (n, d, width) = (z.nrows(), z.ncols(), w.ncols());
    let mut out = DMatrix::zeros(n, d * width);
    for k in 0..d {
        let zk = z.column(k);
        for j in 0..width {
            out.column_mut(k * width + j)
                .zip_zip_apply(&zk, &w.column(j), |o, a, b| *o = a * b);
        }
    }
    Ok(out)
}

pub fn features(dataset: &Dataset, geom: &GroupGeometry, role: Role) -> Result<FeatureMatrix> {
    if dataset.group_feats.ncols() != geom.ambient() {
        return Err(Error::Dimension(format!(
            "dataset has {} group columns, geometry ambient dimension is {}",
            dataset.group_feats.ncols(),
            geom.ambient()
        )));
    }
    let w = group_block(&dataset.group_feats, role.frame(geom));
    Ok(FeatureMatrix {
        values: row_kron(&dataset.z, &w)?,
        block_width: w.ncols(),
        role,
    })
}

/// `(1/count) Σ w_i w_iᵀ`.
pub fn empirical_group_cov(dataset: &Dataset, geom: &GroupGeometry, role: Role) -> Result<DMatrix<f64>> {
    if dataset.count() < 2 {
        return Err(Error::Precondition("need at least 2 samples".into()));
    }
    let w = group_block(&dataset.group_feats, role.frame(geom));
    Ok(w.tr_mul(&w) / dataset.count() as f64)
}

/// `(1/count) Σ ψ_i w_iᵀ`, student rows against teacher columns.
pub fn empirical_cross_cov(dataset: &Dataset, geom: &GroupGeometry) -> Result<DMatrix<f64>> {
    if dataset.count() < 2 {
        return Err(Error::Precondition("need at least 2 samples".into()));
    }
    let psi = group_block(&dataset.group_feats, &geom.s);
    let w = group_block(&dataset.group_feats, &geom.t);
    Ok(psi.tr_mul(&w) / dataset.count() as f64)
}
