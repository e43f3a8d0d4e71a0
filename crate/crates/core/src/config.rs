//! Problem parameters and the flat `key = value` configuration format.
//!
//! A config file lists every key exactly once:
//!
//! ```text
//! # dimensions
//! d_z = 256
//! p = 4
//! p_T = 3
//! p_S = 2
//! sigma_y = 1.0
//! sigma_xi = 1.0
//! eta_l = 0.1
//! eta_u = 0.1
//! eta_t = 0.5
//! n = 2048
//! N = 12800
//! beta_star_norm = 1.0
//! xi_frob_sq = 0.2
//! mu_T_sq = 10.0
//! mu_S_sq = 0.1
//! seed = 0
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown, duplicated and missing
//! keys are all errors that name the offending key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keys accepted in a config file, in canonical output order.
pub const CONFIG_KEYS: [&str; 16] = [
    "d_z",
    "p",
    "p_T",
    "p_S",
    "sigma_y",
    "sigma_xi",
    "eta_l",
    "eta_u",
    "eta_t",
    "n",
    "N",
    "beta_star_norm",
    "xi_frob_sq",
    "mu_T_sq",
    "mu_S_sq",
    "seed",
];

/// Scalar parameters of the synthetic regression task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    /// Core-feature dimension.
    pub d_z: usize,
    /// Ambient group-feature dimension.
    pub p: usize,
    /// Teacher group block width (`w = [1; Tᵀξ]`).
    pub p_t: usize,
    /// Student group block width (`ψ = [1; Sᵀξ]`).
    pub p_s: usize,
    pub sigma_y: f64,
    pub sigma_xi: f64,
    /// Minority fraction of the labeled set.
    pub eta_l: f64,
    /// Minority fraction of the unlabeled set.
    pub eta_u: f64,
    /// Minority fraction of the test distribution.
    pub eta_t: f64,
    /// Labeled sample count.
    pub n: usize,
    /// Unlabeled sample count.
    pub n_unlabeled: usize,
    pub beta_star_norm: f64,
}

impl ProblemConfig {
    /// `d_z / n`.
    pub fn gamma_z(&self) -> f64 {
        self.d_z as f64 / self.n as f64
    }

    /// `d_z / N`.
    pub fn nu_z(&self) -> f64 {
        self.d_z as f64 / self.n_unlabeled as f64
    }

    pub fn d_teacher(&self) -> usize {
        self.p_t * self.d_z
    }

    pub fn d_student(&self) -> usize {
        self.p_s * self.d_z
    }

    /// Smallest ambient dimension that leaves one spare direction beyond
    /// both frames.
    pub fn default_ambient(p_t: usize, p_s: usize) -> usize {
        (p_t - 1) + (p_s - 1) + 1
    }

    /// Sample count whose ratio to `d_z` is closest to `1 / ratio`.
    pub fn count_for_ratio(d_z: usize, ratio: f64) -> usize {
        (d_z as f64 / ratio).round() as usize
    }
}

/// Norm targets used to build the group geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryTargets {
    /// Target `‖Ξ‖_F²`.
    pub xi_frob_sq: f64,
    /// Target `‖μ_T‖²`.
    pub mu_t_sq: f64,
    /// Target `‖μ_S‖²`.
    pub mu_s_sq: f64,
}

/// Everything a config file describes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub targets: GeometryTargets,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    key: None,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let Some(canonical) = CONFIG_KEYS.iter().find(|k| **k == key) else {
                return Err(Error::Config {
                    line: line_no,
                    key: Some(key.to_string()),
                    message: format!("unknown key `{key}`"),
                });
            };
            if let Some((first, _)) = values.insert(canonical, (line_no, value)) {
                return Err(Error::Config {
                    line: line_no,
                    key: Some(key.to_string()),
                    message: format!("duplicate key `{key}` (first set on line {first})"),
                });
            }
        }

        let missing: Vec<&str> = CONFIG_KEYS
            .iter()
            .copied()
            .filter(|k| !values.contains_key(k))
            .collect();
        if let Some(first) = missing.first() {
            return Err(Error::Config {
                line: 0,
                key: Some((*first).to_string()),
                message: format!("missing key(s): {}", missing.join(", ")),
            });
        }

        let int = |key: &str| -> Result<usize> {
            let (line, v) = values[key];
            v.parse::<usize>().map_err(|_| Error::Config {
                line,
                key: Some(key.to_string()),
                message: format!("`{key}` must be a non-negative integer, got `{v}`"),
            })
        };
        let real = |key: &str| -> Result<f64> {
            let (line, v) = values[key];
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Config {
                    line,
                    key: Some(key.to_string()),
                    message: format!("`{key}` must be a finite real, got `{v}`"),
                }),
            }
        };

        let (seed_line, seed_text) = values["seed"];
        let seed = seed_text.parse::<u64>().map_err(|_| Error::Config {
            line: seed_line,
            key: Some("seed".into()),
            message: format!("`seed` must be an unsigned integer, got `{seed_text}`"),
        })?;

        let cfg = ExperimentConfig {
            problem: ProblemConfig {
                d_z: int("d_z")?,
                p: int("p")?,
                p_t: int("p_T")?,
                p_s: int("p_S")?,
                sigma_y: real("sigma_y")?,
                sigma_xi: real("sigma_xi")?,
                eta_l: real("eta_l")?,
                eta_u: real("eta_u")?,
                eta_t: real("eta_t")?,
                n: int("n")?,
                n_unlabeled: int("N")?,
                beta_star_norm: real("beta_star_norm")?,
            },
            targets: GeometryTargets {
                xi_frob_sq: real("xi_frob_sq")?,
                mu_t_sq: real("mu_T_sq")?,
                mu_s_sq: real("mu_S_sq")?,
            },
            seed,
        };
        cfg.check_ranges(&values)?;
        Ok(cfg)
    }

    /// Range checks that make a config unusable outright. Softer invariants
    /// (solvability ratios, frame admissibility) are reported by
    /// [`crate::geometry::validate`] instead.
    fn check_ranges(&self, values: &BTreeMap<&str, (usize, &str)>) -> Result<()> {
        let line = |key: &str| values.get(key).map(|(l, _)| *l).unwrap_or(0);
        let fail = |key: &str, message: String| Error::Config {
            line: line(key),
            key: Some(key.to_string()),
            message,
        };
        let p = &self.problem;
        for (key, v) in [("d_z", p.d_z), ("p", p.p), ("n", p.n), ("N", p.n_unlabeled)] {
            if v == 0 {
                return Err(fail(key, format!("`{key}` must be positive")));
            }
        }
        if p.p_t < 2 {
            return Err(fail("p_T", "`p_T` must be at least 2".into()));
        }
        if p.p_s < 2 {
            return Err(fail("p_S", "`p_S` must be at least 2".into()));
        }
        for (key, v) in [("sigma_y", p.sigma_y), ("sigma_xi", p.sigma_xi)] {
            if v < 0.0 {
                return Err(fail(key, format!("`{key}` must be non-negative")));
            }
        }
        for (key, v) in [("eta_l", p.eta_l), ("eta_u", p.eta_u), ("eta_t", p.eta_t)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(fail(key, format!("`{key}` must lie in [0, 1], got {v}")));
            }
        }
        for (key, v) in [
            ("beta_star_norm", p.beta_star_norm),
            ("xi_frob_sq", self.targets.xi_frob_sq),
            ("mu_T_sq", self.targets.mu_t_sq),
            ("mu_S_sq", self.targets.mu_s_sq),
        ] {
            if v < 0.0 {
                return Err(fail(key, format!("`{key}` must be non-negative")));
            }
        }
        Ok(())
    }

    /// Renders the config back to the flat format; `parse(to_kv_string())`
    /// reproduces `self` exactly.
    pub fn to_kv_string(&self) -> String {
        let p = &self.problem;
        let t = &self.targets;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("d_z", p.d_z.to_string());
        put("p", p.p.to_string());
        put("p_T", p.p_t.to_string());
        put("p_S", p.p_s.to_string());
        put("sigma_y", format!("{:?}", p.sigma_y));
        put("sigma_xi", format!("{:?}", p.sigma_xi));
        put("eta_l", format!("{:?}", p.eta_l));
        put("eta_u", format!("{:?}", p.eta_u));
        put("eta_t", format!("{:?}", p.eta_t));
        put("n", p.n.to_string());
        put("N", p.n_unlabeled.to_string());
        put("beta_star_norm", format!("{:?}", p.beta_star_norm));
        put("xi_frob_sq", format!("{:?}", t.xi_frob_sq));
        put("mu_T_sq", format!("{:?}", t.mu_t_sq));
        put("mu_S_sq", format!("{:?}", t.mu_s_sq));
        put("seed", self.seed.to_string());
        out
    }

    /// `d_z = 256`, `γ_z = 0.125`, `ν_z = 0.05`, `p_T = 3`, `p_S = 2`.
    pub fn desk_default() -> Self {
        let d_z = 256;
        ExperimentConfig {
            problem: ProblemConfig {
                d_z,
                p: ProblemConfig::default_ambient(3, 2),
                p_t: 3,
                p_s: 2,
                sigma_y: 1.0,
                sigma_xi: 1.0,
                eta_l: 0.1,
                eta_u: 0.1,
                eta_t: 0.5,
                n: ProblemConfig::count_for_ratio(d_z, 0.125),
                n_unlabeled: ProblemConfig::count_for_ratio(d_z, 0.05),
                beta_star_norm: 1.0,
            },
            targets: GeometryTargets {
                xi_frob_sq: 0.2,
                mu_t_sq: 10.0,
                mu_s_sq: 0.1,
            },
            seed: 0,
        }
    }
}
