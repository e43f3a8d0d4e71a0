//! Numerical oracles bundled into a single pass/fail report.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::enhanced::{loss_and_grad, Loss, SoftmaxHead};
use crate::error::Result;
use crate::geometry::{build_frames, build_mu_xi, GroupGeometry};
use crate::rng::rng_for;
use crate::synth_data::{draw_gaussian_rows, features, sample_dataset, GroupMode, Role};
use crate::theory;

const GEOMETRIES: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    /// Largest observed error and its tolerance.
    pub worst: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FaultInjection {
    /// Added to entry `(1, 1)` of every closed-form `C_T(η)⁻¹`.
    pub teacher_inverse_offset: f64,
}

pub fn random_geometry(seed: u64) -> Result<(GroupGeometry, f64)> {
    let mut rng = rng_for(seed);
    let p_s = rng.random_range(2..5usize);
    let p_t = p_s + rng.random_range(0..3usize);
    let p = (p_t - 1) + (p_s - 1) + rng.random_range(1..3usize);
    let target = rng.random::<f64>() * 0.95 * (p_s - 1) as f64;
    let (t, s) = build_frames(p, p_t, p_s, target, seed)?;
    let mt = DVector::from_fn(p_t - 1, |_, _| rng.random_range(-3.0..3.0));
    let ms = DVector::from_fn(p_s - 1, |_, _| rng.random_range(-1.0..1.0));
    let mu = build_mu_xi(&t, &s, &mt, &ms)?;
    let sigma = rng.random_range(0.5..2.0);
    Ok((GroupGeometry::from_parts(t, s, mu)?, sigma))
}

struct Worst(f64);

impl Worst {
    fn see(&mut self, v: f64) {
        // NaN must register as a failure
        if !(v <= self.0) {
            self.0 = v;
        }
    }
}

fn check(name: &'static str, worst: f64, tolerance: f64) -> Check {
    Check {
        name,
        pass: worst <= tolerance,
        worst,
        tolerance,
    }
}

pub fn run(fault: FaultInjection) -> Result<Vec<Check>> {
    let teacher_inv = |g: &GroupGeometry, s: f64, e: f64| -> Result<DMatrix<f64>> {
        let mut m = theory::cov_teacher_inv(g, s, e)?;
        if m.nrows() > 1 {
            m[(1, 1)] += fault.teacher_inverse_offset;
        }
        Ok(m)
    };

    let (mut inv, mut tr_t, mut tr_w, mut e1) = (Worst(0.0), Worst(0.0), Worst(0.0), Worst(0.0));
    for seed in 0..GEOMETRIES {
        let (g, sigma) = random_geometry(seed)?;
        let mut rng = rng_for(seed ^ 0x5eed);
        let (et, eu, el): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());

        for (c, ci) in [
            (theory::cov_teacher(&g, sigma, et)?, teacher_inv(&g, sigma, et)?),
            (theory::cov_student(&g, sigma, eu)?, theory::cov_student_inv(&g, sigma, eu)?),
        ] {
            let k = c.nrows();
            inv.see((&ci * &c - DMatrix::identity(k, k)).amax());
        }

        let dense_t = (theory::cov_teacher(&g, sigma, et)? * teacher_inv(&g, sigma, el)?).trace();
        tr_t.see((dense_t - theory::trace_identity_teacher(&g, sigma, et, el)?).abs());

        let a = theory::cross_cov(&g, sigma, eu)?;
        let csu_inv = theory::cov_student_inv(&g, sigma, eu)?;
        let five = a.transpose()
            * &csu_inv
            * theory::cov_student(&g, sigma, et)?
            * &csu_inv
            * &a
            * teacher_inv(&g, sigma, el)?;
        tr_w.see((five.trace() - theory::trace_identity_w2s(&g, sigma, et, eu, el)?).abs());

        let mut basis = DVector::zeros(g.p_s());
        basis[0] = 1.0;
        e1.see((csu_inv * a.column(0) - basis).amax());
    }

    Ok(vec![
        check("covariance inverses", inv.0, 1e-12),
        check("teacher trace identity", tr_t.0, 1e-8),
        check("w2s trace identity", tr_w.0, 1e-8),
        check("student inverse maps A e1 to e1", e1.0, 1e-12),
        kronecker_check()?,
        gce_gradient_check()?,
    ])
}

fn kronecker_check() -> Result<Check> {
    let mut cfg = ExperimentConfig::desk_default();
    cfg.problem.d_z = 5;
    let geom = GroupGeometry::from_targets(&cfg.problem, &cfg.targets, 1)?;
    let data = sample_dataset(&cfg.problem, &geom, 0.3, 9, GroupMode::Bernoulli, 2, false, None)?;
    let mut worst = Worst(0.0);
    for (role, frame) in [(Role::Teacher, &geom.t), (Role::Student, &geom.s)] {
        let phi = features(&data, &geom, role)?;
        for i in 0..data.count() {
            let mut w = vec![1.0];
            w.extend((data.group_feats.row(i) * frame).iter());
            for k in 0..cfg.problem.d_z {
                for (j, wj) in w.iter().enumerate() {
                    let col = k * w.len() + j;
                    worst.see((phi.values[(i, col)] - data.z[(i, k)] * wj).abs());
                }
            }
        }
    }
    Ok(check("Kronecker feature layout", worst.0, 1e-12))
}

fn gce_gradient_check() -> Result<Check> {
    let mut worst = Worst(0.0);
    for (k, loss) in [Loss::Ce, Loss::Gce(0.2), Loss::Gce(0.7)].into_iter().enumerate() {
        let mut rng = rng_for(77 + k as u64);
        let x = draw_gaussian_rows(&mut rng, 10, 3);
        let labels: Vec<u8> = (0..10).map(|_| u8::from(rng.random::<bool>())).collect();
        let head = SoftmaxHead {
            weights: draw_gaussian_rows(&mut rng, 2, 3),
            bias: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
        };
        let (_, grad) = loss_and_grad(&head, &x, &labels, loss)?;
        let h = 1e-5;
        for idx in 0..6 {
            let bump = |delta: f64| -> Result<f64> {
                let mut moved = head.clone();
                moved.weights[idx] += delta;
                Ok(loss_and_grad(&moved, &x, &labels, loss)?.0)
            };
            let fd = (bump(h)? - bump(-h)?) / (2.0 * h);
            let an = grad.weights[idx];
            worst.see((fd - an).abs() / an.abs().max(1e-3));
        }
    }
    Ok(check("GCE gradient", worst.0, 1e-4))
}
