//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use w2s_core::enhanced::{self, ClassifConfig, Setting};
use w2s_core::geometry::spectral_norm;
use w2s_core::rng::{derive_seed, stream};
use w2s_core::selfcheck::random_geometry;
use w2s_core::sweep::{self, mean_se, ReplicateOptions, SweepAxis, SweepResult, SweepSpec};
use w2s_core::synth_data::{empirical_cross_cov, empirical_group_cov, sample_dataset};
use w2s_core::{theory, ExperimentConfig, GroupGeometry, GroupMode, ProblemConfig, Role};

const MASTER: u64 = 20_250_601;
const REPLICATES: usize = 32;
const NU_GRID: [f64; 3] = [0.02, 0.05, 0.1];

struct Verdict {
    pass: bool,
    summary: String,
}

fn verdict(pass: bool, summary: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        summary: summary.into(),
    }
}

fn frames_seed(tag: u64) -> u64 {
    derive_seed(MASTER, &[stream::FRAMES, tag])
}

fn with_ratio(mut cfg: ExperimentConfig, nu: f64) -> ExperimentConfig {
    cfg.problem.n_unlabeled = ProblemConfig::count_for_ratio(cfg.problem.d_z, nu);
    cfg
}

fn criterion_1() -> Verdict {
    let (mut inv, mut tr_t, mut tr_w, mut e1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let geometries = 128;
    for seed in 0..geometries {
        let (g, sigma) = random_geometry(derive_seed(MASTER, &[1, seed])).expect("geometry");
        let etas: Vec<f64> = (0..3).map(|k| (derive_seed(seed, &[k]) % 10_000) as f64 / 10_000.0).collect();
        let (et, eu, el) = (etas[0], etas[1], etas[2]);
        let ct = |e| theory::cov_teacher(&g, sigma, e).unwrap();
        let cs = |e| theory::cov_student(&g, sigma, e).unwrap();
        for (c, ci) in [
            (ct(et), theory::cov_teacher_inv(&g, sigma, et).unwrap()),
            (cs(eu), theory::cov_student_inv(&g, sigma, eu).unwrap()),
        ] {
            let k = c.nrows();
            inv = inv.max((&c * &ci - DMatrix::identity(k, k)).amax());
            inv = inv.max((&ci * &c - DMatrix::identity(k, k)).amax());
        }
        // dense LU inverses throughout, independent of the closed forms
        let dense_inv = |m: DMatrix<f64>| m.lu().try_inverse().expect("invertible");
        let ct_l_inv = dense_inv(ct(el));
        tr_t = tr_t.max(((ct(et) * &ct_l_inv).trace() - theory::trace_identity_teacher(&g, sigma, et, el).unwrap()).abs());
        let a = theory::cross_cov(&g, sigma, eu).unwrap();
        let cs_u_inv = dense_inv(cs(eu));
        let five = a.transpose() * &cs_u_inv * cs(et) * &cs_u_inv * &a * &ct_l_inv;
        tr_w = tr_w.max((five.trace() - theory::trace_identity_w2s(&g, sigma, et, eu, el).unwrap()).abs());
        let mut basis = DVector::zeros(g.p_s());
        basis[0] = 1.0;
        let closed = theory::cov_student_inv(&g, sigma, eu).unwrap();
        e1 = e1.max((closed * a.column(0) - basis).amax());
    }
    verdict(
        inv <= 1e-12 && tr_t <= 1e-8 && tr_w <= 1e-8 && e1 <= 1e-12,
        format!(
            "{geometries} geometries; inverse {inv:.1e} (tol 1e-12), teacher trace {tr_t:.1e} (1e-8), \
             w2s trace {tr_w:.1e} (1e-8), C_S^-1 A e1 {e1:.1e} (1e-12)"
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut lines = Vec::new();
    let mut all = true;
    let cells = [(0.1, 0.1), (0.1, 0.5), (0.5, 0.1), (0.5, 0.5)];
    for (gi, &(el, et)) in cells.iter().enumerate() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.problem.eta_l = el;
        cfg.problem.eta_t = et;
        let geom = GroupGeometry::from_targets(&cfg.problem, &cfg.targets, frames_seed(2)).unwrap();
        let risks: Vec<f64> = (0..REPLICATES)
            .into_par_iter()
            .map(|r| {
                sweep::run_teacher_replicate(
                    &cfg.problem,
                    &geom,
                    derive_seed(MASTER, &[2, gi as u64, r as u64]),
                    &ReplicateOptions::default(),
                )
                .expect("teacher replicate")
            })
            .collect();
        let (mean, se) = mean_se(&risks);
        let theory = theory::sft_risk(&cfg.problem, &geom).unwrap();
        let allowed = (3.0 * se).max(0.05 * theory);
        let ok = (mean - theory).abs() <= allowed;
        all &= ok;
        lines.push(format!(
            "({el}, {et}): {mean:.4} ± {se:.4} vs {theory:.4} [{}]",
            if ok { "ok" } else { "off" }
        ));
    }
    verdict(all, lines.join("; "))
}

fn fig1_sweeps() -> Vec<((f64, f64), f64, SweepResult, f64)> {
    let panels = [(0.1, 0.5), (0.1, 1.0), (0.5, 0.5), (0.5, 1.0)];
    let mut out = Vec::new();
    for (pi, &(el, et)) in panels.iter().enumerate() {
        for (ni, &nu) in NU_GRID.iter().enumerate() {
            let mut base = with_ratio(ExperimentConfig::desk_default(), nu);
            base.problem.eta_l = el;
            base.problem.eta_t = et;
            base.targets.xi_frob_sq = 0.1 * base.problem.p_s as f64;
            let spec = SweepSpec {
                base,
                axis: SweepAxis::EtaU,
                grid: sweep::parse_grid("0:0.5:0.05").unwrap(),
                replicates: REPLICATES,
                master_seed: derive_seed(MASTER, &[3, pi as u64, ni as u64]),
                options: ReplicateOptions::default(),
            };
            let geom = GroupGeometry::from_targets(
                &base.problem,
                &base.targets,
                derive_seed(spec.master_seed, &[stream::FRAMES]),
            )
            .unwrap();
            let star = theory::optimal_eta_u(&base.problem, &geom).unwrap().clamped;
            out.push(((el, et), nu, sweep::run_sweep(&spec).expect("sweep"), star));
        }
    }
    out
}

fn criterion_3() -> Verdict {
    let sweeps = fig1_sweeps();
    let cfg = ExperimentConfig::desk_default().problem;
    let abs_tol = 0.15 * cfg.sigma_y.powi(2) * cfg.gamma_z() * cfg.p_t as f64;

    let (mut rows, mut within) = (0, 0);
    for (_, _, res, _) in &sweeps {
        let rep = sweep::compare_to_theory(res, abs_tol).unwrap();
        rows += rep.rows.len();
        within += rep.passed;
    }
    let frac = within as f64 / rows as f64;
    let part_i = frac >= 0.9;

    let mut argmax_notes = Vec::new();
    let mut part_ii = true;
    for ((el, et), nu, res, star) in &sweeps {
        if *el != 0.1 {
            continue;
        }
        let best = res
            .rows
            .iter()
            .max_by(|a, b| a.emp_gain_mean.total_cmp(&b.emp_gain_mean))
            .unwrap()
            .value;
        let ok = (best - star).abs() <= 0.05 + 1e-9;
        part_ii &= ok;
        argmax_notes.push(format!("η_t={et} ν={nu}: argmax {best} vs η_u⋆ {star:.3}"));
    }

    let mut part_iii = true;
    let mut mono_notes = Vec::new();
    for chunk in sweeps.chunks(NU_GRID.len()) {
        let star = chunk[0].3;
        let gains: Vec<f64> = chunk
            .iter()
            .map(|(_, _, res, _)| {
                let row = res
                    .rows
                    .iter()
                    .min_by(|a, b| (a.value - star).abs().total_cmp(&(b.value - star).abs()))
                    .unwrap();
                row.emp_gain_mean.abs()
            })
            .collect();
        let ok = gains.windows(2).all(|w| w[1] < w[0]);
        part_iii &= ok;
        mono_notes.push(format!(
            "({}, {}): |gain| {}",
            chunk[0].0 .0,
            chunk[0].0 .1,
            gains.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>().join(" > ")
        ));
    }

    verdict(
        part_i && part_ii && part_iii,
        format!(
            "(i) {within}/{rows} rows within max(3se, {abs_tol:.4}) = {:.1}% [{}]; (ii) [{}] {}; (iii) [{}] {}",
            100.0 * frac,
            if part_i { "ok" } else { "off" },
            if part_ii { "ok" } else { "off" },
            argmax_notes.join(", "),
            if part_iii { "ok" } else { "off" },
            mono_notes.join(", ")
        ),
    )
}

fn sign_point(separation: f64, nu: f64, tag: u64) -> (f64, f64, f64) {
    let mut cfg = with_ratio(ExperimentConfig::desk_default(), nu);
    cfg.problem.eta_l = 0.4;
    cfg.problem.eta_u = 0.1;
    cfg.problem.eta_t = 0.5;
    cfg.targets.xi_frob_sq = 0.0;
    cfg.targets.mu_t_sq = separation * cfg.problem.sigma_xi.powi(2);
    let spec = SweepSpec {
        base: cfg,
        axis: SweepAxis::EtaU,
        grid: vec![0.1],
        replicates: REPLICATES,
        master_seed: derive_seed(MASTER, &[4, tag]),
        options: ReplicateOptions::default(),
    };
    let row = sweep::run_sweep(&spec).expect("sweep").rows.remove(0);
    (row.theory_gain, row.emp_gain_mean, row.emp_gain_se)
}

fn criterion_4() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for (k, &nu) in NU_GRID.iter().enumerate() {
        let (t, m, se) = sign_point(30.0, nu, k as u64);
        let good = t < 0.0 && m < -2.0 * se;
        ok &= good;
        notes.push(format!("30 @ ν={nu}: theory {t:.4}, emp {m:.4} ± {se:.4} [{}]", if good { "ok" } else { "off" }));
    }
    let (t, m, se) = sign_point(20.0, 0.02, 10);
    let good = t > 0.0 && m > 2.0 * se;
    ok &= good;
    notes.push(format!("20 @ ν=0.02: theory {t:.4}, emp {m:.4} ± {se:.4} [{}]", if good { "ok" } else { "off" }));
    verdict(ok, notes.join("; "))
}

fn criterion_5() -> Verdict {
    let base = with_ratio(ExperimentConfig::desk_default(), 0.04);
    let spec = SweepSpec {
        base,
        axis: SweepAxis::XiFrobSq,
        grid: vec![0.0, 0.2, 0.4, 0.6, 0.8],
        replicates: REPLICATES,
        master_seed: derive_seed(MASTER, &[5]),
        options: ReplicateOptions::default(),
    };
    let res = sweep::run_sweep(&spec).expect("sweep");
    let r = &res.rows;
    let theory_ok = r.windows(2).all(|w| w[1].theory_gain <= w[0].theory_gain);
    let emp_ok = r.windows(2).all(|w| {
        let slack = 2.0 * (w[0].emp_gain_se.powi(2) + w[1].emp_gain_se.powi(2)).sqrt();
        w[1].emp_gain_mean <= w[0].emp_gain_mean + slack
    });
    let listing: Vec<String> = r
        .iter()
        .map(|x| format!("{}: {:.4} ({:.4} ± {:.4})", x.value, x.theory_gain, x.emp_gain_mean, x.emp_gain_se))
        .collect();
    verdict(
        theory_ok && emp_ok,
        format!(
            "theory nonincreasing [{}], empirical within 2se [{}]; ‖Ξ‖²: theory (emp) {}",
            if theory_ok { "ok" } else { "off" },
            if emp_ok { "ok" } else { "off" },
            listing.join(", ")
        ),
    )
}

fn criterion_6() -> Verdict {
    let cfg = ClassifConfig::toy_default();
    let geom = GroupGeometry::from_targets(&cfg.problem, &cfg.targets, frames_seed(6)).unwrap();
    let seeds: Vec<u64> = (0..10).map(|i| derive_seed(MASTER, &[6, i])).collect();
    let report = enhanced::ablation_grid(&cfg, &geom, &[Setting::A, Setting::B], &seeds).expect("grid");
    let mut ok = true;
    let mut notes = Vec::new();
    for s in &report.settings {
        let wins = s.best_beats_vanilla >= 8;
        let vs_ce = s.mean_best_wga > s.mean_ce_only_wga;
        let vs_full = s.mean_best_wga > s.mean_full_data_wga;
        let mut good = wins && vs_ce && vs_full;
        let mut extra = String::new();
        if s.setting == Setting::A {
            good &= s.subset_below_pool >= 8;
            extra = format!(", subset minority below pool {}/10", s.subset_below_pool);
        }
        ok &= good;
        notes.push(format!(
            "setting {}: beats vanilla {}/10, mean WGA enhanced {:.4} vs vanilla {:.4}, CE-only {:.4}, p=1 {:.4}{extra} [{}]",
            s.setting,
            s.best_beats_vanilla,
            s.mean_best_wga,
            s.mean_vanilla_wga,
            s.mean_ce_only_wga,
            s.mean_full_data_wga,
            if good { "ok" } else { "off" }
        ));
    }
    verdict(ok, notes.join("; "))
}

fn criterion_7() -> Verdict {
    let cfg = ExperimentConfig::desk_default();
    let geom = GroupGeometry::from_targets(&cfg.problem, &cfg.targets, frames_seed(7)).unwrap();
    let eta = 0.3;
    let s = cfg.problem.sigma_xi;
    let displayed = (theory::cov_teacher(&geom, s, eta).unwrap(), theory::cross_cov(&geom, s, eta).unwrap());
    let mixture = (
        theory::mixture_moment(&geom.mu_t, s, eta).unwrap(),
        theory::mixture_cross_moment(&geom, s, eta).unwrap(),
    );
    let counts = [256, 1024, 4096];
    let (mut shown_ok, mut mixture_ok) = (0, 0);
    let mut last_devs = String::new();
    for seed in 0..10u64 {
        let devs: Vec<[f64; 4]> = counts
            .iter()
            .map(|&n| {
                let d = sample_dataset(
                    &cfg.problem,
                    &geom,
                    eta,
                    n,
                    GroupMode::Bernoulli,
                    derive_seed(MASTER, &[7, seed, n as u64]),
                    false,
                    None,
                )
                .unwrap();
                let c = empirical_group_cov(&d, &geom, Role::Teacher).unwrap();
                let a = empirical_cross_cov(&d, &geom).unwrap();
                [
                    spectral_norm(&(&c - &displayed.0)),
                    spectral_norm(&(&a - &displayed.1)),
                    spectral_norm(&(&c - &mixture.0)),
                    spectral_norm(&(&a - &mixture.1)),
                ]
            })
            .collect();
        let decreasing = |k: usize| devs.windows(2).all(|w| w[1][k] < w[0][k]);
        shown_ok += usize::from(decreasing(0) && decreasing(1));
        mixture_ok += usize::from(decreasing(2) && decreasing(3));
        last_devs = devs.iter().map(|d| format!("{:.3}/{:.3}", d[0], d[1])).collect::<Vec<_>>().join(" → ");
    }
    verdict(
        shown_ok >= 9,
        format!(
            "monotone vs C_T(η)/A(η) in {shown_ok}/10 seeds (last seed ‖ΔC‖₂/‖ΔA‖₂ {last_devs}); \
             vs mixture second moments in {mixture_ok}/10"
        ),
    )
}

fn criterion_8() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_w2s");
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::desk_default();
    cfg.problem.d_z = 32;
    cfg.problem.n = 400;
    cfg.problem.n_unlabeled = 1000;
    let conf = dir.path().join("small.conf");
    std::fs::write(&conf, cfg.to_kv_string()).unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().expect("spawn");
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let conf = conf.to_str().unwrap();

    run(&["--out", &path("s.csv"), "sweep", conf, "--axis", "eta_u", "--grid", "0:0.5:0.1", "--replicates", "4"]);
    run(&["--out", &path("s2.csv"), "replay", "--manifest", &path("s.csv.manifest.json")]);
    run(&[
        "--out", &path("e.csv"), "enhance", "--config", conf, "--p", "0.4", "--q", "0.7", "--seeds", "2", "--epochs", "30",
        "--test-count", "500",
    ]);
    run(&["--out", &path("e2.csv"), "replay", "--manifest", &path("e.csv.manifest.json")]);
    let same = |a: &str, b: &str| std::fs::read(path(a)).unwrap() == std::fs::read(path(b)).unwrap();
    let (s, e) = (same("s.csv", "s2.csv"), same("e.csv", "e2.csv"));
    verdict(
        s && e,
        format!("sweep replay byte-identical: {s}; enhance replay byte-identical: {e}"),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Verdict); 8] = [
        (1, "closed-form oracle suite", criterion_1),
        (2, "teacher risk at desk scale", criterion_2),
        (3, "gain curves over eta_u", criterion_3),
        (4, "negative-gain sign test", criterion_4),
        (5, "gain monotone in similarity", criterion_5),
        (6, "enhanced retraining properties", criterion_6),
        (7, "covariance concentration", criterion_7),
        (8, "manifest replay determinism", criterion_8),
    ];
    let mut failed = 0;
    for (k, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&k) {
            continue;
        }
        let t = Instant::now();
        let v = f();
        failed += usize::from(!v.pass);
        println!(
            "{} criterion {k} ({name}) [{:.1}s]: {}",
            if v.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            v.summary
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criterion(s) failed");
        ExitCode::FAILURE
    }
}
