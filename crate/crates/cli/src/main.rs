mod manifest;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use w2s_core::enhanced::{self, ClassifConfig, Setting};
use w2s_core::geometry::{self, GroupGeometry};
use w2s_core::rng::{derive_seed, stream};
use w2s_core::sweep::{self, ReplicateOptions, RiskMode, SweepAxis, SweepSpec};
use w2s_core::{selfcheck, theory, Error, ExperimentConfig, GroupMode};

use manifest::{Invocation, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "w2s", version, about = "Weak-to-strong generalization laboratory")]
struct Cli {
    /// Master seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Output file (a directory for `simulate`). A manifest is written next to it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a config and the geometry it induces.
    Validate { config: PathBuf },
    /// Print the predicted risks, gain and optimal unlabeled minority fraction.
    Theory { config: PathBuf },
    /// Replicated simulations over a one-dimensional grid.
    Sweep(SweepArgs),
    /// One end-to-end replicate with a full artifact dump.
    Simulate(SimulateArgs),
    /// Weak-to-strong training of classification heads with confident-subset retraining.
    Enhance(EnhanceArgs),
    /// Run the built-in numerical oracles.
    Selfcheck {
        /// Perturb the closed-form teacher inverse by this amount.
        #[arg(long, hide = true, default_value_t = 0.0)]
        inject_fault: f64,
    },
    /// Re-run a recorded invocation.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RiskArgs {
    /// exact (population moments) or holdout (fresh test draw).
    #[arg(long, default_value = "exact")]
    risk: String,
    /// bernoulli or quota group assignment.
    #[arg(long, default_value = "bernoulli")]
    groups: String,
    #[arg(long, default_value_t = 10_000)]
    test_count: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    config: PathBuf,
    /// eta_u, nu_z, mu_S_sq or xi_frob_sq.
    #[arg(long)]
    axis: String,
    /// `a,b,c` or inclusive `start:stop:step`.
    #[arg(long)]
    grid: String,
    #[arg(long, default_value_t = 32)]
    replicates: usize,
    #[command(flatten)]
    risk: RiskArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    config: PathBuf,
    #[command(flatten)]
    risk: RiskArgs,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    /// Config file for dimensions and geometry targets; `eta_l`/`eta_u` are set by the setting.
    #[arg(long)]
    config: Option<PathBuf>,
    /// a: imbalanced labeled set; b: imbalanced unlabeled pool; both: run a and b.
    #[arg(long, default_value = "both")]
    setting: String,
    /// Selection fraction; requires `--q` and excludes `--grid`.
    #[arg(long, requires = "q", conflicts_with = "grid")]
    p: Option<f64>,
    #[arg(long, requires = "p")]
    q: Option<f64>,
    /// Full (p, q) grid with validation-based selection and ablations (the default without `--p`).
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long)]
    eta_o: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    test_count: Option<usize>,
    /// Retrain from zeros instead of the vanilla student head.
    #[arg(long)]
    cold_start: bool,
    /// Use `z⊗[1; Fᵀξ]` without the constant core coordinate.
    #[arg(long)]
    no_core_intercept: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } => 2,
            Error::Io(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn io_error(context: &str, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{context}: {e}"),
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn read_config(path: &Path) -> Outcome<(ExperimentConfig, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(&format!("cannot read {}", path.display()), e))?;
    let cfg = ExperimentConfig::parse(&text).map_err(|e| match e {
        Error::Config { line, key, message } => config_error(format!(
            "{}{}: {message}{}",
            path.display(),
            if line > 0 { format!(":{line}") } else { String::new() },
            key.map(|k| format!(" [key: {k}]")).unwrap_or_default()
        )),
        other => other.into(),
    })?;
    Ok((cfg, cfg.to_kv_string()))
}

fn risk_options(r: &RiskArgs) -> Outcome<ReplicateOptions> {
    let risk_mode: RiskMode = r.risk.parse().map_err(|e: Error| config_error(e.to_string()))?;
    let group_mode = match r.groups.as_str() {
        "bernoulli" => GroupMode::Bernoulli,
        "quota" => GroupMode::Quota,
        other => return Err(config_error(format!("unknown group mode `{other}`"))),
    };
    Ok(ReplicateOptions {
        risk_mode,
        group_mode,
        test_count: r.test_count,
    })
}

fn check_out_dir(out: &Path) -> Outcome<()> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty());
    match parent {
        Some(p) if !p.is_dir() => Err(Failure {
            code: 3,
            message: format!("output directory {} does not exist", p.display()),
        }),
        _ => Ok(()),
    }
}

/// Resolves command-line arguments into a replayable invocation.
fn resolve(cli: &Cli) -> Outcome<(Invocation, Option<String>)> {
    let seed_or = |cfg: &ExperimentConfig| cli.seed.unwrap_or(cfg.seed);
    Ok(match &cli.command {
        Command::Validate { config } => {
            let (mut cfg, text) = read_config(config)?;
            cfg.seed = seed_or(&cfg);
            (Invocation::Validate { config: cfg }, Some(text))
        }
        Command::Theory { config } => {
            let (mut cfg, text) = read_config(config)?;
            cfg.seed = seed_or(&cfg);
            (Invocation::Theory { config: cfg }, Some(text))
        }
        Command::Sweep(a) => {
            let (cfg, text) = read_config(&a.config)?;
            let axis: SweepAxis = a.axis.parse().map_err(|e: Error| config_error(e.to_string()))?;
            let grid = sweep::parse_grid(&a.grid).map_err(|e| config_error(e.to_string()))?;
            let spec = SweepSpec {
                base: cfg,
                axis,
                grid,
                replicates: a.replicates,
                master_seed: seed_or(&cfg),
                options: risk_options(&a.risk)?,
            };
            (Invocation::Sweep { spec }, Some(text))
        }
        Command::Simulate(a) => {
            let (mut cfg, text) = read_config(&a.config)?;
            cfg.seed = seed_or(&cfg);
            (
                Invocation::Simulate {
                    config: cfg,
                    options: risk_options(&a.risk)?,
                    seed: cfg.seed,
                },
                Some(text),
            )
        }
        Command::Enhance(a) => {
            let mut cfg = ClassifConfig::toy_default();
            let mut text = None;
            let mut master = cli.seed.unwrap_or(0);
            if let Some(path) = &a.config {
                let (file, t) = read_config(path)?;
                cfg.problem = file.problem;
                cfg.targets = file.targets;
                master = seed_or(&file);
                text = Some(t);
            }
            if let Some(v) = a.eta_o {
                cfg.eta_o = v;
            }
            if let Some(v) = a.epochs {
                cfg.hyper.epochs = v;
            }
            if let Some(v) = a.step {
                cfg.hyper.step = v;
            }
            if let Some(v) = a.test_count {
                cfg.test_count = v;
            }
            cfg.warm_start = !a.cold_start;
            cfg.core_intercept = !a.no_core_intercept;
            let cell = a.p.zip(a.q);
            if let Some((p, q)) = cell {
                cfg.selection = p;
                cfg.gce_q = q;
            }
            cfg.validate().map_err(|e| config_error(e.to_string()))?;
            let settings = match a.setting.as_str() {
                "both" => vec![Setting::A, Setting::B],
                s => vec![s.parse().map_err(|e: Error| config_error(e.to_string()))?],
            };
            if a.seeds == 0 {
                return Err(config_error("--seeds must be at least 1"));
            }
            (
                Invocation::Enhance {
                    config: cfg,
                    settings,
                    cell,
                    seeds: (0..a.seeds as u64).map(|i| derive_seed(master, &[i])).collect(),
                    geometry_seed: derive_seed(master, &[stream::FRAMES]),
                },
                text,
            )
        }
        Command::Selfcheck { inject_fault } => (
            Invocation::Selfcheck {
                fault_offset: *inject_fault,
            },
            None,
        ),
        Command::Replay { .. } => unreachable!("replay is resolved from its manifest"),
    })
}

/// What a command produced: the report for stdout, the file body for `--out`,
/// and whether the run counts as a success.
struct Report {
    text: String,
    json: serde_json::Value,
    file: Option<FileOutput>,
    ok: Result<(), Failure>,
}

enum FileOutput {
    Text(String),
    Directory(Vec<(String, String)>),
}

fn geometry_for(cfg: &ExperimentConfig) -> Outcome<GroupGeometry> {
    Ok(GroupGeometry::from_targets(
        &cfg.problem,
        &cfg.targets,
        derive_seed(cfg.seed, &[stream::FRAMES]),
    )?)
}

fn execute(inv: &Invocation) -> Outcome<Report> {
    match inv {
        Invocation::Validate { config } => {
            let geom = geometry_for(config)?;
            let report = geometry::validate(&config.problem, &geom);
            let mut text = String::new();
            if report.is_valid() {
                text.push_str("valid\n");
            }
            for issue in &report.issues {
                let _ = writeln!(text, "invalid: {issue}");
            }
            let ok = if report.is_valid() {
                Ok(())
            } else {
                Err(config_error(format!("{} invariant(s) violated", report.issues.len())))
            };
            Ok(Report {
                json: json!({ "valid": report.is_valid(), "issues": report.issues }),
                file: Some(FileOutput::Text(text.clone())),
                text,
                ok,
            })
        }
        Invocation::Theory { config } => {
            let geom = geometry_for(config)?;
            let c = &config.problem;
            let pred = theory::w2s_risk(c, &geom)?;
            let star = theory::optimal_eta_u(c, &geom);
            let failure = theory::failure_criterion(c, &geom)?;
            let mut text = String::new();
            let _ = writeln!(text, "gamma_z        {}", c.gamma_z());
            let _ = writeln!(text, "nu_z           {}", c.nu_z());
            let _ = writeln!(text, "p_wedge        {}", geom.p_wedge);
            let _ = writeln!(text, "cross_term     {}", geom.cross_term());
            let _ = writeln!(text, "teacher_risk   {}", pred.teacher_risk);
            let _ = writeln!(text, "  V_T0         {}", pred.v_t0);
            let _ = writeln!(text, "  V_T1         {}", pred.v_t1);
            let _ = writeln!(text, "student_risk   {}", pred.student_risk);
            let _ = writeln!(text, "  V_S0         {}", pred.v_s0);
            let _ = writeln!(text, "  V_S1         {}", pred.v_s1);
            let _ = writeln!(text, "  E_S          {}", pred.e_s);
            let _ = writeln!(text, "gain           {}", pred.gain);
            match &star {
                Ok(s) => {
                    let _ = writeln!(
                        text,
                        "eta_u_star     {}{}",
                        s.value,
                        if s.in_range { String::new() } else { format!(" (outside [0, 0.5]; clamped {})", s.clamped) }
                    );
                }
                Err(e) => {
                    let _ = writeln!(text, "eta_u_star     undefined ({e})");
                }
            }
            if let Some(t) = failure.threshold {
                let _ = writeln!(
                    text,
                    "failure        separation {} vs threshold {} (negative for all nu_z: {})",
                    failure.separation, t, failure.condition_applies
                );
            }
            let star_json = match &star {
                Ok(s) => serde_json::to_value(s).unwrap_or_default(),
                Err(e) => json!({ "error": e.to_string() }),
            };
            Ok(Report {
                json: json!({
                    "gamma_z": c.gamma_z(),
                    "nu_z": c.nu_z(),
                    "p_wedge": geom.p_wedge,
                    "cross_term": geom.cross_term(),
                    "prediction": pred,
                    "eta_u_star": star_json,
                    "failure": failure,
                }),
                file: Some(FileOutput::Text(text.clone())),
                text,
                ok: Ok(()),
            })
        }
        Invocation::Sweep { spec } => {
            let result = sweep::run_sweep(spec)?;
            let errors = result.rows.iter().filter(|r| r.error.is_some()).count();
            let mut text = String::new();
            for r in &result.rows {
                match &r.error {
                    None => {
                        let _ = writeln!(
                            text,
                            "{} = {}: gain {:.6} ± {:.6} (theory {:.6}, {} replicates)",
                            r.axis, r.value, r.emp_gain_mean, r.emp_gain_se, r.theory_gain, r.replicates
                        );
                    }
                    Some(e) => {
                        let _ = writeln!(text, "{} = {}: error: {e}", r.axis, r.value);
                    }
                }
            }
            let csv = result.to_csv();
            Ok(Report {
                json: serde_json::to_value(&result).unwrap_or_default(),
                file: Some(FileOutput::Text(csv)),
                text,
                ok: if errors == result.rows.len() {
                    Err(Failure {
                        code: 1,
                        message: "every grid point failed".into(),
                    })
                } else {
                    Ok(())
                },
            })
        }
        Invocation::Simulate { config, options, seed } => {
            let geom = geometry_for(config)?;
            let art = sweep::run_replicate_full(&config.problem, &geom, *seed, options)?;
            let pred = theory::w2s_risk(&config.problem, &geom)?;
            let o = art.outcome;
            let summary = json!({
                "seed": seed,
                "teacher_risk": o.teacher_risk,
                "student_risk": o.student_risk,
                "gain": o.gain,
                "theory": pred,
                "teacher_diagnostics": art.teacher.diagnostics,
                "student_diagnostics": art.student.diagnostics,
            });
            let text = format!(
                "teacher_risk {}\nstudent_risk {}\ngain {}\ntheory_gain {}\n",
                o.teacher_risk, o.student_risk, o.gain, pred.gain
            );
            let files = vec![
                ("config.txt".to_string(), config.to_kv_string()),
                ("geometry.txt".to_string(), geom.to_container().to_text()),
                ("labeled.txt".to_string(), art.labeled.to_container().to_text()),
                ("unlabeled.txt".to_string(), art.unlabeled.to_container().to_text()),
                ("teacher.json".to_string(), pretty(&art.teacher)),
                ("student.json".to_string(), pretty(&art.student)),
                ("summary.json".to_string(), pretty(&summary)),
            ];
            Ok(Report {
                json: summary,
                file: Some(FileOutput::Directory(files)),
                text,
                ok: Ok(()),
            })
        }
        Invocation::Enhance {
            config,
            settings,
            cell,
            seeds,
            geometry_seed,
        } => {
            let geom = GroupGeometry::from_targets(&config.problem, &config.targets, *geometry_seed)?;
            let mut text = String::new();
            let (rows, json) = match cell {
                Some((p, q)) => {
                    let mut rows = Vec::new();
                    for &s in settings {
                        rows.extend(enhanced::enhanced_pipeline(config, s, &geom, *p, *q, seeds)?);
                    }
                    if enhanced::is_vanilla_equivalent(*p, *q) {
                        text.push_str("note: (p, q) = (1, 0) is vanilla-equivalent\n");
                    }
                    let json = serde_json::to_value(&rows).unwrap_or_default();
                    (rows, json)
                }
                None => {
                    let report = enhanced::ablation_grid(config, &geom, settings, seeds)?;
                    for s in &report.settings {
                        let _ = writeln!(
                            text,
                            "setting {}: mean WGA teacher {:.4} vanilla {:.4} enhanced {:.4} CE-only {:.4} full-data {:.4}; \
                             enhanced beats vanilla in {}/{} seeds; subset minority below pool in {}/{}",
                            s.setting,
                            s.mean_teacher_wga,
                            s.mean_vanilla_wga,
                            s.mean_best_wga,
                            s.mean_ce_only_wga,
                            s.mean_full_data_wga,
                            s.best_beats_vanilla,
                            s.seeds.len(),
                            s.subset_below_pool,
                            s.seeds.len()
                        );
                    }
                    let json = serde_json::to_value(&report.settings).unwrap_or_default();
                    (report.rows, json)
                }
            };
            if text.is_empty() {
                for r in &rows {
                    let _ = writeln!(
                        text,
                        "setting {} seed {}: WGA teacher {:.4} vanilla {:.4} enhanced {:.4}",
                        r.setting, r.seed, r.teacher.worst_group, r.vanilla.worst_group, r.enhanced.worst_group
                    );
                }
            }
            Ok(Report {
                json,
                file: Some(FileOutput::Text(enhanced::rows_to_csv(&rows))),
                text,
                ok: Ok(()),
            })
        }
        Invocation::Selfcheck { fault_offset } => {
            let checks = selfcheck::run(selfcheck::FaultInjection {
                teacher_inverse_offset: *fault_offset,
            })?;
            let mut text = String::new();
            for c in &checks {
                let _ = writeln!(
                    text,
                    "{} {} (worst {:e}, tolerance {:e})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.worst,
                    c.tolerance
                );
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            Ok(Report {
                json: json!({ "checks": checks, "passed": failed == 0 }),
                file: Some(FileOutput::Text(text.clone())),
                text,
                ok: if failed == 0 {
                    Ok(())
                } else {
                    Err(Failure {
                        code: 1,
                        message: format!("{failed} check(s) failed"),
                    })
                },
            })
        }
    }
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default() + "\n"
}

fn write_outputs(file: &FileOutput, out: &Path) -> Outcome<Vec<String>> {
    let ctx = |p: &Path| format!("cannot write {}", p.display());
    match file {
        FileOutput::Text(body) => {
            std::fs::write(out, body).map_err(|e| io_error(&ctx(out), e))?;
            Ok(vec![out.display().to_string()])
        }
        FileOutput::Directory(files) => {
            if !out.is_dir() {
                std::fs::create_dir(out).map_err(|e| io_error(&ctx(out), e))?;
            }
            let mut written = Vec::new();
            for (name, body) in files {
                let path = out.join(name);
                std::fs::write(&path, body).map_err(|e| io_error(&ctx(&path), e))?;
                written.push(path.display().to_string());
            }
            Ok(written)
        }
    }
}

fn master_seed(inv: &Invocation) -> u64 {
    match inv {
        Invocation::Validate { config } | Invocation::Theory { config } => config.seed,
        Invocation::Sweep { spec } => spec.master_seed,
        Invocation::Simulate { seed, .. } => *seed,
        Invocation::Enhance { geometry_seed, .. } => *geometry_seed,
        Invocation::Selfcheck { .. } => 0,
    }
}

fn run(cli: &Cli) -> Outcome<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(config_error("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure {
                code: 1,
                message: format!("cannot start worker pool: {e}"),
            })?;
    }
    if let Some(out) = &cli.out {
        check_out_dir(out)?;
    }
    let started = manifest::now_unix();
    let (inv, config_text) = match &cli.command {
        Command::Replay { manifest: path } => {
            let m = manifest::read(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::InvalidData => config_error(format!("malformed manifest {}: {e}", path.display())),
                _ => io_error(&format!("cannot read {}", path.display()), e),
            })?;
            (m.invocation, m.config_text)
        }
        _ => resolve(cli)?,
    };

    let report = execute(&inv)?;
    let mut stdout = std::io::stdout().lock();
    let shown = if cli.json {
        serde_json::to_string_pretty(&report.json).unwrap_or_default() + "\n"
    } else {
        match (&cli.out, &report.file) {
            // without --out, CSV-producing commands print the CSV itself
            (None, Some(FileOutput::Text(body))) if matches!(inv, Invocation::Sweep { .. } | Invocation::Enhance { .. }) => {
                body.clone()
            }
            _ => report.text.clone(),
        }
    };
    let _ = stdout.write_all(shown.as_bytes());
    if let (Some(out), Some(file)) = (&cli.out, &report.file) {
        let outputs = write_outputs(file, out)?;
        let m = RunManifest {
            subcommand: inv.name().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: master_seed(&inv),
            config_text,
            invocation: inv.clone(),
            started_unix: started,
            finished_unix: manifest::now_unix(),
            outputs,
        };
        manifest::write(&m, out).map_err(|e| io_error("cannot write manifest", e))?;
    }
    report.ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
