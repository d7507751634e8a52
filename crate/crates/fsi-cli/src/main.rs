//! `fsi`: command-line driver for the koiter-fsi simulator.
//!
//! Exit status: 0 on success, 1 on any failure, 2 when a run halts on a
//! degenerate shell configuration.

use clap::{Parser, Subcommand};
use koiter_fsi::config::RunConfig;
use koiter_fsi::coupling::{initialize, run, total_energy, Problem, RunOutcome, RunState};
use koiter_fsi::diagnostics_io::{
    compactness_gap, convergence_study, fitted_order, gnuplot_columns, ledger_to_csv, read_checkpoint, run_meta,
    study_table, write_checkpoint, write_csv, Checkpoint, ReplicaResult, StudyRow,
};
use koiter_fsi::fluid_solver::{exterior_mass, preimage_distances, FluidState};
use koiter_fsi::pressure::audit_hypotheses;
use koiter_fsi::shell_energy::{
    coercivity_check, discrete_koiter_derivative, koiter_derivative, koiter_energy, ElasticityParams,
};
use koiter_fsi::structure_solver::{admissibility, advance_window, LaggedTrace, ShellState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

#[derive(Parser, Debug)]
#[command(name = "fsi", version, about = "Compressible two-fluid flow coupled to a Koiter shell")]
struct Cli {
    /// Configuration file (sectioned key = value); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `[output] dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for randomized initial data and property samples.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of windows (overrides `t_end`).
    #[arg(long, global = true)]
    windows: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run windows until `t_end` or a degeneracy halt.
    Run,
    /// Audit the pressure law against the growth and monotonicity hypotheses.
    CheckPressure {
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 4.0)]
        rho_max: f64,
    },
    /// Check the Koiter energy identities and emit a free shell energy curve.
    ShellDemo {
        #[arg(long, default_value_t = 20)]
        pairs: usize,
    },
    /// Sweep the window length and tabulate mismatch, slack and leakage.
    ConvergenceStudy {
        /// Window lengths (default: tau, tau/2, tau/4 of the config).
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
    },
    /// Reload a checkpoint and re-check the state invariants.
    VerifyInvariants {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Failure with a message, or a degeneracy halt.
enum Failure {
    Error(String),
    Degenerate(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Error(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

struct Setup {
    text: String,
    config: RunConfig,
    out: PathBuf,
}

fn load(cli: &Cli) -> Result<Setup, Failure> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Error(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut config = RunConfig::parse(&text).map_err(|errs| {
        let mut msg = String::from("invalid configuration:");
        for e in errs {
            msg.push_str("\n  ");
            msg.push_str(&e);
        }
        Failure::Error(msg)
    })?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(w) = cli.windows {
        config.scheme.t_end = w as f64 * config.scheme.tau;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir));
    Ok(Setup { text, config, out })
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Error(format!("{}: {e}", path.display())))
}

fn checkpoint_of(problem: &Problem, state: &RunState) -> Checkpoint {
    Checkpoint {
        window: state.window,
        tau: problem.scheme.tau,
        time: state.time,
        grid: problem.grid.clone(),
        shell_grid: problem.geom.grid,
        fluid: state.fluid.clone(),
        eta: state.shell.eta.clone(),
        w: state.shell.w.clone(),
    }
}

fn cmd_run(cli: &Cli) -> Outcome {
    let s = load(cli)?;
    fs::create_dir_all(&s.out)?;
    write(&s.out.join("run.meta"), &run_meta(&s.text, s.config.seed))?;
    let (problem, data) = s.config.build().map_err(Failure::Error)?;
    let mut state = initialize(&problem, &data)?;
    let windows = problem.scheme.windows();
    println!("{} windows of tau = {:e}, scenario {}", windows, problem.scheme.tau, s.config.initial.scenario.name());
    let result = run(&problem, &mut state, windows);
    write(&s.out.join("ledger.csv"), &ledger_to_csv(&state.ledger.rows)?)?;
    let snap = total_energy(&state);
    match result {
        Ok(summary) => {
            println!(
                "windows {} fluid steps {} worst relative slack {:.3e} max leak {:.3e}",
                summary.windows, summary.fluid_steps, summary.worst_relative_slack, state.ledger.leak_max
            );
            println!("energy: left {:.12e} right {:.12e} total {:.12e}", snap.left, snap.right, snap.total);
            match summary.outcome {
                RunOutcome::Completed => {
                    write(&s.out.join("checkpoint.txt"), &write_checkpoint(&checkpoint_of(&problem, &state)))?;
                    Ok(())
                }
                RunOutcome::Degenerate { window, kind } => {
                    write(&s.out.join("checkpoint.txt"), &write_checkpoint(&checkpoint_of(&problem, &state)))?;
                    Err(Failure::Degenerate(format!("halted after window {window}: {kind}")))
                }
            }
        }
        Err(e) => {
            write(&s.out.join("checkpoint.txt"), &write_checkpoint(&checkpoint_of(&problem, &state)))?;
            Err(e.into())
        }
    }
}

fn cmd_check_pressure(cli: &Cli, samples: usize, rho_max: f64) -> Outcome {
    let s = load(cli)?;
    let report = audit_hypotheses(&s.config.pressure, samples, rho_max);
    print!("{}", report.to_text());
    if cli.out.is_some() {
        fs::create_dir_all(&s.out)?;
        let mut buf = Vec::new();
        write_csv(&report.rows, &mut buf)?;
        fs::write(s.out.join("pressure_audit.csv"), buf)?;
    }
    Ok(())
}

fn random_field(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()
}

fn cmd_shell_demo(cli: &Cli, pairs: usize) -> Outcome {
    let s = load(cli)?;
    let (problem, data) = s.config.build().map_err(Failure::Error)?;
    let geom = &problem.geom;
    let params = problem.structure_params();
    let elastic = ElasticityParams { delta_reg: 0.0, ..params.elastic };
    let n = geom.grid.len();
    let amp = 0.1 * geom.band.width();
    let mut rng = ChaCha8Rng::seed_from_u64(s.config.seed);
    let mut worst_tel: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    let mut coercive = true;
    for _ in 0..pairs {
        let eta = random_field(&mut rng, n, amp);
        let prev = random_field(&mut rng, n, amp);
        let diff: Vec<f64> = eta.iter().zip(&prev).map(|(a, b)| a - b).collect();
        let (k1, k0) = (koiter_energy(geom, &eta, &elastic), koiter_energy(geom, &prev, &elastic));
        let pairing = discrete_koiter_derivative(geom, &eta, &prev, &diff, &elastic);
        worst_tel = worst_tel.max((pairing - (k1 - k0)).abs() / (1.0 + k1.abs() + k0.abs()));
        let b = random_field(&mut rng, n, 1.0);
        let h = 1e-6 * amp;
        let shifted = |sign: f64| -> Vec<f64> { eta.iter().zip(&b).map(|(e, d)| e + sign * h * d).collect() };
        let fd = (koiter_energy(geom, &shifted(1.0), &elastic) - koiter_energy(geom, &shifted(-1.0), &elastic)) / (2.0 * h);
        let an = koiter_derivative(geom, &eta, &b, &elastic);
        worst_fd = worst_fd.max((fd - an).abs() / an.abs().max(1e-300));
        coercive &= coercivity_check(geom, &eta, &elastic).holds();
    }
    println!("telescoping: worst scaled defect {worst_tel:.3e} over {pairs} pairs");
    println!("derivative vs central differences: worst relative error {worst_fd:.3e}");
    println!("coercivity bound: {}", if coercive { "holds" } else { "FAILS" });

    // Free shell from the scenario's initial displacement (no fluid trace).
    let mut shell = ShellState::new(data.eta0.clone(), data.eta1.clone());
    let lagged = LaggedTrace::constant(vec![0.0; n]);
    let windows = problem.scheme.windows().min(200);
    let (mut t, mut kin, mut koi, mut slack) = (vec![], vec![], vec![], vec![]);
    for w in 0..windows {
        let out = advance_window(geom, &shell, &lagged, &params, w as f64 * params.tau)?;
        for r in &out.records {
            t.push(r.t);
            kin.push(r.kinetic_shell);
            koi.push(r.koiter + r.koiter_reg);
            slack.push(r.relative_slack());
        }
        shell = out.state;
    }
    let worst = slack.iter().copied().fold(f64::INFINITY, f64::min);
    println!("free shell: {} sub-steps, worst relative sub-step slack {worst:.3e}", t.len());
    if cli.out.is_some() {
        fs::create_dir_all(&s.out)?;
        write(&s.out.join("shell_kinetic.dat"), &gnuplot_columns(&t, &kin))?;
        write(&s.out.join("shell_koiter.dat"), &gnuplot_columns(&t, &koi))?;
    }
    if worst_tel > 1e-11 || worst_fd > 1e-4 || !coercive || worst < -1e-9 {
        return Err(Failure::Error("shell property suite failed".into()));
    }
    Ok(())
}

fn cmd_convergence_study(cli: &Cli, sweep: &[f64]) -> Outcome {
    let s = load(cli)?;
    let tau0 = s.config.scheme.tau;
    let sweep: Vec<f64> = if sweep.is_empty() { vec![tau0, tau0 / 2.0, tau0 / 4.0] } else { sweep.to_vec() };
    let horizon = s.config.scheme.windows() as f64 * tau0;
    let finals: Mutex<Vec<(f64, FluidState)>> = Mutex::new(Vec::new());
    let rows = convergence_study(&sweep, |tau| {
        let mut cfg = s.config.clone();
        cfg.scheme.tau = tau;
        cfg.scheme.t_end = horizon;
        let (problem, data) = cfg.build()?;
        let mut state = initialize(&problem, &data).map_err(|e| e.to_string())?;
        let summary = run(&problem, &mut state, problem.scheme.windows()).map_err(|e| e.to_string())?;
        if let RunOutcome::Degenerate { window, kind } = summary.outcome {
            return Err(format!("degenerate at window {window}: {kind}"));
        }
        finals.lock().expect("no panics while held").push((tau, state.fluid.clone()));
        Ok(ReplicaResult {
            mismatch: state.ledger.trace_mismatch,
            slack: summary.worst_relative_slack,
            leakage: state.ledger.leak_max,
            compactness: f64::NAN,
        })
    })?;
    let rows = with_compactness(&s.config, rows, finals.into_inner().expect("no panics while held"))?;
    let table = study_table(&rows);
    print!("{table}");
    if rows.len() >= 2 {
        let taus: Vec<f64> = rows.iter().map(|r| r.parameter).collect();
        let m: Vec<f64> = rows.iter().map(|r| r.mismatch).collect();
        let order = fitted_order(&taus, &m);
        println!("fitted order of the integrated squared mismatch: {order:.4} (norm {:.4})", order / 2.0);
    }
    if cli.out.is_some() {
        fs::create_dir_all(&s.out)?;
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf)?;
        fs::write(s.out.join("study.csv"), buf)?;
        write(&s.out.join("study.txt"), &table)?;
    }
    Ok(())
}

/// Fill the compactness column: each replica against the previous one at
/// the common final time (`p = 1`).
fn with_compactness(cfg: &RunConfig, mut rows: Vec<StudyRow>, finals: Vec<(f64, FluidState)>) -> Result<Vec<StudyRow>, Failure> {
    let (problem, _) = cfg.build().map_err(Failure::Error)?;
    let find = |tau: f64| finals.iter().find(|(t, _)| *t == tau).map(|(_, s)| s);
    for k in 1..rows.len() {
        if let (Some(a), Some(b)) = (find(rows[k].parameter), find(rows[k - 1].parameter)) {
            rows[k].compactness = compactness_gap(&problem.grid, a, b, 1.0)?;
        }
    }
    Ok(rows)
}

fn cmd_verify(cli: &Cli, path: &Path) -> Outcome {
    let s = load(cli)?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Error(format!("{}: {e}", path.display())))?;
    let ck = read_checkpoint(&text)?;
    let (problem, _) = s.config.build().map_err(Failure::Error)?;
    let law = &problem.pressure.base;
    let mut failures = Vec::new();
    let mut check = |name: &str, result: Result<(), String>| match result {
        Ok(()) => println!("ok    {name}"),
        Err(msg) => {
            println!("FAIL  {name}: {msg}");
            failures.push(name.to_string());
        }
    };
    let f = &ck.fluid;
    check(
        "grid matches configuration",
        if ck.grid == problem.grid && ck.shell_grid == problem.geom.grid {
            Ok(())
        } else {
            Err("checkpoint grids differ from the configured grids".into())
        },
    );
    check("window length matches configuration", if ck.tau == problem.scheme.tau { Ok(()) } else { Err(format!("tau {}", ck.tau)) });
    check("fluid fields finite and sized", f.check(&ck.grid).map_err(|e| e.to_string()));
    let negative = (0..f.len()).find(|&c| f.rho[c] < 0.0 || f.z[c] < 0.0);
    check(
        "nonnegative densities",
        negative.map_or(Ok(()), |c| Err(format!("cell {c}: rho = {}, Z = {}", f.rho[c], f.z[c]))),
    );
    check(
        "cone invariant a_lower·rho ≤ Z ≤ a_upper·rho",
        f.cone_violation(law.a_lower, law.a_upper, 1e-12).map_or(Ok(()), |c| {
            Err(format!("cell {c}: rho = {}, Z = {} outside [{}, {}]·rho", f.rho[c], f.z[c], law.a_lower, law.a_upper))
        }),
    );
    let shell_finite = ck.eta.iter().chain(&ck.w).all(|v| v.is_finite());
    check("shell fields finite", if shell_finite { Ok(()) } else { Err("non-finite displacement or velocity".into()) });
    if ck.grid == problem.grid && ck.shell_grid == problem.geom.grid && shell_finite {
        check("shell admissible (band and γ̄ > 0)", admissibility(&problem.geom, &ck.eta).map_err(|d| d.to_string()));
        let elastic = problem.structure_params().elastic;
        check(
            "Koiter coercivity bound",
            if coercivity_check(&problem.geom, &ck.eta, &elastic).holds() { Ok(()) } else { Err("bound violated".into()) },
        );
        match preimage_distances(&problem.grid, &problem.geom, &ck.eta) {
            Ok(dist) => {
                let (ext, tot) = exterior_mass(&problem.grid, f, &dist);
                let frac = if tot > 0.0 { ext / tot } else { 0.0 };
                check(
                    "support confinement",
                    if frac <= problem.scheme.leak_tolerance {
                        Ok(())
                    } else {
                        Err(format!("exterior mass fraction {frac:.3e}"))
                    },
                );
            }
            Err(e) => check("support confinement", Err(e.to_string())),
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Error(format!("{} invariant(s) violated: {}", failures.len(), failures.join(", "))))
    }
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("FSI_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n == 1 {
            koiter_fsi::par::set_parallel(false);
        } else if n > 1 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match &cli.command {
        Command::Run => cmd_run(&cli),
        Command::CheckPressure { samples, rho_max } => cmd_check_pressure(&cli, *samples, *rho_max),
        Command::ShellDemo { pairs } => cmd_shell_demo(&cli, *pairs),
        Command::ConvergenceStudy { sweep } => cmd_convergence_study(&cli, sweep),
        Command::VerifyInvariants { checkpoint } => cmd_verify(&cli, checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Degenerate(msg)) => {
            eprintln!("degenerate: {msg}");
            ExitCode::from(2)
        }
    }
}
