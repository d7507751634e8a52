//! The window loop: shell first (consuming the fluid trace of the previous
//! window), then the fluid on the same window with the geometry frozen at the
//! new shell position, exchanging velocities through the `δ/τ` penalty.
//!
//! The energy ledger telescopes both sub-problem balances. Writing `E` for
//! the mechanical energy (fluid kinetic + Helmholtz, shell kinetic + `K_δ`)
//! and `R_n` for the fluid trace term `δ/2τ ∫_{window n} Σ D|u|²`,
//!
//! ```text
//! E_N + Σ(viscous + ζ + mismatch dissipation) + R_N ≤ E_0 + R_0,
//! ```
//!
//! with `R_0 = δ/2 ‖η₁‖²` from the initial trace `v⁰ = η₁ν`.

use crate::diagnostics_io::LedgerRow;
use crate::fluid_solver::{
    exterior_mass, extend_viscosity, fluid_energy, preimage_distances, stable_dt, step, FluidError, FluidGrid,
    FluidState, SurfaceCoupling, ViscosityField, DENSITY_FLOOR,
};
use crate::geometry::{gamma_bar, GeometryError, ReferenceGeometry, V3};
use crate::par;
use crate::pressure::RegularizedPressure;
use crate::shell_energy::{koiter_parts, DerivativeRule, ElasticityParams};
use crate::structure_solver::{
    advance_window, Degeneracy, LaggedTrace, PicardParams, ShellState, StructureError, StructureParams,
};
use thiserror::Error;

/// Which regime of the existence theory the run belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseFlag {
    /// `max{γ, β} > 2`, `ζ ≥ 0`.
    I,
    /// `max{γ, β} ≥ 2`, `ζ > 0`.
    II,
}

impl CaseFlag {
    /// Why `(γ, β, ζ)` is not admissible for this case, if it is not.
    pub fn violation(self, gamma: f64, beta: f64, zeta: f64) -> Option<String> {
        let m = gamma.max(beta);
        match self {
            CaseFlag::I if m <= 2.0 => Some(format!("case I requires max{{gamma, beta}} > 2 (got {m})")),
            CaseFlag::II if zeta <= 0.0 => Some(format!("case II requires zeta > 0 (got {zeta})")),
            CaseFlag::II if m < 2.0 => Some(format!("case II requires max{{gamma, beta}} ≥ 2 (got {m})")),
            _ => None,
        }
    }

    /// Case II when `ζ > 0` and `max ≥ 2`, otherwise case I when `max > 2`.
    pub fn infer(gamma: f64, beta: f64, zeta: f64) -> Result<Self, String> {
        let m = gamma.max(beta);
        if zeta > 0.0 && m >= 2.0 {
            Ok(CaseFlag::II)
        } else if m > 2.0 {
            Ok(CaseFlag::I)
        } else if zeta > 0.0 {
            Err(format!("exponents max{{gamma, beta}} = {m}: case I requires > 2 and case II requires ≥ 2"))
        } else {
            Err(format!("zeta = 0 needs case I, which requires max{{gamma, beta}} > 2 (got {m})"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeParams {
    pub tau: f64,
    /// Optional cap on the fluid step.
    pub dt_fluid_cap: Option<f64>,
    /// Shell sub-steps per window.
    pub substeps: usize,
    pub delta: f64,
    pub omega: f64,
    pub zeta: f64,
    pub kappa: f64,
    pub t_end: f64,
    pub case: CaseFlag,
    pub keep_inertia_factor: bool,
    pub picard: PicardParams,
    /// Allowed exterior mass fraction.
    pub leak_tolerance: f64,
    /// Allowed negative relative ledger slack.
    pub ledger_tolerance: f64,
    pub rule: DerivativeRule,
}

impl SchemeParams {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            v.push(format!("tau must be positive (got {})", self.tau));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            v.push(format!("delta must lie in (0, 1) (got {})", self.delta));
        }
        if !(self.omega > 0.0 && self.omega < 1.0) {
            v.push(format!("omega must lie in (0, 1) (got {})", self.omega));
        }
        if !(self.zeta >= 0.0) {
            v.push(format!("zeta must be non-negative (got {})", self.zeta));
        }
        if self.substeps < 10 {
            v.push(format!("substeps must be ≥ 10 so that Δt ≤ τ/10 (got {})", self.substeps));
        }
        if !(self.t_end >= 0.0) {
            v.push(format!("t_end must be non-negative (got {})", self.t_end));
        }
        if let Some(c) = self.dt_fluid_cap {
            if !(c > 0.0) {
                v.push(format!("dt_fluid_cap must be positive (got {c})"));
            }
        }
        v
    }

    pub fn windows(&self) -> usize {
        (self.t_end / self.tau - 1e-9).ceil().max(0.0) as usize
    }
}

/// Everything that stays fixed during a run.
#[derive(Clone, Debug)]
pub struct Problem {
    pub geom: ReferenceGeometry,
    pub grid: FluidGrid,
    pub pressure: RegularizedPressure,
    /// Shell coefficients; `delta_reg` and `zeta` are overwritten from the scheme.
    pub elastic: ElasticityParams,
    pub mu: f64,
    pub lambda: f64,
    pub scheme: SchemeParams,
}

impl Problem {
    pub fn structure_params(&self) -> StructureParams {
        let s = &self.scheme;
        StructureParams {
            elastic: ElasticityParams { delta_reg: s.delta, zeta: s.zeta, ..self.elastic },
            delta: s.delta,
            tau: s.tau,
            substeps: s.substeps,
            keep_inertia_factor: s.keep_inertia_factor,
            picard: s.picard,
            rule: s.rule,
        }
    }

    pub fn inertia(&self) -> f64 {
        if self.scheme.keep_inertia_factor {
            1.0 - self.scheme.delta
        } else {
            1.0
        }
    }
}

/// Raw initial data (before mollification and cut-off).
#[derive(Clone, Debug, PartialEq)]
pub struct InitialData {
    pub rho: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<[f64; 3]>,
    pub eta0: Vec<f64>,
    pub eta1: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("initial densities leave the cone a_lower·rho ≤ Z ≤ a_upper·rho at cell {cell} (rho = {rho}, Z = {z})")]
    ConeViolation { cell: usize, rho: f64, z: f64 },
    #[error("initial displacement is not admissible: {0}")]
    InitialDegeneracy(Degeneracy),
    #[error("energy ledger violated at window {window}: relative slack {relative:.3e}")]
    LedgerViolation { window: usize, relative: f64 },
    #[error("exterior mass fraction {fraction:.3e} exceeds the leak tolerance at window {window}")]
    Leak { window: usize, fraction: f64 },
    #[error("fluid step failed: {0}")]
    Fluid(#[from] FluidError),
    #[error("shell step failed: {0}")]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Ledger accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ledger {
    pub dissipation_visc: f64,
    pub dissipation_zeta: f64,
    pub penalty_mismatch: f64,
    pub penalty_trace: f64,
    pub penalty_input: f64,
    /// Current fluid trace term `R_n`.
    pub reservoir: f64,
    /// `E_0 + R_0`.
    pub rhs_initial: f64,
    /// `Σ dt Σ dA |Tu − ∂_tη ν|²`.
    pub trace_mismatch: f64,
    /// Worst relative structural slack so far.
    pub structure_slack_min: f64,
    /// Worst exterior mass fraction so far.
    pub leak_max: f64,
    pub rows: Vec<LedgerRow>,
}

/// The full simulation state between windows.
#[derive(Clone, Debug)]
pub struct RunState {
    pub fluid: FluidState,
    pub shell: ShellState,
    /// Fluid trace (normal part) of the last completed window.
    pub lagged: LaggedTrace,
    /// Window that produced [`RunState::lagged`] (`None` for `v⁰ = η₁ν`).
    pub lagged_from: Option<usize>,
    pub ledger: Ledger,
    pub window: usize,
    pub time: f64,
}

/// Result of [`degeneracy_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DegeneracyStatus {
    Ok { gamma_min: f64, margin: f64 },
    Degenerate(Degeneracy),
}

/// Relative distance to the band edge below which a first-kind halt triggers.
pub const BAND_MARGIN: f64 = 0.02;
/// `γ̄` below which a second-kind halt triggers.
pub const GAMMA_THRESHOLD: f64 = 1e-3;

/// Degeneracy monitor. The band used is the range on which the flow map stays
/// invertible (a subset of the geometric band).
pub fn degeneracy_check(geom: &ReferenceGeometry, eta: &[f64]) -> DegeneracyStatus {
    let (lo, hi) = geom.cutoff.invertible_range();
    let width = hi - lo;
    let mut margin = f64::INFINITY;
    let mut worst = 0;
    for (n, &v) in eta.iter().enumerate() {
        let m = (v - lo).min(hi - v) / width;
        if m < margin || m.is_nan() {
            margin = m;
            worst = n;
        }
    }
    if !(margin >= BAND_MARGIN) {
        return DegeneracyStatus::Degenerate(Degeneracy::FirstKind { node: worst, value: eta[worst], margin });
    }
    let gb = gamma_bar(geom, eta);
    let (node, gamma_min) =
        gb.iter().copied().enumerate().fold((0, f64::INFINITY), |a, (n, g)| if g < a.1 { (n, g) } else { a });
    if gamma_min < GAMMA_THRESHOLD {
        return DegeneracyStatus::Degenerate(Degeneracy::SecondKind { node, gamma_min });
    }
    DegeneracyStatus::Ok { gamma_min, margin }
}

/// Separable compact bump of radius `r` sampled with spacing `h`; a single
/// unit tap when the radius does not reach a neighbour.
pub fn bump_kernel(r: f64, h: f64) -> Vec<f64> {
    let k = (r / h).floor() as isize;
    if k < 1 {
        return vec![1.0];
    }
    let mut w: Vec<f64> = (-k..=k)
        .map(|i| {
            let t = i as f64 * h / r;
            if t.abs() < 1.0 {
                (-1.0 / (1.0 - t * t)).exp()
            } else {
                0.0
            }
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// `η₀ ∗ ω_δ` on the periodic parameter grid.
pub fn mollify_displacement(geom: &ReferenceGeometry, eta: &[f64], delta: f64) -> Vec<f64> {
    let g = &geom.grid;
    let n = g.len();
    let mean = |k: usize| -> f64 {
        let s: f64 = (0..n).map(|i| if k == 0 { geom.a1[i].norm() } else { geom.a2[i].norm() }).sum();
        s / n as f64
    };
    let k1 = bump_kernel(delta / mean(0), g.h1);
    let k2 = bump_kernel(delta / mean(1), g.h2);
    let c1 = (k1.len() / 2) as isize;
    let c2 = (k2.len() / 2) as isize;
    let pass1: Vec<f64> = (0..n)
        .map(|node| {
            let (i, j) = g.coords(node);
            k1.iter().enumerate().map(|(t, w)| w * eta[g.index(i as isize + t as isize - c1, j as isize)]).sum()
        })
        .collect();
    (0..n)
        .map(|node| {
            let (i, j) = g.coords(node);
            k2.iter().enumerate().map(|(t, w)| w * pass1[g.index(i as isize, j as isize + t as isize - c2)]).sum()
        })
        .collect()
}

/// Convolve a cell field with a separable bump of radius `r` (walls reflect).
pub fn mollify_cells(grid: &FluidGrid, f: &[f64], r: f64) -> Vec<f64> {
    let mut cur = f.to_vec();
    for a in (0..3).filter(|&a| grid.active(a)) {
        let k = bump_kernel(r, grid.h[a]);
        if k.len() == 1 {
            continue;
        }
        let c = (k.len() / 2) as isize;
        let src = cur.clone();
        cur = par::map(grid.len(), |cell| {
            let mut idx = grid.coords(cell);
            let i0 = idx[a] as isize;
            let n = grid.n[a] as isize;
            k.iter()
                .enumerate()
                .map(|(t, w)| {
                    let mut i = i0 + t as isize - c;
                    i = match grid.bc[a] {
                        crate::fluid_solver::Boundary::Periodic => i.rem_euclid(n),
                        crate::fluid_solver::Boundary::Wall => {
                            if i < 0 {
                                -1 - i
                            } else if i >= n {
                                2 * n - 1 - i
                            } else {
                                i
                            }
                        }
                    };
                    idx[a] = i as usize;
                    w * src[grid.index(idx)]
                })
                .sum()
        });
    }
    cur
}

/// Mechanical energy `E` of a state.
pub fn mechanical_energy(problem: &Problem, fluid: &FluidState, shell: &ShellState, visc: &ViscosityField) -> Result<(crate::fluid_solver::FluidEnergy, f64, f64, f64), CouplingError> {
    let fe = fluid_energy(&problem.grid, fluid, &problem.pressure, visc)?;
    let sp = problem.structure_params();
    let parts = koiter_parts(&problem.geom, &shell.eta, &sp.elastic);
    let kin = 0.5 * crate::structure_solver::l2_pairing(&problem.geom, &shell.w, &shell.w);
    Ok((fe, kin, parts.koiter(), parts.regularization))
}

/// Mollify and cut the data, check admissibility, and open the ledger.
pub fn initialize(problem: &Problem, data: &InitialData) -> Result<RunState, CouplingError> {
    let mut v = problem.scheme.violations();
    v.extend(problem.pressure.violations());
    if let Some(msg) = problem.scheme.case.violation(problem.pressure.base.gamma, problem.pressure.base.beta, problem.scheme.zeta) {
        v.push(msg);
    }
    if let Err(e) = problem.structure_params().validate() {
        v.push(e.to_string());
    }
    let nc = problem.grid.len();
    let nn = problem.geom.grid.len();
    if data.rho.len() != nc || data.z.len() != nc || data.u.len() != nc {
        v.push(format!("initial fluid fields must have {nc} cells"));
    }
    if data.eta0.len() != nn || data.eta1.len() != nn {
        v.push(format!("initial shell fields must have {nn} nodes"));
    }
    if !v.is_empty() {
        return Err(CouplingError::Invalid(v));
    }
    let law = &problem.pressure.base;
    for c in 0..nc {
        let (r, z) = (data.rho[c], data.z[c]);
        if r < 0.0 || z < 0.0 || z < law.a_lower * r || z > law.a_upper * r {
            return Err(CouplingError::ConeViolation { cell: c, rho: r, z });
        }
    }
    let delta = problem.scheme.delta;
    let eta0 = mollify_displacement(&problem.geom, &data.eta0, delta);
    if let DegeneracyStatus::Degenerate(d) = degeneracy_check(&problem.geom, &eta0) {
        return Err(CouplingError::InitialDegeneracy(d));
    }
    if let Some(&g) = gamma_bar(&problem.geom, &eta0).iter().min_by(|a, b| a.total_cmp(b)) {
        if !(g > 0.0) {
            return Err(CouplingError::InitialDegeneracy(Degeneracy::SecondKind { node: 0, gamma_min: g }));
        }
    }
    let dist = preimage_distances(&problem.grid, &problem.geom, &eta0)?;
    let cut = |f: Vec<f64>| -> Vec<f64> { f.into_iter().zip(&dist).map(|(x, &d)| if d > 0.0 { 0.0 } else { x }).collect() };
    let rho = cut(mollify_cells(&problem.grid, &data.rho, delta));
    let z = cut(mollify_cells(&problem.grid, &data.z, delta));
    let u = (0..nc)
        .map(|c| if rho[c] + z[c] > DENSITY_FLOOR && dist[c] <= 0.0 { data.u[c] } else { [0.0; 3] })
        .collect();
    let fluid = FluidState { rho, z, u, time: 0.0 };
    let shell = ShellState::new(eta0.clone(), data.eta1.clone());
    let visc = extend_viscosity(&problem.grid, &problem.geom, &eta0, problem.scheme.omega, problem.mu, problem.lambda)?;
    let (fe, kin, k, kr) = mechanical_energy(problem, &fluid, &shell, &visc)?;
    let reservoir = 0.5 * delta * crate::structure_solver::l2_pairing(&problem.geom, &data.eta1, &data.eta1);
    let e0 = fe.kinetic + fe.helmholtz + problem.inertia() * kin + k + kr;
    let (ext, tot) = exterior_mass(&problem.grid, &fluid, &dist);
    let leak = if tot > 0.0 { ext / tot } else { 0.0 };
    let mut ledger = Ledger {
        reservoir,
        rhs_initial: e0 + reservoir,
        structure_slack_min: f64::INFINITY,
        leak_max: leak,
        ..Default::default()
    };
    ledger.rows.push(LedgerRow {
        window: 0,
        t: 0.0,
        kinetic_fluid: fe.kinetic,
        helmholtz: fe.helmholtz,
        dissipation_visc: 0.0,
        kinetic_shell: kin,
        koiter: k,
        koiter_reg: kr,
        dissipation_zeta: 0.0,
        penalty_mismatch: 0.0,
        penalty_trace: 0.0,
        penalty_input: 0.0,
        reservoir,
        rhs_initial: e0 + reservoir,
        left: e0 + reservoir,
        slack: 0.0,
        trace_mismatch: 0.0,
        exterior_mass: ext,
        total_mass: tot,
    });
    Ok(RunState {
        fluid,
        shell,
        lagged: LaggedTrace::constant(data.eta1.clone()),
        lagged_from: None,
        ledger,
        window: 0,
        time: 0.0,
    })
}

/// What happened in one window besides the new state.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowReport {
    pub fluid_steps: usize,
    pub shell_substeps: usize,
    pub halvings: usize,
    pub structure_slack_min: f64,
    pub max_picard_iterations: usize,
    pub leak: f64,
    pub status: DegeneracyStatus,
}

struct FluidWindow {
    state: FluidState,
    viscous: f64,
    mismatch: f64,
    trace: f64,
    input: f64,
    trace_mismatch: f64,
    slots: Vec<Vec<f64>>,
    leak: f64,
    steps: usize,
}

fn fluid_window(
    problem: &Problem,
    fluid: &FluidState,
    visc: &ViscosityField,
    coupling: &SurfaceCoupling,
    slot_velocity: &[Vec<f64>],
    dist: &[f64],
    nf: usize,
) -> Result<FluidWindow, FluidError> {
    let geom = &problem.geom;
    let grid = &problem.grid;
    let k = slot_velocity.len();
    let per_slot = nf / k;
    let dt = problem.scheme.tau / nf as f64;
    let nodes = geom.grid.len();
    let area = coupling.area().to_vec();
    let mut st = fluid.clone();
    let mut acc = FluidWindow {
        state: fluid.clone(),
        viscous: 0.0,
        mismatch: 0.0,
        trace: 0.0,
        input: 0.0,
        trace_mismatch: 0.0,
        slots: vec![vec![0.0; nodes]; k],
        leak: 0.0,
        steps: nf,
    };
    for (m, w) in slot_velocity.iter().enumerate() {
        let vel: Vec<V3> = (0..nodes).map(|n| geom.nu[n] * w[n]).collect();
        let brink = coupling.brinkman(grid, &vel, problem.scheme.delta, problem.scheme.tau);
        for _ in 0..per_slot {
            let (next, rep) = step(grid, &st, visc, &problem.pressure, Some(&brink), dt)?;
            st = next;
            acc.viscous += rep.viscous;
            acc.mismatch += rep.penalty.mismatch;
            acc.trace += rep.penalty.trace;
            acc.input += rep.penalty.input;
            let tr = coupling.trace(&st.u);
            for n in 0..nodes {
                acc.slots[m][n] += tr[n].dot(&geom.nu[n]) / per_slot as f64;
                acc.trace_mismatch += dt * area[n] * (tr[n] - vel[n]).norm_squared();
            }
            let (ext, tot) = exterior_mass(grid, &st, dist);
            if tot > 0.0 {
                acc.leak = acc.leak.max(ext / tot);
            }
        }
    }
    acc.state = st;
    Ok(acc)
}

/// Advance one window. Degeneracy of the new shell position is reported in
/// the status rather than as an error.
/// On error the state is left unchanged.
pub fn run_window(problem: &Problem, state: &mut RunState) -> Result<WindowReport, CouplingError> {
    debug_assert!(state.lagged_from.map_or(state.window == 0, |w| w + 1 == state.window));
    // The shell consumes the trace of the previous window; it is moved out so
    // that nothing newer can be read.
    let lagged = std::mem::replace(&mut state.lagged, LaggedTrace { slots: Vec::new() });
    let result = advance_coupled(problem, state, &lagged);
    if state.lagged.slots.is_empty() {
        state.lagged = lagged;
    }
    result
}

fn advance_coupled(problem: &Problem, state: &mut RunState, lagged: &LaggedTrace) -> Result<WindowReport, CouplingError> {
    let sp = problem.structure_params();
    let n = state.window;
    let t0 = state.time;
    let shell_out = match advance_window(&problem.geom, &state.shell, lagged, &sp, t0) {
        Ok(o) => o,
        Err(StructureError::Degenerate(d)) => {
            return Ok(WindowReport {
                fluid_steps: 0,
                shell_substeps: 0,
                halvings: 0,
                structure_slack_min: f64::INFINITY,
                max_picard_iterations: 0,
                leak: 0.0,
                status: DegeneracyStatus::Degenerate(d),
            });
        }
        Err(e) => return Err(e.into()),
    };
    let eta_new = &shell_out.state.eta;
    if let DegeneracyStatus::Degenerate(d) = degeneracy_check(&problem.geom, eta_new) {
        return Ok(WindowReport {
            fluid_steps: 0,
            shell_substeps: shell_out.substeps,
            halvings: shell_out.halvings,
            structure_slack_min: f64::INFINITY,
            max_picard_iterations: 0,
            leak: 0.0,
            status: DegeneracyStatus::Degenerate(d),
        });
    }
    let s = &problem.scheme;
    let dist = preimage_distances(&problem.grid, &problem.geom, eta_new)?;
    let visc = crate::fluid_solver::viscosity_from_distances(&dist, s.omega, problem.mu, problem.lambda);
    let coupling = SurfaceCoupling::from_shell(&problem.grid, &problem.geom, eta_new)?;
    let k = shell_out.substeps;
    let mut dt = stable_dt(&problem.grid, &state.fluid, &problem.pressure);
    if let Some(c) = s.dt_fluid_cap {
        dt = dt.min(c);
    }
    let mut nf = ((s.tau / dt).ceil() as usize).max(1).div_ceil(k) * k;
    let mut attempt = 0;
    let fw = loop {
        match fluid_window(problem, &state.fluid, &visc, &coupling, &shell_out.slot_velocity, &dist, nf) {
            Ok(f) => break f,
            Err(FluidError::Cfl(_) | FluidError::NoConvergence { .. }) if attempt < 6 => {
                attempt += 1;
                nf *= 2;
            }
            Err(e) => return Err(e.into()),
        }
    };
    // Ledger.
    let struct_min = shell_out.records.iter().map(|r| r.relative_slack()).fold(f64::INFINITY, f64::min);
    let max_iter = shell_out.records.iter().map(|r| r.iterations).max().unwrap_or(0);
    let l = &mut state.ledger;
    l.dissipation_visc += fw.viscous;
    l.dissipation_zeta += shell_out.records.iter().map(|r| r.dissipation_zeta).sum::<f64>();
    l.penalty_mismatch += fw.mismatch + shell_out.records.iter().map(|r| r.penalty_mismatch).sum::<f64>();
    l.penalty_trace += fw.trace + shell_out.records.iter().map(|r| r.penalty_trace).sum::<f64>();
    l.penalty_input += fw.input + shell_out.records.iter().map(|r| r.penalty_in).sum::<f64>();
    l.reservoir = fw.trace;
    l.trace_mismatch += fw.trace_mismatch;
    l.structure_slack_min = l.structure_slack_min.min(struct_min);
    l.leak_max = l.leak_max.max(fw.leak);
    state.fluid = fw.state;
    state.shell = shell_out.state;
    state.lagged = LaggedTrace { slots: fw.slots };
    state.lagged_from = Some(n);
    state.window = n + 1;
    state.time = t0 + s.tau;
    state.fluid.time = state.time;
    let (fe, kin, kk, kr) = mechanical_energy(problem, &state.fluid, &state.shell, &visc)?;
    let (ext, tot) = exterior_mass(&problem.grid, &state.fluid, &dist);
    let l = &mut state.ledger;
    let e = fe.kinetic + fe.helmholtz + problem.inertia() * kin + kk + kr;
    let left = e + l.dissipation_visc + l.dissipation_zeta + l.penalty_mismatch_dissipation() + l.reservoir;
    l.rows.push(LedgerRow {
        window: n + 1,
        t: state.time,
        kinetic_fluid: fe.kinetic,
        helmholtz: fe.helmholtz,
        dissipation_visc: l.dissipation_visc,
        kinetic_shell: kin,
        koiter: kk,
        koiter_reg: kr,
        dissipation_zeta: l.dissipation_zeta,
        penalty_mismatch: l.penalty_mismatch,
        penalty_trace: l.penalty_trace,
        penalty_input: l.penalty_input,
        reservoir: l.reservoir,
        rhs_initial: l.rhs_initial,
        left,
        slack: l.rhs_initial - left,
        trace_mismatch: l.trace_mismatch,
        exterior_mass: ext,
        total_mass: tot,
    });
    Ok(WindowReport {
        fluid_steps: fw.steps,
        shell_substeps: k,
        halvings: shell_out.halvings,
        structure_slack_min: struct_min,
        max_picard_iterations: max_iter,
        leak: fw.leak,
        status: degeneracy_check(&problem.geom, &state.shell.eta),
    })
}

impl Ledger {
    /// Cumulative mismatch dissipation of both sub-problems.
    pub fn penalty_mismatch_dissipation(&self) -> f64 {
        self.penalty_mismatch
    }

    pub fn last(&self) -> &LedgerRow {
        self.rows.last().expect("ledger opened by initialize")
    }
}

/// Left side, right side and slack of the telescoped energy inequality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergySnapshot {
    pub left: f64,
    pub right: f64,
    pub slack: f64,
    /// Mechanical energy plus the trace reservoir; non-increasing for a stable run.
    pub total: f64,
}

impl EnergySnapshot {
    pub fn relative_slack(&self) -> f64 {
        self.slack / self.left.abs().max(self.right.abs()).max(1e-300)
    }
}

pub fn total_energy(state: &RunState) -> EnergySnapshot {
    let r = state.ledger.last();
    EnergySnapshot { left: r.left, right: r.rhs_initial, slack: r.slack, total: r.total_energy() }
}

/// How a run ended.
#[derive(Clone, Debug, PartialEq)]
pub enum RunOutcome {
    Completed,
    Degenerate { window: usize, kind: Degeneracy },
}

/// Summary of a run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub outcome: RunOutcome,
    pub windows: usize,
    pub fluid_steps: usize,
    pub max_halvings: usize,
    pub max_picard_iterations: usize,
    pub worst_relative_slack: f64,
    pub total_energy_increase: f64,
}

/// Run `windows` windows (stopping early on degeneracy). Ledger and leak
/// violations abort with an error after the offending window; the state is
/// left at that window for dumping.
pub fn run(problem: &Problem, state: &mut RunState, windows: usize) -> Result<RunSummary, CouplingError> {
    let mut summary = RunSummary {
        outcome: RunOutcome::Completed,
        windows: 0,
        fluid_steps: 0,
        max_halvings: 0,
        max_picard_iterations: 0,
        worst_relative_slack: f64::INFINITY,
        total_energy_increase: 0.0,
    };
    let mut prev_total = total_energy(state).total;
    for _ in 0..windows {
        let rep = run_window(problem, state)?;
        if let DegeneracyStatus::Degenerate(kind) = rep.status {
            if rep.fluid_steps == 0 {
                summary.outcome = RunOutcome::Degenerate { window: state.window, kind };
                break;
            }
        }
        summary.windows += 1;
        summary.fluid_steps += rep.fluid_steps;
        summary.max_halvings = summary.max_halvings.max(rep.halvings);
        summary.max_picard_iterations = summary.max_picard_iterations.max(rep.max_picard_iterations);
        let snap = total_energy(state);
        let rel = snap.relative_slack();
        summary.worst_relative_slack = summary.worst_relative_slack.min(rel);
        summary.total_energy_increase = summary.total_energy_increase.max(snap.total - prev_total);
        prev_total = snap.total;
        if rel < -problem.scheme.ledger_tolerance {
            return Err(CouplingError::LedgerViolation { window: state.window, relative: rel });
        }
        if rep.leak > problem.scheme.leak_tolerance {
            return Err(CouplingError::Leak { window: state.window, fraction: rep.leak });
        }
        if let DegeneracyStatus::Degenerate(kind) = rep.status {
            summary.outcome = RunOutcome::Degenerate { window: state.window, kind };
            break;
        }
    }
    Ok(summary)
}
