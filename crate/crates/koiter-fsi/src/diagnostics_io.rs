//! Ledger rows and CSV files, field dumps, checkpoints, run metadata, and the
//! diagnostics used by convergence studies.

use crate::fluid_solver::{Boundary, FluidGrid, FluidState};
use crate::geometry::{ParamGrid, ReferenceGeometry, V3};
use crate::par;
use crate::structure_solver::SubstepRecord;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

/// One row of the energy ledger, written at the end of every window.
/// Columns marked cumulative never decrease.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub window: usize,
    pub t: f64,
    pub kinetic_fluid: f64,
    pub helmholtz: f64,
    /// Cumulative.
    pub dissipation_visc: f64,
    pub kinetic_shell: f64,
    pub koiter: f64,
    pub koiter_reg: f64,
    /// Cumulative.
    pub dissipation_zeta: f64,
    /// Cumulative (fluid and shell).
    pub penalty_mismatch: f64,
    /// Cumulative (fluid and shell).
    pub penalty_trace: f64,
    /// Cumulative (fluid and shell).
    pub penalty_input: f64,
    /// Fluid trace term of the last window.
    pub reservoir: f64,
    pub rhs_initial: f64,
    pub left: f64,
    pub slack: f64,
    /// Cumulative `Σ dt ‖Tu − ∂_tη ν‖²`.
    pub trace_mismatch: f64,
    pub exterior_mass: f64,
    pub total_mass: f64,
}

impl LedgerRow {
    /// Mechanical energy plus the trace reservoir.
    pub fn total_energy(&self) -> f64 {
        self.left - self.dissipation_visc - self.dissipation_zeta - self.penalty_mismatch
    }

    pub fn relative_slack(&self) -> f64 {
        self.slack / self.left.abs().max(self.rhs_initial.abs()).max(1e-300)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.t,
            self.kinetic_fluid,
            self.helmholtz,
            self.dissipation_visc,
            self.kinetic_shell,
            self.koiter,
            self.koiter_reg,
            self.dissipation_zeta,
            self.penalty_mismatch,
            self.penalty_trace,
            self.penalty_input,
            self.reservoir,
            self.rhs_initial,
            self.left,
            self.slack,
            self.trace_mismatch,
            self.exterior_mass,
            self.total_mass,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Indices of rows where a cumulative column decreased.
pub fn cumulative_violations(rows: &[LedgerRow]) -> Vec<usize> {
    rows.windows(2)
        .enumerate()
        .filter(|(_, w)| {
            let (a, b) = (&w[0], &w[1]);
            b.dissipation_visc < a.dissipation_visc
                || b.dissipation_zeta < a.dissipation_zeta
                || b.penalty_mismatch < a.penalty_mismatch
                || b.penalty_trace < a.penalty_trace
                || b.penalty_input < a.penalty_input
                || b.trace_mismatch < a.trace_mismatch
        })
        .map(|(i, _)| i + 1)
        .collect()
}

/// Serialise rows with a header.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<Vec<T>, IoError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn ledger_to_csv(rows: &[LedgerRow]) -> Result<String, IoError> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn ledger_from_csv(text: &str) -> Result<Vec<LedgerRow>, IoError> {
    read_csv(text.as_bytes())
}

pub fn records_to_csv(rows: &[SubstepRecord]) -> Result<String, IoError> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// `FIELD name nx ny nz` followed by the values, `nx` per line.
pub fn write_field(out: &mut String, name: &str, n: [usize; 3], values: &[f64]) {
    let _ = writeln!(out, "FIELD {name} {} {} {}", n[0], n[1], n[2]);
    for row in values.chunks(n[0].max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

/// A parsed field block.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub name: String,
    pub n: [usize; 3],
    pub values: Vec<f64>,
}

fn perr(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { line, msg: msg.into() }
}

/// Parse consecutive `FIELD` blocks starting at `lines[*pos]`.
fn parse_fields(lines: &[&str], pos: &mut usize) -> Result<Vec<Field>, IoError> {
    let mut out = Vec::new();
    while *pos < lines.len() {
        let line = lines[*pos].trim();
        if line.is_empty() {
            *pos += 1;
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.first() != Some(&"FIELD") {
            break;
        }
        if t.len() != 5 {
            return Err(perr(*pos + 1, "expected `FIELD name nx ny nz`"));
        }
        let mut n = [0usize; 3];
        for a in 0..3 {
            n[a] = t[2 + a].parse().map_err(|_| perr(*pos + 1, format!("bad size `{}`", t[2 + a])))?;
        }
        let count = n[0] * n[1] * n[2];
        let header = *pos + 1;
        *pos += 1;
        let mut values = Vec::with_capacity(count);
        while values.len() < count {
            let l = lines.get(*pos).ok_or_else(|| perr(header, format!("field {} truncated", t[1])))?;
            for tok in l.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|_| perr(*pos + 1, format!("bad number `{tok}`")))?);
            }
            *pos += 1;
        }
        if values.len() != count {
            return Err(perr(header, format!("field {} has {} values, expected {count}", t[1], values.len())));
        }
        out.push(Field { name: t[1].to_string(), n, values });
    }
    Ok(out)
}

pub fn read_fields(text: &str) -> Result<Vec<Field>, IoError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut pos = 0;
    let f = parse_fields(&lines, &mut pos)?;
    if pos < lines.len() {
        return Err(perr(pos + 1, "unexpected content after fields"));
    }
    Ok(f)
}

/// Everything a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub window: usize,
    pub tau: f64,
    pub time: f64,
    pub grid: FluidGrid,
    pub shell_grid: ParamGrid,
    pub fluid: FluidState,
    pub eta: Vec<f64>,
    pub w: Vec<f64>,
}

fn bc_name(b: Boundary) -> &'static str {
    match b {
        Boundary::Periodic => "periodic",
        Boundary::Wall => "wall",
    }
}

/// Deterministic text layout: header, grids, then fields.
pub fn write_checkpoint(c: &Checkpoint) -> String {
    let mut s = String::new();
    let g = &c.grid;
    let _ = writeln!(s, "CKPT 1 {} {:?}", c.window, c.tau);
    let _ = writeln!(s, "TIME {:?}", c.time);
    let _ = writeln!(
        s,
        "GRID {} {} {} {:?} {:?} {:?} {:?} {:?} {:?} {} {} {}",
        g.n[0],
        g.n[1],
        g.n[2],
        g.lo[0],
        g.lo[1],
        g.lo[2],
        g.hi(0),
        g.hi(1),
        g.hi(2),
        bc_name(g.bc[0]),
        bc_name(g.bc[1]),
        bc_name(g.bc[2])
    );
    let sg = &c.shell_grid;
    let _ = writeln!(s, "SHELLGRID {} {} {:?} {:?}", sg.n1, sg.n2, sg.h1, sg.h2);
    let n = g.n;
    write_field(&mut s, "rho", n, &c.fluid.rho);
    write_field(&mut s, "Z", n, &c.fluid.z);
    for (a, name) in ["ux", "uy", "uz"].iter().enumerate() {
        let v: Vec<f64> = c.fluid.u.iter().map(|u| u[a]).collect();
        write_field(&mut s, name, n, &v);
    }
    write_field(&mut s, "eta", [sg.n1, sg.n2, 1], &c.eta);
    write_field(&mut s, "w", [sg.n1, sg.n2, 1], &c.w);
    s
}

pub fn read_checkpoint(text: &str) -> Result<Checkpoint, IoError> {
    let lines: Vec<&str> = text.lines().collect();
    let tok = |i: usize, tag: &str, len: usize| -> Result<Vec<&str>, IoError> {
        let l = lines.get(i).ok_or_else(|| perr(i + 1, format!("missing {tag} line")))?;
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.first() != Some(&tag) || t.len() != len {
            return Err(perr(i + 1, format!("expected `{tag}` with {} fields", len - 1)));
        }
        Ok(t)
    };
    let num = |i: usize, s: &str| -> Result<f64, IoError> { s.parse().map_err(|_| perr(i + 1, format!("bad number `{s}`"))) };
    let int = |i: usize, s: &str| -> Result<usize, IoError> { s.parse().map_err(|_| perr(i + 1, format!("bad integer `{s}`"))) };
    let h = tok(0, "CKPT", 4)?;
    if h[1] != "1" {
        return Err(perr(1, format!("unsupported checkpoint version {}", h[1])));
    }
    let window = int(0, h[2])?;
    let tau = num(0, h[3])?;
    let time = num(1, tok(1, "TIME", 2)?[1])?;
    let g = tok(2, "GRID", 13)?;
    let mut n = [0; 3];
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    let mut bc = [Boundary::Periodic; 3];
    for a in 0..3 {
        n[a] = int(2, g[1 + a])?;
        lo[a] = num(2, g[4 + a])?;
        hi[a] = num(2, g[7 + a])?;
        bc[a] = match g[10 + a] {
            "periodic" => Boundary::Periodic,
            "wall" => Boundary::Wall,
            other => return Err(perr(3, format!("unknown boundary `{other}`"))),
        };
    }
    let grid = FluidGrid::new(n, lo, hi, bc).map_err(|e| perr(3, e.to_string()))?;
    let sgt = tok(3, "SHELLGRID", 5)?;
    let shell_grid = ParamGrid::new(int(3, sgt[1])?, int(3, sgt[2])?, num(3, sgt[3])?, num(3, sgt[4])?)
        .map_err(|e| perr(4, e.to_string()))?;
    let mut pos = 4;
    let fields = parse_fields(&lines, &mut pos)?;
    if pos < lines.len() {
        return Err(perr(pos + 1, "unexpected content after fields"));
    }
    let get = |name: &str, len: usize| -> Result<Vec<f64>, IoError> {
        let f = fields.iter().find(|f| f.name == name).ok_or_else(|| perr(0, format!("missing field {name}")))?;
        if f.values.len() != len {
            return Err(IoError::GridMismatch(format!("field {name} has {} values, expected {len}", f.values.len())));
        }
        Ok(f.values.clone())
    };
    let nc = grid.len();
    let (ux, uy, uz) = (get("ux", nc)?, get("uy", nc)?, get("uz", nc)?);
    let fluid = FluidState {
        rho: get("rho", nc)?,
        z: get("Z", nc)?,
        u: (0..nc).map(|c| [ux[c], uy[c], uz[c]]).collect(),
        time,
    };
    let ns = shell_grid.len();
    Ok(Checkpoint { window, tau, time, grid, shell_grid, fluid, eta: get("eta", ns)?, w: get("w", ns)? })
}

/// `run.meta`: config echo, version and seed.
pub fn run_meta(config_text: &str, seed: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "seed = {seed}");
    let _ = writeln!(s, "parallel = {}", par::parallel_enabled());
    let _ = writeln!(s, "--- config ---");
    s.push_str(config_text);
    if !config_text.ends_with('\n') {
        s.push('\n');
    }
    s
}

/// Two-column whitespace-separated data for gnuplot.
pub fn gnuplot_columns(x: &[f64], y: &[f64]) -> String {
    let mut s = String::new();
    for (a, b) in x.iter().zip(y) {
        let _ = writeln!(s, "{a:?} {b:?}");
    }
    s
}

/// Integer refinement factor per axis between `coarse` and `fine`.
fn refinement(coarse: &FluidGrid, fine: &FluidGrid) -> Result<[usize; 3], IoError> {
    let mut r = [1; 3];
    for a in 0..3 {
        if fine.n[a] % coarse.n[a] != 0
            || (fine.lo[a] - coarse.lo[a]).abs() > 1e-12
            || (fine.hi(a) - coarse.hi(a)).abs() > 1e-9 * (1.0 + coarse.hi(a).abs())
            || fine.bc[a] != coarse.bc[a]
        {
            return Err(IoError::GridMismatch(format!("axis {a}: {} cells do not refine {} cells of the same box", fine.n[a], coarse.n[a])));
        }
        r[a] = fine.n[a] / coarse.n[a];
    }
    Ok(r)
}

/// Piecewise-constant (mass-conservative) transfer of a coarse state to a finer grid.
pub fn prolong(coarse_grid: &FluidGrid, coarse: &FluidState, fine_grid: &FluidGrid) -> Result<FluidState, IoError> {
    let r = refinement(coarse_grid, fine_grid)?;
    let map = |c: usize| {
        let i = fine_grid.coords(c);
        coarse_grid.index([i[0] / r[0], i[1] / r[1], i[2] / r[2]])
    };
    let n = fine_grid.len();
    Ok(FluidState {
        rho: (0..n).map(|c| coarse.rho[map(c)]).collect(),
        z: (0..n).map(|c| coarse.z[map(c)]).collect(),
        u: (0..n).map(|c| coarse.u[map(c)]).collect(),
        time: coarse.time,
    })
}

/// Cell averages of a fine state on a coarser grid (velocity mass-weighted).
pub fn restrict(fine_grid: &FluidGrid, fine: &FluidState, coarse_grid: &FluidGrid) -> Result<FluidState, IoError> {
    let r = refinement(coarse_grid, fine_grid)?;
    let nc = coarse_grid.len();
    let k = (r[0] * r[1] * r[2]) as f64;
    let mut rho = vec![0.0; nc];
    let mut z = vec![0.0; nc];
    let mut m = vec![[0.0; 3]; nc];
    for c in 0..fine_grid.len() {
        let i = fine_grid.coords(c);
        let t = coarse_grid.index([i[0] / r[0], i[1] / r[1], i[2] / r[2]]);
        rho[t] += fine.rho[c] / k;
        z[t] += fine.z[c] / k;
        let d = fine.rho[c] + fine.z[c];
        for a in 0..3 {
            m[t][a] += d * fine.u[c][a] / k;
        }
    }
    let u = (0..nc)
        .map(|t| {
            let d = rho[t] + z[t];
            if d > crate::fluid_solver::DENSITY_FLOOR {
                [m[t][0] / d, m[t][1] / d, m[t][2] / d]
            } else {
                [0.0; 3]
            }
        })
        .collect();
    Ok(FluidState { rho, z, u, time: fine.time })
}

/// `Σ (ρ+Z)|a − b|^p V` with `a = ρ/(ρ+Z)` (0 in vacuum) of each state; the
/// weight `ρ+Z` is taken from the first state.
pub fn compactness_gap(grid: &FluidGrid, first: &FluidState, second: &FluidState, p: f64) -> Result<f64, IoError> {
    let n = grid.len();
    if first.len() != n || second.len() != n {
        return Err(IoError::GridMismatch(format!("states have {} and {} cells, grid has {n}", first.len(), second.len())));
    }
    if !(p >= 1.0) {
        return Err(IoError::GridMismatch(format!("exponent p must be ≥ 1 (got {p})")));
    }
    let ratio = |s: &FluidState, c: usize| {
        let d = s.rho[c] + s.z[c];
        if d > 0.0 {
            s.rho[c] / d
        } else {
            0.0
        }
    };
    let v = grid.cell_volume();
    Ok(v * par::sum(n, |c| {
        let d = first.rho[c] + first.z[c];
        d * (ratio(first, c) - ratio(second, c)).abs().powf(p)
    }))
}

/// `‖v − w ν‖²_{L²(Γ)}` with the reference quadrature.
pub fn trace_mismatch(geom: &ReferenceGeometry, v: &[V3], w: &[f64]) -> f64 {
    (0..geom.grid.len()).map(|n| geom.node_weight(n) * (v[n] - geom.nu[n] * w[n]).norm_squared()).sum()
}

/// One replica of a convergence study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub parameter: f64,
    pub mismatch: f64,
    pub slack: f64,
    pub leakage: f64,
    pub compactness: f64,
    /// Observed order against the previous row (empty for the first).
    pub order: Option<f64>,
}

/// Observed orders `log(e_{k−1}/e_k)/log(p_{k−1}/p_k)` between consecutive rows.
pub fn observed_orders(params: &[f64], values: &[f64]) -> Vec<Option<f64>> {
    (0..params.len())
        .map(|k| {
            if k == 0 {
                None
            } else {
                Some((values[k - 1] / values[k]).ln() / (params[k - 1] / params[k]).ln())
            }
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn fitted_order(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Metrics a replica reports back to the study driver.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaResult {
    pub mismatch: f64,
    pub slack: f64,
    pub leakage: f64,
    pub compactness: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum StudyError {
    #[error("a convergence study needs at least one sweep point")]
    Empty,
    #[error("replica with parameter {parameter} failed: {reason}")]
    Replica { parameter: f64, reason: String },
}

/// Run one replica per sweep point (independently, in parallel) and tabulate.
pub fn convergence_study<F>(sweep: &[f64], replica: F) -> Result<Vec<StudyRow>, StudyError>
where
    F: Fn(f64) -> Result<ReplicaResult, String> + Sync + Send,
{
    if sweep.is_empty() {
        return Err(StudyError::Empty);
    }
    let results = run_replicas(sweep, &replica);
    let mut ok = Vec::with_capacity(sweep.len());
    for (p, r) in sweep.iter().zip(results) {
        ok.push(r.map_err(|reason| StudyError::Replica { parameter: *p, reason })?);
    }
    let m: Vec<f64> = ok.iter().map(|r| r.mismatch).collect();
    let orders = observed_orders(sweep, &m);
    Ok(sweep
        .iter()
        .zip(ok)
        .zip(orders)
        .map(|((&p, r), order)| StudyRow {
            parameter: p,
            mismatch: r.mismatch,
            slack: r.slack,
            leakage: r.leakage,
            compactness: r.compactness,
            order,
        })
        .collect())
}

fn run_replicas<F>(sweep: &[f64], replica: &F) -> Vec<Result<ReplicaResult, String>>
where
    F: Fn(f64) -> Result<ReplicaResult, String> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par::parallel_enabled() {
        use rayon::prelude::*;
        return sweep.par_iter().map(|&p| replica(p)).collect();
    }
    sweep.iter().map(|&p| replica(p)).collect()
}

/// Plain-text rendering of a study table.
pub fn study_table(rows: &[StudyRow]) -> String {
    let mut s = String::from("parameter mismatch slack leakage compactness order\n");
    for r in rows {
        let o = r.order.map_or(String::from("-"), |o| format!("{o:.4}"));
        let _ = writeln!(s, "{:e} {:e} {:e} {:e} {:e} {o}", r.parameter, r.mismatch, r.slack, r.leakage, r.compactness);
    }
    s
}
