//! Sub-stepped shell dynamics on one window `(nτ, (n+1)τ]`.
//!
//! With `w = (η − η^m)/Δt` eliminated, every sub-step solves
//!
//! ```text
//! c₀ ⟨η, b⟩ + ζΔt ⟨∇η, ∇b⟩ + δ⁷Δt² ⟨∇³η, ∇³b⟩
//!   = c₀ ⟨η^m, b⟩ + ζΔt ⟨∇η^m, ∇b⟩ + (1−δ)Δt ⟨w^m, b⟩ + δΔt²/τ ⟨v̄, b⟩ − Δt² ⟨K'(η, η^m), b⟩
//! ```
//!
//! with `c₀ = 1 − δ + δΔt/τ`, `v̄` the lagged fluid trace (normal part) and
//! `K'(η, η^m)` the Simpson-averaged Koiter derivative. The left side is a
//! constant SPD operator inverted by conjugate gradients inside a damped
//! Picard iteration on the nonlinear right side.

use crate::geometry::{gamma_bar, ParamGrid, ReferenceGeometry};
use crate::par;
use crate::shell_energy::{
    discrete_koiter_derivative, discrete_koiter_gradient_with, koiter_gradient_unregularized, koiter_parts,
    DerivativeRule, ElasticityParams, ShellError, ThirdDifference,
};
use thiserror::Error;

/// Maximum number of `Δt` halvings before a window gives up.
pub const MAX_HALVINGS: usize = 5;

/// Degeneracy of the moving domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degeneracy {
    /// The displacement reached (or came within the margin of) the band boundary.
    FirstKind { node: usize, value: f64, margin: f64 },
    /// The coercivity factor `γ̄` (nearly) vanished.
    SecondKind { node: usize, gamma_min: f64 },
}

impl std::fmt::Display for Degeneracy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Degeneracy::FirstKind { node, value, margin } => {
                write!(f, "first-kind degeneracy at node {node}: eta = {value:.6e}, band margin {margin:.3e}")
            }
            Degeneracy::SecondKind { node, gamma_min } => {
                write!(f, "second-kind degeneracy at node {node}: gamma_bar = {gamma_min:.3e}")
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("invalid structure parameters: {0}")]
    InvalidParams(String),
    #[error("field length {got} does not match the shell grid ({expected} nodes)")]
    SizeMismatch { expected: usize, got: usize },
    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("{0}")]
    Degenerate(Degeneracy),
    #[error(transparent)]
    Shell(#[from] ShellError),
}

/// Damped Picard controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardParams {
    pub theta: f64,
    /// Stop when `‖residual‖ ≤ tol·‖data‖` (L² norms on `Γ`).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardParams {
    fn default() -> Self {
        Self { theta: 0.5, tol: 1e-13, max_iter: 400 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureParams {
    /// Koiter coefficients; `delta_reg` and `zeta` are the scheme's `δ` and `ζ`.
    pub elastic: ElasticityParams,
    /// Penalty weight `δ ∈ (0, 1)`.
    pub delta: f64,
    pub tau: f64,
    /// Sub-steps per window (`Δt = τ/K`, `K ≥ 10`).
    pub substeps: usize,
    /// Keep the `(1 − δ)` inertia factor (otherwise use 1).
    pub keep_inertia_factor: bool,
    pub picard: PicardParams,
    pub rule: DerivativeRule,
}

impl StructureParams {
    pub fn validate(&self) -> Result<(), StructureError> {
        self.elastic.validate()?;
        let mut v = Vec::new();
        if !(self.delta > 0.0 && self.delta < 1.0) {
            v.push(format!("delta must lie in (0, 1) (got {})", self.delta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            v.push(format!("tau must be positive (got {})", self.tau));
        }
        if self.substeps < 10 {
            v.push(format!("at least 10 sub-steps per window are required (got {})", self.substeps));
        }
        if !(self.picard.theta > 0.0 && self.picard.theta <= 1.0) {
            v.push(format!("picard damping must lie in (0, 1] (got {})", self.picard.theta));
        }
        if !(self.picard.tol > 0.0) || self.picard.max_iter == 0 {
            v.push("picard tolerance and iteration cap must be positive".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(StructureError::InvalidParams(v.join("; ")))
        }
    }

    pub fn inertia(&self) -> f64 {
        if self.keep_inertia_factor {
            1.0 - self.delta
        } else {
            1.0
        }
    }
}

/// Shell displacement and velocity with their values at the window start.
#[derive(Clone, Debug, PartialEq)]
pub struct ShellState {
    pub eta: Vec<f64>,
    pub w: Vec<f64>,
    pub eta_start: Vec<f64>,
    pub w_start: Vec<f64>,
}

impl ShellState {
    pub fn new(eta: Vec<f64>, w: Vec<f64>) -> Self {
        Self { eta_start: eta.clone(), w_start: w.clone(), eta, w }
    }

    pub fn at_rest(n: usize) -> Self {
        Self::new(vec![0.0; n], vec![0.0; n])
    }
}

/// Forward differences `(f(·+e_a) − f)/h_a`.
fn forward_diff(grid: &ParamGrid, f: &[f64], a: usize) -> Vec<f64> {
    let h = if a == 0 { grid.h1 } else { grid.h2 };
    par::map(grid.len(), |n| {
        let (i, j) = grid.coords(n);
        let (i, j) = (i as isize, j as isize);
        let m = if a == 0 { grid.index(i + 1, j) } else { grid.index(i, j + 1) };
        (f[m] - f[n]) / h
    })
}

/// `Dᵀ g` for the forward difference along `a`.
fn forward_diff_t(grid: &ParamGrid, g: &[f64], a: usize) -> Vec<f64> {
    let h = if a == 0 { grid.h1 } else { grid.h2 };
    par::map(grid.len(), |n| {
        let (i, j) = grid.coords(n);
        let (i, j) = (i as isize, j as isize);
        let m = if a == 0 { grid.index(i - 1, j) } else { grid.index(i, j - 1) };
        (g[m] - g[n]) / h
    })
}

/// `⟨a, b⟩ = Σ w_n a_n b_n`.
pub fn l2_pairing(geom: &ReferenceGeometry, a: &[f64], b: &[f64]) -> f64 {
    par::sum(a.len(), |n| geom.node_weight(n) * a[n] * b[n])
}

/// `⟨∇a, ∇b⟩` with forward differences.
pub fn gradient_pairing(geom: &ReferenceGeometry, a: &[f64], b: &[f64]) -> f64 {
    let g = &geom.grid;
    let mut s = 0.0;
    for ax in 0..2 {
        let da = forward_diff(g, a, ax);
        let db = forward_diff(g, b, ax);
        s += par::sum(a.len(), |n| geom.node_weight(n) * da[n] * db[n]);
    }
    s
}

/// `Σ_a D_aᵀ W D_a f`.
fn gradient_normal_operator(geom: &ReferenceGeometry, f: &[f64]) -> Vec<f64> {
    let g = &geom.grid;
    let mut out = vec![0.0; f.len()];
    for ax in 0..2 {
        let d = forward_diff(g, f, ax);
        let wd: Vec<f64> = d.iter().enumerate().map(|(n, v)| geom.node_weight(n) * v).collect();
        let t = forward_diff_t(g, &wd, ax);
        out.iter_mut().zip(t).for_each(|(o, v)| *o += v);
    }
    out
}

/// Coefficients and data of one sub-step.
pub struct SubstepSystem<'a> {
    pub geom: &'a ReferenceGeometry,
    pub params: &'a StructureParams,
    pub dt: f64,
    pub eta_m: Vec<f64>,
    pub w_m: Vec<f64>,
    /// Normal component of the lagged trace on this sub-step.
    pub v_bar: Vec<f64>,
    /// `c₀ = (1 − δ) + δΔt/τ`.
    pub inertia_weight: f64,
    /// `δ⁷Δt²`.
    pub reg_weight: f64,
    /// `ζΔt`.
    pub diss_weight: f64,
    third: ThirdDifference,
    grad_m: Vec<f64>,
    rhs_fixed: Vec<f64>,
    unreg: ElasticityParams,
}

impl<'a> SubstepSystem<'a> {
    pub fn new(
        geom: &'a ReferenceGeometry,
        params: &'a StructureParams,
        dt: f64,
        eta_m: &[f64],
        w_m: &[f64],
        v_bar: &[f64],
    ) -> Result<Self, StructureError> {
        let n = geom.grid.len();
        for l in [eta_m.len(), w_m.len(), v_bar.len()] {
            if l != n {
                return Err(StructureError::SizeMismatch { expected: n, got: l });
            }
        }
        let delta = params.delta;
        let inertia_weight = params.inertia() + delta * dt / params.tau;
        let reg_weight = params.elastic.reg_weight() * dt * dt;
        let diss_weight = params.elastic.zeta * dt;
        let unreg = ElasticityParams { delta_reg: 0.0, ..params.elastic };
        let grad_m = koiter_gradient_unregularized(geom, eta_m, &unreg);
        let lap_m = gradient_normal_operator(geom, eta_m);
        let rhs_fixed = par::map(n, |k| {
            let w = geom.node_weight(k);
            inertia_weight * w * eta_m[k]
                + diss_weight * lap_m[k]
                + params.inertia() * dt * w * w_m[k]
                + delta * dt * dt / params.tau * w * v_bar[k]
        });
        Ok(Self {
            geom,
            params,
            dt,
            eta_m: eta_m.to_vec(),
            w_m: w_m.to_vec(),
            v_bar: v_bar.to_vec(),
            inertia_weight,
            reg_weight,
            diss_weight,
            third: ThirdDifference::new(&geom.grid),
            grad_m,
            rhs_fixed,
            unreg,
        })
    }

    /// The constant left-side operator applied to `x`.
    pub fn apply_lhs(&self, x: &[f64]) -> Vec<f64> {
        let lap = gradient_normal_operator(self.geom, x);
        let reg = if self.reg_weight > 0.0 { Some(self.third.normal_operator(self.geom, x)) } else { None };
        (0..x.len())
            .map(|k| {
                let mut v = self.inertia_weight * self.geom.node_weight(k) * x[k] + self.diss_weight * lap[k];
                if let Some(r) = &reg {
                    v += self.reg_weight * r[k];
                }
                v
            })
            .collect()
    }

    /// Right side `ℒ(η)` (depends on `η` through the Koiter term).
    pub fn rhs(&self, eta: &[f64]) -> Vec<f64> {
        let g = discrete_koiter_gradient_with(self.geom, eta, &self.eta_m, &self.grad_m, &self.unreg, self.params.rule);
        let dt2 = self.dt * self.dt;
        self.rhs_fixed.iter().zip(g).map(|(r, g)| r - dt2 * g).collect()
    }

    /// L² norm on `Γ` of a nodal weak-form vector (divided by the node weights).
    pub fn dual_norm(&self, r: &[f64]) -> f64 {
        par::sum(r.len(), |k| r[k] * r[k] / self.geom.node_weight(k)).sqrt()
    }

    /// Jacobi preconditioner (inertia and dissipation parts).
    fn diagonal(&self) -> Vec<f64> {
        let g = &self.geom.grid;
        (0..g.len())
            .map(|k| {
                let (i, j) = g.coords(k);
                let (i, j) = (i as isize, j as isize);
                let w = self.geom.node_weight(k);
                let wl = self.geom.node_weight(g.index(i - 1, j));
                let wb = self.geom.node_weight(g.index(i, j - 1));
                self.inertia_weight * w + self.diss_weight * ((w + wl) / (g.h1 * g.h1) + (w + wb) / (g.h2 * g.h2))
            })
            .collect()
    }

    /// Solve the left-side system by preconditioned CG from `x0`.
    pub fn solve_lhs(&self, b: &[f64], x0: &[f64], rel_tol: f64) -> Vec<f64> {
        let diag = self.diagonal();
        let mut x = x0.to_vec();
        let ax = self.apply_lhs(&x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let bnorm = dot(b, b).sqrt();
        if bnorm == 0.0 {
            return vec![0.0; b.len()];
        }
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for _ in 0..(4 * b.len()).max(100) {
            if dot(&r, &r).sqrt() <= rel_tol * bnorm {
                break;
            }
            let ap = self.apply_lhs(&p);
            let alpha = rz / dot(&p, &ap);
            for k in 0..x.len() {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            z = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..p.len() {
                p[k] = z[k] + beta * p[k];
            }
        }
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    par::sum(a.len(), |k| a[k] * b[k])
}

/// Weak-form residual `A η − ℒ(η)` at the nodes.
pub fn substep_residual(sys: &SubstepSystem<'_>, eta: &[f64]) -> Vec<f64> {
    let a = sys.apply_lhs(eta);
    let r = sys.rhs(eta);
    a.into_iter().zip(r).map(|(a, r)| a - r).collect()
}

/// The same residual assembled node by node from the energy pairings
/// (independent path, `O(N²)`; intended for verification).
pub fn substep_residual_by_pairing(sys: &SubstepSystem<'_>, eta: &[f64]) -> Vec<f64> {
    let g = sys.geom;
    let n = eta.len();
    let d: Vec<f64> = eta.iter().zip(&sys.eta_m).map(|(a, b)| a - b).collect();
    let p = sys.params;
    let dt = sys.dt;
    let third = ThirdDifference::new(&g.grid);
    (0..n)
        .map(|k| {
            let mut b = vec![0.0; n];
            b[k] = 1.0;
            let mut r = sys.inertia_weight * l2_pairing(g, &d, &b) + sys.diss_weight * gradient_pairing(g, &d, &b)
                - p.inertia() * dt * l2_pairing(g, &sys.w_m, &b)
                - p.delta * dt * dt / p.tau * l2_pairing(g, &sys.v_bar, &b);
            if sys.reg_weight > 0.0 {
                r += sys.reg_weight * third.pairing(g, eta, &b);
            }
            r + dt * dt * discrete_koiter_derivative(g, eta, &sys.eta_m, &b, &sys.unreg)
        })
        .collect()
}

/// Result of a converged fixed-point solve.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoint {
    pub eta: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Damped Picard iteration `η ← (1−θ)η + θ A⁻¹ℒ(η)` from `η^m + Δt w^m`.
pub fn fixed_point_solve(sys: &SubstepSystem<'_>, picard: &PicardParams) -> Result<FixedPoint, StructureError> {
    let mut eta: Vec<f64> = sys.eta_m.iter().zip(&sys.w_m).map(|(e, w)| e + sys.dt * w).collect();
    let mut last = f64::INFINITY;
    for it in 0..=picard.max_iter {
        let b = sys.rhs(&eta);
        let ax = sys.apply_lhs(&eta);
        let res: Vec<f64> = ax.iter().zip(&b).map(|(a, b)| a - b).collect();
        let rn = sys.dual_norm(&res);
        let bn = sys.dual_norm(&b);
        last = rn;
        if rn <= picard.tol * bn || rn == 0.0 {
            return Ok(FixedPoint { eta, iterations: it, residual: rn });
        }
        if !rn.is_finite() || it == picard.max_iter {
            break;
        }
        let f = sys.solve_lhs(&b, &eta, 1e-15);
        for (e, f) in eta.iter_mut().zip(f) {
            *e = (1.0 - picard.theta) * *e + picard.theta * f;
        }
    }
    Err(StructureError::NonConvergence { iterations: picard.max_iter, residual: last })
}

/// Energy bookkeeping of one sub-step (all terms already multiplied by `Δt`
/// where they are rates).
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SubstepRecord {
    pub t: f64,
    /// `½‖w‖²`.
    pub kinetic_shell: f64,
    /// Unregularised Koiter energy `K(η)`.
    pub koiter: f64,
    /// `½δ⁷‖∇³η‖²`.
    pub koiter_reg: f64,
    /// `ζΔt‖∇w‖²`.
    pub dissipation_zeta: f64,
    /// `δΔt/2τ ‖v̄‖²`.
    pub penalty_in: f64,
    /// `δΔt/2τ ‖w − v̄‖²`.
    pub penalty_mismatch: f64,
    /// `δΔt/2τ ‖w‖²`.
    pub penalty_trace: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub iterations: usize,
}

impl SubstepRecord {
    /// Slack relative to the magnitude of the balance.
    pub fn relative_slack(&self) -> f64 {
        self.slack / self.lhs.abs().max(self.rhs.abs()).max(1e-300)
    }
}

/// Lagged fluid trace (normal components) sampled on `K` equal time slots.
#[derive(Clone, Debug, PartialEq)]
pub struct LaggedTrace {
    pub slots: Vec<Vec<f64>>,
}

impl LaggedTrace {
    /// The same field on every slot (e.g. `v⁰ = η₁ν` before the first window).
    pub fn constant(v: Vec<f64>) -> Self {
        Self { slots: vec![v] }
    }

    /// Slot covering sub-step `m` of `k` (time-aligned).
    pub fn sample(&self, m: usize, k: usize) -> &[f64] {
        let s = self.slots.len();
        &self.slots[(m * s / k).min(s - 1)]
    }
}

/// Outcome of one window.
#[derive(Clone, Debug)]
pub struct WindowOutput {
    pub state: ShellState,
    pub records: Vec<SubstepRecord>,
    /// `w^{m+1}` after every sub-step.
    pub slot_velocity: Vec<Vec<f64>>,
    pub substeps: usize,
    pub halvings: usize,
}

fn energy_terms(geom: &ReferenceGeometry, p: &StructureParams, eta: &[f64]) -> (f64, f64) {
    let k = koiter_parts(geom, eta, &p.elastic);
    (k.koiter(), k.regularization)
}

/// Displacement stays in the band and `γ̄` stays positive.
pub fn admissibility(geom: &ReferenceGeometry, eta: &[f64]) -> Result<(), Degeneracy> {
    let b = geom.band;
    for (node, &v) in eta.iter().enumerate() {
        if !b.contains(v) {
            let margin = (v - b.lower).min(b.upper - v) / b.width();
            return Err(Degeneracy::FirstKind { node, value: v, margin });
        }
    }
    let gb = gamma_bar(geom, eta);
    if let Some((node, &g)) = gb.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
        if g <= 0.0 {
            return Err(Degeneracy::SecondKind { node, gamma_min: g });
        }
    }
    Ok(())
}

fn try_window(
    geom: &ReferenceGeometry,
    state: &ShellState,
    lagged: &LaggedTrace,
    params: &StructureParams,
    t0: f64,
    k: usize,
) -> Result<WindowOutput, StructureError> {
    let dt = params.tau / k as f64;
    let n = geom.grid.len();
    let mut eta = state.eta.clone();
    let mut w = state.w.clone();
    let (mut kin_e, mut reg_e) = energy_terms(geom, params, &eta);
    let inertia = params.inertia();
    let pen = params.delta * dt / (2.0 * params.tau);
    let mut records = Vec::with_capacity(k);
    let mut slots = Vec::with_capacity(k);
    for m in 0..k {
        let v_bar = lagged.sample(m, k);
        let sys = SubstepSystem::new(geom, params, dt, &eta, &w, v_bar)?;
        let fp = fixed_point_solve(&sys, &params.picard)?;
        let w_new: Vec<f64> = (0..n).map(|i| (fp.eta[i] - eta[i]) / dt).collect();
        admissibility(geom, &fp.eta).map_err(StructureError::Degenerate)?;
        let (kn, rn) = energy_terms(geom, params, &fp.eta);
        let mism: Vec<f64> = w_new.iter().zip(v_bar).map(|(a, b)| a - b).collect();
        let rec_kin = 0.5 * l2_pairing(geom, &w_new, &w_new);
        let zeta = params.elastic.zeta * dt * gradient_pairing(geom, &w_new, &w_new);
        let p_in = pen * l2_pairing(geom, v_bar, v_bar);
        let p_mis = pen * l2_pairing(geom, &mism, &mism);
        let p_tr = pen * l2_pairing(geom, &w_new, &w_new);
        let lhs = inertia * rec_kin + kn + rn + zeta + p_mis + p_tr;
        let rhs = inertia * 0.5 * l2_pairing(geom, &w, &w) + kin_e + reg_e + p_in;
        records.push(SubstepRecord {
            t: t0 + (m + 1) as f64 * dt,
            kinetic_shell: rec_kin,
            koiter: kn,
            koiter_reg: rn,
            dissipation_zeta: zeta,
            penalty_in: p_in,
            penalty_mismatch: p_mis,
            penalty_trace: p_tr,
            lhs,
            rhs,
            slack: rhs - lhs,
            iterations: fp.iterations,
        });
        slots.push(w_new.clone());
        eta = fp.eta;
        w = w_new;
        kin_e = kn;
        reg_e = rn;
    }
    Ok(WindowOutput {
        state: ShellState { eta_start: state.eta.clone(), w_start: state.w.clone(), eta, w },
        records,
        slot_velocity: slots,
        substeps: k,
        halvings: 0,
    })
}

/// Advance the shell over one window consuming the lagged trace. On Picard
/// failure the sub-step is halved (up to [`MAX_HALVINGS`] times).
pub fn advance_window(
    geom: &ReferenceGeometry,
    state: &ShellState,
    lagged: &LaggedTrace,
    params: &StructureParams,
    t0: f64,
) -> Result<WindowOutput, StructureError> {
    params.validate()?;
    let n = geom.grid.len();
    for l in [state.eta.len(), state.w.len()].into_iter().chain(lagged.slots.iter().map(|s| s.len())) {
        if l != n {
            return Err(StructureError::SizeMismatch { expected: n, got: l });
        }
    }
    if lagged.slots.is_empty() {
        return Err(StructureError::InvalidParams("lagged trace has no slots".into()));
    }
    let mut k = params.substeps;
    let mut last_err = None;
    for halvings in 0..=MAX_HALVINGS {
        match try_window(geom, state, lagged, params, t0, k) {
            Ok(mut out) => {
                out.halvings = halvings;
                return Ok(out);
            }
            Err(e @ StructureError::NonConvergence { .. }) => {
                last_err = Some(e);
                k *= 2;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_reference, SurfaceKind};

    fn flat(n: usize) -> ReferenceGeometry {
        build_reference(&SurfaceKind::FlatSlab { half_width: 0.2 }, ParamGrid::periodic(n, 4, 1.0, 0.25).unwrap())
            .unwrap()
    }

    fn params() -> StructureParams {
        StructureParams {
            elastic: ElasticityParams { lambda_s: 10.0, mu_s: 10.0, h_thick: 0.1, delta_reg: 0.1, zeta: 0.01 },
            delta: 0.1,
            tau: 1e-2,
            substeps: 10,
            keep_inertia_factor: true,
            picard: PicardParams::default(),
            rule: DerivativeRule::Simpson,
        }
    }

    #[test]
    fn gradient_operator_is_adjoint_of_pairing() {
        let g = flat(8);
        let a: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..32).map(|i| (i as f64 * 1.3).cos()).collect();
        let l = gradient_normal_operator(&g, &a);
        let lhs: f64 = l.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((lhs - gradient_pairing(&g, &a, &b)).abs() < 1e-12);
    }

    #[test]
    fn rest_stays_at_rest() {
        let g = flat(16);
        let p = params();
        let s = ShellState::at_rest(64);
        let out = advance_window(&g, &s, &LaggedTrace::constant(vec![0.0; 64]), &p, 0.0).unwrap();
        assert!(out.state.eta.iter().all(|&v| v == 0.0));
        assert!(out.records.iter().all(|r| r.slack == 0.0));
    }

    #[test]
    fn cg_solves_lhs() {
        let g = flat(16);
        let p = params();
        let z = vec![0.0; 64];
        let sys = SubstepSystem::new(&g, &p, 1e-3, &z, &z, &z).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        let b = sys.apply_lhs(&x);
        let y = sys.solve_lhs(&b, &z, 1e-14);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}
