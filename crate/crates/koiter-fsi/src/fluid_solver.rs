//! Fictitious-domain kernels for the two-density, one-velocity fluid on a
//! fixed box `B`.
//!
//! Cells are collocated and indexed `i + nx (j + ny k)`. Each axis is either
//! periodic or bounded by a no-slip wall (ghost velocity `−u`, zero face
//! velocity). A trivial axis (`n = 1`, periodic) reduces the dimension.
//!
//! One step consists of
//! - a conservative first-order upwind update of `ρ` and `Z` with one shared
//!   face-flux operator (so positivity and the cone `a̲ρ ≤ Z ≤ āρ` carry over),
//! - a momentum update with upwind convection, face-based viscous stress,
//!   central pressure gradient, and a pointwise-implicit treatment of the
//!   stiff parts: the diagonal of the viscous operator and the `δ/τ`
//!   Brinkman relaxation toward the shell velocity spread onto the cells
//!   around the interface.

use crate::geometry::{deformed_surface, FlowMap, GeometryError, ReferenceGeometry, V3};
use crate::par;
use crate::pressure::{HelmholtzLaw, PressureError, PressureFn};
use thiserror::Error;

/// Velocity is reconstructed only where `ρ + Z` exceeds this.
pub const DENSITY_FLOOR: f64 = 1e-12;
/// Bound on `dt Σ_a max|u_a| / h_a`.
pub const CFL_LIMIT: f64 = 0.45;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error("invalid fluid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("CFL condition violated: dt·Σ max|u|/h = {0} > {CFL_LIMIT}")]
    Cfl(f64),
    #[error("implicit velocity iteration did not converge in {iterations} iterations (change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },
    #[error("surface node {node} at ({:.6}, {:.6}, {:.6}) lies outside the fluid box", pos[0], pos[1], pos[2])]
    OutsideBox { node: usize, pos: [f64; 3] },
    #[error("field length {got} does not match the grid ({expected} cells)")]
    SizeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Pressure(#[from] PressureError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
    Wall,
}

/// Uniform box grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FluidGrid {
    pub n: [usize; 3],
    pub lo: [f64; 3],
    pub h: [f64; 3],
    pub bc: [Boundary; 3],
}

impl FluidGrid {
    pub fn new(n: [usize; 3], lo: [f64; 3], hi: [f64; 3], bc: [Boundary; 3]) -> Result<Self, FluidError> {
        let mut h = [0.0; 3];
        for a in 0..3 {
            if n[a] == 0 {
                return Err(FluidError::InvalidGrid(format!("axis {a} has no cells")));
            }
            if !(hi[a] > lo[a]) || !hi[a].is_finite() || !lo[a].is_finite() {
                return Err(FluidError::InvalidGrid(format!("axis {a}: empty extent [{}, {}]", lo[a], hi[a])));
            }
            if n[a] == 1 && bc[a] == Boundary::Wall {
                return Err(FluidError::InvalidGrid(format!("axis {a}: a single cell needs a periodic axis")));
            }
            if n[a] > 1 && n[a] < 3 && bc[a] == Boundary::Periodic {
                return Err(FluidError::InvalidGrid(format!("axis {a}: periodic axes need 1 or ≥ 3 cells")));
            }
            h[a] = (hi[a] - lo[a]) / n[a] as f64;
        }
        Ok(Self { n, lo, h, bc })
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hi(&self, a: usize) -> f64 {
        self.lo[a] + self.h[a] * self.n[a] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.h[0] * self.h[1] * self.h[2]
    }

    pub fn box_volume(&self) -> f64 {
        self.cell_volume() * self.len() as f64
    }

    /// Axes along which the solution may vary.
    pub fn active(&self, a: usize) -> bool {
        self.n[a] > 1
    }

    pub fn index(&self, i: [usize; 3]) -> usize {
        i[0] + self.n[0] * (i[1] + self.n[1] * i[2])
    }

    pub fn coords(&self, c: usize) -> [usize; 3] {
        let i = c % self.n[0];
        let r = c / self.n[0];
        [i, r % self.n[1], r / self.n[1]]
    }

    pub fn center(&self, c: usize) -> V3 {
        let i = self.coords(c);
        V3::new(
            self.lo[0] + (i[0] as f64 + 0.5) * self.h[0],
            self.lo[1] + (i[1] as f64 + 0.5) * self.h[1],
            self.lo[2] + (i[2] as f64 + 0.5) * self.h[2],
        )
    }

    /// Neighbour of `c` along axis `a`; `None` across a wall.
    pub fn neighbor(&self, c: usize, a: usize, plus: bool) -> Option<usize> {
        let mut i = self.coords(c);
        let n = self.n[a];
        if plus {
            if i[a] + 1 == n {
                if self.bc[a] == Boundary::Wall {
                    return None;
                }
                i[a] = 0;
            } else {
                i[a] += 1;
            }
        } else if i[a] == 0 {
            if self.bc[a] == Boundary::Wall {
                return None;
            }
            i[a] = n - 1;
        } else {
            i[a] -= 1;
        }
        Some(self.index(i))
    }

    /// Whether `p` lies in the closed box (periodic axes always qualify).
    pub fn contains(&self, p: &V3) -> bool {
        (0..3).all(|a| self.bc[a] == Boundary::Periodic || (p[a] >= self.lo[a] && p[a] <= self.hi(a)))
    }

    /// Trilinear interpolation stencil at `p`: eight `(cell, weight)` pairs with
    /// non-negative weights summing to one. Near walls the stencil is clamped
    /// to the first/last cell centre.
    pub fn trilinear(&self, p: &V3) -> [(usize, f64); 8] {
        let mut idx = [[0usize; 2]; 3];
        let mut wt = [[0.0f64; 2]; 3];
        for a in 0..3 {
            let n = self.n[a];
            if n == 1 {
                idx[a] = [0, 0];
                wt[a] = [1.0, 0.0];
                continue;
            }
            let s = (p[a] - self.lo[a]) / self.h[a] - 0.5;
            let f = s.floor();
            let t = s - f;
            let i0 = f as isize;
            match self.bc[a] {
                Boundary::Periodic => {
                    let w = |k: isize| k.rem_euclid(n as isize) as usize;
                    idx[a] = [w(i0), w(i0 + 1)];
                    wt[a] = [1.0 - t, t];
                }
                Boundary::Wall => {
                    if i0 < 0 {
                        idx[a] = [0, 0];
                        wt[a] = [1.0, 0.0];
                    } else if i0 as usize >= n - 1 {
                        idx[a] = [n - 1, n - 1];
                        wt[a] = [1.0, 0.0];
                    } else {
                        idx[a] = [i0 as usize, i0 as usize + 1];
                        wt[a] = [1.0 - t, t];
                    }
                }
            }
        }
        let mut out = [(0usize, 0.0); 8];
        for (k, o) in out.iter_mut().enumerate() {
            let (b0, b1, b2) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            *o = (self.index([idx[0][b0], idx[1][b1], idx[2][b2]]), wt[0][b0] * wt[1][b1] * wt[2][b2]);
        }
        out
    }
}

/// Cell densities and velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct FluidState {
    pub rho: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<[f64; 3]>,
    pub time: f64,
}

impl FluidState {
    pub fn zeros(grid: &FluidGrid) -> Self {
        Self::uniform(grid, 0.0, 0.0, [0.0; 3])
    }

    pub fn uniform(grid: &FluidGrid, rho: f64, z: f64, u: [f64; 3]) -> Self {
        let n = grid.len();
        Self { rho: vec![rho; n], z: vec![z; n], u: vec![u; n], time: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn check(&self, grid: &FluidGrid) -> Result<(), FluidError> {
        let expected = grid.len();
        for got in [self.rho.len(), self.z.len(), self.u.len()] {
            if got != expected {
                return Err(FluidError::SizeMismatch { expected, got });
            }
        }
        Ok(())
    }

    /// Total masses `(∫ρ, ∫Z)`.
    pub fn masses(&self, grid: &FluidGrid) -> (f64, f64) {
        let v = grid.cell_volume();
        let [a, b] = par::sum_n(self.len(), |c| [self.rho[c], self.z[c]]);
        (a * v, b * v)
    }

    /// First cell violating `a̲ρ ≤ Z ≤ āρ` (relative slack `tol`).
    pub fn cone_violation(&self, a_lower: f64, a_upper: f64, tol: f64) -> Option<usize> {
        (0..self.len()).find(|&c| {
            let (r, z) = (self.rho[c], self.z[c]);
            let s = tol * (r + z);
            r < 0.0 || z < 0.0 || z < a_lower * r - s || z > a_upper * r + s
        })
    }
}

/// Cell viscosities after the degenerate extension outside the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ViscosityField {
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl ViscosityField {
    pub fn uniform(grid: &FluidGrid, mu: f64, lambda: f64) -> Self {
        Self { mu: vec![mu; grid.len()], lambda: vec![lambda; grid.len()] }
    }

    pub fn max_mu(&self) -> f64 {
        self.mu.iter().copied().fold(0.0, f64::max)
    }
}

/// Exterior profile `g_ω(d)` at distance `d > 0` from the domain.
pub fn extension_profile(d: f64, omega: f64) -> f64 {
    let g = if d < omega {
        let t = 1.0 - d / omega;
        2.0 * omega + (1.0 - 2.0 * omega) * t * t
    } else {
        omega * (1.0 + (-(d - omega) / omega).exp())
    };
    g.min(1.0)
}

/// Signed distance of every cell centre's reference preimage (negative in `Ω_η`).
pub fn preimage_distances(grid: &FluidGrid, geom: &ReferenceGeometry, eta: &[f64]) -> Result<Vec<f64>, FluidError> {
    let fm = FlowMap::new(geom, eta)?;
    let d = par::map(grid.len(), |c| fm.preimage_distance(&grid.center(c)));
    d.into_iter()
        .map(|r| r.map(|o| o.unwrap_or(f64::INFINITY)).map_err(FluidError::from))
        .collect()
}

/// `μ_ω = f_ω μ`, `λ_ω = f_ω λ` with `f_ω = 1` in `Ω_η` and `g_ω` outside.
pub fn extend_viscosity(
    grid: &FluidGrid,
    geom: &ReferenceGeometry,
    eta: &[f64],
    omega: f64,
    mu: f64,
    lambda: f64,
) -> Result<ViscosityField, FluidError> {
    if !(omega > 0.0 && omega < 1.0) {
        return Err(FluidError::InvalidParameter(format!("omega must lie in (0, 1) (got {omega})")));
    }
    let d = preimage_distances(grid, geom, eta)?;
    Ok(viscosity_from_distances(&d, omega, mu, lambda))
}

pub fn viscosity_from_distances(d: &[f64], omega: f64, mu: f64, lambda: f64) -> ViscosityField {
    let f: Vec<f64> = d.iter().map(|&d| if d <= 0.0 { 1.0 } else { extension_profile(d, omega) }).collect();
    ViscosityField { mu: f.iter().map(|f| f * mu).collect(), lambda: f.iter().map(|f| f * lambda).collect() }
}

/// `dt Σ_a max|u_a| / h_a` over the active axes.
pub fn cfl_number(grid: &FluidGrid, u: &[[f64; 3]], dt: f64) -> f64 {
    (0..3)
        .filter(|&a| grid.active(a))
        .map(|a| dt * par::max(u.len(), |c| u[c][a].abs()).max(0.0) / grid.h[a])
        .sum()
}

/// Step keeping advective plus acoustic transport within the CFL bound
/// (with a safety factor); viscosity is implicit and imposes no limit.
pub fn stable_dt<P: PressureFn>(grid: &FluidGrid, state: &FluidState, p: &P) -> f64 {
    let mut rate = 0.0;
    for a in (0..3).filter(|&a| grid.active(a)) {
        let amax = par::max(state.len(), |c| {
            let d = state.rho[c] + state.z[c];
            state.u[c][a].abs() + sound_speed(p, state.rho[c], state.z[c], d)
        });
        rate += amax.max(0.0) / grid.h[a];
    }
    let dt = if rate > 0.0 { CFL_LIMIT / rate } else { f64::INFINITY };
    0.9 * dt
}

/// Sound speed `√(∂P/∂(ρ+Z))` along the ray of fixed ratio `Z/ρ`.
fn sound_speed<P: PressureFn>(p: &P, rho: f64, z: f64, d: f64) -> f64 {
    if d <= DENSITY_FLOOR {
        return 0.0;
    }
    let e = 1e-6;
    let dp = p.pressure(rho * (1.0 + e), z * (1.0 + e)) - p.pressure(rho * (1.0 - e), z * (1.0 - e));
    (dp / (2.0 * e * d)).abs().sqrt()
}

/// Weight of the left cell in a face average: its share of the mass `d`.
#[inline]
fn face_weight(d: &[f64], l: usize, r: usize) -> f64 {
    let s = d[l] + d[r];
    if s > 0.0 {
        d[l] / s
    } else {
        0.5
    }
}

/// Mass-weighted face velocity between `l` and `r` along axis `a`. Empty
/// cells neither drag mass nor get pushed by it.
#[inline]
fn face_velocity(u: &[[f64; 3]], d: &[f64], a: usize, l: usize, r: usize) -> f64 {
    let wl = face_weight(d, l, r);
    wl * u[l][a] + (1.0 - wl) * u[r][a]
}

/// Face data `(u_f, ρ_f, Z_f, upwind cell)`; the fluxes are `u_f ρ_f`, `u_f Z_f`. The face carries the donor's
/// composition; its mass ramps from `min(d_l, d_r)` at rest to the donor's
/// over `|u_f| < eps`, so fluxes and forces stay continuous in the velocity.
#[inline]
#[allow(clippy::too_many_arguments)]
fn mass_flux(
    rho: &[f64],
    z: &[f64],
    u: &[[f64; 3]],
    d: &[f64],
    eps: f64,
    a: usize,
    l: usize,
    r: usize,
) -> (f64, f64, f64, usize) {
    let uf = face_velocity(u, d, a, l, r);
    let (up, other) = if uf > 0.0 { (l, r) } else { (r, l) };
    let theta = if d[up] > 0.0 && uf.abs() < eps {
        let t = uf.abs() / eps;
        t + (1.0 - t) * (d[other] / d[up]).min(1.0)
    } else {
        1.0
    };
    (uf, theta * rho[up], theta * z[up], up)
}

fn masses(rho: &[f64], z: &[f64]) -> Vec<f64> {
    rho.iter().zip(z).map(|(r, z)| r + z).collect()
}

/// Index of the face on the `+` side of cell `c` along axis `a`.
#[inline]
fn face_index(c: usize, a: usize) -> usize {
    3 * c + a
}

/// Upwind transport of `(ρ, Z)` by the velocity `u` with face ramps `eps`.
fn transport(grid: &FluidGrid, rho: &[f64], z: &[f64], u: &[[f64; 3]], eps: &[f64], dt: f64) -> (Vec<f64>, Vec<f64>) {
    let d = masses(rho, z);
    let out = par::map(grid.len(), |c| {
        let (mut dr, mut dz) = (0.0, 0.0);
        for a in (0..3).filter(|&a| grid.active(a)) {
            let k = dt / grid.h[a];
            if let Some(r) = grid.neighbor(c, a, true) {
                let (uf, fr, fz, _) = mass_flux(rho, z, u, &d, eps[face_index(c, a)], a, c, r);
                dr += k * uf * fr;
                dz += k * uf * fz;
            }
            if let Some(l) = grid.neighbor(c, a, false) {
                let (uf, fr, fz, _) = mass_flux(rho, z, u, &d, eps[face_index(l, a)], a, l, c);
                dr -= k * uf * fr;
                dz -= k * uf * fz;
            }
        }
        ((rho[c] - dr).max(0.0), (z[c] - dz).max(0.0))
    });
    out.into_iter().unzip()
}

/// Conservative upwind update of both densities with the state's velocity.
pub fn advance_continuity(grid: &FluidGrid, state: &FluidState, dt: f64) -> Result<(Vec<f64>, Vec<f64>), FluidError> {
    state.check(grid)?;
    let cfl = cfl_number(grid, &state.u, dt);
    if cfl > CFL_LIMIT {
        return Err(FluidError::Cfl(cfl));
    }
    Ok(transport(grid, &state.rho, &state.z, &state.u, &vec![0.0; 3 * grid.len()], dt))
}

/// Interface relaxation data on the cells: rate `k_c = (δ/τ) D_c / V_c` and
/// the target velocity `w̃_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Brinkman {
    pub coeff: Vec<f64>,
    pub target: Vec<[f64; 3]>,
}

/// Spreading/interpolation between cells and the nodes of a deformed surface.
#[derive(Clone, Debug)]
pub struct SurfaceCoupling {
    stencils: Vec<[(usize, f64); 8]>,
    area: Vec<f64>,
    deposit: Vec<f64>,
}

impl SurfaceCoupling {
    /// Surface nodes at `points` with quadrature weights `area`.
    pub fn new(grid: &FluidGrid, points: &[V3], area: &[f64]) -> Result<Self, FluidError> {
        if points.len() != area.len() {
            return Err(FluidError::SizeMismatch { expected: points.len(), got: area.len() });
        }
        let mut stencils = Vec::with_capacity(points.len());
        for (node, p) in points.iter().enumerate() {
            if !grid.contains(p) || !p.iter().all(|x| x.is_finite()) {
                return Err(FluidError::OutsideBox { node, pos: [p.x, p.y, p.z] });
            }
            stencils.push(grid.trilinear(p));
        }
        let mut deposit = vec![0.0; grid.len()];
        for (s, &a) in stencils.iter().zip(area) {
            for &(c, w) in s {
                deposit[c] += a * w;
            }
        }
        Ok(Self { stencils, area: area.to_vec(), deposit })
    }

    /// Coupling for the shell `φ + ην` with the reference quadrature weights.
    pub fn from_shell(grid: &FluidGrid, geom: &ReferenceGeometry, eta: &[f64]) -> Result<Self, FluidError> {
        let pts = deformed_surface(geom, eta)?;
        let area: Vec<f64> = (0..geom.grid.len()).map(|n| geom.node_weight(n)).collect();
        Self::new(grid, &pts, &area)
    }

    pub fn node_count(&self) -> usize {
        self.stencils.len()
    }

    pub fn area(&self) -> &[f64] {
        &self.area
    }

    /// `D_c = Σ_nodes dA · weight`.
    pub fn deposit(&self) -> &[f64] {
        &self.deposit
    }

    /// Trilinear trace of `u` at the nodes.
    pub fn trace(&self, u: &[[f64; 3]]) -> Vec<V3> {
        par::map(self.stencils.len(), |n| {
            let mut v = V3::zeros();
            for &(c, w) in &self.stencils[n] {
                v += V3::from(u[c]) * w;
            }
            v
        })
    }

    /// Brinkman data for nodal velocities `vel` (the adjoint of [`Self::trace`],
    /// normalised by the deposited area).
    pub fn brinkman(&self, grid: &FluidGrid, vel: &[V3], delta: f64, tau: f64) -> Brinkman {
        let mut acc = vec![V3::zeros(); grid.len()];
        for ((s, &a), v) in self.stencils.iter().zip(&self.area).zip(vel) {
            for &(c, w) in s {
                acc[c] += v * (a * w);
            }
        }
        let vol = grid.cell_volume();
        let coeff = self.deposit.iter().map(|d| delta / tau * d / vol).collect();
        let target = acc
            .iter()
            .zip(&self.deposit)
            .map(|(m, &d)| if d > 0.0 { [m.x / d, m.y / d, m.z / d] } else { [0.0; 3] })
            .collect();
        Brinkman { coeff, target }
    }
}

/// `v = Tr u` at the nodes of `φ_η(Γ)`.
pub fn compute_trace(
    grid: &FluidGrid,
    state: &FluidState,
    geom: &ReferenceGeometry,
    eta: &[f64],
) -> Result<Vec<V3>, FluidError> {
    state.check(grid)?;
    Ok(SurfaceCoupling::from_shell(grid, geom, eta)?.trace(&state.u))
}

/// Energy exchanged with the interface during one momentum step:
/// `½ dt Σ k V |u − w̃|²`, `½ dt Σ k V |u|²` and `½ dt Σ k V |w̃|²`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PenaltyReport {
    pub mismatch: f64,
    pub trace: f64,
    pub input: f64,
}

const NO_CELL: usize = usize::MAX;

/// Tables of the viscous operator for one viscosity field. Slot `2a` is the
/// `+` face along axis `a`, slot `2a + 1` the `−` face; wall faces use the
/// no-slip ghost `−u`.
struct ViscousOperator {
    active: [bool; 3],
    inv_2h: [f64; 3],
    nb: Vec<[usize; 6]>,
    /// `μ_f / h²` per face slot (the cell's own `μ` at walls).
    coef: Vec<[f64; 6]>,
    /// Bulk weight `μ/3 + λ`.
    beta: Vec<f64>,
}

impl ViscousOperator {
    fn new(grid: &FluidGrid, visc: &ViscosityField) -> Self {
        let n = grid.len();
        let active = [grid.active(0), grid.active(1), grid.active(2)];
        let mut nb = vec![[NO_CELL; 6]; n];
        let mut coef = vec![[0.0; 6]; n];
        for c in 0..n {
            for a in (0..3).filter(|&a| active[a]) {
                let h2 = grid.h[a] * grid.h[a];
                for (k, plus) in [(2 * a, true), (2 * a + 1, false)] {
                    match grid.neighbor(c, a, plus) {
                        Some(m) => {
                            nb[c][k] = m;
                            coef[c][k] = 0.5 * (visc.mu[c] + visc.mu[m]) / h2;
                        }
                        None => coef[c][k] = visc.mu[c] / h2,
                    }
                }
            }
        }
        let beta = (0..n).map(|c| visc.mu[c] / 3.0 + visc.lambda[c]).collect();
        let inv_2h = [0.5 / grid.h[0], 0.5 / grid.h[1], 0.5 / grid.h[2]];
        Self { active, inv_2h, nb, coef, beta }
    }

    fn len(&self) -> usize {
        self.nb.len()
    }

    /// Central divergence with no-slip ghosts.
    fn divergence(&self, u: &[[f64; 3]]) -> Vec<f64> {
        let mut div = vec![0.0; self.len()];
        self.divergence_into(u, &mut div);
        div
    }

    fn divergence_into(&self, u: &[[f64; 3]], div: &mut [f64]) {
        par::fill(div, |c| {
            let mut s = 0.0;
            for a in (0..3).filter(|&a| self.active[a]) {
                let (p, m) = (self.nb[c][2 * a], self.nb[c][2 * a + 1]);
                let up = if p == NO_CELL { -u[c][a] } else { u[p][a] };
                let um = if m == NO_CELL { -u[c][a] } else { u[m][a] };
                s += (up - um) * self.inv_2h[a];
            }
            s
        });
    }

    /// `out = A u`, with `⟨u, A u⟩ V = Φ(u)`; `div` is scratch space.
    fn apply_into(&self, u: &[[f64; 3]], div: &mut [f64], out: &mut [[f64; 3]]) {
        self.divergence_into(u, div);
        let div = &*div;
        par::fill(out, |c| {
            let mut out = [0.0; 3];
            for a in (0..3).filter(|&a| self.active[a]) {
                for k in [2 * a, 2 * a + 1] {
                    let m = self.nb[c][k];
                    let w = self.coef[c][k];
                    if m == NO_CELL {
                        for i in 0..3 {
                            out[i] += 4.0 * w * u[c][i];
                        }
                    } else {
                        for i in 0..3 {
                            out[i] += w * (u[c][i] - u[m][i]);
                        }
                    }
                }
                let gm = match self.nb[c][2 * a + 1] {
                    NO_CELL => c,
                    m => m,
                };
                let gp = match self.nb[c][2 * a] {
                    NO_CELL => c,
                    m => m,
                };
                out[a] += (self.beta[gm] * div[gm] - self.beta[gp] * div[gp]) * self.inv_2h[a];
            }
            out
        });
    }

    /// Approximate diagonal of `A` (exact for the face part).
    fn diagonal(&self) -> Vec<[f64; 3]> {
        par::map(self.len(), |c| {
            let mut out = [0.0; 3];
            for a in (0..3).filter(|&a| self.active[a]) {
                let mut lap = 0.0;
                let mut bulk = 0.0;
                for k in [2 * a, 2 * a + 1] {
                    let m = self.nb[c][k];
                    let q = self.inv_2h[a] * self.inv_2h[a];
                    if m == NO_CELL {
                        lap += 4.0 * self.coef[c][k];
                        bulk += self.beta[c] * q;
                    } else {
                        lap += self.coef[c][k];
                        bulk += self.beta[m] * q;
                    }
                }
                for (i, o) in out.iter_mut().enumerate() {
                    *o += lap;
                    if i == a {
                        *o += bulk;
                    }
                }
            }
            out
        })
    }

    /// Per-cell share of `Φ(u)/V`: half of each interior face, all of a
    /// wall face, and the bulk term.
    fn density(&self, u: &[[f64; 3]]) -> Vec<f64> {
        let div = self.divergence(u);
        par::map(self.len(), |c| {
            let mut s = self.beta[c] * div[c] * div[c];
            for a in (0..3).filter(|&a| self.active[a]) {
                for k in [2 * a, 2 * a + 1] {
                    let m = self.nb[c][k];
                    let w = self.coef[c][k];
                    s += if m == NO_CELL { 4.0 * w * norm2(&u[c]) } else { 0.5 * w * dist2(&u[c], &u[m]) };
                }
            }
            s
        })
    }
}

/// Density of the discrete dissipation
/// `Φ(u) = Σ_faces μ_f |[u]|²/h² + Σ_cells (μ/3 + λ)(div u)²` (per unit
/// volume, faces shared between their cells), a discrete form of
/// `∫ 𝕊(𝔻u):∇u` for no-slip or periodic boundaries. The viscous force is
/// `−½ ∂Φ/∂u`, so an implicit step dissipates exactly `dt Φ(u)`.
pub fn dissipation_density(grid: &FluidGrid, state: &FluidState, visc: &ViscosityField) -> Vec<f64> {
    ViscousOperator::new(grid, visc).density(&state.u)
}

#[inline]
fn norm2(a: &[f64; 3]) -> f64 {
    a[0] * a[0] + a[1] * a[1] + a[2] * a[2]
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Iterations of the implicit velocity fixed point.
pub const MAX_FIXED_POINT: usize = 60;
/// Relative velocity change at which the fixed point stops.
pub const FIXED_POINT_TOL: f64 = 1e-9;
const CG_TOL: f64 = 1e-10;
const CG_MAX: usize = 2000;

/// Solve `(diag(mass) + dt A) u = b` by Jacobi-preconditioned CG to a
/// relative residual `tol`. Rows with a vanishing diagonal are pinned to
/// zero.
fn solve_momentum(op: &ViscousOperator, mass: &[f64], dt: f64, b: &[[f64; 3]], x0: &[[f64; 3]], tol: f64) -> Vec<[f64; 3]> {
    let n = op.len();
    let vd = op.diagonal();
    let pre: Vec<[f64; 3]> = par::map(n, |c| {
        let mut p = [0.0; 3];
        for i in 0..3 {
            let d = mass[c] + dt * vd[c][i];
            p[i] = if d > 0.0 { 1.0 / d } else { 0.0 };
        }
        p
    });
    let pin = |v: [f64; 3], c: usize| {
        let mut v = v;
        for i in 0..3 {
            if pre[c][i] == 0.0 {
                v[i] = 0.0;
            }
        }
        v
    };
    let mut div = vec![0.0; n];
    let mut ax = vec![[0.0; 3]; n];
    // `ax = (diag(mass) + dt A) x` on unpinned rows.
    let apply = |x: &[[f64; 3]], div: &mut [f64], ax: &mut [[f64; 3]]| {
        op.apply_into(x, div, ax);
        for c in 0..n {
            for i in 0..3 {
                ax[c][i] = if pre[c][i] == 0.0 { x[c][i] } else { mass[c] * x[c][i] + dt * ax[c][i] };
            }
        }
    };
    let dot = |a: &[[f64; 3]], b: &[[f64; 3]]| par::sum(n, |c| a[c][0] * b[c][0] + a[c][1] * b[c][1] + a[c][2] * b[c][2]);
    let b: Vec<[f64; 3]> = (0..n).map(|c| pin(b[c], c)).collect();
    let mut x: Vec<[f64; 3]> = (0..n).map(|c| pin(x0[c], c)).collect();
    let bn = dot(&b, &b).sqrt();
    if bn == 0.0 {
        return vec![[0.0; 3]; n];
    }
    apply(&x, &mut div, &mut ax);
    let mut r: Vec<[f64; 3]> = (0..n).map(|c| [b[c][0] - ax[c][0], b[c][1] - ax[c][1], b[c][2] - ax[c][2]]).collect();
    let mut zv: Vec<[f64; 3]> = (0..n).map(|c| [r[c][0] * pre[c][0], r[c][1] * pre[c][1], r[c][2] * pre[c][2]]).collect();
    let mut p = zv.clone();
    let mut rz = dot(&r, &zv);
    for _ in 0..CG_MAX {
        if dot(&r, &r).sqrt() <= tol * bn {
            break;
        }
        apply(&p, &mut div, &mut ax);
        let alpha = rz / dot(&p, &ax);
        for c in 0..n {
            for i in 0..3 {
                x[c][i] += alpha * p[c][i];
                r[c][i] -= alpha * ax[c][i];
                zv[c][i] = r[c][i] * pre[c][i];
            }
        }
        let rz_new = dot(&r, &zv);
        let beta = rz_new / rz;
        rz = rz_new;
        for c in 0..n {
            for i in 0..3 {
                p[c][i] = zv[c][i] + beta * p[c][i];
            }
        }
    }
    x
}

/// Chemical potentials per cell. Empty cells take the density-weighted mean
/// ratio `Z/ρ` of their neighbours as the direction of differentiation.
pub fn potentials<P: HelmholtzLaw>(grid: &FluidGrid, state: &FluidState, law: &P) -> Vec<(f64, f64)> {
    par::map(grid.len(), |c| {
        let (r, z) = (state.rho[c], state.z[c]);
        if r > DENSITY_FLOOR {
            return law.potentials(r, z, z / r);
        }
        law.potentials(0.0, 0.0, neighbour_ratio(grid, &state.rho, &state.z, c))
    })
}

fn neighbour_ratio(grid: &FluidGrid, rho: &[f64], z: &[f64], c: usize) -> f64 {
    let (mut sr, mut sz) = (rho[c], z[c]);
    for a in (0..3).filter(|&a| grid.active(a)) {
        for plus in [true, false] {
            if let Some(k) = grid.neighbor(c, a, plus) {
                sr += rho[k];
                sz += z[k];
            }
        }
    }
    if sr > 0.0 {
        sz / sr
    } else {
        1.0
    }
}

const GL3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// Discrete gradient `μ̄` of `H` between two states:
/// `μ̄ · (x₁ − x₀) = H(x₁) − H(x₀)`.
fn discrete_potential<P: HelmholtzLaw>(law: &P, x0: (f64, f64), x1: (f64, f64), sigma: f64) -> (f64, f64) {
    let (dr, dz) = (x1.0 - x0.0, x1.1 - x0.1);
    let grad = |r: f64, z: f64| {
        if r > DENSITY_FLOOR {
            law.potentials(r, z, z / r)
        } else {
            law.potentials(0.0, 0.0, sigma)
        }
    };
    let size = dr.abs().max(dz.abs());
    let scale = x0.0.max(x0.1).max(x1.0).max(x1.1);
    if size == 0.0 || scale <= DENSITY_FLOOR {
        return grad(x0.0, x0.1);
    }
    if size > 1e-4 * scale {
        // Gonzalez midpoint gradient, exact by construction.
        let g = grad(0.5 * (x0.0 + x1.0), 0.5 * (x0.1 + x1.1));
        let gap = law.helmholtz_density(x1.0, x1.1) - law.helmholtz_density(x0.0, x0.1) - g.0 * dr - g.1 * dz;
        let q = gap / (dr * dr + dz * dz);
        return (g.0 + q * dr, g.1 + q * dz);
    }
    // Averaged vector field; exact up to O(|Δ|⁷) and free of cancellation.
    let mut m = (0.0, 0.0);
    for (s, w) in GL3 {
        let g = grad(x0.0 + s * dr, x0.1 + s * dz);
        m.0 += w * g.0;
        m.1 += w * g.1;
    }
    m
}

/// What one fluid step exchanged and dissipated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    /// `dt Φ(u)` at the new velocity.
    pub viscous: f64,
    pub penalty: PenaltyReport,
    pub cfl: f64,
    pub iterations: usize,
}

/// One implicit step: upwind transport of `(ρ, Z)` by the new velocity,
/// pressure in potential form with a discrete gradient of `H`, upwind
/// convection, viscosity and interface relaxation, all at the new velocity.
/// The fixed point in `u` reproduces the semi-discrete energy balance
/// exactly, up to the upwind and inertial numerical dissipation.
pub fn step<P: HelmholtzLaw>(
    grid: &FluidGrid,
    state: &FluidState,
    visc: &ViscosityField,
    law: &P,
    brinkman: Option<&Brinkman>,
    dt: f64,
) -> Result<(FluidState, StepReport), FluidError> {
    state.check(grid)?;
    let n = grid.len();
    for s in [visc.mu.len(), visc.lambda.len()] {
        if s != n {
            return Err(FluidError::SizeMismatch { expected: n, got: s });
        }
    }
    if let Some(b) = brinkman {
        for s in [b.coeff.len(), b.target.len()] {
            if s != n {
                return Err(FluidError::SizeMismatch { expected: n, got: s });
            }
        }
    }
    let (rho, z, u0) = (&state.rho, &state.z, &state.u);
    let d0 = masses(rho, z);
    let sigma: Vec<f64> = par::map(n, |c| neighbour_ratio(grid, rho, z, c));
    let (kb, wb) = match brinkman {
        Some(b) => (b.coeff.clone(), b.target.clone()),
        None => (vec![0.0; n], vec![[0.0; 3]; n]),
    };
    // Ramp widths bounding the sensitivity of the potential force to the
    // face velocity (the force jumps by ρ[μ]/h where the donor switches).
    let mu0 = potentials(grid, state, law);
    let eps: Vec<f64> = par::map(3 * n, |f| {
        let (c, a) = (f / 3, f % 3);
        match grid.neighbor(c, a, true) {
            Some(r) if grid.active(a) && d0[c] + d0[r] > 0.0 => {
                let jump = (mu0[r].0 - mu0[c].0).abs().max((mu0[r].1 - mu0[c].1).abs());
                16.0 * dt * jump * (d0[c] - d0[r]).abs() / (grid.h[a] * (d0[c] + d0[r]))
            }
            _ => 0.0,
        }
    });
    let vop = ViscousOperator::new(grid, visc);
    let mut u = u0.clone();
    let mut iterations = 0;
    let mut last = f64::INFINITY;
    let mut last_scale = 1.0;
    let (mut rho1, mut z1);
    loop {
        let cfl = cfl_number(grid, &u, dt);
        if cfl > CFL_LIMIT {
            return Err(FluidError::Cfl(cfl));
        }
        (rho1, z1) = transport(grid, rho, z, &u, &eps, dt);
        let mu: Vec<(f64, f64)> =
            par::map(n, |c| discrete_potential(law, (rho[c], z[c]), (rho1[c], z1[c]), sigma[c]));
        let rhs: Vec<[f64; 3]> = par::map(n, |c| {
            let mut m = [d0[c] * u0[c][0], d0[c] * u0[c][1], d0[c] * u0[c][2]];
            for a in (0..3).filter(|&a| grid.active(a)) {
                let h = grid.h[a];
                if let Some(r) = grid.neighbor(c, a, true) {
                    let (uf, fr, fz, up) = mass_flux(rho, z, &u, &d0, eps[face_index(c, a)], a, c, r);
                    let wt = face_weight(&d0, c, r);
                    for i in 0..3 {
                        m[i] -= dt / h * uf * (fr + fz) * u[up][i];
                    }
                    m[a] -= dt * wt * (fr * (mu[r].0 - mu[c].0) + fz * (mu[r].1 - mu[c].1)) / h;
                }
                if let Some(l) = grid.neighbor(c, a, false) {
                    let (uf, fr, fz, up) = mass_flux(rho, z, &u, &d0, eps[face_index(l, a)], a, l, c);
                    let wt = 1.0 - face_weight(&d0, l, c);
                    for i in 0..3 {
                        m[i] += dt / h * uf * (fr + fz) * u[up][i];
                    }
                    m[a] -= dt * wt * (fr * (mu[c].0 - mu[l].0) + fz * (mu[c].1 - mu[l].1)) / h;
                }
            }
            for i in 0..3 {
                m[i] += dt * kb[c] * wb[c][i];
            }
            m
        });
        let mass: Vec<f64> = (0..n).map(|c| rho1[c] + z1[c] + dt * kb[c]).collect();
        // Early iterates only need to beat the current fixed-point error.
        let tol = (0.01 * last / last_scale).clamp(CG_TOL, 1e-3);
        let next = solve_momentum(&vop, &mass, dt, &rhs, &u, tol);
        let change = par::max(n, |c| dist2(&next[c], &u[c]).sqrt());
        let scale = par::max(n, |c| norm2(&next[c]).sqrt());
        u = next;
        iterations += 1;
        last_scale = scale.max(f64::MIN_POSITIVE);
        // Converged, or stalled at round-off level.
        if change <= FIXED_POINT_TOL * scale || (change <= 10.0 * FIXED_POINT_TOL * scale && change >= 0.5 * last) {
            break;
        }
        last = change;
        if iterations >= MAX_FIXED_POINT {
            return Err(FluidError::NoConvergence { iterations, change });
        }
    }
    let cfl = cfl_number(grid, &u, dt);
    if cfl > CFL_LIMIT {
        return Err(FluidError::Cfl(cfl));
    }
    let vol = grid.cell_volume();
    let [mis, tr, inp] = par::sum_n(n, |c| {
        let q = 0.5 * dt * kb[c] * vol;
        [q * dist2(&u[c], &wb[c]), q * norm2(&u[c]), q * norm2(&wb[c])]
    });
    let diss = vop.density(&u);
    let viscous = dt * vol * par::sum(n, |c| diss[c]);
    Ok((
        FluidState { rho: rho1, z: z1, u, time: state.time + dt },
        StepReport { viscous, penalty: PenaltyReport { mismatch: mis, trace: tr, input: inp }, cfl, iterations },
    ))
}

/// Kinetic energy, Helmholtz energy and instantaneous viscous dissipation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FluidEnergy {
    pub kinetic: f64,
    pub helmholtz: f64,
    pub dissipation: f64,
}

pub fn fluid_energy<P: HelmholtzLaw>(
    grid: &FluidGrid,
    state: &FluidState,
    law: &P,
    visc: &ViscosityField,
) -> Result<FluidEnergy, FluidError> {
    state.check(grid)?;
    let vol = grid.cell_volume();
    let helm = par::map(state.len(), |c| law.helmholtz_density(state.rho[c], state.z[c]));
    let kinetic = vol
        * par::sum(state.len(), |c| {
            let u = state.u[c];
            0.5 * (state.rho[c] + state.z[c]) * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
        });
    let helmholtz = vol * par::sum(helm.len(), |c| helm[c]);
    let diss = dissipation_density(grid, state, visc);
    let dissipation = vol * par::sum(diss.len(), |c| diss[c]);
    Ok(FluidEnergy { kinetic, helmholtz, dissipation })
}

/// `(∫_{B∖Ω_η}(ρ+Z), ∫_B(ρ+Z))` using the cell-centre preimage distances.
pub fn exterior_mass(grid: &FluidGrid, state: &FluidState, dist: &[f64]) -> (f64, f64) {
    let vol = grid.cell_volume();
    let [e, t] = par::sum_n(state.len(), |c| {
        let d = state.rho[c] + state.z[c];
        [if dist[c] > 0.0 { d } else { 0.0 }, d]
    });
    (e * vol, t * vol)
}
