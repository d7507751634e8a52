//! Reference-surface geometry on a periodic parameter grid.
//!
//! The reference surface `φ: Γ → ℝ³` is sampled on a uniform periodic grid;
//! tangents, normal and their derivatives are stored per node. Displacements
//! act along the normal, `φ_η = φ + η ν`. The flow map pushes the tubular
//! neighbourhood of `φ(Γ)` along the same normals with a smooth cut-off, which
//! is what the fluid uses to extend data from the moving domain to the box.

use nalgebra::Vector3;
use std::f64::consts::PI;
use thiserror::Error;

pub type V3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("grid too coarse: need n1, n2 >= 4, got {n1}x{n2}")]
    GridTooCoarse { n1: usize, n2: usize },
    #[error("grid spacing must be positive and finite")]
    BadSpacing,
    #[error("torus radii must satisfy R > r > 0 (got R={major}, r={minor})")]
    InvalidRadii { major: f64, minor: f64 },
    #[error("torus parameter grid must span 2π in both directions")]
    TorusGridSpan,
    #[error("slab half-width must be positive (got {0})")]
    InvalidHalfWidth(f64),
    #[error("reference surface degenerate at node {0} (tangents not independent)")]
    DegenerateSurface(usize),
    #[error("cut-off parameters out of order: {0}")]
    CutoffOutOfOrder(String),
    #[error(
        "degeneracy (first kind): displacement {value} at node {node} outside band ({lower}, {upper})"
    )]
    OutsideBand { node: usize, value: f64, lower: f64, upper: f64 },
    #[error("displacement length {got} does not match grid size {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("tabulated geometry has no analytic tubular chart")]
    NoAnalyticChart,
    #[error("inverse flow map did not converge (residual {0:e})")]
    InverseNotConverged(f64),
    #[error("tabulated geometry, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Uniform periodic parameter grid for `Γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamGrid {
    pub n1: usize,
    pub n2: usize,
    pub h1: f64,
    pub h2: f64,
}

impl ParamGrid {
    pub fn new(n1: usize, n2: usize, h1: f64, h2: f64) -> Result<Self, GeometryError> {
        if n1 < 4 || n2 < 4 {
            return Err(GeometryError::GridTooCoarse { n1, n2 });
        }
        if !(h1 > 0.0 && h2 > 0.0 && h1.is_finite() && h2.is_finite()) {
            return Err(GeometryError::BadSpacing);
        }
        Ok(Self { n1, n2, h1, h2 })
    }

    /// Grid with `n1 × n2` cells covering periods `l1 × l2`.
    pub fn periodic(n1: usize, n2: usize, l1: f64, l2: f64) -> Result<Self, GeometryError> {
        Self::new(n1, n2, l1 / n1 as f64, l2 / n2 as f64)
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lengths(&self) -> (f64, f64) {
        (self.n1 as f64 * self.h1, self.n2 as f64 * self.h2)
    }

    /// Node index with periodic wrap in both directions.
    #[inline]
    pub fn index(&self, i: isize, j: isize) -> usize {
        let i = i.rem_euclid(self.n1 as isize) as usize;
        let j = j.rem_euclid(self.n2 as isize) as usize;
        i + self.n1 * j
    }

    #[inline]
    pub fn coords(&self, node: usize) -> (usize, usize) {
        (node % self.n1, node / self.n1)
    }

    /// Parameter-space area of one grid cell.
    pub fn cell_area(&self) -> f64 {
        self.h1 * self.h2
    }
}

/// Admissible displacement interval `(a_∂Ω, b_∂Ω)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub lower: f64,
    pub upper: f64,
}

impl Band {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        v > self.lower && v < self.upper
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SurfaceKind {
    /// `φ(x) = (x1, x2, 0)`; the domain lies below, the normal points up.
    FlatSlab { half_width: f64 },
    /// Torus of revolution about the z-axis, parameters (θ, ψ).
    Torus { major: f64, minor: f64 },
    /// Node data read from a file; derivatives by finite differences.
    Tabulated { half_width: f64 },
}

/// Default cut-off placement as fractions of the band ends: `m = f0·a`,
/// `m' = f1·a`, `m'' = f2·a` and likewise for `M, M', M''` with `b`.
pub const DEFAULT_CUTOFF_FRACTIONS: [f64; 3] = [0.9, 0.93, 0.97];

const MOLLIFIER_POINTS: usize = 64;

/// Smooth cut-off `f_Γ` of the tubular flow map.
///
/// A piecewise-linear profile (0 below `m''`, ramp up to 1 at `m''−m'`,
/// plateau, ramp down from `M''−M'` to 0 at `M''`) convolved once with a
/// compactly supported bump of half-width `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct CutoffProfile {
    pub m2: f64,
    pub m1: f64,
    pub m: f64,
    pub big_m: f64,
    pub big_m1: f64,
    pub big_m2: f64,
    pub alpha: f64,
    offsets: Vec<f64>,
    weights: Vec<f64>,
}

impl CutoffProfile {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        band: Band,
        m2: f64,
        m1: f64,
        m: f64,
        big_m: f64,
        big_m1: f64,
        big_m2: f64,
    ) -> Result<Self, GeometryError> {
        let chain = [band.lower, m2, m1, m, 0.0, big_m, big_m1, big_m2, band.upper];
        let strict = [true, true, true, false, false, true, true, true];
        for k in 0..8 {
            let ok = if strict[k] { chain[k] < chain[k + 1] } else { chain[k] <= chain[k + 1] };
            if !ok || !chain[k].is_finite() {
                return Err(GeometryError::CutoffOutOfOrder(format!(
                    "need a < m'' < m' < m <= 0 <= M < M' < M'' < b, got {chain:?}"
                )));
            }
        }
        let gap = (m1 - m2).min(big_m2 - big_m1).min(-m1).min(big_m1);
        let alpha = 0.4 * gap;
        let mut offsets = Vec::with_capacity(MOLLIFIER_POINTS);
        let mut weights = Vec::with_capacity(MOLLIFIER_POINTS);
        for k in 0..MOLLIFIER_POINTS {
            let t = -1.0 + (2 * k + 1) as f64 / MOLLIFIER_POINTS as f64;
            offsets.push(alpha * t);
            weights.push((-1.0 / (1.0 - t * t)).exp());
        }
        // Symmetrise before normalising so odd moments vanish exactly.
        for k in 0..MOLLIFIER_POINTS / 2 {
            let w = 0.5 * (weights[k] + weights[MOLLIFIER_POINTS - 1 - k]);
            weights[k] = w;
            weights[MOLLIFIER_POINTS - 1 - k] = w;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { m2, m1, m, big_m, big_m1, big_m2, alpha, offsets, weights })
    }

    pub fn from_band(band: Band, fractions: [f64; 3]) -> Result<Self, GeometryError> {
        let [f0, f1, f2] = fractions;
        Self::new(
            band,
            f2 * band.lower,
            f1 * band.lower,
            f0 * band.lower,
            f0 * band.upper,
            f1 * band.upper,
            f2 * band.upper,
        )
    }

    fn linear(&self, d: f64) -> f64 {
        if d <= self.m2 || d >= self.big_m2 {
            0.0
        } else if d < self.m2 - self.m1 {
            (d - self.m2) / (-self.m1)
        } else if d <= self.big_m2 - self.big_m1 {
            1.0
        } else {
            (self.big_m2 - d) / self.big_m1
        }
    }

    fn linear_slope(&self, d: f64) -> f64 {
        if d <= self.m2 || d >= self.big_m2 {
            0.0
        } else if d < self.m2 - self.m1 {
            -1.0 / self.m1
        } else if d <= self.big_m2 - self.big_m1 {
            0.0
        } else {
            -1.0 / self.big_m1
        }
    }

    /// `f_Γ(d)`.
    pub fn value(&self, d: f64) -> f64 {
        let (lo, hi) = self.support();
        if d <= lo || d >= hi {
            return 0.0;
        }
        self.offsets.iter().zip(&self.weights).map(|(y, w)| w * self.linear(d - y)).sum()
    }

    /// `f_Γ'(d)`.
    pub fn derivative(&self, d: f64) -> f64 {
        self.offsets.iter().zip(&self.weights).map(|(y, w)| w * self.linear_slope(d - y)).sum()
    }

    /// Open interval outside of which `f_Γ` vanishes identically.
    pub fn support(&self) -> (f64, f64) {
        (self.m2 - self.alpha, self.big_m2 + self.alpha)
    }

    /// Closed interval on which `f_Γ ≡ 1`.
    pub fn plateau(&self) -> (f64, f64) {
        (self.m2 - self.m1 + self.alpha, self.big_m2 - self.big_m1 - self.alpha)
    }

    /// Displacements for which `d ↦ d + f_Γ(d) η` stays strictly monotone.
    pub fn invertible_range(&self) -> (f64, f64) {
        (self.m1, self.big_m1)
    }
}

/// Reference surface with all per-node differential data.
#[derive(Clone, Debug)]
pub struct ReferenceGeometry {
    pub kind: SurfaceKind,
    pub grid: ParamGrid,
    pub phi: Vec<V3>,
    pub a1: Vec<V3>,
    pub a2: Vec<V3>,
    pub nu: Vec<V3>,
    pub dnu1: Vec<V3>,
    pub dnu2: Vec<V3>,
    /// Second derivatives of `φ`: `[∂11, ∂12, ∂22]`.
    pub d2phi: [Vec<V3>; 3],
    /// Second derivatives of `ν`: `[∂11, ∂12, ∂22]`.
    pub d2nu: [Vec<V3>; 3],
    /// Covariant metric `(a11, a12, a22)`.
    pub a_cov: Vec<[f64; 3]>,
    /// Contravariant metric `(A11, A12, A22)`.
    pub a_contra: Vec<[f64; 3]>,
    pub area_elem: Vec<f64>,
    pub band: Band,
    pub cutoff: CutoffProfile,
}

struct NodeFrame {
    phi: V3,
    a1: V3,
    a2: V3,
    nu: V3,
    dnu1: V3,
    dnu2: V3,
    d2phi: [V3; 3],
    d2nu: [V3; 3],
}

fn torus_frame(major: f64, minor: f64, th: f64, ps: f64) -> NodeFrame {
    let (st, ct) = th.sin_cos();
    let (sp, cp) = ps.sin_cos();
    let a = major + minor * cp;
    NodeFrame {
        phi: V3::new(a * ct, a * st, minor * sp),
        a1: V3::new(-a * st, a * ct, 0.0),
        a2: V3::new(-minor * sp * ct, -minor * sp * st, minor * cp),
        nu: V3::new(ct * cp, st * cp, sp),
        dnu1: V3::new(-st * cp, ct * cp, 0.0),
        dnu2: V3::new(-ct * sp, -st * sp, cp),
        d2phi: [
            V3::new(-a * ct, -a * st, 0.0),
            V3::new(minor * sp * st, -minor * sp * ct, 0.0),
            V3::new(-minor * cp * ct, -minor * cp * st, -minor * sp),
        ],
        d2nu: [
            V3::new(-ct * cp, -st * cp, 0.0),
            V3::new(st * sp, -ct * sp, 0.0),
            V3::new(-ct * cp, -st * cp, -sp),
        ],
    }
}

fn flat_frame(x1: f64, x2: f64) -> NodeFrame {
    let z = V3::zeros();
    NodeFrame {
        phi: V3::new(x1, x2, 0.0),
        a1: V3::new(1.0, 0.0, 0.0),
        a2: V3::new(0.0, 1.0, 0.0),
        nu: V3::new(0.0, 0.0, 1.0),
        dnu1: z,
        dnu2: z,
        d2phi: [z, z, z],
        d2nu: [z, z, z],
    }
}

/// Build the reference geometry of an analytic surface kind.
pub fn build_reference(kind: &SurfaceKind, grid: ParamGrid) -> Result<ReferenceGeometry, GeometryError> {
    ParamGrid::new(grid.n1, grid.n2, grid.h1, grid.h2)?;
    let (band, frames): (Band, Vec<NodeFrame>) = match *kind {
        SurfaceKind::FlatSlab { half_width } => {
            if !(half_width > 0.0) {
                return Err(GeometryError::InvalidHalfWidth(half_width));
            }
            let frames = (0..grid.len())
                .map(|n| {
                    let (i, j) = grid.coords(n);
                    flat_frame(i as f64 * grid.h1, j as f64 * grid.h2)
                })
                .collect();
            (Band { lower: -half_width, upper: half_width }, frames)
        }
        SurfaceKind::Torus { major, minor } => {
            if !(minor > 0.0 && major > minor) {
                return Err(GeometryError::InvalidRadii { major, minor });
            }
            let (l1, l2) = grid.lengths();
            if (l1 - 2.0 * PI).abs() > 1e-9 || (l2 - 2.0 * PI).abs() > 1e-9 {
                return Err(GeometryError::TorusGridSpan);
            }
            let frames = (0..grid.len())
                .map(|n| {
                    let (i, j) = grid.coords(n);
                    torus_frame(major, minor, i as f64 * grid.h1, j as f64 * grid.h2)
                })
                .collect();
            let margin = 0.05 * minor;
            (Band { lower: -minor + margin, upper: minor - margin }, frames)
        }
        SurfaceKind::Tabulated { .. } => {
            return Err(GeometryError::NoAnalyticChart);
        }
    };
    assemble(kind.clone(), grid, band, frames, DEFAULT_CUTOFF_FRACTIONS)
}

fn assemble(
    kind: SurfaceKind,
    grid: ParamGrid,
    band: Band,
    frames: Vec<NodeFrame>,
    fractions: [f64; 3],
) -> Result<ReferenceGeometry, GeometryError> {
    let n = frames.len();
    let mut g = ReferenceGeometry {
        kind,
        grid,
        phi: Vec::with_capacity(n),
        a1: Vec::with_capacity(n),
        a2: Vec::with_capacity(n),
        nu: Vec::with_capacity(n),
        dnu1: Vec::with_capacity(n),
        dnu2: Vec::with_capacity(n),
        d2phi: [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)],
        d2nu: [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)],
        a_cov: Vec::with_capacity(n),
        a_contra: Vec::with_capacity(n),
        area_elem: Vec::with_capacity(n),
        band,
        cutoff: CutoffProfile::from_band(band, fractions)?,
    };
    for (node, f) in frames.into_iter().enumerate() {
        let area = f.a1.cross(&f.a2).norm();
        if !(area > 0.0) {
            return Err(GeometryError::DegenerateSurface(node));
        }
        let (a11, a12, a22) = (f.a1.dot(&f.a1), f.a1.dot(&f.a2), f.a2.dot(&f.a2));
        let det = a11 * a22 - a12 * a12;
        g.a_cov.push([a11, a12, a22]);
        g.a_contra.push([a22 / det, -a12 / det, a11 / det]);
        g.area_elem.push(area);
        g.phi.push(f.phi);
        g.a1.push(f.a1);
        g.a2.push(f.a2);
        g.nu.push(f.nu);
        g.dnu1.push(f.dnu1);
        g.dnu2.push(f.dnu2);
        for k in 0..3 {
            g.d2phi[k].push(f.d2phi[k]);
            g.d2nu[k].push(f.d2nu[k]);
        }
    }
    Ok(g)
}

/// Parse tabulated node data (`GEOM n1 n2 h1 h2` header, then `i j x y z`).
pub fn parse_tabulated(text: &str, half_width: f64) -> Result<ReferenceGeometry, GeometryError> {
    let perr = |line: usize, msg: &str| GeometryError::Parse { line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| perr(1, "empty input"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 5 || toks[0] != "GEOM" {
        return Err(perr(hl + 1, "expected header 'GEOM n1 n2 h1 h2'"));
    }
    let num = |s: &str, line: usize| s.parse::<f64>().map_err(|_| perr(line, "bad number"));
    let n1: usize = toks[1].parse().map_err(|_| perr(hl + 1, "bad n1"))?;
    let n2: usize = toks[2].parse().map_err(|_| perr(hl + 1, "bad n2"))?;
    let grid = ParamGrid::new(n1, n2, num(toks[3], hl + 1)?, num(toks[4], hl + 1)?)?;
    if !(half_width > 0.0) {
        return Err(GeometryError::InvalidHalfWidth(half_width));
    }
    let mut phi = vec![None; grid.len()];
    for (ln, line) in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 5 {
            return Err(perr(ln + 1, "expected 'i j phi_x phi_y phi_z'"));
        }
        let i: usize = t[0].parse().map_err(|_| perr(ln + 1, "bad index i"))?;
        let j: usize = t[1].parse().map_err(|_| perr(ln + 1, "bad index j"))?;
        if i >= n1 || j >= n2 {
            return Err(perr(ln + 1, "index out of range"));
        }
        let p = V3::new(num(t[2], ln + 1)?, num(t[3], ln + 1)?, num(t[4], ln + 1)?);
        phi[grid.index(i as isize, j as isize)] = Some(p);
    }
    let phi: Vec<V3> = phi
        .into_iter()
        .enumerate()
        .map(|(n, p)| p.ok_or_else(|| perr(0, &format!("missing node {n}"))))
        .collect::<Result<_, _>>()?;
    from_node_positions(grid, &phi, half_width)
}

/// Render a geometry's node positions in the tabulated format.
pub fn write_tabulated(g: &ReferenceGeometry) -> String {
    let mut s = format!("GEOM {} {} {} {}\n", g.grid.n1, g.grid.n2, g.grid.h1, g.grid.h2);
    for j in 0..g.grid.n2 {
        for i in 0..g.grid.n1 {
            let p = g.phi[g.grid.index(i as isize, j as isize)];
            s.push_str(&format!("{i} {j} {} {} {}\n", p.x, p.y, p.z));
        }
    }
    s
}

/// Periodic central-difference geometry from node positions.
///
/// Periodicity is in the parameters: positions may carry a constant
/// per-period offset (e.g. a flat slab of length `L`), which is detected and
/// removed when differencing across the seam.
pub fn from_node_positions(grid: ParamGrid, phi: &[V3], half_width: f64) -> Result<ReferenceGeometry, GeometryError> {
    let g = grid;
    let idx = |i: isize, j: isize| g.index(i, j);
    // Per-period jump of the positions across each seam.
    // Closed directions give an O(h²) estimate, which is snapped to zero.
    let seam = |last: V3, first: V3, second: V3| {
        let j = last - first + (second - first);
        if j.norm() < 0.5 * (second - first).norm() {
            V3::zeros()
        } else {
            j
        }
    };
    let jump1 = seam(phi[idx(g.n1 as isize - 1, 0)], phi[idx(0, 0)], phi[idx(1, 0)]);
    let jump2 = seam(phi[idx(0, g.n2 as isize - 1)], phi[idx(0, 0)], phi[idx(0, 1)]);
    let pos = |i: isize, j: isize| -> V3 {
        let wi = i.div_euclid(g.n1 as isize) as f64;
        let wj = j.div_euclid(g.n2 as isize) as f64;
        phi[idx(i, j)] + jump1 * wi + jump2 * wj
    };
    let (h1, h2) = (g.h1, g.h2);
    let d1 = |f: &dyn Fn(isize, isize) -> V3, i, j| (f(i + 1, j) - f(i - 1, j)) / (2.0 * h1);
    let d2 = |f: &dyn Fn(isize, isize) -> V3, i, j| (f(i, j + 1) - f(i, j - 1)) / (2.0 * h2);
    let d11 = |f: &dyn Fn(isize, isize) -> V3, i, j| (f(i + 1, j) - 2.0 * f(i, j) + f(i - 1, j)) / (h1 * h1);
    let d22 = |f: &dyn Fn(isize, isize) -> V3, i, j| (f(i, j + 1) - 2.0 * f(i, j) + f(i, j - 1)) / (h2 * h2);
    let d12 = |f: &dyn Fn(isize, isize) -> V3, i, j| {
        (f(i + 1, j + 1) - f(i + 1, j - 1) - f(i - 1, j + 1) + f(i - 1, j - 1)) / (4.0 * h1 * h2)
    };
    let normals: Vec<V3> = (0..g.len())
        .map(|n| {
            let (i, j) = g.coords(n);
            let (i, j) = (i as isize, j as isize);
            d1(&pos, i, j).cross(&d2(&pos, i, j))
        })
        .collect();
    if let Some(n) = normals.iter().position(|v| !(v.norm() > 0.0)) {
        return Err(GeometryError::DegenerateSurface(n));
    }
    let normals: Vec<V3> = normals.into_iter().map(|v| v.normalize()).collect();
    let nuf = |i: isize, j: isize| normals[idx(i, j)];
    let frames = (0..g.len())
        .map(|n| {
            let (i, j) = g.coords(n);
            let (i, j) = (i as isize, j as isize);
            NodeFrame {
                phi: phi[n],
                a1: d1(&pos, i, j),
                a2: d2(&pos, i, j),
                nu: normals[n],
                dnu1: d1(&nuf, i, j),
                dnu2: d2(&nuf, i, j),
                d2phi: [d11(&pos, i, j), d12(&pos, i, j), d22(&pos, i, j)],
                d2nu: [d11(&nuf, i, j), d12(&nuf, i, j), d22(&nuf, i, j)],
            }
        })
        .collect();
    assemble(
        SurfaceKind::Tabulated { half_width },
        grid,
        Band { lower: -half_width, upper: half_width },
        frames,
        DEFAULT_CUTOFF_FRACTIONS,
    )
}

/// Point in the tubular chart: parameter coordinates and signed distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChartPoint {
    pub p1: f64,
    pub p2: f64,
    pub dist: f64,
}

impl ReferenceGeometry {
    /// Replace the cut-off placement (fractions of the band ends).
    pub fn with_cutoff_fractions(mut self, fractions: [f64; 3]) -> Result<Self, GeometryError> {
        self.cutoff = CutoffProfile::from_band(self.band, fractions)?;
        Ok(self)
    }

    /// Quadrature weight of each node (`|a1×a2| h1 h2`).
    pub fn node_weight(&self, node: usize) -> f64 {
        self.area_elem[node] * self.grid.cell_area()
    }

    /// Total reference area.
    pub fn total_area(&self) -> f64 {
        (0..self.grid.len()).map(|n| self.node_weight(n)).sum()
    }

    pub fn has_chart(&self) -> bool {
        !matches!(self.kind, SurfaceKind::Tabulated { .. })
    }

    /// Signed distance to the reference surface (negative inside) and the
    /// parameters of the foot point. `None` only for tabulated geometry.
    pub fn chart(&self, x: &V3) -> Option<ChartPoint> {
        match self.kind {
            SurfaceKind::FlatSlab { .. } => {
                let (l1, l2) = self.grid.lengths();
                Some(ChartPoint { p1: x.x.rem_euclid(l1), p2: x.y.rem_euclid(l2), dist: x.z })
            }
            SurfaceKind::Torus { major, minor } => {
                let rxy = x.x.hypot(x.y);
                let q = rxy - major;
                let r = q.hypot(x.z);
                // On the symmetry axis and on the core circle the foot point is
                // not unique; the distance is still exact.
                if rxy < 1e-12 * major {
                    return Some(ChartPoint { p1: 0.0, p2: x.z.atan2(-major).rem_euclid(2.0 * PI), dist: major.hypot(x.z) - minor });
                }
                if r < 1e-12 * minor {
                    return Some(ChartPoint { p1: x.y.atan2(x.x).rem_euclid(2.0 * PI), p2: 0.0, dist: -minor });
                }
                Some(ChartPoint {
                    p1: x.y.atan2(x.x).rem_euclid(2.0 * PI),
                    p2: x.z.atan2(q).rem_euclid(2.0 * PI),
                    dist: r - minor,
                })
            }
            SurfaceKind::Tabulated { .. } => None,
        }
    }

    /// Reference point and unit normal at parameters `(p1, p2)`.
    pub fn surface_at(&self, p1: f64, p2: f64) -> Option<(V3, V3)> {
        match self.kind {
            SurfaceKind::FlatSlab { .. } => Some((V3::new(p1, p2, 0.0), V3::new(0.0, 0.0, 1.0))),
            SurfaceKind::Torus { major, minor } => {
                let f = torus_frame(major, minor, p1, p2);
                Some((f.phi, f.nu))
            }
            SurfaceKind::Tabulated { .. } => None,
        }
    }

    /// Periodic bilinear interpolation of a nodal field at parameters `(p1, p2)`.
    pub fn interpolate(&self, field: &[f64], p1: f64, p2: f64) -> f64 {
        let g = &self.grid;
        let s1 = p1 / g.h1;
        let s2 = p2 / g.h2;
        let (i0, j0) = (s1.floor(), s2.floor());
        let (t1, t2) = (s1 - i0, s2 - j0);
        let (i0, j0) = (i0 as isize, j0 as isize);
        let f = |di: isize, dj: isize| field[g.index(i0 + di, j0 + dj)];
        (1.0 - t2) * ((1.0 - t1) * f(0, 0) + t1 * f(1, 0)) + t2 * ((1.0 - t1) * f(0, 1) + t1 * f(1, 1))
    }

    fn check_len(&self, eta: &[f64]) -> Result<(), GeometryError> {
        if eta.len() != self.grid.len() {
            return Err(GeometryError::LengthMismatch { expected: self.grid.len(), got: eta.len() });
        }
        Ok(())
    }

    /// First node (if any) whose displacement leaves the open band.
    pub fn check_band(&self, eta: &[f64]) -> Result<(), GeometryError> {
        self.check_len(eta)?;
        for (node, &v) in eta.iter().enumerate() {
            if !self.band.contains(v) {
                return Err(GeometryError::OutsideBand {
                    node,
                    value: v,
                    lower: self.band.lower,
                    upper: self.band.upper,
                });
            }
        }
        Ok(())
    }
}

/// Deformed surface samples `φ + η ν`.
pub fn deformed_surface(g: &ReferenceGeometry, eta: &[f64]) -> Result<Vec<V3>, GeometryError> {
    g.check_band(eta)?;
    Ok(g.phi.iter().zip(&g.nu).zip(eta).map(|((p, n), e)| p + n * *e).collect())
}

/// Coercivity factor `γ̄(η)` at every node.
pub fn gamma_bar(g: &ReferenceGeometry, eta: &[f64]) -> Vec<f64> {
    (0..g.grid.len())
        .map(|n| {
            let (c0, c1, c2) = gamma_bar_coefficients(g, n);
            let e = eta[n];
            (c0 + e * c1 + e * e * c2) / c0
        })
        .collect()
}

/// The three triple products of `γ̄` at a node: `|a1×a2|`,
/// `ν·(a1×∂2ν + ∂1ν×a2)` and `ν·(∂1ν×∂2ν)`.
pub fn gamma_bar_coefficients(g: &ReferenceGeometry, n: usize) -> (f64, f64, f64) {
    let nu = g.nu[n];
    (
        g.area_elem[n],
        nu.dot(&(g.a1[n].cross(&g.dnu2[n]) + g.dnu1[n].cross(&g.a2[n]))),
        nu.dot(&g.dnu1[n].cross(&g.dnu2[n])),
    )
}

/// Tubular flow map `φ̃_η` and its inverse for a fixed displacement.
pub struct FlowMap<'a> {
    geom: &'a ReferenceGeometry,
    eta: &'a [f64],
}

impl<'a> FlowMap<'a> {
    pub fn new(geom: &'a ReferenceGeometry, eta: &'a [f64]) -> Result<Self, GeometryError> {
        if !geom.has_chart() {
            return Err(GeometryError::NoAnalyticChart);
        }
        geom.check_band(eta)?;
        let (lo, hi) = geom.cutoff.invertible_range();
        for (node, &v) in eta.iter().enumerate() {
            if !(v > lo && v < hi) {
                return Err(GeometryError::OutsideBand { node, value: v, lower: lo, upper: hi });
            }
        }
        Ok(Self { geom, eta })
    }

    pub fn geometry(&self) -> &ReferenceGeometry {
        self.geom
    }

    /// `x + f_Γ(𝔡(x)) η(π(x)) ν(π(x))`; the identity outside the band.
    pub fn forward(&self, x: &V3) -> V3 {
        let Some(c) = self.geom.chart(x) else { return *x };
        let f = self.geom.cutoff.value(c.dist);
        if f == 0.0 {
            return *x;
        }
        let (_, nu) = self.geom.surface_at(c.p1, c.p2).expect("chart implies surface");
        x + nu * (f * self.geom.interpolate(self.eta, c.p1, c.p2))
    }

    /// Inverse of [`FlowMap::forward`]: the closed-form guess
    /// `z − f_Γ(𝔡(z)) η ν` refined by Newton on the normal coordinate.
    pub fn inverse(&self, z: &V3) -> Result<V3, GeometryError> {
        let Some(c) = self.geom.chart(z) else { return Ok(*z) };
        let cut = &self.geom.cutoff;
        if cut.value(c.dist) == 0.0 {
            return Ok(*z);
        }
        let eta = self.geom.interpolate(self.eta, c.p1, c.p2);
        let target = c.dist;
        // `d ↦ d + f(d)η` is increasing with `0 ≤ f ≤ 1`, so the root lies in
        // `target ± |η|`; Newton steps leaving the bracket fall back to bisection.
        let (mut lo, mut hi) = (target - eta.abs(), target + eta.abs());
        let mut d = (target - cut.value(target) * eta).clamp(lo, hi);
        let tol = 1e-13 * (1.0 + target.abs());
        let mut res = f64::INFINITY;
        for _ in 0..200 {
            res = d + cut.value(d) * eta - target;
            if res.abs() <= tol {
                break;
            }
            if res > 0.0 {
                hi = d;
            } else {
                lo = d;
            }
            let next = d - res / (1.0 + cut.derivative(d) * eta);
            d = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        }
        if !(res.abs() <= 1e-10 * (1.0 + target.abs())) {
            return Err(GeometryError::InverseNotConverged(res.abs()));
        }
        let (_, nu) = self.geom.surface_at(c.p1, c.p2).expect("chart implies surface");
        Ok(z + nu * (d - target))
    }

    /// Signed normal coordinate of the reference preimage of `z`
    /// (negative inside the deformed domain).
    pub fn preimage_distance(&self, z: &V3) -> Result<Option<f64>, GeometryError> {
        let Some(c) = self.geom.chart(z) else { return Ok(None) };
        if self.geom.cutoff.value(c.dist) == 0.0 {
            return Ok(Some(c.dist));
        }
        let x = self.inverse(z)?;
        Ok(self.geom.chart(&x).map(|c| c.dist))
    }
}

/// `φ̃_η(x)`.
pub fn flow_map(g: &ReferenceGeometry, eta: &[f64], x: &V3) -> Result<V3, GeometryError> {
    Ok(FlowMap::new(g, eta)?.forward(x))
}

/// `φ̃_η^{-1}(z)`.
pub fn inverse_flow_map(g: &ReferenceGeometry, eta: &[f64], z: &V3) -> Result<V3, GeometryError> {
    FlowMap::new(g, eta)?.inverse(z)
}
