//! Nonlinear Koiter energy of a shell displaced along the reference normal.
//!
//! Per node the energy density depends on the local jet
//! `(η, ∂1η, ∂2η, ∂11η, ∂12η, ∂22η)` obtained with periodic central
//! differences. Membrane strain `G(η)` is quadratic in the jet, bending
//! strain `R(η)` is evaluated from its defining cross-product form. The
//! nodal gradient is assembled as the exact adjoint of the jet stencils, so
//! the energy, its directional derivatives and the gradient are consistent
//! to round-off.

use crate::geometry::{gamma_bar, ParamGrid, ReferenceGeometry, V3};
use crate::par;
use nalgebra::{Matrix3, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShellError {
    #[error("invalid elasticity parameter: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElasticityParams {
    pub lambda_s: f64,
    pub mu_s: f64,
    pub h_thick: f64,
    /// Regularisation weight `δ`; the energy carries `δ⁷`.
    pub delta_reg: f64,
    pub zeta: f64,
}

impl ElasticityParams {
    pub fn validate(&self) -> Result<(), ShellError> {
        let bad = |m: &str| Err(ShellError::InvalidParams(m.to_string()));
        if !(self.lambda_s > 0.0 && self.mu_s > 0.0) {
            return bad("Lamé coefficients must be positive");
        }
        if !(self.h_thick > 0.0) {
            return bad("shell thickness must be positive");
        }
        if !(self.delta_reg >= 0.0 && self.zeta >= 0.0) {
            return bad("delta and zeta must be non-negative");
        }
        Ok(())
    }

    /// `4λμ/(λ+2μ)`.
    pub fn c_trace(&self) -> f64 {
        4.0 * self.lambda_s * self.mu_s / (self.lambda_s + 2.0 * self.mu_s)
    }

    /// `δ⁷`.
    pub fn reg_weight(&self) -> f64 {
        self.delta_reg.powi(7)
    }
}

/// Symmetric 2-tensor per node, `(e11, e12, e22)`.
pub type Sym = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct SymTensorField2 {
    pub e11: Vec<f64>,
    pub e12: Vec<f64>,
    pub e22: Vec<f64>,
}

impl SymTensorField2 {
    pub fn zeros(n: usize) -> Self {
        Self { e11: vec![0.0; n], e12: vec![0.0; n], e22: vec![0.0; n] }
    }

    pub fn from_nodes(v: Vec<Sym>) -> Self {
        let mut f = Self::zeros(v.len());
        for (n, s) in v.into_iter().enumerate() {
            f.e11[n] = s[0];
            f.e12[n] = s[1];
            f.e22[n] = s[2];
        }
        f
    }

    pub fn at(&self, n: usize) -> Sym {
        [self.e11[n], self.e12[n], self.e22[n]]
    }

    pub fn len(&self) -> usize {
        self.e11.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e11.is_empty()
    }
}

/// Double contraction `E:F` of symmetric tensors.
#[inline]
pub fn contract(e: &Sym, f: &Sym) -> f64 {
    e[0] * f[0] + 2.0 * e[1] * f[1] + e[2] * f[2]
}

/// `𝒜E = c (𝔸:E) 𝔸 + 4μ 𝔸E𝔸` with contravariant metric `a`.
#[inline]
pub fn elasticity_node(a: &[f64; 3], e: &Sym, c_trace: f64, mu_s: f64) -> Sym {
    let tr = contract(a, e);
    // 𝔸E
    let ae = [
        [a[0] * e[0] + a[1] * e[1], a[0] * e[1] + a[1] * e[2]],
        [a[1] * e[0] + a[2] * e[1], a[1] * e[1] + a[2] * e[2]],
    ];
    let aea = [
        ae[0][0] * a[0] + ae[0][1] * a[1],
        ae[0][0] * a[1] + ae[0][1] * a[2],
        ae[1][0] * a[1] + ae[1][1] * a[2],
    ];
    [
        c_trace * tr * a[0] + 4.0 * mu_s * aea[0],
        c_trace * tr * a[1] + 4.0 * mu_s * aea[1],
        c_trace * tr * a[2] + 4.0 * mu_s * aea[2],
    ]
}

/// Node-wise application of the elasticity tensor.
pub fn elasticity_apply(geom: &ReferenceGeometry, e: &SymTensorField2, params: &ElasticityParams) -> SymTensorField2 {
    let c = params.c_trace();
    SymTensorField2::from_nodes(par::map(e.len(), |n| elasticity_node(&geom.a_contra[n], &e.at(n), c, params.mu_s)))
}

/// Smallest eigenvalue over all nodes of the quadratic form `E ↦ 𝒜E:E`
/// (with respect to `|E|² = E:E`).
pub fn min_elasticity_eigenvalue(geom: &ReferenceGeometry, params: &ElasticityParams) -> f64 {
    let c = params.c_trace();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let basis: [Sym; 3] = [[1.0, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]];
    par::max(geom.grid.len(), |n| {
        let mut m = Matrix3::zeros();
        for p in 0..3 {
            let ap = elasticity_node(&geom.a_contra[n], &basis[p], c, params.mu_s);
            for q in 0..3 {
                m[(p, q)] = contract(&ap, &basis[q]);
            }
        }
        -SymmetricEigen::new(m).eigenvalues.min()
    }) * -1.0
}

/// Local jet `(f, ∂1f, ∂2f, ∂11f, ∂12f, ∂22f)`.
pub type Jet = [f64; 6];

/// Stencils producing the jet: `(di, dj, coefficient)` per component.
pub struct JetStencils {
    taps: [Vec<(isize, isize, f64)>; 6],
}

impl JetStencils {
    pub fn new(grid: &ParamGrid) -> Self {
        let (h1, h2) = (grid.h1, grid.h2);
        let c12 = 1.0 / (4.0 * h1 * h2);
        Self {
            taps: [
                vec![(0, 0, 1.0)],
                vec![(1, 0, 0.5 / h1), (-1, 0, -0.5 / h1)],
                vec![(0, 1, 0.5 / h2), (0, -1, -0.5 / h2)],
                vec![(1, 0, 1.0 / (h1 * h1)), (0, 0, -2.0 / (h1 * h1)), (-1, 0, 1.0 / (h1 * h1))],
                vec![(1, 1, c12), (1, -1, -c12), (-1, 1, -c12), (-1, -1, c12)],
                vec![(0, 1, 1.0 / (h2 * h2)), (0, 0, -2.0 / (h2 * h2)), (0, -1, 1.0 / (h2 * h2))],
            ],
        }
    }

    #[inline]
    pub fn jet(&self, grid: &ParamGrid, f: &[f64], node: usize) -> Jet {
        let (i, j) = grid.coords(node);
        let (i, j) = (i as isize, j as isize);
        let mut out = [0.0; 6];
        for (k, taps) in self.taps.iter().enumerate() {
            out[k] = taps.iter().map(|&(di, dj, c)| c * f[grid.index(i + di, j + dj)]).sum();
        }
        out
    }

    /// Adjoint: given per-node co-jets `c`, the field `g` with
    /// `Σ_n c_n · jet_n(b) = Σ_m g_m b_m` for every `b`.
    pub fn adjoint(&self, grid: &ParamGrid, cojet: &[Jet]) -> Vec<f64> {
        par::map(grid.len(), |m| {
            let (i, j) = grid.coords(m);
            let (i, j) = (i as isize, j as isize);
            let mut g = 0.0;
            for (k, taps) in self.taps.iter().enumerate() {
                for &(di, dj, c) in taps {
                    g += c * cojet[grid.index(i - di, j - dj)][k];
                }
            }
            g
        })
    }
}

const UNIT_JETS: [Jet; 6] = [
    [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
];

/// Membrane strain `G_ij = ∂iη∂jη + η(a_i·∂jν + a_j·∂iν) + η²∂iν·∂jν`.
#[inline]
pub fn metric_node(g: &ReferenceGeometry, n: usize, j: &Jet) -> Sym {
    let (a1, a2, n1, n2) = (&g.a1[n], &g.a2[n], &g.dnu1[n], &g.dnu2[n]);
    let e = j[0];
    [
        j[1] * j[1] + e * 2.0 * a1.dot(n1) + e * e * n1.dot(n1),
        j[1] * j[2] + e * (a1.dot(n2) + a2.dot(n1)) + e * e * n1.dot(n2),
        j[2] * j[2] + e * 2.0 * a2.dot(n2) + e * e * n2.dot(n2),
    ]
}

/// `G'(η) b`.
#[inline]
pub fn metric_derivative_node(g: &ReferenceGeometry, n: usize, j: &Jet, b: &Jet) -> Sym {
    let (a1, a2, n1, n2) = (&g.a1[n], &g.a2[n], &g.dnu1[n], &g.dnu2[n]);
    let e = j[0];
    [
        2.0 * b[1] * j[1] + b[0] * 2.0 * a1.dot(n1) + 2.0 * e * b[0] * n1.dot(n1),
        b[1] * j[2] + j[1] * b[2] + b[0] * (a1.dot(n2) + a2.dot(n1)) + 2.0 * e * b[0] * n1.dot(n2),
        2.0 * b[2] * j[2] + b[0] * 2.0 * a2.dot(n2) + 2.0 * e * b[0] * n2.dot(n2),
    ]
}

struct Deformed {
    a1: V3,
    a2: V3,
    nu_eta: V3,
    d2phi: [V3; 3],
}

#[inline]
fn deformed_frame(g: &ReferenceGeometry, n: usize, j: &Jet) -> Deformed {
    let nu = g.nu[n];
    let (dn1, dn2) = (g.dnu1[n], g.dnu2[n]);
    let e = j[0];
    let a1 = g.a1[n] + nu * j[1] + dn1 * e;
    let a2 = g.a2[n] + nu * j[2] + dn2 * e;
    let d2phi = [
        g.d2phi[0][n] + nu * j[3] + dn1 * (2.0 * j[1]) + g.d2nu[0][n] * e,
        g.d2phi[1][n] + nu * j[4] + dn2 * j[1] + dn1 * j[2] + g.d2nu[1][n] * e,
        g.d2phi[2][n] + nu * j[5] + dn2 * (2.0 * j[2]) + g.d2nu[2][n] * e,
    ];
    Deformed { a1, a2, nu_eta: a1.cross(&a2), d2phi }
}

/// Bending strain `R_ij = ∂ijφ_η·ν_η/|a1×a2| − ∂ijφ·ν`, `ν_η = ∂1φ_η×∂2φ_η`.
/// The reference term is evaluated as `∂ijφ·(a1×a2)/|a1×a2|` with the same
/// arithmetic as the deformed one, so `R(0)` vanishes exactly.
#[inline]
pub fn curvature_node(g: &ReferenceGeometry, n: usize, j: &Jet) -> Sym {
    let d = deformed_frame(g, n, j);
    let inv = 1.0 / g.area_elem[n];
    let nu0 = g.a1[n].cross(&g.a2[n]);
    [
        (d.d2phi[0].dot(&d.nu_eta) - g.d2phi[0][n].dot(&nu0)) * inv,
        (d.d2phi[1].dot(&d.nu_eta) - g.d2phi[1][n].dot(&nu0)) * inv,
        (d.d2phi[2].dot(&d.nu_eta) - g.d2phi[2][n].dot(&nu0)) * inv,
    ]
}

#[inline]
fn curvature_derivative_with(g: &ReferenceGeometry, n: usize, d: &Deformed, b: &Jet) -> Sym {
    let nu = g.nu[n];
    let (dn1, dn2) = (g.dnu1[n], g.dnu2[n]);
    let da1 = nu * b[1] + dn1 * b[0];
    let da2 = nu * b[2] + dn2 * b[0];
    let dnu = da1.cross(&d.a2) + d.a1.cross(&da2);
    let dd2 = [
        nu * b[3] + dn1 * (2.0 * b[1]) + g.d2nu[0][n] * b[0],
        nu * b[4] + dn2 * b[1] + dn1 * b[2] + g.d2nu[1][n] * b[0],
        nu * b[5] + dn2 * (2.0 * b[2]) + g.d2nu[2][n] * b[0],
    ];
    let inv = 1.0 / g.area_elem[n];
    [
        (dd2[0].dot(&d.nu_eta) + d.d2phi[0].dot(&dnu)) * inv,
        (dd2[1].dot(&d.nu_eta) + d.d2phi[1].dot(&dnu)) * inv,
        (dd2[2].dot(&d.nu_eta) + d.d2phi[2].dot(&dnu)) * inv,
    ]
}

/// `R'(η) b`.
pub fn curvature_derivative_node(g: &ReferenceGeometry, n: usize, j: &Jet, b: &Jet) -> Sym {
    let d = deformed_frame(g, n, j);
    curvature_derivative_with(g, n, &d, b)
}

fn jets(geom: &ReferenceGeometry, f: &[f64]) -> Vec<Jet> {
    let st = JetStencils::new(&geom.grid);
    par::map(geom.grid.len(), |n| st.jet(&geom.grid, f, n))
}

/// Change of metric `G(η)`.
pub fn change_of_metric(geom: &ReferenceGeometry, eta: &[f64]) -> SymTensorField2 {
    let st = JetStencils::new(&geom.grid);
    SymTensorField2::from_nodes(par::map(geom.grid.len(), |n| metric_node(geom, n, &st.jet(&geom.grid, eta, n))))
}

/// Change of curvature `R(η)`.
pub fn change_of_curvature(geom: &ReferenceGeometry, eta: &[f64]) -> SymTensorField2 {
    let st = JetStencils::new(&geom.grid);
    SymTensorField2::from_nodes(par::map(geom.grid.len(), |n| curvature_node(geom, n, &st.jet(&geom.grid, eta, n))))
}

/// Split `R = γ̄(η) ∂²η + P₀(η, ∇η)`; returns `(γ̄, P₀)`.
pub fn curvature_split(geom: &ReferenceGeometry, eta: &[f64]) -> (Vec<f64>, SymTensorField2) {
    let gb = gamma_bar(geom, eta);
    let st = JetStencils::new(&geom.grid);
    let p0 = par::map(geom.grid.len(), |n| {
        let mut j = st.jet(&geom.grid, eta, n);
        j[3] = 0.0;
        j[4] = 0.0;
        j[5] = 0.0;
        curvature_node(geom, n, &j)
    });
    (gb, SymTensorField2::from_nodes(p0))
}

/// Energy contributions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KoiterParts {
    pub membrane: f64,
    pub bending: f64,
    /// `½δ⁷ Σ |∇³η|²`.
    pub regularization: f64,
}

impl KoiterParts {
    /// Unregularised `K(η)`.
    pub fn koiter(&self) -> f64 {
        self.membrane + self.bending
    }

    /// `K_δ(η)`.
    pub fn total(&self) -> f64 {
        self.membrane + self.bending + self.regularization
    }
}

/// Energy density `h/4 𝒜G:G` and `h³/48 𝒜R:R` at a node.
#[inline]
fn density_node(geom: &ReferenceGeometry, p: &ElasticityParams, n: usize, j: &Jet) -> [f64; 2] {
    let c = p.c_trace();
    let h = p.h_thick;
    let gm = metric_node(geom, n, j);
    let r = curvature_node(geom, n, j);
    let a = &geom.a_contra[n];
    [
        0.25 * h * contract(&elasticity_node(a, &gm, c, p.mu_s), &gm),
        h * h * h / 48.0 * contract(&elasticity_node(a, &r, c, p.mu_s), &r),
    ]
}

pub fn koiter_parts(geom: &ReferenceGeometry, eta: &[f64], params: &ElasticityParams) -> KoiterParts {
    let st = JetStencils::new(&geom.grid);
    let [membrane, bending] = par::sum_n(geom.grid.len(), |n| {
        let w = geom.node_weight(n);
        let [m, b] = density_node(geom, params, n, &st.jet(&geom.grid, eta, n));
        [w * m, w * b]
    });
    let regularization = if params.delta_reg > 0.0 {
        0.5 * params.reg_weight() * third_difference_energy(geom, eta)
    } else {
        0.0
    };
    KoiterParts { membrane, bending, regularization }
}

/// `K_δ(η)`.
pub fn koiter_energy(geom: &ReferenceGeometry, eta: &[f64], params: &ElasticityParams) -> f64 {
    koiter_parts(geom, eta, params).total()
}

/// Per-node co-jet of `⟨K'(η), ·⟩`, weighted by the quadrature weights.
fn cojets(geom: &ReferenceGeometry, eta: &[f64], params: &ElasticityParams) -> Vec<Jet> {
    let st = JetStencils::new(&geom.grid);
    let c = params.c_trace();
    let h = params.h_thick;
    par::map(geom.grid.len(), |n| {
        let j = st.jet(&geom.grid, eta, n);
        let a = &geom.a_contra[n];
        let gm = metric_node(geom, n, &j);
        let d = deformed_frame(geom, n, &j);
        let inv = 1.0 / geom.area_elem[n];
        let nu0 = geom.a1[n].cross(&geom.a2[n]);
        let r = [
            (d.d2phi[0].dot(&d.nu_eta) - geom.d2phi[0][n].dot(&nu0)) * inv,
            (d.d2phi[1].dot(&d.nu_eta) - geom.d2phi[1][n].dot(&nu0)) * inv,
            (d.d2phi[2].dot(&d.nu_eta) - geom.d2phi[2][n].dot(&nu0)) * inv,
        ];
        let ag = elasticity_node(a, &gm, c, params.mu_s);
        let ar = elasticity_node(a, &r, c, params.mu_s);
        let w = geom.node_weight(n);
        let mut out = [0.0; 6];
        for k in 0..6 {
            let gp = metric_derivative_node(geom, n, &j, &UNIT_JETS[k]);
            let rp = curvature_derivative_with(geom, n, &d, &UNIT_JETS[k]);
            out[k] = w * (0.5 * h * contract(&ag, &gp) + h * h * h / 24.0 * contract(&ar, &rp));
        }
        out
    })
}

/// Nodal gradient of the unregularised `K`: `⟨K'(η), b⟩ = Σ g_n b_n`.
pub fn koiter_gradient_unregularized(geom: &ReferenceGeometry, eta: &[f64], params: &ElasticityParams) -> Vec<f64> {
    let st = JetStencils::new(&geom.grid);
    st.adjoint(&geom.grid, &cojets(geom, eta, params))
}

/// Nodal gradient of `K_δ`.
pub fn koiter_gradient(geom: &ReferenceGeometry, eta: &[f64], params: &ElasticityParams) -> Vec<f64> {
    let mut g = koiter_gradient_unregularized(geom, eta, params);
    add_regularization_gradient(geom, eta, params, &mut g);
    g
}

fn add_regularization_gradient(geom: &ReferenceGeometry, eta: &[f64], params: &ElasticityParams, g: &mut [f64]) {
    if params.delta_reg > 0.0 {
        let w = params.reg_weight();
        let r = ThirdDifference::new(&geom.grid).normal_operator(geom, eta);
        g.iter_mut().zip(r).for_each(|(gi, ri)| *gi += w * ri);
    }
}

/// `⟨K'_δ(η), b⟩` from the jets of `b`.
pub fn koiter_derivative(geom: &ReferenceGeometry, eta: &[f64], b: &[f64], params: &ElasticityParams) -> f64 {
    let cj = cojets(geom, eta, params);
    let bj = jets(geom, b);
    let mut s = par::sum(geom.grid.len(), |n| (0..6).map(|k| cj[n][k] * bj[n][k]).sum());
    if params.delta_reg > 0.0 {
        s += params.reg_weight() * ThirdDifference::new(&geom.grid).pairing(geom, eta, b);
    }
    s
}

/// How the window-discrete derivative `K'(η, η^m)` is quantised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DerivativeRule {
    /// Endpoint-averaged strains against Simpson-averaged strain
    /// derivatives; telescopes exactly.
    #[default]
    Simpson,
    /// Lagged `K'(η^m)`. Not energy-stable; kept to demonstrate that the
    /// structural energy checks detect the loss of the discrete chain rule.
    LaggedEndpoint,
}

/// Per-node co-jets of `⟨K'(η, η^m), ·⟩`: the endpoint average of the
/// strains `½(𝔾(η) + 𝔾(η^m))` (likewise `ℝ`) paired with the Simpson average
/// of `𝔾'` and `ℝ'` over `η^m, η̄, η`. Simpson is exact for `𝔾'` (linear) and
/// `ℝ'` (quadratic along the segment), so testing with `η − η^m` gives
/// `𝒜𝔾̄:(𝔾(η) − 𝔾(η^m))`, which telescopes by symmetry of `𝒜`.
fn discrete_cojets(geom: &ReferenceGeometry, eta: &[f64], eta_prev: &[f64], params: &ElasticityParams) -> Vec<Jet> {
    let st = JetStencils::new(&geom.grid);
    let c = params.c_trace();
    let h = params.h_thick;
    par::map(geom.grid.len(), |n| {
        let j1 = st.jet(&geom.grid, eta, n);
        let j0 = st.jet(&geom.grid, eta_prev, n);
        let mut jm = [0.0; 6];
        for k in 0..6 {
            jm[k] = 0.5 * (j0[k] + j1[k]);
        }
        let a = &geom.a_contra[n];
        let avg = |x: Sym, y: Sym| [0.5 * (x[0] + y[0]), 0.5 * (x[1] + y[1]), 0.5 * (x[2] + y[2])];
        let gbar = avg(metric_node(geom, n, &j0), metric_node(geom, n, &j1));
        let rbar = avg(curvature_node(geom, n, &j0), curvature_node(geom, n, &j1));
        let ag = elasticity_node(a, &gbar, c, params.mu_s);
        let ar = elasticity_node(a, &rbar, c, params.mu_s);
        let frames = [deformed_frame(geom, n, &j0), deformed_frame(geom, n, &jm), deformed_frame(geom, n, &j1)];
        let jets = [&j0, &jm, &j1];
        const SIMPSON: [f64; 3] = [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0];
        let w = geom.node_weight(n);
        let mut out = [0.0; 6];
        for k in 0..6 {
            let mut gp = 0.0;
            let mut rp = 0.0;
            for q in 0..3 {
                gp += SIMPSON[q] * contract(&ag, &metric_derivative_node(geom, n, jets[q], &UNIT_JETS[k]));
                rp += SIMPSON[q] * contract(&ar, &curvature_derivative_with(geom, n, &frames[q], &UNIT_JETS[k]));
            }
            out[k] = w * (0.5 * h * gp + h * h * h / 24.0 * rp);
        }
        out
    })
}

/// Nodal gradient of the window-discrete Koiter derivative plus the
/// `δ⁷∇³`-term at `η`. `prev_grad` is the unregularised gradient at `η^m`
/// (only read by [`DerivativeRule::LaggedEndpoint`]).
pub fn discrete_koiter_gradient_with(
    geom: &ReferenceGeometry,
    eta: &[f64],
    eta_prev: &[f64],
    prev_grad: &[f64],
    params: &ElasticityParams,
    rule: DerivativeRule,
) -> Vec<f64> {
    let mut g = match rule {
        DerivativeRule::Simpson => {
            let st = JetStencils::new(&geom.grid);
            st.adjoint(&geom.grid, &discrete_cojets(geom, eta, eta_prev, params))
        }
        DerivativeRule::LaggedEndpoint => prev_grad.to_vec(),
    };
    add_regularization_gradient(geom, eta, params, &mut g);
    g
}

pub fn discrete_koiter_gradient(
    geom: &ReferenceGeometry,
    eta: &[f64],
    eta_prev: &[f64],
    params: &ElasticityParams,
    rule: DerivativeRule,
) -> Vec<f64> {
    let prev = match rule {
        DerivativeRule::Simpson => Vec::new(),
        DerivativeRule::LaggedEndpoint => koiter_gradient_unregularized(geom, eta_prev, params),
    };
    discrete_koiter_gradient_with(geom, eta, eta_prev, &prev, params, rule)
}

/// `⟨K'_δ(η, η^m), b⟩`.
pub fn discrete_koiter_derivative(
    geom: &ReferenceGeometry,
    eta: &[f64],
    eta_prev: &[f64],
    b: &[f64],
    params: &ElasticityParams,
) -> f64 {
    let cj = discrete_cojets(geom, eta, eta_prev, params);
    let bj = jets(geom, b);
    let s = par::sum(geom.grid.len(), |n| (0..6).map(|k| cj[n][k] * bj[n][k]).sum());
    if params.delta_reg > 0.0 {
        s + params.reg_weight() * ThirdDifference::new(&geom.grid).pairing(geom, eta, b)
    } else {
        s
    }
}

/// Third differences built from periodic forward first differences.
///
/// Components `∂111, ∂112, ∂122, ∂222` carry multiplicities `1, 3, 3, 1` so
/// that the sum of squares equals the full `|∇³η|²` over ordered triples.
pub struct ThirdDifference {
    grid: ParamGrid,
    comps: Vec<(f64, Vec<(isize, isize, f64)>)>,
}

impl ThirdDifference {
    pub fn new(grid: &ParamGrid) -> Self {
        const BINOM: [[f64; 4]; 4] =
            [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
        let mut comps = Vec::new();
        for (p, mult) in [(3usize, 1.0), (2, 3.0), (1, 3.0), (0, 1.0)] {
            let q = 3 - p;
            let scale = 1.0 / (grid.h1.powi(p as i32) * grid.h2.powi(q as i32));
            let mut taps = Vec::new();
            for a in 0..=p {
                for b in 0..=q {
                    let sign = if (p - a + q - b) % 2 == 0 { 1.0 } else { -1.0 };
                    taps.push((a as isize, b as isize, sign * BINOM[p][a] * BINOM[q][b] * scale));
                }
            }
            comps.push((mult, taps));
        }
        Self { grid: *grid, comps }
    }

    fn apply(&self, taps: &[(isize, isize, f64)], f: &[f64], n: usize) -> f64 {
        let (i, j) = self.grid.coords(n);
        let (i, j) = (i as isize, j as isize);
        taps.iter().map(|&(di, dj, c)| c * f[self.grid.index(i + di, j + dj)]).sum()
    }

    fn apply_t(&self, taps: &[(isize, isize, f64)], f: &[f64], n: usize) -> f64 {
        let (i, j) = self.grid.coords(n);
        let (i, j) = (i as isize, j as isize);
        taps.iter().map(|&(di, dj, c)| c * f[self.grid.index(i - di, j - dj)]).sum()
    }

    /// `Σ_n w_n ∇³a·∇³b`.
    pub fn pairing(&self, geom: &ReferenceGeometry, a: &[f64], b: &[f64]) -> f64 {
        par::sum(self.grid.len(), |n| {
            let w = geom.node_weight(n);
            self.comps
                .iter()
                .map(|(m, taps)| m * self.apply(taps, a, n) * self.apply(taps, b, n))
                .sum::<f64>()
                * w
        })
    }

    /// `(∇³)ᵀ W ∇³ f` as a nodal field.
    pub fn normal_operator(&self, geom: &ReferenceGeometry, f: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        let mut out = vec![0.0; n];
        for (m, taps) in &self.comps {
            let d: Vec<f64> = par::map(n, |k| m * geom.node_weight(k) * self.apply(taps, f, k));
            let t = par::map(n, |k| self.apply_t(taps, &d, k));
            out.iter_mut().zip(t).for_each(|(o, v)| *o += v);
        }
        out
    }
}

/// `Σ_n w_n |∇³η|²`.
pub fn third_difference_energy(geom: &ReferenceGeometry, eta: &[f64]) -> f64 {
    ThirdDifference::new(&geom.grid).pairing(geom, eta, eta)
}

/// Bending coercivity monitor.
///
/// `lhs = Σ w γ̄²|∇²η|²`; since `γ̄∇²η = R − P₀` and the bending energy
/// bounds `Σ w|R|²` through the smallest eigenvalue of `𝒜`,
/// `lhs ≤ 2·48/(h³ λ_min)·K_bend + 2 Σ w|P₀|² = bound`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoercivityReport {
    pub lhs: f64,
    pub bound: f64,
    pub min_gamma_bar: f64,
    pub lambda_min: f64,
}

impl CoercivityReport {
    pub fn holds(&self) -> bool {
        self.lhs <= self.bound * (1.0 + 1e-12) + 1e-300
    }
}

pub fn coercivity_check(geom: &ReferenceGeometry, eta: &[f64], params: &ElasticityParams) -> CoercivityReport {
    let (gb, p0) = curvature_split(geom, eta);
    let jt = jets(geom, eta);
    let lambda_min = min_elasticity_eigenvalue(geom, params);
    let kb = koiter_parts(geom, eta, params).bending;
    let [lhs, p0sq] = par::sum_n(geom.grid.len(), |n| {
        let w = geom.node_weight(n);
        let hess = [jt[n][3], jt[n][4], jt[n][5]];
        let p = p0.at(n);
        [w * gb[n] * gb[n] * contract(&hess, &hess), w * contract(&p, &p)]
    });
    let h3 = params.h_thick.powi(3);
    CoercivityReport {
        lhs,
        bound: 2.0 * 48.0 / (h3 * lambda_min) * kb + 2.0 * p0sq,
        min_gamma_bar: gb.iter().copied().fold(f64::INFINITY, f64::min),
        lambda_min,
    }
}
