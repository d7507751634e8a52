//! Two-fluid pressure laws `P(ρ, Z) = ρ^γ + Z^β + Σ C_i ρ^{r_i} Z^{s_i}`,
//! their `δ`-regularisation, Helmholtz free energies and a sampling audit of
//! the structural hypotheses the existence theory asks of `P`.

use crate::par;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PressureError {
    #[error("negative density (rho={rho}, Z={z})")]
    NegativeDensity { rho: f64, z: f64 },
    #[error("state outside the density cone: rho = 0 with Z = {z} > 0")]
    OutsideCone { z: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossTerm {
    pub c: f64,
    pub r: f64,
    pub s: f64,
}

/// Anything that can be evaluated as a pressure on the closed positive quadrant.
pub trait PressureFn: Sync {
    /// Unchecked evaluation; callers guarantee `ρ, Z ≥ 0`.
    fn pressure(&self, rho: f64, z: f64) -> f64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct PressureLaw {
    pub gamma: f64,
    pub beta: f64,
    pub terms: Vec<CrossTerm>,
    pub a_lower: f64,
    pub a_upper: f64,
}

#[inline]
fn pw(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else if x == 0.0 {
        0.0
    } else {
        x.powf(e)
    }
}

fn check_state(rho: f64, z: f64) -> Result<(), PressureError> {
    if !(rho >= 0.0 && z >= 0.0) {
        return Err(PressureError::NegativeDensity { rho, z });
    }
    Ok(())
}

impl PressureLaw {
    pub fn pure(gamma: f64, beta: f64, a_lower: f64, a_upper: f64) -> Self {
        Self { gamma, beta, terms: Vec::new(), a_lower, a_upper }
    }

    /// Every violated structural requirement, each naming its hypothesis.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.a_lower > 0.0) {
            v.push(format!("H1 cone: a_lower must be positive (got {})", self.a_lower));
        }
        if !(self.a_lower < self.a_upper) || !self.a_upper.is_finite() {
            v.push(format!("H1 cone: a_lower ≥ a_upper ({} ≥ {})", self.a_lower, self.a_upper));
        }
        if !(self.gamma > 0.0 && self.beta > 0.0) {
            v.push("H3 growth: gamma and beta must be positive".to_string());
        }
        let mx = self.gamma.max(self.beta);
        if !(mx >= 2.0) {
            v.push(format!("H3 growth: max{{gamma, beta}} ≥ 2 required (got {mx})"));
        }
        for (i, t) in self.terms.iter().enumerate() {
            let i = i + 1;
            if !(t.r >= 0.0 && t.r < self.gamma) {
                v.push(format!("H3 pressure family, term {i}: need 0 ≤ r < gamma (r = {})", t.r));
            }
            if !(t.s >= 0.0 && t.s < self.beta) {
                v.push(format!("H3 pressure family, term {i}: need 0 ≤ s < beta (s = {})", t.s));
            }
            if !(t.r + t.s < mx) {
                v.push(format!("H3 pressure family, term {i}: need r + s < max{{gamma, beta}}"));
            }
            if !(t.r + t.s > 0.0) {
                v.push(format!("H3 power bound, term {i}: r + s = 0 gives P(0,0) ≠ 0"));
            }
            if self.gamma == 2.0 && t.c < 0.0 {
                v.push(format!("H3 pressure family, term {i}: gamma = 2 requires C ≥ 0"));
            }
            if !t.c.is_finite() {
                v.push(format!("H3 pressure family, term {i}: non-finite coefficient"));
            }
        }
        v
    }

    pub fn eval(&self, rho: f64, z: f64) -> Result<f64, PressureError> {
        check_state(rho, z)?;
        Ok(self.pressure(rho, z))
    }

    /// `∂_Z P`.
    pub fn dz(&self, rho: f64, z: f64) -> f64 {
        let mut d = self.beta * pw(z, self.beta - 1.0);
        for t in &self.terms {
            if t.s != 0.0 {
                d += t.c * t.s * pw(rho, t.r) * pw(z, t.s - 1.0);
            }
        }
        d
    }

    pub fn in_cone(&self, rho: f64, z: f64) -> bool {
        self.a_lower * rho <= z && z <= self.a_upper * rho
    }
}

impl PressureFn for PressureLaw {
    fn pressure(&self, rho: f64, z: f64) -> f64 {
        let mut p = pw(rho, self.gamma) + pw(z, self.beta);
        for t in &self.terms {
            p += t.c * pw(rho, t.r) * pw(z, t.s);
        }
        p
    }
}

/// `P_δ = P + δ q` with `q = ρ^κ + Z^κ + ½ρ²Z^{κ−2} + ½Z²ρ^{κ−2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizedPressure {
    pub base: PressureLaw,
    pub delta: f64,
    pub kappa: f64,
}

pub const DEFAULT_KAPPA: f64 = 8.0;

impl RegularizedPressure {
    pub fn new(base: PressureLaw, delta: f64, kappa: f64) -> Self {
        Self { base, delta, kappa }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.base.violations();
        if !(self.delta > 0.0) {
            v.push(format!("pressure regularisation: delta must be positive (got {})", self.delta));
        }
        let need = 4f64.max(self.base.gamma).max(self.base.beta) + 1.0;
        if !(self.kappa >= need) {
            v.push(format!("pressure regularisation: kappa ≥ max(4, gamma, beta) + 1 = {need} (got {})", self.kappa));
        }
        v
    }

    /// The homogeneous degree-κ polynomial `q(ρ, Z)`.
    pub fn q(&self, rho: f64, z: f64) -> f64 {
        let k = self.kappa;
        pw(rho, k) + pw(z, k) + 0.5 * rho * rho * pw(z, k - 2.0) + 0.5 * z * z * pw(rho, k - 2.0)
    }

    pub fn eval(&self, rho: f64, z: f64) -> Result<f64, PressureError> {
        check_state(rho, z)?;
        Ok(self.pressure(rho, z))
    }

    /// `h_δ = δ/(κ−1) q(ρ, Z)`.
    pub fn h_delta(&self, rho: f64, z: f64) -> f64 {
        self.delta / (self.kappa - 1.0) * self.q(rho, z)
    }

    /// Density `ρ > 0` at which `P_δ(ρ, sρ) = 0` on the ray of ratio `s`,
    /// if the law is cohesive there (bisection on the last sign change).
    pub fn zero_pressure_density(&self, s: f64) -> Option<f64> {
        let f = |r: f64| self.pressure(r, s * r);
        let mut hi = 1.0;
        while f(hi) <= 0.0 {
            hi *= 2.0;
            if hi > 1e6 {
                return None;
            }
        }
        // Scan down for the largest sign change.
        let mut lo = hi;
        let mut found = false;
        for _ in 0..4000 {
            lo *= 0.995;
            if f(lo) < 0.0 {
                found = true;
                break;
            }
        }
        if !found {
            return None;
        }
        let mut hi = lo / 0.995;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

impl PressureFn for RegularizedPressure {
    fn pressure(&self, rho: f64, z: f64) -> f64 {
        self.base.pressure(rho, z) + self.delta * self.q(rho, z)
    }
}

/// Pressure laws with a closed-form Helmholtz function `H` solving
/// `ρ∂_ρH + Z∂_ZH − H = P`, normalised like [`helmholtz`].
pub trait HelmholtzLaw: PressureFn {
    fn helmholtz_density(&self, rho: f64, z: f64) -> f64;
    /// Chemical potentials `(∂_ρH, ∂_ZH)`. At vacuum `H` is only
    /// differentiable along rays, so the ratio `sigma = Z/ρ` of the ray is
    /// supplied by the caller.
    fn potentials(&self, rho: f64, z: f64, sigma: f64) -> (f64, f64);
}

/// Log branch floor for degree-one monomials at vacuum.
const LOG_FLOOR: f64 = 1e-12;

/// `(H, ∂_ρH, ∂_ZH)` of the monomial pressure `ρ^a Z^b`.
fn monomial(a: f64, b: f64, rho: f64, z: f64, sigma: f64) -> (f64, f64, f64) {
    let d = a + b;
    let vacuum = rho <= 0.0;
    let s = if vacuum { sigma } else { z / rho };
    let sb = pw(s, b);
    let sb1 = if b == 0.0 { 0.0 } else { b * s.powf(b - 1.0) };
    if (d - 1.0).abs() < 1e-12 {
        let r = rho.max(LOG_FLOOR);
        let l = r.ln();
        let h = if vacuum { 0.0 } else { rho * sb * l };
        return (h, sb * ((1.0 - b) * l + 1.0), sb1 * l);
    }
    let k = 1.0 / (d - 1.0);
    if vacuum {
        // The degree-d part has zero derivative at the origin when d > 1.
        let rd = if d > 1.0 { 0.0 } else { LOG_FLOOR.powf(d - 1.0) };
        return (0.0, k * (a * rd * sb - (1.0 - b) * sb), k * (rd * sb1 - sb1));
    }
    let rd = rho.powf(d - 1.0);
    let h = k * (rho * rd * sb - rho * sb);
    (h, k * (a * rd * sb - (1.0 - b) * sb), k * (rd * sb1 - sb1))
}

impl HelmholtzLaw for PressureLaw {
    fn helmholtz_density(&self, rho: f64, z: f64) -> f64 {
        self.potentials_and_density(rho, z, 1.0).0
    }

    fn potentials(&self, rho: f64, z: f64, sigma: f64) -> (f64, f64) {
        let (_, a, b) = self.potentials_and_density(rho, z, sigma);
        (a, b)
    }
}

impl PressureLaw {
    fn potentials_and_density(&self, rho: f64, z: f64, sigma: f64) -> (f64, f64, f64) {
        let mut acc = monomial(self.gamma, 0.0, rho, z, sigma);
        let add = |acc: &mut (f64, f64, f64), c: f64, m: (f64, f64, f64)| {
            acc.0 += c * m.0;
            acc.1 += c * m.1;
            acc.2 += c * m.2;
        };
        add(&mut acc, 1.0, monomial(0.0, self.beta, rho, z, sigma));
        for t in &self.terms {
            add(&mut acc, t.c, monomial(t.r, t.s, rho, z, sigma));
        }
        acc
    }
}

impl HelmholtzLaw for RegularizedPressure {
    fn helmholtz_density(&self, rho: f64, z: f64) -> f64 {
        self.base.helmholtz_density(rho, z) + self.h_delta(rho, z)
    }

    fn potentials(&self, rho: f64, z: f64, sigma: f64) -> (f64, f64) {
        let (pr, pz) = self.base.potentials(rho, z, sigma);
        let k = self.kappa;
        let c = self.delta / (k - 1.0);
        let qr = k * pw(rho, k - 1.0) + rho * pw(z, k - 2.0) + 0.5 * (k - 2.0) * z * z * pw(rho, k - 3.0);
        let qz = k * pw(z, k - 1.0) + z * pw(rho, k - 2.0) + 0.5 * (k - 2.0) * rho * rho * pw(z, k - 3.0);
        (pr + c * qr, pz + c * qz)
    }
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, (k - g).abs() * h.abs())
}

/// Adaptive Gauss–Kronrod (7/15) quadrature to an absolute tolerance.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, whole: (f64, f64), depth: u32) -> f64 {
        let (v, err) = whole;
        if err <= tol.max(1e-15 * v.abs()) || depth >= 48 {
            return v;
        }
        let m = 0.5 * (a + b);
        let left = gk15(f, a, m);
        let right = gk15(f, m, b);
        rec(f, a, m, 0.5 * tol, left, depth + 1) + rec(f, m, b, 0.5 * tol, right, depth + 1)
    }
    if a == b {
        return 0.0;
    }
    rec(f, a, b, tol, gk15(f, a, b), 0)
}

/// Absolute tolerance of the Helmholtz quadrature.
pub const HELMHOLTZ_TOL: f64 = 1e-10;

/// `H_P(ρ, Z) = ρ ∫₁^ρ P(s, sZ/ρ)/s² ds`, `H_P(0, 0) = 0`.
pub fn helmholtz<P: PressureFn + ?Sized>(p: &P, rho: f64, z: f64) -> Result<f64, PressureError> {
    check_state(rho, z)?;
    if rho == 0.0 {
        if z > 0.0 {
            return Err(PressureError::OutsideCone { z });
        }
        return Ok(0.0);
    }
    let sigma = z / rho;
    let f = |s: f64| p.pressure(s, s * sigma) / (s * s);
    // The outer factor ρ scales the error; tighten accordingly.
    let tol = HELMHOLTZ_TOL / rho.max(1.0);
    Ok(rho * integrate(&f, 1.0, rho, tol))
}

/// `ℋ_{P,δ} = H_P + h_δ`: the free energy whose pressure (through
/// `ρ∂_ρℋ + Z∂_Zℋ − ℋ`) is exactly `P_δ`.
pub fn helmholtz_total(reg: &RegularizedPressure, rho: f64, z: f64) -> Result<f64, PressureError> {
    Ok(helmholtz(&reg.base, rho, z)? + reg.h_delta(rho, z))
}

/// One row of the audit report.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AuditRow {
    pub quantity: String,
    pub fitted_value: f64,
    pub worst_point_rho: f64,
    pub worst_point_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub monotone: bool,
    /// `[ρ_min, ρ_max]` hull of sampled monotonicity violations.
    pub violation_interval: Option<(f64, f64)>,
    pub c_lower: f64,
    pub c_upper: f64,
    pub alpha: f64,
    pub kappa_lower: f64,
    pub kappa_upper: f64,
    pub gamma_bog: f64,
    pub beta_bog: f64,
    /// Support bound of the non-monotone remainder `ℛ` (0 if monotone).
    pub remainder_support: f64,
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn get(&self, quantity: &str) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.quantity == quantity)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("pressure hypothesis audit\n");
        for r in &self.rows {
            s.push_str(&format!(
                "  {:<22} {:>14.6e}   (worst at rho={:.4e}, s={:.4e})\n",
                r.quantity, r.fitted_value, r.worst_point_rho, r.worst_point_s
            ));
        }
        s.push_str(&format!("  monotone in rho along rays: {}\n", if self.monotone { "yes" } else { "no" }));
        if let Some((a, b)) = self.violation_interval {
            s.push_str(&format!("  monotonicity violations on rho in [{a:.4e}, {b:.4e}]\n"));
        }
        for w in &self.warnings {
            s.push_str(&format!("  warning: {w}\n"));
        }
        s
    }
}

/// Bogovskii integrability gain `min{2γ/3 − 1, γ/2}`.
pub fn bog_exponent(g: f64) -> f64 {
    (2.0 * g / 3.0 - 1.0).min(g / 2.0)
}

/// Sample `(ρ, s) ∈ [0, ρ_max] × [a̲, ā]` and fit the growth, power and
/// derivative bounds, scan monotonicity along rays and build the
/// monotone/remainder split `P(ρ, ρs) = 𝒫 − ℛ` with `𝒫` the running maximum.
pub fn audit_hypotheses(law: &PressureLaw, sample_budget: usize, rho_max: f64) -> AuditReport {
    let budget = sample_budget.max(1000);
    let ns = 16usize;
    let nr = budget.div_ceil(ns).max(64);
    let rho_min = 1e-4;
    let rhos: Vec<f64> = (0..nr)
        .map(|k| rho_min * (rho_max / rho_min).powf(k as f64 / (nr - 1) as f64))
        .collect();
    let ss: Vec<f64> = (0..ns)
        .map(|k| law.a_lower + (law.a_upper - law.a_lower) * k as f64 / (ns - 1) as f64)
        .collect();
    let p = |r: f64, s: f64| law.pressure(r, r * s);

    // Growth bounds.
    let mut c_lo = (f64::INFINITY, 0.0, 0.0);
    let mut c_lo_neg = (f64::NEG_INFINITY, 0.0, 0.0);
    let mut c_hi = (f64::NEG_INFINITY, 0.0, 0.0);
    for &r in &rhos {
        for &s in &ss {
            let g = r.powf(law.gamma) + (r * s).powf(law.beta);
            let v = p(r, s);
            let up = v / (g + 1.0);
            if up > c_hi.0 {
                c_hi = (up, r, s);
            }
            let d = g - 1.0;
            if d > 1e-12 {
                if v / d < c_lo.0 {
                    c_lo = (v / d, r, s);
                }
            } else if d < -1e-12 && v / d > c_lo_neg.0 {
                c_lo_neg = (v / d, r, s);
            }
        }
    }
    let mut warnings = Vec::new();
    if c_lo.0 < c_lo_neg.0 || c_lo.0 <= 0.0 {
        warnings.push("H3 growth: no positive lower constant fits the samples".to_string());
    }

    // Power bound near zero and derivative exponents from log-log slopes.
    let sup_s = |f: &dyn Fn(f64, f64) -> f64, r: f64| ss.iter().map(|&s| f(r, s).abs()).fold(0.0, f64::max);
    let slope = |f: &dyn Fn(f64, f64) -> f64, r0: f64, r1: f64| {
        let (a, b) = (sup_s(f, r0), sup_s(f, r1));
        if a > 0.0 && b > 0.0 {
            (b / a).ln() / (r1 / r0).ln()
        } else {
            0.0
        }
    };
    let alpha = slope(&|r, s| p(r, s), 1e-4, 1e-3);
    let dzp = |r: f64, s: f64| law.dz(r, r * s);
    let kappa_upper = slope(&dzp, rho_max / 10.0, rho_max) + 1.0;
    let kappa_lower = (-slope(&dzp, 1e-4, 1e-3)).max(0.0);
    let gamma_bog = bog_exponent(law.gamma);
    let beta_bog = bog_exponent(law.beta);
    let kappa_limit = (law.gamma + gamma_bog).max(law.beta + beta_bog);
    if kappa_upper >= kappa_limit {
        warnings.push(format!("H3 derivative bound: fitted kappa_upper {kappa_upper:.4} ≥ {kappa_limit:.4}"));
    }
    if kappa_lower >= 1.0 {
        warnings.push(format!("H3 derivative bound: fitted kappa_lower {kappa_lower:.4} ≥ 1"));
    }

    // Monotonicity along rays on a uniform grid including 0, and the
    // running-maximum decomposition.
    let nm = budget.div_ceil(ns).max(256);
    let mono_max = rho_max.min(10.0 * (1.0f64).max(law.a_upper));
    let per_s: Vec<(Option<(f64, f64)>, f64, f64, f64)> = par::map(ns, |k| {
        let s = ss[k];
        let mut prev = p(0.0, s);
        let mut run_max = prev;
        let mut interval: Option<(f64, f64)> = None;
        let mut support: f64 = 0.0;
        let mut worst = (0.0, 0.0);
        for i in 1..=nm {
            let r = mono_max * i as f64 / nm as f64;
            let v = p(r, s);
            if v < prev - 1e-12 * prev.abs().max(1.0) {
                interval = Some(match interval {
                    None => (r - mono_max / nm as f64, r),
                    Some((a, _)) => (a, r),
                });
            }
            run_max = run_max.max(v);
            let rem = run_max - v;
            if rem > 1e-12 * run_max.abs().max(1.0) {
                support = r;
            }
            if rem > worst.0 {
                worst = (rem, r);
            }
            prev = v;
        }
        (interval, support, worst.0, worst.1)
    });
    let mut violation_interval: Option<(f64, f64)> = None;
    let mut support: f64 = 0.0;
    let mut rem_sup = (0.0, 0.0, 0.0);
    for (k, (iv, sup, wv, wr)) in per_s.into_iter().enumerate() {
        if let Some((a, b)) = iv {
            violation_interval = Some(match violation_interval {
                None => (a, b),
                Some((c, d)) => (c.min(a), d.max(b)),
            });
        }
        support = support.max(sup);
        if wv > rem_sup.0 {
            rem_sup = (wv, wr, ss[k]);
        }
    }
    let monotone = violation_interval.is_none();

    let row = |q: &str, v: f64, r: f64, s: f64| AuditRow {
        quantity: q.to_string(),
        fitted_value: v,
        worst_point_rho: r,
        worst_point_s: s,
    };
    let (vi_lo, vi_hi) = violation_interval.unwrap_or((0.0, 0.0));
    let rows = vec![
        row("C_lower", c_lo.0, c_lo.1, c_lo.2),
        row("C_upper", c_hi.0, c_hi.1, c_hi.2),
        row("alpha", alpha, 1e-4, law.a_lower),
        row("kappa_lower", kappa_lower, 1e-4, law.a_upper),
        row("kappa_upper", kappa_upper, rho_max, law.a_upper),
        row("kappa_upper_limit", kappa_limit, rho_max, law.a_upper),
        row("gamma_bog", gamma_bog, 0.0, 0.0),
        row("beta_bog", beta_bog, 0.0, 0.0),
        row("monotone", if monotone { 1.0 } else { 0.0 }, vi_lo, vi_hi),
        row("remainder_sup", rem_sup.0, rem_sup.1, rem_sup.2),
        row("remainder_support", support, support, rem_sup.2),
    ];
    AuditReport {
        rows,
        monotone,
        violation_interval,
        c_lower: c_lo.0,
        c_upper: c_hi.0,
        alpha,
        kappa_lower,
        kappa_upper,
        gamma_bog,
        beta_bog,
        remainder_support: support,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed_law() -> RegularizedPressure {
        let law = PressureLaw {
            gamma: 3.0,
            beta: 2.5,
            terms: vec![CrossTerm { c: -2.0, r: 1.0, s: 1.0 }, CrossTerm { c: 0.3, r: 0.5, s: 0.5 }],
            a_lower: 0.5,
            a_upper: 2.0,
        };
        RegularizedPressure::new(law, 0.05, 8.0)
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let reg = mixed_law();
        for &(r, z) in &[(0.3, 0.2), (1.0, 1.0), (1.7, 0.9), (0.05, 0.09)] {
            let q = helmholtz_total(&reg, r, z).unwrap();
            let c = reg.helmholtz_density(r, z);
            assert!((q - c).abs() < 1e-9 * (1.0 + q.abs()), "{r} {z}: {q} vs {c}");
        }
    }

    #[test]
    fn potentials_are_derivatives() {
        let reg = mixed_law();
        let e = 1e-6;
        for &(r, z) in &[(0.3, 0.2), (1.2, 0.8)] {
            let (pr, pz) = reg.potentials(r, z, z / r);
            let fr = (reg.helmholtz_density(r + e, z) - reg.helmholtz_density(r - e, z)) / (2.0 * e);
            let fz = (reg.helmholtz_density(r, z + e) - reg.helmholtz_density(r, z - e)) / (2.0 * e);
            assert!((pr - fr).abs() < 1e-6 && (pz - fz).abs() < 1e-6, "{pr} {fr} {pz} {fz}");
        }
    }

    #[test]
    fn vacuum_potential_is_ray_derivative() {
        // No degree-one term: its ray derivative diverges logarithmically.
        let mut reg = mixed_law();
        reg.base.terms.pop();
        let (s, e) = (1.3, 1e-9);
        let (pr, pz) = reg.potentials(0.0, 0.0, s);
        let ray = reg.helmholtz_density(e, s * e) / e;
        assert!((pr + s * pz - ray).abs() < 1e-6, "{} vs {ray}", pr + s * pz);
    }

    #[test]
    fn gk_integrates_polynomials_exactly() {
        let v = integrate(&|x: f64| x.powi(5) - 3.0 * x, 0.0, 2.0, 1e-12);
        assert!((v - (64.0 / 6.0 - 6.0)).abs() < 1e-13);
    }

    #[test]
    fn gk_handles_reversed_interval() {
        let v = integrate(&|x: f64| x, 1.0, 0.5, 1e-12);
        assert!((v - (0.125 - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn zero_pressure_density_of_cohesive_law() {
        let law = PressureLaw {
            gamma: 3.0,
            beta: 3.0,
            terms: vec![CrossTerm { c: -2.0, r: 1.0, s: 1.0 }],
            a_lower: 0.5,
            a_upper: 2.0,
        };
        let reg = RegularizedPressure::new(law, 0.0, 8.0);
        let r = reg.zero_pressure_density(1.0).unwrap();
        assert!((r - 1.0).abs() < 1e-12, "{r}");
    }

    #[test]
    fn constant_term_flagged() {
        let mut law = PressureLaw::pure(3.0, 3.0, 0.5, 2.0);
        law.terms.push(CrossTerm { c: 1.0, r: 0.0, s: 0.0 });
        assert!(law.violations().iter().any(|v| v.contains("P(0,0)")));
    }
}
