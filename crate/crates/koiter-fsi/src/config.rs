//! Run configuration: sectioned `key = value` text.
//!
//! ```text
//! [geometry]
//! kind = flat            # flat | torus
//! [pressure]
//! gamma = 3
//! terms = -2 1 1         # C r s; C r s; ...
//! [scheme]
//! tau = 2e-3
//! ```
//!
//! Unknown sections or keys are errors. Parsing collects every problem
//! instead of stopping at the first one.

use crate::coupling::{CaseFlag, InitialData, Problem, SchemeParams};
use crate::fluid_solver::{Boundary, FluidGrid};
use crate::geometry::{build_reference, ParamGrid, SurfaceKind, DEFAULT_CUTOFF_FRACTIONS};
use crate::pressure::{CrossTerm, PressureLaw, RegularizedPressure, DEFAULT_KAPPA};
use crate::shell_energy::{DerivativeRule, ElasticityParams};
use crate::structure_solver::PicardParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeometryKind {
    Flat,
    Torus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Rest,
    PressurePulse,
    ShellPluck,
    Manufactured,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Rest => "rest",
            Scenario::PressurePulse => "pressure-pulse",
            Scenario::ShellPluck => "shell-pluck",
            Scenario::Manufactured => "manufactured",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub kind: GeometryKind,
    pub n1: usize,
    pub n2: usize,
    pub length1: f64,
    pub length2: f64,
    pub half_width: f64,
    pub major_radius: f64,
    pub minor_radius: f64,
    pub cutoff_fractions: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FluidConfig {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub z_lo: f64,
    pub z_hi: f64,
    pub padding: f64,
    pub mu: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShellConfig {
    pub lambda_s: f64,
    pub mu_s: f64,
    pub thickness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitialConfig {
    pub scenario: Scenario,
    /// `None`: the zero-pressure density of the law (vacuum if there is none).
    pub rho0: Option<f64>,
    pub ratio: f64,
    pub amplitude: f64,
    pub mode: usize,
    pub pulse_amplitude: f64,
    pub pulse_width: f64,
    pub velocity: f64,
    /// Peak of the initial shell velocity (pluck profile).
    pub shell_velocity: f64,
    pub noise: f64,
}

/// A validated run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub fluid: FluidConfig,
    pub pressure: PressureLaw,
    pub shell: ShellConfig,
    pub scheme: SchemeParams,
    pub initial: InitialConfig,
    pub output_dir: String,
    pub seed: u64,
}

const KEYS: &[(&str, &[&str])] = &[
    (
        "geometry",
        &["kind", "n1", "n2", "length1", "length2", "half_width", "major_radius", "minor_radius", "cutoff_fractions"],
    ),
    ("fluid", &["nx", "ny", "nz", "z_lo", "z_hi", "padding", "mu", "lambda"]),
    ("pressure", &["gamma", "beta", "terms", "a_lower", "a_upper"]),
    ("shell", &["lambda_s", "mu_s", "thickness", "keep_inertia_factor"]),
    (
        "scheme",
        &[
            "tau",
            "substeps",
            "delta",
            "omega",
            "zeta",
            "kappa",
            "t_end",
            "case",
            "picard_theta",
            "picard_tol",
            "picard_max_iter",
            "leak_tolerance",
            "ledger_tolerance",
            "dt_fluid_cap",
            "rule",
        ],
    ),
    (
        "initial",
        &["scenario", "rho0", "ratio", "amplitude", "mode", "pulse_amplitude", "pulse_width", "velocity", "shell_velocity", "noise"],
    ),
    ("output", &["dir", "seed"]),
];

type Table = BTreeMap<(String, String), (usize, String)>;

fn tokenize(text: &str, errors: &mut Vec<String>) -> Table {
    let mut table = Table::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let ln = i + 1;
        if let Some(s) = line.strip_prefix('[') {
            match s.strip_suffix(']') {
                Some(name) if KEYS.iter().any(|(k, _)| *k == name.trim()) => section = Some(name.trim().to_string()),
                Some(name) => {
                    errors.push(format!("line {ln}: unknown section [{}]", name.trim()));
                    section = None;
                }
                None => errors.push(format!("line {ln}: malformed section header")),
            }
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!("line {ln}: expected `key = value`"));
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        let Some(sec) = &section else {
            errors.push(format!("line {ln}: key `{k}` outside a known section"));
            continue;
        };
        let allowed = KEYS.iter().find(|(s, _)| s == sec).map(|x| x.1).unwrap_or(&[]);
        if !allowed.contains(&k) {
            errors.push(format!("line {ln}: unknown key `{k}` in [{sec}]"));
            continue;
        }
        if table.insert((sec.clone(), k.to_string()), (ln, v.to_string())).is_some() {
            errors.push(format!("line {ln}: duplicate key `{k}` in [{sec}]"));
        }
    }
    table
}

struct Reader<'a> {
    t: &'a Table,
    errors: &'a mut Vec<String>,
}

impl Reader<'_> {
    fn raw(&self, s: &str, k: &str) -> Option<&(usize, String)> {
        self.t.get(&(s.to_string(), k.to_string()))
    }

    fn f64(&mut self, s: &str, k: &str, default: f64) -> f64 {
        match self.raw(s, k) {
            None => default,
            Some((ln, v)) => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => x,
                _ => {
                    let msg = format!("line {ln}: [{s}] {k}: expected a finite number, got `{v}`");
                    self.errors.push(msg);
                    default
                }
            },
        }
    }

    fn opt_f64(&mut self, s: &str, k: &str) -> Option<f64> {
        match self.raw(s, k) {
            Some((_, v)) if v == "auto" => None,
            Some(_) => Some(self.f64(s, k, 0.0)),
            None => None,
        }
    }

    fn usize(&mut self, s: &str, k: &str, default: usize) -> usize {
        match self.raw(s, k) {
            None => default,
            Some((ln, v)) => match v.parse::<usize>() {
                Ok(x) => x,
                Err(_) => {
                    let msg = format!("line {ln}: [{s}] {k}: expected a non-negative integer, got `{v}`");
                    self.errors.push(msg);
                    default
                }
            },
        }
    }

    fn bool(&mut self, s: &str, k: &str, default: bool) -> bool {
        match self.raw(s, k) {
            None => default,
            Some((ln, v)) => match v.as_str() {
                "true" | "yes" | "1" => true,
                "false" | "no" | "0" => false,
                _ => {
                    let msg = format!("line {ln}: [{s}] {k}: expected true/false, got `{v}`");
                    self.errors.push(msg);
                    default
                }
            },
        }
    }

    fn choice<T: Copy>(&mut self, s: &str, k: &str, default: T, options: &[(&str, T)]) -> T {
        match self.raw(s, k) {
            None => default,
            Some((ln, v)) => match options.iter().find(|(n, _)| n == v) {
                Some(&(_, x)) => x,
                None => {
                    let names: Vec<&str> = options.iter().map(|o| o.0).collect();
                    let msg = format!("line {ln}: [{s}] {k}: expected one of {}, got `{v}`", names.join(", "));
                    self.errors.push(msg);
                    default
                }
            },
        }
    }

    fn string(&self, s: &str, k: &str, default: &str) -> String {
        self.raw(s, k).map_or(default.to_string(), |x| x.1.clone())
    }
}

fn parse_terms(text: &str, errors: &mut Vec<String>) -> Vec<CrossTerm> {
    let mut out = Vec::new();
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let nums: Result<Vec<f64>, _> = part.split_whitespace().map(str::parse::<f64>).collect();
        match nums {
            Ok(v) if v.len() == 3 => out.push(CrossTerm { c: v[0], r: v[1], s: v[2] }),
            _ => errors.push(format!("[pressure] terms: `{part}` is not `C r s`")),
        }
    }
    out
}

impl RunConfig {
    /// Parse and validate, reporting every violation.
    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        let mut errors = Vec::new();
        let table = tokenize(text, &mut errors);
        let mut r = Reader { t: &table, errors: &mut errors };

        let kind = r.choice("geometry", "kind", GeometryKind::Flat, &[("flat", GeometryKind::Flat), ("torus", GeometryKind::Torus)]);
        let torus = kind == GeometryKind::Torus;
        let mut fractions = DEFAULT_CUTOFF_FRACTIONS;
        if let Some((ln, v)) = r.raw("geometry", "cutoff_fractions").cloned() {
            let p: Result<Vec<f64>, _> = v.split(',').map(|x| x.trim().parse::<f64>()).collect();
            match p {
                Ok(p) if p.len() == 3 => fractions = [p[0], p[1], p[2]],
                _ => r.errors.push(format!("line {ln}: [geometry] cutoff_fractions: expected three comma-separated numbers")),
            }
        }
        let geometry = GeometryConfig {
            kind,
            n1: r.usize("geometry", "n1", if torus { 32 } else { 64 }),
            n2: r.usize("geometry", "n2", if torus { 16 } else { 4 }),
            length1: r.f64("geometry", "length1", if torus { 2.0 * PI } else { 1.0 }),
            length2: r.f64("geometry", "length2", if torus { 2.0 * PI } else { 1.0 / 96.0 }),
            half_width: r.f64("geometry", "half_width", 0.2),
            major_radius: r.f64("geometry", "major_radius", 1.0),
            minor_radius: r.f64("geometry", "minor_radius", 0.4),
            cutoff_fractions: fractions,
        };
        let fluid = FluidConfig {
            nx: r.usize("fluid", "nx", if torus { 24 } else { 96 }),
            ny: r.usize("fluid", "ny", if torus { 24 } else { 1 }),
            nz: r.usize("fluid", "nz", if torus { 12 } else { 96 }),
            z_lo: r.f64("fluid", "z_lo", -0.75),
            z_hi: r.f64("fluid", "z_hi", 0.25),
            padding: r.f64("fluid", "padding", 0.2),
            mu: r.f64("fluid", "mu", 0.05),
            lambda: r.f64("fluid", "lambda", 0.0),
        };
        let mut terr = Vec::new();
        let terms = match r.raw("pressure", "terms") {
            Some((_, v)) => parse_terms(&v.clone(), &mut terr),
            None => vec![CrossTerm { c: -2.0, r: 1.0, s: 1.0 }],
        };
        r.errors.extend(terr);
        let pressure = PressureLaw {
            gamma: r.f64("pressure", "gamma", 3.0),
            beta: r.f64("pressure", "beta", 3.0),
            terms,
            a_lower: r.f64("pressure", "a_lower", 0.5),
            a_upper: r.f64("pressure", "a_upper", 2.0),
        };
        let shell = ShellConfig {
            lambda_s: r.f64("shell", "lambda_s", 1000.0),
            mu_s: r.f64("shell", "mu_s", 1000.0),
            thickness: r.f64("shell", "thickness", 0.1),
        };
        let keep_inertia_factor = r.bool("shell", "keep_inertia_factor", true);
        let zeta = r.f64("scheme", "zeta", 0.01);
        let case_choice = r.choice(
            "scheme",
            "case",
            None,
            &[("auto", None), ("I", Some(CaseFlag::I)), ("II", Some(CaseFlag::II))],
        );
        let tau = r.f64("scheme", "tau", 2e-3);
        let scheme = SchemeParams {
            tau,
            dt_fluid_cap: r.opt_f64("scheme", "dt_fluid_cap"),
            substeps: r.usize("scheme", "substeps", 20),
            delta: r.f64("scheme", "delta", 0.05),
            omega: r.f64("scheme", "omega", 0.05),
            zeta,
            kappa: r.f64("scheme", "kappa", DEFAULT_KAPPA),
            t_end: r.f64("scheme", "t_end", 200.0 * tau),
            case: CaseFlag::I,
            keep_inertia_factor,
            picard: PicardParams {
                theta: r.f64("scheme", "picard_theta", 0.5),
                tol: r.f64("scheme", "picard_tol", PicardParams::default().tol),
                max_iter: r.usize("scheme", "picard_max_iter", PicardParams::default().max_iter),
            },
            leak_tolerance: r.f64("scheme", "leak_tolerance", 1e-3),
            ledger_tolerance: r.f64("scheme", "ledger_tolerance", 1e-6),
            rule: r.choice(
                "scheme",
                "rule",
                DerivativeRule::Simpson,
                &[("simpson", DerivativeRule::Simpson), ("lagged", DerivativeRule::LaggedEndpoint)],
            ),
        };
        let initial = InitialConfig {
            scenario: r.choice(
                "initial",
                "scenario",
                Scenario::Rest,
                &[
                    ("rest", Scenario::Rest),
                    ("pressure-pulse", Scenario::PressurePulse),
                    ("shell-pluck", Scenario::ShellPluck),
                    ("manufactured", Scenario::Manufactured),
                ],
            ),
            rho0: r.opt_f64("initial", "rho0"),
            ratio: r.f64("initial", "ratio", 1.0),
            amplitude: r.f64("initial", "amplitude", 5e-4),
            mode: r.usize("initial", "mode", 1),
            pulse_amplitude: r.f64("initial", "pulse_amplitude", 0.05),
            pulse_width: r.f64("initial", "pulse_width", 0.15),
            velocity: r.f64("initial", "velocity", 0.0),
            shell_velocity: r.f64("initial", "shell_velocity", 0.0),
            noise: r.f64("initial", "noise", 0.0),
        };
        let output_dir = r.string("output", "dir", "out");
        let seed = r.usize("output", "seed", 0) as u64;

        let mut cfg = RunConfig { geometry, fluid, pressure, shell, scheme, initial, output_dir, seed };
        // Case gating.
        let (g, b) = (cfg.pressure.gamma, cfg.pressure.beta);
        match case_choice {
            Some(c) => {
                cfg.scheme.case = c;
                if let Some(m) = c.violation(g, b, zeta) {
                    errors.push(m);
                }
            }
            None => match CaseFlag::infer(g, b, zeta) {
                Ok(c) => cfg.scheme.case = c,
                Err(m) => errors.push(m),
            },
        }
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    /// Constraint violations of an assembled configuration.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let reg = RegularizedPressure::new(self.pressure.clone(), self.scheme.delta, self.scheme.kappa);
        v.extend(reg.violations());
        v.extend(self.scheme.violations());
        let g = &self.geometry;
        if g.n1 < 4 || g.n2 < 4 {
            v.push(format!("[geometry] shell grid needs at least 4×4 nodes (got {}×{})", g.n1, g.n2));
        }
        let s = &self.shell;
        if !(s.lambda_s > 0.0 && s.mu_s > 0.0 && s.thickness > 0.0) {
            v.push("[shell] lambda_s, mu_s and thickness must be positive".into());
        }
        let f = &self.fluid;
        if !(f.mu > 0.0) || f.lambda < 0.0 {
            v.push(format!("[fluid] need mu > 0 and lambda ≥ 0 (got {}, {})", f.mu, f.lambda));
        }
        match g.kind {
            GeometryKind::Flat => {
                if !(g.half_width > 0.0) {
                    v.push("[geometry] half_width must be positive".into());
                }
                if !(f.z_lo < -g.half_width && f.z_hi > g.half_width) {
                    v.push(format!(
                        "[fluid] the box z ∈ [{}, {}] must strictly contain the band ±{}",
                        f.z_lo, f.z_hi, g.half_width
                    ));
                }
            }
            GeometryKind::Torus => {
                if !(g.major_radius > g.minor_radius && g.minor_radius > 0.0) {
                    v.push("[geometry] torus needs major_radius > minor_radius > 0".into());
                }
                if !(f.padding > 0.0) {
                    v.push("[fluid] padding must be positive".into());
                }
            }
        }
        let i = &self.initial;
        if !(i.ratio >= self.pressure.a_lower && i.ratio <= self.pressure.a_upper) {
            v.push(format!(
                "H1 cone: initial ratio Z/rho = {} outside [a_lower, a_upper] = [{}, {}]",
                i.ratio, self.pressure.a_lower, self.pressure.a_upper
            ));
        }
        if i.noise < 0.0 {
            v.push("[initial] noise must be non-negative".into());
        }
        v
    }

    pub fn regularized_pressure(&self) -> RegularizedPressure {
        RegularizedPressure::new(self.pressure.clone(), self.scheme.delta, self.scheme.kappa)
    }

    /// Assemble the problem and the raw initial data of the scenario.
    pub fn build(&self) -> Result<(Problem, InitialData), String> {
        let g = &self.geometry;
        let f = &self.fluid;
        let (kind, pgrid) = match g.kind {
            GeometryKind::Flat => (
                SurfaceKind::FlatSlab { half_width: g.half_width },
                ParamGrid::periodic(g.n1, g.n2, g.length1, g.length2),
            ),
            GeometryKind::Torus => (
                SurfaceKind::Torus { major: g.major_radius, minor: g.minor_radius },
                ParamGrid::periodic(g.n1, g.n2, 2.0 * PI, 2.0 * PI),
            ),
        };
        let pgrid = pgrid.map_err(|e| e.to_string())?;
        let geom = build_reference(&kind, pgrid)
            .and_then(|r| r.with_cutoff_fractions(g.cutoff_fractions))
            .map_err(|e| e.to_string())?;
        let grid = match g.kind {
            GeometryKind::Flat => FluidGrid::new(
                [f.nx, f.ny, f.nz],
                [0.0, 0.0, f.z_lo],
                [g.length1, g.length2, f.z_hi],
                [Boundary::Periodic, Boundary::Periodic, Boundary::Wall],
            ),
            GeometryKind::Torus => {
                let e = g.major_radius + g.minor_radius + f.padding;
                let ez = g.minor_radius + f.padding;
                FluidGrid::new([f.nx, f.ny, f.nz], [-e, -e, -ez], [e, e, ez], [Boundary::Wall; 3])
            }
        }
        .map_err(|e| e.to_string())?;
        let pressure = self.regularized_pressure();
        let problem = Problem {
            geom,
            grid,
            pressure,
            elastic: ElasticityParams {
                lambda_s: self.shell.lambda_s,
                mu_s: self.shell.mu_s,
                h_thick: self.shell.thickness,
                delta_reg: self.scheme.delta,
                zeta: self.scheme.zeta,
            },
            mu: f.mu,
            lambda: f.lambda,
            scheme: self.scheme.clone(),
        };
        let data = self.initial_data(&problem);
        Ok((problem, data))
    }

    /// Reference density: explicit, else the zero-pressure density of `P_δ`
    /// on the initial ratio, else vacuum.
    pub fn rho0(&self) -> f64 {
        self.initial.rho0.unwrap_or_else(|| {
            self.regularized_pressure().zero_pressure_density(self.initial.ratio).unwrap_or(0.0)
        })
    }

    fn initial_data(&self, p: &Problem) -> InitialData {
        let i = &self.initial;
        let grid = &p.grid;
        let nc = grid.len();
        let nn = p.geom.grid.len();
        let rho0 = self.rho0();
        let mut rho = vec![rho0; nc];
        let mut u = vec![[0.0; 3]; nc];
        let mut eta0 = vec![0.0; nn];
        let mut eta1 = vec![0.0; nn];
        let (l1, _) = p.geom.grid.lengths();
        match i.scenario {
            Scenario::Rest => {}
            Scenario::ShellPluck => {
                for n in 0..nn {
                    let (a, _) = p.geom.grid.coords(n);
                    let x = a as f64 * p.geom.grid.h1;
                    let profile = (2.0 * PI * i.mode as f64 * x / l1).sin();
                    eta0[n] = i.amplitude * profile;
                    eta1[n] = i.shell_velocity * profile;
                }
            }
            Scenario::PressurePulse => {
                let centre = match self.geometry.kind {
                    GeometryKind::Flat => crate::geometry::V3::new(0.5 * l1, 0.5 * self.geometry.length2, 0.5 * self.fluid.z_lo),
                    GeometryKind::Torus => crate::geometry::V3::new(self.geometry.major_radius, 0.0, 0.0),
                };
                for (c, r) in rho.iter_mut().enumerate() {
                    let d = (grid.center(c) - centre).norm() / i.pulse_width;
                    if d < 1.0 {
                        *r *= 1.0 + i.pulse_amplitude * (1.0 - d * d).powi(2);
                    }
                }
            }
            Scenario::Manufactured => {
                for c in 0..nc {
                    let x = grid.center(c);
                    let s = (2.0 * PI * x.x / grid.hi(0).max(1e-12)).sin();
                    rho[c] *= 1.0 + 0.1 * s;
                    u[c] = [i.velocity * (2.0 * PI * x.z).sin(), 0.0, 0.0];
                }
            }
        }
        if i.velocity != 0.0 && i.scenario != Scenario::Manufactured {
            u.iter_mut().for_each(|v| v[0] = i.velocity);
        }
        if i.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for e in eta0.iter_mut() {
                *e += i.noise * rng.gen_range(-1.0..1.0);
            }
        }
        let z = rho.iter().map(|r| i.ratio * r).collect();
        InitialData { rho, z, u, eta0, eta1 }
    }
}
