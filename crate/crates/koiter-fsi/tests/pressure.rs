use koiter_fsi::pressure::*;
use proptest::prelude::*;

/// `P = ρ^γ`, independent of `Z`.
struct RhoOnly(f64);

impl PressureFn for RhoOnly {
    fn pressure(&self, rho: f64, _z: f64) -> f64 {
        rho.powf(self.0)
    }
}

/// Only the regularising part `q` of a regularised law.
struct DeltaPart<'a>(&'a RegularizedPressure);

impl PressureFn for DeltaPart<'_> {
    fn pressure(&self, rho: f64, z: f64) -> f64 {
        self.0.delta * self.0.q(rho, z)
    }
}

fn mixed() -> PressureLaw {
    PressureLaw {
        gamma: 3.0,
        beta: 2.5,
        terms: vec![CrossTerm { c: 0.4, r: 1.0, s: 1.0 }, CrossTerm { c: 0.2, r: 0.5, s: 1.5 }],
        a_lower: 0.5,
        a_upper: 2.0,
    }
}

#[test]
fn pressure_values() {
    let law = PressureLaw::pure(2.0, 2.0, 0.5, 2.0);
    assert_eq!(law.eval(1.0, 1.0).unwrap(), 2.0);
    assert_eq!(law.eval(0.0, 0.0).unwrap(), 0.0);
    assert!(law.eval(-1.0, 0.0).is_err());
    let reg = RegularizedPressure::new(law.clone(), 0.1, 5.0);
    assert!((reg.eval(1.0, 1.0).unwrap() - 2.3).abs() < 1e-15);
}

#[test]
fn helmholtz_values() {
    assert!((helmholtz(&RhoOnly(2.0), 2.0, 0.0).unwrap() - 2.0).abs() < 1e-12);
    let law = mixed();
    for s in [0.5, 1.0, 2.0] {
        assert_eq!(helmholtz(&law, 1.0, s).unwrap(), 0.0);
    }
    assert_eq!(helmholtz(&law, 0.0, 0.0).unwrap(), 0.0);
    assert!(helmholtz(&law, 0.0, 0.5).is_err());
}

#[test]
fn regularised_free_energy_values() {
    let reg = RegularizedPressure::new(PressureLaw::pure(2.0, 2.0, 0.5, 2.0), 0.1, 5.0);
    assert_eq!(helmholtz_total(&reg, 0.0, 0.0).unwrap(), 0.0);
    assert!((helmholtz_total(&reg, 1.0, 1.0).unwrap() - 0.075).abs() < 1e-12);
}

#[test]
fn regularising_free_energy_matches_quadrature() {
    let reg = RegularizedPressure::new(mixed(), 0.05, 8.0);
    for &(r, z) in &[(0.3, 0.2), (1.0, 1.5), (2.5, 1.4), (0.1, 0.19)] {
        let q = helmholtz(&DeltaPart(&reg), r, z).unwrap();
        let c = reg.h_delta(r, z);
        // h_δ is normalised to vanish at vacuum, the quadrature at ρ = 1;
        // q is homogeneous, so they differ by ρ h_δ(1, s).
        let at_one = reg.h_delta(1.0, z / r);
        assert!((c - r * at_one - q).abs() < 1e-9 * (1.0 + q.abs()), "{r} {z}: {c} vs {q}");
        // |ℋ_δ − H_P| ≤ δ (q(ρ, Z) + ρ q(1, s))/(κ − 1).
        let gap = helmholtz_total(&reg, r, z).unwrap() - helmholtz(&reg.base, r, z).unwrap();
        let bound = reg.delta / (reg.kappa - 1.0) * (reg.q(r, z) + r * reg.q(1.0, z / r));
        assert!(gap.abs() <= bound * (1.0 + 1e-12));
    }
}

#[test]
fn audit_of_pure_quadratic_law() {
    let report = audit_hypotheses(&PressureLaw::pure(2.0, 2.0, 0.5, 2.0), 20_000, 4.0);
    assert!(report.monotone);
    assert!((report.c_lower - 1.0).abs() < 0.1 && (report.c_upper - 1.0).abs() < 0.1, "{report:?}");
    assert!((report.alpha - 2.0).abs() < 0.05);
    assert_eq!(report.remainder_support, 0.0);
}

#[test]
fn audit_finds_non_monotone_interval() {
    let law = PressureLaw {
        gamma: 3.0,
        beta: 3.0,
        terms: vec![CrossTerm { c: -2.0, r: 1.0, s: 1.0 }],
        a_lower: 0.5,
        a_upper: 2.0,
    };
    let report = audit_hypotheses(&law, 20_000, 4.0);
    assert!(!report.monotone);
    let (a, b) = report.violation_interval.unwrap();
    assert!(a < b);
    // The ray derivative 3ρ²(1+s³) − 4sρ is negative near ρ = 0.
    assert!(a < 0.1);
}

#[test]
fn audit_power_exponent_of_unequal_law() {
    let report = audit_hypotheses(&PressureLaw::pure(2.0, 3.0, 0.5, 2.0), 20_000, 4.0);
    assert!((report.alpha - 2.0).abs() < 0.05, "{}", report.alpha);
}

proptest! {
    #[test]
    fn pressure_is_nonnegative_in_the_cone(rho in 0.0f64..5.0, t in 0.0f64..1.0) {
        let law = mixed();
        let z = rho * (law.a_lower + t * (law.a_upper - law.a_lower));
        prop_assert!(law.eval(rho, z).unwrap() >= 0.0);
    }

    #[test]
    fn free_energy_is_convex_along_rays(rho in 0.05f64..3.0, t in 0.0f64..1.0) {
        let law = PressureLaw::pure(2.0, 3.0, 0.5, 2.0);
        let s = law.a_lower + t * (law.a_upper - law.a_lower);
        let h = 1e-2;
        let f = |r: f64| law.helmholtz_density(r, s * r);
        prop_assert!(f(rho + h) - 2.0 * f(rho) + f(rho - h) >= -1e-10);
    }

    #[test]
    fn regularisation_dominates(rho in 1.0f64..3.0, z in 1.0f64..3.0) {
        let reg = RegularizedPressure::new(mixed(), 0.01, 8.0);
        let base = reg.base.pressure(rho, z);
        prop_assert!(reg.pressure(rho, z) >= base + 0.5 * reg.delta * rho.max(z).powf(reg.kappa));
    }

    #[test]
    fn closed_form_potentials_satisfy_the_free_energy_equation(rho in 0.05f64..3.0, t in 0.0f64..1.0) {
        let reg = RegularizedPressure::new(mixed(), 0.01, 8.0);
        let z = rho * (0.5 + 1.5 * t);
        let (mr, mz) = reg.potentials(rho, z, z / rho);
        let p = reg.pressure(rho, z);
        let lhs = rho * mr + z * mz - reg.helmholtz_density(rho, z);
        prop_assert!((lhs - p).abs() <= 1e-10 * (1.0 + p.abs()));
    }
}
