use std::f64::consts::PI;

use koiter_fsi::fluid_solver::*;
use koiter_fsi::geometry::{build_reference, ParamGrid, SurfaceKind, V3};
use koiter_fsi::pressure::{PressureLaw, RegularizedPressure};
use proptest::prelude::*;

fn periodic(n: [usize; 3]) -> FluidGrid {
    FluidGrid::new(n, [0.0; 3], [1.0; 3], [Boundary::Periodic; 3]).unwrap()
}

fn law() -> RegularizedPressure {
    RegularizedPressure::new(PressureLaw::pure(2.0, 2.0, 0.5, 2.0), 0.01, 8.0)
}

#[test]
fn viscosity_extension_values() {
    let (mu, lambda, omega) = (0.3, 0.1, 0.05);
    let v = viscosity_from_distances(&[-0.2, 0.0, 3.0 * omega, 10.0], omega, mu, lambda);
    assert_eq!(v.mu[0], mu);
    assert_eq!(v.mu[1], mu);
    for &m in &v.mu[2..] {
        assert!(m >= omega * mu && m < 2.0 * omega * mu, "{m}");
    }
}

#[test]
fn exterior_viscosity_scales_with_omega() {
    let geom = build_reference(&SurfaceKind::FlatSlab { half_width: 0.2 }, ParamGrid::periodic(8, 8, 1.0, 1.0).unwrap())
        .unwrap();
    let grid = FluidGrid::new(
        [8, 8, 64],
        [0.0, 0.0, -1.0],
        [1.0, 1.0, 1.0],
        [Boundary::Periodic, Boundary::Periodic, Boundary::Wall],
    )
    .unwrap();
    let eta = vec![0.0; geom.grid.len()];
    let exterior = |omega: f64| -> f64 {
        let v = extend_viscosity(&grid, &geom, &eta, omega, 1.0, 0.0).unwrap();
        (0..grid.len()).filter(|&c| grid.center(c).z > 0.0).map(|c| v.mu[c]).sum()
    };
    let ratio = exterior(0.5) / exterior(0.05);
    assert!(ratio > 5.0 && ratio < 20.0, "{ratio}");
    let inside = extend_viscosity(&grid, &geom, &eta, 0.05, 1.0, 0.0).unwrap();
    assert!((0..grid.len()).filter(|&c| grid.center(c).z < 0.0).all(|c| inside.mu[c] == 1.0));
}

#[test]
fn zero_velocity_leaves_densities() {
    let grid = periodic([16, 16, 1]);
    let mut st = FluidState::zeros(&grid);
    for c in 0..grid.len() {
        st.rho[c] = 1.0 + (c as f64).sin().abs();
        st.z[c] = 0.7 * st.rho[c];
    }
    let (rho, z) = advance_continuity(&grid, &st, 0.1).unwrap();
    assert_eq!(rho, st.rho);
    assert_eq!(z, st.z);
}

#[test]
fn upper_cone_edge_is_preserved_exactly() {
    let grid = periodic([32, 32, 1]);
    let mut st = FluidState::zeros(&grid);
    for c in 0..grid.len() {
        let x = grid.center(c);
        st.rho[c] = 1.0 + 0.5 * (2.0 * PI * x.x).sin() * (2.0 * PI * x.y).cos();
        st.z[c] = 2.0 * st.rho[c];
        st.u[c] = [(2.0 * PI * x.y).sin(), 0.5 * (2.0 * PI * x.x).cos(), 0.0];
    }
    let dt = 0.9 * CFL_LIMIT / cfl_number(&grid, &st.u, 1.0);
    for _ in 0..20 {
        let (rho, z) = advance_continuity(&grid, &st, dt).unwrap();
        st.rho = rho;
        st.z = z;
        assert!(st.rho.iter().zip(&st.z).all(|(r, z)| *z == 2.0 * r));
    }
}

#[test]
fn constant_velocity_translation_converges_at_first_order() {
    let (speed, t_end) = (1.0, 0.25);
    let profile = |x: f64| 1.0 + 0.5 * (2.0 * PI * x).sin();
    let mut errors = Vec::new();
    let sizes = [64usize, 128, 256];
    for &n in &sizes {
        let grid = periodic([n, 1, 1]);
        let mut st = FluidState::zeros(&grid);
        for c in 0..n {
            st.rho[c] = profile(grid.center(c).x);
            st.z[c] = st.rho[c];
            st.u[c] = [speed, 0.0, 0.0];
        }
        let steps = (t_end / (0.4 * grid.h[0])).ceil() as usize;
        let dt = t_end / steps as f64;
        for _ in 0..steps {
            let (rho, z) = advance_continuity(&grid, &st, dt).unwrap();
            st.rho = rho;
            st.z = z;
        }
        // Exact cell averages of the translated profile.
        let h = grid.h[0];
        let l1: f64 = (0..n)
            .map(|c| {
                let a = c as f64 * h - speed * t_end;
                let avg = 1.0 - 0.5 * ((2.0 * PI * (a + h)).cos() - (2.0 * PI * a).cos()) / (2.0 * PI * h);
                h * (st.rho[c] - avg).abs()
            })
            .sum();
        errors.push(l1);
    }
    let order = koiter_fsi::diagnostics_io::fitted_order(&sizes.map(|n| 1.0 / n as f64), &errors);
    assert!((order - 1.0).abs() < 0.2, "{order} from {errors:?}");
}

#[test]
fn uniform_brinkman_relaxation_matches_the_implicit_formula() {
    let grid = periodic([8, 8, 1]);
    let st = FluidState::uniform(&grid, 0.5, 0.5, [0.2, -0.1, 0.0]);
    let visc = ViscosityField::uniform(&grid, 0.0, 0.0);
    let (k, target, dt) = (3.0, [1.0, 0.5, 0.0], 0.01);
    let brink = Brinkman { coeff: vec![k; grid.len()], target: vec![target; grid.len()] };
    let (next, _) = step(&grid, &st, &visc, &law(), Some(&brink), dt).unwrap();
    for c in 0..grid.len() {
        for a in 0..2 {
            let expect = (st.u[c][a] + dt * k * target[a]) / (1.0 + dt * k);
            assert!((next.u[c][a] - expect).abs() < 1e-8, "{} vs {expect}", next.u[c][a]);
        }
    }
}

#[test]
fn rest_without_forcing_stays_at_rest() {
    let grid = FluidGrid::new([6, 6, 6], [0.0; 3], [1.0; 3], [Boundary::Wall; 3]).unwrap();
    let st = FluidState::uniform(&grid, 1.0, 1.0, [0.0; 3]);
    let visc = ViscosityField::uniform(&grid, 0.1, 0.05);
    let (next, rep) = step(&grid, &st, &visc, &law(), None, 1e-3).unwrap();
    assert!(next.u.iter().all(|u| u.iter().all(|v| v.abs() < 1e-14)));
    assert!(rep.viscous.abs() < 1e-20);
}

#[test]
fn trace_reproduces_constants_and_linear_fields() {
    let grid = FluidGrid::new([10, 10, 10], [-1.0; 3], [1.0; 3], [Boundary::Wall; 3]).unwrap();
    let geom = build_reference(
        &SurfaceKind::Torus { major: 0.6, minor: 0.2 },
        ParamGrid::periodic(16, 16, 2.0 * PI, 2.0 * PI).unwrap(),
    )
    .unwrap();
    let eta = vec![0.0; geom.grid.len()];
    let mut st = FluidState::uniform(&grid, 1.0, 1.0, [0.3, -0.2, 0.1]);
    for v in compute_trace(&grid, &st, &geom, &eta).unwrap() {
        assert!((v - V3::new(0.3, -0.2, 0.1)).norm() < 1e-14);
    }
    let a = [[0.5, -1.0, 0.2], [0.1, 0.3, -0.7], [1.1, 0.0, 0.4]];
    for c in 0..grid.len() {
        let x = grid.center(c);
        st.u[c] = [0, 1, 2].map(|i| a[i][0] * x.x + a[i][1] * x.y + a[i][2] * x.z);
    }
    let tr = compute_trace(&grid, &st, &geom, &eta).unwrap();
    for (n, v) in tr.iter().enumerate() {
        let p = geom.phi[n];
        let exact = V3::from([0, 1, 2].map(|i| a[i][0] * p.x + a[i][1] * p.y + a[i][2] * p.z));
        assert!((v - exact).norm() < 1e-12, "{v:?} vs {exact:?}");
    }
}

#[test]
fn trace_of_smooth_field_is_second_order() {
    let geom = build_reference(
        &SurfaceKind::Torus { major: 0.6, minor: 0.2 },
        ParamGrid::periodic(16, 16, 2.0 * PI, 2.0 * PI).unwrap(),
    )
    .unwrap();
    let eta = vec![0.0; geom.grid.len()];
    let f = |p: V3| V3::new((2.0 * p.x).sin(), (p.y * p.z).cos(), (p.x + p.z).exp());
    let error = |n: usize| -> f64 {
        let grid = FluidGrid::new([n, n, n], [-1.0; 3], [1.0; 3], [Boundary::Wall; 3]).unwrap();
        let mut st = FluidState::uniform(&grid, 1.0, 1.0, [0.0; 3]);
        for c in 0..grid.len() {
            let v = f(grid.center(c));
            st.u[c] = [v.x, v.y, v.z];
        }
        let tr = compute_trace(&grid, &st, &geom, &eta).unwrap();
        tr.iter().zip(&geom.phi).map(|(v, p)| (v - f(*p)).norm()).fold(0.0, f64::max)
    };
    let ratio = error(20) / error(40);
    assert!(ratio > 3.0 && ratio < 5.5, "{ratio}");
}

#[test]
fn energy_of_trivial_states() {
    let grid = FluidGrid::new([4, 4, 4], [0.0; 3], [2.0; 3], [Boundary::Wall; 3]).unwrap();
    let visc = ViscosityField::uniform(&grid, 0.1, 0.05);
    let zero = fluid_energy(&grid, &FluidState::zeros(&grid), &law(), &visc).unwrap();
    assert_eq!((zero.kinetic, zero.helmholtz, zero.dissipation), (0.0, 0.0, 0.0));
    let st = FluidState::uniform(&grid, 0.7, 0.6, [0.1, 0.2, -0.3]);
    let e = fluid_energy(&grid, &st, &law(), &visc).unwrap();
    let expect = 0.5 * 1.3 * (0.01 + 0.04 + 0.09) * 8.0;
    assert!((e.kinetic - expect).abs() < 1e-14, "{} vs {expect}", e.kinetic);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn continuity_conserves_mass_sign_and_cone(
        rho in proptest::collection::vec(0.0f64..2.0, 64),
        t in proptest::collection::vec(0.0f64..1.0, 64),
        u in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 64),
    ) {
        let grid = periodic([8, 8, 1]);
        let mut st = FluidState::zeros(&grid);
        for c in 0..64 {
            st.rho[c] = rho[c];
            st.z[c] = (0.5 + 1.5 * t[c]) * rho[c];
            st.u[c] = [u[c].0, u[c].1, 0.0];
        }
        let cfl = cfl_number(&grid, &st.u, 1.0);
        prop_assume!(cfl > 0.0);
        let dt = 0.9 * CFL_LIMIT / cfl;
        let (m0, z0) = st.masses(&grid);
        let (r1, z1) = advance_continuity(&grid, &st, dt).unwrap();
        st.rho = r1;
        st.z = z1;
        let (m1, zm1) = st.masses(&grid);
        prop_assert!((m1 - m0).abs() <= 1e-12 * m0.max(1e-300));
        prop_assert!((zm1 - z0).abs() <= 1e-12 * z0.max(1e-300));
        prop_assert!(st.cone_violation(0.5, 2.0, 1e-12).is_none());
    }

    #[test]
    fn viscous_dissipation_is_nonnegative(u in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 125)) {
        let grid = FluidGrid::new([5, 5, 5], [0.0; 3], [1.0; 3], [Boundary::Wall, Boundary::Periodic, Boundary::Wall]).unwrap();
        let mut st = FluidState::uniform(&grid, 1.0, 1.0, [0.0; 3]);
        st.u = u;
        let visc = ViscosityField::uniform(&grid, 0.2, 0.1);
        prop_assert!(dissipation_density(&grid, &st, &visc).iter().all(|&d| d >= -1e-12));
    }
}
