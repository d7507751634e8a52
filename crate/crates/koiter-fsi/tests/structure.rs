use std::f64::consts::PI;

use koiter_fsi::geometry::{build_reference, ParamGrid, ReferenceGeometry, SurfaceKind};
use koiter_fsi::shell_energy::{DerivativeRule, ElasticityParams};
use koiter_fsi::structure_solver::*;

fn flat(n1: usize, n2: usize) -> ReferenceGeometry {
    build_reference(&SurfaceKind::FlatSlab { half_width: 0.2 }, ParamGrid::periodic(n1, n2, 1.0, 0.25).unwrap()).unwrap()
}

fn params(zeta: f64, delta: f64) -> StructureParams {
    StructureParams {
        elastic: ElasticityParams { lambda_s: 1.0, mu_s: 1.0, h_thick: 0.05, delta_reg: delta, zeta },
        delta,
        tau: 2e-3,
        substeps: 10,
        keep_inertia_factor: true,
        picard: PicardParams::default(),
        rule: DerivativeRule::Simpson,
    }
}

fn mode(g: &ReferenceGeometry, amp: f64) -> Vec<f64> {
    (0..g.grid.len())
        .map(|n| {
            let (i, j) = g.grid.coords(n);
            amp * (2.0 * PI * i as f64 / g.grid.n1 as f64).sin() * (1.0 + 0.3 * (2.0 * PI * j as f64 / g.grid.n2 as f64).cos())
        })
        .collect()
}

#[test]
fn zero_data_is_a_fixed_point() {
    let g = flat(16, 4);
    let p = params(0.1, 0.1);
    let z = vec![0.0; g.grid.len()];
    let sys = SubstepSystem::new(&g, &p, 2e-4, &z, &z, &z).unwrap();
    assert!(substep_residual(&sys, &z).iter().all(|&r| r == 0.0));
    let fp = fixed_point_solve(&sys, &p.picard).unwrap();
    assert!(fp.eta.iter().all(|&v| v == 0.0));
    assert!(fp.iterations <= 1);
}

#[test]
fn residual_matches_pairing_assembly() {
    let g = flat(12, 4);
    let p = params(0.2, 0.3);
    let eta_m = mode(&g, 0.02);
    let w_m = mode(&g, -0.5);
    let v = mode(&g, 0.1);
    let sys = SubstepSystem::new(&g, &p, 2e-4, &eta_m, &w_m, &v).unwrap();
    let cand: Vec<f64> = eta_m.iter().enumerate().map(|(k, e)| e + 1e-3 * (k as f64).cos()).collect();
    let a = substep_residual(&sys, &cand);
    let b = substep_residual_by_pairing(&sys, &cand);
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-10 * scale.max(1e-300), "{x} vs {y}");
    }
}

#[test]
fn converged_substep_has_small_residual() {
    let g = flat(16, 4);
    let p = params(0.05, 0.1);
    let eta_m = mode(&g, 0.01);
    let w_m = mode(&g, 0.3);
    let z = vec![0.0; g.grid.len()];
    let sys = SubstepSystem::new(&g, &p, 2e-4, &eta_m, &w_m, &z).unwrap();
    let fp = fixed_point_solve(&sys, &p.picard).unwrap();
    assert!(fp.iterations < 60, "{}", fp.iterations);
    assert!(sys.dual_norm(&substep_residual(&sys, &fp.eta)) <= 1e-10 * sys.dual_norm(&sys.rhs(&fp.eta)));
}

#[test]
fn damped_free_shell_loses_energy_every_substep() {
    let g = flat(32, 4);
    let p = params(0.2, 0.1);
    let mut shell = ShellState::new(mode(&g, 0.01), vec![0.0; g.grid.len()]);
    let lagged = LaggedTrace::constant(vec![0.0; g.grid.len()]);
    let mut last = f64::INFINITY;
    for w in 0..5 {
        let out = advance_window(&g, &shell, &lagged, &p, w as f64 * p.tau).unwrap();
        for r in &out.records {
            let e = p.inertia() * r.kinetic_shell + r.koiter + r.koiter_reg;
            assert!(e <= last * (1.0 + 1e-12), "{e} > {last}");
            assert!(r.slack >= -1e-9 * r.lhs.abs().max(r.rhs.abs()));
            last = e;
        }
        shell = out.state;
    }
}

#[test]
fn velocity_and_displacement_increments_agree() {
    let g = flat(16, 4);
    let p = params(0.05, 0.1);
    let shell = ShellState::new(mode(&g, 0.01), mode(&g, 0.2));
    let lagged = LaggedTrace::constant(mode(&g, 0.1));
    let out = advance_window(&g, &shell, &lagged, &p, 0.0).unwrap();
    let dt = p.tau / out.substeps as f64;
    for n in 0..g.grid.len() {
        let sum: f64 = out.slot_velocity.iter().map(|w| w[n]).sum();
        let expect = out.state.eta[n] - shell.eta[n];
        assert!((dt * sum - expect).abs() <= 1e-14 + 1e-12 * expect.abs());
    }
    assert_eq!(out.state.eta_start, shell.eta);
    assert_eq!(out.state.w_start, shell.w);
    assert_eq!(out.state.w, *out.slot_velocity.last().unwrap());
}

#[test]
fn uniform_trace_drags_a_flat_shell_to_its_velocity() {
    // A uniform normal translation of the flat slab is strain-free, so only
    // the penalty relaxation acts.
    let g = flat(8, 4);
    let p = params(0.0, 0.5);
    let c = 0.3;
    let mut shell = ShellState::at_rest(g.grid.len());
    let lagged = LaggedTrace::constant(vec![c; g.grid.len()]);
    let mut gap = f64::INFINITY;
    for w in 0..20 {
        let out = advance_window(&g, &shell, &lagged, &p, w as f64 * p.tau).unwrap();
        shell = out.state;
        let now = shell.w.iter().map(|v| (v - c).abs()).fold(0.0, f64::max);
        assert!(now < gap);
        gap = now;
    }
    assert!(gap < 1e-6, "{gap}");
}

#[test]
fn displacement_outside_the_band_is_inadmissible() {
    let g = flat(8, 4);
    let mut eta = vec![0.0; g.grid.len()];
    assert!(admissibility(&g, &eta).is_ok());
    eta[3] = 0.25;
    assert!(matches!(admissibility(&g, &eta), Err(Degeneracy::FirstKind { node: 3, .. })));
}
