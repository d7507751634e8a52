use std::f64::consts::PI;

use koiter_fsi::config::RunConfig;
use koiter_fsi::diagnostics_io::*;
use koiter_fsi::fluid_solver::{Boundary, FluidGrid, FluidState};
use koiter_fsi::geometry::{build_reference, ParamGrid, SurfaceKind, V3};
use proptest::prelude::*;

fn row_from(v: &[f64; 18], window: usize) -> LedgerRow {
    LedgerRow {
        window,
        t: v[0],
        kinetic_fluid: v[1],
        helmholtz: v[2],
        dissipation_visc: v[3],
        kinetic_shell: v[4],
        koiter: v[5],
        koiter_reg: v[6],
        dissipation_zeta: v[7],
        penalty_mismatch: v[8],
        penalty_trace: v[9],
        penalty_input: v[10],
        reservoir: v[11],
        rhs_initial: v[12],
        left: v[13],
        slack: v[14],
        trace_mismatch: v[15],
        exterior_mass: v[16],
        total_mass: v[17],
    }
}

fn grid() -> FluidGrid {
    FluidGrid::new([8, 8, 1], [0.0; 3], [1.0; 3], [Boundary::Periodic; 3]).unwrap()
}

proptest! {
    #[test]
    fn ledger_csv_round_trip(values in proptest::collection::vec(proptest::array::uniform18(-1e6f64..1e6), 1..6)) {
        let rows: Vec<LedgerRow> = values.iter().enumerate().map(|(k, v)| row_from(v, k)).collect();
        let text = ledger_to_csv(&rows).unwrap();
        prop_assert_eq!(ledger_from_csv(&text).unwrap(), rows);
    }

    #[test]
    fn study_csv_round_trip(p in 1e-6f64..1.0, m in 0.0f64..10.0, order in proptest::option::of(-3.0f64..3.0)) {
        let rows = vec![StudyRow { parameter: p, mismatch: m, slack: -m, leakage: 0.5 * m, compactness: m * m, order }];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let back: Vec<StudyRow> = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, rows);
    }
}

#[test]
fn cumulative_columns_are_checked() {
    let base = [0.5; 18];
    let mut rows: Vec<LedgerRow> = (0..4).map(|k| row_from(&base, k)).collect();
    for (k, r) in rows.iter_mut().enumerate() {
        r.dissipation_visc = k as f64;
    }
    assert!(cumulative_violations(&rows).is_empty());
    rows[2].penalty_trace = 0.1;
    assert_eq!(cumulative_violations(&rows), vec![2]);
}

#[test]
fn compactness_gap_of_matching_ratios_vanishes() {
    let g = grid();
    let mut a = FluidState::zeros(&g);
    for c in 0..g.len() {
        a.rho[c] = 1.0 + 0.5 * (c as f64).sin();
        a.z[c] = 0.8 * a.rho[c];
    }
    assert_eq!(compactness_gap(&g, &a, &a, 1.0).unwrap(), 0.0);
    let mut b = a.clone();
    for c in 0..g.len() {
        b.rho[c] *= 3.0;
        b.z[c] *= 3.0;
    }
    assert!(compactness_gap(&g, &a, &b, 2.0).unwrap() < 1e-15);
    // Swapping the species moves the ratio from 5/9 to 4/9 everywhere.
    let c = FluidState { rho: a.z.clone(), z: a.rho.clone(), ..a.clone() };
    let mass: f64 = (0..g.len()).map(|k| a.rho[k] + a.z[k]).sum::<f64>() * g.cell_volume();
    let gap = compactness_gap(&g, &a, &c, 1.0).unwrap();
    assert!((gap - mass / 9.0).abs() < 1e-12, "{gap}");
    assert!(compactness_gap(&g, &a, &a, 0.5).is_err());
}

#[test]
fn trace_mismatch_of_matching_and_shifted_traces() {
    let geom = build_reference(&SurfaceKind::Torus { major: 1.0, minor: 0.4 }, ParamGrid::periodic(16, 16, 2.0 * PI, 2.0 * PI).unwrap())
        .unwrap();
    let n = geom.grid.len();
    let w: Vec<f64> = (0..n).map(|k| (k as f64 * 0.1).cos()).collect();
    let v: Vec<V3> = (0..n).map(|k| geom.nu[k] * w[k]).collect();
    assert_eq!(trace_mismatch(&geom, &v, &w), 0.0);
    let eps = 1e-3;
    let shifted: Vec<V3> = v.iter().map(|x| x + V3::new(eps, 0.0, 0.0)).collect();
    let expect = eps * eps * geom.total_area();
    assert!((trace_mismatch(&geom, &shifted, &w) - expect).abs() < 1e-12 * expect);
}

#[test]
fn study_orders() {
    let one = convergence_study(&[0.1], |p| Ok(ReplicaResult { mismatch: p, slack: 0.0, leakage: 0.0, compactness: 0.0 })).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].order, None);
    let rows = convergence_study(&[0.4, 0.2, 0.1], |p| {
        Ok(ReplicaResult { mismatch: 3.0 * p * p, slack: 0.0, leakage: 0.0, compactness: 0.0 })
    })
    .unwrap();
    for r in &rows[1..] {
        assert!((r.order.unwrap() - 2.0).abs() < 1e-12);
    }
    assert!(convergence_study(&[], |_| Err(String::new())).is_err());
    assert!(matches!(
        convergence_study(&[1.0, 0.5], |p| if p < 1.0 { Err("boom".into()) } else { Ok(ReplicaResult { mismatch: 1.0, slack: 0.0, leakage: 0.0, compactness: 0.0 }) }),
        Err(StudyError::Replica { parameter, .. }) if parameter == 0.5
    ));
    assert!(study_table(&rows).lines().count() == 4);
}

#[test]
fn field_blocks_round_trip() {
    let mut s = String::new();
    let values: Vec<f64> = (0..12).map(|k| 0.1 * k as f64 - 0.3).collect();
    write_field(&mut s, "rho", [3, 2, 2], &values);
    let fields = read_fields(&s).unwrap();
    assert_eq!(fields.len(), 1);
    assert_eq!(fields[0].name, "rho");
    assert_eq!(fields[0].values, values);
    assert!(read_fields("FIELD rho 2 1 1\n1.0\n").is_err());
}

#[test]
fn config_parsing() {
    let cfg = RunConfig::parse("[scheme]\ntau = 0.001\nt_end = 0.01\n[fluid]\nnx = 12\n").unwrap();
    assert_eq!(cfg.scheme.tau, 1e-3);
    assert_eq!(cfg.fluid.nx, 12);
    assert_eq!(RunConfig::parse("").unwrap().scheme.tau, 2e-3);
    let errs = RunConfig::parse("[scheme]\ntua = 1\n[fluid]\nnx = many\n").unwrap_err();
    assert_eq!(errs.len(), 2, "{errs:?}");
    assert!(RunConfig::parse("[nowhere]\nx = 1\n").is_err());
}
