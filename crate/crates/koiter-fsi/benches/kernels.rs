use std::f64::consts::PI;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use koiter_fsi::fluid_solver::{cfl_number, step, Boundary, FluidGrid, FluidState, ViscosityField, CFL_LIMIT};
use koiter_fsi::geometry::{build_reference, ParamGrid, SurfaceKind};
use koiter_fsi::par;
use koiter_fsi::pressure::{PressureLaw, RegularizedPressure};
use koiter_fsi::shell_energy::{discrete_koiter_gradient, koiter_gradient, DerivativeRule, ElasticityParams};

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn fluid_step(c: &mut Criterion) {
    let grid = FluidGrid::new([48, 48, 48], [0.0; 3], [1.0; 3], [Boundary::Periodic, Boundary::Periodic, Boundary::Wall]).unwrap();
    let mut st = FluidState::zeros(&grid);
    for k in 0..grid.len() {
        let x = grid.center(k);
        st.rho[k] = 1.0 + 0.2 * (2.0 * PI * x.x).sin();
        st.z[k] = st.rho[k];
        st.u[k] = [0.3 * (2.0 * PI * x.y).sin(), 0.2 * (2.0 * PI * x.x).cos(), 0.0];
    }
    let visc = ViscosityField::uniform(&grid, 0.05, 0.02);
    let law = RegularizedPressure::new(PressureLaw::pure(2.0, 2.0, 0.5, 2.0), 0.01, 8.0);
    let dt = 0.5 * CFL_LIMIT / cfl_number(&grid, &st.u, 1.0);
    let mut g = c.benchmark_group("fluid_step_48^3");
    g.sample_size(10);
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_parallel(on);
            b.iter(|| step(&grid, black_box(&st), &visc, &law, None, dt).unwrap())
        });
    }
    g.finish();
    par::set_parallel(true);
}

fn koiter(c: &mut Criterion) {
    let geom = build_reference(
        &SurfaceKind::Torus { major: 1.0, minor: 0.4 },
        ParamGrid::periodic(256, 128, 2.0 * PI, 2.0 * PI).unwrap(),
    )
    .unwrap();
    let params = ElasticityParams { lambda_s: 1.0, mu_s: 1.0, h_thick: 0.05, delta_reg: 0.1, zeta: 0.0 };
    let eta: Vec<f64> = (0..geom.grid.len())
        .map(|n| {
            let (i, j) = geom.grid.coords(n);
            0.02 * (2.0 * PI * i as f64 / 256.0).sin() * (4.0 * PI * j as f64 / 128.0).cos()
        })
        .collect();
    let prev: Vec<f64> = eta.iter().map(|v| 0.9 * v).collect();
    let mut g = c.benchmark_group("koiter_256x128");
    for (name, on) in MODES {
        g.bench_function(BenchmarkId::new("gradient", name), |b| {
            par::set_parallel(on);
            b.iter(|| koiter_gradient(&geom, black_box(&eta), &params))
        });
        g.bench_function(BenchmarkId::new("discrete_gradient", name), |b| {
            par::set_parallel(on);
            b.iter(|| discrete_koiter_gradient(&geom, black_box(&eta), &prev, &params, DerivativeRule::Simpson))
        });
    }
    g.finish();
    par::set_parallel(true);
}

criterion_group!(benches, fluid_step, koiter);
criterion_main!(benches);
