//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints its `criterion N: PASS|FAIL` line; the process
//! fails if any criterion does.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pnpshape::adjoint::ObjectiveSpec;
use pnpshape::driver::{
    optimize, validate_shape_derivative, OptimizationResult, OptimizerConfig, StepPolicy, VolumeTarget,
};
use pnpshape::fem::{apply_dirichlet, assemble_stiffness, load_vector, solve_spd, SolverOptions};
use pnpshape::flow::{h1_flow, scalar_h1_flow, FlowConfig};
use pnpshape::io::generate::{comb, square};
use pnpshape::mesh::{Label, Mesh};
use pnpshape::pnp::{assemble_continuity, gummel_solve, GummelParams, PnpProblem};

fn report(n: usize, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn cation_case() -> (PnpProblem, OptimizerConfig) {
    let problem = PnpProblem { valences: vec![1], c_inf: vec![1.0], g: -0.75, epsilon: 1.0 };
    let cfg = OptimizerConfig {
        max_iterations: 60,
        volume_target: VolumeTarget::Absolute(1.75),
        beta: 150.0,
        gamma: 1e-4,
        step: StepPolicy { initial: 6e-4, max_displacement: 1.0, ..StepPolicy::default() },
        ..OptimizerConfig::default()
    };
    (problem, cfg)
}

fn ion_pair_case() -> (PnpProblem, OptimizerConfig) {
    let problem = PnpProblem { valences: vec![1, -1], c_inf: vec![0.5, 0.5], g: -0.5, epsilon: 1.0 };
    let cfg = OptimizerConfig {
        max_iterations: 30,
        volume_target: VolumeTarget::Absolute(1.3),
        beta: 2.0,
        gamma: 1e-4,
        ..OptimizerConfig::default()
    };
    (problem, cfg)
}

/// One 60-iteration single-cation run on 3042 elements, shared by the descent,
/// volume and physics checks. Its first 30 iterations are the 30-iteration run.
fn cation_run() -> &'static (OptimizationResult, Duration) {
    static RUN: OnceLock<(OptimizationResult, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let (problem, cfg) = cation_case();
        let t = Instant::now();
        let res = optimize(&square(40, 1.0).unwrap(), &problem, &cfg, None).expect("cation run");
        (res, t.elapsed())
    })
}

fn ion_pair_run() -> &'static (OptimizationResult, Duration) {
    static RUN: OnceLock<(OptimizationResult, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let (problem, cfg) = ion_pair_case();
        let t = Instant::now();
        let res = optimize(&square(40, 1.0).unwrap(), &problem, &cfg, None).expect("ion pair run");
        (res, t.elapsed())
    })
}

fn criterion_1_electroneutral_equilibrium() -> bool {
    let mesh = square(51, 1.0).unwrap();
    let problem = PnpProblem { valences: vec![1, -1], c_inf: vec![0.5, 0.5], g: 0.0, epsilon: 1.0 };
    let t = Instant::now();
    let state = gummel_solve(&mesh, &problem, GummelParams::default(), None).unwrap();
    let elapsed = t.elapsed();
    let err_phi = state.phi.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    let err_c = state.c.iter().flatten().fold(0.0f64, |m, c| m.max((c - 0.5).abs()));
    let sweeps = state.history.len();
    let pass = sweeps <= 2 && err_phi <= 1e-10 && err_c <= 1e-10 && elapsed < Duration::from_secs(1);
    report(
        1,
        pass,
        format!(
            "{} elements, {sweeps} sweeps, |phi| {err_phi:.1e}, |c - 0.5| {err_c:.1e}, {:.3} s",
            mesh.num_triangles(),
            elapsed.as_secs_f64()
        ),
    );
    pass
}

/// Degree-5 seven-point rule: barycentric points and weights.
const QUAD: [([f64; 3], f64); 7] = {
    const A1: f64 = 0.059715871789770;
    const B1: f64 = 0.470142064105115;
    const W1: f64 = 0.132394152788506;
    const A2: f64 = 0.797426985353087;
    const B2: f64 = 0.101286507323456;
    const W2: f64 = 0.125939180544827;
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

/// L2 and H1-seminorm errors of the P1 Poisson solution for sin(pi x) sin(pi y).
fn poisson_errors(n: usize) -> (f64, f64) {
    let mesh = square(n, 1.0).unwrap();
    let u = |x: f64, y: f64| (PI * x).sin() * (PI * y).sin();
    let f: Vec<f64> = mesh.vertices().iter().map(|p| 2.0 * PI * PI * u(p[0], p[1])).collect();
    let a = assemble_stiffness(&mesh, &vec![1.0; mesh.num_triangles()]).unwrap();
    let b = load_vector(&mesh, &f, None).unwrap();
    let bnd: Vec<usize> = mesh.boundary_nodes().iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    let (a, b) = apply_dirichlet(&a, &b, &bnd, &vec![0.0; bnd.len()]).unwrap();
    let uh = solve_spd(&a, &b, SolverOptions { tol: 1e-13, max_iter: 0 }).unwrap();
    let (mut l2, mut h1) = (0.0, 0.0);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let p = mesh.triangle_points(t);
        let area = mesh.signed_area(t);
        let v = [uh[tri[0]], uh[tri[1]], uh[tri[2]]];
        // gradient of the linear interpolant from the two edge vectors
        let (e1, e2) = ([p[1][0] - p[0][0], p[1][1] - p[0][1]], [p[2][0] - p[0][0], p[2][1] - p[0][1]]);
        let det = e1[0] * e2[1] - e1[1] * e2[0];
        let (d1, d2) = (v[1] - v[0], v[2] - v[0]);
        let g = [(d1 * e2[1] - d2 * e1[1]) / det, (e1[0] * d2 - e2[0] * d1) / det];
        for (lam, w) in QUAD {
            let x = lam[0] * p[0][0] + lam[1] * p[1][0] + lam[2] * p[2][0];
            let y = lam[0] * p[0][1] + lam[1] * p[1][1] + lam[2] * p[2][1];
            let uhq = lam[0] * v[0] + lam[1] * v[1] + lam[2] * v[2];
            let gx = PI * (PI * x).cos() * (PI * y).sin();
            let gy = PI * (PI * x).sin() * (PI * y).cos();
            l2 += w * area * (u(x, y) - uhq).powi(2);
            h1 += w * area * ((gx - g[0]).powi(2) + (gy - g[1]).powi(2));
        }
    }
    (l2.sqrt(), h1.sqrt())
}

fn criterion_2_manufactured_poisson_orders() -> bool {
    let t = Instant::now();
    let errs: Vec<(f64, f64)> = [9, 17, 33, 65].into_iter().map(poisson_errors).collect();
    let orders: Vec<(f64, f64)> =
        errs.windows(2).map(|w| ((w[0].0 / w[1].0).log2(), (w[0].1 / w[1].1).log2())).collect();
    let elapsed = t.elapsed();
    let pass = orders.iter().all(|(l2, h1)| (l2 - 2.0).abs() <= 0.2 && (h1 - 1.0).abs() <= 0.2)
        && elapsed < Duration::from_secs(10);
    let shown: Vec<String> = orders.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    report(2, pass, format!("L2/H1 orders {} in {:.2} s", shown.join(", "), elapsed.as_secs_f64()));
    pass
}

fn criterion_3_continuity_matrix_is_m_matrix() -> bool {
    let mesh = square(33, 1.0).unwrap();
    let acute = mesh.quality(0.0).is_weakly_acute;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..20 {
        let modes: Vec<[f64; 5]> = (0..4)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.0..3.0),
                    rng.gen_range(0.0..3.0),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.0..2.0 * PI),
                ]
            })
            .collect();
        let phi: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|p| modes.iter().map(|m| m[0] * (PI * m[1] * p[0] + m[3]).sin() * (PI * m[2] * p[1] + m[4]).cos()).sum())
            .collect();
        for z in [1.0, -1.0, 2.0] {
            let k = assemble_continuity(&mesh, &phi, z).unwrap();
            for (i, j, v) in k.triplets() {
                if i != j {
                    worst = worst.max(v);
                }
            }
        }
    }
    let pass = acute && worst <= 1e-14;
    report(3, pass, format!("weakly acute {acute}, largest off-diagonal entry {worst:.3e} over 20 fields"));
    pass
}

/// Horizontal field vanishing on the inflow edge and the walls, largest at G2.
fn bump(mesh: &Mesh) -> Vec<[f64; 2]> {
    mesh.vertices().iter().map(|p| [(PI * p[1]).sin().powi(2) * p[0].powi(4), 0.0]).collect()
}

fn criterion_4_shape_derivative_matches_differences() -> bool {
    let (problem, cfg) = cation_case();
    // difference quotients at t = 2.5e-3 resolve J to ~1e-9 only if the inner solves are much tighter
    let gummel = GummelParams {
        tol: 1e-11,
        newton_tol: 1e-13,
        linear: SolverOptions { tol: 1e-12, max_iter: 0 },
        ..cfg.gummel
    };
    let spec = ObjectiveSpec::all();
    let t0 = Instant::now();
    let mesh = square(55, 1.0).unwrap();
    let theta = bump(&mesh);
    let rep = validate_shape_derivative(&mesh, &problem, &theta, &[1e-2, 5e-3, 2.5e-3], &spec, gummel).unwrap();
    let finest = rep.rows.last().unwrap();
    let rel = finest.central_error_domain / rep.dj_domain.abs();
    let order = rep.central_order().unwrap();
    let gap = (rep.dj_boundary - rep.dj_domain).abs() / rep.dj_domain.abs();
    let fine = square(109, 1.0).unwrap();
    let rep_fine = validate_shape_derivative(&fine, &problem, &bump(&fine), &[], &spec, GummelParams { tol: 1e-11, ..cfg.gummel }).unwrap();
    let gap_fine = (rep_fine.dj_boundary - rep_fine.dj_domain).abs() / rep_fine.dj_domain.abs();
    let elapsed = t0.elapsed();
    let pass = rel <= 2e-2 && order >= 1.8 && gap <= 0.1 && gap_fine < gap && elapsed < Duration::from_secs(300);
    report(
        4,
        pass,
        format!(
            "{} elements: central error {rel:.2e}, order {order:.2}, boundary gap {gap:.2e} -> {gap_fine:.2e} at {} elements, {:.1} s",
            mesh.num_triangles(),
            fine.num_triangles(),
            elapsed.as_secs_f64()
        ),
    );
    pass
}

/// Descent certificate over the first `iterations` records.
fn descent_check(res: &OptimizationResult, iterations: usize) -> (bool, String) {
    let steps: Vec<_> = res.history.records.iter().filter(|r| r.iteration >= 1 && r.iteration <= iterations).collect();
    let non_descent = steps.iter().filter(|r| !(r.derivative < 0.0)).count();
    let forced = steps.iter().filter(|r| r.forced).count();
    let violations = steps.iter().filter(|r| !r.forced && r.lagrangian_after > r.lagrangian_before + 1e-12).count();
    let pass = !steps.is_empty() && non_descent == 0 && violations == 0 && forced * 10 <= steps.len();
    (pass, format!("{} steps, {non_descent} non-descent, {violations} increases, {forced} forced", steps.len()))
}

fn criterion_5_descent_certificate() -> bool {
    let (cation, t_cation) = cation_run();
    let (pair, t_pair) = ion_pair_run();
    let (ok_cation, d_cation) = descent_check(cation, 30);
    let (ok_pair, d_pair) = descent_check(pair, 30);
    let in_time = *t_cation < Duration::from_secs(600) && *t_pair < Duration::from_secs(600);
    let pass = ok_cation && ok_pair && in_time;
    report(5, pass, format!("cation: {d_cation}; ion pair: {d_pair}"));
    pass
}

fn criterion_6_volume_constraint() -> bool {
    let (res, elapsed) = cation_run();
    let last = res.history.last().unwrap();
    let rel = last.volume_error / 1.75;
    let pass = rel <= 2e-2 && last.iteration <= 60;
    report(
        6,
        pass,
        format!(
            "volume {:.5} after {} iterations, relative error {rel:.2e}, {:.1} s",
            last.volume,
            last.iteration,
            elapsed.as_secs_f64()
        ),
    );
    pass
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

fn mean_on(mesh: &Mesh, v: &[f64], label: Label) -> f64 {
    let on = mesh.nodes_on(&[label]);
    let (s, n) = v.iter().zip(&on).filter(|(_, &b)| b).fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
    s / n as f64
}

/// Whether the largest nodal value sits on G2 and beats every other node by
/// more than `resolution`.
fn max_on_g2(r: &OptimizationResult, v: &[f64], resolution: f64) -> bool {
    let on = r.mesh.nodes_on(&[Label::Gamma2]);
    let best = |want: bool| v.iter().zip(&on).filter(|(_, &b)| b == want).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
    on[argmax(v)] && best(true) > best(false) + resolution
}

fn criterion_7_ions_gather_at_the_deformable_edge() -> bool {
    let (cation, _) = cation_run();
    let (pair, _) = ion_pair_run();
    // concentrations are only resolved to the Gummel tolerance
    let res_cation = cation_case().1.gummel.tol;
    let res_pair = ion_pair_case().1.gummel.tol;
    let c1_cation = max_on_g2(cation, &cation.state.c[0], res_cation);
    let c1_pair = max_on_g2(pair, &pair.state.c[0], res_pair);
    let c2 = &pair.state.c[1];
    let (g2_mean, in_mean) = (mean_on(&pair.mesh, c2, Label::Gamma2), mean_on(&pair.mesh, c2, Label::GammaIn));
    let c2_low = g2_mean < in_mean - res_pair;
    let pass = c1_cation && c1_pair && c2_low;
    report(
        7,
        pass,
        format!(
            "cation c1 peaks on G2: {c1_cation}; ion pair c1 peaks on G2: {c1_pair}; \
             ion pair mean c2 on G2 {g2_mean:.10} vs IN {in_mean:.10} (resolution {res_pair:e})"
        ),
    );
    pass
}

fn criterion_8_scalar_and_vector_flows_agree() -> bool {
    let meshes = [square(21, 1.0).unwrap(), comb(3).unwrap()];
    let cfg = FlowConfig { solver: SolverOptions { tol: 1e-14, max_iter: 0 }, ..FlowConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let mesh = &meshes[trial % 2];
        let rhs: Vec<[f64; 2]> =
            (0..mesh.num_vertices()).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let a = h1_flow(mesh, &rhs, &cfg).unwrap();
        let b = scalar_h1_flow(mesh, &rhs, &cfg).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x[0] - y[0]).abs().max((x[1] - y[1]).abs())).fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    let pass = worst <= 1e-8;
    report(8, pass, format!("max difference {worst:.2e} over 10 trials"));
    pass
}

fn main() -> ExitCode {
    let criteria: [(usize, fn() -> bool); 8] = [
        (1, criterion_1_electroneutral_equilibrium),
        (2, criterion_2_manufactured_poisson_orders),
        (3, criterion_3_continuity_matrix_is_m_matrix),
        (4, criterion_4_shape_derivative_matches_differences),
        (5, criterion_5_descent_certificate),
        (6, criterion_6_volume_constraint),
        (7, criterion_7_ions_gather_at_the_deformable_edge),
        (8, criterion_8_scalar_and_vector_flows_agree),
    ];
    let mut failed = Vec::new();
    for (n, check) in criteria {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(true) => {}
            Ok(false) => failed.push(n),
            Err(_) => {
                report(n, false, "panicked".into());
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 8 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
