//! The outer shape-optimization loop and the finite-difference harness for
//! shape derivatives.

use crate::adjoint::{objective, solve_adjoint, AdjointError, AdjointState, ObjectiveSpec};
use crate::flow::{descent_direction, FlowConfig, FlowError};
use crate::mesh::{sigmoid_filter, Label, Mesh, MeshError};
use crate::pnp::{GummelParams, PnpError, PnpProblem, PnpSolver, PnpState};
use crate::shapegrad::{
    boundary_gradient, dj_boundary_density, dj_domain, domain_gradient, init_multiplier, lagrangian,
    update_multiplier, ConstraintState, GradientForm, ShapeGradError, ShapeGradient,
};

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error("forward solve failed: {0}")]
    Pnp(#[from] PnpError),
    #[error("adjoint solve failed: {0}")]
    Adjoint(#[from] AdjointError),
    #[error("shape gradient failed: {0}")]
    Shape(#[from] ShapeGradError),
    #[error("flow solve failed: {0}")]
    Flow(#[from] FlowError),
    #[error("mesh error: {0}")]
    Mesh(#[from] MeshError),
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("mesh quality collapsed at iteration {iteration}: min angle {min_angle_deg:.2} deg")]
    QualityCollapse { iteration: usize, min_angle_deg: f64, history: History },
    #[error("iteration {iteration} failed: {source}")]
    Aborted {
        iteration: usize,
        history: History,
        #[source]
        source: Box<DriverError>,
    },
}

impl DriverError {
    /// History recorded before the failure, if any.
    pub fn partial_history(&self) -> Option<&History> {
        match self {
            DriverError::QualityCollapse { history, .. } | DriverError::Aborted { history, .. } => Some(history),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VolumeTarget {
    Absolute(f64),
    /// Multiple of the initial volume.
    Relative(f64),
}

impl VolumeTarget {
    pub fn resolve(&self, initial_volume: f64) -> f64 {
        match *self {
            VolumeTarget::Absolute(v) => v,
            VolumeTarget::Relative(r) => r * initial_volume,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPolicy {
    /// Upper bound on the step length.
    pub initial: f64,
    /// Largest nodal displacement of a trial step, as a fraction of the minimum edge.
    pub max_displacement: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy { initial: 1.0, max_displacement: 1.0, backtrack: 0.5, max_halvings: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub enabled: bool,
    pub m: f64,
    /// Damping bounds; `None` takes the bounding box of the initial mesh.
    pub y_range: Option<(f64, f64)>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { enabled: true, m: 100.0, y_range: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub form: GradientForm,
    pub flow: FlowConfig,
    pub step: StepPolicy,
    pub volume_target: VolumeTarget,
    pub beta: f64,
    pub gamma: f64,
    /// Starting multiplier; `None` uses the first-order estimate.
    pub multiplier: Option<f64>,
    /// Keep the multiplier nonnegative after each Uzawa step.
    pub project_multiplier: bool,
    pub filter: FilterConfig,
    /// Smooth the interior, and even out vertex spacing along straight fixed
    /// boundary runs, every this many iterations (0 disables).
    pub smooth_every: usize,
    pub smooth_iterations: usize,
    /// Hard floor on the minimum angle, in degrees.
    pub min_angle_deg: f64,
    pub stop_rel_change: f64,
    pub stop_window: usize,
    /// Stop when the gradient functional norm falls below this (0 disables).
    pub stop_gradient: f64,
    /// Restrict the objective to the tagged subdomain.
    pub subdomain_objective: bool,
    pub gummel: GummelParams,
    pub adjoint_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 60,
            form: GradientForm::Boundary,
            flow: FlowConfig::default(),
            step: StepPolicy::default(),
            volume_target: VolumeTarget::Relative(1.0),
            beta: 1.0,
            gamma: 0.0,
            multiplier: None,
            project_multiplier: true,
            filter: FilterConfig::default(),
            smooth_every: 1,
            smooth_iterations: 3,
            min_angle_deg: 5.0,
            stop_rel_change: 1e-6,
            stop_window: 5,
            stop_gradient: 0.0,
            subdomain_objective: false,
            gummel: GummelParams::default(),
            adjoint_tol: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), DriverError> {
        let s = &self.step;
        let checks = [
            (self.beta > 0.0, "beta must be positive"),
            (self.gamma >= 0.0, "gamma must be non-negative"),
            (s.initial > 0.0, "initial step must be positive"),
            (s.max_displacement > 0.0, "max displacement fraction must be positive"),
            (s.backtrack > 0.0 && s.backtrack < 1.0, "backtracking factor must lie in (0, 1)"),
            (self.filter.m > 0.0, "filter M must be positive"),
            (self.min_angle_deg >= 0.0 && self.min_angle_deg < 60.0, "min angle must lie in [0, 60)"),
            (self.stop_rel_change >= 0.0, "stopping tolerance must be non-negative"),
            (self.adjoint_tol > 0.0, "adjoint tolerance must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(DriverError::Config(msg.into()));
            }
        }
        let c1 = match self.volume_target {
            VolumeTarget::Absolute(v) | VolumeTarget::Relative(v) => v,
        };
        if !(c1 > 0.0) {
            return Err(DriverError::Config("volume target must be positive".into()));
        }
        self.flow.validate()?;
        Ok(())
    }

    fn spec(&self, mesh: &Mesh) -> ObjectiveSpec {
        if self.subdomain_objective {
            ObjectiveSpec::subdomain(mesh)
        } else {
            ObjectiveSpec::all()
        }
    }
}

/// One row of the optimization history. Row `k` describes the domain after
/// `k` accepted steps and the step that produced it (zero for row 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub objective: f64,
    /// Total weighted concentration, `-J`.
    pub concentration: f64,
    pub volume: f64,
    pub volume_error: f64,
    pub multiplier: f64,
    pub step: f64,
    /// `dL(zeta)` along the direction of the step.
    pub derivative: f64,
    /// Lagrangian before and after the step, with the multiplier in force during the step.
    pub lagrangian_before: f64,
    pub lagrangian_after: f64,
    pub min_angle_deg: f64,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub mesh: Mesh,
    pub state: PnpState,
    pub history: History,
    pub constraint: ConstraintState,
}

/// Per-iteration callback: iteration index, accepted mesh and state.
pub type Observer<'a> = dyn FnMut(usize, &Mesh, &PnpState) + 'a;

fn forward(mesh: &Mesh, problem: &PnpProblem, cfg: &OptimizerConfig, warm: Option<&PnpState>) -> Result<PnpState, PnpError> {
    PnpSolver::new(mesh, problem, cfg.gummel)?.solve(warm)
}

fn gradient(
    mesh: &Mesh,
    state: &PnpState,
    adj: &AdjointState,
    spec: &ObjectiveSpec,
    form: GradientForm,
) -> Result<ShapeGradient, ShapeGradError> {
    match form {
        GradientForm::Domain => domain_gradient(mesh, state, adj, spec),
        GradientForm::Boundary => boundary_gradient(mesh, state, adj, spec),
    }
}

fn min_angle_deg(mesh: &Mesh) -> f64 {
    mesh.quality(0.0).min_angle.to_degrees()
}

/// Shape optimization of the augmented Lagrangian starting from `mesh0`.
pub fn optimize(
    mesh0: &Mesh,
    problem: &PnpProblem,
    cfg: &OptimizerConfig,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<OptimizationResult, DriverError> {
    cfg.validate()?;
    problem.validate()?;
    let spec = cfg.spec(mesh0);
    let (bmin, bmax) = mesh0.bounding_box();
    let (y_min, y_max) = cfg.filter.y_range.unwrap_or((bmin[1], bmax[1]));

    let mut mesh = mesh0.clone();
    let mut state = forward(&mesh, problem, cfg, None)?;
    let mut j = objective(&mesh, &state, &spec)?;
    let c1 = cfg.volume_target.resolve(mesh.domain_volume());
    let mut cs = ConstraintState { l: cfg.multiplier.unwrap_or(0.0), beta: cfg.beta, c1, gamma: cfg.gamma };
    cs.validate()?;

    let mut history = History::default();
    let mut adj = if cfg.max_iterations > 0 || cfg.multiplier.is_none() {
        Some(solve_adjoint(&mesh, &state, &spec, cfg.adjoint_tol)?)
    } else {
        None
    };
    if cfg.multiplier.is_none() {
        let a = adj.as_ref().expect("adjoint computed above");
        cs.l = init_multiplier(&mesh, &dj_boundary_density(&mesh, &state, a, &spec)?)?;
        log::info!("initial multiplier {:.6e}", cs.l);
    }
    let l0 = lagrangian(j, &mesh, &cs);
    history.records.push(HistoryRecord {
        iteration: 0,
        objective: j,
        concentration: -j,
        volume: mesh.domain_volume(),
        volume_error: (mesh.domain_volume() - c1).abs(),
        multiplier: cs.l,
        step: 0.0,
        derivative: 0.0,
        lagrangian_before: l0,
        lagrangian_after: l0,
        min_angle_deg: min_angle_deg(&mesh),
        forced: false,
    });
    if let Some(obs) = observer.as_mut() {
        obs(0, &mesh, &state);
    }

    for k in 1..=cfg.max_iterations {
        let a = match adj.take() {
            Some(a) => a,
            None => solve_adjoint(&mesh, &state, &spec, cfg.adjoint_tol)?,
        };
        let step = match iterate(&mesh, &state, &a, &spec, problem, cfg, &cs, k, (y_min, y_max)) {
            Ok(s) => s,
            Err(e) => {
                return Err(DriverError::Aborted { iteration: k, history, source: Box::new(e) });
            }
        };
        let Some(step) = step else {
            log::info!("iteration {k}: zero descent direction, stopping");
            break;
        };
        let lagrangian_before = lagrangian(j, &mesh, &cs);
        mesh = step.mesh;
        state = step.state;
        j = step.objective;
        let lagrangian_after = lagrangian(j, &mesh, &cs);
        let volume = mesh.domain_volume();
        cs = update_multiplier(&cs, volume);
        if cfg.project_multiplier {
            cs.l = cs.l.max(0.0);
        }
        let angle = min_angle_deg(&mesh);
        history.records.push(HistoryRecord {
            iteration: k,
            objective: j,
            concentration: -j,
            volume,
            volume_error: (volume - c1).abs(),
            multiplier: cs.l,
            step: step.delta,
            derivative: step.derivative,
            lagrangian_before,
            lagrangian_after,
            min_angle_deg: angle,
            forced: step.forced,
        });
        log::info!(
            "iteration {k}: J {j:.8e} volume {volume:.6} l {:.4e} step {:.3e} dL {:.3e}{}",
            cs.l,
            step.delta,
            step.derivative,
            if step.forced { " (forced)" } else { "" }
        );
        if let Some(obs) = observer.as_mut() {
            obs(k, &mesh, &state);
        }
        if angle < cfg.min_angle_deg {
            return Err(DriverError::QualityCollapse { iteration: k, min_angle_deg: angle, history });
        }
        if cfg.stop_gradient > 0.0 && step.gradient_norm < cfg.stop_gradient {
            log::info!("iteration {k}: gradient norm below threshold, stopping");
            break;
        }
        if stalled(&history, cfg) {
            log::info!("iteration {k}: objective stalled, stopping");
            break;
        }
    }
    Ok(OptimizationResult { mesh, state, history, constraint: cs })
}

fn stalled(history: &History, cfg: &OptimizerConfig) -> bool {
    let w = cfg.stop_window;
    let r = &history.records;
    if w == 0 || r.len() <= w {
        return false;
    }
    r[r.len() - w - 1..].windows(2).all(|p| {
        let scale = p[1].objective.abs().max(f64::MIN_POSITIVE);
        (p[1].objective - p[0].objective).abs() / scale < cfg.stop_rel_change
    })
}

struct AcceptedStep {
    mesh: Mesh,
    state: PnpState,
    objective: f64,
    delta: f64,
    derivative: f64,
    gradient_norm: f64,
    forced: bool,
}

/// Steps 2-5 of one outer iteration: gradient, flow, filtered direction and
/// backtracking. `None` when the direction vanishes.
#[allow(clippy::too_many_arguments)]
fn iterate(
    mesh: &Mesh,
    state: &PnpState,
    adj: &AdjointState,
    spec: &ObjectiveSpec,
    problem: &PnpProblem,
    cfg: &OptimizerConfig,
    cs: &ConstraintState,
    k: usize,
    (y_min, y_max): (f64, f64),
) -> Result<Option<AcceptedStep>, DriverError> {
    let grad = gradient(mesh, state, adj, spec, cfg.form)?.augmented(mesh, cs)?;
    let gradient_norm = grad.functional.iter().map(|g| g[0] * g[0] + g[1] * g[1]).sum::<f64>().sqrt();
    let mut zeta = descent_direction(mesh, &grad.functional, &cfg.flow)?;
    if cfg.filter.enabled {
        let filtered = sigmoid_filter(mesh, &zeta, cfg.filter.m, y_min, y_max)?;
        // the filter only rescales vertical components; keep it unless it
        // destroys descent
        if grad.pair(&filtered) < 0.0 {
            zeta = filtered;
        } else {
            log::warn!("iteration {k}: filtered direction is not descent, using the raw flow");
        }
    }
    let derivative = grad.pair(&zeta);
    let zmax = zeta.iter().map(|z| z[0].hypot(z[1])).fold(0.0, f64::max);
    if zmax == 0.0 || !(derivative < 0.0) {
        return Ok(None);
    }
    let mut delta = cfg.step.initial.min(cfg.step.max_displacement * mesh.min_edge() / zmax);
    let l_now = lagrangian(objective(mesh, state, spec)?, mesh, cs);
    let mut fallback: Option<AcceptedStep> = None;
    for attempt in 0..=cfg.step.max_halvings {
        if let Some(trial) = trial_step(mesh, state, &zeta, delta, problem, cfg, k) {
            let (tm, ts) = trial;
            let tj = objective(&tm, &ts, spec)?;
            let lt = lagrangian(tj, &tm, cs);
            let candidate =
                AcceptedStep { mesh: tm, state: ts, objective: tj, delta, derivative, gradient_norm, forced: false };
            if lt <= l_now + 1e-12 {
                log::debug!("iteration {k}: accepted after {attempt} halvings");
                return Ok(Some(candidate));
            }
            fallback = Some(AcceptedStep { forced: true, ..candidate });
        }
        delta *= cfg.step.backtrack;
    }
    match fallback {
        Some(step) => {
            log::warn!("iteration {k}: backtracking exhausted, taking forced step {:.3e}", step.delta);
            Ok(Some(step))
        }
        None => Err(DriverError::Mesh(MeshError::Geometry(format!(
            "no valid deformation after {} halvings",
            cfg.step.max_halvings
        )))),
    }
}

fn trial_step(
    mesh: &Mesh,
    state: &PnpState,
    zeta: &[[f64; 2]],
    delta: f64,
    problem: &PnpProblem,
    cfg: &OptimizerConfig,
    k: usize,
) -> Option<(Mesh, PnpState)> {
    let mut moved = mesh.deform(zeta, delta).ok()?;
    if cfg.smooth_every > 0 && k % cfg.smooth_every == 0 {
        moved = moved
            .slide_boundary(&cfg.flow.fixed_boundary, 0.0, cfg.smooth_iterations)
            .smooth_interior(cfg.smooth_iterations);
    }
    match forward(&moved, problem, cfg, Some(state)) {
        Ok(s) => Some((moved, s)),
        Err(e) => {
            log::debug!("iteration {k}: forward solve failed on trial step {delta:.3e}: {e}");
            None
        }
    }
}

/// One row of the finite-difference table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdRow {
    pub t: f64,
    /// `(J(t) - J(0)) / t`.
    pub forward: f64,
    /// `(J(t) - J(-t)) / 2t`.
    pub central: f64,
    pub forward_error_domain: f64,
    pub central_error_domain: f64,
    pub forward_error_boundary: f64,
    pub central_error_boundary: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub objective: f64,
    pub dj_domain: f64,
    pub dj_boundary: f64,
    pub rows: Vec<FdRow>,
}

impl FdReport {
    /// Observed order of the central quotients from consecutive differences
    /// `|Q(t_i) - Q(t_{i+1})|` (three or more step sizes needed).
    pub fn central_order(&self) -> Option<f64> {
        self.self_convergence(|r| r.central)
    }

    /// Observed order of the forward quotients against the domain-form derivative.
    pub fn forward_order(&self) -> Option<f64> {
        let r = &self.rows;
        if r.len() < 2 {
            return None;
        }
        let (a, b) = (&r[r.len() - 2], &r[r.len() - 1]);
        Some((a.forward_error_domain / b.forward_error_domain).ln() / (a.t / b.t).ln())
    }

    fn self_convergence(&self, q: impl Fn(&FdRow) -> f64) -> Option<f64> {
        let r = &self.rows;
        if r.len() < 3 {
            return None;
        }
        let n = r.len();
        let d1 = (q(&r[n - 3]) - q(&r[n - 2])).abs();
        let d2 = (q(&r[n - 2]) - q(&r[n - 1])).abs();
        let ratio = (r[n - 3].t / r[n - 2].t).ln();
        Some((d1 / d2).ln() / ratio)
    }
}

/// A test field for [`validate_shape_derivative`]: horizontal, weighted by
/// `(1 - d/width)^2` in the distance `d` to the nearest G2 vertex, and zero
/// on nodes of any other label.
pub fn boundary_bump(mesh: &Mesh, width: f64) -> Vec<[f64; 2]> {
    let on_g2 = mesh.nodes_on(&[Label::Gamma2]);
    let fixed = mesh.nodes_on(&[Label::GammaIn, Label::Gamma1, Label::Hole]);
    let g2: Vec<[f64; 2]> = (0..mesh.num_vertices()).filter(|&v| on_g2[v]).map(|v| mesh.vertices()[v]).collect();
    mesh.vertices()
        .iter()
        .enumerate()
        .map(|(v, p)| {
            if fixed[v] {
                return [0.0, 0.0];
            }
            let d = g2.iter().map(|q| (p[0] - q[0]).hypot(p[1] - q[1])).fold(f64::INFINITY, f64::min);
            let w = (1.0 - d / width).max(0.0);
            [w * w, 0.0]
        })
        .collect()
}

/// Compares both derivative forms with difference quotients of full forward
/// re-solves on `(I + t theta) Omega`.
pub fn validate_shape_derivative(
    mesh: &Mesh,
    problem: &PnpProblem,
    theta: &[[f64; 2]],
    t_list: &[f64],
    spec: &ObjectiveSpec,
    gummel: GummelParams,
) -> Result<FdReport, DriverError> {
    let state = PnpSolver::new(mesh, problem, gummel)?.solve(None)?;
    let j0 = objective(mesh, &state, spec)?;
    let adj = solve_adjoint(mesh, &state, spec, 1e-10)?;
    let dd = dj_domain(mesh, &state, &adj, theta, spec)?;
    let db = boundary_gradient(mesh, &state, &adj, spec)?.pair(theta);
    let j_at = |t: f64| -> Result<f64, DriverError> {
        let moved = mesh.deform(theta, t)?;
        let s = PnpSolver::new(&moved, problem, gummel)?.solve(Some(&state))?;
        Ok(objective(&moved, &s, spec)?)
    };
    let mut rows = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let (jp, jm) = (j_at(t)?, j_at(-t)?);
        let forward = (jp - j0) / t;
        let central = (jp - jm) / (2.0 * t);
        rows.push(FdRow {
            t,
            forward,
            central,
            forward_error_domain: (forward - dd).abs(),
            central_error_domain: (central - dd).abs(),
            forward_error_boundary: (forward - db).abs(),
            central_error_boundary: (central - db).abs(),
        });
    }
    Ok(FdReport { objective: j0, dj_domain: dd, dj_boundary: db, rows })
}
