//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment. Keys carry a section prefix
//! (`mesh.`, `problem.`, `optimizer.`, `flow.`, `io.`). Lists are comma
//! separated; `auto` selects the computed default of optional values.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::driver::{OptimizerConfig, VolumeTarget};
use crate::flow::FlowKind;
use crate::io::generate::{generate_domain, Domain};
use crate::mesh::{load_mesh, Label, Mesh, MeshError};
use crate::pnp::{IncrementNorm, PnpProblem};

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSource {
    File(PathBuf),
    Generator { domain: Domain, resolution: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write a VTK snapshot every this many iterations; 0 writes only the
    /// initial and final states.
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mesh: MeshSource,
    pub problem: PnpProblem,
    pub optimizer: OptimizerConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mesh: MeshSource::Generator { domain: Domain::Square, resolution: 41, seed: 0 },
            problem: PnpProblem { valences: vec![1], c_inf: vec![1.0], g: 0.0, epsilon: 1.0 },
            optimizer: OptimizerConfig::default(),
            output: OutputConfig { dir: PathBuf::from("out"), snapshot_every: 10 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigErrorKind {
    Syntax(String),
    UnknownKey { key: String, suggestion: Option<String> },
    Duplicate(String),
    Value { key: String, message: String },
    Missing(String),
    Invalid(String),
    Io(String),
}

/// A configuration diagnostic, located by line when it stems from one.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigError {
    pub path: Option<String>,
    pub line: Option<usize>,
    pub kind: ConfigErrorKind,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.path, self.line) {
            (Some(p), Some(l)) => write!(f, "{p}:{l}: ")?,
            (Some(p), None) => write!(f, "{p}: ")?,
            (None, Some(l)) => write!(f, "line {l}: ")?,
            (None, None) => {}
        }
        match &self.kind {
            ConfigErrorKind::Syntax(m) => write!(f, "{m}"),
            ConfigErrorKind::UnknownKey { key, suggestion: Some(s) } => {
                write!(f, "unknown key `{key}` (did you mean `{s}`?)")
            }
            ConfigErrorKind::UnknownKey { key, suggestion: None } => write!(f, "unknown key `{key}`"),
            ConfigErrorKind::Duplicate(k) => write!(f, "key `{k}` given more than once"),
            ConfigErrorKind::Value { key, message } => write!(f, "bad value for `{key}`: {message}"),
            ConfigErrorKind::Missing(k) => write!(f, "missing required key `{k}`"),
            ConfigErrorKind::Invalid(m) => write!(f, "{m}"),
            ConfigErrorKind::Io(m) => write!(f, "{m}"),
        }
    }
}

impl ConfigError {
    fn at(line: usize, kind: ConfigErrorKind) -> Self {
        ConfigError { path: None, line: Some(line), kind }
    }

    fn global(kind: ConfigErrorKind) -> Self {
        ConfigError { path: None, line: None, kind }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("mesh.file", "mesh file to load (excludes mesh.generator)"),
    ("mesh.generator", "square | comb | porous | wavy"),
    ("mesh.resolution", "generator resolution"),
    ("mesh.seed", "seed for randomized generators"),
    ("problem.valences", "species valences, e.g. 1, -1"),
    ("problem.c_inf", "inflow concentrations, one per species"),
    ("problem.g", "potential on G2"),
    ("problem.epsilon", "dielectric coefficient"),
    ("problem.gummel_tol", "Gummel increment tolerance"),
    ("problem.gummel_max", "Gummel sweep cap"),
    ("problem.gummel_norm", "h1 | max"),
    ("problem.newton_tol", "Newton residual tolerance"),
    ("problem.newton_max", "Newton iteration cap"),
    ("problem.linear_tol", "relative residual of inner linear solves"),
    ("optimizer.max_iterations", "iteration budget"),
    ("optimizer.form", "domain | boundary"),
    ("optimizer.volume_target", "absolute volume, or a multiple of the initial one with an x suffix (1.25x)"),
    ("optimizer.beta", "quadratic penalty"),
    ("optimizer.gamma", "perimeter weight"),
    ("optimizer.multiplier", "initial multiplier, or auto"),
    ("optimizer.project_multiplier", "clamp the multiplier at zero"),
    ("optimizer.step_initial", "largest trial step"),
    ("optimizer.max_displacement", "step cap as a fraction of the shortest edge"),
    ("optimizer.backtrack", "step reduction on rejection"),
    ("optimizer.max_halvings", "rejections before a forced step"),
    ("optimizer.filter", "apply the vertical sigmoid filter"),
    ("optimizer.filter_m", "sigmoid steepness"),
    ("optimizer.filter_y_range", "y_min, y_max, or auto"),
    ("optimizer.smooth_every", "smoothing cadence (0 disables)"),
    ("optimizer.smooth_iterations", "smoothing sweeps"),
    ("optimizer.min_angle_deg", "abort below this angle"),
    ("optimizer.stop_rel_change", "stop on small relative objective change"),
    ("optimizer.stop_window", "consecutive small changes needed"),
    ("optimizer.stop_gradient", "stop when |dL| falls below this"),
    ("optimizer.subdomain_objective", "restrict the objective to tag-1 elements"),
    ("optimizer.adjoint_tol", "adjoint residual tolerance"),
    ("flow.kind", "h1-vector | h1-scalar | ct-hsym"),
    ("flow.eps0", "H1 diffusion weight"),
    ("flow.alpha", "CT penalty"),
    ("flow.fixed", "labels whose nodes do not move"),
    ("flow.horizontal_slip", "let nodes on horizontal fixed edges slide"),
    ("flow.tol", "flow solver tolerance"),
    ("flow.max_iter", "flow solver iteration cap (0 = automatic)"),
    ("io.output_dir", "output directory"),
    ("io.snapshot_every", "VTK cadence (0 = first and last only)"),
];

const REQUIRED: &[&str] = &["problem.valences", "problem.c_inf", "problem.g"];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigErrorKind>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigErrorKind::Value { key: key.into(), message: format!("`{v}`: {e}") })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigErrorKind> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(ConfigErrorKind::Value { key: key.into(), message: format!("`{v}` is not a boolean") }),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigErrorKind>
where
    T::Err: fmt::Display,
{
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_named<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigErrorKind>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigErrorKind::Value { key: key.into(), message: e.to_string() })
}

fn parse_norm(key: &str, v: &str) -> Result<IncrementNorm, ConfigErrorKind> {
    match v {
        "h1" => Ok(IncrementNorm::H1),
        "max" => Ok(IncrementNorm::Max),
        _ => Err(ConfigErrorKind::Value { key: key.into(), message: format!("`{v}` (expected h1 or max)") }),
    }
}

fn norm_name(n: IncrementNorm) -> &'static str {
    match n {
        IncrementNorm::H1 => "h1",
        IncrementNorm::Max => "max",
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Pieces of the mesh source collected while parsing.
#[derive(Default)]
struct MeshKeys {
    file: Option<PathBuf>,
    generator: Option<Domain>,
    resolution: Option<usize>,
    seed: Option<u64>,
}

fn apply(cfg: &mut RunConfig, mesh: &mut MeshKeys, key: &str, v: &str) -> Result<(), ConfigErrorKind> {
    let o = &mut cfg.optimizer;
    let p = &mut cfg.problem;
    match key {
        "mesh.file" => mesh.file = Some(PathBuf::from(v)),
        "mesh.generator" => mesh.generator = Some(parse_named(key, v)?),
        "mesh.resolution" => mesh.resolution = Some(parse_num(key, v)?),
        "mesh.seed" => mesh.seed = Some(parse_num(key, v)?),
        "problem.valences" => p.valences = parse_list(key, v)?,
        "problem.c_inf" => p.c_inf = parse_list(key, v)?,
        "problem.g" => p.g = parse_num(key, v)?,
        "problem.epsilon" => p.epsilon = parse_num(key, v)?,
        "problem.gummel_tol" => o.gummel.tol = parse_num(key, v)?,
        "problem.gummel_max" => o.gummel.max_outer = parse_num(key, v)?,
        "problem.gummel_norm" => o.gummel.norm = parse_norm(key, v)?,
        "problem.newton_tol" => o.gummel.newton_tol = parse_num(key, v)?,
        "problem.newton_max" => o.gummel.newton_max = parse_num(key, v)?,
        "problem.linear_tol" => o.gummel.linear.tol = parse_num(key, v)?,
        "optimizer.max_iterations" => o.max_iterations = parse_num(key, v)?,
        "optimizer.form" => o.form = parse_named(key, v)?,
        "optimizer.volume_target" => {
            o.volume_target = match v.strip_suffix('x') {
                Some(r) => VolumeTarget::Relative(parse_num(key, r.trim())?),
                None => VolumeTarget::Absolute(parse_num(key, v)?),
            }
        }
        "optimizer.beta" => o.beta = parse_num(key, v)?,
        "optimizer.gamma" => o.gamma = parse_num(key, v)?,
        "optimizer.multiplier" => o.multiplier = if v == "auto" { None } else { Some(parse_num(key, v)?) },
        "optimizer.project_multiplier" => o.project_multiplier = parse_bool(key, v)?,
        "optimizer.step_initial" => o.step.initial = parse_num(key, v)?,
        "optimizer.max_displacement" => o.step.max_displacement = parse_num(key, v)?,
        "optimizer.backtrack" => o.step.backtrack = parse_num(key, v)?,
        "optimizer.max_halvings" => o.step.max_halvings = parse_num(key, v)?,
        "optimizer.filter" => o.filter.enabled = parse_bool(key, v)?,
        "optimizer.filter_m" => o.filter.m = parse_num(key, v)?,
        "optimizer.filter_y_range" => {
            o.filter.y_range = if v == "auto" {
                None
            } else {
                match parse_list::<f64>(key, v)?[..] {
                    [a, b] => Some((a, b)),
                    _ => {
                        return Err(ConfigErrorKind::Value { key: key.into(), message: "expected two numbers".into() })
                    }
                }
            }
        }
        "optimizer.smooth_every" => o.smooth_every = parse_num(key, v)?,
        "optimizer.smooth_iterations" => o.smooth_iterations = parse_num(key, v)?,
        "optimizer.min_angle_deg" => o.min_angle_deg = parse_num(key, v)?,
        "optimizer.stop_rel_change" => o.stop_rel_change = parse_num(key, v)?,
        "optimizer.stop_window" => o.stop_window = parse_num(key, v)?,
        "optimizer.stop_gradient" => o.stop_gradient = parse_num(key, v)?,
        "optimizer.subdomain_objective" => o.subdomain_objective = parse_bool(key, v)?,
        "optimizer.adjoint_tol" => o.adjoint_tol = parse_num(key, v)?,
        "flow.kind" => o.flow.kind = parse_named::<FlowKind>(key, v)?,
        "flow.eps0" => o.flow.eps0 = parse_num(key, v)?,
        "flow.alpha" => o.flow.alpha = parse_num(key, v)?,
        "flow.fixed" => {
            o.flow.fixed_boundary =
                if v.is_empty() { Vec::new() } else { v.split(',').map(|s| parse_named(key, s.trim())).collect::<Result<_, _>>()? }
        }
        "flow.horizontal_slip" => o.flow.horizontal_slip = parse_bool(key, v)?,
        "flow.tol" => o.flow.solver.tol = parse_num(key, v)?,
        "flow.max_iter" => o.flow.solver.max_iter = parse_num(key, v)?,
        "io.output_dir" => cfg.output.dir = PathBuf::from(v),
        "io.snapshot_every" => cfg.output.snapshot_every = parse_num(key, v)?,
        _ => unreachable!("key table and parser out of sync: {key}"),
    }
    Ok(())
}

fn suggest(key: &str) -> Option<String> {
    KEYS.iter()
        .map(|(k, _)| (strsim::jaro_winkler(key, k), *k))
        .filter(|(score, _)| *score > 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.to_string())
}

/// Parses configuration text. Keys not given keep their defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut mesh = MeshKeys::default();
    let mut seen: Vec<(&str, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ConfigError::at(line, ConfigErrorKind::Syntax(format!("expected `key = value`, got `{content}`"))));
        };
        let (k, v) = (k.trim(), v.trim());
        let Some(&(key, _)) = KEYS.iter().find(|(name, _)| *name == k) else {
            return Err(ConfigError::at(line, ConfigErrorKind::UnknownKey { key: k.into(), suggestion: suggest(k) }));
        };
        if seen.iter().any(|(s, _)| *s == key) {
            return Err(ConfigError::at(line, ConfigErrorKind::Duplicate(key.into())));
        }
        seen.push((key, line));
        apply(&mut cfg, &mut mesh, key, v).map_err(|kind| ConfigError::at(line, kind))?;
    }
    for req in REQUIRED {
        if !seen.iter().any(|(s, _)| s == req) {
            return Err(ConfigError::global(ConfigErrorKind::Missing(req.to_string())));
        }
    }
    let line_of = |k: &str| seen.iter().find(|(s, _)| *s == k).map(|&(_, l)| l);
    cfg.mesh = match (mesh.file, mesh.generator) {
        (Some(_), Some(_)) => {
            return Err(ConfigError {
                path: None,
                line: line_of("mesh.generator"),
                kind: ConfigErrorKind::Invalid("give either mesh.file or mesh.generator, not both".into()),
            })
        }
        (None, None) => return Err(ConfigError::global(ConfigErrorKind::Missing("mesh.generator or mesh.file".into()))),
        (Some(path), None) => {
            if let Some(l) = line_of("mesh.resolution").or(line_of("mesh.seed")) {
                return Err(ConfigError::at(
                    l,
                    ConfigErrorKind::Invalid("mesh.resolution and mesh.seed only apply to generators".into()),
                ));
            }
            MeshSource::File(path)
        }
        (None, Some(domain)) => MeshSource::Generator {
            domain,
            resolution: mesh.resolution.unwrap_or(41),
            seed: mesh.seed.unwrap_or(0),
        },
    };
    cfg.validate().map_err(|mut e| {
        e.line = e.line.or_else(|| match &e.kind {
            ConfigErrorKind::Value { key, .. } => line_of(key),
            _ => None,
        });
        e
    })?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let shown = Some(path.display().to_string());
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError { path: shown.clone(), line: None, kind: ConfigErrorKind::Io(e.to_string()) })?;
    parse_config_str(&text).map_err(|e| ConfigError { path: shown, ..e })
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let value = |key: &str, message: String| ConfigError::global(ConfigErrorKind::Value { key: key.into(), message });
        if let MeshSource::Generator { resolution, .. } = self.mesh {
            if resolution < 2 {
                return Err(value("mesh.resolution", format!("{resolution} is below 2")));
            }
        }
        self.problem.validate().map_err(|e| ConfigError::global(ConfigErrorKind::Invalid(e.to_string())))?;
        let o = &self.optimizer;
        if o.max_iterations < 1 {
            return Err(value("optimizer.max_iterations", "must be at least 1".into()));
        }
        if !(o.beta > 0.0) {
            return Err(value("optimizer.beta", format!("{} must be positive", o.beta)));
        }
        if !(o.gummel.tol > 0.0) {
            return Err(value("problem.gummel_tol", format!("{} must be positive", o.gummel.tol)));
        }
        if let Some((a, b)) = o.filter.y_range {
            if !(a < b) {
                return Err(value("optimizer.filter_y_range", format!("need y_min < y_max, got {a}, {b}")));
            }
        }
        o.validate().map_err(|e| ConfigError::global(ConfigErrorKind::Invalid(e.to_string())))?;
        Ok(())
    }

    /// Loads or generates the mesh and checks that the labels the problem
    /// needs are present.
    pub fn build_mesh(&self) -> Result<Mesh, MeshError> {
        let mesh = match &self.mesh {
            MeshSource::File(path) => load_mesh(path)?,
            MeshSource::Generator { domain, resolution, seed } => generate_domain(*domain, *resolution, *seed)?,
        };
        for label in [Label::GammaIn, Label::Gamma2] {
            if !mesh.boundary_edges().iter().any(|e| e.label == label) {
                return Err(MeshError::Geometry(format!("mesh has no {label} edges")));
            }
        }
        Ok(mesh)
    }
}

/// Serializes a configuration in the format accepted by [`parse_config_str`],
/// one commented line per key.
pub fn emit_config(cfg: &RunConfig) -> String {
    let o = &cfg.optimizer;
    let p = &cfg.problem;
    let mut pairs: Vec<(&str, String)> = Vec::new();
    match &cfg.mesh {
        MeshSource::File(path) => pairs.push(("mesh.file", path.display().to_string())),
        MeshSource::Generator { domain, resolution, seed } => {
            pairs.push(("mesh.generator", domain.to_string()));
            pairs.push(("mesh.resolution", resolution.to_string()));
            pairs.push(("mesh.seed", seed.to_string()));
        }
    }
    let volume = match o.volume_target {
        VolumeTarget::Absolute(v) => v.to_string(),
        VolumeTarget::Relative(r) => format!("{r}x"),
    };
    pairs.extend([
        ("problem.valences", join(&p.valences)),
        ("problem.c_inf", join(&p.c_inf)),
        ("problem.g", p.g.to_string()),
        ("problem.epsilon", p.epsilon.to_string()),
        ("problem.gummel_tol", o.gummel.tol.to_string()),
        ("problem.gummel_max", o.gummel.max_outer.to_string()),
        ("problem.gummel_norm", norm_name(o.gummel.norm).to_string()),
        ("problem.newton_tol", o.gummel.newton_tol.to_string()),
        ("problem.newton_max", o.gummel.newton_max.to_string()),
        ("problem.linear_tol", o.gummel.linear.tol.to_string()),
        ("optimizer.max_iterations", o.max_iterations.to_string()),
        ("optimizer.form", o.form.to_string()),
        ("optimizer.volume_target", volume),
        ("optimizer.beta", o.beta.to_string()),
        ("optimizer.gamma", o.gamma.to_string()),
        ("optimizer.multiplier", o.multiplier.map_or("auto".into(), |l| l.to_string())),
        ("optimizer.project_multiplier", o.project_multiplier.to_string()),
        ("optimizer.step_initial", o.step.initial.to_string()),
        ("optimizer.max_displacement", o.step.max_displacement.to_string()),
        ("optimizer.backtrack", o.step.backtrack.to_string()),
        ("optimizer.max_halvings", o.step.max_halvings.to_string()),
        ("optimizer.filter", o.filter.enabled.to_string()),
        ("optimizer.filter_m", o.filter.m.to_string()),
        ("optimizer.filter_y_range", o.filter.y_range.map_or("auto".into(), |(a, b)| format!("{a}, {b}"))),
        ("optimizer.smooth_every", o.smooth_every.to_string()),
        ("optimizer.smooth_iterations", o.smooth_iterations.to_string()),
        ("optimizer.min_angle_deg", o.min_angle_deg.to_string()),
        ("optimizer.stop_rel_change", o.stop_rel_change.to_string()),
        ("optimizer.stop_window", o.stop_window.to_string()),
        ("optimizer.stop_gradient", o.stop_gradient.to_string()),
        ("optimizer.subdomain_objective", o.subdomain_objective.to_string()),
        ("optimizer.adjoint_tol", o.adjoint_tol.to_string()),
        ("flow.kind", o.flow.kind.to_string()),
        ("flow.eps0", o.flow.eps0.to_string()),
        ("flow.alpha", o.flow.alpha.to_string()),
        ("flow.fixed", join(&o.flow.fixed_boundary)),
        ("flow.horizontal_slip", o.flow.horizontal_slip.to_string()),
        ("flow.tol", o.flow.solver.tol.to_string()),
        ("flow.max_iter", o.flow.solver.max_iter.to_string()),
        ("io.output_dir", cfg.output.dir.display().to_string()),
        ("io.snapshot_every", cfg.output.snapshot_every.to_string()),
    ]);
    let mut out = String::new();
    for (key, value) in pairs {
        let doc = KEYS.iter().find(|(k, _)| *k == key).map_or("", |(_, d)| d);
        let _ = writeln!(out, "# {doc}\n{key} = {value}");
    }
    out
}

/// The reference configuration with all defaults spelled out.
pub fn emit_defaults() -> String {
    emit_config(&RunConfig::default())
}
