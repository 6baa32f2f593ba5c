use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::{info, warn};

use pnpshape::adjoint::ObjectiveSpec;
use pnpshape::driver::{boundary_bump, optimize, validate_shape_derivative, DriverError, History};
use pnpshape::io::config::{emit_defaults, parse_config, RunConfig};
use pnpshape::io::generate::{generate_domain, Domain};
use pnpshape::io::history::write_history_csv;
use pnpshape::io::vtk::{write_vtk, Field};
use pnpshape::mesh::{write_mesh, Mesh};
use pnpshape::pnp::PnpState;

#[derive(Parser)]
#[command(name = "pnpshape", version, about = "Shape optimization of ionic concentration in PNP flows")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimizer described by a config file.
    Run { config: PathBuf },
    /// Write a generated domain as a mesh file.
    Generate {
        /// square, comb, porous or wavy
        name: String,
        resolution: usize,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the mesh as VTK.
        #[arg(long)]
        vtk: Option<PathBuf>,
    },
    /// Compare shape derivatives with finite differences of forward solves.
    ValidateGradient {
        config: PathBuf,
        /// Perturbation sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [1e-2, 5e-3, 2.5e-3])]
        t: Vec<f64>,
        /// Support width of the test field around G2.
        #[arg(long, default_value_t = 0.3)]
        width: f64,
    },
    /// Print the reference configuration with every default.
    EmitDefaults,
}

/// Failure classes, one per exit code.
enum Failure {
    Config(anyhow::Error),
    Solver(anyhow::Error),
    Mesh(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Solver(_) => 2,
            Failure::Mesh(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Solver(e) | Failure::Mesh(e) => e,
        }
    }
}

fn classify(e: DriverError) -> Failure {
    let is_mesh = |e: &DriverError| matches!(e, DriverError::Mesh(_) | DriverError::QualityCollapse { .. });
    match &e {
        DriverError::Config(_) => Failure::Config(e.into()),
        DriverError::Aborted { source, .. } if is_mesh(source) => Failure::Mesh(e.into()),
        _ if is_mesh(&e) => Failure::Mesh(e.into()),
        _ => Failure::Solver(e.into()),
    }
}

fn io_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Solver(e.into())
}

fn state_fields(state: &PnpState) -> (Vec<String>, Vec<&[f64]>) {
    let mut names = vec!["phi".to_string()];
    let mut values: Vec<&[f64]> = vec![&state.phi];
    for (i, c) in state.c.iter().enumerate() {
        names.push(format!("c{}", i + 1));
        values.push(c);
    }
    (names, values)
}

fn snapshot(path: &Path, mesh: &Mesh, state: &PnpState, title: &str) -> anyhow::Result<()> {
    let (names, values) = state_fields(state);
    let fields: Vec<Field> = names.iter().zip(values).map(|(n, v)| Field::Scalar(n, v)).collect();
    write_vtk(path, mesh, title, &fields).with_context(|| format!("writing {}", path.display()))
}

fn load(config: &Path) -> Result<(RunConfig, Mesh), Failure> {
    let cfg = parse_config(config).map_err(|e| Failure::Config(e.into()))?;
    let mesh = cfg.build_mesh().map_err(|e| Failure::Mesh(e.into()))?;
    info!("mesh: {} vertices, {} triangles", mesh.num_vertices(), mesh.num_triangles());
    Ok((cfg, mesh))
}

fn run(config: &Path) -> Result<(), Failure> {
    let (cfg, mesh) = load(config)?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(io_failure)?;
    let every = cfg.output.snapshot_every;
    let mut write_error = None;
    let mut observer = |k: usize, m: &Mesh, s: &PnpState| {
        if k == 0 || (every > 0 && k % every == 0) {
            if let Err(e) = snapshot(&dir.join(format!("snapshot_{k:04}.vtk")), m, s, &format!("iteration {k}")) {
                write_error.get_or_insert(e);
            }
        }
    };
    let result = optimize(&mesh, &cfg.problem, &cfg.optimizer, Some(&mut observer));
    if let Some(e) = write_error {
        return Err(io_failure(e));
    }
    let save_history = |h: &History| {
        let path = dir.join("history.csv");
        write_history_csv(&path, h).with_context(|| format!("writing {}", path.display())).map_err(io_failure)
    };
    let res = match result {
        Ok(res) => res,
        Err(e) => {
            if let Some(h) = e.partial_history() {
                save_history(h)?;
                warn!("partial history with {} records written", h.len());
            }
            return Err(classify(e));
        }
    };
    save_history(&res.history)?;
    snapshot(&dir.join("final.vtk"), &res.mesh, &res.state, "final").map_err(io_failure)?;
    write_mesh(dir.join("final.mesh"), &res.mesh).map_err(io_failure)?;
    if let (Some(first), Some(last)) = (res.history.records.first(), res.history.last()) {
        println!(
            "iterations {}  concentration {:.6} -> {:.6}  volume {:.6} (error {:.3e})  min angle {:.1} deg",
            last.iteration,
            first.concentration,
            last.concentration,
            last.volume,
            last.volume_error / res.constraint.c1,
            last.min_angle_deg
        );
    }
    Ok(())
}

fn generate(name: &str, resolution: usize, out: &Path, seed: u64, vtk: Option<&Path>) -> Result<(), Failure> {
    let domain: Domain = name.parse().map_err(|e: pnpshape::mesh::MeshError| Failure::Config(e.into()))?;
    if resolution < 2 {
        return Err(Failure::Config(anyhow::anyhow!("resolution must be at least 2, got {resolution}")));
    }
    let mesh = generate_domain(domain, resolution, seed).map_err(|e| Failure::Mesh(e.into()))?;
    write_mesh(out, &mesh).map_err(io_failure)?;
    if let Some(path) = vtk {
        write_vtk(path, &mesh, name, &[]).map_err(io_failure)?;
    }
    println!("{name}: {} vertices, {} triangles, area {:.6}", mesh.num_vertices(), mesh.num_triangles(), mesh.domain_volume());
    Ok(())
}

fn validate_gradient(config: &Path, t: &[f64], width: f64) -> Result<(), Failure> {
    let (cfg, mesh) = load(config)?;
    if t.is_empty() || t.iter().any(|&x| !(x > 0.0)) {
        return Err(Failure::Config(anyhow::anyhow!("perturbation sizes must be positive")));
    }
    let theta = boundary_bump(&mesh, width);
    let spec = if cfg.optimizer.subdomain_objective { ObjectiveSpec::subdomain(&mesh) } else { ObjectiveSpec::all() };
    // difference quotients need forward solves well below the optimizer's tolerance
    let mut gummel = cfg.optimizer.gummel;
    gummel.tol = gummel.tol.min(1e-10);
    let report = validate_shape_derivative(&mesh, &cfg.problem, &theta, t, &spec, gummel).map_err(classify)?;
    println!("J = {:.10e}  dJ_domain = {:.10e}  dJ_boundary = {:.10e}", report.objective, report.dj_domain, report.dj_boundary);
    println!("{:>10} {:>16} {:>16} {:>12} {:>12}", "t", "forward", "central", "err_dom", "err_bnd");
    for r in &report.rows {
        println!(
            "{:>10.3e} {:>16.8e} {:>16.8e} {:>12.3e} {:>12.3e}",
            r.t, r.forward, r.central, r.central_error_domain, r.central_error_boundary
        );
    }
    if let Some(order) = report.central_order() {
        println!("observed central order {order:.2}");
    }
    if let Some(order) = report.forward_order() {
        println!("observed forward order {order:.2}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match &cli.command {
        Command::Run { config } => run(config),
        Command::Generate { name, resolution, out, seed, vtk } => generate(name, *resolution, out, *seed, vtk.as_deref()),
        Command::ValidateGradient { config, t, width } => validate_gradient(config, t, *width),
        Command::EmitDefaults => {
            print!("{}", emit_defaults());
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            // sources are often already spelled out in their parent's message
            let mut msg = String::new();
            for cause in f.error().chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
