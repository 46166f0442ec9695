//! The `generate`, `train`, `verify` and `export` steps and the run manifest.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! data/manifest.json, data/demo_XX.csv
//! model.json, solver.log, solution.json, samples.csv
//! verify/summary.json, verify/audit.csv, verify/runs/run_XXX.csv
//! export/ellipse.csv, export/demos/, export/reproduced/, export/joint_angles.csv
//! manifest.json
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DVector, Vector2};
use safe_sysid::constraints::barrier_value;
use safe_sysid::dataset::{load_demonstrations, synthetic_snake, to_training_pairs, write_states, TrajectoryDataset};
use safe_sysid::elm::{bip_initialize, ElmDims, ElmModel, NoiseSpec};
use safe_sysid::qcqp::{ridge_weights, train, write_text, AssembleOptions, SolveStatus, TrainOptions};
use safe_sysid::robot::{generate_robot_data, sample_initial_conditions, GenerationLimits};
use safe_sysid::rollout::{monte_carlo_verify, one_step_constraint_audit, rollout, RolloutConfig};
use safe_sysid::sampler::{grid_domain, select_active_points, DomainBox, SampleSet};
use safe_sysid::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, RunConfig};

/// Tolerance of the one-step audit.
pub const AUDIT_TOL: f64 = 1e-8;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VIOLATIONS: i32 = 1;
    pub const IO_OR_CONFIG: i32 = 2;
    pub const INFEASIBLE: i32 = 3;
    pub const MAX_ITERS: i32 = 4;
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::StructurallyInfeasible { .. } => exit::INFEASIBLE,
        Error::Generation { .. } | Error::Numerical(_) | Error::Initialization(_) => exit::VIOLATIONS,
        _ => exit::IO_OR_CONFIG,
    }
}

/// Artifact locations of a run.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }

    pub fn solver_log(&self) -> PathBuf {
        self.root.join("solver.log")
    }

    pub fn solution(&self) -> PathBuf {
        self.root.join("solution.json")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples.csv")
    }

    pub fn verify_dir(&self) -> PathBuf {
        self.root.join("verify")
    }

    pub fn summary(&self) -> PathBuf {
        self.verify_dir().join("summary.json")
    }

    pub fn audit(&self) -> PathBuf {
        self.verify_dir().join("audit.csv")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.verify_dir().join("runs")
    }

    pub fn export_dir(&self) -> PathBuf {
        self.root.join("export")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub solver_status: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    fn open(layout: &Layout, config: &RunConfig) -> Result<Self> {
        let hash = config.hash()?;
        let existing = std::fs::read_to_string(layout.manifest())
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .filter(|m| m.config_hash == hash);
        Ok(existing.unwrap_or(RunManifest {
            config_hash: hash,
            started_unix: unix_now(),
            ..Default::default()
        }))
    }

    fn record(&mut self, layout: &Layout, name: &str, path: &Path) {
        let rel = path.strip_prefix(&layout.root).unwrap_or(path);
        self.artifacts.insert(name.to_string(), rel.display().to_string());
    }

    /// Drops artifacts that are not on disk and writes the manifest.
    fn save(&mut self, layout: &Layout) -> Result<()> {
        self.artifacts.retain(|_, rel| layout.root.join(rel.as_str()).exists());
        self.finished_unix = unix_now();
        let path = layout.manifest();
        write_text(&path, &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateReport {
    pub manifest: PathBuf,
    pub demonstrations: usize,
    pub samples: usize,
}

/// Writes the training dataset for the configured experiment to `data/`.
pub fn cmd_generate(config: &RunConfig) -> Result<GenerateReport> {
    let layout = Layout::new(&config.output_dir);
    create_dir(&layout.root)?;
    let mut manifest = RunManifest::open(&layout, config)?;
    let dataset = match config.experiment {
        Experiment::Robot => {
            let robot = config.robot.as_ref().expect("validated");
            let safety = config.safety_spec()?;
            let target = Vector2::from(robot.target);
            let initial = sample_initial_conditions(
                &robot.params,
                &robot.gains,
                &safety,
                &target,
                robot.trajectories,
                robot.steps,
                robot.period,
                robot.min_barrier,
                config.seed,
            )?;
            let limits = GenerationLimits { safe_set: Some(&safety) };
            generate_robot_data(&robot.params, &robot.gains, &initial, &target, robot.steps, robot.period, &limits)?
        }
        Experiment::Demonstrations => {
            let demo = config.demonstrations.as_ref().expect("validated");
            match (&demo.synthetic, &demo.manifest) {
                (Some(shape), _) => synthetic_snake(shape, config.seed)?,
                (None, Some(path)) => load_demonstrations(path, false)?,
                (None, None) => unreachable!("validated"),
            }
        }
    };
    let path = dataset.save(&layout.data_dir())?;
    manifest.record(&layout, "dataset", &path);
    manifest.metrics.insert("demonstrations".into(), dataset.len() as f64);
    manifest.save(&layout)?;
    let samples = dataset.recorded_demonstrations().iter().map(Vec::len).sum();
    log::info!("wrote {} demonstration(s), {samples} samples, to {}", dataset.len(), path.display());
    Ok(GenerateReport {
        manifest: path,
        demonstrations: dataset.len(),
        samples,
    })
}

/// The generated dataset in the working frame of the experiment.
pub fn load_dataset(config: &RunConfig) -> Result<TrajectoryDataset> {
    let translate = config.demonstrations.as_ref().is_some_and(|d| d.translate_to_origin)
        && config.experiment == Experiment::Demonstrations;
    load_demonstrations(&Layout::new(&config.output_dir).data_manifest(), translate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `None` for an unconstrained fit.
    pub status: Option<SolveStatus>,
    pub objective: f64,
    pub max_violation: f64,
    pub constraints: usize,
    pub sample_points: usize,
    pub solves: usize,
    pub variance_floor_ok: bool,
    pub seconds: f64,
}

impl TrainReport {
    pub fn exit_code(&self) -> i32 {
        match self.status {
            None | Some(SolveStatus::Optimal) => exit::OK,
            Some(SolveStatus::Infeasible) => exit::INFEASIBLE,
            Some(SolveStatus::MaxIters) => exit::MAX_ITERS,
        }
    }
}

/// BIP initialization, constraint-point selection, program assembly and
/// solve. Writes the model, solver log, solution and sample points.
pub fn cmd_train(config: &RunConfig) -> Result<TrainReport> {
    let started = Instant::now();
    let layout = Layout::new(&config.output_dir);
    let mut manifest = RunManifest::open(&layout, config)?;
    let data = load_dataset(config)?;
    let eq = data.target();
    let (inputs, targets) = to_training_pairs(&data);
    let n = data.dim();
    let dims = ElmDims::new(n, n, config.model.n_h)?;
    let hidden = bip_initialize(dims, &inputs, config.seed)?;
    let model = ElmModel::from_hidden(dims, hidden, config.model.weight_bound_out, NoiseSpec::new(config.model.sigma)?)?;
    let features = model.feature_matrix(&inputs)?;
    let target_rows = nalgebra::DMatrix::from_fn(targets.len(), n, |k, j| targets[k][j]);
    let ridge = ridge_weights(&features, &target_rows, config.model.sigma, config.train.mu_w)?;

    if config.train.unconstrained {
        let trained = model.with_output_weights(ridge)?;
        trained.save(&layout.model())?;
        manifest.record(&layout, "model", &layout.model());
        manifest.solver_status = Some("unconstrained".into());
        manifest.save(&layout)?;
        return Ok(TrainReport {
            status: None,
            objective: f64::NAN,
            max_violation: 0.0,
            constraints: 0,
            sample_points: 0,
            solves: 0,
            variance_floor_ok: true,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    let specs = config.specs(&eq)?;
    let domain = DomainBox::around_ellipse(&specs.safety, config.sampler.inflation)?;
    let grid = grid_domain(&domain, config.sampler.tau, config.sampler.max_points)?;
    let budget = if config.sampler.budget > grid.count() {
        log::warn!("grid has {} points, fewer than the budget {}", grid.count(), config.sampler.budget);
        grid.count()
    } else {
        config.sampler.budget
    };
    let samples = select_active_points(&grid, &model.with_output_weights(ridge)?, &specs, budget, config.seed)?;
    log::info!("grid {} points, {} selected", grid.count(), samples.count());
    let options = TrainOptions {
        assemble: AssembleOptions {
            mu_w: config.train.mu_w,
            margins: config.sampler.margins,
            tau_eff: samples.effective_tau(),
        },
        solver: config.solver,
        xi_rounds: config.train.xi_rounds,
    };
    let outcome = train(&model, &inputs, &targets, &specs, &samples, &options)?;
    let solution = &outcome.solution;
    log::info!(
        "status {} objective {:.6e} max violation {:.3e} after {} iteration(s)",
        solution.status,
        solution.objective,
        solution.max_constraint_violation,
        solution.iterations
    );

    outcome.model.save(&layout.model())?;
    write_text(&layout.solver_log(), &solution.log_text())?;
    write_text(&layout.solution(), &(solution.to_json(&outcome.problem)? + "\n"))?;
    samples.write_csv(&layout.samples())?;
    for (name, path) in [
        ("model", layout.model()),
        ("solver_log", layout.solver_log()),
        ("solution", layout.solution()),
        ("samples", layout.samples()),
    ] {
        manifest.record(&layout, name, &path);
    }
    let seconds = started.elapsed().as_secs_f64();
    manifest.solver_status = Some(solution.status.to_string());
    manifest.metrics.insert("objective".into(), solution.objective);
    manifest.metrics.insert("max_constraint_violation".into(), solution.max_constraint_violation);
    manifest.metrics.insert("train_seconds".into(), seconds);
    manifest.save(&layout)?;
    Ok(TrainReport {
        status: Some(solution.status),
        objective: solution.objective,
        max_violation: solution.max_constraint_violation,
        constraints: outcome.problem.constraints.len(),
        sample_points: samples.count(),
        solves: outcome.solves,
        variance_floor_ok: outcome.variance_floor_ok,
        seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub runs: usize,
    pub violation_count: usize,
    pub converged_count: usize,
    pub diverged_count: usize,
    pub max_final_distance: f64,
    pub mean_steps_to_converge: Option<f64>,
    pub audit_points: usize,
    pub audit_failures: usize,
    pub rollout: safe_sysid::rollout::RolloutReport,
}

impl VerifySummary {
    pub fn exit_code(&self) -> i32 {
        if self.violation_count == 0 && self.audit_failures == 0 {
            exit::OK
        } else {
            exit::VIOLATIONS
        }
    }
}

fn load_model(path: &Path, dim: usize) -> Result<ElmModel> {
    let model = ElmModel::load(path)?;
    if model.dims().n != dim {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("model state dimension {} does not match the dataset's {dim}", model.dims().n),
        });
    }
    Ok(model)
}

/// Monte Carlo rollouts from perturbed demonstration starts and the one-step
/// audit at the training sample points.
pub fn cmd_verify(config: &RunConfig, model_path: Option<&Path>) -> Result<VerifySummary> {
    let layout = Layout::new(&config.output_dir);
    let mut manifest = RunManifest::open(&layout, config)?;
    let data = load_dataset(config)?;
    let model = load_model(model_path.unwrap_or(&layout.model()), data.dim())?;
    let specs = config.specs(&data.target())?;
    let report = monte_carlo_verify(&model, &specs.safety, &specs.stability, &data.initial_states(), &config.rollout)?;
    let audit = if layout.samples().exists() {
        let samples = SampleSet::read_csv(&layout.samples(), config.sampler.tau)?;
        (!samples.points.is_empty())
            .then(|| one_step_constraint_audit(&model, &specs, &samples, AUDIT_TOL))
            .transpose()?
    } else {
        None
    };
    create_dir(&layout.verify_dir())?;
    report.write_runs(&layout.runs_dir(), &specs.safety, &specs.stability)?;
    if let Some(a) = &audit {
        a.write_csv(&layout.audit())?;
        manifest.record(&layout, "audit", &layout.audit());
    }
    let summary = VerifySummary {
        runs: report.runs.len(),
        violation_count: report.violation_count,
        converged_count: report.converged_count,
        diverged_count: report.diverged_count,
        max_final_distance: report.max_final_distance,
        mean_steps_to_converge: report.mean_steps_to_converge,
        audit_points: audit.as_ref().map_or(0, |a| a.rows.len()),
        audit_failures: audit.as_ref().map_or(0, |a| a.failures),
        rollout: report,
    };
    write_text(&layout.summary(), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    manifest.record(&layout, "verify_summary", &layout.summary());
    manifest.record(&layout, "verify_runs", &layout.runs_dir());
    manifest.metrics.insert("violations".into(), summary.violation_count as f64);
    manifest.metrics.insert("converged".into(), summary.converged_count as f64);
    manifest.metrics.insert("audit_failures".into(), summary.audit_failures as f64);
    manifest.save(&layout)?;
    log::info!(
        "{} run(s): {} violation(s), {} converged, audit failures {}",
        summary.runs,
        summary.violation_count,
        summary.converged_count,
        summary.audit_failures
    );
    Ok(summary)
}

/// Boundary `h = 0` of the safe ellipse as `count` points in the working
/// frame: `c + L^{-T} u` for unit `u`, where `A = L L^T`.
pub fn ellipse_boundary(safety: &safe_sysid::constraints::SafetySpec, count: usize) -> Result<Vec<DVector<f64>>> {
    if safety.dim() != 2 {
        return Err(Error::InvalidInput("ellipse export needs a planar safe set".into()));
    }
    let l = safety
        .a()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("barrier matrix not positive definite".into()))?
        .l();
    let lt = l.transpose();
    (0..count)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / count as f64;
            let u = DVector::from_vec(vec![theta.cos(), theta.sin()]);
            let offset = lt
                .solve_upper_triangular(&u)
                .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
            Ok(safety.center() + offset)
        })
        .collect()
}

fn write_series(path: &Path, header: &str, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(",")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Plot-ready CSVs in recorded coordinates: the ellipse boundary, the
/// demonstrations, a noise-free reproduction from every demonstration start
/// and, for the robot, the joint angles over time.
pub fn cmd_export(config: &RunConfig, model_path: Option<&Path>) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&config.output_dir);
    let mut manifest = RunManifest::open(&layout, config)?;
    let data = load_dataset(config)?;
    let model = load_model(model_path.unwrap_or(&layout.model()), data.dim())?;
    let specs = config.specs(&data.target())?;
    let dir = layout.export_dir();
    for sub in ["demos", "reproduced"] {
        create_dir(&dir.join(sub))?;
    }
    let mut written = Vec::new();

    let ellipse: Vec<DVector<f64>> = ellipse_boundary(&specs.safety, 720)?.iter().map(|x| data.to_recorded(x)).collect();
    let path = dir.join("ellipse.csv");
    write_states(&path, &ellipse)?;
    written.push(path);

    for (i, demo) in data.recorded_demonstrations().iter().enumerate() {
        let path = dir.join("demos").join(format!("demo_{i:02}.csv"));
        write_states(&path, demo)?;
        written.push(path);
    }

    let nominal = RolloutConfig {
        noise: false,
        ..config.rollout
    };
    let period = data.period();
    let mut reproduced = Vec::new();
    for (i, x0) in data.initial_states().iter().enumerate() {
        let traj = rollout(&model, x0, &data.target(), &nominal)?;
        let path = dir.join("reproduced").join(format!("traj_{i:02}.csv"));
        let n = data.dim();
        let header = std::iter::once("t".to_string())
            .chain((0..n).map(|j| format!("x{j}")))
            .chain(std::iter::once("h".to_string()))
            .collect::<Vec<_>>()
            .join(",");
        let rows = traj.states.iter().enumerate().map(|(k, x)| {
            let mut row = vec![k as f64 * period];
            row.extend(data.to_recorded(x).iter());
            row.push(barrier_value(&specs.safety, x));
            row
        });
        write_series(&path, &header, rows)?;
        written.push(path);
        reproduced.push(traj);
    }

    if config.experiment == Experiment::Robot {
        let path = dir.join("joint_angles.csv");
        let rows = reproduced.iter().enumerate().flat_map(|(i, traj)| {
            traj.states
                .iter()
                .enumerate()
                .map(move |(k, q)| vec![i as f64, k as f64 * period, q[0], q[1]])
        });
        write_series(&path, "trajectory,t,q1,q2", rows)?;
        written.push(path);
    }

    let info = serde_json::json!({
        "frame": "recorded",
        "shift": data.shift().map(|s| s.iter().copied().collect::<Vec<_>>()),
        "period": period,
        "demonstrations": data.len(),
    });
    let path = dir.join("export.json");
    write_text(&path, &(serde_json::to_string_pretty(&info)? + "\n"))?;
    written.push(path);
    manifest.record(&layout, "export", &dir);
    manifest.save(&layout)?;
    log::info!("exported {} file(s) to {}", written.len(), dir.display());
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllReport {
    pub generate: GenerateReport,
    pub train: TrainReport,
    pub verify: Option<VerifySummary>,
}

impl AllReport {
    pub fn exit_code(&self) -> i32 {
        match self.train.exit_code() {
            exit::OK => self.verify.as_ref().map_or(exit::OK, VerifySummary::exit_code),
            code => code,
        }
    }
}

/// `generate`, `train`, then `verify` and `export` when training succeeded.
pub fn cmd_all(config: &RunConfig) -> Result<AllReport> {
    let generate = cmd_generate(config)?;
    let train = cmd_train(config)?;
    if train.exit_code() != exit::OK {
        return Ok(AllReport {
            generate,
            train,
            verify: None,
        });
    }
    let verify = cmd_verify(config, None)?;
    cmd_export(config, None)?;
    Ok(AllReport {
        generate,
        train,
        verify: Some(verify),
    })
}
