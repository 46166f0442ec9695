//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safe_sysid::constraints::{risk_coefficient, ConstraintTag, QuadConstraint};
use safe_sysid::qcqp::{solve, QcqpProblem, SolveStatus, SolverConfig};
use safe_sysid_cli::config::RunConfig;
use safe_sysid_cli::pipeline::{cmd_all, AllReport};

#[path = "../../core/tests/support/mod.rs"]
mod support;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run_preset(name: &str, out: &Path, extra: &[&str]) -> safe_sysid::Result<(RunConfig, AllReport)> {
    let mut overrides = vec![format!("output_dir={}", out.display())];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    let config = RunConfig::load(&preset(name), &overrides)?;
    let report = cmd_all(&config)?;
    Ok((config, report))
}

fn moment_fidelity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let case = support::moments::random_case(&mut rng);
        for cmp in case.compare(1_000_000, 100 + i) {
            worst = worst.max(cmp.mean_error()).max(cmp.variance_error());
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    outcome(
        worst <= 0.01 && seconds < 30.0,
        format!("20 instances x 2 families, worst relative error {:.3}% in {seconds:.1} s", worst * 100.0),
    )
}

fn bisection_quantile(p: f64) -> f64 {
    let cdf = |z: f64| 0.5 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2));
    let (mut lo, mut hi) = (-40.0, 40.0);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn risk_coefficient_check() -> Outcome {
    let (c9, c5) = (risk_coefficient(0.9), risk_coefficient(0.5));
    let (Ok(c9), Ok(c5)) = (c9, c5) else {
        return outcome(false, "risk_coefficient returned an error".into());
    };
    let oracle = bisection_quantile(0.9);
    outcome(
        (c9 - oracle).abs() <= 1e-8 && (c9 - 1.2815515655).abs() <= 1e-8 && c5 == 0.0,
        format!("c(0.9) = {c9:.12}, bisection {oracle:.12}, c(0.5) = {c5}"),
    )
}

fn projection_problem() -> QcqpProblem {
    let c = QuadConstraint {
        shape: DMatrix::identity(1, 1),
        offset: DVector::from_vec(vec![1.0]),
        bound: 0.25,
        feature: DVector::from_vec(vec![0.0, 1.0]),
        tag: ConstraintTag::Safety,
        sample_state: DVector::zeros(1),
        risk_coeff: 0.0,
        xi: 1.0,
    };
    // Unconstrained optimum of the bias weight: 2.04 / 1.02 = 2.
    QcqpProblem::new(
        DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        DMatrix::from_row_slice(1, 1, &[2.04]),
        1.0,
        0.01,
        vec![c],
    )
    .expect("valid problem")
}

fn solver_correctness() -> Outcome {
    let config = SolverConfig::default();
    let mut worst_f: f64 = 0.0;
    let mut worst_w: f64 = 0.0;
    let mut failures = 0;
    for seed in 0..50 {
        let (problem, _) = support::qcqp_oracle::random_instance(seed);
        let Ok(sol) = solve(&problem, &config) else {
            failures += 1;
            continue;
        };
        if sol.status != SolveStatus::Optimal {
            failures += 1;
            continue;
        }
        let reference = support::qcqp_oracle::oracle(&problem);
        worst_f = worst_f.max((sol.objective - problem.objective(&reference)).abs());
        worst_w = worst_w.max((&sol.weights - &reference).norm());
    }
    let w = match solve(&projection_problem(), &config) {
        Ok(sol) if sol.status == SolveStatus::Optimal => sol.weights[(1, 0)],
        _ => f64::NAN,
    };
    outcome(
        failures == 0 && worst_f <= 1e-5 && worst_w <= 1e-4 && (w - 1.5).abs() <= 1e-8,
        format!(
            "50 instances: {failures} not optimal, worst |df| {worst_f:.2e}, worst |dW|_F {worst_w:.2e}; projection w = {w:.12}"
        ),
    )
}

fn margin_soundness() -> Outcome {
    let report = support::margins::check(10_000, 5);
    outcome(
        report.pairs == 10_000 && report.counterexamples() == 0,
        format!(
            "{} pairs, {} counterexamples, largest change/margin {:.3e}",
            report.pairs,
            report.counterexamples(),
            report.worst_ratio
        ),
    )
}

fn robot_experiment() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let started = Instant::now();
    let (config, report) = match run_preset("robot.json", dir.path(), &[]) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("pipeline error: {e}")),
    };
    let seconds = started.elapsed().as_secs_f64();
    let Some(verify) = report.verify else {
        return outcome(false, format!("training ended with {:?}", report.train.status));
    };
    let pass = report.train.status == Some(SolveStatus::Optimal)
        && report.train.sample_points == 1000
        && verify.runs == 100
        && verify.violation_count == 0
        && verify.converged_count == 100
        && config.rollout.convergence_radius <= 0.05;
    outcome(
        pass,
        format!(
            "status optimal, {} points, {} runs: {} violations, {} converged within {} rad (max {:.2e}), {seconds:.1} s",
            report.train.sample_points,
            verify.runs,
            verify.violation_count,
            verify.converged_count,
            config.rollout.convergence_radius,
            verify.max_final_distance
        ),
    )
}

fn snake_experiment() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let (config, report) = match run_preset("snake.json", dir.path(), &[]) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("pipeline error: {e}")),
    };
    let Some(verify) = report.verify else {
        return outcome(false, format!("training ended with {:?}", report.train.status));
    };
    let pass = report.generate.demonstrations == 7
        && report.train.status == Some(SolveStatus::Optimal)
        && verify.runs == 100
        && verify.violation_count == 0
        && verify.converged_count == 100;
    outcome(
        pass,
        format!(
            "{} demonstrations, {} runs: {} violations, {} converged within {} (max {:.3})",
            report.generate.demonstrations,
            verify.runs,
            verify.violation_count,
            verify.converged_count,
            config.rollout.convergence_radius,
            verify.max_final_distance
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let out = dir.path().join("run");
    let files = ["model.json", "verify/summary.json"];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        if out.exists() {
            std::fs::remove_dir_all(&out).expect("clean output");
        }
        if let Err(e) = run_preset("robot.json", &out, &[]) {
            return outcome(false, format!("pipeline error: {e}"));
        }
        snapshots.push(files.map(|f| std::fs::read(out.join(f)).unwrap_or_default()));
    }
    let same = snapshots[0] == snapshots[1] && snapshots[0].iter().all(|b| !b.is_empty());
    outcome(same, format!("model.json and verify/summary.json identical across two runs: {same}"))
}

fn noise_free_reduction() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for name in ["robot.json", "snake.json"] {
        let dir = tempfile::tempdir().expect("temp dir");
        match run_preset(name, dir.path(), &["model.sigma=0"]) {
            Ok((_, report)) => {
                let (points, failures) = report.verify.as_ref().map_or((0, usize::MAX), |v| (v.audit_points, v.audit_failures));
                pass &= report.train.status == Some(SolveStatus::Optimal) && points > 0 && failures == 0;
                details.push(format!("{name}: {failures} failures at {points} points"));
            }
            Err(e) => {
                pass = false;
                details.push(format!("{name}: pipeline error: {e}"));
            }
        }
    }
    outcome(pass, format!("sigma = 0, tolerance 1e-8; {}", details.join("; ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("moment fidelity", moment_fidelity),
        ("risk coefficient", risk_coefficient_check),
        ("solver correctness", solver_correctness),
        ("sampling margin soundness", margin_soundness),
        ("robot experiment", robot_experiment),
        ("snake experiment", snake_experiment),
        ("pipeline determinism", determinism),
        ("noise-free reduction", noise_free_reduction),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {} ({name}): {verdict} - {}", i + 1, result.detail);
        if !result.pass {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
