//! Acceptance checks. Prints one `criterion N: PASS|FAIL` line per check and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use romcal::calibrate::{
    adjoint_gradient, calibrate, forward_rollout, objective, theta, CalibrationProblem, OptimizerConfig,
};
use romcal::deim::{build_deim_operators, deim_points, nonlinearity_basis, nonlinearity_snapshots, DeimOperators};
use romcal::fom::{fom_rhs, Control};
use romcal::opinf::{assemble_regression, solve_opinf, sym_kron_len, OpinfConfig, RomOperators};
use romcal::pipeline::{self, PipelineConfig};
use romcal::pod::compute_pod;
use romcal::snapshots::{apply_scaling, assemble_snapshots, fit_scaling};

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, amp: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-amp..amp))
}

fn random_operators(rng: &mut ChaCha8Rng, r: usize) -> RomOperators {
    RomOperators {
        a: DMatrix::identity(r, r) * -0.5 + random_matrix(rng, r, r, 0.1),
        h: random_matrix(rng, r, sym_kron_len(r), 0.05),
        b: random_matrix(rng, r, 1, 0.2),
    }
}

fn random_deim(rng: &mut ChaCha8Rng, r: usize) -> DeimOperators {
    DeimOperators {
        indices: vec![0, 1],
        nonlinearity_basis: None,
        p1: random_matrix(rng, r, 2, 1.0),
        p2: random_matrix(rng, 2, r, 1.0),
        prefactor: 1e-3,
        exponent: 1500.0,
        offset: DVector::from_element(2, 500.0),
        factor: DVector::from_element(2, 10.0),
    }
}

fn random_controls(rng: &mut ChaCha8Rng, k: usize) -> Vec<Control> {
    let load = rng.gen_range(0.5..2.0);
    (0..=k)
        .map(|j| Control::new(if j < k / 2 { load } else { 0.0 }, rng.gen_range(-1.0..1.0)))
        .collect()
}

/// `l` trajectories of `k` steps generated by `truth`.
fn realizable_problem(
    rng: &mut ChaCha8Rng,
    truth: &RomOperators,
    deim: Option<DeimOperators>,
    l: usize,
    k: usize,
    dt: f64,
) -> CalibrationProblem {
    let r = truth.r();
    let mut trajectories = Vec::new();
    let mut controls = Vec::new();
    for _ in 0..l {
        let s0 = DVector::from_fn(r, |_, _| rng.gen_range(-0.4..0.4));
        let c = random_controls(rng, k);
        trajectories.push(forward_rollout(truth, deim.as_ref(), &s0, &c, dt, k).unwrap());
        controls.push(c);
    }
    CalibrationProblem::new(trajectories, controls, dt, deim).unwrap()
}

fn perturb(rng: &mut ChaCha8Rng, ops: &RomOperators, amp: f64) -> RomOperators {
    let x = ops.to_params();
    ops.with_params(&DVector::from_fn(x.len(), |i, _| x[i] + rng.gen_range(-amp..amp)))
}

fn criterion_1_adjoint_gradient_matches_finite_differences() -> (bool, String) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let truth = random_operators(&mut rng, 3);
        let deim = random_deim(&mut rng, 3);
        let problem = realizable_problem(&mut rng, &truth, Some(deim), 2, 40, 0.05);
        let ops = perturb(&mut rng, &truth, 0.05);
        let analytic = adjoint_gradient(&ops, &problem).unwrap().grad.to_params();
        let x = ops.to_params();
        for i in 0..x.len() {
            let h = 1e-6 * (1.0 + x[i].abs());
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd =
                (objective(&ops.with_params(&xp), &problem) - objective(&ops.with_params(&xm), &problem)) / (2.0 * h);
            worst = worst.max((fd - analytic[i]).abs() / analytic[i].abs());
        }
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-5 && elapsed < Duration::from_secs(10);
    (
        ok,
        format!(
            "max entry-wise relative error {worst:.2e}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

/// One-sided Jacobi SVD; returns the singular values.
fn jacobi_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut a = m.clone();
    let n = a.ncols();
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a.column(p).iter().map(|v| v * v).sum();
                let beta: f64 = a.column(q).iter().map(|v| v * v).sum();
                let gamma: f64 = a.column(p).iter().zip(a.column(q).iter()).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..a.nrows() {
                    let (x, y) = (a[(i, p)], a[(i, q)]);
                    a[(i, p)] = c * x - s * y;
                    a[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

fn criterion_2_truncation_error_equals_discarded_energy() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for (seed, (n, m)) in [(50, 30), (30, 50), (20, 20), (45, 12)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        // graded spectrum so the tail is not negligible
        let data = DMatrix::from_fn(n, m, |_, j| rng.gen_range(-1.0..1.0) * 0.8f64.powi(j as i32));
        let sv = jacobi_singular_values(&data);
        let max_rank = n.min(m);
        for r in 1..max_rank {
            let basis = compute_pod(&data, r).unwrap().basis;
            let residual = &data - &basis * basis.tr_mul(&data);
            let got = residual.norm_squared();
            let want: f64 = sv[r..max_rank].iter().map(|s| s * s).sum();
            worst = worst.max((got - want).abs() / want);
        }
    }
    let ok = worst < 1e-10;
    (ok, format!("max relative mismatch {worst:.2e}"))
}

fn criterion_3_operator_inference_recovers_generator() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = 4;
    let truth = random_operators(&mut rng, r);
    let mut states = Vec::new();
    let mut rates = Vec::new();
    let mut controls = Vec::new();
    for _ in 0..6 {
        let c = random_controls(&mut rng, 20);
        let s0 = DVector::from_fn(r, |_, _| rng.gen_range(-1.0..1.0));
        let traj = forward_rollout(&truth, None, &s0, &c, 0.1, 20).unwrap();
        for j in 0..traj.ncols() {
            let s = traj.column(j).into_owned();
            rates.push(theta(&truth, None, &s, &c[j]).unwrap());
            states.push(s);
            controls.push(c[j]);
        }
    }
    let states = DMatrix::from_columns(&states);
    let rates = DMatrix::from_columns(&rates);
    let cfg = OpinfConfig {
        tikhonov_lambda: 0.0,
        include_quadratic: true,
        include_input: true,
    };
    let reg = assemble_regression(&states, Some(&rates), &controls, None, &cfg).unwrap();
    let got = solve_opinf(&reg).unwrap();
    let err = (got.to_params() - truth.to_params()).norm() / truth.frobenius_norm();
    let ok = err < 1e-6;
    (ok, format!("relative Frobenius error {err:.2e}"))
}

fn criterion_4_deim_is_exact_at_full_snapshot_rank() -> (bool, String) {
    let mut cfg = PipelineConfig::default();
    cfg.fom.t_end = 2000.0;
    cfg.save_every = 200;
    let trajectories: Vec<_> = [0.5, 1.5]
        .iter()
        .map(|&load| {
            let signal = romcal::fom::ControlSignal::switch_off(load, 1500.0).unwrap();
            romcal::fom::fom_integrate(&cfg.fom, &signal, cfg.save_every).unwrap()
        })
        .collect();
    let set = assemble_snapshots(&trajectories).unwrap();
    let spec = fit_scaling(&set);
    let scaled = apply_scaling(&set, &spec).unwrap();

    // states and nonlinearities both represented exactly
    let state_rank = numerical_rank(&scaled.data);
    let pod = compute_pod(&scaled.data, state_rank)
        .unwrap()
        .with_scaling(spec.clone());
    let nonlinear = nonlinearity_snapshots(&scaled, &cfg.fom).unwrap();
    let s = numerical_rank(&nonlinear);
    let u_n = nonlinearity_basis(&nonlinear, s).unwrap();
    let deim = build_deim_operators(&pod, &u_n, &deim_points(&u_n).unwrap(), &cfg.fom.source_model()).unwrap();

    let shift = spec.row_shift();
    let scale = spec.row_scale();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for j in 0..scaled.num_columns() {
        let load = scaled.controls[j].heat_load;
        let s_red = pod.basis.tr_mul(&scaled.data.column(j));
        let got = deim.reduced_arrhenius(&s_red, load).unwrap();
        // Galerkin oracle from the full model: source part of the right-hand
        // side at the lifted state, scaled and projected
        let x = DVector::from_fn(shift.len(), |i, _| shift[i] + scale[i] * (&pod.basis * &s_red)[i]);
        let with = fom_rhs(&x, Control::new(load, 0.0), &cfg.fom).unwrap();
        let without = fom_rhs(&x, Control::new(0.0, 0.0), &cfg.fom).unwrap();
        let source = (with - without).component_div(&scale);
        let want = pod.basis.tr_mul(&source);
        if load != 0.0 {
            worst = worst.max((&got - &want).norm() / want.norm());
            checked += 1;
        } else {
            assert_eq!(got.norm(), 0.0);
        }
    }
    let ok = worst < 1e-8 && checked > 0;
    (
        ok,
        format!("r = {state_rank}, s = {s}, {checked} heated columns, max relative error {worst:.2e}"),
    )
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().singular_values();
    let tol = sv.max() * m.nrows().max(m.ncols()) as f64 * f64::EPSILON;
    sv.iter().filter(|v| **v > tol).count()
}

fn criterion_5_calibration_reduces_error_tenfold() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    let start = Instant::now();
    pipeline::cmd_generate(&cfg, dir.path()).unwrap();
    pipeline::cmd_train(&cfg, dir.path(), false).unwrap();
    let summary = pipeline::cmd_evaluate(&cfg, dir.path()).unwrap();
    let elapsed = start.elapsed();
    let ratio = summary.ratio.expect("both models evaluated");
    let oi = summary.models[0].3;
    let calibrated = summary.models[1].3;
    let ok = ratio <= 0.1 && elapsed < Duration::from_secs(300);
    (
        ok,
        format!(
            "OI {oi:.4e}, calibrated {calibrated:.4e}, ratio {ratio:.4}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6_reference_model_fixture() -> (bool, String) {
    let report6 = pipeline::cmd_fixture_check(None, &PipelineConfig::default()).unwrap();
    let model = romcal::rom::parse_rom(pipeline::REFERENCE_MODEL, "bundled").unwrap();
    let shapes_ok = [model.operators.a.shape(), model.deim.p1.shape(), model.deim.p2.shape()]
        .iter()
        .all(|s| *s == (8, 8));
    let close = |got: f64, want: f64| (got - want).abs() <= 1e-12 * want.abs();
    let entries_ok = close(model.deim.p1[(0, 0)], -0.840)
        && close(model.deim.p2[(0, 0)], -0.00588)
        && close(model.operators.a[(0, 0)], -3.3e-6);
    let ok = shapes_ok && entries_ok && report6.all_finite && report6.passed();
    (
        ok,
        format!(
            "shapes {:?}, {} steps, all finite {}, max |s| {:.3e}",
            report6.shapes, report6.steps, report6.all_finite, report6.max_abs_state
        ),
    )
}

fn criterion_7_calibration_descends() -> (bool, String) {
    let mut monotone = true;
    let mut worst_ratio: f64 = 0.0;
    let mut lines = Vec::new();
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let truth = random_operators(&mut rng, 3);
        let deim = random_deim(&mut rng, 3);
        let problem = realizable_problem(&mut rng, &truth, Some(deim), 2, 40, 0.05);
        let start = perturb(&mut rng, &truth, 0.02);
        for refresh in [0, 5] {
            let opt = OptimizerConfig {
                max_iterations: 2000,
                gauss_newton_refresh: refresh,
                ..OptimizerConfig::default()
            };
            let (_, conv) = calibrate(&start, &problem, &opt).unwrap();
            let h = conv.objective_history();
            monotone &= h.windows(2).all(|w| w[1] <= w[0]);
            let ratio = h.last().unwrap() / h[0];
            worst_ratio = worst_ratio.max(ratio);
            lines.push(format!(
                "seed {seed} refresh {refresh}: {} it, ratio {ratio:.1e}",
                conv.iterations
            ));
        }
    }
    // non-realizable: noisy data, descent only
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let truth = random_operators(&mut rng, 3);
    let clean = realizable_problem(&mut rng, &truth, None, 2, 40, 0.05);
    let noisy: Vec<_> = clean
        .trajectories
        .iter()
        .map(|t| t + random_matrix(&mut rng, t.nrows(), t.ncols(), 0.05))
        .collect();
    let noisy = CalibrationProblem::new(noisy, clean.controls.clone(), 0.05, None).unwrap();
    let opt = OptimizerConfig {
        max_iterations: 200,
        ..OptimizerConfig::default()
    };
    let (_, conv) = calibrate(&truth, &noisy, &opt).unwrap();
    monotone &= conv.objective_history().windows(2).all(|w| w[1] <= w[0]);
    for l in &lines {
        println!("  {l}");
    }
    let ok = monotone && worst_ratio < 1e-6;
    (
        ok,
        format!("monotone {monotone}, worst final/initial {worst_ratio:.2e}"),
    )
}

fn run_cli(out: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_romcal"))
        .arg("--out")
        .arg(out)
        .args(["--seed", "42"])
        .args(args)
        .env("ROMCAL_MAX_ITERATIONS", "30")
        .env_remove("ROMCAL_CONFIG")
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "romcal {args:?} failed: {status}");
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("eval")] {
        for entry in std::fs::read_dir(&sub).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "csv") {
                let name = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((name, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_8_pipeline_is_deterministic() -> (bool, String) {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            run_cli(dir.path(), &["generate"]);
            run_cli(dir.path(), &["train"]);
            run_cli(dir.path(), &["evaluate"]);
            (csv_files(dir.path()), dir)
        })
        .collect();
    let (a, b) = (&runs[0].0, &runs[1].0);
    let names: Vec<_> = a.iter().map(|(n, _)| n.as_str()).collect();
    let identical = a == b;
    let ok = identical && names.contains(&"convergence.csv") && names.contains(&"eval/summary.csv");
    (ok, format!("{} CSV files compared, identical {identical}", a.len()))
}

fn main() {
    let checks: [fn() -> (bool, String); 8] = [
        criterion_1_adjoint_gradient_matches_finite_differences,
        criterion_2_truncation_error_equals_discarded_energy,
        criterion_3_operator_inference_recovers_generator,
        criterion_4_deim_is_exact_at_full_snapshot_rank,
        criterion_5_calibration_reduces_error_tenfold,
        criterion_6_reference_model_fixture,
        criterion_7_calibration_descends,
        criterion_8_pipeline_is_deterministic,
    ];
    let mut failed = 0;
    for (i, check) in checks.iter().enumerate() {
        let (ok, detail) = std::panic::catch_unwind(check).unwrap_or_else(|_| (false, "panicked".into()));
        println!("criterion {}: {} ({detail})", i + 1, if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!(
        "acceptance: {} of {} criteria passed",
        checks.len() - failed,
        checks.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
