//! End-to-end driver: generate snapshots, train reduced models, evaluate them.
//!
//! Output directory layout:
//!
//! ```text
//! snapshots/train_R<load>.snap, snapshots/validation_R<load>.snap
//! rom_oi.rom, rom_calibrated.rom, pod_spectrum.csv, convergence.csv
//! eval/errors_<model>_<case>.csv, eval/stats_<model>_<case>.csv, eval/summary.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nalgebra::DVector;

use crate::calibrate::{calibrate, CalibrationProblem, ConvergenceReport, OptimizerConfig};
use crate::deim::{build_deim_operators, deim_points, nonlinearity_basis, nonlinearity_snapshots};
use crate::fom::{fom_integrate, ControlSignal, FomConfig, FomTrajectory};
use crate::kv::KvFile;
use crate::opinf::{assemble_regression, solve_opinf, OpinfConfig};
use crate::pod::{compute_pod, reconstruction_error_curve, PodBasis, ReconstructionCurve};
use crate::rom::{
    field_statistics, load_rom, parse_rom, rom_vs_projected_error, save_rom, simulate_rom, statistics_csv,
    statistics_of, ErrorReport, RomModel, SWITCH_OFF_WINDOW,
};
use crate::snapshots::{apply_scaling, assemble_snapshots, fit_scaling, load_snapshots, save_snapshots};
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "ROMCAL_";

/// Where the per-field scaling shift comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftMode {
    /// Block mean of the training data.
    Mean,
    /// Inflow temperature for every field.
    Inflow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub fom: FomConfig,
    /// s; heat load drops to zero here
    pub switch_off_time: f64,
    pub train_loads: Vec<f64>,
    pub validation_loads: Vec<f64>,
    /// FOM steps between saved snapshots; the reduced time step is
    /// `fom.dt * save_every`.
    pub save_every: usize,
    pub rank: usize,
    pub deim_rank: usize,
    pub shift: ShiftMode,
    pub opinf: OpinfConfig,
    pub optimizer: OptimizerConfig,
    pub symmetric_a: bool,
    pub switch_off_window: usize,
    pub pod_curve_max_rank: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fom: FomConfig::default(),
            switch_off_time: 36_010.0,
            train_loads: vec![0.5, 1.0, 1.5],
            validation_loads: vec![0.75, 1.25],
            save_every: 200,
            rank: 8,
            deim_rank: 8,
            shift: ShiftMode::Mean,
            opinf: OpinfConfig {
                tikhonov_lambda: 1.0,
                include_quadratic: false,
                include_input: false,
            },
            optimizer: OptimizerConfig {
                max_iterations: 500,
                gauss_newton_refresh: 10,
                ..OptimizerConfig::default()
            },
            symmetric_a: false,
            switch_off_window: SWITCH_OFF_WINDOW,
            pod_curve_max_rank: 20,
            seed: 0,
        }
    }
}

const FOM_KEYS: &[&str] = &[
    "grid_points",
    "domain_length",
    "coolant_velocity",
    "rho_cp_coolant",
    "rho_cp_solid",
    "conductivity_coolant",
    "conductivity_solid",
    "exchange_coefficient",
    "solid_mask",
    "arrhenius_prefactor",
    "arrhenius_exponent",
    "inflow_temperature",
    "initial_temperature",
    "dt",
    "t_end",
];

const PIPELINE_KEYS: &[&str] = &[
    "switch_off_time",
    "train_loads",
    "validation_loads",
    "save_every",
    "rank",
    "deim_rank",
    "scaling_shift",
    "lambda",
    "include_quadratic",
    "include_input",
    "max_iterations",
    "gradient_tolerance",
    "initial_step",
    "line_search_shrink",
    "line_search_max_backtracks",
    "history_size",
    "gauss_newton_refresh",
    "symmetric_a",
    "switch_off_window",
    "pod_curve_max_rank",
    "seed",
];

/// Every recognised configuration key.
pub fn config_keys() -> Vec<&'static str> {
    FOM_KEYS.iter().chain(PIPELINE_KEYS).copied().collect()
}

impl PipelineConfig {
    /// Reads `path` (or defaults when `None`) and applies `ROMCAL_<KEY>`
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut kv = match path {
            Some(p) => KvFile::read(p)?,
            None => KvFile::default(),
        };
        let keys = config_keys();
        if let Some(unknown) = kv.keys().find(|k| !keys.contains(k) && *k != "heat_load") {
            return Err(Error::parse(
                kv.path(),
                kv.line_of(unknown),
                format!("unknown key `{unknown}`"),
            ));
        }
        kv.apply_env_overrides(ENV_PREFIX, &keys);
        Self::from_kv(&kv)
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        if kv.raw("heat_load").is_some() {
            return Err(Error::Config(
                "pipeline configs set `train_loads`, `validation_loads` and `switch_off_time` instead of `heat_load`"
                    .into(),
            ));
        }
        let (fom, _) = FomConfig::from_kv(kv)?;
        let d = Self::default();
        let shift = match kv.raw("scaling_shift") {
            None | Some("mean") => ShiftMode::Mean,
            Some("inflow") => ShiftMode::Inflow,
            Some(other) => {
                return Err(Error::parse(
                    kv.path(),
                    kv.line_of("scaling_shift"),
                    format!("scaling_shift must be `mean` or `inflow`, got `{other}`"),
                ))
            }
        };
        let cfg = Self {
            fom,
            switch_off_time: kv.get_or("switch_off_time", d.switch_off_time)?,
            train_loads: kv.get_list("train_loads")?.unwrap_or(d.train_loads),
            validation_loads: kv.get_list("validation_loads")?.unwrap_or(d.validation_loads),
            save_every: kv.get_or("save_every", d.save_every)?,
            rank: kv.get_or("rank", d.rank)?,
            deim_rank: kv.get_or("deim_rank", d.deim_rank)?,
            shift,
            opinf: OpinfConfig {
                tikhonov_lambda: kv.get_or("lambda", d.opinf.tikhonov_lambda)?,
                include_quadratic: kv.get_or("include_quadratic", d.opinf.include_quadratic)?,
                include_input: kv.get_or("include_input", d.opinf.include_input)?,
            },
            optimizer: OptimizerConfig {
                max_iterations: kv.get_or("max_iterations", d.optimizer.max_iterations)?,
                gradient_tolerance: kv.get_or("gradient_tolerance", d.optimizer.gradient_tolerance)?,
                initial_step: kv.get_or("initial_step", d.optimizer.initial_step)?,
                line_search_shrink: kv.get_or("line_search_shrink", d.optimizer.line_search_shrink)?,
                line_search_max_backtracks: kv
                    .get_or("line_search_max_backtracks", d.optimizer.line_search_max_backtracks)?,
                history_size: kv.get_or("history_size", d.optimizer.history_size)?,
                armijo: d.optimizer.armijo,
                gauss_newton_refresh: kv.get_or("gauss_newton_refresh", d.optimizer.gauss_newton_refresh)?,
            },
            symmetric_a: kv.get_or("symmetric_a", d.symmetric_a)?,
            switch_off_window: kv.get_or("switch_off_window", d.switch_off_window)?,
            pod_curve_max_rank: kv.get_or("pod_curve_max_rank", d.pod_curve_max_rank)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fom.validate()?;
        self.opinf.validate()?;
        self.optimizer.validate()?;
        if self.train_loads.is_empty() || self.validation_loads.is_empty() {
            return Err(Error::Config(
                "training and validation heat loads must both be non-empty".into(),
            ));
        }
        if let Some(r) = self.train_loads.iter().find(|r| self.validation_loads.contains(r)) {
            return Err(Error::Config(format!(
                "heat load {r} is listed for both training and validation"
            )));
        }
        if let Some(r) = self
            .train_loads
            .iter()
            .chain(&self.validation_loads)
            .find(|r| !(**r >= 0.0))
        {
            return Err(Error::Config(format!("heat loads must be non-negative, got {r}")));
        }
        if self.save_every == 0 {
            return Err(Error::Config("save_every must be positive".into()));
        }
        if self.rank == 0 || self.deim_rank == 0 {
            return Err(Error::Config("rank and deim_rank must be positive".into()));
        }
        if !(self.switch_off_time > 0.0) {
            return Err(Error::Config("switch_off_time must be positive".into()));
        }
        Ok(())
    }

    pub fn signal(&self, load: f64) -> Result<ControlSignal> {
        ControlSignal::switch_off(load, self.switch_off_time)
    }

    pub fn rom_dt(&self) -> f64 {
        self.fom.dt * self.save_every as f64
    }

    /// Rows entering field statistics: all coolant cells, masked solid cells.
    pub fn statistics_rows(&self) -> Vec<bool> {
        let mut rows = vec![true; self.fom.grid_points];
        rows.extend(self.fom.solid_mask.iter().copied());
        rows
    }
}

pub fn generate_trajectory(cfg: &PipelineConfig, load: f64) -> Result<FomTrajectory> {
    fom_integrate(&cfg.fom, &cfg.signal(load)?, cfg.save_every)
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub oi: RomModel,
    pub calibrated: Option<RomModel>,
    pub convergence: Option<ConvergenceReport>,
    pub pod: PodBasis,
    pub reconstruction: ReconstructionCurve,
}

/// POD, DEIM, operator inference and (unless skipped) calibration on the
/// training trajectories. Validation data only enters the reconstruction
/// curve.
pub fn train(
    cfg: &PipelineConfig,
    training: &[FomTrajectory],
    validation: &[FomTrajectory],
    skip_calibration: bool,
) -> Result<TrainedModels> {
    let set = assemble_snapshots(training)?;
    let mut spec = fit_scaling(&set);
    if cfg.shift == ShiftMode::Inflow {
        spec.shift.iter_mut().for_each(|s| *s = cfg.fom.inflow_temperature);
    }
    let scaled = apply_scaling(&set, &spec)?;

    let pod = compute_pod(&scaled.data, cfg.rank)?.with_scaling(spec.clone());
    let max_rank = cfg
        .pod_curve_max_rank
        .min(scaled.data.nrows())
        .min(scaled.data.ncols())
        .max(cfg.rank);
    let validation_data = if validation.is_empty() {
        None
    } else {
        Some(spec.scale_states(&assemble_snapshots(validation)?.data))
    };
    let reconstruction = reconstruction_error_curve(&scaled.data, validation_data.as_ref(), max_rank)?;

    let nonlinear = nonlinearity_snapshots(&scaled, &cfg.fom)?;
    let u_n = nonlinearity_basis(&nonlinear, cfg.deim_rank)?;
    let indices = deim_points(&u_n)?;
    let deim = build_deim_operators(&pod, &u_n, &indices, &cfg.fom.source_model())?;
    info!("DEIM points {indices:?}");

    let reduced = pod.project(&scaled.data)?;
    let reduced_rates = match &scaled.derivatives {
        Some(d) => Some(pod.project(d)?),
        None => None,
    };
    let regression = assemble_regression(
        &reduced,
        reduced_rates.as_ref(),
        &scaled.controls,
        Some(&deim),
        &cfg.opinf,
    )?;
    let oi_ops = solve_opinf(&regression)?;
    let oi = RomModel {
        operators: oi_ops,
        deim: deim.clone(),
        basis: Some(pod.clone()),
        scaling: Some(spec),
        dt: cfg.rom_dt(),
    };
    oi.validate()?;

    let (calibrated, convergence) = if skip_calibration {
        (None, None)
    } else {
        let mut trajectories = Vec::new();
        let mut controls = Vec::new();
        for i in 0..scaled.num_trajectories() {
            let cols = scaled.columns(i);
            trajectories.push(reduced.columns(cols.start, cols.len()).into_owned());
            controls.push(scaled.controls[cols].to_vec());
        }
        let mut problem = CalibrationProblem::new(trajectories, controls, oi.dt, Some(deim))?
            .with_terms(cfg.opinf.include_quadratic, cfg.opinf.include_input);
        problem.symmetric_a = cfg.symmetric_a;
        let start = Instant::now();
        let (ops, report) = calibrate(&oi.operators, &problem, &cfg.optimizer)?;
        info!(
            "calibration: {} iterations in {:.1} s, objective {:.4e} -> {:.4e}",
            report.iterations,
            start.elapsed().as_secs_f64(),
            report.history[0].objective,
            report.history.last().map_or(f64::NAN, |h| h.objective)
        );
        (
            Some(RomModel {
                operators: ops,
                ..oi.clone()
            }),
            Some(report),
        )
    };
    Ok(TrainedModels {
        oi,
        calibrated,
        convergence,
        pod,
        reconstruction,
    })
}

/// Error report over several trajectories.
pub fn evaluate_model(model: &RomModel, trajectories: &[FomTrajectory], window: usize) -> Result<ErrorReport> {
    let reports = trajectories
        .iter()
        .map(|t| rom_vs_projected_error(model, t, window))
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorReport::merge(&reports))
}

fn case_name(kind: &str, load: f64) -> String {
    format!("{kind}_R{load}")
}

fn snapshot_path(out: &Path, kind: &str, load: f64) -> PathBuf {
    out.join("snapshots").join(format!("{}.snap", case_name(kind, load)))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cases(cfg: &PipelineConfig) -> Vec<(&'static str, f64)> {
    cfg.train_loads
        .iter()
        .map(|&r| ("train", r))
        .chain(cfg.validation_loads.iter().map(|&r| ("validation", r)))
        .collect()
}

/// One snapshot file per heat load.
pub fn cmd_generate(cfg: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(&out.join("snapshots"))?;
    let mut written = Vec::new();
    for (kind, load) in cases(cfg) {
        let traj = generate_trajectory(cfg, load)?;
        let path = snapshot_path(out, kind, load);
        save_snapshots(&assemble_snapshots(std::slice::from_ref(&traj))?, &path)?;
        info!("wrote {}", path.display());
        written.push(path);
    }
    Ok(written)
}

fn load_cases(cfg: &PipelineConfig, out: &Path, kind: &str) -> Result<Vec<FomTrajectory>> {
    let loads = if kind == "train" {
        &cfg.train_loads
    } else {
        &cfg.validation_loads
    };
    let mut trajectories = Vec::new();
    for &load in loads {
        let path = snapshot_path(out, kind, load);
        let set = load_snapshots(&path)?;
        if set.state_dim() != cfg.fom.state_dim() {
            return Err(Error::Dimension(format!(
                "{} has {} rows but the configured grid needs {}; regenerate the snapshots",
                path.display(),
                set.state_dim(),
                cfg.fom.state_dim()
            )));
        }
        trajectories.extend(set.split()?);
    }
    Ok(trajectories)
}

fn spectrum_csv(pod: &PodBasis, curve: &ReconstructionCurve) -> String {
    let total: f64 = pod.singular_values.iter().map(|s| s * s).sum();
    let mut out = String::from("index,singular_value,energy_fraction,max_mse_training,max_mse_validation\n");
    let mut cumulative = 0.0;
    for (i, s) in pod.singular_values.iter().enumerate() {
        cumulative += s * s;
        let _ = write!(out, "{},{s:e},{:e}", i + 1, cumulative / total);
        match curve.training.get(i) {
            Some(t) => {
                let v = curve.validation.get(i).map_or(String::new(), |v| format!("{v:e}"));
                let _ = writeln!(out, ",{t:e},{v}");
            }
            None => out.push_str(",,\n"),
        }
    }
    out
}

pub const OI_MODEL_FILE: &str = "rom_oi.rom";
pub const CALIBRATED_MODEL_FILE: &str = "rom_calibrated.rom";

/// Trains on the generated training snapshots and writes the model files.
pub fn cmd_train(cfg: &PipelineConfig, out: &Path, skip_calibration: bool) -> Result<TrainedModels> {
    let training = load_cases(cfg, out, "train")?;
    let validation = load_cases(cfg, out, "validation")?;
    let trained = train(cfg, &training, &validation, skip_calibration)?;
    save_rom(&trained.oi, out.join(OI_MODEL_FILE))?;
    write(
        &out.join("pod_spectrum.csv"),
        &spectrum_csv(&trained.pod, &trained.reconstruction),
    )?;
    let calibrated_path = out.join(CALIBRATED_MODEL_FILE);
    match (&trained.calibrated, &trained.convergence) {
        (Some(model), Some(report)) => {
            save_rom(model, &calibrated_path)?;
            report.write_csv(out.join("convergence.csv"))?;
        }
        _ => {
            // a stale calibrated model would otherwise be evaluated next to the new OI one
            if calibrated_path.exists() {
                std::fs::remove_file(&calibrated_path).map_err(|e| Error::io(&calibrated_path, e))?;
            }
        }
    }
    Ok(trained)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSummary {
    /// (model name, case names, per-case mean, aggregate mean)
    pub models: Vec<(String, Vec<String>, Vec<f64>, f64)>,
    /// calibrated / OI aggregate, when both models exist
    pub ratio: Option<f64>,
}

impl EvaluationSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,case,mean_relative_mse_excluding_switch_off\n");
        for (name, cases, means, total) in &self.models {
            for (c, m) in cases.iter().zip(means) {
                let _ = writeln!(out, "{name},{c},{m:e}");
            }
            let _ = writeln!(out, "{name},all,{total:e}");
        }
        if let Some(r) = self.ratio {
            let _ = writeln!(out, "calibrated/oi,all,{r:e}");
        }
        out
    }
}

/// Error curves and field statistics of every available model on every case.
pub fn cmd_evaluate(cfg: &PipelineConfig, out: &Path) -> Result<EvaluationSummary> {
    let eval = out.join("eval");
    create_dir(&eval)?;
    let mut trajectories = Vec::new();
    let mut names = Vec::new();
    for kind in ["train", "validation"] {
        let loads = if kind == "train" {
            &cfg.train_loads
        } else {
            &cfg.validation_loads
        };
        for (t, &load) in load_cases(cfg, out, kind)?.into_iter().zip(loads) {
            trajectories.push(t);
            names.push(case_name(kind, load));
        }
    }
    let rows = cfg.statistics_rows();
    for (t, name) in trajectories.iter().zip(&names) {
        let stats = statistics_of(&t.states, &t.fields, Some(&rows))?;
        write(
            &eval.join(format!("stats_fom_{name}.csv")),
            &statistics_csv(&t.times, &stats),
        )?;
    }
    let mut summary = EvaluationSummary {
        models: Vec::new(),
        ratio: None,
    };
    for (label, file) in [("oi", OI_MODEL_FILE), ("calibrated", CALIBRATED_MODEL_FILE)] {
        let path = out.join(file);
        if !path.exists() {
            continue;
        }
        let model = load_rom(&path)?;
        let report = evaluate_model(&model, &trajectories, cfg.switch_off_window)?;
        for (i, (t, name)) in trajectories.iter().zip(&names).enumerate() {
            write(
                &eval.join(format!("errors_{label}_{name}.csv")),
                &report.trajectory_csv(i),
            )?;
            let reduced = model.project_states(&t.states)?;
            let sim = simulate_rom(
                &model,
                &reduced.column(0).into_owned(),
                &t.controls,
                reduced.ncols() - 1,
            )?;
            let stats = field_statistics(&model, &sim, Some(&rows))?;
            write(
                &eval.join(format!("stats_{label}_{name}.csv")),
                &statistics_csv(&t.times, &stats),
            )?;
        }
        summary.models.push((
            label.to_string(),
            names.clone(),
            report.trajectory_means(),
            report.mean_excluding_window(),
        ));
    }
    if summary.models.is_empty() {
        return Err(Error::Config(format!(
            "no model files in {}; run `train` first",
            out.display()
        )));
    }
    if summary.models.len() == 2 {
        summary.ratio = Some(summary.models[1].3 / summary.models[0].3);
    }
    write(&eval.join("summary.csv"), &summary.to_csv())?;
    Ok(summary)
}

/// Writes the model without its basis.
pub fn cmd_export(out: &Path, destination: &Path) -> Result<RomModel> {
    let source = [CALIBRATED_MODEL_FILE, OI_MODEL_FILE]
        .iter()
        .map(|f| out.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config(format!("no model files in {}; run `train` first", out.display())))?;
    let mut model = load_rom(&source)?;
    model.basis = None;
    save_rom(&model, destination)?;
    Ok(model)
}

/// Bundled reference model with r = s = 8.
pub const REFERENCE_MODEL: &str = include_str!("../fixtures/reactor_r8.rom");

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureReport {
    pub shapes: [(usize, usize); 3],
    /// (label, loaded value, expected value)
    pub spot_checks: Vec<(&'static str, f64, f64)>,
    pub steps: usize,
    pub all_finite: bool,
    pub max_abs_state: f64,
    pub min_sample_temperature: f64,
    pub max_sample_temperature: f64,
}

impl FixtureReport {
    pub fn passed(&self) -> bool {
        self.shapes.iter().all(|s| *s == (8, 8))
            && self
                .spot_checks
                .iter()
                .all(|(_, got, want)| (got - want).abs() <= 1e-12 * want.abs().max(1.0))
            && self.all_finite
    }
}

/// Loads the reference model (bundled copy unless `path` is given), checks
/// shapes and entries, and simulates the heating scenario with `s0 = 0`.
pub fn cmd_fixture_check(path: Option<&Path>, cfg: &PipelineConfig) -> Result<FixtureReport> {
    let model = match path {
        Some(p) => load_rom(p)?,
        None => parse_rom(REFERENCE_MODEL, "<bundled reactor_r8.rom>")?,
    };
    let ops = &model.operators;
    let spot_checks = vec![
        ("P1[1,1]", model.deim.p1[(0, 0)], -0.840),
        ("P2[1,1]", model.deim.p2[(0, 0)], -0.00588),
        ("A[1,1]", ops.a[(0, 0)], -3.3e-6),
        ("P1[2,3]", model.deim.p1[(1, 2)], 29.940),
    ];
    let steps = (cfg.fom.t_end / model.dt).round() as usize;
    let controls: Vec<_> = (0..steps)
        .map(|j| {
            crate::fom::Control::new(
                if (j as f64) * model.dt < cfg.switch_off_time {
                    1.0
                } else {
                    0.0
                },
                0.0,
            )
        })
        .collect();
    let s0 = DVector::zeros(model.rank());
    let sim = simulate_rom(&model, &s0, &controls, steps);
    let (all_finite, max_abs_state, lo, hi) = match &sim {
        Ok(traj) => {
            let temps: Vec<f64> = traj
                .column_iter()
                .flat_map(|c| model.deim.sampled_temperatures(&c.into_owned()).data.as_vec().clone())
                .collect();
            (
                traj.iter().all(|v| v.is_finite()),
                traj.amax(),
                temps.iter().copied().fold(f64::INFINITY, f64::min),
                temps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        }
        Err(e) => {
            log::warn!("reference model simulation failed: {e}");
            (false, f64::NAN, f64::NAN, f64::NAN)
        }
    };
    Ok(FixtureReport {
        shapes: [ops.a.shape(), model.deim.p1.shape(), model.deim.p2.shape()],
        spot_checks,
        steps,
        all_finite,
        max_abs_state,
        min_sample_temperature: lo,
        max_sample_temperature: hi,
    })
}
