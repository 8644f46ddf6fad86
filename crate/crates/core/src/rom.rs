//! Reduced model container: simulation, error metrics, field statistics and
//! the text file format.
//!
//! ```text
//! [meta]     version, r, s, p, dt
//! [A] [H] [B]        operator rows (H and B may be omitted: zero)
//! [deim] [P1] [P2]   see the deim module
//! [scaling]  fields = name:start:end ..., shift = ..., scale = ...   (optional)
//! [basis]    n = ..., singular_values = ..., n rows of r values      (optional)
//! ```
//!
//! Any matrix section may carry `scale = <factor>`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::calibrate::forward_rollout;
use crate::deim::DeimOperators;
use crate::fom::{Control, FomTrajectory};
use crate::opinf::{sym_kron_len, RomOperators, INPUT_CHANNELS};
use crate::pod::PodBasis;
use crate::sections::{join, join_exp, write_matrix, SectionFile};
use crate::snapshots::{FieldRange, ScalingSpec};
use crate::{Error, Result};

pub const ROM_FORMAT_VERSION: u32 = 1;

/// Default number of steps excluded around a heat-load discontinuity.
pub const SWITCH_OFF_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct RomModel {
    pub operators: RomOperators,
    pub deim: DeimOperators,
    /// Omitted in compact exports.
    pub basis: Option<PodBasis>,
    pub scaling: Option<ScalingSpec>,
    pub dt: f64,
}

impl RomModel {
    pub fn rank(&self) -> usize {
        self.operators.r()
    }

    pub fn validate(&self) -> Result<()> {
        self.operators.validate()?;
        let r = self.rank();
        if self.deim.rank() != r || self.deim.p2.ncols() != r {
            return Err(Error::Dimension(format!(
                "DEIM operators are {}x{} / {}x{}, model rank {r}",
                self.deim.p1.nrows(),
                self.deim.p1.ncols(),
                self.deim.p2.nrows(),
                self.deim.p2.ncols()
            )));
        }
        if let Some(b) = &self.basis {
            if b.rank != r {
                return Err(Error::Dimension(format!(
                    "basis rank {} differs from model rank {r}",
                    b.rank
                )));
            }
            if let Some(sc) = &self.scaling {
                if sc.dim() != b.state_dim() {
                    return Err(Error::Dimension("scaling and basis dimensions differ".into()));
                }
            }
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!(
                "model time step must be positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }

    fn require_basis(&self) -> Result<&PodBasis> {
        self.basis
            .as_ref()
            .ok_or_else(|| Error::Config("this operation needs the POD basis, which the model file omits".into()))
    }

    /// Scaled, projected reduced coordinates of full states.
    pub fn project_states(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let basis = self.require_basis()?;
        match &self.scaling {
            Some(sc) => {
                if sc.dim() != states.nrows() {
                    return Err(Error::Dimension(format!(
                        "states have {} rows, model expects {}",
                        states.nrows(),
                        sc.dim()
                    )));
                }
                basis.project(&sc.scale_states(states))
            }
            None => basis.project(states),
        }
    }

    /// Lifted states in physical units.
    pub fn lift_states(&self, reduced: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let lifted = self.require_basis()?.lift(reduced)?;
        Ok(match &self.scaling {
            Some(sc) => sc.unscale_states(&lifted),
            None => lifted,
        })
    }
}

/// Explicit Euler simulation; the same code path as calibration rollouts.
pub fn simulate_rom(model: &RomModel, s0: &DVector<f64>, controls: &[Control], k: usize) -> Result<DMatrix<f64>> {
    forward_rollout(&model.operators, Some(&model.deim), s0, controls, model.dt, k)
}

/// `|sim_j - ref_j|^2 / |ref_j|^2` per column (0 where both vanish,
/// infinite where only the reference does).
pub fn relative_errors(sim: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Vec<f64>> {
    if sim.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "simulated {:?} and reference {:?} trajectories differ in shape",
            sim.shape(),
            reference.shape()
        )));
    }
    Ok(sim
        .column_iter()
        .zip(reference.column_iter())
        .map(|(s, r)| {
            let num = (s - r).norm_squared();
            let den = r.norm_squared();
            if num == 0.0 {
                0.0
            } else {
                num / den
            }
        })
        .collect())
}

/// Marks states within `window` steps centred on each heat-load change.
/// A change between controls `c - 1` and `c` centres the window on state `c`.
pub fn switch_off_window(controls: &[Control], len: usize, window: usize) -> Vec<bool> {
    let mut flags = vec![false; len];
    if window == 0 {
        return flags;
    }
    let before = (window - 1) / 2;
    let after = window - 1 - before;
    for c in 1..controls.len() {
        if controls[c].heat_load != controls[c - 1].heat_load {
            let lo = c.saturating_sub(before);
            let hi = (c + after).min(len.saturating_sub(1));
            for f in flags.iter_mut().take(hi + 1).skip(lo) {
                *f = true;
            }
        }
    }
    flags
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Per trajectory, per step.
    pub errors: Vec<Vec<f64>>,
    pub times: Vec<Vec<f64>>,
    pub in_window: Vec<Vec<bool>>,
}

impl ErrorReport {
    pub fn merge(reports: &[ErrorReport]) -> ErrorReport {
        let mut out = ErrorReport {
            errors: Vec::new(),
            times: Vec::new(),
            in_window: Vec::new(),
        };
        for r in reports {
            out.errors.extend(r.errors.iter().cloned());
            out.times.extend(r.times.iter().cloned());
            out.in_window.extend(r.in_window.iter().cloned());
        }
        out
    }

    /// Mean over all steps of all trajectories outside the switch-off window.
    pub fn mean_excluding_window(&self) -> f64 {
        mean(self.flat().filter(|(_, w)| !w).map(|(e, _)| e))
    }

    pub fn mean_all(&self) -> f64 {
        mean(self.flat().map(|(e, _)| e))
    }

    pub fn trajectory_means(&self) -> Vec<f64> {
        self.errors
            .iter()
            .zip(&self.in_window)
            .map(|(e, w)| mean(e.iter().zip(w).filter(|(_, w)| !**w).map(|(e, _)| *e)))
            .collect()
    }

    fn flat(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        self.errors
            .iter()
            .zip(&self.in_window)
            .flat_map(|(e, w)| e.iter().copied().zip(w.iter().copied()))
    }

    /// `step,time,relative_error,switch_off_window` for one trajectory.
    pub fn trajectory_csv(&self, i: usize) -> String {
        let mut out = String::from("step,time,relative_error,switch_off_window\n");
        for (j, ((e, t), w)) in self.errors[i]
            .iter()
            .zip(&self.times[i])
            .zip(&self.in_window[i])
            .enumerate()
        {
            let _ = writeln!(out, "{j},{t},{e:e},{}", u8::from(*w));
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Simulates from the projected initial state and compares against the
/// projected trajectory step by step.
pub fn rom_vs_projected_error(model: &RomModel, fom: &FomTrajectory, window: usize) -> Result<ErrorReport> {
    let reference = model.project_states(&fom.states)?;
    let k = reference.ncols();
    if k < 2 {
        return Err(Error::Config("trajectory needs at least two states".into()));
    }
    let sim = simulate_rom(model, &reference.column(0).into_owned(), &fom.controls, k - 1)?;
    Ok(ErrorReport {
        errors: vec![relative_errors(&sim, &reference)?],
        times: vec![fom.times.clone()],
        in_window: vec![switch_off_window(&fom.controls, k, window)],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldStatistics {
    pub name: String,
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
}

/// Per-step min/mean/max of each field block of the lifted physical state.
/// `row_filter` (length n) drops rows from the statistics, e.g. solid rows
/// outside the solid mask.
pub fn field_statistics(
    model: &RomModel,
    reduced: &DMatrix<f64>,
    row_filter: Option<&[bool]>,
) -> Result<Vec<FieldStatistics>> {
    let lifted = model.lift_states(reduced)?;
    let fields = match &model.scaling {
        Some(sc) => sc.fields.clone(),
        None => vec![FieldRange::new("state", 0, lifted.nrows())],
    };
    statistics_of(&lifted, &fields, row_filter)
}

/// Statistics of full physical states (also the oracle for lifted ones).
pub fn statistics_of(
    states: &DMatrix<f64>,
    fields: &[FieldRange],
    row_filter: Option<&[bool]>,
) -> Result<Vec<FieldStatistics>> {
    if let Some(f) = row_filter {
        if f.len() != states.nrows() {
            return Err(Error::Dimension(format!(
                "row filter has {} entries, states have {} rows",
                f.len(),
                states.nrows()
            )));
        }
    }
    let mut out = Vec::new();
    for field in fields {
        let rows: Vec<usize> = field.rows().filter(|&i| row_filter.map_or(true, |f| f[i])).collect();
        if rows.is_empty() {
            return Err(Error::Config(format!(
                "field `{}` has no rows left for statistics",
                field.name
            )));
        }
        let mut st = FieldStatistics {
            name: field.name.clone(),
            min: Vec::with_capacity(states.ncols()),
            mean: Vec::with_capacity(states.ncols()),
            max: Vec::with_capacity(states.ncols()),
        };
        for col in states.column_iter() {
            let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for &i in &rows {
                lo = lo.min(col[i]);
                hi = hi.max(col[i]);
                sum += col[i];
            }
            st.min.push(lo);
            st.max.push(hi);
            st.mean.push((sum / rows.len() as f64).clamp(lo, hi));
        }
        out.push(st);
    }
    Ok(out)
}

/// `step,time,<field>_min,<field>_mean,<field>_max,...`
pub fn statistics_csv(times: &[f64], stats: &[FieldStatistics]) -> String {
    let mut out = String::from("step,time");
    for s in stats {
        let _ = write!(out, ",{0}_min,{0}_mean,{0}_max", s.name);
    }
    out.push('\n');
    for (j, t) in times.iter().enumerate() {
        let _ = write!(out, "{j},{t}");
        for s in stats {
            let _ = write!(out, ",{:e},{:e},{:e}", s.min[j], s.mean[j], s.max[j]);
        }
        out.push('\n');
    }
    out
}

pub fn save_rom(model: &RomModel, path: impl AsRef<Path>) -> Result<()> {
    model.validate()?;
    let path = path.as_ref();
    let mut out = String::from("# romcal reduced model\n[meta]\n");
    let ops = &model.operators;
    let _ = writeln!(out, "version = {ROM_FORMAT_VERSION}");
    let _ = writeln!(out, "r = {}", ops.r());
    let _ = writeln!(out, "s = {}", model.deim.samples());
    let _ = writeln!(out, "p = {}", ops.p());
    let _ = writeln!(out, "dt = {:e}", model.dt);
    write_matrix(&mut out, "A", &ops.a);
    write_matrix(&mut out, "H", &ops.h);
    write_matrix(&mut out, "B", &ops.b);
    model.deim.write_sections(&mut out);
    if let Some(sc) = &model.scaling {
        out.push_str("[scaling]\n");
        let fields: Vec<String> = sc
            .fields
            .iter()
            .map(|f| format!("{}:{}:{}", f.name, f.start, f.end))
            .collect();
        let _ = writeln!(out, "fields = {}", fields.join(" "));
        let _ = writeln!(out, "shift = {}", join_exp(sc.shift.iter()));
        let _ = writeln!(out, "scale = {}", join_exp(sc.scale.iter()));
    }
    if let Some(b) = &model.basis {
        out.push_str("[basis]\n");
        let _ = writeln!(out, "n = {}", b.state_dim());
        let _ = writeln!(out, "singular_values = {}", join_exp(b.singular_values.iter()));
        for row in b.basis.row_iter() {
            let _ = writeln!(out, "{}", join(row.iter().map(|v| format!("{v:e}"))));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_rom(path: impl AsRef<Path>) -> Result<RomModel> {
    from_file(SectionFile::read(path)?)
}

/// Parses model text; `origin` labels error messages.
pub fn parse_rom(text: &str, origin: impl Into<std::path::PathBuf>) -> Result<RomModel> {
    from_file(SectionFile::parse(origin, text)?)
}

fn from_file(file: SectionFile) -> Result<RomModel> {
    let meta = file.section("meta")?;
    let version: u32 = file.value(meta, "version")?;
    if version != ROM_FORMAT_VERSION {
        let (line, _) = file.raw(meta, "version")?;
        return Err(file.err(
            line,
            format!("unsupported model file version {version}, this build reads version {ROM_FORMAT_VERSION}"),
        ));
    }
    let r: usize = file.value(meta, "r")?;
    let s: usize = file.value(meta, "s")?;
    let p: usize = file.value(meta, "p")?;
    if p != INPUT_CHANNELS {
        return Err(file.err(
            meta.line,
            format!("p = {p}, but models carry {INPUT_CHANNELS} input channel"),
        ));
    }
    let dt: f64 = file.value(meta, "dt")?;
    let q = sym_kron_len(r);
    let optional_matrix = |name: &str, cols: usize| match file.optional(name) {
        Some(sec) => file.matrix(sec, r, cols),
        None => Ok(DMatrix::zeros(r, cols)),
    };
    let operators = RomOperators {
        a: file.matrix(file.section("A")?, r, r)?,
        h: optional_matrix("H", q)?,
        b: optional_matrix("B", p)?,
    };
    let deim = DeimOperators::from_sections(&file, r)?;
    if deim.samples() != s {
        return Err(file.err(
            meta.line,
            format!("[meta] s = {s} but [deim] holds {} samples", deim.samples()),
        ));
    }
    let scaling = match file.optional("scaling") {
        Some(sec) => {
            let specs: Vec<String> = file.list(sec, "fields")?;
            let mut fields = Vec::new();
            for spec in &specs {
                let parts: Vec<&str> = spec.split(':').collect();
                let parsed = match parts.as_slice() {
                    [name, a, b] => a
                        .parse()
                        .ok()
                        .zip(b.parse().ok())
                        .map(|(a, b)| FieldRange::new(*name, a, b)),
                    _ => None,
                };
                fields.push(
                    parsed.ok_or_else(|| file.err(sec.line, format!("bad field `{spec}`, expected name:start:end")))?,
                );
            }
            let spec = ScalingSpec::new(fields, file.list(sec, "shift")?, file.list(sec, "scale")?)
                .map_err(|e| file.err(sec.line, e.to_string()))?;
            Some(spec)
        }
        None => None,
    };
    let basis = match file.optional("basis") {
        Some(sec) => {
            let n: usize = file.value(sec, "n")?;
            Some(PodBasis {
                basis: file.matrix(sec, n, r)?,
                singular_values: file.list(sec, "singular_values")?,
                rank: r,
                scaling: scaling.clone(),
            })
        }
        None => None,
    };
    let model = RomModel {
        operators,
        deim,
        basis,
        scaling,
        dt,
    };
    model.validate().map_err(|e| file.err(meta.line, e.to_string()))?;
    Ok(model)
}
