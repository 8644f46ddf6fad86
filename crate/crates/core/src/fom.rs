//! One-dimensional two-field reactor model used as the full-order model.
//!
//! The coolant temperature `T_c` is advected with a constant velocity and
//! diffuses; the solid temperature `T_s` only diffuses. Inside the solid
//! region both fields exchange heat volumetrically, and the solid is heated
//! by an Arrhenius-type source `R(t) * prefactor * exp(exponent / T_s)`.
//!
//! The grid is cell centred with `grid_points` cells per field. The state
//! vector is `[T_c; T_s]`, length `2 * grid_points`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::kv::KvFile;
use crate::snapshots::FieldRange;
use crate::{Error, Result};

/// Safety factor applied to the explicit-Euler stability limit.
pub const STABILITY_FACTOR: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct FomConfig {
    pub grid_points: usize,
    /// m
    pub domain_length: f64,
    /// m/s, constant in time
    pub coolant_velocity: f64,
    /// J/(m^3 K)
    pub rho_cp_coolant: f64,
    /// J/(m^3 K)
    pub rho_cp_solid: f64,
    /// W/(m K)
    pub conductivity_coolant: f64,
    /// W/(m K)
    pub conductivity_solid: f64,
    /// Volumetric exchange coefficient h*A, W/(m^3 K).
    pub exchange_coefficient: f64,
    /// One entry per cell; `true` where the cell belongs to the solid region.
    pub solid_mask: Vec<bool>,
    /// Power density per unit heat load.
    pub arrhenius_prefactor: f64,
    /// K
    pub arrhenius_exponent: f64,
    /// K
    pub inflow_temperature: f64,
    /// K
    pub initial_temperature: f64,
    /// s
    pub dt: f64,
    /// s
    pub t_end: f64,
}

impl Default for FomConfig {
    fn default() -> Self {
        let grid_points = 200;
        Self {
            grid_points,
            domain_length: 5.0,
            coolant_velocity: 0.01,
            rho_cp_coolant: 723.0 * 2590.0,
            rho_cp_solid: 3062.0 * 2000.0,
            conductivity_coolant: 0.132,
            conductivity_solid: 0.2,
            exchange_coefficient: 2000.0,
            solid_mask: mask_from_fraction(grid_points, 0.1, 0.9),
            arrhenius_prefactor: 5000.0,
            arrhenius_exponent: 1500.0,
            inflow_temperature: 533.15,
            initial_temperature: 533.15,
            dt: 1.0,
            t_end: 72_000.0,
        }
    }
}

/// Cells whose centres lie in `[start, end)` (fractions of the domain).
pub fn mask_from_fraction(grid_points: usize, start: f64, end: f64) -> Vec<bool> {
    (0..grid_points)
        .map(|i| {
            let x = (i as f64 + 0.5) / grid_points as f64;
            x >= start && x < end
        })
        .collect()
}

impl FomConfig {
    pub fn state_dim(&self) -> usize {
        2 * self.grid_points
    }

    pub fn dx(&self) -> f64 {
        self.domain_length / self.grid_points as f64
    }

    /// `[T_c, T_s]` layout of the state vector.
    pub fn fields(&self) -> Vec<FieldRange> {
        let n = self.grid_points;
        vec![FieldRange::new("T_c", 0, n), FieldRange::new("T_s", n, 2 * n)]
    }

    /// Largest admissible explicit time step.
    pub fn stability_limit(&self) -> f64 {
        let dx = self.dx();
        let mut limit = f64::INFINITY;
        if self.coolant_velocity > 0.0 {
            limit = limit.min(dx / self.coolant_velocity);
        }
        for (rho_cp, k) in [
            (self.rho_cp_coolant, self.conductivity_coolant),
            (self.rho_cp_solid, self.conductivity_solid),
        ] {
            if k > 0.0 {
                limit = limit.min(dx * dx * rho_cp / (2.0 * k));
            }
        }
        STABILITY_FACTOR * limit
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.grid_points < 3 {
            return fail(format!("grid_points must be >= 3, got {}", self.grid_points));
        }
        if self.solid_mask.len() != self.grid_points {
            return fail(format!(
                "solid_mask has {} entries, expected {}",
                self.solid_mask.len(),
                self.grid_points
            ));
        }
        for (name, v) in [
            ("domain_length", self.domain_length),
            ("rho_cp_coolant", self.rho_cp_coolant),
            ("rho_cp_solid", self.rho_cp_solid),
            ("dt", self.dt),
            ("t_end", self.t_end),
            ("inflow_temperature", self.inflow_temperature),
            ("initial_temperature", self.initial_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        for (name, v) in [
            ("coolant_velocity", self.coolant_velocity),
            ("conductivity_coolant", self.conductivity_coolant),
            ("conductivity_solid", self.conductivity_solid),
            ("exchange_coefficient", self.exchange_coefficient),
            ("arrhenius_prefactor", self.arrhenius_prefactor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        if !self.arrhenius_exponent.is_finite() {
            return fail("arrhenius_exponent must be finite".into());
        }
        let limit = self.stability_limit();
        if self.dt > limit {
            return fail(format!(
                "dt = {} s violates the explicit stability bound {:.6} s \
                 (0.4 * min(dx/v, dx^2 rho c_p / (2 K)) with dx = {} m)",
                self.dt,
                limit,
                self.dx()
            ));
        }
        Ok(())
    }

    /// Per-row weights turning a pointwise power density into temperature
    /// rates of the full state: `mask / (rho c_p)` on the solid block, zero
    /// elsewhere.
    pub fn source_model(&self) -> SourceModel {
        let n = self.grid_points;
        let mut weights = DVector::zeros(2 * n);
        for (i, &solid) in self.solid_mask.iter().enumerate() {
            if solid {
                weights[n + i] = 1.0 / self.rho_cp_solid;
            }
        }
        SourceModel {
            prefactor: self.arrhenius_prefactor,
            exponent: self.arrhenius_exponent,
            rate_weights: weights,
        }
    }

    /// Reads a scenario file: every `FomConfig` field as `key = value`, plus
    /// `heat_load = t0:R0, t1:R1, ...` breakpoints. `solid_mask` accepts
    /// `all`, a fractional interval `a..b`, or one `0`/`1` digit per cell.
    pub fn read_scenario(path: impl AsRef<Path>) -> Result<(FomConfig, ControlSignal)> {
        let kv = KvFile::read(path)?;
        Self::from_kv(&kv)
    }

    pub fn from_kv(kv: &KvFile) -> Result<(FomConfig, ControlSignal)> {
        let d = FomConfig::default();
        let grid_points = kv.get_or("grid_points", d.grid_points)?;
        let solid_mask = match kv.raw("solid_mask") {
            None => mask_from_fraction(grid_points, 0.1, 0.9),
            Some(v) => {
                parse_mask(v, grid_points).map_err(|msg| Error::parse(kv.path(), kv.line_of("solid_mask"), msg))?
            }
        };
        let cfg = FomConfig {
            grid_points,
            domain_length: kv.get_or("domain_length", d.domain_length)?,
            coolant_velocity: kv.get_or("coolant_velocity", d.coolant_velocity)?,
            rho_cp_coolant: kv.get_or("rho_cp_coolant", d.rho_cp_coolant)?,
            rho_cp_solid: kv.get_or("rho_cp_solid", d.rho_cp_solid)?,
            conductivity_coolant: kv.get_or("conductivity_coolant", d.conductivity_coolant)?,
            conductivity_solid: kv.get_or("conductivity_solid", d.conductivity_solid)?,
            exchange_coefficient: kv.get_or("exchange_coefficient", d.exchange_coefficient)?,
            solid_mask,
            arrhenius_prefactor: kv.get_or("arrhenius_prefactor", d.arrhenius_prefactor)?,
            arrhenius_exponent: kv.get_or("arrhenius_exponent", d.arrhenius_exponent)?,
            inflow_temperature: kv.get_or("inflow_temperature", d.inflow_temperature)?,
            initial_temperature: kv.get_or("initial_temperature", d.initial_temperature)?,
            dt: kv.get_or("dt", d.dt)?,
            t_end: kv.get_or("t_end", d.t_end)?,
        };
        cfg.validate()?;
        let signal = match kv.raw("heat_load") {
            None => ControlSignal::constant(0.0),
            Some(v) => ControlSignal::parse(v).map_err(|msg| Error::parse(kv.path(), kv.line_of("heat_load"), msg))?,
        };
        Ok((cfg, signal))
    }
}

fn parse_mask(value: &str, grid_points: usize) -> std::result::Result<Vec<bool>, String> {
    let value = value.trim();
    if value == "all" {
        return Ok(vec![true; grid_points]);
    }
    if let Some((a, b)) = value.split_once("..") {
        let a: f64 = a.trim().parse().map_err(|_| format!("bad mask interval `{value}`"))?;
        let b: f64 = b.trim().parse().map_err(|_| format!("bad mask interval `{value}`"))?;
        return Ok(mask_from_fraction(grid_points, a, b));
    }
    if value.len() != grid_points {
        return Err(format!("mask has {} digits, expected {grid_points}", value.len()));
    }
    value
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(format!("mask must be 0/1 valued, found `{other}`")),
        })
        .collect()
}

/// How the Arrhenius power density enters the (unscaled) state rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub prefactor: f64,
    pub exponent: f64,
    /// Length n; zero on rows without a source.
    pub rate_weights: DVector<f64>,
}

/// Control input at one instant: heat load `R` and inflow-rate derivative.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Control {
    pub heat_load: f64,
    pub inflow_rate_derivative: f64,
}

impl Control {
    pub fn new(heat_load: f64, inflow_rate_derivative: f64) -> Self {
        Self {
            heat_load,
            inflow_rate_derivative,
        }
    }
}

/// Piecewise-constant heat load; the inflow rate is held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    /// `(time, R)` pairs; `R` holds from its time until the next breakpoint.
    breakpoints: Vec<(f64, f64)>,
    pub inflow_rate_derivative: f64,
}

impl ControlSignal {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(Error::Config("heat load needs at least one breakpoint".into()));
        }
        for w in breakpoints.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Config(format!(
                    "heat load breakpoints must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(t, r)) = breakpoints.iter().find(|(t, r)| !(*r >= 0.0) || !t.is_finite()) {
            return Err(Error::Config(format!("invalid heat load {r} at t = {t}")));
        }
        Ok(Self {
            breakpoints,
            inflow_rate_derivative: 0.0,
        })
    }

    pub fn constant(heat_load: f64) -> Self {
        Self::new(vec![(0.0, heat_load)]).expect("constant non-negative load")
    }

    /// Constant load `heat_load` until `switch_off`, zero afterwards.
    pub fn switch_off(heat_load: f64, switch_off: f64) -> Result<Self> {
        Self::new(vec![(0.0, heat_load), (switch_off, 0.0)])
    }

    /// Parses `t0:R0, t1:R1, ...`.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut points = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (t, r) = item
                .split_once(':')
                .ok_or_else(|| format!("breakpoint `{item}` is not `time:load`"))?;
            let t: f64 = t.trim().parse().map_err(|_| format!("bad time in `{item}`"))?;
            let r: f64 = r.trim().parse().map_err(|_| format!("bad load in `{item}`"))?;
            points.push((t, r));
        }
        Self::new(points).map_err(|e| e.to_string())
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    /// Times at which the load changes value.
    pub fn discontinuities(&self) -> Vec<f64> {
        self.breakpoints
            .windows(2)
            .filter(|w| w[0].1 != w[1].1)
            .map(|w| w[1].0)
            .collect()
    }

    pub fn heat_load(&self, t: f64) -> f64 {
        let mut value = 0.0;
        for &(start, r) in &self.breakpoints {
            if t >= start {
                value = r;
            } else {
                break;
            }
        }
        value
    }

    pub fn at(&self, t: f64) -> Control {
        Control::new(self.heat_load(t), self.inflow_rate_derivative)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FomTrajectory {
    pub times: Vec<f64>,
    /// n x k
    pub states: DMatrix<f64>,
    /// n x k, exact right-hand sides at the saved states
    pub derivatives: DMatrix<f64>,
    pub controls: Vec<Control>,
    pub fields: Vec<FieldRange>,
}

/// `R * prefactor * exp(exponent / T)`.
pub fn arrhenius_source(t_solid: f64, heat_load: f64, cfg: &FomConfig) -> Result<f64> {
    arrhenius(t_solid, heat_load, cfg.arrhenius_prefactor, cfg.arrhenius_exponent)
}

pub(crate) fn arrhenius(t: f64, heat_load: f64, prefactor: f64, exponent: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!(
            "Arrhenius law needs a positive temperature, got {t} K"
        )));
    }
    Ok(heat_load * prefactor * (exponent / t).exp())
}

/// Spatially discretized right-hand side.
pub fn fom_rhs(state: &DVector<f64>, control: Control, cfg: &FomConfig) -> Result<DVector<f64>> {
    let n = cfg.grid_points;
    if state.len() != 2 * n {
        return Err(Error::Dimension(format!(
            "state has length {}, expected 2 * {} = {}",
            state.len(),
            n,
            2 * n
        )));
    }
    let dx = cfg.dx();
    let inv_dx2 = 1.0 / (dx * dx);
    let t_in = cfg.inflow_temperature;
    let tc = state.rows(0, n);
    let ts = state.rows(n, n);
    let mut out = DVector::zeros(2 * n);

    for i in 0..n {
        // inlet ghost carries the inflow temperature, outlet is zero-gradient
        let left = if i == 0 { t_in } else { tc[i - 1] };
        let right = if i + 1 == n { tc[i] } else { tc[i + 1] };
        let advection = -cfg.coolant_velocity * (tc[i] - left) / dx;
        let diffusion = cfg.conductivity_coolant * (left - 2.0 * tc[i] + right) * inv_dx2;
        let exchange = if cfg.solid_mask[i] {
            cfg.exchange_coefficient * (ts[i] - tc[i])
        } else {
            0.0
        };
        out[i] = advection + (diffusion + exchange) / cfg.rho_cp_coolant;
    }
    for i in 0..n {
        let left = if i == 0 { ts[i] } else { ts[i - 1] };
        let right = if i + 1 == n { ts[i] } else { ts[i + 1] };
        let diffusion = cfg.conductivity_solid * (left - 2.0 * ts[i] + right) * inv_dx2;
        let (exchange, source) = if cfg.solid_mask[i] {
            (
                cfg.exchange_coefficient * (ts[i] - tc[i]),
                arrhenius_source(ts[i], control.heat_load, cfg)?,
            )
        } else {
            (0.0, 0.0)
        };
        out[n + i] = (diffusion - exchange + source) / cfg.rho_cp_solid;
    }
    Ok(out)
}

/// Explicit-Euler integration from the uniform initial state, storing every
/// `save_every`-th state with its exact right-hand side.
pub fn fom_integrate(cfg: &FomConfig, signal: &ControlSignal, save_every: usize) -> Result<FomTrajectory> {
    cfg.validate()?;
    if save_every == 0 {
        return Err(Error::Config("save_every must be >= 1".into()));
    }
    let n = cfg.state_dim();
    let steps = (cfg.t_end / cfg.dt + 1e-9).floor() as usize;
    let saved = steps / save_every + 1;
    let save_dt = cfg.dt * save_every as f64;

    let mut states = DMatrix::zeros(n, saved);
    let mut derivatives = DMatrix::zeros(n, saved);
    let mut times = Vec::with_capacity(saved);
    let mut controls = Vec::with_capacity(saved);

    let mut x = DVector::from_element(n, cfg.initial_temperature);
    for step in 0..=steps {
        let t = step as f64 * cfg.dt;
        let u = signal.at(t);
        let f = fom_rhs(&x, u, cfg)?;
        if step % save_every == 0 {
            let j = step / save_every;
            states.set_column(j, &x);
            derivatives.set_column(j, &f);
            times.push(j as f64 * save_dt);
            controls.push(u);
        }
        if step == steps {
            break;
        }
        x.axpy(cfg.dt, &f, 1.0);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite full-order state at step {}",
                step + 1
            )));
        }
    }
    Ok(FomTrajectory {
        times,
        states,
        derivatives,
        controls,
        fields: cfg.fields(),
    })
}
