//! Global snapshot matrix: trajectories stacked column-wise, trajectory-major
//! then time-major, with the control input of every column.

use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::fom::{Control, FomTrajectory};
use crate::{Error, Result};

/// Smallest admissible block standard deviation.
pub const SCALE_FLOOR: f64 = 1e-12;

/// Named contiguous block of state rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl FieldRange {
    pub fn new(name: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            name: name.into(),
            start,
            end,
        }
    }

    pub fn rows(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

fn check_partition(fields: &[FieldRange], n: usize) -> Result<()> {
    let mut next = 0;
    for f in fields {
        if f.start != next || f.end <= f.start {
            return Err(Error::Dimension(format!(
                "field `{}` [{}, {}) does not continue the partition at row {next}",
                f.name, f.start, f.end
            )));
        }
        next = f.end;
    }
    if next != n {
        return Err(Error::Dimension(format!("fields cover {next} rows, state has {n}")));
    }
    Ok(())
}

/// Per-field affine standardization `x_scaled = (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSpec {
    pub fields: Vec<FieldRange>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ScalingSpec {
    pub fn new(fields: Vec<FieldRange>, shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != fields.len() || scale.len() != fields.len() {
            return Err(Error::Dimension("one shift and scale per field required".into()));
        }
        let n = fields.last().map(|f| f.end).unwrap_or(0);
        check_partition(&fields, n)?;
        if let Some(s) = scale.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Config(format!("scale entries must be positive, got {s}")));
        }
        Ok(Self { fields, shift, scale })
    }

    pub fn dim(&self) -> usize {
        self.fields.last().map(|f| f.end).unwrap_or(0)
    }

    /// Expanded per-row shift vector.
    pub fn row_shift(&self) -> DVector<f64> {
        self.expand(&self.shift)
    }

    /// Expanded per-row scale vector.
    pub fn row_scale(&self) -> DVector<f64> {
        self.expand(&self.scale)
    }

    fn expand(&self, values: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (f, &v) in self.fields.iter().zip(values) {
            out.rows_mut(f.start, f.len()).fill(v);
        }
        out
    }

    pub fn scale_states(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (shift, scale) = (self.row_shift(), self.row_scale());
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - shift[i]) / scale[i])
    }

    pub fn unscale_states(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (shift, scale) = (self.row_shift(), self.row_scale());
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * scale[i] + shift[i])
    }

    /// Rates carry no shift.
    pub fn scale_rates(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        let scale = self.row_scale();
        DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| d[(i, j)] / scale[i])
    }

    pub fn unscale_rates(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        let scale = self.row_scale();
        DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| d[(i, j)] * scale[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    /// n x m
    pub data: DMatrix<f64>,
    /// l + 1 column offsets, first 0, last m
    pub trajectory_offsets: Vec<usize>,
    pub times: Vec<Vec<f64>>,
    /// one per column
    pub controls: Vec<Control>,
    pub derivatives: Option<DMatrix<f64>>,
    pub fields: Vec<FieldRange>,
    /// Set when `data` holds scaled values.
    pub scaling: Option<ScalingSpec>,
}

impl SnapshotSet {
    pub fn state_dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_columns(&self) -> usize {
        self.data.ncols()
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectory_offsets.len() - 1
    }

    pub fn columns(&self, trajectory: usize) -> Range<usize> {
        self.trajectory_offsets[trajectory]..self.trajectory_offsets[trajectory + 1]
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.data.ncols();
        let offs = &self.trajectory_offsets;
        if offs.len() < 2 || offs[0] != 0 || *offs.last().unwrap() != m {
            return Err(Error::Dimension(format!("offsets {offs:?} do not span {m} columns")));
        }
        if offs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Dimension(format!("offsets {offs:?} not strictly increasing")));
        }
        if self.times.len() != offs.len() - 1 {
            return Err(Error::Dimension("one time vector per trajectory required".into()));
        }
        for (i, t) in self.times.iter().enumerate() {
            if t.len() != offs[i + 1] - offs[i] {
                return Err(Error::Dimension(format!("trajectory {i} has mismatched time count")));
            }
        }
        if self.controls.len() != m {
            return Err(Error::Dimension(format!(
                "{} controls for {m} columns",
                self.controls.len()
            )));
        }
        if let Some(d) = &self.derivatives {
            if d.shape() != self.data.shape() {
                return Err(Error::Dimension("derivatives must match the data shape".into()));
            }
        }
        check_partition(&self.fields, self.data.nrows())
    }

    /// Splits back into per-trajectory records. Derivatives must be present.
    pub fn split(&self) -> Result<Vec<FomTrajectory>> {
        let derivs = self
            .derivatives
            .as_ref()
            .ok_or_else(|| Error::Config("snapshot set has no derivatives to split".into()))?;
        Ok((0..self.num_trajectories())
            .map(|i| {
                let cols = self.columns(i);
                FomTrajectory {
                    times: self.times[i].clone(),
                    states: self.data.columns(cols.start, cols.len()).into_owned(),
                    derivatives: derivs.columns(cols.start, cols.len()).into_owned(),
                    controls: self.controls[cols].to_vec(),
                    fields: self.fields.clone(),
                }
            })
            .collect())
    }

    /// Keeps the listed trajectories, in the given order.
    pub fn select(&self, trajectories: &[usize]) -> Result<SnapshotSet> {
        let mut cols = Vec::new();
        let mut offsets = vec![0];
        let mut times = Vec::new();
        for &t in trajectories {
            if t >= self.num_trajectories() {
                return Err(Error::Dimension(format!("no trajectory {t}")));
            }
            cols.extend(self.columns(t));
            offsets.push(cols.len());
            times.push(self.times[t].clone());
        }
        Ok(SnapshotSet {
            data: self.data.select_columns(&cols),
            trajectory_offsets: offsets,
            times,
            controls: cols.iter().map(|&c| self.controls[c]).collect(),
            derivatives: self.derivatives.as_ref().map(|d| d.select_columns(&cols)),
            fields: self.fields.clone(),
            scaling: self.scaling.clone(),
        })
    }
}

/// Stacks trajectories column-wise in the given order.
pub fn assemble_snapshots(trajectories: &[FomTrajectory]) -> Result<SnapshotSet> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Config("no trajectories to assemble".into()))?;
    let n = first.states.nrows();
    let mut offsets = vec![0];
    for (i, t) in trajectories.iter().enumerate() {
        if t.states.nrows() != n || t.derivatives.nrows() != n {
            return Err(Error::Dimension(format!(
                "trajectory {i} has state dimension {}, expected {n}",
                t.states.nrows()
            )));
        }
        if t.states.ncols() == 0
            || t.derivatives.ncols() != t.states.ncols()
            || t.times.len() != t.states.ncols()
            || t.controls.len() != t.states.ncols()
        {
            return Err(Error::Dimension(format!(
                "trajectory {i} has inconsistent column counts"
            )));
        }
        if t.fields != first.fields {
            return Err(Error::Dimension(format!("trajectory {i} has a different field layout")));
        }
        offsets.push(offsets.last().unwrap() + t.states.ncols());
    }
    let m = *offsets.last().unwrap();
    let mut data = DMatrix::zeros(n, m);
    let mut derivatives = DMatrix::zeros(n, m);
    let mut controls = Vec::with_capacity(m);
    for (t, &start) in trajectories.iter().zip(&offsets) {
        data.columns_mut(start, t.states.ncols()).copy_from(&t.states);
        derivatives
            .columns_mut(start, t.states.ncols())
            .copy_from(&t.derivatives);
        controls.extend_from_slice(&t.controls);
    }
    let set = SnapshotSet {
        data,
        trajectory_offsets: offsets,
        times: trajectories.iter().map(|t| t.times.clone()).collect(),
        controls,
        derivatives: Some(derivatives),
        fields: first.fields.clone(),
        scaling: None,
    };
    set.validate()?;
    Ok(set)
}

/// Per-field mean and (floored) standard deviation of the data.
pub fn fit_scaling(set: &SnapshotSet) -> ScalingSpec {
    let m = set.data.ncols();
    let mut shift = Vec::with_capacity(set.fields.len());
    let mut scale = Vec::with_capacity(set.fields.len());
    for f in &set.fields {
        let block = set.data.view((f.start, 0), (f.len(), m));
        let count = block.len() as f64;
        let mean = block.sum() / count;
        let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        shift.push(mean);
        scale.push(var.sqrt().max(SCALE_FLOOR));
    }
    ScalingSpec {
        fields: set.fields.clone(),
        shift,
        scale,
    }
}

pub fn apply_scaling(set: &SnapshotSet, spec: &ScalingSpec) -> Result<SnapshotSet> {
    if set.scaling.is_some() {
        return Err(Error::Config("snapshot set is already scaled".into()));
    }
    if spec.dim() != set.state_dim() {
        return Err(Error::Dimension(format!(
            "scaling covers {} rows, snapshots have {}",
            spec.dim(),
            set.state_dim()
        )));
    }
    Ok(SnapshotSet {
        data: spec.scale_states(&set.data),
        derivatives: set.derivatives.as_ref().map(|d| spec.scale_rates(d)),
        scaling: Some(spec.clone()),
        ..set.clone()
    })
}

pub fn invert_scaling(set: &SnapshotSet) -> Result<SnapshotSet> {
    let spec = set
        .scaling
        .as_ref()
        .ok_or_else(|| Error::Config("snapshot set is not scaled".into()))?;
    Ok(SnapshotSet {
        data: spec.unscale_states(&set.data),
        derivatives: set.derivatives.as_ref().map(|d| spec.unscale_rates(d)),
        scaling: None,
        ..set.clone()
    })
}

fn uniform_step(times: &[f64], trajectory: usize) -> Result<f64> {
    let h = times[1] - times[0];
    if !(h > 0.0) {
        return Err(Error::Config(format!("trajectory {trajectory}: times not increasing")));
    }
    for (j, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * h.abs().max(w[1].abs()) {
            return Err(Error::Config(format!(
                "trajectory {trajectory}: non-uniform time step at column {} ({} vs {h})",
                j + 1,
                w[1] - w[0]
            )));
        }
    }
    Ok(h)
}

/// Second-order finite-difference time derivatives, per trajectory.
pub fn estimate_derivatives(set: &SnapshotSet) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(set.data.nrows(), set.data.ncols());
    for i in 0..set.num_trajectories() {
        let cols = set.columns(i);
        let k = cols.len();
        if k < 3 {
            return Err(Error::Config(format!(
                "trajectory {i} has {k} columns; derivative estimation needs at least 3"
            )));
        }
        let h = uniform_step(&set.times[i], i)?;
        let x = |j: usize| set.data.column(cols.start + j);
        for j in 0..k {
            let d = if j == 0 {
                (x(0) * -3.0 + x(1) * 4.0 - x(2)) / (2.0 * h)
            } else if j == k - 1 {
                (x(j) * 3.0 - x(j - 1) * 4.0 + x(j - 2)) / (2.0 * h)
            } else {
                (x(j + 1) - x(j - 1)) / (2.0 * h)
            };
            out.set_column(cols.start + j, &d);
        }
    }
    Ok(out)
}

fn write_row<'a>(buf: &mut String, values: impl Iterator<Item = &'a f64>) {
    buf.clear();
    for (i, v) in values.enumerate() {
        if i > 0 {
            buf.push(' ');
        }
        let _ = write!(buf, "{v:e}");
    }
    buf.push('\n');
}

/// Writes the text snapshot format. All trajectories must share one uniform
/// time step starting at t = 0.
pub fn save_snapshots(set: &SnapshotSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    set.validate()?;
    let dt = shared_step(set)?;
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let offsets: Vec<String> = set.trajectory_offsets.iter().map(|o| o.to_string()).collect();
    let fields: Vec<String> = set
        .fields
        .iter()
        .map(|f| format!("{}:{}:{}", f.name, f.start, f.end))
        .collect();
    writeln!(w, "n={}", set.state_dim()).map_err(io)?;
    writeln!(w, "m={}", set.num_columns()).map_err(io)?;
    writeln!(w, "l={}", set.num_trajectories()).map_err(io)?;
    writeln!(w, "offsets={}", offsets.join(",")).map_err(io)?;
    writeln!(w, "dt={dt:e}").map_err(io)?;
    writeln!(w, "fields={}", fields.join(",")).map_err(io)?;
    writeln!(w, "has_derivatives={}", u8::from(set.derivatives.is_some())).map_err(io)?;
    let mut buf = String::new();
    let mut section = |w: &mut BufWriter<std::fs::File>, name: &str, m: &DMatrix<f64>| -> Result<()> {
        writeln!(w, "{name}").map_err(io)?;
        for col in m.column_iter() {
            write_row(&mut buf, col.iter());
            w.write_all(buf.as_bytes()).map_err(io)?;
        }
        Ok(())
    };
    section(&mut w, "data", &set.data)?;
    if let Some(d) = &set.derivatives {
        section(&mut w, "derivatives", d)?;
    }
    writeln!(w, "controls").map_err(io)?;
    for c in &set.controls {
        writeln!(w, "{:e} {:e}", c.heat_load, c.inflow_rate_derivative).map_err(io)?;
    }
    if let Some(s) = &set.scaling {
        writeln!(w, "scaling").map_err(io)?;
        for ((f, shift), scale) in s.fields.iter().zip(&s.shift).zip(&s.scale) {
            writeln!(w, "{} {shift:e} {scale:e}", f.name).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn shared_step(set: &SnapshotSet) -> Result<f64> {
    let mut dt = None;
    for (i, t) in set.times.iter().enumerate() {
        if t.len() < 2 {
            continue;
        }
        let h = uniform_step(t, i)?;
        match dt {
            None => dt = Some(h),
            Some(d) if (d - h).abs() > 1e-12 * d => {
                return Err(Error::Config(format!("trajectory {i} uses step {h}, others {d}")));
            }
            _ => {}
        }
        if t[0] != 0.0 {
            return Err(Error::Config(format!("trajectory {i} does not start at t = 0")));
        }
    }
    Ok(dt.unwrap_or(1.0))
}

struct Lines<'a> {
    path: &'a Path,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        match self.iter.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l.trim())
            }
            None => Err(Error::parse(
                self.path,
                self.line + 1,
                format!("unexpected end of file, expected {what}"),
            )),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.line, msg)
    }

    fn header(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next(key)?;
        match l.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok(v.trim()),
            _ => Err(self.err(format!("expected `{key}=...`, got `{l}`"))),
        }
    }

    fn number<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.trim().parse().map_err(|_| self.err(format!("cannot parse `{s}`")))
    }

    fn keyword(&mut self, word: &str) -> Result<()> {
        let l = self.next(word)?;
        if l != word {
            return Err(self.err(format!("expected section `{word}`, got `{l}`")));
        }
        Ok(())
    }

    fn row(&mut self, len: usize, what: &str) -> Result<Vec<f64>> {
        let l = self.next(what)?;
        let vals = l
            .split_whitespace()
            .map(|s| self.number::<f64>(s))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != len {
            return Err(self.err(format!("{what} row has {} values, expected {len}", vals.len())));
        }
        Ok(vals)
    }

    fn matrix(&mut self, n: usize, m: usize, what: &str) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(n, m);
        for j in 0..m {
            let row = self.row(n, what)?;
            out.set_column(j, &DVector::from_vec(row));
        }
        Ok(out)
    }
}

pub fn load_snapshots(path: impl AsRef<Path>) -> Result<SnapshotSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = Lines {
        path,
        iter: text.lines().enumerate(),
        line: 0,
    };
    let n: usize = {
        let v = r.header("n")?;
        r.number(v)?
    };
    let m: usize = {
        let v = r.header("m")?;
        r.number(v)?
    };
    let l: usize = {
        let v = r.header("l")?;
        r.number(v)?
    };
    let offsets: Vec<usize> = {
        let v = r.header("offsets")?;
        v.split(',').map(|s| r.number(s)).collect::<Result<_>>()?
    };
    if offsets.len() != l + 1 || offsets.first() != Some(&0) || offsets.last() != Some(&m) {
        return Err(r.err(format!("offsets must have l+1 = {} entries from 0 to {m}", l + 1)));
    }
    let dt: f64 = {
        let v = r.header("dt")?;
        r.number(v)?
    };
    let fields = {
        let v = r.header("fields")?;
        let mut fields = Vec::new();
        for item in v.split(',') {
            let parts: Vec<&str> = item.split(':').collect();
            if parts.len() != 3 {
                return Err(r.err(format!("field `{item}` is not name:start:end")));
            }
            fields.push(FieldRange::new(
                parts[0].trim(),
                r.number(parts[1])?,
                r.number(parts[2])?,
            ));
        }
        fields
    };
    let has_derivatives = match r.header("has_derivatives")? {
        "0" => false,
        "1" => true,
        other => return Err(r.err(format!("has_derivatives must be 0 or 1, got `{other}`"))),
    };
    r.keyword("data")?;
    let data = r.matrix(n, m, "data")?;
    let derivatives = if has_derivatives {
        r.keyword("derivatives")?;
        Some(r.matrix(n, m, "derivatives")?)
    } else {
        None
    };
    r.keyword("controls")?;
    let mut controls = Vec::with_capacity(m);
    for _ in 0..m {
        let row = r.row(2, "controls")?;
        controls.push(Control::new(row[0], row[1]));
    }
    let mut scaling = None;
    if let Some((i, l)) = r.iter.next() {
        r.line = i + 1;
        if l.trim() != "scaling" {
            return Err(r.err(format!("unexpected trailing content `{}`", l.trim())));
        }
        let (mut shift, mut scale) = (Vec::new(), Vec::new());
        for f in &fields {
            let line = r.next("scaling row")?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != f.name {
                return Err(r.err(format!("expected `{} shift scale`", f.name)));
            }
            shift.push(r.number(parts[1])?);
            scale.push(r.number(parts[2])?);
        }
        scaling = Some(ScalingSpec::new(fields.clone(), shift, scale).map_err(|e| r.err(e.to_string()))?);
    }
    let times = offsets
        .windows(2)
        .map(|w| (0..w[1] - w[0]).map(|j| j as f64 * dt).collect())
        .collect();
    let set = SnapshotSet {
        data,
        trajectory_offsets: offsets,
        times,
        controls,
        derivatives,
        fields,
        scaling,
    };
    set.validate().map_err(|e| Error::parse(path, 1, e.to_string()))?;
    Ok(set)
}
