//! Discrete empirical interpolation of the Arrhenius source.
//!
//! The reduced source term is evaluated from `s` sampled rows only:
//!
//! ```text
//! f(s_red, R) = R * prefactor * P1 * exp(exponent / T),   T = offset + factor .* (P2 s_red)
//! ```
//!
//! with `P1 = U^T W U_N (U_N[idx, :])^-1` and `P2 = U[idx, :]`. `W` holds the
//! per-row weights that turn a power density into a scaled temperature rate,
//! and `offset`/`factor` undo the snapshot scaling at the sampled rows so the
//! exponential always sees physical temperatures.

use std::fmt::Write as _;
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::fom::{arrhenius, FomConfig, SourceModel};
use crate::pod::{sorted_svd, PodBasis};
use crate::sections::{join, join_exp, write_matrix, SectionFile};
use crate::snapshots::SnapshotSet;
use crate::{Error, Result};

/// Sampled temperatures at or below this value are rejected.
pub const MIN_SAMPLE_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DeimOperators {
    /// `s` distinct rows of the full state.
    pub indices: Vec<usize>,
    /// n x s; absent for models loaded without their construction data.
    pub nonlinearity_basis: Option<DMatrix<f64>>,
    /// r x s
    pub p1: DMatrix<f64>,
    /// s x r
    pub p2: DMatrix<f64>,
    pub prefactor: f64,
    pub exponent: f64,
    /// Physical temperature at sample k is `offset[k] + factor[k] * (P2 s)[k]`.
    pub offset: DVector<f64>,
    pub factor: DVector<f64>,
}

impl DeimOperators {
    pub fn rank(&self) -> usize {
        self.p1.nrows()
    }

    pub fn samples(&self) -> usize {
        self.p1.ncols()
    }

    /// Physical temperatures at the sample rows.
    pub fn sampled_temperatures(&self, s_red: &DVector<f64>) -> DVector<f64> {
        let mut t = &self.p2 * s_red;
        for k in 0..t.len() {
            t[k] = self.offset[k] + self.factor[k] * t[k];
        }
        t
    }

    fn checked_temperatures(&self, s_red: &DVector<f64>) -> Result<DVector<f64>> {
        if s_red.len() != self.rank() {
            return Err(Error::Dimension(format!(
                "reduced state has length {}, DEIM operators expect {}",
                s_red.len(),
                self.rank()
            )));
        }
        let t = self.sampled_temperatures(s_red);
        if let Some((k, v)) = t.iter().enumerate().find(|(_, v)| !(**v > MIN_SAMPLE_TEMPERATURE)) {
            return Err(Error::Domain(format!(
                "sampled temperature {v} K at DEIM point {k} (row {}) is not above {MIN_SAMPLE_TEMPERATURE} K",
                self.indices.get(k).copied().unwrap_or(k)
            )));
        }
        Ok(t)
    }

    /// Reduced Arrhenius term, `O(r s)` work.
    pub fn reduced_arrhenius(&self, s_red: &DVector<f64>, heat_load: f64) -> Result<DVector<f64>> {
        if heat_load == 0.0 {
            return Ok(DVector::zeros(self.rank()));
        }
        let t = self.checked_temperatures(s_red)?;
        let e = t.map(|t| (self.exponent / t).exp());
        Ok(&self.p1 * e * (heat_load * self.prefactor))
    }

    /// Jacobian of [`Self::reduced_arrhenius`] with respect to `s_red`.
    pub fn reduced_arrhenius_jacobian(&self, s_red: &DVector<f64>, heat_load: f64) -> Result<DMatrix<f64>> {
        let r = self.rank();
        if heat_load == 0.0 {
            return Ok(DMatrix::zeros(r, r));
        }
        let t = self.checked_temperatures(s_red)?;
        // d/ds exp(B/T) = exp(B/T) * (-B/T^2) * factor * P2
        let mut scaled_p2 = self.p2.clone();
        for k in 0..t.len() {
            let d = (self.exponent / t[k]).exp() * (-self.exponent / (t[k] * t[k])) * self.factor[k];
            scaled_p2.row_mut(k).scale_mut(d);
        }
        Ok(&self.p1 * scaled_p2 * (heat_load * self.prefactor))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("# romcal DEIM operators\n");
        self.write_sections(&mut out);
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = SectionFile::read(path)?;
        let deim = file.section("deim")?;
        let r = file.value(deim, "r")?;
        Self::from_sections(&file, r)
    }

    pub(crate) fn write_sections(&self, out: &mut String) {
        let _ = writeln!(out, "[deim]");
        let _ = writeln!(out, "r = {}", self.rank());
        let _ = writeln!(out, "s = {}", self.samples());
        let _ = writeln!(out, "indices = {}", join(&self.indices));
        let _ = writeln!(out, "prefactor = {:e}", self.prefactor);
        let _ = writeln!(out, "exponent = {:e}", self.exponent);
        let _ = writeln!(out, "offset = {}", join_exp(self.offset.iter()));
        let _ = writeln!(out, "factor = {}", join_exp(self.factor.iter()));
        write_matrix(out, "P1", &self.p1);
        write_matrix(out, "P2", &self.p2);
    }

    pub(crate) fn from_sections(file: &SectionFile, r: usize) -> Result<Self> {
        let deim = file.section("deim")?;
        let s: usize = file.value(deim, "s")?;
        let indices: Vec<usize> = file.list(deim, "indices")?;
        let offset: Vec<f64> = file.list(deim, "offset")?;
        let factor: Vec<f64> = file.list(deim, "factor")?;
        for (name, len) in [
            ("indices", indices.len()),
            ("offset", offset.len()),
            ("factor", factor.len()),
        ] {
            if len != s {
                return Err(file.err(deim.line, format!("[deim] `{name}` has {len} entries, s = {s}")));
            }
        }
        check_distinct(&indices).map_err(|e| file.err(deim.line, e.to_string()))?;
        Ok(Self {
            indices,
            nonlinearity_basis: None,
            p1: file.matrix(file.section("P1")?, r, s)?,
            p2: file.matrix(file.section("P2")?, s, r)?,
            prefactor: file.value(deim, "prefactor")?,
            exponent: file.value(deim, "exponent")?,
            offset: DVector::from_vec(offset),
            factor: DVector::from_vec(factor),
        })
    }
}

fn check_distinct(indices: &[usize]) -> Result<()> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("DEIM indices are not distinct: {indices:?}")));
    }
    Ok(())
}

/// Power density `R * prefactor * exp(exponent / T)` on every row carrying a
/// source (non-zero rate weight), evaluated on unscaled temperatures; zero
/// elsewhere. One column per snapshot.
pub fn nonlinearity_snapshots_with(set: &SnapshotSet, source: &SourceModel) -> Result<DMatrix<f64>> {
    let (n, m) = set.data.shape();
    if source.rate_weights.len() != n {
        return Err(Error::Dimension(format!(
            "source model covers {} rows, snapshots have {n}",
            source.rate_weights.len()
        )));
    }
    let (shift, scale) = match &set.scaling {
        Some(s) => (s.row_shift(), s.row_scale()),
        None => (DVector::zeros(n), DVector::from_element(n, 1.0)),
    };
    let rows: Vec<usize> = (0..n).filter(|&i| source.rate_weights[i] != 0.0).collect();
    let mut out = DMatrix::zeros(n, m);
    for j in 0..m {
        let load = set.controls[j].heat_load;
        if load == 0.0 {
            continue;
        }
        for &i in &rows {
            let t = shift[i] + scale[i] * set.data[(i, j)];
            out[(i, j)] = arrhenius(t, load, source.prefactor, source.exponent)
                .map_err(|e| Error::Domain(format!("snapshot column {j}, row {i}: {e}")))?;
        }
    }
    Ok(out)
}

/// Nonlinearity snapshots of the reactor model (solid block, masked cells).
pub fn nonlinearity_snapshots(set: &SnapshotSet, cfg: &FomConfig) -> Result<DMatrix<f64>> {
    nonlinearity_snapshots_with(set, &cfg.source_model())
}

/// Leading `s` left singular vectors of the nonlinearity snapshots.
pub fn nonlinearity_basis(snapshots: &DMatrix<f64>, s: usize) -> Result<DMatrix<f64>> {
    let max = snapshots.nrows().min(snapshots.ncols());
    if s == 0 || s > max {
        return Err(Error::Config(format!("DEIM rank must lie in [1, {max}], got {s}")));
    }
    let (u, sv) = sorted_svd(snapshots)?;
    if sv[s - 1] <= sv[0] * 1e-14 {
        return Err(Error::Numeric(format!(
            "nonlinearity snapshots have numerical rank below the requested DEIM rank {s}"
        )));
    }
    Ok(u.columns(0, s).into_owned())
}

fn argmax_abs(v: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, -1.0);
    for (i, x) in v.enumerate() {
        if x.abs() > best.1 {
            best = (i, x.abs());
        }
    }
    best
}

/// Greedy DEIM point selection; ties go to the lowest row index.
pub fn deim_points(u_n: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (n, s) = u_n.shape();
    if s == 0 || s > n {
        return Err(Error::Dimension(format!("cannot select {s} points from {n} rows")));
    }
    let (first, mag) = argmax_abs(u_n.column(0).iter().copied());
    if mag == 0.0 {
        return Err(Error::Numeric("first DEIM basis vector is zero".into()));
    }
    let mut indices = vec![first];
    for j in 1..s {
        let block = u_n.select_rows(&indices).columns(0, j).into_owned();
        let rhs = DVector::from_iterator(j, indices.iter().map(|&i| u_n[(i, j)]));
        let coeff = block.lu().solve(&rhs).ok_or_else(|| {
            Error::Numeric(format!(
                "DEIM step {j}: interpolation block of the first {j} columns is singular"
            ))
        })?;
        let residual = u_n.column(j) - u_n.columns(0, j) * coeff;
        let (next, mag) = argmax_abs(residual.iter().copied());
        if mag <= 1e-13 * u_n.column(j).amax() || indices.contains(&next) {
            return Err(Error::Numeric(format!(
                "DEIM step {j}: column {j} is (numerically) dependent on the previous columns"
            )));
        }
        indices.push(next);
    }
    Ok(indices)
}

/// Assembles `P1`, `P2` and the sample unscale map.
pub fn build_deim_operators(
    basis: &PodBasis,
    u_n: &DMatrix<f64>,
    indices: &[usize],
    source: &SourceModel,
) -> Result<DeimOperators> {
    let n = basis.state_dim();
    let s = indices.len();
    if u_n.nrows() != n || u_n.ncols() != s {
        return Err(Error::Dimension(format!(
            "nonlinearity basis is {}x{}, expected {n}x{s}",
            u_n.nrows(),
            u_n.ncols()
        )));
    }
    if source.rate_weights.len() != n {
        return Err(Error::Dimension(
            "source model does not match the basis dimension".into(),
        ));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Dimension(format!("DEIM index {i} out of range for n = {n}")));
    }
    check_distinct(indices)?;
    let (shift, scale) = match &basis.scaling {
        Some(sc) => (sc.row_shift(), sc.row_scale()),
        None => (DVector::zeros(n), DVector::from_element(n, 1.0)),
    };
    let sampled = u_n.select_rows(indices);
    let svals = sampled.singular_values();
    let cond = svals.max() / svals.min();
    debug!("DEIM interpolation block condition number {cond:.3e}");
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::Numeric(format!(
            "DEIM interpolation block is singular (condition number {cond:.3e})"
        )));
    }
    let inv = sampled
        .try_inverse()
        .ok_or_else(|| Error::Numeric("DEIM interpolation block is singular".into()))?;
    let mut weighted = u_n.clone();
    for i in 0..n {
        weighted.row_mut(i).scale_mut(source.rate_weights[i] / scale[i]);
    }
    let p1 = basis.basis.tr_mul(&weighted) * inv;
    let p2 = basis.basis.select_rows(indices);
    Ok(DeimOperators {
        indices: indices.to_vec(),
        nonlinearity_basis: Some(u_n.clone()),
        p1,
        p2,
        prefactor: source.prefactor,
        exponent: source.exponent,
        offset: DVector::from_iterator(s, indices.iter().map(|&i| shift[i])),
        factor: DVector::from_iterator(s, indices.iter().map(|&i| scale[i])),
    })
}

/// Intrusive reference: lift, evaluate the source at every row, project back.
pub fn galerkin_arrhenius(
    basis: &PodBasis,
    source: &SourceModel,
    s_red: &DVector<f64>,
    heat_load: f64,
) -> Result<DVector<f64>> {
    let x = basis.lift_vector(s_red)?;
    let n = x.len();
    let (shift, scale) = match &basis.scaling {
        Some(sc) => (sc.row_shift(), sc.row_scale()),
        None => (DVector::zeros(n), DVector::from_element(n, 1.0)),
    };
    let mut f = DVector::zeros(n);
    for i in 0..n {
        let w = source.rate_weights[i];
        if w != 0.0 && heat_load != 0.0 {
            let t = shift[i] + scale[i] * x[i];
            f[i] = w / scale[i] * arrhenius(t, heat_load, source.prefactor, source.exponent)?;
        }
    }
    Ok(basis.basis.tr_mul(&f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::Control;
    use crate::pod::compute_pod;
    use crate::snapshots::FieldRange;
    use approx::assert_relative_eq;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed;
        move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    /// Step-by-step transcription of the greedy recursion using explicit
    /// Gaussian elimination and a plain residual loop.
    fn greedy_oracle(u: &DMatrix<f64>) -> Vec<usize> {
        let (n, s) = u.shape();
        let mut p = Vec::new();
        let mut best = 0;
        for i in 0..n {
            if u[(i, 0)].abs() > u[(best, 0)].abs() {
                best = i;
            }
        }
        p.push(best);
        for l in 1..s {
            // solve (U[p, 0..l]) c = U[p, l] by Gaussian elimination with pivoting
            let mut a: Vec<Vec<f64>> = p
                .iter()
                .map(|&i| {
                    let mut row: Vec<f64> = (0..l).map(|c| u[(i, c)]).collect();
                    row.push(u[(i, l)]);
                    row
                })
                .collect();
            for col in 0..l {
                let piv = (col..l)
                    .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                    .unwrap();
                a.swap(col, piv);
                for row in col + 1..l {
                    let f = a[row][col] / a[col][col];
                    for k in col..=l {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
            let mut c = vec![0.0; l];
            for row in (0..l).rev() {
                let mut acc = a[row][l];
                for k in row + 1..l {
                    acc -= a[row][k] * c[k];
                }
                c[row] = acc / a[row][row];
            }
            let mut best = 0;
            let mut best_val = -1.0;
            for i in 0..n {
                let mut res = u[(i, l)];
                for k in 0..l {
                    res -= u[(i, k)] * c[k];
                }
                if res.abs() > best_val {
                    best_val = res.abs();
                    best = i;
                }
            }
            p.push(best);
        }
        p
    }

    #[test]
    fn identity_columns_select_in_order() {
        let u = DMatrix::<f64>::identity(7, 4);
        assert_eq!(deim_points(&u).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_point_is_max_magnitude() {
        let u = DMatrix::from_column_slice(5, 1, &[0.1, -0.7, 0.3, 0.7, 0.2]);
        assert_eq!(deim_points(&u).unwrap(), vec![1]);
    }

    #[test]
    fn matches_greedy_oracle_on_random_orthonormal() {
        for seed in 0..20 {
            let mut rng = lcg(seed + 1);
            let a = DMatrix::from_fn(6, 3, |_, _| rng());
            let q = a.qr().q();
            assert_eq!(deim_points(&q).unwrap(), greedy_oracle(&q), "seed {seed}");
            let b = DMatrix::from_fn(40, 8, |_, _| rng());
            let q = b.qr().q();
            assert_eq!(deim_points(&q).unwrap(), greedy_oracle(&q), "seed {seed}");
        }
    }

    #[test]
    fn sign_flips_do_not_change_selection() {
        let mut rng = lcg(77);
        let q = DMatrix::from_fn(12, 4, |_, _| rng()).qr().q();
        let mut flipped = q.clone();
        flipped.column_mut(1).neg_mut();
        flipped.column_mut(3).neg_mut();
        assert_eq!(deim_points(&q).unwrap(), deim_points(&flipped).unwrap());
    }

    #[test]
    fn dependent_columns_are_rejected() {
        let mut u = DMatrix::<f64>::identity(5, 3);
        let c0 = u.column(0).into_owned();
        u.set_column(2, &(c0 * 2.0));
        let err = deim_points(&u).unwrap_err();
        assert!(err.to_string().contains("step 2"), "{err}");
    }

    #[test]
    fn interpolation_is_exact_at_selected_rows() {
        let mut rng = lcg(5);
        let u = DMatrix::from_fn(30, 5, |_, _| rng()).qr().q();
        let idx = deim_points(&u).unwrap();
        let inv = u.select_rows(&idx).try_inverse().unwrap();
        let c = u.clone() * DVector::from_fn(5, |_, _| rng());
        let recon = &u * (&inv * DVector::from_iterator(5, idx.iter().map(|&i| c[i])));
        for &i in &idx {
            assert_relative_eq!(recon[i], c[i], epsilon = 1e-13);
        }
        assert!((recon - c).amax() < 1e-12);
    }

    fn toy_source(n: usize, rows: &[usize]) -> SourceModel {
        let mut w = DVector::zeros(n);
        for &i in rows {
            w[i] = 0.5;
        }
        SourceModel {
            prefactor: 5000.0,
            exponent: 1500.0,
            rate_weights: w,
        }
    }

    fn toy_set(data: DMatrix<f64>, loads: &[f64]) -> SnapshotSet {
        let m = data.ncols();
        SnapshotSet {
            fields: vec![FieldRange::new("x", 0, data.nrows())],
            data,
            trajectory_offsets: vec![0, m],
            times: vec![(0..m).map(|j| j as f64).collect()],
            controls: loads.iter().map(|&r| Control::new(r, 0.0)).collect(),
            derivatives: None,
            scaling: None,
        }
    }

    #[test]
    fn nonlinearity_snapshot_cases() {
        let n = 6;
        let source = toy_source(n, &[2, 3, 4]);
        let data = DMatrix::from_fn(n, 3, |i, j| 500.0 + (i * 3 + j) as f64);
        let zero = nonlinearity_snapshots_with(&toy_set(data.clone(), &[0.0, 0.0, 0.0]), &source).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let uniform = DMatrix::from_element(n, 1, 520.0);
        let p = nonlinearity_snapshots_with(&toy_set(uniform, &[1.5]), &source).unwrap();
        let expect = 1.5 * 5000.0 * (1500.0_f64 / 520.0).exp();
        for i in 0..n {
            let e = if (2..5).contains(&i) { expect } else { 0.0 };
            assert_relative_eq!(p[(i, 0)], e, max_relative = 1e-15);
        }

        let loads = [0.3, 1.1, 0.7];
        let p = nonlinearity_snapshots_with(&toy_set(data.clone(), &loads), &source).unwrap();
        for j in 0..3 {
            for i in 2..5 {
                let cfg = FomConfig::default();
                let oracle = crate::fom::arrhenius_source(data[(i, j)], loads[j], &cfg).unwrap();
                assert_relative_eq!(p[(i, j)], oracle, max_relative = 1e-15);
            }
        }

        let mut cold = data;
        cold[(3, 1)] = -1.0;
        assert!(nonlinearity_snapshots_with(&toy_set(cold, &loads), &source).is_err());
    }

    #[test]
    fn full_sampling_reproduces_galerkin() {
        let n = 8;
        let mut rng = lcg(3);
        let states = DMatrix::from_fn(n, 12, |_, _| 520.0 + 30.0 * rng());
        let pod = compute_pod(&states, 4).unwrap();
        let source = toy_source(n, &(0..n).collect::<Vec<_>>());
        let u_n = DMatrix::from_fn(n, n, |_, _| rng()).qr().q();
        let idx = deim_points(&u_n).unwrap();
        let ops = build_deim_operators(&pod, &u_n, &idx, &source).unwrap();
        for j in 0..12 {
            let s = pod.basis.tr_mul(&states.column(j));
            let got = ops.reduced_arrhenius(&s, 0.8).unwrap();
            let want = galerkin_arrhenius(&pod, &source, &s, 0.8).unwrap();
            assert!((&got - &want).amax() <= 1e-10 * want.amax(), "column {j}");
        }
    }

    #[test]
    fn zero_load_and_guard() {
        let n = 6;
        let mut rng = lcg(9);
        let states = DMatrix::from_fn(n, 6, |_, _| 520.0 + 30.0 * rng());
        let pod = compute_pod(&states, 3).unwrap();
        let source = toy_source(n, &[0, 1, 2, 3, 4, 5]);
        let u_n = DMatrix::from_fn(n, 3, |_, _| rng()).qr().q();
        let idx = deim_points(&u_n).unwrap();
        let ops = build_deim_operators(&pod, &u_n, &idx, &source).unwrap();
        let s = pod.basis.tr_mul(&states.column(0));
        assert!(ops.reduced_arrhenius(&s, 0.0).unwrap().iter().all(|&v| v == 0.0));
        let cold = DVector::zeros(3);
        assert!(matches!(ops.reduced_arrhenius(&cold, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let n = 10;
        let mut rng = lcg(21);
        let states = DMatrix::from_fn(n, 10, |_, _| 520.0 + 30.0 * rng());
        let pod = compute_pod(&states, 4).unwrap();
        let source = toy_source(n, &[1, 3, 5, 7, 9]);
        let u_n = DMatrix::from_fn(n, 3, |_, _| rng()).qr().q();
        let idx = deim_points(&u_n).unwrap();
        let ops = build_deim_operators(&pod, &u_n, &idx, &source).unwrap();
        let s = pod.basis.tr_mul(&states.column(2));
        let jac = ops.reduced_arrhenius_jacobian(&s, 1.3).unwrap();
        for k in 0..4 {
            let h = 1e-5 * (1.0 + s[k].abs());
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[k] += h;
            sm[k] -= h;
            let fd = (ops.reduced_arrhenius(&sp, 1.3).unwrap() - ops.reduced_arrhenius(&sm, 1.3).unwrap()) / (2.0 * h);
            for i in 0..4 {
                assert_relative_eq!(jac[(i, k)], fd[i], max_relative = 1e-6, epsilon = 1e-12 * jac.amax());
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let n = 6;
        let mut rng = lcg(4);
        let states = DMatrix::from_fn(n, 6, |_, _| 520.0 + 30.0 * rng());
        let pod = compute_pod(&states, 3).unwrap();
        let u_n = DMatrix::from_fn(n, 2, |_, _| rng()).qr().q();
        let idx = deim_points(&u_n).unwrap();
        let ops = build_deim_operators(&pod, &u_n, &idx, &toy_source(n, &[0, 2, 4])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deim.txt");
        ops.save(&path).unwrap();
        let back = DeimOperators::load(&path).unwrap();
        assert_eq!(
            back,
            DeimOperators {
                nonlinearity_basis: None,
                ..ops
            }
        );
    }
}
