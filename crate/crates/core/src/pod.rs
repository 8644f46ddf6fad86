//! Proper orthogonal decomposition: truncated left singular vectors of the
//! (scaled) snapshot matrix.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SVD};

use crate::snapshots::ScalingSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    /// n x r, orthonormal columns
    pub basis: DMatrix<f64>,
    /// All min(n, m) singular values, non-increasing.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    /// Scaling under which the basis was computed, if any.
    pub scaling: Option<ScalingSpec>,
}

/// Full thin SVD with singular values sorted non-increasingly and a
/// deterministic sign per left vector (largest-magnitude entry positive).
pub(crate) fn sorted_svd(data: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix contains non-finite entries".into()));
    }
    let svd = SVD::try_new(data.clone(), true, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let u = svd.u.expect("left singular vectors requested");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let mut left = DMatrix::zeros(u.nrows(), order.len());
    for (dst, &src) in order.iter().enumerate() {
        let mut col = u.column(src).into_owned();
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        left.set_column(dst, &col);
    }
    Ok((left, order.iter().map(|&i| sv[i].max(0.0)).collect()))
}

/// Top-`rank` left singular vectors of `data`.
pub fn compute_pod(data: &DMatrix<f64>, rank: usize) -> Result<PodBasis> {
    let max_rank = data.nrows().min(data.ncols());
    if rank == 0 || rank > max_rank {
        return Err(Error::Config(format!(
            "POD rank must lie in [1, {max_rank}], got {rank}"
        )));
    }
    let (u, singular_values) = sorted_svd(data)?;
    Ok(PodBasis {
        basis: u.columns(0, rank).into_owned(),
        singular_values,
        rank,
        scaling: None,
    })
}

impl PodBasis {
    pub fn with_scaling(mut self, scaling: ScalingSpec) -> Self {
        self.scaling = Some(scaling);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// `U^T X`
    pub fn project(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.basis.nrows() {
            return Err(Error::Dimension(format!(
                "cannot project {} rows with a basis of dimension {}",
                x.nrows(),
                self.basis.nrows()
            )));
        }
        Ok(self.basis.tr_mul(x))
    }

    /// `U Y`
    pub fn lift(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.rank {
            return Err(Error::Dimension(format!(
                "cannot lift {} rows with a rank-{} basis",
                y.nrows(),
                self.rank
            )));
        }
        Ok(&self.basis * y)
    }

    pub fn lift_vector(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.rank {
            return Err(Error::Dimension(format!(
                "reduced vector has length {}, rank is {}",
                y.len(),
                self.rank
            )));
        }
        Ok(&self.basis * y)
    }

    /// Largest entry of `|U^T U - I|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.basis.tr_mul(&self.basis) - DMatrix::identity(self.rank, self.rank);
        g.amax()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        let _ = writeln!(out, "n={} r={}", self.basis.nrows(), self.rank);
        for col in self.basis.column_iter() {
            push_row(&mut out, col.iter());
        }
        out.push_str("singular_values\n");
        push_row(&mut out, self.singular_values.iter());
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let perr = |line: usize, msg: &str| Error::parse(path, line, msg);
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file"))?;
        let mut n = None;
        let mut r = None;
        for item in header.split_whitespace() {
            match item.split_once('=') {
                Some(("n", v)) => n = v.parse::<usize>().ok(),
                Some(("r", v)) => r = v.parse::<usize>().ok(),
                _ => return Err(perr(1, "expected header `n=<rows> r=<rank>`")),
            }
        }
        let (n, r) = n.zip(r).ok_or_else(|| perr(1, "expected header `n=<rows> r=<rank>`"))?;
        let mut basis = DMatrix::zeros(n, r);
        for j in 0..r {
            let (i, line) = lines.next().ok_or_else(|| perr(j + 2, "missing basis column"))?;
            let col = parse_row(line).ok_or_else(|| perr(i + 1, "malformed number"))?;
            if col.len() != n {
                return Err(perr(i + 1, "basis column has the wrong length"));
            }
            basis.set_column(j, &DVector::from_vec(col));
        }
        match lines.next() {
            Some((_, "singular_values")) => {}
            Some((i, _)) => return Err(perr(i + 1, "expected `singular_values`")),
            None => return Err(perr(r + 2, "missing singular values")),
        }
        let (i, line) = lines.next().ok_or_else(|| perr(r + 3, "missing singular values"))?;
        let singular_values = parse_row(line).ok_or_else(|| perr(i + 1, "malformed number"))?;
        Ok(PodBasis {
            basis,
            singular_values,
            rank: r,
            scaling: None,
        })
    }
}

pub(crate) fn push_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    for (i, v) in values.enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:e}");
    }
    out.push('\n');
}

pub(crate) fn parse_row(line: &str) -> Option<Vec<f64>> {
    line.split_whitespace().map(|s| s.parse().ok()).collect()
}

/// Maximum (over columns) mean-squared reconstruction error per rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionCurve {
    /// entry `r - 1` belongs to rank `r`
    pub training: Vec<f64>,
    pub validation: Vec<f64>,
}

/// Builds bases of rank 1..=r_max from `training` and records the worst
/// column-wise mean-squared error of `U U^T x` on training and validation
/// columns.
pub fn reconstruction_error_curve(
    training: &DMatrix<f64>,
    validation: Option<&DMatrix<f64>>,
    r_max: usize,
) -> Result<ReconstructionCurve> {
    let pod = compute_pod(training, r_max)?;
    let n = training.nrows() as f64;
    let curve = |x: &DMatrix<f64>| -> Vec<f64> {
        let mut residual = x.clone();
        (0..r_max)
            .map(|r| {
                let u = pod.basis.column(r);
                let coeff = u.tr_mul(&residual);
                residual -= u * coeff;
                residual.column_iter().map(|c| c.norm_squared() / n).fold(0.0, f64::max)
            })
            .collect()
    };
    let validation = match validation {
        Some(v) => {
            if v.nrows() != training.nrows() {
                return Err(Error::Dimension("validation rows differ from training rows".into()));
            }
            curve(v)
        }
        None => Vec::new(),
    };
    Ok(ReconstructionCurve {
        training: curve(training),
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pseudo_random(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        DMatrix::from_fn(n, m, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn rank_one_matrix() {
        let a = DVector::from_vec(vec![1.0, 2.0, -2.0]);
        let b = DVector::from_vec(vec![3.0, 0.0, 4.0, 0.0]);
        let s = &a * b.transpose();
        let pod = compute_pod(&s, 1).unwrap();
        assert_relative_eq!(pod.singular_values[0], 15.0, max_relative = 1e-14);
        assert!(pod.singular_values[1..].iter().all(|&v| v < 1e-13));
    }

    #[test]
    fn orthogonal_columns_share_singular_values() {
        let s = DMatrix::<f64>::identity(6, 4) * 2.5;
        let pod = compute_pod(&s, 4).unwrap();
        for v in &pod.singular_values {
            assert_relative_eq!(*v, 2.5, max_relative = 1e-14);
        }
    }

    #[test]
    fn rank_out_of_range() {
        let s = pseudo_random(5, 3, 1);
        assert!(compute_pod(&s, 0).is_err());
        assert!(compute_pod(&s, 4).is_err());
    }

    #[test]
    fn projection_identities() {
        let s = pseudo_random(12, 7, 3);
        let pod = compute_pod(&s, 4).unwrap();
        assert!(pod.orthonormality_defect() < 1e-12);

        let y = pseudo_random(4, 3, 5);
        let back = pod.project(&pod.lift(&y).unwrap()).unwrap();
        assert!((back - &y).amax() < 1e-12);

        let in_span = pod.lift(&y).unwrap();
        let again = pod.lift(&pod.project(&in_span).unwrap()).unwrap();
        assert!((again - &in_span).amax() < 1e-12);

        let x = pseudo_random(12, 2, 9);
        let orth = &x - &pod.basis * pod.basis.tr_mul(&x);
        assert!(pod.project(&orth).unwrap().amax() < 1e-12);

        assert!(pod.project(&pseudo_random(5, 1, 1)).is_err());
        assert!(pod.lift(&pseudo_random(3, 1, 1)).is_err());
    }

    #[test]
    fn error_curve_vanishes_at_full_rank_and_decreases() {
        let low = pseudo_random(30, 5, 11) * pseudo_random(5, 20, 12);
        let curve = reconstruction_error_curve(&low, Some(&pseudo_random(30, 4, 13)), 5).unwrap();
        assert!(curve.training[4] <= 1e-20, "{}", curve.training[4]);
        for w in curve.training.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        assert_eq!(curve.validation.len(), 5);
    }

    #[test]
    fn save_and_load_basis() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.txt");
        let pod = compute_pod(&pseudo_random(9, 6, 21), 3).unwrap();
        pod.save(&path).unwrap();
        assert_eq!(PodBasis::load(&path).unwrap(), pod);
        std::fs::write(&path, "n=9 r=3\n1 2 3\n").unwrap();
        assert!(PodBasis::load(&path).is_err());
    }

    /// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
    fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += a[(p, q)] * a[(p, q)];
                }
            }
            if off < 1e-30 * a.norm_squared() {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[(k, p)], a[(k, q)]);
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        for (n, m, seed) in [(50, 30, 1u64), (20, 8, 2), (9, 9, 3)] {
            let s = pseudo_random(n, m, seed);
            let pod = compute_pod(&s, m.min(n)).unwrap();
            let ev = jacobi_eigenvalues(s.tr_mul(&s));
            for (sv, e) in pod.singular_values.iter().zip(&ev) {
                assert_relative_eq!(sv * sv, *e, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn truncation_error_is_tail_energy() {
        let s = pseudo_random(50, 30, 7);
        for r in [1, 5, 12, 29] {
            let pod = compute_pod(&s, r).unwrap();
            let resid = &s - &pod.basis * pod.basis.tr_mul(&s);
            let tail: f64 = pod.singular_values[r..].iter().map(|v| v * v).sum();
            assert_relative_eq!(resid.norm_squared(), tail, max_relative = 1e-10);
        }
    }

    proptest::proptest! {
        #[test]
        fn projector_is_idempotent(seed in 0u64..10_000, n in 3usize..20, m in 1usize..12, frac in 0.0f64..1.0) {
            let s = pseudo_random(n, m, seed);
            let max = n.min(m);
            let r = 1 + ((max - 1) as f64 * frac) as usize;
            let pod = compute_pod(&s, r).unwrap();
            proptest::prop_assert!(pod.orthonormality_defect() < 1e-12);
            let p = &pod.basis * pod.basis.transpose();
            proptest::prop_assert!((&p * &p - &p).amax() < 1e-12);
            for w in pod.singular_values.windows(2) {
                proptest::prop_assert!(w[0] >= w[1]);
            }
        }
    }
}
