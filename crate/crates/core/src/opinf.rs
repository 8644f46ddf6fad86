//! Operator inference: regularized least-squares identification of the
//! polynomial operators `A`, `H`, `B` of
//!
//! ```text
//! ds/dt = A s + H sym_kron(s) + B u + f_deim(s, R)
//! ```
//!
//! The DEIM term is known and moved to the right-hand side.

use nalgebra::{DMatrix, DVector};

use crate::deim::DeimOperators;
use crate::fom::Control;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RomOperators {
    /// r x r
    pub a: DMatrix<f64>,
    /// r x r(r+1)/2, acting on [`sym_kron`]
    pub h: DMatrix<f64>,
    /// r x p
    pub b: DMatrix<f64>,
}

impl RomOperators {
    pub fn zeros(r: usize, p: usize) -> Self {
        Self {
            a: DMatrix::zeros(r, r),
            h: DMatrix::zeros(r, sym_kron_len(r)),
            b: DMatrix::zeros(r, p),
        }
    }

    pub fn r(&self) -> usize {
        self.a.nrows()
    }

    pub fn q(&self) -> usize {
        self.h.ncols()
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.r();
        if self.a.ncols() != r || self.h.nrows() != r || self.b.nrows() != r || self.q() != sym_kron_len(r) {
            return Err(Error::Dimension(format!(
                "inconsistent operator shapes: A {:?}, H {:?}, B {:?}",
                self.a.shape(),
                self.h.shape(),
                self.b.shape()
            )));
        }
        if self
            .a
            .iter()
            .chain(self.h.iter())
            .chain(self.b.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("operators contain non-finite entries".into()));
        }
        Ok(())
    }

    /// Number of scalar entries in A, H and B together.
    pub fn num_params(&self) -> usize {
        self.a.len() + self.h.len() + self.b.len()
    }

    /// Entries of A, H, B, each block flattened row-major.
    pub fn to_params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for m in [&self.a, &self.h, &self.b] {
            for i in 0..m.nrows() {
                out.extend(m.row(i).iter());
            }
        }
        DVector::from_vec(out)
    }

    /// Inverse of [`Self::to_params`] with the shapes of `self`.
    pub fn with_params(&self, params: &DVector<f64>) -> Self {
        assert_eq!(params.len(), self.num_params());
        let mut it = params.iter().copied();
        let mut fill = |m: &DMatrix<f64>| DMatrix::from_row_iterator(m.nrows(), m.ncols(), it.by_ref().take(m.len()));
        let a = fill(&self.a);
        let h = fill(&self.h);
        let b = fill(&self.b);
        Self { a, h, b }
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.a.norm_squared() + self.h.norm_squared() + self.b.norm_squared()).sqrt()
    }
}

pub fn sym_kron_len(r: usize) -> usize {
    r * (r + 1) / 2
}

/// `(s_i s_j)` for `i <= j`, ordered with `i` outer: `(x, y) -> (x², xy, y²)`.
pub fn sym_kron(s: &DVector<f64>) -> DVector<f64> {
    let r = s.len();
    let mut out = DVector::zeros(sym_kron_len(r));
    let mut k = 0;
    for i in 0..r {
        for j in i..r {
            out[k] = s[i] * s[j];
            k += 1;
        }
    }
    out
}

/// `H * d sym_kron(s)/ds`, an r x r matrix.
pub fn sym_kron_jacobian_product(h: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let r = s.len();
    let mut out = DMatrix::zeros(h.nrows(), r);
    let mut k = 0;
    for i in 0..r {
        for j in i..r {
            // d(s_i s_j)/ds_i = s_j, d/ds_j = s_i
            for row in 0..h.nrows() {
                out[(row, i)] += h[(row, k)] * s[j];
                out[(row, j)] += h[(row, k)] * s[i];
            }
            k += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpinfConfig {
    pub tikhonov_lambda: f64,
    pub include_quadratic: bool,
    pub include_input: bool,
}

impl Default for OpinfConfig {
    fn default() -> Self {
        Self {
            tikhonov_lambda: 1.0,
            include_quadratic: true,
            include_input: true,
        }
    }
}

impl OpinfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tikhonov_lambda >= 0.0) || !self.tikhonov_lambda.is_finite() {
            return Err(Error::Config(format!(
                "Tikhonov lambda must be finite and >= 0, got {}",
                self.tikhonov_lambda
            )));
        }
        Ok(())
    }
}

pub(crate) fn input_vector(u: &Control) -> DVector<f64> {
    DVector::from_element(1, u.inflow_rate_derivative)
}

/// Number of input channels carried by [`Control`] into `B`.
pub const INPUT_CHANNELS: usize = 1;

/// Regression system for the operators, one row per snapshot column.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression {
    /// m x d
    pub design: DMatrix<f64>,
    /// m x r
    pub target: DMatrix<f64>,
    pub r: usize,
    pub config: OpinfConfig,
}

pub fn assemble_regression(
    states: &DMatrix<f64>,
    derivatives: Option<&DMatrix<f64>>,
    controls: &[Control],
    deim: Option<&DeimOperators>,
    cfg: &OpinfConfig,
) -> Result<Regression> {
    cfg.validate()?;
    let derivatives = derivatives.ok_or_else(|| {
        Error::Config(
            "operator inference needs time derivatives; store exact right-hand sides or call estimate_derivatives"
                .into(),
        )
    })?;
    let (r, m) = states.shape();
    if derivatives.shape() != (r, m) || controls.len() != m {
        return Err(Error::Dimension(format!(
            "states {r}x{m}, derivatives {:?} and {} controls are not aligned",
            derivatives.shape(),
            controls.len()
        )));
    }
    if let Some(d) = deim {
        if d.rank() != r {
            return Err(Error::Dimension(format!(
                "DEIM operators have rank {}, states {r}",
                d.rank()
            )));
        }
    }
    let q = if cfg.include_quadratic { sym_kron_len(r) } else { 0 };
    let p = if cfg.include_input { INPUT_CHANNELS } else { 0 };
    let mut design = DMatrix::zeros(m, r + q + p);
    let mut target = derivatives.transpose();
    for j in 0..m {
        let s = states.column(j).into_owned();
        design.view_mut((j, 0), (1, r)).copy_from(&s.transpose());
        if q > 0 {
            design.view_mut((j, r), (1, q)).copy_from(&sym_kron(&s).transpose());
        }
        if p > 0 {
            design
                .view_mut((j, r + q), (1, p))
                .copy_from(&input_vector(&controls[j]).transpose());
        }
        if let Some(d) = deim {
            let f = d.reduced_arrhenius(&s, controls[j].heat_load)?;
            for i in 0..r {
                target[(j, i)] -= f[i];
            }
        }
    }
    Ok(Regression {
        design,
        target,
        r,
        config: *cfg,
    })
}

/// Minimizes `|D O^T - T|_F^2 + lambda |O|_F^2` through an SVD of `D`.
pub fn solve_least_squares(design: &DMatrix<f64>, target: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let (m, d) = design.shape();
    if m == 0 {
        return Err(Error::Config("regression system has no rows".into()));
    }
    if target.nrows() != m {
        return Err(Error::Dimension("design and target row counts differ".into()));
    }
    if design.iter().chain(target.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("regression data contains non-finite entries".into()));
    }
    let svd = design.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = &svd.singular_values;
    let smax = sv.max();
    let tol = smax * (m.max(d) as f64) * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if lambda == 0.0 && rank < d {
        return Err(Error::Numeric(format!(
            "regression matrix has rank {rank} < {d} unknowns; use a Tikhonov lambda > 0"
        )));
    }
    // O^T = V diag(s / (s^2 + lambda)) U^T T
    let filt = DVector::from_iterator(
        sv.len(),
        sv.iter().map(|&s| {
            if s > tol || lambda > 0.0 {
                s / (s * s + lambda)
            } else {
                0.0
            }
        }),
    );
    let mut ut = u.tr_mul(target);
    for (i, f) in filt.iter().enumerate() {
        ut.row_mut(i).scale_mut(*f);
    }
    Ok((vt.tr_mul(&ut)).transpose())
}

/// Solves the regression and splits the result into operator blocks.
pub fn solve_opinf(reg: &Regression) -> Result<RomOperators> {
    let o = solve_least_squares(&reg.design, &reg.target, reg.config.tikhonov_lambda)?;
    let r = reg.r;
    let q = if reg.config.include_quadratic {
        sym_kron_len(r)
    } else {
        0
    };
    let p = if reg.config.include_input { INPUT_CHANNELS } else { 0 };
    let mut ops = RomOperators::zeros(r, INPUT_CHANNELS);
    ops.a.copy_from(&o.columns(0, r));
    if q > 0 {
        ops.h.copy_from(&o.columns(r, q));
    }
    if p > 0 {
        ops.b.copy_from(&o.columns(r + q, p));
    }
    ops.validate()?;
    Ok(ops)
}
