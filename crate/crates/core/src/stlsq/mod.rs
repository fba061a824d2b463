//! Sequential thresholded least squares.
//!
//! Each target column is fit independently: solve a ridge-regularized least
//! squares problem on the active columns, zero every coefficient whose
//! magnitude falls below the threshold, and repeat until the active set stops
//! changing. The active set can only shrink, so the loop always terminates.
//!
//! The library matrix is compressed once by an orthogonal factorization
//! `Θ = Q R`; every restricted solve then works on the small `R` factor,
//! which has the same least-squares objective up to a constant.

mod lstsq;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use lstsq::{augment_ridge, min_norm_lstsq, HouseholderQr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StlsqError {
    #[error("{what} has a non-finite entry at ({row}, {column})")]
    NonFinite {
        what: &'static str,
        row: usize,
        column: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StlsqConfig<T> {
    pub threshold: T,
    pub ridge: T,
    pub max_iterations: usize,
}

impl<T: Real> StlsqConfig<T> {
    pub const DEFAULT_MAX_ITERATIONS: usize = 20;

    pub fn new(threshold: T, ridge: T) -> Self {
        Self {
            threshold,
            ridge,
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn validate(&self) -> Result<(), StlsqError> {
        if !(self.threshold >= T::zero() && self.threshold.is_finite()) {
            return Err(StlsqError::InvalidConfig(format!(
                "threshold must be finite and non-negative, got {}",
                self.threshold
            )));
        }
        if !(self.ridge >= T::zero() && self.ridge.is_finite()) {
            return Err(StlsqError::InvalidConfig(format!(
                "ridge must be finite and non-negative, got {}",
                self.ridge
            )));
        }
        if self.max_iterations == 0 {
            return Err(StlsqError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sparse coefficient matrix Ξ (features × targets).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSolution<T> {
    pub coefficients: Array2<T>,
    /// Active feature indices per target, ascending.
    pub support: Vec<Vec<usize>>,
    pub iterations_used: usize,
    /// Set when at least one target ended with an empty support.
    pub degenerate: bool,
}

impl<T: Real> SparseSolution<T> {
    pub fn zeros(features: usize, targets: usize) -> Self {
        Self {
            coefficients: Array2::zeros((features, targets)),
            support: vec![Vec::new(); targets],
            iterations_used: 0,
            degenerate: true,
        }
    }

    pub fn nonzeros(&self) -> usize {
        self.support.iter().map(Vec::len).sum()
    }

    /// Target columns whose support is empty.
    pub fn empty_targets(&self) -> Vec<usize> {
        self.support
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_empty())
            .map(|(i, _)| i)
            .collect()
    }

    /// `Θ · Ξ`.
    pub fn predict(&self, theta: ArrayView2<T>) -> Array2<T> {
        theta.dot(&self.coefficients)
    }
}

fn check_finite<T: Real>(what: &'static str, m: ArrayView2<T>) -> Result<(), StlsqError> {
    match m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((row, column), _)) => Err(StlsqError::NonFinite { what, row, column }),
        None => Ok(()),
    }
}

/// `argmin ‖A X − B‖² + α‖X‖²`, by Householder QR of the augmented system
/// `[A; √α I]`. With `α = 0` a rank-deficient `A` yields the minimum-norm
/// solution.
pub fn ridge_least_squares<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>, alpha: T) -> Result<Array2<T>, StlsqError> {
    if a.ncols() == 0 {
        return Err(StlsqError::Shape("design matrix has no columns".into()));
    }
    if a.nrows() != b.nrows() {
        return Err(StlsqError::Shape(format!(
            "design has {} rows, targets have {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if !(alpha >= T::zero() && alpha.is_finite()) {
        return Err(StlsqError::InvalidConfig(format!("ridge {alpha} must be non-negative")));
    }
    check_finite("design matrix", a)?;
    check_finite("targets", b)?;
    if alpha > T::zero() {
        let (aa, bb) = augment_ridge(a, b, alpha);
        Ok(min_norm_lstsq(aa.view(), bb.view()))
    } else {
        Ok(min_norm_lstsq(a, b))
    }
}

/// Library matrix and targets reduced to `R` and `Qᵀ b` by one orthogonal
/// factorization, reusable across thresholds and ridge values.
#[derive(Debug, Clone)]
pub struct CompressedSystem<T> {
    r: Array2<T>,
    qtb: Array2<T>,
}

impl<T: Real> CompressedSystem<T> {
    pub fn new(theta: ArrayView2<T>, targets: ArrayView2<T>) -> Result<Self, StlsqError> {
        let (m, p) = theta.dim();
        if m == 0 || p == 0 || targets.ncols() == 0 {
            return Err(StlsqError::Shape(format!(
                "need at least one row, feature and target (got {m}×{p} and {} targets)",
                targets.ncols()
            )));
        }
        if targets.nrows() != m {
            return Err(StlsqError::Shape(format!(
                "library has {m} rows, targets have {}",
                targets.nrows()
            )));
        }
        check_finite("library matrix", theta)?;
        check_finite("targets", targets)?;
        let qr = HouseholderQr::factor(theta.to_owned(), false);
        let mut qtb = targets.to_owned();
        qr.apply_qt(&mut qtb);
        let rows = qr.steps();
        Ok(Self {
            r: qr.r(),
            qtb: qtb.slice(s![..rows, ..]).to_owned(),
        })
    }

    pub fn features(&self) -> usize {
        self.r.ncols()
    }

    pub fn targets(&self) -> usize {
        self.qtb.ncols()
    }

    fn solve_restricted(&self, target: usize, active: &[usize], ridge: T) -> Vec<T> {
        let rows = self.r.nrows();
        let a = Array2::from_shape_fn((rows, active.len()), |(i, j)| self.r[[i, active[j]]]);
        let b = self.qtb.slice(s![.., target..target + 1]);
        let x = if ridge > T::zero() {
            let (aa, bb) = augment_ridge(a.view(), b, ridge);
            min_norm_lstsq(aa.view(), bb.view())
        } else {
            min_norm_lstsq(a.view(), b)
        };
        x.column(0).to_vec()
    }

    fn stlsq_column(
        &self,
        target: usize,
        config: &StlsqConfig<T>,
        mut on_iteration: impl FnMut(&[usize]),
    ) -> (Vec<T>, Vec<usize>, usize) {
        let p = self.features();
        let mut active: Vec<usize> = (0..p).collect();
        let mut values = Vec::new();
        let mut iterations = 0;
        let mut converged = false;
        while iterations < config.max_iterations {
            iterations += 1;
            on_iteration(&active);
            values = self.solve_restricted(target, &active, config.ridge);
            let keep: Vec<usize> = active
                .iter()
                .zip(&values)
                .filter(|(_, &v)| v != T::zero() && v.abs() >= config.threshold)
                .map(|(&i, _)| i)
                .collect();
            if keep.len() == active.len() {
                converged = true;
                break;
            }
            active = keep;
            if active.is_empty() {
                converged = true;
                values.clear();
                break;
            }
        }
        if !converged {
            // Iteration cap reached right after a support change: refit on
            // the final support and enforce the threshold once more.
            values = self.solve_restricted(target, &active, config.ridge);
            let (a, v): (Vec<usize>, Vec<T>) = active
                .iter()
                .zip(&values)
                .filter(|(_, &v)| v != T::zero() && v.abs() >= config.threshold)
                .map(|(&i, &v)| (i, v))
                .unzip();
            active = a;
            values = v;
        }
        let mut column = vec![T::zero(); p];
        for (&i, &v) in active.iter().zip(&values) {
            column[i] = v;
        }
        (column, active, iterations)
    }

    pub fn solve(&self, config: &StlsqConfig<T>) -> Result<SparseSolution<T>, StlsqError> {
        config.validate()?;
        let (p, q) = (self.features(), self.targets());
        let mut coefficients = Array2::<T>::zeros((p, q));
        let mut support = Vec::with_capacity(q);
        let mut iterations_used = 0;
        for t in 0..q {
            let (column, active, its) = self.stlsq_column(t, config, |_| {});
            for (i, v) in column.into_iter().enumerate() {
                coefficients[[i, t]] = v;
            }
            iterations_used = iterations_used.max(its);
            support.push(active);
        }
        let degenerate = support.iter().any(Vec::is_empty);
        Ok(SparseSolution {
            coefficients,
            support,
            iterations_used,
            degenerate,
        })
    }
}

/// Sparse regression of `targets` on the columns of `theta`.
pub fn solve<T: Real>(
    theta: ArrayView2<T>,
    targets: ArrayView2<T>,
    config: &StlsqConfig<T>,
) -> Result<SparseSolution<T>, StlsqError> {
    config.validate()?;
    CompressedSystem::new(theta, targets)?.solve(config)
}
