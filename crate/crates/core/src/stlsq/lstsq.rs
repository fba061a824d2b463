//! Dense Householder QR and minimum-norm least squares.

use ndarray::{s, Array2, ArrayView2};

use crate::scalar::Real;

/// Householder QR, optionally with column pivoting. Reflector vectors are
/// stored below the diagonal of `qr` with an implicit unit leading entry.
#[derive(Debug, Clone)]
pub(crate) struct HouseholderQr<T> {
    qr: Array2<T>,
    tau: Vec<T>,
    perm: Vec<usize>,
}

impl<T: Real> HouseholderQr<T> {
    pub(crate) fn factor(mut a: Array2<T>, pivot: bool) -> Self {
        let (m, k) = a.dim();
        let steps = m.min(k);
        let mut tau = vec![T::zero(); steps];
        let mut perm: Vec<usize> = (0..k).collect();
        for j in 0..steps {
            if pivot {
                // Exact recomputation of trailing column norms; the systems
                // here are small enough that downdating is not worth it.
                let mut best = j;
                let mut best_norm = T::neg_infinity();
                for c in j..k {
                    let norm = a.slice(s![j.., c]).iter().map(|&x| x * x).sum::<T>();
                    if norm > best_norm {
                        best_norm = norm;
                        best = c;
                    }
                }
                if best != j {
                    for r in 0..m {
                        a.swap([r, j], [r, best]);
                    }
                    perm.swap(j, best);
                }
            }
            let alpha = a.slice(s![j.., j]).iter().map(|&x| x * x).sum::<T>().sqrt();
            if alpha == T::zero() {
                continue;
            }
            let x0 = a[[j, j]];
            let beta = if x0 >= T::zero() { -alpha } else { alpha };
            let v0 = x0 - beta;
            tau[j] = (beta - x0) / beta;
            for r in j + 1..m {
                a[[r, j]] = a[[r, j]] / v0;
            }
            a[[j, j]] = beta;
            for c in j + 1..k {
                let mut w = a[[j, c]];
                for r in j + 1..m {
                    w = w + a[[r, j]] * a[[r, c]];
                }
                w = w * tau[j];
                a[[j, c]] = a[[j, c]] - w;
                for r in j + 1..m {
                    a[[r, c]] = a[[r, c]] - w * a[[r, j]];
                }
            }
        }
        Self { qr: a, tau, perm }
    }

    pub(crate) fn steps(&self) -> usize {
        self.tau.len()
    }

    /// Overwrites `b` with `Qᵀ b`.
    pub(crate) fn apply_qt(&self, b: &mut Array2<T>) {
        let m = self.qr.nrows();
        for j in 0..self.steps() {
            let tau = self.tau[j];
            if tau == T::zero() {
                continue;
            }
            for c in 0..b.ncols() {
                let mut w = b[[j, c]];
                for r in j + 1..m {
                    w = w + self.qr[[r, j]] * b[[r, c]];
                }
                w = w * tau;
                b[[j, c]] = b[[j, c]] - w;
                for r in j + 1..m {
                    b[[r, c]] = b[[r, c]] - w * self.qr[[r, j]];
                }
            }
        }
    }

    /// Overwrites `b` (m rows) with `Q b`.
    pub(crate) fn apply_q(&self, b: &mut Array2<T>) {
        let m = self.qr.nrows();
        for j in (0..self.steps()).rev() {
            let tau = self.tau[j];
            if tau == T::zero() {
                continue;
            }
            for c in 0..b.ncols() {
                let mut w = b[[j, c]];
                for r in j + 1..m {
                    w = w + self.qr[[r, j]] * b[[r, c]];
                }
                w = w * tau;
                b[[j, c]] = b[[j, c]] - w;
                for r in j + 1..m {
                    b[[r, c]] = b[[r, c]] - w * self.qr[[r, j]];
                }
            }
        }
    }

    /// Upper-trapezoidal factor, `min(m, k) × k`.
    pub(crate) fn r(&self) -> Array2<T> {
        let steps = self.steps();
        let k = self.qr.ncols();
        Array2::from_shape_fn((steps, k), |(i, j)| if j >= i { self.qr[[i, j]] } else { T::zero() })
    }

    /// Numerical rank from the pivoted diagonal.
    pub(crate) fn rank(&self) -> usize {
        let (m, k) = self.qr.dim();
        let steps = self.steps();
        if steps == 0 {
            return 0;
        }
        let lead = self.qr[[0, 0]].abs();
        if lead == T::zero() {
            return 0;
        }
        let tol = T::epsilon() * T::from_count(m.max(k)) * lead;
        (0..steps).take_while(|&i| self.qr[[i, i]].abs() > tol).count()
    }
}

/// Minimum-norm solution of `min ‖A X − B‖` via column-pivoted QR followed,
/// when `A` is rank deficient, by a complete orthogonal decomposition.
pub(crate) fn min_norm_lstsq<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let (_, k) = a.dim();
    let q = b.ncols();
    let qr = HouseholderQr::factor(a.to_owned(), true);
    let mut qtb = b.to_owned();
    qr.apply_qt(&mut qtb);
    let rank = qr.rank();
    let mut x = Array2::<T>::zeros((k, q));
    if rank == 0 {
        return x;
    }
    let r = qr.r();
    let y = if rank == k {
        back_substitute(r.slice(s![..k, ..k]), qtb.slice(s![..k, ..]))
    } else {
        // R = [R11 R12] (rank × k). Factor its transpose: Rᵀ = W U, so
        // R y = c becomes Uᵀ (Wᵀ y) = c with minimum-norm y = W [t; 0].
        let trap = r.slice(s![..rank, ..]).t().to_owned();
        let cod = HouseholderQr::factor(trap, false);
        let u = cod.r();
        let t = forward_substitute_transposed(u.view(), qtb.slice(s![..rank, ..]));
        let mut full = Array2::<T>::zeros((k, q));
        full.slice_mut(s![..rank, ..]).assign(&t);
        cod.apply_q(&mut full);
        full
    };
    for (j, &col) in qr.perm.iter().enumerate() {
        x.row_mut(col).assign(&y.row(j));
    }
    x
}

// Solves U X = C for upper-triangular U.
fn back_substitute<T: Real>(u: ArrayView2<T>, c: ArrayView2<T>) -> Array2<T> {
    let n = u.nrows();
    let mut x = c.to_owned();
    for col in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut acc = x[[i, col]];
            for j in i + 1..n {
                acc = acc - u[[i, j]] * x[[j, col]];
            }
            x[[i, col]] = acc / u[[i, i]];
        }
    }
    x
}

// Solves Uᵀ X = C for upper-triangular U (i.e. lower-triangular system).
fn forward_substitute_transposed<T: Real>(u: ArrayView2<T>, c: ArrayView2<T>) -> Array2<T> {
    let n = u.nrows();
    let mut x = c.to_owned();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut acc = x[[i, col]];
            for j in 0..i {
                acc = acc - u[[j, i]] * x[[j, col]];
            }
            x[[i, col]] = acc / u[[i, i]];
        }
    }
    x
}

/// Stacks `[A; √α I]` and `[B; 0]` so that plain least squares on the result
/// solves the ridge problem.
pub(crate) fn augment_ridge<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>, alpha: T) -> (Array2<T>, Array2<T>) {
    let (m, k) = a.dim();
    let q = b.ncols();
    let mut aa = Array2::<T>::zeros((m + k, k));
    aa.slice_mut(s![..m, ..]).assign(&a);
    let root = alpha.sqrt();
    for i in 0..k {
        aa[[m + i, i]] = root;
    }
    let mut bb = Array2::<T>::zeros((m + k, q));
    bb.slice_mut(s![..m, ..]).assign(&b);
    (aa, bb)
}
