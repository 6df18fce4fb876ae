//! Regularized solves with Hermitian positive semidefinite matrices.

use nalgebra::{DMatrix, DVector};

use crate::ansatz::C64;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Regularization {
    /// Relative diagonal shift: `S → S + ε diag(S)`.
    pub diag_shift: f64,
    /// Eigenvalues of the diagonally scaled tensor below `cutoff × λ_max` are discarded.
    pub pinv_cutoff: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Self { diag_shift: 1e-4, pinv_cutoff: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct SolveInfo {
    pub rank: usize,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

/// `x = pinv(S + ε diag(S)) b`, solved in diagonally scaled coordinates.
///
/// With `D = diag(S)` the eigendecomposition and the cutoff act on
/// `D^{-1/2} S D^{-1/2}`, whose diagonal is one. Parameters whose features are
/// rare have a tiny `S_kk` but are not degenerate with the others; a cutoff
/// relative to the unscaled `λ_max` would switch them on and off as the state
/// moves, which makes the parameter velocity discontinuous. Directions with
/// `S_kk = 0` (constant features) get no update.
pub fn pinv_solve(s: &DMatrix<C64>, b: &DVector<C64>, reg: Regularization) -> Result<(DVector<C64>, SolveInfo)> {
    let n = s.nrows();
    if n != s.ncols() || n != b.len() {
        return Err(Error::Numerical("dimension mismatch in linear solve".into()));
    }
    if !s.iter().chain(b.iter()).all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::Numerical("non-finite geometric tensor".into()));
    }
    let diag: Vec<f64> = (0..n).map(|i| s[(i, i)].re).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    if !(dmax > 0.0) {
        // pinv(0) = 0: a single basis configuration only changes its global phase.
        return Ok((DVector::zeros(n), SolveInfo::default()));
    }
    let live: Vec<usize> = (0..n).filter(|&i| diag[i] > DIAG_FLOOR * dmax).collect();
    let scale: Vec<f64> = live.iter().map(|&i| diag[i].sqrt().recip()).collect();
    let m = live.len();
    let mut t = DMatrix::<C64>::from_fn(m, m, |a, c| s[(live[a], live[c])] * (scale[a] * scale[c]));
    for a in 0..m {
        t[(a, a)] += C64::new(reg.diag_shift, 0.0);
    }
    // Exact hermitization guards against roundoff asymmetry.
    let t = (&t + t.adjoint()) * C64::new(0.5, 0.0);
    let eig = t.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let thresh = reg.pinv_cutoff * lambda_max;
    let u = &eig.eigenvectors;
    let bt = DVector::<C64>::from_fn(m, |a, _| b[live[a]] * scale[a]);
    let ub = u.adjoint() * bt;
    let mut rank = 0;
    let mut y = DVector::<C64>::zeros(m);
    for k in 0..m {
        let l = eig.eigenvalues[k];
        if l > thresh {
            y[k] = ub[k] / l;
            rank += 1;
        }
    }
    let yt = u * y;
    let mut x = DVector::<C64>::zeros(n);
    for (a, &i) in live.iter().enumerate() {
        x[i] = yt[a] * scale[a];
    }
    Ok((x, SolveInfo { rank, lambda_max, lambda_min }))
}

/// Parameters with `S_kk ≤ DIAG_FLOOR × max S_kk` are treated as constant.
pub const DIAG_FLOOR: f64 = 1e-30;

/// `Σ_i p_i F_i F_iᵀ − m mᵀ` with `m = Σ_i p_i F_i`, for probabilities `p`
/// over the rows of `f`.
pub fn weighted_covariance(f: &DMatrix<f64>, p: &[f64]) -> DMatrix<f64> {
    let r = DVector::from_iterator(p.len(), p.iter().map(|w| w.max(0.0).sqrt()));
    let mut g = f.clone();
    for mut col in g.column_iter_mut() {
        col.component_mul_assign(&r);
    }
    let m = f.tr_mul(&DVector::from_column_slice(p));
    let mut s = g.transpose() * &g;
    s -= &m * m.transpose();
    s
}

/// Lift a real symmetric matrix to complex storage.
pub fn complexify(s: &DMatrix<f64>) -> DMatrix<C64> {
    s.map(|x| C64::new(x, 0.0))
}
