//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};

use nalgebra::{DMatrix, DVector, RealField};
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar usable by the spectral routines.
///
/// Implemented for `f32` and `f64`. Tolerances scale with the precision:
/// the `f64` values are the documented defaults.
pub trait Real:
    RealField + Copy + Default + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync
{
    /// Relative cutoff below which a singular value counts as zero.
    fn rank_tol() -> Self;
    /// Tolerance accepted on `|U^T U - I|` before a basis is rejected.
    fn ortho_tol() -> Self;
    /// Slack allowed above 1 for cosines of principal angles.
    fn clamp_tol() -> Self;

    /// Thin SVD `(U, s, V)` with `s` nonincreasing, or `None` if the backend fails.
    fn svd_backend(a: &DMatrix<Self>) -> Option<(DMatrix<Self>, DVector<Self>, DMatrix<Self>)>;

    #[inline]
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

macro_rules! faer_svd {
    ($t:ty) => {
        fn svd_backend(a: &DMatrix<$t>) -> Option<(DMatrix<$t>, DVector<$t>, DMatrix<$t>)> {
            let (n, d) = a.shape();
            let m = faer::Mat::<$t>::from_fn(n, d, |i, j| a[(i, j)]);
            let svd = m.thin_svd().ok()?;
            let r = n.min(d);
            let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
            Some((
                DMatrix::from_fn(n, r, |i, j| u[(i, j)]),
                DVector::from_fn(r, |i, _| s[i]),
                DMatrix::from_fn(d, r, |i, j| v[(i, j)]),
            ))
        }
    };
}

impl Real for f64 {
    faer_svd!(f64);

    fn rank_tol() -> Self {
        1e-12
    }
    fn ortho_tol() -> Self {
        1e-8
    }
    fn clamp_tol() -> Self {
        1e-8
    }
}

impl Real for f32 {
    faer_svd!(f32);

    fn rank_tol() -> Self {
        1e-6
    }
    fn ortho_tol() -> Self {
        1e-4
    }
    fn clamp_tol() -> Self {
        1e-4
    }
}
