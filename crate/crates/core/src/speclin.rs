//! Dense spectral primitives: thin and truncated SVD, minimum-norm solves,
//! projectors, principal angles, Procrustes alignment and condition numbers.
//!
//! Every routine is a pure function of its inputs. Singular vectors follow a
//! fixed sign gauge (largest-magnitude entry of each left vector is
//! nonnegative) so repeated calls on identical bytes give identical bytes.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::error::{CcrError, Result};
use crate::scalar::Real;

/// Thin singular value decomposition `A = U diag(s) V^T` restricted to the
/// numerically nonzero spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd<T: Real> {
    /// `n x r`, orthonormal columns.
    pub u: DMatrix<T>,
    /// Length `r`, nonincreasing, positive.
    pub s: DVector<T>,
    /// `d x r`, orthonormal columns.
    pub v: DMatrix<T>,
}

impl<T: Real> ThinSvd<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn nrows(&self) -> usize {
        self.u.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.v.nrows()
    }

    pub fn sigma_max(&self) -> Option<T> {
        self.s.iter().next().copied()
    }

    pub fn sigma_min(&self) -> Option<T> {
        self.s.iter().last().copied()
    }

    pub fn reconstruct(&self) -> DMatrix<T> {
        let mut us = self.u.clone();
        for (j, &sj) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(sj);
        }
        us * self.v.transpose()
    }

    /// Leading `r` triples; see [`truncate`].
    pub fn truncate(&self, r: usize) -> TruncatedSvd<T> {
        truncate(self, r)
    }
}

/// Leading components of a [`ThinSvd`], remembering the rank that was asked for.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd<T: Real> {
    factors: ThinSvd<T>,
    requested: usize,
}

impl<T: Real> TruncatedSvd<T> {
    pub fn requested(&self) -> usize {
        self.requested
    }

    /// True when fewer than the requested number of components were available.
    pub fn shortfall(&self) -> bool {
        self.factors.rank() < self.requested
    }

    pub fn factors(&self) -> &ThinSvd<T> {
        &self.factors
    }

    pub fn into_factors(self) -> ThinSvd<T> {
        self.factors
    }
}

impl<T: Real> Deref for TruncatedSvd<T> {
    type Target = ThinSvd<T>;

    fn deref(&self) -> &ThinSvd<T> {
        &self.factors
    }
}

pub fn ensure_finite<T: Real>(a: &DMatrix<T>, what: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CcrError::NonFinite(what))
    }
}

/// Full thin SVD with all `min(n, d)` triples, sorted and sign-fixed, no rank cut.
pub fn svd_all<T: Real>(a: &DMatrix<T>) -> Result<ThinSvd<T>> {
    ensure_finite(a, "matrix")?;
    let (n, d) = a.shape();
    let m = n.min(d);
    if m == 0 {
        return Ok(ThinSvd {
            u: DMatrix::zeros(n, 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(d, 0),
        });
    }
    let (u_raw, s_raw, v_raw) = T::svd_backend(a).ok_or(CcrError::NoConvergence { rows: n, cols: d })?;
    if !s_raw.iter().all(|x| x.is_finite()) {
        return Err(CcrError::NoConvergence { rows: n, cols: d });
    }

    // Stable sort keeps the decomposition's own order among exact ties.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| {
        s_raw[j]
            .partial_cmp(&s_raw[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut u = DMatrix::zeros(n, m);
    let mut v = DMatrix::zeros(d, m);
    let mut s = DVector::zeros(m);
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = s_raw[src];
        u.set_column(dst, &u_raw.column(src));
        v.set_column(dst, &v_raw.column(src));
    }
    apply_sign_convention(&mut u, &mut v);
    Ok(ThinSvd { u, s, v })
}

/// Flip each column pair so the largest-magnitude entry of the left vector is nonnegative.
fn apply_sign_convention<T: Real>(u: &mut DMatrix<T>, v: &mut DMatrix<T>) {
    for j in 0..u.ncols() {
        let mut best = T::zero();
        let mut sign_negative = false;
        for &x in u.column(j).iter() {
            if x.abs() > best {
                best = x.abs();
                sign_negative = x < T::zero();
            }
        }
        if sign_negative {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
}

/// Thin SVD keeping triples with `sigma > rank_tol * sigma_max`.
pub fn thin_svd<T: Real>(a: &DMatrix<T>) -> Result<ThinSvd<T>> {
    thin_svd_with_tol(a, T::rank_tol())
}

pub fn thin_svd_with_tol<T: Real>(a: &DMatrix<T>, tol: T) -> Result<ThinSvd<T>> {
    thin_svd_scaled(a, tol, T::zero())
}

/// Thin SVD keeping `sigma > tol * max(sigma_max, scale)`; `scale` is a floor for
/// matrices whose natural magnitude is known, so an all-roundoff input has rank 0.
pub fn thin_svd_scaled<T: Real>(a: &DMatrix<T>, tol: T, scale: T) -> Result<ThinSvd<T>> {
    let full = svd_all(a)?;
    let cutoff = full.sigma_max().unwrap_or_else(T::zero).max(scale) * tol;
    let r = full.s.iter().take_while(|&&x| x > cutoff && x > T::zero()).count();
    Ok(keep_leading(full, r))
}

fn keep_leading<T: Real>(svd: ThinSvd<T>, r: usize) -> ThinSvd<T> {
    if r == svd.rank() {
        return svd;
    }
    ThinSvd {
        u: svd.u.columns(0, r).into_owned(),
        s: svd.s.rows(0, r).into_owned(),
        v: svd.v.columns(0, r).into_owned(),
    }
}

/// Leading `min(r, rank)` triples. A shortfall is recorded, not raised.
pub fn truncate<T: Real>(svd: &ThinSvd<T>, r: usize) -> TruncatedSvd<T> {
    let kept = r.min(svd.rank());
    TruncatedSvd {
        factors: keep_leading(svd.clone(), kept),
        requested: r,
    }
}

/// Minimum-norm least-squares solution `A^+ y`, zeroing singular values below `tol * sigma_max`.
pub fn min_norm_solve<T: Real>(a: &DMatrix<T>, y: &DVector<T>, tol: T) -> Result<DVector<T>> {
    if a.nrows() != y.len() {
        return Err(CcrError::DimensionMismatch(format!(
            "matrix has {} rows but right-hand side has length {}",
            a.nrows(),
            y.len()
        )));
    }
    if !y.iter().all(|x| x.is_finite()) {
        return Err(CcrError::NonFinite("right-hand side"));
    }
    let svd = thin_svd_with_tol(a, tol)?;
    let mut coef = svd.u.tr_mul(y);
    for (c, &s) in coef.iter_mut().zip(svd.s.iter()) {
        *c /= s;
    }
    Ok(&svd.v * coef)
}

/// Moore-Penrose pseudo-inverse with relative cutoff `tol`.
pub fn pseudo_inverse<T: Real>(a: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    let svd = thin_svd_with_tol(a, tol)?;
    let mut v_scaled = svd.v.clone();
    for (j, &s) in svd.s.iter().enumerate() {
        v_scaled.column_mut(j).unscale_mut(s);
    }
    Ok(v_scaled * svd.u.transpose())
}

/// Orthonormal basis of the column space (left singular vectors above the cutoff).
pub fn column_basis<T: Real>(a: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    Ok(thin_svd_with_tol(a, tol)?.u)
}

/// `max |U^T U - I|`.
pub fn orthonormality_defect<T: Real>(u: &DMatrix<T>) -> T {
    let mut g = u.tr_mul(u);
    for i in 0..g.nrows() {
        g[(i, i)] -= T::one();
    }
    max_abs(&g)
}

fn require_orthonormal<T: Real>(u: &DMatrix<T>) -> Result<()> {
    ensure_finite(u, "basis")?;
    let deviation = orthonormality_defect(u);
    if deviation > T::ortho_tol() {
        return Err(CcrError::NotOrthonormal {
            deviation: deviation.as_f64(),
        });
    }
    Ok(())
}

/// Orthogonal projector `U U^T` onto the span of orthonormal columns.
pub fn projector<T: Real>(u: &DMatrix<T>) -> Result<DMatrix<T>> {
    require_orthonormal(u)?;
    let p = u * u.transpose();
    // Exact symmetry regardless of summation order.
    Ok((&p + p.transpose()) * T::lit(0.5))
}

/// Cosines of the principal angles between `span(u1)` and `span(u2)`,
/// nonincreasing and clamped to `[0, 1]`.
pub fn principal_angle_cosines<T: Real>(u1: &DMatrix<T>, u2: &DMatrix<T>) -> Result<Vec<T>> {
    if u1.nrows() != u2.nrows() {
        return Err(CcrError::DimensionMismatch(format!(
            "bases live in R^{} and R^{}",
            u1.nrows(),
            u2.nrows()
        )));
    }
    require_orthonormal(u1)?;
    require_orthonormal(u2)?;
    let overlap = u2.tr_mul(u1);
    Ok(clamp_cosines(svd_all(&overlap)?.s.iter().copied()))
}

pub(crate) fn clamp_cosines<T: Real>(values: impl Iterator<Item = T>) -> Vec<T> {
    values
        .map(|c| c.max(T::zero()).min(T::one()))
        .collect()
}

/// Orthogonal `Q` minimising `||A - B Q||` for orthonormal-column `A`, `B` of equal shape.
pub fn procrustes_rotation<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if a.shape() != b.shape() {
        return Err(CcrError::DimensionMismatch(format!(
            "Procrustes needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    require_orthonormal(a)?;
    require_orthonormal(b)?;
    let cross = b.tr_mul(a);
    let svd = svd_all(&cross)?;
    Ok(&svd.u * svd.v.transpose())
}

/// `sigma_max / sigma_min` over a spectrum.
pub fn condition_number<T: Real>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(CcrError::DegenerateSpectrum("empty spectrum".into()));
    }
    let mut lo = values[0];
    let mut hi = values[0];
    for &v in values {
        if !v.is_finite() {
            return Err(CcrError::NonFinite("spectrum"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo <= T::zero() {
        return Err(CcrError::DegenerateSpectrum(format!(
            "smallest singular value {} is not positive",
            lo
        )));
    }
    Ok(hi / lo)
}

/// Generalized condition number `sigma_max(A) / sigma_min(B)`.
pub fn cross_condition<T: Real>(sigma_max_a: T, sigma_min_b: T) -> Result<T> {
    if !(sigma_min_b > T::zero()) || !(sigma_max_a > T::zero()) {
        return Err(CcrError::DegenerateSpectrum(format!(
            "cross condition needs positive inputs, got {} and {}",
            sigma_max_a, sigma_min_b
        )));
    }
    Ok(sigma_max_a / sigma_min_b)
}

/// Gram-Schmidt orthonormalization (via Householder QR with `diag(R) >= 0`),
/// so column `j` of the result spans the same flag as columns `0..=j` of the input.
pub fn orthonormalize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols().min(r.nrows()) {
        if r[(j, j)] < T::zero() {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Spectral norm (largest singular value).
pub fn operator_norm<T: Real>(m: &DMatrix<T>) -> Result<T> {
    ensure_finite(m, "matrix")?;
    if m.is_empty() {
        return Ok(T::zero());
    }
    Ok(m
        .clone()
        .singular_values()
        .iter()
        .fold(T::zero(), |acc, &x| acc.max(x)))
}

pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn rank_deficient(n: usize, d: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian(n, r, &mut rng) * gaussian(r, d, &mut rng)
    }

    #[test]
    fn diagonal_spectrum() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let svd = thin_svd(&a).unwrap();
        assert_eq!(svd.s.as_slice(), &[3.0, 2.0, 1.0]);
        assert!((&svd.u - DMatrix::identity(3, 3)).abs().max() < 1e-14);
        assert!((&svd.v - DMatrix::identity(3, 3)).abs().max() < 1e-14);
    }

    #[test]
    fn zero_matrix_has_empty_spectrum() {
        let svd = thin_svd(&DMatrix::<f64>::zeros(4, 3)).unwrap();
        assert_eq!(svd.rank(), 0);
        assert_eq!(svd.u.shape(), (4, 0));
        assert_eq!(svd.v.shape(), (3, 0));
    }

    #[test]
    fn rank_one_matches_gram_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = gaussian(5, 1, &mut rng);
        let mut b = gaussian(4, 1, &mut rng);
        a /= a.norm();
        b /= b.norm();
        let m = &a * b.transpose();
        let svd = thin_svd(&m).unwrap();
        assert_eq!(svd.rank(), 1);
        assert!((svd.s[0] - 1.0).abs() < 1e-12);

        // Oracle: eigendecomposition of A^T A.
        let eig = (m.transpose() * &m).symmetric_eigen();
        let (imax, lmax) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
        assert!((lmax.sqrt() - svd.s[0]).abs() < 1e-10);
        let ev = eig.eigenvectors.column(imax);
        assert!((ev.dot(&svd.v.column(0)).abs() - 1.0).abs() < 1e-10);
        assert!((a.column(0).dot(&svd.u.column(0)).abs() - 1.0).abs() < 1e-12);
        assert!((b.column(0).dot(&svd.v.column(0)).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sign_convention_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(9, 6, &mut rng);
        let svd = thin_svd(&a).unwrap();
        for j in 0..svd.rank() {
            let col = svd.u.column(j);
            let imax = col.iamax();
            assert!(col[imax] >= 0.0);
        }
        assert!(orthonormality_defect(&svd.u) <= 1e-10);
        assert!(orthonormality_defect(&svd.v) <= 1e-10);
        assert!((svd.reconstruct() - &a).norm() <= 1e-8 * svd.s[0]);
        assert!(svd.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn nonfinite_rejected() {
        let mut a = DMatrix::<f64>::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&a), Err(CcrError::NonFinite(_))));
    }

    #[test]
    fn truncation() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let t = truncate(&thin_svd(&a).unwrap(), 2);
        assert_eq!(t.s.as_slice(), &[3.0, 2.0]);
        assert!(!t.shortfall());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u0 = orthonormalize(&gaussian(7, 2, &mut rng));
        let v0 = orthonormalize(&gaussian(6, 2, &mut rng));
        let a = &u0 * DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 1.0])) * v0.transpose();
        let full = thin_svd(&a).unwrap();
        let t2 = truncate(&full, 2);
        assert!(operator_norm(&(&a - t2.reconstruct())).unwrap() <= 1e-10);
        let t5 = truncate(&full, 5);
        assert_eq!(t5.rank(), 2);
        assert_eq!(t5.requested(), 5);
        assert!(t5.shortfall());
    }

    #[test]
    fn min_norm_small_cases() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = min_norm_solve(&DMatrix::identity(3, 3), &y, 1e-12).unwrap();
        assert!((x - &y).norm() < 1e-14);

        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let x = min_norm_solve(&a, &DVector::from_vec(vec![2.0, 5.0]), 1e-12).unwrap();
        assert!((x - DVector::from_vec(vec![2.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn min_norm_normal_equations_and_null_space() {
        let a = rank_deficient(20, 8, 5, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let y = DVector::from_fn(20, |_, _| rng.sample(StandardNormal));
        let x = min_norm_solve(&a, &y, 1e-12).unwrap();
        let normal = a.transpose() * &a * &x - a.transpose() * &y;
        assert!(normal.norm() <= 1e-8);
        // Oracle null space: eigenvectors of A^T A with ~zero eigenvalue.
        let eig = (a.transpose() * &a).symmetric_eigen();
        let top = eig.eigenvalues.max();
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            if l < 1e-10 * top {
                assert!(eig.eigenvectors.column(i).dot(&x).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn min_norm_dimension_mismatch() {
        let r = min_norm_solve(&DMatrix::<f64>::identity(3, 3), &DVector::zeros(2), 1e-12);
        assert!(matches!(r, Err(CcrError::DimensionMismatch(_))));
    }

    #[test]
    fn projector_cases() {
        let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let p = projector(&e1).unwrap();
        assert_eq!(p, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 0.0])));
        assert_eq!(projector(&DMatrix::<f64>::identity(4, 4)).unwrap(), DMatrix::identity(4, 4));

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let u = orthonormalize(&gaussian(6, 2, &mut rng));
        let p = projector(&u).unwrap();
        assert!((p.trace() - 2.0).abs() <= 1e-10);
        assert!(max_abs(&(&p * &p - &p)) <= 1e-10);

        let bad = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert!(matches!(projector(&bad), Err(CcrError::NotOrthonormal { .. })));
    }

    #[test]
    fn principal_angles() {
        let e1 = DMatrix::from_column_slice(3, 1, &[1.0f64, 0.0, 0.0]);
        let e2 = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        assert_eq!(principal_angle_cosines(&e1, &e1).unwrap(), vec![1.0]);
        assert!(principal_angle_cosines(&e1, &e2).unwrap()[0].abs() < 1e-15);
        let h = 0.5f64.sqrt();
        let diag = DMatrix::from_column_slice(3, 1, &[h, h, 0.0]);
        let c = principal_angle_cosines(&e1, &diag).unwrap();
        // Oracle: the 1x1 Gram product is the inner product itself.
        let gram = diag.tr_mul(&e1)[(0, 0)];
        assert!((c[0] - gram.abs()).abs() < 1e-15);
        assert!((c[0] - h).abs() < 1e-15);
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = orthonormalize(&gaussian(8, 3, &mut rng));
        let q = procrustes_rotation(&a, &a).unwrap();
        assert!((q - DMatrix::identity(3, 3)).abs().max() <= 1e-10);

        let r0 = orthonormalize(&gaussian(3, 3, &mut rng));
        let b = &a * &r0;
        let q = procrustes_rotation(&a, &b).unwrap();
        assert!((&b * &q - &a).abs().max() <= 1e-10);
        assert!((q - r0.transpose()).abs().max() <= 1e-10);
    }

    #[test]
    fn procrustes_beats_rotation_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let a = orthonormalize(&gaussian(6, 2, &mut rng));
            let b = orthonormalize(&gaussian(6, 2, &mut rng));
            let q = procrustes_rotation(&a, &b).unwrap();
            let achieved = (&a - &b * &q).norm();
            let mut best = f64::INFINITY;
            for deg in 0..360 {
                let t = (deg as f64).to_radians();
                for flip in [1.0, -1.0] {
                    let rot = DMatrix::from_row_slice(2, 2, &[t.cos(), -flip * t.sin(), t.sin(), flip * t.cos()]);
                    best = best.min((&a - &b * rot).norm());
                }
            }
            assert!(achieved <= best + 1e-3, "{achieved} vs grid {best}");
        }
    }

    #[test]
    fn condition_numbers() {
        assert_eq!(condition_number(&[3.0, 2.0, 1.0]).unwrap(), 3.0);
        assert_eq!(condition_number(&[0.7, 0.7]).unwrap(), 1.0);
        assert_eq!(cross_condition(2.0, 0.5).unwrap(), 4.0);
        assert!(matches!(condition_number(&[1.0, 0.0]), Err(CcrError::DegenerateSpectrum(_))));
        assert!(cross_condition(1.0, 0.0).is_err());
    }

    #[test]
    fn single_precision_smoke() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0f32, 2.0, 1.0]));
        let svd = thin_svd(&a).unwrap();
        assert_eq!(svd.rank(), 3);
        let x = min_norm_solve(&a, &DVector::from_vec(vec![3.0f32, 2.0, 1.0]), f32::rank_tol()).unwrap();
        assert!((x - DVector::from_element(3, 1.0f32)).norm() < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn projector_algebra(seed in any::<u64>(), n in 3usize..10, r in 1usize..3) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let u = orthonormalize(&gaussian(n, r, &mut rng));
                let p = projector(&u).unwrap();
                prop_assert_eq!(&p, &p.transpose());
                prop_assert!(max_abs(&(&p * &p - &p)) <= 1e-10);
                prop_assert!((p.trace() - r as f64).abs() <= 1e-8);
            }

            #[test]
            fn min_norm_has_no_null_component(seed in any::<u64>(), rank in 1usize..5) {
                let a = rank_deficient(12, 7, rank, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
                let y = DVector::from_fn(12, |_, _| rng.sample(StandardNormal));
                let x = min_norm_solve(&a, &y, 1e-12).unwrap();
                let pinv = pseudo_inverse(&a, 1e-12).unwrap();
                let null_part = &x - &pinv * (&a * &x);
                prop_assert!(null_part.norm() <= 1e-9);
            }

            #[test]
            fn rank_deficient_reconstruction(seed in any::<u64>(), rank in 1usize..6, n in 6usize..14, d in 4usize..9) {
                let a = rank_deficient(n, d, rank, seed);
                let svd = svd_all(&a).unwrap();
                prop_assert!(max_abs(&(svd.reconstruct() - &a)) <= 1e-10 * (1.0 + max_abs(&a)));
                prop_assert!(orthonormality_defect(&svd.u) <= 1e-10);
                prop_assert!(svd.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
            }

            #[test]
            fn svd_is_deterministic(seed in any::<u64>()) {
                let a = rank_deficient(8, 6, 4, seed);
                let s1 = thin_svd(&a).unwrap();
                let s2 = thin_svd(&a.clone()).unwrap();
                prop_assert_eq!(s1, s2);
            }

            #[test]
            fn principal_angles_symmetric(seed in any::<u64>(), a in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let u1 = orthonormalize(&gaussian(9, a, &mut rng));
                let u2 = orthonormalize(&gaussian(9, a, &mut rng));
                let c12 = principal_angle_cosines(&u1, &u2).unwrap();
                let c21 = principal_angle_cosines(&u2, &u1).unwrap();
                for (x, y) in c12.iter().zip(&c21) {
                    prop_assert!((x - y).abs() <= 1e-10);
                }
            }
        }
    }
}
