//! Canonical correlation regression: the first stage weights the empirical
//! canonical correlations `U~_l^T U_k` by diagonal matrices `(A_L, A_R)`; the
//! second stage is the minimum-norm least-squares solve against
//! `P = U~_l A_L (U~_l^T U_k) A_R V_k^T`, done in factored form.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, GroundTruth};
use crate::error::{CcrError, Result};
use crate::scalar::Real;
use crate::speclin::{
    column_basis, min_norm_solve, pseudo_inverse, thin_svd, thin_svd_scaled, truncate, ThinSvd,
    TruncatedSvd,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeftWeight {
    Identity,
    InverseInstrumentSpectrum,
    CustomDiagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RightWeight {
    Identity,
    CovariateSpectrum,
    CustomDiagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    pub left: LeftWeight,
    pub right: RightWeight,
}

impl WeightSpec {
    pub fn pca() -> Self {
        WeightSpec { left: LeftWeight::Identity, right: RightWeight::CovariateSpectrum }
    }

    pub fn whiten() -> Self {
        WeightSpec { left: LeftWeight::Identity, right: RightWeight::Identity }
    }

    pub fn cca() -> Self {
        WeightSpec { left: LeftWeight::InverseInstrumentSpectrum, right: RightWeight::Identity }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[serde(rename = "naive")]
    Naive2Sls,
    #[serde(rename = "pca")]
    Pca2Sls,
    #[serde(rename = "whiten")]
    Whiten2Sls,
    #[serde(rename = "cca")]
    Cca2Sls,
    #[serde(rename = "oracle")]
    Oracle2Sls,
    #[serde(rename = "custom")]
    CustomCcr(WeightSpec),
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Naive2Sls => "naive",
            EstimatorKind::Pca2Sls => "pca",
            EstimatorKind::Whiten2Sls => "whiten",
            EstimatorKind::Cca2Sls => "cca",
            EstimatorKind::Oracle2Sls => "oracle",
            EstimatorKind::CustomCcr(_) => "custom",
        }
    }

    /// Weights for members of the CCR family; `None` for naive and oracle 2SLS.
    pub fn weights(&self) -> Option<WeightSpec> {
        match self {
            EstimatorKind::Pca2Sls => Some(WeightSpec::pca()),
            EstimatorKind::Whiten2Sls => Some(WeightSpec::whiten()),
            EstimatorKind::Cca2Sls => Some(WeightSpec::cca()),
            EstimatorKind::CustomCcr(w) => Some(w.clone()),
            EstimatorKind::Naive2Sls | EstimatorKind::Oracle2Sls => None,
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = CcrError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "naive" => EstimatorKind::Naive2Sls,
            "pca" => EstimatorKind::Pca2Sls,
            "whiten" => EstimatorKind::Whiten2Sls,
            "cca" => EstimatorKind::Cca2Sls,
            "oracle" => EstimatorKind::Oracle2Sls,
            other => {
                return Err(CcrError::InvalidInput(format!(
                    "unknown estimator `{other}` (expected naive, pca, whiten, cca or oracle)"
                )))
            }
        })
    }
}

fn default_k() -> usize {
    8
}
fn default_ell() -> usize {
    10
}
fn default_pinv_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_ell")]
    pub ell: usize,
    #[serde(default = "default_pinv_tol")]
    pub pinv_tol: f64,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind, k: usize, ell: usize) -> Self {
        EstimatorSpec { kind, k, ell, pinv_tol: default_pinv_tol() }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn validate_ranks(&self) -> Result<()> {
        if self.k == 0 || self.ell == 0 {
            return Err(CcrError::InvalidInput(format!(
                "truncation ranks must be positive (k = {}, ell = {})",
                self.k, self.ell
            )));
        }
        if !(self.pinv_tol >= 0.0 && self.pinv_tol < 1.0) {
            return Err(CcrError::InvalidInput(format!("pinv_tol {} not in [0, 1)", self.pinv_tol)));
        }
        Ok(())
    }
}

fn custom_diagonal<T: Real>(values: &[f64], len: usize, side: &str) -> Result<DVector<T>> {
    if values.len() != len {
        return Err(CcrError::InvalidInput(format!(
            "{side} weight has {} entries, expected {len}",
            values.len()
        )));
    }
    if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(CcrError::InvalidInput(format!(
            "{side} weight entries must be finite and strictly positive"
        )));
    }
    Ok(DVector::from_iterator(len, values.iter().map(|&v| T::lit(v))))
}

/// Diagonals of `(A_L, A_R)` for the given truncated factors.
pub fn resolve_weights<T: Real>(
    weights: &WeightSpec,
    cov: &TruncatedSvd<T>,
    inst: &TruncatedSvd<T>,
    pinv_tol: T,
) -> Result<(DVector<T>, DVector<T>)> {
    let (k, ell) = (cov.rank(), inst.rank());
    let left = match &weights.left {
        LeftWeight::Identity => DVector::from_element(ell, T::one()),
        LeftWeight::InverseInstrumentSpectrum => {
            let smax = inst.sigma_max().unwrap_or_else(T::zero);
            let threshold = pinv_tol * smax;
            let mut out = DVector::zeros(ell);
            for (o, &s) in out.iter_mut().zip(inst.s.iter()) {
                if !(s > threshold) {
                    return Err(CcrError::SingularWeight { value: s.as_f64(), threshold: threshold.as_f64() });
                }
                *o = T::one() / s;
            }
            out
        }
        LeftWeight::CustomDiagonal(v) => custom_diagonal(v, ell, "left")?,
    };
    let right = match &weights.right {
        RightWeight::Identity => DVector::from_element(k, T::one()),
        RightWeight::CovariateSpectrum => cov.s.clone(),
        RightWeight::CustomDiagonal(v) => custom_diagonal(v, k, "right")?,
    };
    Ok((left, right))
}

/// First-stage spectral construction shared by every CCR member.
#[derive(Debug, Clone)]
pub struct FirstStage<T: Real> {
    pub cov: TruncatedSvd<T>,
    pub inst: TruncatedSvd<T>,
    /// `U~_l^T U_k`, `ell x k`.
    pub overlap: DMatrix<T>,
    pub left_weights: DVector<T>,
    pub right_weights: DVector<T>,
    /// `A_L (U~_l^T U_k) A_R`.
    pub delta: DMatrix<T>,
    pub delta_svd: ThinSvd<T>,
    pub pinv_tol: T,
}

impl<T: Real> FirstStage<T> {
    /// `rank(Delta)`.
    pub fn rank(&self) -> usize {
        self.delta_svd.rank()
    }

    /// Either truncation returned fewer components than requested.
    pub fn rank_shortfall(&self) -> bool {
        self.cov.shortfall() || self.inst.shortfall()
    }

    /// `k > ell`: fewer instrument directions than covariate directions.
    pub fn under_instrumented(&self) -> bool {
        self.cov.rank() > self.inst.rank()
    }

    /// Right singular vectors `V_k` of the covariates.
    pub fn v_k(&self) -> &DMatrix<T> {
        &self.cov.v
    }

    /// Singular values of the unweighted overlap (empirical canonical correlations).
    pub fn canonical_correlations(&self) -> Result<Vec<T>> {
        let s = crate::speclin::svd_all(&self.overlap)?.s;
        Ok(crate::speclin::clamp_cosines(s.iter().copied()))
    }
}

/// Builds the first stage from precomputed thin SVDs of `Z_X` and `Z_W`.
pub fn first_stage_from_svds<T: Real>(
    zx_svd: &ThinSvd<T>,
    zw_svd: &ThinSvd<T>,
    k: usize,
    ell: usize,
    weights: &WeightSpec,
    pinv_tol: T,
) -> Result<FirstStage<T>> {
    if zx_svd.nrows() != zw_svd.nrows() {
        return Err(CcrError::DimensionMismatch(format!(
            "Z_X has {} rows, Z_W has {}",
            zx_svd.nrows(),
            zw_svd.nrows()
        )));
    }
    let cov = truncate(zx_svd, k);
    let inst = truncate(zw_svd, ell);
    let overlap = inst.u.tr_mul(&cov.u);
    let (left, right) = resolve_weights(weights, &cov, &inst, pinv_tol)?;
    let mut delta = overlap.clone();
    for (i, &a) in left.iter().enumerate() {
        delta.row_mut(i).scale_mut(a);
    }
    for (j, &b) in right.iter().enumerate() {
        delta.column_mut(j).scale_mut(b);
    }
    let scale = left.amax() * right.amax();
    let delta_svd = thin_svd_scaled(&delta, T::rank_tol().max(pinv_tol), scale)?;
    Ok(FirstStage {
        cov,
        inst,
        overlap,
        left_weights: left,
        right_weights: right,
        delta,
        delta_svd,
        pinv_tol,
    })
}

fn check_rank_request<T: Real>(z: &DMatrix<T>, rank: usize, name: &str) -> Result<()> {
    let cap = z.nrows().min(z.ncols());
    if rank > cap {
        return Err(CcrError::DimensionMismatch(format!(
            "{name} = {rank} exceeds min(n, cols) = {cap}"
        )));
    }
    Ok(())
}

/// Truncated SVDs of both designs plus the weighted overlap for a CCR member.
pub fn build_first_stage<T: Real>(
    z_x: &DMatrix<T>,
    z_w: &DMatrix<T>,
    spec: &EstimatorSpec,
) -> Result<FirstStage<T>> {
    spec.validate_ranks()?;
    let weights = spec.kind.weights().ok_or_else(|| {
        CcrError::InvalidInput(format!("`{}` is not a canonical correlation regression", spec.name()))
    })?;
    check_rank_request(z_x, spec.k, "k")?;
    check_rank_request(z_w, spec.ell, "ell")?;
    let zx_svd = thin_svd(z_x)?;
    let zw_svd = thin_svd(z_w)?;
    first_stage_from_svds(&zx_svd, &zw_svd, spec.k, spec.ell, &weights, T::lit(spec.pinv_tol))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcrFit<T: Real> {
    pub beta: DVector<T>,
    /// Number of `Delta` singular values used.
    pub rank: usize,
    /// `Delta` vanished; `beta` is zero.
    pub zero_design: bool,
}

/// `V_k V_D S_D^{-1} U_D^T U~^T y` over singular values above `pinv_tol * s_max`.
pub(crate) fn solve_factored<T: Real>(
    inst_u: &DMatrix<T>,
    delta_svd: &ThinSvd<T>,
    v_k: &DMatrix<T>,
    y: &DVector<T>,
    pinv_tol: T,
) -> CcrFit<T> {
    let smax = delta_svd.sigma_max().unwrap_or_else(T::zero);
    let r = delta_svd
        .s
        .iter()
        .take_while(|&&s| s > pinv_tol * smax && s > T::zero())
        .count();
    if r == 0 {
        return CcrFit { beta: DVector::zeros(v_k.nrows()), rank: 0, zero_design: true };
    }
    let u_d = delta_svd.u.columns(0, r);
    let v_d = delta_svd.v.columns(0, r);
    let mut coef = u_d.tr_mul(&inst_u.tr_mul(y));
    for (c, &s) in coef.iter_mut().zip(delta_svd.s.iter()) {
        *c /= s;
    }
    let beta = v_k * (v_d * coef);
    CcrFit { beta, rank: r, zero_design: false }
}

/// Second stage `P^+ y` without materialising the `n x p` design.
pub fn ccr_fit<T: Real>(y: &DVector<T>, fs: &FirstStage<T>, pinv_tol: T) -> Result<CcrFit<T>> {
    if y.len() != fs.inst.nrows() {
        return Err(CcrError::DimensionMismatch(format!(
            "outcome has length {}, first stage has n = {}",
            y.len(),
            fs.inst.nrows()
        )));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(CcrError::NonFinite("outcome"));
    }
    Ok(solve_factored(&fs.inst.u, &fs.delta_svd, &fs.cov.v, y, pinv_tol))
}

/// `(proj_B A)^+ y` where `B` spans the columns of `instruments`.
fn projected_two_stage<T: Real>(
    y: &DVector<T>,
    covariates: &DMatrix<T>,
    instruments: &DMatrix<T>,
    tol: T,
) -> Result<DVector<T>> {
    if covariates.nrows() != y.len() || instruments.nrows() != y.len() {
        return Err(CcrError::DimensionMismatch(format!(
            "y has length {}, designs have {} and {} rows",
            y.len(),
            covariates.nrows(),
            instruments.nrows()
        )));
    }
    let basis = column_basis(instruments, tol)?;
    let projected = &basis * basis.tr_mul(covariates);
    min_norm_solve(&projected, y, tol)
}

/// Oracle 2SLS on the clean designs: `(proj_W X)^+ y`.
pub fn oracle_2sls<T: Real>(y: &DVector<T>, x: &DMatrix<T>, w: &DMatrix<T>, pinv_tol: T) -> Result<DVector<T>> {
    projected_two_stage(y, x, w, pinv_tol)
}

/// Unregularised 2SLS on the noisy designs: `(proj_{Z_W} Z_X)^+ y`.
pub fn naive_2sls<T: Real>(
    y: &DVector<T>,
    z_x: &DMatrix<T>,
    z_w: &DMatrix<T>,
    pinv_tol: T,
) -> Result<DVector<T>> {
    projected_two_stage(y, z_x, z_w, pinv_tol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcaCheck<T: Real> {
    /// Max-norm gap between the two constructions of the CCA design.
    pub deviation: T,
    pub overlap_rank: usize,
    /// `k` exceeds the numerical rank of the overlap.
    pub truncation_mismatch: bool,
}

/// Builds the CCA design twice: from the whitened cross-moment
/// (`W^ (W^T W^)^+ [rank-k truncation of underline(W^)^T underline(X^)]`) and
/// from the weighted form `U~_l S~_l^{-1} (U~_l^T U_k) V_k^T`.
pub fn cca_consistency_check<T: Real>(fs: &FirstStage<T>) -> Result<CcaCheck<T>> {
    let inst = &fs.inst;
    let cov = &fs.cov;
    let k = cov.rank();
    let smax = inst.sigma_max().unwrap_or_else(T::zero);
    let threshold = fs.pinv_tol * smax;
    if let Some(&bad) = inst.s.iter().find(|&&s| !(s > threshold)) {
        return Err(CcrError::SingularWeight { value: bad.as_f64(), threshold: threshold.as_f64() });
    }

    let w_hat = inst.reconstruct();
    let w_white = &inst.u * inst.v.transpose();
    let x_white = &cov.u * cov.v.transpose();
    let cross = w_white.tr_mul(&x_white);
    let cross_k = truncate(&thin_svd(&cross)?, k).reconstruct();
    let gram_pinv = pseudo_inverse(&w_hat.tr_mul(&w_hat), fs.pinv_tol)?;
    let via_moment = &w_hat * (gram_pinv * cross_k);

    let mut scaled = fs.overlap.clone();
    for (i, &s) in inst.s.iter().enumerate() {
        scaled.row_mut(i).unscale_mut(s);
    }
    let via_weights = &inst.u * scaled * cov.v.transpose();

    let deviation = crate::speclin::max_abs(&(via_moment - via_weights));
    let overlap_rank = thin_svd(&fs.overlap)?.rank();
    Ok(CcaCheck { deviation, overlap_rank, truncation_mismatch: overlap_rank < k })
}

/// Thin SVDs of the observed designs, computed once and shared by every fit on a dataset.
#[derive(Debug, Clone)]
pub struct SpectralCache<T: Real> {
    pub z_x: ThinSvd<T>,
    pub z_w: ThinSvd<T>,
}

impl<T: Real> SpectralCache<T> {
    pub fn new(dataset: &Dataset<T>) -> Result<Self> {
        Ok(SpectralCache { z_x: thin_svd(&dataset.z_x)?, z_w: thin_svd(&dataset.z_w)? })
    }
}

/// Result of fitting any estimator: the coefficient plus the CCR first stage
/// that represents it (PCA weights at full rank for naive 2SLS, PCA weights on
/// the clean designs for the oracle).
#[derive(Debug, Clone)]
pub struct Fitted<T: Real> {
    pub beta: DVector<T>,
    pub first_stage: FirstStage<T>,
    pub zero_design: bool,
}

pub fn fit<T: Real>(spec: &EstimatorSpec, dataset: &Dataset<T>, cache: &SpectralCache<T>) -> Result<Fitted<T>> {
    spec.validate_ranks()?;
    let tol = T::lit(spec.pinv_tol);
    let y = &dataset.y;
    match &spec.kind {
        EstimatorKind::Naive2Sls => {
            let beta = naive_2sls(y, &dataset.z_x, &dataset.z_w, tol)?;
            let fs = first_stage_from_svds(
                &cache.z_x,
                &cache.z_w,
                cache.z_x.rank(),
                cache.z_w.rank(),
                &WeightSpec::pca(),
                tol,
            )?;
            Ok(Fitted { beta, first_stage: fs, zero_design: false })
        }
        EstimatorKind::Oracle2Sls => {
            let truth: &GroundTruth<T> = dataset.truth()?;
            let beta = oracle_2sls(y, &truth.x, &truth.w, tol)?;
            let fs = oracle_first_stage(truth, tol)?;
            Ok(Fitted { beta, first_stage: fs, zero_design: false })
        }
        kind => {
            let weights = kind.weights().expect("CCR member");
            check_rank_request(&dataset.z_x, spec.k, "k")?;
            check_rank_request(&dataset.z_w, spec.ell, "ell")?;
            let fs = first_stage_from_svds(&cache.z_x, &cache.z_w, spec.k, spec.ell, &weights, tol)?;
            let f = ccr_fit(y, &fs, tol)?;
            Ok(Fitted { beta: f.beta, first_stage: fs, zero_design: f.zero_design })
        }
    }
}

/// PCA-weighted first stage on the clean designs at their numerical ranks.
pub fn oracle_first_stage<T: Real>(truth: &GroundTruth<T>, tol: T) -> Result<FirstStage<T>> {
    let x_svd = thin_svd(&truth.x)?;
    let w_svd = thin_svd(&truth.w)?;
    first_stage_from_svds(&x_svd, &w_svd, x_svd.rank(), w_svd.rank(), &WeightSpec::pca(), tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speclin::{orthonormalize, max_abs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn low_rank(n: usize, d: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        gaussian(n, r, rng) * gaussian(r, d, rng)
    }

    fn fake_truncated(s: &[f64]) -> TruncatedSvd<f64> {
        let m = s.len();
        let a = DMatrix::from_diagonal(&DVector::from_column_slice(s));
        truncate(&thin_svd(&a).unwrap(), m)
    }

    #[test]
    fn named_weights() {
        let cov = fake_truncated(&[0.35, 0.19]);
        let inst = fake_truncated(&[2.0, 0.5]);
        let (l, r) = resolve_weights(&WeightSpec::pca(), &cov, &inst, 1e-12).unwrap();
        assert_eq!(l.as_slice(), &[1.0, 1.0]);
        assert_eq!(r.as_slice(), &[0.35, 0.19]);
        let (l, r) = resolve_weights(&WeightSpec::whiten(), &cov, &inst, 1e-12).unwrap();
        assert_eq!((l.as_slice(), r.as_slice()), (&[1.0, 1.0][..], &[1.0, 1.0][..]));
        let (l, r) = resolve_weights(&WeightSpec::cca(), &cov, &inst, 1e-12).unwrap();
        assert_eq!(l.as_slice(), &[0.5, 2.0]);
        assert_eq!(r.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn singular_and_custom_weights() {
        let cov = fake_truncated(&[1.0, 0.5]);
        let inst = fake_truncated(&[2.0, 1e-3]);
        let err = resolve_weights(&WeightSpec::cca(), &cov, &inst, 1e-2).unwrap_err();
        assert!(matches!(err, CcrError::SingularWeight { .. }));
        let bad = WeightSpec { left: LeftWeight::CustomDiagonal(vec![1.0, 0.0]), right: RightWeight::Identity };
        assert!(resolve_weights(&bad, &cov, &inst, 1e-12).is_err());
        let wrong_len = WeightSpec { left: LeftWeight::Identity, right: RightWeight::CustomDiagonal(vec![1.0]) };
        assert!(resolve_weights(&wrong_len, &cov, &inst, 1e-12).is_err());
        let ok = WeightSpec {
            left: LeftWeight::CustomDiagonal(vec![3.0, 4.0]),
            right: RightWeight::CustomDiagonal(vec![0.5, 0.25]),
        };
        let (l, r) = resolve_weights(&ok, &cov, &inst, 1e-12).unwrap();
        assert_eq!((l[1], r[1]), (4.0, 0.25));
    }

    #[test]
    fn self_overlap_and_orthogonal_designs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = low_rank(40, 12, 4, &mut rng);
        let spec = EstimatorSpec::new(EstimatorKind::Whiten2Sls, 4, 4);
        let fs = build_first_stage(&z, &z, &spec).unwrap();
        for c in fs.canonical_correlations().unwrap() {
            assert!((c - 1.0).abs() <= 1e-8);
        }

        // Z_X lives in the first 20 coordinates of R^40, Z_W in the last 20.
        let mut zx = DMatrix::zeros(40, 6);
        zx.view_mut((0, 0), (20, 6)).copy_from(&gaussian(20, 6, &mut rng));
        let mut zw = DMatrix::zeros(40, 7);
        zw.view_mut((20, 0), (20, 7)).copy_from(&gaussian(20, 7, &mut rng));
        let fs = build_first_stage(&zx, &zw, &EstimatorSpec::new(EstimatorKind::Pca2Sls, 3, 4)).unwrap();
        assert!(crate::speclin::operator_norm(&fs.overlap).unwrap() <= 1e-8);
    }

    #[test]
    fn overlap_matches_independent_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zx = low_rank(100, 20, 3, &mut rng);
        let zw = low_rank(100, 30, 4, &mut rng);
        let fs = build_first_stage(&zx, &zw, &EstimatorSpec::new(EstimatorKind::Cca2Sls, 3, 4)).unwrap();
        let (ut, uk) = (&fs.inst.u, &fs.cov.u);
        let mut oracle = DMatrix::zeros(4, 3);
        for i in 0..4 {
            for j in 0..3 {
                oracle[(i, j)] = (0..100).map(|r| ut[(r, i)] * uk[(r, j)]).sum::<f64>();
            }
        }
        assert!(max_abs(&(&fs.overlap - oracle)) <= 1e-12);
        let s = fs.canonical_correlations().unwrap();
        assert!(s.iter().all(|&c| (0.0..=1.0 + 1e-8).contains(&c)));
    }

    #[test]
    fn zero_delta_gives_zero_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut zx = DMatrix::zeros(30, 5);
        zx.view_mut((0, 0), (15, 5)).copy_from(&gaussian(15, 5, &mut rng));
        let mut zw = DMatrix::zeros(30, 5);
        zw.view_mut((15, 0), (15, 5)).copy_from(&gaussian(15, 5, &mut rng));
        let spec = EstimatorSpec::new(EstimatorKind::Whiten2Sls, 2, 2);
        let fs = build_first_stage(&zx, &zw, &spec).unwrap();
        let y = DVector::from_fn(30, |i, _| i as f64);
        let f = ccr_fit(&y, &fs, 1e-12).unwrap();
        assert!(f.zero_design);
        assert_eq!(f.beta, DVector::zeros(5));
    }

    #[test]
    fn factored_fit_equals_dense_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zx = gaussian(60, 10, &mut rng);
        let zw = gaussian(60, 12, &mut rng);
        let y = DVector::from_fn(60, |_, _| rng.sample(StandardNormal));
        for kind in [EstimatorKind::Pca2Sls, EstimatorKind::Whiten2Sls, EstimatorKind::Cca2Sls] {
            let fs = build_first_stage(&zx, &zw, &EstimatorSpec::new(kind, 2, 3)).unwrap();
            let fit = ccr_fit(&y, &fs, 1e-12).unwrap();
            let design = &fs.inst.u * &fs.delta * fs.cov.v.transpose();
            let dense = min_norm_solve(&design, &y, 1e-12).unwrap();
            assert!((fit.beta - dense).amax() <= 1e-9);
        }
    }

    #[test]
    fn left_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zx = gaussian(50, 9, &mut rng);
        let zw = gaussian(50, 11, &mut rng);
        let y = DVector::from_fn(50, |_, _| rng.sample(StandardNormal));
        for kind in [EstimatorKind::Pca2Sls, EstimatorKind::Whiten2Sls] {
            let fs = build_first_stage(&zx, &zw, &EstimatorSpec::new(kind, 3, 4)).unwrap();
            let base = ccr_fit(&y, &fs, 1e-12).unwrap().beta;
            let rot = orthonormalize(&gaussian(4, 4, &mut rng));
            let u_rot = &fs.inst.u * &rot;
            let mut delta_rot = rot.transpose() * &fs.overlap;
            for (j, &b) in fs.right_weights.iter().enumerate() {
                delta_rot.column_mut(j).scale_mut(b);
            }
            let svd = thin_svd(&delta_rot).unwrap();
            let rotated = solve_factored(&u_rot, &svd, &fs.cov.v, &y, 1e-12).beta;
            assert!((rotated - base).amax() <= 1e-9);
        }
    }

    #[test]
    fn naive_and_oracle_coincide_on_clean_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = low_rank(40, 10, 3, &mut rng);
        let w = low_rank(40, 8, 5, &mut rng);
        let beta = DVector::from_fn(10, |_, _| rng.sample(StandardNormal));
        let y = &x * &beta;
        let a = oracle_2sls(&y, &x, &w, 1e-12).unwrap();
        let b = naive_2sls(&y, &x, &w, 1e-12).unwrap();
        assert!((a - b).amax() <= 1e-8);

        // Self-instrumenting: (proj_Z Z)^+ y = Z^+ y.
        let z = gaussian(40, 6, &mut rng);
        let yz = DVector::from_fn(40, |_, _| rng.sample(StandardNormal));
        let naive = naive_2sls(&yz, &z, &z, 1e-12).unwrap();
        let direct = min_norm_solve(&z, &yz, 1e-12).unwrap();
        assert!((naive - direct).amax() <= 1e-10);
    }

    #[test]
    fn oracle_exact_identification() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = low_rank(40, 10, 3, &mut rng);
        // col(X) inside col(W): W = [X-basis directions, extra].
        let w = DMatrix::from_fn(40, 12, |i, j| if j < 10 { x[(i, j)] } else { rng.sample(StandardNormal) });
        let beta = DVector::from_fn(10, |_, _| rng.sample(StandardNormal));
        let y = &x * &beta;
        let est = oracle_2sls(&y, &x, &w, 1e-12).unwrap();
        let min_norm = min_norm_solve(&x, &y, 1e-12).unwrap();
        assert!((est - min_norm).amax() <= 1e-8);
    }

    #[test]
    fn oracle_is_a_ccr_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = low_rank(50, 10, 3, &mut rng);
        let w = low_rank(50, 12, 5, &mut rng);
        let y = DVector::from_fn(50, |_, _| rng.sample(StandardNormal));
        let oracle = oracle_2sls(&y, &x, &w, 1e-12).unwrap();
        let fs = build_first_stage(&x, &w, &EstimatorSpec::new(EstimatorKind::Pca2Sls, 3, 5)).unwrap();
        let ccr = ccr_fit(&y, &fs, 1e-12).unwrap().beta;
        assert!((oracle - ccr).amax() <= 1e-8);
    }

    #[test]
    fn cca_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let zx = gaussian(50, 8, &mut rng);
            let zw = gaussian(50, 10, &mut rng);
            let fs = build_first_stage(&zx, &zw, &EstimatorSpec::new(EstimatorKind::Cca2Sls, 3, 4)).unwrap();
            let check = cca_consistency_check(&fs).unwrap();
            assert!(check.deviation <= 1e-9, "{}", check.deviation);
            assert!(!check.truncation_mismatch);
        }
    }

    #[test]
    fn cca_truncation_mismatch_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // Z_X directions 3.. are orthogonal to Z_W, so the overlap has rank < k.
        let shared = gaussian(60, 2, &mut rng);
        let mut zx = gaussian(60, 6, &mut rng);
        let mut zw = gaussian(60, 6, &mut rng);
        zx.view_mut((0, 0), (60, 2)).copy_from(&shared);
        zw.view_mut((0, 0), (60, 2)).copy_from(&shared);
        let basis = orthonormalize(&zw);
        let rest = zx.columns(2, 4).into_owned();
        let cleaned = &rest - &basis * basis.tr_mul(&rest);
        zx.view_mut((0, 2), (60, 4)).copy_from(&cleaned);
        let spec = EstimatorSpec { kind: EstimatorKind::Cca2Sls, k: 6, ell: 6, pinv_tol: 1e-12 };
        let fs = build_first_stage(&zx, &zw, &spec).unwrap();
        let check = cca_consistency_check(&fs).unwrap();
        assert!(check.truncation_mismatch);
        assert_eq!(check.overlap_rank, 2);
    }

    #[test]
    fn rank_requests_validated() {
        let z = DMatrix::<f64>::identity(5, 3);
        let err = build_first_stage(&z, &z, &EstimatorSpec::new(EstimatorKind::Pca2Sls, 4, 2));
        assert!(matches!(err, Err(CcrError::DimensionMismatch(_))));
        let err = build_first_stage(&z, &z, &EstimatorSpec::new(EstimatorKind::Pca2Sls, 0, 2));
        assert!(matches!(err, Err(CcrError::InvalidInput(_))));
        let err = build_first_stage(&z, &z, &EstimatorSpec::new(EstimatorKind::Naive2Sls, 1, 1));
        assert!(matches!(err, Err(CcrError::InvalidInput(_))));
    }

    #[test]
    fn shortfall_is_flagged_not_fatal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zx = low_rank(30, 10, 2, &mut rng);
        let zw = gaussian(30, 10, &mut rng);
        let fs = build_first_stage(&zx, &zw, &EstimatorSpec::new(EstimatorKind::Pca2Sls, 4, 5)).unwrap();
        assert!(fs.rank_shortfall());
        assert_eq!(fs.cov.rank(), 2);
        let fs = build_first_stage(&zw, &zw, &EstimatorSpec::new(EstimatorKind::Pca2Sls, 5, 3)).unwrap();
        assert!(fs.under_instrumented());
    }

    #[test]
    fn spec_json_shape() {
        let spec: EstimatorSpec = serde_json::from_str(r#"{"kind":"cca","k":8,"ell":10}"#).unwrap();
        assert_eq!(spec.kind, EstimatorKind::Cca2Sls);
        assert_eq!(spec.pinv_tol, 1e-12);
        let custom: EstimatorSpec = serde_json::from_str(
            r#"{"kind":{"custom":{"left":"identity","right":{"custom_diagonal":[1.0,2.0]}}},"k":2,"ell":3}"#,
        )
        .unwrap();
        assert_eq!(custom.name(), "custom");
        assert!(serde_json::from_str::<EstimatorSpec>(r#"{"kind":"pca","kk":1}"#).is_err());
    }
}
