//! Noise-to-signal ratios and conditioning, the three-way error
//! decomposition, Procrustes/Wedin checks, the bias/variance regime
//! classifier with its estimator recommendation, and the minimax lower bound.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datamodel::GroundTruth;
use crate::error::{CcrError, Result};
use crate::estimators::FirstStage;
use crate::scalar::Real;
use crate::speclin::{
    condition_number, operator_norm, principal_angle_cosines, procrustes_rotation,
    svd_all, thin_svd, thin_svd_scaled, ThinSvd,
};

/// Serde adapter writing non-finite floats as `"inf"`, `"-inf"` or `"nan"`.
pub mod ext_f64 {
    use super::*;

    pub fn to_text(v: f64) -> Option<&'static str> {
        if v.is_nan() {
            Some("nan")
        } else if v == f64::INFINITY {
            Some("inf")
        } else if v == f64::NEG_INFINITY {
            Some("-inf")
        } else {
            None
        }
    }

    pub fn from_text(s: &str) -> Option<f64> {
        match s {
            "inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            "nan" => Some(f64::NAN),
            _ => None,
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        match to_text(*v) {
            Some(t) => s.serialize_str(t),
            None => s.serialize_f64(*v),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => from_text(&t)
                .ok_or_else(|| serde::de::Error::custom(format!("expected a number, \"inf\" or \"nan\", got `{t}`"))),
        }
    }
}

/// Clean-signal factors derived once from the ground truth.
#[derive(Debug, Clone)]
pub struct TruthFactors<T: Real> {
    /// `U_* Sigma_* V_*^T`.
    pub x: ThinSvd<T>,
    /// `U~_* Sigma~_* V~_*^T`.
    pub w: ThinSvd<T>,
    /// `U~_*^T U_*`.
    pub overlap: DMatrix<T>,
    /// Row-space factor of `Delta_* = (U~_*^T U_*) Sigma_*`.
    pub delta_v: DMatrix<T>,
}

impl<T: Real> TruthFactors<T> {
    pub fn new(truth: &GroundTruth<T>) -> Result<Self> {
        let x = thin_svd(&truth.x)?;
        let w = thin_svd(&truth.w)?;
        let overlap = w.u.tr_mul(&x.u);
        let mut delta = overlap.clone();
        for (j, &s) in x.s.iter().enumerate() {
            delta.column_mut(j).scale_mut(s);
        }
        let scale = x.sigma_max().unwrap_or_else(T::zero);
        let delta_v = thin_svd_scaled(&delta, T::rank_tol(), scale)?.v;
        Ok(TruthFactors { x, w, overlap, delta_v })
    }

    /// `rank(Delta_*)`.
    pub fn r_star(&self) -> usize {
        self.delta_v.ncols()
    }

    /// Largest cosine between the clean covariate and instrument column spaces.
    pub fn max_overlap(&self) -> Result<T> {
        let c = principal_angle_cosines(&self.x.u, &self.w.u)?;
        Ok(c.first().copied().unwrap_or_else(T::zero))
    }
}

/// `sigma_k`, clamped to the smallest nonzero singular value when `k` exceeds the rank.
fn nth_singular<T: Real>(svd: &ThinSvd<T>, k: usize) -> T {
    match k.min(svd.rank()) {
        0 => T::zero(),
        i => svd.s[i - 1],
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// `(NSR_X, NSR_W) = (||H_X||^2 / sigma_k(X)^2, ||H_W||^2 / sigma_l(W)^2)`.
pub fn noise_to_signal<T: Real>(
    truth: &GroundTruth<T>,
    factors: &TruthFactors<T>,
    k: usize,
    ell: usize,
) -> Result<(f64, f64)> {
    let hx = operator_norm(&truth.h_x)?.as_f64();
    let hw = operator_norm(&truth.h_w)?.as_f64();
    let sx = nth_singular(&factors.x, k).as_f64();
    let sw = nth_singular(&factors.w, ell).as_f64();
    Ok((ratio(hx * hx, sx * sx), ratio(hw * hw, sw * sw)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyQuantities {
    #[serde(with = "ext_f64")]
    pub nsr_x: f64,
    #[serde(with = "ext_f64")]
    pub nsr_w: f64,
    #[serde(with = "ext_f64")]
    pub kappa_x: f64,
    #[serde(with = "ext_f64")]
    pub kappa_w: f64,
    #[serde(with = "ext_f64")]
    pub kappa_xw: f64,
    pub sigma_min_x: f64,
    pub sigma_max_x: f64,
    pub sigma_min_w: f64,
    pub sigma_max_w: f64,
    /// Cosines of the principal angles between `U_*` and `U~_*`.
    pub overlap_cosines_true: Vec<f64>,
    /// Singular values of the empirical overlap `U~_l^T U_k`.
    pub overlap_cosines_empirical: Vec<f64>,
    pub r: usize,
    pub r_star: usize,
    pub sigma_bar_sq: f64,
    pub c_ell: f64,
    pub c_k: f64,
}

impl KeyQuantities {
    pub fn nsr_total(&self) -> f64 {
        self.nsr_x + self.nsr_w
    }
}

fn spectrum_ends<T: Real>(svd: &ThinSvd<T>) -> (f64, f64) {
    (
        svd.sigma_min().map_or(0.0, |v| v.as_f64()),
        svd.sigma_max().map_or(0.0, |v| v.as_f64()),
    )
}

fn finite_condition<T: Real>(s: &DVector<T>) -> f64 {
    condition_number(s.as_slice()).map_or(f64::INFINITY, |v| v.as_f64())
}

/// Smallest eigenvalue of `B^T B` for the leading `rows` x `cols` block of `b`.
fn restricted_eigenvalue<T: Real>(b: &DMatrix<T>, rows: usize, cols: usize) -> Result<f64> {
    let rows = rows.min(b.nrows());
    let cols = cols.min(b.ncols());
    if cols == 0 || rows < cols {
        return Ok(0.0);
    }
    let block = b.view((0, 0), (rows, cols)).into_owned();
    let s = svd_all(&block)?.s;
    let m = s.iter().copied().fold(T::max_value().unwrap_or_else(T::one), |a, v| a.min(v));
    Ok((m * m).as_f64())
}

/// Restricted-eigenvalue constants `(c_l, c_k)` of the noisy overlap `M = U~^T U`,
/// using the leading `r` singular-vector columns of `M = Q S R^T`.
pub fn restricted_eigenvalues<T: Real>(
    zx_svd: &ThinSvd<T>,
    zw_svd: &ThinSvd<T>,
    k: usize,
    ell: usize,
    r: usize,
) -> Result<(f64, f64)> {
    let m = zw_svd.u.tr_mul(&zx_svd.u);
    let f = svd_all(&m)?;
    Ok((restricted_eigenvalue(&f.u, ell, r)?, restricted_eigenvalue(&f.v, k, r)?))
}

/// Key quantities for a first stage fitted on `truth`'s noisy designs.
pub fn key_quantities<T: Real>(
    truth: &GroundTruth<T>,
    fs: &FirstStage<T>,
    sigma_bar_sq: f64,
) -> Result<KeyQuantities> {
    let factors = TruthFactors::new(truth)?;
    key_quantities_with(truth, &factors, fs, sigma_bar_sq)
}

pub fn key_quantities_with<T: Real>(
    truth: &GroundTruth<T>,
    factors: &TruthFactors<T>,
    fs: &FirstStage<T>,
    sigma_bar_sq: f64,
) -> Result<KeyQuantities> {
    let (k, ell) = (fs.cov.requested(), fs.inst.requested());
    let (nsr_x, nsr_w) = noise_to_signal(truth, factors, k, ell)?;
    let (sigma_min_x, sigma_max_x) = spectrum_ends(&factors.x);
    let (sigma_min_w, sigma_max_w) = spectrum_ends(&factors.w);
    let kappa_xw = ratio(sigma_max_x, sigma_min_w);

    let zx = thin_svd(&(&truth.x + &truth.h_x))?;
    let zw = thin_svd(&(&truth.w + &truth.h_w))?;
    let r = fs.rank();
    let (c_ell, c_k) = restricted_eigenvalues(&zx, &zw, k, ell, r)?;

    let to_f64 = |v: Vec<T>| v.into_iter().map(|c| c.as_f64()).collect::<Vec<_>>();
    Ok(KeyQuantities {
        nsr_x,
        nsr_w,
        kappa_x: finite_condition(&factors.x.s),
        kappa_w: finite_condition(&factors.w.s),
        kappa_xw,
        sigma_min_x,
        sigma_max_x,
        sigma_min_w,
        sigma_max_w,
        overlap_cosines_true: to_f64(principal_angle_cosines(&factors.x.u, &factors.w.u)?),
        overlap_cosines_empirical: to_f64(fs.canonical_correlations()?),
        r,
        r_star: factors.r_star(),
        sigma_bar_sq,
        c_ell,
        c_k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub term_row: f64,
    pub term_null: f64,
    pub term_perp: f64,
    pub total: f64,
    pub residual: f64,
}

impl DecompositionReport {
    /// `residual <= tol * max(total, 1e-300)`.
    pub fn identity_holds(&self, tol: f64) -> bool {
        self.residual <= tol * self.total.max(1e-300)
    }
}

/// `V (I - V_D V_D^T) V^T b` and `b - V V^T b`, without forming `p x p` matrices.
fn null_and_perp<T: Real>(v: &DMatrix<T>, v_delta: &DMatrix<T>, b: &DVector<T>) -> (DVector<T>, DVector<T>) {
    let a = v.tr_mul(b);
    let kept = v_delta * v_delta.tr_mul(&a);
    let null = v * (&a - kept);
    let perp = b - v * a;
    (null, perp)
}

/// Splits `||beta_hat - beta*||^2` into the row-space, null-space and
/// orthogonal-complement terms of the first stage.
pub fn error_decomposition<T: Real>(
    beta_hat: &DVector<T>,
    truth: &GroundTruth<T>,
    fs: &FirstStage<T>,
) -> Result<DecompositionReport> {
    let factors = TruthFactors::new(truth)?;
    error_decomposition_with(beta_hat, &truth.beta, &factors, fs)
}

pub fn error_decomposition_with<T: Real>(
    beta_hat: &DVector<T>,
    beta_star: &DVector<T>,
    factors: &TruthFactors<T>,
    fs: &FirstStage<T>,
) -> Result<DecompositionReport> {
    let p = fs.v_k().nrows();
    if beta_hat.len() != p || beta_star.len() != p || factors.x.ncols() != p {
        return Err(CcrError::DimensionMismatch(format!(
            "beta_hat has length {}, beta* {}, first stage expects {p}",
            beta_hat.len(),
            beta_star.len()
        )));
    }
    let v_k = fs.v_k();
    let v_delta = &fs.delta_svd.v;
    let err = beta_hat - beta_star;
    let term_row = v_delta.tr_mul(&v_k.tr_mul(&err)).norm_squared().as_f64();

    let (null, perp) = null_and_perp(v_k, v_delta, beta_star);
    let (null_star, perp_star) = null_and_perp(&factors.x.v, &factors.delta_v, beta_star);
    let term_null = (null_star - null).norm_squared().as_f64();
    let term_perp = (perp_star - perp).norm_squared().as_f64();
    let total = err.norm_squared().as_f64();
    let residual = (total - (term_row + term_null + term_perp)).abs();
    Ok(DecompositionReport { term_row, term_null, term_perp, total, residual })
}

/// Materialised `p x p` projectors of the decomposition.
#[derive(Debug, Clone)]
pub struct ProjectorSuite<T: Real> {
    pub row: DMatrix<T>,
    pub null: DMatrix<T>,
    pub perp: DMatrix<T>,
    pub null_star: Option<DMatrix<T>>,
    pub perp_star: Option<DMatrix<T>>,
}

fn symmetrize<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    (&m + m.transpose()) * T::lit(0.5)
}

fn split_projectors<T: Real>(v: &DMatrix<T>, v_delta: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
    let p = v.nrows();
    let vv = v * v_delta;
    let row = symmetrize(&vv * vv.transpose());
    let span = symmetrize(v * v.transpose());
    let null = &span - &row;
    let perp = DMatrix::identity(p, p) - span;
    (row, null, perp)
}

pub fn projector_suite<T: Real>(fs: &FirstStage<T>, truth: Option<&TruthFactors<T>>) -> ProjectorSuite<T> {
    let (row, null, perp) = split_projectors(fs.v_k(), &fs.delta_svd.v);
    let (null_star, perp_star) = match truth {
        Some(t) => {
            let (_, n, q) = split_projectors(&t.x.v, &t.delta_v);
            (Some(n), Some(q))
        }
        None => (None, None),
    };
    ProjectorSuite { row, null, perp, null_star, perp_star }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WedinReport {
    pub lhs_v: f64,
    #[serde(with = "ext_f64")]
    pub rhs_v: f64,
    pub lhs_u: f64,
    #[serde(with = "ext_f64")]
    pub rhs_u: f64,
    pub holds_v: bool,
    pub holds_u: bool,
    /// `||H_X|| <= sigma_k(X)` and `||H_W|| <= sigma_l(W)`.
    pub noise_below_signal: bool,
}

impl WedinReport {
    pub fn holds(&self) -> bool {
        self.holds_v && self.holds_u
    }
}

/// `||A - B Q||_2` for the Procrustes rotation `Q` aligning `B` to `A` over
/// their leading `m` columns.
fn aligned_gap<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, m: usize) -> Result<f64> {
    if m == 0 {
        return Ok(0.0);
    }
    let a = a.columns(0, m).into_owned();
    let b = b.columns(0, m).into_owned();
    let q = procrustes_rotation(&a, &b)?;
    Ok(operator_norm(&(&a - b * q))?.as_f64())
}

/// Procrustes-aligned subspace deviations against the bounds
/// `sqrt(2) ||H_X|| / sigma_k(X)` and `sqrt(2) ||H_W|| / sigma_l(W)`.
pub fn wedin_check<T: Real>(truth: &GroundTruth<T>, fs: &FirstStage<T>) -> Result<WedinReport> {
    let factors = TruthFactors::new(truth)?;
    wedin_check_with(truth, &factors, fs)
}

pub fn wedin_check_with<T: Real>(
    truth: &GroundTruth<T>,
    factors: &TruthFactors<T>,
    fs: &FirstStage<T>,
) -> Result<WedinReport> {
    let (k, ell) = (fs.cov.requested(), fs.inst.requested());
    let hx = operator_norm(&truth.h_x)?.as_f64();
    let hw = operator_norm(&truth.h_w)?.as_f64();
    let sx = nth_singular(&factors.x, k).as_f64();
    let sw = nth_singular(&factors.w, ell).as_f64();
    let root2 = std::f64::consts::SQRT_2;
    let rhs_v = ratio(root2 * hx, sx);
    let rhs_u = ratio(root2 * hw, sw);
    let lhs_v = aligned_gap(&factors.x.v, &fs.cov.v, factors.x.rank().min(fs.cov.rank()))?;
    let lhs_u = aligned_gap(&factors.w.u, &fs.inst.u, factors.w.rank().min(fs.inst.rank()))?;
    let slack = 1e-12;
    Ok(WedinReport {
        lhs_v,
        rhs_v,
        lhs_u,
        rhs_u,
        holds_v: lhs_v <= rhs_v + slack,
        holds_u: lhs_u <= rhs_u + slack,
        noise_below_signal: hx <= sx && hw <= sw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeClass {
    BiasDominated,
    VarianceDominated,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    Cca,
    Whiten,
    Pca,
    Boundary,
}

/// Multipliers standing in for the unspecified constants of the phase
/// boundaries: `T_hi = bias * s2 r / kappa^2`, `T_lo = variance * s2 r / kappa^2 - 1 / kappa^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeConstants {
    pub bias: f64,
    pub variance: f64,
}

impl Default for RegimeConstants {
    fn default() -> Self {
        RegimeConstants { bias: 1.0, variance: 1.0 }
    }
}

/// Thresholds `(T_lo, T_hi)` on `NSR_X + NSR_W`.
pub fn regime_thresholds(kappa_xw: f64, sigma_bar_sq: f64, r: usize, c: &RegimeConstants) -> (f64, f64) {
    let k2 = kappa_xw * kappa_xw;
    let base = sigma_bar_sq * r as f64 / k2;
    (c.variance * base - 1.0 / k2, c.bias * base)
}

pub fn classify_regime(
    nsr_total: f64,
    kappa_xw: f64,
    sigma_bar_sq: f64,
    r: usize,
    constants: &RegimeConstants,
) -> RegimeClass {
    if !(nsr_total >= 0.0) || !(kappa_xw > 0.0) || !(sigma_bar_sq >= 0.0) {
        return RegimeClass::Indeterminate;
    }
    let (lo, hi) = regime_thresholds(kappa_xw, sigma_bar_sq, r, constants);
    if nsr_total >= hi {
        RegimeClass::BiasDominated
    } else if nsr_total <= lo {
        RegimeClass::VarianceDominated
    } else {
        RegimeClass::Indeterminate
    }
}

const TIE_TOL: f64 = 1e-9;

/// Estimator with the smallest upper bound in the given regime. `g` is
/// `sigma_max(W)` under variance dominance and `kappa(W)` under bias dominance.
/// Membership uses non-strict comparisons with slack `1e-9`; a point that
/// qualifies for more than one estimator is a `Boundary`.
pub fn recommend_estimator(regime: RegimeClass, sigma_min_x: f64, sigma_max_w: f64, kappa_w: f64) -> Recommendation {
    let g = match regime {
        RegimeClass::VarianceDominated => sigma_max_w,
        RegimeClass::BiasDominated => kappa_w,
        RegimeClass::Indeterminate => return Recommendation::Boundary,
    };
    let s = sigma_min_x;
    let gs = g * s;
    if !(g.is_finite() && s.is_finite()) {
        return Recommendation::Boundary;
    }
    let le = |v: f64| v <= 1.0 + TIE_TOL;
    let ge = |v: f64| v >= 1.0 - TIE_TOL;
    let candidates = [
        (Recommendation::Cca, le(g) && le(gs)),
        (Recommendation::Pca, ge(s) && ge(gs)),
        (Recommendation::Whiten, ge(g) && le(s)),
    ];
    let mut hits = candidates.iter().filter(|(_, ok)| *ok).map(|(r, _)| *r);
    match (hits.next(), hits.next()) {
        (Some(r), None) => r,
        _ => Recommendation::Boundary,
    }
}

/// A nonnegative value that may be unbounded; serialized as a number or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum Bound {
    Finite(f64),
    Infinite,
}

impl Bound {
    pub fn as_f64(self) -> f64 {
        match self {
            Bound::Finite(v) => v,
            Bound::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Bound::Infinite)
    }

    fn max(self, other: Bound) -> Bound {
        match (self, other) {
            (Bound::Finite(a), Bound::Finite(b)) => Bound::Finite(a.max(b)),
            _ => Bound::Infinite,
        }
    }
}

impl Serialize for Bound {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ext_f64::serialize(&self.as_f64(), s)
    }
}

impl<'de> Deserialize<'de> for Bound {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = ext_f64::deserialize(d)?;
        Ok(if v.is_infinite() { Bound::Infinite } else { Bound::Finite(v) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub value: Bound,
    pub term1: Bound,
    pub term2: f64,
    /// `r_* < 8 s_ov^2 / (s_x^2 s_minW^2)`, under which the second term alone governs.
    pub low_rank_condition: bool,
}

/// Minimax lower bound on the squared estimation error over the
/// measurement-error model class.
pub fn minimax_lower_bound(
    sigma_eps: f64,
    sigma_x_noise: f64,
    r_star: usize,
    sigma_min_w: f64,
    sigma_max_overlap: f64,
) -> Result<LowerBound> {
    let invalid = |what: &str, v: f64| Err(CcrError::InvalidInput(format!("{what} must be positive and finite, got {v}")));
    if !(sigma_eps > 0.0 && sigma_eps.is_finite()) {
        return invalid("sigma_eps", sigma_eps);
    }
    if !(sigma_x_noise >= 0.0 && sigma_x_noise.is_finite()) {
        return Err(CcrError::InvalidInput(format!("sigma_x_noise must be nonnegative, got {sigma_x_noise}")));
    }
    if r_star == 0 {
        return Err(CcrError::InvalidInput("r_star must be at least 1".into()));
    }
    if !(sigma_min_w > 0.0 && sigma_min_w.is_finite()) {
        return invalid("sigma_min_w", sigma_min_w);
    }
    if !(sigma_max_overlap > 0.0 && sigma_max_overlap <= 1.0 + 1e-8) {
        return Err(CcrError::InvalidInput(format!(
            "sigma_max_overlap must lie in (0, 1], got {sigma_max_overlap}"
        )));
    }
    let ov = sigma_max_overlap.min(1.0);
    let r = r_star as f64;
    let num = sigma_eps * sigma_eps * r * sigma_min_w * sigma_min_w;
    let packing = r * sigma_x_noise * sigma_x_noise * sigma_min_w * sigma_min_w / 8.0;
    let denom = ov * ov - packing;
    let term1 = if denom > 0.0 { Bound::Finite(num / denom) } else { Bound::Infinite };
    let term2 = num / (ov * ov);
    Ok(LowerBound {
        value: term1.max(Bound::Finite(term2)),
        term1,
        term2,
        low_rank_condition: packing < ov * ov,
    })
}
