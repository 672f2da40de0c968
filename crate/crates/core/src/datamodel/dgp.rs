//! Synthetic low-rank instrumental-variable designs: power-law signal spectra,
//! controlled covariate/instrument subspace alignment, correlated diffuse
//! measurement noise and a disturbance orthogonal to the instrument space.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, GroundTruth, StreamSeed};
use crate::error::{CcrError, Result};
use crate::scalar::Real;
use crate::speclin::orthonormalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Moderate,
    High,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Moderate => "moderate",
            Regime::High => "high",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Regime::Moderate => 0,
            Regime::High => 1,
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = CcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moderate" => Ok(Regime::Moderate),
            "high" => Ok(Regime::High),
            other => Err(CcrError::InvalidInput(format!("unknown regime `{other}`"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Generator settings. Defaults: `(k, ell) = (8, 10)`, `alpha = 1.5`,
/// `rho = 0.9`, `sigma_eps = 1.25`, `c1 = 2.0`, `delta = 0.65`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    pub n: usize,
    pub regime: Regime,
    pub k: usize,
    pub ell: usize,
    pub alpha: f64,
    pub delta: f64,
    pub rho: f64,
    pub sigma_eps: f64,
    pub c1: f64,
    pub gamma_scale: f64,
    pub base_seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n: 300,
            regime: Regime::Moderate,
            k: 8,
            ell: 10,
            alpha: 1.5,
            delta: 0.65,
            rho: 0.9,
            sigma_eps: 1.25,
            c1: 2.0,
            gamma_scale: 1.0,
            base_seed: 20_240_917,
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> CcrError {
    CcrError::InvalidConfig {
        field: field.to_string(),
        message: message.into(),
    }
}

impl DgpConfig {
    pub fn dims(&self) -> Result<(usize, usize)> {
        dims_for_regime(self.n, self.regime)
    }

    pub fn validate(&self) -> Result<(usize, usize)> {
        if self.n == 0 {
            return Err(invalid("n", "must be positive"));
        }
        if self.k == 0 {
            return Err(invalid("k", "must be at least 1"));
        }
        if self.ell < self.k {
            return Err(invalid("ell", format!("must be >= k ({})", self.k)));
        }
        let checks: [(&str, f64, f64, f64); 6] = [
            ("alpha", self.alpha, f64::NEG_INFINITY, f64::INFINITY),
            ("delta", self.delta, 0.0, 1.0),
            ("rho", self.rho, -1.0, 1.0),
            ("sigma_eps", self.sigma_eps, 0.0, f64::INFINITY),
            ("c1", self.c1, 0.0, f64::INFINITY),
            ("gamma_scale", self.gamma_scale, f64::NEG_INFINITY, f64::INFINITY),
        ];
        for (name, v, lo, hi) in checks {
            if !v.is_finite() || v < lo || v > hi {
                return Err(invalid(name, format!("{v} is outside [{lo}, {hi}]")));
            }
        }
        let (p, p_w) = self.dims()?;
        if self.k > self.n.min(p) {
            return Err(invalid("k", format!("exceeds min(n, p) = {}", self.n.min(p))));
        }
        if self.ell > self.n.min(p_w) {
            return Err(invalid("ell", format!("exceeds min(n, p_w) = {}", self.n.min(p_w))));
        }
        if self.k + self.ell > self.n {
            return Err(invalid("ell", "k + ell must not exceed n (complement basis)"));
        }
        Ok((p, p_w))
    }

    fn block_seed(&self) -> StreamSeed {
        StreamSeed::derive(
            self.base_seed,
            "coefficients",
            &[self.regime.tag(), self.n as u64, self.delta.to_bits()],
        )
    }

    /// Stream for replication `rep` of this `(regime, n, delta)` cell.
    pub fn replication_seed(&self, rep: u64) -> StreamSeed {
        StreamSeed::derive(
            self.base_seed,
            "replication",
            &[self.regime.tag(), self.n as u64, self.delta.to_bits(), rep],
        )
    }
}

/// Covariate and instrument dimensions `(p, p_w)` for a sample size.
pub fn dims_for_regime(n: usize, regime: Regime) -> Result<(usize, usize)> {
    let n = n as i64;
    let (p, p_w) = match regime {
        Regime::Moderate => (n / 2, n / 3),
        Regime::High => ((n - 100).min(5000), (n - 200).min(5000)),
    };
    if p <= 0 || p_w <= 0 {
        return Err(CcrError::InvalidDims(format!(
            "n = {n} gives p = {p}, p_w = {p_w} in the {regime} regime"
        )));
    }
    Ok((p as usize, p_w as usize))
}

/// Column-major matrix of independent standard normals.
fn gaussian<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<T> {
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    DMatrix::from_vec(rows, cols, data)
}

fn gaussian_vec<T: Real, R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<T> {
    DVector::from_iterator(len, (0..len).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))))
}

/// Removes the `span(basis)` component twice; a single pass leaves O(eps * |v|) residue.
fn remove_span<T: Real>(basis: &DMatrix<T>, m: &mut DMatrix<T>) {
    for _ in 0..2 {
        let coef = basis.tr_mul(m);
        *m -= basis * coef;
    }
}

fn power_law<T: Real>(count: usize, alpha: f64) -> DVector<T> {
    DVector::from_iterator(
        count,
        (1..=count).map(|i| T::lit(((i + 1) as f64).powf(-alpha))),
    )
}

fn scale_columns<T: Real>(m: &DMatrix<T>, s: &DVector<T>) -> DMatrix<T> {
    let mut out = m.clone();
    for (j, &sj) in s.iter().enumerate() {
        out.column_mut(j).scale_mut(sj);
    }
    out
}

/// Low-rank signal with its generating factors.
#[derive(Debug, Clone)]
pub struct Signal<T: Real> {
    pub x: DMatrix<T>,
    pub w: DMatrix<T>,
    pub u_x: DMatrix<T>,
    pub s_x: DVector<T>,
    pub v_x: DMatrix<T>,
    pub u_w: DMatrix<T>,
    pub s_w: DVector<T>,
    pub v_w: DMatrix<T>,
}

/// Instrument left factor before re-orthonormalization: the first
/// `min(k, ell)` columns mix `U_X` with the complement at strength `delta`,
/// the rest are further complement directions.
pub fn mix_instrument_columns<T: Real>(
    u_x: &DMatrix<T>,
    u_perp: &DMatrix<T>,
    delta: f64,
) -> DMatrix<T> {
    let ell = u_perp.ncols();
    let r = u_x.ncols().min(ell);
    let a = T::lit(delta);
    let b = T::lit((1.0 - delta * delta).max(0.0).sqrt());
    let mut mixed = u_perp.clone();
    for j in 0..r {
        let col = u_x.column(j) * a + u_perp.column(j) * b;
        mixed.set_column(j, &col);
    }
    mixed
}

pub fn generate_signal<T: Real, R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> Result<Signal<T>> {
    let (p, p_w) = cfg.validate()?;
    let (n, k, ell) = (cfg.n, cfg.k, cfg.ell);

    let u_x = orthonormalize(&gaussian::<T, _>(n, k, rng));
    let v_x = orthonormalize(&gaussian::<T, _>(p, k, rng));
    let v_w = orthonormalize(&gaussian::<T, _>(p_w, ell, rng));

    let mut g = gaussian::<T, _>(n, ell, rng);
    remove_span(&u_x, &mut g);
    let mut u_perp = orthonormalize(&g);
    remove_span(&u_x, &mut u_perp);

    let u_w = orthonormalize(&mix_instrument_columns(&u_x, &u_perp, cfg.delta));

    let s_x = power_law::<T>(k, cfg.alpha);
    let s_w = power_law::<T>(ell, cfg.alpha);
    let x = scale_columns(&u_x, &s_x) * v_x.transpose();
    let w = scale_columns(&u_w, &s_w) * v_w.transpose();
    Ok(Signal {
        x,
        w,
        u_x,
        s_x,
        v_x,
        u_w,
        s_w,
        v_w,
    })
}

/// Entry standard deviation `c1 / ((rank + 1)^alpha * sqrt(dim))`.
pub fn noise_scale(c1: f64, rank: usize, alpha: f64, dim: usize) -> f64 {
    c1 / (((rank + 1) as f64).powf(alpha) * (dim as f64).sqrt())
}

/// Noisy measurements `(Z_X, Z_W)`; the first `min(p, p_w)` columns carry
/// entrywise noise pairs with correlation `rho`.
pub fn generate_noise<T: Real, R: Rng + ?Sized>(
    cfg: &DgpConfig,
    x: &DMatrix<T>,
    w: &DMatrix<T>,
    rng: &mut R,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let n = cfg.n;
    let (p, p_w) = (x.ncols(), w.ncols());
    if x.nrows() != n || w.nrows() != n {
        return Err(CcrError::DimensionMismatch(format!(
            "signal has {} / {} rows, config says n = {n}",
            x.nrows(),
            w.nrows()
        )));
    }
    let sx = noise_scale(cfg.c1, cfg.k, cfg.alpha, p);
    let sw = noise_scale(cfg.c1, cfg.ell, cfg.alpha, p_w);
    let rho = cfg.rho;
    let rho_c = (1.0 - rho * rho).max(0.0).sqrt();
    let common = p.min(p_w);

    let mut h_x = DMatrix::<T>::zeros(n, p);
    let mut h_w = DMatrix::<T>::zeros(n, p_w);
    for j in 0..common {
        for i in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            h_w[(i, j)] = T::lit(sw * a);
            h_x[(i, j)] = T::lit(sx * (rho * a + rho_c * b));
        }
    }
    for j in common..p {
        for i in 0..n {
            h_x[(i, j)] = T::lit(sx * rng.sample::<f64, _>(StandardNormal));
        }
    }
    for j in common..p_w {
        for i in 0..n {
            h_w[(i, j)] = T::lit(sw * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok((x + h_x, w + h_w))
}

/// Disturbance correlated with `X` but orthogonal to `span(U_W)`, rescaled to
/// sample variance `sigma_eps^2` (denominator `n`), and the outcome `X beta + eps`.
pub fn generate_outcome<T: Real, R: Rng + ?Sized>(
    cfg: &DgpConfig,
    signal: &Signal<T>,
    beta: &DVector<T>,
    gamma: &DVector<T>,
    rng: &mut R,
) -> Result<(DVector<T>, DVector<T>)> {
    let n = signal.x.nrows();
    let p = signal.x.ncols();
    if beta.len() != p || gamma.len() != p {
        return Err(CcrError::DimensionMismatch(format!(
            "coefficients must have length p = {p}"
        )));
    }
    let eta = gaussian_vec::<T, _>(n, rng) * T::lit(cfg.sigma_eps);
    let signal_part = &signal.x * beta;
    if cfg.sigma_eps == 0.0 {
        return Ok((signal_part, DVector::zeros(n)));
    }
    let mut eps = DMatrix::from_column_slice(n, 1, (&signal.x * gamma + eta).as_slice());
    remove_span(&signal.u_w, &mut eps);
    let eps = DVector::from_column_slice(eps.as_slice());

    let nn = T::from_count(n);
    let mean = eps.sum() / nn;
    let var = eps.iter().map(|&e| (e - mean) * (e - mean)).fold(T::zero(), |a, b| a + b) / nn;
    if !(var > T::zero()) {
        return Err(CcrError::DegenerateDisturbance);
    }
    let eps = eps * (T::lit(cfg.sigma_eps) / var.sqrt());
    Ok((signal_part + &eps, eps))
}

/// Block-level coefficients `(beta_0, gamma)`: unit-norm Gaussian `beta_0`
/// and Gaussian `gamma` normalised then scaled by `gamma_scale`.
pub fn make_coefficients<T: Real, R: Rng + ?Sized>(
    cfg: &DgpConfig,
    rng: &mut R,
) -> Result<(DVector<T>, DVector<T>)> {
    let (p, _) = cfg.dims()?;
    let mut beta = gaussian_vec::<T, _>(p, rng);
    let bn = beta.norm();
    beta.unscale_mut(bn);
    let mut gamma = gaussian_vec::<T, _>(p, rng);
    let gn = gamma.norm();
    gamma.scale_mut(T::lit(cfg.gamma_scale) / gn);
    Ok((beta, gamma))
}

/// One simulated replication together with its seeds and block coefficient.
#[derive(Debug, Clone)]
pub struct Simulated<T: Real> {
    pub dataset: Dataset<T>,
    pub signal: Signal<T>,
    /// Block-level draw; the dataset's truth holds its projection onto `row(X)`.
    pub beta0: DVector<T>,
    pub gamma: DVector<T>,
    pub seed: StreamSeed,
}

/// Replication `rep` of the cell described by `cfg`: coefficients from the
/// block stream, then signal, noise and outcome from the replication stream.
pub fn simulate<T: Real>(cfg: &DgpConfig, rep: u64) -> Result<Simulated<T>> {
    cfg.validate()?;
    let (beta0, gamma) = make_coefficients::<T, _>(cfg, &mut cfg.block_seed().rng())?;
    let seed = cfg.replication_seed(rep);
    let mut rng = seed.rng();
    let signal = generate_signal::<T, _>(cfg, &mut rng)?;
    let (z_x, z_w) = generate_noise(cfg, &signal.x, &signal.w, &mut rng)?;
    let (y, eps) = generate_outcome(cfg, &signal, &beta0, &gamma, &mut rng)?;

    let beta_star = &signal.v_x * signal.v_x.tr_mul(&beta0);
    let truth = GroundTruth::new(signal.x.clone(), signal.w.clone(), beta_star, eps, &z_x, &z_w)?;
    let mut dataset = Dataset::new(y, z_x, z_w, Some(truth))?;
    dataset.config = Some(cfg.clone());
    Ok(Simulated {
        dataset,
        signal,
        beta0,
        gamma,
        seed,
    })
}
