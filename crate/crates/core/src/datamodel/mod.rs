//! Observed and ground-truth data containers, the synthetic low-rank
//! generator, and the `CCRD1` dataset file format.

mod dgp;
mod io;
mod seed;

pub use dgp::{
    dims_for_regime, generate_noise, generate_outcome, generate_signal, make_coefficients,
    mix_instrument_columns, noise_scale, simulate, DgpConfig, Regime, Signal, Simulated,
};
pub use io::{load_dataset, save_dataset, read_vector, write_vector};
pub use seed::StreamSeed;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{CcrError, Result};
use crate::scalar::Real;

/// Quantities only a simulation knows: clean signals, target coefficient and disturbance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<T: Real> {
    pub x: DMatrix<T>,
    pub w: DMatrix<T>,
    /// Minimum-norm coefficient (lies in the row space of `x`).
    pub beta: DVector<T>,
    pub eps: DVector<T>,
    pub h_x: DMatrix<T>,
    pub h_w: DMatrix<T>,
}

impl<T: Real> GroundTruth<T> {
    /// Builds the truth record; the noise matrices are `z - clean`.
    pub fn new(
        x: DMatrix<T>,
        w: DMatrix<T>,
        beta: DVector<T>,
        eps: DVector<T>,
        z_x: &DMatrix<T>,
        z_w: &DMatrix<T>,
    ) -> Result<Self> {
        if x.shape() != z_x.shape() || w.shape() != z_w.shape() {
            return Err(CcrError::DimensionMismatch(
                "clean and noisy matrices differ in shape".into(),
            ));
        }
        if beta.len() != x.ncols() || eps.len() != x.nrows() {
            return Err(CcrError::DimensionMismatch(format!(
                "beta has length {} (want {}), eps has length {} (want {})",
                beta.len(),
                x.ncols(),
                eps.len(),
                x.nrows()
            )));
        }
        let h_x = z_x - &x;
        let h_w = z_w - &w;
        Ok(GroundTruth {
            x,
            w,
            beta,
            eps,
            h_x,
            h_w,
        })
    }
}

/// Observed `(y, Z_X, Z_W)` with optional simulation truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real> {
    pub y: DVector<T>,
    pub z_x: DMatrix<T>,
    pub z_w: DMatrix<T>,
    pub truth: Option<GroundTruth<T>>,
    /// Generator settings, when the data came from [`simulate`].
    pub config: Option<DgpConfig>,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        y: DVector<T>,
        z_x: DMatrix<T>,
        z_w: DMatrix<T>,
        truth: Option<GroundTruth<T>>,
    ) -> Result<Self> {
        let n = y.len();
        if z_x.nrows() != n || z_w.nrows() != n {
            return Err(CcrError::DimensionMismatch(format!(
                "row counts disagree: y={}, z_x={}, z_w={}",
                n,
                z_x.nrows(),
                z_w.nrows()
            )));
        }
        if let Some(t) = &truth {
            if t.x.shape() != z_x.shape() || t.w.shape() != z_w.shape() {
                return Err(CcrError::DimensionMismatch(
                    "ground truth shape differs from observed data".into(),
                ));
            }
        }
        let finite = y.iter().chain(z_x.iter()).chain(z_w.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(CcrError::NonFinite("dataset"));
        }
        Ok(Dataset {
            y,
            z_x,
            z_w,
            truth,
            config: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.z_x.ncols()
    }

    pub fn p_w(&self) -> usize {
        self.z_w.ncols()
    }

    pub fn truth(&self) -> Result<&GroundTruth<T>> {
        self.truth.as_ref().ok_or(CcrError::TruthRequired)
    }

    /// Hex digest of the observed blocks `(y, Z_X, Z_W)` as little-endian f64.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for block in [self.y.as_slice(), self.z_x.as_slice(), self.z_w.as_slice()] {
            for v in block {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}
