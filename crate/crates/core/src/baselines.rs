//! Zero-forcing and regularized zero-forcing with per-symbol power
//! normalization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{hermitian_inverse, CMat, CVec, NumericsError, C64};

pub(crate) const GRAM_MAX_CONDITION: f64 = 1e12;

/// Transmission schemes known to the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "ZF")]
    Zf,
    #[serde(rename = "RZF")]
    Rzf,
    #[serde(rename = "CI-Iterative")]
    CiIterative,
    #[serde(rename = "CI-CF")]
    CiClosedForm,
    #[serde(rename = "CI-Oracle")]
    CiOracle,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Zf,
        Scheme::Rzf,
        Scheme::CiIterative,
        Scheme::CiClosedForm,
        Scheme::CiOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Zf => "ZF",
            Scheme::Rzf => "RZF",
            Scheme::CiIterative => "CI-Iterative",
            Scheme::CiClosedForm => "CI-CF",
            Scheme::CiOracle => "CI-Oracle",
        }
    }

    pub fn is_ci(self) -> bool {
        matches!(self, Scheme::CiIterative | Scheme::CiClosedForm | Scheme::CiOracle)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown scheme `{0}`")]
pub struct UnknownScheme(pub String);

impl FromStr for Scheme {
    type Err = UnknownScheme;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownScheme(s.trim().to_string()))
    }
}

/// A per-slot precoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    /// `Nt × K` precoding matrix.
    pub w: CMat,
    /// Transmit vector `W s`.
    pub x: CVec,
    /// Scale the receivers divide by before slicing.
    pub rx_scale: f64,
    pub label: Scheme,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("zero-forcing needs K <= Nt, got K = {k}, Nt = {nt}")]
    Overloaded { k: usize, nt: usize },
    #[error("symbol vector has length {found}, channel has {k} users")]
    Length { k: usize, found: usize },
    #[error("power must be positive, got {0}")]
    Power(f64),
    #[error("noise variance must be non-negative, got {0}")]
    NoiseVariance(f64),
    #[error("channel Gram matrix is singular: {0}")]
    Singular(#[from] NumericsError),
    #[error("precoded vector vanished")]
    ZeroTransmit,
}

/// Builds the matrix `W` whose product with `s` is `x`: `W = x ŝᵀ / K`.
pub(crate) fn rank_one_precoder(x: &CVec, s: &CVec) -> CMat {
    let k = s.len() as f64;
    let s_hat = s.map(|z| z.inv() / k);
    x * s_hat.transpose()
}

fn normalized(h: &CMat, gram: CMat, s: &CVec, p0: f64, label: Scheme) -> Result<Precoder, BaselineError> {
    let inv = hermitian_inverse(&gram, GRAM_MAX_CONDITION)?;
    let dir = h.adjoint() * (inv * s);
    let norm = dir.norm();
    if !(norm > 0.0) {
        return Err(BaselineError::ZeroTransmit);
    }
    let beta = p0.sqrt() / norm;
    let x = dir * C64::new(beta, 0.0);
    Ok(Precoder {
        w: rank_one_precoder(&x, s),
        x,
        rx_scale: beta,
        label,
    })
}

fn check(h: &CMat, s: &CVec, p0: f64) -> Result<(), BaselineError> {
    if s.len() != h.nrows() {
        return Err(BaselineError::Length {
            k: h.nrows(),
            found: s.len(),
        });
    }
    if !(p0 > 0.0) {
        return Err(BaselineError::Power(p0));
    }
    Ok(())
}

/// `x = β Hᴴ(HHᴴ)⁻¹ s` with `‖x‖² = p0`.
pub fn zf_precode(h: &CMat, s: &CVec, p0: f64) -> Result<Precoder, BaselineError> {
    check(h, s, p0)?;
    let (k, nt) = h.shape();
    if k > nt {
        return Err(BaselineError::Overloaded { k, nt });
    }
    normalized(h, h * h.adjoint(), s, p0, Scheme::Zf)
}

/// `x = β Hᴴ(HHᴴ + Kσ²/p0 · I)⁻¹ s` with `‖x‖² = p0`.
pub fn rzf_precode(h: &CMat, s: &CVec, p0: f64, noise_var: f64) -> Result<Precoder, BaselineError> {
    check(h, s, p0)?;
    if !(noise_var >= 0.0) {
        return Err(BaselineError::NoiseVariance(noise_var));
    }
    let (k, nt) = h.shape();
    if noise_var == 0.0 && k > nt {
        return Err(BaselineError::Overloaded { k, nt });
    }
    let load = k as f64 * noise_var / p0;
    let gram = h * h.adjoint() + CMat::identity(k, k) * C64::new(load, 0.0);
    normalized(h, gram, s, p0, Scheme::Rzf)
}
