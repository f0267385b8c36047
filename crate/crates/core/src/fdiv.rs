//! f-divergences and their Fenchel conjugates.
//!
//! For χ² the conjugate follows the convention `f*(y) = ½(y+1)²`, which exceeds
//! the exact conjugate over `x ≥ 0` by the constant ½ when `y ≥ -1`. The
//! constant does not move any optimiser and `f*'` is unaffected.

use std::fmt;
use std::str::FromStr;

use crate::error::{GofarError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FDivergence {
    ChiSquared,
    Kl,
}

impl FDivergence {
    /// `f(x)` for a density ratio `x ≥ 0`.
    pub fn f(self, x: f64) -> Result<f64> {
        if x < 0.0 || x.is_nan() {
            return Err(GofarError::InvalidSpec(format!("density ratio {x} is negative")));
        }
        Ok(match self {
            FDivergence::ChiSquared => 0.5 * (x - 1.0).powi(2),
            FDivergence::Kl => xlogx(x),
        })
    }

    pub fn f_star(self, y: f64) -> f64 {
        match self {
            FDivergence::ChiSquared => 0.5 * (y + 1.0).powi(2),
            FDivergence::Kl => (y - 1.0).exp(),
        }
    }

    pub fn f_star_prime(self, y: f64) -> f64 {
        match self {
            FDivergence::ChiSquared => y + 1.0,
            FDivergence::Kl => (y - 1.0).exp(),
        }
    }

    /// Nonnegative regression weight `max(0, f*'(y))`.
    pub fn weight(self, y: f64) -> f64 {
        self.f_star_prime(y).max(0.0)
    }

    pub fn name(self) -> &'static str {
        match self {
            FDivergence::ChiSquared => "chi2",
            FDivergence::Kl => "kl",
        }
    }
}

impl fmt::Display for FDivergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FDivergence {
    type Err = GofarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chi2" => Ok(FDivergence::ChiSquared),
            "kl" => Ok(FDivergence::Kl),
            other => Err(GofarError::Config(format!("unknown divergence {other:?} (chi2|kl)"))),
        }
    }
}

/// `x log x` with `0 log 0 = 0`.
pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `D_f(d1 ‖ d2) = Σ d2 f(d1/d2)`.
pub fn divergence(d1: &[f64], d2: &[f64], div: FDivergence) -> Result<f64> {
    if d1.len() != d2.len() {
        return Err(GofarError::Shape(format!("{} vs {} entries", d1.len(), d2.len())));
    }
    let mut total = 0.0;
    for (i, (&p, &q)) in d1.iter().zip(d2).enumerate() {
        if q > 0.0 {
            total += q * div.f(p / q)?;
        } else if p > 0.0 {
            return Err(GofarError::Support { what: "divergence", location: format!("index {i}") });
        }
    }
    Ok(total)
}

/// Grid maximum of `x y - f(x)` over `x ∈ [0, x_max]`, with the maximiser.
pub fn conjugate_oracle(div: FDivergence, y: f64, x_max: f64, step: f64) -> (f64, f64) {
    assert!(step > 0.0, "grid step must be positive");
    let n = (x_max / step).floor() as usize;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=n {
        let x = i as f64 * step;
        let v = x * y - div.f(x).expect("grid is nonnegative");
        if v > best.0 {
            best = (v, x);
        }
    }
    best
}
