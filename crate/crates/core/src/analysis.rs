//! Error metrics on the simulation domain and log-log rate fits.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::lattice::{global_stencil_norm, DefectedLattice, DisplacementField};
use crate::math::ln;
use crate::potential::{Assembler, SitePotential};
use crate::{Error, Result};

/// One grid point of a convergence study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    pub geometry_error: f64,
    pub energy_error: f64,
    pub l: f64,
    pub rmse_f: f64,
    pub n_d: usize,
}

/// `log y ≈ intercept + slope · log x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// `‖Dū − Dũ‖` over the whole periodic domain.
pub fn geometry_error(lattice: &DefectedLattice, u_ref: &DisplacementField, u_sur: &DisplacementField) -> Result<f64> {
    u_ref.check(lattice)?;
    u_sur.check(lattice)?;
    Ok(global_stencil_norm(lattice, &u_ref.difference(u_sur)))
}

/// `|𝓔(ū) − Ẽ(ũ)|`, each functional at its own equilibrium.
pub fn energy_error<P, Q>(
    reference: &Assembler<'_, P>,
    surrogate: &Assembler<'_, Q>,
    u_ref: &DisplacementField,
    u_sur: &DisplacementField,
) -> Result<f64>
where
    P: SitePotential + ?Sized,
    Q: SitePotential + ?Sized,
{
    Ok((reference.energy(u_ref)? - surrogate.energy(u_sur)?).abs())
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints(points.len()));
    }
    let mut lx = Vec::with_capacity(points.len());
    let mut ly = Vec::with_capacity(points.len());
    for &(x, y) in points {
        if !(x > 0.0 && y > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::NonpositiveValue);
        }
        lx.push(ln(x));
        ly.push(ln(y));
    }
    let n = points.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::TooFewPoints(1));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit { slope, intercept, r_squared, points: points.len() })
}

/// [`fit_rate`] restricted to `lo <= x <= hi`.
pub fn fit_rate_window(points: &[(f64, f64)], lo: f64, hi: f64) -> Result<RateFit> {
    let kept: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.0 >= lo && p.0 <= hi).collect();
    fit_rate(&kept)
}
