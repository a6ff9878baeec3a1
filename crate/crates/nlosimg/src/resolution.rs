//! Near-field resolution: closed-form corrections to the far-field formulas,
//! the wavenumber-coverage oracle they are checked against, and widths
//! measured on images.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::codebook::OfdmConfig;
use crate::error::{invalid, Error, Result};
use crate::geometry::{PolarPoint, Vec2};
use crate::imaging::{Coordinates, ImageGrid};
use crate::C0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionReport {
    pub rho_r_ff: f64,
    pub rho_r_nf: f64,
    /// Radians of ψ.
    pub rho_psi_ff: f64,
    pub rho_psi_nf: f64,
    pub kappa_r: f64,
    pub kappa_psi: f64,
    pub f_plus: f64,
    pub f_minus: f64,
    pub a_eff_used: f64,
}

/// Angles F_± subtended by the aperture ends, relative to ψ_0.
pub fn aperture_angles(target: PolarPoint, a_eff: f64) -> (f64, f64) {
    let (s, c) = target.angle.sin_cos();
    let r = target.radius;
    let f = |sign: f64| ((r * s + sign * a_eff / 2.0) / (r * c)).atan() - target.angle;
    (f(1.0), f(-1.0))
}

pub fn nf_resolution(target: PolarPoint, a_eff: f64, cfg: &OfdmConfig) -> Result<ResolutionReport> {
    if !(a_eff > 0.0) {
        return Err(invalid("a_eff", "must be positive"));
    }
    if !(target.radius > 0.0) || target.angle.abs() >= FRAC_PI_2 {
        return Err(Error::Geometry("resolution undefined at grazing angles".into()));
    }
    let (fp, fm) = aperture_angles(target, a_eff);
    let lambda = cfg.wavelength();
    let kappa_r = cfg.carrier_frequency / cfg.bandwidth * (1.0 - fp.cos());
    let chord = fp.sin() - fm.sin();
    let cos0 = target.angle.cos();
    let rho_r_ff = C0 / (2.0 * cfg.bandwidth);
    Ok(ResolutionReport {
        rho_r_ff,
        rho_r_nf: rho_r_ff / (1.0 + kappa_r),
        rho_psi_ff: lambda / (2.0 * a_eff * cos0),
        rho_psi_nf: lambda / (2.0 * target.radius * chord),
        kappa_r,
        kappa_psi: 1.0 - target.radius / (a_eff * cos0) * chord,
        f_plus: fp,
        f_minus: fm,
        a_eff_used: a_eff,
    })
}

/// Effective aperture giving the requested κ_R, by bisection.
pub fn a_eff_for_kappa_r(target: PolarPoint, kappa_r: f64, cfg: &OfdmConfig) -> Result<f64> {
    if !(kappa_r > 0.0) {
        return Err(invalid("kappa_r", "must be positive"));
    }
    let k = |a: f64| nf_resolution(target, a, cfg).map(|r| r.kappa_r);
    let (mut lo, mut hi) = (0.0, target.radius.max(1.0));
    while k(hi)? < kappa_r {
        hi *= 2.0;
        if hi > 1e9 * target.radius {
            return Err(invalid("kappa_r", "unreachable for this geometry and bandwidth"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if k(mid)? < kappa_r {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sampled set of monostatic wavevectors 2k_inc(x) over an aperture and a
/// band of frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub target: PolarPoint,
    pub wavevectors: Vec<Vec2>,
    /// Baseband frequency of each sample.
    pub frequency_offsets: Vec<f64>,
}

/// Odd sample counts keep the band center and aperture ends on the lattice.
pub fn spectral_coverage(target: PolarPoint, interval: (f64, f64), cfg: &OfdmConfig, n_samples: usize) -> Coverage {
    let n = n_samples.max(1) | 1;
    let nf = if cfg.bandwidth > 0.0 { n } else { 1 };
    let nx = if interval.1 > interval.0 { n } else { 1 };
    let r = target.to_xy();
    let mut wavevectors = Vec::with_capacity(n * n);
    let mut frequency_offsets = Vec::with_capacity(n * n);
    for i in 0..nf {
        let fo = if nf == 1 { 0.0 } else { -cfg.bandwidth / 2.0 + cfg.bandwidth * i as f64 / (nf - 1) as f64 };
        let k = 4.0 * PI * (cfg.carrier_frequency + fo) / C0;
        for j in 0..nx {
            let x = if nx == 1 {
                interval.0
            } else {
                interval.0 + (interval.1 - interval.0) * j as f64 / (nx - 1) as f64
            };
            let d = r - Vec2::new(x, 0.0);
            wavevectors.push(d / d.norm() * k);
            frequency_offsets.push(fo);
        }
    }
    Coverage {
        target,
        wavevectors,
        frequency_offsets,
    }
}

/// Resolution read off the coverage geometry: chord of the center-frequency
/// arc for cross-range, and the full extent normal to that chord (arc depth
/// plus bandwidth) for range.
pub fn resolution_from_coverage(cov: &Coverage, cfg: &OfdmConfig) -> Result<ResolutionReport> {
    if cov.wavevectors.is_empty() {
        return Err(invalid("coverage", "empty"));
    }
    let f_center = cov
        .frequency_offsets
        .iter()
        .map(|f| f.abs())
        .fold(f64::INFINITY, f64::min);
    let arc: Vec<Vec2> = cov
        .wavevectors
        .iter()
        .zip(&cov.frequency_offsets)
        .filter(|(_, f)| f.abs() == f_center)
        .map(|(k, _)| *k)
        .collect();
    let ang = |k: &Vec2| k.x.atan2(k.y);
    let lo = arc.iter().min_by(|a, b| ang(a).total_cmp(&ang(b))).expect("non-empty arc");
    let hi = arc.iter().max_by(|a, b| ang(a).total_cmp(&ang(b))).expect("non-empty arc");
    let chord_vec = hi - lo;
    let chord = chord_vec.norm();
    // Normal to the chord; for a point arc use the radial direction.
    let normal = if chord > 0.0 {
        Vec2::new(-chord_vec.y, chord_vec.x) / chord
    } else {
        cov.target.radial_unit()
    };
    let proj: Vec<f64> = cov.wavevectors.iter().map(|k| k.dot(&normal)).collect();
    let depth = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - proj.iter().cloned().fold(f64::INFINITY, f64::min);
    let rho_r = if depth > 0.0 { 2.0 * PI / depth } else { f64::INFINITY };
    let rho_xr = if chord > 0.0 { 2.0 * PI / chord } else { f64::INFINITY };
    let rho_r_ff = if cfg.bandwidth > 0.0 { C0 / (2.0 * cfg.bandwidth) } else { f64::INFINITY };
    let (fp, fm) = (ang(hi) - cov.target.angle, ang(lo) - cov.target.angle);
    Ok(ResolutionReport {
        rho_r_ff,
        rho_r_nf: rho_r,
        rho_psi_ff: f64::NAN,
        rho_psi_nf: rho_xr / cov.target.radius,
        kappa_r: rho_r_ff / rho_r - 1.0,
        kappa_psi: f64::NAN,
        f_plus: fp,
        f_minus: fm,
        a_eff_used: f64::NAN,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredResolution {
    pub rho_r: f64,
    /// Radians of ψ.
    pub rho_psi: f64,
    pub peak: PolarPoint,
}

/// Main-lobe widths along R and ψ through the peak of a polar SAF image.
pub fn measured_resolution(image: &ImageGrid) -> Result<MeasuredResolution> {
    if image.spec.coordinates != Coordinates::Polar {
        return Err(invalid("image", "needs a polar grid"));
    }
    let p = image.peak();
    if p.on_boundary {
        return Err(Error::PeakOnBoundary("SAF peak on the grid edge"));
    }
    Ok(MeasuredResolution {
        rho_r: image.lobe_width(1)?,
        rho_psi: image.lobe_width(2)?,
        peak: p.polar(),
    })
}
