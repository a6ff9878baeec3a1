//! Passive reflector designs: the modular linear-angle design, the lens and
//! the anomalous mirror, plus the two-bounce reflection gain and the
//! effective-aperture predictions.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, Footprint, OfdmConfig};
use crate::error::{invalid, Error, Result};
use crate::geometry::{incidence_point, PolarPoint, SceneGeometry, Vec2};
use crate::sinc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DesignKind {
    /// Module angles θ̄_o + (Δθ_o/A)·x_n.
    ModularLinear { center_angle: f64, angle_span: f64 },
    /// Every atom conjugates the BS -> atom -> focus path.
    Lens { focus: Vec2 },
    /// Single anomalous angle for the whole surface; specular when the
    /// angle equals the incidence angle.
    Mirror { angle: f64 },
}

/// How the gain of a footprint is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainModel {
    /// Plane waves across the footprint, phase referenced to the incidence
    /// point.
    #[default]
    PlaneWave,
    /// Exact per-atom distances to the BS and to the pixel.
    Spherical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectorDesign {
    pub module_count: usize,
    pub module_length: f64,
    pub meta_atom_spacing: f64,
    pub meta_atoms_per_module: usize,
    pub module_centers: Vec<f64>,
    pub module_reflection_angles: Vec<f64>,
    /// Stored in [0, 2π).
    pub meta_atom_phases: Vec<f64>,
    pub atom_positions: Vec<f64>,
    pub atom_module: Vec<usize>,
    pub kind: DesignKind,
    pub wavelength: f64,
    pub half_length: f64,
    #[serde(skip)]
    phasors: Vec<Complex64>,
}

/// Atoms of one beam footprint, with the geometry needed by the gain.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamIllumination {
    pub theta_i: f64,
    pub incidence_x: f64,
    pub atoms: Range<usize>,
    pub bs_position: Vec2,
}

impl BeamIllumination {
    pub fn new(design: &ReflectorDesign, theta_i: f64, footprint: &Footprint, geom: &SceneGeometry) -> Self {
        Self {
            theta_i,
            incidence_x: footprint.center,
            atoms: design.illuminated_atoms(footprint),
            bs_position: geom.bs_position,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

struct Lattice {
    spacing: f64,
    positions: Vec<f64>,
    module_of: Vec<usize>,
    centers: Vec<f64>,
    module_length: f64,
    per_module: usize,
}

fn lattice(geom: &SceneGeometry, n: usize, wavelength: f64) -> Result<Lattice> {
    if n == 0 {
        return Err(invalid("module_count", "need at least one module"));
    }
    let a = geom.reflector_length();
    let m = (a / (wavelength / 4.0)).round().max(1.0) as usize;
    if n > m {
        return Err(invalid("module_count", format!("{n} modules exceed the {m} meta-atoms of the reflector")));
    }
    let spacing = a / m as f64;
    let module_length = a / n as f64;
    let h = a / 2.0;
    let positions: Vec<f64> = (0..m).map(|i| -h + (i as f64 + 0.5) * spacing).collect();
    let module_of = positions
        .iter()
        .map(|x| (((x + h) / module_length).floor() as usize).min(n - 1))
        .collect();
    let centers = (0..n).map(|i| -h + (i as f64 + 0.5) * module_length).collect();
    Ok(Lattice {
        spacing,
        positions,
        module_of,
        centers,
        module_length,
        per_module: (m as f64 / n as f64).round() as usize,
    })
}

impl ReflectorDesign {
    fn assemble(geom: &SceneGeometry, lat: Lattice, angles: Vec<f64>, phases: Vec<f64>, kind: DesignKind, wavelength: f64) -> Self {
        let phases: Vec<f64> = phases.into_iter().map(|p| p.rem_euclid(2.0 * PI)).collect();
        let phasors = phases.iter().map(|p| Complex64::from_polar(1.0, *p)).collect();
        Self {
            module_count: lat.centers.len(),
            module_length: lat.module_length,
            meta_atom_spacing: lat.spacing,
            meta_atoms_per_module: lat.per_module,
            module_centers: lat.centers,
            module_reflection_angles: angles,
            meta_atom_phases: phases,
            atom_positions: lat.positions,
            atom_module: lat.module_of,
            kind,
            wavelength,
            half_length: geom.reflector_half_length,
            phasors,
        }
    }

    /// Rebuilds derived state after deserialization.
    pub fn refresh(&mut self) {
        self.phasors = self.meta_atom_phases.iter().map(|p| Complex64::from_polar(1.0, *p)).collect();
    }

    pub fn atom_count(&self) -> usize {
        self.atom_positions.len()
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    pub fn length(&self) -> f64 {
        2.0 * self.half_length
    }

    /// Atoms whose centers fall inside the footprint.
    pub fn illuminated_atoms(&self, fp: &Footprint) -> Range<usize> {
        if fp.is_empty() {
            return 0..0;
        }
        let m = self.atom_count() as f64;
        let d = self.meta_atom_spacing;
        let first = ((fp.lo + self.half_length) / d - 0.5).ceil().clamp(0.0, m);
        let last = ((fp.hi + self.half_length) / d - 0.5).floor().clamp(-1.0, m - 1.0);
        if last < first {
            0..0
        } else {
            first as usize..last as usize + 1
        }
    }

    pub fn module_rho(&self, n: usize) -> f64 {
        self.wavelength / (2.0 * self.module_length * self.module_reflection_angles[n].cos())
    }

    pub fn module_bounds(&self, n: usize) -> (f64, f64) {
        let c = self.module_centers[n];
        (c - self.module_length / 2.0, c + self.module_length / 2.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("atom_index,x_m,phase_rad\n");
        for (i, (x, p)) in self.atom_positions.iter().zip(&self.meta_atom_phases).enumerate() {
            out.push_str(&format!("{i},{x:.9},{p:.12}\n"));
        }
        out
    }
}

/// Center angle and angular span of the ROI seen from the reflector center.
pub fn roi_angles(geom: &SceneGeometry) -> (f64, f64) {
    let center = geom.roi_center.x.atan2(geom.roi_center.y);
    let angles: Vec<f64> = geom.roi_corners().iter().map(|p| p.x.atan2(p.y)).collect();
    let lo = angles.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = angles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (center, hi - lo)
}

/// Modular design whose module angles sweep the ROI linearly.
///
/// Each module's incidence angle comes from the imaging beam whose center
/// lands closest to the module center.
pub fn design_modular(geom: &SceneGeometry, n: usize, incidence_profile: &Codebook, cfg: &OfdmConfig) -> Result<ReflectorDesign> {
    let (center, span) = roi_angles(geom);
    design_modular_with(geom, n, incidence_profile, cfg, center, span)
}

/// As [`design_modular`] with explicit θ̄_o and Δθ_o.
pub fn design_modular_with(
    geom: &SceneGeometry,
    n: usize,
    incidence_profile: &Codebook,
    cfg: &OfdmConfig,
    center_angle: f64,
    angle_span: f64,
) -> Result<ReflectorDesign> {
    let lambda = cfg.wavelength();
    let lat = lattice(geom, n, lambda)?;
    if incidence_profile.is_empty() {
        return Err(invalid("incidence_profile", "codebook has no beams"));
    }
    let a = geom.reflector_length();
    let hits: Vec<(f64, f64)> = incidence_profile
        .angles()
        .iter()
        .map(|t| (incidence_point(*t, geom), *t))
        .collect();
    let incidence_of = |x: f64| {
        hits.iter()
            .min_by(|p, q| (p.0 - x).abs().total_cmp(&(q.0 - x).abs()))
            .map(|p| p.1)
            .unwrap()
    };
    let angles: Vec<f64> = lat.centers.iter().map(|x| center_angle + angle_span / a * x).collect();
    let theta_in: Vec<f64> = lat.centers.iter().map(|x| incidence_of(*x)).collect();
    let k = 2.0 * PI / lambda;
    let phases = lat
        .positions
        .iter()
        .zip(&lat.module_of)
        .map(|(x, &n)| k * x * (theta_in[n].sin() - angles[n].sin()))
        .collect();
    let kind = DesignKind::ModularLinear { center_angle, angle_span };
    Ok(ReflectorDesign::assemble(geom, lat, angles, phases, kind, lambda))
}

/// Lens focused on `focus`. `n` only sets the module partition used for
/// effective-aperture bookkeeping.
pub fn design_lens(geom: &SceneGeometry, focus: Vec2, n: usize, cfg: &OfdmConfig) -> Result<ReflectorDesign> {
    if !(focus.y > 0.0) {
        return Err(invalid("focus", "must lie in y > 0"));
    }
    let lambda = cfg.wavelength();
    let lat = lattice(geom, n, lambda)?;
    let k = 2.0 * PI / lambda;
    let phases = lat
        .positions
        .iter()
        .map(|x| {
            let p = Vec2::new(*x, 0.0);
            k * ((p - geom.bs_position).norm() + (focus - p).norm())
        })
        .collect();
    let angles = lat.centers.iter().map(|x| (focus.x - x).atan2(focus.y)).collect();
    Ok(ReflectorDesign::assemble(geom, lat, angles, phases, DesignKind::Lens { focus }, lambda))
}

/// Whole-surface anomalous mirror sending the wave arriving from the
/// reflector center toward `angle`.
pub fn design_mirror(geom: &SceneGeometry, angle: f64, cfg: &OfdmConfig) -> Result<ReflectorDesign> {
    let lambda = cfg.wavelength();
    let lat = lattice(geom, 1, lambda)?;
    let theta_in = (geom.dx() / geom.dy()).atan();
    let k = 2.0 * PI / lambda;
    let phases = lat
        .positions
        .iter()
        .map(|x| k * x * (theta_in.sin() - angle.sin()))
        .collect();
    Ok(ReflectorDesign::assemble(geom, lat, vec![angle], phases, DesignKind::Mirror { angle }, lambda))
}

/// sinθ_i - sinθ_o with θ_o the direction from the incidence point to the pixel.
fn direction_mismatch(beam: &BeamIllumination, pixel: Vec2) -> f64 {
    let dx = pixel.x - beam.incidence_x;
    beam.theta_i.sin() - dx / (dx * dx + pixel.y * pixel.y).sqrt()
}

/// Two-bounce reflection gain of the footprint toward `pixel`, evaluated as
/// the square of the single atom sum.
pub fn reflection_gain(design: &ReflectorDesign, beam: &BeamIllumination, pixel: Vec2) -> Complex64 {
    let s = single_pass_sum(design, beam, pixel, GainModel::PlaneWave);
    s * s
}

pub fn reflection_gain_with(design: &ReflectorDesign, beam: &BeamIllumination, pixel: Vec2, model: GainModel) -> Complex64 {
    let s = single_pass_sum(design, beam, pixel, model);
    s * s
}

fn single_pass_sum(design: &ReflectorDesign, beam: &BeamIllumination, pixel: Vec2, model: GainModel) -> Complex64 {
    if beam.atoms.is_empty() {
        return Complex64::new(0.0, 0.0);
    }
    let k = design.wavenumber();
    match model {
        GainModel::PlaneWave => {
            let s = direction_mismatch(beam, pixel);
            let m0 = beam.atoms.start;
            let x0 = design.atom_positions[m0] - beam.incidence_x;
            let mut rot = Complex64::from_polar(1.0, -k * x0 * s);
            let step = Complex64::from_polar(1.0, -k * design.meta_atom_spacing * s);
            let mut acc = Complex64::new(0.0, 0.0);
            for m in beam.atoms.clone() {
                acc += design.phasors[m] * rot;
                rot *= step;
            }
            acc
        }
        GainModel::Spherical => {
            let p = Vec2::new(beam.incidence_x, 0.0);
            let d_in = (p - beam.bs_position).norm();
            let d_out = (pixel - p).norm();
            let mut acc = Complex64::new(0.0, 0.0);
            for m in beam.atoms.clone() {
                let a = Vec2::new(design.atom_positions[m], 0.0);
                let extra = (a - beam.bs_position).norm() - d_in + (pixel - a).norm() - d_out;
                acc += design.phasors[m] * Complex64::from_polar(1.0, -k * extra);
            }
            acc
        }
    }
}

/// Direct double sum over atom pairs; reference for [`reflection_gain`].
pub fn reflection_gain_bruteforce(design: &ReflectorDesign, beam: &BeamIllumination, pixel: Vec2) -> Complex64 {
    let k = design.wavenumber();
    let s = direction_mismatch(beam, pixel);
    let mut acc = Complex64::new(0.0, 0.0);
    for m in beam.atoms.clone() {
        for mm in beam.atoms.clone() {
            let u = design.atom_positions[m] - beam.incidence_x + design.atom_positions[mm] - beam.incidence_x;
            let ph = design.meta_atom_phases[m] + design.meta_atom_phases[mm] - k * u * s;
            acc += Complex64::from_polar(1.0, ph);
        }
    }
    acc
}

/// Normalized far-field pattern of module `n`.
pub fn module_pattern(design: &ReflectorDesign, n: usize, psi: f64) -> f64 {
    let rho = design.module_rho(n);
    sinc((psi.sin() - design.module_reflection_angles[n].sin()) / rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveAperture {
    pub interval: (f64, f64),
    pub length: f64,
    pub module_set: Vec<usize>,
    pub effective_beam_count: usize,
    /// Closed form only: a denominator went non-positive and the endpoint
    /// was clipped to the reflector edge.
    pub unbounded: bool,
    /// Closed form only: the endpoints crossed after clipping.
    pub crossed: bool,
}

impl EffectiveAperture {
    /// Fills L_eff from the incidence points of the sweep.
    pub fn with_beams(mut self, incidence_points: &[f64]) -> Self {
        let (lo, hi) = self.interval;
        self.effective_beam_count = if self.length > 0.0 {
            incidence_points.iter().filter(|x| **x >= lo && **x <= hi).count()
        } else {
            0
        };
        self
    }

    pub fn contains(&self, x: f64) -> bool {
        self.length > 0.0 && x >= self.interval.0 && x <= self.interval.1
    }
}

/// Modules whose main lobe contains the target.
pub fn effective_aperture_discrete(design: &ReflectorDesign, target: PolarPoint) -> EffectiveAperture {
    let r = target.to_xy();
    let set: Vec<usize> = (0..design.module_count)
        .filter(|&n| {
            let psi_n = (r.x - design.module_centers[n]).atan2(r.y);
            (psi_n - design.module_reflection_angles[n]).abs() <= design.module_rho(n)
        })
        .collect();
    let interval = match (set.first(), set.last()) {
        (Some(&a), Some(&b)) => (design.module_bounds(a).0, design.module_bounds(b).1),
        _ => (0.0, 0.0),
    };
    EffectiveAperture {
        interval,
        length: set.len() as f64 * design.module_length,
        module_set: set,
        effective_beam_count: 0,
        unbounded: false,
        crossed: false,
    }
}

/// Linearized effective aperture of a modular (or mirror) design.
pub fn effective_aperture_closed_form(design: &ReflectorDesign, target: PolarPoint) -> Result<EffectiveAperture> {
    let (center, span) = match design.kind {
        DesignKind::ModularLinear { center_angle, angle_span } => (center_angle, angle_span),
        DesignKind::Mirror { angle } => (angle, 0.0),
        DesignKind::Lens { .. } => {
            return Err(Error::Geometry("closed-form aperture needs a linear-angle design".into()))
        }
    };
    Ok(closed_form_aperture(
        design.wavelength,
        design.length(),
        design.module_length,
        center,
        span,
        target,
    )
    .with_modules(design))
}

/// Closed-form endpoints as a bare function of the design parameters.
pub fn closed_form_aperture(
    wavelength: f64,
    reflector_length: f64,
    module_length: f64,
    center_angle: f64,
    angle_span: f64,
    target: PolarPoint,
) -> EffectiveAperture {
    let h = reflector_length / 2.0;
    let rho = wavelength / (2.0 * module_length * center_angle.cos());
    let skew = rho * center_angle.tan();
    let slope = angle_span / reflector_length;
    let curv = target.angle.cos() / target.radius;
    let offset = target.angle - center_angle;
    let mut unbounded = false;
    let mut endpoint = |num: f64, den: f64, edge: f64| {
        if den <= 0.0 {
            unbounded = true;
            edge
        } else {
            (num / den).clamp(-h, h)
        }
    };
    let lo = endpoint(offset - rho, slope * (1.0 + skew) + curv, -h);
    let hi = endpoint(offset + rho, slope * (1.0 - skew) + curv, h);
    let crossed = lo > hi;
    let interval = if crossed { (lo, lo) } else { (lo, hi) };
    EffectiveAperture {
        interval,
        length: interval.1 - interval.0,
        module_set: Vec::new(),
        effective_beam_count: 0,
        unbounded,
        crossed,
    }
}

impl EffectiveAperture {
    fn with_modules(mut self, design: &ReflectorDesign) -> Self {
        if self.length > 0.0 {
            self.module_set = (0..design.module_count)
                .filter(|&n| {
                    let c = design.module_centers[n];
                    c >= self.interval.0 && c <= self.interval.1
                })
                .collect();
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{beam_footprint, make_imaging_codebook, BsArray};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> OfdmConfig {
        OfdmConfig::new(15e9, 200e6, 2, 1.0).unwrap()
    }

    fn scene(roi: f64) -> SceneGeometry {
        let dy = 5.0;
        SceneGeometry::new(
            Vec2::new(-dy * 20f64.to_radians().tan(), dy),
            1.2,
            Vec2::new(0.0, 15.0),
            Vec2::new(roi, roi),
        )
        .unwrap()
    }

    fn modular(roi: f64, n: usize) -> (SceneGeometry, ReflectorDesign, Codebook) {
        let g = scene(roi);
        let cb = make_imaging_codebook(&g, &cfg()).unwrap();
        let d = design_modular(&g, n, &cb, &cfg()).unwrap();
        (g, d, cb)
    }

    fn illumination(d: &ReflectorDesign, g: &SceneGeometry, theta: f64) -> BeamIllumination {
        let arr = BsArray::with_aperture(0.4, cfg().wavelength()).unwrap();
        BeamIllumination::new(d, theta, &beam_footprint(theta, &arr, g), g)
    }

    #[test]
    fn modular_layout() {
        let (g, d, _) = modular(4.0, 15);
        assert_eq!(d.module_count, 15);
        assert!((d.module_length - 0.08).abs() < 1e-12);
        assert!((d.module_length * 15.0 - g.reflector_length()).abs() < 1e-12);
        assert_eq!(d.atom_count(), 240);
        assert_eq!(d.meta_atoms_per_module, 16);
        assert!(d.meta_atom_phases.iter().all(|p| (0.0..2.0 * PI).contains(p)));
        let (c, s) = roi_angles(&g);
        for (x, t) in d.module_centers.iter().zip(&d.module_reflection_angles) {
            assert!((t - (c + s / 1.2 * x)).abs() < 1e-12);
        }
        assert!(design_modular(&g, 241, &make_imaging_codebook(&g, &cfg()).unwrap(), &cfg()).is_err());
    }

    #[test]
    fn single_module_is_a_mirror_toward_roi_center() {
        let (_, d, _) = modular(4.0, 1);
        assert_eq!(d.module_reflection_angles, vec![0.0]);
        let pat = |psi: f64| module_pattern(&d, 0, psi);
        assert_eq!(pat(0.0), 1.0);
        assert!(pat(0.2) < 0.1);
    }

    #[test]
    fn point_roi_modular_matches_lens_slope() {
        // With Δθ_o -> 0 every module aims at the ROI center.
        let (g, d, _) = modular(1e-6, 15);
        let (c, _) = roi_angles(&g);
        for t in &d.module_reflection_angles {
            assert!((t - c).abs() < 1e-6);
        }
        let lens = design_lens(&g, g.roi_center, 15, &cfg()).unwrap();
        let eff = effective_aperture_discrete(&lens, PolarPoint::from_xy(g.roi_center));
        assert_eq!(eff.module_set.len(), 15);
        assert!((eff.length - 1.2).abs() < 1e-12);
    }

    #[test]
    fn pattern_properties() {
        let (_, d, _) = modular(4.0, 15);
        let n = 4;
        let t = d.module_reflection_angles[n];
        assert!((module_pattern(&d, n, t) - 1.0).abs() < 1e-12);
        let null = (t.sin() + d.module_rho(n)).asin();
        assert!(module_pattern(&d, n, null).abs() < 1e-9);
        // Halving the module length doubles the lobe width at equal angle.
        let (g, _, cb) = modular(4.0, 15);
        let d2 = design_modular(&g, 30, &cb, &cfg()).unwrap();
        let width = |d: &ReflectorDesign, n: usize| d.module_rho(n) * d.module_reflection_angles[n].cos();
        assert!((width(&d2, 0) / width(&d, 0) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn factorized_gain_matches_double_sum() {
        let (g, d, cb) = modular(4.0, 15);
        for theta in cb.angles().iter().step_by(7) {
            let b = illumination(&d, &g, *theta);
            for p in g.roi_probe_points() {
                let fast = reflection_gain(&d, &b, p);
                let slow = reflection_gain_bruteforce(&d, &b, p);
                assert!((fast - slow).norm() <= 1e-10 * slow.norm().max(1.0), "{fast} {slow}");
            }
        }
    }

    #[test]
    fn coherent_and_incoherent_limits() {
        let g = scene(4.0);
        let c = cfg();
        let theta = 0.35;
        let x_l = incidence_point(theta, &g);
        let pixel = Vec2::new(x_l + 15.0 * 0.1f64.tan(), 15.0);
        // Phases matched to this beam and pixel: |G| = M_l².
        let mut d = design_mirror(&g, 0.0, &c).unwrap();
        let b = illumination(&d, &g, theta);
        let k = d.wavenumber();
        let s = direction_mismatch(&b, pixel);
        for m in 0..d.atom_count() {
            d.meta_atom_phases[m] = (k * (d.atom_positions[m] - x_l) * s).rem_euclid(2.0 * PI);
        }
        d.refresh();
        let m_l = b.atoms.len() as f64;
        assert!((reflection_gain(&d, &b, pixel).norm() - m_l * m_l).abs() < 1e-8 * m_l * m_l);
        // Random phases: the single sum is a random walk, so E|G| = M_l.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 1000;
        let mut mean = 0.0;
        for _ in 0..trials {
            for m in 0..d.atom_count() {
                d.meta_atom_phases[m] = rng.random_range(0.0..2.0 * PI);
            }
            d.refresh();
            mean += reflection_gain(&d, &b, pixel).norm() / trials as f64;
        }
        assert!((mean / m_l - 1.0).abs() < 0.1, "{mean} vs {m_l}");
    }

    #[test]
    fn lens_focuses_exactly() {
        let g = scene(4.0);
        let focus = Vec2::new(0.3, 14.0);
        let lens = design_lens(&g, focus, 15, &cfg()).unwrap();
        for theta in [0.28, 0.35, 0.4] {
            let b = illumination(&lens, &g, theta);
            let m_l = b.atoms.len() as f64;
            let gain = reflection_gain_with(&lens, &b, focus, GainModel::Spherical);
            assert!((gain.norm() - m_l * m_l).abs() < 1e-9 * m_l * m_l);
        }
    }

    #[test]
    fn far_lens_tends_to_linear_phase() {
        let g = scene(4.0);
        let psi: f64 = 0.2;
        let far = Vec2::new(1e5 * psi.sin(), 1e5 * psi.cos());
        let lens = design_lens(&g, far, 15, &cfg()).unwrap();
        let k = lens.wavenumber();
        // Second difference of the unwrapped lens phase is the curvature; the
        // BS leg still curves, the focus leg does not.
        let unwrapped: Vec<f64> = lens
            .atom_positions
            .iter()
            .map(|x| {
                let p = Vec2::new(*x, 0.0);
                k * ((p - g.bs_position).norm() + (far - p).norm())
            })
            .collect();
        let bs_only: Vec<f64> = lens
            .atom_positions
            .iter()
            .map(|x| k * ((Vec2::new(*x, 0.0) - g.bs_position).norm() - x * psi.sin()))
            .collect();
        for i in 1..unwrapped.len() - 1 {
            let a = unwrapped[i + 1] - 2.0 * unwrapped[i] + unwrapped[i - 1];
            let b = bs_only[i + 1] - 2.0 * bs_only[i] + bs_only[i - 1];
            assert!((a - b).abs() < 1e-3 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn lens_beats_modular_at_roi_center() {
        let (g, modl, cb) = modular(4.0, 15);
        let lens = design_lens(&g, g.roi_center, 15, &cfg()).unwrap();
        for theta in cb.angles().iter().step_by(5) {
            let bl = illumination(&lens, &g, *theta);
            let bm = illumination(&modl, &g, *theta);
            let gl = reflection_gain_with(&lens, &bl, g.roi_center, GainModel::Spherical).norm();
            let gm = reflection_gain_with(&modl, &bm, g.roi_center, GainModel::Spherical).norm();
            assert!(gl >= gm, "{gl} < {gm}");
        }
    }

    fn linear_design(span: f64, a: f64, n: usize) -> ReflectorDesign {
        let g = SceneGeometry::new(Vec2::new(-1.82, 5.0), a, Vec2::new(0.0, 15.0), Vec2::new(3.0, 3.0)).unwrap();
        let c = OfdmConfig::new(crate::C0 / 0.02, 200e6, 2, 1.0).unwrap();
        let cb = make_imaging_codebook(&g, &c).unwrap();
        design_modular_with(&g, n, &cb, &c, 0.0, span).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let t = PolarPoint::new(15.0, 0.0);
        let lens_limit = closed_form_aperture(0.02, 1.2, 0.08, 0.0, 0.0, t);
        assert!((lens_limit.length - 1.2).abs() < 1e-12);
        let wide = closed_form_aperture(0.02, 100.0, 0.08, 0.0, 0.0, t);
        assert!((wide.length - 3.75).abs() < 1e-9);
        let d = linear_design(0.2, 1.2, 15);
        let eff = effective_aperture_closed_form(&d, t).unwrap();
        assert!((eff.interval.1 - 0.536).abs() < 1e-3, "{:?}", eff.interval);
        assert!((eff.length - 1.071).abs() < 2e-3);
        let disc = effective_aperture_discrete(&d, t);
        assert!((disc.length - eff.length).abs() <= d.module_length);
        assert!(!eff.module_set.is_empty());
    }

    #[test]
    fn closed_form_flags() {
        // A strongly negative span drives a denominator below zero.
        let t = PolarPoint::new(15.0, 0.0);
        let e = closed_form_aperture(0.02, 1.2, 0.08, 0.0, -2.0, t);
        assert!(e.unbounded);
        let lens = design_lens(&scene(4.0), Vec2::new(0.0, 15.0), 15, &cfg()).unwrap();
        assert!(effective_aperture_closed_form(&lens, t).is_err());
    }

    #[test]
    fn mirror_off_specular_is_empty() {
        let g = scene(4.0);
        let m = design_mirror(&g, 0.0, &cfg()).unwrap();
        let eff = effective_aperture_discrete(&m, PolarPoint::new(15.0, 0.2));
        assert!(eff.module_set.is_empty());
        assert_eq!(eff.length, 0.0);
        let on = effective_aperture_discrete(&m, PolarPoint::new(15.0, 0.0));
        assert_eq!(on.module_set, vec![0]);
    }

    #[test]
    fn closed_form_vs_discrete_random_targets() {
        let (g, d, _) = modular(4.0, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = g.roi_center + Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let t = PolarPoint::from_xy(p);
            let a = effective_aperture_closed_form(&d, t).unwrap().length;
            let b = effective_aperture_discrete(&d, t).length;
            assert!((a - b).abs() <= d.module_length + 1e-9, "{p:?}: {a} vs {b}");
        }
    }

    #[test]
    fn beam_count_tracks_aperture() {
        let (g, d, cb) = modular(4.0, 15);
        let xs: Vec<f64> = cb.angles().iter().map(|t| incidence_point(*t, &g)).collect();
        let eff = effective_aperture_discrete(&d, PolarPoint::new(15.0, 0.0)).with_beams(&xs);
        let expect = eff.length / g.reflector_length() * cb.len() as f64;
        assert!((eff.effective_beam_count as f64 - expect).abs() <= 2.0, "{} vs {expect}", eff.effective_beam_count);
    }

    #[test]
    fn aperture_trends() {
        let t = PolarPoint::new(15.0, 0.02);
        // Strictly decreasing in Δθ_o while unclipped.
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let span = 0.2 + 0.05 * i as f64;
            let a = closed_form_aperture(0.02, 1.2, 0.08, 0.0, span, t).length;
            assert!(a < prev);
            prev = a;
        }
        // Saturates in A with A_mod fixed.
        let big = closed_form_aperture(0.02, 1e4, 0.08, 0.0, 0.2, t).length;
        let bigger = closed_form_aperture(0.02, 2e4, 0.08, 0.0, 0.2, t).length;
        assert!((bigger / big - 1.0).abs() < 0.01);
        assert!(bigger > big);
        // Decreasing in A_mod.
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let am = 0.06 + 0.005 * i as f64;
            let a = closed_form_aperture(0.02, 1.2, am, 0.1, 0.6, t).length;
            assert!(a < prev);
            prev = a;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn aperture_shrinks_with_module_length(psi in -0.4f64..0.4, center in -0.4f64..0.4,
                                               span in 0.3f64..1.2, r in 5.0f64..40.0, am in 0.05f64..0.2) {
            prop_assume!((psi - center) * center.tan() < 1.0);
            let t = PolarPoint::new(r, psi);
            let a0 = closed_form_aperture(0.02, 1.2, am, center, span, t);
            let a1 = closed_form_aperture(0.02, 1.2, am * 1.001, center, span, t);
            prop_assume!(!a0.unbounded && !a0.crossed);
            prop_assume!(a0.interval.0 > -0.6 && a0.interval.1 < 0.6 && a0.length > 0.0);
            prop_assert!(a1.length < a0.length);
        }

        #[test]
        fn closed_form_within_reflector(psi in -1.0f64..1.0, center in -0.8f64..0.8,
                                        span in -0.5f64..1.5, r in 1.0f64..60.0) {
            let e = closed_form_aperture(0.02, 1.2, 0.08, center, span, PolarPoint::new(r, psi));
            prop_assert!(e.length >= 0.0 && e.length <= 1.2 + 1e-12);
        }
    }
}
