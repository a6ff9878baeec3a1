//! OFDM numerology, BS array, the standard and imaging sweep codebooks, and
//! the beam footprint on the reflector.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{incidence_angle, incidence_point, SceneGeometry, Vec2};
use crate::C0;

/// -173 dBm/Hz in W/Hz.
pub const DEFAULT_NOISE_PSD: f64 = 5.011_872_336_272_725e-21;

const OFDM_SYMBOLS_PER_SLOT: f64 = 14.0;
const PILOT_SYMBOLS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfdmConfig {
    pub carrier_frequency: f64,
    pub subcarrier_count: usize,
    pub subcarrier_spacing: f64,
    pub numerology: u32,
    pub slot_duration: f64,
    pub pilot_duration: f64,
    pub tx_power: f64,
    pub bandwidth: f64,
    /// Noise power spectral density N_0 in W/Hz.
    pub noise_psd: f64,
}

impl OfdmConfig {
    /// Q is rounded so that B = QΔf holds exactly.
    pub fn new(carrier_frequency: f64, bandwidth: f64, numerology: u32, tx_power: f64) -> Result<Self> {
        if !(carrier_frequency > 0.0) {
            return Err(invalid("carrier_frequency", "must be positive"));
        }
        if !(tx_power > 0.0) {
            return Err(invalid("tx_power", "must be positive"));
        }
        if numerology > 6 {
            return Err(invalid("numerology", "must be in 0..=6"));
        }
        let spacing = 15e3 * f64::from(1u32 << numerology);
        let q = (bandwidth / spacing).round();
        if !(q >= 1.0) {
            return Err(invalid("bandwidth", "must cover at least one subcarrier"));
        }
        let slot = 1e-3 / f64::from(1u32 << numerology);
        Ok(Self {
            carrier_frequency,
            subcarrier_count: q as usize,
            subcarrier_spacing: spacing,
            numerology,
            slot_duration: slot,
            pilot_duration: slot * PILOT_SYMBOLS / OFDM_SYMBOLS_PER_SLOT,
            tx_power,
            bandwidth: q * spacing,
            noise_psd: DEFAULT_NOISE_PSD,
        })
    }

    pub fn with_noise_psd_dbm_hz(mut self, dbm_hz: f64) -> Self {
        self.noise_psd = 10f64.powf(dbm_hz / 10.0) * 1e-3;
        self
    }

    pub fn wavelength(&self) -> f64 {
        C0 / self.carrier_frequency
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength()
    }

    /// σ_z² = N_0 B.
    pub fn noise_variance(&self) -> f64 {
        self.noise_psd * self.bandwidth
    }

    /// Baseband offset of subcarrier `q`; the band is centered on f_0.
    pub fn subcarrier_offset(&self, q: usize) -> f64 {
        (q as f64 - (self.subcarrier_count as f64 - 1.0) / 2.0) * self.subcarrier_spacing
    }

    pub fn validate(&self) -> Result<()> {
        let expect = 15e3 * f64::from(1u32 << self.numerology.min(6));
        if (self.subcarrier_spacing - expect).abs() > 1e-6 {
            return Err(invalid("subcarrier_spacing", "must equal 15 kHz * 2^mu"));
        }
        if (self.bandwidth - self.subcarrier_count as f64 * self.subcarrier_spacing).abs() > 1e-3 {
            return Err(invalid("bandwidth", "must equal Q * subcarrier_spacing"));
        }
        if !(self.pilot_duration > 0.0 && self.pilot_duration < self.slot_duration) {
            return Err(invalid("pilot_duration", "must satisfy 0 < dt < T"));
        }
        if !(self.tx_power > 0.0 && self.noise_psd > 0.0 && self.carrier_frequency > 0.0) {
            return Err(invalid("ofdm", "powers and frequencies must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsArray {
    pub element_count: usize,
    pub element_spacing: f64,
    pub aperture: f64,
}

impl BsArray {
    pub fn new(element_count: usize, wavelength: f64) -> Result<Self> {
        if element_count < 2 {
            return Err(invalid("element_count", "need at least 2 antennas"));
        }
        let d = wavelength / 2.0;
        Ok(Self {
            element_count,
            element_spacing: d,
            aperture: element_count as f64 * d,
        })
    }

    /// Half-wavelength array closest to the requested aperture.
    pub fn with_aperture(aperture: f64, wavelength: f64) -> Result<Self> {
        Self::new((aperture / (wavelength / 2.0)).round() as usize, wavelength)
    }

    pub fn wavelength(&self) -> f64 {
        2.0 * self.element_spacing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BeamKind {
    Standard3gpp,
    Imaging,
}

impl BeamKind {
    pub fn label(self) -> &'static str {
        match self {
            BeamKind::Standard3gpp => "3gpp",
            BeamKind::Imaging => "imaging",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub angle: f64,
    pub kind: BeamKind,
}

/// Beams in transmission order. Slot `s` is fired at time s·T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub entries: Vec<CodebookEntry>,
    pub angular_step_imaging: f64,
    pub angular_span_imaging: f64,
    pub center_imaging: f64,
}

impl Codebook {
    /// Uniform sweep over [center - span/2, center + span/2] whose step does
    /// not exceed `max_step`.
    pub fn imaging(center: f64, span: f64, max_step: f64) -> Result<Self> {
        if !(max_step > 0.0) {
            return Err(invalid("angular_step", "must be positive"));
        }
        if !(span >= 0.0) {
            return Err(invalid("angular_span", "must be non-negative"));
        }
        let (count, step) = if span == 0.0 {
            (1, 0.0)
        } else {
            let l = (span / max_step).ceil() as usize + 1;
            (l, span / (l - 1) as f64)
        };
        let start = center - span / 2.0;
        let entries = (0..count)
            .map(|i| CodebookEntry {
                angle: if count == 1 { center } else { start + i as f64 * step },
                kind: BeamKind::Imaging,
            })
            .collect();
        Ok(Self {
            entries,
            angular_step_imaging: step,
            angular_span_imaging: span,
            center_imaging: center,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.angle).collect()
    }

    pub fn imaging_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == BeamKind::Imaging).count()
    }

    /// Union sweep sorted by angle. Standard beams that coincide with an
    /// imaging beam are dropped.
    pub fn union(&self, other: &Codebook) -> Codebook {
        let mut all: Vec<CodebookEntry> = self.entries.iter().chain(&other.entries).copied().collect();
        all.sort_by(|a, b| {
            a.angle
                .total_cmp(&b.angle)
                .then_with(|| (a.kind == BeamKind::Standard3gpp).cmp(&(b.kind == BeamKind::Standard3gpp)))
        });
        all.dedup_by(|b, a| (a.angle - b.angle).abs() < 1e-12);
        let imaging = if self.imaging_count() > 0 { self } else { other };
        Codebook {
            entries: all,
            angular_step_imaging: imaging.angular_step_imaging,
            angular_span_imaging: imaging.angular_span_imaging,
            center_imaging: imaging.center_imaging,
        }
    }

    /// Time index ℓ of slot `s`, centered so that ℓ runs over -L/2..L/2-1.
    pub fn time_index(&self, slot: usize) -> f64 {
        slot as f64 - (self.len() / 2) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("angle_deg,kind\n");
        for e in &self.entries {
            out.push_str(&format!("{:.12},{}\n", e.angle.to_degrees(), e.kind.label()));
        }
        out
    }
}

/// K orthogonal beams covering the ±60° sector.
pub fn make_3gpp_codebook(array: &BsArray) -> Codebook {
    let k = array.element_count;
    let step = (120f64 / k as f64).to_radians();
    let first = -60f64.to_radians() + step / 2.0;
    let entries = (0..k)
        .map(|i| CodebookEntry {
            angle: first + i as f64 * step,
            kind: BeamKind::Standard3gpp,
        })
        .collect();
    Codebook {
        entries,
        angular_step_imaging: 0.0,
        angular_span_imaging: 0.0,
        center_imaging: 0.0,
    }
}

/// Derivative of the two-way propagation phase with respect to the Tx angle.
pub fn phase_rate_vs_txangle(theta_i: f64, pixel_xy: Vec2, geom: &SceneGeometry, cfg: &OfdmConfig) -> f64 {
    let (s, c) = theta_i.sin_cos();
    let lateral = pixel_xy.x + geom.dx() - geom.dy() * theta_i.tan();
    let dir = lateral / (pixel_xy.y * pixel_xy.y + lateral * lateral).sqrt();
    4.0 * PI * geom.dy() / (cfg.wavelength() * c * c) * (s - dir)
}

/// Angular extent of the reflector seen from the BS as (center, span).
pub fn reflector_angular_extent(geom: &SceneGeometry) -> (f64, f64) {
    let lo = incidence_angle(-geom.reflector_half_length, geom);
    let hi = incidence_angle(geom.reflector_half_length, geom);
    ((lo + hi) / 2.0, hi - lo)
}

/// Largest Tx-angle step that keeps ROI replicas out of the image.
pub fn imaging_sampling_bound(geom: &SceneGeometry, center: f64, span: f64, cfg: &OfdmConfig) -> Result<f64> {
    if geom.roi_size.x <= 0.0 || geom.roi_size.y <= 0.0 {
        return Err(Error::DegenerateRoi);
    }
    if !(span > 0.0) {
        return Err(invalid("angular_span", "must be positive"));
    }
    let probes = geom.roi_probe_points();
    let hi = center + span / 2.0;
    let lo = center - span / 2.0;
    let max_hi = probes
        .iter()
        .map(|p| phase_rate_vs_txangle(hi, *p, geom, cfg))
        .fold(f64::NEG_INFINITY, f64::max);
    let min_lo = probes
        .iter()
        .map(|p| phase_rate_vs_txangle(lo, *p, geom, cfg))
        .fold(f64::INFINITY, f64::min);
    Ok(PI / (max_hi - min_lo).abs())
}

pub fn make_imaging_codebook(geom: &SceneGeometry, cfg: &OfdmConfig) -> Result<Codebook> {
    let (center, span) = reflector_angular_extent(geom);
    let step = imaging_sampling_bound(geom, center, span, cfg)?;
    Codebook::imaging(center, span, step)
}

/// Imaging sweep with the step scaled relative to the anti-aliasing bound.
pub fn make_imaging_codebook_scaled(geom: &SceneGeometry, cfg: &OfdmConfig, step_scale: f64) -> Result<Codebook> {
    if !(step_scale > 0.0) {
        return Err(invalid("step_scale", "must be positive"));
    }
    let (center, span) = reflector_angular_extent(geom);
    let step = imaging_sampling_bound(geom, center, span, cfg)?;
    Codebook::imaging(center, span, step * step_scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IaDurations {
    pub standard: f64,
    pub with_imaging: f64,
    pub overhead: f64,
    /// Standard beams that already fall on the reflector (K̄).
    pub replaced_beams: usize,
}

pub fn ia_durations(array: &BsArray, imaging: &Codebook, cfg: &OfdmConfig) -> IaDurations {
    let k = array.element_count;
    let k_bar = ((k as f64 * imaging.angular_span_imaging / (2.0 * PI / 3.0)).floor() as usize).min(k);
    let l = imaging.imaging_count();
    let standard = k as f64 * cfg.slot_duration;
    let with_imaging = (l + k - k_bar) as f64 * cfg.slot_duration;
    IaDurations {
        standard,
        with_imaging,
        overhead: with_imaging / standard,
        replaced_beams: k_bar,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    /// Incidence point of the beam center.
    pub center: f64,
    /// Unclipped projected width (infinite at normal incidence).
    pub width: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Footprint {
    pub fn is_empty(&self) -> bool {
        !(self.hi > self.lo)
    }

    pub fn length(&self) -> f64 {
        (self.hi - self.lo).max(0.0)
    }
}

/// Projection of the beam on the reflector, clipped to the segment.
///
/// The small-angle width diverges at normal incidence; there the whole
/// reflector is reported as illuminated, which is also the limit of the
/// formula as θ_i → 0.
pub fn beam_footprint(theta_i: f64, array: &BsArray, geom: &SceneGeometry) -> Footprint {
    debug_assert!(theta_i.abs() < FRAC_PI_2);
    let center = incidence_point(theta_i, geom);
    let (s, c) = theta_i.sin_cos();
    let theta_bs = array.wavelength() / (array.aperture * c);
    let width = if (s * c).abs() < 1e-12 {
        f64::INFINITY
    } else {
        (geom.dy() * theta_bs / (s * c)).abs()
    };
    let h = geom.reflector_half_length;
    let (lo, hi) = if width.is_infinite() {
        (-h, h)
    } else {
        ((center - width / 2.0).max(-h), (center + width / 2.0).min(h))
    };
    Footprint { center, width, lo, hi }
}

/// Unit-modulus QPSK pilots of one slot, reproducible from (seed, slot).
pub fn pilot_symbols(seed: u64, slot: usize, count: usize) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9170_75);
    rng.set_stream(slot as u64);
    let a = std::f64::consts::FRAC_1_SQRT_2;
    (0..count)
        .map(|_| {
            let bits: u8 = rng.random_range(0..4);
            Complex64::new(if bits & 1 == 0 { a } else { -a }, if bits & 2 == 0 { a } else { -a })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg15() -> OfdmConfig {
        OfdmConfig::new(15e9, 200e6, 2, 1.0).unwrap()
    }

    fn scene(a: f64, roi: f64) -> SceneGeometry {
        let dy = 5.0;
        SceneGeometry::new(
            Vec2::new(-dy * 20f64.to_radians().tan(), dy),
            a,
            Vec2::new(0.0, 15.0),
            Vec2::new(roi, roi),
        )
        .unwrap()
    }

    #[test]
    fn numerology() {
        let c = cfg15();
        assert_eq!(c.subcarrier_spacing, 60e3);
        assert_eq!(c.subcarrier_count, 3333);
        assert!((c.slot_duration - 0.25e-3).abs() < 1e-15);
        assert!((c.pilot_duration - 71.43e-6).abs() < 0.01e-6);
        assert!((c.wavelength() - 0.019986).abs() < 1e-5);
        c.validate().unwrap();
        let n0 = cfg15().with_noise_psd_dbm_hz(-173.0).noise_psd;
        assert!((n0 / DEFAULT_NOISE_PSD - 1.0).abs() < 1e-12);
        let offs: f64 = (0..c.subcarrier_count).map(|q| c.subcarrier_offset(q)).sum();
        assert!(offs.abs() < 1e-3);
    }

    #[test]
    fn standard_codebook() {
        let arr = BsArray::with_aperture(0.4, 0.02).unwrap();
        assert_eq!(arr.element_count, 40);
        let cb = make_3gpp_codebook(&arr);
        assert_eq!(cb.len(), 40);
        let a = cb.angles();
        assert!((a[1] - a[0] - 3f64.to_radians()).abs() < 1e-12);
        assert!(a.iter().all(|x| x.abs() <= 60f64.to_radians()));
        let small = make_3gpp_codebook(&BsArray::new(2, 0.02).unwrap());
        assert_eq!(small.len(), 2);
        assert!((small.entries[1].angle - small.entries[0].angle - 60f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn footprint_examples() {
        let g = SceneGeometry::new(Vec2::new(0.0, 5.0), 4.0, Vec2::new(0.0, 15.0), Vec2::new(2.0, 2.0)).unwrap();
        let arr = BsArray::with_aperture(0.4, 0.02).unwrap();
        let f = beam_footprint(20f64.to_radians(), &arr, &g);
        let theta_bs = 0.02 / (0.4 * 20f64.to_radians().cos());
        assert!((theta_bs - 0.0532).abs() < 1e-4);
        assert!((f.width - 0.828).abs() < 1e-3, "{}", f.width);
        let big = BsArray::with_aperture(0.8, 0.02).unwrap();
        assert!(beam_footprint(20f64.to_radians(), &big, &g).width < f.width);
        let normal = beam_footprint(0.0, &arr, &g);
        assert_eq!((normal.lo, normal.hi), (-2.0, 2.0));
        for t in [-0.5, -0.1, 0.0, 0.05, 0.3, 0.7] {
            let fp = beam_footprint(t, &arr, &g);
            assert!(fp.length() <= g.reflector_length() + 1e-12);
        }
    }

    #[test]
    fn phase_rate_matches_finite_difference() {
        let g = scene(1.2, 3.0);
        let c = cfg15();
        let k2 = 4.0 * PI / c.wavelength();
        let phase = |t: f64, p: Vec2| {
            let x = incidence_point(t, &g);
            k2 * (g.incoming_distance(x) + (p - Vec2::new(x, 0.0)).norm())
        };
        let h = 1e-6;
        for p in g.roi_probe_points() {
            for t in [0.25, 0.35, 0.45] {
                let fd = (phase(t + h, p) - phase(t - h, p)) / (2.0 * h);
                let an = phase_rate_vs_txangle(t, p, &g, &c);
                assert!((fd - an).abs() <= 1e-3 * an.abs(), "{fd} vs {an}");
            }
        }
        // Stationary phase on the specular ray.
        let t = 0.35;
        let x = incidence_point(t, &g);
        let specular = Vec2::new(x + 10.0 * t.tan(), 10.0);
        assert!(phase_rate_vs_txangle(t, specular, &g, &c).abs() < 1e-9);
    }

    #[test]
    fn phase_rate_increasing_over_sweep() {
        let g = scene(1.2, 7.5);
        let c = cfg15();
        let (center, span) = reflector_angular_extent(&g);
        for p in g.roi_probe_points() {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=200 {
                let t = center - span / 2.0 + span * i as f64 / 200.0;
                let v = phase_rate_vs_txangle(t, p, &g, &c);
                assert!(v > prev);
                prev = v;
            }
        }
    }

    fn dense_bound(g: &SceneGeometry, center: f64, span: f64, c: &OfdmConfig) -> f64 {
        let mut max_hi = f64::NEG_INFINITY;
        let mut min_lo = f64::INFINITY;
        for i in 0..100 {
            for j in 0..100 {
                let p = g.roi_center
                    + Vec2::new(
                        g.roi_size.x * (i as f64 / 99.0 - 0.5),
                        g.roi_size.y * (j as f64 / 99.0 - 0.5),
                    );
                max_hi = max_hi.max(phase_rate_vs_txangle(center + span / 2.0, p, g, c));
                min_lo = min_lo.min(phase_rate_vs_txangle(center - span / 2.0, p, g, c));
            }
        }
        PI / (max_hi - min_lo).abs()
    }

    #[test]
    fn sampling_bound_matches_dense_grid() {
        let c = cfg15();
        for (a, roi) in [(1.2, 7.5), (1.2, 2.25), (0.6, 4.0), (2.0, 1.0)] {
            let g = scene(a, roi);
            let (center, span) = reflector_angular_extent(&g);
            let fast = imaging_sampling_bound(&g, center, span, &c).unwrap();
            let dense = dense_bound(&g, center, span, &c);
            assert!((fast / dense - 1.0).abs() < 0.01, "{fast} {dense}");
        }
    }

    #[test]
    fn sampling_bound_trends() {
        let c = cfg15();
        let g = scene(1.2, 4.0);
        let (center, span) = reflector_angular_extent(&g);
        let base = imaging_sampling_bound(&g, center, span, &c).unwrap();
        let tiny = scene(1.2, 0.01);
        assert!(imaging_sampling_bound(&tiny, center, span, &c).unwrap() > base);
        assert!(imaging_sampling_bound(&scene(1.2, 0.0), center, span, &c).is_err());
        // Doubling A more than halves the step when the ROI is compact...
        let (c1, s1) = reflector_angular_extent(&scene(2.4, 0.05));
        let (c2, s2) = reflector_angular_extent(&scene(4.8, 0.05));
        let b1 = imaging_sampling_bound(&scene(2.4, 0.05), c1, s1, &c).unwrap();
        let b2 = imaging_sampling_bound(&scene(4.8, 0.05), c2, s2, &c).unwrap();
        assert!(b2 < b1 / 2.0, "{b2} vs {b1}");
        // ...and the beam count always grows faster than A.
        for roi in [0.5, 2.25, 7.5] {
            for a in [0.3, 1.2] {
                let l1 = make_imaging_codebook(&scene(a, roi), &c).unwrap().len() as f64;
                let l2 = make_imaging_codebook(&scene(2.0 * a, roi), &c).unwrap().len() as f64;
                assert!(l2 - 1.0 > 2.0 * (l1 - 1.0), "roi {roi} a {a}: {l1} -> {l2}");
            }
        }
    }

    #[test]
    fn imaging_codebook_properties() {
        let c = cfg15();
        let g = scene(1.2, 7.5);
        let cb = make_imaging_codebook(&g, &c).unwrap();
        let (center, span) = reflector_angular_extent(&g);
        let bound = imaging_sampling_bound(&g, center, span, &c).unwrap();
        assert_eq!(cb.len(), (span / bound).ceil() as usize + 1);
        for w in cb.entries.windows(2) {
            assert!(w[1].angle - w[0].angle <= bound * (1.0 + 1e-12));
        }
        let first = incidence_point(cb.entries[0].angle, &g);
        let last = incidence_point(cb.entries[cb.len() - 1].angle, &g);
        assert!((first + 0.6).abs() < 1e-9 && (last - 0.6).abs() < 1e-9);
        // The reflector is fully covered by beam footprints.
        let arr = BsArray::with_aperture(0.4, c.wavelength()).unwrap();
        let fps: Vec<Footprint> = cb.angles().iter().map(|t| beam_footprint(*t, &arr, &g)).collect();
        for i in 0..=1200 {
            let x = -0.6 + i as f64 * 1e-3;
            assert!(fps.iter().any(|f| f.lo <= x && x <= f.hi));
        }
        // Halving the step doubles L up to one.
        let half = make_imaging_codebook_scaled(&g, &c, 0.5).unwrap();
        let d = half.len() as i64 - 2 * cb.len() as i64;
        assert!((-2..=1).contains(&d), "{} vs {}", half.len(), cb.len());
        assert_eq!(Codebook::imaging(0.3, 0.0, 0.01).unwrap().len(), 1);
    }

    #[test]
    fn union_has_no_duplicates() {
        let c = cfg15();
        let g = scene(1.2, 7.5);
        let img = make_imaging_codebook(&g, &c).unwrap();
        let std = make_3gpp_codebook(&BsArray::with_aperture(0.4, c.wavelength()).unwrap());
        let mut dup = std.clone();
        dup.entries.push(img.entries[3]);
        let u = img.union(&dup);
        assert_eq!(u.len(), img.len() + std.len());
        for w in u.entries.windows(2) {
            assert!(w[1].angle > w[0].angle);
        }
        assert_eq!(u.imaging_count(), img.len());
        assert_eq!(u.angular_step_imaging, img.angular_step_imaging);
    }

    #[test]
    fn durations() {
        let c = cfg15();
        let arr = BsArray::with_aperture(0.4, c.wavelength()).unwrap();
        let g = scene(1.2, 7.5);
        let img = make_imaging_codebook(&g, &c).unwrap();
        let d = ia_durations(&arr, &img, &c);
        assert!((d.standard - 10e-3).abs() < 1e-12);
        let none = Codebook { entries: vec![], ..img.clone() };
        assert!(ia_durations(&arr, &none, &c).overhead <= 1.0);
        // Same BS aperture and ROI at 28 GHz needs proportionally fewer imaging beams.
        let c28 = OfdmConfig::new(28e9, 400e6, 3, 1.0).unwrap();
        let arr28 = BsArray::with_aperture(0.4, c28.wavelength()).unwrap();
        let img28 = make_imaging_codebook(&g, &c28).unwrap();
        let d28 = ia_durations(&arr28, &img28, &c28);
        assert!(d.overhead > d28.overhead, "{} vs {}", d.overhead, d28.overhead);
    }

    #[test]
    fn pilots_unit_modulus_and_reproducible() {
        let a = pilot_symbols(7, 3, 64);
        assert_eq!(a, pilot_symbols(7, 3, 64));
        assert_ne!(a, pilot_symbols(7, 4, 64));
        assert!(a.iter().all(|s| (s.norm() - 1.0).abs() < 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn overhead_monotone_in_reflector_length(a in 0.3f64..2.0, grow in 1.05f64..1.6) {
            let c = cfg15();
            let arr = BsArray::with_aperture(0.4, c.wavelength()).unwrap();
            let small = make_imaging_codebook(&scene(a, 4.0), &c).unwrap();
            let large = make_imaging_codebook(&scene(a * grow, 4.0), &c).unwrap();
            prop_assert!(ia_durations(&arr, &large, &c).overhead >= ia_durations(&arr, &small, &c).overhead);
        }

        #[test]
        fn overhead_monotone_in_roi(roi in 0.5f64..6.0, grow in 1.05f64..1.6) {
            let c = cfg15();
            let arr = BsArray::with_aperture(0.4, c.wavelength()).unwrap();
            let small = make_imaging_codebook(&scene(1.2, roi), &c).unwrap();
            let large = make_imaging_codebook(&scene(1.2, roi * grow), &c).unwrap();
            prop_assert!(ia_durations(&arr, &large, &c).overhead >= ia_durations(&arr, &small, &c).overhead);
        }
    }
}
