//! Back-projection imaging: coherent and single-beam images, the point-target
//! ambiguity function and the moving-target distortion predictor.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{synthesize, BeamMeta, EchoTensor, Setup, SynthesisOptions};
use crate::codebook::{pilot_symbols, BeamKind};
use crate::error::{invalid, Error, Result};
use crate::geometry::{PolarPoint, SceneGeometry, TargetState, Vec2};
use crate::io::{self, ContainerHeader};
use crate::reflector::effective_aperture_discrete;
use crate::resolution::nf_resolution;
use crate::{sinc, C0};

const IMAGE_TAG: &[u8; 8] = b"NLOSIMAG";
/// Main-lobe level of a sinc at half its first null, in dB.
pub const HALF_NULL_DB: f64 = -3.92;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinates {
    /// axis1 = R (m), axis2 = ψ (rad).
    Polar,
    /// axis1 = x (m), axis2 = y (m).
    Cartesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(start: f64, step: f64, count: usize) -> Self {
        Self { start, step, count }
    }

    /// Odd number of samples centered on `center`, spanning at least ±half.
    pub fn centered(center: f64, half: f64, step: f64) -> Self {
        let n = (half / step).ceil() as usize;
        Self::new(center - n as f64 * step, step, 2 * n + 1)
    }

    /// Samples covering [lo, hi] with spacing at most `max_step`.
    pub fn spanning(lo: f64, hi: f64, max_step: f64) -> Self {
        let n = ((hi - lo) / max_step).ceil().max(1.0) as usize;
        Self::new(lo, (hi - lo) / n as f64, n + 1)
    }

    pub fn value(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub coordinates: Coordinates,
    pub axis1: Axis,
    pub axis2: Axis,
}

impl GridSpec {
    pub fn polar(range: Axis, angle: Axis) -> Self {
        Self {
            coordinates: Coordinates::Polar,
            axis1: range,
            axis2: angle,
        }
    }

    pub fn cartesian(x: Axis, y: Axis) -> Self {
        Self {
            coordinates: Coordinates::Cartesian,
            axis1: x,
            axis2: y,
        }
    }

    /// Polar grid over the ROI at spacing (ρ_R, ρ_ψ)/oversample, with the
    /// resolutions predicted for the ROI center.
    pub fn roi_default(setup: &Setup, oversample: f64) -> Result<Self> {
        if !(oversample >= 1.0) {
            return Err(invalid("grid_oversample", "must be >= 1"));
        }
        let geom = &setup.geom;
        let center = PolarPoint::from_xy(geom.roi_center);
        let aperture = effective_aperture_discrete(&setup.design, center).length;
        let a_eff = if aperture > 0.0 { aperture } else { setup.design.length() };
        let rep = nf_resolution(center, a_eff, &setup.cfg)?;
        let (r_lo, r_hi, a_lo, a_hi) = roi_polar_hull(geom);
        Ok(Self::polar(
            Axis::spanning(r_lo, r_hi, rep.rho_r_nf / oversample),
            Axis::spanning(a_lo, a_hi, rep.rho_psi_nf / oversample),
        ))
    }

    /// Polar grid centered on `target`, ±`cells` resolution cells along each
    /// axis.
    pub fn around(target: PolarPoint, rho_r: f64, rho_psi: f64, cells: f64, oversample: f64) -> Self {
        Self::polar(
            Axis::centered(target.radius, cells * rho_r, rho_r / oversample),
            Axis::centered(target.angle, cells * rho_psi, rho_psi / oversample),
        )
    }

    pub fn len(&self) -> usize {
        self.axis1.count * self.axis2.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i1: usize, i2: usize) -> Vec2 {
        let (a, b) = (self.axis1.value(i1), self.axis2.value(i2));
        match self.coordinates {
            Coordinates::Polar => PolarPoint::new(a, b).to_xy(),
            Coordinates::Cartesian => Vec2::new(a, b),
        }
    }

    /// Row-major pixel positions (axis2 fastest).
    pub fn points(&self) -> Vec<Vec2> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.axis1.count {
            for j in 0..self.axis2.count {
                out.push(self.point(i, j));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Each beam divided by its modelled amplitude, beams below the gain
    /// floor dropped: a point target of reflectivity α images to α per
    /// contributing beam.
    #[default]
    Normalized,
    /// Matched filter scaled to unit noise variance per pixel, so |I|² reads
    /// directly as SNR.
    Whitened,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagingOptions {
    pub weighting: Weighting,
    /// Beams with |G| more than this many dB below the best beam at a pixel,
    /// or below the footprint's coherent gain, are skipped (normalized
    /// weighting only).
    pub gain_floor_db: f64,
}

impl Default for ImagingOptions {
    fn default() -> Self {
        Self {
            weighting: Weighting::Normalized,
            gain_floor_db: 20.0,
        }
    }
}

impl ImagingOptions {
    pub fn whitened() -> Self {
        Self {
            weighting: Weighting::Whitened,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub spec: GridSpec,
    /// Row-major, axis2 fastest.
    pub values: Vec<Complex64>,
    /// Propagated noise variance of each pixel.
    pub noise_power: Vec<f64>,
    /// Test velocity ξ = (ξ_R, ξ_T), m/s.
    pub hypothesis_velocity: [f64; 2],
    /// Pixels no beam contributed to.
    pub flagged: Vec<bool>,
}

impl ImageGrid {
    pub fn shape(&self) -> (usize, usize) {
        (self.spec.axis1.count, self.spec.axis2.count)
    }

    pub fn at(&self, i1: usize, i2: usize) -> Complex64 {
        self.values[i1 * self.spec.axis2.count + i2]
    }

    pub fn magnitude(&self, i1: usize, i2: usize) -> f64 {
        self.at(i1, i2).norm()
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }

    pub fn peak(&self) -> Peak {
        let (n1, n2) = self.shape();
        let mut best = (0, 0, -1.0);
        for i in 0..n1 {
            for j in 0..n2 {
                let m = self.magnitude(i, j);
                if m > best.2 {
                    best = (i, j, m);
                }
            }
        }
        self.refine(best.0, best.1)
    }

    fn refine(&self, i: usize, j: usize) -> Peak {
        let (n1, n2) = self.shape();
        let m = self.magnitude(i, j);
        let offset = |lo: Option<f64>, hi: Option<f64>| match (lo, hi) {
            (Some(a), Some(c)) => {
                let den = a - 2.0 * m + c;
                if den < 0.0 {
                    (0.5 * (a - c) / den).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        let d1 = offset(
            (i > 0).then(|| self.magnitude(i - 1, j)),
            (i + 1 < n1).then(|| self.magnitude(i + 1, j)),
        );
        let d2 = offset(
            (j > 0).then(|| self.magnitude(i, j - 1)),
            (j + 1 < n2).then(|| self.magnitude(i, j + 1)),
        );
        Peak {
            index: (i, j),
            position: (
                self.spec.axis1.value(i) + d1 * self.spec.axis1.step,
                self.spec.axis2.value(j) + d2 * self.spec.axis2.step,
            ),
            magnitude: m,
            on_boundary: i == 0 || j == 0 || i + 1 == n1 || j + 1 == n2,
        }
    }

    /// Local maxima (8-neighbour) within `below_db` of the global peak,
    /// strongest first.
    pub fn local_peaks(&self, below_db: f64) -> Vec<Peak> {
        let (n1, n2) = self.shape();
        let top = self.peak().magnitude;
        let floor = top * 10f64.powf(-below_db / 20.0);
        let mut out = Vec::new();
        for i in 0..n1 {
            for j in 0..n2 {
                let m = self.magnitude(i, j);
                if m < floor || m == 0.0 {
                    continue;
                }
                let mut is_max = true;
                'n: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a < 0 || b < 0 || a >= n1 as i64 || b >= n2 as i64 {
                            continue;
                        }
                        let o = self.magnitude(a as usize, b as usize);
                        // Ties broken toward the lower index so plateaus yield one peak.
                        if o > m || (o == m && (a, b) < (i as i64, j as i64)) {
                            is_max = false;
                            break 'n;
                        }
                    }
                }
                if is_max {
                    out.push(self.refine(i, j));
                }
            }
        }
        out.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
        out
    }

    /// Full width of the main lobe along `axis` (1 or 2) through the peak, at
    /// [`HALF_NULL_DB`]. For a sinc lobe this equals the first-null distance.
    pub fn lobe_width(&self, axis: usize) -> Result<f64> {
        let p = self.peak();
        let (i, j) = p.index;
        let (n1, n2) = self.shape();
        let level = p.magnitude * 10f64.powf(HALF_NULL_DB / 20.0);
        let (n, step, get): (usize, f64, Box<dyn Fn(usize) -> f64 + '_>) = match axis {
            1 => (n1, self.spec.axis1.step, Box::new(move |k| self.magnitude(k, j))),
            2 => (n2, self.spec.axis2.step, Box::new(move |k| self.magnitude(i, k))),
            _ => return Err(invalid("axis", "must be 1 or 2")),
        };
        let center = if axis == 1 { i } else { j };
        let crossing = |dir: i64| -> Result<f64> {
            let mut k = center as i64;
            loop {
                let next = k + dir;
                if next < 0 || next >= n as i64 {
                    return Err(Error::PeakOnBoundary("main lobe runs off the grid"));
                }
                let (a, b) = (get(k as usize), get(next as usize));
                if b < level {
                    let frac = (a - level) / (a - b);
                    return Ok((k - center as i64) as f64 * step * dir as f64 + frac * step);
                }
                k = next;
            }
        };
        Ok(crossing(1)?.abs() + crossing(-1)?.abs())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis1,axis2,magnitude_db,phase_rad\n");
        let (n1, n2) = self.shape();
        for i in 0..n1 {
            for j in 0..n2 {
                let z = self.at(i, j);
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    self.spec.axis1.value(i),
                    self.spec.axis2.value(j),
                    20.0 * z.norm().log10(),
                    z.arg()
                );
            }
        }
        out
    }

    /// gnuplot `nonuniform matrix` text: first row is n2 then axis2, each
    /// following row is axis1 then magnitudes in dB.
    pub fn to_gnuplot_matrix(&self) -> String {
        let (n1, n2) = self.shape();
        let mut out = String::new();
        let _ = write!(out, "{n2}");
        for v in self.spec.axis2.values() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
        for i in 0..n1 {
            let _ = write!(out, "{}", self.spec.axis1.value(i));
            for j in 0..n2 {
                let _ = write!(out, " {}", 20.0 * self.magnitude(i, j).max(1e-300).log10());
            }
            out.push('\n');
        }
        out
    }

    pub fn to_bytes(&self, seed: u64) -> Vec<u8> {
        let h = ContainerHeader {
            tag: *IMAGE_TAG,
            rows: self.spec.axis1.count as u64,
            cols: self.spec.axis2.count as u64,
            f0: self.hypothesis_velocity[0],
            df: self.hypothesis_velocity[1],
            seed,
            aux: match self.spec.coordinates {
                Coordinates::Polar => 0.0,
                Coordinates::Cartesian => 1.0,
            },
        };
        io::encode(&h, &self.values)
    }

    fn axes_csv(&self) -> String {
        let a = |name: &str, ax: &Axis| format!("{name},{},{},{}\n", ax.start, ax.step, ax.count);
        format!("axis,start,step,count\n{}{}", a("axis1", &self.spec.axis1), a("axis2", &self.spec.axis2))
    }

    /// Writes `<stem>.csv`, `<stem>.gp.dat`, `<stem>.bin` and `<stem>.axes.csv`.
    pub fn save(&self, dir: &Path, stem: &str, seed: u64) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.gp.dat")), self.to_gnuplot_matrix())?;
        std::fs::write(dir.join(format!("{stem}.axes.csv")), self.axes_csv())?;
        io::write_file(&dir.join(format!("{stem}.bin")), &self.to_bytes(seed))
    }

    /// Reads back the binary container and axes written by [`ImageGrid::save`].
    /// The noise map is not persisted and comes back as NaN.
    pub fn load(dir: &Path, stem: &str) -> Result<ImageGrid> {
        let (h, values) = io::decode(&io::read_file(&dir.join(format!("{stem}.bin")))?, IMAGE_TAG)?;
        let axes = std::fs::read_to_string(dir.join(format!("{stem}.axes.csv")))?;
        let mut parsed = Vec::new();
        for line in axes.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad axis line {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            parsed.push(Axis::new(
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ));
        }
        if parsed.len() != 2 || parsed[0].count as u64 != h.rows || parsed[1].count as u64 != h.cols {
            return Err(Error::Format("axes do not match the image container".into()));
        }
        let coordinates = if h.aux == 0.0 { Coordinates::Polar } else { Coordinates::Cartesian };
        let n = values.len();
        Ok(ImageGrid {
            spec: GridSpec {
                coordinates,
                axis1: parsed[0],
                axis2: parsed[1],
            },
            flagged: values.iter().map(|z| *z == Complex64::new(0.0, 0.0)).collect(),
            values,
            noise_power: vec![f64::NAN; n],
            hypothesis_velocity: [h.f0, h.df],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub index: (usize, usize),
    /// Axis coordinates after parabolic interpolation.
    pub position: (f64, f64),
    pub magnitude: f64,
    pub on_boundary: bool,
}

impl Peak {
    pub fn polar(&self) -> PolarPoint {
        PolarPoint::new(self.position.0, self.position.1)
    }
}

/// Per-pixel, per-beam responses before the Doppler correction.
#[derive(Debug, Clone)]
pub struct PixelResponse {
    pub per_beam: Vec<Complex64>,
    pub noise_power: Vec<f64>,
    pub used: usize,
}

/// Demodulated echoes plus the model needed to focus them at any pixel.
pub struct Focuser<'a> {
    setup: &'a Setup,
    beams: &'a [BeamMeta],
    demod: Vec<Vec<Complex64>>,
    noise_power: f64,
    reference_gain: f64,
    opts: ImagingOptions,
}

impl<'a> Focuser<'a> {
    pub fn new(setup: &'a Setup, echoes: &'a EchoTensor, opts: ImagingOptions) -> Result<Self> {
        let q = setup.cfg.subcarrier_count;
        if echoes.subcarriers != q || echoes.beam_count() != setup.codebook.len() {
            return Err(Error::Format(format!(
                "echo tensor is {}x{}, setup expects {}x{}",
                echoes.subcarriers,
                echoes.beam_count(),
                q,
                setup.codebook.len()
            )));
        }
        for (b, e) in echoes.per_beam.iter().zip(&setup.codebook.entries) {
            if (b.angle - e.angle).abs() > 1e-12 {
                return Err(Error::Format(format!("beam {} angle differs from the codebook", b.slot)));
            }
        }
        let demod = echoes
            .per_beam
            .par_iter()
            .map(|b| {
                let s = pilot_symbols(echoes.rng_seed, b.slot, q);
                echoes.beam(b.slot).iter().zip(&s).map(|(y, s)| y * s.conj()).collect()
            })
            .collect();
        Ok(Self {
            setup,
            beams: &echoes.per_beam,
            demod,
            noise_power: echoes.noise_power,
            // Only the normalized weighting needs it, and it costs a full
            // gain evaluation over the ROI.
            reference_gain: match opts.weighting {
                Weighting::Normalized => reference_gain(setup, &echoes.per_beam),
                Weighting::Whitened => 0.0,
            },
            opts,
        })
    }

    pub fn beams(&self) -> &[BeamMeta] {
        self.beams
    }

    /// Modelled complex amplitude √(P/Q)·β·G of each beam at `pixel`.
    pub fn amplitudes(&self, pixel: Vec2) -> Vec<Complex64> {
        let cfg = &self.setup.cfg;
        let amp0 = (cfg.tx_power / cfg.subcarrier_count as f64).sqrt();
        self.beams
            .iter()
            .map(|b| {
                if b.misses_reflector {
                    return Complex64::new(0.0, 0.0);
                }
                let d_out = (pixel - Vec2::new(b.incidence_x, 0.0)).norm();
                let beta = crate::channel::beta(b.incoming_distance, d_out, cfg, &self.setup.array).unwrap_or(0.0);
                amp0 * beta * self.setup.gain(b, pixel)
            })
            .collect()
    }

    fn weights(&self, pixel: Vec2, amps: &[Complex64]) -> Vec<Complex64> {
        let q = self.setup.cfg.subcarrier_count as f64;
        match self.opts.weighting {
            Weighting::Normalized => {
                let rel = 10f64.powf(-self.opts.gain_floor_db / 20.0);
                let gains: Vec<f64> = self
                    .beams
                    .iter()
                    .map(|b| if b.misses_reflector { 0.0 } else { self.setup.gain(b, pixel).norm() })
                    .collect();
                let top = gains.iter().cloned().fold(0.0, f64::max);
                amps.iter()
                    .zip(&gains)
                    .map(|(a, g)| {
                        // Same floor against the best gain at this pixel and
                        // the best gain anywhere in the ROI, so pixels no beam
                        // really illuminates stay empty.
                        if *g > 0.0 && *g >= top * rel && *g >= self.reference_gain * rel {
                            1.0 / (q * a)
                        } else {
                            Complex64::new(0.0, 0.0)
                        }
                    })
                    .collect()
            }
            Weighting::Whitened => {
                let energy: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
                if energy == 0.0 {
                    return vec![Complex64::new(0.0, 0.0); amps.len()];
                }
                let scale = 1.0 / (self.noise_power * q * energy).sqrt();
                amps.iter().map(|a| a.conj() * scale).collect()
            }
        }
    }

    /// I_ℓ(pixel) for every beam, without Doppler correction.
    pub fn respond(&self, pixel: Vec2) -> PixelResponse {
        let cfg = &self.setup.cfg;
        let q = cfg.subcarrier_count as f64;
        let w = self.weights(pixel, &self.amplitudes(pixel));
        let mut per_beam = vec![Complex64::new(0.0, 0.0); self.beams.len()];
        let mut noise = vec![0.0; self.beams.len()];
        let mut used = 0;
        for (l, b) in self.beams.iter().enumerate() {
            if w[l] == Complex64::new(0.0, 0.0) {
                continue;
            }
            used += 1;
            let tau = 2.0 * (b.incoming_distance + (pixel - Vec2::new(b.incidence_x, 0.0)).norm()) / C0;
            let mut rot = conj_phasor(cfg.subcarrier_offset(0), tau);
            let step = conj_phasor(cfg.subcarrier_spacing, tau);
            let mut acc = Complex64::new(0.0, 0.0);
            for z in &self.demod[l] {
                acc += z * rot;
                rot *= step;
            }
            per_beam[l] = w[l] * conj_phasor(cfg.carrier_frequency, tau) * acc;
            noise[l] = q * self.noise_power * w[l].norm_sqr();
        }
        PixelResponse { per_beam, noise_power: noise, used }
    }

    /// Pre-stack statistics of beam `l` at `pixel` without the other beams:
    /// (|I_ℓ|²/σ_ℓ², the same times |a_ℓ|²). Both are independent of the
    /// weighting.
    pub fn beam_statistic(&self, pixel: Vec2, l: usize) -> (f64, f64) {
        let cfg = &self.setup.cfg;
        let b = &self.beams[l];
        if b.misses_reflector {
            return (0.0, 0.0);
        }
        let amp0 = (cfg.tx_power / cfg.subcarrier_count as f64).sqrt();
        let d_out = (pixel - Vec2::new(b.incidence_x, 0.0)).norm();
        let beta = crate::channel::beta(b.incoming_distance, d_out, cfg, &self.setup.array).unwrap_or(0.0);
        let a = amp0 * beta * self.setup.gain(b, pixel);
        if a.norm() == 0.0 {
            return (0.0, 0.0);
        }
        let tau = 2.0 * (b.incoming_distance + d_out) / C0;
        let mut rot = conj_phasor(cfg.subcarrier_offset(0), tau);
        let step = conj_phasor(cfg.subcarrier_spacing, tau);
        let mut acc = Complex64::new(0.0, 0.0);
        for z in &self.demod[l] {
            acc += z * rot;
            rot *= step;
        }
        let snr = acc.norm_sqr() / (cfg.subcarrier_count as f64 * self.noise_power);
        (snr, snr * a.norm_sqr())
    }

    /// Doppler correction e^{-j2πν_ℓ(x,ξ)ℓT} for each beam.
    pub fn doppler_correction(&self, pixel: Vec2, xi: [f64; 2]) -> Vec<Complex64> {
        let lambda = self.setup.cfg.wavelength();
        let t = self.setup.cfg.slot_duration;
        let pp = PolarPoint::from_xy(pixel);
        let v = pp.radial_unit() * xi[0] + pp.transverse_unit() * xi[1];
        self.beams
            .iter()
            .map(|b| {
                let los = pixel - Vec2::new(b.incidence_x, 0.0);
                let nu = -(2.0 / lambda) * v.dot(&los) / los.norm();
                Complex64::from_polar(1.0, -2.0 * PI * nu * b.time_index * t)
            })
            .collect()
    }

    pub fn coherent(&self, pixel: Vec2, xi: [f64; 2]) -> (Complex64, f64, usize) {
        let r = self.respond(pixel);
        let corr = self.doppler_correction(pixel, xi);
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, c) in r.per_beam.iter().zip(&corr) {
            acc += a * c;
        }
        (acc, r.noise_power.iter().sum(), r.used)
    }
}

/// Largest |G| of any beam over a fixed lattice covering the ROI.
fn reference_gain(setup: &Setup, beams: &[BeamMeta]) -> f64 {
    const N: usize = 21;
    let (r_lo, r_hi, a_lo, a_hi) = roi_polar_hull(&setup.geom);
    let pts: Vec<Vec2> = (0..N * N)
        .map(|k| {
            let (i, j) = ((k / N) as f64 / (N - 1) as f64, (k % N) as f64 / (N - 1) as f64);
            PolarPoint::new(r_lo + (r_hi - r_lo) * i, a_lo + (a_hi - a_lo) * j).to_xy()
        })
        .collect();
    pts.par_iter()
        .map(|p| {
            beams
                .iter()
                .filter(|b| !b.misses_reflector)
                .map(|b| setup.gain(b, *p).norm())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// e^{+j2π f τ} with the cycles reduced first.
fn conj_phasor(freq: f64, tau: f64) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI * (freq * tau).fract())
}

/// Range and angle limits (r_lo, r_hi, ψ_lo, ψ_hi) of the polar sector
/// enclosing the ROI rectangle.
pub fn roi_polar_hull(geom: &SceneGeometry) -> (f64, f64, f64, f64) {
    let half = geom.roi_size / 2.0;
    let nearest = Vec2::new(
        0f64.clamp(geom.roi_center.x - half.x, geom.roi_center.x + half.x),
        0f64.clamp(geom.roi_center.y - half.y, geom.roi_center.y + half.y),
    );
    let polar: Vec<PolarPoint> = geom.roi_corners().iter().map(|c| PolarPoint::from_xy(*c)).collect();
    (
        nearest.norm().max(1e-3),
        polar.iter().map(|p| p.radius).fold(0.0, f64::max),
        polar.iter().map(|p| p.angle).fold(f64::INFINITY, f64::min),
        polar.iter().map(|p| p.angle).fold(f64::NEG_INFINITY, f64::max),
    )
}

/// Pixels must fall inside the polar sector enclosing the ROI (a polar grid
/// cannot tile a rectangle exactly).
pub(crate) fn check_grid(spec: &GridSpec, setup: &Setup) -> Result<Vec<Vec2>> {
    if spec.is_empty() {
        return Err(invalid("grid", "no pixels"));
    }
    let pts = spec.points();
    let (r_lo, r_hi, a_lo, a_hi) = roi_polar_hull(&setup.geom);
    let tol = 1e-6;
    for p in &pts {
        let pp = PolarPoint::from_xy(*p);
        let inside = pp.radius >= r_lo - tol && pp.radius <= r_hi + tol && pp.angle >= a_lo - tol && pp.angle <= a_hi + tol;
        if !inside || !(p.y > 0.0) {
            return Err(invalid("grid", "pixels must lie inside the ROI"));
        }
    }
    Ok(pts)
}

/// Coherent back-projection image for test velocity `xi`.
pub fn backproject(echoes: &EchoTensor, spec: &GridSpec, xi: [f64; 2], setup: &Setup, opts: ImagingOptions) -> Result<ImageGrid> {
    let pts = check_grid(spec, setup)?;
    let f = Focuser::new(setup, echoes, opts)?;
    let px: Vec<(Complex64, f64, usize)> = pts.par_iter().map(|p| f.coherent(*p, xi)).collect();
    Ok(ImageGrid {
        spec: *spec,
        values: px.iter().map(|p| p.0).collect(),
        noise_power: px.iter().map(|p| p.1).collect(),
        hypothesis_velocity: xi,
        flagged: px.iter().map(|p| p.2 == 0).collect(),
    })
}

/// Pre-stack images I_ℓ, one per beam in slot order.
pub fn single_beam_images(echoes: &EchoTensor, spec: &GridSpec, setup: &Setup, opts: ImagingOptions) -> Result<Vec<ImageGrid>> {
    let pts = check_grid(spec, setup)?;
    let f = Focuser::new(setup, echoes, opts)?;
    let px: Vec<PixelResponse> = pts.par_iter().map(|p| f.respond(*p)).collect();
    Ok((0..echoes.beam_count())
        .map(|l| ImageGrid {
            spec: *spec,
            values: px.iter().map(|r| r.per_beam[l]).collect(),
            noise_power: px.iter().map(|r| r.noise_power[l]).collect(),
            hypothesis_velocity: [0.0, 0.0],
            flagged: px.iter().map(|r| r.noise_power[l] == 0.0).collect(),
        })
        .collect())
}

/// Noise-free image of a unit point target at `target`, scaled so that the
/// pixel at the target reads exactly 1. Uses the whitened matched filter:
/// the per-beam 1/|G| of the normalized weighting changes across the main
/// lobe and distorts its width.
pub fn saf(target: PolarPoint, setup: &Setup, spec: &GridSpec) -> Result<ImageGrid> {
    let t = TargetState::stationary(target, 1.0);
    let echoes = synthesize(&[t], setup, 0, &SynthesisOptions::noiseless())?;
    let opts = ImagingOptions::whitened();
    let mut img = backproject(&echoes, spec, [0.0, 0.0], setup, opts)?;
    let f = Focuser::new(setup, &echoes, opts)?;
    let (at_target, _, _) = f.coherent(target.to_xy(), [0.0, 0.0]);
    if at_target.norm() == 0.0 {
        return Err(Error::NotDetectable("no beam illuminates the target".into()));
    }
    for v in img.values.iter_mut() {
        *v /= at_target;
    }
    for n in img.noise_power.iter_mut() {
        *n /= at_target.norm_sqr();
    }
    Ok(img)
}

/// Average speed of the imaging beams' incidence point over the reflector,
/// as the mean step between consecutive imaging beams per slot.
pub fn sweep_velocity(setup: &Setup) -> Result<f64> {
    let beams = setup.beams();
    let xs: Vec<(f64, f64)> = beams
        .iter()
        .filter(|b| b.kind == BeamKind::Imaging && !b.misses_reflector)
        .map(|b| (b.time_index, b.incidence_x))
        .collect();
    if xs.len() < 2 {
        return Err(Error::TooFewBeams { needed: 2, got: xs.len() });
    }
    let (first, last) = (xs[0], xs[xs.len() - 1]);
    Ok((last.1 - first.1) / ((last.0 - first.0) * setup.cfg.slot_duration))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPrediction {
    pub peak: PolarPoint,
    /// Predicted peak amplitude over the static-target amplitude.
    pub defocus: f64,
    /// The target moves more than a resolution cell during the sweep, so the
    /// prediction does not apply.
    pub range_migration: bool,
}

/// Beam-sum model of the uncompensated image of a moving target, evaluated
/// on `candidates`. Uses the actual incidence points rather than a constant
/// sweep speed and the beams that illuminate the target.
pub fn predict_moving_image(target: &TargetState, setup: &Setup, candidates: &GridSpec) -> Result<MotionPrediction> {
    target.validate()?;
    let r0 = target.position;
    let lambda = setup.cfg.wavelength();
    let k2 = 4.0 * PI / lambda;
    let t = setup.cfg.slot_duration;
    let beams = setup.beams();
    let gains: Vec<f64> = beams.iter().map(|b| setup.gain(b, r0.to_xy()).norm()).collect();
    let top = gains.iter().cloned().fold(0.0, f64::max);
    let used: Vec<&BeamMeta> = beams
        .iter()
        .zip(&gains)
        .filter(|(_, g)| top > 0.0 && **g >= top * 0.1)
        .map(|(b, _)| b)
        .collect();
    if used.is_empty() {
        return Err(Error::NotDetectable("no beam illuminates the target".into()));
    }
    let a_eff = effective_aperture_discrete(&setup.design, r0).length.max(setup.design.module_length);
    let rep = nf_resolution(r0, a_eff, &setup.cfg)?;
    let span = used.len() as f64 * t;
    let speed = target.velocity_xy().norm();
    let range_migration = speed * span > 0.5 * rep.rho_r_nf.min(r0.radius * rep.rho_psi_nf);
    let rho_r = C0 / (2.0 * setup.cfg.bandwidth);
    let (s0, c0) = r0.angle.sin_cos();
    let model = |r: f64, psi: f64| -> Complex64 {
        let (s, c) = psi.sin_cos();
        let mut acc = Complex64::new(0.0, 0.0);
        for b in &used {
            let x = b.incidence_x;
            let lt = b.time_index * t;
            let phase = k2
                * (x * (s0 - s) + x * x * (c * c / (2.0 * r) - c0 * c0 / (2.0 * r0.radius))
                    - (target.velocity_radial + target.velocity_transverse * c0 / r0.radius * x) * lt);
            acc += Complex64::from_polar(1.0, phase);
        }
        acc * sinc((r - r0.radius) / rho_r)
    };
    let mut best = (r0, -1.0);
    for i in 0..candidates.axis1.count {
        for j in 0..candidates.axis2.count {
            let p = PolarPoint::from_xy(candidates.point(i, j));
            let m = model(p.radius, p.angle).norm();
            if m > best.1 {
                best = (p, m);
            }
        }
    }
    Ok(MotionPrediction {
        peak: best.0,
        defocus: best.1 / used.len() as f64,
        range_migration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::tests::small_setup;

    fn moving(v_r: f64, v_t: f64) -> TargetState {
        TargetState::stationary(PolarPoint::new(15.0, 0.05), 0.01)
            .with_phase(0.3)
            .with_velocity(v_r, v_t)
    }

    fn fine_grid(setup: &Setup, center: PolarPoint) -> GridSpec {
        let a = effective_aperture_discrete(&setup.design, center).length;
        let rep = nf_resolution(center, a, &setup.cfg).unwrap();
        GridSpec::polar(
            Axis::centered(center.radius, 2.0 * rep.rho_r_nf, rep.rho_r_nf / 4.0),
            Axis::centered(center.angle, 3.0 * rep.rho_psi_nf, rep.rho_psi_nf / 4.0),
        )
    }

    #[test]
    fn axes_and_grids() {
        let a = Axis::centered(2.0, 1.0, 0.3);
        assert_eq!(a.count, 9);
        assert!((a.value(4) - 2.0).abs() < 1e-12);
        let b = Axis::spanning(0.0, 1.0, 0.3);
        assert!(b.step <= 0.3 && (b.value(b.count - 1) - 1.0).abs() < 1e-12);
        let s = small_setup(20e6);
        let g = GridSpec::roi_default(&s, 3.0).unwrap();
        let c = PolarPoint::from_xy(s.geom.roi_center);
        let rep = nf_resolution(c, effective_aperture_discrete(&s.design, c).length, &s.cfg).unwrap();
        assert!(g.axis1.step <= rep.rho_r_nf / 2.0 && g.axis2.step <= rep.rho_psi_nf / 2.0);
        assert!(GridSpec::roi_default(&s, 0.5).is_err());
    }

    #[test]
    fn static_target_focuses_at_truth() {
        let s = small_setup(100e6);
        let t = TargetState::stationary(PolarPoint::new(15.0, 0.05), 0.01);
        let y = synthesize(&[t.clone()], &s, 1, &SynthesisOptions::noiseless()).unwrap();
        let spec = fine_grid(&s, t.position);
        let img = backproject(&y, &spec, [0.0, 0.0], &s, ImagingOptions::whitened()).unwrap();
        let p = img.peak();
        let rep = nf_resolution(t.position, effective_aperture_discrete(&s.design, t.position).length, &s.cfg).unwrap();
        assert!((p.position.0 - 15.0).abs() < 0.5 * rep.rho_r_nf);
        assert!((p.position.1 - 0.05).abs() < 0.5 * rep.rho_psi_nf);
        // Each contributing beam adds α.
        let f = Focuser::new(&s, &y, ImagingOptions::default()).unwrap();
        let (v, _, used) = f.coherent(t.position.to_xy(), [0.0, 0.0]);
        assert!((v - t.reflectivity() * used as f64).norm() < 1e-6 * v.norm());
    }

    #[test]
    fn whitened_peak_is_global_and_reads_as_snr() {
        let s = small_setup(100e6);
        let t = TargetState::stationary(PolarPoint::new(15.0, -0.05), 0.01);
        let y = synthesize(&[t.clone()], &s, 1, &SynthesisOptions::noiseless()).unwrap();
        let spec = fine_grid(&s, t.position);
        let img = backproject(&y, &spec, [0.0, 0.0], &s, ImagingOptions::whitened()).unwrap();
        let f = Focuser::new(&s, &y, ImagingOptions::whitened()).unwrap();
        let (at, noise, _) = f.coherent(t.position.to_xy(), [0.0, 0.0]);
        assert!(img.values.iter().all(|v| v.norm() <= at.norm() * (1.0 + 1e-12)));
        assert!((noise - 1.0).abs() < 1e-9);
        let snr: f64 = s.beams().iter().map(|b| crate::channel::snr_per_beam_linear(b, &t, &s)).sum();
        assert!((at.norm_sqr() / snr - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_beam_images_sum_to_coherent() {
        let s = small_setup(20e6);
        let t = moving(0.4, 1.0);
        let y = synthesize(&[t.clone()], &s, 5, &SynthesisOptions::default()).unwrap();
        let spec = GridSpec::around(t.position, 0.5, 0.02, 2.0, 2.0);
        let xi = [0.4, 1.0];
        let singles = single_beam_images(&y, &spec, &s, ImagingOptions::default()).unwrap();
        let full = backproject(&y, &spec, xi, &s, ImagingOptions::default()).unwrap();
        let f = Focuser::new(&s, &y, ImagingOptions::default()).unwrap();
        for (k, p) in spec.points().iter().enumerate() {
            let corr = f.doppler_correction(*p, xi);
            let sum: Complex64 = singles.iter().zip(&corr).map(|(im, c)| im.values[k] * c).sum();
            assert!((sum - full.values[k]).norm() <= 1e-9 * full.values[k].norm().max(1e-30));
        }
    }

    #[test]
    fn noise_only_pixels() {
        let s = small_setup(20e6);
        let spec = GridSpec::roi_default(&s, 1.0).unwrap();
        // Neighbouring pixels are correlated, so pool several realizations.
        let (mut sum, mut pow, mut n) = (Complex64::new(0.0, 0.0), 0.0, 0usize);
        for seed in 0..8 {
            let y = synthesize(&[], &s, 100 + seed, &SynthesisOptions::default()).unwrap();
            let img = backproject(&y, &spec, [0.0, 0.0], &s, ImagingOptions::whitened()).unwrap();
            for k in (0..img.values.len()).filter(|k| !img.flagged[*k]) {
                assert!((img.noise_power[k] - 1.0).abs() < 1e-9);
                sum += img.values[k];
                pow += img.values[k].norm_sqr();
                n += 1;
            }
        }
        let tol = 3.0 / (n as f64).sqrt();
        assert!((sum / n as f64).norm() < tol);
        assert!((pow / n as f64 - 1.0).abs() < 2.0 * tol, "{}", pow / n as f64);
        let y = synthesize(&[], &s, 11, &SynthesisOptions::default()).unwrap();
        // Pre-stack noise variance against its propagated value, pooled over
        // many beams of one pixel.
        let singles = single_beam_images(&y, &spec, &s, ImagingOptions::default()).unwrap();
        let k = spec.len() / 2;
        let ratios: Vec<f64> = singles
            .iter()
            .filter(|im| im.noise_power[k] > 0.0)
            .map(|im| im.values[k].norm_sqr() / im.noise_power[k])
            .collect();
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(ratios.len() >= 10);
        assert!((mean_ratio - 1.0).abs() < 3.0 / (ratios.len() as f64).sqrt(), "{mean_ratio}");
    }

    #[test]
    fn radial_motion_rotates_and_compensation_restores() {
        let mut s = small_setup(100e6);
        let t = moving(0.0, 0.0);
        s.design = crate::reflector::design_lens(&s.geom, t.position.to_xy(), 15, &s.cfg).unwrap();
        let vs = sweep_velocity(&s).unwrap();
        let t = t.with_velocity(0.02 * vs, 0.0);
        let y = synthesize(&[t.clone()], &s, 2, &SynthesisOptions::noiseless()).unwrap();
        let grid = GridSpec::around(PolarPoint::new(15.0, 0.04), 0.75, 0.01, 3.0, 4.0);
        let opts = ImagingOptions::whitened();
        let img = backproject(&y, &grid, [0.0, 0.0], &s, opts).unwrap();
        let expect = (t.position.angle.sin() - t.velocity_radial / vs).asin();
        assert!((img.peak().position.1 - expect).abs() < grid.axis2.step * 2.0);
        let fixed = backproject(&y, &grid, [t.velocity_radial, 0.0], &s, opts).unwrap();
        assert!((fixed.peak().position.1 - t.position.angle).abs() < grid.axis2.step * 2.0);
        let pred = predict_moving_image(&t, &s, &grid).unwrap();
        assert!((pred.peak.angle - img.peak().position.1).abs() < grid.axis2.step * 2.0);
        assert!(!pred.range_migration);
    }

    #[test]
    fn prediction_basics() {
        let s = small_setup(100e6);
        let grid = GridSpec::around(PolarPoint::new(15.0, 0.05), 0.75, 0.02, 3.0, 4.0);
        let p0 = predict_moving_image(&moving(0.0, 0.0), &s, &grid).unwrap();
        assert!((p0.defocus - 1.0).abs() < 1e-9);
        assert!((p0.peak.angle - 0.05).abs() < 1e-9 && (p0.peak.radius - 15.0).abs() < 1e-9);
        // Transverse motion seen through a centered lens aperture: quadratic
        // phase only, so the peak stays put and the amplitude drops.
        let mut lens = s.clone();
        let on_axis = PolarPoint::new(15.0, 0.0);
        lens.design = crate::reflector::design_lens(&s.geom, on_axis.to_xy(), 15, &s.cfg).unwrap();
        let grid = GridSpec::around(on_axis, 0.75, 0.01, 3.0, 4.0);
        let t = TargetState::stationary(on_axis, 0.01).with_velocity(0.0, 4.0);
        let pt = predict_moving_image(&t, &lens, &grid).unwrap();
        assert!(pt.defocus < 0.99, "{}", pt.defocus);
        assert!(pt.peak.angle.abs() <= grid.axis2.step, "{:?} {}", pt, grid.axis2.step);
    }

    #[test]
    fn sweep_velocity_matches_span() {
        let s = small_setup(20e6);
        let vs = sweep_velocity(&s).unwrap();
        let beams = s.beams();
        let l = beams.len() as f64;
        let approx = (beams[beams.len() - 1].incidence_x - beams[0].incidence_x) / ((l - 1.0) * s.cfg.slot_duration);
        assert!((vs - approx).abs() < 1e-9 * vs.abs());
        let mut rev = s.clone();
        rev.codebook.entries.reverse();
        assert!((sweep_velocity(&rev).unwrap() + vs).abs() < 1e-9 * vs.abs());
        let mut one = s.clone();
        one.codebook.entries.truncate(1);
        assert!(matches!(sweep_velocity(&one), Err(Error::TooFewBeams { .. })));
    }

    #[test]
    fn image_file_roundtrip() {
        let s = small_setup(20e6);
        let y = synthesize(&[moving(0.0, 0.0)], &s, 3, &SynthesisOptions::default()).unwrap();
        let spec = GridSpec::around(PolarPoint::new(15.0, 0.05), 0.75, 0.02, 1.0, 2.0);
        let img = backproject(&y, &spec, [0.1, -0.2], &s, ImagingOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        img.save(dir.path(), "img", 3).unwrap();
        let back = ImageGrid::load(dir.path(), "img").unwrap();
        assert_eq!(back.values, img.values);
        assert_eq!(back.spec, img.spec);
        assert_eq!(back.hypothesis_velocity, img.hypothesis_velocity);
        let gp = img.to_gnuplot_matrix();
        assert_eq!(gp.lines().count(), spec.axis1.count + 1);
    }

    #[test]
    fn grid_outside_roi_is_rejected() {
        let s = small_setup(20e6);
        let y = synthesize(&[], &s, 3, &SynthesisOptions::noiseless()).unwrap();
        let spec = GridSpec::around(PolarPoint::new(40.0, 0.0), 0.75, 0.02, 1.0, 2.0);
        assert!(backproject(&y, &spec, [0.0, 0.0], &s, ImagingOptions::default()).is_err());
    }
}
