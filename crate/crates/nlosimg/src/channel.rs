//! Double-bounce OFDM echo synthesis: BS -> reflector -> target -> reflector
//! -> BS, one pilot block per swept beam.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{beam_footprint, pilot_symbols, BeamKind, BsArray, Codebook, OfdmConfig};
use crate::error::{invalid, Error, Result};
use crate::geometry::{outgoing_distance, SceneGeometry, TargetState, Vec2};
use crate::io::{self, ContainerHeader};
use crate::reflector::{reflection_gain_with, BeamIllumination, GainModel, ReflectorDesign};
use crate::C0;

const ECHO_TAG: &[u8; 8] = b"NLOSECHO";
const NOISE_KEY: u64 = 0x6e6f_6973_6500_0001;
const GAMMA_KEY: u64 = 0x6761_6d6d_6100_0002;

/// Everything fixed about the sensing system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub geom: SceneGeometry,
    pub cfg: OfdmConfig,
    pub array: BsArray,
    pub design: ReflectorDesign,
    pub codebook: Codebook,
    #[serde(default)]
    pub gain_model: GainModel,
}

impl Setup {
    pub fn beams(&self) -> Vec<BeamMeta> {
        plan_beams(&self.design, &self.codebook, &self.array, &self.geom)
    }

    pub fn gain(&self, beam: &BeamMeta, pixel: Vec2) -> Complex64 {
        if beam.misses_reflector {
            return Complex64::new(0.0, 0.0);
        }
        reflection_gain_with(&self.design, &beam.illumination(&self.geom), pixel, self.gain_model)
    }

    /// Incidence points of the beams that hit the reflector.
    pub fn incidence_points(&self) -> Vec<f64> {
        self.beams()
            .iter()
            .filter(|b| !b.misses_reflector)
            .map(|b| b.incidence_x)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamMeta {
    pub slot: usize,
    /// ℓ, centered on the middle of the sweep.
    pub time_index: f64,
    pub angle: f64,
    pub kind: BeamKind,
    pub incidence_x: f64,
    pub incoming_distance: f64,
    pub atoms: Range<usize>,
    pub misses_reflector: bool,
}

impl BeamMeta {
    pub fn illumination(&self, geom: &SceneGeometry) -> BeamIllumination {
        BeamIllumination {
            theta_i: self.angle,
            incidence_x: self.incidence_x,
            atoms: self.atoms.clone(),
            bs_position: geom.bs_position,
        }
    }
}

pub fn plan_beams(design: &ReflectorDesign, codebook: &Codebook, array: &BsArray, geom: &SceneGeometry) -> Vec<BeamMeta> {
    codebook
        .entries
        .iter()
        .enumerate()
        .map(|(slot, e)| {
            let fp = beam_footprint(e.angle, array, geom);
            let atoms = design.illuminated_atoms(&fp);
            BeamMeta {
                slot,
                time_index: codebook.time_index(slot),
                angle: e.angle,
                kind: e.kind,
                incidence_x: fp.center,
                incoming_distance: geom.incoming_distance(fp.center),
                misses_reflector: atoms.is_empty(),
                atoms,
            }
        })
        .collect()
}

/// Path-loss amplitude β of one double-bounce path.
pub fn beta(d_in: f64, d_out: f64, cfg: &OfdmConfig, array: &BsArray) -> Result<f64> {
    if !(d_in > 0.0 && d_out > 0.0) {
        return Err(invalid("distance", "path lengths must be positive"));
    }
    let lambda = cfg.wavelength();
    let k = array.element_count as f64;
    let num = cfg.bandwidth * cfg.pilot_duration * lambda.powi(6) * k.powi(4);
    let den = (4.0 * PI).powi(7) * d_in.powi(4) * d_out.powi(4);
    Ok((num / den).sqrt())
}

fn beta_unchecked(d_in: f64, d_out: f64, cfg: &OfdmConfig, array: &BsArray) -> f64 {
    beta(d_in, d_out, cfg, array).unwrap_or(0.0)
}

/// Per-beam SNR after summing the subcarriers of one beam (linear).
pub fn snr_per_beam_linear(beam: &BeamMeta, target: &TargetState, setup: &Setup) -> f64 {
    if beam.misses_reflector || target.rcs == 0.0 {
        return 0.0;
    }
    let r = target.position.to_xy();
    let cfg = &setup.cfg;
    let d_out = outgoing_distance(beam.incidence_x, r);
    let b = beta_unchecked(beam.incoming_distance, d_out, cfg, &setup.array);
    let g = setup.gain(beam, r).norm_sqr();
    let k = setup.array.element_count as f64;
    cfg.tx_power * target.rcs * b * b * g / (k * cfg.noise_variance())
}

pub fn snr_per_beam(beam: &BeamMeta, target: &TargetState, setup: &Setup) -> f64 {
    10.0 * snr_per_beam_linear(beam, target, setup).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub beta: Vec<f64>,
    pub snr_per_beam: Vec<f64>,
    /// Sum of the per-beam SNRs, the image SNR of an ideal coherent stack.
    pub coherent_snr: f64,
}

pub fn link_budget(target: &TargetState, setup: &Setup) -> LinkBudget {
    let r = target.position.to_xy();
    let beams = setup.beams();
    let beta = beams
        .iter()
        .map(|b| beta_unchecked(b.incoming_distance, outgoing_distance(b.incidence_x, r), &setup.cfg, &setup.array))
        .collect();
    let lin: Vec<f64> = beams.iter().map(|b| snr_per_beam_linear(b, target, setup)).collect();
    LinkBudget {
        beta,
        snr_per_beam: lin.iter().map(|s| 10.0 * s.log10()).collect(),
        coherent_snr: 10.0 * lin.iter().sum::<f64>().log10(),
    }
}

/// First-order Doppler of a target seen from reflector point `x`.
pub fn doppler_first_order(target: &TargetState, x: f64, wavelength: f64) -> f64 {
    let p = target.position;
    -(2.0 / wavelength) * (target.velocity_radial + target.velocity_transverse * p.angle.cos() / p.radius * x)
}

/// Doppler from the exact projection of the velocity on the reflector-to-target line.
pub fn doppler_exact(target: &TargetState, x: f64, wavelength: f64) -> f64 {
    let r = target.position.to_xy();
    let los = r - Vec2::new(x, 0.0);
    -(2.0 / wavelength) * target.velocity_xy().dot(&los) / los.norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub noise: bool,
    /// Move targets between beams instead of applying a Doppler phase.
    pub range_migration: bool,
    /// Redraw the target reflection phase on every beam.
    pub incoherent: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            noise: true,
            range_migration: false,
            incoherent: false,
        }
    }
}

impl SynthesisOptions {
    pub fn noiseless() -> Self {
        Self {
            noise: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoTensor {
    pub subcarriers: usize,
    /// Beam-major: sample (q, ℓ) sits at `slot * subcarriers + q`.
    pub samples: Vec<Complex64>,
    pub per_beam: Vec<BeamMeta>,
    /// Kσ_z².
    pub noise_power: f64,
    pub rng_seed: u64,
    pub carrier_frequency: f64,
    pub subcarrier_spacing: f64,
}

impl EchoTensor {
    pub fn beam_count(&self) -> usize {
        self.per_beam.len()
    }

    pub fn beam(&self, slot: usize) -> &[Complex64] {
        &self.samples[slot * self.subcarriers..(slot + 1) * self.subcarriers]
    }

    pub fn sample(&self, q: usize, slot: usize) -> Complex64 {
        self.samples[slot * self.subcarriers + q]
    }

    /// Elementwise sum of two tensors of the same layout.
    pub fn superpose(&self, other: &EchoTensor) -> Result<EchoTensor> {
        if self.samples.len() != other.samples.len() || self.subcarriers != other.subcarriers {
            return Err(Error::Format("tensor shapes differ".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.samples.iter_mut().zip(&other.samples) {
            *a += b;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = ContainerHeader {
            tag: *ECHO_TAG,
            rows: self.subcarriers as u64,
            cols: self.beam_count() as u64,
            f0: self.carrier_frequency,
            df: self.subcarrier_spacing,
            seed: self.rng_seed,
            aux: self.noise_power,
        };
        io::encode(&h, &self.samples)
    }

    pub fn metadata_csv(&self) -> String {
        let mut out = String::from(
            "slot,time_index,angle_rad,kind,incidence_x_m,incoming_distance_m,atom_first,atom_end,misses_reflector\n",
        );
        for b in &self.per_beam {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                b.slot,
                b.time_index,
                b.angle,
                b.kind.label(),
                b.incidence_x,
                b.incoming_distance,
                b.atoms.start,
                b.atoms.end,
                b.misses_reflector
            );
        }
        out
    }

    /// Writes `<stem>.bin` and `<stem>.beams.csv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        io::write_file(&dir.join(format!("{stem}.bin")), &self.to_bytes())?;
        std::fs::write(dir.join(format!("{stem}.beams.csv")), self.metadata_csv())?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<EchoTensor> {
        let bytes = io::read_file(&dir.join(format!("{stem}.bin")))?;
        let csv = std::fs::read_to_string(dir.join(format!("{stem}.beams.csv")))?;
        Self::from_parts(&bytes, &csv)
    }

    pub fn from_parts(bytes: &[u8], metadata_csv: &str) -> Result<EchoTensor> {
        let (h, samples) = io::decode(bytes, ECHO_TAG)?;
        let per_beam = parse_metadata(metadata_csv)?;
        if per_beam.len() as u64 != h.cols {
            return Err(Error::Format(format!(
                "{} beams in metadata, {} in tensor",
                per_beam.len(),
                h.cols
            )));
        }
        Ok(EchoTensor {
            subcarriers: h.rows as usize,
            samples,
            per_beam,
            noise_power: h.aux,
            rng_seed: h.seed,
            carrier_frequency: h.f0,
            subcarrier_spacing: h.df,
        })
    }
}

fn parse_metadata(text: &str) -> Result<Vec<BeamMeta>> {
    let bad = |line: usize, what: &str| Error::Format(format!("beam metadata line {line}: bad {what}"));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(i + 1, "field count"));
        }
        let num = |j: usize, what: &str| f[j].parse::<f64>().map_err(|_| bad(i + 1, what));
        let int = |j: usize, what: &str| f[j].parse::<usize>().map_err(|_| bad(i + 1, what));
        let kind = match f[3] {
            "3gpp" => BeamKind::Standard3gpp,
            "imaging" => BeamKind::Imaging,
            _ => return Err(bad(i + 1, "kind")),
        };
        out.push(BeamMeta {
            slot: int(0, "slot")?,
            time_index: num(1, "time_index")?,
            angle: num(2, "angle")?,
            kind,
            incidence_x: num(4, "incidence_x")?,
            incoming_distance: num(5, "incoming_distance")?,
            atoms: int(6, "atom_first")?..int(7, "atom_end")?,
            misses_reflector: f[8].parse().map_err(|_| bad(i + 1, "misses_reflector"))?,
        });
    }
    Ok(out)
}

/// Phase e^{-j2π f τ} with the carrier cycles reduced before the multiply.
fn carrier_phasor(freq: f64, tau: f64) -> Complex64 {
    let cycles = (freq * tau).fract();
    Complex64::from_polar(1.0, -2.0 * PI * cycles)
}

fn beam_rng(seed: u64, key: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key);
    rng.set_stream(slot as u64);
    rng
}

/// Noise-free channel H_{q,ℓ} of one beam, before the pilot is applied.
fn beam_channel(scene: &[TargetState], setup: &Setup, beam: &BeamMeta, seed: u64, opts: &SynthesisOptions) -> Vec<Complex64> {
    let cfg = &setup.cfg;
    let q_count = cfg.subcarrier_count;
    let mut h = vec![Complex64::new(0.0, 0.0); q_count];
    if beam.misses_reflector {
        return h;
    }
    let lambda = cfg.wavelength();
    let t = beam.time_index * cfg.slot_duration;
    let amp0 = (cfg.tx_power / q_count as f64).sqrt();
    let mut gamma_rng = beam_rng(seed, GAMMA_KEY, beam.slot);
    let p = Vec2::new(beam.incidence_x, 0.0);
    for target in scene {
        let mut alpha = target.reflectivity();
        if opts.incoherent {
            let ph: f64 = gamma_rng.random_range(0.0..2.0 * PI);
            alpha *= Complex64::from_polar(1.0, ph);
        }
        if alpha == Complex64::new(0.0, 0.0) {
            continue;
        }
        let r0 = target.position.to_xy();
        let (r, doppler) = if opts.range_migration {
            (r0 + target.velocity_xy() * t, Complex64::new(1.0, 0.0))
        } else {
            let nu = doppler_exact(target, beam.incidence_x, lambda);
            (r0, Complex64::from_polar(1.0, 2.0 * PI * nu * t))
        };
        let d_out = (r - p).norm();
        let tau = 2.0 * (beam.incoming_distance + d_out) / C0;
        let b = beta_unchecked(beam.incoming_distance, d_out, cfg, &setup.array);
        let g = setup.gain(beam, r);
        let a = amp0 * alpha * b * g * doppler * carrier_phasor(cfg.carrier_frequency, tau);
        let mut rot = carrier_phasor(cfg.subcarrier_offset(0), tau);
        let step = carrier_phasor(cfg.subcarrier_spacing, tau);
        for hq in h.iter_mut() {
            *hq += a * rot;
            rot *= step;
        }
    }
    h
}

/// Simulated receive tensor for `scene`. Identical inputs give bit-identical
/// output regardless of thread count.
pub fn synthesize(scene: &[TargetState], setup: &Setup, seed: u64, opts: &SynthesisOptions) -> Result<EchoTensor> {
    for t in scene {
        t.validate()?;
    }
    let cfg = &setup.cfg;
    let beams = setup.beams();
    let q_count = cfg.subcarrier_count;
    let noise_power = setup.array.element_count as f64 * cfg.noise_variance();
    let sd = (noise_power / 2.0).sqrt();
    let blocks: Vec<Vec<Complex64>> = beams
        .par_iter()
        .map(|beam| {
            let h = beam_channel(scene, setup, beam, seed, opts);
            let pilots = pilot_symbols(seed, beam.slot, q_count);
            let mut rng = beam_rng(seed, NOISE_KEY, beam.slot);
            h.iter()
                .zip(&pilots)
                .map(|(hq, s)| {
                    let mut y = s * hq;
                    if opts.noise {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        y += Complex64::new(re * sd, im * sd);
                    }
                    y
                })
                .collect()
        })
        .collect();
    Ok(EchoTensor {
        subcarriers: q_count,
        samples: blocks.concat(),
        per_beam: beams,
        noise_power,
        rng_seed: seed,
        carrier_frequency: cfg.carrier_frequency,
        subcarrier_spacing: cfg.subcarrier_spacing,
    })
}
