//! Velocity from the phase history of the single-beam images: the phase at
//! the target drifts linearly with v_R and quadratically with v_T as the
//! sweep walks across the reflector.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{snr_per_beam_linear, synthesize, EchoTensor, Setup, SynthesisOptions};
use crate::codebook::OfdmConfig;
use crate::error::{invalid, Error, Result};
use crate::geometry::{PolarPoint, TargetState};
use crate::imaging::{check_grid, sweep_velocity, Focuser, GridSpec, ImageGrid, ImagingOptions, PixelResponse};
use crate::reflector::effective_aperture_discrete;
use crate::resolution::nf_resolution;
use crate::C0;

/// Pre-stack images on a grid, kept together with the focuser so that the
/// phase can be read at any anchor, not only at grid nodes.
pub struct SingleBeamImages<'a> {
    focuser: Focuser<'a>,
    setup: &'a Setup,
    pub spec: GridSpec,
    /// Doppler hypothesis applied to every single-beam image.
    pub xi: [f64; 2],
    /// Per beam, per pixel: |I_ℓ|²/σ_ℓ², the pre-stack detection statistic.
    pub snr: Vec<Vec<f64>>,
    /// Per beam, per pixel: the same statistic times |a_ℓ|², which peaks where
    /// the beam actually sends energy rather than anywhere on its range ring.
    pub matched: Vec<Vec<f64>>,
}

impl<'a> SingleBeamImages<'a> {
    pub fn form(setup: &'a Setup, echoes: &'a EchoTensor, spec: &GridSpec, xi: [f64; 2]) -> Result<Self> {
        let pts = check_grid(spec, setup)?;
        let focuser = Focuser::new(setup, echoes, ImagingOptions::whitened())?;
        let px: Vec<(Vec<f64>, Vec<f64>)> = pts
            .par_iter()
            .map(|p| {
                let r = focuser.respond(*p);
                let amps = focuser.amplitudes(*p);
                let snr: Vec<f64> = r
                    .per_beam
                    .iter()
                    .zip(&r.noise_power)
                    .map(|(v, n)| if *n > 0.0 { v.norm_sqr() / n } else { 0.0 })
                    .collect();
                let matched = snr.iter().zip(&amps).map(|(s, a)| s * a.norm_sqr()).collect();
                (snr, matched)
            })
            .collect();
        let beams = echoes.beam_count();
        let snr = (0..beams).map(|l| px.iter().map(|p| p.0[l]).collect()).collect();
        let matched = (0..beams).map(|l| px.iter().map(|p| p.1[l]).collect()).collect();
        Ok(Self {
            focuser,
            setup,
            spec: *spec,
            xi,
            snr,
            matched,
        })
    }

    pub fn beam_count(&self) -> usize {
        self.snr.len()
    }

    /// Doppler-corrected I_ℓ at an arbitrary point.
    pub fn at(&self, anchor: PolarPoint) -> PixelResponse {
        let p = anchor.to_xy();
        let mut r = self.focuser.respond(p);
        if self.xi != [0.0, 0.0] {
            for (v, c) in r.per_beam.iter_mut().zip(self.focuser.doppler_correction(p, self.xi)) {
                *v *= c;
            }
        }
        r
    }

    /// Per-beam SNR estimated from the data at `anchor`, |I|²/σ² - 1 floored
    /// at a small positive value.
    pub fn estimated_snr(&self, anchor: PolarPoint) -> Vec<f64> {
        let r = self.at(anchor);
        r.per_beam
            .iter()
            .zip(&r.noise_power)
            .map(|(v, n)| if *n > 0.0 { (v.norm_sqr() / n - 1.0).max(0.1) } else { 0.0 })
            .collect()
    }

    /// Off-grid peak of beam `l` near `start`. Angle from the matched
    /// statistic, range from the plain delay statistic: the |a|² factor
    /// falls with range and would pull the range estimate inward.
    fn refine_beam_peak(&self, l: usize, start: PolarPoint) -> PolarPoint {
        let (mut dr, mut da) = (self.spec.axis1.step.abs(), self.spec.axis2.step.abs());
        let stat = |p: PolarPoint, which: usize| {
            if !p.is_valid() {
                return -1.0;
            }
            let s = self.focuser.beam_statistic(p.to_xy(), l);
            if which == 0 { s.0 } else { s.1 }
        };
        let mut c = start;
        for _ in 0..3 {
            let best_a = (-6..=6)
                .map(|j| c.angle + da * f64::from(j) / 6.0)
                .max_by(|x, y| stat(PolarPoint::new(c.radius, *x), 1).total_cmp(&stat(PolarPoint::new(c.radius, *y), 1)))
                .expect("non-empty");
            let best_r = (-6..=6)
                .map(|i| c.radius + dr * f64::from(i) / 6.0)
                .max_by(|x, y| stat(PolarPoint::new(*x, best_a), 0).total_cmp(&stat(PolarPoint::new(*y, best_a), 0)))
                .expect("non-empty");
            c = PolarPoint::new(best_r, best_a);
            dr /= 4.0;
            da /= 4.0;
        }
        c
    }

    fn statistic_grid(&self, values: &[f64]) -> ImageGrid {
        ImageGrid {
            spec: self.spec,
            values: values.iter().map(|v| Complex64::new(v.max(0.0).sqrt(), 0.0)).collect(),
            noise_power: vec![1.0; values.len()],
            hypothesis_velocity: self.xi,
            flagged: vec![false; values.len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionOptions {
    /// Pre-stack peak must exceed the median image level by this much.
    pub threshold_db: f64,
    /// Per-beam local maxima weaker than the beam's best by more than this
    /// are ignored.
    pub secondary_db: f64,
    /// Gate for merging per-beam detections, in range cells and radians.
    pub gate_range_cells: f64,
    pub gate_angle: f64,
}

impl Default for DetectionOptions {
    fn default() -> Self {
        Self {
            threshold_db: 8.0,
            secondary_db: 3.0,
            gate_range_cells: 1.0,
            gate_angle: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseTarget {
    pub position: PolarPoint,
    /// Slots whose pre-stack image contributed.
    pub beams: Vec<usize>,
    /// Another detection lies within two gates; its main lobe may overlap.
    pub overlapping: bool,
}

/// Per-beam argmax positions, grouped into targets and averaged. Sorted by
/// the number of contributing beams, strongest first.
pub fn coarse_positions(images: &SingleBeamImages, opts: &DetectionOptions) -> Result<Vec<CoarseTarget>> {
    let thr = 10f64.powf(opts.threshold_db / 10.0);
    let secondary = 10f64.powf(-opts.secondary_db / 10.0);
    let range_gate = opts.gate_range_cells * C0 / (2.0 * images.setup.cfg.bandwidth);
    // (slot, position, strength)
    let mut hits: Vec<(usize, PolarPoint, f64)> = Vec::new();
    for l in 0..images.beam_count() {
        let snr = &images.snr[l];
        let mut nz: Vec<f64> = snr.iter().cloned().filter(|v| *v > 0.0).collect();
        if nz.is_empty() {
            continue;
        }
        nz.sort_by(f64::total_cmp);
        let median = nz[nz.len() / 2];
        let detected: Vec<f64> = images.matched[l]
            .iter()
            .zip(snr)
            .map(|(m, s)| if *s >= thr * median { *m } else { 0.0 })
            .collect();
        let top = detected.iter().cloned().fold(0.0, f64::max);
        if top <= 0.0 {
            continue;
        }
        let grid = images.statistic_grid(&detected);
        for p in grid.local_peaks(opts.secondary_db.max(0.0)) {
            let strength = p.magnitude * p.magnitude;
            if strength >= top * secondary {
                let (i, j) = p.index;
                let start = PolarPoint::new(images.spec.axis1.value(i), images.spec.axis2.value(j));
                hits.push((l, images.refine_beam_peak(l, start), strength));
            }
        }
    }
    if hits.is_empty() {
        return Err(Error::NotDetectable(format!(
            "no single-beam image exceeds its median by {} dB",
            opts.threshold_db
        )));
    }
    hits.sort_by(|a, b| b.2.total_cmp(&a.2));
    struct Cluster {
        sum_r: f64,
        sum_a: f64,
        beams: Vec<usize>,
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    for (l, p, _) in hits {
        let near = clusters.iter_mut().find(|c| {
            let n = c.beams.len() as f64;
            (c.sum_r / n - p.radius).abs() <= range_gate && (c.sum_a / n - p.angle).abs() <= opts.gate_angle
        });
        match near {
            // One vote per beam and cluster; the strongest came first.
            Some(c) if c.beams.contains(&l) => {}
            Some(c) => {
                c.sum_r += p.radius;
                c.sum_a += p.angle;
                c.beams.push(l);
            }
            None => clusters.push(Cluster {
                sum_r: p.radius,
                sum_a: p.angle,
                beams: vec![l],
            }),
        }
    }
    let most = clusters.iter().map(|c| c.beams.len()).max().unwrap_or(0);
    // Isolated single-beam hits are noise peaks, not targets.
    let min_votes = 3.max(most / 10);
    clusters.retain(|c| c.beams.len() >= min_votes.min(most));
    clusters.sort_by(|a, b| b.beams.len().cmp(&a.beams.len()));
    let positions: Vec<PolarPoint> = clusters
        .iter()
        .map(|c| {
            let n = c.beams.len() as f64;
            PolarPoint::new(c.sum_r / n, c.sum_a / n)
        })
        .collect();
    Ok(clusters
        .into_iter()
        .enumerate()
        .map(|(i, mut c)| {
            c.beams.sort_unstable();
            let p = positions[i];
            let overlapping = positions.iter().enumerate().any(|(j, q)| {
                j != i && (p.radius - q.radius).abs() <= 2.0 * range_gate && (p.angle - q.angle).abs() <= 2.0 * opts.gate_angle
            });
            CoarseTarget {
                position: p,
                beams: c.beams,
                overlapping,
            }
        })
        .collect())
}

/// Position of the target seen by the most beams.
pub fn coarse_position(images: &SingleBeamImages) -> Result<PolarPoint> {
    Ok(coarse_positions(images, &DetectionOptions::default())?[0].position)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrack {
    /// ℓ of each retained sample.
    pub beam_indices: Vec<f64>,
    pub unwrapped_phase: Vec<f64>,
    /// Phase variance 1/(2·SNR_ℓ) of each sample.
    pub weights: Vec<f64>,
    /// Over all beams of the sweep.
    pub effective_mask: Vec<bool>,
}

impl PhaseTrack {
    pub fn len(&self) -> usize {
        self.beam_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beam_indices.is_empty()
    }

    /// The `n` samples nearest the middle of the track.
    pub fn central(&self, n: usize) -> PhaseTrack {
        let n = n.min(self.len());
        let start = (self.len() - n) / 2;
        let keep = start..start + n;
        let mut mask = vec![false; self.effective_mask.len()];
        let masked: Vec<usize> = (0..mask.len()).filter(|i| self.effective_mask[*i]).collect();
        for i in keep.clone() {
            mask[masked[i]] = true;
        }
        PhaseTrack {
            beam_indices: self.beam_indices[keep.clone()].to_vec(),
            unwrapped_phase: self.unwrapped_phase[keep.clone()].to_vec(),
            weights: self.weights[keep].to_vec(),
            effective_mask: mask,
        }
    }
}

/// Beams below this per-beam SNR (linear) are left out of the track.
pub const MIN_TRACK_SNR: f64 = 1.0;

/// Per-beam SNR (linear, 10 dB) above which slope jumps are treated as
/// unwrap failures rather than noise.
pub const CLEAN_TRACK_SNR: f64 = 10.0;

/// Sequential ±2π correction of adjacent differences.
pub fn unwrap(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let mut offset = 0.0;
    for (i, p) in phase.iter().enumerate() {
        if i > 0 {
            let d = p - phase[i - 1];
            offset -= (2.0 * PI) * (d / (2.0 * PI)).round();
        }
        out.push(p + offset);
    }
    out
}

fn wrap_pi(x: f64) -> f64 {
    x - 2.0 * PI * (x / (2.0 * PI)).round()
}

/// Quality-guided unwrap: starts at the best sample and moves outward,
/// predicting each sample from a quality-weighted line through the last few
/// unwrapped ones. A run of noisy samples then cannot carry a 2π slip into
/// the clean samples beyond it, as sequential unwrapping does.
pub fn unwrap_weighted(phase: &[f64], quality: &[f64]) -> Vec<f64> {
    const HISTORY: usize = 6;
    let n = phase.len();
    let mut out = phase.to_vec();
    if n < 2 {
        return out;
    }
    let start = (0..n).fold(0, |b, i| if quality[i] > quality[b] { i } else { b });
    let predict = |hist: &[(f64, f64, f64)], at: f64| -> f64 {
        if hist.len() == 1 {
            return hist[0].1;
        }
        let sw: f64 = hist.iter().map(|h| h.2).sum();
        let mx = hist.iter().map(|h| h.2 * h.0).sum::<f64>() / sw;
        let my = hist.iter().map(|h| h.2 * h.1).sum::<f64>() / sw;
        let sxx: f64 = hist.iter().map(|h| h.2 * (h.0 - mx).powi(2)).sum();
        let sxy: f64 = hist.iter().map(|h| h.2 * (h.0 - mx) * (h.1 - my)).sum();
        if sxx > 0.0 {
            my + sxy / sxx * (at - mx)
        } else {
            my
        }
    };
    for dir in [1isize, -1] {
        let mut hist = vec![(start as f64, out[start], quality[start].max(1e-12))];
        let mut i = start as isize + dir;
        while i >= 0 && (i as usize) < n {
            let k = i as usize;
            let pred = predict(&hist, k as f64);
            out[k] = pred + wrap_pi(phase[k] - pred);
            hist.push((k as f64, out[k], quality[k].max(1e-12)));
            if hist.len() > HISTORY {
                hist.remove(0);
            }
            i += dir;
        }
    }
    out
}

/// Effective beams for `anchor`: incidence point inside the effective
/// aperture, longest contiguous run.
pub fn effective_mask(setup: &Setup, anchor: PolarPoint, usable: &[bool]) -> Vec<bool> {
    let ea = effective_aperture_discrete(&setup.design, anchor);
    let beams = setup.beams();
    let raw: Vec<bool> = beams
        .iter()
        .zip(usable)
        .map(|(b, u)| *u && !b.misses_reflector && ea.contains(b.incidence_x))
        .collect();
    let (mut best, mut cur) = ((0, 0), (0, 0));
    for (i, m) in raw.iter().enumerate() {
        if *m {
            if cur.1 == 0 {
                cur.0 = i;
            }
            cur.1 += 1;
            if cur.1 > best.1 {
                best = cur;
            }
        } else {
            cur.1 = 0;
        }
    }
    (0..raw.len()).map(|i| i >= best.0 && i < best.0 + best.1).collect()
}

/// Samples the single-beam phases at `anchor` and unwraps them over the
/// effective beams. φ̂_ℓ = -∠I_ℓ so that a receding target gives a rising
/// track.
pub fn extract_phase_track(images: &SingleBeamImages, anchor: PolarPoint, snr_per_beam: &[f64]) -> Result<PhaseTrack> {
    let r = images.at(anchor);
    phase_track_from_samples(images.setup, anchor, &r.per_beam, snr_per_beam)
}

/// As [`extract_phase_track`] from I_ℓ(anchor) already at hand.
pub fn phase_track_from_samples(setup: &Setup, anchor: PolarPoint, samples: &[Complex64], snr_per_beam: &[f64]) -> Result<PhaseTrack> {
    if samples.len() != snr_per_beam.len() {
        return Err(invalid("snr_per_beam", "one value per beam"));
    }
    // Below 0 dB the phase is close to uniform and only breaks the unwrap.
    let usable: Vec<bool> = samples
        .iter()
        .zip(snr_per_beam)
        .map(|(s, q)| s.norm() > 0.0 && *q >= MIN_TRACK_SNR)
        .collect();
    let mask = effective_mask(setup, anchor, &usable);
    let beams = setup.beams();
    let idx: Vec<usize> = (0..mask.len()).filter(|i| mask[*i]).collect();
    if idx.is_empty() {
        return Err(Error::NotDetectable("anchor lies in no effective beam".into()));
    }
    let wrapped: Vec<f64> = idx.iter().map(|i| -samples[*i].arg()).collect();
    let quality: Vec<f64> = idx.iter().map(|i| snr_per_beam[*i]).collect();
    let phase = unwrap_weighted(&wrapped, &quality);
    // A constant slope above π per beam aliases silently; a jump in the slope
    // between clean samples is what can be seen.
    for (w, q) in phase.windows(3).zip(quality.windows(3)) {
        let dd = w[2] - 2.0 * w[1] + w[0];
        if q.iter().all(|q| *q >= CLEAN_TRACK_SNR) && dd.abs() > PI {
            return Err(Error::Unwrap(format!("second difference {dd:.2} rad exceeds pi")));
        }
    }
    Ok(PhaseTrack {
        beam_indices: idx.iter().map(|i| beams[*i].time_index).collect(),
        unwrapped_phase: phase,
        weights: idx.iter().map(|i| 0.5 / snr_per_beam[*i]).collect(),
        effective_mask: mask,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityEstimate {
    pub v_r: f64,
    pub v_t: f64,
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    /// Velocity covariance: the weighted least-squares covariance scaled by
    /// the reduced chi-square of the fit.
    pub covariance: Matrix2<f64>,
    /// Velocity CRB from the sample variances alone, intercept marginalized.
    pub crb: Matrix2<f64>,
    /// Covariance of (a1, a2) from the sample variances.
    pub crb_a: Matrix2<f64>,
    pub anchor_position: PolarPoint,
    pub reduced_chi2: f64,
    pub samples: usize,
}

impl VelocityEstimate {
    pub fn std_vr(&self) -> f64 {
        self.covariance[(0, 0)].sqrt()
    }

    pub fn std_vt(&self) -> f64 {
        self.covariance[(1, 1)].sqrt()
    }

    pub fn crb_vr(&self) -> f64 {
        self.crb[(0, 0)].sqrt()
    }

    pub fn crb_vt(&self) -> f64 {
        self.crb[(1, 1)].sqrt()
    }
}

/// d(v_R, v_T)/d(a1, a2) at the anchor.
fn jacobian(anchor: PolarPoint, v_sweep: f64, cfg: &OfdmConfig) -> Result<Matrix2<f64>> {
    let lambda = cfg.wavelength();
    let t = cfg.slot_duration;
    let c = anchor.angle.cos();
    if !(v_sweep.abs() > 0.0) || !(c > 0.0) {
        return Err(invalid("v_sweep", "needs a moving sweep and |psi| < pi/2"));
    }
    Ok(Matrix2::new(
        lambda / (4.0 * PI * t),
        0.0,
        0.0,
        lambda * anchor.radius / (4.0 * PI * t * (v_sweep * t) * c),
    ))
}

/// Weighted least squares on [1, ℓ, ℓ²], then the linear map to (v_R, v_T).
pub fn fit_velocity(track: &PhaseTrack, anchor: PolarPoint, v_sweep: f64, cfg: &OfdmConfig) -> Result<VelocityEstimate> {
    let n = track.len();
    if n < 3 {
        return Err(Error::Singular(format!("{n} effective samples, need 3")));
    }
    if track.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(invalid("track.weights", "variances must be positive and finite"));
    }
    let j = jacobian(anchor, v_sweep, cfg)?;
    // Regressors in ℓ/s keep the columns of comparable size.
    let s = track.beam_indices.iter().fold(1.0f64, |m, l| m.max(l.abs()));
    let x = DMatrix::from_fn(n, 3, |i, k| {
        let l = track.beam_indices[i] / s;
        l.powi(k as i32) / track.weights[i].sqrt()
    });
    let y = DVector::from_fn(n, |i, _| track.unwrapped_phase[i] / track.weights[i].sqrt());
    let svd = x.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-12 * smax) {
        return Err(Error::Singular("regressors [1, l, l^2] are collinear".into()));
    }
    let b = svd.solve(&y, 0.0).map_err(|e| Error::Singular(e.to_string()))?;
    // (XᵀX)⁻¹ = V Σ⁻² Vᵀ
    let v = svd.v_t.as_ref().expect("requested").transpose();
    let inv = &v * DMatrix::from_diagonal(&sv.map(|x| 1.0 / (x * x))) * v.transpose();
    let scale = [1.0, 1.0 / s, 1.0 / (s * s)];
    let a: Vec<f64> = (0..3).map(|k| b[k] * scale[k]).collect();
    let ca = Matrix2::new(
        inv[(1, 1)] * scale[1] * scale[1],
        inv[(1, 2)] * scale[1] * scale[2],
        inv[(2, 1)] * scale[2] * scale[1],
        inv[(2, 2)] * scale[2] * scale[2],
    );
    let resid = &y - &x * &b;
    let reduced_chi2 = if n > 3 { resid.norm_squared() / (n - 3) as f64 } else { 0.0 };
    let crb = j * ca * j.transpose();
    let vel = j * nalgebra::Vector2::new(a[1], a[2]);
    Ok(VelocityEstimate {
        v_r: vel[0],
        v_t: vel[1],
        a0: a[0],
        a1: a[1],
        a2: a[2],
        covariance: crb * reduced_chi2,
        crb,
        crb_a: ca,
        anchor_position: anchor,
        reduced_chi2,
        samples: n,
    })
}

/// Track predicted by the phase model for given velocities, on the ℓ of an
/// existing track.
pub fn forward_track(template: &PhaseTrack, anchor: PolarPoint, v_sweep: f64, cfg: &OfdmConfig, phi0: f64, v_r: f64, v_t: f64) -> Result<PhaseTrack> {
    let j = jacobian(anchor, v_sweep, cfg)?;
    let a1 = v_r / j[(0, 0)];
    let a2 = v_t / j[(1, 1)];
    let mut out = template.clone();
    out.unwrapped_phase = template.beam_indices.iter().map(|l| phi0 + a1 * l + a2 * l * l).collect();
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Refinement {
    pub estimate: VelocityEstimate,
    pub history: Vec<VelocityEstimate>,
    /// Residual kept growing, so the best earlier round was returned.
    pub diverged: bool,
}

/// Re-anchors on the Doppler-corrected coherent image around the current
/// anchor and refits. Round 1 is `initial` itself.
pub fn iterate_refine(setup: &Setup, echoes: &EchoTensor, initial: &VelocityEstimate, rounds: usize) -> Result<Refinement> {
    if rounds == 0 {
        return Err(invalid("rounds", "must be >= 1"));
    }
    let vs = sweep_velocity(setup)?;
    let focuser = Focuser::new(setup, echoes, ImagingOptions::whitened())?;
    let mut history = vec![initial.clone()];
    let mut growing = 0;
    let mut diverged = false;
    for _ in 1..rounds {
        let cur = history.last().expect("non-empty");
        let xi = [cur.v_r, cur.v_t];
        let anchor = cur.anchor_position;
        let a_eff = effective_aperture_discrete(&setup.design, anchor).length.max(setup.design.module_length);
        let rep = nf_resolution(anchor, a_eff, &setup.cfg)?;
        let local = GridSpec::around(anchor, rep.rho_r_nf, rep.rho_psi_nf, 1.0, 4.0);
        let values: Vec<Complex64> = local.points().par_iter().map(|p| focuser.coherent(*p, xi).0).collect();
        let img = ImageGrid {
            spec: local,
            noise_power: vec![1.0; values.len()],
            flagged: vec![false; values.len()],
            values,
            hypothesis_velocity: xi,
        };
        let new_anchor = img.peak().polar();
        let r = focuser.respond(new_anchor.to_xy());
        let snr: Vec<f64> = r
            .per_beam
            .iter()
            .zip(&r.noise_power)
            .map(|(v, n)| if *n > 0.0 { (v.norm_sqr() / n - 1.0).max(0.1) } else { 0.0 })
            .collect();
        let track = phase_track_from_samples(setup, new_anchor, &r.per_beam, &snr)?;
        let next = fit_velocity(&track, new_anchor, vs, &setup.cfg)?;
        growing = if next.reduced_chi2 > cur.reduced_chi2 { growing + 1 } else { 0 };
        history.push(next);
        if growing >= 2 {
            diverged = true;
            break;
        }
    }
    let estimate = if diverged {
        history
            .iter()
            .min_by(|a, b| a.reduced_chi2.total_cmp(&b.reduced_chi2))
            .expect("non-empty")
            .clone()
    } else {
        history.last().expect("non-empty").clone()
    };
    Ok(Refinement {
        estimate,
        history,
        diverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityOptions {
    pub detection: DetectionOptions,
    pub grid_oversample: f64,
    pub rounds: usize,
}

impl Default for VelocityOptions {
    fn default() -> Self {
        Self {
            detection: DetectionOptions::default(),
            grid_oversample: 1.0,
            rounds: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetVelocity {
    pub id: usize,
    pub coarse: CoarseTarget,
    pub result: std::result::Result<Refinement, String>,
}

/// Full pipeline: pre-stack images over the ROI, coarse detections, then one
/// track and fit per detection.
pub fn estimate_velocities(setup: &Setup, echoes: &EchoTensor, opts: &VelocityOptions) -> Result<Vec<TargetVelocity>> {
    let spec = GridSpec::roi_default(setup, opts.grid_oversample)?;
    let images = SingleBeamImages::form(setup, echoes, &spec, [0.0, 0.0])?;
    let vs = sweep_velocity(setup)?;
    let coarse = coarse_positions(&images, &opts.detection)?;
    Ok(coarse
        .into_iter()
        .enumerate()
        .map(|(id, c)| {
            let pos = c.position;
            let run = || -> Result<Refinement> {
                let snr = images.estimated_snr(pos);
                let track = extract_phase_track(&images, pos, &snr)?;
                let first = fit_velocity(&track, pos, vs, &setup.cfg)?;
                iterate_refine(setup, echoes, &first, opts.rounds)
            };
            TargetVelocity {
                id,
                coarse: c,
                result: run().map_err(|e| e.to_string()),
            }
        })
        .collect())
}

/// target id, v_R, v_T, std_vR, crb_vR, std_vT, crb_vT; NaN rows for
/// failed targets.
pub fn estimates_csv(rows: &[TargetVelocity]) -> String {
    let mut s = String::from("target_id,v_r,v_t,std_vr,crb_vr,std_vt,crb_vt,anchor_r,anchor_psi,note\n");
    for r in rows {
        match &r.result {
            Ok(f) => {
                let e = &f.estimate;
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.id,
                    e.v_r,
                    e.v_t,
                    e.std_vr(),
                    e.crb_vr(),
                    e.std_vt(),
                    e.crb_vt(),
                    e.anchor_position.radius,
                    e.anchor_position.angle,
                    if f.diverged { "diverged" } else { "" }
                ));
            }
            Err(msg) => s.push_str(&format!(
                "{},NaN,NaN,NaN,NaN,NaN,NaN,{},{},\"{}\"\n",
                r.id,
                r.coarse.position.radius,
                r.coarse.position.angle,
                msg.replace('"', "'")
            )),
        }
    }
    s
}

/// Monte-Carlo of the track fit at the true anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub trials: usize,
    /// Central window lengths that were fitted.
    pub windows: Vec<usize>,
    /// Per window: sample variances of â1, â2 and their CRB.
    pub var_a1: Vec<f64>,
    pub var_a2: Vec<f64>,
    pub crb_a1: Vec<f64>,
    pub crb_a2: Vec<f64>,
    /// Full effective track.
    pub rmse_vr: f64,
    pub rmse_vt: f64,
    pub crb_vr: f64,
    pub crb_vt: f64,
    pub mean_snr_db: f64,
    pub failures: usize,
}

/// Trials are keyed by (seed, trial), so the report does not depend on the
/// thread count. SNR weights come from the link budget. `windows` are
/// central sub-tracks; an empty list fits only the full track.
pub fn monte_carlo(setup: &Setup, target: &TargetState, trials: usize, seed: u64, windows: &[usize]) -> Result<MonteCarloReport> {
    let vs = sweep_velocity(setup)?;
    let anchor = target.position;
    let beams = setup.beams();
    let snr: Vec<f64> = beams.iter().map(|b| snr_per_beam_linear(b, target, setup)).collect();
    let mut trial_seeds = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..trials).map(|_| trial_seeds.random()).collect();
    type Trial = (VelocityEstimate, Vec<(f64, f64)>, Vec<(f64, f64)>);
    let per_trial: Vec<Option<Trial>> = seeds
        .par_iter()
        .map(|s| {
            let run = || -> Result<_> {
                let y = synthesize(std::slice::from_ref(target), setup, *s, &SynthesisOptions::default())?;
                let f = Focuser::new(setup, &y, ImagingOptions::whitened())?;
                let r = f.respond(anchor.to_xy());
                let track = phase_track_from_samples(setup, anchor, &r.per_beam, &snr)?;
                let full = fit_velocity(&track, anchor, vs, &setup.cfg)?;
                let mut est = Vec::new();
                let mut crb = Vec::new();
                for w in windows {
                    let e = fit_velocity(&track.central(*w), anchor, vs, &setup.cfg)?;
                    est.push((e.a1, e.a2));
                    crb.push((e.crb_a[(0, 0)], e.crb_a[(1, 1)]));
                }
                Ok((full, est, crb))
            };
            run().ok()
        })
        .collect();
    let ok: Vec<_> = per_trial.iter().flatten().collect();
    if ok.len() < 2 {
        return Err(Error::NotDetectable("Monte-Carlo trials failed".into()));
    }
    let n = ok.len() as f64;
    let variance = |xs: Vec<f64>| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let mut var_a1 = Vec::new();
    let mut var_a2 = Vec::new();
    let mut crb_a1 = Vec::new();
    let mut crb_a2 = Vec::new();
    for (k, _) in windows.iter().enumerate() {
        var_a1.push(variance(ok.iter().map(|t| t.1[k].0).collect()));
        var_a2.push(variance(ok.iter().map(|t| t.1[k].1).collect()));
        crb_a1.push(ok[0].2[k].0);
        crb_a2.push(ok[0].2[k].1);
    }
    let rmse = |f: &dyn Fn(&VelocityEstimate) -> f64, truth: f64| {
        (ok.iter().map(|t| (f(&t.0) - truth).powi(2)).sum::<f64>() / n).sqrt()
    };
    let mask = effective_mask(setup, anchor, &snr.iter().map(|s| *s > 0.0).collect::<Vec<_>>());
    let in_mask: Vec<f64> = snr.iter().zip(&mask).filter(|(_, m)| **m).map(|(s, _)| *s).collect();
    let mean_snr = in_mask.iter().sum::<f64>() / in_mask.len().max(1) as f64;
    Ok(MonteCarloReport {
        trials: ok.len(),
        windows: windows.to_vec(),
        var_a1,
        var_a2,
        crb_a1,
        crb_a2,
        rmse_vr: rmse(&|e| e.v_r, target.velocity_radial),
        rmse_vt: rmse(&|e| e.v_t, target.velocity_transverse),
        crb_vr: ok[0].0.crb_vr(),
        crb_vt: ok[0].0.crb_vt(),
        mean_snr_db: 10.0 * mean_snr.log10(),
        failures: trials - ok.len(),
    })
}

/// Least-squares slope of log(y) against log(x).
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::tests::small_setup;
    use crate::imaging::backproject;
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform_track(n: usize, var: f64) -> PhaseTrack {
        let start = -((n as f64 - 1.0) / 2.0).floor();
        PhaseTrack {
            beam_indices: (0..n).map(|i| start + i as f64).collect(),
            unwrapped_phase: vec![0.0; n],
            weights: vec![var; n],
            effective_mask: vec![true; n],
        }
    }

    fn snr_of(setup: &Setup, t: &TargetState) -> Vec<f64> {
        setup.beams().iter().map(|b| snr_per_beam_linear(b, t, setup)).collect()
    }

    fn noiseless_track(setup: &Setup, t: &TargetState) -> PhaseTrack {
        let y = synthesize(std::slice::from_ref(t), setup, 4, &SynthesisOptions::noiseless()).unwrap();
        let f = Focuser::new(setup, &y, ImagingOptions::whitened()).unwrap();
        let r = f.respond(t.position.to_xy());
        phase_track_from_samples(setup, t.position, &r.per_beam, &snr_of(setup, t)).unwrap()
    }

    #[test]
    fn planted_coefficients_recovered() {
        let cfg = small_setup(20e6).cfg;
        let anchor = PolarPoint::new(15.0, 0.1);
        let mut tr = uniform_track(41, 0.01);
        let (a0, a1, a2) = (0.7, -0.31, 2.5e-3);
        tr.unwrapped_phase = tr.beam_indices.iter().map(|l| a0 + a1 * l + a2 * l * l).collect();
        let e = fit_velocity(&tr, anchor, 20.0, &cfg).unwrap();
        assert!((e.a0 - a0).abs() < 1e-10 * a0);
        assert!((e.a1 - a1).abs() < 1e-10 * a1.abs());
        assert!((e.a2 - a2).abs() < 1e-10 * a2);
        assert!(e.reduced_chi2 < 1e-20);
        assert!(fit_velocity(&uniform_track(2, 0.01), anchor, 20.0, &cfg).is_err());
        let mut dup = uniform_track(5, 0.01);
        dup.beam_indices = vec![1.0; 5];
        assert!(matches!(fit_velocity(&dup, anchor, 20.0, &cfg), Err(Error::Singular(_))));
    }

    #[test]
    fn crb_scaling_in_window_length() {
        let cfg = small_setup(20e6).cfg;
        let anchor = PolarPoint::new(15.0, 0.0);
        let ns = [41.0, 81.0, 161.0, 321.0];
        let fits: Vec<VelocityEstimate> = ns
            .iter()
            .map(|n| fit_velocity(&uniform_track(*n as usize, 0.01), anchor, 20.0, &cfg).unwrap())
            .collect();
        let c1: Vec<f64> = fits.iter().map(|e| e.crb_a[(0, 0)]).collect();
        let c2: Vec<f64> = fits.iter().map(|e| e.crb_a[(1, 1)]).collect();
        assert!((log_log_slope(&ns, &c1) + 3.0).abs() < 0.05);
        assert!((log_log_slope(&ns, &c2) + 5.0).abs() < 0.05);
        // Closed forms for a centered uniform window: 12σ²/N³ and 180σ²/N⁵.
        let n = 321.0f64;
        assert!((c1[3] / (12.0 * 0.01 / n.powi(3)) - 1.0).abs() < 0.01);
        assert!((c2[3] / (180.0 * 0.01 / n.powi(5)) - 1.0).abs() < 0.01);
    }

    #[test]
    fn transverse_crb_grows_with_range_squared() {
        let cfg = small_setup(20e6).cfg;
        let tr = uniform_track(31, 0.01);
        let near = fit_velocity(&tr, PolarPoint::new(5.0, 0.1), 20.0, &cfg).unwrap();
        let far = fit_velocity(&tr, PolarPoint::new(10.0, 0.1), 20.0, &cfg).unwrap();
        assert!((far.crb[(1, 1)] / near.crb[(1, 1)] - 4.0).abs() < 1e-9);
        assert!((far.crb[(0, 0)] / near.crb[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_dip_does_not_slip_the_track() {
        let truth: Vec<f64> = (0..40).map(|i| 0.2 * i as f64).collect();
        let mut obs = truth.clone();
        let mut q = vec![100.0; 40];
        for (k, e) in [(15, 1.9), (16, 3.6), (17, 5.4)] {
            obs[k] += e;
            q[k] = 1.0;
        }
        let wrapped: Vec<f64> = obs.iter().map(|p| (p + PI).rem_euclid(2.0 * PI) - PI).collect();
        let seq = unwrap(&wrapped);
        assert!((seq[39] - truth[39]).abs() > 6.0);
        let w = unwrap_weighted(&wrapped, &q);
        let k = ((truth[0] - w[0]) / (2.0 * PI)).round();
        for i in (0..40).filter(|i| q[*i] > 1.0) {
            assert!((w[i] + 2.0 * PI * k - truth[i]).abs() < 1e-9, "{i}");
        }
    }

    #[test]
    fn static_and_moving_tracks() {
        let s = small_setup(20e6);
        let vs = sweep_velocity(&s).unwrap();
        let t0 = TargetState::stationary(PolarPoint::new(15.0, 0.0), 0.01).with_phase(0.4);
        let tr = noiseless_track(&s, &t0);
        assert!(tr.len() >= 10);
        let e = fit_velocity(&tr, t0.position, vs, &s.cfg).unwrap();
        assert!(e.a1.abs() < 1e-6 && e.a2.abs() < 1e-8, "{} {}", e.a1, e.a2);
        let k2t = 4.0 * PI / s.cfg.wavelength() * s.cfg.slot_duration;
        let t1 = t0.clone().with_velocity(0.8, 0.0);
        let e = fit_velocity(&noiseless_track(&s, &t1), t1.position, vs, &s.cfg).unwrap();
        assert!((e.a1 / (k2t * 0.8) - 1.0).abs() < 0.01, "{}", e.a1 / (k2t * 0.8));
        assert!((e.v_r - 0.8).abs() < 0.01);
        let t2 = t0.clone().with_velocity(0.0, 3.0);
        let e = fit_velocity(&noiseless_track(&s, &t2), t2.position, vs, &s.cfg).unwrap();
        let expect = k2t * 3.0 / 15.0 * vs * s.cfg.slot_duration;
        assert!((e.a2 / expect - 1.0).abs() < 0.05, "{}", e.a2 / expect);
        assert!(e.v_r.abs() < 0.05 * 3.0, "{}", e.v_r);
    }

    #[test]
    fn coarse_position_and_two_targets() {
        let s = small_setup(100e6);
        let spec = GridSpec::roi_default(&s, 1.0).unwrap();
        let t = TargetState::stationary(PolarPoint::new(14.0, 0.02), 0.01);
        let y = synthesize(&[t.clone()], &s, 7, &SynthesisOptions::noiseless()).unwrap();
        let img = SingleBeamImages::form(&s, &y, &spec, [0.0, 0.0]).unwrap();
        let p = coarse_position(&img).unwrap();
        // Pre-stack cells: c/2B in range, one module lobe in angle.
        let cell_psi = s.design.module_rho(7);
        assert!((p.radius - 14.0).abs() < spec.axis1.step, "{p:?}");
        assert!((p.angle - 0.02).abs() < cell_psi, "{p:?} {cell_psi}");
        // Pre-stack detection needs per-beam SNR well above the 8 dB
        // threshold; this setup only reaches ~10 dB at 0.01 m².
        let t = TargetState::stationary(PolarPoint::new(14.0, 0.02), 1.0);
        let u = TargetState::stationary(PolarPoint::new(16.5, -0.12), 1.0);
        let y = synthesize(&[t.clone(), u.clone()], &s, 7, &SynthesisOptions::default()).unwrap();
        let img = SingleBeamImages::form(&s, &y, &spec, [0.0, 0.0]).unwrap();
        let found = coarse_positions(&img, &DetectionOptions::default()).unwrap();
        assert!(found.len() >= 2, "{found:?}");
        for truth in [&t, &u] {
            assert!(found[..2].iter().any(|c| (c.position.radius - truth.position.radius).abs() < spec.axis1.step
                && (c.position.angle - truth.position.angle).abs() < cell_psi), "{found:?}");
        }
        let empty = synthesize(&[], &s, 7, &SynthesisOptions::default()).unwrap();
        let img = SingleBeamImages::form(&s, &empty, &spec, [0.0, 0.0]).unwrap();
        let strict = DetectionOptions { threshold_db: 30.0, ..Default::default() };
        assert!(matches!(coarse_positions(&img, &strict), Err(Error::NotDetectable(_))));
    }

    #[test]
    fn refinement_rounds() {
        let s = small_setup(100e6);
        let vs = sweep_velocity(&s).unwrap();
        let t = TargetState::stationary(PolarPoint::new(15.0, 0.0), 0.01).with_velocity(0.5, 1.0);
        let y = synthesize(&[t.clone()], &s, 9, &SynthesisOptions::noiseless()).unwrap();
        let f = Focuser::new(&s, &y, ImagingOptions::whitened()).unwrap();
        let r = f.respond(t.position.to_xy());
        let tr = phase_track_from_samples(&s, t.position, &r.per_beam, &snr_of(&s, &t)).unwrap();
        let first = fit_velocity(&tr, t.position, vs, &s.cfg).unwrap();
        let one = iterate_refine(&s, &y, &first, 1).unwrap();
        assert_eq!(one.estimate, first);
        assert_eq!(one.history.len(), 1);
        let three = iterate_refine(&s, &y, &first, 3).unwrap();
        assert!((three.estimate.v_r - first.v_r).abs() < 0.02, "{:?}", three.estimate);
        assert!((three.estimate.anchor_position.radius - 15.0).abs() < 0.02);
        assert!(iterate_refine(&s, &y, &first, 0).is_err());
    }

    #[test]
    fn compensation_with_fitted_velocity_refocuses() {
        // The plane-wave gain ignores the incoming curvature the lens
        // corrects for, which scatters the pre-stack peaks; the spherical
        // model keeps them on the focus.
        let mut s = small_setup(100e6);
        s.gain_model = crate::reflector::GainModel::Spherical;
        let p = PolarPoint::new(15.0, 0.03);
        s.design = crate::reflector::design_lens(&s.geom, p.to_xy(), 15, &s.cfg).unwrap();
        let vs = sweep_velocity(&s).unwrap();
        let t = TargetState::stationary(p, 1.0).with_velocity(0.4, 0.5);
        let y = synthesize(&[t.clone()], &s, 3, &SynthesisOptions::default()).unwrap();
        let spec = GridSpec::roi_default(&s, 1.0).unwrap();
        let img = SingleBeamImages::form(&s, &y, &spec, [0.0, 0.0]).unwrap();
        let anchor = coarse_position(&img).unwrap();
        let tr = extract_phase_track(&img, anchor, &img.estimated_snr(anchor)).unwrap();
        let e = fit_velocity(&tr, anchor, vs, &s.cfg).unwrap();
        let grid = GridSpec::around(p, 0.75, 0.01, 3.0, 2.0);
        let fixed = backproject(&y, &grid, [e.v_r, e.v_t], &s, ImagingOptions::whitened()).unwrap();
        let pk = fixed.peak();
        assert!((pk.position.0 - p.radius).abs() <= grid.axis1.step, "{pk:?} {e:?}");
        assert!((pk.position.1 - p.angle).abs() <= grid.axis2.step, "{pk:?} {e:?}");
    }

    #[test]
    fn csv_rows() {
        let tv = TargetVelocity {
            id: 3,
            coarse: CoarseTarget { position: PolarPoint::new(10.0, 0.1), beams: vec![1], overlapping: false },
            result: Err("unwrap failure".into()),
        };
        let csv = estimates_csv(&[tv]);
        assert!(csv.starts_with("target_id,v_r,v_t,std_vr,crb_vr,std_vt,crb_vt"));
        assert!(csv.lines().nth(1).unwrap().starts_with("3,NaN"));
    }

    proptest! {
        #[test]
        fn unwrap_recovers_slow_ramps(a in -3.0f64..3.0, b in -1.0f64..1.0, c in -0.01f64..0.01, n in 3usize..60) {
            let truth: Vec<f64> = (0..n).map(|i| { let l = i as f64 - n as f64 / 2.0; a + b * l + c * l * l }).collect();
            // Only meaningful while adjacent steps stay below π.
            prop_assume!(truth.windows(2).all(|w| (w[1] - w[0]).abs() < 3.0));
            let wrapped: Vec<f64> = truth.iter().map(|p| (p + PI).rem_euclid(2.0 * PI) - PI).collect();
            let u = unwrap(&wrapped);
            let k = ((truth[0] - u[0]) / (2.0 * PI)).round();
            for (x, y) in u.iter().zip(&truth) {
                prop_assert!((x + 2.0 * PI * k - y).abs() < 1e-9);
            }
            prop_assert!(u.windows(2).all(|w| (w[1] - w[0]).abs() <= PI + 1e-12));
        }

        #[test]
        fn weighted_unwrap_recovers_slow_ramps(a in -3.0f64..3.0, b in -1.0f64..1.0, c in -0.01f64..0.01, n in 3usize..60, seed in 0u64..100) {
            let truth: Vec<f64> = (0..n).map(|i| { let l = i as f64 - n as f64 / 2.0; a + b * l + c * l * l }).collect();
            prop_assume!(truth.windows(2).all(|w| (w[1] - w[0]).abs() < 3.0));
            let wrapped: Vec<f64> = truth.iter().map(|p| (p + PI).rem_euclid(2.0 * PI) - PI).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..100.0)).collect();
            let u = unwrap_weighted(&wrapped, &q);
            let k = ((truth[0] - u[0]) / (2.0 * PI)).round();
            for (x, y) in u.iter().zip(&truth) {
                prop_assert!((x + 2.0 * PI * k - y).abs() < 1e-9);
            }
        }

        #[test]
        fn forward_model_inverts(v_r in -5.0f64..5.0, v_t in -5.0f64..5.0, r in 3.0f64..40.0, psi in -0.5f64..0.5, n in 5usize..80) {
            let cfg = small_setup(20e6).cfg;
            let anchor = PolarPoint::new(r, psi);
            let tr = forward_track(&uniform_track(n, 0.02), anchor, 23.0, &cfg, 0.3, v_r, v_t).unwrap();
            let e = fit_velocity(&tr, anchor, 23.0, &cfg).unwrap();
            prop_assert!((e.v_r - v_r).abs() < 1e-8 * (1.0 + v_r.abs()));
            prop_assert!((e.v_t - v_t).abs() < 1e-6 * (1.0 + v_t.abs()));
        }

        #[test]
        fn crb_never_grows_with_the_mask(n in 5usize..60, extra in 1usize..30, seed in 0u64..1000) {
            let cfg = small_setup(20e6).cfg;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut full = uniform_track(n + extra, 0.01);
            full.weights = (0..n + extra).map(|_| rng.random_range(0.001..0.1)).collect();
            let anchor = PolarPoint::new(12.0, 0.2);
            let big = fit_velocity(&full, anchor, 20.0, &cfg).unwrap();
            let small = fit_velocity(&full.central(n), anchor, 20.0, &cfg).unwrap();
            prop_assert!(big.crb[(0, 0)] <= small.crb[(0, 0)] * (1.0 + 1e-9));
            prop_assert!(big.crb[(1, 1)] <= small.crb[(1, 1)] * (1.0 + 1e-9));
            prop_assert!(big.covariance[(0, 1)] == big.covariance[(1, 0)]);
        }
    }
}
