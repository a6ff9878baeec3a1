//! Scenario files and the runs built on them: the design -> synthesize ->
//! image -> velocity pipeline, parameter sweeps and the oracle suites.
//!
//! Scenarios are TOML with a mandatory `schema_version` and `seed`; unknown
//! keys are rejected. All quantities are SI except fields suffixed `_deg`
//! and `_dbm_hz`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{link_budget, plan_beams, snr_per_beam_linear, synthesize, EchoTensor, Setup, SynthesisOptions};
use crate::codebook::{ia_durations, make_3gpp_codebook, make_imaging_codebook_scaled, BsArray, Codebook, OfdmConfig};
use crate::error::{invalid, Error, Result};
use crate::geometry::{PolarPoint, SceneGeometry, TargetState, Vec2};
use crate::imaging::{backproject, roi_polar_hull, saf, sweep_velocity, Axis, GridSpec, ImageGrid, ImagingOptions, Weighting};
use crate::reflector::{
    design_lens, design_mirror, design_modular, effective_aperture_discrete, reflection_gain, reflection_gain_bruteforce,
    GainModel,
};
use crate::resolution::{nf_resolution, resolution_from_coverage, spectral_coverage, ResolutionReport};
use crate::velocity::{effective_mask, estimate_velocities, estimates_csv, monte_carlo, MonteCarloReport, TargetVelocity, VelocityOptions};

pub const SCHEMA_VERSION: u32 = 1;

/// Whitened image SNR a target peak needs to count as detected.
pub const DETECTION_SNR_DB: f64 = 13.0;

const PHASE_KEY: u64 = 0x7068_6173_6500_0003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub geometry: GeometrySpec,
    pub ofdm: OfdmSpec,
    #[serde(default)]
    pub array: ArraySpec,
    pub reflector: ReflectorSpec,
    #[serde(default)]
    pub codebook: CodebookSpec,
    #[serde(default)]
    pub imaging: ImagingSpec,
    #[serde(default)]
    pub synthesis: SynthesisSpec,
    /// Present means the full run also estimates velocities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<VelocitySpec>,
    #[serde(default)]
    pub targets: Vec<TargetSpec>,
    /// Written into run manifests; ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    /// (x, y) in m; the reflector is the segment |x| ≤ A/2 of y = 0.
    pub bs_position: [f64; 2],
    pub reflector_length: f64,
    pub roi_center: [f64; 2],
    pub roi_size: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfdmSpec {
    pub carrier_frequency: f64,
    pub bandwidth: f64,
    #[serde(default = "default_numerology")]
    pub numerology: u32,
    /// W per antenna.
    #[serde(default = "default_tx_power")]
    pub tx_power: f64,
    #[serde(default = "default_noise_psd")]
    pub noise_psd_dbm_hz: f64,
}

fn default_numerology() -> u32 {
    2
}
fn default_tx_power() -> f64 {
    1.0
}
fn default_noise_psd() -> f64 {
    -173.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    #[serde(default = "default_aperture")]
    pub aperture: f64,
    /// Overrides `aperture` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_count: Option<usize>,
}

fn default_aperture() -> f64 {
    0.4
}

impl Default for ArraySpec {
    fn default() -> Self {
        Self {
            aperture: default_aperture(),
            element_count: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectorKind {
    Modular,
    Lens,
    Mirror,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainModelSpec {
    /// Spherical for lenses, plane wave otherwise.
    #[default]
    Auto,
    PlaneWave,
    Spherical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectorSpec {
    pub kind: ReflectorKind,
    /// Module count N (ignored by the mirror).
    #[serde(default = "default_modules")]
    pub modules: usize,
    /// Lens focus (x, y); defaults to the ROI center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<[f64; 2]>,
    /// Mirror reflection angle; defaults to the ROI center direction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
    #[serde(default)]
    pub gain_model: GainModelSpec,
}

fn default_modules() -> usize {
    15
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodebookKind {
    #[serde(rename = "imaging")]
    Imaging,
    #[serde(rename = "3gpp")]
    ThreeGpp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSpec {
    pub kind: CodebookKind,
    /// Imaging step relative to the anti-aliasing bound.
    #[serde(default = "one")]
    pub step_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for CodebookSpec {
    fn default() -> Self {
        Self {
            kind: CodebookKind::Imaging,
            step_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagingSpec {
    #[serde(default = "default_oversample")]
    pub grid_oversample: f64,
    #[serde(default)]
    pub weighting: Weighting,
    /// Test velocity (ξ_R, ξ_T) in m/s.
    #[serde(default)]
    pub velocity_hypothesis: [f64; 2],
}

fn default_oversample() -> f64 {
    2.0
}

impl Default for ImagingSpec {
    fn default() -> Self {
        Self {
            grid_oversample: default_oversample(),
            weighting: Weighting::Normalized,
            velocity_hypothesis: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSpec {
    #[serde(default = "yes")]
    pub noise: bool,
    #[serde(default)]
    pub range_migration: bool,
    #[serde(default)]
    pub incoherent: bool,
}

fn yes() -> bool {
    true
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            noise: true,
            range_migration: false,
            incoherent: false,
        }
    }
}

impl SynthesisSpec {
    pub fn options(&self) -> SynthesisOptions {
        SynthesisOptions {
            noise: self.noise,
            range_migration: self.range_migration,
            incoherent: self.incoherent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocitySpec {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_threshold")]
    pub threshold_db: f64,
    #[serde(default = "one")]
    pub grid_oversample: f64,
}

fn default_rounds() -> usize {
    2
}
fn default_threshold() -> f64 {
    8.0
}

impl Default for VelocitySpec {
    fn default() -> Self {
        Self {
            rounds: default_rounds(),
            threshold_db: default_threshold(),
            grid_oversample: 1.0,
        }
    }
}

impl VelocitySpec {
    pub fn options(&self) -> VelocityOptions {
        let mut o = VelocityOptions::default();
        o.detection.threshold_db = self.threshold_db;
        o.grid_oversample = self.grid_oversample;
        o.rounds = self.rounds;
        o
    }
}

/// One point target, placed either by `position` (x, y) or by `range` and
/// `angle_deg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
    /// m².
    pub rcs: f64,
    /// Scattering phase in rad; drawn from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<f64>,
    #[serde(default)]
    pub v_radial: f64,
    #[serde(default)]
    pub v_transverse: f64,
}

impl TargetSpec {
    pub fn polar(&self) -> Result<PolarPoint> {
        match (self.position, self.range, self.angle_deg) {
            (Some(p), None, None) => Ok(PolarPoint::from_xy(Vec2::new(p[0], p[1]))),
            (None, Some(r), Some(a)) => Ok(PolarPoint::new(r, a.to_radians())),
            _ => Err(invalid("targets", "give either `position` or both `range` and `angle_deg`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInfo {
    pub tool_version: String,
    pub stage: String,
    pub outputs: Vec<String>,
}

fn check_range(field: &str, v: f64, lo: f64, hi: f64, unit: &str) -> Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(invalid(field, format!("{v} is outside [{lo:e}, {hi:e}] {unit}")))
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Scenario(format!("{}: {e} (not a bundled scenario or readable file)", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Scenario(m) => Error::Scenario(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// A bundled scenario by name, or a file when `name` is a path.
    pub fn open(name: &str) -> Result<Self> {
        match bundled(name) {
            Some(text) => Self::from_toml_str(text),
            None => Self::load(Path::new(name)),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Scenario(e.to_string()))
    }

    /// Schema version and SI sanity bounds; messages name the field.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        let g = &self.geometry;
        for (i, v) in g.bs_position.iter().enumerate() {
            check_range(&format!("geometry.bs_position[{i}]"), *v, -1e4, 1e4, "m")?;
        }
        check_range("geometry.reflector_length", g.reflector_length, 1e-3, 1e3, "m")?;
        for (i, v) in g.roi_center.iter().enumerate() {
            check_range(&format!("geometry.roi_center[{i}]"), *v, -1e4, 1e4, "m")?;
        }
        for (i, v) in g.roi_size.iter().enumerate() {
            check_range(&format!("geometry.roi_size[{i}]"), *v, 1e-3, 1e4, "m")?;
        }
        let o = &self.ofdm;
        check_range("ofdm.carrier_frequency", o.carrier_frequency, 1e8, 1e12, "Hz")?;
        check_range("ofdm.bandwidth", o.bandwidth, 1e5, 1e11, "Hz")?;
        if o.bandwidth >= o.carrier_frequency {
            return Err(invalid("ofdm.bandwidth", "must be below the carrier frequency"));
        }
        if o.numerology > 6 {
            return Err(invalid("ofdm.numerology", "must be in 0..=6"));
        }
        check_range("ofdm.tx_power", o.tx_power, 1e-9, 1e4, "W")?;
        check_range("ofdm.noise_psd_dbm_hz", o.noise_psd_dbm_hz, -230.0, -100.0, "dBm/Hz")?;
        check_range("array.aperture", self.array.aperture, 1e-3, 1e2, "m")?;
        if let Some(k) = self.array.element_count {
            if !(1..=65536).contains(&k) {
                return Err(invalid("array.element_count", "must be in 1..=65536"));
            }
        }
        let r = &self.reflector;
        if !(1..=10_000).contains(&r.modules) {
            return Err(invalid("reflector.modules", "must be in 1..=10000"));
        }
        if let Some(a) = r.angle_deg {
            check_range("reflector.angle_deg", a, -89.0, 89.0, "deg")?;
        }
        if let Some(f) = r.focus {
            check_range("reflector.focus[1]", f[1], 1e-3, 1e4, "m")?;
        }
        check_range("codebook.step_scale", self.codebook.step_scale, 1e-3, 100.0, "")?;
        check_range("imaging.grid_oversample", self.imaging.grid_oversample, 1.0, 64.0, "")?;
        for (i, v) in self.imaging.velocity_hypothesis.iter().enumerate() {
            check_range(&format!("imaging.velocity_hypothesis[{i}]"), *v, -1e3, 1e3, "m/s")?;
        }
        if let Some(v) = &self.velocity {
            if !(1..=20).contains(&v.rounds) {
                return Err(invalid("velocity.rounds", "must be in 1..=20"));
            }
            check_range("velocity.threshold_db", v.threshold_db, 0.0, 60.0, "dB")?;
            check_range("velocity.grid_oversample", v.grid_oversample, 1.0, 16.0, "")?;
        }
        for (i, t) in self.targets.iter().enumerate() {
            let f = |name: &str| format!("targets[{i}].{name}");
            if let Some(p) = t.position {
                check_range(&f("position[0]"), p[0], -1e4, 1e4, "m")?;
                check_range(&f("position[1]"), p[1], 1e-3, 1e4, "m")?;
            }
            if let Some(r) = t.range {
                check_range(&f("range"), r, 1e-3, 1e4, "m")?;
            }
            if let Some(a) = t.angle_deg {
                check_range(&f("angle_deg"), a, -89.0, 89.0, "deg")?;
            }
            t.polar().map_err(|_| invalid(&f("position"), "give either `position` or both `range` and `angle_deg`"))?;
            check_range(&f("rcs"), t.rcs, 0.0, 1e4, "m^2")?;
            if let Some(p) = t.phase {
                check_range(&f("phase"), p, -1e3, 1e3, "rad")?;
            }
            check_range(&f("v_radial"), t.v_radial, -1e3, 1e3, "m/s")?;
            check_range(&f("v_transverse"), t.v_transverse, -1e3, 1e3, "m/s")?;
        }
        Ok(())
    }

    /// Copy with every scattering phase made explicit, as written to the
    /// manifest.
    pub fn resolved(&self) -> Scenario {
        let mut s = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ PHASE_KEY);
        for t in s.targets.iter_mut() {
            let drawn: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            t.phase.get_or_insert(drawn);
        }
        s.manifest = None;
        s
    }

    pub fn geometry(&self) -> Result<SceneGeometry> {
        let g = &self.geometry;
        SceneGeometry::new(
            Vec2::new(g.bs_position[0], g.bs_position[1]),
            g.reflector_length,
            Vec2::new(g.roi_center[0], g.roi_center[1]),
            Vec2::new(g.roi_size[0], g.roi_size[1]),
        )
    }

    pub fn ofdm(&self) -> Result<OfdmConfig> {
        let o = &self.ofdm;
        Ok(OfdmConfig::new(o.carrier_frequency, o.bandwidth, o.numerology, o.tx_power)?.with_noise_psd_dbm_hz(o.noise_psd_dbm_hz))
    }

    pub fn imaging_codebook(&self, geom: &SceneGeometry, cfg: &OfdmConfig) -> Result<Codebook> {
        make_imaging_codebook_scaled(geom, cfg, self.codebook.step_scale)
    }

    pub fn setup(&self) -> Result<Setup> {
        let geom = self.geometry()?;
        let cfg = self.ofdm()?;
        let array = match self.array.element_count {
            Some(k) => BsArray::new(k, cfg.wavelength())?,
            None => BsArray::with_aperture(self.array.aperture, cfg.wavelength())?,
        };
        let imaging = self.imaging_codebook(&geom, &cfg)?;
        let r = &self.reflector;
        let design = match r.kind {
            ReflectorKind::Modular => design_modular(&geom, r.modules, &imaging, &cfg)?,
            ReflectorKind::Lens => {
                let focus = r.focus.map_or(geom.roi_center, |f| Vec2::new(f[0], f[1]));
                design_lens(&geom, focus, r.modules, &cfg)?
            }
            ReflectorKind::Mirror => {
                let angle = match r.angle_deg {
                    Some(a) => a.to_radians(),
                    None => geom.roi_center.x.atan2(geom.roi_center.y),
                };
                design_mirror(&geom, angle, &cfg)?
            }
        };
        let codebook = match self.codebook.kind {
            CodebookKind::Imaging => imaging,
            CodebookKind::ThreeGpp => make_3gpp_codebook(&array),
        };
        let gain_model = match (r.gain_model, r.kind) {
            (GainModelSpec::PlaneWave, _) => GainModel::PlaneWave,
            (GainModelSpec::Spherical, _) | (GainModelSpec::Auto, ReflectorKind::Lens) => GainModel::Spherical,
            (GainModelSpec::Auto, _) => GainModel::PlaneWave,
        };
        Ok(Setup {
            geom,
            cfg,
            array,
            design,
            codebook,
            gain_model,
        })
    }

    /// Targets with phases drawn as in [`Scenario::resolved`].
    pub fn scene(&self) -> Result<Vec<TargetState>> {
        self.resolved()
            .targets
            .iter()
            .map(|t| {
                let s = TargetState::stationary(t.polar()?, t.rcs)
                    .with_velocity(t.v_radial, t.v_transverse)
                    .with_phase(t.phase.unwrap_or(0.0));
                s.validate()?;
                Ok(s)
            })
            .collect()
    }

    pub fn default_output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| {
            let stem = if self.name.is_empty() { "scenario" } else { &self.name };
            PathBuf::from("out").join(stem)
        })
    }
}

pub const BUNDLED: &[(&str, &str)] = &[
    ("fr3_baseline", include_str!("../scenarios/fr3_baseline.toml")),
    ("fr2_baseline", include_str!("../scenarios/fr2_baseline.toml")),
    ("fig5a_mirror_3gpp", include_str!("../scenarios/fig5a_mirror_3gpp.toml")),
    ("fig5b_mirror_imaging", include_str!("../scenarios/fig5b_mirror_imaging.toml")),
    ("fig5c_lens", include_str!("../scenarios/fig5c_lens.toml")),
    ("fig5d_modular", include_str!("../scenarios/fig5d_modular.toml")),
    ("moving_lens", include_str!("../scenarios/moving_lens.toml")),
    ("moving_modular", include_str!("../scenarios/moving_modular.toml")),
    ("empty_scene", include_str!("../scenarios/empty_scene.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Design,
    Simulate,
    Image,
    EstimateVelocity,
    /// Image, plus velocities when the scenario has a `[velocity]` table.
    All,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Design => "design",
            Stage::Simulate => "simulate",
            Stage::Image => "image",
            Stage::EstimateVelocity => "estimate-velocity",
            Stage::All => "all",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Defaults to the scenario's output directory.
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub grid_oversample: Option<f64>,
    /// Image previously saved echoes (directory, stem) instead of
    /// synthesizing.
    pub echoes: Option<(PathBuf, String)>,
    /// Skip writing files.
    pub dry_run: bool,
}

/// Peak SNR of each target in a whitened image, and what else peaks there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    /// Best |I|² within half a resolution cell of each target, dB.
    pub target_snr_db: Vec<f64>,
    pub detected: usize,
    /// max - min of `target_snr_db`; NaN with no targets.
    pub peak_spread_db: f64,
    /// Strongest local peak away from every target, relative to the
    /// strongest target peak.
    pub spurious_peak_db: f64,
    /// Local peaks above the detection threshold away from every target.
    pub ghost_peaks: usize,
    pub image_peak_snr_db: f64,
}

/// Scores a whitened polar image against the true scene. `oversample` is
/// the number of pixels per resolution cell.
pub fn summarize_image(image: &ImageGrid, scene: &[TargetState], oversample: f64) -> ImageSummary {
    let spec = &image.spec;
    let (n1, n2) = image.shape();
    let cell1 = spec.axis1.step * oversample;
    let cell2 = spec.axis2.step * oversample;
    let near = |i: usize, j: usize, t: &TargetState, cells: f64| {
        (spec.axis1.value(i) - t.position.radius).abs() <= cells * cell1 && (spec.axis2.value(j) - t.position.angle).abs() <= cells * cell2
    };
    let db = |p: f64| 10.0 * p.max(1e-30).log10();
    let target_snr_db: Vec<f64> = scene
        .iter()
        .map(|t| {
            let mut best = 0.0f64;
            for i in 0..n1 {
                for j in 0..n2 {
                    if near(i, j, t, 0.5) {
                        best = best.max(image.at(i, j).norm_sqr());
                    }
                }
            }
            db(best)
        })
        .collect();
    let detected = target_snr_db.iter().filter(|s| **s >= DETECTION_SNR_DB).count();
    let best_target = target_snr_db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst_target = target_snr_db.iter().copied().fold(f64::INFINITY, f64::min);
    let spurious: Vec<f64> = image
        .local_peaks(60.0)
        .iter()
        .filter(|p| !scene.iter().any(|t| near(p.index.0, p.index.1, t, 1.5)))
        .map(|p| db(p.magnitude * p.magnitude))
        .collect();
    let top_spurious = spurious.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let image_peak = db(image.peak().magnitude.powi(2));
    ImageSummary {
        peak_spread_db: if scene.is_empty() { f64::NAN } else { best_target - worst_target },
        detected,
        spurious_peak_db: if scene.is_empty() || spurious.is_empty() {
            f64::NAN
        } else {
            top_spurious - best_target
        },
        ghost_peaks: spurious.iter().filter(|s| **s >= DETECTION_SNR_DB).count(),
        image_peak_snr_db: image_peak,
        target_snr_db,
    }
}

/// Design-level numbers at the ROI center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignMetrics {
    pub beams: usize,
    pub imaging_beams: usize,
    pub ia_overhead: f64,
    pub a_eff: f64,
    pub resolution: ResolutionReport,
    pub sweep_velocity: f64,
}

pub fn design_metrics(scenario: &Scenario, setup: &Setup) -> Result<DesignMetrics> {
    let imaging = scenario.imaging_codebook(&setup.geom, &setup.cfg)?;
    let ia = ia_durations(&setup.array, &imaging, &setup.cfg);
    let center = PolarPoint::from_xy(setup.geom.roi_center);
    let eff = effective_aperture_discrete(&setup.design, center).length;
    let a_eff = if eff > 0.0 { eff } else { setup.design.length() };
    let resolution = nf_resolution(center, a_eff, &setup.cfg)?;
    let imaging_setup = Setup {
        codebook: imaging,
        ..setup.clone()
    };
    Ok(DesignMetrics {
        beams: setup.codebook.len(),
        imaging_beams: imaging_setup.codebook.imaging_count(),
        ia_overhead: ia.overhead,
        a_eff,
        resolution,
        sweep_velocity: sweep_velocity(&imaging_setup).unwrap_or(f64::NAN),
    })
}

/// Whitened image over the ROI, the basis of every SNR metric.
pub fn whitened_roi_image(setup: &Setup, echoes: &EchoTensor, oversample: f64, xi: [f64; 2]) -> Result<ImageGrid> {
    let spec = GridSpec::roi_default(setup, oversample)?;
    backproject(echoes, &spec, xi, setup, ImagingOptions::whitened())
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: Scenario,
    pub out_dir: PathBuf,
    pub setup: Setup,
    pub scene: Vec<TargetState>,
    pub design: DesignMetrics,
    pub echoes: Option<EchoTensor>,
    pub image: Option<ImageGrid>,
    pub summary: Option<ImageSummary>,
    pub velocities: Option<Vec<TargetVelocity>>,
    /// Rows of metrics.csv, in order.
    pub metrics: Vec<(String, f64)>,
    pub files: Vec<PathBuf>,
}

fn metrics_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// Runs `scenario` up to `stage` and writes its outputs. The manifest is
/// the resolved scenario with the effective seed and grid oversampling, so
/// running it again reproduces every CSV byte for byte.
pub fn run_scenario(scenario: &Scenario, stage: Stage, opts: &RunOptions) -> Result<RunReport> {
    let mut sc = scenario.resolved();
    if let Some(seed) = opts.seed {
        sc.seed = seed;
    }
    if let Some(g) = opts.grid_oversample {
        sc.imaging.grid_oversample = g;
    }
    sc.validate()?;
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| sc.default_output_dir());
    let setup = sc.setup()?;
    let scene = sc.scene()?;
    let design = design_metrics(&sc, &setup)?;

    let mut metrics: Vec<(String, f64)> = vec![
        ("beams".into(), design.beams as f64),
        ("imaging_beams".into(), design.imaging_beams as f64),
        ("ia_overhead".into(), design.ia_overhead),
        ("a_eff".into(), design.a_eff),
        ("rho_R".into(), design.resolution.rho_r_nf),
        ("rho_psi".into(), design.resolution.rho_psi_nf),
        ("kappa_R".into(), design.resolution.kappa_r),
        ("sweep_velocity".into(), design.sweep_velocity),
    ];
    let mut texts: Vec<(String, Vec<u8>)> = vec![
        ("codebook.csv".into(), setup.codebook.to_csv().into_bytes()),
        ("reflector.csv".into(), setup.design.to_csv().into_bytes()),
    ];

    let mut echoes = None;
    if stage >= Stage::Simulate {
        for (i, t) in scene.iter().enumerate() {
            let lb = link_budget(t, &setup);
            let best = lb.snr_per_beam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            metrics.push((format!("target_{i}_beam_snr_max_db"), best));
            metrics.push((format!("target_{i}_coherent_snr_db"), lb.coherent_snr));
        }
        let y = match &opts.echoes {
            Some((dir, stem)) => EchoTensor::load(dir, stem)?,
            None => synthesize(&scene, &setup, sc.seed, &sc.synthesis.options())?,
        };
        if stage == Stage::Simulate {
            texts.push(("echoes.bin".into(), y.to_bytes()));
            texts.push(("echoes.beams.csv".into(), y.metadata_csv().into_bytes()));
        }
        echoes = Some(y);
    }

    let mut image = None;
    let mut summary = None;
    if stage >= Stage::Image && stage != Stage::EstimateVelocity {
        let y = echoes.as_ref().expect("echoes exist past the simulate stage");
        let g = sc.imaging.grid_oversample;
        let xi = sc.imaging.velocity_hypothesis;
        let white = whitened_roi_image(&setup, y, g, xi)?;
        let sum = summarize_image(&white, &scene, g);
        let img = match sc.imaging.weighting {
            Weighting::Whitened => white,
            w => backproject(y, &white.spec, xi, &setup, ImagingOptions { weighting: w, ..ImagingOptions::default() })?,
        };
        metrics.push(("image_peak_snr_db".into(), sum.image_peak_snr_db));
        for (i, s) in sum.target_snr_db.iter().enumerate() {
            metrics.push((format!("target_{i}_peak_snr_db"), *s));
        }
        metrics.push(("detected_targets".into(), sum.detected as f64));
        metrics.push(("peak_spread_dB".into(), sum.peak_spread_db));
        metrics.push(("spurious_peak_db".into(), sum.spurious_peak_db));
        metrics.push(("ghost_peaks".into(), sum.ghost_peaks as f64));
        metrics.push(("flagged_pixels".into(), img.flagged_count() as f64));
        texts.push(("image.csv".into(), img.to_csv().into_bytes()));
        texts.push(("image.gp.dat".into(), img.to_gnuplot_matrix().into_bytes()));
        texts.push(("image.bin".into(), img.to_bytes(sc.seed)));
        image = Some(img);
        summary = Some(sum);
    }

    let mut velocities = None;
    let want_velocity = stage == Stage::EstimateVelocity || (stage == Stage::All && sc.velocity.is_some());
    if want_velocity {
        let y = echoes.as_ref().expect("echoes exist past the simulate stage");
        let vopts = sc.velocity.clone().unwrap_or_default().options();
        let rows = estimate_velocities(&setup, y, &vopts)?;
        metrics.push(("velocity_detections".into(), rows.len() as f64));
        metrics.push(("velocity_fits".into(), rows.iter().filter(|r| r.result.is_ok()).count() as f64));
        texts.push(("velocity.csv".into(), estimates_csv(&rows).into_bytes()));
        velocities = Some(rows);
    }

    texts.push(("metrics.csv".into(), metrics_csv(&metrics).into_bytes()));
    let mut manifest = sc.clone();
    let mut outputs: Vec<String> = texts.iter().map(|(n, _)| n.clone()).collect();
    outputs.push("manifest.toml".into());
    manifest.manifest = Some(ManifestInfo {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        stage: stage.label().to_string(),
        outputs,
    });
    texts.push(("manifest.toml".into(), manifest.to_toml()?.into_bytes()));

    let mut files = Vec::new();
    if !opts.dry_run {
        fs::create_dir_all(&out_dir)?;
        for (name, bytes) in &texts {
            let p = out_dir.join(name);
            fs::write(&p, bytes)?;
            files.push(p);
        }
    }
    Ok(RunReport {
        scenario: sc,
        out_dir,
        setup,
        scene,
        design,
        echoes,
        image,
        summary,
        velocities,
        metrics,
        files,
    })
}

/// Loads a scenario (bundled name or path) and runs the full pipeline.
pub fn run_scenario_file(path: &str) -> Result<RunReport> {
    run_scenario(&Scenario::open(path)?, Stage::All, &RunOptions::default())
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    ReflectorLength,
    ModuleLength,
    RoiSize,
    Carrier,
    /// dB offset applied to the transmit power.
    Snr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepMetric {
    #[serde(rename = "ia_overhead")]
    IaOverhead,
    #[serde(rename = "rho_psi")]
    RhoPsi,
    #[serde(rename = "rho_R", alias = "rho_r")]
    RhoR,
    #[serde(rename = "rmse_vR", alias = "rmse_vr")]
    RmseVr,
    #[serde(rename = "rmse_vT", alias = "rmse_vt")]
    RmseVt,
    /// Emits crb_vR and crb_vT.
    #[serde(rename = "crb")]
    Crb,
    #[serde(rename = "peak_spread_dB", alias = "peak_spread_db")]
    PeakSpreadDb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub schema_version: u32,
    /// Bundled scenario name, or a path relative to the sweep file.
    pub base: String,
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub metrics: Vec<SweepMetric>,
    /// Monte-Carlo trials for the velocity metrics.
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_trials() -> usize {
    200
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: SweepSpec = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(invalid("schema_version", format!("expected {SCHEMA_VERSION}, found {}", s.schema_version)));
        }
        if s.values.is_empty() {
            return Err(invalid("values", "must not be empty"));
        }
        if s.metrics.is_empty() {
            return Err(invalid("metrics", "must not be empty"));
        }
        if !(1..=100_000).contains(&s.trials) {
            return Err(invalid("trials", "must be in 1..=100000"));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }
}

/// `base` with the swept parameter set to `value`.
pub fn apply_parameter(base: &Scenario, parameter: SweepParameter, value: f64) -> Result<Scenario> {
    let mut s = base.clone();
    match parameter {
        SweepParameter::ReflectorLength => s.geometry.reflector_length = value,
        SweepParameter::ModuleLength => {
            if !(value > 0.0) {
                return Err(invalid("module_length", "must be positive"));
            }
            let n = (s.geometry.reflector_length / value).round();
            if n < 1.0 {
                return Err(invalid("module_length", "longer than the reflector"));
            }
            s.reflector.modules = n as usize;
        }
        SweepParameter::RoiSize => s.geometry.roi_size = [value, value],
        SweepParameter::Carrier => s.ofdm.carrier_frequency = value,
        SweepParameter::Snr => s.ofdm.tx_power *= 10f64.powf(value / 10.0),
    }
    s.validate()?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub metric: String,
    pub result: f64,
    pub note: String,
}

fn probe_target(sc: &Scenario) -> Result<TargetState> {
    sc.scene()?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Scenario("velocity metrics need at least one target".into()))
}

fn sweep_point(sc: &Scenario, metrics: &[SweepMetric], trials: usize) -> Vec<(String, std::result::Result<f64, String>)> {
    let setup = sc.setup();
    let setup = match setup {
        Ok(s) => s,
        Err(e) => {
            return metrics
                .iter()
                .flat_map(|m| metric_names(*m))
                .map(|n| (n.to_string(), Err(e.to_string())))
                .collect()
        }
    };
    let design = design_metrics(sc, &setup);
    let mut mc: Option<std::result::Result<MonteCarloReport, String>> = None;
    let mut monte = || {
        mc.get_or_insert_with(|| {
            probe_target(sc)
                .and_then(|t| monte_carlo(&setup, &t, trials, sc.seed, &[]))
                .map_err(|e| e.to_string())
        })
        .clone()
    };
    let mut out = Vec::new();
    for m in metrics {
        match m {
            SweepMetric::IaOverhead => out.push(("ia_overhead".into(), design.as_ref().map(|d| d.ia_overhead).map_err(|e| e.to_string()))),
            SweepMetric::RhoPsi => out.push(("rho_psi".into(), design.as_ref().map(|d| d.resolution.rho_psi_nf).map_err(|e| e.to_string()))),
            SweepMetric::RhoR => out.push(("rho_R".into(), design.as_ref().map(|d| d.resolution.rho_r_nf).map_err(|e| e.to_string()))),
            SweepMetric::RmseVr => out.push(("rmse_vR".into(), monte().map(|r| r.rmse_vr))),
            SweepMetric::RmseVt => out.push(("rmse_vT".into(), monte().map(|r| r.rmse_vt))),
            SweepMetric::Crb => {
                let r = monte();
                out.push(("crb_vR".into(), r.clone().map(|r| r.crb_vr)));
                out.push(("crb_vT".into(), r.map(|r| r.crb_vt)));
            }
            SweepMetric::PeakSpreadDb => {
                let run = || -> Result<f64> {
                    let scene = sc.scene()?;
                    let y = synthesize(&scene, &setup, sc.seed, &sc.synthesis.options())?;
                    let img = whitened_roi_image(&setup, &y, sc.imaging.grid_oversample, sc.imaging.velocity_hypothesis)?;
                    Ok(summarize_image(&img, &scene, sc.imaging.grid_oversample).peak_spread_db)
                };
                out.push(("peak_spread_dB".into(), run().map_err(|e| e.to_string())));
            }
        }
    }
    out
}

fn metric_names(m: SweepMetric) -> &'static [&'static str] {
    match m {
        SweepMetric::IaOverhead => &["ia_overhead"],
        SweepMetric::RhoPsi => &["rho_psi"],
        SweepMetric::RhoR => &["rho_R"],
        SweepMetric::RmseVr => &["rmse_vR"],
        SweepMetric::RmseVt => &["rmse_vT"],
        SweepMetric::Crb => &["crb_vR", "crb_vT"],
        SweepMetric::PeakSpreadDb => &["peak_spread_dB"],
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub parameter: SweepParameter,
    pub rows: Vec<SweepRow>,
    pub files: Vec<PathBuf>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let name = serde_plain_name(self.parameter);
        let mut s = String::from("parameter,value,metric,result,note\n");
        for r in &self.rows {
            let _ = writeln!(s, "{name},{},{},{},\"{}\"", r.value, r.metric, r.result, r.note.replace('"', "'"));
        }
        s
    }

    /// One line per swept value, one column per metric, for gnuplot.
    pub fn to_gnuplot_matrix(&self) -> String {
        let mut metrics: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !metrics.contains(&r.metric.as_str()) {
                metrics.push(&r.metric);
            }
        }
        let mut values: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !values.iter().any(|v| v.to_bits() == r.value.to_bits()) {
                values.push(r.value);
            }
        }
        let mut s = format!("# {} {}\n", serde_plain_name(self.parameter), metrics.join(" "));
        for v in values {
            let _ = write!(s, "{v}");
            for m in &metrics {
                let x = self
                    .rows
                    .iter()
                    .find(|r| r.value.to_bits() == v.to_bits() && r.metric == *m)
                    .map_or(f64::NAN, |r| r.result);
                let _ = write!(s, " {x}");
            }
            s.push('\n');
        }
        s
    }

    pub fn metric(&self, name: &str) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.metric == name).map(|r| (r.value, r.result)).collect()
    }
}

fn serde_plain_name(p: SweepParameter) -> &'static str {
    match p {
        SweepParameter::ReflectorLength => "reflector_length",
        SweepParameter::ModuleLength => "module_length",
        SweepParameter::RoiSize => "roi_size",
        SweepParameter::Carrier => "carrier",
        SweepParameter::Snr => "snr",
    }
}

/// Runs every sweep point (in parallel) and writes sweep.csv and
/// sweep.gp.dat to `out_dir` unless it is `None`. A failing point becomes
/// NaN rows carrying the error.
pub fn run_sweep(spec: &SweepSpec, base: &Scenario, out_dir: Option<&Path>) -> Result<SweepReport> {
    let mut base = base.resolved();
    if let Some(seed) = spec.seed {
        base.seed = seed;
    }
    let points: Vec<Vec<SweepRow>> = spec
        .values
        .par_iter()
        .map(|&v| {
            let results = match apply_parameter(&base, spec.parameter, v) {
                Ok(sc) => sweep_point(&sc, &spec.metrics, spec.trials),
                Err(e) => spec
                    .metrics
                    .iter()
                    .flat_map(|m| metric_names(*m))
                    .map(|n| (n.to_string(), Err(e.to_string())))
                    .collect(),
            };
            results
                .into_iter()
                .map(|(metric, r)| match r {
                    Ok(x) => SweepRow {
                        value: v,
                        metric,
                        result: x,
                        note: String::new(),
                    },
                    Err(note) => SweepRow {
                        value: v,
                        metric,
                        result: f64::NAN,
                        note,
                    },
                })
                .collect()
        })
        .collect();
    let mut report = SweepReport {
        parameter: spec.parameter,
        rows: points.into_iter().flatten().collect(),
        files: Vec::new(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let csv = dir.join("sweep.csv");
        fs::write(&csv, report.to_csv())?;
        let gp = dir.join("sweep.gp.dat");
        fs::write(&gp, report.to_gnuplot_matrix())?;
        report.files = vec![csv, gp];
    }
    Ok(report)
}

/// Loads a sweep file, resolves its base scenario and runs it.
pub fn run_sweep_file(path: &Path, out_dir: Option<&Path>) -> Result<SweepReport> {
    let spec = SweepSpec::load(path)?;
    let base = match bundled(&spec.base) {
        Some(text) => Scenario::from_toml_str(text)?,
        None => {
            let rel = path.parent().unwrap_or(Path::new(".")).join(&spec.base);
            Scenario::load(&rel)?
        }
    };
    run_sweep(&spec, &base, out_dir)
}

// ---------------------------------------------------------------------------
// Oracles

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    CoverageVsClosedForm,
    SafVsClosedForm,
    GainBruteforce,
    CrbMontecarlo,
}

impl OracleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coverage_vs_closed_form" => Ok(Self::CoverageVsClosedForm),
            "saf_vs_closed_form" => Ok(Self::SafVsClosedForm),
            "gain_bruteforce" => Ok(Self::GainBruteforce),
            "crb_montecarlo" => Ok(Self::CrbMontecarlo),
            _ => Err(invalid("oracle", format!("unknown kind `{s}`"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::CoverageVsClosedForm => "coverage_vs_closed_form",
            Self::SafVsClosedForm => "saf_vs_closed_form",
            Self::GainBruteforce => "gain_bruteforce",
            Self::CrbMontecarlo => "crb_montecarlo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub seed: u64,
    /// Random geometries (coverage, gain) or SAF cases.
    pub cases: usize,
    pub trials: usize,
    /// Per-sample SNR of the Monte-Carlo run.
    pub snr_db: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            cases: 50,
            trials: 300,
            snr_db: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub label: String,
    pub value: f64,
    pub reference: f64,
    /// |value/reference - 1|, or the ratio itself for Monte-Carlo rows.
    pub deviation: f64,
    pub lower: f64,
    pub upper: f64,
    pub passed: bool,
}

impl OracleRow {
    fn relative(label: String, value: f64, reference: f64, tol: f64) -> Self {
        let deviation = (value / reference - 1.0).abs();
        Self {
            label,
            value,
            reference,
            deviation,
            lower: 0.0,
            upper: tol,
            passed: deviation < tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub kind: OracleKind,
    pub rows: Vec<OracleRow>,
    pub passed: bool,
}

impl OracleReport {
    fn new(kind: OracleKind, rows: Vec<OracleRow>) -> Self {
        let passed = !rows.is_empty() && rows.iter().all(|r| r.passed);
        Self { kind, rows, passed }
    }

    pub fn max_deviation(&self) -> f64 {
        self.rows.iter().map(|r| r.deviation).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,value,reference,deviation,lower,upper,passed\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.label, r.value, r.reference, r.deviation, r.lower, r.upper, r.passed);
        }
        s
    }
}

pub fn run_oracle(kind: OracleKind, cfg: &OracleConfig) -> Result<OracleReport> {
    let rows = match kind {
        OracleKind::CoverageVsClosedForm => coverage_oracle(cfg)?,
        OracleKind::SafVsClosedForm => saf_oracle(cfg)?,
        OracleKind::GainBruteforce => gain_oracle(cfg)?,
        OracleKind::CrbMontecarlo => crb_oracle(cfg)?,
    };
    Ok(OracleReport::new(kind, rows))
}

fn coverage_oracle(cfg: &OracleConfig) -> Result<Vec<OracleRow>> {
    let c = OfdmConfig::new(15e9, 200e6, 2, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for i in 0..cfg.cases {
        let r0 = rng.random_range(5.0..40.0);
        let psi = rng.random_range(-20f64..20.0).to_radians();
        let a = rng.random_range(0.02..0.2) * r0;
        let t = PolarPoint::new(r0, psi);
        let closed = nf_resolution(t, a, &c)?;
        let oracle = resolution_from_coverage(&spectral_coverage(t, (-a / 2.0, a / 2.0), &c, 201), &c)?;
        rows.push(OracleRow::relative(format!("case{i}_rho_R"), oracle.rho_r_nf, closed.rho_r_nf, 0.02));
        rows.push(OracleRow::relative(format!("case{i}_rho_psi"), oracle.rho_psi_nf, closed.rho_psi_nf, 0.02));
    }
    Ok(rows)
}

/// Closed form, coverage oracle and measured SAF widths at one geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeWayResolution {
    pub target: PolarPoint,
    pub closed: ResolutionReport,
    pub coverage: ResolutionReport,
    pub measured_rho_r: f64,
    pub measured_rho_psi: f64,
}

/// Lens of length `a` focused at `target`, so the whole surface is the
/// effective aperture, seen by the baseline 0.4 m BS array through the plane-wave
/// gain. The SAF is measured on two thin cuts through the target at a tenth
/// of the predicted resolution.
pub fn three_way_resolution(target: PolarPoint, a: f64, carrier: f64, bandwidth: f64, numerology: u32) -> Result<ThreeWayResolution> {
    let cfg = OfdmConfig::new(carrier, bandwidth, numerology, 1.0)?;
    let focus = target.to_xy();
    let closed = nf_resolution(target, a, &cfg)?;
    // ROI wide enough for ±2 cells around the target.
    let (rr, rp) = (closed.rho_r_nf, closed.rho_psi_nf);
    let size = Vec2::new((4.0 * rp * target.radius).max(6.0), (4.0 * rr).max(6.0));
    let geom = SceneGeometry::new(Vec2::new(-5.0 * 20f64.to_radians().tan(), 5.0), a, focus, size)?;
    let array = BsArray::with_aperture(0.4, cfg.wavelength())?;
    let codebook = make_imaging_codebook_scaled(&geom, &cfg, 1.0)?;
    let modules = ((a / 0.08).round() as usize).max(1);
    let design = design_lens(&geom, focus, modules, &cfg)?;
    let setup = Setup {
        geom,
        cfg,
        array,
        design,
        codebook,
        gain_model: GainModel::PlaneWave,
    };
    let coverage = resolution_from_coverage(&spectral_coverage(target, (-a / 2.0, a / 2.0), &setup.cfg, 201), &setup.cfg)?;
    let (r_lo, r_hi, p_lo, p_hi) = roi_polar_hull(&setup.geom);
    if 1.6 * rr > (r_hi - r_lo) / 2.0 || 1.6 * rp > (p_hi - p_lo) / 2.0 {
        return Err(Error::Geometry("resolution cell larger than the ROI".into()));
    }
    let thin = |c: f64, w: f64| Axis::new(c - w / 20.0, w / 20.0, 3);
    let range_cut = GridSpec::polar(Axis::centered(target.radius, 1.5 * rr, rr / 10.0), thin(target.angle, rp));
    let angle_cut = GridSpec::polar(thin(target.radius, rr), Axis::centered(target.angle, 1.5 * rp, rp / 10.0));
    let measured_rho_r = saf(target, &setup, &range_cut)?.lobe_width(1)?;
    let measured_rho_psi = saf(target, &setup, &angle_cut)?.lobe_width(2)?;
    Ok(ThreeWayResolution {
        target,
        closed,
        coverage,
        measured_rho_r,
        measured_rho_psi,
    })
}

/// Geometries where all three resolution estimates are expected to agree.
/// The reflector must be long compared to a beam footprint (~0.8 m here):
/// shorter ones are lit almost whole by every beam and the per-beam gain
/// tapers the aperture, widening the measured lobe.
pub fn three_way_cases(count: usize, seed: u64) -> Vec<(PolarPoint, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let r0 = rng.random_range(12.0..30.0);
            let psi = rng.random_range(-15f64..15.0).to_radians();
            let a = rng.random_range(1.6..3.0);
            (PolarPoint::new(r0, psi), a)
        })
        .collect()
}

fn saf_oracle(cfg: &OracleConfig) -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    for (i, (t, a)) in three_way_cases(cfg.cases.min(20), cfg.seed).into_iter().enumerate() {
        let w = match three_way_resolution(t, a, 15e9, 1.5e9, 5) {
            Ok(w) => w,
            Err(e) => {
                rows.push(OracleRow {
                    label: format!("case{i}_error: {e}"),
                    value: f64::NAN,
                    reference: f64::NAN,
                    deviation: f64::NAN,
                    lower: 0.0,
                    upper: 0.1,
                    passed: false,
                });
                continue;
            }
        };
        rows.push(OracleRow::relative(format!("case{i}_rho_R_saf"), w.measured_rho_r, w.closed.rho_r_nf, 0.1));
        rows.push(OracleRow::relative(format!("case{i}_rho_psi_saf"), w.measured_rho_psi, w.closed.rho_psi_nf, 0.1));
        rows.push(OracleRow::relative(format!("case{i}_rho_R_coverage"), w.coverage.rho_r_nf, w.closed.rho_r_nf, 0.1));
        rows.push(OracleRow::relative(format!("case{i}_rho_psi_coverage"), w.coverage.rho_psi_nf, w.closed.rho_psi_nf, 0.1));
    }
    Ok(rows)
}

fn gain_oracle(cfg: &OracleConfig) -> Result<Vec<OracleRow>> {
    let base = Scenario::from_toml_str(bundled("fig5d_modular").expect("bundled"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for i in 0..cfg.cases {
        let mut sc = base.clone();
        sc.geometry.reflector_length = rng.random_range(0.3..1.5);
        sc.reflector.modules = rng.random_range(1..16);
        sc.reflector.kind = [ReflectorKind::Modular, ReflectorKind::Lens, ReflectorKind::Mirror][i % 3];
        let setup = sc.setup()?;
        let beams = plan_beams(&setup.design, &setup.codebook, &setup.array, &setup.geom);
        let live: Vec<_> = beams.iter().filter(|b| !b.misses_reflector).collect();
        let b = live[rng.random_range(0..live.len())];
        let c = setup.geom.roi_center;
        let h = setup.geom.roi_size / 2.0;
        let pixel = Vec2::new(c.x + rng.random_range(-h.x..h.x), c.y + rng.random_range(-h.y..h.y));
        let ill = b.illumination(&setup.geom);
        let fast = reflection_gain(&setup.design, &ill, pixel);
        let brute = reflection_gain_bruteforce(&setup.design, &ill, pixel);
        let dev = (fast - brute).norm() / brute.norm().max(1e-300);
        rows.push(OracleRow {
            label: format!("case{i}"),
            value: fast.norm(),
            reference: brute.norm(),
            deviation: dev,
            lower: 0.0,
            upper: 1e-10,
            passed: dev < 1e-10,
        });
    }
    Ok(rows)
}

/// The FR3 baseline geometry with a single target at the ROI center moving at
/// (1, 2) m/s, RCS chosen so that the mean SNR over the effective beams is
/// `snr_db`.
pub fn crb_probe(snr_db: f64) -> Result<(Setup, TargetState)> {
    let sc = Scenario::from_toml_str(bundled("fr3_baseline").expect("bundled"))?;
    let setup = sc.setup()?;
    let center = PolarPoint::from_xy(setup.geom.roi_center);
    let unit = TargetState::stationary(center, 1.0).with_velocity(1.0, 2.0).with_phase(0.4);
    let snr: Vec<f64> = setup.beams().iter().map(|b| snr_per_beam_linear(b, &unit, &setup)).collect();
    let mask = effective_mask(&setup, center, &vec![true; snr.len()]);
    let sel: Vec<f64> = snr.iter().zip(&mask).filter(|(_, m)| **m).map(|(s, _)| *s).collect();
    if sel.is_empty() {
        return Err(Error::NotDetectable("no effective beams at the ROI center".into()));
    }
    let mean = sel.iter().sum::<f64>() / sel.len() as f64;
    let rcs = 10f64.powf(snr_db / 10.0) / mean;
    let mut t = unit;
    t.rcs = rcs;
    Ok((setup, t))
}

/// RMSE/CRB must lie in [1 - 3/√(2N), 3]: the lower slack is three standard
/// deviations of a sample RMSE over N trials.
pub fn rmse_crb_bounds(trials: usize) -> (f64, f64) {
    (1.0 - 3.0 / (2.0 * trials as f64).sqrt(), 3.0)
}

fn crb_oracle(cfg: &OracleConfig) -> Result<Vec<OracleRow>> {
    let (setup, target) = crb_probe(cfg.snr_db)?;
    let rep = monte_carlo(&setup, &target, cfg.trials, cfg.seed, &[])?;
    let (lo, hi) = rmse_crb_bounds(rep.trials);
    let row = |label: &str, rmse: f64, crb: f64| {
        let ratio = rmse / crb;
        OracleRow {
            label: label.into(),
            value: rmse,
            reference: crb,
            deviation: ratio,
            lower: lo,
            upper: hi,
            passed: ratio >= lo && ratio <= hi,
        }
    };
    Ok(vec![
        row("rmse_over_crb_vR", rep.rmse_vr, rep.crb_vr),
        row("rmse_over_crb_vT", rep.rmse_vt, rep.crb_vt),
        OracleRow {
            label: "mean_snr_db".into(),
            value: rep.mean_snr_db,
            reference: cfg.snr_db,
            deviation: (rep.mean_snr_db - cfg.snr_db).abs(),
            lower: 0.0,
            upper: 0.5,
            passed: (rep.mean_snr_db - cfg.snr_db).abs() < 0.5,
        },
    ])
}

/// Writes `<kind>.csv` to `out_dir` and returns its path.
pub fn write_oracle(report: &OracleReport, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let p = out_dir.join(format!("{}.csv", report.kind.label()));
    fs::write(&p, report.to_csv())?;
    Ok(p)
}
