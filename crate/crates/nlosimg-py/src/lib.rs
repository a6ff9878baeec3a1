//! Python bindings: scenarios, the staged pipeline, sweeps and oracles.
//! Long computations release the GIL.

use std::path::PathBuf;

use nlosimg::codebook::OfdmConfig;
use nlosimg::geometry::PolarPoint;
use nlosimg::imaging::{Coordinates, ImageGrid};
use nlosimg::resolution::nf_resolution as nf_resolution_core;
use nlosimg::scenario::{self, design_metrics, OracleConfig, OracleKind, RunOptions, RunReport, Scenario, Stage};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: nlosimg::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_stage(s: &str) -> PyResult<Stage> {
    Ok(match s {
        "design" => Stage::Design,
        "simulate" => Stage::Simulate,
        "image" => Stage::Image,
        "estimate-velocity" | "estimate_velocity" => Stage::EstimateVelocity,
        "all" => Stage::All,
        _ => return Err(PyValueError::new_err(format!("unknown stage `{s}`"))),
    })
}

fn rows_dict<'py>(py: Python<'py>, rows: &[(String, f64)]) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in rows {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pyclass(name = "Scenario", module = "nlosimg")]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    /// A bundled scenario by name.
    #[staticmethod]
    fn open(name: &str) -> PyResult<Self> {
        Scenario::open(name).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Scenario::from_toml_str(text).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Scenario::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    /// Beam counts, IA overhead, A_eff, resolutions and sweep velocity at
    /// the ROI center.
    fn design<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let sc = self.inner.resolved();
        let d = py.detach(|| sc.setup().and_then(|setup| design_metrics(&sc, &setup))).map_err(py_err)?;
        rows_dict(
            py,
            &[
                ("beams".into(), d.beams as f64),
                ("imaging_beams".into(), d.imaging_beams as f64),
                ("ia_overhead".into(), d.ia_overhead),
                ("a_eff".into(), d.a_eff),
                ("rho_R".into(), d.resolution.rho_r_nf),
                ("rho_psi".into(), d.resolution.rho_psi_nf),
                ("kappa_R".into(), d.resolution.kappa_r),
                ("sweep_velocity".into(), d.sweep_velocity),
            ],
        )
    }

    /// Runs the pipeline up to `stage`. Nothing is written unless `out_dir`
    /// is given.
    #[pyo3(signature = (stage = "image", out_dir = None, seed = None, grid_oversample = None))]
    fn run(
        &self,
        py: Python<'_>,
        stage: &str,
        out_dir: Option<PathBuf>,
        seed: Option<u64>,
        grid_oversample: Option<f64>,
    ) -> PyResult<PyRunReport> {
        let stage = parse_stage(stage)?;
        let opts = RunOptions {
            dry_run: out_dir.is_none(),
            out_dir,
            seed,
            grid_oversample,
            echoes: None,
        };
        let sc = self.inner.clone();
        let inner = py.detach(|| scenario::run_scenario(&sc, stage, &opts)).map_err(py_err)?;
        Ok(PyRunReport { inner })
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?}, seed={})", self.inner.name, self.inner.seed)
    }
}

#[pyclass(name = "Image", module = "nlosimg")]
struct PyImage {
    inner: ImageGrid,
}

#[pymethods]
impl PyImage {
    /// "polar" (range, angle) or "cartesian" (x, y).
    #[getter]
    fn coordinates(&self) -> &'static str {
        match self.inner.spec.coordinates {
            Coordinates::Polar => "polar",
            Coordinates::Cartesian => "cartesian",
        }
    }

    #[getter]
    fn axis1(&self) -> Vec<f64> {
        self.inner.spec.axis1.values()
    }

    #[getter]
    fn axis2(&self) -> Vec<f64> {
        self.inner.spec.axis2.values()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    /// |I| as rows over axis1.
    fn magnitude(&self) -> Vec<Vec<f64>> {
        let (n1, n2) = self.inner.shape();
        (0..n1).map(|i| (0..n2).map(|j| self.inner.magnitude(i, j)).collect()).collect()
    }

    /// Interpolated (axis1, axis2, |I|) of the strongest pixel.
    fn peak(&self) -> (f64, f64, f64) {
        let p = self.inner.peak();
        (p.position.0, p.position.1, p.magnitude)
    }
}

#[pyclass(name = "RunReport", module = "nlosimg")]
struct PyRunReport {
    inner: RunReport,
}

#[pymethods]
impl PyRunReport {
    /// The rows of metrics.csv.
    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        rows_dict(py, &self.inner.metrics)
    }

    #[getter]
    fn image(&self) -> Option<PyImage> {
        self.inner.image.clone().map(|inner| PyImage { inner })
    }

    /// Per-target peak SNR, detections and spurious levels of the whitened
    /// ROI image.
    #[getter]
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        let Some(s) = &self.inner.summary else { return Ok(None) };
        let d = PyDict::new(py);
        d.set_item("target_snr_db", s.target_snr_db.clone())?;
        d.set_item("detected", s.detected)?;
        d.set_item("peak_spread_db", s.peak_spread_db)?;
        d.set_item("spurious_peak_db", s.spurious_peak_db)?;
        d.set_item("ghost_peaks", s.ghost_peaks)?;
        d.set_item("image_peak_snr_db", s.image_peak_snr_db)?;
        Ok(Some(d))
    }

    /// One dict per detection; fits that failed carry an `error` entry.
    #[getter]
    fn velocities<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let Some(rows) = &self.inner.velocities else { return Ok(Vec::new()) };
        rows.iter()
            .map(|t| {
                let d = PyDict::new(py);
                d.set_item("id", t.id)?;
                d.set_item("radius", t.coarse.position.radius)?;
                d.set_item("angle", t.coarse.position.angle)?;
                match &t.result {
                    Ok(r) => {
                        d.set_item("v_r", r.estimate.v_r)?;
                        d.set_item("v_t", r.estimate.v_t)?;
                        d.set_item("crb_v_r", r.estimate.crb_vr())?;
                        d.set_item("samples", r.estimate.samples)?;
                    }
                    Err(e) => d.set_item("error", e)?,
                }
                Ok(d)
            })
            .collect()
    }

    #[getter]
    fn files(&self) -> Vec<PathBuf> {
        self.inner.files.clone()
    }
}

#[pyfunction]
fn bundled_scenarios() -> Vec<&'static str> {
    scenario::BUNDLED.iter().map(|(n, _)| *n).collect()
}

/// Closed-form near-field resolution of a target at (radius, angle) seen
/// through an aperture of length `a_eff`.
#[pyfunction]
#[pyo3(signature = (radius, angle, a_eff, carrier_frequency, bandwidth, numerology = 2))]
fn nf_resolution<'py>(
    py: Python<'py>,
    radius: f64,
    angle: f64,
    a_eff: f64,
    carrier_frequency: f64,
    bandwidth: f64,
    numerology: u32,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = OfdmConfig::new(carrier_frequency, bandwidth, numerology, 1.0).map_err(py_err)?;
    let r = nf_resolution_core(PolarPoint::new(radius, angle), a_eff, &cfg).map_err(py_err)?;
    rows_dict(
        py,
        &[
            ("rho_R_ff".into(), r.rho_r_ff),
            ("rho_R_nf".into(), r.rho_r_nf),
            ("rho_psi_ff".into(), r.rho_psi_ff),
            ("rho_psi_nf".into(), r.rho_psi_nf),
            ("kappa_R".into(), r.kappa_r),
            ("kappa_psi".into(), r.kappa_psi),
        ],
    )
}

/// Runs one oracle and returns `(passed, rows)`; each row is a dict with
/// label, value, reference, deviation, lower, upper, passed.
#[pyfunction]
#[pyo3(signature = (kind, seed = 7, cases = 50, trials = 300, snr_db = 20.0))]
fn run_oracle<'py>(
    py: Python<'py>,
    kind: &str,
    seed: u64,
    cases: usize,
    trials: usize,
    snr_db: f64,
) -> PyResult<(bool, Vec<Bound<'py, PyDict>>)> {
    let kind = OracleKind::parse(kind).map_err(py_err)?;
    let cfg = OracleConfig { seed, cases, trials, snr_db };
    let rep = py.detach(|| scenario::run_oracle(kind, &cfg)).map_err(py_err)?;
    let rows = rep
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("label", &r.label)?;
            d.set_item("value", r.value)?;
            d.set_item("reference", r.reference)?;
            d.set_item("deviation", r.deviation)?;
            d.set_item("lower", r.lower)?;
            d.set_item("upper", r.upper)?;
            d.set_item("passed", r.passed)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((rep.passed, rows))
}

/// Runs a sweep file and returns its rows as (value, metric, result, note).
#[pyfunction]
#[pyo3(signature = (path, out_dir = None))]
fn run_sweep(py: Python<'_>, path: PathBuf, out_dir: Option<PathBuf>) -> PyResult<Vec<(f64, String, f64, String)>> {
    let rep = py.detach(|| scenario::run_sweep_file(&path, out_dir.as_deref())).map_err(py_err)?;
    Ok(rep.rows.into_iter().map(|r| (r.value, r.metric, r.result, r.note)).collect())
}

#[pymodule]
fn _nlosimg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRunReport>()?;
    m.add_class::<PyImage>()?;
    m.add_function(wrap_pyfunction!(bundled_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(nf_resolution, m)?)?;
    m.add_function(wrap_pyfunction!(run_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    Ok(())
}
