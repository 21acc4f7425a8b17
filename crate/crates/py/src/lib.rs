//! Python bindings: scenes, cameras, lenses, rendering, checkpoints,
//! synthetic data and training.

use std::path::PathBuf;

use dofsplat::config::{load_dataset, Config};
use dofsplat::io::{load_ply_points, write_image, Checkpoint as CoreCheckpoint, ViewRecord};
use dofsplat::raster::{render as core_render, RasterConfig};
use dofsplat::synthetic::{generate_synthetic, SyntheticSpec};
use dofsplat::trainer::Trainer;
use dofsplat::{dof, CameraPose, LensParams};
use pyo3::exceptions::{PyIndexError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: dofsplat::Error) -> PyErr {
    use dofsplat::Error as E;
    match e {
        E::Io(err) => PyIOError::new_err(err.to_string()),
        E::Validation(_) | E::Domain(_) | E::Shape(_) | E::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Float image, row-major, interleaved channels.
#[pyclass(name = "Image", module = "dofsplat_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: dofsplat::Image,
}

#[pymethods]
impl PyImage {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    /// Flat list of values.
    fn data(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn at(&self, x: usize, y: usize, c: usize) -> PyResult<f64> {
        if x >= self.inner.width || y >= self.inner.height || c >= self.inner.channels {
            return Err(PyIndexError::new_err("pixel index out of range"));
        }
        Ok(self.inner.at(x, y, c))
    }

    /// Writes a PNG or PPM, chosen by extension.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_image(path, &self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}x{})", self.inner.width, self.inner.height, self.inner.channels)
    }
}

fn image(inner: dofsplat::Image) -> PyImage {
    PyImage { inner }
}

#[pyclass(name = "Lens", module = "dofsplat_py", skip_from_py_object)]
#[derive(Clone, Copy)]
pub struct PyLens {
    inner: LensParams,
}

#[pymethods]
impl PyLens {
    #[new]
    fn new(f: f64, q: f64) -> PyResult<Self> {
        let inner = LensParams::new(f, q);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn f(&self) -> f64 {
        self.inner.focal_distance
    }

    #[getter]
    fn q(&self) -> f64 {
        self.inner.aperture
    }

    /// CoC radius in pixels of a point at depth `z`.
    fn coc_radius(&self, z: f64) -> PyResult<f64> {
        dof::coc_radius(self.inner.aperture, self.inner.focal_distance, z).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Lens(f={}, q={})", self.inner.focal_distance, self.inner.aperture)
    }
}

#[pyclass(name = "Camera", module = "dofsplat_py", from_py_object)]
#[derive(Clone, Copy)]
pub struct PyCamera {
    inner: CameraPose,
}

#[pymethods]
impl PyCamera {
    /// Identity pose looking down +z with the principal point centered.
    #[staticmethod]
    fn centered(width: usize, height: usize, focal_px: f64) -> Self {
        Self { inner: CameraPose::centered(width, height, focal_px) }
    }

    #[staticmethod]
    fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], width: usize, height: usize, focal_px: f64) -> Self {
        let v = |a: [f64; 3]| nalgebra::Vector3::new(a[0], a[1], a[2]);
        Self { inner: CameraPose::look_at(v(eye), v(target), v(up), width, height, focal_px) }
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn position(&self) -> [f64; 3] {
        let p = self.inner.position();
        [p.x, p.y, p.z]
    }
}

#[pyclass(name = "Scene", module = "dofsplat_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyScene {
    inner: dofsplat::Scene,
}

#[pymethods]
impl PyScene {
    /// Initial scene from a PLY point cloud.
    #[staticmethod]
    fn from_ply(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_ply_points(path).map_err(to_py)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn centers(&self) -> Vec<[f64; 3]> {
        self.inner.gaussians.iter().map(|g| [g.center.x, g.center.y, g.center.z]).collect()
    }

    fn opacities(&self) -> Vec<f64> {
        self.inner.gaussians.iter().map(|g| g.opacity).collect()
    }

    /// Color, depth and CoC maps (depth and CoC not alpha-normalized).
    #[pyo3(signature = (camera, lens, tile_size = 16))]
    fn render(&self, py: Python<'_>, camera: &PyCamera, lens: &PyLens, tile_size: usize) -> (PyImage, PyImage, PyImage) {
        let cfg = RasterConfig { tile_size, ..Default::default() };
        let out = py.detach(|| core_render(&self.inner, &camera.inner, &lens.inner, &cfg));
        (image(out.color), image(out.depth), image(out.coc))
    }

    /// Initial lens per camera from point depths.
    #[pyo3(signature = (cameras, tau = dofsplat::camera_init::DEFAULT_TAU))]
    fn init_lenses(&self, cameras: Vec<PyCamera>, tau: f64) -> PyResult<Vec<PyLens>> {
        let cams: Vec<CameraPose> = cameras.iter().map(|c| c.inner).collect();
        let f = dofsplat::camera_init::init_focal(&self.inner, &cams).map_err(to_py)?;
        let q = dofsplat::camera_init::init_aperture(&self.inner, &cams, tau).map_err(to_py)?;
        Ok(f.into_iter().zip(q).map(|(f, q)| PyLens { inner: LensParams::new(f, q) }).collect())
    }
}

#[pyclass(name = "Checkpoint", module = "dofsplat_py")]
pub struct PyCheckpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreCheckpoint::load(path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn scene(&self) -> PyScene {
        PyScene { inner: self.inner.scene.clone() }
    }

    fn __len__(&self) -> usize {
        self.inner.views.len()
    }

    fn camera(&self, view: usize) -> PyResult<PyCamera> {
        Ok(PyCamera { inner: self.view(view)?.camera })
    }

    fn lens(&self, view: usize) -> PyResult<PyLens> {
        Ok(PyLens { inner: self.view(view)?.lens })
    }

    /// Renders `view`; `f`/`q` default to the trained lens, `aif` forces `q = 0`.
    #[pyo3(signature = (view, f = None, q = None, aif = false))]
    fn render(&self, py: Python<'_>, view: usize, f: Option<f64>, q: Option<f64>, aif: bool) -> PyResult<(PyImage, PyImage, PyImage)> {
        let v = self.view(view)?;
        let lens = LensParams::new(f.unwrap_or(v.lens.focal_distance), if aif { 0.0 } else { q.unwrap_or(v.lens.aperture) });
        lens.validate().map_err(to_py)?;
        let cam = v.camera;
        let out = py.detach(|| core_render(&self.inner.scene, &cam, &lens, &RasterConfig::default()));
        let (depth, coc) = (out.normalized_depth(), out.normalized_coc());
        Ok((image(out.color), image(depth), image(coc)))
    }
}

impl PyCheckpoint {
    fn view(&self, view: usize) -> PyResult<&ViewRecord> {
        self.inner
            .views
            .get(view)
            .ok_or_else(|| PyIndexError::new_err(format!("view {view} out of range ({} views)", self.inner.views.len())))
    }
}

/// Ground-truth two-plane scene with its views as a checkpoint.
#[pyfunction]
#[pyo3(signature = (size, focal_distances, aperture, seed = 0))]
fn two_plane(py: Python<'_>, size: usize, focal_distances: Vec<f64>, aperture: f64, seed: u64) -> PyResult<PyCheckpoint> {
    let lenses = focal_distances.iter().map(|&f| LensParams::new(f, aperture)).collect();
    let spec = SyntheticSpec::two_plane(size, lenses);
    let data = py.detach(|| generate_synthetic(&spec, seed, &RasterConfig::default())).map_err(to_py)?;
    let mut ck = CoreCheckpoint::from_scene(data.scene);
    ck.views = data.views.iter().map(|v| ViewRecord { camera: v.camera, lens: v.lens }).collect();
    Ok(PyCheckpoint { inner: ck })
}

/// Trains from a TOML config string; returns the checkpoint and the
/// metrics CSV. Relative paths resolve against `base_dir`.
#[pyfunction]
#[pyo3(signature = (config, base_dir = None))]
fn train(py: Python<'_>, config: &str, base_dir: Option<PathBuf>) -> PyResult<(PyCheckpoint, String)> {
    let mut cfg = Config::parse(config).map_err(to_py)?;
    if let Some(base) = base_dir {
        cfg.resolve_paths(&base);
    }
    py.detach(|| {
        let data = load_dataset(&cfg)?;
        let mut t = Trainer::new(&data.scene, data.views, cfg.train.clone(), cfg.loss, cfg.raster)?;
        if let Some(gt) = data.ground_truth {
            t = t.with_ground_truth(gt)?;
        }
        t.run()?;
        Ok((PyCheckpoint { inner: t.checkpoint() }, t.metrics_csv()))
    })
    .map_err(to_py)
}

/// Variance of the Gaussian fitted to a CoC disk of radius `r`.
#[pyfunction]
fn kernel_variance(r: f64) -> f64 {
    dof::kernel_variance(r)
}

#[pyfunction]
fn coc_radius(q: f64, f: f64, z: f64) -> PyResult<f64> {
    dof::coc_radius(q, f, z).map_err(to_py)
}

#[pymodule]
fn dofsplat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyLens>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(two_plane, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_variance, m)?)?;
    m.add_function(wrap_pyfunction!(coc_radius, m)?)?;
    Ok(())
}
