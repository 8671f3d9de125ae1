//! Python bindings: the main types and operations of the contact-capture
//! engine, exposed with plain lists/tuples so the module stays
//! dependency-free on the Python side.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use surfelcap::contact;
use surfelcap::geom::{self, Mat3, Quat, Vec3};
use surfelcap::io;
use surfelcap::model::Surfel2D;
use surfelcap::optim;
use surfelcap::render::{self, RasterConfig};
use surfelcap::synth;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

/// NeRF-style positional encoding of a vector.
#[pyfunction]
fn posenc(p: Vec<f64>, levels: usize) -> Vec<f64> {
    geom::posenc(&p, levels)
}

/// Local frame of a triangle: (rotation rows, origin, scale).
#[pyfunction]
fn triangle_frame(
    v0: [f64; 3],
    v1: [f64; 3],
    v2: [f64; 3],
) -> PyResult<([[f64; 3]; 3], [f64; 3], f64)> {
    let f = geom::triangle_frame(&vec3(v0), &vec3(v1), &vec3(v2)).map_err(err)?;
    let r = &f.rot;
    Ok((
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ],
        [f.origin.x, f.origin.y, f.origin.z],
        f.scale,
    ))
}

/// Pinhole camera with a rigid world-to-camera transform.
#[pyclass(name = "Camera", from_py_object)]
#[derive(Clone)]
struct PyCamera {
    inner: geom::Camera,
}

#[pymethods]
impl PyCamera {
    #[new]
    #[allow(clippy::too_many_arguments)]
    fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_cam_rot: [[f64; 3]; 3],
        world_to_cam_trans: [f64; 3],
    ) -> PyResult<Self> {
        let r = &world_to_cam_rot;
        let cam = geom::Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rot: Mat3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            trans: vec3(world_to_cam_trans),
        };
        cam.validate().map_err(err)?;
        Ok(PyCamera { inner: cam })
    }

    /// Simple ring-camera constructor looking at a target point.
    #[staticmethod]
    fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        f: f64,
        width: usize,
        height: usize,
    ) -> Self {
        PyCamera {
            inner: geom::Camera::look_at(vec3(eye), vec3(target), vec3(up), f, f, width, height),
        }
    }

    /// Projects a world point to (u, v, depth).
    fn project(&self, x: [f64; 3]) -> PyResult<(f64, f64, f64)> {
        self.inner.project(&vec3(x)).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }
}

/// One 2D Gaussian surfel (constant color).
#[pyclass(name = "Surfel", from_py_object)]
#[derive(Clone)]
struct PySurfel {
    inner: Surfel2D,
}

#[pymethods]
impl PySurfel {
    #[new]
    fn new(
        position: [f64; 3],
        rotation_wxyz: [f64; 4],
        scales: [f64; 2],
        opacity: f64,
        rgb: [f64; 3],
    ) -> PyResult<Self> {
        if !(0.0..1.0).contains(&opacity) || scales[0] <= 0.0 || scales[1] <= 0.0 {
            return Err(PyValueError::new_err("opacity must be in (0,1), scales positive"));
        }
        Ok(PySurfel {
            inner: Surfel2D::flat(
                vec3(position),
                Quat::new(rotation_wxyz[0], rotation_wxyz[1], rotation_wxyz[2], rotation_wxyz[3]),
                scales,
                opacity,
                rgb,
            ),
        })
    }

    #[getter]
    fn position(&self) -> [f64; 3] {
        [self.inner.pos.x, self.inner.pos.y, self.inner.pos.z]
    }

    #[getter]
    fn opacity(&self) -> f64 {
        self.inner.opacity()
    }
}

/// Rendered images as flat row-major lists.
#[pyclass(name = "RenderResult")]
struct PyRenderResult {
    #[pyo3(get)]
    width: usize,
    #[pyo3(get)]
    height: usize,
    #[pyo3(get)]
    color: Vec<[f64; 3]>,
    #[pyo3(get)]
    alpha: Vec<f64>,
    #[pyo3(get)]
    depth: Vec<f64>,
    #[pyo3(get)]
    normal: Vec<[f64; 3]>,
    #[pyo3(get)]
    distortion: Vec<f64>,
}

/// Renders surfels over a constant background.
#[pyfunction]
fn render_surfels(
    surfels: Vec<PySurfel>,
    camera: &PyCamera,
    background: [f64; 3],
) -> PyRenderResult {
    let scene: Vec<Surfel2D> = surfels.into_iter().map(|s| s.inner).collect();
    let out = render::render(&scene, &camera.inner, background, &RasterConfig::default(), 0);
    let depth = out.normalized_depth();
    PyRenderResult {
        width: out.width,
        height: out.height,
        color: out.color,
        alpha: out.alpha,
        depth,
        normal: out.normal,
        distortion: out.distortion,
    }
}

/// Ray-splat intersection: (u, v, depth) in scaled tangent coordinates,
/// or None on a miss.
#[pyfunction]
fn ray_splat_intersect(
    surfel: &PySurfel,
    origin: [f64; 3],
    direction: [f64; 3],
) -> Option<(f64, f64, f64)> {
    let ray = geom::Ray { origin: vec3(origin), dir: vec3(direction).normalize() };
    render::ray_splat_intersect(&surfel.inner, &ray, 1e-3).map(|h| (h.u, h.v, h.depth))
}

/// Nearest-object contact per hand position: (in_contact, distance,
/// nearest_index) lists. Distances are None when no object points exist.
#[pyfunction]
fn instantaneous_contact(
    hand: Vec<[f64; 3]>,
    object: Vec<[f64; 3]>,
    tau: f64,
) -> PyResult<(Vec<bool>, Vec<Option<f64>>, Vec<Option<usize>>)> {
    if tau <= 0.0 {
        return Err(PyValueError::new_err("tau must be positive"));
    }
    let hp: Vec<Vec3> = hand.into_iter().map(vec3).collect();
    let op: Vec<Vec3> = object.into_iter().map(vec3).collect();
    let map = contact::instantaneous_contact_positions(&hp, &op, tau);
    Ok((
        map.entries.iter().map(|e| e.in_contact).collect(),
        map.entries.iter().map(|e| e.distance.is_finite().then_some(e.distance)).collect(),
        map.entries.iter().map(|e| e.nearest).collect(),
    ))
}

/// IoU and F1 between binary label vectors.
#[pyfunction]
fn contact_metrics(pred: Vec<bool>, gt: Vec<bool>) -> PyResult<(f64, f64)> {
    contact::contact_metrics(&pred, &gt).map_err(err)
}

/// Voxelizes tagged positions at tau/sqrt(3): returns (voxel_size,
/// number of contact voxels, indices of points inside contact voxels).
#[pyfunction]
fn label_contact_voxels(
    positions: Vec<[f64; 3]>,
    is_hand: Vec<bool>,
    tau: f64,
) -> PyResult<(f64, usize, Vec<usize>)> {
    if positions.len() != is_hand.len() {
        return Err(PyValueError::new_err("positions and is_hand lengths differ"));
    }
    let pos: Vec<Vec3> = positions.into_iter().map(vec3).collect();
    let tags: Vec<surfelcap::model::SurfelTag> = is_hand
        .iter()
        .map(|&h| {
            if h {
                surfelcap::model::SurfelTag::HandLeft
            } else {
                surfelcap::model::SurfelTag::Object(0)
            }
        })
        .collect();
    let cv = contact::label_contact_voxels(&pos, &tags, tau);
    Ok((cv.grid.voxel_size, cv.contact_cells.len(), cv.surfels_in_contact))
}

/// PSNR between two flat RGB buffers.
#[pyfunction]
fn psnr(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>, width: usize, height: usize) -> PyResult<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(PyValueError::new_err("buffer size mismatch"));
    }
    let ia = io::ImageRgb::from_flat(width, height, a);
    let ib = io::ImageRgb::from_flat(width, height, b);
    Ok(optim::psnr(&ia, &ib))
}

/// SSIM between two flat RGB buffers.
#[pyfunction]
fn ssim(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>, width: usize, height: usize) -> PyResult<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(PyValueError::new_err("buffer size mismatch"));
    }
    let ia = io::ImageRgb::from_flat(width, height, a);
    let ib = io::ImageRgb::from_flat(width, height, b);
    Ok(optim::ssim(&ia, &ib))
}

/// Generates a synthetic bundle on disk; returns the number of
/// ground-truth contact vertices.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn generate_synth(
    out_dir: &str,
    kind: &str,
    frames: usize,
    views: usize,
    width: usize,
    height: usize,
    seed: u64,
    tau: f64,
) -> PyResult<usize> {
    let kind = synth::SceneKind::parse(kind)
        .ok_or_else(|| PyValueError::new_err(format!("unknown scene kind '{kind}'")))?;
    let spec = synth::SynthSpec {
        kind,
        frames,
        views,
        width,
        height,
        seed,
        tau,
        ..Default::default()
    };
    let out = synth::generate(&spec).map_err(err)?;
    io::save_bundle(std::path::Path::new(out_dir), &out.bundle).map_err(err)?;
    let labels = io::LabelsJson {
        schema_version: 1,
        tau,
        hands: out
            .gt_vertex_contact
            .iter()
            .map(|(side, l)| (side.name().to_owned(), l.iter().map(|&b| b as u8).collect()))
            .collect(),
    };
    io::write_json(&std::path::Path::new(out_dir).join("gt_contact.json"), &labels)
        .map_err(err)?;
    Ok(out.gt_vertex_contact[0].1.iter().filter(|&&b| b).count())
}

/// Short fit over a bundle directory; returns the per-iteration total
/// losses. Intended for smoke tests, not production fitting.
#[pyfunction]
fn fit_bundle(
    bundle_dir: &str,
    iterations: usize,
    seed: u64,
    holdout_views: Vec<usize>,
) -> PyResult<Vec<f64>> {
    let bundle = io::load_bundle(std::path::Path::new(bundle_dir)).map_err(err)?;
    let cfg = optim::TrainConfig {
        iterations,
        seed,
        holdout_views,
        densify_start: usize::MAX,
        ..Default::default()
    };
    let (_, logs) = optim::train(&bundle, &cfg, None).map_err(err)?;
    Ok(logs.iter().map(|l| l.total).collect())
}

/// Runs the finite-difference gradient suites; returns (passed,
/// max relative error).
#[pyfunction]
fn gradcheck(seed: u64, scenes: usize) -> PyResult<(bool, f64)> {
    let report = surfelcap::gradcheck::run_all(seed, scenes).map_err(err)?;
    let max = report.suites.iter().map(|s| s.max_rel_err).fold(0.0f64, f64::max);
    Ok((report.all_passed(), max))
}

#[pymodule]
fn surfelcap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PySurfel>()?;
    m.add_class::<PyRenderResult>()?;
    m.add_function(wrap_pyfunction!(posenc, m)?)?;
    m.add_function(wrap_pyfunction!(triangle_frame, m)?)?;
    m.add_function(wrap_pyfunction!(render_surfels, m)?)?;
    m.add_function(wrap_pyfunction!(ray_splat_intersect, m)?)?;
    m.add_function(wrap_pyfunction!(instantaneous_contact, m)?)?;
    m.add_function(wrap_pyfunction!(contact_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(label_contact_voxels, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synth, m)?)?;
    m.add_function(wrap_pyfunction!(fit_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
