//! Python bindings: configuration, scene synthesis, training, inference,
//! metrics and the gradient-check suite.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use decorfuse::config::Config as CoreConfig;
use decorfuse::detect_loss::{Box3D, Detection};
use decorfuse::eval_metrics::{ap_40, rotated_iou_3d};
use decorfuse::harness::{
    class_flipped_twin, generate_scene, infer, load_checkpoint, load_scene, save_checkpoint,
    save_scene, train, SyntheticScene,
};
use decorfuse::model::Model as CoreModel;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn box_from_tuple(t: (f64, f64, f64, f64, f64, f64, f64)) -> Box3D {
    Box3D::new(t.0, t.1, t.2, t.3, t.4, t.5, t.6)
}

fn det_tuple(d: &Detection) -> (usize, f64, f64, f64, f64, f64, f64, f64, f64) {
    (
        d.class_id, d.score, d.bbox.cx, d.bbox.cy, d.bbox.cz, d.bbox.l, d.bbox.w, d.bbox.h,
        d.bbox.yaw,
    )
}

/// Pipeline configuration; mirrors the TOML file format.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: CoreConfig::default(),
        }
    }

    #[staticmethod]
    fn kitti() -> Self {
        Self {
            inner: CoreConfig::kitti(),
        }
    }

    #[staticmethod]
    fn waymo() -> Self {
        Self {
            inner: CoreConfig::waymo(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::from_toml(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> u64 {
        self.inner.hash()
    }

    /// Toggle an ablation flag by name.
    fn set_ablation(&mut self, name: &str, on: bool) -> PyResult<()> {
        let a = &mut self.inner.ablation;
        match name {
            "decoration" => a.decoration = on,
            "e2e" => a.e2e = on,
            "two_sparse_conv" => a.two_sparse_conv = on,
            "heatmap_init" => a.heatmap_init = on,
            "category_embedding" => a.category_embedding = on,
            other => return Err(err(format!("unknown ablation flag {other:?}"))),
        }
        Ok(())
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }

    #[getter]
    fn fade_epochs(&self) -> usize {
        self.inner.fade_epochs
    }

    #[setter]
    fn set_fade_epochs(&mut self, v: usize) {
        self.inner.fade_epochs = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn k_classes(&self) -> usize {
        self.inner.k_classes
    }

    #[getter]
    fn lr_max(&self) -> f64 {
        self.inner.lr_max
    }

    #[setter]
    fn set_lr_max(&mut self, v: f64) {
        self.inner.lr_max = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(grid={:?}, epochs={}, seed={})",
            self.inner.grid, self.inner.epochs, self.inner.seed
        )
    }
}

/// A synthetic scene: lidar points, rendered image, calibration and GT boxes.
#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: SyntheticScene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn generate(seed: u64, cfg: &PyConfig) -> PyResult<Self> {
        Ok(Self {
            inner: generate_scene(seed, &cfg.inner).map_err(err)?,
        })
    }

    /// Same geometry with class labels rotated by one; the image is
    /// re-rendered so only the camera reflects the new labels.
    fn class_flipped_twin(&self, k_classes: usize) -> Self {
        Self {
            inner: class_flipped_twin(&self.inner, k_classes),
        }
    }

    #[getter]
    fn num_points(&self) -> usize {
        self.inner.points.len()
    }

    /// Ground truth as (class_id, cx, cy, cz, l, w, h, yaw) tuples.
    #[getter]
    fn gt(&self) -> Vec<(usize, f64, f64, f64, f64, f64, f64, f64)> {
        self.inner
            .gt
            .iter()
            .map(|(b, c)| (*c, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw))
            .collect()
    }

    /// Points as (x, y, z, r) tuples.
    #[getter]
    fn points(&self) -> Vec<(f64, f64, f64, f64)> {
        self.inner
            .points
            .iter()
            .map(|p| (p.x, p.y, p.z, p.r))
            .collect()
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        save_scene(std::path::Path::new(dir), &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_scene(std::path::Path::new(dir)).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene({} points, {} objects)",
            self.inner.points.len(),
            self.inner.gt.len()
        )
    }
}

/// The full detection model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: CoreModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn seeded(cfg: &PyConfig, seed: u64) -> Self {
        Self {
            inner: CoreModel::seeded(&cfg.inner, seed),
        }
    }

    /// Train on the given scenes; returns (model, log) where log is a list of
    /// (epoch, aug_active, total, heatmap, query_cls, reg) tuples.
    #[staticmethod]
    #[allow(clippy::type_complexity)]
    fn train(
        cfg: &PyConfig,
        scenes: Vec<PyScene>,
    ) -> PyResult<(Self, Vec<(usize, bool, f64, f64, f64, f64)>)> {
        let core_scenes: Vec<SyntheticScene> = scenes.into_iter().map(|s| s.inner).collect();
        let (model, logs) = train(&cfg.inner, &core_scenes).map_err(err)?;
        let log_rows = logs
            .iter()
            .map(|l| {
                (
                    l.epoch,
                    l.aug_active,
                    l.loss.total,
                    l.loss.l_heatmap,
                    l.loss.l_query_cls,
                    l.loss.l_reg,
                )
            })
            .collect();
        Ok((Self { inner: model }, log_rows))
    }

    /// Detections as (class_id, score, cx, cy, cz, l, w, h, yaw) tuples.
    #[allow(clippy::type_complexity)]
    fn infer(
        &self,
        cfg: &PyConfig,
        scene: &PyScene,
    ) -> PyResult<Vec<(usize, f64, f64, f64, f64, f64, f64, f64, f64)>> {
        let dets = infer(&self.inner, &cfg.inner, &scene.inner).map_err(err)?;
        Ok(dets.iter().map(det_tuple).collect())
    }

    fn to_checkpoint<'py>(
        &self,
        py: Python<'py>,
        cfg: &PyConfig,
        epoch: u64,
    ) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &save_checkpoint(&self.inner, &cfg.inner, epoch))
    }

    #[staticmethod]
    fn from_checkpoint(bytes: &[u8], cfg: &PyConfig) -> PyResult<(Self, u64)> {
        let (model, epoch) = load_checkpoint(bytes, &cfg.inner).map_err(err)?;
        Ok((Self { inner: model }, epoch))
    }
}

/// 3D IoU of two rotated boxes given as (cx, cy, cz, l, w, h, yaw).
#[pyfunction(name = "rotated_iou_3d")]
fn py_rotated_iou_3d(
    a: (f64, f64, f64, f64, f64, f64, f64),
    b: (f64, f64, f64, f64, f64, f64, f64),
) -> f64 {
    rotated_iou_3d(&box_from_tuple(a), &box_from_tuple(b))
}

/// AP at 40 recall positions for one class. Detections are
/// (class_id, score, cx, cy, cz, l, w, h, yaw); GT are (class_id, cx, ...).
#[pyfunction(name = "ap_40")]
#[allow(clippy::type_complexity)]
fn py_ap_40(
    dets: Vec<(usize, f64, f64, f64, f64, f64, f64, f64, f64)>,
    gts: Vec<(usize, f64, f64, f64, f64, f64, f64, f64)>,
    iou_threshold: f64,
    class_id: usize,
) -> f64 {
    let dets: Vec<Detection> = dets
        .iter()
        .map(|&(c, s, cx, cy, cz, l, w, h, yaw)| Detection {
            class_id: c,
            score: s,
            bbox: Box3D::new(cx, cy, cz, l, w, h, yaw),
        })
        .collect();
    let gts: Vec<(Box3D, usize)> = gts
        .iter()
        .map(|&(c, cx, cy, cz, l, w, h, yaw)| (Box3D::new(cx, cy, cz, l, w, h, yaw), c))
        .collect();
    ap_40(&dets, &gts, iou_threshold, class_id)
}

/// Run the finite-difference suites; returns (name, max_rel_err, pass) rows.
#[pyfunction(name = "gradcheck")]
fn py_gradcheck(instances: usize, seed: u64) -> Vec<(String, f64, bool)> {
    decorfuse::gradcheck::run_all(instances, seed)
        .into_iter()
        .map(|r| (r.name.to_string(), r.max_rel_err, r.pass))
        .collect()
}

#[pymodule]
fn decorfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(py_rotated_iou_3d, m)?)?;
    m.add_function(wrap_pyfunction!(py_ap_40, m)?)?;
    m.add_function(wrap_pyfunction!(py_gradcheck, m)?)?;
    Ok(())
}
