//! Python bindings: annotations, the single-pair primitives, synthetic scenes
//! and full evaluation. Reports cross the boundary as plain dicts.

use std::path::PathBuf;

use pqsuite::boundary::{self, Mask};
use pqsuite::matching;
use pqsuite::metrics::{self, PqStats};
use pqsuite::panoptic_io::{self, Dataset, IdMap, ImageSetPolicy};
use pqsuite::synth::{self, Perturbation, PerturbationKind, SceneSpec};
use pqsuite::{DenominatorConvention, LabelMap, MetricConfig, MetricReport, PanopticAnnotation};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(pqsuite_py, PqsuiteError, PyException);

fn err(e: pqsuite::Error) -> PyErr {
    PqsuiteError::new_err(e.to_string())
}

/// One image: label map plus segment table.
#[pyclass(name = "Annotation", module = "pqsuite_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyAnnotation {
    inner: PanopticAnnotation,
}

#[pymethods]
impl PyAnnotation {
    /// Builds an annotation from row-major class and instance planes. The
    /// segment table is derived from the pixels; `ignore` lists segment ids
    /// to flag as crowd.
    #[new]
    #[pyo3(signature = (image_id, class_plane, instance_plane, width, height, ignore = Vec::new()))]
    fn new(
        image_id: String,
        class_plane: Vec<u32>,
        instance_plane: Vec<u32>,
        width: usize,
        height: usize,
        ignore: Vec<u32>,
    ) -> PyResult<Self> {
        let map = LabelMap::new(class_plane, instance_plane, width, height).map_err(err)?;
        let mut inner = PanopticAnnotation::from_label_map(image_id, map);
        for id in ignore {
            let seg = inner
                .segments
                .iter_mut()
                .find(|s| s.segment_id == id)
                .ok_or_else(|| PyValueError::new_err(format!("no segment {id} to ignore")))?;
            seg.ignore = true;
        }
        Ok(Self { inner })
    }

    #[getter]
    fn image_id(&self) -> &str {
        &self.inner.image_id
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn class_plane(&self) -> Vec<u32> {
        self.inner.label_map.class_of().to_vec()
    }

    fn instance_plane(&self) -> Vec<u32> {
        self.inner.label_map.instance_of().to_vec()
    }

    /// `[(segment_id, class_id, area, ignore)]` sorted by segment id.
    fn segment_table(&self) -> Vec<(u32, u32, u64, bool)> {
        self.inner
            .segments
            .iter()
            .map(|s| (s.segment_id, s.class_id, s.area, s.ignore))
            .collect()
    }

    /// Structural problems, empty when the annotation is consistent.
    fn validate(&self) -> Vec<String> {
        self.inner
            .validate()
            .iter()
            .map(|v| format!("{v:?}"))
            .collect()
    }

    /// COCO panoptic PNG bytes for this image.
    fn to_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let (png, _) = panoptic_io::save_annotation(&self.inner, "").map_err(err)?;
        Ok(PyBytes::new(py, &png))
    }

    /// RGB visualization as PNG bytes.
    #[pyo3(signature = (seed = 0, contours = false))]
    fn render<'py>(
        &self,
        py: Python<'py>,
        seed: u64,
        contours: bool,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let img = panoptic_io::render_visualization(&self.inner, seed, contours);
        Ok(PyBytes::new(py, &img.to_png().map_err(err)?))
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Annotation(image_id={:?}, {}x{}, {} segments)",
            self.inner.image_id,
            self.inner.width(),
            self.inner.height(),
            self.inner.segments.len()
        )
    }
}

fn convention(name: &str) -> PyResult<DenominatorConvention> {
    match name {
        "kirillov" => Ok(DenominatorConvention::Kirillov),
        "eq1" => Ok(DenominatorConvention::Eq1Literal),
        other => Err(PyValueError::new_err(format!(
            "unknown denominator {other:?}"
        ))),
    }
}

/// Config from keyword overrides on top of the defaults.
fn config_from(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<MetricConfig> {
    let config: MetricConfig = match overrides {
        Some(d) => {
            let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?
        }
        None => MetricConfig::default(),
    };
    config.check().map_err(err)?;
    Ok(config)
}

fn report_dict<'py>(py: Python<'py>, report: &MetricReport) -> PyResult<Bound<'py, PyAny>> {
    let json = report.to_json().map_err(err)?;
    py.import("json")?.call_method1("loads", (json,))
}

/// IoU of two segments given their intersection and areas.
#[pyfunction]
fn iou(intersection: u64, gt_area: u64, pred_area: u64) -> PyResult<f64> {
    matching::iou(intersection, gt_area, pred_area).map_err(err)
}

/// `(PQ, SQ, RQ)` from counts, or None when the cell is undefined.
#[pyfunction]
#[pyo3(signature = (tp, fp, fn_, quality_sum, denominator = "kirillov"))]
fn quality_ratio(
    tp: u64,
    fp: u64,
    fn_: u64,
    quality_sum: f64,
    denominator: &str,
) -> PyResult<Option<(f64, f64, f64)>> {
    let stats = PqStats::new(tp, fp, fn_, quality_sum);
    Ok(metrics::quality_ratio(&stats, convention(denominator)?).map(|q| (q.pq, q.sq, q.rq)))
}

/// Boundary IoU between one gt segment and one pred segment.
#[pyfunction]
#[pyo3(signature = (gt, gt_segment, pred, pred_segment, radius_px = None, d = 0.02))]
fn boundary_iou(
    gt: &PyAnnotation,
    gt_segment: u32,
    pred: &PyAnnotation,
    pred_segment: u32,
    radius_px: Option<u32>,
    d: f64,
) -> PyResult<f64> {
    let (g, p) = (&gt.inner, &pred.inner);
    let r = match radius_px {
        Some(r) => r,
        None => boundary::band_radius(d, g.width(), g.height()).map_err(err)?,
    };
    let gm = Mask::segment(&g.label_map, gt_segment);
    let pm = Mask::segment(&p.label_map, pred_segment);
    boundary::boundary_iou(&gm, &pm, r).map_err(err)
}

/// `(width, height, ids)` from a COCO panoptic PNG.
#[pyfunction]
fn decode_png(bytes: &[u8]) -> PyResult<(usize, usize, Vec<u32>)> {
    let m = panoptic_io::decode_panoptic_png(bytes).map_err(err)?;
    Ok((m.width, m.height, m.ids))
}

#[pyfunction]
fn encode_png<'py>(
    py: Python<'py>,
    width: usize,
    height: usize,
    ids: Vec<u32>,
) -> PyResult<Bound<'py, PyBytes>> {
    let map = IdMap::new(width, height, ids).map_err(err)?;
    let png = panoptic_io::encode_panoptic_png(&map).map_err(err)?;
    Ok(PyBytes::new(py, &png))
}

#[pyfunction]
#[pyo3(signature = (class_id, segment_id, seed = 0))]
fn generate_color(class_id: u32, segment_id: u32, seed: u64) -> (u8, u8, u8) {
    let [r, g, b] = panoptic_io::generate_color(class_id, segment_id, seed);
    (r, g, b)
}

/// Seeded scene of non-overlapping disks.
#[pyfunction]
#[pyo3(signature = (
    seed,
    width = 32,
    height = 32,
    num_classes = 2,
    instances = (1, 3),
    radius = (2.0, 4.0),
    min_gap = 1,
    class_scale = Vec::new(),
))]
#[allow(clippy::too_many_arguments)]
fn generate_scene(
    seed: u64,
    width: usize,
    height: usize,
    num_classes: u32,
    instances: (u32, u32),
    radius: (f64, f64),
    min_gap: u32,
    class_scale: Vec<f64>,
) -> PyResult<PyAnnotation> {
    let spec = SceneSpec {
        seed,
        width,
        height,
        num_classes,
        instances,
        radius,
        min_gap,
        class_scale,
    };
    let inner = synth::generate_scene(&spec).map_err(err)?;
    Ok(PyAnnotation { inner })
}

/// Applies one named perturbation (`erode`, `shift`, `relabel-class`, ...).
#[pyfunction]
#[pyo3(signature = (ann, kind, magnitude, seed = 0))]
fn perturb(ann: &PyAnnotation, kind: &str, magnitude: f64, seed: u64) -> PyResult<PyAnnotation> {
    let kind: PerturbationKind = kind.parse().map_err(err)?;
    let inner =
        synth::perturb(&ann.inner, &Perturbation::new(kind, magnitude, seed)).map_err(err)?;
    Ok(PyAnnotation { inner })
}

/// Scores `(gt, pred)` pairs. Keyword arguments override config fields,
/// e.g. `denominator="eq1"` or `metrics=["pq", "bpq"]`.
#[pyfunction]
#[pyo3(signature = (pairs, jobs = 0, **config))]
fn evaluate<'py>(
    py: Python<'py>,
    pairs: Vec<(PyAnnotation, PyAnnotation)>,
    jobs: usize,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let config = config_from(py, config)?;
    let pairs: Vec<_> = pairs.into_iter().map(|(g, p)| (g.inner, p.inner)).collect();
    let report = py
        .detach(|| metrics::evaluate_pairs(&pairs, &config, jobs, Vec::new()))
        .map_err(err)?;
    report_dict(py, &report)
}

/// Scores two COCO panoptic datasets given their manifest paths.
#[pyfunction]
#[pyo3(signature = (gt, pred, gt_dir = None, pred_dir = None, jobs = 0, strict = false, **config))]
#[allow(clippy::too_many_arguments)]
fn evaluate_dataset<'py>(
    py: Python<'py>,
    gt: PathBuf,
    pred: PathBuf,
    gt_dir: Option<PathBuf>,
    pred_dir: Option<PathBuf>,
    jobs: usize,
    strict: bool,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let config = config_from(py, config)?;
    let policy = if strict {
        ImageSetPolicy::Strict
    } else {
        ImageSetPolicy::Lenient
    };
    let report = py
        .detach(|| {
            let gt = Dataset::open(&gt, gt_dir.as_deref())?;
            let pred = Dataset::open(&pred, pred_dir.as_deref())?;
            panoptic_io::evaluate_dataset(&gt, &pred, &config, jobs, policy)
        })
        .map_err(err)?;
    report_dict(py, &report)
}

/// Every annotation of a dataset in manifest order.
#[pyfunction]
#[pyo3(signature = (manifest, png_dir = None))]
fn load_dataset(manifest: PathBuf, png_dir: Option<PathBuf>) -> PyResult<Vec<PyAnnotation>> {
    let ds = Dataset::open(&manifest, png_dir.as_deref()).map_err(err)?;
    ds.manifest
        .image_ids()
        .iter()
        .map(|id| ds.load(id).map(|inner| PyAnnotation { inner }).map_err(err))
        .collect()
}

#[pymodule]
fn pqsuite_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PqsuiteError", m.py().get_type::<PqsuiteError>())?;
    m.add_class::<PyAnnotation>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(quality_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_iou, m)?)?;
    m.add_function(wrap_pyfunction!(decode_png, m)?)?;
    m.add_function(wrap_pyfunction!(encode_png, m)?)?;
    m.add_function(wrap_pyfunction!(generate_color, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    Ok(())
}
