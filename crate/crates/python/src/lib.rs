//! Python bindings: `import hicpy`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hic::io::{self, Checkpoint};
use hic::motion::{
    derive_task_with_ratio, pad_virtual_joints, reorganize_mesh_params, unify_pose2d, unify_pose3d, Domain,
    Modality, MotionSequence, TaskSample, DEFAULT_MASK_RATIO,
};
use hic::numeric::NdBuffer;
use hic::prompting::{
    cluster_sample, coverage, random_sample, retrieve_prompt, similarity as seq_similarity, sps_sample,
    AnchorSet, SamplingMethod,
};
use hic::synth::{synthesize, Dataset, SynthConfig};
use hic::training::{eval_mask_seed, evaluate, task_corpus, TrainConfig, Trainer};
use hic::xfusion::{XFusionConfig, XFusionNet, XFusionParams};

create_exception!(hicpy, HicError, PyException);

fn err(e: hic::HicError) -> PyErr {
    HicError::new_err(e.to_string())
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for hic::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn domains(list: &str) -> PyResult<Vec<Domain>> {
    if list.eq_ignore_ascii_case("all") {
        Ok(Domain::ALL.to_vec())
    } else {
        Domain::parse_list(list).py_err()
    }
}

fn domain(code: &str) -> PyResult<Domain> {
    code.parse().py_err()
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Pose2D => "pose2d",
        Modality::Pose3D => "pose3d",
        Modality::MeshParams => "mesh",
    }
}

/// A unified `[F, J, 3]` motion sequence.
#[pyclass(name = "Motion", frozen, from_py_object)]
#[derive(Clone)]
struct PyMotion {
    inner: MotionSequence,
}

#[pymethods]
impl PyMotion {
    /// 2D keypoints given as a flat row-major `[frames, joints, 2]` list.
    #[staticmethod]
    fn pose2d(values: Vec<f64>, frames: usize, joints: usize) -> PyResult<Self> {
        let b = NdBuffer::new(vec![frames, joints, 2], values).py_err()?;
        Ok(PyMotion {
            inner: unify_pose2d(&b).py_err()?,
        })
    }

    /// 3D joint positions given as a flat row-major `[frames, joints, 3]` list.
    #[staticmethod]
    fn pose3d(values: Vec<f64>, frames: usize, joints: usize) -> PyResult<Self> {
        let b = NdBuffer::new(vec![frames, joints, 3], values).py_err()?;
        Ok(PyMotion {
            inner: unify_pose3d(&b).py_err()?,
        })
    }

    /// Per-frame axis-angle rotations `[frames, 3 * joints]` and shape β.
    #[staticmethod]
    fn mesh(theta: Vec<f64>, frames: usize, joints: usize, beta: Vec<f64>) -> PyResult<Self> {
        let b = NdBuffer::new(vec![frames, 3 * joints], theta).py_err()?;
        Ok(PyMotion {
            inner: reorganize_mesh_params(&b, &beta).py_err()?,
        })
    }

    fn padded(&self, joints: usize) -> PyResult<Self> {
        Ok(PyMotion {
            inner: pad_virtual_joints(&self.inner, joints).py_err()?,
        })
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    #[getter]
    fn joints(&self) -> usize {
        self.inner.joints()
    }

    #[getter]
    fn native_joints(&self) -> usize {
        self.inner.native_joints()
    }

    #[getter]
    fn modality(&self) -> &'static str {
        modality_name(self.inner.modality())
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.values().shape().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().data().to_vec()
    }

    #[getter]
    fn shape_params(&self) -> Vec<f64> {
        self.inner.shape_params().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Motion({}, frames={}, joints={}, native_joints={})",
            self.modality(),
            self.frames(),
            self.joints(),
            self.native_joints()
        )
    }
}

/// Negative mean per-joint distance between two sequences of equal shape.
#[pyfunction]
fn similarity(a: &PyMotion, b: &PyMotion) -> PyResult<f64> {
    seq_similarity(&a.inner, &b.inner).py_err()
}

/// One derived (input, target) pair.
#[pyclass(name = "Task", frozen)]
struct PyTask {
    inner: TaskSample,
}

#[pymethods]
impl PyTask {
    #[getter]
    fn domain(&self) -> &'static str {
        self.inner.domain.code()
    }

    #[getter]
    fn input(&self) -> PyMotion {
        PyMotion {
            inner: self.inner.query_input.clone(),
        }
    }

    #[getter]
    fn target(&self) -> PyMotion {
        PyMotion {
            inner: self.inner.query_target.clone(),
        }
    }

    #[getter]
    fn time_mask(&self) -> Option<Vec<u8>> {
        self.inner.time_mask.clone()
    }

    #[getter]
    fn joint_mask(&self) -> Option<Vec<u8>> {
        self.inner.joint_mask.clone()
    }
}

/// Multi-modal clips of 2F frames.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (clips=64, frames=16, joints=24, families=4, seed=0))]
    fn synthesize(clips: usize, frames: usize, joints: usize, families: usize, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig {
            clips,
            frames,
            joints,
            families,
            seed,
        };
        Ok(PyDataset {
            inner: synthesize(&cfg).py_err()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: io::read_dataset(&path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_dataset(&path, &self.inner).py_err()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Window length F.
    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames
    }

    #[getter]
    fn joints(&self) -> usize {
        self.inner.joints
    }

    /// Derives the task of `domain` from a clip; without a seed the
    /// evaluation mask of that clip is used.
    #[pyo3(signature = (clip, domain, seed=None, mask_ratio=DEFAULT_MASK_RATIO))]
    fn derive(&self, clip: usize, domain: &str, seed: Option<u64>, mask_ratio: f64) -> PyResult<PyTask> {
        let d = self::domain(domain)?;
        let c = self
            .inner
            .clips
            .get(clip)
            .ok_or_else(|| HicError::new_err(format!("clip {clip} out of range for {} clips", self.inner.len())))?;
        let seed = seed.unwrap_or_else(|| eval_mask_seed(clip, d));
        Ok(PyTask {
            inner: derive_task_with_ratio(c, d, seed, mask_ratio).py_err()?,
        })
    }
}

/// Prompt anchors with their soft refinements.
#[pyclass(name = "Anchors")]
struct PyAnchors {
    inner: AnchorSet,
}

#[pymethods]
impl PyAnchors {
    #[staticmethod]
    #[pyo3(signature = (dataset, k=16, method="sps", domains="all", hidden=128, seed=0, mask_ratio=DEFAULT_MASK_RATIO))]
    fn sample(
        dataset: &PyDataset,
        k: usize,
        method: &str,
        domains: &str,
        hidden: usize,
        seed: u64,
        mask_ratio: f64,
    ) -> PyResult<Self> {
        let corpus = task_corpus(&dataset.inner, &self::domains(domains)?, mask_ratio).py_err()?;
        let inner = match method.parse::<SamplingMethod>().py_err()? {
            SamplingMethod::Sps => sps_sample(&corpus, k, hidden),
            SamplingMethod::Random => random_sample(&corpus, k, seed, hidden),
            SamplingMethod::Cluster => cluster_sample(&corpus, k, seed, hidden),
        }
        .py_err()?;
        Ok(PyAnchors { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyAnchors {
            inner: io::read_anchors(&path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_anchors(&path, &self.inner).py_err()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Corpus position of each anchor; `None` for the rest pose.
    fn source_indices(&self) -> Vec<Option<usize>> {
        self.inner.source_indices()
    }

    /// `(index, similarity)` of the most similar anchor.
    #[pyo3(signature = (query, domain=None))]
    fn retrieve(&self, query: &PyMotion, domain: Option<&str>) -> PyResult<(usize, f64)> {
        let d = domain.map(self::domain).transpose()?;
        let r = retrieve_prompt(&query.inner, &self.inner, d).py_err()?;
        Ok((r.index, r.similarity))
    }

    /// Worst-case best similarity over `queries`.
    fn coverage(&self, queries: Vec<PyMotion>) -> PyResult<f64> {
        let q: Vec<MotionSequence> = queries.into_iter().map(|m| m.inner).collect();
        coverage(&q, &self.inner).py_err()
    }

    fn anchor(&self, index: usize) -> PyResult<(PyMotion, PyMotion)> {
        let a = self
            .inner
            .anchors
            .get(index)
            .ok_or_else(|| HicError::new_err(format!("anchor {index} out of range")))?;
        Ok((
            PyMotion {
                inner: a.input.clone(),
            },
            PyMotion {
                inner: a.target.clone(),
            },
        ))
    }
}

/// The X-Fusion network.
#[pyclass(name = "Model")]
struct PyModel {
    inner: XFusionNet,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (frames, joints, hidden=128, layers=8, seed=0))]
    fn new(frames: usize, joints: usize, hidden: usize, layers: usize, seed: u64) -> PyResult<Self> {
        let config = XFusionConfig {
            frames,
            joints,
            hidden,
            layers,
            skeleton_joints: joints.min(XFusionConfig::default().skeleton_joints),
            ..XFusionConfig::default()
        };
        let params = XFusionParams::init(config, seed).py_err()?;
        Ok(PyModel {
            inner: XFusionNet::new(params),
        })
    }

    /// Restores parameters and writes the stored soft refinements into `anchors`.
    #[staticmethod]
    fn load(path: PathBuf, anchors: &mut PyAnchors) -> PyResult<Self> {
        let ck = io::read_checkpoint(&path).py_err()?;
        if ck.soft.len() != anchors.inner.len() {
            return Err(HicError::new_err(format!(
                "checkpoint has {} soft anchors, anchor set has {}",
                ck.soft.len(),
                anchors.inner.len()
            )));
        }
        anchors.inner.soft = ck.soft;
        Ok(PyModel {
            inner: XFusionNet::new(ck.params),
        })
    }

    #[pyo3(signature = (path, anchors, step=0))]
    fn save(&self, path: PathBuf, anchors: &PyAnchors, step: usize) -> PyResult<()> {
        let ck = Checkpoint {
            params: self.inner.params.clone(),
            soft: anchors.inner.soft.clone(),
            step,
        };
        io::write_checkpoint(&path, &ck).py_err()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params.parameter_count()
    }

    /// Retrieves a prompt for `query` and predicts its target. Returns a dict
    /// with `values`, `shape`, `shape_params` and the retrieved `anchor`.
    #[pyo3(signature = (query, anchors, domain=None))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        query: &PyMotion,
        anchors: &PyAnchors,
        domain: Option<&str>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let d = domain.map(self::domain).transpose()?;
        let r = retrieve_prompt(&query.inner, &anchors.inner, d).py_err()?;
        let a = &anchors.inner.anchors[r.index];
        let p = self
            .inner
            .predict(
                query.inner.values(),
                a.input.values(),
                a.target.values(),
                &anchors.inner.soft[r.index].value(),
            )
            .py_err()?;
        let out = PyDict::new(py);
        out.set_item("shape", p.motion.shape().to_vec())?;
        out.set_item("values", p.motion.into_data())?;
        out.set_item("shape_params", p.shape_params)?;
        out.set_item("anchor", r.index)?;
        Ok(out)
    }

    /// Trains in place, updating the soft refinements of `anchors`; returns
    /// the per-step losses.
    #[pyo3(signature = (dataset, anchors, steps=500, learning_rate=2e-4, batch_size=4, domains="all", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        dataset: &PyDataset,
        anchors: &mut PyAnchors,
        steps: usize,
        learning_rate: f64,
        batch_size: usize,
        domains: &str,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let config = TrainConfig {
            steps,
            learning_rate,
            batch_size,
            seed,
            domains: self::domains(domains)?,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(
            XFusionNet::new(self.inner.params.clone()),
            anchors.inner.clone(),
            config,
        )
        .py_err()?;
        let ds = &dataset.inner;
        let records = py.detach(|| trainer.train(ds, None)).py_err()?;
        self.inner = trainer.net;
        anchors.inner = trainer.anchors;
        Ok(records.into_iter().map(|r| r.loss).collect())
    }

    /// Per-domain error rows as dicts with `domain`, `metric`, `value`, `samples`.
    #[pyo3(signature = (dataset, anchors, domains="all", domain_filter=false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        anchors: &PyAnchors,
        domains: &str,
        domain_filter: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let ds = self::domains(domains)?;
        let rows = evaluate(&dataset.inner, &anchors.inner, &self.inner, &ds, domain_filter).py_err()?;
        rows.into_iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("domain", r.domain)?;
                d.set_item("metric", r.metric)?;
                d.set_item("value", r.value)?;
                d.set_item("samples", r.samples)?;
                Ok(d)
            })
            .collect()
    }
}

/// Codes of the supported task domains.
#[pyfunction]
fn domain_codes() -> Vec<&'static str> {
    Domain::ALL.iter().map(|d| d.code()).collect()
}

#[pymodule]
fn hicpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HicError", m.py().get_type::<HicError>())?;
    m.add_class::<PyMotion>()?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyAnchors>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(domain_codes, m)?)?;
    Ok(())
}
