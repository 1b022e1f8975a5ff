//! Python module `fdmn`: networks, the Cross fluid, teacher data, training and the online solver.
//!
//! Tensors cross the boundary as nested lists: 6×6 Mandel matrices, and strain rates or stresses
//! as Mandel 6-vectors (traceless).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fdmn::io::{self, Checkpoint, Stamp};
use fdmn::layered::{Certificate, Strictness};
use fdmn::mandel::{DevTensor, KinematicClass, Mat6, MaterialTensor, SymTensor, Vec6};
use fdmn::materials::{load_battery, sobol_specs, CrossFluid, OrientationState};
use fdmn::network::{clm_certificates, linear_forward, NetworkParameters, Topology};
use fdmn::online::{assemble_operator, evaluate_battery, solve, SolverOptions};
use fdmn::oracle::{teacher_reference, TeacherSpec};
use fdmn::training::{train as fit, TrainConfig};
use fdmn::FdmnError;

fn err(e: FdmnError) -> PyErr {
    match e {
        FdmnError::Parse { .. }
        | FdmnError::InvalidTensor(_)
        | FdmnError::InvalidSpec(_)
        | FdmnError::SingularOnSubspace { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(m: &Mat6) -> Vec<Vec<f64>> {
    (0..6).map(|i| (0..6).map(|j| m[(i, j)]).collect()).collect()
}

fn dev(v: Vec<f64>) -> PyResult<DevTensor> {
    if v.len() != 6 {
        return Err(PyValueError::new_err("expected a Mandel 6-vector"));
    }
    DevTensor::new(SymTensor(Vec6::from_vec(v))).map_err(err)
}

#[pyclass(name = "CrossFluid", module = "fdmn", from_py_object)]
#[derive(Clone)]
struct PyCrossFluid(CrossFluid);

#[pymethods]
impl PyCrossFluid {
    #[new]
    fn new(eta0: f64, eta_inf: f64, k: f64, m: f64) -> PyResult<Self> {
        CrossFluid::new(eta0, eta_inf, k, m).map(PyCrossFluid).map_err(err)
    }

    /// Table parameters of the polyamide 6 matrix.
    #[staticmethod]
    fn polyamide6() -> Self {
        PyCrossFluid(CrossFluid::polyamide6())
    }

    fn viscosity(&self, rate: f64) -> f64 {
        self.0.viscosity(rate)
    }

    fn __repr__(&self) -> String {
        let f = &self.0;
        format!("CrossFluid(eta0={}, eta_inf={}, k={}, m={})", f.eta0, f.eta_inf, f.k, f.m)
    }
}

#[pyclass(name = "Network", module = "fdmn", from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    topology: Topology,
    params: NetworkParameters,
}

#[pymethods]
impl PyNetwork {
    /// Random network of the given depth.
    #[new]
    #[pyo3(signature = (depth, seed = 0))]
    fn new(depth: usize, seed: u64) -> PyResult<Self> {
        let topology = Topology::new(depth, 3).map_err(err)?;
        let params = NetworkParameters::random(&topology, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(PyNetwork { topology, params })
    }

    #[staticmethod]
    fn from_checkpoint(text: &str) -> PyResult<Self> {
        let c = Checkpoint::parse(text).map_err(err)?;
        Ok(PyNetwork { topology: c.topology, params: c.params })
    }

    #[pyo3(signature = (seed = 0))]
    fn to_checkpoint(&self, seed: u64) -> PyResult<String> {
        let stamp = Stamp::new(seed, "python");
        Ok(Checkpoint::new(self.topology.clone(), self.params.clone(), stamp).map_err(err)?.to_text())
    }

    #[getter]
    fn depth(&self) -> usize {
        self.topology.depth()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.params.normalized_weights()
    }

    #[getter]
    fn angles(&self) -> Vec<f64> {
        self.params.angles.clone()
    }

    /// Effective viscosity for an isotropic Newtonian matrix with rigid fibers.
    fn effective_viscosity(&self, eta: f64) -> PyResult<Vec<Vec<f64>>> {
        let m = MaterialTensor::isotropic_viscosity(eta);
        let rigid = MaterialTensor::rigid(KinematicClass::Incompressible);
        let out = linear_forward(&self.topology, &self.params, &m, &rigid, Strictness::Permissive).map_err(err)?;
        Ok(rows(out.matrix()))
    }

    /// "pass" or the failure reason for every CLM block.
    fn certificates(&self) -> PyResult<Vec<String>> {
        Ok(clm_certificates(&self.topology, &self.params)
            .map_err(err)?
            .into_iter()
            .map(|c| match c {
                Certificate::Pass => "pass".to_string(),
                Certificate::Fail(f) => f.to_string(),
            })
            .collect())
    }

    /// Homogenized stress for a macroscopic strain rate in a Cross matrix.
    /// Returns (stress, Newton iterations).
    fn solve(&self, py: Python<'_>, strain_rate: Vec<f64>, fluid: PyCrossFluid) -> PyResult<(Vec<f64>, usize)> {
        let d = dev(strain_rate)?;
        let s = py
            .detach(|| solve(&self.topology, &self.params, &fluid.0, &d, &SolverOptions::default()))
            .map_err(err)?;
        Ok((s.stress.mandel().iter().copied().collect(), s.state.iterations))
    }

    /// (max, mean) relative stress error over the 78-case battery against a teacher.
    fn battery_error(&self, py: Python<'_>, teacher: &PyTeacher, fluid: PyCrossFluid) -> PyResult<(f64, f64)> {
        py.detach(|| {
            let cases = load_battery();
            let reference = teacher_reference(&teacher.0, &fluid.0, &cases)?;
            let op = assemble_operator(&self.topology, &self.params)?;
            let t = evaluate_battery(&op, &fluid.0, &cases, &reference, &SolverOptions::default())?;
            Ok((t.max, t.mean))
        })
        .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Network(depth={}, clms={})", self.topology.depth(), self.topology.n_clms())
    }
}

#[pyclass(name = "Teacher", module = "fdmn", from_py_object)]
#[derive(Clone)]
struct PyTeacher(TeacherSpec);

#[pymethods]
impl PyTeacher {
    #[new]
    fn new(seed: u64, depth: usize) -> PyResult<Self> {
        TeacherSpec::new(seed, depth).map(PyTeacher).map_err(err)
    }

    /// Linear teacher samples on Sobol points, in the dataset text format.
    #[pyo3(signature = (count, seed = 7))]
    fn dataset(&self, count: usize, seed: u64) -> PyResult<String> {
        let specs = sobol_specs(count, seed).map_err(err)?;
        let records = self.0.dataset(&specs, OrientationState::isotropic()).map_err(err)?;
        Ok(io::write_dataset(&records, &Stamp::new(seed, &format!("teacher {} {}", self.0.seed, self.0.depth()))))
    }

    fn network(&self) -> PyNetwork {
        PyNetwork { topology: self.0.topology.clone(), params: self.0.params.clone() }
    }
}

/// Trains a network on a dataset. Returns (network, train error, validation error).
#[pyfunction]
#[pyo3(signature = (dataset, depth, epochs = 2000, restarts = 20, seed = 0))]
fn train(py: Python<'_>, dataset: &str, depth: usize, epochs: usize, restarts: usize, seed: u64) -> PyResult<(PyNetwork, f64, f64)> {
    let (_, records) = io::read_dataset(dataset).map_err(err)?;
    let topology = Topology::new(depth, 3).map_err(err)?;
    let cfg = TrainConfig { epochs, restarts, seed, ..TrainConfig::default() };
    let report = py.detach(|| fit(&topology, &records, &cfg)).map_err(err)?;
    let (t, v) = report.best().final_errors().unwrap_or((f64::NAN, f64::NAN));
    Ok((PyNetwork { topology, params: report.best_params }, t, v))
}

#[pymodule]
#[pyo3(name = "fdmn")]
fn fdmn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCrossFluid>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyTeacher>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
