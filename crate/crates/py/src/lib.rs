//! Python bindings: payloads, aggregation, the link catalog, the transfer
//! oracle and the p2p / e2e benchmark runners.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use silocomm::harness::{self, BenchSetup, RoundConfig};
use silocomm::message::{self, PayloadTier};
use silocomm::netem::{self, ProfileCatalog};
use silocomm::transport::{BackendSpec, PRESET_NAMES};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tier(name: &str) -> PyResult<PayloadTier> {
    name.parse().map_err(value_err)
}

fn to_py_json<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

/// Flat float32 model parameters.
#[pyclass(frozen, from_py_object, name = "Payload")]
#[derive(Clone)]
struct PyPayload(message::Payload);

#[pymethods]
impl PyPayload {
    #[new]
    fn new(params: Vec<f32>) -> Self {
        Self(message::Payload::new(params))
    }

    /// Deterministic synthetic payload.
    #[staticmethod]
    #[pyo3(signature = (param_count, seed=0))]
    fn synthetic(param_count: u64, seed: u64) -> Self {
        Self(message::make_payload(param_count, seed))
    }

    /// Synthetic payload of a named tier, shrunk by `scale`.
    #[staticmethod]
    #[pyo3(signature = (tier_name, scale=1.0, seed=0))]
    fn for_tier(tier_name: &str, scale: f64, seed: u64) -> PyResult<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(value_err(format!("scale must be in (0, 1], got {scale}")));
        }
        Ok(Self(message::make_scaled_tier_payload(tier(tier_name)?, scale, seed)))
    }

    #[staticmethod]
    fn deserialize(data: &[u8]) -> PyResult<Self> {
        message::deserialize(data).map(Self).map_err(value_err)
    }

    fn serialize<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &message::serialize(&self.0))
    }

    fn params(&self) -> Vec<f32> {
        self.0.params().to_vec()
    }

    /// Content digest, hex encoded.
    fn digest(&self) -> String {
        self.0.version().to_hex()
    }

    fn serialized_len(&self) -> u64 {
        self.0.serialized_len()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Payload(len={}, digest={})", self.0.len(), &self.digest()[..12])
    }
}

/// Element-wise mean of equally long payloads.
#[pyfunction]
fn fedavg(updates: Vec<PyPayload>) -> PyResult<PyPayload> {
    let updates: Vec<message::Payload> = updates.into_iter().map(|p| p.0).collect();
    harness::fedavg(&updates).map(PyPayload).map_err(value_err)
}

/// Parameter count of a named tier.
#[pyfunction]
fn tier_param_count(tier_name: &str) -> PyResult<u64> {
    Ok(tier(tier_name)?.param_count())
}

/// The link catalog as `(name, latency_ms, single_mbps, aggregate_mbps)`.
#[pyfunction]
fn profiles() -> Vec<(String, f64, f64, f64)> {
    ProfileCatalog::builtin()
        .iter()
        .map(|p| {
            (
                p.name().to_owned(),
                p.latency_ms(),
                p.single_conn_mbps(),
                p.aggregate_mbps(),
            )
        })
        .collect()
}

#[pyfunction]
fn backend_presets() -> Vec<&'static str> {
    PRESET_NAMES.to_vec()
}

/// Whether `backend` sends a payload of `size_bytes` through the store.
#[pyfunction]
fn routes_to_store(backend: &str, size_bytes: u64) -> PyResult<bool> {
    Ok(BackendSpec::preset(backend)
        .map_err(value_err)?
        .routes_to_store(size_bytes))
}

/// Closed-form transfer time in seconds.
#[pyfunction]
#[pyo3(signature = (size_bytes, profile, n_conns=1))]
fn model_transfer_time(size_bytes: u64, profile: &str, n_conns: u32) -> PyResult<f64> {
    let p = netem::lookup(profile).map_err(value_err)?;
    Ok(netem::model_transfer_time(size_bytes, &p, n_conns).as_secs_f64())
}

/// Point-to-point benchmark; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (backend, tier_name, profile, reps=5, scale=harness::DEFAULT_SCALE, seed=0))]
fn run_p2p<'py>(
    py: Python<'py>,
    backend: &str,
    tier_name: &str,
    profile: &str,
    reps: u32,
    scale: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let setup = BenchSetup::new(
        BackendSpec::preset(backend).map_err(value_err)?,
        tier(tier_name)?,
        netem::lookup(profile).map_err(value_err)?,
    )
    .with_scale(scale)
    .with_seed(seed);
    let report = py
        .detach(|| harness::run_p2p(&setup, reps))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py_json(py, &report)
}

/// Federated rounds with every client on `profile`; returns the report as
/// a dict.
#[pyfunction]
#[pyo3(signature = (backend, tier_name, profile, clients=7, rounds=1, scale=harness::DEFAULT_SCALE, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_e2e<'py>(
    py: Python<'py>,
    backend: &str,
    tier_name: &str,
    profile: &str,
    clients: usize,
    rounds: u32,
    scale: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let base = RoundConfig::uniform(
        BackendSpec::preset(backend).map_err(value_err)?,
        tier(tier_name)?,
        netem::lookup(profile).map_err(value_err)?,
        clients,
    );
    let cfg = RoundConfig {
        n_rounds: rounds,
        scale,
        seed,
        train: harness::TrainDelayModel::zero(seed),
        ..base
    };
    let report = py
        .detach(|| harness::run_e2e(&cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py_json(py, &report)
}

#[pymodule]
fn silocomm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPayload>()?;
    m.add_function(wrap_pyfunction!(fedavg, m)?)?;
    m.add_function(wrap_pyfunction!(tier_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(profiles, m)?)?;
    m.add_function(wrap_pyfunction!(backend_presets, m)?)?;
    m.add_function(wrap_pyfunction!(routes_to_store, m)?)?;
    m.add_function(wrap_pyfunction!(model_transfer_time, m)?)?;
    m.add_function(wrap_pyfunction!(run_p2p, m)?)?;
    m.add_function(wrap_pyfunction!(run_e2e, m)?)?;
    Ok(())
}
