//! Python bindings: the store, world manager, communicator, work handles
//! and buffers. Every blocking call releases the GIL.

use std::time::Duration;

use multiworld::{
    Buffer, Communicator, Config, DType, ErrorKind, MwError, PollerMode, ReduceOp, StoreServer,
    WorkHandle, WorkResult, WorkStatus, WorldDescriptor, WorldManager,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyList};

create_exception!(
    multiworld,
    MultiworldError,
    PyException,
    "Base class of every library error."
);
create_exception!(
    multiworld,
    BrokenWorldError,
    MultiworldError,
    "The world was declared broken."
);
create_exception!(
    multiworld,
    RemoteWorkerError,
    MultiworldError,
    "A peer disappeared mid-operation."
);
create_exception!(
    multiworld,
    OperationTimeoutError,
    MultiworldError,
    "A deadline passed."
);

fn err(e: MwError) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::BrokenWorld => BrokenWorldError::new_err(msg),
        ErrorKind::RemoteWorker => RemoteWorkerError::new_err(msg),
        ErrorKind::Timeout => OperationTimeoutError::new_err(msg),
        _ => MultiworldError::new_err(msg),
    }
}

fn dtype(name: &str) -> PyResult<DType> {
    DType::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown dtype {name:?}")))
}

fn reduce_op(name: &str) -> PyResult<ReduceOp> {
    ReduceOp::parse(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown reduce op {name:?}")))
}

fn secs(t: Option<f64>) -> PyResult<Option<Duration>> {
    t.map(|s| Duration::try_from_secs_f64(s).map_err(|e| PyValueError::new_err(e.to_string())))
        .transpose()
}

/// A typed, immutable array of elements.
#[pyclass(name = "Buffer", module = "multiworld", frozen, from_py_object)]
#[derive(Clone)]
struct PyBuffer(Buffer);

#[pymethods]
impl PyBuffer {
    #[new]
    #[pyo3(signature = (values, dtype = "f32"))]
    fn new(values: &Bound<'_, PyAny>, dtype: &str) -> PyResult<Self> {
        let b = match self::dtype(dtype)? {
            DType::F32 => Buffer::from_slice(&values.extract::<Vec<f32>>()?),
            DType::F64 => Buffer::from_slice(&values.extract::<Vec<f64>>()?),
            DType::I32 => Buffer::from_slice(&values.extract::<Vec<i32>>()?),
            DType::I64 => Buffer::from_slice(&values.extract::<Vec<i64>>()?),
            DType::U8 => Buffer::from_slice(&values.extract::<Vec<u8>>()?),
        };
        Ok(PyBuffer(b))
    }

    #[staticmethod]
    fn zeros(dtype: &str, len: usize) -> PyResult<Self> {
        Ok(PyBuffer(Buffer::zeros(self::dtype(dtype)?, len)))
    }

    /// Little-endian element bytes.
    #[staticmethod]
    fn from_bytes(data: Vec<u8>, dtype: &str) -> PyResult<Self> {
        Buffer::from_bytes(self::dtype(dtype)?, data)
            .map(PyBuffer)
            .map_err(err)
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        self.0.dtype().name()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.as_bytes())
    }

    fn tolist(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let b = &self.0;
        let list = match b.dtype() {
            DType::F32 => b.to_vec::<f32>().map_err(err)?.into_pyobject(py)?,
            DType::F64 => b.to_vec::<f64>().map_err(err)?.into_pyobject(py)?,
            DType::I32 => b.to_vec::<i32>().map_err(err)?.into_pyobject(py)?,
            DType::I64 => b.to_vec::<i64>().map_err(err)?.into_pyobject(py)?,
            DType::U8 => PyList::new(py, b.as_bytes())?.into_any(),
        };
        Ok(list.unbind())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0.dtype() == other.0.dtype() && self.0.as_bytes() == other.0.as_bytes()
    }

    fn __repr__(&self) -> String {
        format!("Buffer(dtype={}, len={})", self.0.dtype(), self.0.len())
    }
}

fn result(py: Python<'_>, r: WorkResult) -> PyResult<Py<PyAny>> {
    Ok(match r {
        WorkResult::Unit => py.None(),
        WorkResult::Buffer(b) => PyBuffer(b).into_pyobject(py)?.into_any().unbind(),
        WorkResult::Buffers(bs) => bs
            .into_iter()
            .map(PyBuffer)
            .collect::<Vec<_>>()
            .into_pyobject(py)?
            .into_any()
            .unbind(),
    })
}

/// An in-flight operation.
#[pyclass(name = "WorkHandle", module = "multiworld", frozen)]
struct PyWorkHandle(WorkHandle);

#[pymethods]
impl PyWorkHandle {
    /// "pending", "done" or "failed".
    fn poll(&self) -> &'static str {
        match self.0.poll() {
            WorkStatus::Pending => "pending",
            WorkStatus::Done => "done",
            WorkStatus::Failed(_) => "failed",
        }
    }

    #[getter]
    fn done(&self) -> bool {
        self.0.is_done()
    }

    #[getter]
    fn world(&self) -> &str {
        self.0.world()
    }

    /// Blocks until the operation ends and returns its output: a Buffer,
    /// a list of Buffers, or None.
    #[pyo3(signature = (timeout = None))]
    fn wait(&self, py: Python<'_>, timeout: Option<f64>) -> PyResult<Py<PyAny>> {
        let t = secs(timeout)?;
        let h = self.0.clone();
        let r = py.detach(move || h.wait(t)).map_err(err)?;
        result(py, r)
    }

    fn __repr__(&self) -> String {
        format!(
            "WorkHandle(id={}, world={:?}, status={})",
            self.0.id(),
            self.0.world(),
            self.poll()
        )
    }
}

/// Submits operations on any Ready world of its manager.
#[pyclass(name = "Communicator", module = "multiworld", frozen)]
struct PyCommunicator(Communicator);

fn parts(ps: Option<Vec<PyBuffer>>) -> Vec<Buffer> {
    ps.unwrap_or_default().into_iter().map(|p| p.0).collect()
}

#[pymethods]
impl PyCommunicator {
    fn isend(&self, world: &str, dst: u32, buf: PyBuffer) -> PyResult<PyWorkHandle> {
        self.0
            .isend(world, dst, buf.0)
            .map(PyWorkHandle)
            .map_err(err)
    }

    fn irecv(&self, world: &str, src: u32, dtype: &str, len: usize) -> PyResult<PyWorkHandle> {
        self.0
            .irecv(world, src, self::dtype(dtype)?, len)
            .map(PyWorkHandle)
            .map_err(err)
    }

    fn ibroadcast(&self, world: &str, buf: PyBuffer, root: u32) -> PyResult<PyWorkHandle> {
        self.0
            .ibroadcast(world, root, buf.0)
            .map(PyWorkHandle)
            .map_err(err)
    }

    #[pyo3(signature = (world, buf, op = "sum"))]
    fn iall_reduce(&self, world: &str, buf: PyBuffer, op: &str) -> PyResult<PyWorkHandle> {
        self.0
            .iall_reduce(world, buf.0, reduce_op(op)?)
            .map(PyWorkHandle)
            .map_err(err)
    }

    #[pyo3(signature = (world, buf, root, op = "sum"))]
    fn ireduce(&self, world: &str, buf: PyBuffer, root: u32, op: &str) -> PyResult<PyWorkHandle> {
        self.0
            .ireduce(world, root, buf.0, reduce_op(op)?)
            .map(PyWorkHandle)
            .map_err(err)
    }

    fn iall_gather(&self, world: &str, buf: PyBuffer) -> PyResult<PyWorkHandle> {
        self.0
            .iall_gather(world, buf.0)
            .map(PyWorkHandle)
            .map_err(err)
    }

    fn igather(&self, world: &str, buf: PyBuffer, root: u32) -> PyResult<PyWorkHandle> {
        self.0
            .igather(world, root, buf.0)
            .map(PyWorkHandle)
            .map_err(err)
    }

    /// `parts` is the root's list of per-rank buffers; other ranks pass None.
    #[pyo3(signature = (world, parts, root, dtype, len))]
    fn iscatter(
        &self,
        world: &str,
        parts: Option<Vec<PyBuffer>>,
        root: u32,
        dtype: &str,
        len: usize,
    ) -> PyResult<PyWorkHandle> {
        self.0
            .iscatter(world, root, self::parts(parts), self::dtype(dtype)?, len)
            .map(PyWorkHandle)
            .map_err(err)
    }

    fn send(&self, py: Python<'_>, world: &str, dst: u32, buf: PyBuffer) -> PyResult<()> {
        py.detach(|| self.0.send(world, dst, buf.0)).map_err(err)
    }

    fn recv(
        &self,
        py: Python<'_>,
        world: &str,
        src: u32,
        dtype: &str,
        len: usize,
    ) -> PyResult<PyBuffer> {
        let d = self::dtype(dtype)?;
        py.detach(|| self.0.recv(world, src, d, len))
            .map(PyBuffer)
            .map_err(err)
    }

    fn broadcast(
        &self,
        py: Python<'_>,
        world: &str,
        buf: PyBuffer,
        root: u32,
    ) -> PyResult<PyBuffer> {
        py.detach(|| self.0.broadcast(world, root, buf.0))
            .map(PyBuffer)
            .map_err(err)
    }

    #[pyo3(signature = (world, buf, op = "sum"))]
    fn all_reduce(
        &self,
        py: Python<'_>,
        world: &str,
        buf: PyBuffer,
        op: &str,
    ) -> PyResult<PyBuffer> {
        let op = reduce_op(op)?;
        py.detach(|| self.0.all_reduce(world, buf.0, op))
            .map(PyBuffer)
            .map_err(err)
    }

    /// The reduced buffer at the root, None elsewhere.
    #[pyo3(signature = (world, buf, root, op = "sum"))]
    fn reduce(
        &self,
        py: Python<'_>,
        world: &str,
        buf: PyBuffer,
        root: u32,
        op: &str,
    ) -> PyResult<Option<PyBuffer>> {
        let op = reduce_op(op)?;
        py.detach(|| self.0.reduce(world, root, buf.0, op))
            .map(|b| b.map(PyBuffer))
            .map_err(err)
    }

    fn all_gather(&self, py: Python<'_>, world: &str, buf: PyBuffer) -> PyResult<Vec<PyBuffer>> {
        py.detach(|| self.0.all_gather(world, buf.0))
            .map(|bs| bs.into_iter().map(PyBuffer).collect())
            .map_err(err)
    }

    fn gather(
        &self,
        py: Python<'_>,
        world: &str,
        buf: PyBuffer,
        root: u32,
    ) -> PyResult<Option<Vec<PyBuffer>>> {
        py.detach(|| self.0.gather(world, root, buf.0))
            .map(|bs| bs.map(|bs| bs.into_iter().map(PyBuffer).collect()))
            .map_err(err)
    }

    #[pyo3(signature = (world, parts, root, dtype, len))]
    fn scatter(
        &self,
        py: Python<'_>,
        world: &str,
        parts: Option<Vec<PyBuffer>>,
        root: u32,
        dtype: &str,
        len: usize,
    ) -> PyResult<PyBuffer> {
        let (d, ps) = (self::dtype(dtype)?, self::parts(parts));
        py.detach(|| self.0.scatter(world, root, ps, d, len))
            .map(PyBuffer)
            .map_err(err)
    }

    /// Index of a finished handle, failed ones included.
    #[pyo3(signature = (handles, timeout = None))]
    fn wait_any(
        &self,
        py: Python<'_>,
        handles: Vec<Bound<'_, PyWorkHandle>>,
        timeout: Option<f64>,
    ) -> PyResult<usize> {
        let t = secs(timeout)?;
        let hs: Vec<WorkHandle> = handles.iter().map(|h| h.get().0.clone()).collect();
        py.detach(|| self.0.wait_any(&hs, t)).map_err(err)
    }
}

/// Owns this process's worlds, its poller and its watchdog.
#[pyclass(name = "WorldManager", module = "multiworld", frozen)]
struct PyWorldManager(WorldManager);

#[pymethods]
impl PyWorldManager {
    /// Settings come from the MW_* environment variables; `poller_yield`
    /// overrides MW_POLLER_YIELD.
    #[new]
    #[pyo3(signature = (poller_yield = None))]
    fn new(poller_yield: Option<bool>) -> PyResult<Self> {
        let mut cfg = Config::from_env().map_err(err)?;
        if let Some(y) = poller_yield {
            cfg = cfg.with_poller(if y {
                PollerMode::Yield
            } else {
                PollerMode::Spin
            });
        }
        WorldManager::new(cfg).map(PyWorldManager).map_err(err)
    }

    #[pyo3(signature = (name, size, rank, store, bind = "127.0.0.1:0", timeout = None))]
    #[allow(clippy::too_many_arguments)]
    fn initialize_world(
        &self,
        py: Python<'_>,
        name: &str,
        size: u32,
        rank: u32,
        store: &str,
        bind: &str,
        timeout: Option<f64>,
    ) -> PyResult<()> {
        let t = secs(timeout)?;
        let d = WorldDescriptor::new(name, size, rank, store, bind);
        py.detach(|| self.0.initialize_world(d, t)).map_err(err)
    }

    fn remove_world(&self, py: Python<'_>, name: &str) -> PyResult<()> {
        py.detach(|| self.0.remove_world(name)).map_err(err)
    }

    fn world_status(&self, name: &str) -> PyResult<&'static str> {
        self.0.world_status(name).map(|s| s.name()).map_err(err)
    }

    fn worlds(&self) -> Vec<(String, &'static str)> {
        self.0
            .worlds()
            .into_iter()
            .map(|(w, s)| (w, s.name()))
            .collect()
    }

    fn communicator(&self) -> PyCommunicator {
        PyCommunicator(self.0.communicator())
    }

    fn shutdown(&self, py: Python<'_>) {
        py.detach(|| self.0.shutdown())
    }
}

/// Rendezvous store server running on background threads.
#[pyclass(name = "StoreServer", module = "multiworld", frozen)]
struct PyStoreServer(StoreServer);

#[pymethods]
impl PyStoreServer {
    #[new]
    #[pyo3(signature = (addr = "127.0.0.1:0"))]
    fn new(addr: &str) -> PyResult<Self> {
        StoreServer::bind(addr).map(PyStoreServer).map_err(err)
    }

    #[getter]
    fn address(&self) -> String {
        self.0.local_addr().to_string()
    }
}

#[pymodule]
#[pyo3(name = "multiworld")]
pub fn multiworld_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<PyBuffer>()?;
    m.add_class::<PyWorkHandle>()?;
    m.add_class::<PyCommunicator>()?;
    m.add_class::<PyWorldManager>()?;
    m.add_class::<PyStoreServer>()?;
    m.add("MultiworldError", py.get_type::<MultiworldError>())?;
    m.add("BrokenWorldError", py.get_type::<BrokenWorldError>())?;
    m.add("RemoteWorkerError", py.get_type::<RemoteWorkerError>())?;
    m.add(
        "OperationTimeoutError",
        py.get_type::<OperationTimeoutError>(),
    )?;
    Ok(())
}
