use pyo3::prelude::*;
#[pymodule]
fn odefit_py(_m: &Bound<'_, PyModule>) -> PyResult<()> { Ok(()) }
