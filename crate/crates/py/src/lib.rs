use pyo3::prelude::*;

#[pymodule]
fn mrg_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
