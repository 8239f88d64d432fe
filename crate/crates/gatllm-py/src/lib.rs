use pyo3::prelude::*;

#[pymodule]
fn gatllm_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
