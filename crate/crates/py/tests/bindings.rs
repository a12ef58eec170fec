use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &str) {
    Python::with_gil(|py| {
        let m = pyo3::wrap_pymodule!(csi_djscc_py::bindings)(py);
        let globals = PyDict::new_bound(py);
        globals.set_item("m", m).unwrap();
        py.run_bound(code, Some(&globals), None)
            .unwrap_or_else(|e| panic!("{}", e.value_bound(py)));
    });
}

#[test]
fn transforms_agree_with_numpy() {
    with_module(
        r#"
import numpy as np
h, _ = m.ChannelScenario.desk().generate(2, 1, 1, seed=5).split("train")
f = m.sf_to_ad(h[1])
ref = np.fft.fft(np.fft.ifft(h[1], axis=0, norm="ortho"), axis=1, norm="ortho")
assert np.abs(f - ref).max() < 1e-12
assert np.abs(m.ad_to_sf(f) - h[1]).max() < 1e-12
assert m.zero_pad(m.truncate(f, 16), 64).shape == (64, 16)
"#,
    );
}

#[test]
fn quantizer_and_link() {
    with_module(
        r#"
import numpy as np
q = m.Quantizer(3, mu=5.0)
x = np.linspace(-1, 1, 101)
i = q.quantize(x)
assert i.dtype == np.uint16 and i.max() < q.levels
s = m.power_normalize(np.arange(1, 9) + 1j)
assert abs((np.abs(s) ** 2).sum() - 8) < 1e-9
assert m.ideal_dimension(32, 10.0, 5) == 23
"#,
    );
}

#[test]
fn errors_become_python_exceptions() {
    with_module(
        r#"
import numpy as np
for bad in (lambda: m.Quantizer(1), lambda: m.truncate(np.zeros((4, 2), complex), 9),
            lambda: m.power_normalize(np.zeros(4, complex)), lambda: m.Dataset.load("/nonexistent/ds")):
    try:
        bad()
    except (ValueError, OSError):
        continue
    raise AssertionError("no exception")
"#,
    );
}
