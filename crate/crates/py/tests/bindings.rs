//! Drives the module through an embedded interpreter.

use nice::nice as nice_module;
use pyo3::prelude::*;

#[test]
fn module_from_python() {
    pyo3::append_to_inittab!(nice_module);
    Python::attach(|py| {
        let code = c"
import nice
spec = nice.QuantSpec(3, 5, 16)
assert (spec.bits_w, spec.bits_a, spec.bits_b) == (3, 5, 16)
q = nice.quantize_weights([0.26, -2.0], 0.9, 3)
assert abs(q[0] - 0.3) < 1e-12 and abs(q[1] + 0.9) < 1e-12
assert nice.quantize_activations([-1.0, 0.5], 1.0, 1) == [0.0, 1.0]
assert nice.decompose_scale(0.1) == (205, -11)
try:
    nice.decompose_scale(-1.0)
    raise AssertionError('negative scale accepted')
except ValueError:
    pass
cfg = nice.RunConfig.parse(open(path).read())
assert cfg.task == 'regression' and cfg.metric == 'psnr'
assert cfg.with_overrides(bits_w=3).quant.bits_w == 3
try:
    cfg.with_overrides(bits_w=1)
    raise AssertionError('1-bit weights accepted')
except ValueError:
    pass
";
        let globals = pyo3::types::PyDict::new(py);
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/denoise.toml");
        globals.set_item("path", path).unwrap();
        py.run(code, Some(&globals), None).unwrap();
    });
}
